use std::sync::Arc;
use std::time::Instant;

use framegen_core::denoiser::{ModelBundle32, ModelConfig};
use framegen_core::engine::{Engine, EngineOptions};
use framegen_core::scene::{build_environment, render_frame, sample_trajectory, PaletteFamily};

/// Per-frame generation time at a few resolutions and widths.
fn main() {
    let scene = build_environment(PaletteFamily::Warm, 0);
    let poses = sample_trajectory(&scene, 9, 0).poses;
    for (res, width) in [(32usize, 8usize), (64, 8), (64, 16)] {
        let mut bundle = ModelBundle32::new(ModelConfig::new(res, res, width), 0).unwrap();
        bundle.control_enabled = true;
        bundle.lora_enabled = true;
        let frames: Vec<_> = poses.iter().map(|c| render_frame(&scene, c, res, res).unwrap()).collect();
        let mut engine = Engine::new(Arc::new(bundle), EngineOptions::default());
        engine.init(&frames[0].rgb, &frames[0].basecolor).unwrap();
        let start = Instant::now();
        engine.rollout(&frames[1..], false).unwrap();
        let per = start.elapsed().as_secs_f64() / (frames.len() - 1) as f64;
        println!("{res}x{res} width {width}: {:.1} ms per frame", per * 1e3);
    }
}
