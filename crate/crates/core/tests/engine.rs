use std::sync::Arc;

use framegen_core::conditioning::compute_irradiance;
use framegen_core::denoiser::{ModelBundle32, ModelConfig};
use framegen_core::engine::{Engine, EngineOptions};
use framegen_core::scene::{build_environment, sample_trajectory, Dataset, GBufferFrame, PaletteFamily};
use framegen_core::Tensor32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Bundle with every branch active and no exactly-zero tensors, so the
/// previous frame and control stack both reach the output.
fn bundle() -> Arc<ModelBundle32> {
    let mut b = ModelBundle32::new(ModelConfig::new(16, 16, 8).with_lora_rank(2), 3).unwrap();
    b.control_enabled = true;
    b.lora_enabled = true;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<_> = b.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let v = b.params.value(id);
        if v.max_abs() == 0.0 {
            let t = Tensor32::uniform(v.shape(), 0.05, &mut rng);
            b.params.set_value(id, t).unwrap();
        }
    }
    Arc::new(b)
}

fn frames(n: usize) -> Vec<GBufferFrame> {
    let scene = build_environment(PaletteFamily::Warm, 11);
    Dataset::render(&scene, &sample_trajectory(&scene, n, 11), 16, 16).unwrap().frames
}

fn engine(b: &Arc<ModelBundle32>, f0: &GBufferFrame, options: EngineOptions) -> Engine {
    let mut e = Engine::new(b.clone(), options);
    e.init(&f0.rgb, &f0.basecolor).unwrap();
    e
}

#[test]
fn split_rollout_equals_single_rollout() {
    let (b, fs) = (bundle(), frames(7));
    let opts = EngineOptions { master_seed: 5, ..Default::default() };
    let whole = engine(&b, &fs[0], opts).rollout(&fs[1..7], true).unwrap();
    let mut e = engine(&b, &fs[0], opts);
    let mut split = e.rollout(&fs[1..3], true).unwrap();
    split.extend(e.rollout(&fs[3..7], true).unwrap());
    assert_eq!(whole.frames, split.frames);
    assert_eq!(whole.psnr, split.psnr);
    assert_eq!(e.state().unwrap().counter, 6);
    let one = engine(&b, &fs[0], opts).rollout(&fs[1..2], false).unwrap();
    assert_eq!(one.frames.len(), 1);
    assert!(one.psnr.is_empty());
}

#[test]
fn autoregressive_mode_never_reads_ground_truth() {
    let (b, fs) = (bundle(), frames(5));
    let mut corrupted = fs.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for f in &mut corrupted[1..] {
        f.rgb = Tensor32::uniform(&[3, 16, 16], 0.5, &mut rng).map(|v| v + 0.5);
    }
    let opts = EngineOptions::default();
    let a = engine(&b, &fs[0], opts).rollout(&fs[1..], false).unwrap();
    let c = engine(&b, &fs[0], opts).rollout(&corrupted[1..], false).unwrap();
    assert_eq!(a.frames, c.frames);

    let tf = EngineOptions { teacher_forced: true, ..opts };
    let t = engine(&b, &fs[0], tf).rollout(&fs[1..], false).unwrap();
    assert_eq!(t.frames[0], a.frames[0]);
    assert_ne!(t.frames[1..], a.frames[1..]);
}

#[test]
fn outputs_are_deterministic_and_in_range() {
    let (b, fs) = (bundle(), frames(4));
    let opts = EngineOptions { master_seed: 9, ..Default::default() };
    let x = engine(&b, &fs[0], opts).rollout(&fs[1..], true).unwrap();
    let y = engine(&b, &fs[0], opts).rollout(&fs[1..], true).unwrap();
    assert_eq!(x.frames, y.frames);
    for f in &x.frames {
        assert_eq!(f.shape(), &[3, 16, 16]);
        assert!(f.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
    assert_eq!(x.millis.len(), 3);
    let z = engine(&b, &fs[0], EngineOptions { master_seed: 10, ..opts }).rollout(&fs[1..], true).unwrap();
    assert_ne!(x.frames, z.frames);
}

#[test]
fn first_step_uses_initial_frame_irradiance() {
    let (b, fs) = (bundle(), frames(3));
    let mut e = engine(&b, &fs[0], EngineOptions::default());
    let out = e.step(&fs[1]).unwrap();
    assert_eq!(out.control.irradiance(), compute_irradiance(&fs[0].rgb, &fs[0].basecolor).unwrap());

    let mut off = engine(&b, &fs[0], EngineOptions { irradiance: false, ..Default::default() });
    for f in &fs[1..] {
        assert!(off.step(f).unwrap().control.irradiance().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn init_contract() {
    let (b, fs) = (bundle(), frames(3));
    let mut e = Engine::new(b.clone(), EngineOptions::default());
    assert!(e.step(&fs[1]).is_err());
    let mut bad = fs[0].rgb.clone();
    bad.data_mut()[0] = 1.5;
    assert!(e.init(&bad, &fs[0].basecolor).is_err());
    assert!(e.init(&fs[0].rgb, &Tensor32::zeros(&[3, 8, 8])).is_err());
    e.init(&fs[0].rgb, &fs[0].basecolor).unwrap();
    e.step(&fs[1]).unwrap();
    e.step(&fs[2]).unwrap();
    assert_eq!(e.state().unwrap().counter, 2);
    e.init(&fs[0].rgb, &fs[0].basecolor).unwrap();
    assert_eq!(e.state().unwrap().counter, 0);
    let small = GBufferFrame::zeros(8, 8);
    assert!(e.step(&small).is_err());
}
