use std::sync::Arc;

use framegen_core::denoiser::{ModelBundle32, ModelConfig};
use framegen_core::engine::EngineOptions;
use framegen_core::metrics::*;
use framegen_core::scene::{build_environment, sample_trajectory, Dataset, PaletteFamily};
use framegen_core::Tensor32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ssim_is_symmetric_and_psnr_decreasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor32::uniform(&[3, 16, 16], 0.5, &mut rng).map(|v| v + 0.5);
    let b = Tensor32::uniform(&[3, 16, 16], 0.5, &mut rng).map(|v| v + 0.5);
    assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let mut last = f64::INFINITY;
    for m in [1e-6, 1e-4, 1e-2, 0.5, 1.0] {
        let p = psnr_from_mse(m);
        assert!(p < last);
        last = p;
    }
}

#[test]
fn drift_curves() {
    let f = Tensor32::full(&[3, 12, 12], 0.5);
    let g = Tensor32::full(&[3, 12, 12], 0.6);
    let curve = drift_curve(&vec![f.clone(); 20], &vec![g.clone(); 20]).unwrap();
    assert_eq!(curve.len(), 20);
    assert!(curve.psnr_smoothed.iter().all(|&v| (v - curve.psnr[0]).abs() < 1e-9));
    assert!(drift_curve(&[f], &[]).is_err());
    let r = MetricReport::from_series(vec![10.0, 20.0], vec![0.5, 0.7]);
    assert_eq!((r.mean_psnr, r.mean_ssim), (15.0, 0.6));
}

fn bundle(size: usize) -> Arc<ModelBundle32> {
    let mut b = ModelBundle32::new(ModelConfig::new(size, size, 8).with_lora_rank(2), 0).unwrap();
    b.control_enabled = true;
    Arc::new(b)
}

#[test]
fn ablation_harness_is_paired_and_reports_deltas() {
    let scene = build_environment(PaletteFamily::Warm, 2);
    let ds = Dataset::render(&scene, &sample_trajectory(&scene, 6, 2), 16, 16).unwrap();
    let configs = vec![
        AblationConfig { label: "full".into(), bundle: bundle(16), irradiance: true },
        AblationConfig { label: "same".into(), bundle: bundle(16), irradiance: true },
        AblationConfig { label: "no_irradiance".into(), bundle: bundle(16), irradiance: false },
    ];
    let r = run_ablation(&configs, &ds.frames, 5, 3).unwrap();
    assert_eq!(r.reference, "full");
    assert_eq!(r.get("full").unwrap().delta_psnr, 0.0);
    assert_eq!(r.get("same").unwrap().report, r.get("full").unwrap().report);
    assert_eq!(r.get("full").unwrap().drift.len(), 5);
    let e = r.get("no_irradiance").unwrap();
    assert_eq!(e.delta_psnr, e.report.mean_psnr - r.get("full").unwrap().report.mean_psnr);

    let dir = tempfile::tempdir().unwrap();
    r.write_json(&dir.path().join("a.json")).unwrap();
    r.write_csv(&dir.path().join("a.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("label,mean_psnr,mean_ssim,delta_psnr,delta_ssim"));
    assert_eq!(csv.lines().count(), 4);
    write_drift_csv(&dir.path().join("d.csv"), &e.drift).unwrap();
    let series = [Series { values: &e.drift.psnr, color: [200, 30, 30] }];
    plot_curves(&series, &dir.path().join("d.png")).unwrap();
    assert!(image::open(dir.path().join("d.png")).is_ok());

    let mismatched = vec![
        AblationConfig { label: "full".into(), bundle: bundle(16), irradiance: true },
        AblationConfig { label: "big".into(), bundle: bundle(32), irradiance: true },
    ];
    assert!(run_ablation(&mismatched, &ds.frames, 5, 3).is_err());
}

#[test]
fn ood_report_carries_both_families() {
    let scene = build_environment(PaletteFamily::Cold, 4);
    let ds = Dataset::render(&scene, &sample_trajectory(&scene, 5, 4), 16, 16).unwrap();
    let r = ood_eval(bundle(16), PaletteFamily::Warm, PaletteFamily::Cold, &ds.frames, 4, EngineOptions::default()).unwrap();
    assert_eq!((r.train_family, r.eval_family), (PaletteFamily::Warm, PaletteFamily::Cold));
    assert_eq!(r.drift.len(), 4);
    let s = &r.drift.psnr_smoothed;
    assert_eq!(r.early_late_delta, s[0] - s[3]);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"warm\"") && json.contains("\"cold\""));
    assert!(ood_eval(bundle(16), PaletteFamily::Cold, PaletteFamily::Cold, &ds.frames, 4, EngineOptions::default()).is_err());
}
