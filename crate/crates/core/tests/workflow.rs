use mvm_core::baselines::HornSchunckConfig;
use mvm_core::data::{load_study, save_study};
use mvm_core::metrics::{pearson, DEFAULT_ROI_PAD};
use mvm_core::phantom::{analytic_longitudinal_mms, analytic_radial_mms, generate_phantom, PhantomParams};
use mvm_core::pipeline::{downsample_and_fill, score_interpolation, summarize};
use mvm_core::temporal_interp::{FlowFiller, LinearFiller};
use mvm_core::velocity::global_curves;

fn params() -> PhantomParams {
    PhantomParams {
        num_frames: 20,
        seed: 17,
        ..PhantomParams::default()
    }
}

#[test]
fn study_survives_disk_round_trip() {
    let st = generate_phantom(&params()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_study(&st, dir.path()).unwrap();
    assert_eq!(load_study(dir.path()).unwrap(), st);
}

#[test]
fn phantom_curves_follow_analytic_motion() {
    let p = params();
    let st = generate_phantom(&p).unwrap();
    let c = global_curves(&st).unwrap();
    let radial: Vec<f64> = (0..p.num_frames).map(|t| analytic_radial_mms(&p, t)).collect();
    let long: Vec<f64> = (0..p.num_frames).map(|t| analytic_longitudinal_mms(&p, t)).collect();
    assert!(pearson(&c.radial, &radial).unwrap() > 0.99);
    assert!(pearson(&c.longitudinal, &long).unwrap() > 0.99);
}

#[test]
fn baselines_reconstruct_missing_frames() {
    let st = generate_phantom(&params()).unwrap();
    for k in [1, 2] {
        let lin = summarize(&score_interpolation(&downsample_and_fill(&LinearFiller, &st, k).unwrap(), &st, k, DEFAULT_ROI_PAD).unwrap());
        let flow = FlowFiller(HornSchunckConfig::default());
        let op = summarize(&score_interpolation(&downsample_and_fill(&flow, &st, k).unwrap(), &st, k, DEFAULT_ROI_PAD).unwrap());
        for s in [&lin, &op] {
            assert!(s["dice"].mean > 0.8, "k={k} dice {}", s["dice"].mean);
            assert!(s["psnr"].mean.is_finite() && s["psnr"].mean > 15.0);
            assert!(s["ssim"].mean > 0.5);
        }
    }
}

#[test]
fn zero_k_is_identity() {
    let st = generate_phantom(&params()).unwrap();
    let out = downsample_and_fill(&LinearFiller, &st, 0).unwrap();
    assert_eq!(out, st);
    let s = summarize(&score_interpolation(&out, &st, 0, DEFAULT_ROI_PAD).unwrap());
    assert_eq!(s["mse"].mean, 0.0);
    assert_eq!(s["dice"].mean, 1.0);
    assert_eq!(s["psnr"].std, 0.0);
}
