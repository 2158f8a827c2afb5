//! End-to-end behaviour of the harness commands on a tiny configuration.

use std::path::Path;

use hazeflow::harness::checkpoint::load_checkpoint;
use hazeflow::harness::{
    cmd_calibrate, cmd_evaluate, cmd_plot, cmd_predict, cmd_simulate, cmd_train, load_config, parse_config,
    ExperimentConfig, LossRow,
};
use hazeflow::metrics::PSNR_CAP_DB;
use hazeflow::{Error, ErrorKind, Raster};

const TOY: &str = include_str!("../../../configs/toy.toml");

fn tiny(workdir: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "dataset.signal.width=32",
        "dataset.signal.height=32",
        "dataset.signal.object_count_range=[2, 4]",
        "dataset.splits.train=4",
        "dataset.splits.val=1",
        "dataset.splits.test=2",
        "train.batch_size=2",
        "train.patch_size=32",
        "train.max_iterations=6",
        "train.checkpoint_every=3",
        "train.val_batches=1",
        "tiling.tile=32",
        "sample.n_samples=3",
        "sample.steps_t=4",
        "evaluation.k_list=[1, 2, 3]",
        "calibration.n_bins=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.push(format!("paths.workdir=\"{}\"", workdir.display()));
    o.extend(extra.iter().map(|s| s.to_string()));
    let cfg = parse_config(TOY, &o).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn shipped_configs_validate() {
    for name in ["toy.toml", "desk.toml"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        load_config(&path, &[]).unwrap();
    }
}

#[test]
fn simulate_split_sizes_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(
        dir.path(),
        &["dataset.splits.train=15", "dataset.splits.val=2", "dataset.splits.test=3"],
    );
    let out = cmd_simulate(&cfg).unwrap();
    assert_eq!(out.manifest.all_seeds().len(), 20);
    let mut seeds = out.manifest.all_seeds();
    seeds.dedup();
    assert_eq!(seeds.len(), 20);
    let first = files_under(&out.dataset_dir);
    assert_eq!(first.iter().filter(|(n, _)| n.ends_with(".hzr")).count(), 40);

    // rerun from the recorded run manifest
    let again = load_config(&out.run_manifest, &[]).unwrap();
    assert_eq!(again, cfg);
    cmd_simulate(&again).unwrap();
    assert_eq!(files_under(&out.dataset_dir), first);
}

#[test]
fn empty_train_split_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["dataset.splits.train=0", "dataset.splits.val=0", "dataset.splits.test=1"]);
    cmd_simulate(&cfg).unwrap();
    let err = cmd_train(&cfg, None).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(err.to_string().contains("empty train split"), "{err}");
}

#[test]
fn zero_iterations_saves_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["train.max_iterations=0"]);
    cmd_simulate(&cfg).unwrap();
    let out = cmd_train(&cfg, None).unwrap();
    assert_eq!(out.iterations, 0);
    assert!(LossRow::read_log(&out.loss_log).unwrap().is_empty());
    let ck = load_checkpoint::<f32>(&out.final_checkpoint).unwrap();
    let fresh = hazeflow::Trainer32::new(cfg.arch.clone(), cfg.train.config.clone()).unwrap();
    assert_eq!(ck.net.params(), fresh.net.params());
}

#[test]
fn resume_continues_the_log_and_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    cmd_simulate(&cfg).unwrap();
    let straight = cmd_train(&cfg, None).unwrap();
    let straight_params = load_checkpoint::<f32>(&straight.final_checkpoint).unwrap().net;
    let straight_log = LossRow::read_log(&straight.loss_log).unwrap();
    assert_eq!(straight_log.iter().map(|r| r.iteration).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    assert!(straight.best_checkpoint.is_some());

    let dir2 = tempfile::tempdir().unwrap();
    let half = tiny(dir2.path(), &["train.max_iterations=3"]);
    cmd_simulate(&half).unwrap();
    let first = cmd_train(&half, None).unwrap();
    let full = tiny(dir2.path(), &[]);
    let resumed = cmd_train(&full, Some(&first.final_checkpoint)).unwrap();
    assert_eq!(resumed.iterations, 6);
    let log = LossRow::read_log(&resumed.loss_log).unwrap();
    assert_eq!(log.iter().map(|r| r.iteration).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    for (a, b) in log.iter().zip(&straight_log) {
        assert!((a.loss - b.loss).abs() <= 1e-5 * b.loss.abs(), "{} vs {}", a.loss, b.loss);
    }
    let resumed_params = load_checkpoint::<f32>(&resumed.final_checkpoint).unwrap().net;
    assert_eq!(resumed_params.params(), straight_params.params());
}

#[test]
fn predict_calibrate_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    let sim = cmd_simulate(&cfg).unwrap();
    let ckpt = cmd_train(&cfg, None).unwrap().final_checkpoint;
    let test_dir = sim.dataset_dir.join("test");

    let out = dir.path().join("pred");
    let pred = cmd_predict(&cfg, &ckpt, &test_dir, &out).unwrap();
    assert_eq!(pred.predictions.entries.len(), 2);
    for e in &pred.predictions.entries {
        let n = std::fs::read_dir(&e.dir).unwrap().count();
        assert_eq!(n, 3 + 2, "k samples plus mmse and std");
        assert!(e.gt.is_some());
    }
    let again = dir.path().join("pred2");
    cmd_predict(&cfg, &ckpt, &test_dir, &again).unwrap();
    for e in &pred.predictions.entries {
        let other = again.join(&e.stem);
        assert_eq!(files_under(&e.dir), files_under(&other));
    }

    let cal = cmd_calibrate(&cfg, &out, &dir.path().join("cal"), Some(&out)).unwrap();
    assert_eq!(cal.n_bins, 8);
    assert_eq!(cal.k, 3);
    assert!(dir.path().join("cal/calibration.svg").is_file());
    assert!(out.join(&pred.predictions.entries[0].stem).join("std_calibrated.hzr").is_file());

    let ev_cfg = tiny(dir.path(), &["evaluation.t_list=[2, 4]", "evaluation.t_sweep_samples=2"]);
    let ev = cmd_evaluate(&ev_cfg, &out, Some(&ckpt), &dir.path().join("eval")).unwrap();
    assert_eq!(ev.mmse.per_image.len(), 2);
    assert!(ev.input.per_image.iter().all(|r| r.id.starts_with("input-psnr:")));
    assert_eq!(ev.k_sweep.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(ev.k_sweep[0].flag.is_some());
    assert_eq!(ev.t_sweep.len(), 2);
    let plots = cmd_plot(&dir.path().join("eval"), &dir.path().join("plots")).unwrap();
    assert_eq!(plots.len(), 2);
    let plots = cmd_plot(dir.path(), &dir.path().join("plots")).unwrap();
    assert_eq!(plots.len(), 1);
}

#[test]
fn single_sample_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["train.max_iterations=1", "sample.n_samples=1"]);
    let sim = cmd_simulate(&cfg).unwrap();
    let ckpt = cmd_train(&cfg, None).unwrap().final_checkpoint;
    let out = dir.path().join("pred");
    let pred = cmd_predict(&cfg, &ckpt, &sim.dataset_dir.join("test"), &out).unwrap();
    let std = Raster::<f32>::read(&pred.predictions.entries[0].std_path()).unwrap();
    assert!(std.as_slice().iter().all(|&v| v == 0.0));
    let err = cmd_calibrate(&cfg, &out, &dir.path().join("cal"), None).unwrap_err();
    assert!(err.to_string().contains("pixel_std is identically zero"), "{err}");
}

#[test]
fn evaluation_caps_exact_predictions_and_flags_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["train.max_iterations=1", "sample.n_samples=2"]);
    let sim = cmd_simulate(&cfg).unwrap();
    let ckpt = cmd_train(&cfg, None).unwrap().final_checkpoint;
    let out = dir.path().join("pred");
    let pred = cmd_predict(&cfg, &ckpt, &sim.dataset_dir.join("test"), &out).unwrap();
    for e in &pred.predictions.entries {
        let gt = Raster::<f32>::read(e.gt.as_ref().unwrap()).unwrap();
        gt.write(&e.mmse_path()).unwrap();
    }
    // second image: wrong shape
    Raster::<f32>::zeros(8, 8).write(&pred.predictions.entries[1].mmse_path()).unwrap();
    let ev = cmd_evaluate(&cfg, &out, None, &dir.path().join("eval")).unwrap();
    assert_eq!(ev.mmse.per_image.len(), 1);
    assert_eq!(ev.mmse.per_image[0].psnr_affine, PSNR_CAP_DB);
    assert_eq!(ev.mmse.per_image[0].psnr_fixed, PSNR_CAP_DB);
    assert_eq!(ev.flagged.len(), 1);
    assert_eq!(ev.flagged[0].id, pred.predictions.entries[1].stem);
}

#[test]
fn mismatched_checkpoint_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["train.max_iterations=0"]);
    let sim = cmd_simulate(&cfg).unwrap();
    let ckpt = cmd_train(&cfg, None).unwrap().final_checkpoint;
    let other = tiny(dir.path(), &["arch.base_channels=4"]);
    let err = cmd_predict(&other, &ckpt, &sim.dataset_dir.join("test"), &dir.path().join("p")).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
    assert_eq!(err.kind(), ErrorKind::Incompatible);
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["train.learning_rate=1e30", "train.grad_clip=0.0", "train.max_iterations=50"]);
    cmd_simulate(&cfg).unwrap();
    let err = cmd_train(&cfg, None).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Divergence, "{err}");
    let last = cfg.paths.checkpoint_dir().join("last_good.hzck");
    let ck = load_checkpoint::<f32>(&last).unwrap();
    assert!(ck.net.params().values().iter().all(|v| v.is_finite()));
}
