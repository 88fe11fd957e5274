mod common;

use std::path::Path;

use common::{read_tree, tiny_config};
use ndarray::s;
use ssct_bench::calibrate::{calibrate, Calibration};
use ssct_bench::config::{run_name, ExperimentConfig, Split, Variant};
use ssct_bench::dataset::{generate, load_split};
use ssct_bench::evaluate::{evaluate, evaluate_run, read_metrics, BASELINE_LABEL};
use ssct_bench::report::{build_table, report, Flag};
use ssct_bench::sweep::sweep;
use ssct_bench::tensorfile::TensorFile;
use ssct_bench::train::{fit, loss_context, read_summary, train, FitSetup, CHECKPOINT_DIR, LOG_FILE};
use ssct_bench::BenchError;
use ssct_core::losses::{LossSpec, Method};

fn prepared(root: &Path) -> ExperimentConfig {
    let cfg = tiny_config(root);
    generate(&cfg, false).unwrap();
    calibrate(&cfg).unwrap();
    cfg
}

fn log_rows(run_dir: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(run_dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn generation_is_deterministic_and_covers_every_variant() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg_a = tiny_config(a.path());
    let cfg_b = tiny_config(b.path());
    generate(&cfg_a, false).unwrap();
    generate(&cfg_b, false).unwrap();
    let data_a = read_tree(&cfg_a.layout().data_dir());
    assert_eq!(data_a, read_tree(&cfg_b.layout().data_dir()));

    let layout = cfg_a.layout();
    for v in Variant::ALL {
        for split in Split::ALL {
            let rows = if v.limited() { 12 } else { 24 };
            let n = cfg_a.dataset.split_size(split);
            let raw = TensorFile::read(&layout.raw(v, split)).unwrap();
            assert_eq!(raw.dims(), &[n as u64, rows, 24]);
        }
    }
    // The limited scan is the leading half of the complete one.
    let full = TensorFile::read(&layout.sino(Variant::CompleteBlur, Split::Train)).unwrap().into_array3().unwrap();
    let lim = TensorFile::read(&layout.sino(Variant::LimitedBlur, Split::Train)).unwrap().into_array3().unwrap();
    assert_eq!(full.slice(s![.., ..12, ..]), lim);

    let mut other = tiny_config(b.path());
    other.seed = 8;
    assert!(matches!(generate(&other, false), Err(BenchError::OutputExists(_))));
    generate(&other, true).unwrap();
    assert_ne!(data_a, read_tree(&other.layout().data_dir()));
}

#[test]
fn loaded_splits_carry_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    generate(&cfg, false).unwrap();
    let train = load_split(&cfg.layout(), Variant::Limited, Split::Train).unwrap();
    assert_eq!(train.len(), 2);
    assert_eq!(train[0].sino.dim(), (12, 24));
    let truth = train[0].truth.as_ref().unwrap();
    assert_eq!(truth.dim(), (16, 16));
    assert!(truth.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn calibration_recovers_the_detector_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let layout = cfg.layout();
    let sharp = Calibration::load(&layout, false).unwrap();
    let blurred = Calibration::load(&layout, true).unwrap();
    assert!(sharp.blur_sigma < 0.1, "sharp detector sigma {}", sharp.blur_sigma);
    assert!((0.7..=0.9).contains(&blurred.blur_sigma), "blurred sigma {}", blurred.blur_sigma);
    for c in [&sharp, &blurred] {
        assert!((c.gain - 1.0).abs() < 0.1, "gain {}", c.gain);
        assert!(c.noise_std > 0.0 && c.sinogram_noise_std > 0.0);
    }
    let before = std::fs::read(layout.calibration(true)).unwrap();
    calibrate(&cfg).unwrap();
    assert_eq!(before, std::fs::read(layout.calibration(true)).unwrap());
}

#[test]
fn missing_calibration_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    generate(&cfg, false).unwrap();
    let err = train(&cfg, &LossSpec::new(Method::Sure), false).unwrap_err();
    assert!(matches!(err, BenchError::Missing { .. }), "{err}");
    // Methods without noise models train without calibration.
    train(&cfg, &LossSpec::new(Method::N2i), false).unwrap();
}

#[test]
fn training_is_deterministic_and_keeps_the_best_checkpoint() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut runs = Vec::new();
    for root in [a.path(), b.path()] {
        let mut cfg = prepared(root);
        cfg.optimizer.max_epochs = 4;
        cfg.optimizer.patience = 4;
        let (run_dir, summary) = train(&cfg, &LossSpec::new(Method::S2i), false).unwrap();
        runs.push((read_tree(&run_dir), summary.clone()));

        let rows = log_rows(&run_dir);
        assert_eq!(rows.len(), summary.epochs_run + 1);
        let vals: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
        let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(summary.best_val_loss, best);
        assert_eq!(vals[summary.best_epoch], best);
        // No earlier epoch beats the kept one.
        assert!(vals[..summary.best_epoch].iter().all(|&v| v > best));
        assert_eq!(read_summary(&run_dir).unwrap(), summary);
        assert!(matches!(
            train(&cfg, &LossSpec::new(Method::S2i), false),
            Err(BenchError::OutputExists(_))
        ));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn zero_patience_stops_at_the_first_stale_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path());
    cfg.optimizer.lr = 0.5;
    cfg.optimizer.max_epochs = 30;
    cfg.optimizer.patience = 0;
    let (run_dir, summary) = train(&cfg, &LossSpec::new(Method::N2i), false).unwrap();
    assert_eq!(summary.stop_reason, "patience");
    assert!(summary.epochs_run < 30);
    let rows = log_rows(&run_dir);
    let improved: Vec<&str> = rows.iter().map(|r| r[5].as_str()).collect();
    assert_eq!(improved.last(), Some(&"0"));
    assert!(improved[..improved.len() - 1].iter().all(|&f| f == "1"));
}

#[test]
fn e2i_training_makes_two_calls_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path());
    cfg.optimizer.batch_size = 1;
    let epochs = cfg.optimizer.max_epochs as u64;
    let spec = LossSpec::new(Method::E2i).with_lambda(1.0);
    let (run_dir, s) = train(&cfg, &spec, false).unwrap();
    assert_eq!(s.epochs_run as u64, epochs);
    assert_eq!(s.batches_per_epoch, 2);
    assert_eq!(s.nn_calls_per_loss, 2);
    assert_eq!(s.train_nn_calls, 2 * epochs * s.batches_per_epoch as u64);
    // Validation runs once before training and once per epoch.
    assert_eq!(s.val_nn_calls, 2 * (epochs + 1) * cfg.dataset.val as u64);
    let last = log_rows(&run_dir).pop().unwrap();
    assert_eq!(last[3].parse::<u64>().unwrap(), s.train_nn_calls);
    assert_eq!(last[4].parse::<u64>().unwrap(), s.val_nn_calls);
}

#[test]
fn divergence_aborts_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let layout = cfg.layout();
    let variant = cfg.run.variant;
    let mut train_set = load_split(&layout, variant, Split::Train).unwrap();
    let val = load_split(&layout, variant, Split::Val).unwrap();
    train_set[1].sino[[3, 5]] = f64::NAN;
    let spec = LossSpec::new(Method::S2i);
    let ctx = loss_context(&cfg, variant, spec.method).unwrap();
    let run_dir = dir.path().join("nan-run");
    let setup = FitSetup {
        ctx: &ctx,
        spec: &spec,
        network: &cfg.network,
        optimizer: &cfg.optimizer,
        seed: cfg.seed,
        run_dir: &run_dir,
    };
    let err = fit(&setup, &train_set, &val).unwrap_err();
    assert!(matches!(err, BenchError::Diverged { epoch: 1, .. }), "{err}");
    assert!(run_dir.join(CHECKPOINT_DIR).join("network.toml").exists());
    let s = read_summary(&run_dir).unwrap();
    assert_eq!(s.best_epoch, 0);
    assert!(s.stop_reason.starts_with("diverged"));
    assert!(s.best_val_loss.is_finite());
}

#[test]
fn singleton_sweep_selects_its_only_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path());
    cfg.loss = LossSpec::new(Method::Rei);
    cfg.sweep.lambdas = vec![0.5];
    let r = sweep(&cfg, false).unwrap();
    assert_eq!(r.best, 0);
    assert_eq!(r.best_lambda(), 0.5);
    let layout = cfg.layout();
    let csv = std::fs::read_to_string(layout.sweep_summary(cfg.run.variant, Method::Rei)).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().ends_with(",1"));
    let bare = read_metrics(&layout.metrics(cfg.run.variant, "REI", Split::Test)).unwrap();
    assert_eq!(bare, r.selected);

    cfg.loss = LossSpec::new(Method::S2i);
    assert!(matches!(sweep(&cfg, true), Err(BenchError::Config(_))));
}

#[test]
fn sweeps_write_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path());
    cfg.loss = LossSpec::new(Method::E2i);
    cfg.run.variant = Variant::Limited;
    cfg.optimizer.max_epochs = 1;
    cfg.optimizer.patience = 1;
    let r = sweep(&cfg, false).unwrap();
    assert_eq!(r.entries.len(), 2);
    let csv = std::fs::read_to_string(cfg.layout().sweep_summary(Variant::Limited, Method::E2i)).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().filter(|l| l.ends_with(",1")).count(), 1);
    let means: Vec<f64> = r.entries.iter().map(|e| e.validation.psnr.mean).collect();
    assert!(means.iter().all(|&m| m <= means[r.best]));
}

#[test]
fn baseline_evaluation_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    generate(&cfg, false).unwrap();
    cfg.run.baseline = true;
    let (path, m) = evaluate(&cfg).unwrap();
    assert!(path.ends_with(format!("complete/{BASELINE_LABEL}_test.csv")));
    assert_eq!(m.psnr_values.len(), 2);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 + 2);
    assert_eq!(read_metrics(&path).unwrap(), m);
    let mean = m.psnr_values.iter().sum::<f64>() / 2.0;
    assert!((m.psnr.mean - mean).abs() < 1e-12);

    cfg.run.baseline = false;
    assert!(matches!(evaluate(&cfg), Err(BenchError::Missing { .. })));
}

#[test]
fn tampered_metric_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    generate(&cfg, false).unwrap();
    cfg.run.baseline = true;
    let (path, _) = evaluate(&cfg).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\n0,", "\n0,1", 1);
    std::fs::write(&path, tampered).unwrap();
    assert!(matches!(read_metrics(&path), Err(BenchError::Format(_))));
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path());
    cfg.optimizer.max_epochs = 1;
    cfg.optimizer.patience = 1;
    let spec = LossSpec::new(Method::N2i);
    train(&cfg, &spec, false).unwrap();
    evaluate_run(&cfg, cfg.run.variant, Some(&spec), Split::Test, &run_name(&spec)).unwrap();
    cfg.network.base_channels = 4;
    let err = evaluate_run(&cfg, cfg.run.variant, Some(&spec), Split::Test, &run_name(&spec)).unwrap_err();
    assert!(matches!(err, BenchError::CheckpointMismatch(_)), "{err}");
}

#[test]
fn single_result_reports_as_a_one_cell_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    generate(&cfg, false).unwrap();
    cfg.run.baseline = true;
    evaluate(&cfg).unwrap();
    let t = report(&cfg).unwrap();
    assert_eq!(t.rows, vec![BASELINE_LABEL.to_string()]);
    assert_eq!(t.columns, vec![Variant::Complete]);
    let cell = t.cell(BASELINE_LABEL, Variant::Complete).unwrap();
    assert_eq!((cell.psnr_flag, cell.ssim_flag), (Flag::Best, Flag::Best));
    let csv = std::fs::read_to_string(cfg.layout().report_dir().join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(cfg.layout().report_dir().join("table.txt").exists());
}

#[test]
fn reports_need_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    std::fs::create_dir_all(cfg.layout().results_dir()).unwrap();
    assert!(matches!(report(&cfg), Err(BenchError::Missing { .. })));
}

/// Runs every stage on a fresh directory and returns all metric files.
fn full_pipeline(root: &Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut cfg = prepared(root);
    cfg.optimizer.max_epochs = 2;
    cfg.optimizer.patience = 2;
    for variant in [Variant::Complete, Variant::Limited] {
        cfg.run.variant = variant;
        cfg.run.baseline = true;
        evaluate(&cfg).unwrap();
        cfg.run.baseline = false;
        for method in [Method::S2i, Method::P2p] {
            cfg.loss = LossSpec::new(method);
            train(&cfg, &cfg.loss, false).unwrap();
            evaluate(&cfg).unwrap();
        }
        cfg.loss = LossSpec::new(Method::E2i);
        sweep(&cfg, false).unwrap();
    }
    report(&cfg).unwrap();
    let mut files = read_tree(&cfg.layout().results_dir());
    files.extend(
        read_tree(&cfg.layout().report_dir())
            .into_iter()
            .map(|(k, v)| (Path::new("report").join(k), v)),
    );
    files
}

#[test]
fn full_pipelines_reproduce_their_metric_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = full_pipeline(a.path());
    assert_eq!(first, full_pipeline(b.path()));
    assert!(first.keys().any(|k| k.ends_with("E2I_test.csv")));

    let t = build_table(&tiny_config(a.path()).layout().results_dir(), Split::Test).unwrap();
    for c in 0..t.columns.len() {
        let flags: Vec<Flag> = t.cells.iter().filter_map(|r| r[c].as_ref()).map(|x| x.psnr_flag).collect();
        assert_eq!(flags.iter().filter(|&&f| f == Flag::Best).count(), 1);
        assert_eq!(flags.iter().filter(|&&f| f == Flag::Second).count(), 1);
    }
}
