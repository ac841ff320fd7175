use std::path::Path;
use std::process::Command as Process;

use beamspace::checkpoint::load_checkpoint;
use beamspace::cli::{run, Cli};
use beamspace::commands::{EvalRow, GradcheckRow, OracleRow, TRAIN_LOG};
use beamspace::dataset::{load_manifest, load_scene};
use beamspace::export::{band_average, read_csv, ActivationRow, BeampatternRow};
use beamspace_core::sim::angular_difference;
use beamspace_core::taylor::EpochLog;
use clap::Parser;
use tempfile::TempDir;

fn cli(args: &[&str]) -> beamspace::Result<()> {
    let argv = std::iter::once("beamspace").chain(args.iter().copied());
    run(&Cli::try_parse_from(argv).expect("arguments parse"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--out", p(dir)];
    args.extend_from_slice(extra);
    cli(&args).unwrap();
}

#[test]
fn simulate_writes_the_requested_scenes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, &["--bucket", "90-180", "--n", "20", "--seed", "7", "--duration", "0.2"]);
    let manifest = load_manifest(&d).unwrap();
    assert_eq!(manifest.len(), 20);
    for e in &manifest {
        assert_eq!(e.noise_doas.len(), 1);
        let diff = angular_difference(e.target_doa, e.noise_doas[0]);
        assert!((90.0 - 1e-9..=180.0 + 1e-9).contains(&diff), "{e:?}");
        for ext in ["wav", "target.wav", "noise.wav", "json"] {
            assert!(d.join(format!("{}.{ext}", e.id)).is_file());
        }
    }
}

#[test]
fn simulate_is_byte_for_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = ["--bucket", "90-180", "--n", "4", "--seed", "7", "--duration", "0.2", "--reverb"];
    simulate(&a, &args);
    simulate(&b, &args);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4 * 5 + 1);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn set_b_noise_counts_stay_in_range() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, &["--bucket", "set-B", "--noises", "1-3", "--n", "30", "--seed", "3", "--duration", "0.1"]);
    let manifest = load_manifest(&d).unwrap();
    let counts: Vec<usize> = manifest.iter().map(|e| e.noise_doas.len()).collect();
    assert!(counts.iter().all(|c| (1..=3).contains(c)));
    // 30 draws over three counts make a missing count vanishingly unlikely
    for c in 1..=3 {
        assert!(counts.contains(&c), "{counts:?}");
    }
    let (scene, _) = load_scene(&d, &manifest[0]).unwrap();
    assert_eq!(scene.spec.unwrap().noise_doas.len(), counts[0]);
}

#[test]
fn simulate_rejects_bad_buckets_and_paths() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    assert!(cli(&["simulate", "--out", p(&d), "--bucket", "40-20"]).is_err());
    assert!(cli(&["simulate", "--out", p(&d), "--bucket", "0-15", "--noises", "2-3"]).is_err());
    let file = tmp.path().join("plain");
    std::fs::write(&file, b"x").unwrap();
    assert!(cli(&["simulate", "--out", p(&file.join("d")), "--n", "1", "--duration", "0.1"]).is_err());
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"dataset": {"n_scenes": 3, "duration_s": 0.1, "bucket": "0-15"}}"#).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cli(&["--config", p(&cfg), "simulate", "--out", p(&a)]).unwrap();
    cli(&["simulate", "--out", p(&b), "--config", p(&cfg), "--n", "5"]).unwrap();
    assert_eq!(load_manifest(&a).unwrap().len(), 3);
    let m = load_manifest(&b).unwrap();
    assert_eq!(m.len(), 5);
    assert!(m.iter().all(|e| e.bucket == "0-15"));

    std::fs::write(&cfg, r#"{"dataset": {"n_scenes": 3, "scenes": 4}}"#).unwrap();
    assert!(cli(&["--config", p(&cfg), "simulate", "--out", p(&a)]).is_err());
}

#[test]
fn delay_and_sum_pattern_is_distortionless_and_complete() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bp.csv");
    cli(&["beampattern", "--out", p(&out), "--regime", "ds", "--beams", "0,5", "--grid-step", "1"]).unwrap();
    let rows: Vec<BeampatternRow> = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 2 * 161 * 360);
    let at = |beam: usize, f: f64, doa: f64| rows.iter().find(|r| r.beam == beam && r.freq_hz == f && r.doa_deg == doa).unwrap().gain_db;
    assert!(at(0, 2000.0, 0.0).abs() < 1e-9);
    // beam 5 of 36 looks at 50°
    assert!(at(5, 2000.0, 50.0).abs() < 1e-9);
    assert!(rows.iter().all(|r| r.gain_db <= 1e-9));
}

#[test]
fn saved_dictionaries_plot_identically() {
    let tmp = TempDir::new().unwrap();
    let (dict, a, b) = (tmp.path().join("sd.bspt"), tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    let common = ["--beams", "3", "--freqs", "500,2000,7000", "--grid-step", "5"];
    let mut args = vec!["beampattern", "--out", p(&a), "--regime", "sd", "--save-dictionary", p(&dict)];
    args.extend_from_slice(&common);
    cli(&args).unwrap();
    let mut args = vec!["beampattern", "--out", p(&b), "--input", p(&dict)];
    args.extend_from_slice(&common);
    cli(&args).unwrap();
    let (ra, rb): (Vec<BeampatternRow>, Vec<BeampatternRow>) = (read_csv(&a).unwrap(), read_csv(&b).unwrap());
    assert_eq!(ra.len(), 3 * 72);
    assert_eq!(ra, rb);
}

#[test]
fn beampattern_rejects_missing_and_corrupt_files() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bp.csv");
    let bad = tmp.path().join("bad.bspt");
    assert!(cli(&["beampattern", "--out", p(&out), "--input", p(&bad)]).is_err());
    std::fs::write(&bad, b"BSPTNSR1 truncated").unwrap();
    assert!(cli(&["beampattern", "--out", p(&out), "--input", p(&bad)]).is_err());
    assert!(!out.exists());
}

#[test]
fn oracle_mvdr_nulls_the_interferer() {
    let tmp = TempDir::new().unwrap();
    let (d, w) = (tmp.path().join("d"), tmp.path().join("w"));
    simulate(&d, &["--bucket", "60-120", "--n", "1", "--seed", "5", "--snr-min", "0", "--snr-max", "0", "--duration", "1"]);
    cli(&["oracle-eval", "--data", p(&d), "--out", p(&tmp.path().join("o.csv")), "--weights-out", p(&w)]).unwrap();
    let e = &load_manifest(&d).unwrap()[0];
    let out = tmp.path().join("mvdr.csv");
    let input = w.join(format!("{}.mvdr.bspt", e.id));
    cli(&["beampattern", "--out", p(&out), "--input", p(&input), "--grid-step", "1"]).unwrap();
    let rows: Vec<BeampatternRow> = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 161 * 360);
    let avg = band_average(&rows, 0, 200.0, 7000.0);
    let (null, _) = avg.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert!(angular_difference(*null, e.noise_doas[0]) <= 5.0, "null at {null} vs {}", e.noise_doas[0]);
}

#[test]
fn wiener_filter_does_not_degrade_a_near_clean_dataset() {
    let rows = near_clean_scores();
    assert_eq!(rows.len(), 7);
    for r in &rows {
        assert!(r.mwf_improvement_db > -0.5, "{r:?}");
    }
    let mean = rows.last().unwrap();
    assert_eq!(mean.scene, "mean");
    assert!(mean.mwf_improvement_db >= 0.0, "{mean:?}");
}

// At the fixed relative loading the MVDR is strongly superdirective below ~300 Hz, and the
// narrowband mismatch of the STFT target there leaks into the output at roughly -30 dB.
#[test]
#[ignore = "MVDR target distortion near DC exceeds the 0.5 dB budget at 40 dB SNR; see README"]
fn mvdr_does_not_degrade_a_near_clean_dataset() {
    let rows = near_clean_scores();
    for r in &rows {
        assert!(r.mvdr_improvement_db > -0.5, "{r:?}");
    }
    assert!(rows.last().unwrap().mvdr_improvement_db >= 0.0);
}

fn near_clean_scores() -> Vec<OracleRow> {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, &["--bucket", "set-b", "--n", "6", "--seed", "11", "--snr-min", "40", "--snr-max", "40", "--duration", "1"]);
    let out = tmp.path().join("o.csv");
    cli(&["oracle-eval", "--data", p(&d), "--out", p(&out)]).unwrap();
    read_csv(&out).unwrap()
}

#[test]
fn wiener_filter_leads_mvdr_on_single_noise_scenes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, &["--bucket", "45-90", "--n", "8", "--seed", "4", "--snr-min", "0", "--snr-max", "0", "--duration", "1"]);
    let out = tmp.path().join("o.csv");
    cli(&["oracle-eval", "--data", p(&d), "--out", p(&out)]).unwrap();
    let mean = read_csv::<OracleRow>(&out).unwrap().pop().unwrap();
    assert_eq!(mean.bucket, "45-90");
    assert!(mean.mvdr_improvement_db > 5.0, "{mean:?}");
    assert!(mean.mwf_db >= mean.mvdr_db, "{mean:?}");
}

#[test]
fn oracle_eval_needs_a_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o.csv");
    assert!(cli(&["oracle-eval", "--data", p(tmp.path()), "--out", p(&out)]).is_err());
}

fn tiny_dataset(tmp: &TempDir) -> std::path::PathBuf {
    let d = tmp.path().join("d");
    simulate(&d, &["--bucket", "set-b", "--n", "4", "--seed", "1", "--duration", "0.25"]);
    d
}

const SMALL_MODEL: [&str; 6] = ["--beams", "4", "--regime", "f2", "--batch-size", "2"];

#[test]
fn training_records_its_order() {
    let tmp = TempDir::new().unwrap();
    let d = tiny_dataset(&tmp);
    for q in ["0", "3"] {
        let out = tmp.path().join(format!("q{q}"));
        let mut args = vec!["train", "--data", p(&d), "--out", p(&out), "--Q", q, "--epochs", "1", "--seed", "9"];
        args.extend_from_slice(&SMALL_MODEL);
        cli(&args).unwrap();
        let ckpt = load_checkpoint(&out).unwrap();
        assert_eq!(ckpt.manifest.config.order.to_string(), q);
        assert_eq!(ckpt.model.modules.len(), ckpt.manifest.config.order);
        assert_eq!(ckpt.manifest.epoch, 1);
        let log: Vec<EpochLog> = read_csv(&out.join(TRAIN_LOG)).unwrap();
        assert_eq!(log.len(), 1);
        assert!(log[0].train_loss.is_finite() && log[0].val_loss.is_finite());
        assert!(out.join("config.json").is_file());
    }
}

#[test]
fn training_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tiny_dataset(&tmp);
    let logs: Vec<Vec<EpochLog>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let mut args = vec!["train", "--data", p(&d), "--out", p(&out), "--order", "1", "--epochs", "2"];
            args.extend_from_slice(&SMALL_MODEL);
            cli(&args).unwrap();
            read_csv(&out.join(TRAIN_LOG)).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert_eq!(
        std::fs::read(tmp.path().join("a/params.bspt")).unwrap(),
        std::fs::read(tmp.path().join("b/params.bspt")).unwrap()
    );
}

#[test]
fn untrained_model_evaluates_as_its_zeroth_order() {
    let tmp = TempDir::new().unwrap();
    let d = tiny_dataset(&tmp);
    let ckpt = tmp.path().join("m");
    let mut args = vec!["train", "--data", p(&d), "--out", p(&ckpt), "--Q", "3", "--epochs", "0"];
    args.extend_from_slice(&SMALL_MODEL);
    cli(&args).unwrap();
    let (full, zeroth, acts) = (tmp.path().join("full.csv"), tmp.path().join("q0.csv"), tmp.path().join("g.csv"));
    cli(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&d), "--out", p(&full), "--activations", p(&acts)]).unwrap();
    cli(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&d), "--out", p(&zeroth), "--Q", "0"]).unwrap();
    let (full, zeroth): (Vec<EvalRow>, Vec<EvalRow>) = (read_csv(&full).unwrap(), read_csv(&zeroth).unwrap());
    let spare = tmp.path().join("q4.csv");
    assert_eq!(full.len(), 1);
    assert_eq!(full[0].scenes, 4);
    assert_eq!((full[0].order, zeroth[0].order), (3, 0));
    assert_eq!(full[0].enhanced_db, zeroth[0].enhanced_db);
    assert_eq!(full[0].noisy_db, zeroth[0].noisy_db);
    let g: Vec<ActivationRow> = read_csv(&acts).unwrap();
    let frames = g.iter().map(|r| r.frame).max().unwrap() + 1;
    assert_eq!(g.len(), frames * 4);
    assert!(cli(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&d), "--out", p(&spare), "--Q", "4"]).is_err());
}

#[test]
fn evaluate_reports_each_bucket() {
    let tmp = TempDir::new().unwrap();
    let d = tiny_dataset(&tmp);
    let ckpt = tmp.path().join("m");
    let mut args = vec!["train", "--data", p(&d), "--out", p(&ckpt), "--Q", "1", "--epochs", "0"];
    args.extend_from_slice(&SMALL_MODEL);
    cli(&args).unwrap();
    // relabel half the scenes to get two buckets
    let path = d.join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\"set-b:1-3\"", "\"other\"", 2)).unwrap();
    let out = tmp.path().join("e.csv");
    cli(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&d), "--out", p(&out)]).unwrap();
    let rows: Vec<EvalRow> = read_csv(&out).unwrap();
    let labels: Vec<(&str, usize)> = rows.iter().map(|r| (r.bucket.as_str(), r.scenes)).collect();
    assert_eq!(labels, [("other", 2), ("set-b:1-3", 2), ("all", 4)]);
}

#[test]
fn gradcheck_gate_passes_and_reports() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("g.csv");
    cli(&["gradcheck", "--seeds", "1", "--out", p(&out)]).unwrap();
    let rows: Vec<GradcheckRow> = read_csv(&out).unwrap();
    assert!(rows.iter().all(|r| r.passed && r.max_relative_error < r.tolerance));
    assert_eq!(rows.iter().filter(|r| r.check.starts_with("taylor model")).count(), 5);
}

#[test]
fn exit_status_follows_the_outcome() {
    let tmp = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_beamspace");
    let ok = Process::new(bin).args(["simulate", "--n", "1", "--duration", "0.1", "--out"]).arg(tmp.path().join("d")).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let bad = Process::new(bin).args(["simulate", "--bucket", "200-300", "--out"]).arg(tmp.path().join("e")).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));
    let missing = Process::new(bin).args(["oracle-eval", "--data"]).arg(tmp.path().join("nope")).arg("--out").arg(tmp.path().join("o.csv")).output().unwrap();
    assert!(!missing.status.success());
}
