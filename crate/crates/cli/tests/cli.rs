use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use augbpm::eval_stats::EvalReport;
use augbpm::experiment::{ExperimentConfig, Preset};
use augbpm::gan::{sidecar_path, AugmentedBpm};
use augbpm::probit_bpm::ProbitModel;
use augbpm::seed::content_hash;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn augbpm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_augbpm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p_column(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

/// A small, quick configuration for exercising the stages.
fn tiny_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::preset(Preset::Experiment2);
    cfg.sampling.existing_count = 200;
    cfg.sampling.target_count = 200;
    cfg.sampling.synthetic_ive_count = 200;
    cfg.gan.batch_size_m = 16;
    cfg.gan.hidden_width = 8;
    cfg.gan.epochs_n = epochs;
    cfg.gan.learning_rate_alpha = 1e-2;
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

fn prepare(config: &Path, out: &Path) {
    let c = config.to_str().unwrap();
    for stage in ["sample-bpm", "synth-ive", "train"] {
        let o = augbpm(&[stage, "--config", c], out);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
}

#[test]
fn sample_bpm_writes_requested_rows_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["sample-bpm", "--preset", "experiment2", "--which", "existing", "--count", "1000"];
    let o = augbpm(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let path = dir.path().join("existing_bpm.csv");
    let p = p_column(&path);
    assert_eq!(p.len(), 1000);
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(stderr(&o).lines().all(|l| l.starts_with('[')));

    let first = fs::read(&path).unwrap();
    fs::remove_file(&path).unwrap();
    assert!(augbpm(&args, dir.path()).status.success());
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn existing_curve_mean_matches_monte_carlo() {
    // Independent oracle: rejection-sampled truncated normal via Box-Muller.
    let model = ProbitModel::experiment2_existing();
    let mut rng = StdRng::seed_from_u64(99);
    let mut total = 0.0;
    let mut n = 0;
    while n < 1_000_000 {
        let (u1, u2): (f64, f64) = (rng.gen::<f64>().max(1e-300), rng.gen());
        let lux = 450.0 + 150.0 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if (200.0..=750.0).contains(&lux) {
            total += model.evaluate(lux).unwrap();
            n += 1;
        }
    }
    let oracle = total / n as f64;
    assert!((oracle - 0.089).abs() < 0.01, "oracle mean {oracle}");

    let dir = tempfile::tempdir().unwrap();
    let o = augbpm(&["sample-bpm", "--preset", "experiment2", "--which", "existing"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let p = p_column(&dir.path().join("existing_bpm.csv"));
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    assert!((mean - 0.089).abs() < 0.01, "sampled mean {mean}");
}

#[test]
fn synth_ive_logs_non_decreasing_objective() {
    let dir = tempfile::tempdir().unwrap();
    let o = augbpm(&["synth-ive", "--preset", "experiment2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stderr(&o);
    assert!(log.contains("180 events"));
    let trace: Vec<f64> = log
        .lines()
        .filter(|l| l.starts_with("[synth-ive] iteration"))
        .map(|l| l.split_whitespace().nth(4).unwrap().parse().unwrap())
        .collect();
    assert!(trace.len() > 1);
    assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    assert!(dir.path().join("synthetic_ive.csv").exists());
    assert!(dir.path().join("hmm.json").exists());
}

#[test]
fn one_epoch_trains_one_trace_row() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 1);
    prepare(&config, dir.path());
    let trace = fs::read_to_string(dir.path().join("training_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    assert!(dir.path().join("augmented_bpm.bin").exists());
}

#[test]
fn train_without_inputs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = augbpm(&["train", "--preset", "experiment2"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("[error]"));
}

#[test]
fn constant_generator_scores_half_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 1);
    prepare(&config, dir.path());
    let mut model = AugmentedBpm::load(&dir.path().join("augmented_bpm.bin")).unwrap();
    let zeros = vec![0.0; model.generator.net.n_parameters()];
    model.generator.net.set_parameters(&zeros).unwrap();
    let flat = dir.path().join("flat.bin");
    model.save(&flat).unwrap();

    let o = augbpm(
        &["evaluate", "--config", config.to_str().unwrap(), "--checkpoint", flat.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let expected = report.plot.iter().map(|r| (0.5 - r.target).abs()).sum::<f64>() / report.plot.len() as f64;
    assert!((report.mae_augmented - expected).abs() < 1e-12);
    assert!(report.plot.iter().all(|r| r.augmented == 0.5));
    assert_eq!(fs::read_to_string(dir.path().join("plot.csv")).unwrap().lines().count(), 102);
    assert!(report.reference.is_some());
}

#[test]
fn checkpoint_version_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 1);
    prepare(&config, dir.path());
    let ckpt = dir.path().join("augmented_bpm.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    fs::write(&ckpt, &bytes).unwrap();
    // Keep the sidecar hash consistent so the version check itself is reached.
    let sidecar = sidecar_path(&ckpt);
    let mut meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&sidecar).unwrap()).unwrap();
    meta["metadata"]["checkpoint_sha256"] = content_hash(&bytes).into();
    fs::write(&sidecar, meta.to_string()).unwrap();

    let o = augbpm(&["evaluate", "--config", config.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 1);
    prepare(&config, dir.path());
    let ckpt = dir.path().join("augmented_bpm.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&ckpt, &bytes).unwrap();
    let o = augbpm(&["evaluate", "--config", config.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
}

#[test]
fn needs_a_preset_or_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = augbpm(&["run"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--preset"));
    let o = augbpm(&["run", "--preset", "experiment9"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn invalid_config_exits_non_zero_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset(Preset::Experiment2);
    cfg.gan.batch_size_m = 0;
    let path = dir.path().join("bad.toml");
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    let out = dir.path().join("out");
    let o = augbpm(&["run", "--config", path.to_str().unwrap()], &out);
    assert!(!o.status.success());
    assert!(!out.join("manifest.json").exists());
}
