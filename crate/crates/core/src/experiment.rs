//! End-to-end experiment runs driven by a TOML config.
//!
//! A run has four stages that communicate only through files in the output
//! directory:
//!
//! | stage        | writes                                                        |
//! |--------------|---------------------------------------------------------------|
//! | `sample-bpm` | `existing_bpm.csv`, `target.csv`                              |
//! | `synth-ive`  | `ive_corpus.csv`, `hmm.json`, `hmm_trace.csv`, `synthetic_ive.csv` |
//! | `train`      | `assembled.csv`, `augmented_bpm.bin(.json)`, `training_trace.csv` |
//! | `evaluate`   | `report.txt`, `report.json`, `metrics.csv`, `plot.csv`        |
//!
//! Each stage records its artifacts' SHA-256 hashes and wall time in
//! `manifest.json`. Files are written under a `.partial` name and renamed
//! once complete. Stage seeds are derived from the master seed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    concat, impute_contextual_factors, write_assembled_csv, FeatureRow, ImputeMode, Provenance,
};
use crate::error::{Error, Result};
use crate::eval_stats::{build_report, EvalReport, ModelSeries, TTestKind};
use crate::gan::{self, predict, AugmentedBpm, GanConfig, Probe, ProgressSink, StopReason, TraceRow};
use crate::ive_hmm::{
    baum_welch, generate_example_corpus, init_from_counts, load_ive_csv, read_synthetic_csv, synthesize,
    write_ive_csv, write_synthetic_csv, BaumWelchOptions, Hmm, IlluminanceLevel, IntermediateLeaving, IveCorpus,
    Occupancy, SyntheticIveRecord, N_OBSERVATIONS, N_SWITCH_STATES,
};
use crate::probit_bpm::{
    read_bpm_csv, sample_dataset, write_bpm_csv, IlluminanceDistribution, ProbitModel,
};
use crate::seed::{content_hash, derive_seed};

pub const EXISTING_BPM_CSV: &str = "existing_bpm.csv";
pub const TARGET_CSV: &str = "target.csv";
pub const IVE_CORPUS_CSV: &str = "ive_corpus.csv";
pub const HMM_JSON: &str = "hmm.json";
pub const HMM_TRACE_CSV: &str = "hmm_trace.csv";
pub const SYNTHETIC_IVE_CSV: &str = "synthetic_ive.csv";
pub const ASSEMBLED_CSV: &str = "assembled.csv";
pub const CHECKPOINT: &str = "augmented_bpm.bin";
pub const TRAINING_TRACE_CSV: &str = "training_trace.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const PLOT_CSV: &str = "plot.csv";
pub const CONFIG_ECHO: &str = "config.toml";
pub const MANIFEST: &str = "manifest.json";

pub const DEFAULT_MASTER_SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSettings {
    pub existing_count: usize,
    pub target_count: usize,
    pub synthetic_ive_count: usize,
    pub impute_mode: ImputeMode,
}

impl Default for SamplingSettings {
    fn default() -> Self {
        SamplingSettings {
            existing_count: 2000,
            target_count: 2000,
            synthetic_ive_count: 2000,
            impute_mode: ImputeMode::Joint,
        }
    }
}

/// Where the IVE events come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum IveSource {
    /// The built-in 36-session example corpus, seeded from the master seed.
    GenerateExample,
    /// An event CSV; relative paths resolve against the config file.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmSettings {
    pub smoothing: f64,
    /// Length of each sampled synthetic sequence.
    pub seq_len: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for HmmSettings {
    fn default() -> Self {
        let bw = BaumWelchOptions::default();
        HmmSettings {
            smoothing: bw.smoothing,
            seq_len: 5,
            max_iters: bw.max_iters,
            tol: bw.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub alpha: f64,
    pub test: TTestKind,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            alpha: 0.05,
            test: TTestKind::Paired,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub existing_bpm: ProbitModel,
    pub target: ProbitModel,
    #[serde(default)]
    pub illuminance: IlluminanceDistribution,
    #[serde(default)]
    pub sampling: SamplingSettings,
    pub ive: IveSource,
    #[serde(default)]
    pub hmm: HmmSettings,
    /// `gan.seed` is ignored; the training seed derives from `seed`.
    #[serde(default)]
    pub gan: GanConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

fn default_seed() -> u64 {
    DEFAULT_MASTER_SEED
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Experiment1,
    Experiment2,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Experiment1 => "experiment1",
            Preset::Experiment2 => "experiment2",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "experiment1" => Ok(Preset::Experiment1),
            "experiment2" => Ok(Preset::Experiment2),
            other => Err(format!("unknown preset `{other}` (expected experiment1 or experiment2)")),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let (existing_bpm, target) = match preset {
            Preset::Experiment1 => (ProbitModel::experiment1_existing(), ProbitModel::experiment1_target()),
            Preset::Experiment2 => (ProbitModel::experiment2_existing(), ProbitModel::experiment2_target()),
        };
        ExperimentConfig {
            name: preset.name().to_owned(),
            seed: DEFAULT_MASTER_SEED,
            output_dir: PathBuf::from("out").join(preset.name()),
            existing_bpm,
            target,
            illuminance: IlluminanceDistribution::default(),
            sampling: SamplingSettings::default(),
            ive: IveSource::GenerateExample,
            hmm: HmmSettings::default(),
            gan: GanConfig::default(),
            eval: EvalSettings::default(),
        }
    }

    /// Swaps in the scaled-down GAN schedule; other GAN settings are kept.
    pub fn with_desk_scale(mut self) -> Self {
        let desk = GanConfig::desk_scale();
        self.gan.batch_size_m = desk.batch_size_m;
        self.gan.epochs_n = desk.epochs_n;
        self.gan.learning_rate_alpha = desk.learning_rate_alpha;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let IveSource::Csv { path: csv } = &mut cfg.ive {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("experiment name must not be empty".into()));
        }
        self.existing_bpm.validate()?;
        self.target.validate()?;
        self.illuminance.validate()?;
        let s = &self.sampling;
        if s.existing_count == 0 || s.target_count == 0 || s.synthetic_ive_count == 0 {
            return Err(Error::Config("sampling counts must be at least 1".into()));
        }
        if self.hmm.seq_len == 0 || !(self.hmm.smoothing >= 0.0) || !(self.hmm.tol >= 0.0) {
            return Err(Error::Config("hmm needs seq_len >= 1 and non-negative smoothing and tol".into()));
        }
        self.gan.validate()?;
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            return Err(Error::Config("eval.alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    fn gan_config(&self) -> GanConfig {
        GanConfig {
            seed: self.stage_seed("train"),
            ..self.gan.clone()
        }
    }
}

fn log(stage: &str, msg: impl AsRef<str>) {
    eprintln!("[{stage}] {}", msg.as_ref());
}

/// Writes `path` via a `.partial` sibling and an atomic rename.
fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let mut name = path.as_os_str().to_owned();
    name.push(".partial");
    let partial = PathBuf::from(name);
    let result = (|| {
        let mut out = BufWriter::new(File::create(&partial)?);
        write(&mut out)?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&partial);
        return Err(Error::io(path, e));
    }
    fs::rename(&partial, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
}

/// Provenance of an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub experiment: String,
    pub master_seed: u64,
    pub stages: Vec<StageRecord>,
    /// SHA-256 of every artifact, keyed by file name.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        Manifest {
            crate_version: env!("CARGO_PKG_VERSION").to_owned(),
            experiment: cfg.name.clone(),
            master_seed: cfg.seed,
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn load(out_dir: &Path) -> Result<Option<Self>> {
        let path = out_dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Records a finished stage and hashes its artifacts.
    fn record(cfg: &ExperimentConfig, out_dir: &Path, stage: &str, started: Instant, files: &[&str]) -> Result<()> {
        let mut manifest = match Manifest::load(out_dir)? {
            Some(m) if m.experiment == cfg.name && m.master_seed == cfg.seed => m,
            _ => Manifest::new(cfg),
        };
        manifest.stages.retain(|s| s.stage != stage);
        manifest.stages.push(StageRecord {
            stage: stage.to_owned(),
            seconds: started.elapsed().as_secs_f64(),
        });
        for f in files {
            let path = out_dir.join(f);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            manifest.artifacts.insert((*f).to_owned(), content_hash(&bytes));
        }
        let json = serde_json::to_string_pretty(&manifest)?;
        write_atomic(&out_dir.join(MANIFEST), |w| writeln!(w, "{json}"))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BpmWhich {
    Existing,
    Target,
    #[default]
    Both,
}

impl std::str::FromStr for BpmWhich {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "existing" => Ok(BpmWhich::Existing),
            "target" => Ok(BpmWhich::Target),
            "both" => Ok(BpmWhich::Both),
            other => Err(format!("unknown dataset `{other}` (expected existing, target or both)")),
        }
    }
}

/// Samples the existing-BPM and/or target datasets.
pub fn cmd_sample_bpm(cfg: &ExperimentConfig, out_dir: &Path, which: BpmWhich, count: Option<usize>) -> Result<()> {
    const STAGE: &str = "sample-bpm";
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let started = Instant::now();
    let mut files = Vec::new();
    let jobs = [
        (BpmWhich::Existing, &cfg.existing_bpm, cfg.sampling.existing_count, EXISTING_BPM_CSV, "sample-existing"),
        (BpmWhich::Target, &cfg.target, cfg.sampling.target_count, TARGET_CSV, "sample-target"),
    ];
    for (kind, model, default_count, file, seed_name) in jobs {
        if which != BpmWhich::Both && which != kind {
            continue;
        }
        let n = count.unwrap_or(default_count);
        let samples = sample_dataset(model, &cfg.illuminance, n, cfg.stage_seed(seed_name))?;
        write_atomic(&out_dir.join(file), |w| write_bpm_csv(&samples, w))?;
        let mean = samples.iter().map(|s| s.p_switch_on).sum::<f64>() / n as f64;
        log(STAGE, format!("wrote {n} rows to {file} (mean p_switch_on {mean:.4})"));
        files.push(file);
    }
    Manifest::record(cfg, out_dir, STAGE, started, &files)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub hmm: Hmm,
    pub objective_trace: Vec<f64>,
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    pub records: Vec<SyntheticIveRecord>,
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<(IveCorpus, bool)> {
    match &cfg.ive {
        IveSource::GenerateExample => Ok((
            IveCorpus::from_records(generate_example_corpus(cfg.stage_seed("ive-corpus"))),
            true,
        )),
        IveSource::Csv { path } => Ok((load_ive_csv(path)?, false)),
    }
}

/// Fits the switch-state HMM to the IVE corpus and samples synthetic records.
pub fn cmd_synth_ive(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SynthSummary> {
    const STAGE: &str = "synth-ive";
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let started = Instant::now();
    let mut files = Vec::new();
    let (corpus, generated) = load_corpus(cfg)?;
    if generated {
        write_atomic(&out_dir.join(IVE_CORPUS_CSV), |w| write_ive_csv(&corpus.records, w))?;
        files.push(IVE_CORPUS_CSV);
    }
    let sessions = corpus.sessions().len();
    log(STAGE, format!("corpus has {} events in {sessions} sessions", corpus.records.len()));

    let h = &cfg.hmm;
    let hmm0 = init_from_counts(&corpus.labelled_sequences(), N_SWITCH_STATES, N_OBSERVATIONS, h.smoothing)?;
    let fit = baum_welch(
        &hmm0,
        &corpus.observation_sequences(),
        &BaumWelchOptions {
            max_iters: h.max_iters,
            tol: h.tol,
            smoothing: h.smoothing,
        },
    )?;
    for (i, (obj, ll)) in fit.objective_trace.iter().zip(&fit.log_likelihood_trace).enumerate() {
        log(STAGE, format!("iteration {i} objective {obj:.6} log_likelihood {ll:.6}"));
    }
    log(
        STAGE,
        format!("baum-welch {} after {} iterations", if fit.converged { "converged" } else { "stopped" }, fit.iterations),
    );
    let json = serde_json::to_string_pretty(&fit.hmm)?;
    write_atomic(&out_dir.join(HMM_JSON), |w| writeln!(w, "{json}"))?;
    write_atomic(&out_dir.join(HMM_TRACE_CSV), |w| {
        writeln!(w, "iteration,objective,log_likelihood")?;
        for (i, (obj, ll)) in fit.objective_trace.iter().zip(&fit.log_likelihood_trace).enumerate() {
            writeln!(w, "{i},{obj},{ll}")?;
        }
        Ok(())
    })?;

    let records = synthesize(
        &fit.hmm,
        cfg.sampling.synthetic_ive_count,
        h.seq_len,
        cfg.stage_seed("synth-ive"),
    )?;
    write_atomic(&out_dir.join(SYNTHETIC_IVE_CSV), |w| write_synthetic_csv(&records, w))?;
    log(STAGE, format!("wrote {} synthetic records", records.len()));
    files.extend([HMM_JSON, HMM_TRACE_CSV, SYNTHETIC_IVE_CSV]);
    Manifest::record(cfg, out_dir, STAGE, started, &files)?;
    Ok(SynthSummary {
        hmm: fit.hmm,
        objective_trace: fit.objective_trace,
        log_likelihood_trace: fit.log_likelihood_trace,
        converged: fit.converged,
        records,
    })
}

/// The most common `(occupancy, leaving)` pair among occupied records, or
/// among all records when none are occupied. Ties go to the lower codes.
pub fn probe_factors(records: &[SyntheticIveRecord]) -> Result<(Occupancy, IntermediateLeaving)> {
    if records.is_empty() {
        return Err(Error::Config("no synthetic IVE records".into()));
    }
    let occupied: Vec<&SyntheticIveRecord> = records
        .iter()
        .filter(|r| r.occupancy == Occupancy::Occupancy)
        .collect();
    let pool: Vec<&SyntheticIveRecord> = if occupied.is_empty() {
        records.iter().collect()
    } else {
        occupied
    };
    let mut counts: BTreeMap<(Occupancy, IntermediateLeaving), usize> = BTreeMap::new();
    for r in pool {
        *counts.entry((r.occupancy, r.intermediate_leaving)).or_default() += 1;
    }
    let best = counts.values().copied().max().expect("pool is non-empty");
    Ok(*counts.iter().find(|(_, &c)| c == best).expect("max exists").0)
}

/// Switch-on frequency of the synthetic IVE data as a function of lux.
///
/// At each discrete work level the curve takes the fraction of records with
/// the light on, restricted to the probe factors when any such record exists
/// at that level. Between levels it is linear, and constant outside them.
#[derive(Debug, Clone, PartialEq)]
pub struct IveCurve {
    pub knots: Vec<(f64, f64)>,
}

impl IveCurve {
    pub fn fit(records: &[SyntheticIveRecord], occupancy: Occupancy, leaving: IntermediateLeaving) -> Result<Self> {
        let mut knots = Vec::new();
        for &level in IlluminanceLevel::ALL {
            let at_level: Vec<&SyntheticIveRecord> = records.iter().filter(|r| r.work_illum == level).collect();
            let matching: Vec<&SyntheticIveRecord> = at_level
                .iter()
                .copied()
                .filter(|r| r.occupancy == occupancy && r.intermediate_leaving == leaving)
                .collect();
            let pool = if matching.is_empty() { at_level } else { matching };
            if pool.is_empty() {
                continue;
            }
            let on = pool.iter().filter(|r| r.light_on).count() as f64 / pool.len() as f64;
            knots.push((level.lux(), on));
        }
        if knots.is_empty() {
            return Err(Error::Config("synthetic IVE data has no usable work levels".into()));
        }
        Ok(IveCurve { knots })
    }

    pub fn evaluate(&self, lux: f64) -> f64 {
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if lux <= first.0 {
            return first.1;
        }
        if lux >= last.0 {
            return last.1;
        }
        let k = self.knots.windows(2).find(|w| lux <= w[1].0).expect("lux lies inside the knots");
        let (x0, y0) = k[0];
        let (x1, y1) = k[1];
        y0 + (y1 - y0) * (lux - x0) / (x1 - x0)
    }
}

fn build_probe(cfg: &ExperimentConfig, synthetic: &[SyntheticIveRecord]) -> Result<Probe> {
    let (occ, leave) = probe_factors(synthetic)?;
    let target = cfg.target;
    let probe = Probe::grid(occ, leave, |l| target.evaluate(l).unwrap_or(f64::NAN));
    if probe.target_p.iter().any(|p| !p.is_finite()) {
        return Err(Error::Domain("target curve is not finite on the probe grid".into()));
    }
    Ok(probe)
}

fn read_inputs(out_dir: &Path) -> Result<(Vec<crate::probit_bpm::BpmSample>, Vec<crate::probit_bpm::BpmSample>, Vec<SyntheticIveRecord>)> {
    let need = |f: &str| {
        let p = out_dir.join(f);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Usage(format!(
                "{} is missing; run the sample-bpm and synth-ive stages first",
                p.display()
            )))
        }
    };
    Ok((
        read_bpm_csv(&need(EXISTING_BPM_CSV)?)?,
        read_bpm_csv(&need(TARGET_CSV)?)?,
        read_synthetic_csv(&need(SYNTHETIC_IVE_CSV)?)?,
    ))
}

struct TrainLogger;

impl ProgressSink for TrainLogger {
    fn on_trace(&mut self, r: &TraceRow) {
        log(
            "train",
            format!(
                "epoch {} value_fn {:.6} d_loss {:.6} g_loss {:.6} probe_mae {:.6}",
                r.epoch, r.value_fn, r.d_loss, r.g_loss, r.probe_mae
            ),
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub model: AugmentedBpm,
    pub trace: Vec<TraceRow>,
    pub initial_probe_mae: f64,
    pub final_probe_mae: f64,
}

/// Imputes contextual factors, trains the GAN and writes the checkpoint.
///
/// A non-finite loss still writes the last finite generator and the trace
/// before the error is returned.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainSummary> {
    const STAGE: &str = "train";
    cfg.validate()?;
    let started = Instant::now();
    let (existing, target, synthetic) = read_inputs(out_dir)?;
    let mode = cfg.sampling.impute_mode;
    let bpm_rows = impute_contextual_factors(&existing, &synthetic, mode, cfg.stage_seed("impute-existing"))?;
    let target_rows = impute_contextual_factors(&target, &synthetic, mode, cfg.stage_seed("impute-target"))?;
    let ive_rows: Vec<FeatureRow> = synthetic.iter().map(FeatureRow::from).collect();

    let mut assembled = concat(&bpm_rows, &ive_rows, cfg.stage_seed("concat"))?;
    assembled.rows.extend_from_slice(&target_rows);
    assembled.provenance.extend(std::iter::repeat(Provenance::Target).take(target_rows.len()));
    write_atomic(&out_dir.join(ASSEMBLED_CSV), |w| write_assembled_csv(&assembled, w))?;

    let probe = build_probe(cfg, &synthetic)?;
    let gcfg = cfg.gan_config();
    log(
        STAGE,
        format!(
            "m={} n={} alpha={} r={} on {} existing, {} IVE and {} target rows",
            gcfg.batch_size_m,
            gcfg.epochs_n,
            gcfg.learning_rate_alpha,
            gcfg.regularization_r,
            bpm_rows.len(),
            ive_rows.len(),
            target_rows.len()
        ),
    );
    let out = gan::train(&gcfg, &bpm_rows, &ive_rows, &target_rows, &probe, &mut TrainLogger)?;

    let bytes = out.model.checkpoint_bytes();
    let sidecar = out.model.sidecar_json(&bytes)?;
    let ckpt = out_dir.join(CHECKPOINT);
    write_atomic(&ckpt, |w| w.write_all(&bytes))?;
    write_atomic(&gan::sidecar_path(&ckpt), |w| w.write_all(sidecar.as_bytes()))?;
    write_atomic(&out_dir.join(TRAINING_TRACE_CSV), |w| gan::write_trace_csv(&out.trace, w))?;
    let sidecar_name = format!("{CHECKPOINT}.json");
    Manifest::record(
        cfg,
        out_dir,
        STAGE,
        started,
        &[ASSEMBLED_CSV, CHECKPOINT, &sidecar_name, TRAINING_TRACE_CSV],
    )?;
    log(
        STAGE,
        format!(
            "probe MAE {:.6} -> {:.6} after {} epochs",
            out.initial_probe_mae, out.final_probe_mae, out.model.metadata.final_epoch
        ),
    );
    if let StopReason::NonFinite { epoch, what } = &out.model.metadata.stop_reason {
        return Err(Error::NonFinite {
            epoch: *epoch,
            what: format!("{what}; last finite generator saved to {}", ckpt.display()),
        });
    }
    Ok(TrainSummary {
        model: out.model,
        trace: out.trace,
        initial_probe_mae: out.initial_probe_mae,
        final_probe_mae: out.final_probe_mae,
    })
}

/// Scores a checkpoint against the target on the probe grid.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out_dir: &Path, checkpoint: Option<&Path>) -> Result<EvalReport> {
    const STAGE: &str = "evaluate";
    cfg.validate()?;
    let started = Instant::now();
    let ckpt = checkpoint.map_or_else(|| out_dir.join(CHECKPOINT), Path::to_path_buf);
    let model = AugmentedBpm::load(&ckpt)?;
    let synth_path = out_dir.join(SYNTHETIC_IVE_CSV);
    if !synth_path.exists() {
        return Err(Error::Usage(format!("{} is missing; run synth-ive first", synth_path.display())));
    }
    let synthetic = read_synthetic_csv(&synth_path)?;
    let probe = build_probe(cfg, &synthetic)?;
    let (occ, leave) = probe_factors(&synthetic)?;
    let curve = IveCurve::fit(&synthetic, occ, leave)?;
    let lux: Vec<f64> = probe.rows.iter().map(|r| r.work_lux).collect();
    let augmented = predict(&model, &probe.rows)?;
    let existing = lux
        .iter()
        .map(|&l| cfg.existing_bpm.evaluate(l))
        .collect::<Result<Vec<f64>>>()?;
    let ive: Vec<f64> = lux.iter().map(|&l| curve.evaluate(l)).collect();
    let report = build_report(
        &cfg.name,
        ModelSeries {
            augmented: &augmented,
            existing: &existing,
            ive: &ive,
            target: &probe.target_p,
            point_ids: &lux,
        },
        &crate::eval_stats::ReportOptions {
            alpha: cfg.eval.alpha,
            test: cfg.eval.test,
        },
    )?;
    write_atomic(&out_dir.join(REPORT_TXT), |w| report.write_text(w))?;
    write_atomic(&out_dir.join(METRICS_CSV), |w| report.write_metrics_csv(w))?;
    write_atomic(&out_dir.join(PLOT_CSV), |w| report.write_plot_csv(w))?;
    let json = serde_json::to_string_pretty(&report)?;
    write_atomic(&out_dir.join(REPORT_JSON), |w| writeln!(w, "{json}"))?;
    for line in report.to_text().lines() {
        log(STAGE, line);
    }
    Manifest::record(cfg, out_dir, STAGE, started, &[REPORT_TXT, METRICS_CSV, PLOT_CSV, REPORT_JSON])?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub synth: SynthSummary,
    pub train: TrainSummary,
    pub report: EvalReport,
    pub manifest: Manifest,
}

/// Runs every stage in order into `out_dir`, starting a fresh manifest.
pub fn cmd_run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let manifest_path = out_dir.join(MANIFEST);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let started = Instant::now();
    let toml = cfg.to_toml_string()?;
    write_atomic(&out_dir.join(CONFIG_ECHO), |w| w.write_all(toml.as_bytes()))?;
    Manifest::record(cfg, out_dir, "config", started, &[CONFIG_ECHO])?;
    log("run", format!("experiment {} seed {} into {}", cfg.name, cfg.seed, out_dir.display()));

    cmd_sample_bpm(cfg, out_dir, BpmWhich::Both, None)?;
    let synth = cmd_synth_ive(cfg, out_dir)?;
    let train = cmd_train(cfg, out_dir)?;
    let report = cmd_evaluate(cfg, out_dir, None)?;
    let manifest = Manifest::load(out_dir)?.expect("stages wrote a manifest");
    log("run", format!("done in {:.1}s", started.elapsed().as_secs_f64()));
    Ok(RunSummary {
        synth,
        train,
        report,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny(preset: Preset) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(preset);
        cfg.sampling = SamplingSettings {
            existing_count: 60,
            target_count: 60,
            synthetic_ive_count: 80,
            impute_mode: ImputeMode::Joint,
        };
        cfg.gan = GanConfig {
            batch_size_m: 8,
            epochs_n: 3,
            learning_rate_alpha: 1e-3,
            hidden_width: 8,
            log_interval: 1,
            ..GanConfig::default()
        };
        cfg
    }

    #[test]
    fn presets_round_trip_through_toml() {
        for p in [Preset::Experiment1, Preset::Experiment2] {
            let cfg = ExperimentConfig::preset(p);
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn shipped_configs_match_presets() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for p in [Preset::Experiment1, Preset::Experiment2] {
            let cfg = ExperimentConfig::load(&root.join(format!("{}.toml", p.name()))).unwrap();
            assert_eq!(cfg, ExperimentConfig::preset(p), "{}", p.name());
        }
    }

    #[test]
    fn desk_scale_overrides_schedule_only() {
        let cfg = ExperimentConfig::preset(Preset::Experiment2).with_desk_scale();
        assert_eq!((cfg.gan.batch_size_m, cfg.gan.epochs_n), (256, 5000));
        assert_eq!(cfg.gan.learning_rate_alpha, 1e-3);
        assert_eq!(cfg.gan.regularization_r, 1e-6);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut text = ExperimentConfig::preset(Preset::Experiment2).to_toml_string().unwrap();
        text = text.replace("batch_size_m = 2000", "batch_size_m = 0");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml_str("name = \"x\"\nbogus = 1\n"),
            Err(Error::TomlDe(_))
        ));
    }

    #[test]
    fn sample_stage_writes_requested_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::preset(Preset::Experiment2);
        cmd_sample_bpm(&cfg, dir.path(), BpmWhich::Existing, Some(1000)).unwrap();
        let rows = read_bpm_csv(&dir.path().join(EXISTING_BPM_CSV)).unwrap();
        assert_eq!(rows.len(), 1000);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.p_switch_on)));
        assert!(!dir.path().join(TARGET_CSV).exists());
        let manifest = Manifest::load(dir.path()).unwrap().unwrap();
        assert!(manifest.artifacts.contains_key(EXISTING_BPM_CSV));
        assert!(!dir.path().join(format!("{EXISTING_BPM_CSV}.partial")).exists());
    }

    #[test]
    fn ive_curve_interpolates_between_levels() {
        let rec = |level: IlluminanceLevel, on: bool| SyntheticIveRecord {
            occupancy: Occupancy::Occupancy,
            intermediate_leaving: IntermediateLeaving::None,
            outdoor_illum: level,
            work_illum: level,
            light_on: on,
            work_lux: level.lux(),
        };
        let records = vec![
            rec(IlluminanceLevel::Dark, true),
            rec(IlluminanceLevel::Normal, true),
            rec(IlluminanceLevel::Normal, false),
            rec(IlluminanceLevel::Bright, false),
        ];
        let curve = IveCurve::fit(&records, Occupancy::Occupancy, IntermediateLeaving::None).unwrap();
        assert_eq!(curve.evaluate(200.0), 1.0);
        assert_eq!(curve.evaluate(500.0), 0.5);
        assert_abs_diff_eq!(curve.evaluate(350.0), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(curve.evaluate(600.0), 0.25, epsilon = 1e-12);
        assert_eq!(curve.evaluate(100.0), 1.0);
        assert_eq!(
            probe_factors(&records).unwrap(),
            (Occupancy::Occupancy, IntermediateLeaving::None)
        );
    }

    #[test]
    fn tiny_run_produces_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Preset::Experiment1);
        let run = cmd_run_experiment(&cfg, dir.path()).unwrap();
        for f in [
            CONFIG_ECHO,
            EXISTING_BPM_CSV,
            TARGET_CSV,
            IVE_CORPUS_CSV,
            HMM_JSON,
            HMM_TRACE_CSV,
            SYNTHETIC_IVE_CSV,
            ASSEMBLED_CSV,
            CHECKPOINT,
            TRAINING_TRACE_CSV,
            REPORT_TXT,
            REPORT_JSON,
            METRICS_CSV,
            PLOT_CSV,
        ] {
            assert!(run.manifest.artifacts.contains_key(f), "{f} missing from manifest");
            assert!(dir.path().join(f).exists());
        }
        assert_eq!(run.report.probe_points, 101);
        assert_eq!(run.train.trace.len(), 3);
        let ll = &run.synth.objective_trace;
        assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        let names: Vec<_> = run.manifest.stages.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(names, ["config", "sample-bpm", "synth-ive", "train", "evaluate"]);
    }

    #[test]
    fn stages_need_their_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Preset::Experiment2);
        assert!(matches!(cmd_train(&cfg, dir.path()), Err(Error::Usage(_))));
        assert!(cmd_evaluate(&cfg, dir.path(), None).is_err());
    }

    #[test]
    fn non_finite_training_keeps_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Preset::Experiment2);
        cfg.gan.learning_rate_alpha = 1e300;
        cfg.gan.epochs_n = 20;
        cmd_sample_bpm(&cfg, dir.path(), BpmWhich::Both, None).unwrap();
        cmd_synth_ive(&cfg, dir.path()).unwrap();
        assert!(matches!(cmd_train(&cfg, dir.path()), Err(Error::NonFinite { .. })));
        let model = AugmentedBpm::load(&dir.path().join(CHECKPOINT)).unwrap();
        assert!(model.generator.net.all_finite());
    }
}
