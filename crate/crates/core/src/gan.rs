//! Conditional GAN that turns an existing BPM plus synthetic IVE rows into an
//! augmented BPM.
//!
//! The generator maps encoded contextual features to a switch-on probability.
//! The discriminator sees `[probability ‖ features]` and separates generator
//! outputs (label 0) from performance-target rows (label 1). Each epoch runs
//! one discriminator ascent step followed by one generator descent step.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{to_feature_vector, FeatureRow, LuxNorm, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::ive_hmm::{IntermediateLeaving, Occupancy};
use crate::neuralnet::{
    read_checkpoint, write_checkpoint, Activation, ElasticNet, Gradients, LayerSpec, Mlp, SgdConfig,
    BCE_EPSILON,
};
use crate::seed::{content_hash, derive_seed, rng_from_seed, SeededRng};

/// Discriminator input width: candidate probability plus the features.
pub const DISC_INPUT_DIM: usize = FEATURE_DIM + 1;
/// Number of lux points on the probe grid.
pub const PROBE_POINTS: usize = 101;
pub const PROBE_LUX_RANGE: (f64, f64) = (200.0, 700.0);

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Convergence {
    /// Hard cap on epochs, applied on top of `epochs_n`.
    pub max_epochs: Option<usize>,
    /// Stop once the probe MAE drops below this value.
    pub mae_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub batch_size_m: usize,
    pub epochs_n: usize,
    pub learning_rate_alpha: f64,
    /// Combined elastic-net strength, split evenly between L1 and L2.
    pub regularization_r: f64,
    pub seed: u64,
    pub convergence: Convergence,
    pub log_interval: usize,
    pub hidden_width: usize,
    pub leaky_slope: f64,
    /// Minimize `-log D(G(z))` instead of `log(1 - D(G(z)))`.
    pub non_saturating_generator: bool,
    pub lux_norm: LuxNorm,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            batch_size_m: 2000,
            epochs_n: 200_000,
            learning_rate_alpha: 1e-6,
            regularization_r: 1e-6,
            seed: 0,
            convergence: Convergence::default(),
            log_interval: 100,
            hidden_width: 300,
            leaky_slope: 0.2,
            non_saturating_generator: false,
            lux_norm: LuxNorm::Scale01,
        }
    }
}

impl GanConfig {
    /// Scaled-down settings that finish in minutes on one CPU core.
    pub fn desk_scale() -> Self {
        GanConfig {
            batch_size_m: 256,
            epochs_n: 5000,
            learning_rate_alpha: 1e-3,
            ..GanConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size_m == 0 {
            return bad("batch_size_m must be at least 1");
        }
        if self.epochs_n == 0 {
            return bad("epochs_n must be at least 1");
        }
        if !(self.learning_rate_alpha.is_finite() && self.learning_rate_alpha >= 0.0) {
            return bad("learning_rate_alpha must be finite and non-negative");
        }
        if !(self.regularization_r.is_finite() && self.regularization_r >= 0.0) {
            return bad("regularization_r must be finite and non-negative");
        }
        if self.log_interval == 0 || self.hidden_width == 0 {
            return bad("log_interval and hidden_width must be positive");
        }
        if self.convergence.max_epochs == Some(0) {
            return bad("convergence.max_epochs must be at least 1");
        }
        Ok(())
    }

    pub fn elastic_net(&self) -> ElasticNet {
        ElasticNet {
            l1: self.regularization_r / 2.0,
            l2: self.regularization_r / 2.0,
        }
    }

    fn total_epochs(&self) -> usize {
        self.convergence
            .max_epochs
            .map_or(self.epochs_n, |cap| cap.min(self.epochs_n))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
}

impl Generator {
    pub fn init(cfg: &GanConfig, rng: &mut SeededRng) -> Result<Self> {
        let h = cfg.hidden_width;
        let net = Mlp::init(
            &[
                LayerSpec::new(FEATURE_DIM, h, Activation::Relu),
                LayerSpec::new(h, h, Activation::Relu),
                LayerSpec::new(h, 1, Activation::Sigmoid),
            ],
            rng,
        )?;
        Ok(Generator { net })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.n_inputs() != FEATURE_DIM || net.n_outputs() != 1 {
            return Err(Error::Shape(format!(
                "generator must map {FEATURE_DIM} features to 1 output, got {} -> {}",
                net.n_inputs(),
                net.n_outputs()
            )));
        }
        Ok(Generator { net })
    }

    /// Probabilities for an encoded `n x 5` batch.
    pub fn generate(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.predict(z)?.column(0).to_owned())
    }
}

impl Discriminator {
    pub fn init(cfg: &GanConfig, rng: &mut SeededRng) -> Result<Self> {
        let h = cfg.hidden_width;
        let act = Activation::LeakyRelu(cfg.leaky_slope);
        let net = Mlp::init(
            &[
                LayerSpec::new(DISC_INPUT_DIM, h, act),
                LayerSpec::new(h, h, act),
                LayerSpec::new(h, 1, Activation::Sigmoid),
            ],
            rng,
        )?;
        Ok(Discriminator { net })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.n_inputs() != DISC_INPUT_DIM || net.n_outputs() != 1 {
            return Err(Error::Shape(format!(
                "discriminator must map {DISC_INPUT_DIM} inputs to 1 output"
            )));
        }
        Ok(Discriminator { net })
    }

    pub fn score(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.predict(x)?.column(0).to_owned())
    }
}

/// Encodes rows as an `n x 5` generator batch.
pub fn encode_features(rows: &[FeatureRow], lux_norm: LuxNorm) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), FEATURE_DIM));
    for (i, r) in rows.iter().enumerate() {
        let v = to_feature_vector(r, lux_norm);
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
    }
    out
}

/// Builds discriminator inputs `[p ‖ features]`.
pub fn disc_input(p: &Array1<f64>, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    if p.len() != features.nrows() || features.ncols() != FEATURE_DIM {
        return Err(Error::Shape(format!(
            "{} probabilities for a {}x{} feature batch",
            p.len(),
            features.nrows(),
            features.ncols()
        )));
    }
    let col = p.view().insert_axis(Axis(1));
    Ok(concatenate(Axis(1), &[col, features.view()]).expect("row counts checked"))
}

/// Encodes target rows as discriminator inputs using their own p values.
pub fn encode_targets(rows: &[FeatureRow], lux_norm: LuxNorm) -> Result<Array2<f64>> {
    let p = rows
        .iter()
        .map(|r| {
            r.p_switch_on
                .ok_or_else(|| Error::Config("target rows need a p_switch_on value".into()))
        })
        .collect::<Result<Array1<f64>>>()?;
    disc_input(&p, encode_features(rows, lux_norm).view())
}

fn clipped_ln(p: f64) -> f64 {
    p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON).ln()
}

fn clipped(p: f64) -> f64 {
    p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON)
}

fn check_batches(target: &ArrayView2<f64>, z: &ArrayView2<f64>) -> Result<()> {
    if target.nrows() == 0 || z.nrows() == 0 {
        return Err(Error::Shape("batches must be non-empty".into()));
    }
    if target.ncols() != DISC_INPUT_DIM || z.ncols() != FEATURE_DIM {
        return Err(Error::Shape(format!(
            "expected target batch with {DISC_INPUT_DIM} columns and z batch with {FEATURE_DIM}"
        )));
    }
    Ok(())
}

/// `mean log D(x|z) + mean log(1 - D(G(z)|z))`, with the loss clip applied.
pub fn value_function(
    disc: &Discriminator,
    gen: &Generator,
    target_batch: ArrayView2<f64>,
    z_batch: ArrayView2<f64>,
) -> Result<f64> {
    check_batches(&target_batch, &z_batch)?;
    let real = disc.score(target_batch)?;
    let fake = disc.score(disc_input(&gen.generate(z_batch)?, z_batch)?.view())?;
    Ok(real.mapv(clipped_ln).mean().unwrap() + fake.mapv(|d| clipped_ln(1.0 - d)).mean().unwrap())
}

/// Regularized discriminator objective `J - penalty` and its gradient.
///
/// `J = (1/2m) Σ [log D(x_i|z_i) + log(1 - D(G(z_i)|z_i))]` over paired
/// batches of equal size 2m. This is the quantity the ascent step climbs.
pub fn discriminator_objective_and_gradient(
    disc: &Discriminator,
    gen: &Generator,
    z_batch: ArrayView2<f64>,
    target_batch: ArrayView2<f64>,
    enet: &ElasticNet,
) -> Result<(f64, Gradients)> {
    check_batches(&target_batch, &z_batch)?;
    if z_batch.nrows() != target_batch.nrows() {
        return Err(Error::Config(format!(
            "discriminator step needs equal batches, got {} generated and {} target rows",
            z_batch.nrows(),
            target_batch.nrows()
        )));
    }
    let n = z_batch.nrows();
    let fake = disc_input(&gen.generate(z_batch)?, z_batch)?;
    let stacked = concatenate(Axis(0), &[target_batch.view(), fake.view()]).expect("same width");
    let (out, cache) = disc.net.forward(stacked.view())?;
    let d = out.column(0);
    let scale = 1.0 / n as f64;
    let mut objective = 0.0;
    // Gradient of the negated objective, so that the elastic-net term enters
    // with its usual sign; flipped below.
    let mut neg_grad = Array2::zeros((2 * n, 1));
    for i in 0..2 * n {
        let p = clipped(d[i]);
        if i < n {
            objective += scale * p.ln();
            neg_grad[[i, 0]] = -scale / p;
        } else {
            objective += scale * (1.0 - p).ln();
            neg_grad[[i, 0]] = scale / (1.0 - p);
        }
    }
    let mut grads = disc.net.backward(&cache, neg_grad.view(), enet)?;
    for g in &mut grads.layers {
        g.weights.mapv_inplace(|v| -v);
        g.biases.mapv_inplace(|v| -v);
    }
    grads.input.mapv_inplace(|v| -v);
    Ok((objective - enet.penalty(&disc.net), grads))
}

/// Regularized generator objective `J + penalty` and its gradient.
///
/// `J = (1/2m) Σ log(1 - D(G(z_i)|z_i))`, or `-(1/2m) Σ log D(G(z_i)|z_i)`
/// when `non_saturating` is set. The discriminator is only differentiated
/// with respect to its input.
pub fn generator_objective_and_gradient(
    gen: &Generator,
    disc: &Discriminator,
    z_batch: ArrayView2<f64>,
    enet: &ElasticNet,
    non_saturating: bool,
) -> Result<(f64, Gradients)> {
    if z_batch.nrows() == 0 || z_batch.ncols() != FEATURE_DIM {
        return Err(Error::Shape("generator batch must be non-empty with 5 columns".into()));
    }
    let n = z_batch.nrows();
    let (g_out, g_cache) = gen.net.forward(z_batch)?;
    let x = disc_input(&g_out.column(0).to_owned(), z_batch)?;
    let (d_out, d_cache) = disc.net.forward(x.view())?;
    let scale = 1.0 / n as f64;
    let mut objective = 0.0;
    let mut d_grad = Array2::zeros((n, 1));
    for i in 0..n {
        let p = clipped(d_out[[i, 0]]);
        if non_saturating {
            objective -= scale * p.ln();
            d_grad[[i, 0]] = -scale / p;
        } else {
            objective += scale * (1.0 - p).ln();
            d_grad[[i, 0]] = -scale / (1.0 - p);
        }
    }
    let dx = disc.net.input_gradient(&d_cache, d_grad.view())?;
    let dg = dx.slice(s![.., 0..1]);
    let grads = gen.net.backward(&g_cache, dg, enet)?;
    Ok((objective + enet.penalty(&gen.net), grads))
}

/// One ascent step on the discriminator objective; returns the objective
/// value before the step.
pub fn discriminator_step(
    disc: &mut Discriminator,
    gen: &Generator,
    z_batch: ArrayView2<f64>,
    target_batch: ArrayView2<f64>,
    cfg: &GanConfig,
) -> Result<f64> {
    let (obj, grads) = discriminator_objective_and_gradient(disc, gen, z_batch, target_batch, &cfg.elastic_net())?;
    disc.net.sgd_step(&grads, &SgdConfig::ascent(cfg.learning_rate_alpha))?;
    Ok(obj)
}

/// One descent step on the generator objective; returns the objective
/// value before the step.
pub fn generator_step(gen: &mut Generator, disc: &Discriminator, z_batch: ArrayView2<f64>, cfg: &GanConfig) -> Result<f64> {
    let (obj, grads) = generator_objective_and_gradient(
        gen,
        disc,
        z_batch,
        &cfg.elastic_net(),
        cfg.non_saturating_generator,
    )?;
    gen.net.sgd_step(&grads, &SgdConfig::descent(cfg.learning_rate_alpha))?;
    Ok(obj)
}

/// Lux values of the probe grid: 101 evenly spaced points over 200..=700.
pub fn probe_lux() -> Vec<f64> {
    let (lo, hi) = PROBE_LUX_RANGE;
    (0..PROBE_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (PROBE_POINTS - 1) as f64)
        .collect()
}

/// Held-out rows on which generator and target are compared.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub rows: Vec<FeatureRow>,
    pub target_p: Vec<f64>,
}

impl Probe {
    /// The lux grid crossed with one fixed `(occupancy, leaving)` pair.
    pub fn grid(occupancy: Occupancy, leaving: IntermediateLeaving, target: impl Fn(f64) -> f64) -> Self {
        let lux = probe_lux();
        Probe {
            target_p: lux.iter().map(|&l| target(l)).collect(),
            rows: lux
                .into_iter()
                .map(|l| FeatureRow::query(occupancy, leaving, l))
                .collect(),
        }
    }

    pub fn mae(&self, gen: &Generator, lux_norm: LuxNorm) -> Result<f64> {
        let p = gen.generate(encode_features(&self.rows, lux_norm).view())?;
        Ok(p.iter()
            .zip(&self.target_p)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.rows.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub value_fn: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub probe_mae: f64,
}

pub const TRACE_CSV_HEADER: &str = "epoch,value_fn,d_loss,g_loss,probe_mae";

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in trace {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.value_fn, r.d_loss, r.g_loss, r.probe_mae)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Discriminator,
    Generator,
}

/// Observer for training progress. All methods default to no-ops.
pub trait ProgressSink {
    /// Called after each parameter update.
    fn on_step(&mut self, _epoch: usize, _kind: StepKind, _gen: &Generator, _disc: &Discriminator) {}
    fn on_trace(&mut self, _row: &TraceRow) {}
}

impl ProgressSink for () {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    EpochsExhausted,
    MaeThreshold,
    NonFinite { epoch: usize, what: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub config: GanConfig,
    /// Content hashes of the training inputs, keyed by dataset name.
    pub dataset_hashes: BTreeMap<String, String>,
    pub final_epoch: usize,
    pub stop_reason: StopReason,
    pub checkpoint_sha256: Option<String>,
    pub crate_version: String,
}

/// The trained generator together with its encoding and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBpm {
    pub generator: Generator,
    pub lux_norm: LuxNorm,
    pub metadata: ModelMetadata,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    lux_norm: LuxNorm,
    metadata: ModelMetadata,
}

impl AugmentedBpm {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        write_checkpoint(&self.generator.net, &mut bytes).expect("writing to memory");
        bytes
    }

    /// JSON sidecar describing the checkpoint in `checkpoint_bytes`.
    pub fn sidecar_json(&self, checkpoint_bytes: &[u8]) -> Result<String> {
        let mut metadata = self.metadata.clone();
        metadata.checkpoint_sha256 = Some(content_hash(checkpoint_bytes));
        let sidecar = Sidecar {
            lux_norm: self.lux_norm,
            metadata,
        };
        let mut json = serde_json::to_string_pretty(&sidecar)?;
        json.push('\n');
        Ok(json)
    }

    /// Writes the binary checkpoint and its JSON sidecar (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes();
        let json = self.sidecar_json(&bytes)?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let net = read_checkpoint(bytes.as_slice())?;
        let side = sidecar_path(path);
        let file = File::open(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_reader(BufReader::new(file))?;
        if let Some(expected) = &sidecar.metadata.checkpoint_sha256 {
            if *expected != content_hash(&bytes) {
                return Err(Error::Checkpoint(format!(
                    "{} does not match the hash recorded in its sidecar",
                    path.display()
                )));
            }
        }
        Ok(AugmentedBpm {
            generator: Generator::from_net(net).map_err(|e| Error::Checkpoint(e.to_string()))?,
            lux_norm: sidecar.lux_norm,
            metadata: sidecar.metadata,
        })
    }
}

/// Switch-on probabilities for arbitrary feature rows.
pub fn predict(aug: &AugmentedBpm, rows: &[FeatureRow]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    Ok(aug
        .generator
        .generate(encode_features(rows, aug.lux_norm).view())?
        .to_vec())
}

/// Canonical content hash of a set of feature rows.
pub fn hash_rows(rows: &[FeatureRow]) -> String {
    let mut bytes = Vec::with_capacity(rows.len() * 26);
    for r in rows {
        bytes.push(r.occupancy.index() as u8);
        bytes.push(r.intermediate_leaving.index() as u8);
        bytes.extend_from_slice(&r.work_lux.to_le_bytes());
        match r.p_switch_on {
            Some(p) => {
                bytes.push(1);
                bytes.extend_from_slice(&p.to_le_bytes());
            }
            None => bytes.push(0),
        }
    }
    content_hash(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: AugmentedBpm,
    pub trace: Vec<TraceRow>,
    pub initial_probe_mae: f64,
    pub final_probe_mae: f64,
    pub discriminator: Discriminator,
}

fn sample_rows(source: &Array2<f64>, count: usize, rng: &mut SeededRng) -> Array2<f64> {
    let idx: Vec<usize> = (0..count).map(|_| rng.gen_range(0..source.nrows())).collect();
    source.select(Axis(0), &idx)
}

fn generator_batch(bpm: &Array2<f64>, ive: &Array2<f64>, m: usize, rng: &mut SeededRng) -> Array2<f64> {
    let a = sample_rows(bpm, m, rng);
    let b = sample_rows(ive, m, rng);
    concatenate(Axis(0), &[a.view(), b.view()]).expect("same width")
}

/// Runs the alternating training loop.
///
/// Batches are drawn with replacement: each epoch samples `m` existing-BPM
/// rows, `m` synthetic IVE rows and `2m` target rows for the discriminator,
/// then a fresh `m + m` generator batch. On a non-finite loss or parameter
/// the loop stops and returns the last finite generator with
/// [`StopReason::NonFinite`].
pub fn train(
    cfg: &GanConfig,
    bpm_rows: &[FeatureRow],
    ive_rows: &[FeatureRow],
    target_rows: &[FeatureRow],
    probe: &Probe,
    sink: &mut dyn ProgressSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if bpm_rows.is_empty() || ive_rows.is_empty() || target_rows.is_empty() {
        return Err(Error::Config("training needs non-empty BPM, IVE and target rows".into()));
    }
    if probe.rows.is_empty() || probe.rows.len() != probe.target_p.len() {
        return Err(Error::Config("probe rows and target values must align".into()));
    }
    let m = cfg.batch_size_m;
    let bpm = encode_features(bpm_rows, cfg.lux_norm);
    let ive = encode_features(ive_rows, cfg.lux_norm);
    let targets = encode_targets(target_rows, cfg.lux_norm)?;

    let mut gen = Generator::init(cfg, &mut rng_from_seed(derive_seed(cfg.seed, "generator")))?;
    let mut disc = Discriminator::init(cfg, &mut rng_from_seed(derive_seed(cfg.seed, "discriminator")))?;
    let mut batches = rng_from_seed(derive_seed(cfg.seed, "batches"));

    let initial_probe_mae = probe.mae(&gen, cfg.lux_norm)?;
    let mut last_good = gen.clone();
    let mut trace = Vec::new();
    let mut stop = StopReason::EpochsExhausted;
    let mut final_epoch = 0;
    let mut probe_mae = initial_probe_mae;
    let total = cfg.total_epochs();

    for epoch in 1..=total {
        let z = generator_batch(&bpm, &ive, m, &mut batches);
        let x = sample_rows(&targets, 2 * m, &mut batches);
        let value_fn = discriminator_step(&mut disc, &gen, z.view(), x.view(), cfg)?;
        sink.on_step(epoch, StepKind::Discriminator, &gen, &disc);

        let z = generator_batch(&bpm, &ive, m, &mut batches);
        let g_loss = generator_step(&mut gen, &disc, z.view(), cfg)?;
        sink.on_step(epoch, StepKind::Generator, &gen, &disc);

        let non_finite = if !value_fn.is_finite() || !g_loss.is_finite() {
            Some("loss")
        } else if !disc.net.all_finite() {
            Some("discriminator parameters")
        } else if !gen.net.all_finite() {
            Some("generator parameters")
        } else {
            None
        };
        if let Some(what) = non_finite {
            stop = StopReason::NonFinite {
                epoch,
                what: what.to_owned(),
            };
            gen = last_good;
            break;
        }
        final_epoch = epoch;

        let log_now = epoch == 1 || epoch % cfg.log_interval == 0 || epoch == total;
        if log_now || cfg.convergence.mae_threshold.is_some() {
            probe_mae = probe.mae(&gen, cfg.lux_norm)?;
        }
        let reached = cfg.convergence.mae_threshold.is_some_and(|t| probe_mae < t);
        if log_now || reached {
            let row = TraceRow {
                epoch,
                value_fn,
                d_loss: -value_fn / 2.0,
                g_loss,
                probe_mae,
            };
            sink.on_trace(&row);
            trace.push(row);
        }
        if reached {
            stop = StopReason::MaeThreshold;
            break;
        }
        last_good.clone_from(&gen);
    }

    let final_probe_mae = probe.mae(&gen, cfg.lux_norm)?;
    let mut dataset_hashes = BTreeMap::new();
    dataset_hashes.insert("existing_bpm".to_owned(), hash_rows(bpm_rows));
    dataset_hashes.insert("synthetic_ive".to_owned(), hash_rows(ive_rows));
    dataset_hashes.insert("target".to_owned(), hash_rows(target_rows));
    let model = AugmentedBpm {
        generator: gen,
        lux_norm: cfg.lux_norm,
        metadata: ModelMetadata {
            config: cfg.clone(),
            dataset_hashes,
            final_epoch,
            stop_reason: stop,
            checkpoint_sha256: None,
            crate_version: env!("CARGO_PKG_VERSION").to_owned(),
        },
    };
    Ok(TrainOutcome {
        model,
        trace,
        initial_probe_mae,
        final_probe_mae,
        discriminator: disc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{init_weights, DenseLayer};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_cfg() -> GanConfig {
        GanConfig {
            batch_size_m: 4,
            epochs_n: 3,
            learning_rate_alpha: 1e-2,
            hidden_width: 6,
            log_interval: 1,
            ..GanConfig::default()
        }
    }

    fn small_nets(seed: u64) -> (Generator, Discriminator) {
        let cfg = small_cfg();
        let mut rng = rng_from_seed(seed);
        let mut g = Generator::init(&cfg, &mut rng).unwrap();
        let mut d = Discriminator::init(&cfg, &mut rng).unwrap();
        for net in [&mut g.net, &mut d.net] {
            for layer in net.layers_mut() {
                layer.biases.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
            }
        }
        (g, d)
    }

    fn rand_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(0.0..1.0))
    }

    /// Discriminator whose output is sigmoid(0) = 0.5 everywhere.
    fn constant_disc(bias: f64) -> Discriminator {
        let net = Mlp::new(vec![
            DenseLayer::new(Array2::zeros((3, DISC_INPUT_DIM)), Array1::zeros(3), Activation::LeakyRelu(0.2)).unwrap(),
            DenseLayer::new(Array2::zeros((1, 3)), array![bias], Activation::Sigmoid).unwrap(),
        ])
        .unwrap();
        Discriminator::from_net(net).unwrap()
    }

    #[test]
    fn value_function_at_equilibrium() {
        let (g, _) = small_nets(1);
        let v = value_function(&constant_disc(0.0), &g, rand_batch(8, 6, 2).view(), rand_batch(8, 5, 3).view()).unwrap();
        assert_abs_diff_eq!(v, -2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn value_function_matches_scalar_oracle() {
        let (g, d) = small_nets(4);
        let x = rand_batch(4, 6, 5);
        let z = rand_batch(4, 5, 6);
        let v = value_function(&d, &g, x.view(), z.view()).unwrap();
        let mut oracle = 0.0;
        for i in 0..4 {
            let dx = d.score(x.slice(s![i..i + 1, ..])).unwrap()[0];
            let gz = g.generate(z.slice(s![i..i + 1, ..])).unwrap()[0];
            let mut fake = vec![gz];
            fake.extend(z.row(i).iter());
            let dg = d.score(Array2::from_shape_vec((1, 6), fake).unwrap().view()).unwrap()[0];
            oracle += (dx.ln() + (1.0 - dg).ln()) / 4.0;
        }
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-9);
    }

    #[test]
    fn perfect_discriminator_bound() {
        // D reads only the probability column with a steep slope.
        let mut w1 = Array2::zeros((3, DISC_INPUT_DIM));
        w1[[0, 0]] = 1.0;
        let mut w2 = Array2::zeros((1, 3));
        w2[[0, 0]] = 1e4;
        let d = Discriminator::from_net(
            Mlp::new(vec![
                DenseLayer::new(w1, Array1::zeros(3), Activation::LeakyRelu(0.2)).unwrap(),
                DenseLayer::new(w2, array![-5e3], Activation::Sigmoid).unwrap(),
            ])
            .unwrap(),
        )
        .unwrap();
        // A generator pinned at p = 0.
        let g = Generator::from_net(
            Mlp::new(vec![DenseLayer::new(Array2::zeros((1, 5)), array![-800.0], Activation::Sigmoid).unwrap()]).unwrap(),
        )
        .unwrap();
        let mut x = rand_batch(4, 6, 1);
        x.column_mut(0).fill(1.0);
        let v = value_function(&d, &g, x.view(), rand_batch(4, 5, 2).view()).unwrap();
        assert_abs_diff_eq!(v, 2.0 * (1.0 - BCE_EPSILON).ln(), epsilon = 1e-12);
    }

    fn central_difference(net: &mut Mlp, f: &dyn Fn(&Mlp) -> f64, analytic: &[f64]) -> f64 {
        let params = net.parameters();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for j in 0..params.len() {
            let mut p = params.clone();
            p[j] += h;
            net.set_parameters(&p).unwrap();
            let up = f(net);
            p[j] -= 2.0 * h;
            net.set_parameters(&p).unwrap();
            let down = f(net);
            let numeric = (up - down) / (2.0 * h);
            let scale = numeric.abs().max(analytic[j].abs()).max(1e-6);
            worst = worst.max((numeric - analytic[j]).abs() / scale);
        }
        net.set_parameters(&params).unwrap();
        worst
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let (g, mut d) = small_nets(8);
        let z = rand_batch(6, 5, 9);
        let x = rand_batch(6, 6, 10);
        let enet = ElasticNet::new(1e-3, 2e-3).unwrap();
        let (_, grads) = discriminator_objective_and_gradient(&d, &g, z.view(), x.view(), &enet).unwrap();
        let f = |net: &Mlp| {
            let d = Discriminator { net: net.clone() };
            discriminator_objective_and_gradient(&d, &g, z.view(), x.view(), &enet).unwrap().0
        };
        assert!(central_difference(&mut d.net, &f, &grads.flatten()) < 1e-4);
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        for non_saturating in [false, true] {
            let (mut g, d) = small_nets(11);
            let z = rand_batch(6, 5, 12);
            let enet = ElasticNet::new(1e-3, 1e-3).unwrap();
            let (_, grads) = generator_objective_and_gradient(&g, &d, z.view(), &enet, non_saturating).unwrap();
            let f = |net: &Mlp| {
                let g = Generator { net: net.clone() };
                generator_objective_and_gradient(&g, &d, z.view(), &enet, non_saturating).unwrap().0
            };
            assert!(central_difference(&mut g.net, &f, &grads.flatten()) < 1e-4);
        }
    }

    #[test]
    fn constant_discriminator_gives_zero_generator_gradient() {
        let (g, _) = small_nets(13);
        let (_, grads) =
            generator_objective_and_gradient(&g, &constant_disc(0.7), rand_batch(8, 5, 1).view(), &ElasticNet::NONE, false)
                .unwrap();
        assert!(grads.flatten().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_learning_rate_and_parameter_isolation() {
        let (g0, d0) = small_nets(14);
        let z = rand_batch(8, 5, 1);
        let x = rand_batch(8, 6, 2);
        let frozen = GanConfig {
            learning_rate_alpha: 0.0,
            ..small_cfg()
        };
        let (mut g, mut d) = (g0.clone(), d0.clone());
        discriminator_step(&mut d, &g, z.view(), x.view(), &frozen).unwrap();
        generator_step(&mut g, &d, z.view(), &frozen).unwrap();
        assert_eq!((&g, &d), (&g0, &d0));

        let live = small_cfg();
        discriminator_step(&mut d, &g, z.view(), x.view(), &live).unwrap();
        assert_eq!(g, g0);
        assert_ne!(d, d0);
        let d1 = d.clone();
        generator_step(&mut g, &d, z.view(), &live).unwrap();
        assert_eq!(d, d1);
        assert_ne!(g, g0);
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        let (g, mut d) = small_nets(15);
        let err = discriminator_step(&mut d, &g, rand_batch(8, 5, 1).view(), rand_batch(6, 6, 2).view(), &small_cfg());
        assert!(matches!(err, Err(Error::Config(_))));
        let err = discriminator_step(&mut d, &g, rand_batch(8, 4, 1).view(), rand_batch(8, 6, 2).view(), &small_cfg());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn discriminator_learns_separable_toy_data() {
        let cfg = GanConfig {
            learning_rate_alpha: 0.05,
            hidden_width: 16,
            regularization_r: 0.0,
            ..small_cfg()
        };
        let mut d = Discriminator::init(&cfg, &mut rng_from_seed(3)).unwrap();
        // Generator pinned at p = 0.1; targets at p = 0.9.
        let g = Generator::from_net(
            Mlp::new(vec![DenseLayer::new(Array2::zeros((1, 5)), array![(0.1f64 / 0.9).ln()], Activation::Sigmoid).unwrap()])
                .unwrap(),
        )
        .unwrap();
        let mut rng = rng_from_seed(4);
        let mut batch = |p: Option<f64>| {
            let feat = Array2::from_shape_fn((32, 5), |(_, j)| if j == 4 { rng.gen_range(0.0..1.0) } else { 0.0 });
            match p {
                Some(p) => disc_input(&Array1::from_elem(32, p), feat.view()).unwrap(),
                None => feat,
            }
        };
        for _ in 0..500 {
            let z = batch(None);
            let x = batch(Some(0.9));
            discriminator_step(&mut d, &g, z.view(), x.view(), &cfg).unwrap();
        }
        let x = batch(Some(0.9));
        let z = batch(None);
        let fake = disc_input(&g.generate(z.view()).unwrap(), z.view()).unwrap();
        let correct = d.score(x.view()).unwrap().iter().filter(|&&s| s > 0.5).count()
            + d.score(fake.view()).unwrap().iter().filter(|&&s| s < 0.5).count();
        assert!(correct as f64 / 64.0 > 0.95, "accuracy {}", correct as f64 / 64.0);
    }

    fn toy_rows(n: usize, p: Option<f64>) -> Vec<FeatureRow> {
        (0..n)
            .map(|i| FeatureRow {
                occupancy: Occupancy::ALL[i % 2],
                intermediate_leaving: IntermediateLeaving::ALL[i % 3],
                work_lux: 200.0 + (i * 37 % 500) as f64,
                p_switch_on: p.or(Some(0.3)),
            })
            .collect()
    }

    fn toy_probe() -> Probe {
        Probe::grid(Occupancy::Occupancy, IntermediateLeaving::None, |l| 1.0 - l / 1000.0)
    }

    #[derive(Default)]
    struct Recorder {
        steps: Vec<(usize, StepKind)>,
        rows: usize,
    }

    impl ProgressSink for Recorder {
        fn on_step(&mut self, epoch: usize, kind: StepKind, _: &Generator, _: &Discriminator) {
            self.steps.push((epoch, kind));
        }
        fn on_trace(&mut self, _: &TraceRow) {
            self.rows += 1;
        }
    }

    #[test]
    fn single_epoch_runs_one_step_of_each() {
        let cfg = GanConfig {
            epochs_n: 1,
            ..small_cfg()
        };
        let mut rec = Recorder::default();
        let out = train(&cfg, &toy_rows(10, None), &toy_rows(7, None), &toy_rows(12, Some(0.6)), &toy_probe(), &mut rec)
            .unwrap();
        assert_eq!(rec.steps, vec![(1, StepKind::Discriminator), (1, StepKind::Generator)]);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(rec.rows, 1);
        assert_eq!(out.model.metadata.final_epoch, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            train(&small_cfg(), &toy_rows(10, None), &toy_rows(7, None), &toy_rows(12, Some(0.6)), &toy_probe(), &mut ())
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn threshold_and_epoch_cap_stop_early() {
        let cfg = GanConfig {
            epochs_n: 50,
            convergence: Convergence {
                max_epochs: None,
                mae_threshold: Some(10.0),
            },
            ..small_cfg()
        };
        let out = train(&cfg, &toy_rows(10, None), &toy_rows(7, None), &toy_rows(12, Some(0.6)), &toy_probe(), &mut ())
            .unwrap();
        assert_eq!(out.model.metadata.stop_reason, StopReason::MaeThreshold);
        assert_eq!(out.model.metadata.final_epoch, 1);

        let cfg = GanConfig {
            epochs_n: 50,
            convergence: Convergence {
                max_epochs: Some(5),
                mae_threshold: None,
            },
            ..small_cfg()
        };
        let out = train(&cfg, &toy_rows(10, None), &toy_rows(7, None), &toy_rows(12, Some(0.6)), &toy_probe(), &mut ())
            .unwrap();
        assert_eq!(out.model.metadata.final_epoch, 5);
        assert_eq!(out.trace.len(), 5);
    }

    #[test]
    fn runaway_learning_rate_stops_with_last_good_model() {
        let cfg = GanConfig {
            learning_rate_alpha: 1e300,
            epochs_n: 20,
            ..small_cfg()
        };
        let out = train(&cfg, &toy_rows(10, None), &toy_rows(7, None), &toy_rows(12, Some(0.6)), &toy_probe(), &mut ())
            .unwrap();
        assert!(matches!(out.model.metadata.stop_reason, StopReason::NonFinite { .. }));
        assert!(out.model.generator.net.all_finite());
    }

    #[test]
    fn predict_examples() {
        let zero = init_weights(
            &[
                LayerSpec::new(5, 4, Activation::Relu),
                LayerSpec::new(4, 1, Activation::Sigmoid),
            ],
            1,
        )
        .unwrap();
        let mut zero = zero;
        for layer in zero.layers_mut() {
            layer.weights.fill(0.0);
        }
        let out = train(&small_cfg(), &toy_rows(10, None), &toy_rows(7, None), &toy_rows(12, Some(0.6)), &toy_probe(), &mut ())
            .unwrap();
        let mut aug = out.model;
        let rows = toy_rows(9, None);
        let p = predict(&aug, &rows).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let mut rev = rows.clone();
        rev.reverse();
        let mut p_rev = predict(&aug, &rev).unwrap();
        p_rev.reverse();
        assert_eq!(p, p_rev);

        aug.generator = Generator::from_net(zero).unwrap();
        assert!(predict(&aug, &rows).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn save_and_load_round_trip() {
        let out = train(&small_cfg(), &toy_rows(10, None), &toy_rows(7, None), &toy_rows(12, Some(0.6)), &toy_probe(), &mut ())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        out.model.save(&path).unwrap();
        let back = AugmentedBpm::load(&path).unwrap();
        assert_eq!(back.generator, out.model.generator);
        assert_eq!(back.metadata.config, out.model.metadata.config);
        assert!(back.metadata.checkpoint_sha256.is_some());

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(AugmentedBpm::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn probe_grid_shape() {
        let lux = probe_lux();
        assert_eq!(lux.len(), 101);
        assert_eq!(lux[0], 200.0);
        assert_eq!(lux[100], 700.0);
        assert_abs_diff_eq!(lux[1] - lux[0], 5.0, epsilon = 1e-12);
    }
}
