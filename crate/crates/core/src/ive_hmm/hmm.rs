use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-9;

/// Discrete-emission hidden Markov model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hmm {
    pub initial: Array1<f64>,
    /// Row-stochastic, `n_hidden x n_hidden`.
    pub transition: Array2<f64>,
    /// Row-stochastic, `n_hidden x n_obs`.
    pub emission: Array2<f64>,
}

impl Hmm {
    pub fn new(initial: Array1<f64>, transition: Array2<f64>, emission: Array2<f64>) -> Result<Self> {
        let hmm = Hmm {
            initial,
            transition,
            emission,
        };
        hmm.validate()?;
        Ok(hmm)
    }

    pub fn n_hidden(&self) -> usize {
        self.initial.len()
    }

    pub fn n_obs(&self) -> usize {
        self.emission.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_hidden();
        if n == 0 || self.n_obs() == 0 {
            return Err(Error::Config("HMM needs at least one state and one symbol".into()));
        }
        if self.transition.dim() != (n, n) || self.emission.nrows() != n {
            return Err(Error::Shape(format!(
                "HMM shapes disagree: initial {n}, transition {:?}, emission {:?}",
                self.transition.dim(),
                self.emission.dim()
            )));
        }
        let check_dist = |what: &str, row: ndarray::ArrayView1<f64>| -> Result<()> {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Config(format!("{what} has a negative or non-finite entry")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Config(format!("{what} sums to {sum}, not 1")));
            }
            Ok(())
        };
        check_dist("initial distribution", self.initial.view())?;
        for (i, row) in self.transition.outer_iter().enumerate() {
            check_dist(&format!("transition row {i}"), row)?;
        }
        for (i, row) in self.emission.outer_iter().enumerate() {
            check_dist(&format!("emission row {i}"), row)?;
        }
        Ok(())
    }

    fn check_symbols(&self, sequences: &[Vec<usize>]) -> Result<()> {
        if sequences.is_empty() {
            return Err(Error::Config("no observation sequences".into()));
        }
        for (s, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Config(format!("observation sequence {s} is empty")));
            }
            if let Some(bad) = seq.iter().find(|&&o| o >= self.n_obs()) {
                return Err(Error::Domain(format!(
                    "symbol {bad} in sequence {s} outside [0, {})",
                    self.n_obs()
                )));
            }
        }
        Ok(())
    }

    /// Log-likelihood of one sequence via the scaled forward recursion.
    pub fn log_likelihood(&self, observations: &[usize]) -> Result<f64> {
        self.check_symbols(std::slice::from_ref(&observations.to_vec()))?;
        Ok(self.forward_scaled(observations)?.log_likelihood())
    }

    pub fn total_log_likelihood(&self, sequences: &[Vec<usize>]) -> Result<f64> {
        self.check_symbols(sequences)?;
        sequences
            .iter()
            .map(|s| Ok(self.forward_scaled(s)?.log_likelihood()))
            .sum()
    }

    fn forward_scaled(&self, obs: &[usize]) -> Result<Forward> {
        let n = self.n_hidden();
        let len = obs.len();
        let mut alpha = Array2::<f64>::zeros((len, n));
        let mut scale = Array1::<f64>::zeros(len);
        for t in 0..len {
            let o = obs[t];
            for j in 0..n {
                let prior = if t == 0 {
                    self.initial[j]
                } else {
                    (0..n).map(|i| alpha[[t - 1, i]] * self.transition[[i, j]]).sum()
                };
                alpha[[t, j]] = prior * self.emission[[j, o]];
            }
            let c = alpha.row(t).sum();
            if c <= 0.0 || !c.is_finite() {
                return Err(Error::DegenerateLikelihood(format!(
                    "symbol {o} at step {t} has zero probability under the model"
                )));
            }
            alpha.row_mut(t).mapv_inplace(|a| a / c);
            scale[t] = c;
        }
        Ok(Forward { alpha, scale })
    }

    fn backward_scaled(&self, obs: &[usize], scale: &Array1<f64>) -> Array2<f64> {
        let n = self.n_hidden();
        let len = obs.len();
        let mut beta = Array2::<f64>::zeros((len, n));
        beta.row_mut(len - 1).fill(1.0);
        for t in (0..len - 1).rev() {
            let o = obs[t + 1];
            for i in 0..n {
                let s: f64 = (0..n)
                    .map(|j| self.transition[[i, j]] * self.emission[[j, o]] * beta[[t + 1, j]])
                    .sum();
                beta[[t, i]] = s / scale[t + 1];
            }
        }
        beta
    }

    /// Log of the unnormalised Dirichlet prior implied by additive smoothing.
    fn log_smoothing_prior(&self, smoothing: f64) -> f64 {
        if smoothing == 0.0 {
            return 0.0;
        }
        let log_sum = self
            .initial
            .iter()
            .chain(self.transition.iter())
            .chain(self.emission.iter())
            .map(|p| p.ln())
            .sum::<f64>();
        smoothing * log_sum
    }
}

struct Forward {
    alpha: Array2<f64>,
    scale: Array1<f64>,
}

impl Forward {
    fn log_likelihood(&self) -> f64 {
        self.scale.iter().map(|c| c.ln()).sum()
    }
}

/// Expected sufficient statistics accumulated over all sequences.
struct ExpectedCounts {
    initial: Array1<f64>,
    transition: Array2<f64>,
    emission: Array2<f64>,
    log_likelihood: f64,
}

fn expected_counts(hmm: &Hmm, sequences: &[Vec<usize>]) -> Result<ExpectedCounts> {
    let n = hmm.n_hidden();
    let mut counts = ExpectedCounts {
        initial: Array1::zeros(n),
        transition: Array2::zeros((n, n)),
        emission: Array2::zeros((n, hmm.n_obs())),
        log_likelihood: 0.0,
    };
    for obs in sequences {
        let fwd = hmm.forward_scaled(obs)?;
        let beta = hmm.backward_scaled(obs, &fwd.scale);
        counts.log_likelihood += fwd.log_likelihood();
        for t in 0..obs.len() {
            // With per-step scaling, alpha_hat * beta_hat is already the posterior.
            let gamma = &fwd.alpha.row(t) * &beta.row(t);
            let norm = gamma.sum();
            for i in 0..n {
                let g = gamma[i] / norm;
                if t == 0 {
                    counts.initial[i] += g;
                }
                counts.emission[[i, obs[t]]] += g;
            }
            if t + 1 < obs.len() {
                let o = obs[t + 1];
                for i in 0..n {
                    for j in 0..n {
                        counts.transition[[i, j]] += fwd.alpha[[t, i]]
                            * hmm.transition[[i, j]]
                            * hmm.emission[[j, o]]
                            * beta[[t + 1, j]]
                            / fwd.scale[t + 1];
                    }
                }
            }
        }
    }
    Ok(counts)
}

fn normalize_rows(mut counts: Array2<f64>, smoothing: f64) -> Array2<f64> {
    let width = counts.ncols() as f64;
    for mut row in counts.axis_iter_mut(Axis(0)) {
        row.mapv_inplace(|c| c + smoothing);
        let total = row.sum();
        if total > 0.0 {
            row.mapv_inplace(|c| c / total);
        } else {
            row.fill(1.0 / width);
        }
    }
    counts
}

fn normalize_vec(counts: Array1<f64>, smoothing: f64) -> Array1<f64> {
    let n = counts.len();
    normalize_rows(counts.into_shape_with_order((1, n)).unwrap(), smoothing)
        .into_shape_with_order(n)
        .unwrap()
}

/// Builds an HMM from labelled `(hidden_state, symbol)` sequences by relative
/// frequency, with additive `smoothing` applied to every count.
pub fn init_from_counts(
    sequences: &[Vec<(usize, usize)>],
    n_hidden: usize,
    n_obs: usize,
    smoothing: f64,
) -> Result<Hmm> {
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::Config("no labelled sequences to count".into()));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::Config(format!("smoothing {smoothing} must be a non-negative number")));
    }
    if n_hidden == 0 || n_obs == 0 {
        return Err(Error::Config("HMM needs at least one state and one symbol".into()));
    }
    let mut initial = Array1::<f64>::zeros(n_hidden);
    let mut transition = Array2::<f64>::zeros((n_hidden, n_hidden));
    let mut emission = Array2::<f64>::zeros((n_hidden, n_obs));
    let mut n_transitions = 0usize;
    for seq in sequences.iter().filter(|s| !s.is_empty()) {
        for &(state, symbol) in seq {
            if state >= n_hidden || symbol >= n_obs {
                return Err(Error::Domain(format!(
                    "pair ({state}, {symbol}) outside {n_hidden} states x {n_obs} symbols"
                )));
            }
            emission[[state, symbol]] += 1.0;
        }
        initial[seq[0].0] += 1.0;
        for pair in seq.windows(2) {
            transition[[pair[0].0, pair[1].0]] += 1.0;
            n_transitions += 1;
        }
    }
    if n_transitions == 0 {
        return Err(Error::Config("no transitions observed; sequences need length >= 2".into()));
    }
    Hmm::new(
        normalize_vec(initial, smoothing),
        normalize_rows(transition, smoothing),
        normalize_rows(emission, smoothing),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaumWelchOptions {
    /// Maximum number of re-estimation steps.
    pub max_iters: usize,
    /// Stop once the objective changes by less than this.
    pub tol: f64,
    /// Additive smoothing on expected counts.
    pub smoothing: f64,
}

impl Default for BaumWelchOptions {
    fn default() -> Self {
        BaumWelchOptions {
            max_iters: 200,
            tol: 1e-6,
            smoothing: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchFit {
    pub hmm: Hmm,
    /// EM objective per parameter set visited, starting with the initial model.
    /// This is the log-likelihood plus the smoothing log-prior, and equals the
    /// plain log-likelihood when smoothing is zero.
    pub objective_trace: Vec<f64>,
    /// Plain data log-likelihood for the same parameter sets.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BaumWelchFit {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().expect("trace holds the initial model")
    }
}

/// Forward-backward EM with per-step scaling.
pub fn baum_welch(hmm0: &Hmm, sequences: &[Vec<usize>], opts: &BaumWelchOptions) -> Result<BaumWelchFit> {
    hmm0.validate()?;
    hmm0.check_symbols(sequences)?;
    if !(opts.smoothing >= 0.0 && opts.smoothing.is_finite()) || !(opts.tol >= 0.0) {
        return Err(Error::Config("Baum-Welch smoothing and tol must be non-negative".into()));
    }

    let mut hmm = hmm0.clone();
    let mut counts = expected_counts(&hmm, sequences)?;
    let mut objective_trace = vec![counts.log_likelihood + hmm.log_smoothing_prior(opts.smoothing)];
    let mut log_likelihood_trace = vec![counts.log_likelihood];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        let next = Hmm {
            initial: normalize_vec(counts.initial.clone(), opts.smoothing),
            transition: normalize_rows(counts.transition.clone(), opts.smoothing),
            emission: normalize_rows(counts.emission.clone(), opts.smoothing),
        };
        let next_counts = expected_counts(&next, sequences)?;
        let objective = next_counts.log_likelihood + next.log_smoothing_prior(opts.smoothing);
        let previous = *objective_trace.last().unwrap();
        objective_trace.push(objective);
        log_likelihood_trace.push(next_counts.log_likelihood);
        hmm = next;
        counts = next_counts;
        iterations += 1;
        if (objective - previous).abs() < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(BaumWelchFit {
        hmm,
        objective_trace,
        log_likelihood_trace,
        iterations,
        converged,
    })
}
