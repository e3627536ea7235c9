//! Accuracy of the augmented, existing and IVE models against the target.
//!
//! Errors are absolute differences at shared probe points:
//! E1 for the existing BPM, E2 for the synthetic IVE data and E3 for the
//! augmented BPM. Two one-tailed tests check whether E3 is smaller than E1
//! and E2 on average.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorKind {
    #[serde(rename = "E1_existing")]
    E1Existing,
    #[serde(rename = "E2_ive")]
    E2Ive,
    #[serde(rename = "E3_augmented")]
    E3Augmented,
}

impl ErrorKind {
    pub fn label(self) -> &'static str {
        match self {
            ErrorKind::E1Existing => "E1_existing",
            ErrorKind::E2Ive => "E2_ive",
            ErrorKind::E3Augmented => "E3_augmented",
        }
    }
}

/// Absolute errors of one model, aligned with the lux points they were
/// measured at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    pub kind: ErrorKind,
    pub values: Vec<f64>,
    pub point_ids: Vec<f64>,
}

impl ErrorSeries {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn check_aligned(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("{what}: {} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Domain(format!("{what}: no values")));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(model_p: &[f64], target_p: &[f64]) -> Result<f64> {
    check_aligned(model_p, target_p, "mae")?;
    Ok(model_p
        .iter()
        .zip(target_p)
        .map(|(y, x)| (y - x).abs())
        .sum::<f64>()
        / model_p.len() as f64)
}

pub fn error_series(kind: ErrorKind, model_p: &[f64], target_p: &[f64], point_ids: &[f64]) -> Result<ErrorSeries> {
    check_aligned(model_p, target_p, kind.label())?;
    check_aligned(model_p, point_ids, kind.label())?;
    Ok(ErrorSeries {
        kind,
        values: model_p.iter().zip(target_p).map(|(y, x)| (y - x).abs()).collect(),
        point_ids: point_ids.to_vec(),
    })
}

/// CDF of Student's t distribution with `df` degrees of freedom.
///
/// Uses `P(T > |t|) = I_{df/(df+t²)}(df/2, 1/2) / 2`.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    upper_tail(-t, df)
}

/// `P(T > t)`, computed without cancellation for large `t`.
pub fn upper_tail(t: f64, df: f64) -> f64 {
    assert!(df > 0.0, "degrees of freedom must be positive");
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let x = df / (df + t * t);
    let half = 0.5 * beta_reg(df / 2.0, 0.5, x);
    if t > 0.0 {
        half
    } else {
        1.0 - half
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Differences at identical probe points.
    #[default]
    Paired,
    /// Unpaired, unequal variances.
    Welch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub kind: TTestKind,
    pub t_statistic: f64,
    pub df: f64,
    /// One-tailed `P(T > t)` under H0.
    pub p_value: f64,
    pub alpha: f64,
    pub reject_h0: bool,
}

fn sample_variance(values: &[f64], mean: f64) -> f64 {
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn finish(kind: TTestKind, t: f64, df: f64, alpha: f64) -> TTestResult {
    let p_value = upper_tail(t, df);
    TTestResult {
        kind,
        t_statistic: t,
        df,
        p_value,
        alpha,
        reject_h0: p_value < alpha,
    }
}

/// Tests H1: `mean(a) - mean(b) > 0`.
pub fn one_tailed_t_test(a: &ErrorSeries, b: &ErrorSeries, alpha: f64) -> Result<TTestResult> {
    t_test(a, b, alpha, TTestKind::Paired)
}

pub fn t_test(a: &ErrorSeries, b: &ErrorSeries, alpha: f64, kind: TTestKind) -> Result<TTestResult> {
    check_alpha(alpha)?;
    match kind {
        TTestKind::Paired => {
            if a.point_ids != b.point_ids || a.values.len() != b.values.len() {
                return Err(Error::Alignment(format!(
                    "{} and {} are not measured at the same points",
                    a.kind.label(),
                    b.kind.label()
                )));
            }
            let n = a.values.len();
            if n < 2 {
                return Err(Error::DegenerateTest("paired test needs at least 2 points".into()));
            }
            let d: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
            let mean = d.iter().sum::<f64>() / n as f64;
            let var = sample_variance(&d, mean);
            if var <= 0.0 {
                return Err(Error::DegenerateTest(format!(
                    "differences between {} and {} have zero variance",
                    a.kind.label(),
                    b.kind.label()
                )));
            }
            let t = mean / (var / n as f64).sqrt();
            Ok(finish(kind, t, (n - 1) as f64, alpha))
        }
        TTestKind::Welch => {
            let (na, nb) = (a.values.len(), b.values.len());
            if na < 2 || nb < 2 {
                return Err(Error::DegenerateTest("Welch test needs at least 2 values per group".into()));
            }
            let (ma, mb) = (a.mean(), b.mean());
            let (sa, sb) = (
                sample_variance(&a.values, ma) / na as f64,
                sample_variance(&b.values, mb) / nb as f64,
            );
            if sa + sb <= 0.0 {
                return Err(Error::DegenerateTest("both groups have zero variance".into()));
            }
            let t = (ma - mb) / (sa + sb).sqrt();
            let df = (sa + sb).powi(2) / (sa * sa / (na - 1) as f64 + sb * sb / (nb - 1) as f64);
            Ok(finish(kind, t, df, alpha))
        }
    }
}

/// Result of a hypothesis test, or the reason it could not be run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum HypothesisOutcome {
    Tested(TTestResult),
    Degenerate { reason: String },
}

impl HypothesisOutcome {
    pub fn rejects_h0(&self) -> bool {
        matches!(self, HypothesisOutcome::Tested(r) if r.reject_h0)
    }

    pub fn result(&self) -> Option<&TTestResult> {
        match self {
            HypothesisOutcome::Tested(r) => Some(r),
            HypothesisOutcome::Degenerate { .. } => None,
        }
    }
}

/// Published results for the preset experiments, carried for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub mae_augmented: f64,
    pub mae_existing: f64,
    pub mae_ive: f64,
    pub t_hypothesis1: f64,
    pub t_hypothesis2: f64,
}

pub fn reference_values(experiment: &str) -> Option<ReferenceValues> {
    match experiment {
        "experiment1" => Some(ReferenceValues {
            mae_augmented: 0.17,
            mae_existing: 0.48,
            mae_ive: 0.47,
            t_hypothesis1: 44.300,
            t_hypothesis2: 17.873,
        }),
        "experiment2" => Some(ReferenceValues {
            mae_augmented: 0.14,
            mae_existing: 0.41,
            mae_ive: 0.47,
            t_hypothesis1: 53.535,
            t_hypothesis2: 19.377,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub work_lux: f64,
    pub target: f64,
    pub augmented: f64,
    pub existing: f64,
    pub ive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub mae_augmented: f64,
    pub mae_existing: f64,
    pub mae_ive: f64,
    pub e1: ErrorSeries,
    pub e2: ErrorSeries,
    pub e3: ErrorSeries,
    /// H1: existing errors exceed augmented errors.
    pub hypothesis1: HypothesisOutcome,
    /// H2: IVE errors exceed augmented errors.
    pub hypothesis2: HypothesisOutcome,
    pub probe_points: usize,
    pub plot: Vec<PlotRow>,
    pub reference: Option<ReferenceValues>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub alpha: f64,
    pub test: TTestKind,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            alpha: 0.05,
            test: TTestKind::Paired,
        }
    }
}

/// Series at one set of probe points, all aligned with `point_ids`.
#[derive(Debug, Clone, Copy)]
pub struct ModelSeries<'a> {
    pub augmented: &'a [f64],
    pub existing: &'a [f64],
    pub ive: &'a [f64],
    pub target: &'a [f64],
    pub point_ids: &'a [f64],
}

fn run_test(a: &ErrorSeries, b: &ErrorSeries, opts: &ReportOptions) -> Result<HypothesisOutcome> {
    match t_test(a, b, opts.alpha, opts.test) {
        Ok(r) => Ok(HypothesisOutcome::Tested(r)),
        Err(Error::DegenerateTest(reason)) => Ok(HypothesisOutcome::Degenerate { reason }),
        Err(e) => Err(e),
    }
}

pub fn build_report(experiment: &str, series: ModelSeries<'_>, opts: &ReportOptions) -> Result<EvalReport> {
    let e1 = error_series(ErrorKind::E1Existing, series.existing, series.target, series.point_ids)?;
    let e2 = error_series(ErrorKind::E2Ive, series.ive, series.target, series.point_ids)?;
    let e3 = error_series(ErrorKind::E3Augmented, series.augmented, series.target, series.point_ids)?;
    let hypothesis1 = run_test(&e1, &e3, opts)?;
    let hypothesis2 = run_test(&e2, &e3, opts)?;
    let plot = (0..series.point_ids.len())
        .map(|i| PlotRow {
            work_lux: series.point_ids[i],
            target: series.target[i],
            augmented: series.augmented[i],
            existing: series.existing[i],
            ive: series.ive[i],
        })
        .collect();
    Ok(EvalReport {
        experiment: experiment.to_owned(),
        mae_augmented: e3.mean(),
        mae_existing: e1.mean(),
        mae_ive: e2.mean(),
        e1,
        e2,
        e3,
        hypothesis1,
        hypothesis2,
        probe_points: series.point_ids.len(),
        plot,
        reference: reference_values(experiment),
    })
}

fn verdict(outcome: &HypothesisOutcome) -> &'static str {
    match outcome {
        HypothesisOutcome::Tested(r) if r.reject_h0 => "Reject",
        HypothesisOutcome::Tested(_) => "Fail to reject",
        HypothesisOutcome::Degenerate { .. } => "Degenerate",
    }
}

impl EvalReport {
    /// Augmented beats both baselines and both tests reject H0.
    pub fn improvement_holds(&self) -> bool {
        self.mae_augmented < self.mae_existing
            && self.mae_augmented < self.mae_ive
            && self.hypothesis1.rejects_h0()
            && self.hypothesis2.rejects_h0()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let refs = self.reference;
        let fmt_ref = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v}"));
        let _ = writeln!(s, "Experiment: {} ({} probe points)", self.experiment, self.probe_points);
        let _ = writeln!(s);
        let _ = writeln!(s, "Mean absolute error against the target");
        let _ = writeln!(s, "  {:<12} {:>10} {:>10}", "model", "MAE", "reference");
        for (name, v, r) in [
            ("augmented", self.mae_augmented, refs.map(|r| r.mae_augmented)),
            ("existing", self.mae_existing, refs.map(|r| r.mae_existing)),
            ("ive", self.mae_ive, refs.map(|r| r.mae_ive)),
        ] {
            let _ = writeln!(s, "  {name:<12} {v:>10.4} {:>10}", fmt_ref(r));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Absolute errors");
        let _ = writeln!(s, "  E1 = |existing - target|, E2 = |ive - target|, E3 = |augmented - target|");
        let _ = writeln!(s);
        let _ = writeln!(s, "One-tailed t-tests");
        let _ = writeln!(
            s,
            "  {:<30} {:>10} {:>8} {:>12} {:>15} {:>10}",
            "hypothesis", "t", "df", "p-value", "H0", "reference t"
        );
        for (name, outcome, r) in [
            ("H1: mean E1 - mean E3 > 0", &self.hypothesis1, refs.map(|r| r.t_hypothesis1)),
            ("H2: mean E2 - mean E3 > 0", &self.hypothesis2, refs.map(|r| r.t_hypothesis2)),
        ] {
            match outcome {
                HypothesisOutcome::Tested(t) => {
                    let _ = writeln!(
                        s,
                        "  {name:<30} {:>10.3} {:>8.1} {:>12.4e} {:>15} {:>10}",
                        t.t_statistic,
                        t.df,
                        t.p_value,
                        verdict(outcome),
                        fmt_ref(r)
                    );
                }
                HypothesisOutcome::Degenerate { reason } => {
                    let _ = writeln!(s, "  {name:<30} degenerate: {reason}");
                }
            }
        }
        if let Some(t) = self.hypothesis1.result().or(self.hypothesis2.result()) {
            let _ = writeln!(s, "  ({:?} test, alpha = {})", t.kind, t.alpha);
        }
        s
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(self.to_text().as_bytes())
    }

    /// `metric,experiment,value` rows.
    pub fn write_metrics_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "metric,experiment,value")?;
        let e = &self.experiment;
        writeln!(out, "mae_augmented,{e},{}", self.mae_augmented)?;
        writeln!(out, "mae_existing,{e},{}", self.mae_existing)?;
        writeln!(out, "mae_ive,{e},{}", self.mae_ive)?;
        writeln!(out, "probe_points,{e},{}", self.probe_points)?;
        for (tag, outcome) in [("h1", &self.hypothesis1), ("h2", &self.hypothesis2)] {
            match outcome {
                HypothesisOutcome::Tested(t) => {
                    writeln!(out, "{tag}_t,{e},{}", t.t_statistic)?;
                    writeln!(out, "{tag}_df,{e},{}", t.df)?;
                    writeln!(out, "{tag}_p_value,{e},{}", t.p_value)?;
                    writeln!(out, "{tag}_reject_h0,{e},{}", u8::from(t.reject_h0))?;
                }
                HypothesisOutcome::Degenerate { .. } => {
                    writeln!(out, "{tag}_degenerate,{e},1")?;
                }
            }
        }
        Ok(())
    }

    /// `work_lux,target,augmented,existing,ive` rows, one per probe point.
    pub fn write_plot_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "work_lux,target,augmented,existing,ive")?;
        for r in &self.plot {
            writeln!(out, "{},{},{},{},{}", r.work_lux, r.target, r.augmented, r.existing, r.ive)?;
        }
        Ok(())
    }
}
