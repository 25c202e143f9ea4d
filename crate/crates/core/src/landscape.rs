//! Linear interpolation curves, empirical loss barriers, and barrier
//! statistics over model populations.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{evaluate, lerp_params, recalibrate_batchnorm, ModelParams};
use crate::permute::{barrier_after_match, DEFAULT_MAX_SWEEPS};

pub const DEFAULT_NUM_POINTS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarrierParams {
    /// Equispaced interpolation points including both endpoints.
    pub num_points: usize,
    pub dataset_tag: Split,
    /// Weight-match the second model onto the first before interpolating.
    pub align: bool,
    pub match_sweeps: usize,
    pub match_seed: u64,
}

impl Default for BarrierParams {
    fn default() -> Self {
        Self {
            num_points: DEFAULT_NUM_POINTS,
            dataset_tag: Split::Train,
            align: true,
            match_sweeps: DEFAULT_MAX_SWEEPS,
            match_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationCurve {
    pub t_values: Vec<f64>,
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub loss_a: f64,
    pub loss_b: f64,
    pub dataset_tag: Split,
    pub recalibrated: bool,
    /// Number of interpolants whose normalization statistics were recomputed.
    pub recalibrations: usize,
}

impl InterpolationCurve {
    /// A curve from precomputed values; endpoint losses are the first and last entries.
    pub fn from_values(t_values: Vec<f64>, loss: Vec<f64>, accuracy: Vec<f64>, dataset_tag: Split) -> Result<Self> {
        if t_values.len() < 2 || loss.len() != t_values.len() || accuracy.len() != t_values.len() {
            return Err(Error::InvalidArgument(
                "curve needs >= 2 points with one loss and accuracy each".into(),
            ));
        }
        if t_values[0] != 0.0 || *t_values.last().expect("non-empty") != 1.0 {
            return Err(Error::InvalidArgument("curve must start at t=0 and end at t=1".into()));
        }
        if t_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("t values must be strictly increasing".into()));
        }
        if loss.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::NonFinite("curve loss"));
        }
        Ok(Self {
            loss_a: loss[0],
            loss_b: *loss.last().expect("non-empty"),
            t_values,
            loss,
            accuracy,
            dataset_tag,
            recalibrated: false,
            recalibrations: 0,
        })
    }

    /// CSV with header `t,loss,acc`, nine significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,loss,acc\n");
        for i in 0..self.t_values.len() {
            let _ = writeln!(
                s,
                "{},{},{}",
                fmt_sig(self.t_values[i], 9),
                fmt_sig(self.loss[i], 9),
                fmt_sig(self.accuracy[i], 9)
            );
        }
        s
    }
}

/// Formats `v` with `digits` significant digits in positional notation.
pub fn fmt_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{:.*}", digits.saturating_sub(1), v);
    }
    let magnitude = v.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

/// `i / (k - 1)` for `i = 0..k`; nested grids share their common points exactly.
pub fn equispaced(num_points: usize) -> Vec<f64> {
    let d = (num_points - 1) as f64;
    (0..num_points).map(|i| i as f64 / d).collect()
}

/// Loss and accuracy along `(1 - t) * a + t * b` over the evaluation set.
///
/// For batchnorm architectures every interpolant has its statistics
/// recomputed on `calibration` (the evaluation set when `None`) before
/// being evaluated.
pub fn interpolation_curve(
    a: &ModelParams<f32>,
    b: &ModelParams<f32>,
    eval: &Dataset,
    calibration: Option<&Dataset>,
    params: &BarrierParams,
) -> Result<InterpolationCurve> {
    a.arch().ensure_compatible(b.arch())?;
    if params.num_points < 2 {
        return Err(Error::InvalidArgument("num_points must be >= 2".into()));
    }
    if eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let calib = calibration.unwrap_or(eval);
    let bn = a.arch().use_batchnorm;
    let t_values = equispaced(params.num_points);
    let points: Vec<(f64, f64)> = t_values
        .par_iter()
        .map(|&t| -> Result<(f64, f64)> {
            let mut m = lerp_params(a, b, t)?;
            if bn {
                m = recalibrate_batchnorm(&m, calib)?;
            }
            let la = evaluate(&m, eval)?;
            Ok((la.loss, la.accuracy))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, accuracy): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
    let mut curve = InterpolationCurve::from_values(t_values, loss, accuracy, params.dataset_tag)?;
    curve.recalibrated = bn;
    curve.recalibrations = if bn { params.num_points } else { 0 };
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierReport {
    pub barrier: f64,
    pub argmax_t: f64,
    pub curve: InterpolationCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierSummary {
    pub barrier: f64,
    pub argmax_t: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub dataset_tag: Split,
    pub num_points: usize,
    pub matched: bool,
}

impl BarrierReport {
    pub fn summary(&self, matched: bool) -> BarrierSummary {
        BarrierSummary {
            barrier: self.barrier,
            argmax_t: self.argmax_t,
            loss_a: self.curve.loss_a,
            loss_b: self.curve.loss_b,
            dataset_tag: self.curve.dataset_tag,
            num_points: self.curve.t_values.len(),
            matched,
        }
    }
}

/// Largest excess of the interpolated loss over the chord between the
/// endpoint losses, taken over the interior grid points (the endpoints sit
/// on the chord by construction). The value is signed: a curve lying
/// strictly below its chord gives a negative barrier. Ties resolve to the
/// smallest `t`, endpoints included, so a zero barrier (a flat curve or a
/// two-point curve) is reported at `t = 0`.
pub fn barrier(curve: InterpolationCurve) -> BarrierReport {
    let n = curve.t_values.len();
    let excess = |i: usize| {
        let t = curve.t_values[i];
        curve.loss[i] - ((1.0 - t) * curve.loss_a + t * curve.loss_b)
    };
    let (mut best, mut best_t) = (0.0, 0.0);
    if n > 2 {
        best = f64::NEG_INFINITY;
        for i in 1..n - 1 {
            let e = excess(i);
            if e > best {
                best = e;
                best_t = curve.t_values[i];
            }
        }
    }
    if best == 0.0 {
        best_t = 0.0;
    }
    BarrierReport {
        barrier: best,
        argmax_t: best_t,
        curve,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierStats {
    pub min: f64,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub std: f64,
    pub max: f64,
    pub count: usize,
}

impl BarrierStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no barrier values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            mean,
            std,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: values.len(),
        })
    }
}

/// Pooled standard deviation of two samples.
pub fn pooled_std(a: &BarrierStats, b: &BarrierStats) -> f64 {
    let dof = (a.count + b.count) as f64 - 2.0;
    if dof <= 0.0 {
        return 0.0;
    }
    let ss = (a.count as f64 - 1.0) * a.std.powi(2) + (b.count as f64 - 1.0) * b.std.powi(2);
    (ss / dof).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBarrier {
    /// Index of the reference (first) model; `None` for the star reference.
    pub a: Option<usize>,
    pub b: usize,
    pub barrier: f64,
    pub argmax_t: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationBarriers {
    pub stats: BarrierStats,
    pub pairs: Vec<PairBarrier>,
}

impl PopulationBarriers {
    /// Per-pair CSV: `a,b,barrier,argmax_t,matched`, `a` empty for the star.
    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("a,b,barrier,argmax_t,matched\n");
        for p in &self.pairs {
            let a = p.a.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{a},{},{},{},{}",
                p.b,
                fmt_sig(p.barrier, 17),
                fmt_sig(p.argmax_t, 9),
                p.matched
            );
        }
        s
    }
}

/// Barrier statistics across a population.
///
/// Without a reference, every unordered pair `(i, j)`, `i < j`, is measured
/// with model `j` matched onto model `i`. With a reference (star mode),
/// every model is matched onto the reference.
pub fn pairwise_barrier_stats(
    models: &[ModelParams<f32>],
    reference: Option<&ModelParams<f32>>,
    eval: &Dataset,
    calibration: Option<&Dataset>,
    params: &BarrierParams,
) -> Result<PopulationBarriers> {
    let jobs: Vec<(Option<usize>, usize)> = match reference {
        Some(_) => {
            if models.is_empty() {
                return Err(Error::InvalidArgument("star mode needs at least one model".into()));
            }
            (0..models.len()).map(|j| (None, j)).collect()
        }
        None => {
            if models.len() < 2 {
                return Err(Error::InvalidArgument("pairwise mode needs at least two models".into()));
            }
            (0..models.len())
                .flat_map(|i| (i + 1..models.len()).map(move |j| (Some(i), j)))
                .collect()
        }
    };
    let pairs = jobs
        .par_iter()
        .map(|&(a, b)| -> Result<PairBarrier> {
            let first = match a {
                Some(i) => &models[i],
                None => reference.expect("star mode"),
            };
            let mb = barrier_after_match(first, &models[b], eval, calibration, params)?;
            Ok(PairBarrier {
                a,
                b,
                barrier: mb.report.barrier,
                argmax_t: mb.report.argmax_t,
                matched: mb.matched,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = pairs.iter().map(|p| p.barrier).collect();
    Ok(PopulationBarriers {
        stats: BarrierStats::from_values(&values)?,
        pairs,
    })
}
