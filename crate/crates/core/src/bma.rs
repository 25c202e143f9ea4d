//! Bayesian model averaging over the star domain, the deep-ensemble
//! baseline, and uncertainty metrics.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::landscape::fmt_sig;
use crate::nn::{lerp_params, predict_logits, recalibrate_batchnorm, softmax, Matrix, ModelParams};
use crate::permute::{apply_permutation, weight_match};
use crate::starlight::{sample_t, SamplingScheme};

pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    StarDomain,
    DeepEnsemble,
}

#[derive(Debug, Clone)]
pub struct PosteriorSpec {
    star: ModelParams<f32>,
    sources: Vec<ModelParams<f32>>,
    mode: PosteriorMode,
    t_scheme: SamplingScheme,
    calibration: Option<Dataset>,
}

impl PosteriorSpec {
    /// Star-domain posterior. Sources are aligned onto the star here, once.
    pub fn star_domain(
        star: ModelParams<f32>,
        sources: &[ModelParams<f32>],
        match_sweeps: usize,
        seed: u64,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidArgument("star-domain posterior needs at least one source".into()));
        }
        let aligned = sources
            .par_iter()
            .enumerate()
            .map(|(n, src)| {
                star.arch().ensure_compatible(src.arch())?;
                if *src == star {
                    return Ok(src.clone());
                }
                let m = weight_match(&star, src, match_sweeps, seed.wrapping_add(n as u64))?;
                apply_permutation(&m.permutation, src)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            star,
            sources: aligned,
            mode: PosteriorMode::StarDomain,
            t_scheme: SamplingScheme::Uniform01,
            calibration: None,
        })
    }

    /// Uniform distribution over the given models, sampled without replacement.
    pub fn deep_ensemble(members: &[ModelParams<f32>]) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("deep ensemble needs at least one member".into()))?;
        for m in members {
            first.arch().ensure_compatible(m.arch())?;
        }
        Ok(Self {
            star: first.clone(),
            sources: members.to_vec(),
            mode: PosteriorMode::DeepEnsemble,
            t_scheme: SamplingScheme::Uniform01,
            calibration: None,
        })
    }

    /// Replaces the `t ~ U[0, 1]` draw, e.g. to pin `t` for testing.
    pub fn with_t_scheme(mut self, scheme: SamplingScheme) -> Result<Self> {
        scheme.validate()?;
        self.t_scheme = scheme;
        Ok(self)
    }

    /// Dataset used to recompute batchnorm statistics of interpolants.
    /// Without one, the evaluation set is used.
    pub fn with_calibration(mut self, dataset: Dataset) -> Self {
        self.calibration = Some(dataset);
        self
    }

    pub fn star(&self) -> &ModelParams<f32> {
        &self.star
    }

    pub fn sources(&self) -> &[ModelParams<f32>] {
        &self.sources
    }

    pub fn mode(&self) -> PosteriorMode {
        self.mode
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorSample {
    /// Chosen source (star domain) or ensemble member index.
    pub source: usize,
    /// Interpolation coefficient; always 1 for ensemble members.
    pub t: f64,
    pub params: ModelParams<f32>,
}

/// Draws `k` models from the posterior. Star-domain samples are
/// batchnorm-recalibrated on `calibration` when the architecture uses it.
pub fn sample_posterior<R: Rng + ?Sized>(
    spec: &PosteriorSpec,
    k: usize,
    calibration: Option<&Dataset>,
    rng: &mut R,
) -> Result<Vec<PosteriorSample>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    match spec.mode {
        PosteriorMode::DeepEnsemble => {
            let n = spec.sources.len();
            if k > n {
                return Err(Error::InvalidArgument(format!("cannot draw {k} distinct members from {n}")));
            }
            let mut idx = sample_indices(rng, n, k).into_vec();
            idx.sort_unstable();
            Ok(idx
                .into_iter()
                .map(|i| PosteriorSample {
                    source: i,
                    t: 1.0,
                    params: spec.sources[i].clone(),
                })
                .collect())
        }
        PosteriorMode::StarDomain => {
            let draws: Vec<(usize, f64)> = (0..k)
                .map(|_| {
                    let n = rng.random_range(0..spec.sources.len());
                    (n, sample_t(spec.t_scheme, rng))
                })
                .collect();
            let calibration = spec.calibration.as_ref().or(calibration);
            let bn = spec.star.arch().use_batchnorm;
            draws
                .into_par_iter()
                .map(|(n, t)| {
                    let mut params = lerp_params(&spec.star, &spec.sources[n], t)?;
                    // Endpoints keep their stored statistics.
                    if bn && t > 0.0 && t < 1.0 {
                        let ds = calibration.ok_or_else(|| {
                            Error::InvalidArgument("batchnorm interpolants need a calibration set".into())
                        })?;
                        params = recalibrate_batchnorm(&params, ds)?;
                    }
                    Ok(PosteriorSample { source: n, t, params })
                })
                .collect()
        }
    }
}

/// Mean of the per-model softmax outputs.
pub fn averaged_predict(models: &[ModelParams<f32>], inputs: &Matrix<f32>) -> Result<Matrix<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("averaged_predict needs at least one model".into()))?;
    for m in models {
        first.arch().ensure_compatible(m.arch())?;
    }
    let probs = models
        .par_iter()
        .map(|m| Ok(softmax(&predict_logits::<f32>(m, inputs)?)))
        .collect::<Result<Vec<Matrix<f64>>>>()?;
    let (rows, cols) = probs[0].shape();
    let mut sum = vec![0.0f64; rows * cols];
    for p in &probs {
        for (s, v) in sum.iter_mut().zip(p.as_slice()) {
            *s += v;
        }
    }
    let k = probs.len() as f64;
    sum.iter_mut().for_each(|s| *s /= k);
    Matrix::from_vec(rows, cols, sum)
}

/// Mann-Whitney AUROC of separating correct from incorrect predictions
/// by confidence, with ties earning half credit.
pub fn auroc(confidence: &[f64], correct: &[bool]) -> Result<f64> {
    if confidence.len() != correct.len() {
        return Err(Error::dim("auroc labels", confidence.len(), correct.len()));
    }
    if confidence.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("auroc confidence"));
    }
    let pos = correct.iter().filter(|&&c| c).count();
    let neg = correct.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "auroc needs at least one correct and one incorrect prediction".into(),
        ));
    }
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]));
    // Twice the rank sum keeps tied (half-integer) ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && confidence[order[j + 1]] == confidence[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean, (i + j + 2) / 2.
        let twice_rank = (i + j + 2) as u128;
        let hits = order[i..=j].iter().filter(|&&o| correct[o]).count() as u128;
        twice_rank_sum += twice_rank * hits;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

fn check_distribution(row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|p| !p.is_finite() || *p < -1e-12 || *p > 1.0 + 1e-12) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("row is not a probability distribution (sum {sum})")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceScores {
    pub maxprob: Vec<f64>,
    /// `sum p ln p`; higher means more confident.
    pub neg_entropy: Vec<f64>,
}

pub fn confidence_scores(probs: &Matrix<f64>) -> Result<ConfidenceScores> {
    let mut maxprob = Vec::with_capacity(probs.rows());
    let mut neg_entropy = Vec::with_capacity(probs.rows());
    for r in 0..probs.rows() {
        let row = probs.row(r);
        check_distribution(row)?;
        maxprob.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        neg_entropy.push(row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum());
    }
    Ok(ConfidenceScores { maxprob, neg_entropy })
}

fn top_label(row: &[f64]) -> usize {
    // First maximum wins.
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Top-label ECE from confidences and correctness, bins equal-width over
/// `(lower, 1]`. Confidences at or below `lower` land in the first bin.
pub fn ece_from_confidences(confidence: &[f64], correct: &[bool], num_bins: usize, lower: f64) -> Result<f64> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("num_bins must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&lower) {
        return Err(Error::InvalidArgument(format!("bin range lower bound {lower} outside [0, 1)")));
    }
    if confidence.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if confidence.len() != correct.len() {
        return Err(Error::dim("ece labels", confidence.len(), correct.len()));
    }
    let width = (1.0 - lower) / num_bins as f64;
    let mut count = vec![0usize; num_bins];
    let mut hits = vec![0usize; num_bins];
    let mut conf = vec![0.0f64; num_bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        if !c.is_finite() {
            return Err(Error::NonFinite("ece confidence"));
        }
        let b = (((c - lower) / width).ceil() as isize - 1).clamp(0, num_bins as isize - 1) as usize;
        count[b] += 1;
        hits[b] += ok as usize;
        conf[b] += c;
    }
    let n = confidence.len() as f64;
    let total = (0..num_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            m * (hits[b] as f64 / m - conf[b] / m).abs()
        })
        .sum::<f64>();
    Ok((total / n).clamp(0.0, 1.0))
}

/// Top-label ECE with `num_bins` equal-width bins over `(0, 1]`.
pub fn ece(probs: &Matrix<f64>, labels: &[usize], num_bins: usize) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::dim("ece labels", probs.rows(), labels.len()));
    }
    let scores = confidence_scores(probs)?;
    let correct: Vec<bool> = (0..probs.rows()).map(|r| top_label(probs.row(r)) == labels[r]).collect();
    ece_from_confidences(&scores.maxprob, &correct, num_bins, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub auroc_maxprob: f64,
    pub auroc_entropy: f64,
    pub ece: f64,
    pub accuracy: f64,
    pub num_samples: usize,
}

/// Metrics of a predictive distribution against labels.
pub fn report_from_probs(probs: &Matrix<f64>, labels: &[usize], num_bins: usize, num_samples: usize) -> Result<UncertaintyReport> {
    if probs.rows() != labels.len() {
        return Err(Error::dim("report labels", probs.rows(), labels.len()));
    }
    if probs.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let scores = confidence_scores(probs)?;
    let correct: Vec<bool> = (0..probs.rows()).map(|r| top_label(probs.row(r)) == labels[r]).collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    Ok(UncertaintyReport {
        auroc_maxprob: auroc(&scores.maxprob, &correct)?,
        auroc_entropy: auroc(&scores.neg_entropy, &correct)?,
        ece: ece_from_confidences(&scores.maxprob, &correct, num_bins, 0.0)?,
        accuracy,
        num_samples,
    })
}

#[derive(Debug, Clone)]
pub struct UncertaintyEvaluation {
    pub report: UncertaintyReport,
    pub probs: Matrix<f64>,
    /// `(source, t)` of every sampled model.
    pub draws: Vec<(usize, f64)>,
    pub dataset_tag: Split,
}

/// Samples `k` models, averages their predictions on `dataset`, and scores
/// the result.
pub fn evaluate_uncertainty<R: Rng + ?Sized>(
    spec: &PosteriorSpec,
    k: usize,
    dataset: &Dataset,
    num_bins: usize,
    rng: &mut R,
) -> Result<UncertaintyEvaluation> {
    let samples = sample_posterior(spec, k, Some(dataset), rng)?;
    let draws = samples.iter().map(|s| (s.source, s.t)).collect();
    let models: Vec<ModelParams<f32>> = samples.into_iter().map(|s| s.params).collect();
    let probs = averaged_predict(&models, dataset.inputs())?;
    let report = report_from_probs(&probs, dataset.labels(), num_bins, k)?;
    Ok(UncertaintyEvaluation {
        report,
        probs,
        draws,
        dataset_tag: dataset.split(),
    })
}

/// `example_id,label,p_0..p_{C-1}` with 17 significant digits, enough to
/// recover every probability exactly.
pub fn probs_csv(probs: &Matrix<f64>, labels: &[usize]) -> String {
    let mut out = String::from("example_id,label");
    for c in 0..probs.cols() {
        out.push_str(&format!(",p_{c}"));
    }
    out.push('\n');
    for (r, label) in labels.iter().enumerate().take(probs.rows()) {
        out.push_str(&format!("{r},{label}"));
        for &p in probs.row(r) {
            out.push(',');
            out.push_str(&format!("{p:e}"));
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`probs_csv`].
pub fn parse_probs_csv(text: &str) -> Result<(Matrix<f64>, Vec<usize>)> {
    let bad = |line: usize, msg: &str| Error::InvalidArgument(format!("probability dump line {line}: {msg}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let cols = header.split(',').count().checked_sub(2).ok_or_else(|| bad(1, "short header"))?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols + 2 {
            return Err(bad(i + 2, "wrong number of fields"));
        }
        labels.push(fields[1].parse().map_err(|_| bad(i + 2, "bad label"))?);
        for f in &fields[2..] {
            values.push(f.parse::<f64>().map_err(|_| bad(i + 2, "bad probability"))?);
        }
    }
    Ok((Matrix::from_vec(labels.len(), cols, values)?, labels))
}

/// One row of the k-sweep table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mode: PosteriorMode,
    pub report: UncertaintyReport,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("mode,k,auroc_maxprob,auroc_entropy,ece,accuracy\n");
    for r in rows {
        let mode = match r.mode {
            PosteriorMode::StarDomain => "star_domain",
            PosteriorMode::DeepEnsemble => "deep_ensemble",
        };
        out.push_str(&format!(
            "{mode},{},{},{},{},{}\n",
            r.k,
            fmt_sig(r.report.auroc_maxprob, 9),
            fmt_sig(r.report.auroc_entropy, 9),
            fmt_sig(r.report.ece, 9),
            fmt_sig(r.report.accuracy, 9)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_edge_cases() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[true, false, true, false, true, true]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn ece_hand_example() {
        let v = ece_from_confidences(&[0.9, 0.9, 0.6, 0.6], &[true, false, true, true], 2, 0.5).unwrap();
        assert_eq!(v, 0.4);
    }

    #[test]
    fn ece_of_confident_correct_predictor_is_zero() {
        let probs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(ece(&probs, &[0, 1], DEFAULT_ECE_BINS).unwrap(), 0.0);
        assert_eq!(ece(&probs, &[0, 1], 1).unwrap(), 0.0);
    }

    #[test]
    fn confidence_of_one_hot_and_uniform() {
        let probs = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0 / 3.0; 3]]).unwrap();
        let s = confidence_scores(&probs).unwrap();
        assert_eq!(s.maxprob[0], 1.0);
        assert_eq!(s.neg_entropy[0], 0.0);
        assert!((s.maxprob[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.neg_entropy[1] + 3f64.ln()).abs() < 1e-12);
        let bad = Matrix::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(confidence_scores(&bad).is_err());
    }

    #[test]
    fn probs_csv_roundtrip_is_exact() {
        let probs = Matrix::from_rows(&[vec![0.1, 0.9], vec![1.0 / 3.0, 2.0 / 3.0]]).unwrap();
        let text = probs_csv(&probs, &[1, 0]);
        assert!(text.starts_with("example_id,label,p_0,p_1\n0,1,"));
        let (back, labels) = parse_probs_csv(&text).unwrap();
        assert_eq!(back, probs);
        assert_eq!(labels, vec![1, 0]);
    }
}
