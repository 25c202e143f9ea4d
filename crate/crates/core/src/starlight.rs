//! Star-model training.
//!
//! A star model is trained to have low loss along the straight segments to
//! every (permutation-aligned) source model. Each step picks one source and
//! one interpolation coefficient `t`, evaluates the batch loss at the
//! interpolant `phi = (1 - t) * theta + t * theta_n`, and updates `theta`
//! with the chain-rule gradient `(1 - t) * grad_phi`. Sources are
//! re-aligned onto the current `theta` by weight matching every
//! `repermute_period` steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    backward, evaluate, BatchStats, Real, init_params, lerp_params, param_dot, recalibrate_batchnorm, steps_per_epoch,
    update_running_stats, GradientTree, ModelParams, Optimizer, TrainConfig,
};
use crate::permute::{apply_permutation, weight_match, PermutationSet, DEFAULT_MAX_SWEEPS};

/// Distribution of the interpolation coefficient `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingScheme {
    #[default]
    Uniform01,
    /// Density `6 t (1 - t)`.
    Beta22,
    Constant { value: f64 },
}

impl SamplingScheme {
    pub fn constant_half() -> Self {
        SamplingScheme::Constant { value: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if let SamplingScheme::Constant { value } = self {
            if !(0.0..=1.0).contains(value) {
                return Err(Error::InvalidArgument(format!("constant t={value} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            SamplingScheme::Uniform01 => "uniform".into(),
            SamplingScheme::Beta22 => "beta22".into(),
            SamplingScheme::Constant { value } => format!("constant{value}"),
        }
    }
}

pub fn sample_t<R: Rng + ?Sized>(scheme: SamplingScheme, rng: &mut R) -> f64 {
    match scheme {
        SamplingScheme::Uniform01 => rng.random::<f64>(),
        SamplingScheme::Beta22 => Beta::new(2.0, 2.0).expect("valid shape").sample(rng),
        SamplingScheme::Constant { value } => value,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StarInit {
    Fresh { seed: u64 },
    WarmStart(ModelParams<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarConfig {
    pub init: StarInit,
    /// Steps between source re-alignments; `None` means one epoch of batches.
    pub repermute_period: Option<usize>,
    pub total_steps: usize,
    pub sampling: SamplingScheme,
    /// Adds the plain cross-entropy of `theta` to every step's objective.
    pub fusion: bool,
    pub match_sweeps: usize,
    /// Optimizer, schedule, batch size and seed; `epochs` is not used.
    pub train: TrainConfig,
}

impl StarConfig {
    /// Config with the same step budget as regular training under `train`.
    pub fn with_regular_budget(train: &TrainConfig, dataset: &Dataset, batchnorm: bool) -> Self {
        Self {
            init: StarInit::Fresh { seed: train.seed },
            repermute_period: None,
            total_steps: train.epochs * steps_per_epoch(dataset.len(), train.batch_size, batchnorm),
            sampling: SamplingScheme::Uniform01,
            fusion: false,
            match_sweeps: DEFAULT_MAX_SWEEPS,
            train: train.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepermuteEvent {
    pub step: usize,
    pub dots_before: Vec<f64>,
    pub dots_after: Vec<f64>,
    /// Applied permutation per source, in the plain-text format.
    pub permutations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub source: usize,
    pub t: f64,
    pub epoch: u64,
    pub batch: usize,
    pub loss: f64,
    /// Exponential moving average of the sampled interpolant losses.
    pub running_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Repermute(RepermuteEvent),
    Step(StepRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StarTrace {
    pub records: Vec<TraceRecord>,
}

impl StarTrace {
    pub fn repermutations(&self) -> impl Iterator<Item = &RepermuteEvent> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Repermute(e) => Some(e),
            TraceRecord::Step(_) => None,
        })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Step(s) => Some(s),
            TraceRecord::Repermute(_) => None,
        })
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<TraceRecord>, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Debug, Clone)]
pub struct StarOutcome {
    pub star: ModelParams<f32>,
    pub trace: StarTrace,
    /// Sources as permuted at the last re-alignment.
    pub aligned_sources: Vec<ModelParams<f32>>,
}

const RUNNING_LOSS_DECAY: f64 = 0.98;

/// Endless epoch-by-epoch batch stream.
struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    skip_singletons: bool,
    epoch: u64,
    index: usize,
    current: Vec<Batch>,
}

impl<'a> BatchStream<'a> {
    fn new(dataset: &'a Dataset, batch_size: usize, seed: u64, skip_singletons: bool) -> Self {
        Self {
            dataset,
            batch_size,
            seed,
            skip_singletons,
            epoch: 0,
            index: 0,
            current: Vec::new(),
        }
    }

    fn load(&mut self, epoch: u64) {
        self.current = batches(self.dataset, self.batch_size, self.seed, epoch)
            .filter(|b| !(self.skip_singletons && b.len() < 2))
            .collect();
    }

    fn next_batch(&mut self) -> (u64, usize, Batch) {
        if self.current.is_empty() {
            self.load(0);
        }
        if self.index >= self.current.len() {
            self.epoch += 1;
            self.index = 0;
            self.load(self.epoch);
        }
        let i = self.index;
        self.index += 1;
        (self.epoch, i, self.current[i].clone())
    }
}

fn check_sources(theta: &ModelParams<f32>, sources: &[ModelParams<f32>]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("at least one source model is required".into()));
    }
    for s in sources {
        theta.arch().ensure_compatible(s.arch())?;
    }
    Ok(())
}

fn match_seed(base: u64, step: usize, source: usize) -> u64 {
    base ^ (step as u64).wrapping_mul(0xA24B_AED4_963E_E407) ^ (source as u64).wrapping_mul(0x9FB2_1C65_1E98_DF25)
}

/// Gradient used for one star step: `(1 - t) * dL/dphi` at the interpolant,
/// plus `dL/dtheta` at `theta` itself when fusing.
pub fn star_gradient<T: Real>(
    theta: &ModelParams<T>,
    source: &ModelParams<T>,
    t: f64,
    batch: &Batch,
    fusion: bool,
) -> Result<(f64, GradientTree<T>, Option<BatchStats>)> {
    let phi = lerp_params(theta, source, t)?;
    let x = batch.inputs::<T>();
    let bp = backward(&phi, &x, batch.labels())?;
    if !bp.loss.is_finite() {
        return Err(Error::NonFinite("interpolant loss"));
    }
    let mut grads = bp.grads;
    grads.scale(T::of(1.0 - t));
    if fusion {
        let own = backward(theta, &x, batch.labels())?;
        if !own.loss.is_finite() {
            return Err(Error::NonFinite("star loss"));
        }
        grads.accumulate(&own.grads)?;
    }
    Ok((bp.loss, grads, bp.batch_stats))
}

/// Aligns every source onto `theta`, returning per-source dots before and
/// after, and the permutations applied.
fn realign(
    theta: &ModelParams<f32>,
    sources: &mut [ModelParams<f32>],
    sweeps: usize,
    seed: u64,
    step: usize,
) -> Result<RepermuteEvent> {
    let results = sources
        .par_iter()
        .enumerate()
        .map(|(n, src)| -> Result<(f64, f64, PermutationSet, ModelParams<f32>)> {
            let before = param_dot(theta, src)?;
            let outcome = weight_match(theta, src, sweeps, match_seed(seed, step, n))?;
            let aligned = apply_permutation(&outcome.permutation, src)?;
            let after = param_dot(theta, &aligned)?;
            Ok((before, after, outcome.permutation, aligned))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut event = RepermuteEvent {
        step,
        dots_before: Vec::with_capacity(sources.len()),
        dots_after: Vec::with_capacity(sources.len()),
        permutations: Vec::with_capacity(sources.len()),
    };
    for (slot, (before, after, perm, aligned)) in sources.iter_mut().zip(results) {
        event.dots_before.push(before);
        event.dots_after.push(after);
        event.permutations.push(perm.to_string());
        *slot = aligned;
    }
    Ok(event)
}

fn initial_theta(config: &StarConfig, sources: &[ModelParams<f32>]) -> Result<ModelParams<f32>> {
    let arch = sources
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one source model is required".into()))?
        .arch();
    match &config.init {
        StarInit::Fresh { seed } => init_params(arch, *seed),
        StarInit::WarmStart(p) => Ok(p.clone()),
    }
}

fn validate(config: &StarConfig, dataset: &Dataset, sources_batchnorm: bool) -> Result<usize> {
    config.train.validate()?;
    config.sampling.validate()?;
    if config.total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be >= 1".into()));
    }
    if config.match_sweeps == 0 {
        return Err(Error::InvalidArgument("match_sweeps must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bn = sources_batchnorm;
    let period = config
        .repermute_period
        .unwrap_or_else(|| steps_per_epoch(dataset.len(), config.train.batch_size, bn).max(1));
    if period == 0 {
        return Err(Error::InvalidArgument("repermute period must be >= 1".into()));
    }
    Ok(period)
}

/// Trains a star model against the source set.
pub fn starlight_train(config: &StarConfig, sources: &[ModelParams<f32>], dataset: &Dataset) -> Result<StarOutcome> {
    let mut theta = initial_theta(config, sources)?;
    check_sources(&theta, sources)?;
    let bn = theta.arch().use_batchnorm;
    let period = validate(config, dataset, bn)?;
    let mut sources = sources.to_vec();
    let mut opt = Optimizer::new(&theta, &config.train, config.total_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ 0x5747_A1E5_0000_0001);
    let mut stream = BatchStream::new(dataset, config.train.batch_size, config.train.seed, bn);
    let mut trace = StarTrace::default();
    let mut running = None::<f64>;

    for k in 1..=config.total_steps {
        if (k - 1) % period == 0 {
            let event = realign(&theta, &mut sources, config.match_sweeps, config.train.seed, k)?;
            trace.records.push(TraceRecord::Repermute(event));
        }
        let n = rng.random_range(0..sources.len());
        let t = sample_t(config.sampling, &mut rng);
        let (epoch, bi, batch) = stream.next_batch();
        let lr = opt.current_lr();
        let (loss, grads, stats) = star_gradient(&theta, &sources[n], t, &batch, config.fusion)?;
        if let Some(stats) = &stats {
            update_running_stats(&mut theta, stats, batch.len());
        }
        opt.step(&mut theta, &grads)?;
        let r = running.map_or(loss, |r| RUNNING_LOSS_DECAY * r + (1.0 - RUNNING_LOSS_DECAY) * loss);
        running = Some(r);
        trace.records.push(TraceRecord::Step(StepRecord {
            step: k,
            source: n,
            t,
            epoch,
            batch: bi,
            loss,
            running_loss: r,
            lr,
        }));
    }
    if !theta.is_finite() {
        return Err(Error::NonFinite("star parameters"));
    }
    let star = recalibrate_batchnorm(&theta, dataset)?;
    Ok(StarOutcome {
        star,
        trace,
        aligned_sources: sources,
    })
}

/// Re-executes a recorded run: source choices, `t` values, batches and
/// permutations come from the trace rather than being sampled or matched.
pub fn replay_star(
    config: &StarConfig,
    sources: &[ModelParams<f32>],
    dataset: &Dataset,
    trace: &StarTrace,
) -> Result<ModelParams<f32>> {
    let mut theta = initial_theta(config, sources)?;
    check_sources(&theta, sources)?;
    let bn = theta.arch().use_batchnorm;
    validate(config, dataset, bn)?;
    let mut sources = sources.to_vec();
    let mut opt = Optimizer::new(&theta, &config.train, config.total_steps)?;
    let mut epoch_cache: Option<(u64, Vec<Batch>)> = None;
    for record in &trace.records {
        match record {
            TraceRecord::Repermute(e) => {
                if e.permutations.len() != sources.len() {
                    return Err(Error::dim("trace permutations", sources.len(), e.permutations.len()));
                }
                for (src, text) in sources.iter_mut().zip(&e.permutations) {
                    let perm: PermutationSet = text.parse()?;
                    *src = apply_permutation(&perm, src)?;
                }
            }
            TraceRecord::Step(s) => {
                if epoch_cache.as_ref().map(|(e, _)| *e) != Some(s.epoch) {
                    let list = batches(dataset, config.train.batch_size, config.train.seed, s.epoch)
                        .filter(|b| !(bn && b.len() < 2))
                        .collect();
                    epoch_cache = Some((s.epoch, list));
                }
                let batch = epoch_cache
                    .as_ref()
                    .and_then(|(_, list)| list.get(s.batch))
                    .ok_or_else(|| Error::InvalidArgument(format!("trace batch {} missing", s.batch)))?;
                let source = sources
                    .get(s.source)
                    .ok_or_else(|| Error::InvalidArgument(format!("trace source {} missing", s.source)))?;
                let (_, grads, stats) = star_gradient(&theta, source, s.t, batch, config.fusion)?;
                if let Some(stats) = &stats {
                    update_running_stats(&mut theta, stats, batch.len());
                }
                opt.step(&mut theta, &grads)?;
            }
        }
    }
    recalibrate_batchnorm(&theta, dataset)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarLossEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of the expected full-dataset loss over the
/// segments from `theta` to each source, after aligning every source onto
/// `theta` once.
pub fn star_loss_estimate(
    theta: &ModelParams<f32>,
    sources: &[ModelParams<f32>],
    dataset: &Dataset,
    num_samples: usize,
    match_sweeps: usize,
    seed: u64,
) -> Result<StarLossEstimate> {
    check_sources(theta, sources)?;
    if num_samples == 0 {
        return Err(Error::InvalidArgument("num_samples must be >= 1".into()));
    }
    let mut aligned = sources.to_vec();
    for (n, src) in aligned.iter_mut().enumerate() {
        if src != theta {
            let m = weight_match(theta, src, match_sweeps, match_seed(seed, 0, n))?;
            *src = apply_permutation(&m.permutation, src)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(usize, f64)> = (0..num_samples)
        .map(|_| (rng.random_range(0..aligned.len()), rng.random::<f64>()))
        .collect();
    let bn = theta.arch().use_batchnorm;
    let losses = draws
        .par_iter()
        .map(|&(n, t)| -> Result<f64> {
            let mut m = lerp_params(theta, &aligned[n], t)?;
            if bn {
                m = recalibrate_batchnorm(&m, dataset)?;
            }
            Ok(evaluate(&m, dataset)?.loss)
        })
        .collect::<Result<Vec<f64>>>()?;
    // Welford updates keep a sample of identical losses exactly equal to it.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (i, &l) in losses.iter().enumerate() {
        let delta = l - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (l - mean);
    }
    let k = losses.len() as f64;
    let var = if losses.len() > 1 { m2 / (k - 1.0) } else { 0.0 };
    Ok(StarLossEstimate {
        mean,
        std_error: (var / k).sqrt(),
        samples: losses.len(),
    })
}
