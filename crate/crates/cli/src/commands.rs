//! One function per subcommand. Each returns its in-memory result and
//! writes the corresponding files into the run directory.

use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use starlight_core::bma::{
    averaged_predict, evaluate_uncertainty, probs_csv, report_from_probs, sweep_csv, PosteriorMode, PosteriorSpec,
    SweepRow,
};
use starlight_core::landscape::{
    fmt_sig, pairwise_barrier_stats, pooled_std, BarrierParams, BarrierStats, BarrierSummary, PopulationBarriers,
};
use starlight_core::nn::evaluate;
use starlight_core::permute::barrier_after_match;
use starlight_core::{Checkpoint, Dataset, ModelParams, Split};

use crate::config::{derive_seed, EnsemblePool, ExperimentConfig, SeedStream, SweepAxis, SweepValue};
use crate::error::{CliError, CliResult};
use crate::run::{Population, RunContext, StarArtifact, StarVariant};

/// A model named on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelRef {
    Source(usize),
    Heldout(usize),
    /// A star checkpoint by file stem, e.g. `star` or `star_fusion`.
    Star(String),
    File(PathBuf),
}

impl FromStr for ModelRef {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let index = |v: &str| v.parse::<usize>().map_err(|_| CliError::Config(format!("bad model index in {s:?}")));
        Ok(match s.split_once(':') {
            Some(("source", i)) => ModelRef::Source(index(i)?),
            Some(("heldout", i)) => ModelRef::Heldout(index(i)?),
            _ if s.starts_with("star") && !s.contains(['/', '.']) => ModelRef::Star(s.to_string()),
            _ => ModelRef::File(PathBuf::from(s)),
        })
    }
}

impl ModelRef {
    pub fn label(&self) -> String {
        match self {
            ModelRef::Source(i) => format!("source{i}"),
            ModelRef::Heldout(i) => format!("heldout{i}"),
            ModelRef::Star(name) => name.clone(),
            ModelRef::File(p) => p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
        }
    }

    pub fn resolve(&self, ctx: &RunContext) -> CliResult<ModelParams<f32>> {
        let out_of_range = |what: &str, i: usize, n: usize| CliError::Config(format!("{what} index {i} out of range (have {n})"));
        match self {
            ModelRef::Source(i) => {
                let pop = ctx.population()?;
                let n = pop.sources.len();
                pop.sources.into_iter().nth(*i).map(|m| m.params).ok_or_else(|| out_of_range("source", *i, n))
            }
            ModelRef::Heldout(i) => {
                let pop = ctx.population()?;
                let n = pop.heldout.len();
                pop.heldout.into_iter().nth(*i).map(|m| m.params).ok_or_else(|| out_of_range("heldout", *i, n))
            }
            ModelRef::Star(name) => {
                let configured = StarVariant::from_config(&ctx.config);
                let fused = StarVariant { fusion: true, ..configured.clone() };
                for v in [configured, fused] {
                    if v.name(&ctx.config) == *name {
                        return Ok(ctx.star(&ctx.population()?, &v)?.params);
                    }
                }
                let p = ctx.path(&format!("checkpoints/{name}.strb"));
                Ok(Checkpoint::load(&p)
                    .map_err(|e| CliError::Config(format!("no star checkpoint {}: {e}", p.display())))?
                    .params)
            }
            ModelRef::File(p) => Ok(Checkpoint::load(p)?.params),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub role: String,
    pub index: usize,
    pub seed: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

/// Trains (or loads) the regular population and reports its metrics.
pub fn train(ctx: &RunContext) -> CliResult<Vec<MemberReport>> {
    let pop = ctx.population()?;
    let rows = pop
        .sources
        .iter()
        .chain(&pop.heldout)
        .map(|m| {
            let tr = evaluate(&m.params, &ctx.data.train)?;
            let te = evaluate(&m.params, &ctx.data.test)?;
            Ok(MemberReport {
                role: format!("{:?}", m.role).to_lowercase(),
                index: m.index,
                seed: m.seed,
                train_loss: tr.loss,
                train_accuracy: tr.accuracy,
                test_loss: te.loss,
                test_accuracy: te.accuracy,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    ctx.write_json("reports/population.json", &rows)?;
    Ok(rows)
}

/// Trains (or loads) the configured star model.
pub fn star(ctx: &RunContext) -> CliResult<StarArtifact> {
    let pop = ctx.population()?;
    ctx.star(&pop, &StarVariant::from_config(&ctx.config))
}

/// Regular-regular, star-regular (held-out) and star-source barriers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierTable {
    pub star: String,
    pub dataset_tag: Split,
    pub num_points: usize,
    pub matched: bool,
    /// All unordered pairs among sources and held-out models.
    pub regular_regular: BarrierStats,
    /// The star against each held-out model.
    pub star_regular: BarrierStats,
    /// The star against each of its sources.
    pub star_source: BarrierStats,
    pub pooled_std: f64,
    /// `star_regular.mean / regular_regular.mean`.
    pub ratio: f64,
    /// `(regular_regular.mean - star_regular.mean) / pooled_std`.
    pub gap_in_pooled_std: f64,
}

/// Barrier tables computed by [`barrier_table`], with per-pair detail.
#[derive(Debug, Clone)]
pub struct BarrierDetail {
    pub table: BarrierTable,
    pub regular_regular: PopulationBarriers,
    pub star_regular: PopulationBarriers,
    pub star_source: PopulationBarriers,
}

fn eval_and_calibration<'a>(ctx: &'a RunContext, params: &BarrierParams) -> (&'a Dataset, &'a Dataset) {
    (ctx.data.split(params.dataset_tag), &ctx.data.train)
}

pub fn regular_barriers(ctx: &RunContext, pop: &Population, params: &BarrierParams) -> CliResult<PopulationBarriers> {
    let (eval, cal) = eval_and_calibration(ctx, params);
    Ok(pairwise_barrier_stats(&pop.all_params(), None, eval, Some(cal), params)?)
}

pub fn star_barriers(
    ctx: &RunContext,
    models: &[ModelParams<f32>],
    star: &ModelParams<f32>,
    params: &BarrierParams,
) -> CliResult<PopulationBarriers> {
    let (eval, cal) = eval_and_calibration(ctx, params);
    Ok(pairwise_barrier_stats(models, Some(star), eval, Some(cal), params)?)
}

/// Computes all three barrier populations. `regular` may be passed in when
/// it was already measured for the same population.
pub fn barrier_table(
    ctx: &RunContext,
    pop: &Population,
    star: &StarArtifact,
    params: &BarrierParams,
    regular: Option<PopulationBarriers>,
) -> CliResult<BarrierDetail> {
    if pop.heldout.is_empty() {
        return Err(CliError::Config("barrier table needs at least one held-out model".into()));
    }
    let rr = match regular {
        Some(rr) => rr,
        None => regular_barriers(ctx, pop, params)?,
    };
    let sr = star_barriers(ctx, &pop.heldout_params(), &star.params, params)?;
    let used = &pop.source_params()[..star.report.num_sources];
    let ss = star_barriers(ctx, used, &star.params, params)?;
    let pooled = pooled_std(&rr.stats, &sr.stats);
    let table = BarrierTable {
        star: star.report.name.clone(),
        dataset_tag: params.dataset_tag,
        num_points: params.num_points,
        matched: params.align,
        regular_regular: rr.stats,
        star_regular: sr.stats,
        star_source: ss.stats,
        pooled_std: pooled,
        ratio: sr.stats.mean / rr.stats.mean,
        gap_in_pooled_std: (rr.stats.mean - sr.stats.mean) / pooled,
    };
    Ok(BarrierDetail { table, regular_regular: rr, star_regular: sr, star_source: ss })
}

fn write_detail(ctx: &RunContext, prefix: &str, d: &BarrierDetail) -> CliResult<()> {
    ctx.write_json(&format!("reports/{prefix}.json"), &d.table)?;
    ctx.write(&format!("reports/{prefix}_regular_regular.csv"), d.regular_regular.pairs_csv().as_bytes())?;
    ctx.write(&format!("reports/{prefix}_star_regular.csv"), d.star_regular.pairs_csv().as_bytes())?;
    ctx.write(&format!("reports/{prefix}_star_source.csv"), d.star_source.pairs_csv().as_bytes())
}

/// The full barrier table for the configured star.
pub fn barrier(ctx: &RunContext) -> CliResult<BarrierDetail> {
    let pop = ctx.population()?;
    let star = ctx.star(&pop, &StarVariant::from_config(&ctx.config))?;
    let detail = barrier_table(ctx, &pop, &star, &ctx.config.barrier, None)?;
    write_detail(ctx, "barriers", &detail)?;
    Ok(detail)
}

/// Interpolation curve between two models (the second aligned onto the
/// first when `barrier.align` is set), written as CSV with its summary.
pub fn curve(ctx: &RunContext, a: &ModelRef, b: &ModelRef) -> CliResult<BarrierSummary> {
    let pa = a.resolve(ctx)?;
    let pb = b.resolve(ctx)?;
    let params = &ctx.config.barrier;
    let (eval, cal) = eval_and_calibration(ctx, params);
    let mb = barrier_after_match(&pa, &pb, eval, Some(cal), params)?;
    let stem = format!("{}__{}", a.label(), b.label());
    ctx.write(&format!("curves/{stem}.csv"), mb.report.curve.to_csv().as_bytes())?;
    let summary = mb.report.summary(mb.matched);
    ctx.write_json(&format!("reports/curve_{stem}.json"), &summary)?;
    Ok(summary)
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub regular_regular: BarrierStats,
    pub star_regular: BarrierStats,
    pub pooled_std: f64,
    pub star_train_loss: f64,
    pub star_test_accuracy: f64,
}

impl SweepPoint {
    fn new(value: String, d: &BarrierDetail, star: &StarArtifact) -> Self {
        Self {
            value,
            regular_regular: d.table.regular_regular,
            star_regular: d.table.star_regular,
            pooled_std: d.table.pooled_std,
            star_train_loss: star.report.train_loss,
            star_test_accuracy: star.report.test_accuracy,
        }
    }
}

pub fn sweep_points_csv(axis: SweepAxis, points: &[SweepPoint]) -> String {
    let mut s = format!(
        "{},rr_mean,rr_std,rr_count,sr_mean,sr_std,sr_count,pooled_std,star_train_loss,star_test_accuracy\n",
        axis.name()
    );
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            p.value,
            fmt_sig(p.regular_regular.mean, 17),
            fmt_sig(p.regular_regular.std, 17),
            p.regular_regular.count,
            fmt_sig(p.star_regular.mean, 17),
            fmt_sig(p.star_regular.std, 17),
            p.star_regular.count,
            fmt_sig(p.pooled_std, 17),
            fmt_sig(p.star_train_loss, 17),
            fmt_sig(p.star_test_accuracy, 17),
        ));
    }
    s
}

fn sub_config(cfg: &ExperimentConfig, axis: SweepAxis, n: usize) -> ExperimentConfig {
    let mut sub = cfg.clone();
    sub.sweep = None;
    let widths = &cfg.model.hidden_widths;
    sub.model.hidden_widths = match axis {
        SweepAxis::Width => vec![n; widths.len()],
        _ => vec![widths[0]; n],
    };
    sub
}

/// Runs the configured sweep. Width and depth points train a fresh
/// population in `sweeps/<axis>_<value>/`; the other axes reuse this run's
/// population.
pub fn sweep(ctx: &RunContext) -> CliResult<Vec<SweepPoint>> {
    let spec = ctx
        .config
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("sweep command needs a [sweep] section".into()))?;
    let base = &ctx.config;
    let mut points = Vec::new();
    match spec.axis {
        SweepAxis::Width | SweepAxis::Depth => {
            for v in &spec.values {
                let SweepValue::Count(n) = v else { unreachable!("validated") };
                let dir = ctx.dir.join("sweeps").join(format!("{}_{n}", spec.axis.name()));
                let started = std::time::Instant::now();
                let sub = RunContext::open(sub_config(base, spec.axis, *n), dir)?;
                let pop = sub.population()?;
                let star = sub.star(&pop, &StarVariant::from_config(&sub.config))?;
                let d = barrier_table(&sub, &pop, &star, &sub.config.barrier, None)?;
                write_detail(&sub, "barriers", &d)?;
                sub.finish("sweep", started)?;
                points.push(SweepPoint::new(n.to_string(), &d, &star));
            }
        }
        SweepAxis::NumSources | SweepAxis::SampleScheme => {
            let pop = ctx.population()?;
            let rr = regular_barriers(ctx, &pop, &base.barrier)?;
            for v in &spec.values {
                let mut variant = StarVariant::from_config(base);
                match v {
                    SweepValue::Count(n) => variant.num_sources = *n,
                    SweepValue::Scheme(s) => variant.sampling = *s,
                }
                let star = ctx.star(&pop, &variant)?;
                let d = barrier_table(ctx, &pop, &star, &base.barrier, Some(rr.clone()))?;
                points.push(SweepPoint::new(v.label(), &d, &star));
            }
        }
        SweepAxis::NumPoints => {
            let pop = ctx.population()?;
            let star = ctx.star(&pop, &StarVariant::from_config(base))?;
            for v in &spec.values {
                let SweepValue::Count(n) = v else { unreachable!("validated") };
                let params = BarrierParams { num_points: *n, ..base.barrier.clone() };
                let d = barrier_table(ctx, &pop, &star, &params, None)?;
                write_detail(ctx, &format!("sweep_num_points_{n}"), &d)?;
                points.push(SweepPoint::new(n.to_string(), &d, &star));
            }
        }
    }
    let name = spec.axis.name();
    ctx.write(&format!("reports/sweep_{name}.csv"), sweep_points_csv(spec.axis, &points).as_bytes())?;
    ctx.write_json(&format!("reports/sweep_{name}.json"), &points)?;
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmaDraws {
    pub mode: PosteriorMode,
    pub k: usize,
    /// `(source, t)` of every sampled model.
    pub draws: Vec<(usize, f64)>,
}

/// Star-domain versus deep-ensemble uncertainty over the `k` grid.
pub fn bma(ctx: &RunContext) -> CliResult<Vec<SweepRow>> {
    let cfg = &ctx.config;
    let pop = ctx.population()?;
    let star = ctx.star(&pop, &StarVariant::from_config(cfg))?;
    let sources = &pop.source_params()[..star.report.num_sources];
    let star_spec = PosteriorSpec::star_domain(
        star.params.clone(),
        sources,
        cfg.star.match_sweeps,
        derive_seed(cfg.seed, SeedStream::Matching, 2),
    )?
    .with_calibration(ctx.data.train.clone());
    let pool = match cfg.bma.ensemble_pool {
        EnsemblePool::Sources => pop.source_params(),
        EnsemblePool::All => pop.all_params(),
    };
    let ensemble_spec = PosteriorSpec::deep_ensemble(&pool)?;
    if let Some(&k) = cfg.bma.k_grid.iter().find(|&&k| k > pool.len()) {
        return Err(CliError::Config(format!("bma k = {k} exceeds the ensemble pool of {}", pool.len())));
    }
    let dataset = ctx.data.split(cfg.bma.split);
    let mut rows = Vec::new();
    let mut draws = Vec::new();
    for (m, spec) in [(0u64, &star_spec), (1, &ensemble_spec)] {
        for &k in &cfg.bma.k_grid {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SeedStream::Posterior, 2 * k as u64 + m));
            let ev = evaluate_uncertainty(spec, k, dataset, cfg.bma.num_bins, &mut rng)?;
            let mode_name = if m == 0 { "star_domain" } else { "deep_ensemble" };
            ctx.write(&format!("reports/bma/{mode_name}_k{k}_probs.csv"), probs_csv(&ev.probs, dataset.labels()).as_bytes())?;
            rows.push(SweepRow { k, mode: spec.mode(), report: ev.report });
            draws.push(BmaDraws { mode: spec.mode(), k, draws: ev.draws });
        }
    }
    ctx.write("reports/bma_sweep.csv", sweep_csv(&rows).as_bytes())?;
    ctx.write_json("reports/bma_draws.json", &draws)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub num_sources: usize,
    pub regular_mean: f64,
    pub regular_std: f64,
    pub regular_best: f64,
    pub ensemble: f64,
    pub star_fusion: f64,
}

pub fn fusion_csv(rows: &[FusionRow]) -> String {
    let mut s = String::from("num_sources,regular_mean,regular_std,regular_best,ensemble,star_fusion\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.num_sources,
            fmt_sig(r.regular_mean, 17),
            fmt_sig(r.regular_std, 17),
            fmt_sig(r.regular_best, 17),
            fmt_sig(r.ensemble, 17),
            fmt_sig(r.star_fusion, 17),
        ));
    }
    s
}

/// Test accuracy of the regular sources, their ensemble, and a
/// fusion-trained star, for each configured source-set size.
pub fn fuse(ctx: &RunContext) -> CliResult<Vec<FusionRow>> {
    let cfg = &ctx.config;
    let pop = ctx.population()?;
    let sizes = if cfg.fuse.num_sources.is_empty() { vec![cfg.population.num_sources] } else { cfg.fuse.num_sources.clone() };
    let test = &ctx.data.test;
    let sources = pop.source_params();
    let accs = sources
        .iter()
        .map(|m| Ok(evaluate(m, test)?.accuracy))
        .collect::<CliResult<Vec<f64>>>()?;
    let mut rows = Vec::new();
    for n in sizes {
        let variant = StarVariant { num_sources: n, fusion: true, ..StarVariant::from_config(cfg) };
        let star = ctx.star(&pop, &variant)?;
        let used = &sources[..n];
        let ens_probs = averaged_predict(used, test.inputs())?;
        let ens = report_from_probs(&ens_probs, test.labels(), cfg.bma.num_bins, n)?;
        let star_probs = averaged_predict(std::slice::from_ref(&star.params), test.inputs())?;
        ctx.write(&format!("reports/fuse/z{n}_ensemble_probs.csv"), probs_csv(&ens_probs, test.labels()).as_bytes())?;
        ctx.write(&format!("reports/fuse/z{n}_star_probs.csv"), probs_csv(&star_probs, test.labels()).as_bytes())?;
        let stats = BarrierStats::from_values(&accs[..n])?;
        rows.push(FusionRow {
            num_sources: n,
            regular_mean: stats.mean,
            regular_std: stats.std,
            regular_best: stats.max,
            ensemble: ens.accuracy,
            star_fusion: star.report.test_accuracy,
        });
    }
    ctx.write("reports/fusion.csv", fusion_csv(&rows).as_bytes())?;
    Ok(rows)
}
