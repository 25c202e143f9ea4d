//! Scaled direction checks. Every experiment goes through the run
//! directory machinery of the CLI, so reports and checkpoints are the ones
//! a user would get.

use std::path::Path;
use std::time::{Duration, Instant};

use starlight_cli::commands::{self, BarrierDetail};
use starlight_cli::config::{SweepAxis, SweepSpec, SweepValue};
use starlight_cli::{ExperimentConfig, RunContext, RunManifest};
use starlight_core::bma::PosteriorMode;
use starlight_core::landscape::{pooled_std, BarrierParams};
use starlight_core::nn::{predict_logits, softmax};
use starlight_core::permute::barrier_after_match;
use starlight_core::starlight::SamplingScheme;
use starlight_core::{Dataset, ModelParams};
use tempfile::TempDir;

use crate::{run, Line, Verdict};

/// 10-class Gaussian blobs in 20 dimensions with heavy class overlap,
/// 10k training examples, 2x64 MLPs trained for 40 epochs.
const TABLE_CONFIG: &str = include_str!("../../../../configs/barrier_table.toml");

/// Smaller, easier blobs for the width sweep, which trains three
/// populations.
const WIDTH_CONFIG: &str = include_str!("../../../../configs/width_sweep.toml");

struct Table {
    ctx: RunContext,
    detail: BarrierDetail,
    manifest: RunManifest,
}

fn table_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(TABLE_CONFIG).expect("valid config")
}

/// `train`, `star`, `barrier`, as the command line would run them.
fn run_table(dir: &Path) -> (RunContext, BarrierDetail, RunManifest) {
    let started = Instant::now();
    let ctx = RunContext::open(table_config(), dir).unwrap();
    commands::train(&ctx).unwrap();
    ctx.finish("train", started).unwrap();
    let ctx = RunContext::open(table_config(), dir).unwrap();
    commands::star(&ctx).unwrap();
    ctx.finish("star", started).unwrap();
    let ctx = RunContext::open(table_config(), dir).unwrap();
    let detail = commands::barrier(&ctx).unwrap();
    let manifest = ctx.finish("barrier", started).unwrap();
    (ctx, detail, manifest)
}

fn c6(table: &Table) -> Verdict {
    let t = &table.detail.table;
    Verdict::check(
        t.star_regular.mean < 0.5 * t.regular_regular.mean && t.gap_in_pooled_std > 1.0,
        format!(
            "regular-regular {:.4} +- {:.4} over {} pairs, star-regular {:.4} +- {:.4} over {} held-out, ratio {:.3}, gap {:.2} pooled std",
            t.regular_regular.mean,
            t.regular_regular.std,
            t.regular_regular.count,
            t.star_regular.mean,
            t.star_regular.std,
            t.star_regular.count,
            t.ratio,
            t.gap_in_pooled_std
        ),
    )
}

fn with_sweep(table: &Table, axis: SweepAxis, values: Vec<SweepValue>) -> RunContext {
    let mut cfg = table_config();
    cfg.sweep = Some(SweepSpec { axis, values });
    RunContext::open(cfg, &table.ctx.dir).unwrap()
}

fn c7(table: &Table) -> Verdict {
    let ctx = with_sweep(table, SweepAxis::NumSources, [2, 4, 8].map(SweepValue::Count).to_vec());
    let points = commands::sweep(&ctx).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for w in points.windows(2) {
        let pooled = pooled_std(&w[0].star_regular, &w[1].star_regular);
        ok &= w[1].star_regular.mean <= w[0].star_regular.mean + pooled;
        parts.push(format!("pooled std {}->{} {pooled:.4}", w[0].value, w[1].value));
    }
    let means: Vec<String> = points.iter().map(|p| format!("|Z|={}: {:.4}", p.value, p.star_regular.mean)).collect();
    Verdict::check(ok, format!("star-regular {}; {}", means.join(", "), parts.join(", ")))
}

fn per_example_loss(params: &ModelParams<f32>, data: &Dataset) -> Vec<f64> {
    let probs = softmax(&predict_logits(params, data.inputs()).unwrap());
    data.labels().iter().enumerate().map(|(r, &y)| -probs.get(r, y).max(f64::MIN_POSITIVE).ln()).collect()
}

fn c9(table: &Table) -> Verdict {
    let schemes = [SamplingScheme::Uniform01, SamplingScheme::constant_half()];
    let ctx = with_sweep(table, SweepAxis::SampleScheme, schemes.map(SweepValue::Scheme).to_vec());
    let points = commands::sweep(&ctx).unwrap();
    let pop = ctx.population().unwrap();
    let stars: Vec<ModelParams<f32>> = schemes
        .iter()
        .map(|&sampling| {
            let v = starlight_cli::run::StarVariant { sampling, ..starlight_cli::run::StarVariant::from_config(&ctx.config) };
            ctx.star(&pop, &v).unwrap().params
        })
        .collect();
    // Paired per-example loss differences on the training set.
    let uniform = per_example_loss(&stars[0], &ctx.data.train);
    let constant = per_example_loss(&stars[1], &ctx.data.train);
    let d: Vec<f64> = constant.iter().zip(&uniform).map(|(c, u)| c - u).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let se = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let (u, c) = (&points[0], &points[1]);
    Verdict::check(
        mean > 3.0 * se && c.star_regular.mean <= u.star_regular.mean,
        format!(
            "train loss uniform {:.4} vs constant {:.4} (paired diff {mean:.4}, {:.1} SE); star-regular uniform {:.4} vs constant {:.4}",
            u.star_train_loss,
            c.star_train_loss,
            mean / se,
            u.star_regular.mean,
            c.star_regular.mean
        ),
    )
}

fn c10(table: &Table) -> Verdict {
    let ctx = &table.ctx;
    let pop = ctx.population().unwrap();
    let all = pop.all_params();
    let rr_std = table.detail.table.regular_regular.std;
    let fine = BarrierParams { num_points: 51, ..ctx.config.barrier.clone() };
    let mut worst = 0.0f64;
    for pair in table.detail.regular_regular.pairs.iter().take(5) {
        let a = &all[pair.a.expect("regular pair")];
        let b = &all[pair.b];
        let b51 = barrier_after_match(a, b, &ctx.data.train, Some(&ctx.data.train), &fine).unwrap().report.barrier;
        worst = worst.max((b51 - pair.barrier).abs());
    }
    Verdict::check(
        worst < rr_std,
        format!("max |B(51) - B(11)| over 5 pairs {worst:.2e} vs regular-regular std {rr_std:.4}"),
    )
}

fn c13(table: &Table) -> Verdict {
    let rows = commands::bma(&table.ctx).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for &k in &[2usize, 5, 10] {
        let get = |mode| rows.iter().find(|r| r.k == k && r.mode == mode).expect("row").report.auroc_maxprob;
        let (s, e) = (get(PosteriorMode::StarDomain), get(PosteriorMode::DeepEnsemble));
        ok &= s >= e - 0.01;
        parts.push(format!("k={k}: star {s:.4} vs ensemble {e:.4}"));
    }
    Verdict::check(ok, parts.join(", "))
}

fn c14(table: &Table) -> Verdict {
    let rows = commands::fuse(&table.ctx).unwrap();
    let r = &rows[0];
    Verdict::check(
        r.regular_mean <= r.star_fusion && r.star_fusion <= r.ensemble,
        format!(
            "test accuracy regular {:.4} +- {:.4}, fusion star {:.4}, ensemble {:.4} (|Z|={})",
            r.regular_mean, r.regular_std, r.star_fusion, r.ensemble, r.num_sources
        ),
    )
}

fn c15(table: &Table) -> Verdict {
    let dir = TempDir::new().unwrap();
    let (ctx, _, manifest) = run_table(dir.path());
    let mut mismatched = Vec::new();
    for entry in &manifest.artifacts {
        let a = std::fs::read(ctx.path(&entry.path)).unwrap();
        let b = std::fs::read(table.ctx.path(&entry.path)).unwrap_or_default();
        if a != b {
            mismatched.push(entry.path.clone());
        }
    }
    let same_listing = manifest.artifacts == table.manifest.artifacts && manifest.config_digest == table.manifest.config_digest;
    Verdict::check(
        mismatched.is_empty() && same_listing,
        format!(
            "{} artifacts compared byte for byte, {} differ{}",
            manifest.artifacts.len(),
            mismatched.len(),
            if same_listing { "" } else { ", manifest listings differ" }
        ),
    )
}

fn c8() -> Verdict {
    let dir = TempDir::new().unwrap();
    let ctx = RunContext::open(ExperimentConfig::from_toml_str(WIDTH_CONFIG).unwrap(), dir.path()).unwrap();
    let points = commands::sweep(&ctx).unwrap();
    let mut ok = points.iter().all(|p| p.star_regular.mean < p.regular_regular.mean);
    for w in points.windows(2) {
        ok &= w[1].regular_regular.mean <= w[0].regular_regular.mean;
        ok &= w[1].star_regular.mean <= w[0].star_regular.mean;
    }
    let desc: Vec<String> = points
        .iter()
        .map(|p| format!("W={}: rr {:.4} sr {:.4}", p.value, p.regular_regular.mean, p.star_regular.mean))
        .collect();
    Verdict::check(ok, desc.join(", "))
}

pub fn run_all() -> Vec<Line> {
    let mins = |m: u64| Duration::from_secs(60 * m);
    let dir = TempDir::new().unwrap();
    let mut table = None;
    let mut lines = vec![run(6, mins(30), || {
        let (ctx, detail, manifest) = run_table(dir.path());
        let t = Table { ctx, detail, manifest };
        let v = c6(&t);
        table = Some(t);
        v
    })];
    let missing = || Verdict::check(false, "criterion 6 run did not complete".into());
    let dependent: [(u32, u64, fn(&Table) -> Verdict); 6] =
        [(15, 30, c15), (7, 45, c7), (9, 30, c9), (10, 5, c10), (13, 10, c13), (14, 30, c14)];
    for (id, limit, f) in dependent {
        lines.push(run(id, mins(limit), || table.as_ref().map_or_else(missing, f)));
    }
    lines.push(run(8, mins(45), c8));
    lines
}
