//! Run directories, cached model populations and star models, and the
//! manifest that lists every emitted artifact with its digest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use starlight_core::nn::{evaluate, params_digest, sha256_hex, train};
use starlight_core::starlight::{
    star_loss_estimate, starlight_train, SamplingScheme, StarConfig, StarInit, StarLossEstimate,
};
use starlight_core::{Checkpoint, MlpArchitecture, ModelParams, TrainConfig};

use crate::config::{derive_seed, Datasets, ExperimentConfig, SeedStream};
use crate::error::{CliError, CliResult};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Heldout,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Member {
    pub role: Role,
    pub index: usize,
    pub seed: u64,
    pub params: ModelParams<f32>,
    /// Digest of everything that determines this model.
    pub key: String,
}

/// The regular models: sources `Z` followed by held-out models `H`.
#[derive(Debug, Clone)]
pub struct Population {
    pub sources: Vec<Member>,
    pub heldout: Vec<Member>,
}

impl Population {
    pub fn source_params(&self) -> Vec<ModelParams<f32>> {
        self.sources.iter().map(|m| m.params.clone()).collect()
    }

    pub fn heldout_params(&self) -> Vec<ModelParams<f32>> {
        self.heldout.iter().map(|m| m.params.clone()).collect()
    }

    /// Sources then held-out models; this order defines the indices used
    /// in regular-regular pair tables.
    pub fn all_params(&self) -> Vec<ModelParams<f32>> {
        self.sources.iter().chain(&self.heldout).map(|m| m.params.clone()).collect()
    }
}

/// Which star model to train: the first `num_sources` sources, a sampling
/// scheme and whether the plain loss of the star is added.
#[derive(Debug, Clone, PartialEq)]
pub struct StarVariant {
    pub num_sources: usize,
    pub sampling: SamplingScheme,
    pub fusion: bool,
}

impl StarVariant {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            num_sources: cfg.population.num_sources,
            sampling: cfg.star.sampling,
            fusion: cfg.star.fusion,
        }
    }

    /// File stem; suffixes appear only where the variant departs from the
    /// configured star.
    pub fn name(&self, cfg: &ExperimentConfig) -> String {
        let mut s = String::from("star");
        if self.fusion {
            s.push_str("_fusion");
        }
        if self.num_sources != cfg.population.num_sources {
            s.push_str(&format!("_z{}", self.num_sources));
        }
        if self.sampling != cfg.star.sampling {
            s.push('_');
            s.push_str(&self.sampling.label());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarLossSummary {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl From<StarLossEstimate> for StarLossSummary {
    fn from(e: StarLossEstimate) -> Self {
        Self { mean: e.mean, std_error: e.std_error, samples: e.samples }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarReport {
    pub name: String,
    /// `star` or `star+ce` when the plain loss is fused in.
    pub objective: String,
    pub num_sources: usize,
    pub sampling: SamplingScheme,
    pub steps: usize,
    pub repermutations: usize,
    pub final_running_loss: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub star_loss: Option<StarLossSummary>,
    pub digest: String,
    pub key: String,
}

#[derive(Debug, Clone)]
pub struct StarArtifact {
    pub params: ModelParams<f32>,
    pub report: StarReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Written after every command. `wall_clock_seconds` is the only field
/// that differs between otherwise identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub code_version: String,
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<ArtifactEntry>,
}

pub struct RunContext {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub data: Datasets,
    pub arch: MlpArchitecture,
    config_text: String,
}

fn key_of(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

impl RunContext {
    /// Creates the run layout and records the effective configuration.
    pub fn open(config: ExperimentConfig, dir: impl Into<PathBuf>) -> CliResult<Self> {
        config.validate()?;
        let dir = dir.into();
        for sub in ["checkpoints", "curves", "reports"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        }
        let data = config.datasets()?;
        let arch = config.arch(&data)?;
        let config_text = config.to_toml_string()?;
        let ctx = Self { config, dir, data, arch, config_text };
        ctx.write(CONFIG_FILE, ctx.config_text.as_bytes())?;
        Ok(ctx)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(starlight_core::Error::from)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn cached(&self, rel: &str, key: &str) -> Option<Checkpoint> {
        let ck = Checkpoint::load(self.path(rel)).ok()?;
        (ck.metadata.get("cache_key").and_then(|v| v.as_str()) == Some(key)).then_some(ck)
    }

    fn member_key(&self, seed: u64) -> String {
        key_of(&json!({
            "code_version": CODE_VERSION,
            "dataset": self.config.dataset,
            "model": self.config.model,
            "train": TrainConfig { seed, ..self.config.train.clone() },
        }))
    }

    fn member(&self, role: Role, index: usize, seed: u64) -> CliResult<Member> {
        let key = self.member_key(seed);
        let rel = format!("checkpoints/{}_{index}.strb", role.name());
        let params = match self.cached(&rel, &key) {
            Some(ck) => ck.params,
            None => {
                log::info!("training {} model {index} (seed {seed})", role.name());
                let cfg = TrainConfig { seed, ..self.config.train.clone() };
                let out = train::<f32>(&self.arch, &self.data.train, &cfg)?;
                Checkpoint::new(out.params.clone())
                    .with_metadata("cache_key", json!(key))
                    .with_metadata("role", json!(role.name()))
                    .with_metadata("index", json!(index))
                    .with_metadata("seed", json!(seed))
                    .with_metadata("train_loss", json!(out.final_train.loss))
                    .save(self.path(&rel))?;
                out.params
            }
        };
        Ok(Member { role, index, seed, params, key })
    }

    /// Loads the regular models whose checkpoints match the current
    /// configuration and trains the rest.
    pub fn population(&self) -> CliResult<Population> {
        let sources = self
            .config
            .source_seeds()
            .into_iter()
            .enumerate()
            .map(|(i, s)| self.member(Role::Source, i, s))
            .collect::<CliResult<Vec<_>>>()?;
        let heldout = self
            .config
            .heldout_seeds()
            .into_iter()
            .enumerate()
            .map(|(i, s)| self.member(Role::Heldout, i, s))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Population { sources, heldout })
    }

    pub fn star_config(&self, variant: &StarVariant) -> StarConfig {
        let train = TrainConfig {
            seed: derive_seed(self.config.seed, SeedStream::StarRun, 0),
            ..self.config.train.clone()
        };
        let mut sc = StarConfig::with_regular_budget(&train, &self.data.train, self.arch.use_batchnorm);
        sc.init = StarInit::Fresh { seed: derive_seed(self.config.seed, SeedStream::StarInit, 0) };
        if let Some(steps) = self.config.star.steps {
            sc.total_steps = steps;
        }
        sc.repermute_period = self.config.star.repermute_period;
        sc.sampling = variant.sampling;
        sc.fusion = variant.fusion;
        sc.match_sweeps = self.config.star.match_sweeps;
        sc
    }

    /// Loads or trains a star model, writing its checkpoint, step trace and
    /// report.
    pub fn star(&self, pop: &Population, variant: &StarVariant) -> CliResult<StarArtifact> {
        if variant.num_sources == 0 || variant.num_sources > pop.sources.len() {
            return Err(CliError::Config(format!(
                "star needs 1..={} sources, got {}",
                pop.sources.len(),
                variant.num_sources
            )));
        }
        let name = variant.name(&self.config);
        let sc = self.star_config(variant);
        let used = &pop.sources[..variant.num_sources];
        let key = key_of(&json!({
            "sources": used.iter().map(|m| m.key.clone()).collect::<Vec<_>>(),
            "star": self.config.star,
            "sampling": variant.sampling,
            "fusion": variant.fusion,
            "steps": sc.total_steps,
            "seed": self.config.seed,
        }));
        let ck_rel = format!("checkpoints/{name}.strb");
        let report_rel = format!("reports/{name}.json");
        if let Some(ck) = self.cached(&ck_rel, &key) {
            let text = std::fs::read_to_string(self.path(&report_rel)).ok();
            if let Some(report) = text.and_then(|t| serde_json::from_str::<StarReport>(&t).ok()) {
                if report.key == key {
                    return Ok(StarArtifact { params: ck.params, report });
                }
            }
        }
        log::info!("training {name} against {} sources for {} steps", used.len(), sc.total_steps);
        let sources: Vec<ModelParams<f32>> = used.iter().map(|m| m.params.clone()).collect();
        let out = starlight_train(&sc, &sources, &self.data.train)?;
        let train_eval = evaluate(&out.star, &self.data.train)?;
        let test_eval = evaluate(&out.star, &self.data.test)?;
        let star_loss = match self.config.star.loss_samples {
            0 => None,
            n => Some(
                star_loss_estimate(
                    &out.star,
                    &sources,
                    &self.data.train,
                    n,
                    self.config.star.match_sweeps,
                    derive_seed(self.config.seed, SeedStream::Matching, 1),
                )?
                .into(),
            ),
        };
        let report = StarReport {
            name: name.clone(),
            objective: if variant.fusion { "star+ce" } else { "star" }.into(),
            num_sources: variant.num_sources,
            sampling: variant.sampling,
            steps: out.trace.steps().count(),
            repermutations: out.trace.repermutations().count(),
            final_running_loss: out.trace.steps().last().map_or(f64::NAN, |s| s.running_loss),
            train_loss: train_eval.loss,
            train_accuracy: train_eval.accuracy,
            test_loss: test_eval.loss,
            test_accuracy: test_eval.accuracy,
            star_loss,
            digest: params_digest(&out.star),
            key: key.clone(),
        };
        self.write(&format!("reports/{name}_trace.jsonl"), out.trace.to_jsonl()?.as_bytes())?;
        Checkpoint::new(out.star.clone())
            .with_metadata("cache_key", json!(key))
            .with_metadata("objective", json!(report.objective))
            .with_metadata("num_sources", json!(variant.num_sources))
            .with_metadata("sampling", json!(variant.sampling))
            .save(self.path(&ck_rel))?;
        self.write_json(&report_rel, &report)?;
        Ok(StarArtifact { params: out.star, report })
    }

    /// Lists every file under the run directory except the manifest itself.
    pub fn artifacts(&self) -> CliResult<Vec<ArtifactEntry>> {
        let mut files = Vec::new();
        collect_files(&self.dir, &mut files)?;
        files.sort();
        let top = self.dir.join(MANIFEST_FILE);
        files
            .into_iter()
            .filter(|p| *p != top)
            .map(|p| {
                let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
                let rel = p.strip_prefix(&self.dir).unwrap_or(&p);
                Ok(ArtifactEntry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                })
            })
            .collect()
    }

    /// Writes `manifest.json` for a finished command.
    pub fn finish(&self, command: &str, started: Instant) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            command: command.into(),
            config_digest: sha256_hex(self.config_text.as_bytes()),
            code_version: CODE_VERSION.into(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            artifacts: self.artifacts()?,
        };
        self.write_json(MANIFEST_FILE, &manifest)?;
        Ok(manifest)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
