//! Experiment configuration: one TOML file per experiment, validated in
//! full before any computation starts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use starlight_core::bma::DEFAULT_ECE_BINS;
use starlight_core::data::{gen_blobs, gen_spirals, load_idx};
use starlight_core::landscape::BarrierParams;
use starlight_core::permute::DEFAULT_MAX_SWEEPS;
use starlight_core::starlight::SamplingScheme;
use starlight_core::{Dataset, MlpArchitecture, Split, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every derived seed.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub population: PopulationSpec,
    #[serde(default)]
    pub star: StarSpec,
    #[serde(default)]
    pub barrier: BarrierParams,
    #[serde(default)]
    pub bma: BmaSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub fuse: FuseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        test_per_class: usize,
        #[serde(default = "default_data_seed")]
        data_seed: u64,
    },
    Spirals {
        turns: f64,
        per_class: usize,
        noise: f64,
        test_per_class: usize,
        #[serde(default = "default_data_seed")]
        data_seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `limit` training examples.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_data_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub batchnorm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub num_sources: usize,
    pub num_heldout: usize,
    /// Explicit training seeds; derived from the root seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StarSpec {
    /// Optimizer steps; defaults to the regular models' step budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Steps between re-alignments; defaults to one epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repermute_period: Option<usize>,
    pub sampling: SamplingScheme,
    pub fusion: bool,
    pub match_sweeps: usize,
    /// Number of Monte-Carlo samples for the reported star-loss estimate
    /// (0 skips it).
    pub loss_samples: usize,
}

impl Default for StarSpec {
    fn default() -> Self {
        Self {
            steps: None,
            repermute_period: None,
            sampling: SamplingScheme::Uniform01,
            fusion: false,
            match_sweeps: DEFAULT_MAX_SWEEPS,
            loss_samples: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnsemblePool {
    /// Source models only.
    Sources,
    /// Sources and held-out models.
    #[default]
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BmaSpec {
    pub k_grid: Vec<usize>,
    pub num_bins: usize,
    pub split: Split,
    pub ensemble_pool: EnsemblePool,
}

impl Default for BmaSpec {
    fn default() -> Self {
        Self {
            k_grid: vec![1, 2, 5, 10],
            num_bins: DEFAULT_ECE_BINS,
            split: Split::Test,
            ensemble_pool: EnsemblePool::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NumSources,
    Width,
    Depth,
    SampleScheme,
    NumPoints,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NumSources => "num_sources",
            SweepAxis::Width => "width",
            SweepAxis::Depth => "depth",
            SweepAxis::SampleScheme => "sample_scheme",
            SweepAxis::NumPoints => "num_points",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Count(usize),
    Scheme(SamplingScheme),
}

impl SweepValue {
    pub fn label(&self) -> String {
        match self {
            SweepValue::Count(n) => n.to_string(),
            SweepValue::Scheme(s) => s.label(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuseSpec {
    /// Source-set sizes to compare; empty means all sources.
    pub num_sources: Vec<usize>,
}

impl Default for FuseSpec {
    fn default() -> Self {
        Self { num_sources: Vec::new() }
    }
}

/// Seed streams, kept apart so no two roles share a seed by construction.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Source = 1,
    Heldout = 2,
    StarInit = 3,
    StarRun = 4,
    Posterior = 5,
    Matching = 6,
}

/// SplitMix64 finalizer over `(root, stream, index)`.
pub fn derive_seed(root: u64, stream: SeedStream, index: u64) -> u64 {
    let mut z = root
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

impl Datasets {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        match &self.dataset {
            DatasetSpec::Blobs { classes, per_class, dim, spread, test_per_class, .. } => {
                if *classes < 2 || *per_class == 0 || *dim == 0 || *test_per_class == 0 || !(*spread >= 0.0) {
                    return bad("blobs need classes >= 2, positive sizes and spread >= 0".into());
                }
            }
            DatasetSpec::Spirals { per_class, noise, test_per_class, turns, .. } => {
                if *per_class == 0 || *test_per_class == 0 || !(*noise >= 0.0) || !turns.is_finite() {
                    return bad("spirals need positive sizes, noise >= 0 and finite turns".into());
                }
            }
            DatasetSpec::Idx { limit, .. } => {
                if *limit == Some(0) {
                    return bad("idx limit must be positive".into());
                }
            }
        }
        if self.model.hidden_widths.is_empty() || self.model.hidden_widths.contains(&0) {
            return bad("model.hidden_widths must be non-empty and positive".into());
        }
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        let p = &self.population;
        if p.num_sources == 0 {
            return bad("population.num_sources must be >= 1".into());
        }
        if let Some(s) = &p.source_seeds {
            if s.len() != p.num_sources {
                return bad(format!("source_seeds has {} entries, num_sources is {}", s.len(), p.num_sources));
            }
        }
        if let Some(h) = &p.heldout_seeds {
            if h.len() != p.num_heldout {
                return bad(format!("heldout_seeds has {} entries, num_heldout is {}", h.len(), p.num_heldout));
            }
        }
        let sources = self.source_seeds();
        let heldout = self.heldout_seeds();
        let s_set: BTreeSet<u64> = sources.iter().copied().collect();
        let h_set: BTreeSet<u64> = heldout.iter().copied().collect();
        if s_set.len() != sources.len() || h_set.len() != heldout.len() {
            return bad("duplicate seeds within the source or held-out set".into());
        }
        if let Some(seed) = s_set.intersection(&h_set).next() {
            return bad(format!("seed {seed} appears in both the source and held-out sets"));
        }
        self.star.sampling.validate().map_err(|e| CliError::Config(format!("star.sampling: {e}")))?;
        if self.star.steps == Some(0) || self.star.repermute_period == Some(0) || self.star.match_sweeps == 0 {
            return bad("star steps, repermute_period and match_sweeps must be positive".into());
        }
        if self.barrier.num_points < 2 || self.barrier.match_sweeps == 0 {
            return bad("barrier.num_points must be >= 2 and match_sweeps >= 1".into());
        }
        if self.bma.num_bins == 0 || self.bma.k_grid.contains(&0) {
            return bad("bma.num_bins and every k must be positive".into());
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return bad("sweep.values must not be empty".into());
            }
            for v in &sweep.values {
                let ok = match (sweep.axis, v) {
                    (SweepAxis::SampleScheme, SweepValue::Scheme(s)) => s.validate().is_ok(),
                    (SweepAxis::NumSources, SweepValue::Count(n)) => (1..=p.num_sources).contains(n),
                    (SweepAxis::NumPoints, SweepValue::Count(n)) => *n >= 2,
                    (SweepAxis::Width | SweepAxis::Depth, SweepValue::Count(n)) => *n >= 1,
                    _ => false,
                };
                if !ok {
                    return bad(format!("invalid {} sweep value {}", sweep.axis.name(), v.label()));
                }
            }
        }
        if self.fuse.num_sources.iter().any(|&n| n == 0 || n > p.num_sources) {
            return bad("fuse.num_sources entries must be in 1..=num_sources".into());
        }
        Ok(())
    }

    pub fn source_seeds(&self) -> Vec<u64> {
        self.population.source_seeds.clone().unwrap_or_else(|| {
            (0..self.population.num_sources as u64)
                .map(|i| derive_seed(self.seed, SeedStream::Source, i))
                .collect()
        })
    }

    pub fn heldout_seeds(&self) -> Vec<u64> {
        self.population.heldout_seeds.clone().unwrap_or_else(|| {
            (0..self.population.num_heldout as u64)
                .map(|i| derive_seed(self.seed, SeedStream::Heldout, i))
                .collect()
        })
    }

    pub fn datasets(&self) -> CliResult<Datasets> {
        Ok(match &self.dataset {
            DatasetSpec::Blobs { classes, per_class, dim, spread, test_per_class, data_seed } => Datasets {
                train: gen_blobs(*classes, *per_class, *dim, *spread, *data_seed),
                test: gen_blobs(*classes, *test_per_class, *dim, *spread, data_seed ^ 0x7E57_0000)
                    .with_split(Split::Test),
            },
            DatasetSpec::Spirals { turns, per_class, noise, test_per_class, data_seed } => Datasets {
                train: gen_spirals(*turns, *per_class, *noise, *data_seed),
                test: gen_spirals(*turns, *test_per_class, *noise, data_seed ^ 0x7E57_0000).with_split(Split::Test),
            },
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, limit } => {
                let mut train = load_idx(train_images, train_labels)?;
                if let Some(n) = limit {
                    train = train.head(*n)?;
                }
                let test = load_idx(test_images, test_labels)?.with_split(Split::Test);
                Datasets { train, test }
            }
        })
    }

    pub fn arch(&self, datasets: &Datasets) -> CliResult<MlpArchitecture> {
        Ok(MlpArchitecture::new(
            datasets.train.dim(),
            self.model.hidden_widths.clone(),
            datasets.train.num_classes(),
        )?
        .with_batchnorm(self.model.batchnorm))
    }
}
