//! Run configuration: a TOML file with one table per module, overlaid by
//! command-line flags. The resolved form is written next to every output.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gruae_core::clustering::GmmFitConfig;
use gruae_core::data::{Schema, SynthSpec, DEFAULT_FEATURES};
use gruae_core::metrics::StabilityConfig;
use gruae_core::model::ModelConfig;
use gruae_core::training::{Ablation, TrainConfig};

pub const VERSION: &str = concat!("gruae ", env!("CARGO_PKG_VERSION"), " artifacts/1");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub ablation: Ablation,
    /// Input cohort directory (features.csv, labels.csv, optional truth.csv).
    pub data_dir: PathBuf,
    /// Run directory; each subcommand writes into its own subdirectory.
    pub out_dir: PathBuf,
    /// Split tag written on rows produced by `validate`.
    pub cohort_tag: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            ablation: Ablation::Full,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            cohort_tag: "validation".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub features: Vec<String>,
    pub window_days: usize,
    pub min_days: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            features: DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect(),
            window_days: 28,
            min_days: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// Number of mixture components when `auto_k` is off.
    pub k: usize,
    /// Use the BIC minimizer over `k_range` instead of `k`.
    pub auto_k: bool,
    pub k_range: Vec<usize>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            k: 2,
            auto_k: false,
            k_range: (1..=9).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub trials: usize,
    pub min_leave_out: usize,
    pub max_leave_out: usize,
    pub seed: u64,
}

impl Default for StabilitySection {
    fn default() -> Self {
        let d = StabilityConfig::default();
        Self {
            trials: d.trials,
            min_leave_out: d.min_leave_out,
            max_leave_out: d.max_leave_out,
            seed: d.seed,
        }
    }
}

impl StabilitySection {
    pub fn to_core(&self) -> StabilityConfig {
        StabilityConfig {
            trials: self.trials,
            min_leave_out: self.min_leave_out,
            max_leave_out: self.max_leave_out,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cluster: ClusterSection,
    pub gmm: GmmFitConfig,
    pub stability: StabilitySection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub k_range: Option<Vec<usize>>,
    pub trials: Option<usize>,
}

/// Accepts `a..b` or `a-b` (both inclusive) or a comma-separated list.
pub fn parse_k_range(s: &str) -> anyhow::Result<Vec<usize>> {
    let s = s.trim();
    let bounds = s.split_once("..").or_else(|| s.split_once('-'));
    let ks: Vec<usize> = if let Some((a, b)) = bounds {
        let a: usize = a.trim().parse().with_context(|| format!("bad k range '{s}'"))?;
        let b: usize = b.trim().trim_start_matches('=').parse().with_context(|| format!("bad k range '{s}'"))?;
        if a > b {
            bail!("k range '{s}' is empty");
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad k value '{t}'")))
            .collect::<anyhow::Result<_>>()?
    };
    if ks.is_empty() || ks.contains(&0) {
        bail!("k range must list positive values");
    }
    Ok(ks)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Apply flags, then check the result. A seed flag reseeds every module.
    pub fn resolve(mut self, o: &Overrides) -> anyhow::Result<Self> {
        if let Some(s) = o.seed {
            self.synth.seed = s;
            self.train.seed = s;
            self.gmm.seed = s;
            self.stability.seed = s;
        }
        if let Some(a) = o.ablation {
            self.run.ablation = a;
        }
        if let Some(d) = &o.data_dir {
            self.run.data_dir = d.clone();
        }
        if let Some(d) = &o.out_dir {
            self.run.out_dir = d.clone();
        }
        if let Some(k) = &o.k_range {
            self.cluster.k_range = k.clone();
        }
        if let Some(t) = o.trials {
            self.stability.trials = t;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.data.features.is_empty() {
            bail!("[data] features must not be empty");
        }
        if self.model.input_dim != self.data.features.len() {
            bail!(
                "[model] input_dim is {} but [data] lists {} features",
                self.model.input_dim,
                self.data.features.len()
            );
        }
        if self.model.seq_len != self.data.window_days {
            bail!(
                "[model] seq_len is {} but [data] window_days is {}",
                self.model.seq_len,
                self.data.window_days
            );
        }
        if self.data.min_days == 0 || self.data.min_days > self.data.window_days {
            bail!("[data] min_days must lie in 1..=window_days");
        }
        if self.cluster.k == 0 {
            bail!("[cluster] k must be at least 1");
        }
        if self.cluster.k_range.is_empty() || self.cluster.k_range.contains(&0) {
            bail!("[cluster] k_range must list positive values");
        }
        if self.run.cohort_tag.is_empty() || self.run.cohort_tag.contains(',') {
            bail!("[run] cohort_tag must be non-empty and free of commas");
        }
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            features: self.data.features.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of everything except file locations, so moving a run does not
    /// change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.data_dir = PathBuf::new();
        c.run.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
