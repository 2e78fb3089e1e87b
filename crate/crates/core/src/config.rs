//! TOML experiment configuration: schema-versioned, unknown keys rejected,
//! validated before any work starts.

use crate::algo::RunConfig;
use crate::data::{self, ClientShard, Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::ledger::Method;
use crate::nn::{LrMode, LrSchedule};
use crate::sched::{ClientProfile, DelayModel};
use crate::split::{build_cifar10_arch, build_dense_arch, build_femnist_arch, AuxKind, SplitArchitecture};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub arch: ArchConfig,
    pub run: RunSection,
    pub lr: LrConfig,
    #[serde(default)]
    pub server_lr: Option<LrConfig>,
    #[serde(default)]
    pub profiles: ProfilesConfig,
    #[serde(default)]
    pub bounds: Option<BoundsConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Seeded Gaussian blobs.
    Synth {
        samples: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        data_seed: u64,
        test_samples: usize,
    },
    /// IDX image/label file pairs.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        center_crop: Option<usize>,
        #[serde(default)]
        standardize: bool,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// `label,v0,v1,...` text rows.
    Csv {
        path: PathBuf,
        test_path: PathBuf,
        sample_shape: Vec<usize>,
        classes: usize,
    },
}

// deny_unknown_fields cannot coexist with flatten; the flattened plan enum
// still rejects unknown variants and fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionConfig {
    #[serde(flatten)]
    pub plan: PartitionPlan,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArchConfig {
    Dense { cut_dim: usize, hidden: usize, aux: AuxKind },
    Cifar10 { aux: AuxKind },
    Femnist { aux: AuxKind },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub n: usize,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_one")]
    pub h: usize,
    #[serde(default)]
    pub c: Option<usize>,
    pub t_rounds: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub clip_threshold: Option<f64>,
    #[serde(default)]
    pub eval_replica_zero: bool,
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    pub eta0: f64,
    #[serde(default = "default_mode")]
    pub mode: LrMode,
    #[serde(default = "default_rate")]
    pub decay_rate: f64,
    #[serde(default = "default_every")]
    pub decay_every: usize,
}

fn default_mode() -> LrMode {
    LrMode::StepDecay
}
fn default_rate() -> f64 {
    1.0
}
fn default_every() -> usize {
    1
}

impl LrConfig {
    pub fn schedule(&self) -> Result<LrSchedule> {
        if self.eta0 <= 0.0 {
            return Err(Error::InvalidConfig("field lr.eta0: must be positive".into()));
        }
        if !(0.0 < self.decay_rate && self.decay_rate <= 1.0) {
            return Err(Error::InvalidConfig("field lr.decay_rate: must be in (0, 1]".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::InvalidConfig("field lr.decay_every: must be >= 1".into()));
        }
        Ok(LrSchedule {
            eta0: self.eta0,
            decay_rate: self.decay_rate,
            decay_every: self.decay_every,
            mode: self.mode,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesConfig {
    pub compute_delay: DelayModel,
    pub uplink_latency: f64,
    pub downlink_latency: f64,
    /// Per-client fixed compute delays; overrides `compute_delay` per index.
    #[serde(default)]
    pub per_client_delays: Option<Vec<f64>>,
}

impl Default for ProfilesConfig {
    fn default() -> Self {
        ProfilesConfig {
            compute_delay: DelayModel::Fixed { value: 0.0 },
            uplink_latency: 0.0,
            downlink_latency: 0.0,
            per_client_delays: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub use_theory_lr: bool,
}

fn default_bins() -> usize {
    100
}
fn default_trials() -> usize {
    8
}
fn default_radius() -> f64 {
    1e-3
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "field schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        self.run_config()?.validate()?;
        self.lr.schedule()?;
        if let Some(slr) = &self.server_lr {
            slr.schedule()?;
        }
        self.profiles.compute_delay.validate()?;
        if let Some(d) = &self.profiles.per_client_delays {
            if d.len() != self.run.n {
                return Err(Error::InvalidConfig(format!(
                    "field profiles.per_client_delays: {} entries for n={}",
                    d.len(),
                    self.run.n
                )));
            }
            if d.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidConfig(
                    "field profiles.per_client_delays: delays must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            method: self.run.method,
            n: self.run.n,
            k: self.run.k.unwrap_or(self.run.n),
            h: self.run.h,
            c: self.run.c,
            t_rounds: self.run.t_rounds,
            batch_size: self.run.batch_size,
            lr: self.lr.schedule()?,
            server_lr: self.server_lr.as_ref().map(|s| s.schedule()).transpose()?,
            clip_threshold: self.run.clip_threshold,
            seed: self.run.seed,
            eval_replica_zero: self.run.eval_replica_zero,
        })
    }

    pub fn architecture(&self) -> SplitArchitecture {
        match &self.arch {
            ArchConfig::Dense { cut_dim, hidden, aux } => {
                let (dim, classes) = match &self.dataset {
                    DatasetConfig::Synth { dim, classes, .. } => (*dim, *classes),
                    DatasetConfig::Csv { sample_shape, classes, .. } => {
                        (sample_shape.iter().product(), *classes)
                    }
                    DatasetConfig::Idx { .. } => (784, 10),
                };
                let _ = aux; // dense builder wires its own MLP aux head
                build_dense_arch(dim, *cut_dim, *hidden, classes)
            }
            ArchConfig::Cifar10 { aux } => build_cifar10_arch(*aux),
            ArchConfig::Femnist { aux } => build_femnist_arch(*aux),
        }
    }

    /// Loads (train, test) datasets.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Synth { samples, dim, classes, separation, data_seed, test_samples } => {
                let train = data::synth_dataset(*data_seed, *samples, *dim, *classes, *separation);
                let test = data::synth_dataset_split(
                    *data_seed,
                    data_seed.wrapping_add(1),
                    *test_samples,
                    *dim,
                    *classes,
                    *separation,
                );
                Ok((train, test))
            }
            DatasetConfig::Idx { images, labels, test_images, test_labels, center_crop, standardize, limit } => {
                let mut train = data::load_idx(images, labels)?;
                let mut test = data::load_idx(test_images, test_labels)?;
                if let Some(n) = limit {
                    train = truncate(train, *n);
                    test = truncate(test, *n);
                }
                for ds in [&mut train, &mut test] {
                    if let Some(side) = center_crop {
                        ds.features = data::center_crop(&ds.features, *side);
                    }
                    if *standardize {
                        ds.features = data::standardize_per_channel(&ds.features);
                    }
                }
                Ok((train, test))
            }
            DatasetConfig::Csv { path, test_path, sample_shape, classes } => {
                let train = data::load_csv(path, sample_shape, *classes)?;
                let test = data::load_csv(test_path, sample_shape, *classes)?;
                Ok((train, test))
            }
        }
    }

    pub fn shards(&self, train: &Dataset) -> Result<Vec<ClientShard>> {
        data::partition(train, self.partition.plan, self.run.n, self.partition.seed)
    }

    /// Client latency profiles; the seed namespaces all delay draws.
    pub fn client_profiles(&self, seed: u64) -> Result<Vec<ClientProfile>> {
        (0..self.run.n)
            .map(|i| {
                let model = match &self.profiles.per_client_delays {
                    Some(d) => DelayModel::Fixed { value: d[i] },
                    None => self.profiles.compute_delay,
                };
                ClientProfile::new(
                    i,
                    model,
                    self.profiles.uplink_latency,
                    self.profiles.downlink_latency,
                    seed,
                )
            })
            .collect()
    }
}

fn truncate(ds: Dataset, n: usize) -> Dataset {
    if ds.len() <= n {
        return ds;
    }
    let indices: Vec<usize> = (0..n).collect();
    Dataset {
        features: ds.features.select_rows(&indices),
        labels: ds.labels[..n].to_vec(),
        num_classes: ds.num_classes,
    }
}

pub fn minimal_synth_toml() -> &'static str {
    r#"
schema_version = 1

[dataset]
kind = "synth"
samples = 200
dim = 6
classes = 4
separation = 3.0
data_seed = 7
test_samples = 100

[partition]
plan = "iid"
seed = 5

[arch]
kind = "dense"
cut_dim = 8
hidden = 16
aux = { kind = "mlp" }

[run]
method = "cse_fsl"
n = 5
h = 1
t_rounds = 5
batch_size = 10
seed = 1

[lr]
eta0 = 0.05
"#
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg = ExperimentConfig::from_str(minimal_synth_toml()).unwrap();
        assert_eq!(cfg.run.n, 5);
        assert_eq!(cfg.run_config().unwrap().k, 5);
        let arch = cfg.architecture();
        arch.validate().unwrap();
        let (train, test) = cfg.load_datasets().unwrap();
        assert_eq!(train.len(), 200);
        assert_eq!(test.len(), 100);
        assert_eq!(cfg.shards(&train).unwrap().len(), 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = minimal_synth_toml().replace("eta0 = 0.05", "eta0 = 0.05\ntypo_key = 1");
        let err = ExperimentConfig::from_str(&bad).unwrap_err();
        assert!(err.to_string().contains("typo_key"), "{err}");
    }

    #[test]
    fn zero_h_names_field() {
        let bad = minimal_synth_toml().replace("h = 1", "h = 0");
        let err = ExperimentConfig::from_str(&bad).unwrap_err();
        assert!(err.to_string().contains("h"), "{err}");
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let bad = minimal_synth_toml().replace("schema_version = 1", "schema_version = 99");
        assert!(ExperimentConfig::from_str(&bad).is_err());
    }

    #[test]
    fn oc_requires_threshold() {
        let bad = minimal_synth_toml().replace("method = \"cse_fsl\"", "method = \"fsl_oc\"");
        assert!(ExperimentConfig::from_str(&bad).is_err());
        let good = bad.replace("seed = 1", "seed = 1\nclip_threshold = 1.0");
        ExperimentConfig::from_str(&good).unwrap();
    }

    #[test]
    fn per_client_delays_length_checked() {
        let toml = format!(
            "{}\n[profiles]\ncompute_delay = {{ kind = \"fixed\", value = 0.0 }}\nuplink_latency = 0.0\ndownlink_latency = 0.0\nper_client_delays = [1.0, 2.0]\n",
            minimal_synth_toml()
        );
        let err = ExperimentConfig::from_str(&toml).unwrap_err();
        assert!(err.to_string().contains("per_client_delays"), "{err}");
    }
}
