use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{sha256_hex, SynthSpec};
use crate::diffusion::{DenoiserConfig, NoiseSchedule};
use crate::episodic::EpisodeShape;
use crate::error::{Error, Result};
use crate::metadm::MetaDMConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "METADM_OUTPUT_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Existing dataset manifest; when unset the synthetic dataset below is
    /// rendered into `<output_dir>/dataset`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    /// Trained denoiser that ablation arms reuse instead of training one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub widths: [usize; 3],
    pub time_embed_dim: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let s = NoiseSchedule::scaled_default(200).expect("valid default schedule");
        let d = DenoiserConfig::default();
        DiffusionSection {
            checkpoint: None,
            timesteps: 200,
            beta_min: s.beta_min(),
            beta_max: s.beta_max(),
            epochs: 150,
            batch_size: 16,
            learning_rate: 2e-3,
            widths: d.widths,
            time_embed_dim: d.time_embed_dim,
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_min, self.beta_max)
    }

    pub fn denoiser_config(&self, image_channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            image_channels,
            widths: self.widths,
            time_embed_dim: self.time_embed_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FslMethod {
    /// Plain Prototypical Networks on the original training split.
    Baseline,
    /// Training on the augmented dataset.
    Metadm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FslSection {
    pub method: FslMethod,
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per way at evaluation.
    pub n_query: usize,
    /// Queries per way during training.
    pub train_query: usize,
    pub episodes_train: usize,
    pub episodes_eval: usize,
    pub learning_rate: f32,
    pub lambda: f32,
    pub width: usize,
    pub val_every: usize,
    pub val_episodes: usize,
    /// Adds fake ways, generated from the test-class images with the
    /// sharpening settings, to evaluation episodes.
    pub eval_fake_ways: bool,
}

impl Default for FslSection {
    fn default() -> Self {
        FslSection {
            method: FslMethod::Metadm,
            n_way: 5,
            k_shot: 1,
            n_query: 15,
            train_query: 5,
            episodes_train: 300,
            episodes_eval: 600,
            learning_rate: 1e-3,
            lambda: 1e-4,
            width: 32,
            val_every: 50,
            val_episodes: 100,
            eval_fake_ways: false,
        }
    }
}

impl FslSection {
    pub fn eval_shape(&self, k_shot: usize) -> EpisodeShape {
        EpisodeShape {
            n_way: self.n_way,
            k_shot,
            n_query: self.n_query,
        }
    }

    pub fn train_shape(&self) -> EpisodeShape {
        EpisodeShape {
            n_way: self.n_way,
            k_shot: self.k_shot,
            n_query: self.train_query,
        }
    }
}

/// Full run configuration. Stored as TOML; every field has a default.
/// `metadm.seed` is always replaced by the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub diffusion: DiffusionSection,
    pub metadm: MetaDMConfig,
    pub fsl: FslSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            diffusion: DiffusionSection::default(),
            metadm: MetaDMConfig::default(),
            fsl: FslSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies the derived fields.
    pub fn resolved(mut self) -> Self {
        self.metadm.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    /// Replaces `output_dir` with the value of [`OUTPUT_DIR_ENV`] when set.
    pub fn apply_env(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.manifest.is_none() {
            self.dataset.synth.validate()?;
        }
        self.diffusion.schedule()?;
        let d = &self.diffusion;
        if d.epochs == 0 || d.batch_size == 0 || !(d.learning_rate > 0.0) {
            return Err(Error::Config(
                "diffusion epochs, batch_size and learning_rate must be positive".into(),
            ));
        }
        if self.fsl.method == FslMethod::Metadm {
            self.metadm.validate()?;
        }
        let f = &self.fsl;
        if f.n_way < 2 || f.k_shot == 0 || f.n_query == 0 || f.train_query == 0 {
            return Err(Error::Config(
                "fsl needs n_way >= 2 and positive k_shot, n_query, train_query".into(),
            ));
        }
        if f.episodes_eval < 2 || f.width == 0 || !(f.learning_rate > 0.0) || f.lambda < 0.0 {
            return Err(Error::Config(
                "fsl needs episodes_eval >= 2, width > 0, learning_rate > 0, lambda >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    /// sha256 of the resolved TOML text with `output_dir` blanked, so the
    /// digest names the experiment rather than where it was written.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(sha256_hex(c.to_toml()?.as_bytes()))
    }
}
