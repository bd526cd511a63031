//! Good/bad pseudo-sample generation and the augmented training set.
//!
//! "Good" samples are low-strength img2img copies that keep their source
//! label. "Bad" samples are higher-strength copies placed in fake classes,
//! either one fake twin per real class or a single shared fake class.

mod augmented;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::sha256_hex;
use crate::diffusion::{img2img_generate_batch, DenoiserModel, NoiseSchedule};
use crate::episodic::{ClassId, ExampleSet};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub use augmented::{
    build_augmented_dataset, load_augmented, AugmentedDataset, AugmentedExample,
    AugmentedManifest, AugmentedRecord, ClassTableEntry,
};

/// Images pushed through the denoiser together.
const GEN_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharpenStrategy {
    /// One fake class per real class.
    PerClassExtra,
    /// All bad samples share one fake class.
    SingleExtra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaDMConfig {
    pub good_strength: f64,
    pub bad_strength: f64,
    pub strategy: SharpenStrategy,
    /// Sources drawn per real class under `SingleExtra`.
    pub bad_per_class: usize,
    pub augment_enabled: bool,
    pub sharpen_enabled: bool,
    /// Whether good samples may be drawn as training queries.
    pub good_as_query: bool,
    pub seed: u64,
}

impl Default for MetaDMConfig {
    fn default() -> Self {
        MetaDMConfig {
            good_strength: 0.05,
            bad_strength: 0.2,
            strategy: SharpenStrategy::PerClassExtra,
            bad_per_class: 5,
            augment_enabled: true,
            sharpen_enabled: true,
            good_as_query: true,
            seed: 0,
        }
    }
}

impl MetaDMConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("good_strength", self.good_strength),
            ("bad_strength", self.bad_strength),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {s}")));
            }
        }
        if self.bad_per_class == 0 {
            return Err(Error::Config("bad_per_class must be at least 1".into()));
        }
        if !self.augment_enabled && !self.sharpen_enabled {
            return Err(Error::Config(
                "module inactive: enable augment and/or sharpen".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    GoodGenerated,
    BadGenerated,
}

/// A trained denoiser with its schedule and checkpoint digest.
#[derive(Clone, Debug)]
pub struct Generator {
    model: DenoiserModel,
    schedule: NoiseSchedule,
    digest: String,
}

impl Generator {
    /// Rejects a model that has never been trained.
    pub fn new(model: DenoiserModel, schedule: NoiseSchedule) -> Result<Self> {
        if model.trained_steps() == 0 {
            return Err(Error::Config(
                "denoiser has not been trained; refusing to generate".into(),
            ));
        }
        let digest = sha256_hex(&model.checkpoint_bytes(&schedule));
        Ok(Generator {
            model,
            schedule,
            digest,
        })
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (model, schedule) = DenoiserModel::from_checkpoint_bytes(bytes)?;
        Self::new(model, schedule)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// sha256 of the checkpoint bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Generates from `sources` (indices into `set`) at `strength`, each with
    /// its own seed.
    fn generate(
        &self,
        set: &ExampleSet,
        sources: &[usize],
        seeds: &[u64],
        strength: f64,
    ) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(sources.len());
        for (src, sd) in sources.chunks(GEN_CHUNK).zip(seeds.chunks(GEN_CHUNK)) {
            let imgs: Vec<&Tensor> = src.iter().map(|&i| set.image(i)).collect();
            out.extend(img2img_generate_batch(
                &self.model,
                &imgs,
                sd,
                strength,
                &self.schedule,
            )?);
        }
        Ok(out)
    }
}

const STREAM_GOOD: u64 = 1;
const STREAM_BAD: u64 = 2;
const STREAM_SUBSAMPLE: u64 = 3;

/// Per-image seed derived from (seed, purpose, index), independent of
/// processing order.
fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

fn ensure_real(set: &ExampleSet) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Insufficient("source dataset is empty".into()));
    }
    if !set.fake_classes().is_empty() {
        return Err(Error::Config(
            "source dataset must contain real classes only".into(),
        ));
    }
    Ok(())
}

/// First fake index: one past the largest real index.
fn first_fake_index(set: &ExampleSet) -> Result<u32> {
    let max = set
        .real_classes()
        .iter()
        .map(|c| c.index)
        .max()
        .ok_or_else(|| Error::Insufficient("no real classes".into()))?;
    max.checked_add(1)
        .ok_or_else(|| Error::Config("class index space exhausted".into()))
}

/// Fake twin of every real class, in ascending real-class order.
pub fn per_class_fakes(set: &ExampleSet) -> Result<BTreeMap<ClassId, ClassId>> {
    let first = first_fake_index(set)?;
    Ok(set
        .real_classes()
        .into_iter()
        .enumerate()
        .map(|(k, c)| (c, ClassId::fake(first + k as u32)))
        .collect())
}

/// One good sample per original image, labelled with the source class.
pub fn generate_good(
    set: &ExampleSet,
    gen: &Generator,
    cfg: &MetaDMConfig,
) -> Result<Vec<AugmentedExample>> {
    cfg.validate()?;
    ensure_real(set)?;
    let sources: Vec<usize> = (0..set.len()).collect();
    let seeds: Vec<u64> = sources
        .iter()
        .map(|&i| derive_seed(cfg.seed, STREAM_GOOD, i as u64))
        .collect();
    let images = gen.generate(set, &sources, &seeds, cfg.good_strength)?;
    Ok(images
        .into_iter()
        .zip(sources)
        .map(|(image, i)| AugmentedExample {
            image,
            class: set.class(i),
            provenance: Provenance::GoodGenerated,
            source_index: Some(i),
        })
        .collect())
}

fn bad_from(
    set: &ExampleSet,
    gen: &Generator,
    cfg: &MetaDMConfig,
    sources: Vec<usize>,
    label: impl Fn(ClassId) -> ClassId,
) -> Result<Vec<AugmentedExample>> {
    let seeds: Vec<u64> = sources
        .iter()
        .map(|&i| derive_seed(cfg.seed, STREAM_BAD, i as u64))
        .collect();
    let images = gen.generate(set, &sources, &seeds, cfg.bad_strength)?;
    Ok(images
        .into_iter()
        .zip(sources)
        .map(|(image, i)| AugmentedExample {
            image,
            class: label(set.class(i)),
            provenance: Provenance::BadGenerated,
            source_index: Some(i),
        })
        .collect())
}

/// One bad sample per original image, placed in its class's fake twin.
pub fn generate_bad_per_class(
    set: &ExampleSet,
    gen: &Generator,
    cfg: &MetaDMConfig,
) -> Result<Vec<AugmentedExample>> {
    cfg.validate()?;
    ensure_real(set)?;
    if cfg.strategy != SharpenStrategy::PerClassExtra {
        return Err(Error::Config("strategy is not per_class_extra".into()));
    }
    let fakes = per_class_fakes(set)?;
    bad_from(set, gen, cfg, (0..set.len()).collect(), |c| fakes[&c])
}

/// Source indices for `SingleExtra`: `bad_per_class` members of every real
/// class drawn without replacement, in ascending class order.
pub fn subsample_bad_sources(set: &ExampleSet, cfg: &MetaDMConfig) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for class in set.real_classes() {
        let members = set.members(class);
        if members.len() < cfg.bad_per_class {
            return Err(Error::Insufficient(format!(
                "class {} has {} images, fewer than bad_per_class = {}",
                class.index,
                members.len(),
                cfg.bad_per_class
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            STREAM_SUBSAMPLE,
            u64::from(class.index),
        ));
        let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), cfg.bad_per_class)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

/// `bad_per_class` bad samples per real class, all in one fake class.
pub fn generate_bad_single(
    set: &ExampleSet,
    gen: &Generator,
    cfg: &MetaDMConfig,
) -> Result<Vec<AugmentedExample>> {
    cfg.validate()?;
    ensure_real(set)?;
    if cfg.strategy != SharpenStrategy::SingleExtra {
        return Err(Error::Config("strategy is not single_extra".into()));
    }
    let fake = ClassId::fake(first_fake_index(set)?);
    let sources = subsample_bad_sources(set, cfg)?;
    bad_from(set, gen, cfg, sources, |_| fake)
}
