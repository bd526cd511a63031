use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{read_tensor, sha256_hex, write_tensor, MANIFEST_FILE};
use crate::episodic::{ClassId, ExampleSet, FakeWays};
use crate::error::{Error, Result};
use crate::metadm::{
    generate_bad_per_class, generate_bad_single, generate_good, per_class_fakes, Generator,
    MetaDMConfig, Provenance, SharpenStrategy,
};
use crate::nn::Tensor;

#[derive(Clone, Debug)]
pub struct AugmentedExample {
    pub image: Tensor,
    pub class: ClassId,
    pub provenance: Provenance,
    /// Index of the source image in the original dataset.
    pub source_index: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTableEntry {
    pub class: ClassId,
    /// For a per-class fake, the real class it shadows.
    pub twin_of: Option<ClassId>,
}

#[derive(Clone, Debug)]
pub struct AugmentedDataset {
    pub examples: Vec<AugmentedExample>,
    pub class_table: Vec<ClassTableEntry>,
    pub config: MetaDMConfig,
    pub dataset_digest: String,
    pub denoiser_digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub path: String,
    pub class_index: u32,
    pub is_real: bool,
    pub provenance: Provenance,
    pub source_index: Option<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedManifest {
    pub dataset_digest: String,
    pub denoiser_digest: String,
    pub config: MetaDMConfig,
    pub class_table: Vec<ClassTableEntry>,
    pub records: Vec<AugmentedRecord>,
    /// sha256 of this manifest serialized with an empty digest.
    pub digest: String,
}

impl AugmentedManifest {
    pub fn compute_digest(&self) -> Result<String> {
        let mut m = self.clone();
        m.digest.clear();
        Ok(sha256_hex(serde_json::to_string(&m)?.as_bytes()))
    }
}

/// Originals, then good samples when augmenting, then bad samples from the
/// configured strategy when sharpening.
pub fn build_augmented_dataset(
    set: &ExampleSet,
    dataset_digest: &str,
    gen: &Generator,
    cfg: &MetaDMConfig,
) -> Result<AugmentedDataset> {
    cfg.validate()?;
    let mut examples: Vec<AugmentedExample> = (0..set.len())
        .map(|i| AugmentedExample {
            image: set.image(i).clone(),
            class: set.class(i),
            provenance: Provenance::Original,
            source_index: Some(i),
        })
        .collect();
    let mut class_table: Vec<ClassTableEntry> = set
        .real_classes()
        .into_iter()
        .map(|class| ClassTableEntry {
            class,
            twin_of: None,
        })
        .collect();
    if cfg.augment_enabled {
        examples.extend(generate_good(set, gen, cfg)?);
    }
    if cfg.sharpen_enabled {
        match cfg.strategy {
            SharpenStrategy::PerClassExtra => {
                examples.extend(generate_bad_per_class(set, gen, cfg)?);
                class_table.extend(per_class_fakes(set)?.into_iter().map(|(real, fake)| {
                    ClassTableEntry {
                        class: fake,
                        twin_of: Some(real),
                    }
                }));
            }
            SharpenStrategy::SingleExtra => {
                let bad = generate_bad_single(set, gen, cfg)?;
                if let Some(first) = bad.first() {
                    class_table.push(ClassTableEntry {
                        class: first.class,
                        twin_of: None,
                    });
                }
                examples.extend(bad);
            }
        }
    }
    Ok(AugmentedDataset {
        examples,
        class_table,
        config: cfg.clone(),
        dataset_digest: dataset_digest.to_string(),
        denoiser_digest: gen.digest().to_string(),
    })
}

fn record_path(i: usize) -> String {
    format!("examples/{i:05}.mdtf")
}

impl AugmentedDataset {
    pub fn count(&self, provenance: Provenance) -> usize {
        self.examples
            .iter()
            .filter(|e| e.provenance == provenance)
            .count()
    }

    pub fn fake_classes(&self) -> Vec<ClassId> {
        self.class_table
            .iter()
            .map(|e| e.class)
            .filter(|c| !c.is_real)
            .collect()
    }

    /// How fake classes join training episodes.
    pub fn fake_ways(&self) -> FakeWays {
        let fakes = self.fake_classes();
        if fakes.is_empty() {
            return FakeWays::None;
        }
        let twins: BTreeMap<u32, ClassId> = self
            .class_table
            .iter()
            .filter_map(|e| e.twin_of.map(|real| (real.index, e.class)))
            .collect();
        if twins.is_empty() {
            FakeWays::Single(fakes[0])
        } else {
            FakeWays::PerClass(twins)
        }
    }

    /// Training set view. Fake examples are never queries; good samples are
    /// queries when the config allows it.
    pub fn example_set(&self) -> Result<ExampleSet> {
        let mut set = ExampleSet::new();
        for e in &self.examples {
            let query_ok = match e.provenance {
                Provenance::Original => true,
                Provenance::GoodGenerated => self.config.good_as_query,
                Provenance::BadGenerated => false,
            };
            set.push(e.image.clone(), e.class, query_ok)?;
        }
        Ok(set)
    }

    fn encode(&self) -> Result<(AugmentedManifest, Vec<Vec<u8>>)> {
        let mut records = Vec::with_capacity(self.examples.len());
        let mut blobs = Vec::with_capacity(self.examples.len());
        for (i, e) in self.examples.iter().enumerate() {
            let bytes = write_tensor(&e.image)?;
            records.push(AugmentedRecord {
                path: record_path(i),
                class_index: e.class.index,
                is_real: e.class.is_real,
                provenance: e.provenance,
                source_index: e.source_index,
                sha256: sha256_hex(&bytes),
            });
            blobs.push(bytes);
        }
        let mut m = AugmentedManifest {
            dataset_digest: self.dataset_digest.clone(),
            denoiser_digest: self.denoiser_digest.clone(),
            config: self.config.clone(),
            class_table: self.class_table.clone(),
            records,
            digest: String::new(),
        };
        m.digest = m.compute_digest()?;
        Ok((m, blobs))
    }

    pub fn manifest(&self) -> Result<AugmentedManifest> {
        Ok(self.encode()?.0)
    }

    /// Writes every example as a tensor file plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<AugmentedManifest> {
        let (m, blobs) = self.encode()?;
        let ex_dir = dir.join("examples");
        fs::create_dir_all(&ex_dir).map_err(|e| Error::io(&ex_dir, e))?;
        for (r, bytes) in m.records.iter().zip(&blobs) {
            let p = dir.join(&r.path);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&m)? + "\n";
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(m)
    }
}

/// Loads and verifies an augmented dataset written by
/// [`AugmentedDataset::save`].
pub fn load_augmented(dir: &Path) -> Result<AugmentedDataset> {
    let file = if dir.is_dir() {
        dir.join(MANIFEST_FILE)
    } else {
        dir.to_path_buf()
    };
    let root = file.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let m: AugmentedManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
    let digest = m.compute_digest()?;
    if digest != m.digest {
        return Err(Error::Integrity {
            path: file,
            reason: format!("manifest digest {} does not match contents {digest}", m.digest),
        });
    }
    m.config.validate()?;
    let mut examples = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let p = root.join(&r.path);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if sha256_hex(&bytes) != r.sha256 {
            return Err(Error::Integrity {
                path: p,
                reason: "content hash does not match manifest".into(),
            });
        }
        let class = ClassId {
            index: r.class_index,
            is_real: r.is_real,
        };
        if (r.provenance == Provenance::BadGenerated) == class.is_real {
            return Err(Error::Format(format!(
                "{}: provenance {:?} contradicts is_real = {}",
                r.path, r.provenance, r.is_real
            )));
        }
        examples.push(AugmentedExample {
            image: read_tensor(&bytes)?,
            class,
            provenance: r.provenance,
            source_index: r.source_index,
        });
    }
    Ok(AugmentedDataset {
        examples,
        class_table: m.class_table,
        config: m.config,
        dataset_digest: m.dataset_digest,
        denoiser_digest: m.denoiser_digest,
    })
}
