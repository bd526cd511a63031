use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{load_tensor, read_tensor};
use crate::episodic::{ClassId, ExampleSet};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Path relative to the manifest directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class: ClassId,
    pub name: String,
    pub split: Split,
    pub images: Vec<ImageEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub image_shape: [usize; 3],
    pub classes: Vec<ClassEntry>,
    pub digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl DatasetManifest {
    /// Hash over the name, shape, class table and every image's content hash.
    pub fn compute_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}\n{:?}\n", self.name, self.image_shape));
        for c in &self.classes {
            h.update(format!(
                "class {} {} {} {}\n",
                c.class.index,
                c.class.is_real,
                c.split.as_str(),
                c.name
            ));
            for img in &c.images {
                h.update(format!("{} {}\n", img.path, img.sha256));
            }
        }
        hex::encode(h.finalize())
    }

    pub fn image_count(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn classes_in(&self, split: Split) -> impl Iterator<Item = &ClassEntry> {
        self.classes.iter().filter(move |c| c.split == split)
    }

    /// Class-level checks that need no file access.
    pub fn validate_structure(&self) -> Result<()> {
        let mut seen: BTreeMap<ClassId, Split> = BTreeMap::new();
        for c in &self.classes {
            if let Some(prev) = seen.insert(c.class, c.split) {
                return Err(Error::Format(format!(
                    "class {} listed in both {} and {} splits",
                    c.class.index,
                    prev.as_str(),
                    c.split.as_str()
                )));
            }
            for img in &c.images {
                let p = Path::new(&img.path);
                if p.is_absolute() || p.components().any(|x| matches!(x, std::path::Component::ParentDir)) {
                    return Err(Error::Format(format!(
                        "image path `{}` must stay inside the dataset directory",
                        img.path
                    )));
                }
            }
        }
        if self.image_shape.contains(&0) {
            return Err(Error::Format(format!(
                "invalid image shape {:?}",
                self.image_shape
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// A verified manifest together with the directory its paths resolve against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

/// Reads a manifest (a `manifest.json` file or a directory holding one) and
/// verifies structure, the overall digest and every image's content hash.
/// Image values are read later, per split.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
    manifest.validate_structure()?;
    let root = file
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    for c in &manifest.classes {
        for img in &c.images {
            let p = root.join(&img.path);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let got = sha256_hex(&bytes);
            if got != img.sha256 {
                return Err(Error::Integrity {
                    path: p,
                    reason: format!("sha256 {got} does not match manifest {}", img.sha256),
                });
            }
            let t = read_tensor(&bytes)?;
            if t.shape() != manifest.image_shape {
                return Err(Error::Integrity {
                    path: p,
                    reason: format!(
                        "shape {:?} differs from declared {:?}",
                        t.shape(),
                        manifest.image_shape
                    ),
                });
            }
        }
    }
    let digest = manifest.compute_digest();
    if digest != manifest.digest {
        return Err(Error::Integrity {
            path: file,
            reason: format!("manifest digest {} does not match contents {digest}", manifest.digest),
        });
    }
    Ok(Dataset { root, manifest })
}

impl Dataset {
    /// Loads one image, checking shape and the `[-1, 1]` range.
    pub fn load_image(&self, entry: &ImageEntry) -> Result<Tensor> {
        let p = self.root.join(&entry.path);
        let t = load_tensor(&p)?;
        if t.shape() != self.manifest.image_shape {
            return Err(Error::Integrity {
                path: p,
                reason: format!("unexpected shape {:?}", t.shape()),
            });
        }
        if t.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Integrity {
                path: p,
                reason: "pixel values outside [-1, 1]".into(),
            });
        }
        Ok(t)
    }

    /// Every image of the classes in `split`, all query-eligible.
    pub fn load_split(&self, split: Split) -> Result<ExampleSet> {
        let mut set = ExampleSet::new();
        for c in self.manifest.classes_in(split) {
            for img in &c.images {
                set.push(self.load_image(img)?, c.class, true)?;
            }
        }
        Ok(set)
    }

    /// Images of `split` as one `[N,C,H,W]` tensor.
    pub fn split_tensor(&self, split: Split) -> Result<Tensor> {
        let set = self.load_split(split)?;
        if set.is_empty() {
            return Err(Error::Insufficient(format!("split {} is empty", split.as_str())));
        }
        Tensor::stack(&set.images().iter().collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_generate, SynthSpec};

    fn tiny(dir: &Path) -> Dataset {
        let spec = SynthSpec {
            n_classes: 4,
            images_per_class: 3,
            image_shape: [3, 8, 8],
            split: None,
            seed: 1,
            ..SynthSpec::default()
        };
        synth_generate(&spec, dir).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(dir.path());
        let again = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ds.manifest, again.manifest);
        let train = ds.load_split(Split::Train).unwrap();
        assert_eq!(train.len(), 3 * ds.manifest.classes_in(Split::Train).count());
        assert_eq!(ds.split_tensor(Split::Test).unwrap().shape(), [3, 3, 8, 8]);
    }

    #[test]
    fn flipped_byte_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(dir.path());
        let victim = &ds.manifest.classes[2].images[1].path;
        let p = dir.path().join(victim);
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&p, bytes).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::Integrity { path, .. }) => assert!(path.ends_with(victim)),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn edited_manifest_fails_digest() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny(dir.path()).manifest;
        m.classes[0].split = match m.classes[0].split {
            Split::Train => Split::Test,
            _ => Split::Train,
        };
        m.save(dir.path()).unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(Error::Integrity { .. })
        ));
    }

    #[test]
    fn class_in_two_splits_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny(dir.path()).manifest;
        let mut dup = m.classes[0].clone();
        dup.split = if dup.split == Split::Val { Split::Test } else { Split::Val };
        m.classes.push(dup);
        m.digest = m.compute_digest();
        m.save(dir.path()).unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(ref s) if s.contains("both")), "{err}");
    }

    #[test]
    fn escaping_paths_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny(dir.path()).manifest;
        m.classes[0].images[0].path = "../outside.mdtf".into();
        assert!(m.validate_structure().is_err());
    }
}
