use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::datasets::{
    assign_splits, load_manifest, sha256_hex, split_counts, write_tensor, ClassEntry, Dataset,
    DatasetManifest, ImageEntry,
};
use crate::episodic::ClassId;
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    pub name: String,
    /// Target `[H, W]`.
    pub size: [u32; 2],
    pub split: Option<[usize; 3]>,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            name: "folder".into(),
            size: [32, 32],
            split: None,
            seed: 0,
        }
    }
}

/// Decodes an image file to 8-bit RGB, resizes it bilinearly to `[h, w]` and
/// maps pixel values to `[-1, 1]`.
pub fn image_to_tensor(path: &Path, size: [u32; 2]) -> Result<Tensor> {
    let [h, w] = size;
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let img = image::imageops::resize(&img, w, h, FilterType::Triangle);
    let (h, w) = (h as usize, w as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px[ch] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new([3, h, w], data)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Ingests a directory-per-class image folder into `out` as tensor files plus
/// a manifest. Classes are numbered in sorted directory-name order; files that
/// the decoder does not recognise by extension are skipped.
pub fn ingest_folder(src: &Path, out: &Path, opts: &IngestOptions) -> Result<Dataset> {
    if opts.size.contains(&0) {
        return Err(Error::Config(format!("invalid target size {:?}", opts.size)));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(src)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    let counts = split_counts(class_dirs.len(), opts.split)?;
    let splits = assign_splits(class_dirs.len(), counts, opts.seed)?;
    let mut classes = Vec::with_capacity(class_dirs.len());
    for (c, (dir, split)) in class_dirs.iter().zip(splits).enumerate() {
        let rel_dir = format!("images/c{c:03}");
        let abs_dir = out.join(&rel_dir);
        fs::create_dir_all(&abs_dir).map_err(|e| Error::io(&abs_dir, e))?;
        let mut images = Vec::new();
        for file in sorted_entries(dir)? {
            if !file.is_file() || image::ImageFormat::from_path(&file).is_err() {
                continue;
            }
            let bytes = write_tensor(&image_to_tensor(&file, opts.size)?)?;
            let rel = format!("{rel_dir}/{:04}.mdtf", images.len());
            let path = out.join(&rel);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            images.push(ImageEntry {
                path: rel,
                sha256: sha256_hex(&bytes),
            });
        }
        if images.is_empty() {
            return Err(Error::Insufficient(format!(
                "class folder {} holds no readable images",
                dir.display()
            )));
        }
        classes.push(ClassEntry {
            class: ClassId::real(c as u32),
            name: dir
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            split,
            images,
        });
    }
    let mut manifest = DatasetManifest {
        name: opts.name.clone(),
        image_shape: [3, opts.size[0] as usize, opts.size[1] as usize],
        classes,
        digest: String::new(),
    };
    manifest.digest = manifest.compute_digest();
    manifest.save(out)?;
    load_manifest(out)
}
