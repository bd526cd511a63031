use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{
    load_manifest, sha256_hex, write_tensor, ClassEntry, Dataset, DatasetManifest, ImageEntry,
    Split,
};
use crate::episodic::ClassId;
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Checker,
    Gradient,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Disk,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Cross,
        ShapeFamily::Ring,
        ShapeFamily::Bar,
        ShapeFamily::Checker,
        ShapeFamily::Gradient,
    ];
}

/// Per-class rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub family: ShapeFamily,
    /// Hue in `[0, 1)`.
    pub hue: f32,
    /// Shape radius range as a fraction of the half-width.
    pub size_range: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub n_classes: usize,
    pub images_per_class: usize,
    pub image_shape: [usize; 3],
    pub size_range: [f32; 2],
    /// Maximum center offset as a fraction of the half-width.
    pub position_jitter: f32,
    /// Amplitude of uniform per-pixel noise.
    pub noise_level: f32,
    /// Per-image hue jitter.
    pub hue_jitter: f32,
    /// Explicit train/val/test class counts; `None` means a 50/25/25 split.
    /// The default leaves five test classes so 5-way test episodes exist.
    pub split: Option<[usize; 3]>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            name: "shapes".into(),
            n_classes: 16,
            images_per_class: 40,
            image_shape: [3, 32, 32],
            size_range: [0.3, 0.85],
            position_jitter: 0.4,
            noise_level: 0.4,
            hue_jitter: 0.12,
            split: Some([8, 3, 5]),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_shape;
        if c != 3 || h < 8 || w < 8 {
            return Err(Error::Config(format!(
                "synthetic images must be [3,H,W] with H,W >= 8, got {:?}",
                self.image_shape
            )));
        }
        if self.n_classes < 3 {
            return Err(Error::Config(format!(
                "need at least 3 classes for a train/val/test split, got {}",
                self.n_classes
            )));
        }
        if self.images_per_class == 0 {
            return Err(Error::Config("images_per_class must be positive".into()));
        }
        let [lo, hi] = self.size_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("bad size range {:?}", self.size_range)));
        }
        for (name, v) in [
            ("position_jitter", self.position_jitter),
            ("noise_level", self.noise_level),
            ("hue_jitter", self.hue_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        self.split_counts().map(|_| ())
    }

    /// Train, val and test class counts.
    pub fn split_counts(&self) -> Result<[usize; 3]> {
        split_counts(self.n_classes, self.split)
    }

    /// Family cycles with the class index; hue steps by the golden ratio
    /// within a family so classes sharing a family are far apart in hue.
    pub fn class_style(&self, class: usize) -> ClassStyle {
        let fam = class % ShapeFamily::ALL.len();
        let round = class / ShapeFamily::ALL.len();
        let hue = (fam as f64 * 0.381_966 + round as f64 * 0.618_034).fract() as f32;
        let [lo, hi] = self.size_range;
        let span = (hi - lo) * 0.5;
        let offset = span * ((class * 3 % 5) as f32 / 4.0);
        ClassStyle {
            family: ShapeFamily::ALL[fam],
            hue,
            size_range: [lo + offset, lo + offset + span],
        }
    }

    pub fn class_splits(&self) -> Result<Vec<Split>> {
        assign_splits(self.n_classes, self.split_counts()?, self.seed)
    }

    /// Renders image `index` of `class`; values lie in `[-1, 1]`.
    pub fn render(&self, class: usize, index: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((class as u64) << 32) | index as u64);
        let style = self.class_style(class);
        let [_, h, w] = self.image_shape;

        let radius = rng.random_range(style.size_range[0]..=style.size_range[1]);
        let j = self.position_jitter;
        let cx = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        let cy = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        // random rotation as a normalized vector, avoiding trig
        let (rc, rs) = loop {
            let a: f32 = rng.random_range(-1.0..=1.0);
            let b: f32 = rng.random_range(-1.0..=1.0);
            let n2 = a * a + b * b;
            if n2 > 0.01 && n2 <= 1.0 {
                let n = n2.sqrt();
                break (a / n, b / n);
            }
        };
        let hj = self.hue_jitter;
        let hue = style.hue + if hj > 0.0 { rng.random_range(-hj..=hj) } else { 0.0 };
        let value = rng.random_range(0.75f32..=1.0);
        let fg = hsv_to_rgb(hue, 0.85, value);
        let bg_level = rng.random_range(-0.9f32..=-0.4);
        let bg_tilt = [rng.random_range(-0.2f32..=0.2), rng.random_range(-0.2f32..=0.2)];

        let aa = 2.0 / h.min(w) as f32;
        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let u = (2.0 * x as f32 + 1.0) / w as f32 - 1.0;
                let v = (2.0 * y as f32 + 1.0) / h as f32 - 1.0;
                let (du, dv) = (u - cx, v - cy);
                let lx = (rc * du + rs * dv) / radius;
                let ly = (-rs * du + rc * dv) / radius;
                let cover = family_coverage(style.family, lx, ly, aa / radius);
                let bg = bg_level + bg_tilt[0] * u + bg_tilt[1] * v;
                for ch in 0..3 {
                    let fgv = fg[ch] * 2.0 - 1.0;
                    let mut px = bg * (1.0 - cover) + fgv * cover;
                    if self.noise_level > 0.0 {
                        px += rng.random_range(-self.noise_level..=self.noise_level);
                    }
                    data[(ch * h + y) * w + x] = px.clamp(-1.0, 1.0);
                }
            }
        }
        Tensor::new([3, h, w], data).expect("shape matches data")
    }

    /// All images in memory, grouped per class.
    pub fn render_all(&self) -> Result<Vec<Vec<Tensor>>> {
        self.validate()?;
        Ok((0..self.n_classes)
            .map(|c| (0..self.images_per_class).map(|i| self.render(c, i)).collect())
            .collect())
    }
}

/// `explicit` counts, or 50/25/25 of `n` rounded with every split non-empty.
pub fn split_counts(n: usize, explicit: Option<[usize; 3]>) -> Result<[usize; 3]> {
    let counts = match explicit {
        Some(s) => s,
        None => {
            let quarter = ((n as f64) / 4.0).round().max(1.0) as usize;
            [n.saturating_sub(2 * quarter), quarter, quarter]
        }
    };
    if counts.iter().sum::<usize>() != n || counts.contains(&0) {
        return Err(Error::Config(format!(
            "split {counts:?} must assign all {n} classes with every split non-empty"
        )));
    }
    Ok(counts)
}

/// Class split as a seeded shuffle of class indices.
pub fn assign_splits(n: usize, counts: [usize; 3], seed: u64) -> Result<Vec<Split>> {
    if counts.iter().sum::<usize>() != n {
        return Err(Error::Config(format!("split {counts:?} does not cover {n} classes")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Test; n];
    for (rank, &c) in order.iter().enumerate() {
        splits[c] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

fn smoothstep(edge: f32, d: f32) -> f32 {
    // 1 inside (d <= -edge), 0 outside (d >= edge)
    let t = ((edge - d) / (2.0 * edge)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Foreground coverage at shape-local coordinates (unit radius).
fn family_coverage(family: ShapeFamily, x: f32, y: f32, aa: f32) -> f32 {
    let (ax, ay) = (x.abs(), y.abs());
    let r = (x * x + y * y).sqrt();
    let square = ax.max(ay) - 0.8;
    match family {
        ShapeFamily::Disk => smoothstep(aa, r - 1.0),
        ShapeFamily::Square => smoothstep(aa, square),
        ShapeFamily::Triangle => {
            let d = (ax * 0.866 + y * 0.5).max(-y) - 0.5;
            smoothstep(aa, d)
        }
        ShapeFamily::Cross => {
            let d = (ax - 1.0).max(ay - 0.3).min((ax - 0.3).max(ay - 1.0));
            smoothstep(aa, d)
        }
        ShapeFamily::Ring => smoothstep(aa, (r - 0.75).abs() - 0.22),
        ShapeFamily::Bar => smoothstep(aa, (ax - 1.0).max(ay - 0.3)),
        ShapeFamily::Checker => {
            let cell = ((x + 1.0) * 2.0).floor() as i32 + ((y + 1.0) * 2.0).floor() as i32;
            let level = if cell.rem_euclid(2) == 0 { 1.0 } else { 0.25 };
            smoothstep(aa, square) * level
        }
        ShapeFamily::Gradient => {
            let ramp = (0.15 + 0.85 * (x + 0.8) / 1.6).clamp(0.0, 1.0);
            smoothstep(aa, square) * ramp
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h - h.floor()) * 6.0;
    let sector = (h.floor() as i32).rem_euclid(6);
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders the dataset into `dir` as tensor files plus `manifest.json`.
pub fn synth_generate(spec: &SynthSpec, dir: &Path) -> Result<Dataset> {
    spec.validate()?;
    let splits = spec.class_splits()?;
    let mut classes = Vec::with_capacity(spec.n_classes);
    for (c, split) in splits.iter().enumerate() {
        let rel_dir = format!("images/c{c:03}");
        let abs_dir = dir.join(&rel_dir);
        fs::create_dir_all(&abs_dir).map_err(|e| Error::io(&abs_dir, e))?;
        let mut images = Vec::with_capacity(spec.images_per_class);
        for i in 0..spec.images_per_class {
            let bytes = write_tensor(&spec.render(c, i))?;
            let rel = format!("{rel_dir}/{i:04}.mdtf");
            let path = dir.join(&rel);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            images.push(ImageEntry {
                path: rel,
                sha256: sha256_hex(&bytes),
            });
        }
        let style = spec.class_style(c);
        classes.push(ClassEntry {
            class: ClassId::real(c as u32),
            name: format!("{:?}-{:.3}", style.family, style.hue).to_lowercase(),
            split: *split,
            images,
        });
    }
    let mut manifest = DatasetManifest {
        name: spec.name.clone(),
        image_shape: spec.image_shape,
        classes,
        digest: String::new(),
    };
    manifest.digest = manifest.compute_digest();
    manifest.save(dir)?;
    load_manifest(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::{evaluate_features, EpisodeShape};

    fn small() -> SynthSpec {
        SynthSpec {
            n_classes: 6,
            images_per_class: 5,
            image_shape: [3, 16, 16],
            split: None,
            seed: 9,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn implicit_split_is_half_quarter_quarter() {
        let spec = SynthSpec { split: None, ..SynthSpec::default() };
        assert_eq!(spec.split_counts().unwrap(), [8, 4, 4]);
        let splits = spec.class_splits().unwrap();
        for (s, want) in [(Split::Train, 8), (Split::Val, 4), (Split::Test, 4)] {
            assert_eq!(splits.iter().filter(|x| **x == s).count(), want);
        }
        let three = SynthSpec { n_classes: 3, split: None, ..SynthSpec::default() };
        assert_eq!(three.split_counts().unwrap(), [1, 1, 1]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SynthSpec { n_classes: 2, ..small() },
            SynthSpec { image_shape: [1, 16, 16], ..small() },
            SynthSpec { image_shape: [3, 4, 16], ..small() },
            SynthSpec { split: Some([4, 1, 0]), ..small() },
            SynthSpec { split: Some([4, 1, 2]), ..small() },
            SynthSpec { size_range: [0.5, 0.2], ..small() },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::Config(_))), "{s:?}");
        }
    }

    #[test]
    fn classes_differ_in_family_or_hue() {
        let spec = SynthSpec { n_classes: 64, split: None, ..SynthSpec::default() };
        for a in 0..64 {
            for b in a + 1..64 {
                let (sa, sb) = (spec.class_style(a), spec.class_style(b));
                assert!(sa.family != sb.family || sa.hue != sb.hue, "{a} {b}");
            }
        }
    }

    #[test]
    fn renders_are_deterministic_and_bounded() {
        let spec = small();
        let a = spec.render(2, 3);
        assert!(a.bit_eq(&spec.render(2, 3)));
        assert!(!a.bit_eq(&spec.render(2, 4)));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let other = SynthSpec { seed: 10, ..small() };
        assert!(!a.bit_eq(&other.render(2, 3)));
    }

    #[test]
    fn generate_twice_gives_identical_digest() {
        let spec = small();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = synth_generate(&spec, d1.path()).unwrap();
        let b = synth_generate(&spec, d2.path()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.manifest.image_count(), 30);
    }

    #[test]
    fn sixteen_by_forty_counts() {
        let spec = SynthSpec::default();
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(&spec, dir.path()).unwrap();
        assert_eq!(ds.manifest.image_count(), 640);
        let per_split: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|s| ds.manifest.classes_in(*s).count())
            .collect();
        assert_eq!(per_split, [8, 3, 5]);
    }

    #[test]
    fn raw_pixel_centroids_beat_forty_percent() {
        let spec = SynthSpec::default();
        let splits = spec.class_splits().unwrap();
        let mut set = crate::episodic::ExampleSet::new();
        for (c, s) in splits.iter().enumerate() {
            if *s == Split::Test {
                for i in 0..spec.images_per_class {
                    set.push(spec.render(c, i), ClassId::real(c as u32), true).unwrap();
                }
            }
        }
        let feats: Vec<Vec<f32>> = set.images().iter().map(|t| t.data().to_vec()).collect();
        let shape = EpisodeShape { n_way: 5, k_shot: 1, n_query: 15 };
        let r = evaluate_features(&set, &feats, shape, 600, 0).unwrap();
        assert!(r.mean_accuracy > 0.4, "{}", r.mean_accuracy);
    }
}
