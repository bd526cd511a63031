use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Class label with its real/fake tag. Fake classes hold generated
/// "bad" samples and only ever act as competing support ways.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId {
    pub index: u32,
    pub is_real: bool,
}

impl ClassId {
    pub fn real(index: u32) -> Self {
        ClassId {
            index,
            is_real: true,
        }
    }

    pub fn fake(index: u32) -> Self {
        ClassId {
            index,
            is_real: false,
        }
    }
}

/// Labeled images episodes are drawn from.
#[derive(Clone, Debug, Default)]
pub struct ExampleSet {
    images: Vec<Tensor>,
    classes: Vec<ClassId>,
    query_ok: Vec<bool>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
}

impl ExampleSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one `[C,H,W]` image. `query_ok` marks whether the example may be
    /// drawn as a query; fake-class examples never are.
    pub fn push(&mut self, image: Tensor, class: ClassId, query_ok: bool) -> Result<usize> {
        if image.ndim() != 3 {
            return Err(Error::Shape(format!(
                "example images must be [C,H,W], got {:?}",
                image.shape()
            )));
        }
        if let Some(first) = self.images.first() {
            if first.shape() != image.shape() {
                return Err(Error::Shape(format!(
                    "example shape {:?} differs from set shape {:?}",
                    image.shape(),
                    first.shape()
                )));
            }
        }
        let i = self.images.len();
        self.images.push(image);
        self.classes.push(class);
        self.query_ok.push(query_ok && class.is_real);
        self.by_class.entry(class).or_default().push(i);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn class(&self, i: usize) -> ClassId {
        self.classes[i]
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(Tensor::shape)
    }

    pub fn real_classes(&self) -> Vec<ClassId> {
        self.by_class.keys().copied().filter(|c| c.is_real).collect()
    }

    pub fn fake_classes(&self) -> Vec<ClassId> {
        self.by_class.keys().copied().filter(|c| !c.is_real).collect()
    }

    pub fn members(&self, class: ClassId) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }
}

/// How fake classes join training episodes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum FakeWays {
    #[default]
    None,
    /// One fake twin per sampled real way, keyed by real class index.
    PerClass(BTreeMap<u32, ClassId>),
    /// One shared fake way added to every episode.
    Single(ClassId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

/// One N-way K-shot task, holding indices into an [`ExampleSet`].
///
/// `ways` lists the real ways first, then any fake ways. Support is
/// way-major with `k_shot` entries per way; queries are way-major over the
/// real ways only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub ways: Vec<ClassId>,
    pub support: Vec<(usize, ClassId)>,
    pub query: Vec<(usize, ClassId)>,
}

impl Episode {
    pub fn fake_way_count(&self) -> usize {
        self.ways.len() - self.n_way
    }

    /// Support positions belonging to each way.
    pub fn support_groups(&self) -> Vec<Vec<usize>> {
        self.ways
            .iter()
            .map(|w| {
                self.support
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, c))| c == w)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect()
    }

    /// Way position of each query's class.
    pub fn query_targets(&self) -> Vec<usize> {
        self.query
            .iter()
            .map(|(_, c)| {
                self.ways
                    .iter()
                    .position(|w| w == c)
                    .expect("query class is a support way")
            })
            .collect()
    }
}

/// Rng for episode `index` of a run seeded with `seed`; each episode gets
/// its own stream so parallel and serial runs agree.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples `n_way` real classes without replacement, then `n_query` query
/// and `k_shot` support images per class without replacement, then `k_shot`
/// support images for each fake way dictated by `fakes`.
pub fn sample_episode<R: Rng + ?Sized>(
    set: &ExampleSet,
    shape: EpisodeShape,
    fakes: &FakeWays,
    rng: &mut R,
) -> Result<Episode> {
    let EpisodeShape {
        n_way,
        k_shot,
        n_query,
    } = shape;
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Config(format!(
            "episodes need n_way >= 1 and k_shot >= 1, got {n_way}-way {k_shot}-shot"
        )));
    }
    let real = set.real_classes();
    if real.len() < n_way {
        return Err(Error::Insufficient(format!(
            "{n_way}-way episodes need {n_way} real classes, set has {}",
            real.len()
        )));
    }
    let chosen: Vec<ClassId> = index::sample(rng, real.len(), n_way)
        .into_iter()
        .map(|i| real[i])
        .collect();

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * n_query);
    for &class in &chosen {
        let members = set.members(class);
        let eligible: Vec<usize> = members.iter().copied().filter(|&i| set.query_ok[i]).collect();
        if eligible.len() < n_query || members.len() < k_shot + n_query {
            return Err(Error::Insufficient(format!(
                "class {} has {} images ({} query-eligible), episode needs {k_shot} support + {n_query} query",
                class.index,
                members.len(),
                eligible.len()
            )));
        }
        let q: Vec<usize> = index::sample(rng, eligible.len(), n_query)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        let rest: Vec<usize> = members.iter().copied().filter(|i| !q.contains(i)).collect();
        for i in index::sample(rng, rest.len(), k_shot) {
            support.push((rest[i], class));
        }
        query.extend(q.into_iter().map(|i| (i, class)));
    }

    let mut ways = chosen.clone();
    let fake_ways: Vec<ClassId> = match fakes {
        FakeWays::None => Vec::new(),
        FakeWays::PerClass(map) => chosen
            .iter()
            .map(|c| {
                map.get(&c.index).copied().ok_or_else(|| {
                    Error::Insufficient(format!("real class {} has no fake twin", c.index))
                })
            })
            .collect::<Result<_>>()?,
        FakeWays::Single(c) => vec![*c],
    };
    for fake in fake_ways {
        if fake.is_real {
            return Err(Error::Config(format!(
                "fake way {} is tagged as real",
                fake.index
            )));
        }
        let members = set.members(fake);
        if members.len() < k_shot {
            return Err(Error::Insufficient(format!(
                "fake class {} has {} images, episode needs {k_shot}",
                fake.index,
                members.len()
            )));
        }
        for i in index::sample(rng, members.len(), k_shot) {
            support.push((members[i], fake));
        }
        ways.push(fake);
    }
    Ok(Episode {
        n_way,
        k_shot,
        ways,
        support,
        query,
    })
}
