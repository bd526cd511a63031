use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodic::{
    argmax, class_probabilities, episode_rng, sample_episode, Embedder, Episode, EpisodeShape,
    ExampleSet, FakeWays, Prototypes,
};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Accuracy statistics of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub seed: u64,
    pub config_digest: String,
    #[serde(skip)]
    pub per_episode_accuracies: Vec<f64>,
}

impl EvalReport {
    /// Mean and `1.96 * sample_std / sqrt(n)` of `accuracies`.
    pub fn from_accuracies(shape: EpisodeShape, seed: u64, accuracies: Vec<f64>) -> Result<Self> {
        let n = accuracies.len();
        if n < 2 {
            return Err(Error::Config(format!(
                "evaluation needs at least 2 episodes, got {n}"
            )));
        }
        let mean = accuracies.iter().sum::<f64>() / n as f64;
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(EvalReport {
            n_episodes: n,
            n_way: shape.n_way,
            k_shot: shape.k_shot,
            n_query: shape.n_query,
            mean_accuracy: mean,
            ci95_halfwidth: 1.96 * var.sqrt() / (n as f64).sqrt(),
            seed,
            config_digest: String::new(),
            per_episode_accuracies: accuracies,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `episode_index,accuracy` rows with a header line.
    pub fn per_episode_csv(&self) -> String {
        let mut out = String::from("episode_index,accuracy\n");
        for (i, a) in self.per_episode_accuracies.iter().enumerate() {
            writeln!(out, "{i},{a}").expect("writing to a String");
        }
        out
    }
}

/// Runs `n_episodes` real-class episodes, scoring the way predictions that
/// `classify` returns for each episode's queries. The classifier receives the
/// episode's own rng stream, positioned after sampling.
pub fn evaluate_with<F>(
    set: &ExampleSet,
    shape: EpisodeShape,
    n_episodes: usize,
    seed: u64,
    classify: F,
) -> Result<EvalReport>
where
    F: FnMut(&Episode, &mut ChaCha8Rng) -> Result<Vec<usize>>,
{
    evaluate_with_fakes(set, shape, &FakeWays::None, n_episodes, seed, classify)
}

/// [`evaluate_with`] where episodes also carry the fake ways `fakes`. A
/// query assigned to a fake way counts as wrong.
pub fn evaluate_with_fakes<F>(
    set: &ExampleSet,
    shape: EpisodeShape,
    fakes: &FakeWays,
    n_episodes: usize,
    seed: u64,
    mut classify: F,
) -> Result<EvalReport>
where
    F: FnMut(&Episode, &mut ChaCha8Rng) -> Result<Vec<usize>>,
{
    if shape.n_query == 0 {
        return Err(Error::Config("evaluation needs n_query >= 1".into()));
    }
    let mut accuracies = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let mut rng = episode_rng(seed, e as u64);
        let ep = sample_episode(set, shape, fakes, &mut rng)?;
        let predicted = classify(&ep, &mut rng)?;
        if predicted.len() != ep.query.len() {
            return Err(Error::dim("prediction count", ep.query.len(), predicted.len()));
        }
        let correct = predicted
            .iter()
            .zip(ep.query_targets())
            .filter(|(p, t)| **p == *t)
            .count();
        accuracies.push(correct as f64 / ep.query.len() as f64);
    }
    EvalReport::from_accuracies(shape, seed, accuracies)
}

/// Evaluates nearest-prototype classification on precomputed embeddings
/// `features[i]` of every example in `set`.
pub fn evaluate_features(
    set: &ExampleSet,
    features: &[Vec<f32>],
    shape: EpisodeShape,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_features_with_fakes(set, features, shape, &FakeWays::None, n_episodes, seed)
}

/// [`evaluate_features`] with fake ways competing in every episode.
pub fn evaluate_features_with_fakes(
    set: &ExampleSet,
    features: &[Vec<f32>],
    shape: EpisodeShape,
    fakes: &FakeWays,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if features.len() != set.len() {
        return Err(Error::dim("feature count", set.len(), features.len()));
    }
    evaluate_with_fakes(set, shape, fakes, n_episodes, seed, |ep, _| {
        let support: Vec<&[f32]> = ep.support.iter().map(|(i, _)| features[*i].as_slice()).collect();
        let protos = Prototypes::from_embeddings(&ep.ways, &ep.support_groups(), &support)?;
        ep.query
            .iter()
            .map(|(i, _)| Ok(argmax(&class_probabilities(&features[*i], &protos)?)))
            .collect()
    })
}

/// Embeds every example of `set` once in eval mode, then runs
/// [`evaluate_features`].
pub fn evaluate<E: Embedder + ?Sized>(
    set: &ExampleSet,
    model: &E,
    shape: EpisodeShape,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with_fake_ways(set, model, shape, &FakeWays::None, n_episodes, seed)
}

/// [`evaluate`] with fake ways competing in every episode.
pub fn evaluate_with_fake_ways<E: Embedder + ?Sized>(
    set: &ExampleSet,
    model: &E,
    shape: EpisodeShape,
    fakes: &FakeWays,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let images: Vec<&Tensor> = set.images().iter().collect();
    let features = model.embed_eval(&images)?;
    evaluate_features_with_fakes(set, &features, shape, fakes, n_episodes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::ClassId;
    use rand::Rng;

    fn set_with(classes: u32, per: usize) -> ExampleSet {
        let mut set = ExampleSet::new();
        for c in 0..classes {
            for _ in 0..per {
                set.push(Tensor::zeros([1, 1, 1]), ClassId::real(c), true).unwrap();
            }
        }
        set
    }

    fn shape() -> EpisodeShape {
        EpisodeShape {
            n_way: 5,
            k_shot: 1,
            n_query: 15,
        }
    }

    #[test]
    fn always_correct_features() {
        let set = set_with(8, 20);
        let feats: Vec<Vec<f32>> = (0..set.len())
            .map(|i| {
                let mut v = vec![0.0; 8];
                v[set.class(i).index as usize] = 1.0;
                v
            })
            .collect();
        let r = evaluate_features(&set, &feats, shape(), 50, 1).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.ci95_halfwidth, 0.0);
    }

    #[test]
    fn random_guess_scores_chance() {
        let set = set_with(8, 20);
        let r = evaluate_with(&set, shape(), 600, 2, |ep, rng| {
            Ok(ep.query.iter().map(|_| rng.random_range(0..ep.n_way)).collect())
        })
        .unwrap();
        let se = r.ci95_halfwidth / 1.96;
        assert!((r.mean_accuracy - 0.2).abs() < 3.0 * se, "{} +- {}", r.mean_accuracy, se);
        let mean = r.per_episode_accuracies.iter().sum::<f64>() / 600.0;
        assert_eq!(r.mean_accuracy, mean);
        assert_eq!(r.per_episode_csv().lines().count(), 601);
    }

    #[test]
    fn reports_are_reproducible_and_need_two_episodes() {
        let set = set_with(6, 20);
        let feats: Vec<Vec<f32>> = (0..set.len()).map(|i| vec![i as f32 * 0.01, 0.0]).collect();
        let a = evaluate_features(&set, &feats, shape(), 30, 7).unwrap();
        let b = evaluate_features(&set, &feats, shape(), 30, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(evaluate_features(&set, &feats, shape(), 1, 7).is_err());
    }
}
