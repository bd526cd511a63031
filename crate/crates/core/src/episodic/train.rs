use serde::{Deserialize, Serialize};

use crate::episodic::{
    episode_loss, episode_rng, evaluate, sample_episode, Conv4, Embedder, EpisodeShape,
    ExampleSet, FakeWays,
};
use crate::error::{Error, Result};
use crate::nn::{Mode, ModelParams, Optimizer, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FslTrainOptions {
    pub episodes: usize,
    pub shape: EpisodeShape,
    pub learning_rate: f32,
    pub lambda: f32,
    pub seed: u64,
    /// Validate every this many episodes (0 disables validation).
    pub val_every: usize,
    pub val_episodes: usize,
    pub val_query: usize,
}

impl Default for FslTrainOptions {
    fn default() -> Self {
        FslTrainOptions {
            episodes: 300,
            shape: EpisodeShape {
                n_way: 5,
                k_shot: 1,
                n_query: 5,
            },
            learning_rate: 1e-3,
            lambda: 1e-4,
            seed: 0,
            val_every: 50,
            val_episodes: 100,
            val_query: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub episode: usize,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f32>,
    /// Fake ways present in each training episode.
    pub fake_ways: Vec<usize>,
    pub val: Vec<ValPoint>,
    pub best_episode: Option<usize>,
}

impl TrainLog {
    pub fn total_fake_ways(&self) -> usize {
        self.fake_ways.iter().sum()
    }

    pub fn best_val(&self) -> Option<&ValPoint> {
        let best = self.best_episode?;
        self.val.iter().find(|v| v.episode == best)
    }
}

/// Episodic training with Adam. Fake ways join each episode according to
/// `fakes`. When `val` is given, the model is validated before training and
/// every `val_every` episodes, and the best-on-validation parameters are
/// restored at the end.
pub fn train_episodic(
    model: &mut Conv4,
    train: &ExampleSet,
    fakes: &FakeWays,
    opts: &FslTrainOptions,
    val: Option<&ExampleSet>,
) -> Result<TrainLog> {
    let mut optim = Optimizer::adam(opts.learning_rate)?;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let val_seed = opts.seed ^ 0x5eed_0f_7a1;
    let val_shape = val.map(|v| EpisodeShape {
        n_way: opts.shape.n_way.min(v.real_classes().len()),
        k_shot: opts.shape.k_shot,
        n_query: opts.val_query,
    });

    let mut validate = |model: &Conv4, episode: usize, log: &mut TrainLog| -> Result<()> {
        let (Some(set), Some(shape)) = (val, val_shape) else {
            return Ok(());
        };
        let r = evaluate(set, model, shape, opts.val_episodes, val_seed)?;
        log.val.push(ValPoint {
            episode,
            mean_accuracy: r.mean_accuracy,
            ci95_halfwidth: r.ci95_halfwidth,
        });
        if best.as_ref().is_none_or(|(acc, _)| r.mean_accuracy > *acc) {
            best = Some((r.mean_accuracy, model.params().clone()));
            log.best_episode = Some(episode);
        }
        Ok(())
    };

    let validating = val.is_some() && opts.val_every > 0;
    if validating {
        validate(model, 0, &mut log)?;
    }
    for e in 0..opts.episodes {
        let mut rng = episode_rng(opts.seed, e as u64);
        let ep = sample_episode(train, opts.shape, fakes, &mut rng)?;
        let mut tape = Tape::new();
        let loss = episode_loss(&mut tape, &ep, train, &*model, opts.lambda, Mode::Train)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "episodic loss became {value} at episode {e}"
            )));
        }
        tape.backward(loss, model.params_mut())?;
        model.commit_batch_stats(&mut tape);
        optim.step(model.params_mut())?;
        log.losses.push(value);
        log.fake_ways.push(ep.fake_way_count());
        if validating && (e + 1) % opts.val_every == 0 {
            validate(model, e + 1, &mut log)?;
        }
    }
    if validating && opts.episodes % opts.val_every != 0 {
        validate(model, opts.episodes, &mut log)?;
    }
    if let Some((_, params)) = best {
        model.params_mut().load_values(&params)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::ClassId;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_set(seed: u64) -> ExampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ExampleSet::new();
        for c in 0..3 {
            let base = Tensor::randn([1, 16, 16], &mut rng);
            for _ in 0..4 {
                let noise = Tensor::randn([1, 16, 16], &mut rng);
                let img: Vec<f32> = base
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(b, n)| b + 0.5 * n)
                    .collect();
                set.push(Tensor::new([1, 16, 16], img).unwrap(), ClassId::real(c), true)
                    .unwrap();
            }
        }
        set
    }

    fn opts(episodes: usize) -> FslTrainOptions {
        FslTrainOptions {
            episodes,
            shape: EpisodeShape {
                n_way: 3,
                k_shot: 1,
                n_query: 2,
            },
            learning_rate: 3e-3,
            lambda: 1e-4,
            seed: 1,
            val_every: 0,
            val_episodes: 10,
            val_query: 2,
        }
    }

    #[test]
    fn loss_falls_when_overfitting_a_tiny_set() {
        let set = tiny_set(2);
        let mut model = Conv4::new([1, 16, 16], 8, 3).unwrap();
        let log = train_episodic(&mut model, &set, &FakeWays::None, &opts(100), None).unwrap();
        let head: f32 = log.losses[..10].iter().sum::<f32>() / 10.0;
        let tail: f32 = log.losses[90..].iter().sum::<f32>() / 10.0;
        assert!(tail < head, "head {head} tail {tail}");
        assert_eq!(log.total_fake_ways(), 0);
    }

    #[test]
    fn validation_keeps_best_parameters_and_is_reproducible() {
        let set = tiny_set(4);
        let val = tiny_set(5);
        let mut o = opts(20);
        o.val_every = 5;
        let mut a = Conv4::new([1, 16, 16], 4, 6).unwrap();
        let mut b = Conv4::new([1, 16, 16], 4, 6).unwrap();
        let la = train_episodic(&mut a, &set, &FakeWays::None, &o, Some(&val)).unwrap();
        let lb = train_episodic(&mut b, &set, &FakeWays::None, &o, Some(&val)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params().to_bytes(), b.params().to_bytes());
        assert_eq!(la.val.len(), 5);
        let best = la.best_val().unwrap();
        assert!(best.mean_accuracy >= la.val[0].mean_accuracy);
        assert!(la.val.iter().all(|v| v.mean_accuracy <= best.mean_accuracy));
    }
}
