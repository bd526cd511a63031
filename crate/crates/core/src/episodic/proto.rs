use crate::episodic::{ClassId, Embedder, Episode, ExampleSet};
use crate::error::{Error, Result};
use crate::nn::{Mode, ModelParams, Tape, Tensor, Var};

/// Per-way mean support embeddings, in episode way order.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub ways: Vec<ClassId>,
    pub vectors: Vec<Vec<f32>>,
}

impl Prototypes {
    /// Averages the support embeddings `support[i]` of each way group,
    /// accumulating in `f64`.
    pub fn from_embeddings(
        ways: &[ClassId],
        groups: &[Vec<usize>],
        support: &[&[f32]],
    ) -> Result<Self> {
        if ways.is_empty() || ways.len() != groups.len() {
            return Err(Error::Shape(format!(
                "{} ways but {} support groups",
                ways.len(),
                groups.len()
            )));
        }
        let d = support.first().map_or(0, |s| s.len());
        let mut vectors = Vec::with_capacity(ways.len());
        for (w, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Shape(format!("way {w} has no support points")));
            }
            let mut acc = vec![0.0f64; d];
            for &i in g {
                let e = support[i];
                if e.len() != d {
                    return Err(Error::dim("embedding axis", d, e.len()));
                }
                acc.iter_mut().zip(e).for_each(|(a, &v)| *a += v as f64);
            }
            let n = g.len() as f64;
            vectors.push(acc.into_iter().map(|a| (a / n) as f32).collect());
        }
        Ok(Prototypes {
            ways: ways.to_vec(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.ways.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ways.is_empty()
    }
}

/// Eval-mode prototypes of every support way of `episode`, fake ways included.
pub fn compute_prototypes<E: Embedder + ?Sized>(
    episode: &Episode,
    set: &ExampleSet,
    model: &E,
) -> Result<Prototypes> {
    let images: Vec<&Tensor> = episode.support.iter().map(|(i, _)| set.image(*i)).collect();
    let emb = model.embed_eval(&images)?;
    let refs: Vec<&[f32]> = emb.iter().map(Vec::as_slice).collect();
    Prototypes::from_embeddings(&episode.ways, &episode.support_groups(), &refs)
}

/// Softmax over negative squared Euclidean distances to each prototype.
pub fn class_probabilities(embedding: &[f32], protos: &Prototypes) -> Result<Vec<f64>> {
    if protos.is_empty() {
        return Err(Error::Shape("no prototypes to classify against".into()));
    }
    let mut logits = Vec::with_capacity(protos.len());
    for p in &protos.vectors {
        if p.len() != embedding.len() {
            return Err(Error::dim("embedding axis", p.len(), embedding.len()));
        }
        let d: f64 = embedding
            .iter()
            .zip(p)
            .map(|(&a, &b)| {
                let t = a as f64 - b as f64;
                t * t
            })
            .sum();
        logits.push(-d);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Embeds one `[C,H,W]` query in eval mode and returns its way probabilities.
pub fn classify_query<E: Embedder + ?Sized>(
    query: &Tensor,
    protos: &Prototypes,
    model: &E,
) -> Result<Vec<f64>> {
    let emb = model.embed_eval(&[query])?;
    class_probabilities(&emb[0], protos)
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// `sum ||theta||^2` over trainable entries of `params`, recorded on `tape`.
pub fn l2_penalty(tape: &mut Tape, params: &ModelParams) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (id, _, t) in params.iter() {
        if !t.requires_grad() {
            continue;
        }
        let v = tape.param(params, id);
        let s = tape.sum_squares(v);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Masked prototypical loss of one episode with an L2 penalty:
/// `-(1/Q) sum_i m_i log p(y_i | x_i) + lambda ||theta||^2`, with `m_i = 1`
/// for real-class queries. Fake ways only compete in the softmax.
pub fn episode_loss<E: Embedder + ?Sized>(
    tape: &mut Tape,
    episode: &Episode,
    set: &ExampleSet,
    model: &E,
    lambda: f32,
    mode: Mode,
) -> Result<Var> {
    let mask: Vec<f32> = episode
        .query
        .iter()
        .map(|(_, c)| if c.is_real { 1.0 } else { 0.0 })
        .collect();
    episode_loss_masked(tape, episode, set, model, lambda, mode, &mask)
}

/// [`episode_loss`] with an explicit per-query mask.
pub fn episode_loss_masked<E: Embedder + ?Sized>(
    tape: &mut Tape,
    episode: &Episode,
    set: &ExampleSet,
    model: &E,
    lambda: f32,
    mode: Mode,
    mask: &[f32],
) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "regularization weight must be finite and >= 0, got {lambda}"
        )));
    }
    if episode.query.is_empty() {
        return Err(Error::Insufficient("episode has no queries".into()));
    }
    if mask.len() != episode.query.len() {
        return Err(Error::dim("mask length", episode.query.len(), mask.len()));
    }
    let s = episode.support.len();
    let q = episode.query.len();
    let images: Vec<&Tensor> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|(i, _)| set.image(*i))
        .collect();
    let x = tape.constant(Tensor::stack(&images)?);
    let emb = model.embed(tape, x, mode)?;
    let protos = tape.group_mean(emb, episode.support_groups())?;
    let queries = tape.row_select(emb, (s..s + q).collect())?;
    let dist = tape.sq_dist(queries, protos)?;
    let logits = tape.scale(dist, -1.0);
    let logp = tape.log_softmax(logits)?;
    let nll = tape.masked_nll(logp, episode.query_targets(), mask.to_vec(), q as f32)?;
    if lambda == 0.0 {
        return Ok(nll);
    }
    let reg = l2_penalty(tape, model.params())?;
    let reg = tape.scale(reg, lambda);
    tape.add(nll, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::episode::tests::toy_set;
    use crate::episodic::{episode_rng, sample_episode, EpisodeShape, FakeWays};
    use crate::nn::Linear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Maps the constant value of a toy image to a far-apart one-hot code.
    struct OneHot {
        params: ModelParams,
        dim: usize,
    }

    impl Embedder for OneHot {
        fn embed(&self, tape: &mut Tape, images: Var, _mode: Mode) -> Result<Var> {
            let v = tape.value(images);
            let b = v.shape()[0];
            let per = v.numel() / b;
            let mut data = vec![0.0f32; b * self.dim];
            for i in 0..b {
                let c = v.data()[i * per].floor().max(0.0) as usize;
                data[i * self.dim + c] = 100.0;
            }
            Ok(tape.constant(Tensor::new([b, self.dim], data)?))
        }

        fn params(&self) -> &ModelParams {
            &self.params
        }
    }

    /// Flatten followed by a linear map, so the loss has real parameters.
    struct Lin {
        params: ModelParams,
        layer: Linear,
    }

    impl Lin {
        fn new(inp: usize, out: usize, seed: u64) -> Self {
            let mut params = ModelParams::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = Linear::new(&mut params, "lin", inp, out, &mut rng).unwrap();
            Lin { params, layer }
        }
    }

    impl Embedder for Lin {
        fn embed(&self, tape: &mut Tape, images: Var, _mode: Mode) -> Result<Var> {
            let x = tape.flatten(images)?;
            self.layer.forward(tape, &self.params, x)
        }

        fn params(&self) -> &ModelParams {
            &self.params
        }
    }

    fn random_set(classes: u32, per: usize, seed: u64) -> ExampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ExampleSet::new();
        for c in 0..classes {
            for _ in 0..per {
                set.push(Tensor::randn([1, 2, 3], &mut rng), ClassId::real(c), true)
                    .unwrap();
            }
        }
        set
    }

    fn shape(n_way: usize, k_shot: usize, n_query: usize) -> EpisodeShape {
        EpisodeShape {
            n_way,
            k_shot,
            n_query,
        }
    }

    #[test]
    fn prototype_of_single_and_duplicate_points() {
        let ways = [ClassId::real(0), ClassId::real(1)];
        let a = [1.0f32, 2.0];
        let b = [-3.0f32, 0.5];
        let p = Prototypes::from_embeddings(&ways, &[vec![0], vec![1, 2]], &[&a, &b, &b]).unwrap();
        assert_eq!(p.vectors[0], a);
        assert_eq!(p.vectors[1], b);
    }

    #[test]
    fn prototypes_match_brute_force_mean() {
        let set = random_set(6, 8, 1);
        let model = Lin::new(6, 4, 2);
        let ep = sample_episode(&set, shape(5, 5, 1), &FakeWays::None, &mut episode_rng(3, 0)).unwrap();
        let protos = compute_prototypes(&ep, &set, &model).unwrap();
        for (w, class) in ep.ways.iter().enumerate() {
            let mut acc = [0.0f64; 4];
            let mut n = 0.0;
            for (i, c) in &ep.support {
                if c == class {
                    let e = model.embed_eval(&[set.image(*i)]).unwrap().remove(0);
                    acc.iter_mut().zip(&e).for_each(|(a, &v)| *a += v as f64);
                    n += 1.0;
                }
            }
            for (j, a) in acc.iter().enumerate() {
                assert!((protos.vectors[w][j] as f64 - a / n).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn prototypes_ignore_support_order() {
        let set = random_set(4, 6, 4);
        let model = Lin::new(6, 3, 5);
        let ep = sample_episode(&set, shape(3, 4, 1), &FakeWays::None, &mut episode_rng(6, 0)).unwrap();
        let mut shuffled = ep.clone();
        shuffled.support.reverse();
        let a = compute_prototypes(&ep, &set, &model).unwrap();
        let b = compute_prototypes(&shuffled, &set, &model).unwrap();
        for (x, y) in a.vectors.iter().zip(&b.vectors) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_edge_cases() {
        let one = Prototypes {
            ways: vec![ClassId::real(0)],
            vectors: vec![vec![3.0, 4.0]],
        };
        assert_eq!(class_probabilities(&[0.0, 0.0], &one).unwrap(), vec![1.0]);
        let two = Prototypes {
            ways: vec![ClassId::real(0), ClassId::real(1)],
            vectors: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        };
        let p = class_probabilities(&[0.0, 5.0], &two).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6);
        assert_eq!(argmax(&p), 0);
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }

    #[test]
    fn probabilities_match_high_precision_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let vectors: Vec<Vec<f32>> = (0..3)
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let protos = Prototypes {
                ways: (0..3).map(ClassId::real).collect(),
                vectors: vectors.clone(),
            };
            let q: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = class_probabilities(&q, &protos).unwrap();
            let d: Vec<f64> = vectors
                .iter()
                .map(|v| v.iter().zip(&q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum())
                .collect();
            let z: f64 = d.iter().map(|x| (-x).exp()).sum();
            for (pi, di) in p.iter().zip(&d) {
                assert!((pi - (-di).exp() / z).abs() < 1e-5);
                assert!(*pi > 0.0 && *pi < 1.0);
            }
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            // shifting the query and every prototype together changes nothing
            let shift: Vec<f32> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let moved = Prototypes {
                ways: protos.ways.clone(),
                vectors: vectors
                    .iter()
                    .map(|v| v.iter().zip(&shift).map(|(a, s)| a + s).collect())
                    .collect(),
            };
            let mq: Vec<f32> = q.iter().zip(&shift).map(|(a, s)| a + s).collect();
            let p2 = class_probabilities(&mq, &moved).unwrap();
            for (a, b) in p.iter().zip(&p2) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let set = toy_set(5, 6, 0);
        let model = OneHot {
            params: ModelParams::new(),
            dim: 8,
        };
        let ep = sample_episode(&set, shape(5, 1, 3), &FakeWays::None, &mut episode_rng(0, 0)).unwrap();
        let mut tape = Tape::new();
        let loss = episode_loss(&mut tape, &ep, &set, &model, 0.0, Mode::Train).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn zero_mask_leaves_only_penalty() {
        let set = random_set(4, 5, 9);
        let model = Lin::new(6, 3, 10);
        let ep = sample_episode(&set, shape(3, 2, 2), &FakeWays::None, &mut episode_rng(1, 1)).unwrap();
        let lambda = 1e-4;
        let mut tape = Tape::new();
        let zeros = vec![0.0; ep.query.len()];
        let loss = episode_loss_masked(&mut tape, &ep, &set, &model, lambda, Mode::Train, &zeros).unwrap();
        let mut ref_tape = Tape::new();
        let reg = l2_penalty(&mut ref_tape, model.params()).unwrap();
        let reg = ref_tape.scale(reg, lambda);
        assert_eq!(tape.value(loss).data()[0], ref_tape.value(reg).data()[0]);
        let expect = lambda as f64 * model.params().trainable_sq_norm();
        assert!((tape.value(loss).data()[0] as f64 - expect).abs() < 1e-9);
        assert!(episode_loss(&mut Tape::new(), &ep, &set, &model, -1.0, Mode::Train).is_err());
    }

    #[test]
    fn loss_matches_high_precision_evaluation() {
        let set = random_set(6, 6, 11);
        let model = Lin::new(6, 4, 12);
        let lambda = 1e-4;
        for e in 0..10 {
            let ep = sample_episode(&set, shape(4, 2, 3), &FakeWays::None, &mut episode_rng(13, e)).unwrap();
            let mut tape = Tape::new();
            let loss = episode_loss(&mut tape, &ep, &set, &model, lambda, Mode::Train).unwrap();
            let got = tape.value(loss).data()[0] as f64;

            let w = model.params().by_name("lin.weight").unwrap();
            let b = model.params().by_name("lin.bias").unwrap();
            let embed = |i: usize| -> Vec<f64> {
                let x = set.image(i).data();
                (0..4)
                    .map(|o| {
                        b.data()[o] as f64
                            + (0..6).map(|k| w.data()[o * 6 + k] as f64 * x[k] as f64).sum::<f64>()
                    })
                    .collect()
            };
            let protos: Vec<Vec<f64>> = ep
                .ways
                .iter()
                .map(|c| {
                    let pts: Vec<Vec<f64>> =
                        ep.support.iter().filter(|(_, s)| s == c).map(|(i, _)| embed(*i)).collect();
                    (0..4).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64).collect()
                })
                .collect();
            let mut nll = 0.0;
            for (i, c) in &ep.query {
                let q = embed(*i);
                let logits: Vec<f64> = protos
                    .iter()
                    .map(|p| -p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .collect();
                let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
                let t = ep.ways.iter().position(|w| w == c).unwrap();
                nll -= logits[t] - lse;
            }
            let want = nll / ep.query.len() as f64 + lambda as f64 * model.params().trainable_sq_norm();
            assert!((got - want).abs() < 1e-5, "episode {e}: {got} vs {want}");
        }
    }
}
