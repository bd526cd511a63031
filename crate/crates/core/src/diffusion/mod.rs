//! Denoising diffusion: schedule, forward noising, noise-prediction
//! training, ancestral sampling and strength-controlled image-to-image.

mod model;
mod schedule;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Optimizer, Tape, Tensor, Var};

pub use model::{timestep_embedding, DenoiserConfig, DenoiserModel, NoisePredictor};
pub use schedule::{forward_diffuse, NoiseSchedule};

pub(crate) use schedule::forward_diffuse_batch;

/// Predicts zero noise everywhere. The reference baseline for the loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, tape: &mut Tape, x: Var, _timesteps: &[usize]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        Ok(tape.constant(Tensor::zeros(shape)))
    }
}

/// Timesteps and noise drawn for one loss evaluation.
#[derive(Clone, Debug)]
pub struct NoisingDraw {
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

/// Draws one timestep per item (uniform over `0..T`), then a standard-normal
/// noise tensor of `shape`, in that order.
pub fn sample_noising<R: Rng + ?Sized>(
    shape: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> NoisingDraw {
    let b = shape.first().copied().unwrap_or(0);
    let timesteps = (0..b)
        .map(|_| rng.random_range(0..schedule.timesteps()))
        .collect();
    NoisingDraw {
        timesteps,
        noise: Tensor::randn(shape.to_vec(), rng),
    }
}

/// Mean squared error between predicted and true noise over a `[B,C,H,W]` batch.
pub fn diffusion_loss<P, R>(
    model: &P,
    tape: &mut Tape,
    s0_batch: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    if s0_batch.ndim() != 4 || s0_batch.shape()[0] == 0 {
        return Err(Error::Shape(format!(
            "diffusion loss needs a non-empty [B,C,H,W] batch, got {:?}",
            s0_batch.shape()
        )));
    }
    let draw = sample_noising(s0_batch.shape(), schedule, rng);
    loss_for_draw(model, tape, s0_batch, schedule, &draw)
}

fn loss_for_draw<P: NoisePredictor + ?Sized>(
    model: &P,
    tape: &mut Tape,
    s0_batch: &Tensor,
    schedule: &NoiseSchedule,
    draw: &NoisingDraw,
) -> Result<Var> {
    let st = forward_diffuse_batch(s0_batch, &draw.timesteps, &draw.noise, schedule)?;
    let x = tape.constant(st);
    let pred = model.predict(tape, x, &draw.timesteps)?;
    let eps = tape.constant(draw.noise.clone());
    let diff = tape.sub(pred, eps)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Loss value on a fixed draw, for comparing models on identical noise.
pub fn evaluate_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    s0_batch: &Tensor,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let loss = diffusion_loss(model, &mut tape, s0_batch, schedule, &mut rng)?;
    Ok(tape.value(loss).data()[0])
}

/// One ancestral reverse step at timestep `t` for a whole batch.
///
/// `s_{t-1} = (s_t - beta_t / sqrt(1 - ab_t) * eps) / sqrt(alpha_t) + sqrt(beta_t) * z`,
/// with `z = 0` at `t = 0`.
pub fn denoise_step<P, R>(
    model: &P,
    s_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    schedule.check_t(t)?;
    let eps = predict_batch(model, s_t, t)?;
    let z = if t > 0 {
        Some(Tensor::randn(s_t.shape().to_vec(), rng))
    } else {
        None
    };
    ancestral_update(s_t, &eps, z.as_ref(), t, schedule)
}

fn predict_batch<P: NoisePredictor + ?Sized>(model: &P, s_t: &Tensor, t: usize) -> Result<Tensor> {
    let squeeze = s_t.ndim() == 3;
    let x = if squeeze {
        let mut shape = vec![1];
        shape.extend_from_slice(s_t.shape());
        s_t.clone().reshape(shape)?
    } else {
        s_t.clone()
    };
    let b = x.shape()[0];
    let eps = model.predict_eval(&x, &vec![t; b])?;
    if eps.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "noise predictor returned {:?} for input {:?}",
            eps.shape(),
            x.shape()
        )));
    }
    eps.reshape(s_t.shape().to_vec())
}

fn ancestral_update(
    s_t: &Tensor,
    eps: &Tensor,
    z: Option<&Tensor>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let beta = schedule.beta()[t];
    let inv_sqrt_alpha = (1.0 / schedule.alpha()[t].sqrt()) as f32;
    let coef = (beta / (1.0 - schedule.alpha_bar()[t]).sqrt()) as f32;
    let sigma = beta.sqrt() as f32;
    let mut data: Vec<f32> = s_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| inv_sqrt_alpha * (x - coef * e))
        .collect();
    if let Some(z) = z {
        for (d, &zv) in data.iter_mut().zip(z.data()) {
            *d += sigma * zv;
        }
    }
    Tensor::new(s_t.shape().to_vec(), data)
}

/// Full `T`-step chain from pure noise, clamped to `[-1, 1]`.
pub fn sample<P, R>(
    model: &P,
    shape: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let mut s = Tensor::randn(shape.to_vec(), rng);
    for t in (0..schedule.timesteps()).rev() {
        s = denoise_step(model, &s, t, schedule, rng)?;
    }
    Ok(s.clamp(-1.0, 1.0))
}

/// Strength and seed for one image-to-image generation.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorConfig<'a> {
    pub strength: f64,
    pub seed: u64,
    pub schedule: &'a NoiseSchedule,
}

impl GeneratorConfig<'_> {
    pub fn start_step(&self) -> Result<usize> {
        self.schedule.start_step(self.strength)
    }
}

/// Noised starting state `s_{t_start - 1}` for a `[C,H,W]` source, or `None`
/// when `t_start = 0`. Consumes the same rng draws as [`img2img_generate`].
pub fn img2img_start_state<R: Rng + ?Sized>(
    source: &Tensor,
    strength: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Option<Tensor>> {
    let t_start = schedule.start_step(strength)?;
    if t_start == 0 {
        return Ok(None);
    }
    let noise = Tensor::randn(source.shape().to_vec(), rng);
    forward_diffuse(source, t_start - 1, &noise, schedule).map(Some)
}

/// Image-to-image generation of one `[C,H,W]` source.
///
/// Noises the source to `t_start - 1` with `t_start = round(strength * T)`,
/// then runs the reverse chain down to 0 and clamps to `[-1, 1]`. With
/// `strength = 0` the source comes back bit for bit.
pub fn img2img_generate<P: NoisePredictor + ?Sized>(
    model: &P,
    source: &Tensor,
    cfg: &GeneratorConfig<'_>,
) -> Result<Tensor> {
    let out = img2img_generate_batch(model, &[source], &[cfg.seed], cfg.strength, cfg.schedule)?;
    Ok(out.into_iter().next().expect("one output"))
}

/// Batched [`img2img_generate`]: item `i` uses its own rng seeded with
/// `seeds[i]`, so each output matches the single-image call with that seed.
pub fn img2img_generate_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    sources: &[&Tensor],
    seeds: &[u64],
    strength: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<Tensor>> {
    if sources.len() != seeds.len() {
        return Err(Error::dim("seed count", sources.len(), seeds.len()));
    }
    for s in sources {
        if s.ndim() != 3 {
            return Err(Error::Shape(format!(
                "img2img source must be [C,H,W], got {:?}",
                s.shape()
            )));
        }
    }
    let t_start = schedule.start_step(strength)?;
    if t_start == 0 || sources.is_empty() {
        return Ok(sources.iter().map(|s| (*s).clone()).collect());
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut states = Vec::with_capacity(sources.len());
    for (src, rng) in sources.iter().zip(rngs.iter_mut()) {
        states.push(img2img_start_state(src, strength, schedule, rng)?.expect("t_start > 0"));
    }
    let mut batch = Tensor::stack(&states.iter().collect::<Vec<_>>())?;
    drop(states);
    let inner = batch.numel() / sources.len();
    for t in (0..t_start).rev() {
        let eps = predict_batch(model, &batch, t)?;
        let z = if t > 0 {
            let mut z = Vec::with_capacity(batch.numel());
            for rng in rngs.iter_mut() {
                z.extend((0..inner).map(|_| rng.sample::<f32, _>(StandardNormal)));
            }
            Some(Tensor::new(batch.shape().to_vec(), z)?)
        } else {
            None
        };
        batch = ancestral_update(&batch, &eps, z.as_ref(), t, schedule)?;
    }
    let batch = batch.clamp(-1.0, 1.0);
    (0..sources.len()).map(|i| batch.slice_outer(i)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for DiffusionTrainOptions {
    fn default() -> Self {
        DiffusionTrainOptions {
            steps: 500,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

/// Trains `model` with Adam on `images` (`[N,C,H,W]`), drawing minibatches
/// from per-epoch shuffles. Returns the loss of every step.
pub fn train_denoiser(
    model: &mut DenoiserModel,
    images: &Tensor,
    schedule: &NoiseSchedule,
    opts: &DiffusionTrainOptions,
) -> Result<Vec<f32>> {
    if images.ndim() != 4 || images.shape()[0] == 0 {
        return Err(Error::Insufficient(format!(
            "denoiser training needs a non-empty [N,C,H,W] set, got {:?}",
            images.shape()
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n = images.shape()[0];
    let bs = opts.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut optim = Optimizer::adam(opts.learning_rate)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut idx = Vec::with_capacity(bs);
        while idx.len() < bs {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let items: Vec<Tensor> = idx
            .iter()
            .map(|&i| images.slice_outer(i))
            .collect::<Result<_>>()?;
        let batch = Tensor::stack(&items.iter().collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let loss = diffusion_loss(&*model, &mut tape, &batch, schedule, &mut rng)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "denoiser loss became {value} at step {step}"
            )));
        }
        tape.backward(loss, model.params_mut())?;
        optim.step(model.params_mut())?;
        losses.push(value);
    }
    model.record_training(opts.steps as u64);
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns exactly the noise the loss will draw, by replaying the rng.
    struct OraclePredictor {
        noise: Tensor,
    }

    impl NoisePredictor for OraclePredictor {
        fn predict(&self, tape: &mut Tape, _x: Var, _t: &[usize]) -> Result<Var> {
            Ok(tape.constant(self.noise.clone()))
        }
    }

    fn tiny_model(seed: u64) -> DenoiserModel {
        DenoiserModel::new(
            DenoiserConfig {
                image_channels: 3,
                widths: [8, 12, 12],
                time_embed_dim: 8,
            },
            seed,
        )
        .unwrap()
    }

    /// Smooth blobs in `[-1, 1]`, so there is structure to learn.
    fn blobs(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * 3 * size * size);
        for _ in 0..n {
            let cx: f32 = rng.random_range(0.2..0.8) * size as f32;
            let cy: f32 = rng.random_range(0.2..0.8) * size as f32;
            let col: [f32; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            for c in col {
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        let w = (-d2 / (size as f32 * 2.0)).exp();
                        data.push(w * c - (1.0 - w) * 0.5);
                    }
                }
            }
        }
        Tensor::new([n, 3, size, size], data).unwrap()
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let sched = NoiseSchedule::scaled_default(50).unwrap();
        let s0 = blobs(4, 8, 1);
        let rng = ChaCha8Rng::seed_from_u64(77);
        let draw = sample_noising(s0.shape(), &sched, &mut rng.clone());
        let oracle = OraclePredictor { noise: draw.noise };
        let mut tape = Tape::new();
        let loss = diffusion_loss(&oracle, &mut tape, &s0, &sched, &mut rng.clone()).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_unit_variance() {
        let sched = NoiseSchedule::scaled_default(200).unwrap();
        // 8 * 3 * 32 * 32 = 24576 elements
        let s0 = blobs(8, 32, 2);
        let loss = evaluate_loss(&ZeroPredictor, &s0, &sched, 3).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
    }

    #[test]
    fn loss_rejects_empty_batch() {
        let sched = NoiseSchedule::scaled_default(10).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = Tensor::zeros([0, 3, 8, 8]);
        assert!(diffusion_loss(&ZeroPredictor, &mut tape, &empty, &sched, &mut rng).is_err());
    }

    #[test]
    fn last_step_is_deterministic() {
        let sched = NoiseSchedule::scaled_default(20).unwrap();
        let m = tiny_model(1);
        let s = blobs(2, 8, 4);
        let a = denoise_step(&m, &s, 0, &sched, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = denoise_step(&m, &s, 0, &sched, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(a.bit_eq(&b));
        let c = denoise_step(&m, &s, 5, &sched, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = denoise_step(&m, &s, 5, &sched, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(!c.bit_eq(&d));
        assert!(denoise_step(&m, &s, 20, &sched, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn vanishing_beta_keeps_state() {
        let sched = NoiseSchedule::linear(10, 1e-9, 1e-9).unwrap();
        let s = blobs(1, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = denoise_step(&ZeroPredictor, &s, 4, &sched, &mut rng).unwrap();
        for (a, b) in out.data().iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn strength_zero_is_identity() {
        let sched = NoiseSchedule::scaled_default(50).unwrap();
        let m = tiny_model(2);
        let src = blobs(1, 8, 6).slice_outer(0).unwrap();
        let cfg = GeneratorConfig {
            strength: 0.0,
            seed: 9,
            schedule: &sched,
        };
        assert!(img2img_generate(&m, &src, &cfg).unwrap().bit_eq(&src));
        let bad = GeneratorConfig { strength: 1.5, ..cfg };
        assert!(img2img_generate(&m, &src, &bad).is_err());
    }

    #[test]
    fn generation_is_seed_deterministic_and_batch_independent() {
        let sched = NoiseSchedule::scaled_default(50).unwrap();
        let m = tiny_model(3);
        let srcs = blobs(3, 8, 7);
        let items: Vec<Tensor> = (0..3).map(|i| srcs.slice_outer(i).unwrap()).collect();
        let refs: Vec<&Tensor> = items.iter().collect();
        let batch = img2img_generate_batch(&m, &refs, &[10, 11, 12], 0.3, &sched).unwrap();
        for (i, item) in items.iter().enumerate() {
            let cfg = GeneratorConfig {
                strength: 0.3,
                seed: 10 + i as u64,
                schedule: &sched,
            };
            let single = img2img_generate(&m, item, &cfg).unwrap();
            let again = img2img_generate(&m, item, &cfg).unwrap();
            assert!(single.bit_eq(&again));
            assert!(single.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let diff = single.mean_sq_dist(&batch[i]).unwrap();
            assert!(diff < 1e-10, "item {i} batch mismatch {diff}");
        }
    }

    #[test]
    fn full_strength_start_is_near_pure_noise() {
        let sched = NoiseSchedule::scaled_default(200).unwrap();
        let src = blobs(1, 32, 8).slice_outer(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let s = img2img_start_state(&src, 1.0, &sched, &mut rng).unwrap().unwrap();
        let n = s.numel() as f64;
        let mean = s.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = s.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn short_training_beats_zero_predictor() {
        let sched = NoiseSchedule::scaled_default(50).unwrap();
        let data = blobs(32, 8, 10);
        let mut m = tiny_model(4);
        let opts = DiffusionTrainOptions {
            steps: 120,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 1,
        };
        let losses = train_denoiser(&mut m, &data, &sched, &opts).unwrap();
        assert_eq!(losses.len(), 120);
        let held = blobs(16, 8, 99);
        let trained = evaluate_loss(&m, &held, &sched, 5).unwrap();
        let zero = evaluate_loss(&ZeroPredictor, &held, &sched, 5).unwrap();
        assert!(trained < zero, "trained {trained} vs zero {zero}");
    }
}
