use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Per-timestep noising coefficients, indexed `0..T`.
///
/// Timestep index `t` here is the usual `t+1` of the one-based notation:
/// `alpha_bar[0]` is the signal fraction after a single noising step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule `beta[t] = beta_min + (beta_max - beta_min) * t / (T - 1)`.
    pub fn linear(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta: Vec<f64> = (0..timesteps)
            .map(|t| {
                if timesteps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * t as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            beta_min,
            beta_max,
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Linear schedule whose `1e-4 -> 0.02` endpoints are stretched by `1000 / T`,
    /// so short chains still end close to pure noise.
    pub fn scaled_default(timesteps: usize) -> Result<Self> {
        let scale = 1000.0 / timesteps.max(1) as f64;
        Self::linear(timesteps, 1e-4 * scale, (0.02 * scale).min(0.999))
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::OutOfRange {
                what: "timestep",
                index: t,
                len: self.timesteps(),
            });
        }
        Ok(())
    }

    /// Image-to-image start step for `strength`: `round(strength * T)`.
    pub fn start_step(&self, strength: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::Config(format!(
                "strength must lie in [0, 1], got {strength}"
            )));
        }
        Ok((strength * self.timesteps() as f64).round() as usize)
    }
}

/// Closed-form forward noising `sqrt(ab_t) * s0 + sqrt(1 - ab_t) * noise`.
pub fn forward_diffuse(
    s0: &Tensor,
    t: usize,
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    if s0.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} differs from sample shape {:?}",
            noise.shape(),
            s0.shape()
        )));
    }
    let ab = schedule.alpha_bar()[t];
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let data = s0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Tensor::new(s0.shape().to_vec(), data)
}

/// Same as [`forward_diffuse`] with a per-item timestep over a `[B, ...]` batch.
pub(crate) fn forward_diffuse_batch(
    s0: &Tensor,
    timesteps: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let b = s0.shape()[0];
    if timesteps.len() != b || noise.shape() != s0.shape() {
        return Err(Error::Shape("forward_diffuse_batch: mismatched batch".into()));
    }
    let inner = s0.numel() / b.max(1);
    let mut data = Vec::with_capacity(s0.numel());
    for (i, &t) in timesteps.iter().enumerate() {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar()[t];
        let (a, c) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let xs = &s0.data()[i * inner..(i + 1) * inner];
        let es = &noise.data()[i * inner..(i + 1) * inner];
        data.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + c * e));
    }
    Tensor::new(s0.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.beta(), &[0.1]);
        assert!((s.alpha_bar()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn two_hundred_steps_mostly_destroy_signal() {
        // direct product of (1 - beta_t), independent of the scan above
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for t in 0..200 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 199.0);
        }
        assert!((s.alpha_bar()[199] - prod).abs() < 1e-12);
        assert!(prod < 0.15);
        assert!(s.alpha_bar()[199] < 0.15);
    }

    #[test]
    fn alpha_bar_is_cumulative_product_and_decreasing() {
        for (t, lo, hi) in [(50, 1e-3, 1e-3), (200, 5e-4, 0.1), (7, 0.2, 0.9)] {
            let s = NoiseSchedule::linear(t, lo, hi).unwrap();
            let mut prod = 1.0;
            for i in 0..t {
                assert!(s.beta()[i] > 0.0 && s.beta()[i] < 1.0);
                assert_eq!(s.alpha()[i], 1.0 - s.beta()[i]);
                prod *= s.alpha()[i];
                assert!((s.alpha_bar()[i] - prod).abs() < 1e-6);
                if i > 0 {
                    assert!(s.alpha_bar()[i] < s.alpha_bar()[i - 1]);
                    assert!(s.beta()[i] >= s.beta()[i - 1]);
                }
            }
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn start_step_rounds() {
        let s = NoiseSchedule::scaled_default(200).unwrap();
        assert_eq!(s.start_step(0.0).unwrap(), 0);
        assert_eq!(s.start_step(0.05).unwrap(), 10);
        assert_eq!(s.start_step(0.2).unwrap(), 40);
        assert_eq!(s.start_step(1.0).unwrap(), 200);
        assert!(s.start_step(1.01).is_err());
        assert!(s.start_step(-0.1).is_err());
    }

    #[test]
    fn forward_diffuse_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s0 = Tensor::randn([3, 4, 4], &mut rng);
        let noise = Tensor::randn([3, 4, 4], &mut rng);
        let tiny = NoiseSchedule::linear(10, 1e-8, 1e-8).unwrap();
        let out = forward_diffuse(&s0, 0, &noise, &tiny).unwrap();
        for (a, b) in out.data().iter().zip(s0.data()) {
            assert!((a - b).abs() < 1e-3);
        }

        let sched = NoiseSchedule::scaled_default(200).unwrap();
        let zero = Tensor::zeros([3, 4, 4]);
        let out = forward_diffuse(&zero, 57, &noise, &sched).unwrap();
        let c = (1.0 - sched.alpha_bar()[57]).sqrt() as f32;
        for (a, e) in out.data().iter().zip(noise.data()) {
            assert_eq!(*a, c * e);
        }
        assert!(forward_diffuse(&s0, 200, &noise, &sched).is_err());
    }

    #[test]
    fn closed_form_matches_iterated_noising() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let sched = NoiseSchedule::scaled_default(200).unwrap();
        let n = 10_000;
        let x0 = 0.7f32;
        let t = 9; // ten single steps
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s0 = Tensor::full([n], x0);
        let noise = Tensor::randn([n], &mut rng);
        let closed: Vec<f64> = forward_diffuse(&s0, t, &noise, &sched)
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let iterated: Vec<f64> = (0..n)
            .map(|_| {
                let mut x = x0 as f64;
                for i in 0..=t {
                    let e: f64 = rng.sample(StandardNormal);
                    x = sched.alpha()[i].sqrt() * x + sched.beta()[i].sqrt() * e;
                }
                x
            })
            .collect();
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var)
        };
        let (m1, v1) = stats(&closed);
        let (m2, v2) = stats(&iterated);
        let nf = n as f64;
        let se_mean = (v1 / nf + v2 / nf).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se_mean, "means {m1} vs {m2}");
        let se_var = ((2.0 / (nf - 1.0)) * (v1 * v1 + v2 * v2)).sqrt();
        assert!((v1 - v2).abs() < 3.0 * se_var, "vars {v1} vs {v2}");
        let expected = 1.0 - sched.alpha_bar()[t];
        let se_one = (2.0 / (nf - 1.0)).sqrt() * expected;
        assert!((v1 - expected).abs() < 3.0 * se_one);
    }
}
