use crate::error::{Error, Result};
use crate::nn::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Method {
    pub fn adam() -> Self {
        Method::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer state.
///
/// Gradients are cleared (set to `None`) after every successful step, so
/// stepping again without a fresh backward pass is a missing-gradient error.
#[derive(Clone, Debug)]
pub struct Optimizer {
    method: Method,
    learning_rate: f32,
    step_count: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(method: Method, learning_rate: f32) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be a non-negative finite number, got {learning_rate}"
            )));
        }
        Ok(Optimizer {
            method,
            learning_rate,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f32) -> Result<Self> {
        Self::new(Method::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f32) -> Result<Self> {
        Self::new(Method::adam(), learning_rate)
    }

    pub fn learning_rate(&self) -> f32 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f32) {
        self.learning_rate = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        if let Some((_, name, _)) = params
            .iter()
            .find(|(_, _, t)| t.requires_grad() && t.grad().is_none())
        {
            return Err(Error::MissingGrad(name.to_string()));
        }
        if self.first.is_empty() && matches!(self.method, Method::Adam { .. }) {
            self.first = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        for (id, _, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let grad = t.grad().map(<[f32]>::to_vec).unwrap_or_default();
            match self.method {
                Method::Sgd => {
                    t.data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .for_each(|(p, g)| *p -= lr * g);
                }
                Method::Adam { beta1, beta2, eps } => {
                    let m = &mut self.first[id.index()];
                    let v = &mut self.second[id.index()];
                    let bc1 = 1.0 - beta1.powi(self.step_count as i32);
                    let bc2 = 1.0 - beta2.powi(self.step_count as i32);
                    for (((p, &g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            t.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Tape, Tensor};

    fn one(value: f32) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("p", Tensor::new([1], vec![value]).unwrap().with_requires_grad(true))
            .unwrap();
        p
    }

    #[test]
    fn sgd_definition() {
        let mut p = one(1.0);
        p.iter_mut().next().unwrap().2.accumulate_grad(&[1.0]).unwrap();
        Optimizer::sgd(0.1).unwrap().step(&mut p).unwrap();
        assert!((p.by_name("p").unwrap().data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        for method in [Method::Sgd, Method::adam()] {
            let mut p = one(1.5);
            let mut opt = Optimizer::new(method, 0.3).unwrap();
            for _ in 0..3 {
                p.iter_mut().next().unwrap().2.accumulate_grad(&[0.0]).unwrap();
                opt.step(&mut p).unwrap();
            }
            assert_eq!(p.by_name("p").unwrap().data()[0], 1.5);
            assert_eq!(opt.step_count(), 3);
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = one(1.0);
        let err = Optimizer::sgd(0.1).unwrap().step(&mut p).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "p"));
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = (p - 3)^2, p_{n+1} - 3 = 0.8 (p_n - 3)  ->  |p_200 - 3| = 3 * 0.8^200
        let mut p = one(0.0);
        let mut opt = Optimizer::sgd(0.1).unwrap();
        let id = p.id_of("p").unwrap();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let w = tape.param(&p, id);
            let c = tape.constant(Tensor::new([1], vec![3.0]).unwrap());
            let d = tape.sub(w, c).unwrap();
            let sq = tape.square(d);
            let loss = tape.sum(sq);
            tape.backward(loss, &mut p).unwrap();
            opt.step(&mut p).unwrap();
        }
        assert!((p.get(id).data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for method in [Method::Sgd, Method::adam()] {
            let mut p = ModelParams::new();
            p.insert("a", Tensor::randn([4, 3], &mut rng).with_requires_grad(true))
                .unwrap();
            let before = p.clone();
            let mut opt = Optimizer::new(method, 0.0).unwrap();
            for _ in 0..5 {
                let g = Tensor::randn([12], &mut rng);
                p.iter_mut().next().unwrap().2.accumulate_grad(g.data()).unwrap();
                opt.step(&mut p).unwrap();
            }
            assert!(p.by_name("a").unwrap().bit_eq(before.by_name("a").unwrap()));
        }
    }
}
