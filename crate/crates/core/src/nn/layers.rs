use rand::Rng;

use crate::error::Result;
use crate::nn::{ModelParams, ParamId, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// He-uniform bound `sqrt(6 / fan_in)`.
fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ModelParams,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = he_bound(in_ch * kernel * kernel);
        let w = Tensor::uniform([out_ch, in_ch, kernel, kernel], -bound, bound, rng);
        let weight = params.insert(format!("{name}.weight"), w.with_requires_grad(true))?;
        let bias = params.insert(
            format!("{name}.bias"),
            Tensor::zeros([out_ch]).with_requires_grad(true),
        )?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ModelParams,
        name: &str,
        inp: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = he_bound(inp);
        let w = Tensor::uniform([out, inp], -bound, bound, rng);
        let weight = params.insert(format!("{name}.weight"), w.with_requires_grad(true))?;
        let bias = params.insert(
            format!("{name}.bias"),
            Tensor::zeros([out]).with_requires_grad(true),
        )?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// Batch normalization over channels with running statistics stored as
/// non-trainable parameters `<name>.running_mean` / `<name>.running_var`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(params: &mut ModelParams, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: params.insert(
                format!("{name}.weight"),
                Tensor::full([channels], 1.0).with_requires_grad(true),
            )?,
            beta: params.insert(
                format!("{name}.bias"),
                Tensor::zeros([channels]).with_requires_grad(true),
            )?,
            running_mean: params.insert(format!("{name}.running_mean"), Tensor::zeros([channels]))?,
            running_var: params.insert(
                format!("{name}.running_var"),
                Tensor::full([channels], 1.0),
            )?,
            momentum: 0.1,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        match mode {
            Mode::Train => tape.batch_norm(
                x,
                g,
                b,
                None,
                Some((self.running_mean, self.running_var)),
            ),
            Mode::Eval => tape.batch_norm(
                x,
                g,
                b,
                Some((
                    params.get(self.running_mean).data(),
                    params.get(self.running_var).data(),
                )),
                None,
            ),
        }
    }
}

/// Folds queued batch-norm statistics into the running buffers.
pub fn apply_buffer_updates(tape: &mut Tape, params: &mut ModelParams, momentum: f32) {
    for u in tape.take_buffer_updates() {
        for (id, batch) in [(u.mean_id, &u.batch_mean), (u.var_id, &u.batch_var)] {
            params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(batch)
                .for_each(|(r, &b)| *r = (1.0 - momentum) * *r + momentum * b);
        }
    }
}
