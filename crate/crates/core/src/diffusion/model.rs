use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{ByteReader, Conv2d, Linear, ModelParams, Tape, Tensor, Var};

const DENOISER_MAGIC: &[u8; 4] = b"MDDN";
const DENOISER_VERSION: u32 = 1;

/// Anything that predicts the noise component of `x_t` at per-item timesteps.
pub trait NoisePredictor {
    fn predict(&self, tape: &mut Tape, x: Var, timesteps: &[usize]) -> Result<Var>;

    /// Inference without gradient bookkeeping.
    fn predict_eval(&self, x: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.predict(&mut tape, xv, timesteps)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub widths: [usize; 3],
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_channels: 3,
            widths: [32, 64, 64],
            time_embed_dim: 32,
        }
    }
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; timesteps.len() * dim];
    for (row, &t) in data.chunks_exact_mut(dim).zip(timesteps) {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.sin() as f32;
            row[half + i] = arg.cos() as f32;
        }
    }
    Tensor::new([timesteps.len(), dim], data).expect("embedding shape")
}

/// Three-stage convolutional encoder/decoder with additive skips and a
/// per-stage time-embedding bias.
///
/// ```text
/// h1 = relu(conv(x)        + t1)   full res,  w0
/// h2 = relu(conv_s2(h1)    + t2)   1/2 res,   w1
/// h3 = relu(conv_s2(h2)    + t3)   1/4 res,   w2
/// d3 = relu(conv(h3)       + t4)   1/4 res,   w1
/// d2 = relu(conv(up(d3) + h2))     1/2 res,   w0
/// out = conv(up(d2) + h1)          full res,  C
/// ```
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ModelParams,
    time_fc: Linear,
    time_proj: [Linear; 4],
    enc: [Conv2d; 3],
    mid: Conv2d,
    dec: Conv2d,
    out: Conv2d,
    trained_steps: u64,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let [w0, w1, w2] = config.widths;
        if config.widths.contains(&0) || config.time_embed_dim < 2 || config.image_channels == 0 {
            return Err(Error::Config(format!("invalid denoiser config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let d = config.time_embed_dim;
        let hidden = 2 * d;
        let time_fc = Linear::new(&mut p, "time.fc", d, hidden, &mut rng)?;
        let time_proj = [
            Linear::new(&mut p, "time.enc1", hidden, w0, &mut rng)?,
            Linear::new(&mut p, "time.enc2", hidden, w1, &mut rng)?,
            Linear::new(&mut p, "time.enc3", hidden, w2, &mut rng)?,
            Linear::new(&mut p, "time.mid", hidden, w1, &mut rng)?,
        ];
        let c = config.image_channels;
        let enc = [
            Conv2d::new(&mut p, "enc1", c, w0, 3, 1, 1, &mut rng)?,
            Conv2d::new(&mut p, "enc2", w0, w1, 3, 2, 1, &mut rng)?,
            Conv2d::new(&mut p, "enc3", w1, w2, 3, 2, 1, &mut rng)?,
        ];
        let mid = Conv2d::new(&mut p, "mid", w2, w1, 3, 1, 1, &mut rng)?;
        let dec = Conv2d::new(&mut p, "dec", w1, w0, 3, 1, 1, &mut rng)?;
        let out = Conv2d::new(&mut p, "out", w0, c, 3, 1, 1, &mut rng)?;
        Ok(DenoiserModel {
            config,
            params: p,
            time_fc,
            time_proj,
            enc,
            mid,
            dec,
            out,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Optimizer steps applied so far, carried through checkpoints.
    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub(crate) fn record_training(&mut self, steps: u64) {
        self.trained_steps += steps;
    }

    /// Checkpoint bytes: a header carrying the schedule and architecture,
    /// followed by the `MDMC` parameter block.
    ///
    /// ```text
    /// "MDDN" | version u32 | T u32 | beta_min f64 | beta_max f64
    ///        | channels u32 | time_embed_dim u32 | widths 3 x u32
    ///        | trained_steps u64 | MDMC...
    /// ```
    pub fn checkpoint_bytes(&self, schedule: &NoiseSchedule) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DENOISER_MAGIC);
        out.extend_from_slice(&DENOISER_VERSION.to_le_bytes());
        out.extend_from_slice(&(schedule.timesteps() as u32).to_le_bytes());
        out.extend_from_slice(&schedule.beta_min().to_le_bytes());
        out.extend_from_slice(&schedule.beta_max().to_le_bytes());
        out.extend_from_slice(&(self.config.image_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.time_embed_dim as u32).to_le_bytes());
        for w in self.config.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.trained_steps.to_le_bytes());
        out.extend_from_slice(&self.params.to_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, NoiseSchedule)> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != DENOISER_MAGIC {
            return Err(Error::Format("denoiser checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != DENOISER_VERSION {
            return Err(Error::Format(format!(
                "denoiser checkpoint: unsupported version {version}"
            )));
        }
        let t = r.u32()? as usize;
        let beta_min = r.f64()?;
        let beta_max = r.f64()?;
        let schedule = NoiseSchedule::linear(t, beta_min, beta_max)
            .map_err(|e| Error::Format(format!("denoiser checkpoint schedule: {e}")))?;
        let image_channels = r.u32()? as usize;
        let time_embed_dim = r.u32()? as usize;
        let widths = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let config = DenoiserConfig {
            image_channels,
            widths,
            time_embed_dim,
        };
        let trained_steps = r.u64()?;
        let stored = ModelParams::from_bytes(r.rest())?;
        let mut model = DenoiserModel::new(config, 0)
            .map_err(|e| Error::Format(format!("denoiser checkpoint architecture: {e}")))?;
        model.params.load_values(&stored)?;
        model.trained_steps = trained_steps;
        Ok((model, schedule))
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict(&self, tape: &mut Tape, x: Var, timesteps: &[usize]) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.image_channels {
            return Err(Error::Shape(format!(
                "denoiser expects [B,{},H,W], got {s:?}",
                self.config.image_channels
            )));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::Shape(format!(
                "denoiser needs spatial size divisible by 4, got {}x{}",
                s[2], s[3]
            )));
        }
        if timesteps.len() != s[0] {
            return Err(Error::dim("timestep count", s[0], timesteps.len()));
        }
        let p = &self.params;
        let emb = tape.constant(timestep_embedding(timesteps, self.config.time_embed_dim));
        let temb = self.time_fc.forward(tape, p, emb)?;
        let temb = tape.relu(temb);
        let mut tb = Vec::with_capacity(4);
        for proj in &self.time_proj {
            tb.push(proj.forward(tape, p, temb)?);
        }

        let h1 = self.enc[0].forward(tape, p, x)?;
        let h1 = tape.add_channel(h1, tb[0])?;
        let h1 = tape.relu(h1);
        let h2 = self.enc[1].forward(tape, p, h1)?;
        let h2 = tape.add_channel(h2, tb[1])?;
        let h2 = tape.relu(h2);
        let h3 = self.enc[2].forward(tape, p, h2)?;
        let h3 = tape.add_channel(h3, tb[2])?;
        let h3 = tape.relu(h3);

        let d3 = self.mid.forward(tape, p, h3)?;
        let d3 = tape.add_channel(d3, tb[3])?;
        let d3 = tape.relu(d3);
        let u2 = tape.upsample2(d3)?;
        let u2 = tape.add(u2, h2)?;
        let d2 = self.dec.forward(tape, p, u2)?;
        let d2 = tape.relu(d2);
        let u1 = tape.upsample2(d2)?;
        let u1 = tape.add(u1, h1)?;
        self.out.forward(tape, p, u1)
    }
}
