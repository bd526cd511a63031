use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    apply_buffer_updates, BatchNorm2d, ByteReader, Conv2d, Mode, ModelParams, Tape, Tensor, Var,
};

const EMBEDDER_MAGIC: &[u8; 4] = b"MDEM";
const EMBEDDER_VERSION: u32 = 1;

/// Maps a batch of images `[B,C,H,W]` to embeddings `[B,D]`.
pub trait Embedder {
    fn embed(&self, tape: &mut Tape, images: Var, mode: Mode) -> Result<Var>;

    fn params(&self) -> &ModelParams;

    /// Eval-mode embeddings of `images`, computed in chunks of `chunk` images
    /// so results do not depend on how callers batch their requests.
    fn embed_eval(&self, images: &[&Tensor]) -> Result<Vec<Vec<f32>>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(chunk)?);
            let e = self.embed(&mut tape, x, Mode::Eval)?;
            let v = tape.value(e);
            let d = v.shape()[1];
            out.extend(v.data().chunks_exact(d).map(<[f32]>::to_vec));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Four blocks of conv3x3 -> batch-norm -> ReLU -> max-pool 2x2, flattened.
#[derive(Clone, Debug)]
pub struct Conv4 {
    params: ModelParams,
    blocks: Vec<Block>,
    image_shape: [usize; 3],
    width: usize,
}

impl Conv4 {
    pub fn new(image_shape: [usize; 3], width: usize, seed: u64) -> Result<Self> {
        let [c, h, w] = image_shape;
        if h < 16 || w < 16 {
            return Err(Error::Config(format!(
                "Conv-4 needs images of at least 16x16, got {h}x{w}"
            )));
        }
        if width == 0 {
            return Err(Error::Config("Conv-4 width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        let mut blocks = Vec::with_capacity(4);
        let mut in_ch = c;
        for i in 0..4 {
            let conv = Conv2d::new(&mut params, &format!("block{i}.conv"), in_ch, width, 3, 1, 1, &mut rng)?;
            let bn = BatchNorm2d::new(&mut params, &format!("block{i}.bn"), width)?;
            blocks.push(Block { conv, bn });
            in_ch = width;
        }
        Ok(Conv4 {
            params,
            blocks,
            image_shape,
            width,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn embed_dim(&self) -> usize {
        let [_, h, w] = self.image_shape;
        self.width * (h >> 4) * (w >> 4)
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn momentum(&self) -> f32 {
        self.blocks[0].bn.momentum
    }

    /// Folds the batch statistics recorded on `tape` into the running buffers.
    pub fn commit_batch_stats(&mut self, tape: &mut Tape) {
        let m = self.momentum();
        apply_buffer_updates(tape, &mut self.params, m);
    }

    /// `"MDEM" | version u32 | C u32 | H u32 | W u32 | width u32 | MDMC...`
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDER_MAGIC);
        out.extend_from_slice(&EMBEDDER_VERSION.to_le_bytes());
        for d in self.image_shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.params.to_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != EMBEDDER_MAGIC {
            return Err(Error::Format("embedder checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != EMBEDDER_VERSION {
            return Err(Error::Format(format!(
                "embedder checkpoint: unsupported version {version}"
            )));
        }
        let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let width = r.u32()? as usize;
        let stored = ModelParams::from_bytes(r.rest())?;
        let mut model = Conv4::new(shape, width, 0)
            .map_err(|e| Error::Format(format!("embedder checkpoint architecture: {e}")))?;
        model.params.load_values(&stored)?;
        Ok(model)
    }
}

impl Embedder for Conv4 {
    fn embed(&self, tape: &mut Tape, images: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(images);
        if s.len() != 4 || s[1..] != self.image_shape {
            return Err(Error::Shape(format!(
                "Conv-4 expects [B,{},{},{}], got {:?}",
                self.image_shape[0], self.image_shape[1], self.image_shape[2], s
            )));
        }
        let mut x = images;
        for b in &self.blocks {
            x = b.conv.forward(tape, &self.params, x)?;
            x = b.bn.forward(tape, &self.params, x, mode)?;
            x = tape.relu(x);
            x = tape.max_pool2(x)?;
        }
        tape.flatten(x)
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }
}
