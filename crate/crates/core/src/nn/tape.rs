//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape by copy through [`Tape::param`]; [`Tape::backward`] walks the tape
//! in reverse and accumulates gradients into the owning [`ModelParams`].
//! A tape can be differentiated once unless [`Tape::retain_graph`] is set.

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeom};
use crate::nn::{ModelParams, ParamId, Tensor};

pub const BN_EPS: f32 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    /// `x [B,C,...] + bias [B,C]` broadcast over trailing axes.
    AddChannel { x: Var, bias: Var },
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Reshape(Var),
    SpatialMean(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    SumSquares(Var),
    RowSelect { x: Var, rows: Vec<usize> },
    GroupMean { x: Var, groups: Vec<Vec<usize>> },
    SqDist { a: Var, b: Var },
    LogSoftmax(Var),
    MaskedNll {
        logp: Var,
        targets: Vec<usize>,
        mask: Vec<f32>,
        denom: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Running-statistics update produced by a training-mode batch-norm.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    retain: bool,
    buffer_updates: Vec<BufferUpdate>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps the tape differentiable after [`Tape::backward`].
    pub fn retain_graph(&mut self, retain: bool) {
        self.retain = retain;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Records a parameter; differentiable iff the parameter requires grad.
    pub fn param(&mut self, params: &ModelParams, id: ParamId) -> Var {
        let src = params.get(id);
        let needs = src.requires_grad();
        let value = Tensor::new(src.shape().to_vec(), src.data().to_vec())
            .expect("parameter tensor is well formed");
        self.push(value, Op::Param(id), needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() < 2 || bs.len() != 2 || bs[0] != xs[0] || bs[1] != xs[1] {
            return Err(Error::Shape(format!(
                "add_channel: bias {bs:?} does not broadcast over {xs:?}"
            )));
        }
        let inner: usize = xs[2..].iter().product();
        let mut data = self.value(x).data().to_vec();
        let bv = self.value(bias).data();
        for (i, chunk) in data.chunks_exact_mut(inner).enumerate() {
            let b = bv[i];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::new(xs, data)?, Op::AddChannel { x, bias }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("input rank", 4, xs.len()));
        }
        if ws.len() != 4 {
            return Err(Error::dim("weight rank", 4, ws.len()));
        }
        if ws[1] != xs[1] {
            return Err(Error::dim("channel axis", ws[1], xs[1]));
        }
        if ws[2] != ws[3] {
            return Err(Error::dim("kernel width", ws[2], ws[3]));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be at least 1".into()));
        }
        let k = ws[2];
        if k > xs[2] + 2 * padding {
            return Err(Error::dim("height axis", k, xs[2] + 2 * padding));
        }
        if k > xs[3] + 2 * padding {
            return Err(Error::dim("width axis", k, xs[3] + 2 * padding));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != ws[0] {
                return Err(Error::dim("bias axis", ws[0], bs.iter().product()));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kernel: k,
            stride,
            padding,
        };
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(
            vec![geom.batch, geom.out_ch, geom.out_height(), geom.out_width()],
            out,
        )?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let cols = if ng { cols } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            ng,
        ))
    }

    /// `x [B,I] * w[O,I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim("feature axis", ws[1], xs[1]));
        }
        let (batch, inp, outp) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; batch * outp];
        kernels::sgemm(
            batch,
            inp,
            outp,
            1.0,
            self.value(x).data(),
            (inp as isize, 1),
            self.value(w).data(),
            (1, inp as isize),
            0.0,
            &mut out,
            (outp as isize, 1),
        );
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != outp {
                return Err(Error::dim("bias axis", outp, bs.iter().product()));
            }
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(outp) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new([batch, outp], out)?, Op::Linear { x, w, b }, ng))
    }

    /// Batch normalization over `[B,C,...]`. With `running == None` the batch
    /// statistics normalize the input (training mode) and a running-statistics
    /// update is queued; otherwise `running = (mean, var)` is used (eval mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
        buffers: Option<(ParamId, ParamId)>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("batch_norm: input {xs:?}")));
        }
        let (batch, ch) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [ch] {
                return Err(Error::dim(format!("batch_norm {name}"), ch, self.value(v).numel()));
            }
        }
        let batch_stats = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                if batch * spatial < 2 {
                    return Err(Error::Shape(
                        "batch_norm: training mode needs more than one value per channel".into(),
                    ));
                }
                let (m, v) = kernels::channel_stats(self.value(x).data(), batch, ch, spatial);
                if let Some((mean_id, var_id)) = buffers {
                    let n = (batch * spatial) as f32;
                    self.buffer_updates.push(BufferUpdate {
                        mean_id,
                        var_id,
                        batch_mean: m.clone(),
                        batch_var: v.iter().map(|&v| v * n / (n - 1.0)).collect(),
                    });
                }
                (m, v)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for (i, ((src, h), o)) in xv
            .chunks_exact(spatial)
            .zip(xhat.chunks_exact_mut(spatial))
            .zip(out.chunks_exact_mut(spatial))
            .enumerate()
        {
            let c = i % ch;
            let (m, s, gc, bc) = (mean[c], inv_std[c], g[c], bt[c]);
            for ((&v, h), o) in src.iter().zip(h.iter_mut()).zip(o.iter_mut()) {
                *h = (v - m) * s;
                *o = gc * *h + bc;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        ))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::Shape(format!("max_pool2: input {xs:?}")));
        }
        let (out, argmax) =
            kernels::maxpool2_forward(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3]);
        let t = Tensor::new(vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, ng))
    }

    /// Nearest-neighbour 2x upsampling of `[B,C,H,W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("input rank", 4, xs.len()));
        }
        let out = kernels::upsample2_forward(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3]);
        let t = Tensor::new(vec![xs[0], xs[1], xs[2] * 2, xs[3] * 2], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Upsample2(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let b = *xs.first().ok_or_else(|| Error::Shape("flatten a scalar".into()))?;
        let rest = xs[1..].iter().product::<usize>();
        self.reshape(x, [b, rest])
    }

    /// `[B,C,H,W] -> [B,C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("input rank", 4, xs.len()));
        }
        let spatial = xs[2] * xs[3];
        let data = self
            .value(x)
            .data()
            .chunks_exact(spatial)
            .map(|c| c.iter().sum::<f32>() / spatial as f32)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new([xs[0], xs[1]], data)?, Op::SpatialMean(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|&v| v as f64).sum();
        let m = s / v.numel().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m as f32), Op::Mean(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(t, Op::Square(x), ng)
    }

    /// Scalar `sum(x^2)`.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s as f32), Op::SumSquares(x), ng)
    }

    /// Selects rows of a `[N,D]` matrix.
    pub fn row_select(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("input rank", 2, xs.len()));
        }
        let d = xs[1];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            if r >= xs[0] {
                return Err(Error::OutOfRange {
                    what: "row",
                    index: r,
                    len: xs[0],
                });
            }
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new([rows.len(), d], data)?,
            Op::RowSelect { x, rows },
            ng,
        ))
    }

    /// Mean of each group of rows of a `[N,D]` matrix, giving `[G,D]`.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("input rank", 2, xs.len()));
        }
        let d = xs[1];
        let src = self.value(x).data();
        let mut data = vec![0.0f32; groups.len() * d];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::Shape(format!("group_mean: group {g} is empty")));
            }
            let out = &mut data[g * d..(g + 1) * d];
            for &r in rows {
                if r >= xs[0] {
                    return Err(Error::OutOfRange {
                        what: "row",
                        index: r,
                        len: xs[0],
                    });
                }
                out.iter_mut()
                    .zip(&src[r * d..(r + 1) * d])
                    .for_each(|(o, v)| *o += v);
            }
            let inv = 1.0 / rows.len() as f32;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new([groups.len(), d], data)?,
            Op::GroupMean { x, groups },
            ng,
        ))
    }

    /// Pairwise squared Euclidean distances `[Q,D] x [P,D] -> [Q,P]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 {
            return Err(Error::Shape(format!("sq_dist: {as_:?} vs {bs:?}")));
        }
        if as_[1] != bs[1] {
            return Err(Error::dim("embedding axis", as_[1], bs[1]));
        }
        let (q, p, d) = (as_[0], bs[0], as_[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0f32; q * p];
        for i in 0..q {
            let ar = &av[i * d..(i + 1) * d];
            for j in 0..p {
                let br = &bv[j * d..(j + 1) * d];
                out[i * p + j] = ar
                    .iter()
                    .zip(br)
                    .map(|(x, y)| {
                        let t = x - y;
                        t * t
                    })
                    .sum();
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new([q, p], out)?, Op::SqDist { a, b }, ng))
    }

    /// Row-wise log-softmax of a `[N,K]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[1] == 0 {
            return Err(Error::Shape(format!("log_softmax: input {xs:?}")));
        }
        let k = xs[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|&v| ((v - m) as f64).exp()).sum::<f64>().ln() as f32;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::LogSoftmax(x), ng))
    }

    /// `-(1/denom) * sum_i mask_i * logp[i, target_i]`.
    pub fn masked_nll(
        &mut self,
        logp: Var,
        targets: Vec<usize>,
        mask: Vec<f32>,
        denom: f32,
    ) -> Result<Var> {
        let ls = self.shape(logp).to_vec();
        if ls.len() != 2 {
            return Err(Error::dim("log-prob rank", 2, ls.len()));
        }
        if targets.len() != ls[0] {
            return Err(Error::dim("target count", ls[0], targets.len()));
        }
        if mask.len() != ls[0] {
            return Err(Error::dim("mask length", ls[0], mask.len()));
        }
        if denom <= 0.0 {
            return Err(Error::Shape("masked_nll: denominator must be positive".into()));
        }
        let k = ls[1];
        let lv = self.value(logp).data();
        let mut acc = 0.0f64;
        for (i, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
            if t >= k {
                return Err(Error::OutOfRange {
                    what: "class",
                    index: t,
                    len: k,
                });
            }
            acc += m as f64 * lv[i * k + t] as f64;
        }
        let value = -(acc / denom as f64) as f32;
        let ng = self.ng(logp);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedNll {
                logp,
                targets,
                mask,
                denom,
            },
            ng,
        ))
    }

    /// Back-propagates from the scalar `loss`, accumulating gradients into
    /// every trainable parameter recorded on this tape.
    pub fn backward(&mut self, loss: Var, params: &mut ModelParams) -> Result<()> {
        if self.consumed {
            return Err(Error::Autograd(
                "backward called twice on the same tape; re-run forward or retain the graph"
                    .into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autograd(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Param(id) = self.nodes[idx].op {
                let p = params.get_mut(id);
                if p.requires_grad() {
                    p.accumulate_grad(&g)?;
                }
                continue;
            }
            for (parent, pg) in self.local_grads(idx, &g)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        if !self.retain {
            self.consumed = true;
        }
        Ok(())
    }

    /// Gradients of node `idx` with respect to its inputs, given its output gradient.
    fn local_grads(&self, idx: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| self.nodes[v.0].value.data();
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let mut res = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if ng(*a) {
                    res.push((*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()));
                }
                if ng(*b) {
                    res.push((*b, g.iter().zip(av).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(x, s) => res.push((*x, g.iter().map(|v| v * s).collect())),
            Op::AddChannel { x, bias } => {
                res.push((*x, g.to_vec()));
                if ng(*bias) {
                    let inner: usize = out.shape()[2..].iter().product();
                    res.push((
                        *bias,
                        g.chunks_exact(inner).map(|c| c.iter().sum()).collect(),
                    ));
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                res.push((
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let want = (ng(*x), ng(*w), b.is_some_and(ng));
                let grads = kernels::conv2d_backward(geom, g, cols, val(*w), want);
                if let Some(dx) = grads.d_input {
                    res.push((*x, dx));
                }
                if let Some(dw) = grads.d_weight {
                    res.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.d_bias) {
                    res.push((*b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (batch, inp) = (xs[0], xs[1]);
                let outp = out.shape()[1];
                if ng(*x) {
                    let mut dx = vec![0.0f32; batch * inp];
                    kernels::sgemm(
                        batch,
                        outp,
                        inp,
                        1.0,
                        g,
                        (outp as isize, 1),
                        val(*w),
                        (inp as isize, 1),
                        0.0,
                        &mut dx,
                        (inp as isize, 1),
                    );
                    res.push((*x, dx));
                }
                if ng(*w) {
                    let mut dw = vec![0.0f32; outp * inp];
                    kernels::sgemm(
                        outp,
                        batch,
                        inp,
                        1.0,
                        g,
                        (1, outp as isize),
                        val(*x),
                        (inp as isize, 1),
                        0.0,
                        &mut dw,
                        (inp as isize, 1),
                    );
                    res.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| ng(*b)) {
                    let mut db = vec![0.0f32; outp];
                    for row in g.chunks_exact(outp) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    res.push((b, db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = out.shape();
                let (batch, ch) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product::<usize>().max(1);
                let gm = val(*gamma);
                let mut dgamma = vec![0.0f64; ch];
                let mut dbeta = vec![0.0f64; ch];
                for (i, (gs, hs)) in g
                    .chunks_exact(spatial)
                    .zip(xhat.chunks_exact(spatial))
                    .enumerate()
                {
                    let c = i % ch;
                    dgamma[c] += gs.iter().zip(hs).map(|(a, b)| a * b).sum::<f32>() as f64;
                    dbeta[c] += gs.iter().sum::<f32>() as f64;
                }
                if ng(*x) {
                    let mut dx = vec![0.0f32; g.len()];
                    let n = (batch * spatial) as f32;
                    for (i, ((d, gs), hs)) in dx
                        .chunks_exact_mut(spatial)
                        .zip(g.chunks_exact(spatial))
                        .zip(xhat.chunks_exact(spatial))
                        .enumerate()
                    {
                        let c = i % ch;
                        if *batch_stats {
                            let k = gm[c] * inv_std[c] / n;
                            let (sb, sg) = (dbeta[c] as f32, dgamma[c] as f32);
                            for ((d, &gv), &h) in d.iter_mut().zip(gs).zip(hs) {
                                *d = k * (n * gv - sb - h * sg);
                            }
                        } else {
                            let k = gm[c] * inv_std[c];
                            for (d, &gv) in d.iter_mut().zip(gs) {
                                *d = gv * k;
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                if ng(*gamma) {
                    res.push((*gamma, dgamma.iter().map(|&v| v as f32).collect()));
                }
                if ng(*beta) {
                    res.push((*beta, dbeta.iter().map(|&v| v as f32).collect()));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0f32; self.nodes[x.0].value.numel()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    dx[a as usize] += gv;
                }
                res.push((*x, dx));
            }
            Op::Upsample2(x) => {
                let xs = self.nodes[x.0].value.shape();
                res.push((
                    *x,
                    kernels::upsample2_backward(g, xs[0] * xs[1], xs[2], xs[3]),
                ));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::SpatialMean(x) => {
                let xs = self.nodes[x.0].value.shape();
                let spatial = xs[2] * xs[3];
                let inv = 1.0 / spatial as f32;
                let mut dx = Vec::with_capacity(g.len() * spatial);
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * inv, spatial));
                }
                res.push((*x, dx));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.nodes[x.0].value.numel()])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                res.push((*x, vec![g[0] / n as f32; n]));
            }
            Op::Square(x) => res.push((
                *x,
                g.iter().zip(val(*x)).map(|(g, v)| 2.0 * g * v).collect(),
            )),
            Op::SumSquares(x) => {
                res.push((*x, val(*x).iter().map(|v| 2.0 * g[0] * v).collect()))
            }
            Op::RowSelect { x, rows } => {
                let xs = self.nodes[x.0].value.shape();
                let d = xs[1];
                let mut dx = vec![0.0f32; xs[0] * d];
                for (i, &r) in rows.iter().enumerate() {
                    dx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(a, v)| *a += v);
                }
                res.push((*x, dx));
            }
            Op::GroupMean { x, groups } => {
                let xs = self.nodes[x.0].value.shape();
                let d = xs[1];
                let mut dx = vec![0.0f32; xs[0] * d];
                for (gi, rows) in groups.iter().enumerate() {
                    let inv = 1.0 / rows.len() as f32;
                    for &r in rows {
                        dx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&g[gi * d..(gi + 1) * d])
                            .for_each(|(a, v)| *a += v * inv);
                    }
                }
                res.push((*x, dx));
            }
            Op::SqDist { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let s = out.shape();
                let (q, p) = (s[0], s[1]);
                let d = self.nodes[a.0].value.shape()[1];
                let mut da = vec![0.0f32; q * d];
                let mut db = vec![0.0f32; p * d];
                for i in 0..q {
                    for j in 0..p {
                        let gij = 2.0 * g[i * p + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = gij * (av[i * d + k] - bv[j * d + k]);
                            da[i * d + k] += diff;
                            db[j * d + k] -= diff;
                        }
                    }
                }
                if ng(*a) {
                    res.push((*a, da));
                }
                if ng(*b) {
                    res.push((*b, db));
                }
            }
            Op::LogSoftmax(x) => {
                let k = out.shape()[1];
                let mut dx = vec![0.0f32; g.len()];
                for ((drow, grow), yrow) in dx
                    .chunks_exact_mut(k)
                    .zip(g.chunks_exact(k))
                    .zip(out.data().chunks_exact(k))
                {
                    let gs: f32 = grow.iter().sum();
                    for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = gv - y.exp() * gs;
                    }
                }
                res.push((*x, dx));
            }
            Op::MaskedNll {
                logp,
                targets,
                mask,
                denom,
            } => {
                let k = self.nodes[logp.0].value.shape()[1];
                let mut dl = vec![0.0f32; targets.len() * k];
                for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    dl[i * k + t] = -g[0] * m / denom;
                }
                res.push((*logp, dl));
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(values: Vec<f32>) -> (ModelParams, ParamId) {
        let mut p = ModelParams::new();
        let n = values.len();
        let id = p
            .insert("w", Tensor::new([n], values).unwrap().with_requires_grad(true))
            .unwrap();
        (p, id)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let (mut p, id) = single(vec![0.3, -2.0, 5.0]);
        let mut tape = Tape::new();
        let w = tape.param(&p, id);
        let loss = tape.sum(w);
        tape.backward(loss, &mut p).unwrap();
        assert_eq!(p.get(id).grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let (mut p, id) = single(vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let w = tape.param(&p, id);
        let sq = tape.square(w);
        let loss = tape.sum(sq);
        tape.backward(loss, &mut p).unwrap();
        assert_eq!(p.get(id).grad().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (mut p, id) = single(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let w = tape.param(&p, id);
        assert!(matches!(tape.backward(w, &mut p), Err(Error::Autograd(_))));
    }

    #[test]
    fn second_backward_needs_retain() {
        let (mut p, id) = single(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let w = tape.param(&p, id);
        let loss = tape.sum(w);
        tape.backward(loss, &mut p).unwrap();
        assert!(tape.backward(loss, &mut p).is_err());

        let mut tape = Tape::new();
        tape.retain_graph(true);
        let w = tape.param(&p, id);
        let loss = tape.sum(w);
        p.zero_grads();
        tape.backward(loss, &mut p).unwrap();
        tape.backward(loss, &mut p).unwrap();
        assert_eq!(p.get(id).grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_parameter_gets_no_grad() {
        let (mut p, id) = single(vec![1.0, 2.0]);
        p.get_mut(id).set_requires_grad(false);
        let mut tape = Tape::new();
        let w = tape.param(&p, id);
        let loss = tape.sum(w);
        tape.backward(loss, &mut p).unwrap();
        assert!(p.get(id).grad().is_none());
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_of_zeros_is_zero() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 3, 6, 5]));
        let w = tape.constant(Tensor::randn([4, 3, 3, 3], &mut rng));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_errors_name_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");
        let w = tape.constant(Tensor::zeros([1, 2, 5, 5]));
        let err = tape.conv2d(x, w, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("height axis"), "{err}");
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 50.0]).unwrap());
        let y = tape.log_softmax(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let s: f32 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
