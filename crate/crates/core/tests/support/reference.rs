//! Plain f64 re-implementations of the networks and losses, written from the
//! definitions without sharing code with the library.

use metadm::nn::{ModelParams, Tensor, BN_EPS};

#[derive(Clone, Debug)]
pub struct A {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl A {
    pub fn of(t: &Tensor) -> A {
        A {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn param(p: &ModelParams, name: &str) -> A {
        A::of(p.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")))
    }

    fn zeros(shape: Vec<usize>) -> A {
        let n = shape.iter().product();
        A {
            shape,
            data: vec![0.0; n],
        }
    }

    fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank 4, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

pub fn conv2d(x: &A, w: &A, b: &A, stride: usize, pad: usize) -> A {
    let (n, c, h, wd) = x.dims4();
    let (o, ci, k, _) = w.dims4();
    assert_eq!(c, ci);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = A::zeros(vec![n, o, ho, wo]);
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b.data[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data[((oc * c + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data[((bi * o + oc) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    out
}

/// `x[b,c,...] + bias[b,c]`.
pub fn add_channel(x: &A, bias: &A) -> A {
    let inner: usize = x.shape[2..].iter().product();
    let mut out = x.clone();
    for (i, chunk) in out.data.chunks_exact_mut(inner).enumerate() {
        chunk.iter_mut().for_each(|v| *v += bias.data[i]);
    }
    out
}

pub fn add(a: &A, b: &A) -> A {
    assert_eq!(a.shape, b.shape);
    A {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

pub fn relu(x: &A) -> A {
    A {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

pub fn max_pool2(x: &A) -> A {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = A::zeros(vec![n, c, ho, wo]);
    for p in 0..n * c {
        for y in 0..ho {
            for xo in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data[(p * h + 2 * y + dy) * w + 2 * xo + dx]);
                    }
                }
                out.data[(p * ho + y) * wo + xo] = m;
            }
        }
    }
    out
}

pub fn upsample2(x: &A) -> A {
    let (n, c, h, w) = x.dims4();
    let mut out = A::zeros(vec![n, c, 2 * h, 2 * w]);
    for p in 0..n * c {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                out.data[(p * 2 * h + y) * 2 * w + xo] = x.data[(p * h + y / 2) * w + xo / 2];
            }
        }
    }
    out
}

fn normalize(x: &A, gamma: &A, beta: &A, mean: &[f64], var: &[f64]) -> A {
    let (_, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = x.clone();
    for (i, chunk) in out.data.chunks_exact_mut(hw).enumerate() {
        let ch = i % c;
        let inv = 1.0 / (var[ch] + BN_EPS as f64).sqrt();
        chunk
            .iter_mut()
            .for_each(|v| *v = gamma.data[ch] * (*v - mean[ch]) * inv + beta.data[ch]);
    }
    out
}

/// Batch statistics with the biased variance.
pub fn batch_norm_train(x: &A, gamma: &A, beta: &A) -> A {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, chunk) in x.data.chunks_exact(hw).enumerate() {
        mean[i % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, chunk) in x.data.chunks_exact(hw).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    normalize(x, gamma, beta, &mean, &var)
}

pub fn batch_norm_eval(x: &A, gamma: &A, beta: &A, mean: &A, var: &A) -> A {
    normalize(x, gamma, beta, &mean.data, &var.data)
}

/// `x[B,I] w[O,I]^T + b[O]`.
pub fn linear(x: &A, w: &A, b: &A) -> A {
    let (n, i) = (x.shape[0], x.shape[1]);
    let o = w.shape[0];
    let mut out = A::zeros(vec![n, o]);
    for r in 0..n {
        for j in 0..o {
            let mut acc = b.data[j];
            for k in 0..i {
                acc += x.data[r * i + k] * w.data[j * i + k];
            }
            out.data[r * o + j] = acc;
        }
    }
    out
}

pub fn spatial_mean(x: &A) -> A {
    let (n, c, h, w) = x.dims4();
    A {
        shape: vec![n, c],
        data: x
            .data
            .chunks_exact(h * w)
            .map(|ch| ch.iter().sum::<f64>() / (h * w) as f64)
            .collect(),
    }
}

pub fn trainable_sq_norm(p: &ModelParams) -> f64 {
    p.iter()
        .filter(|(_, _, t)| t.requires_grad())
        .flat_map(|(_, _, t)| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum()
}

/// Conv-4 embedding, `[B,D]`.
pub fn conv4_embed(p: &ModelParams, images: &A, train: bool) -> A {
    let mut x = images.clone();
    for i in 0..4 {
        let pre = format!("block{i}");
        x = conv2d(
            &x,
            &A::param(p, &format!("{pre}.conv.weight")),
            &A::param(p, &format!("{pre}.conv.bias")),
            1,
            1,
        );
        let g = A::param(p, &format!("{pre}.bn.weight"));
        let b = A::param(p, &format!("{pre}.bn.bias"));
        x = if train {
            batch_norm_train(&x, &g, &b)
        } else {
            let m = A::param(p, &format!("{pre}.bn.running_mean"));
            let v = A::param(p, &format!("{pre}.bn.running_var"));
            batch_norm_eval(&x, &g, &b, &m, &v)
        };
        x = max_pool2(&relu(&x));
    }
    let n = x.shape[0];
    let d = x.data.len() / n;
    A {
        shape: vec![n, d],
        data: x.data,
    }
}

/// Mean of the rows of `emb` in each group.
pub fn prototypes(emb: &A, groups: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let d = emb.shape[1];
    groups
        .iter()
        .map(|g| {
            let mut acc = vec![0.0; d];
            for &r in g {
                for k in 0..d {
                    acc[k] += emb.data[r * d + k];
                }
            }
            acc.iter().map(|a| a / g.len() as f64).collect()
        })
        .collect()
}

/// Softmax over negative squared distances.
pub fn probabilities(q: &[f64], protos: &[Vec<f64>]) -> Vec<f64> {
    let logits: Vec<f64> = protos
        .iter()
        .map(|p| -q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits.iter().map(|l| (l - m).exp() / z).collect()
}

/// `-(1/Q) sum_i m_i log p(y_i | x_i) + lambda ||theta||^2` where the first
/// `n_support` rows of `emb` are support points.
pub fn masked_proto_loss(
    emb: &A,
    n_support: usize,
    groups: &[Vec<usize>],
    targets: &[usize],
    mask: &[f64],
    lambda: f64,
    p: &ModelParams,
) -> f64 {
    let d = emb.shape[1];
    let protos = prototypes(emb, groups);
    let q = targets.len();
    let mut nll = 0.0;
    for i in 0..q {
        let row = &emb.data[(n_support + i) * d..(n_support + i + 1) * d];
        let logits: Vec<f64> = protos
            .iter()
            .map(|pr| -row.iter().zip(pr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        nll -= mask[i] * (logits[targets[i]] - lse);
    }
    nll / q as f64 + lambda * trainable_sq_norm(p)
}

fn time_embedding(timesteps: &[usize], dim: usize) -> A {
    let half = dim / 2;
    let mut out = A::zeros(vec![timesteps.len(), dim]);
    for (r, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let arg = t as f64 * (-(10000f64.ln()) * i as f64 / half as f64).exp();
            // the model sees the f32-rounded embedding
            out.data[r * dim + i] = arg.sin() as f32 as f64;
            out.data[r * dim + half + i] = arg.cos() as f32 as f64;
        }
    }
    out
}

/// Noise prediction of the three-stage denoiser.
pub fn denoiser_predict(p: &ModelParams, x: &A, timesteps: &[usize], embed_dim: usize) -> A {
    let lin = |name: &str, v: &A| {
        linear(
            v,
            &A::param(p, &format!("{name}.weight")),
            &A::param(p, &format!("{name}.bias")),
        )
    };
    let conv = |name: &str, v: &A, stride: usize| {
        conv2d(
            v,
            &A::param(p, &format!("{name}.weight")),
            &A::param(p, &format!("{name}.bias")),
            stride,
            1,
        )
    };
    let temb = relu(&lin("time.fc", &time_embedding(timesteps, embed_dim)));
    let tb: Vec<A> = ["time.enc1", "time.enc2", "time.enc3", "time.mid"]
        .iter()
        .map(|n| lin(n, &temb))
        .collect();
    let h1 = relu(&add_channel(&conv("enc1", x, 1), &tb[0]));
    let h2 = relu(&add_channel(&conv("enc2", &h1, 2), &tb[1]));
    let h3 = relu(&add_channel(&conv("enc3", &h2, 2), &tb[2]));
    let d3 = relu(&add_channel(&conv("mid", &h3, 1), &tb[3]));
    let d2 = relu(&conv("dec", &add(&upsample2(&d3), &h2), 1));
    conv("out", &add(&upsample2(&d2), &h1), 1)
}

/// Mean squared error of the predicted noise on a fixed draw.
pub fn diffusion_loss(
    p: &ModelParams,
    s0: &A,
    timesteps: &[usize],
    noise: &A,
    alpha_bar: &[f64],
    embed_dim: usize,
) -> f64 {
    let inner = s0.data.len() / s0.shape[0];
    let mut st = s0.clone();
    for (i, &t) in timesteps.iter().enumerate() {
        let (a, b) = (alpha_bar[t].sqrt(), (1.0 - alpha_bar[t]).sqrt());
        for k in i * inner..(i + 1) * inner {
            st.data[k] = a * s0.data[k] + b * noise.data[k];
        }
    }
    let pred = denoiser_predict(p, &st, timesteps, embed_dim);
    pred.data
        .iter()
        .zip(&noise.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.data.len() as f64
}
