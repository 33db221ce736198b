//! Flat-parameter transformer encoder plus MLP head, with a hand-written
//! backward pass.
//!
//! All tensors are row-major `f64` slices. Weight matrices are stored
//! `out x in`, so a linear layer computes `y = x W^T + b`.

use super::{Pooling, RegressorConfig};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone)]
struct LayerIx {
    ln1g: usize,
    ln1b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2g: usize,
    ln2b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct DenseIx {
    w: usize,
    b: usize,
    d_in: usize,
    d_out: usize,
}

/// Parameter layout and shapes.
#[derive(Debug, Clone)]
pub(crate) struct Net {
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub pooling: Pooling,
    win: usize,
    bin: usize,
    layers: Vec<LayerIx>,
    head: Vec<DenseIx>,
    pub len: usize,
    /// (offset, fan_in, fan_out) of every weight matrix, for initialization.
    pub matrices: Vec<(usize, usize, usize)>,
    /// Offsets of layer-norm gains (initialized to 1).
    pub gains: Vec<(usize, usize)>,
}

impl Net {
    pub fn new(d_in: usize, cfg: &RegressorConfig) -> Self {
        let d = cfg.model_dim;
        let mut len = 0;
        let mut matrices = Vec::new();
        let mut gains = Vec::new();
        let mut take = |n: usize| {
            let off = len;
            len += n;
            off
        };
        let win = take(d * d_in);
        matrices.push((win, d_in, d));
        let bin = take(d);
        let mut layers = Vec::new();
        for _ in 0..cfg.encoder_layers {
            let ix = LayerIx {
                ln1g: take(d),
                ln1b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2g: take(d),
                ln2b: take(d),
                w1: take(cfg.ffn_dim * d),
                b1: take(cfg.ffn_dim),
                w2: take(d * cfg.ffn_dim),
                b2: take(d),
            };
            for w in [ix.wq, ix.wk, ix.wv, ix.wo] {
                matrices.push((w, d, d));
            }
            matrices.push((ix.w1, d, cfg.ffn_dim));
            matrices.push((ix.w2, cfg.ffn_dim, d));
            gains.push((ix.ln1g, d));
            gains.push((ix.ln2g, d));
            layers.push(ix);
        }
        let mut head = Vec::new();
        let mut prev = d;
        for &width in &cfg.mlp_widths {
            let ix = DenseIx {
                w: take(width * prev),
                b: take(width),
                d_in: prev,
                d_out: width,
            };
            matrices.push((ix.w, prev, width));
            head.push(ix);
            prev = width;
        }
        Net {
            d_in,
            d_model: d,
            heads: cfg.attention_heads,
            ffn: cfg.ffn_dim,
            pooling: cfg.pooling,
            win,
            bin,
            layers,
            head,
            len,
            matrices,
            gains,
        }
    }

    /// Offset of the scalar output bias.
    pub fn output_bias(&self) -> usize {
        self.head.last().expect("head has at least one layer").b
    }
}

struct LayerCache {
    u1: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    u2: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    g_pre: Vec<f64>,
    g_act: Vec<f64>,
}

pub(crate) struct Cache {
    n: usize,
    z: Vec<f64>,
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
    /// Input and pre-activation of each head layer.
    head: Vec<(Vec<f64>, Vec<f64>)>,
}

fn linear(p: &[f64], w: usize, b: usize, x: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let wm = &p[w..w + din * dout];
    let bias = &p[b..b + dout];
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        let xi = &x[i * din..(i + 1) * din];
        for o in 0..dout {
            let row = &wm[o * din..(o + 1) * din];
            y[i * dout + o] = bias[o] + dot(xi, row);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn linear_back(
    p: &[f64],
    g: &mut [f64],
    w: usize,
    b: usize,
    x: &[f64],
    dy: &[f64],
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * din];
    for i in 0..n {
        let xi = &x[i * din..(i + 1) * din];
        for o in 0..dout {
            let d = dy[i * dout + o];
            if d == 0.0 {
                continue;
            }
            g[b + o] += d;
            let gw = &mut g[w + o * din..w + (o + 1) * din];
            for (gk, xk) in gw.iter_mut().zip(xi) {
                *gk += d * xk;
            }
            let row = &p[w + o * din..w + (o + 1) * din];
            let dxi = &mut dx[i * din..(i + 1) * din];
            for (dk, wk) in dxi.iter_mut().zip(row) {
                *dk += d * wk;
            }
        }
    }
    dx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn layer_norm(p: &[f64], gi: usize, bi: usize, x: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            y[i * d + j] = p[gi + j] * xh + p[bi + j];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_back(
    p: &[f64],
    g: &mut [f64],
    gi: usize,
    bi: usize,
    xhat: &[f64],
    rstd: &[f64],
    dy: &[f64],
    n: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    let mut dxh = vec![0.0; d];
    for i in 0..n {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dyj = dy[i * d + j];
            let xh = xhat[i * d + j];
            g[gi + j] += dyj * xh;
            g[bi + j] += dyj;
            dxh[j] = dyj * p[gi + j];
            m1 += dxh[j];
            m2 += dxh[j] * xh;
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            dx[i * d + j] = rstd[i] * (dxh[j] - m1 - xhat[i * d + j] * m2);
        }
    }
    dx
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Net {
    /// Forward pass over `n` standardized vectors; returns the scalar output
    /// before the softplus map.
    pub fn forward(&self, p: &[f64], z: &[f64], n: usize) -> (f64, Cache) {
        let d = self.d_model;
        let mut x = linear(p, self.win, self.bin, z, n, self.d_in, d);
        let mut caches = Vec::with_capacity(self.layers.len());
        for ix in &self.layers {
            let (u1, xhat1, rstd1) = layer_norm(p, ix.ln1g, ix.ln1b, &x, n, d);
            let q = linear(p, ix.wq, ix.bq, &u1, n, d, d);
            let k = linear(p, ix.wk, ix.bk, &u1, n, d, d);
            let v = linear(p, ix.wv, ix.bv, &u1, n, d, d);
            let (probs, o) = self.attend(&q, &k, &v, n);
            let a = linear(p, ix.wo, ix.bo, &o, n, d, d);
            let h: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x + a).collect();
            let (u2, xhat2, rstd2) = layer_norm(p, ix.ln2g, ix.ln2b, &h, n, d);
            let g_pre = linear(p, ix.w1, ix.b1, &u2, n, d, self.ffn);
            let g_act: Vec<f64> = g_pre.iter().map(|v| gelu(*v)).collect();
            let f = linear(p, ix.w2, ix.b2, &g_act, n, self.ffn, d);
            let out: Vec<f64> = h.iter().zip(&f).map(|(h, f)| h + f).collect();
            caches.push(LayerCache {
                u1,
                xhat1,
                rstd1,
                q,
                k,
                v,
                probs,
                o,
                u2,
                xhat2,
                rstd2,
                g_pre,
                g_act,
            });
            x = out;
        }
        let pooled = match self.pooling {
            Pooling::Mean => {
                let mut m = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        m[j] += x[i * d + j];
                    }
                }
                m.iter_mut().for_each(|v| *v /= n as f64);
                m
            }
            Pooling::Last => x[(n - 1) * d..n * d].to_vec(),
        };
        let mut head = Vec::with_capacity(self.head.len());
        let mut a = pooled.clone();
        let last = self.head.len() - 1;
        for (li, ix) in self.head.iter().enumerate() {
            let pre = linear(p, ix.w, ix.b, &a, 1, ix.d_in, ix.d_out);
            let next = if li == last {
                pre.clone()
            } else {
                pre.iter().map(|v| gelu(*v)).collect()
            };
            head.push((a, pre));
            a = next;
        }
        let cache = Cache {
            n,
            z: z.to_vec(),
            layers: caches,
            pooled,
            head,
        };
        (a[0], cache)
    }

    fn attend(&self, q: &[f64], k: &[f64], v: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.d_model;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; self.heads * n * n];
        let mut o = vec![0.0; n * d];
        for hh in 0..self.heads {
            let c = hh * dh;
            for i in 0..n {
                let qi = &q[i * d + c..i * d + c + dh];
                let row = &mut probs[(hh * n + i) * n..(hh * n + i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    let s = dot(qi, &k[j * d + c..j * d + c + dh]) * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                for j in 0..n {
                    let pij = row[j];
                    for t in 0..dh {
                        o[i * d + c + t] += pij * v[j * d + c + t];
                    }
                }
            }
        }
        (probs, o)
    }

    /// Accumulates d(output)/d(params) scaled by `dout` into `g`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &Cache, dout: f64) {
        let d = self.d_model;
        let n = cache.n;
        let mut da = vec![dout];
        for (li, ix) in self.head.iter().enumerate().rev() {
            let (input, pre) = &cache.head[li];
            let dpre: Vec<f64> = if li == self.head.len() - 1 {
                da.clone()
            } else {
                da.iter().zip(pre).map(|(d, x)| d * gelu_grad(*x)).collect()
            };
            da = linear_back(p, g, ix.w, ix.b, input, &dpre, 1, ix.d_in, ix.d_out);
        }
        debug_assert_eq!(da.len(), cache.pooled.len());
        let mut dx = vec![0.0; n * d];
        match self.pooling {
            Pooling::Mean => {
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = da[j] / n as f64;
                    }
                }
            }
            Pooling::Last => dx[(n - 1) * d..n * d].copy_from_slice(&da),
        }
        for (ix, c) in self.layers.iter().zip(&cache.layers).rev() {
            // out = h + W2 gelu(W1 LN2(h))
            let dgact = linear_back(p, g, ix.w2, ix.b2, &c.g_act, &dx, n, self.ffn, d);
            let dgpre: Vec<f64> = dgact
                .iter()
                .zip(&c.g_pre)
                .map(|(d, x)| d * gelu_grad(*x))
                .collect();
            let du2 = linear_back(p, g, ix.w1, ix.b1, &c.u2, &dgpre, n, d, self.ffn);
            let dh_ln = layer_norm_back(p, g, ix.ln2g, ix.ln2b, &c.xhat2, &c.rstd2, &du2, n, d);
            let dh: Vec<f64> = dx.iter().zip(&dh_ln).map(|(a, b)| a + b).collect();
            // h = x + Wo attn(LN1(x))
            let do_ = linear_back(p, g, ix.wo, ix.bo, &c.o, &dh, n, d, d);
            let (dq, dk, dv) = self.attend_back(c, &do_, n);
            let mut du1 = linear_back(p, g, ix.wq, ix.bq, &c.u1, &dq, n, d, d);
            for (a, b) in du1
                .iter_mut()
                .zip(linear_back(p, g, ix.wk, ix.bk, &c.u1, &dk, n, d, d))
            {
                *a += b;
            }
            for (a, b) in du1
                .iter_mut()
                .zip(linear_back(p, g, ix.wv, ix.bv, &c.u1, &dv, n, d, d))
            {
                *a += b;
            }
            let dx_ln = layer_norm_back(p, g, ix.ln1g, ix.ln1b, &c.xhat1, &c.rstd1, &du1, n, d);
            dx = dh.iter().zip(&dx_ln).map(|(a, b)| a + b).collect();
        }
        linear_back(p, g, self.win, self.bin, &cache.z, &dx, n, self.d_in, d);
    }

    fn attend_back(&self, c: &LayerCache, do_: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.d_model;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for hh in 0..self.heads {
            let off = hh * dh;
            for i in 0..n {
                let row = &c.probs[(hh * n + i) * n..(hh * n + i + 1) * n];
                let doi = &do_[i * d + off..i * d + off + dh];
                let mut acc = 0.0;
                for j in 0..n {
                    let vj = &c.v[j * d + off..j * d + off + dh];
                    dp[j] = dot(doi, vj);
                    acc += dp[j] * row[j];
                    for t in 0..dh {
                        dv[j * d + off + t] += row[j] * doi[t];
                    }
                }
                for j in 0..n {
                    let ds = row[j] * (dp[j] - acc) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        dq[i * d + off + t] += ds * c.k[j * d + off + t];
                        dk[j * d + off + t] += ds * c.q[i * d + off + t];
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}
