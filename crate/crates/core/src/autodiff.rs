//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every node that depends on a tracked leaf.
//! Shape misuse inside the graph is a programming error and panics; user
//! input is validated before it reaches the tape.

use std::collections::BTreeMap;

use crate::tensor::{gemm, log_sum_exp, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable tensor across forward passes so that repeated use
/// inside one graph shares a single leaf and its gradients accumulate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub owner: u8,
    pub index: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Var, pad: usize, cols: Vec<f64> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Abs { x: Var },
    Ln { x: Var },
    Sum { x: Var },
    MeanRows { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    GradScale { x: Var, c: f64 },
    RowNormalize { x: Var, norms: Vec<f64> },
    WeightNorm { v: Var, g: Var, norms: Vec<f64> },
    TotalVariation { x: Var },
    MomentMatch { x: Var, mean_ref: Vec<f64>, var_ref: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased variance (divides by `m - 1`), as used for running estimates.
    pub var_unbiased: Vec<f64>,
    pub count: usize,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamKey, Var>,
    track_params: bool,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph whose parameters receive gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            track_params: true,
            grads: Vec::new(),
        }
    }

    /// A graph that binds parameters as constants and keeps no backward
    /// caches. Forward values are identical to a tracking graph.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (e.g. an image being optimized).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, key: ParamKey, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let track = self.track_params;
        let v = self.push(value.clone(), Op::Leaf, track);
        self.params.insert(key, v);
        v
    }

    pub fn param_var(&self, key: ParamKey) -> Option<Var> {
        self.params.get(&key).copied()
    }

    // ---- linear algebra -------------------------------------------------

    /// `[n,k] x [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, &mut out, 1.0, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[n, m], out).unwrap(), Op::MatMul { a, b }, ng)
    }

    /// `x w^T + b` with `x: [n,i]`, `w: [o,i]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        assert!(sx.len() == 2 && sw.len() == 2 && sx[1] == sw[1], "linear {sx:?} . {sw:?}^T");
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in out.chunks_mut(o) {
                r.copy_from_slice(bias);
            }
        }
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, 1.0, 1.0);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::from_vec(&[n, o], out).unwrap(), Op::Linear { x, w, b }, ng)
    }

    /// Stride-1 square-kernel convolution with symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1] && sw[2] == sw[3], "conv2d {sx:?} * {sw:?}");
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let (ho, wo) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let ckk = c * k * k;
        let hw = ho * wo;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let mut out = vec![0.0; n * o * hw];
        let mut cols_all = if ng { vec![0.0; n * ckk * hw] } else { Vec::new() };
        let mut cols = vec![0.0; ckk * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for img in 0..n {
                im2col(&xv[img * c * h * wd..(img + 1) * c * h * wd], c, h, wd, k, pad, ho, wo, &mut cols);
                let dst = &mut out[img * o * hw..(img + 1) * o * hw];
                for (oc, r) in dst.chunks_mut(hw).enumerate() {
                    r.fill(bv[oc]);
                }
                gemm(o, ckk, hw, wv, false, &cols, false, dst, 1.0, 1.0);
                if ng {
                    cols_all[img * ckk * hw..(img + 1) * ckk * hw].copy_from_slice(&cols);
                }
            }
        }
        let t = Tensor::from_vec(&[n, o, ho, wo], out).unwrap();
        self.push(t, Op::Conv2d { x, w, b, pad, cols: cols_all }, ng)
    }

    /// 2x2 max pooling with stride 2 (trailing odd row/column dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = plane * ho * wo + i * wo + j;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let ng = self.ng(x);
        let t = Tensor::from_vec(&[n, c, ho, wo], out).unwrap();
        self.push(t, Op::MaxPool2 { x, argmax: if ng { argmax } else { Vec::new() } }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu { x }, ng)
    }

    /// Batch normalization over axis 1 of `[n, c, ...]` using the batch's own
    /// statistics. Returns the output and the observed moments.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchMoments) {
        let s = self.value(x).shape().to_vec();
        let (n, c) = (s[0], s[1]);
        let sp: usize = s[2..].iter().product();
        let m = n * sp;
        assert!(m > 1, "batch norm in training mode needs more than one value per channel");
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * sp;
                mean[ch] += xv[off..off + sp].iter().sum::<f64>();
            }
        }
        for v in mean.iter_mut() {
            *v /= m as f64;
        }
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * sp;
                var[ch] += xv[off..off + sp].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let var_biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
        let var_unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1) as f64).collect();
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, &inv_std, true);
        (
            out,
            BatchMoments {
                mean,
                var_unbiased,
                count: m,
            },
        )
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, &inv_std, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], train: bool) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, c) = (s[0], s[1]);
        let sp: usize = s[2..].iter().product();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * sp;
                for k in off..off + sp {
                    let h = (xv[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = gv[ch] * h + bv[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: if ng { xhat } else { Vec::new() },
            inv_std: inv_std.to_vec(),
            train,
        };
        self.push(Tensor::from_vec(&s, out).unwrap(), op, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape size");
        let ng = self.ng(x);
        self.push(t, Op::Reshape { x }, ng)
    }

    /// Collapses all trailing axes: `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let s = self.value(x).shape();
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Tensor, bool) {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        (Tensor::from_vec(ta.shape(), data).unwrap(), self.ng(a) || self.ng(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (t, ng) = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (t, ng) = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub { a, b }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (t, ng) = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, c }, ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        let ng = self.ng(x);
        self.push(t, Op::Abs { x }, ng)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        let ng = self.ng(x);
        self.push(t, Op::Ln { x }, ng)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(t, Op::Sum { x }, ng)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means of `[n, m]`, giving `[m]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2);
        let (n, m) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m];
        for r in t.data().chunks(m) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[m], out).unwrap(), Op::MeanRows { x }, ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x).softmax_rows();
        let ng = self.ng(x);
        self.push(t, Op::Softmax { x }, ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let w = t.row_len();
        for r in t.data_mut().chunks_mut(w) {
            let l = log_sum_exp(r);
            for v in r.iter_mut() {
                *v -= l;
            }
        }
        let ng = self.ng(x);
        self.push(t, Op::LogSoftmax { x }, ng)
    }

    /// Mean cross-entropy of `[n, k]` logits against hard targets, with
    /// optional uniform label smoothing `eps`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Var {
        let t = self.value(logits);
        let (n, k) = (t.shape()[0], t.row_len());
        assert_eq!(n, targets.len(), "one target per row");
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (i, r) in t.data().chunks(k).enumerate() {
            assert!(targets[i] < k, "target {} out of range for {k} classes", targets[i]);
            let lse = log_sum_exp(r);
            let nll = lse - r[targets[i]];
            let uniform = lse - r.iter().sum::<f64>() / k as f64;
            loss += (1.0 - smoothing) * nll + smoothing * uniform;
            softmax_in_place(&mut probs[i * k..(i + 1) * k]);
        }
        let ng = self.ng(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            smoothing,
            probs: if ng { probs } else { Vec::new() },
        };
        self.push(Tensor::scalar(loss / n as f64), op, ng)
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), targets.len());
        let loss: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `c`.
    /// A negative `c` gives gradient reversal.
    pub fn grad_scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).clone();
        let ng = self.ng(x);
        self.push(t, Op::GradScale { x, c }, ng)
    }

    /// Scales each row of `[n, d]` to unit L2 norm (rows of norm below
    /// `1e-12` are left scaled by `1e12`).
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.row_len();
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in out.data_mut().chunks_mut(d) {
            let nrm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(nrm);
            for v in r.iter_mut() {
                *v /= nrm;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::RowNormalize { x, norms }, ng)
    }

    /// Weight normalization: row `o` of the result is `g[o] * v[o] / |v[o]|`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Var {
        let tv = self.value(v);
        let d = tv.row_len();
        let gv = self.value(g).data();
        let mut out = tv.clone();
        let mut norms = Vec::with_capacity(tv.rows());
        for (o, r) in out.data_mut().chunks_mut(d).enumerate() {
            let nrm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            norms.push(nrm);
            for x in r.iter_mut() {
                *x *= gv[o] / nrm;
            }
        }
        let ng = self.ng(v) || self.ng(g);
        self.push(out, Op::WeightNorm { v, g, norms }, ng)
    }

    /// Mean squared forward difference along height plus the same along
    /// width, for `[n, c, h, w]`.
    pub fn total_variation(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let xv = self.value(x).data();
        let (mut dh, mut dw) = (0.0, 0.0);
        for p in 0..planes {
            let b = p * h * w;
            for i in 0..h {
                for j in 0..w {
                    let v = xv[b + i * w + j];
                    if i + 1 < h {
                        dh += (xv[b + (i + 1) * w + j] - v).powi(2);
                    }
                    if j + 1 < w {
                        dw += (xv[b + i * w + j + 1] - v).powi(2);
                    }
                }
            }
        }
        let nh = (planes * h.saturating_sub(1) * w).max(1) as f64;
        let nw = (planes * h * w.saturating_sub(1)).max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(dh / nh + dw / nw), Op::TotalVariation { x }, ng)
    }

    /// `|mu(x) - mean_ref|^2 + |var(x) - var_ref|^2` where `mu`, `var` are
    /// per-channel (axis 1) batch moments with population variance.
    pub fn moment_match(&mut self, x: Var, mean_ref: &[f64], var_ref: &[f64]) -> Var {
        let (mu, var) = channel_moments(self.value(x));
        let loss: f64 = mu.iter().zip(mean_ref).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            + var.iter().zip(var_ref).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let ng = self.ng(x);
        let op = Op::MomentMatch {
            x,
            mean_ref: mean_ref.to_vec(),
            var_ref: var_ref.to_vec(),
        };
        self.push(Tensor::scalar(loss), op, ng)
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar node. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_vec(self.value(v).shape(), g.clone()).unwrap())
    }

    pub fn param_grad(&self, key: ParamKey) -> Option<Tensor> {
        self.param_var(key).and_then(|v| self.grad(v))
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (n, k) = (shape(*a)[0], shape(*a)[1]);
                let m = shape(*b)[1];
                acc(*a, &mut |ga| gemm(n, m, k, gy, false, val(*b), true, ga, 1.0, 1.0));
                acc(*b, &mut |gb| gemm(k, n, m, val(*a), true, gy, false, gb, 1.0, 1.0));
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (shape(*x)[0], shape(*x)[1]);
                let o = shape(*w)[0];
                acc(*x, &mut |gx| gemm(n, o, inp, gy, false, val(*w), false, gx, 1.0, 1.0));
                acc(*w, &mut |gw| gemm(o, n, inp, gy, true, val(*x), false, gw, 1.0, 1.0));
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for r in gy.chunks(o) {
                            for (g, v) in gb.iter_mut().zip(r) {
                                *g += v;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, pad, cols } => {
                let sx = shape(*x);
                let sw = shape(*w);
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, k) = (sw[0], sw[2]);
                let (ho, wo) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
                let (ckk, hw) = (c * k * k, ho * wo);
                acc(*b, &mut |gb| {
                    for img in 0..n {
                        for (oc, r) in gy[img * o * hw..(img + 1) * o * hw].chunks(hw).enumerate() {
                            gb[oc] += r.iter().sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for img in 0..n {
                        let g = &gy[img * o * hw..(img + 1) * o * hw];
                        let cl = &cols[img * ckk * hw..(img + 1) * ckk * hw];
                        gemm(o, hw, ckk, g, false, cl, true, gw, 1.0, 1.0);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dcols = vec![0.0; ckk * hw];
                    for img in 0..n {
                        let g = &gy[img * o * hw..(img + 1) * o * hw];
                        gemm(ckk, o, hw, val(*w), true, g, false, &mut dcols, 1.0, 0.0);
                        col2im(&dcols, c, h, wd, k, *pad, ho, wo, &mut gx[img * c * h * wd..(img + 1) * c * h * wd]);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |gx| {
                for (g, &idx) in gy.iter().zip(argmax) {
                    gx[idx] += g;
                }
            }),
            Op::Relu { x } => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((g, &v), d) in gx.iter_mut().zip(xv).zip(gy) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                })
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = shape(*x);
                let (n, c) = (s[0], s[1]);
                let sp: usize = s[2..].iter().product();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for img in 0..n {
                    for ch in 0..c {
                        let off = (img * c + ch) * sp;
                        for k in off..off + sp {
                            sum_dy[ch] += gy[k];
                            sum_dy_xhat[ch] += gy[k] * xhat[k];
                        }
                    }
                }
                acc(*gamma, &mut |gg| {
                    for (g, v) in gg.iter_mut().zip(&sum_dy_xhat) {
                        *g += v;
                    }
                });
                acc(*beta, &mut |gb| {
                    for (g, v) in gb.iter_mut().zip(&sum_dy) {
                        *g += v;
                    }
                });
                let gv = val(*gamma);
                let m = (n * sp) as f64;
                acc(*x, &mut |gx| {
                    for img in 0..n {
                        for ch in 0..c {
                            let off = (img * c + ch) * sp;
                            let scale = gv[ch] * inv_std[ch];
                            for k in off..off + sp {
                                gx[k] += if *train {
                                    scale * (gy[k] - sum_dy[ch] / m - xhat[k] * sum_dy_xhat[ch] / m)
                                } else {
                                    scale * gy[k]
                                };
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } | Op::GradScale { x, c: _ } | Op::Scale { x, c: _ } => {
                let c = match &node.op {
                    Op::GradScale { c, .. } | Op::Scale { c, .. } => *c,
                    _ => 1.0,
                };
                acc(*x, &mut |gx| {
                    for (g, d) in gx.iter_mut().zip(gy) {
                        *g += c * d;
                    }
                })
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| {
                    for (g, d) in ga.iter_mut().zip(gy) {
                        *g += d;
                    }
                });
                acc(*b, &mut |gb| {
                    for (g, d) in gb.iter_mut().zip(gy) {
                        *g += sign * d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((g, d), y) in ga.iter_mut().zip(gy).zip(bv) {
                        *g += d * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((g, d), x) in gb.iter_mut().zip(gy).zip(av) {
                        *g += d * x;
                    }
                });
            }
            Op::Abs { x } => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((g, d), &v) in gx.iter_mut().zip(gy).zip(xv) {
                        *g += d * if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                })
            }
            Op::Ln { x } => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((g, d), &v) in gx.iter_mut().zip(gy).zip(xv) {
                        *g += d / v;
                    }
                })
            }
            Op::Sum { x } => acc(*x, &mut |gx| {
                for g in gx.iter_mut() {
                    *g += gy[0];
                }
            }),
            Op::MeanRows { x } => {
                let (n, m) = (shape(*x)[0], shape(*x)[1]);
                acc(*x, &mut |gx| {
                    for r in gx.chunks_mut(m) {
                        for (g, d) in r.iter_mut().zip(gy) {
                            *g += d / n as f64;
                        }
                    }
                })
            }
            Op::Softmax { x } => {
                let p = node.value.data();
                let k = node.value.row_len();
                acc(*x, &mut |gx| {
                    for ((gr, pr), dr) in gx.chunks_mut(k).zip(p.chunks(k)).zip(gy.chunks(k)) {
                        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((g, &pj), &dj) in gr.iter_mut().zip(pr).zip(dr) {
                            *g += pj * (dj - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax { x } => {
                let lp = node.value.data();
                let k = node.value.row_len();
                acc(*x, &mut |gx| {
                    for ((gr, lr), dr) in gx.chunks_mut(k).zip(lp.chunks(k)).zip(gy.chunks(k)) {
                        let s: f64 = dr.iter().sum();
                        for ((g, &l), &d) in gr.iter_mut().zip(lr).zip(dr) {
                            *g += d - l.exp() * s;
                        }
                    }
                })
            }
            Op::CrossEntropy { logits, targets, smoothing, probs } => {
                let k = shape(*logits)[1];
                let n = targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (i, (gr, pr)) in gl.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for (j, (g, &p)) in gr.iter_mut().zip(pr).enumerate() {
                            let target = (1.0 - smoothing) * f64::from(u8::from(j == targets[i])) + smoothing / k as f64;
                            *g += gy[0] * (p - target) / n;
                        }
                    }
                })
            }
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                let n = z.len() as f64;
                acc(*logits, &mut |gl| {
                    for ((g, &z), &y) in gl.iter_mut().zip(z).zip(targets) {
                        *g += gy[0] * (sigmoid(z) - y) / n;
                    }
                })
            }
            Op::RowNormalize { x, norms } => {
                let out = node.value.data();
                let d = node.value.row_len();
                acc(*x, &mut |gx| {
                    for (((gr, yr), dr), &nrm) in gx.chunks_mut(d).zip(out.chunks(d)).zip(gy.chunks(d)).zip(norms) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((g, &y), &dy) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += (dy - y * dot) / nrm;
                        }
                    }
                })
            }
            Op::WeightNorm { v, g, norms } => {
                let vv = val(*v);
                let gv = val(*g);
                let d = shape(*v)[1];
                acc(*g, &mut |gg| {
                    for (o, (vr, dr)) in vv.chunks(d).zip(gy.chunks(d)).enumerate() {
                        let dot: f64 = vr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        gg[o] += dot / norms[o];
                    }
                });
                acc(*v, &mut |gvv| {
                    for (o, ((gr, vr), dr)) in gvv.chunks_mut(d).zip(vv.chunks(d)).zip(gy.chunks(d)).enumerate() {
                        let nrm = norms[o];
                        let dot: f64 = vr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((gx, &x), &dy) in gr.iter_mut().zip(vr).zip(dr) {
                            *gx += gv[o] / nrm * (dy - x * dot / (nrm * nrm));
                        }
                    }
                });
            }
            Op::TotalVariation { x } => {
                let s = shape(*x);
                let (h, w) = (s[2], s[3]);
                let planes = s[0] * s[1];
                let xv = val(*x);
                let nh = (planes * h.saturating_sub(1) * w).max(1) as f64;
                let nw = (planes * h * w.saturating_sub(1)).max(1) as f64;
                acc(*x, &mut |gx| {
                    for p in 0..planes {
                        let b = p * h * w;
                        for i in 0..h {
                            for j in 0..w {
                                let at = b + i * w + j;
                                if i + 1 < h {
                                    let d = 2.0 * (xv[at + w] - xv[at]) / nh * gy[0];
                                    gx[at + w] += d;
                                    gx[at] -= d;
                                }
                                if j + 1 < w {
                                    let d = 2.0 * (xv[at + 1] - xv[at]) / nw * gy[0];
                                    gx[at + 1] += d;
                                    gx[at] -= d;
                                }
                            }
                        }
                    }
                })
            }
            Op::MomentMatch { x, mean_ref, var_ref } => {
                let t = &self.nodes[x.0].value;
                let (mu, var) = channel_moments(t);
                let s = t.shape();
                let (n, c) = (s[0], s[1]);
                let sp: usize = s[2..].iter().product();
                let m = (n * sp) as f64;
                let xv = t.data();
                acc(*x, &mut |gx| {
                    for img in 0..n {
                        for ch in 0..c {
                            let off = (img * c + ch) * sp;
                            let dmu = 2.0 * (mu[ch] - mean_ref[ch]) / m;
                            let dvar = 2.0 * (var[ch] - var_ref[ch]);
                            for k in off..off + sp {
                                gx[k] += gy[0] * (dmu + dvar * 2.0 * (xv[k] - mu[ch]) / m);
                            }
                        }
                    }
                })
            }
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-channel mean and population variance over axis 1 of `[n, c, ...]`.
pub fn channel_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let (n, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let m = (n * sp) as f64;
    let xv = t.data();
    let mut mu = vec![0.0; c];
    let mut var = vec![0.0; c];
    for img in 0..n {
        for ch in 0..c {
            let off = (img * c + ch) * sp;
            mu[ch] += xv[off..off + sp].iter().sum::<f64>();
        }
    }
    for v in mu.iter_mut() {
        *v /= m;
    }
    for img in 0..n {
        for ch in 0..c {
            let off = (img * c + ch) * sp;
            var[ch] += xv[off..off + sp].iter().map(|v| (v - mu[ch]).powi(2)).sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mu, var)
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, ho: usize, wo: usize, cols: &mut [f64]) {
    let hw = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh + ki) as isize - pad as isize;
                    for ow in 0..wo {
                        let iw = (ow + kj) as isize - pad as isize;
                        dst[oh * wo + ow] = if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                            x[(ch * h + ih as usize) * w + iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    let hw = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh + ki) as isize - pad as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow + kj) as isize - pad as isize;
                        if iw >= 0 && (iw as usize) < w {
                            dx[(ch * h + ih as usize) * w + iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}
