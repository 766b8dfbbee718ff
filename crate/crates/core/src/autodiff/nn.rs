//! Layer operations: dense, convolution, batch normalization, pooling,
//! dropout and softmax cross-entropy.

use rand::Rng;

use super::graph::{Graph, Op, Var};
use super::{matmul, Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-normalization mode.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running mean and variance.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics from a training-mode forward pass; `var` is
/// the unbiased estimate used for running-statistics updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// `running <- (1 - momentum) * running + momentum * batch`
    pub fn update_running(&self, mean: &mut [f64], var: &mut [f64]) {
        for c in 0..self.mean.len() {
            mean[c] = (1.0 - BN_MOMENTUM) * mean[c] + BN_MOMENTUM * self.mean[c];
            var[c] = (1.0 - BN_MOMENTUM) * var[c] + BN_MOMENTUM * self.var[c];
        }
    }
}

impl<T: Real> Graph<T> {
    /// `y = x W + b` with `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn fc(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::shape("fc", format!("x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let (n, din, dout) = (xs[0], ws[0], ws[1]);
        let mut y = vec![T::zero(); n * dout];
        for row in y.chunks_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        matmul(n, din, dout, self.value(x).data(), false, self.value(w).data(), false, &mut y, true);
        let value = Tensor::new(&[n, dout], y)?;
        Ok(self.custom(&[x, w, b], value, Box::new(Fc { n, din, dout })))
    }

    /// Valid cross-correlation, stride 1: `[N, Ci, L] * [Co, Ci, K] -> [N, Co, L - K + 1]`.
    pub fn conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 || ks.len() != 3 || xs[1] != ks[1] {
            return Err(Error::shape("conv1d", format!("x {xs:?}, kernel {ks:?}")));
        }
        if xs[2] < ks[2] {
            return Err(Error::domain(format!("conv1d input length {} shorter than kernel {}", xs[2], ks[2])));
        }
        let geo = Conv1dGeom {
            n: xs[0],
            ci: xs[1],
            l: xs[2],
            co: ks[0],
            k: ks[2],
        };
        let lo = geo.lout();
        let mut y = vec![T::zero(); geo.n * geo.co * lo];
        let mut cols = vec![T::zero(); geo.ci * geo.k * lo];
        let xd = self.value(x).data();
        let kd = self.value(k).data();
        for s in 0..geo.n {
            geo.im2col(&xd[s * geo.ci * geo.l..(s + 1) * geo.ci * geo.l], &mut cols);
            let out = &mut y[s * geo.co * lo..(s + 1) * geo.co * lo];
            matmul(geo.co, geo.ci * geo.k, lo, kd, false, &cols, false, out, false);
        }
        let value = Tensor::new(&[geo.n, geo.co, lo], y)?;
        Ok(self.custom(&[x, k], value, Box::new(Conv1d(geo))))
    }

    /// Zero-padded "same" cross-correlation with an odd square kernel:
    /// `[N, Ci, H, W] * [Co, Ci, K, K] -> [N, Co, H, W]`.
    pub fn conv2d_same(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("x {xs:?}, kernel {ks:?}")));
        }
        let geo = Conv2dGeom {
            n: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            co: ks[0],
            k: ks[2],
        };
        let hw = geo.h * geo.w;
        let mut y = vec![T::zero(); geo.n * geo.co * hw];
        let mut cols = vec![T::zero(); geo.ci * geo.k * geo.k * hw];
        let xd = self.value(x).data();
        let kd = self.value(k).data();
        for s in 0..geo.n {
            geo.im2col(&xd[s * geo.ci * hw..(s + 1) * geo.ci * hw], &mut cols);
            let out = &mut y[s * geo.co * hw..(s + 1) * geo.co * hw];
            matmul(geo.co, geo.ci * geo.k * geo.k, hw, kd, false, &cols, false, out, false);
        }
        let value = Tensor::new(&[geo.n, geo.co, geo.h, geo.w], y)?;
        Ok(self.custom(&[x, k], value, Box::new(Conv2d(geo))))
    }

    /// Batch normalization over `[N, C, ...]`, per channel, with learnable
    /// scale `gamma: [C]` and shift `beta: [C]`.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape(
                "batchnorm",
                format!("x {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let m = (n * s) as f64;
        let xd = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::domain("batchnorm in training mode needs a batch of at least 2"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += xd[(i * c + ch) * s..(i * c + ch + 1) * s].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    mean[ch] = acc / m;
                    let mut sq = 0.0;
                    for i in 0..n {
                        sq += xd[(i * c + ch) * s..(i * c + ch + 1) * s]
                            .iter()
                            .map(|v| (v.f64() - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                    var[ch] = sq / m;
                }
                let unbiased = var.iter().map(|v| v * m / (m - 1.0)).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm", "running statistics do not match channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let (g, b) = (gd[ch].f64(), bd[ch].f64());
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    let h = (xd[j].f64() - mean[ch]) * inv_std[ch];
                    xhat[j] = T::of(h);
                    y[j] = T::of(g * h + b);
                }
            }
        }
        let value = Tensor::new(&xs, y)?;
        let op = BatchNorm {
            n,
            c,
            s,
            xhat,
            inv_std,
            train: stats.is_some(),
        };
        Ok((self.custom(&[x, gamma, beta], value, Box::new(op)), stats))
    }

    /// Non-overlapping max over windows of 2 along the last axis of
    /// `[N, C, L]`; a trailing odd element is dropped.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] < 2 {
            return Err(Error::shape("maxpool1d", format!("{xs:?}")));
        }
        let (rows, l) = (xs[0] * xs[1], xs[2]);
        let lo = l / 2;
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(rows * lo);
        let mut arg = Vec::with_capacity(rows * lo);
        for r in 0..rows {
            for t in 0..lo {
                let i = r * l + 2 * t;
                let j = if xd[i + 1] > xd[i] { i + 1 } else { i };
                y.push(xd[j]);
                arg.push(j);
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], lo], y)?;
        Ok(self.custom(&[x], value, Box::new(MaxPool { arg })))
    }

    /// 2x2 stride-2 max pooling over `[N, C, H, W]` (floor on odd sizes).
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape("maxpool2d", format!("{xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(planes * ho * wo);
        let mut arg = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for r in 0..ho {
                for c in 0..wo {
                    let base = p * h * w;
                    let cand = [
                        base + 2 * r * w + 2 * c,
                        base + 2 * r * w + 2 * c + 1,
                        base + (2 * r + 1) * w + 2 * c,
                        base + (2 * r + 1) * w + 2 * c + 1,
                    ];
                    let mut best = cand[0];
                    for &j in &cand[1..] {
                        if xd[j] > xd[best] {
                            best = j;
                        }
                    }
                    y.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], ho, wo], y)?;
        Ok(self.custom(&[x], value, Box::new(MaxPool { arg })))
    }

    /// Mean over every axis after the channel axis: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape("global_avg_pool", format!("{xs:?}")));
        }
        let s: usize = xs[2..].iter().product();
        let y = self
            .value(x)
            .data()
            .chunks(s)
            .map(|c| T::of(c.iter().map(|v| v.f64()).sum::<f64>() / s as f64))
            .collect();
        let value = Tensor::new(&[xs[0], xs[1]], y)?;
        Ok(self.custom(&[x], value, Box::new(GlobalAvgPool { s })))
    }

    /// Inverted dropout. With `rng = None` (evaluation) or `p = 0` this is
    /// the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = rng.filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let y = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape(), y)?;
        Ok(self.custom(&[x], value, Box::new(Dropout { mask })))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, `logits: [N, C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::shape("softmax_cross_entropy", format!("logits {ls:?}, {} labels", labels.len())));
        }
        let (n, c) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::domain(format!("label {bad} out of range for {c} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &ld[i * c..(i + 1) * c];
            let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.f64() - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = T::of((row[j].f64() - mx).exp() / z);
            }
            loss += z.ln() + mx - row[labels[i]].f64();
        }
        let value = Tensor::scalar(T::of(loss / n as f64));
        let op = SoftmaxCe {
            probs,
            labels: labels.to_vec(),
            c,
        };
        Ok(self.custom(&[logits], value, Box::new(op)))
    }
}

struct Fc {
    n: usize,
    din: usize,
    dout: usize,
}

impl<T: Real> Op<T> for Fc {
    fn name(&self) -> &'static str {
        "fc"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, din, dout) = (self.n, self.din, self.dout);
        let gx = needs[0].then(|| {
            let mut g = vec![T::zero(); n * din];
            matmul(n, dout, din, grad, false, inputs[1].data(), true, &mut g, false);
            g
        });
        let gw = needs[1].then(|| {
            let mut g = vec![T::zero(); din * dout];
            matmul(din, n, dout, inputs[0].data(), true, grad, false, &mut g, false);
            g
        });
        let gb = needs[2].then(|| {
            (0..dout)
                .map(|j| T::of((0..n).map(|i| grad[i * dout + j].f64()).sum()))
                .collect()
        });
        vec![gx, gw, gb]
    }
}

#[derive(Clone, Copy)]
struct Conv1dGeom {
    n: usize,
    ci: usize,
    l: usize,
    co: usize,
    k: usize,
}

impl Conv1dGeom {
    fn lout(&self) -> usize {
        self.l - self.k + 1
    }

    /// `cols[(c * K + j) * Lout + t] = x[c, t + j]`
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let lo = self.lout();
        for c in 0..self.ci {
            for j in 0..self.k {
                let dst = &mut cols[(c * self.k + j) * lo..(c * self.k + j + 1) * lo];
                dst.copy_from_slice(&x[c * self.l + j..c * self.l + j + lo]);
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let lo = self.lout();
        for c in 0..self.ci {
            for j in 0..self.k {
                let src = &cols[(c * self.k + j) * lo..(c * self.k + j + 1) * lo];
                for (d, &s) in x[c * self.l + j..c * self.l + j + lo].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
    }
}

struct Conv1d(Conv1dGeom);

impl<T: Real> Op<T> for Conv1d {
    fn name(&self) -> &'static str {
        "conv1d"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = self.0;
        let lo = g.lout();
        let rows = g.ci * g.k;
        let (xd, kd) = (inputs[0].data(), inputs[1].data());
        let mut gx = needs[0].then(|| vec![T::zero(); xd.len()]);
        let mut gk = needs[1].then(|| vec![T::zero(); kd.len()]);
        let mut cols = vec![T::zero(); rows * lo];
        for s in 0..g.n {
            let gy = &grad[s * g.co * lo..(s + 1) * g.co * lo];
            if let Some(gk) = gk.as_mut() {
                g.im2col(&xd[s * g.ci * g.l..(s + 1) * g.ci * g.l], &mut cols);
                matmul(g.co, lo, rows, gy, false, &cols, true, gk, true);
            }
            if let Some(gx) = gx.as_mut() {
                matmul(rows, g.co, lo, kd, true, gy, false, &mut cols, false);
                g.col2im_add(&cols, &mut gx[s * g.ci * g.l..(s + 1) * g.ci * g.l]);
            }
        }
        vec![gx, gk]
    }
}

#[derive(Clone, Copy)]
struct Conv2dGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
}

impl Conv2dGeom {
    /// `cols[((c * K + dy) * K + dx) * HW + r * W + q] = x[c, r + dy - p, q + dx - p]`
    /// with zeros outside the image.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        for c in 0..self.ci {
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((c * k + dy) * k + dx) * hw;
                    for r in 0..h {
                        let sr = r as isize + dy as isize - pad;
                        let dst = &mut cols[row + r * w..row + (r + 1) * w];
                        if sr < 0 || sr >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[c * hw + sr as usize * w..c * hw + (sr as usize + 1) * w];
                        for (q, d) in dst.iter_mut().enumerate() {
                            let sq = q as isize + dx as isize - pad;
                            *d = if sq < 0 || sq >= w as isize { T::zero() } else { src[sq as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        for c in 0..self.ci {
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((c * k + dy) * k + dx) * hw;
                    for r in 0..h {
                        let sr = r as isize + dy as isize - pad;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        for q in 0..w {
                            let sq = q as isize + dx as isize - pad;
                            if sq >= 0 && sq < w as isize {
                                let d = &mut x[c * hw + sr as usize * w + sq as usize];
                                *d = *d + cols[row + r * w + q];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d(Conv2dGeom);

impl<T: Real> Op<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = self.0;
        let hw = g.h * g.w;
        let rows = g.ci * g.k * g.k;
        let (xd, kd) = (inputs[0].data(), inputs[1].data());
        let mut gx = needs[0].then(|| vec![T::zero(); xd.len()]);
        let mut gk = needs[1].then(|| vec![T::zero(); kd.len()]);
        let mut cols = vec![T::zero(); rows * hw];
        for s in 0..g.n {
            let gy = &grad[s * g.co * hw..(s + 1) * g.co * hw];
            if let Some(gk) = gk.as_mut() {
                g.im2col(&xd[s * g.ci * hw..(s + 1) * g.ci * hw], &mut cols);
                matmul(g.co, hw, rows, gy, false, &cols, true, gk, true);
            }
            if let Some(gx) = gx.as_mut() {
                matmul(rows, g.co, hw, kd, true, gy, false, &mut cols, false);
                g.col2im_add(&cols, &mut gx[s * g.ci * hw..(s + 1) * g.ci * hw]);
            }
        }
        vec![gx, gk]
    }
}

struct BatchNorm<T> {
    n: usize,
    c: usize,
    s: usize,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    train: bool,
}

impl<T: Real> Op<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, c, s) = (self.n, self.c, self.s);
        let m = (n * s) as f64;
        let gamma = inputs[1].data();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    let g = grad[j].f64();
                    sum_g[ch] += g;
                    sum_gx[ch] += g * self.xhat[j].f64();
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); grad.len()];
            for i in 0..n {
                for ch in 0..c {
                    let k = gamma[ch].f64() * self.inv_std[ch];
                    let base = (i * c + ch) * s;
                    for j in base..base + s {
                        let g = grad[j].f64();
                        gx[j] = T::of(if self.train {
                            k * (g - sum_g[ch] / m - self.xhat[j].f64() * sum_gx[ch] / m)
                        } else {
                            k * g
                        });
                    }
                }
            }
            gx
        });
        let gg = needs[1].then(|| sum_gx.iter().map(|&v| T::of(v)).collect());
        let gb = needs[2].then(|| sum_g.iter().map(|&v| T::of(v)).collect());
        vec![gx, gg, gb]
    }
}

struct MaxPool {
    arg: Vec<usize>,
}

impl<T: Real> Op<T> for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); inputs[0].numel()];
        for (&j, &g) in self.arg.iter().zip(grad) {
            gx[j] = gx[j] + g;
        }
        vec![Some(gx)]
    }
}

struct GlobalAvgPool {
    s: usize,
}

impl<T: Real> Op<T> for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let inv = T::of(1.0 / self.s as f64);
        vec![Some(grad.iter().flat_map(|&g| std::iter::repeat_n(g * inv, self.s)).collect())]
    }
}

struct Dropout<T> {
    mask: Vec<T>,
}

impl<T: Real> Op<T> for Dropout<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect())]
    }
}

struct SoftmaxCe<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    c: usize,
}

impl<T: Real> Op<T> for SoftmaxCe<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let n = self.labels.len();
        let scale = grad[0].f64() / n as f64;
        let mut g: Vec<T> = self.probs.iter().map(|&p| T::of(p.f64() * scale)).collect();
        for (i, &y) in self.labels.iter().enumerate() {
            let j = i * self.c + y;
            g[j] = g[j] - T::of(scale);
        }
        vec![Some(g)]
    }
}
