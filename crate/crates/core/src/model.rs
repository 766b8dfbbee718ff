//! Dual-stream network: a 1D convolutional encoder over raw EEG, a 2D
//! convolutional encoder over multi-spectral topography maps, gated
//! attention fusion, the classification head and the orthogonality loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, BufferId, Graph, Op, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::topomap::MAP_CHANNELS;
use crate::data::N_CHANNELS;

/// Vectors with a norm below this are left out of the orthogonality loss.
pub const MIN_EMBED_NORM: f64 = 1e-12;
pub const DEFAULT_BETA: f64 = 0.4;

/// How the two embeddings are combined before the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `a * tanh(E_freq) + (1 - a) * tanh(E_time)` with a learned gate `a`.
    Attention,
    /// `tanh(FC([E_time, E_freq]))`.
    Concat,
    /// `tanh(E_time)`; the topography encoder is not built.
    RawOnly,
    /// `tanh(E_freq)`; the raw encoder is not built.
    TopoOnly,
}

impl Fusion {
    pub fn uses_raw(self) -> bool {
        self != Fusion::TopoOnly
    }

    pub fn uses_topo(self) -> bool {
        self != Fusion::RawOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of the three blocks of each encoder; the last entry
    /// is the embedding size.
    pub widths: [usize; 3],
    /// Temporal kernel length of each raw-encoder block.
    pub raw_kernels: [usize; 3],
    /// Side of the square topography-encoder kernels (odd).
    pub topo_kernel: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            widths: [64, 128, 256],
            raw_kernels: [32, 16, 8],
            topo_kernel: 3,
            classifier_hidden: 128,
            dropout: 0.5,
            fusion: Fusion::Attention,
        }
    }

    /// Same topology with 8x fewer channels, for single-machine runs.
    pub fn desk() -> Self {
        ModelConfig {
            widths: [8, 16, 32],
            classifier_hidden: 16,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.widths[2]
    }

    /// Temporal length after each raw-encoder block, or an error if the
    /// input is too short for the kernel chain.
    pub fn raw_trace(&self, len: usize) -> Result<[usize; 3]> {
        let mut l = len;
        let mut out = [0; 3];
        for (b, &k) in self.raw_kernels.iter().enumerate() {
            if l + 2 < 2 * k || l + 2 - 2 * k < 2 {
                return Err(Error::domain(format!(
                    "raw input of {len} samples is too short for the encoder kernels {:?}",
                    self.raw_kernels
                )));
            }
            l = (l + 2 - 2 * k) / 2;
            out[b] = l;
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.raw_kernels.contains(&0) || self.classifier_hidden == 0 {
            return Err(Error::domain("model widths and kernels must be positive"));
        }
        if self.topo_kernel % 2 == 0 {
            return Err(Error::domain("topography kernel size must be odd"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::domain("dropout rate must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    raw: Vec<[ConvBn; 2]>,
    topo: Vec<[ConvBn; 2]>,
    gate: Option<(Dense, Dense)>,
    concat: Option<Dense>,
    hidden: Dense,
    out: Dense,
}

/// Forward-pass mode: training uses batch statistics and dropout.
pub enum Mode<'r> {
    Train(&'r mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Network inputs. `raw` is `[N, 4, L]`, `topo` is `[N, 15, H, W]`; a
/// stream the configuration does not use may be `None`.
#[derive(Clone, Copy, Default)]
pub struct Inputs<'a, T: Real> {
    pub raw: Option<&'a Tensor<T>>,
    pub topo: Option<&'a Tensor<T>>,
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    pub e_time: Option<Var>,
    pub e_freq: Option<Var>,
    pub gate: Option<Var>,
    pub fused: Var,
    pub logits: Var,
    /// Running-statistics updates to apply after a training step.
    pub bn_updates: Vec<(BufferId, BufferId, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-bound..bound))
        .collect()
}

struct Builder<'a, T: Real> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn tensor(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let v = kaiming_uniform(self.rng, shape, fan_in);
        self.store.add(name, Tensor::from_f64(shape, &v).expect("shape matches"))
    }

    fn conv_bn(&mut self, name: &str, shape: &[usize]) -> ConvBn {
        let fan_in = shape[1..].iter().product();
        let c = shape[0];
        ConvBn {
            kernel: self.tensor(&format!("{name}.kernel"), shape, fan_in),
            gamma: self.store.add(&format!("{name}.bn.gamma"), Tensor::filled(&[c], T::one())),
            beta: self.store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[c])),
            mean: self.store.add_buffer(&format!("{name}.bn.running_mean"), vec![0.0; c]),
            var: self.store.add_buffer(&format!("{name}.bn.running_var"), vec![1.0; c]),
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        Dense {
            w: self.tensor(&format!("{name}.weight"), &[din, dout], din),
            b: self.store.add(&format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized network (Kaiming-uniform weights,
    /// zero biases, unit batch-norm scales).
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
        };
        let w = config.widths;
        let m = config.embed_dim();
        let mut raw = Vec::new();
        if config.fusion.uses_raw() {
            let mut cin = N_CHANNELS;
            for (i, (&cout, &k)) in w.iter().zip(&config.raw_kernels).enumerate() {
                let first = b.conv_bn(&format!("raw.block{}.conv1", i + 1), &[cout, cin, k]);
                let second = b.conv_bn(&format!("raw.block{}.conv2", i + 1), &[cout, cout, k]);
                raw.push([first, second]);
                cin = cout;
            }
        }
        let mut topo = Vec::new();
        if config.fusion.uses_topo() {
            let k = config.topo_kernel;
            let mut cin = MAP_CHANNELS;
            for (i, &cout) in w.iter().enumerate() {
                let first = b.conv_bn(&format!("topo.block{}.conv1", i + 1), &[cout, cin, k, k]);
                let second = b.conv_bn(&format!("topo.block{}.conv2", i + 1), &[cout, cout, k, k]);
                topo.push([first, second]);
                cin = cout;
            }
        }
        let gate = (config.fusion == Fusion::Attention)
            .then(|| (b.dense("attention.fc1", 2 * m, m), b.dense("attention.fc2", m, m)));
        let concat = (config.fusion == Fusion::Concat).then(|| b.dense("concat.fc", 2 * m, m));
        let hidden = b.dense("classifier.fc1", m, config.classifier_hidden);
        let out = b.dense("classifier.fc2", config.classifier_hidden, 2);
        Ok(Model {
            config,
            params: b.store,
            layout: Layout {
                raw,
                topo,
                gate,
                concat,
                hidden,
                out,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn apply_bn_updates(&mut self, updates: &[(BufferId, BufferId, BatchStats)]) {
        for (mean, var, stats) in updates {
            let mut m = self.params.buffer(*mean).to_vec();
            let mut v = self.params.buffer(*var).to_vec();
            stats.update_running(&mut m, &mut v);
            self.params.buffer_mut(*mean).copy_from_slice(&m);
            self.params.buffer_mut(*var).copy_from_slice(&v);
        }
    }

    /// Rounds the running statistics to `f32`, the precision a checkpoint
    /// stores, so a reloaded model evaluates identically.
    pub fn round_buffers_to_f32(&mut self) {
        let ids: Vec<BufferId> = self
            .layout
            .raw
            .iter()
            .chain(&self.layout.topo)
            .flatten()
            .flat_map(|cb| [cb.mean, cb.var])
            .collect();
        for id in ids {
            for v in self.params.buffer_mut(id) {
                *v = *v as f32 as f64;
            }
        }
    }

    fn conv_bn_relu(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        layer: &ConvBn,
        two_d: bool,
        mode: &Mode<'_>,
        updates: &mut Vec<(BufferId, BufferId, BatchStats)>,
    ) -> Result<Var> {
        let k = vars[layer.kernel.index()];
        let y = if two_d { g.conv2d_same(x, k)? } else { g.conv1d(x, k)? };
        let bn_mode = if mode.is_train() {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: self.params.buffer(layer.mean),
                var: self.params.buffer(layer.var),
            }
        };
        let (y, stats) = g.batchnorm(y, vars[layer.gamma.index()], vars[layer.beta.index()], bn_mode)?;
        if let Some(stats) = stats {
            updates.push((layer.mean, layer.var, stats));
        }
        Ok(g.relu(y))
    }

    fn encode(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        input: Var,
        blocks: &[[ConvBn; 2]],
        two_d: bool,
        mode: &Mode<'_>,
        updates: &mut Vec<(BufferId, BufferId, BatchStats)>,
    ) -> Result<Var> {
        let mut x = input;
        for block in blocks {
            for layer in block {
                x = self.conv_bn_relu(g, vars, x, layer, two_d, mode, updates)?;
            }
            x = if two_d { g.maxpool2d(x)? } else { g.maxpool1d(x)? };
        }
        g.global_avg_pool(x)
    }

    /// Raw-signal encoder: `[N, 4, L] -> [N, M]`.
    pub fn encode_raw(&self, g: &mut Graph<T>, vars: &[Var], raw: Var, mode: &Mode<'_>) -> Result<(Var, Vec<(BufferId, BufferId, BatchStats)>)> {
        let shape = g.shape(raw).to_vec();
        if self.layout.raw.is_empty() {
            return Err(Error::domain("this model has no raw-signal encoder"));
        }
        if shape.len() != 3 || shape[1] != N_CHANNELS {
            return Err(Error::shape("encode_raw", format!("expected [N, {N_CHANNELS}, L], got {shape:?}")));
        }
        self.config.raw_trace(shape[2])?;
        let mut updates = Vec::new();
        let e = self.encode(g, vars, raw, &self.layout.raw, false, mode, &mut updates)?;
        Ok((e, updates))
    }

    /// Topography encoder: `[N, 15, H, W] -> [N, M]`.
    pub fn encode_topo(&self, g: &mut Graph<T>, vars: &[Var], topo: Var, mode: &Mode<'_>) -> Result<(Var, Vec<(BufferId, BufferId, BatchStats)>)> {
        let shape = g.shape(topo).to_vec();
        if self.layout.topo.is_empty() {
            return Err(Error::domain("this model has no topography encoder"));
        }
        if shape.len() != 4 || shape[1] != MAP_CHANNELS {
            return Err(Error::shape("encode_topo", format!("expected [N, {MAP_CHANNELS}, H, W], got {shape:?}")));
        }
        if shape[2] < 8 || shape[3] < 8 {
            return Err(Error::domain("topography maps must be at least 8x8"));
        }
        let mut updates = Vec::new();
        let e = self.encode(g, vars, topo, &self.layout.topo, true, mode, &mut updates)?;
        Ok((e, updates))
    }

    /// Gated fusion. Returns the fused embedding and the gate `a`.
    pub fn attention_fuse(&self, g: &mut Graph<T>, vars: &[Var], e_time: Var, e_freq: Var) -> Result<(Var, Var)> {
        let (fc1, fc2) = self
            .layout
            .gate
            .as_ref()
            .ok_or_else(|| Error::domain("this model has no attention module"))?;
        let cat = g.concat_features(e_time, e_freq)?;
        let h = g.fc(cat, vars[fc1.w.index()], vars[fc1.b.index()])?;
        let h = g.relu(h);
        let h = g.fc(h, vars[fc2.w.index()], vars[fc2.b.index()])?;
        let a = g.sigmoid(h);
        let fused = fuse_with_gate(g, e_time, e_freq, a)?;
        Ok((fused, a))
    }

    /// Two-layer head producing `[N, 2]` logits.
    pub fn classify(&self, g: &mut Graph<T>, vars: &[Var], fused: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let (hid, out) = (&self.layout.hidden, &self.layout.out);
        let h = g.fc(fused, vars[hid.w.index()], vars[hid.b.index()])?;
        let h = g.relu(h);
        let h = match mode {
            Mode::Train(rng) => g.dropout(h, self.config.dropout, Some(&mut **rng))?,
            Mode::Eval => h,
        };
        g.fc(h, vars[out.w.index()], vars[out.b.index()])
    }

    /// Full forward pass with parameters already bound to `vars`
    /// (see [`ParamStore::bind`]).
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], inputs: Inputs<'_, T>, mode: &mut Mode<'_>) -> Result<Forward> {
        let mut bn_updates = Vec::new();
        let need = |t: Option<&Tensor<T>>, what: &str| t.cloned().ok_or_else(|| Error::domain(format!("missing {what} input")));
        let e_time = if self.config.fusion.uses_raw() {
            let x = g.constant(need(inputs.raw, "raw")?);
            let (e, u) = self.encode_raw(g, vars, x, mode)?;
            bn_updates.extend(u);
            Some(e)
        } else {
            None
        };
        let e_freq = if self.config.fusion.uses_topo() {
            let x = g.constant(need(inputs.topo, "topography")?);
            let (e, u) = self.encode_topo(g, vars, x, mode)?;
            bn_updates.extend(u);
            Some(e)
        } else {
            None
        };
        let (fused, gate) = match (self.config.fusion, e_time, e_freq) {
            (Fusion::Attention, Some(t), Some(f)) => {
                let (fused, a) = self.attention_fuse(g, vars, t, f)?;
                (fused, Some(a))
            }
            (Fusion::Concat, Some(t), Some(f)) => {
                let fc = self.layout.concat.as_ref().expect("concat layer built");
                let cat = g.concat_features(t, f)?;
                let h = g.fc(cat, vars[fc.w.index()], vars[fc.b.index()])?;
                (g.tanh(h), None)
            }
            (Fusion::RawOnly, Some(t), _) => (g.tanh(t), None),
            (Fusion::TopoOnly, _, Some(f)) => (g.tanh(f), None),
            _ => unreachable!("streams are built according to the fusion mode"),
        };
        let logits = self.classify(g, vars, fused, mode)?;
        Ok(Forward {
            e_time,
            e_freq,
            gate,
            fused,
            logits,
            bn_updates,
        })
    }
}

/// `a * tanh(e_freq) + (1 - a) * tanh(e_time)`.
pub fn fuse_with_gate<T: Real>(g: &mut Graph<T>, e_time: Var, e_freq: Var, a: Var) -> Result<Var> {
    let tf = g.tanh(e_freq);
    let tt = g.tanh(e_time);
    let from_freq = g.mul(a, tf)?;
    let b = g.one_minus(a);
    let from_time = g.mul(b, tt)?;
    g.add(from_freq, from_time)
}

/// Result of [`orthogonality_loss`].
pub struct OrthoLoss {
    pub loss: Var,
    /// Vectors whose norm fell below [`MIN_EMBED_NORM`]; their pairs were
    /// left out.
    pub excluded: usize,
}

/// `1 - sum_same cos(E_i, E_j) + sum_diff cos(E_i, E_k)` over unordered
/// pairs `i < j` of the rows of `fused: [N, M]`. With `pair_mean` each sum is
/// replaced by its mean over the pairs it covers.
pub fn orthogonality_loss<T: Real>(g: &mut Graph<T>, fused: Var, labels: &[usize], pair_mean: bool) -> Result<OrthoLoss> {
    let shape = g.shape(fused).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("orthogonality_loss", format!("{shape:?} with {} labels", labels.len())));
    }
    if shape[0] < 2 {
        return Err(Error::domain("orthogonality loss needs at least 2 samples"));
    }
    let (n, m) = (shape[0], shape[1]);
    let rows: Vec<Vec<f64>> = g.value(fused).data().chunks(m).map(|r| r.iter().map(|v| v.f64()).collect()).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let valid: Vec<bool> = norms.iter().map(|&nv| nv > MIN_EMBED_NORM).collect();
    let mut pairs = Vec::new();
    let (mut n_same, mut n_diff) = (0usize, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if valid[i] && valid[j] {
                let same = labels[i] == labels[j];
                if same {
                    n_same += 1;
                } else {
                    n_diff += 1;
                }
                pairs.push((i, j, same));
            }
        }
    }
    let w_same = if pair_mean && n_same > 0 { 1.0 / n_same as f64 } else { 1.0 };
    let w_diff = if pair_mean && n_diff > 0 { 1.0 / n_diff as f64 } else { 1.0 };
    let mut loss = 1.0;
    let mut coef = Vec::with_capacity(pairs.len());
    for &(i, j, same) in &pairs {
        let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
        let cos = dot / (norms[i] * norms[j]);
        let w = if same { -w_same } else { w_diff };
        loss += w * cos;
        coef.push((i, j, w, cos));
    }
    let op = OrthoOp { rows, norms, coef, m };
    let var = g.custom(&[fused], Tensor::scalar(T::of(loss)), Box::new(op));
    Ok(OrthoLoss {
        loss: var,
        excluded: valid.iter().filter(|v| !**v).count(),
    })
}

struct OrthoOp {
    rows: Vec<Vec<f64>>,
    norms: Vec<f64>,
    coef: Vec<(usize, usize, f64, f64)>,
    m: usize,
}

impl<T: Real> Op<T> for OrthoOp {
    fn name(&self) -> &'static str {
        "orthogonality_loss"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let up = grad[0].f64();
        let mut gx = vec![0.0; self.rows.len() * self.m];
        // d cos(u, v) / du = v / (|u||v|) - cos * u / |u|^2
        for &(i, j, w, cos) in &self.coef {
            let (ni, nj) = (self.norms[i], self.norms[j]);
            let s = up * w;
            for d in 0..self.m {
                let (u, v) = (self.rows[i][d], self.rows[j][d]);
                gx[i * self.m + d] += s * (v / (ni * nj) - cos * u / (ni * ni));
                gx[j * self.m + d] += s * (u / (ni * nj) - cos * v / (nj * nj));
            }
        }
        vec![Some(gx.into_iter().map(T::of).collect())]
    }
}

/// Per-batch loss components; `l_total = l_ce + beta * l_oc`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_ce: f64,
    pub l_oc: f64,
    pub beta: f64,
    pub l_total: f64,
}

pub fn total_loss(l_ce: f64, l_oc: f64, beta: f64) -> Result<LossTerms> {
    if !(beta >= 0.0) {
        return Err(Error::domain(format!("beta must be non-negative, got {beta}")));
    }
    Ok(LossTerms {
        l_ce,
        l_oc,
        beta,
        l_total: l_ce + beta * l_oc,
    })
}

/// Builds `L_CE + beta * L_OC` on the graph. With `beta == 0` the
/// orthogonality term is still reported but contributes no gradient.
pub fn loss_on_graph<T: Real>(
    g: &mut Graph<T>,
    fwd: &Forward,
    labels: &[usize],
    beta: f64,
    pair_mean: bool,
) -> Result<(Var, LossTerms)> {
    let ce = g.softmax_cross_entropy(fwd.logits, labels)?;
    let l_ce = g.value(ce).data()[0].f64();
    let oc = orthogonality_loss(g, fwd.fused, labels, pair_mean)?;
    let l_oc = g.value(oc.loss).data()[0].f64();
    let terms = total_loss(l_ce, l_oc, beta)?;
    if beta == 0.0 {
        return Ok((ce, terms));
    }
    let weighted = g.scale(oc.loss, beta);
    Ok((g.add(ce, weighted)?, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(fusion: Fusion) -> ModelConfig {
        ModelConfig {
            widths: [2, 3, 4],
            raw_kernels: [3, 3, 2],
            topo_kernel: 3,
            classifier_hidden: 3,
            dropout: 0.5,
            fusion,
        }
    }

    #[test]
    fn paper_raw_trace() {
        assert_eq!(ModelConfig::paper().raw_trace(2560).unwrap(), [1249, 609, 297]);
        assert!(ModelConfig::paper().raw_trace(100).is_err());
    }

    #[test]
    fn parameter_names_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::<f32>::new(ModelConfig::desk(), &mut rng).unwrap();
        let p = m.params();
        assert!(p.find("raw.block1.conv1.kernel").is_some());
        assert_eq!(p.get(p.find("attention.fc1.weight").unwrap()).shape(), &[64, 32]);
        assert_eq!(p.get(p.find("classifier.fc2.weight").unwrap()).shape(), &[16, 2]);
        assert!(p.find("concat.fc.weight").is_none());
    }

    #[test]
    fn forward_shapes_for_every_fusion() {
        for fusion in [Fusion::Attention, Fusion::Concat, Fusion::RawOnly, Fusion::TopoOnly] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let m = Model::<f64>::new(tiny(fusion), &mut rng).unwrap();
            let raw = Tensor::from_f64(&[3, 4, 40], &(0..480).map(|i| (i as f64 * 0.1).sin()).collect::<Vec<_>>()).unwrap();
            let topo = Tensor::filled(&[3, 15, 8, 8], 0.5);
            let mut g = Graph::new();
            let vars = m.params().bind(&mut g);
            let fwd = m
                .forward(&mut g, &vars, Inputs { raw: Some(&raw), topo: Some(&topo) }, &mut Mode::Eval)
                .unwrap();
            assert_eq!(g.shape(fwd.logits), &[3, 2]);
            assert_eq!(g.shape(fwd.fused), &[3, 4]);
            assert_eq!(fwd.gate.is_some(), fusion == Fusion::Attention);
            assert!(g.value(fwd.fused).data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn missing_stream_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::<f64>::new(tiny(Fusion::Attention), &mut rng).unwrap();
        let topo = Tensor::filled(&[2, 15, 8, 8], 0.5);
        let mut g = Graph::new();
        let vars = m.params().bind(&mut g);
        let r = m.forward(&mut g, &vars, Inputs { raw: None, topo: Some(&topo) }, &mut Mode::Eval);
        assert!(r.is_err());
    }

    #[test]
    fn ortho_closed_forms() {
        let cases = [([1.0, 2.0, 1.0, 2.0], [0, 0], 0.0), ([1.0, 0.0, 0.0, 1.0], [0, 1], 1.0), ([1.0, 2.0, 1.0, 2.0], [0, 1], 2.0)];
        for (v, labels, want) in cases {
            let mut g = Graph::<f64>::new();
            let x = g.param(Tensor::from_f64(&[2, 2], &v).unwrap());
            let oc = orthogonality_loss(&mut g, x, &labels, false).unwrap();
            assert!((g.value(oc.loss).data()[0] - want).abs() < 1e-12);
            assert_eq!(oc.excluded, 0);
        }
    }

    #[test]
    fn ortho_excludes_zero_vectors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let oc = orthogonality_loss(&mut g, x, &[0, 0, 0], false).unwrap();
        assert_eq!(oc.excluded, 1);
        assert!((g.value(oc.loss).data()[0] - 0.0).abs() < 1e-12);
        g.backward(oc.loss).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ortho_pair_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3, 1], &[1.0, 1.0, 1.0]).unwrap());
        let sum = orthogonality_loss(&mut g, x, &[0, 0, 0], false).unwrap();
        let mean = orthogonality_loss(&mut g, x, &[0, 0, 0], true).unwrap();
        assert!((g.value(sum.loss).data()[0] + 2.0).abs() < 1e-12);
        assert!(g.value(mean.loss).data()[0].abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let t = total_loss(0.7, 0.5, 0.4).unwrap();
        assert!((t.l_total - 0.9).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 0.5, 0.0).unwrap().l_total, 0.7);
        assert!(total_loss(0.7, 0.5, -1.0).is_err());
        assert_eq!(DEFAULT_BETA, 0.4);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::<f32>::new(tiny(Fusion::Attention), &mut rng).unwrap();
        m.round_buffers_to_f32();
        m.params().save(&path).unwrap();
        let mut other = Model::<f32>::new(tiny(Fusion::Attention), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        other.params_mut().load(&path).unwrap();
        let raw = Tensor::filled(&[2, 4, 40], 0.3f32);
        let topo = Tensor::filled(&[2, 15, 8, 8], 0.2f32);
        let logits = |model: &Model<f32>| {
            let mut g = Graph::new();
            let vars = model.params().bind(&mut g);
            let fwd = model
                .forward(&mut g, &vars, Inputs { raw: Some(&raw), topo: Some(&topo) }, &mut Mode::Eval)
                .unwrap();
            g.value(fwd.logits).data().to_vec()
        };
        assert_eq!(logits(&m), logits(&other));
    }
}
