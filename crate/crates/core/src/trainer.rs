//! Adam, the plateau learning-rate schedule, classification metrics, the
//! per-fold training loop and the leave-one-subject-out driver.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Real, Tensor};
use crate::data::{loso_splits, CognitiveLoad, LosoSplit, SubjectId};
use crate::error::{Error, Result};
use crate::model::{self, Inputs, Mode, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub beta: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub pair_mean: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-4,
            epochs: 200,
            beta: model::DEFAULT_BETA,
            plateau_factor: 0.1,
            plateau_patience: 10,
            pair_mean: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.epochs == 0 || self.plateau_patience == 0 {
            return Err(Error::domain("batch_size must be >= 2; epochs and patience must be positive"));
        }
        if !(self.lr > 0.0) || !(self.beta >= 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::domain("lr must be positive, beta non-negative, factor in (0, 1)"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with moments kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was NaN or infinite; nothing was changed.
    SkippedNonFinite,
}

impl Adam {
    pub fn new<T: Real>(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<StepOutcome> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        for (g, m) in grads.iter().zip(&self.m) {
            if g.len() != m.len() {
                return Err(Error::shape("adam", "gradient size differs from parameter size"));
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grads[k][i].f64();
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                p[i] = T::of(p[i].f64() - update);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Reduce-on-plateau schedule over a monitored loss (lower is better).
#[derive(Clone, Debug)]
pub struct Plateau {
    lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub const THRESHOLD: f64 = 1e-4;

    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Plateau {
            lr,
            factor,
            patience,
            threshold: Self::THRESHOLD,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch. An epoch improves when its loss is below
    /// `best - 1e-4 * |best|`; after `patience` consecutive epochs without
    /// improvement the rate is multiplied by `factor` and the count resets.
    /// Returns whether the rate was reduced.
    pub fn step(&mut self, loss: f64) -> bool {
        if self.best.is_infinite() || loss < self.best - self.threshold * self.best.abs() {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Binary confusion counts with High as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(truth: &[CognitiveLoad], pred: &[CognitiveLoad]) -> Self {
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (CognitiveLoad::High, CognitiveLoad::High) => c.tp += 1,
                (CognitiveLoad::Low, CognitiveLoad::Low) => c.tn += 1,
                (CognitiveLoad::Low, CognitiveLoad::High) => c.fp += 1,
                (CognitiveLoad::High, CognitiveLoad::Low) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// F1 of the High class.
    pub f1: f64,
    /// Mean of the per-class F1 scores.
    pub macro_f1: f64,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        if c.total() == 0 {
            return Err(Error::domain("metrics of an empty set"));
        }
        let f1_high = f1(c.tp, c.fp, c.fn_);
        let f1_low = f1(c.tn, c.fn_, c.fp);
        Ok(Metrics {
            accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
            f1: f1_high,
            macro_f1: 0.5 * (f1_high + f1_low),
            confusion: c,
        })
    }

    pub fn from_predictions(truth: &[CognitiveLoad], pred: &[CognitiveLoad]) -> Result<Self> {
        Self::from_confusion(Confusion::from_predictions(truth, pred))
    }
}

/// One prepared example: z-scored raw channels (`[4, L]`, row-major) and a
/// topography tensor in channel-first layout (`[15, H, W]`).
#[derive(Clone, Debug)]
pub struct Sample {
    pub subject: SubjectId,
    pub window_index: usize,
    pub label: CognitiveLoad,
    pub raw: Vec<f32>,
    pub map: Vec<f32>,
}

/// Shapes shared by every sample of a set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleShape {
    pub raw: [usize; 2],
    pub map: [usize; 3],
}

fn batch_inputs(samples: &[Sample], idx: &[usize], shape: SampleShape, cfg: &ModelConfig) -> Result<(Option<Tensor<f32>>, Option<Tensor<f32>>)> {
    let n = idx.len();
    let raw = if cfg.fusion.uses_raw() {
        let mut d = Vec::with_capacity(n * shape.raw[0] * shape.raw[1]);
        for &i in idx {
            d.extend_from_slice(&samples[i].raw);
        }
        Some(Tensor::new(&[n, shape.raw[0], shape.raw[1]], d)?)
    } else {
        None
    };
    let topo = if cfg.fusion.uses_topo() {
        let mut d = Vec::with_capacity(n * shape.map.iter().product::<usize>());
        for &i in idx {
            d.extend_from_slice(&samples[i].map);
        }
        Some(Tensor::new(&[n, shape.map[0], shape.map[1], shape.map[2]], d)?)
    } else {
        None
    };
    Ok((raw, topo))
}

fn sample_shape(samples: &[Sample], map_shape: [usize; 3]) -> Result<SampleShape> {
    let first = samples.first().ok_or_else(|| Error::domain("empty sample set"))?;
    let n_ch = crate::data::N_CHANNELS;
    let shape = SampleShape {
        raw: [n_ch, first.raw.len() / n_ch],
        map: map_shape,
    };
    for s in samples {
        if s.raw.len() != shape.raw[0] * shape.raw[1] || s.map.len() != map_shape.iter().product::<usize>() {
            return Err(Error::shape("samples", format!("sample {}/{} has a different size", s.subject, s.window_index)));
        }
    }
    Ok(shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_oc: f64,
    pub l_total: f64,
    pub lr: f64,
    pub skipped_steps: usize,
}

pub struct TrainedModel {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
}

/// Trains a fresh model on `train` (all samples must share one shape;
/// maps are `[15, H, W]` with `map_shape` giving that triple).
pub fn train_fold(model_cfg: &ModelConfig, cfg: &TrainConfig, train: &[Sample], map_shape: [usize; 3]) -> Result<TrainedModel> {
    cfg.validate()?;
    let shape = sample_shape(train, map_shape)?;
    let classes: BTreeSet<CognitiveLoad> = train.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        return Err(Error::domain("training data contains a single class"));
    }
    if train.len() < 2 {
        return Err(Error::domain("training needs at least 2 samples"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f32>::new(model_cfg.clone(), &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1b_0000_0001);
    let mut adam = Adam::new(model.params());
    let mut sched = Plateau::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = sched.lr();
        let (mut ce, mut oc, mut tot, mut batches, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let (raw, topo) = batch_inputs(train, idx, shape, model_cfg)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label.index()).collect();
            let mut g = Graph::new();
            let vars = model.params().bind(&mut g);
            let inputs = Inputs {
                raw: raw.as_ref(),
                topo: topo.as_ref(),
            };
            let fwd = model.forward(&mut g, &vars, inputs, &mut Mode::Train(&mut rng))?;
            let (loss, terms) = model::loss_on_graph(&mut g, &fwd, &labels, cfg.beta, cfg.pair_mean)?;
            if !terms.l_total.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}")));
            }
            g.backward(loss)?;
            let grads = model.params().grads(&g, &vars);
            match adam.step(model.params_mut(), &grads, lr)? {
                StepOutcome::Applied => model.apply_bn_updates(&fwd.bn_updates),
                StepOutcome::SkippedNonFinite => skipped += 1,
            }
            ce += terms.l_ce;
            oc += terms.l_oc;
            tot += terms.l_total;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::domain("no mini-batch of at least 2 samples"));
        }
        let nb = batches as f64;
        let entry = EpochLog {
            epoch,
            l_ce: ce / nb,
            l_oc: oc / nb,
            l_total: tot / nb,
            lr,
            skipped_steps: skipped,
        };
        sched.step(entry.l_total);
        log.push(entry);
    }
    model.round_buffers_to_f32();
    Ok(TrainedModel { model, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub subject: SubjectId,
    pub window_index: usize,
    pub label: CognitiveLoad,
    pub predicted: CognitiveLoad,
    /// Softmax probability of High.
    pub p_high: f64,
}

pub struct Evaluation {
    pub metrics: Metrics,
    pub scores: Vec<SampleScore>,
    /// Fused embedding per sample.
    pub fused: Vec<Vec<f32>>,
    /// Attention gate per sample, when the model has one.
    pub gates: Option<Vec<Vec<f32>>>,
}

const EVAL_BATCH: usize = 32;

/// Evaluation-mode forward pass over `test`.
pub fn evaluate(model: &Model<f32>, test: &[Sample], map_shape: [usize; 3]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::domain("evaluation on an empty test set"));
    }
    let shape = sample_shape(test, map_shape)?;
    let mut scores = Vec::with_capacity(test.len());
    let mut fused = Vec::with_capacity(test.len());
    let mut gates: Option<Vec<Vec<f32>>> = None;
    let all: Vec<usize> = (0..test.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let (raw, topo) = batch_inputs(test, idx, shape, model.config())?;
        let mut g = Graph::new();
        let vars = model.params().bind(&mut g);
        let inputs = Inputs {
            raw: raw.as_ref(),
            topo: topo.as_ref(),
        };
        let fwd = model.forward(&mut g, &vars, inputs, &mut Mode::Eval)?;
        let logits = g.value(fwd.logits).data();
        let m = model.config().embed_dim();
        for (k, &i) in idx.iter().enumerate() {
            let (l0, l1) = (logits[2 * k].f64(), logits[2 * k + 1].f64());
            if !(l0.is_finite() && l1.is_finite()) {
                return Err(Error::Numerical("non-finite logits during evaluation".into()));
            }
            let p_high = 1.0 / (1.0 + (l0 - l1).exp());
            let predicted = if l1 > l0 { CognitiveLoad::High } else { CognitiveLoad::Low };
            scores.push(SampleScore {
                subject: test[i].subject.clone(),
                window_index: test[i].window_index,
                label: test[i].label,
                predicted,
                p_high,
            });
            fused.push(g.value(fwd.fused).data()[k * m..(k + 1) * m].to_vec());
            if let Some(a) = fwd.gate {
                gates
                    .get_or_insert_with(Vec::new)
                    .push(g.value(a).data()[k * m..(k + 1) * m].to_vec());
            }
        }
    }
    let truth: Vec<CognitiveLoad> = scores.iter().map(|s| s.label).collect();
    let pred: Vec<CognitiveLoad> = scores.iter().map(|s| s.predicted).collect();
    Ok(Evaluation {
        metrics: Metrics::from_predictions(&truth, &pred)?,
        scores,
        fused,
        gates,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = crate::dsp::mean_std(values);
        Some(MeanStd { mean, std })
    }

    /// `mean(std)` in percent, two decimals.
    pub fn percent(&self) -> String {
        format!("{:.2}({:.2})", 100.0 * self.mean, 100.0 * self.std)
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}({:.2})", self.mean, self.std)
    }
}

/// Outcome of one LOSO fold.
pub struct Fold<R> {
    pub split: LosoSplit,
    pub result: Result<R>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoSummary {
    pub n_folds: usize,
    pub n_failed: usize,
    pub failed: Vec<SubjectId>,
    pub accuracy: Option<MeanStd>,
    pub f1: Option<MeanStd>,
    pub macro_f1: Option<MeanStd>,
}

impl LosoSummary {
    pub fn from_folds<R>(folds: &[Fold<R>], metrics: impl Fn(&R) -> Metrics) -> Self {
        let ok: Vec<Metrics> = folds.iter().filter_map(|f| f.result.as_ref().ok().map(&metrics)).collect();
        let failed: Vec<SubjectId> = folds
            .iter()
            .filter(|f| f.result.is_err())
            .map(|f| f.split.test_subject.clone())
            .collect();
        let col = |get: fn(&Metrics) -> f64| MeanStd::of(&ok.iter().map(get).collect::<Vec<_>>());
        LosoSummary {
            n_folds: folds.len(),
            n_failed: failed.len(),
            failed,
            accuracy: col(|m| m.accuracy),
            f1: col(|m| m.f1),
            macro_f1: col(|m| m.macro_f1),
        }
    }
}

/// Runs `fold` once per leave-one-subject-out split, at most `jobs` at a
/// time. A failing fold does not stop the others; results come back in
/// subject order.
pub fn run_loso<R: Send>(subjects: &BTreeSet<SubjectId>, jobs: usize, fold: impl Fn(&LosoSplit) -> Result<R> + Sync) -> Result<Vec<Fold<R>>> {
    let splits = loso_splits(subjects)?;
    let jobs = jobs.clamp(1, splits.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..splits.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= splits.len() {
                    break;
                }
                let r = fold(&splits[i]);
                slots.lock().expect("no poisoned folds")[i] = Some(r);
            });
        }
    });
    let slots = slots.into_inner().expect("no poisoned folds");
    Ok(splits
        .into_iter()
        .zip(slots)
        .map(|(split, r)| Fold {
            split,
            result: r.expect("every fold ran"),
        })
        .collect())
}
