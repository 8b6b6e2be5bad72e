//! Joint objective, training loop with early stopping, fold plans,
//! cross-validation and transfer initialization.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{closed_form_indicator, crop_transform, CoordinateTensor, Volume};
use crate::metrics::{auroc, compute_metrics, mean_std, MeanStd, MetricsReport};
use crate::model::{build_forward, forward_with_indicator, ForwardOutputs, ForwardVars, ModelConfig, ModelState, Variant};
use crate::ops::{clamp_prob, NormMode};
use crate::optim::{lr_schedule, Adam};
use crate::synth::derive_seed;
use crate::tensor::{Real, Tensor};

/// Smoothed targets for labels 0 and 1.
pub const SMOOTH_TARGETS: [f64; 2] = [0.1, 0.9];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    /// Weight of the positive term; the negative term gets `1 - beta`.
    pub beta: f64,
}

impl LossConfig {
    pub fn new(lambda: f64, beta: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidArgument(format!("beta must lie in (0, 1), got {beta}")));
        }
        Ok(Self { lambda, beta })
    }

    /// Coefficients of `-log(p)` and `-log(1 - p)` for one label.
    pub fn weights(&self, label: u8) -> (f64, f64) {
        let t = smoothed_target(label);
        (self.beta * t, (1.0 - self.beta) * (1.0 - t))
    }
}

pub fn smoothed_target(label: u8) -> f64 {
    SMOOTH_TARGETS[(label != 0) as usize]
}

/// Fraction of negative labels.
pub fn beta_from_labels(labels: &[u8]) -> Result<f64> {
    let neg = labels.iter().filter(|&&y| y == 0).count();
    if neg == 0 || neg == labels.len() {
        return Err(Error::SingleClass);
    }
    Ok(neg as f64 / labels.len() as f64)
}

/// Balanced, label-smoothed cross-entropy of one posterior.
pub fn loss_cls(posterior: f64, label: u8, beta: f64) -> f64 {
    let p = clamp_prob(posterior);
    let t = smoothed_target(label);
    -beta * t * libm::log(p) - (1.0 - beta) * (1.0 - t) * libm::log(1.0 - p)
}

/// Mean binary entropy of a gate map (values clamped).
pub fn gate_entropy<T: Real>(gate: &Tensor<T>) -> f64 {
    let mut acc = 0.0;
    for &g in gate.data() {
        let p = clamp_prob(g.to_f64_lossless());
        acc -= p * libm::log(p) + (1.0 - p) * libm::log(1.0 - p);
    }
    acc / gate.len() as f64
}

/// `-H(G)`, minimized to maximize the gate entropy.
pub fn loss_ent<T: Real>(gate: &Tensor<T>) -> f64 {
    -gate_entropy(gate)
}

pub fn loss_total<T: Real>(posterior: f64, label: u8, beta: f64, gate: Option<&Tensor<T>>, lambda: f64) -> f64 {
    let cls = loss_cls(posterior, label, beta);
    match gate {
        Some(g) => cls + lambda * loss_ent(g),
        None => cls,
    }
}

/// Graph handles of the recorded objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub cls: Var,
    pub ent: Option<Var>,
    pub forward: ForwardVars,
}

/// Records forward pass and loss. The entropy term is built on the gate
/// copy whose only gradient route is the gate branch.
#[allow(clippy::too_many_arguments)]
pub fn build_objective<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &[Var],
    input: Var,
    indicator: Option<Var>,
    label: u8,
    loss: &LossConfig,
    mode: NormMode,
) -> Result<Objective> {
    let forward = build_forward(g, cfg, params, input, indicator, mode)?;
    let (pw, nw) = loss.weights(label);
    let cls = g.balanced_bce(forward.posterior, T::of(pw), T::of(nw))?;
    let (total, ent) = match forward.gate_for_entropy {
        None => (cls, None),
        Some(gate) => {
            let ent = g.neg_entropy(gate)?;
            let weighted = g.scale(ent, T::of(loss.lambda))?;
            (g.add(cls, weighted)?, Some(ent))
        }
    };
    Ok(Objective { total, cls, ent, forward })
}

/// One subject: a normalized canonical volume `[1, D, H, W]` and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: usize,
    pub volume: Tensor<T>,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub crop: [usize; 3],
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale schedule (200 epochs at 1e-4) at the given crop size.
    pub fn full_scale(crop: [usize; 3], seed: u64) -> Self {
        Self {
            epochs: 200,
            patience: 30,
            batch: 4,
            peak_lr: 1e-4,
            warmup_epochs: 5,
            crop,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidArgument(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.patience == 0 || !(self.peak_lr > 0.0) {
            return Err(Error::InvalidArgument("patience and peak_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Centred crop offset: half the margin, rounded down.
pub fn center_offset(dims: [usize; 3], size: [usize; 3]) -> Result<[usize; 3]> {
    check_crop(dims, size)?;
    Ok([0, 1, 2].map(|a| (dims[a] - size[a]) / 2))
}

/// Uniform offset in `[0, margin]` per axis.
pub fn random_offset<R: Rng>(dims: [usize; 3], size: [usize; 3], rng: &mut R) -> Result<[usize; 3]> {
    check_crop(dims, size)?;
    Ok([0, 1, 2].map(|a| rng.random_range(0..=dims[a] - size[a])))
}

fn check_crop(dims: [usize; 3], size: [usize; 3]) -> Result<()> {
    if (0..3).any(|a| size[a] > dims[a] || size[a] == 0) {
        return Err(Error::InvalidArgument(format!("crop {:?} larger than volume {:?}", size, dims)));
    }
    Ok(())
}

/// Random crop in training mode (`rng` given), centred crop otherwise.
pub fn augment_crop<T: Real, R: Rng>(
    volume: &Volume<T>,
    coord: &CoordinateTensor<T>,
    size: [usize; 3],
    rng: Option<&mut R>,
) -> Result<(Volume<T>, CoordinateTensor<T>)> {
    let dims = volume.dims();
    let offset = match rng {
        Some(r) => random_offset(dims, size, r)?,
        None => center_offset(dims, size)?,
    };
    crop_transform(volume, coord, offset, size)
}

/// Network input and (for PG) position indicator of one crop.
struct Prepared<T> {
    input: Tensor<T>,
    indicator: Option<Tensor<T>>,
}

fn prepare<T: Real>(
    state: &ModelState<T>,
    volume: &Tensor<T>,
    coord: &CoordinateTensor<T>,
    offset: [usize; 3],
    size: [usize; 3],
) -> Result<Prepared<T>> {
    let (v, c) = crop_transform(&Volume::new(volume.clone()), coord, offset, size)?;
    let indicator = match state.variant() {
        Variant::Pg => Some(closed_form_indicator(&c, &state.encoder_spec())?.tensor),
        _ => None,
    };
    Ok(Prepared {
        input: v.tensor,
        indicator,
    })
}

/// Deterministic forward pass on the centred crop.
pub fn evaluate_sample<T: Real>(
    state: &ModelState<T>,
    volume: &Tensor<T>,
    coord: &CoordinateTensor<T>,
    crop: [usize; 3],
) -> Result<ForwardOutputs<T>> {
    let offset = center_offset(volume.spatial()?, crop)?;
    let p = prepare(state, volume, coord, offset, crop)?;
    forward_with_indicator(state, &p.input, p.indicator.as_ref(), NormMode::Live)
}

/// Posteriors of every sample on centred crops.
pub fn predict<T: Real>(
    state: &ModelState<T>,
    samples: &[Sample<T>],
    coord: &CoordinateTensor<T>,
    crop: [usize; 3],
) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| Ok(evaluate_sample(state, &s.volume, coord, crop)?.posterior.to_f64_lossless()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_auroc: Option<f64>,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub best: ModelState<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Mean classification loss, accuracy and AUROC on centred crops.
pub fn validation_metrics<T: Real>(
    state: &ModelState<T>,
    samples: &[Sample<T>],
    coord: &CoordinateTensor<T>,
    crop: [usize; 3],
    beta: f64,
) -> Result<(f64, MetricsReport)> {
    let scores = predict(state, samples, coord, crop)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let loss = scores.iter().zip(&labels).map(|(&p, &y)| loss_cls(p, y, beta)).sum::<f64>() / scores.len() as f64;
    Ok((loss, compute_metrics(&scores, &labels, 0.5)?))
}

fn sample_step<T: Real>(
    state: &ModelState<T>,
    prepared: &Prepared<T>,
    label: u8,
    loss: &LossConfig,
    grads: &mut [Tensor<T>],
) -> Result<f64> {
    let mut g = Graph::new();
    let params: Vec<Var> = state.params().iter().map(|p| g.param(p.clone())).collect();
    let input = g.constant(prepared.input.clone());
    let ind = prepared.indicator.as_ref().map(|t| g.constant(t.clone()));
    let obj = build_objective(&mut g, state.config(), &params, input, ind, label, loss, NormMode::Live)?;
    let value = g.value(obj.total).item().to_f64_lossless();
    let mut back = g.backward(obj.total)?;
    for (acc, &p) in grads.iter_mut().zip(&params) {
        let d = back.take(p);
        for (a, &v) in acc.data_mut().iter_mut().zip(d.data()) {
            *a += v;
        }
    }
    Ok(value)
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { epoch },
        other => other,
    }
}

/// Mini-batch training with per-step warm-up + cosine learning rate,
/// per-epoch validation and early stopping on validation loss. Returns
/// the parameters of the best validation epoch.
pub fn train<T: Real>(
    init: ModelState<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    coord: &CoordinateTensor<T>,
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InsufficientSamples("training needs train and validation samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = init;
    let mut adam = Adam::new(state.params());
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0, state.clone());
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut grads: Vec<Tensor<T>> = state.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            for &i in chunk {
                let s = &train_set[i];
                let offset = random_offset(s.volume.spatial()?, cfg.crop, &mut rng)?;
                let p = prepare(&state, &s.volume, coord, offset, cfg.crop)?;
                let l = sample_step(&state, &p, s.label, loss, &mut grads).map_err(diverged(epoch))?;
                if !l.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                epoch_loss += l;
            }
            let inv = T::of(1.0 / chunk.len() as f64);
            for gr in &mut grads {
                for v in gr.data_mut() {
                    *v = *v * inv;
                }
            }
            step += 1;
            lr = lr_schedule(step, total_steps, warmup_steps, cfg.peak_lr);
            adam.step(state.params_mut(), &grads, lr).map_err(diverged(epoch))?;
        }
        let (val_loss, m) = validation_metrics(&state, val_set, coord, cfg.crop, loss.beta).map_err(diverged(epoch))?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss,
            val_acc: m.accuracy,
            val_auroc: m.auroc,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
        if val_loss < best.0 {
            best = (val_loss, epoch, state.clone());
        } else if epoch - best.1 >= cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        history,
        stopped_early,
    })
}

pub const FOLDS: usize = 5;

/// Assignment of samples to five groups. Fold `k` tests on group `k`,
/// validates on group `k + 1` (cyclically) and trains on the other three.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    groups: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldPlan {
    /// Groups numbered 1..=5.
    pub fn from_groups(groups: Vec<u8>) -> Result<Self> {
        if let Some(g) = groups.iter().find(|&&g| g == 0 || g as usize > FOLDS) {
            return Err(Error::InvalidArgument(format!("fold group {g} outside 1..=5")));
        }
        Ok(Self { groups })
    }

    /// Round-robin assignment within each class.
    pub fn stratified(labels: &[u8]) -> Self {
        let mut seen = [0usize; 2];
        let groups = labels
            .iter()
            .map(|&y| {
                let c = &mut seen[(y != 0) as usize];
                let g = (*c % FOLDS) as u8 + 1;
                *c += 1;
                g
            })
            .collect();
        Self { groups }
    }

    pub fn groups(&self) -> &[u8] {
        &self.groups
    }

    pub fn split(&self, fold: usize) -> FoldSplit {
        let test_g = (fold % FOLDS) as u8 + 1;
        let val_g = ((fold + 1) % FOLDS) as u8 + 1;
        let mut s = FoldSplit {
            fold,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, &g) in self.groups.iter().enumerate() {
            if g == test_g {
                s.test.push(i);
            } else if g == val_g {
                s.val.push(i);
            } else {
                s.train.push(i);
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult<T> {
    pub fold: usize,
    pub beta: f64,
    pub metrics: MetricsReport,
    pub test_ids: Vec<usize>,
    pub test_labels: Vec<u8>,
    pub test_scores: Vec<f64>,
    pub outcome: TrainOutcome<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalReport<T> {
    pub folds: Vec<FoldResult<T>>,
    pub accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub auroc: MeanStd,
}

impl<T> CrossvalReport<T> {
    /// AUROC of the pooled out-of-fold test scores.
    pub fn pooled_auroc(&self) -> Option<f64> {
        let scores: Vec<f64> = self.folds.iter().flat_map(|f| f.test_scores.iter().copied()).collect();
        let labels: Vec<u8> = self.folds.iter().flat_map(|f| f.test_labels.iter().copied()).collect();
        auroc(&scores, &labels)
    }
}

fn pick<T: Clone>(data: &[Sample<T>], idx: &[usize]) -> Vec<Sample<T>> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Five-fold cross-validation. `init(k)` supplies the starting model of
/// fold `k`; β is computed on each fold's training split and every fold
/// trains with a seed derived from `cfg.seed` and `k`.
#[allow(clippy::too_many_arguments)]
pub fn crossval_run<T: Real>(
    data: &[Sample<T>],
    plan: &FoldPlan,
    coord: &CoordinateTensor<T>,
    cfg: &TrainConfig,
    lambda: f64,
    folds: &[usize],
    mut init: impl FnMut(usize) -> Result<ModelState<T>>,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<CrossvalReport<T>> {
    if plan.groups().len() != data.len() {
        return Err(Error::Shape(format!(
            "fold plan covers {} samples, dataset has {}",
            plan.groups().len(),
            data.len()
        )));
    }
    for label in 0..2u8 {
        let n = data.iter().filter(|s| s.label == label).count();
        if n < FOLDS {
            return Err(Error::InsufficientSamples(format!(
                "class {label} has {n} samples, need at least {FOLDS}"
            )));
        }
    }
    let mut results = Vec::new();
    for &k in folds {
        let split = plan.split(k);
        let (tr, va, te) = (pick(data, &split.train), pick(data, &split.val), pick(data, &split.test));
        let labels: Vec<u8> = tr.iter().map(|s| s.label).collect();
        let beta = beta_from_labels(&labels)?;
        let loss = LossConfig::new(lambda, beta)?;
        let fold_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, k as u64, 7),
            ..*cfg
        };
        let outcome = train(init(k)?, &tr, &va, coord, &fold_cfg, &loss, |r| on_epoch(k, r))?;
        let test_scores = predict(&outcome.best, &te, coord, cfg.crop)?;
        let test_labels: Vec<u8> = te.iter().map(|s| s.label).collect();
        let metrics = compute_metrics(&test_scores, &test_labels, 0.5)?;
        results.push(FoldResult {
            fold: k,
            beta,
            metrics,
            test_ids: te.iter().map(|s| s.id).collect(),
            test_labels,
            test_scores,
            outcome,
        });
    }
    let col = |f: fn(&MetricsReport) -> f64| mean_std(&results.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    Ok(CrossvalReport {
        accuracy: col(|m| m.accuracy),
        sensitivity: col(|m| m.sensitivity),
        specificity: col(|m| m.specificity),
        auroc: col(|m| m.auroc.unwrap_or(f64::NAN)),
        folds: results,
    })
}

/// Starting model for fold `k` of a transfer run: a fresh target with
/// every parameter copied from the fold-`k` source.
pub fn paired_transfer<T: Real>(sources: &[ModelState<T>], k: usize, target: ModelState<T>) -> Result<ModelState<T>> {
    let src = sources
        .get(k)
        .ok_or_else(|| Error::OutOfBounds(format!("no source model for fold {k}")))?;
    let mut target = target;
    crate::model::transfer_init(src, &mut target)?;
    Ok(target)
}
