//! Post-hoc analyses of trained models: Monte-Carlo gate dropout, masked
//! proportion curves, evidence maps and their population statistics, and
//! the localization score against a ground-truth mask.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{crop_transform, CoordinateTensor, EncoderSpec, Volume};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{gated_pool, indicator_for, position_branch_forward, ModelState, POOL_EPS};
use crate::ops::sigmoid;
use crate::synth::derive_seed;
use crate::tensor::{Real, Tensor};
use crate::train::{center_offset, evaluate_sample, Sample};

/// Drop probability rule for Monte-Carlo gate dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropScheme {
    /// p = 0
    Zero,
    /// p = 0.5
    Half,
    /// p = g
    Gate,
    /// p = 1 - g
    OneMinusGate,
}

impl DropScheme {
    pub const ALL: [DropScheme; 4] = [DropScheme::Zero, DropScheme::Half, DropScheme::Gate, DropScheme::OneMinusGate];

    pub fn name(self) -> &'static str {
        match self {
            DropScheme::Zero => "zero",
            DropScheme::Half => "half",
            DropScheme::Gate => "g",
            DropScheme::OneMinusGate => "one-minus-g",
        }
    }

    pub fn probability(self, g: f64) -> f64 {
        match self {
            DropScheme::Zero => 0.0,
            DropScheme::Half => 0.5,
            DropScheme::Gate => g,
            DropScheme::OneMinusGate => 1.0 - g,
        }
    }
}

impl core::str::FromStr for DropScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DropScheme::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown drop scheme {s:?}")))
    }
}

/// Soft-voted posterior of one volume: the mean over `trials` of the pooled
/// posterior with each gate value independently zeroed.
pub fn mc_dropout_posterior<T: Real>(
    responses: &Tensor<T>,
    gate: &Tensor<T>,
    scheme: DropScheme,
    trials: usize,
    seed: u64,
    volume_id: usize,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let mut dropped = gate.clone();
    let mut mean = 0.0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, volume_id as u64, t as u64));
        for (d, &g) in dropped.data_mut().iter_mut().zip(gate.data()) {
            let p = scheme.probability(g.to_f64_lossless());
            *d = if p > 0.0 && rng.random::<f64>() < p { T::zero() } else { g };
        }
        let z = gated_pool(responses, &dropped, T::of(POOL_EPS))?;
        let y = sigmoid(z).to_f64_lossless();
        // Running mean: exact when every trial agrees.
        mean += (y - mean) / (t + 1) as f64;
    }
    Ok(mean)
}

/// Monte-Carlo gate dropout over a labelled set (gated models only).
#[derive(Debug, Clone, PartialEq)]
pub struct McDropoutReport {
    pub scheme: DropScheme,
    pub trials: usize,
    pub scores: Vec<f64>,
    pub metrics: MetricsReport,
}

pub fn mc_dropout_eval<T: Real>(
    state: &ModelState<T>,
    samples: &[Sample<T>],
    coord: &CoordinateTensor<T>,
    crop: [usize; 3],
    scheme: DropScheme,
    trials: usize,
    seed: u64,
) -> Result<McDropoutReport> {
    if !state.variant().has_gate() {
        return Err(Error::VariantMismatch {
            expected: "PG or FG",
            found: state.variant().name(),
        });
    }
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let out = evaluate_sample(state, &s.volume, coord, crop)?;
        let gate = out.gate.as_ref().expect("gated variant");
        scores.push(mc_dropout_posterior(&out.patch_responses, gate, scheme, trials, seed, s.id)?);
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    Ok(McDropoutReport {
        scheme,
        trials,
        metrics: compute_metrics(&scores, &labels, 0.5)?,
        scores,
    })
}

/// `start, start + step, ...` up to and including `stop` (within 1e-9).
pub fn threshold_range(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) {
        return Err(Error::InvalidArgument(format!(
            "bad threshold range {start}:{stop}:{step}"
        )));
    }
    let n = libm::floor((stop - start) / step + 1e-9) as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// Fraction of gate values strictly above `t`.
pub fn mask_proportion<T: Real>(gate: &Tensor<T>, t: f64) -> f64 {
    let above = gate.data().iter().filter(|g| g.to_f64_lossless() > t).count();
    above as f64 / gate.len() as f64
}

pub fn mask_proportion_curve<T: Real>(gate: &Tensor<T>, thresholds: &[f64]) -> Vec<f64> {
    thresholds.iter().map(|&t| mask_proportion(gate, t)).collect()
}

/// Per-subject curves averaged over subjects.
pub fn mean_mask_curve<T: Real>(gates: &[Tensor<T>], thresholds: &[f64]) -> Result<Vec<f64>> {
    if gates.is_empty() {
        return Err(Error::InsufficientSamples("no gate maps".into()));
    }
    let mut acc = vec![0.0; thresholds.len()];
    for g in gates {
        for (a, p) in acc.iter_mut().zip(mask_proportion_curve(g, thresholds)) {
            *a += p;
        }
    }
    Ok(acc.into_iter().map(|a| a / gates.len() as f64).collect())
}

/// Gate of a PG model on the centred crop of a `canonical`-sized volume.
/// It depends on position only, so no volume is needed.
pub fn position_gate<T: Real>(state: &ModelState<T>, canonical: [usize; 3], crop: [usize; 3]) -> Result<Tensor<T>> {
    let coord = CoordinateTensor::<T>::build(canonical)?;
    let offset = center_offset(canonical, crop)?;
    let blank = Volume::new(Tensor::zeros(&[1, canonical[0], canonical[1], canonical[2]]));
    let (_, cropped) = crop_transform(&blank, &coord, offset, crop)?;
    position_branch_forward(state, &indicator_for(state, &cropped)?)
}

/// Trilinear upsampling of a grid map `[1, d, h, w]` onto `out_dims`
/// voxels. Voxel `u` sits at grid position `(u - offset) / stride`, clamped
/// to the grid, so grid cell `o` lands on voxel `offset + stride * o`.
pub fn upsample_trilinear<T: Real>(
    grid: &Tensor<T>,
    out_dims: [usize; 3],
    offset: [usize; 3],
    stride: usize,
) -> Result<Tensor<T>> {
    let g = grid.spatial()?;
    if grid.channels()? != 1 || g.contains(&0) || stride == 0 {
        return Err(Error::Shape(format!("cannot upsample grid {:?}", grid.shape())));
    }
    // Per axis: lower cell, upper cell, weight of the upper cell.
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..out_dims[a])
                .map(|u| {
                    let pos = (u as f64 - offset[a] as f64) / stride as f64;
                    let pos = pos.clamp(0.0, (g[a] - 1) as f64);
                    let lo = libm::floor(pos) as usize;
                    let hi = (lo + 1).min(g[a] - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        })
        .collect();
    let at = |z: usize, y: usize, x: usize| grid.at4(0, z, y, x).to_f64_lossless();
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for &(z0, z1, wz) in &taps[0] {
        for &(y0, y1, wy) in &taps[1] {
            for &(x0, x1, wx) in &taps[2] {
                let lerp = |a: f64, b: f64, w: f64| a + (b - a) * w;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), wx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), wx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), wx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), wx);
                let v = lerp(lerp(c00, c01, wy), lerp(c10, c11, wy), wz);
                out.push(T::of(v));
            }
        }
    }
    Tensor::new(vec![1, out_dims[0], out_dims[1], out_dims[2]], out)
}

/// Grid-level and upsampled maps of one volume on its centred crop.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceMap<T> {
    pub crop_offset: [usize; 3],
    pub responses: Tensor<T>,
    /// Absent for mean-pooling models.
    pub gate: Option<Tensor<T>>,
    pub evidence: Tensor<T>,
    pub positive: Tensor<T>,
    pub up_gate: Option<Tensor<T>>,
    pub up_evidence: Tensor<T>,
    pub up_positive: Tensor<T>,
    pub image_response: f64,
    pub posterior: f64,
}

pub fn positive_part<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn evidence_map<T: Real>(
    state: &ModelState<T>,
    volume: &Tensor<T>,
    coord: &CoordinateTensor<T>,
    crop: [usize; 3],
) -> Result<EvidenceMap<T>> {
    let out = evaluate_sample(state, volume, coord, crop)?;
    let offset = center_offset(volume.spatial()?, crop)?;
    let j = state.encoder_spec().total_stride;
    let up = |t: &Tensor<T>| upsample_trilinear(t, crop, [0; 3], j);
    let positive = positive_part(&out.evidence);
    Ok(EvidenceMap {
        crop_offset: offset,
        up_gate: out.gate.as_ref().map(up).transpose()?,
        up_evidence: up(&out.evidence)?,
        up_positive: up(&positive)?,
        responses: out.patch_responses,
        gate: out.gate,
        evidence: out.evidence,
        positive,
        image_response: out.image_response.to_f64_lossless(),
        posterior: out.posterior.to_f64_lossless(),
    })
}

/// Voxelwise mean and population standard deviation of positive evidence
/// over true positives, on the grid and upsampled to canonical size.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceStats<T> {
    pub true_positives: Vec<usize>,
    pub mean_grid: Tensor<T>,
    pub std_grid: Tensor<T>,
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

pub fn evidence_statistics<T: Real>(
    state: &ModelState<T>,
    samples: &[Sample<T>],
    coord: &CoordinateTensor<T>,
    crop: [usize; 3],
) -> Result<EvidenceStats<T>> {
    let mut maps = Vec::new();
    let mut ids = Vec::new();
    let mut canonical = [0; 3];
    let mut offset = [0; 3];
    for s in samples {
        let out = evaluate_sample(state, &s.volume, coord, crop)?;
        if s.label == 1 && out.posterior.to_f64_lossless() >= 0.5 {
            maps.push(positive_part(&out.evidence));
            ids.push(s.id);
            canonical = s.volume.spatial()?;
            offset = center_offset(canonical, crop)?;
        }
    }
    if maps.is_empty() {
        return Err(Error::InsufficientSamples("no true positives".into()));
    }
    let shape = maps[0].shape().to_vec();
    let n = maps.len() as f64;
    let mut mean = vec![0.0f64; maps[0].len()];
    for m in &maps {
        for (a, v) in mean.iter_mut().zip(m.data()) {
            *a += v.to_f64_lossless();
        }
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut var = vec![0.0f64; mean.len()];
    for m in &maps {
        for ((a, v), mu) in var.iter_mut().zip(m.data()).zip(&mean) {
            let d = v.to_f64_lossless() - mu;
            *a += d * d;
        }
    }
    let mean_grid = Tensor::new(shape.clone(), mean.into_iter().map(T::of).collect())?;
    let std_grid = Tensor::new(shape, var.into_iter().map(|v| T::of(libm::sqrt(v / n))).collect())?;
    let j = state.encoder_spec().total_stride;
    Ok(EvidenceStats {
        true_positives: ids,
        mean: upsample_trilinear(&mean_grid, canonical, offset, j)?,
        std: upsample_trilinear(&std_grid, canonical, offset, j)?,
        mean_grid,
        std_grid,
    })
}

/// Binary dilation of a `[1, D, H, W]` mask by a cube of half-width `radius`.
pub fn dilate_cube<T: Real>(mask: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    let dims = mask.spatial()?;
    let mut cur: Vec<bool> = mask.data().iter().map(|&v| v > T::zero()).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for a in 0..3 {
        let mut next = vec![false; cur.len()];
        for (i, n) in next.iter_mut().enumerate() {
            let pos = (i / strides[a]) % dims[a];
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(dims[a] - 1);
            let base = i - pos * strides[a];
            *n = (lo..=hi).any(|p| cur[base + p * strides[a]]);
        }
        cur = next;
    }
    Ok(Tensor::from_fn(mask.shape(), |i| if cur[i] { T::one() } else { T::zero() }))
}

/// Mask sampled at the patch centres of a crop: cell `o` reads canonical
/// voxel `offset + J * o`.
pub fn grid_mask<T: Real>(mask: &Tensor<T>, spec: &EncoderSpec, offset: [usize; 3], crop: [usize; 3]) -> Result<Tensor<T>> {
    let grid = spec.grid_shape(crop)?;
    let j = spec.total_stride;
    Ok(Tensor::from_fn(&[1, grid[0], grid[1], grid[2]], |i| {
        let o = [i / (grid[1] * grid[2]), (i / grid[2]) % grid[1], i % grid[2]];
        mask.at4(0, offset[0] + j * o[0], offset[1] + j * o[1], offset[2] + j * o[2])
    }))
}

/// Fraction of the top-`q` voxels of `map` lying inside `mask`. Ties at the
/// cut-off are credited in proportion, so a constant map scores exactly
/// the mask fraction.
pub fn localization_score<T: Real, U: Real>(map: &Tensor<T>, mask: &Tensor<U>, q: f64) -> Result<f64> {
    if map.len() != mask.len() || map.is_empty() {
        return Err(Error::Shape(format!("map {:?} vs mask {:?}", map.shape(), mask.shape())));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("top fraction must lie in (0, 1], got {q}")));
    }
    if !mask.data().iter().any(|&m| m > U::zero()) {
        return Err(Error::InvalidArgument("empty ground-truth mask".into()));
    }
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map.data()[b].partial_cmp(&map.data()[a]).unwrap_or(core::cmp::Ordering::Equal));
    let budget = q * map.len() as f64;
    let (mut taken, mut hits) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() && taken < budget {
        let v = map.data()[order[i]];
        let mut j = i;
        let mut inside = 0usize;
        while j < order.len() && map.data()[order[j]] == v {
            inside += (mask.data()[order[j]] > U::zero()) as usize;
            j += 1;
        }
        let size = (j - i) as f64;
        let take = size.min(budget - taken);
        hits += inside as f64 * take / size;
        taken += take;
        i = j;
    }
    Ok(hits / taken)
}

/// Fraction of voxels inside the mask: the expected score of a random map.
pub fn mask_fraction<U: Real>(mask: &Tensor<U>) -> f64 {
    mask.data().iter().filter(|&&m| m > U::zero()).count() as f64 / mask.len() as f64
}
