//! Central finite-difference verification of reverse-mode gradients (64-bit).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::CoordinateTensor;
use crate::model::{indicator_for, ModelConfig, ModelState, Variant, Widths};
use crate::ops::{NormMode, NORM_EPS, PROB_FLOOR};
use crate::tensor::Tensor;
use crate::train::{build_objective, LossConfig};

/// Step used by the gradient-check suites.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates passed over because a difference step changed a
    /// piecewise branch.
    pub skipped: usize,
}

fn eval<F>(f: &F, point: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point.clone());
    let y = f(&mut g, x)?;
    Ok(g.value(y).item())
}

/// Worst relative error between `backward` and central differences over
/// every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..point.len()).collect();
    Ok(grad_check_at(f, point, step, &all)?.max_rel_error)
}

/// As [`grad_check`], restricted to the listed flat coordinates.
pub fn grad_check_at<F>(f: F, point: &Tensor<f64>, step: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(x);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = point.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Central-difference check of an arbitrary parameter vector: `value` maps
/// parameters to the scalar objective and `analytic` holds its gradient.
pub fn check_flat<F>(mut value: F, params: &mut [f64], analytic: &[f64], step: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &i in indices {
        let orig = params[i];
        params[i] = orig + step;
        let up = value(params)?;
        params[i] = orig - step;
        let down = value(params)?;
        params[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Which group of checks to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteModule {
    All,
    Engine,
    Model,
    Loss,
}

impl SuiteModule {
    pub fn name(self) -> &'static str {
        match self {
            SuiteModule::All => "all",
            SuiteModule::Engine => "engine",
            SuiteModule::Model => "model",
            SuiteModule::Loss => "loss",
        }
    }
}

impl core::str::FromStr for SuiteModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SuiteModule::All),
            "engine" => Ok(SuiteModule::Engine),
            "model" => Ok(SuiteModule::Model),
            "loss" => Ok(SuiteModule::Loss),
            other => Err(Error::InvalidArgument(format!("unknown gradcheck module {other:?}"))),
        }
    }
}

/// Tolerance for a single primitive.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for whole-network objectives.
pub const NETWORK_TOL: f64 = 1e-3;

/// One named check and its worst error.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub module: &'static str,
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Normal draws kept at least `gap` away from zero, so that no central
/// difference straddles a ReLU kink.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() > gap {
            break v;
        }
    })
}

/// A random permutation of evenly spaced values: no two entries are closer
/// than `spacing`, so pooling windows never tie within a difference step.
fn distinct_values(shape: &[usize], spacing: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mid = n as f64 / 2.0;
    Tensor::from_fn(shape, |i| (order[i] as f64 - mid) * spacing)
}

fn probabilities(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.05..0.95))
}

/// `sum(w * y)`: reduces a tensor output to a scalar with fixed random weights.
fn contract(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn worst(reports: Vec<GradCheckReport>) -> GradCheckReport {
    reports
        .into_iter()
        .reduce(|a, b| if b.max_rel_error > a.max_rel_error { b } else { a })
        .expect("at least one point")
}

type Primitive = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

fn check_all<F>(f: F, point: &Tensor<f64>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..point.len()).collect();
    grad_check_at(f, point, DEFAULT_STEP, &all)
}

fn conv_input(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let k = normal_tensor(&[3, 2, 3, 3, 3], rng);
    let b = normal_tensor(&[3], rng);
    let w = normal_tensor(&[3, 3, 3, 3], rng);
    check_all(
        |g, x| {
            let (kv, bv) = (g.constant(k.clone()), g.constant(b.clone()));
            let y = g.conv3d(x, kv, Some(bv), 2, 1)?;
            contract(g, y, &w)
        },
        &normal_tensor(&[2, 5, 5, 5], rng),
    )
}

fn conv_kernel(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let input = normal_tensor(&[2, 5, 5, 5], rng);
    let w = normal_tensor(&[3, 3, 3, 3], rng);
    check_all(
        |g, k| {
            let x = g.constant(input.clone());
            let y = g.conv3d(x, k, None, 2, 1)?;
            contract(g, y, &w)
        },
        &normal_tensor(&[3, 2, 3, 3, 3], rng),
    )
}

fn conv_bias(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let input = normal_tensor(&[2, 4, 4, 4], rng);
    let k = normal_tensor(&[3, 2, 1, 1, 1], rng);
    let w = normal_tensor(&[3, 4, 4, 4], rng);
    check_all(
        |g, b| {
            let (x, kv) = (g.constant(input.clone()), g.constant(k.clone()));
            let y = g.conv3d(x, kv, Some(b), 1, 0)?;
            contract(g, y, &w)
        },
        &normal_tensor(&[3], rng),
    )
}

fn maxpool(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let w = normal_tensor(&[2, 3, 3, 3], rng);
    check_all(
        |g, x| {
            let y = g.maxpool3d(x, 3, 2, 1)?;
            contract(g, y, &w)
        },
        &distinct_values(&[2, 6, 6, 6], 0.01, rng),
    )
}

fn norm_with(mode: NormMode, wrt: usize, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut inputs = [
        normal_tensor(&[3, 4, 4, 4], rng),
        normal_tensor(&[3], rng),
        normal_tensor(&[3], rng),
    ];
    let w = normal_tensor(&[3, 4, 4, 4], rng);
    let point = core::mem::replace(&mut inputs[wrt], Tensor::zeros(&[0]));
    check_all(
        |g, x| {
            let mut vars = inputs.clone().map(|t| g.constant(t));
            vars[wrt] = x;
            let y = g.instance_norm(vars[0], vars[1], vars[2], NORM_EPS, mode)?;
            contract(g, y, &w)
        },
        &point,
    )
}

fn norm_live_input(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    norm_with(NormMode::Live, 0, rng)
}

fn norm_live_gamma(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    norm_with(NormMode::Live, 1, rng)
}

fn norm_live_beta(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    norm_with(NormMode::Live, 2, rng)
}

fn norm_fixed_input(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    norm_with(NormMode::FixedAffine, 0, rng)
}

fn norm_fixed_gamma(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    norm_with(NormMode::FixedAffine, 1, rng)
}

fn relu(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let w = normal_tensor(&[2, 3, 3, 3], rng);
    check_all(
        |g, x| {
            let y = g.relu(x)?;
            contract(g, y, &w)
        },
        &away_from_zero(&[2, 3, 3, 3], 1e-3, rng),
    )
}

fn sigmoid(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let w = normal_tensor(&[10], rng);
    check_all(
        |g, x| {
            let y = g.sigmoid(x)?;
            contract(g, y, &w)
        },
        &normal_tensor(&[10], rng).map(|v| 2.0 * v),
    )
}

fn add(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let other = normal_tensor(&[3, 2, 2, 2], rng);
    let w = normal_tensor(&[3, 2, 2, 2], rng);
    check_all(
        |g, x| {
            let o = g.constant(other.clone());
            let y = g.add(x, o)?;
            let sq = g.mul(y, y)?;
            contract(g, sq, &w)
        },
        &normal_tensor(&[3, 2, 2, 2], rng),
    )
}

fn mul(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let other = normal_tensor(&[3, 2, 2, 2], rng);
    let w = normal_tensor(&[3, 2, 2, 2], rng);
    check_all(
        |g, x| {
            let o = g.constant(other.clone());
            let y = g.mul(o, x)?;
            let y = g.mul(y, x)?;
            contract(g, y, &w)
        },
        &normal_tensor(&[3, 2, 2, 2], rng),
    )
}

fn div(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    // Numerator and denominator are both functions of `x`; the
    // denominator is kept well away from zero.
    let w = normal_tensor(&[6], rng);
    check_all(
        |g, x| {
            let num = contract(g, x, &w)?;
            let sq = g.mul(x, x)?;
            let s = g.sum(sq)?;
            let den = g.add_const(s, 0.5)?;
            g.div(num, den)
        },
        &normal_tensor(&[6], rng),
    )
}

fn affine_scalars(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let w = normal_tensor(&[8], rng);
    let (c, s) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    check_all(
        |g, x| {
            let y = g.add_const(x, c)?;
            let y = g.scale(y, s)?;
            let y = g.mul(y, y)?;
            contract(g, y, &w)
        },
        &normal_tensor(&[8], rng),
    )
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let w = normal_tensor(&[1, 2, 3, 2], rng);
    check_all(
        |g, x| {
            let sq = g.mul(x, x)?;
            let cm = g.channel_mean(sq)?;
            let a = contract(g, cm, &w)?;
            let m = g.mean(x)?;
            let m2 = g.mul(m, m)?;
            let s = g.sum(x)?;
            let t = g.add(a, m2)?;
            g.add(t, s)
        },
        &normal_tensor(&[4, 2, 3, 2], rng),
    )
}

fn balanced_bce(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (pw, nw) = (rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
    check_all(|g, p| g.balanced_bce(p, pw, nw), &probabilities(&[1], rng))
}

fn neg_entropy(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    check_all(|g, p| g.neg_entropy(p), &probabilities(&[1, 3, 3, 3], rng))
}

const PRIMITIVES: &[(&str, Primitive)] = &[
    ("conv3d/input", conv_input),
    ("conv3d/kernel", conv_kernel),
    ("conv3d/bias", conv_bias),
    ("maxpool3d", maxpool),
    ("instance_norm/live/input", norm_live_input),
    ("instance_norm/live/gamma", norm_live_gamma),
    ("instance_norm/live/beta", norm_live_beta),
    ("instance_norm/fixed/input", norm_fixed_input),
    ("instance_norm/fixed/gamma", norm_fixed_gamma),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("add", add),
    ("mul", mul),
    ("div", div),
    ("add_const+scale", affine_scalars),
    ("sum+mean+channel_mean", reductions),
    ("balanced_bce", balanced_bce),
    ("neg_entropy", neg_entropy),
];

/// Every differentiable primitive at `points` random points each.
pub fn engine_suite(seed: u64, points: usize) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PRIMITIVES
        .iter()
        .map(|&(name, check)| {
            let reports = (0..points.max(1)).map(|_| check(&mut rng)).collect::<Result<Vec<_>>>()?;
            Ok(SuiteResult {
                module: "engine",
                name: name.into(),
                report: worst(reports),
                tolerance: PRIMITIVE_TOL,
            })
        })
        .collect()
}

/// Gradient of the total objective of a freshly built model with respect to
/// `coords` randomly chosen parameter coordinates, on a random input.
/// Coordinates whose difference step flips a ReLU, a pooling argmax or a
/// clamp are passed over and counted in `skipped`.
pub fn objective_check(
    config: ModelConfig,
    input_dims: [usize; 3],
    seed: u64,
    coords: usize,
    mode: NormMode,
) -> Result<GradCheckReport> {
    let state = ModelState::<f64>::build(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut dims = alloc::vec![1];
    dims.extend_from_slice(&input_dims);
    let input = normal_tensor(&dims, &mut rng);
    let label = rng.random_range(0..2u8);
    let loss = LossConfig::new(0.01, rng.random_range(0.3..0.7))?;
    let indicator = match config.variant {
        Variant::Pg => Some(indicator_for(&state, &CoordinateTensor::build(input_dims)?)?.tensor),
        _ => None,
    };
    let shapes: Vec<Vec<usize>> = state.params().iter().map(|p| p.shape().to_vec()).collect();

    // Value, branch signature, whether any probability clamp is active, and
    // optionally the flat gradient.
    let objective = |flat: &[f64], grads: bool| -> Result<(f64, u64, bool, Vec<f64>)> {
        let mut g = Graph::new();
        let mut at = 0;
        let mut params = Vec::with_capacity(shapes.len());
        for s in &shapes {
            let n: usize = s.iter().product();
            params.push(g.param(Tensor::new(s.clone(), flat[at..at + n].to_vec())?));
            at += n;
        }
        let x = g.constant(input.clone());
        let ind = indicator.as_ref().map(|t| g.constant(t.clone()));
        let obj = build_objective(&mut g, &config, &params, x, ind, label, &loss, mode)?;
        // The feature gate's entropy is deliberately cut off from the
        // encoder, so its total objective has no finite-difference oracle;
        // that variant is checked on the classification term.
        let target = if config.variant == Variant::Fg { obj.cls } else { obj.total };
        let value = g.value(target).item();
        let signature = g.branch_signature();
        let floor = PROB_FLOOR * 10.0;
        let saturated = |t: &Tensor<f64>| t.data().iter().any(|&p| p <= floor || p >= 1.0 - floor);
        let clamped = saturated(g.value(obj.forward.posterior)) || obj.forward.gate.is_some_and(|v| saturated(g.value(v)));
        if !grads {
            return Ok((value, signature, clamped, Vec::new()));
        }
        let gr = g.backward(target)?;
        let flat_grad = params.iter().flat_map(|&p| gr.get(p).into_data()).collect();
        Ok((value, signature, clamped, flat_grad))
    };

    let mut flat: Vec<f64> = state.params().iter().flat_map(|p| p.data().iter().copied()).collect();
    let (_, base, clamped, analytic) = objective(&flat, true)?;
    if clamped {
        return Err(Error::InvalidArgument("objective saturates a probability clamp at this point".into()));
    }
    let mut order: Vec<usize> = (0..flat.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in order {
        if report.checked == coords {
            break;
        }
        let orig = flat[i];
        flat[i] = orig + DEFAULT_STEP;
        let (up, sig_up, ..) = objective(&flat, false)?;
        flat[i] = orig - DEFAULT_STEP;
        let (down, sig_down, ..) = objective(&flat, false)?;
        flat[i] = orig;
        if sig_up != base || sig_down != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * DEFAULT_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Retries [`objective_check`] with fresh seeds while the drawn point
/// saturates a probability clamp.
fn objective_check_unsaturated(
    config: ModelConfig,
    input_dims: [usize; 3],
    seed: u64,
    coords: usize,
    mode: NormMode,
) -> Result<GradCheckReport> {
    let mut last = None;
    for attempt in 0..16u64 {
        match objective_check(config, input_dims, seed.wrapping_add(attempt << 32), coords, mode) {
            Err(Error::InvalidArgument(msg)) if msg.contains("saturates") => last = Some(msg),
            other => return other,
        }
    }
    Err(Error::InvalidArgument(last.unwrap_or_default()))
}

/// The desk-scale PG network with live normalization at full crop size.
pub fn model_suite(seed: u64, coords: usize) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for patch in [9, 41] {
        let cfg = ModelConfig::new(Variant::Pg, patch, Widths::DESK)?;
        out.push(SuiteResult {
            module: "model",
            name: format!("PG-{patch} objective at 64^3"),
            report: objective_check_unsaturated(cfg, [64; 3], seed.wrapping_add(patch as u64), coords, NormMode::Live)?,
            tolerance: NETWORK_TOL,
        });
    }
    Ok(out)
}

/// The objective of every variant on a reduced input, in both
/// normalization modes.
pub fn loss_suite(seed: u64, coords: usize) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for variant in [Variant::Gap, Variant::Fg, Variant::Pg] {
        for mode in [NormMode::Live, NormMode::FixedAffine] {
            let cfg = ModelConfig::new(variant, 9, Widths::DESK)?;
            out.push(SuiteResult {
                module: "loss",
                name: format!(
                    "{} {} loss, {mode:?} norm",
                    variant.name(),
                    if variant == Variant::Fg { "classification" } else { "total" }
                ),
                report: objective_check_unsaturated(cfg, [32; 3], seed.wrapping_add(variant.tag() as u64), coords, mode)?,
                tolerance: NETWORK_TOL,
            });
        }
    }
    Ok(out)
}

/// Runs the selected group with the default sizes: ten points per
/// primitive, 200 parameter coordinates for the full network, 60 for the
/// reduced losses.
pub fn run_suite(module: SuiteModule, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    if matches!(module, SuiteModule::All | SuiteModule::Engine) {
        out.extend(engine_suite(seed, 10)?);
    }
    if matches!(module, SuiteModule::All | SuiteModule::Loss) {
        out.extend(loss_suite(seed, 60)?);
    }
    if matches!(module, SuiteModule::All | SuiteModule::Model) {
        out.extend(model_suite(seed, 200)?);
    }
    Ok(out)
}
