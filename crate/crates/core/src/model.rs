//! The network family: encoder, patch classifier, position and feature
//! gates, and the two pooling rules.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{closed_form_indicator, CoordinateTensor, EncoderSpec, PositionIndicator, RESIDUAL_STRIDES};
use crate::ops::{NormMode, NORM_EPS};
use crate::tensor::{Real, Tensor};

/// Guard added to the gate mass in gated pooling.
pub const POOL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Mean pooling, no gate.
    Gap,
    /// Gate computed from encoder features.
    Fg,
    /// Gate computed from patch position.
    Pg,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Gap => "GAP",
            Variant::Fg => "FG",
            Variant::Pg => "PG",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Gap => 0,
            Variant::Fg => 1,
            Variant::Pg => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Variant::Gap),
            1 => Ok(Variant::Fg),
            2 => Ok(Variant::Pg),
            t => Err(Error::InvalidArgument(format!("unknown variant tag {t}"))),
        }
    }

    pub fn has_gate(self) -> bool {
        self != Variant::Gap
    }
}

impl core::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GAP" => Ok(Variant::Gap),
            "FG" => Ok(Variant::Fg),
            "PG" => Ok(Variant::Pg),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

/// Channel widths: first conv block + four residual blocks, then the gate
/// branch (two embedding layers, two gate layers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Widths {
    pub encoder: [usize; 5],
    pub gate: [usize; 4],
}

impl Widths {
    /// Full-scale widths.
    pub const FULL: Widths = Widths {
        encoder: [32, 32, 64, 128, 256],
        gate: [128, 256, 128, 16],
    };

    /// Reduced widths for CPU-scale experiments; same stage chain.
    pub const DESK: Widths = Widths {
        encoder: [8, 8, 16, 32, 64],
        gate: [32, 64, 32, 8],
    };

    pub fn features(&self) -> usize {
        self.encoder[4]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub variant: Variant,
    pub patch_size: usize,
    pub widths: Widths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    He,
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn kernel(name: String, out: usize, inp: usize, k: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![out, inp, k, k, k],
        init: Init::He,
    }
}

fn vector(name: String, n: usize, init: Init) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![n],
        init,
    }
}

fn norm(prefix: &str, n: usize, out: &mut Vec<ParamSpec>) {
    out.push(vector(format!("{prefix}.gamma"), n, Init::One));
    out.push(vector(format!("{prefix}.beta"), n, Init::Zero));
}

/// Residual block `b` (0-based) projects its skip path when channels or
/// stride change.
fn needs_projection(widths: &Widths, b: usize) -> bool {
    widths.encoder[b] != widths.encoder[b + 1] || RESIDUAL_STRIDES[b] != 1
}

impl ModelConfig {
    pub fn new(variant: Variant, patch_size: usize, widths: Widths) -> Result<Self> {
        EncoderSpec::for_patch_size(patch_size)?;
        if widths.encoder.iter().chain(&widths.gate).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("widths must be positive".into()));
        }
        Ok(Self {
            variant,
            patch_size,
            widths,
        })
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec::for_patch_size(self.patch_size).expect("validated at construction")
    }

    /// Parameter tensors in declaration order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let w = &self.widths;
        let spec = self.encoder_spec();
        let mut p = Vec::new();
        p.push(kernel("encoder.conv.weight".into(), w.encoder[0], 1, 5));
        norm("encoder.conv.norm", w.encoder[0], &mut p);
        for b in 0..4 {
            let (cin, cout, k) = (w.encoder[b], w.encoder[b + 1], spec.kernel_args[b]);
            let pre = format!("encoder.block{}", b + 1);
            p.push(kernel(format!("{pre}.conv1.weight"), cout, cin, k));
            norm(&format!("{pre}.norm1"), cout, &mut p);
            p.push(kernel(format!("{pre}.conv2.weight"), cout, cout, 1));
            norm(&format!("{pre}.norm2"), cout, &mut p);
            if needs_projection(w, b) {
                p.push(kernel(format!("{pre}.skip.weight"), cout, cin, 1));
                norm(&format!("{pre}.skip.norm"), cout, &mut p);
            }
        }
        p.push(kernel("classifier.weight".into(), 1, w.features(), 1));
        p.push(vector("classifier.bias".into(), 1, Init::Zero));
        let gate_in = match self.variant {
            Variant::Gap => return p,
            Variant::Pg => 3,
            Variant::Fg => w.features(),
        };
        let names = ["gate.embed1", "gate.embed2", "gate.hidden", "gate.out"];
        let mut cin = gate_in;
        for (name, &cout) in names.iter().zip(&w.gate) {
            p.push(kernel(format!("{name}.weight"), cout, cin, 1));
            p.push(vector(format!("{name}.bias"), cout, Init::Zero));
            cin = cout;
        }
        p
    }
}

/// All learnable parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    config: ModelConfig,
    seed: u64,
    params: Vec<Tensor<T>>,
}

impl<T: Real> ModelState<T> {
    /// He-normal kernels (fan-in), zero biases, unit norm scales.
    pub fn build(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|spec| match spec.init {
                Init::Zero => Tensor::zeros(&spec.shape),
                Init::One => Tensor::full(&spec.shape, T::one()),
                Init::He => {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).expect("finite std");
                    Tensor::from_fn(&spec.shape, |_| T::of(normal.sample(&mut rng)))
                }
            })
            .collect();
        Self { config, seed, params }
    }

    /// Reassembles a state from stored parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, seed: u64, params: Vec<Tensor<T>>) -> Result<Self> {
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (spec, p) in layout.iter().zip(&params) {
            if spec.shape != p.shape() {
                return Err(Error::ArchitectureMismatch(format!(
                    "{}: expected {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    p.shape()
                )));
            }
        }
        Ok(Self { config, seed, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        self.config.encoder_spec()
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|s| s.name).collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.config.layout().iter().position(|s| s.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config,
            seed: self.seed,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Indices of the encoder and classifier parameters (everything before
    /// the gate branch).
    pub fn trunk_param_range(&self) -> core::ops::Range<usize> {
        let n = self
            .config
            .layout()
            .iter()
            .position(|s| s.name.starts_with("gate."))
            .unwrap_or(self.params.len());
        0..n
    }
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: Var,
    pub responses: Var,
    pub gate: Option<Var>,
    /// Gate recomputed so that its only gradient route is the gate branch.
    pub gate_for_entropy: Option<Var>,
    pub evidence: Var,
    pub image_response: Var,
    pub posterior: Var,
}

struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }
}

fn conv_norm<T: Real>(
    g: &mut Graph<T>,
    c: &mut Cursor<'_>,
    x: Var,
    stride: usize,
    mode: NormMode,
) -> Result<Var> {
    let w = c.next();
    let k = g.value(w).shape()[2];
    let y = g.conv3d(x, w, None, stride, k / 2)?;
    let (gamma, beta) = (c.next(), c.next());
    g.instance_norm(y, gamma, beta, T::of(NORM_EPS), mode)
}

fn encoder<T: Real>(
    g: &mut Graph<T>,
    c: &mut Cursor<'_>,
    cfg: &ModelConfig,
    input: Var,
    mode: NormMode,
) -> Result<Var> {
    let x = conv_norm(g, c, input, 2, mode)?;
    let x = g.relu(x)?;
    let mut x = g.maxpool3d(x, 3, 2, 1)?;
    for b in 0..4 {
        let stride = RESIDUAL_STRIDES[b];
        let h = conv_norm(g, c, x, stride, mode)?;
        let h = g.relu(h)?;
        let h = conv_norm(g, c, h, 1, mode)?;
        let skip = if needs_projection(&cfg.widths, b) {
            conv_norm(g, c, x, stride, mode)?
        } else {
            x
        };
        let s = g.add(h, skip)?;
        x = g.relu(s)?;
    }
    Ok(x)
}

fn pointwise<T: Real>(g: &mut Graph<T>, c: &mut Cursor<'_>, x: Var) -> Result<Var> {
    let (w, b) = (c.next(), c.next());
    g.conv3d(x, w, Some(b), 1, 0)
}

/// Embedding (two layers) and gate (two layers) stack, channel mean, sigmoid.
fn gate_branch<T: Real>(g: &mut Graph<T>, params: &[Var], input: Var) -> Result<Var> {
    let mut c = Cursor { vars: params, at: 0 };
    let mut x = input;
    for _ in 0..3 {
        let y = pointwise(g, &mut c, x)?;
        x = g.relu(y)?;
    }
    let y = pointwise(g, &mut c, x)?;
    let m = g.channel_mean(y)?;
    g.sigmoid(m)
}

/// Records the full network on `g`. `params` are the parameter leaves in
/// declaration order; `indicator` is required for the PG variant.
pub fn build_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &[Var],
    input: Var,
    indicator: Option<Var>,
    mode: NormMode,
) -> Result<ForwardVars> {
    let mut c = Cursor { vars: params, at: 0 };
    let features = encoder(g, &mut c, cfg, input, mode)?;
    let responses = pointwise(g, &mut c, features)?;
    let gate_params = &params[c.at..];
    let (gate, gate_for_entropy) = match cfg.variant {
        Variant::Gap => (None, None),
        Variant::Pg => {
            let ind = indicator.ok_or_else(|| {
                Error::InvalidArgument("the PG variant needs a position indicator".into())
            })?;
            let gv = gate_branch(g, gate_params, ind)?;
            (Some(gv), Some(gv))
        }
        Variant::Fg => {
            let gv = gate_branch(g, gate_params, features)?;
            let detached = g.detach(features);
            let ge = gate_branch(g, gate_params, detached)?;
            (Some(gv), Some(ge))
        }
    };
    let (evidence, image_response) = match gate {
        None => (responses, g.mean(responses)?),
        Some(gv) => {
            let e = g.mul(gv, responses)?;
            let num = g.sum(e)?;
            let mass = g.sum(gv)?;
            let den = g.add_const(mass, T::of(POOL_EPS))?;
            (e, g.div(num, den)?)
        }
    };
    let posterior = g.sigmoid(image_response)?;
    Ok(ForwardVars {
        features,
        responses,
        gate,
        gate_for_entropy,
        evidence,
        image_response,
        posterior,
    })
}

/// Everything one forward pass exposes for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs<T> {
    pub features: Tensor<T>,
    pub patch_responses: Tensor<T>,
    pub gate: Option<Tensor<T>>,
    pub evidence: Tensor<T>,
    pub image_response: T,
    pub posterior: T,
}

fn constant_params<T: Real>(g: &mut Graph<T>, state: &ModelState<T>) -> Vec<Var> {
    state.params.iter().map(|p| g.constant(p.clone())).collect()
}

/// Position indicator of a cropped coordinate tensor for this model's encoder.
pub fn indicator_for<T: Real>(state: &ModelState<T>, coord: &CoordinateTensor<T>) -> Result<PositionIndicator<T>> {
    closed_form_indicator(coord, &state.encoder_spec())
}

/// Full inference pass. `coord` must be cropped with the same window as
/// `volume`; it is ignored by the GAP and FG variants.
pub fn model_forward<T: Real>(
    state: &ModelState<T>,
    volume: &Tensor<T>,
    coord: &CoordinateTensor<T>,
    mode: NormMode,
) -> Result<ForwardOutputs<T>> {
    if volume.spatial()? != coord.dims() {
        return Err(Error::Shape(format!(
            "volume extents {:?} differ from coordinate extents {:?}",
            volume.spatial()?,
            coord.dims()
        )));
    }
    let indicator = match state.variant() {
        Variant::Pg => Some(indicator_for(state, coord)?.tensor),
        _ => None,
    };
    forward_with_indicator(state, volume, indicator.as_ref(), mode)
}

/// As [`model_forward`] with a precomputed indicator.
pub fn forward_with_indicator<T: Real>(
    state: &ModelState<T>,
    volume: &Tensor<T>,
    indicator: Option<&Tensor<T>>,
    mode: NormMode,
) -> Result<ForwardOutputs<T>> {
    let mut g = Graph::new();
    let params = constant_params(&mut g, state);
    let input = g.constant(volume.clone());
    let ind = indicator.map(|t| g.constant(t.clone()));
    let fv = build_forward(&mut g, &state.config, &params, input, ind, mode)?;
    Ok(ForwardOutputs {
        features: g.value(fv.features).clone(),
        patch_responses: g.value(fv.responses).clone(),
        gate: fv.gate.map(|v| g.value(v).clone()),
        evidence: g.value(fv.evidence).clone(),
        image_response: g.value(fv.image_response).item(),
        posterior: g.value(fv.posterior).item(),
    })
}

/// Encoder features `[f, d, h, w]` of a single-channel volume.
pub fn encoder_forward<T: Real>(state: &ModelState<T>, volume: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
    if volume.channels()? != 1 {
        return Err(Error::Shape("encoder input must have one channel".into()));
    }
    let mut g = Graph::new();
    let params = constant_params(&mut g, state);
    let input = g.constant(volume.clone());
    let mut c = Cursor { vars: &params, at: 0 };
    let f = encoder(&mut g, &mut c, &state.config, input, mode)?;
    Ok(g.value(f).clone())
}

/// Patch responses `[1, d, h, w]` of a volume (encoder + classifier).
pub fn encode_responses<T: Real>(state: &ModelState<T>, volume: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
    let features = encoder_forward(state, volume, mode)?;
    classifier_forward(state, &features)
}

fn classifier_index<T: Real>(state: &ModelState<T>) -> usize {
    state.trunk_param_range().end - 2
}

/// Pointwise linear map from `f` features to one response per patch.
pub fn classifier_forward<T: Real>(state: &ModelState<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    let f = state.config.widths.features();
    if features.channels()? != f {
        return Err(Error::Shape(format!(
            "classifier expects {f} channels, got {}",
            features.channels()?
        )));
    }
    let i = classifier_index(state);
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let w = g.constant(state.params[i].clone());
    let b = g.constant(state.params[i + 1].clone());
    let y = g.conv3d(x, w, Some(b), 1, 0)?;
    Ok(g.value(y).clone())
}

fn gate_forward<T: Real>(state: &ModelState<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let start = state.trunk_param_range().end;
    let mut g = Graph::new();
    let params: Vec<Var> = state.params[start..].iter().map(|p| g.constant(p.clone())).collect();
    let x = g.constant(input.clone());
    let out = gate_branch(&mut g, &params, x)?;
    Ok(g.value(out).clone())
}

/// Position gate `[1, d, h, w]` from a position indicator (PG only).
pub fn position_branch_forward<T: Real>(state: &ModelState<T>, indicator: &PositionIndicator<T>) -> Result<Tensor<T>> {
    if state.variant() != Variant::Pg {
        return Err(Error::VariantMismatch {
            expected: "PG",
            found: state.variant().name(),
        });
    }
    gate_forward(state, &indicator.tensor)
}

/// Feature gate `[1, d, h, w]` from encoder features (FG only).
pub fn feature_gate_forward<T: Real>(state: &ModelState<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    if state.variant() != Variant::Fg {
        return Err(Error::VariantMismatch {
            expected: "FG",
            found: state.variant().name(),
        });
    }
    gate_forward(state, features)
}

/// Mean of the patch responses.
pub fn gap_pool<T: Real>(responses: &Tensor<T>) -> Result<T> {
    if responses.is_empty() {
        return Err(Error::EmptyOutput("empty patch grid".into()));
    }
    Ok(responses.sum() / T::of(responses.len() as f64))
}

/// `sum(g * x) / (sum(g) + eps)`, evaluated in the same order as the
/// recorded forward pass.
pub fn gated_pool<T: Real>(responses: &Tensor<T>, gate: &Tensor<T>, eps: T) -> Result<T> {
    if responses.shape() != gate.shape() {
        return Err(Error::Shape(format!(
            "responses {:?} vs gate {:?}",
            responses.shape(),
            gate.shape()
        )));
    }
    let mut num = T::zero();
    let mut mass = T::zero();
    for (&x, &g) in responses.data().iter().zip(gate.data()) {
        num += g * x;
    }
    for &g in gate.data() {
        mass += g;
    }
    Ok(num / (mass + eps))
}

/// Zeroes the last gate layer so that the gate is exactly 0.5 everywhere.
pub fn zero_final_gate_layer<T: Real>(state: &mut ModelState<T>) -> Result<()> {
    if !state.variant().has_gate() {
        return Err(Error::VariantMismatch {
            expected: "PG or FG",
            found: state.variant().name(),
        });
    }
    let n = state.params.len();
    for p in &mut state.params[n - 2..] {
        p.data_mut().fill(T::zero());
    }
    Ok(())
}

/// Copies every parameter of `source` into `target`; architectures must match.
pub fn transfer_init<T: Real>(source: &ModelState<T>, target: &mut ModelState<T>) -> Result<()> {
    if source.config != target.config {
        return Err(Error::ArchitectureMismatch(format!(
            "source {:?} / patch {} vs target {:?} / patch {}",
            source.variant(),
            source.config.patch_size,
            target.variant(),
            target.config.patch_size
        )));
    }
    target.params = source.params.clone();
    Ok(())
}

impl core::fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}-{}", self.variant.name(), self.patch_size)
    }
}

impl ModelConfig {
    pub fn label(&self) -> String {
        self.to_string()
    }
}
