//! ReLU MLP with stochastic realizations for epistemic estimation.
//!
//! A network is described by a [`ModelSpec`] and one or more [`ParameterSet`]s
//! (several only for ensembles). Every stochastic method is expressed as a
//! frozen [`PassRealization`]: once drawn, forward, Jacobian and backward passes
//! through it are deterministic functions of the input.
//!
//! Layer `l` maps `widths[l]` to `widths[l + 1]`; all layers but the last are
//! followed by a ReLU whose derivative at exactly zero is taken as zero.

use alloc::borrow::Cow;
use alloc::vec::Vec;

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::RngStream;

/// Initial log-variance of mean-field Gaussian weights.
pub const INIT_LOG_VAR: f64 = -6.0;

pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Task {
    Classification { classes: usize },
    /// Two outputs: the mean head and the log-variance head.
    Regression,
}

impl Task {
    pub fn output_width(&self) -> usize {
        match self {
            Task::Classification { classes } => *classes,
            Task::Regression => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum EuMethod {
    None,
    McDropout { p: f64 },
    McDropconnect { p: f64 },
    Ensemble { members: usize },
    Flipout { prior_variance: f64 },
}

impl EuMethod {
    pub fn name(&self) -> &'static str {
        match self {
            EuMethod::None => "none",
            EuMethod::McDropout { .. } => "mc-dropout",
            EuMethod::McDropconnect { .. } => "mc-dropconnect",
            EuMethod::Ensemble { .. } => "ensemble",
            EuMethod::Flipout { .. } => "flipout",
        }
    }

    /// Whether two realizations can differ.
    pub fn is_stochastic(&self) -> bool {
        !matches!(self, EuMethod::None)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    widths: Vec<usize>,
    task: Task,
    eu_method: EuMethod,
    /// Index of the first layer carrying the EU mechanism; layers
    /// `stochastic_from..num_layers()` are stochastic.
    stochastic_from: usize,
}

impl ModelSpec {
    /// `widths` lists input, hidden and output widths. The EU mechanism is
    /// placed on the last two layers.
    pub fn new(widths: Vec<usize>, task: Task, eu_method: EuMethod) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        Self::with_stochastic_from(widths, task, eu_method, layers.saturating_sub(2))
    }

    pub fn with_stochastic_from(
        widths: Vec<usize>,
        task: Task,
        eu_method: EuMethod,
        stochastic_from: usize,
    ) -> Result<Self> {
        let spec = Self {
            widths,
            task,
            eu_method,
            stochastic_from,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Input → `hidden` → task output.
    pub fn mlp(input: usize, hidden: &[usize], task: Task, eu_method: EuMethod) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(task.output_width());
        Self::new(widths, task, eu_method)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidSpec("need at least input and output widths"));
        }
        if self.widths.iter().any(|w| *w == 0) {
            return Err(Error::InvalidSpec("layer widths must be positive"));
        }
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return Err(Error::InvalidSpec("classification needs at least 2 classes"));
            }
        }
        if self.output_dim() != self.task.output_width() {
            return Err(Error::InvalidSpec("output width does not match the task"));
        }
        if self.stochastic_from > self.num_layers() {
            return Err(Error::InvalidSpec("stochastic layer range out of bounds"));
        }
        match self.eu_method {
            EuMethod::McDropout { p } | EuMethod::McDropconnect { p } if !(0.0..1.0).contains(&p) => {
                Err(Error::InvalidSpec("drop probability must lie in [0, 1)"))
            }
            EuMethod::Ensemble { members } if members < 2 => {
                Err(Error::InvalidSpec("ensembles need at least 2 members"))
            }
            EuMethod::Flipout { prior_variance } if !(prior_variance > 0.0) => {
                Err(Error::InvalidSpec("prior variance must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn eu_method(&self) -> EuMethod {
        self.eu_method
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn stochastic_from(&self) -> usize {
        self.stochastic_from
    }

    pub fn is_stochastic_layer(&self, layer: usize) -> bool {
        layer >= self.stochastic_from && layer < self.num_layers()
    }

    /// Number of parameter sets a model of this spec holds.
    pub fn member_count(&self) -> usize {
        match self.eu_method {
            EuMethod::Ensemble { members } => members,
            _ => 1,
        }
    }

    fn is_flipout_layer(&self, layer: usize) -> bool {
        matches!(self.eu_method, EuMethod::Flipout { .. }) && self.is_stochastic_layer(layer)
    }

    fn has_dropout_mask(&self, layer: usize) -> bool {
        // Dropout acts on hidden units only, i.e. on the inputs of layers >= 1.
        matches!(self.eu_method, EuMethod::McDropout { .. })
            && layer >= 1
            && self.is_stochastic_layer(layer)
    }
}

/// One dense layer. For mean-field Gaussian layers `weight`/`bias` hold the
/// posterior means and the `*_log_var` fields the posterior log-variances.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub weight_log_var: Option<Matrix>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub bias_log_var: Option<Vector>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: Vector::zeros(self.bias.len()),
            weight_log_var: self
                .weight_log_var
                .as_ref()
                .map(|m| Matrix::zeros(m.rows(), m.cols())),
            bias_log_var: self.bias_log_var.as_ref().map(|b| Vector::zeros(b.len())),
        }
    }
}

/// Parameters of one network; also used as the container for gradients.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParameterSet {
    pub layers: Vec<Layer>,
}

impl ParameterSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    /// Every parameter block in a fixed order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
            if let Some(m) = &l.weight_log_var {
                out.push(m.as_slice());
            }
            if let Some(b) = &l.bias_log_var {
                out.push(b.as_slice());
            }
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias[..]);
            if let Some(m) = &mut l.weight_log_var {
                out.push(m.as_mut_slice());
            }
            if let Some(b) = &mut l.bias_log_var {
                out.push(&mut b[..]);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// `self += scale * other`; shapes must agree.
    pub fn add_scaled(&mut self, other: &ParameterSet, scale: f64) -> Result<()> {
        let theirs = other.blocks();
        let mut mine = self.blocks_mut();
        ensure_len("ParameterSet::add_scaled", mine.len(), theirs.len())?;
        for (a, b) in mine.iter_mut().zip(&theirs) {
            ensure_len("ParameterSet::add_scaled", a.len(), b.len())?;
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        ensure_len("ParameterSet layers", spec.num_layers(), self.layers.len())?;
        for (l, layer) in self.layers.iter().enumerate() {
            let (i, o) = (spec.widths[l], spec.widths[l + 1]);
            ensure_len("layer weight rows", o, layer.weight.rows())?;
            ensure_len("layer weight cols", i, layer.weight.cols())?;
            ensure_len("layer bias", o, layer.bias.len())?;
            if spec.is_flipout_layer(l) && (layer.weight_log_var.is_none() || layer.bias_log_var.is_none()) {
                return Err(Error::InvalidSpec("flipout layer without posterior variances"));
            }
        }
        Ok(())
    }
}

/// Fan-in scaled Gaussian weights, zero biases, and [`INIT_LOG_VAR`] for
/// posterior log-variances.
pub fn init_parameters(spec: &ModelSpec, rng: &mut RngStream) -> ParameterSet {
    let layers = (0..spec.num_layers())
        .map(|l| {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let std = libm::sqrt(2.0 / fan_in as f64);
            let data = (0..fan_in * fan_out)
                .map(|_| std * rng.standard_normal())
                .collect();
            let flipout = spec.is_flipout_layer(l);
            Layer {
                weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
                bias: Vector::zeros(fan_out),
                weight_log_var: flipout.then(|| {
                    let mut m = Matrix::zeros(fan_out, fan_in);
                    m.as_mut_slice().fill(INIT_LOG_VAR);
                    m
                }),
                bias_log_var: flipout.then(|| Vector::filled(fan_out, INIT_LOG_VAR)),
            }
        })
        .collect();
    ParameterSet { layers }
}

/// One frozen draw of the stochastic model.
#[derive(Debug, Clone, PartialEq)]
pub enum PassRealization {
    /// No stochasticity: masks all ones, mean weights.
    Deterministic,
    /// Per-layer 0/1 masks on the layer inputs; survivors scaled by `scale`.
    Dropout {
        masks: Vec<Option<Vector>>,
        scale: f64,
    },
    /// Per-layer 0/1 weight masks; survivors scaled by `scale`.
    DropConnect {
        masks: Vec<Option<Matrix>>,
        scale: f64,
    },
    /// Standard-normal noise for reparameterized weight and bias draws.
    Flipout {
        weight_noise: Vec<Option<Matrix>>,
        bias_noise: Vec<Option<Vector>>,
    },
    Member(usize),
}

impl PassRealization {
    pub fn member(&self) -> usize {
        match self {
            PassRealization::Member(m) => *m,
            _ => 0,
        }
    }
}

/// Draws realizations for a spec. Ensemble members are visited round-robin.
#[derive(Debug, Clone)]
pub struct RealizationSampler<'a> {
    spec: &'a ModelSpec,
    rng: RngStream,
    cursor: usize,
}

impl<'a> RealizationSampler<'a> {
    pub fn new(spec: &'a ModelSpec, rng: RngStream) -> Self {
        Self {
            spec,
            rng,
            cursor: 0,
        }
    }

    pub fn sample(&mut self) -> PassRealization {
        let spec = self.spec;
        let rng = &mut self.rng;
        let layers = spec.num_layers();
        match spec.eu_method {
            EuMethod::None => PassRealization::Deterministic,
            EuMethod::McDropout { p } => PassRealization::Dropout {
                masks: (0..layers)
                    .map(|l| {
                        spec.has_dropout_mask(l).then(|| {
                            (0..spec.widths[l])
                                .map(|_| if rng.bernoulli(p) { 0.0 } else { 1.0 })
                                .collect::<Vec<_>>()
                                .into()
                        })
                    })
                    .collect(),
                scale: 1.0 / (1.0 - p),
            },
            EuMethod::McDropconnect { p } => PassRealization::DropConnect {
                masks: (0..layers)
                    .map(|l| {
                        spec.is_stochastic_layer(l).then(|| {
                            let (i, o) = (spec.widths[l], spec.widths[l + 1]);
                            let data = (0..i * o)
                                .map(|_| if rng.bernoulli(p) { 0.0 } else { 1.0 })
                                .collect();
                            Matrix::from_vec(o, i, data).expect("sized above")
                        })
                    })
                    .collect(),
                scale: 1.0 / (1.0 - p),
            },
            EuMethod::Flipout { .. } => {
                let mut weight_noise = Vec::with_capacity(layers);
                let mut bias_noise = Vec::with_capacity(layers);
                for l in 0..layers {
                    if spec.is_stochastic_layer(l) {
                        let (i, o) = (spec.widths[l], spec.widths[l + 1]);
                        let w = (0..i * o).map(|_| rng.standard_normal()).collect();
                        weight_noise.push(Some(Matrix::from_vec(o, i, w).expect("sized above")));
                        bias_noise.push(Some(
                            (0..o).map(|_| rng.standard_normal()).collect::<Vec<_>>().into(),
                        ));
                    } else {
                        weight_noise.push(None);
                        bias_noise.push(None);
                    }
                }
                PassRealization::Flipout {
                    weight_noise,
                    bias_noise,
                }
            }
            EuMethod::Ensemble { members } => {
                let m = self.cursor % members;
                self.cursor += 1;
                PassRealization::Member(m)
            }
        }
    }
}

/// Convenience wrapper: one realization from a fresh sampler.
pub fn sample_realization(spec: &ModelSpec, rng: RngStream) -> PassRealization {
    RealizationSampler::new(spec, rng).sample()
}

/// Weights and biases as seen by one realization.
struct Effective<'p> {
    weight: Cow<'p, Matrix>,
    bias: Cow<'p, Vector>,
}

fn effective_layer<'p>(
    spec: &ModelSpec,
    layer: &'p Layer,
    l: usize,
    real: &PassRealization,
) -> Effective<'p> {
    match real {
        PassRealization::DropConnect { masks, scale } => match masks.get(l).and_then(Option::as_ref) {
            Some(mask) => {
                let mut w = layer.weight.clone();
                for (x, m) in w.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *x *= m * scale;
                }
                Effective {
                    weight: Cow::Owned(w),
                    bias: Cow::Borrowed(&layer.bias),
                }
            }
            None => Effective {
                weight: Cow::Borrowed(&layer.weight),
                bias: Cow::Borrowed(&layer.bias),
            },
        },
        PassRealization::Flipout {
            weight_noise,
            bias_noise,
        } if spec.is_flipout_layer(l) => {
            let mut w = layer.weight.clone();
            if let (Some(eps), Some(lv)) = (weight_noise[l].as_ref(), layer.weight_log_var.as_ref()) {
                for ((x, e), v) in w.as_mut_slice().iter_mut().zip(eps.as_slice()).zip(lv.as_slice()) {
                    *x += libm::exp(0.5 * v) * e;
                }
            }
            let mut b = layer.bias.clone();
            if let (Some(eps), Some(lv)) = (bias_noise[l].as_ref(), layer.bias_log_var.as_ref()) {
                for ((x, e), v) in b.iter_mut().zip(eps.iter()).zip(lv.iter()) {
                    *x += libm::exp(0.5 * v) * e;
                }
            }
            Effective {
                weight: Cow::Owned(w),
                bias: Cow::Owned(b),
            }
        }
        _ => Effective {
            weight: Cow::Borrowed(&layer.weight),
            bias: Cow::Borrowed(&layer.bias),
        },
    }
}

fn dropout_mask(real: &PassRealization, l: usize) -> Option<(&Vector, f64)> {
    match real {
        PassRealization::Dropout { masks, scale } => masks.get(l).and_then(Option::as_ref).map(|m| (m, *scale)),
        _ => None,
    }
}

/// Intermediate values of one forward pass.
struct Trace<'p> {
    /// Input to each layer after dropout masking.
    inputs: Vec<Vector>,
    /// Pre-activations of each layer; the last one is the network output.
    pre: Vec<Vector>,
    effective: Vec<Effective<'p>>,
}

fn trace<'p>(
    spec: &ModelSpec,
    params: &'p ParameterSet,
    real: &PassRealization,
    x: &[f64],
) -> Result<Trace<'p>> {
    ensure_len("forward input", spec.input_dim(), x.len())?;
    params.check_shapes(spec)?;
    let layers = spec.num_layers();
    let mut inputs = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers);
    let mut effective = Vec::with_capacity(layers);
    let mut a: Vector = x.into();
    for (l, layer) in params.layers.iter().enumerate() {
        if let Some((mask, scale)) = dropout_mask(real, l) {
            for (v, m) in a.iter_mut().zip(mask.iter()) {
                *v *= m * scale;
            }
        }
        let eff = effective_layer(spec, layer, l, real);
        let mut z = eff.weight.matvec(&a)?;
        for (zi, bi) in z.iter_mut().zip(eff.bias.iter()) {
            *zi += bi;
        }
        let next = if l + 1 < layers {
            z.iter().map(|v| v.max(0.0)).collect::<Vec<_>>().into()
        } else {
            Vector::zeros(0)
        };
        inputs.push(a);
        pre.push(z);
        effective.push(eff);
        a = next;
    }
    Ok(Trace {
        inputs,
        pre,
        effective,
    })
}

/// Pre-activations of every layer (the last entry is the output).
pub fn preactivations(
    spec: &ModelSpec,
    params: &ParameterSet,
    real: &PassRealization,
    x: &[f64],
) -> Result<Vec<Vector>> {
    Ok(trace(spec, params, real, x)?.pre)
}

/// Network output under a realization: logits, or `(mean, log variance)`.
pub fn forward(spec: &ModelSpec, params: &ParameterSet, real: &PassRealization, x: &[f64]) -> Result<Vector> {
    let mut t = trace(spec, params, real, x)?;
    Ok(t.pre.pop().expect("at least one layer"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianResult {
    /// `output_dim × input_dim`.
    pub jacobian: Matrix,
    pub output: Vector,
}

/// Exact Jacobian of the realized function at `x`, accumulated forward
/// through the layers.
pub fn jacobian(
    spec: &ModelSpec,
    params: &ParameterSet,
    real: &PassRealization,
    x: &[f64],
) -> Result<JacobianResult> {
    let mut t = trace(spec, params, real, x)?;
    let layers = spec.num_layers();
    let mut j = Matrix::identity(spec.input_dim());
    for l in 0..layers {
        if let Some((mask, scale)) = dropout_mask(real, l) {
            for (r, m) in mask.iter().enumerate() {
                j.row_mut(r).iter_mut().for_each(|v| *v *= m * scale);
            }
        }
        j = crate::linalg::matmul(&t.effective[l].weight, &j)?;
        if l + 1 < layers {
            for (r, z) in t.pre[l].iter().enumerate() {
                if *z <= 0.0 {
                    j.row_mut(r).fill(0.0);
                }
            }
        }
    }
    Ok(JacobianResult {
        jacobian: j,
        output: t.pre.pop().expect("at least one layer"),
    })
}

/// Parameter gradients of a scalar loss whose gradient with respect to the
/// network output is `upstream`.
pub fn backward(
    spec: &ModelSpec,
    params: &ParameterSet,
    real: &PassRealization,
    x: &[f64],
    upstream: &[f64],
) -> Result<ParameterSet> {
    ensure_len("backward upstream", spec.output_dim(), upstream.len())?;
    let t = trace(spec, params, real, x)?;
    let mut grads = params.zeros_like();
    accumulate_gradients(spec, params, real, &t, upstream, &mut grads, 1.0)?;
    Ok(grads)
}

/// Runs one forward pass, evaluates `loss` on the output, and adds
/// `scale * ∂loss/∂θ` into `grads`. Returns the loss value and the output.
pub fn value_and_grad<F>(
    spec: &ModelSpec,
    params: &ParameterSet,
    real: &PassRealization,
    x: &[f64],
    loss: F,
    grads: &mut ParameterSet,
    scale: f64,
) -> Result<(f64, Vector)>
where
    F: FnOnce(&[f64]) -> Result<(f64, Vector)>,
{
    let t = trace(spec, params, real, x)?;
    let output = t.pre.last().expect("at least one layer").clone();
    let (value, upstream) = loss(&output)?;
    ensure_len("loss gradient", spec.output_dim(), upstream.len())?;
    accumulate_gradients(spec, params, real, &t, &upstream, grads, scale)?;
    Ok((value, output))
}

fn accumulate_gradients(
    spec: &ModelSpec,
    params: &ParameterSet,
    real: &PassRealization,
    t: &Trace<'_>,
    upstream: &[f64],
    grads: &mut ParameterSet,
    scale: f64,
) -> Result<()> {
    let mut delta: Vector = upstream.iter().map(|d| d * scale).collect::<Vec<_>>().into();
    for l in (0..spec.num_layers()).rev() {
        let input = &t.inputs[l];
        let layer = &params.layers[l];
        let g = &mut grads.layers[l];
        ensure_len("gradient layout", layer.weight.rows(), g.weight.rows())?;

        // d loss / d W_eff = delta ⊗ input, mapped back to the parameters
        // that produced the effective weights.
        match real {
            PassRealization::DropConnect { masks, scale: keep } if masks.get(l).is_some_and(Option::is_some) => {
                let mask = masks[l].as_ref().expect("checked");
                for (r, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    for ((gw, a), m) in g.weight.row_mut(r).iter_mut().zip(input.iter()).zip(mask.row(r)) {
                        *gw += d * a * m * keep;
                    }
                }
                for (gb, d) in g.bias.iter_mut().zip(delta.iter()) {
                    *gb += d;
                }
            }
            PassRealization::Flipout {
                weight_noise,
                bias_noise,
            } if spec.is_flipout_layer(l) => {
                let (Some(eps_w), Some(eps_b), Some(lv_w), Some(lv_b)) = (
                    weight_noise[l].as_ref(),
                    bias_noise[l].as_ref(),
                    layer.weight_log_var.as_ref(),
                    layer.bias_log_var.as_ref(),
                ) else {
                    return Err(Error::InvalidSpec("flipout layer without posterior variances"));
                };
                let (Some(g_lv_w), Some(g_lv_b)) = (g.weight_log_var.as_mut(), g.bias_log_var.as_mut()) else {
                    return Err(Error::InvalidSpec("gradient buffer without posterior variances"));
                };
                for (r, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let cols = input.len();
                    let range = r * cols..(r + 1) * cols;
                    let gw = &mut g.weight.as_mut_slice()[range.clone()];
                    let glv = &mut g_lv_w.as_mut_slice()[range.clone()];
                    let eps = &eps_w.as_slice()[range.clone()];
                    let lv = &lv_w.as_slice()[range];
                    for c in 0..cols {
                        let local = d * input[c];
                        gw[c] += local;
                        glv[c] += local * eps[c] * 0.5 * libm::exp(0.5 * lv[c]);
                    }
                }
                for (k, d) in delta.iter().enumerate() {
                    g.bias[k] += d;
                    g_lv_b[k] += d * eps_b[k] * 0.5 * libm::exp(0.5 * lv_b[k]);
                }
            }
            _ => {
                for (r, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    for (gw, a) in g.weight.row_mut(r).iter_mut().zip(input.iter()) {
                        *gw += d * a;
                    }
                }
                for (gb, d) in g.bias.iter_mut().zip(delta.iter()) {
                    *gb += d;
                }
            }
        }

        if l == 0 {
            break;
        }
        let mut upstream_input = t.effective[l].weight.matvec_transposed(&delta)?;
        if let Some((mask, keep)) = dropout_mask(real, l) {
            for (v, m) in upstream_input.iter_mut().zip(mask.iter()) {
                *v *= m * keep;
            }
        }
        for (v, z) in upstream_input.iter_mut().zip(t.pre[l - 1].iter()) {
            if *z <= 0.0 {
                *v = 0.0;
            }
        }
        delta = upstream_input;
    }
    Ok(())
}

/// A realization with its masks and weight noise folded into plain dense
/// layers. Evaluating it is equivalent to evaluating the realization.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedNetwork {
    spec: ModelSpec,
    params: ParameterSet,
}

impl RealizedNetwork {
    pub fn new(spec: &ModelSpec, params: &ParameterSet, real: &PassRealization) -> Result<Self> {
        params.check_shapes(spec)?;
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let eff = effective_layer(spec, layer, l, real);
                let mut weight = eff.weight.into_owned();
                if let Some((mask, scale)) = dropout_mask(real, l) {
                    for r in 0..weight.rows() {
                        for (w, m) in weight.row_mut(r).iter_mut().zip(mask.iter()) {
                            *w *= m * scale;
                        }
                    }
                }
                Layer {
                    weight,
                    bias: eff.bias.into_owned(),
                    weight_log_var: None,
                    bias_log_var: None,
                }
            })
            .collect();
        let plain = ModelSpec {
            widths: spec.widths.clone(),
            task: spec.task,
            eu_method: EuMethod::None,
            stochastic_from: spec.num_layers(),
        };
        Ok(Self {
            spec: plain,
            params: ParameterSet { layers },
        })
    }

    /// The equivalent deterministic spec.
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        forward(&self.spec, &self.params, &PassRealization::Deterministic, x)
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<JacobianResult> {
        jacobian(&self.spec, &self.params, &PassRealization::Deterministic, x)
    }
}

/// A spec together with its parameter sets (one per ensemble member).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Model {
    pub spec: ModelSpec,
    pub members: Vec<ParameterSet>,
}

impl Model {
    /// Member `i` is initialized from `rng.derive(i)`.
    pub fn init(spec: ModelSpec, rng: &RngStream) -> Self {
        let members = (0..spec.member_count())
            .map(|i| init_parameters(&spec, &mut rng.derive(i as u64)))
            .collect();
        Self { spec, members }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        ensure_len("Model members", self.spec.member_count(), self.members.len())?;
        self.members.iter().try_for_each(|p| p.check_shapes(&self.spec))
    }

    fn params_for(&self, real: &PassRealization) -> Result<&ParameterSet> {
        self.members
            .get(real.member())
            .ok_or(Error::InvalidArgument("ensemble member index out of range"))
    }

    pub fn sampler(&self, rng: RngStream) -> RealizationSampler<'_> {
        RealizationSampler::new(&self.spec, rng)
    }

    pub fn forward(&self, real: &PassRealization, x: &[f64]) -> Result<Vector> {
        forward(&self.spec, self.params_for(real)?, real, x)
    }

    pub fn jacobian(&self, real: &PassRealization, x: &[f64]) -> Result<JacobianResult> {
        jacobian(&self.spec, self.params_for(real)?, real, x)
    }

    pub fn realize(&self, real: &PassRealization) -> Result<RealizedNetwork> {
        RealizedNetwork::new(&self.spec, self.params_for(real)?, real)
    }
}
