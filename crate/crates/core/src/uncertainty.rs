//! Combined input, epistemic and aleatoric uncertainty estimation.
//!
//! An epistemic method gives `M` realizations `f_1 … f_M` of the network.
//! Input uncertainty `N(μⁱ, diag(σ²ⁱ))` is pushed through each realization
//! either to first order ([`combine_taylor`]) or by sampling
//! ([`combine_mc`]), producing one `(μˢ, σ²ˢ)` summary per realization or per
//! input sample. The decomposition is then
//!
//! - prediction `μᵒ = E[μˢ]`
//! - input uncertainty `σ²_inp = Var[μˢ]`
//! - epistemic uncertainty `σ²_epi = E[σ²ˢ]`
//!
//! plus, for regression, the aleatoric variance `σ²_ale` averaged over every
//! forward pass. All uncertainties are stored as variances.
//!
//! Classification outputs are logits; [`classify`] turns the three channels
//! into class probabilities with [`sampling_softmax`].

use alloc::vec::Vec;

use crate::error::{ensure_len, ensure_nonneg, Error, Result};
use crate::linalg::{mean, mean_and_variance, sandwich_diag, softmax, Matrix, Vector};
use crate::network::{EuMethod, Model, RealizedNetwork, Task};
use crate::rng::RngStream;

/// Draws per call of [`sampling_softmax`] unless configured otherwise.
pub const DEFAULT_SOFTMAX_SAMPLES: usize = 100;

/// An input mean with per-feature variance.
#[derive(Debug, Clone, PartialEq)]
pub struct InputWithUncertainty {
    mu: Vector,
    var: Vector,
}

impl InputWithUncertainty {
    pub fn new(mu: Vector, var: Vector) -> Result<Self> {
        ensure_len("InputWithUncertainty", mu.len(), var.len())?;
        ensure_nonneg(&var)?;
        Ok(Self { mu, var })
    }

    /// Same variance on every feature.
    pub fn isotropic(mu: Vector, var: f64) -> Result<Self> {
        let var = Vector::filled(mu.len(), var);
        Self::new(mu, var)
    }

    pub fn certain(mu: Vector) -> Self {
        let var = Vector::zeros(mu.len());
        Self { mu, var }
    }

    pub fn mu(&self) -> &Vector {
        &self.mu
    }

    pub fn var(&self) -> &Vector {
        &self.var
    }
}

/// One element of the propagated epistemic sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct PassSummary {
    pub mu: Vector,
    pub var: Vector,
    /// Aleatoric variance head(s), regression only.
    pub ale_var: Option<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyDecomposition {
    pub task: Task,
    /// Prediction `μᵒ` (logits for classification, the mean for regression).
    pub mu: Vector,
    pub var_inp: Vector,
    pub var_epi: Vector,
    /// Regression only.
    pub var_ale: Option<Vector>,
    pub forward_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    pub ale: Vector,
    pub inp: Vector,
    pub epi: Vector,
}

impl ClassProbabilities {
    /// Per-class Bernoulli variance `p(1 − p)` of the aleatoric probabilities.
    pub fn ale_variance(&self) -> Vector {
        self.ale.iter().map(|p| p * (1.0 - p)).collect::<Vec<_>>().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionOutput {
    pub mean: f64,
    pub var_ale: f64,
    pub var_inp: f64,
    pub var_epi: f64,
}

impl RegressionOutput {
    /// Aleatoric + epistemic + input.
    pub fn total_variance(&self) -> f64 {
        self.var_ale + self.var_epi + self.var_inp
    }
}

/// Number of realizations the epistemic method uses for a requested `m`:
/// ensembles always use one pass per member.
pub fn pass_count(method: EuMethod, m: usize) -> usize {
    match method {
        EuMethod::Ensemble { members } => members,
        _ => m,
    }
}

fn check_passes(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::InsufficientSamples {
            op: "epistemic passes",
            required: 2,
            actual: m,
        });
    }
    Ok(())
}

/// Raw network outputs under `m` independent realizations (one per member
/// for ensembles).
pub fn epistemic_passes(model: &Model, x: &[f64], m: usize, rng: &RngStream) -> Result<Vec<Vector>> {
    check_passes(m)?;
    let mut sampler = model.sampler(rng.clone());
    (0..pass_count(model.spec.eu_method(), m))
        .map(|_| model.realize(&sampler.sample())?.forward(x))
        .collect()
}

/// Splits a raw output into the prediction part and the aleatoric variance.
fn split_output(task: Task, out: &[f64]) -> (Vector, Option<f64>) {
    match task {
        Task::Classification { .. } => (out.into(), None),
        Task::Regression => (Vector::from([out[0]]), Some(libm::exp(out[1]))),
    }
}

fn prediction_jacobian(task: Task, j: Matrix) -> Result<Matrix> {
    match task {
        Task::Classification { .. } => Ok(j),
        Task::Regression => Matrix::from_vec(1, j.cols(), j.row(0).to_vec()),
    }
}

fn decompose(task: Task, summaries: &[PassSummary], ale: &[f64], forward_passes: usize) -> Result<UncertaintyDecomposition> {
    let mus: Vec<&[f64]> = summaries.iter().map(|s| s.mu.as_slice()).collect();
    let vars: Vec<&[f64]> = summaries.iter().map(|s| s.var.as_slice()).collect();
    let (mu, var_inp) = mean_and_variance(&mus)?;
    let var_epi = mean(&vars)?;
    let var_ale = match task {
        Task::Regression => Some(Vector::from([ale.iter().sum::<f64>() / ale.len() as f64])),
        Task::Classification { .. } => None,
    };
    Ok(UncertaintyDecomposition {
        task,
        mu,
        var_inp,
        var_epi,
        var_ale,
        forward_passes,
    })
}

/// A fixed set of realized networks, reusable across any number of inputs.
#[derive(Debug, Clone)]
pub struct Realizations {
    task: Task,
    nets: Vec<RealizedNetwork>,
}

impl Realizations {
    /// Draws `m` realizations (one per member for ensembles) from `rng`.
    pub fn sample(model: &Model, m: usize, rng: &RngStream) -> Result<Self> {
        check_passes(m)?;
        let mut sampler = model.sampler(rng.clone());
        let nets = (0..pass_count(model.spec.eu_method(), m))
            .map(|_| model.realize(&sampler.sample()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task: model.spec.task(),
            nets,
        })
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn networks(&self) -> &[RealizedNetwork] {
        &self.nets
    }

    fn check_input(&self, op: &'static str, input: &InputWithUncertainty) -> Result<()> {
        ensure_len(op, self.nets[0].spec().input_dim(), input.mu.len())
    }

    /// Per-realization first-order summaries: `μˢ_k = f_k(μⁱ)` and
    /// `σ²ˢ_k = diag(J_k diag(σ²ⁱ) J_kᵀ)`.
    pub fn taylor_summaries(&self, input: &InputWithUncertainty) -> Result<Vec<PassSummary>> {
        self.check_input("taylor input", input)?;
        self.nets
            .iter()
            .map(|net| {
                let jr = net.jacobian(&input.mu)?;
                let (mu, ale) = split_output(self.task, &jr.output);
                let var = sandwich_diag(&prediction_jacobian(self.task, jr.jacobian)?, &input.var)?;
                Ok(PassSummary {
                    mu,
                    var,
                    ale_var: ale.map(|a| Vector::from([a])),
                })
            })
            .collect()
    }

    /// First-order input propagation through every realization. Costs one
    /// forward pass per realization.
    pub fn taylor(&self, input: &InputWithUncertainty) -> Result<UncertaintyDecomposition> {
        let summaries = self.taylor_summaries(input)?;
        let ale: Vec<f64> = summaries.iter().filter_map(|s| s.ale_var.as_ref().map(|a| a[0])).collect();
        decompose(self.task, &summaries, &ale, summaries.len())
    }

    /// Per-input-sample summaries for `n` draws `x̃ ∼ N(μⁱ, σ²ⁱ)` taken from
    /// `draws_rng`: the mean and variance of the outputs over the
    /// realizations. Also returns every aleatoric variance seen.
    pub fn mc_summaries(
        &self,
        input: &InputWithUncertainty,
        n: usize,
        draws_rng: &RngStream,
    ) -> Result<(Vec<PassSummary>, Vec<f64>)> {
        self.check_input("mc input", input)?;
        if n < 2 {
            return Err(Error::InsufficientSamples {
                op: "input samples",
                required: 2,
                actual: n,
            });
        }
        let draws = draws_rng.clone().gaussian(&input.mu, &input.var, n)?;
        let mut ale = Vec::new();
        let mut summaries = Vec::with_capacity(n);
        let mut outs = Vec::with_capacity(self.nets.len());
        for x in &draws {
            outs.clear();
            for net in &self.nets {
                let (mu, a) = split_output(self.task, &net.forward(x)?);
                ale.extend(a);
                outs.push(mu);
            }
            let (mu, var) = mean_and_variance(&outs)?;
            summaries.push(PassSummary { mu, var, ale_var: None });
        }
        Ok((summaries, ale))
    }

    /// Monte Carlo input propagation. Costs `n` forward passes per
    /// realization.
    pub fn monte_carlo(&self, input: &InputWithUncertainty, n: usize, draws_rng: &RngStream) -> Result<UncertaintyDecomposition> {
        let (summaries, ale) = self.mc_summaries(input, n, draws_rng)?;
        decompose(self.task, &summaries, &ale, n * self.nets.len())
    }
}

/// Per-realization first-order summaries for `m` realizations drawn from
/// `rng`.
pub fn taylor_summaries(model: &Model, input: &InputWithUncertainty, m: usize, rng: &RngStream) -> Result<Vec<PassSummary>> {
    Realizations::sample(model, m, rng)?.taylor_summaries(input)
}

/// Epistemic method first, then first-order input propagation through every
/// realization. Costs `M` forward passes.
pub fn combine_taylor(model: &Model, input: &InputWithUncertainty, m: usize, rng: &RngStream) -> Result<UncertaintyDecomposition> {
    ensure_len("combine_taylor input", model.spec.input_dim(), input.mu.len())?;
    Realizations::sample(model, m, rng)?.taylor(input)
}

/// Per-input-sample summaries: `x̃_n ∼ N(μⁱ, σ²ⁱ)`, and for each sample the
/// mean and variance of the outputs over the `M` realizations. The same `M`
/// realizations are shared by every input sample.
///
/// Returns the summaries and every aleatoric variance seen (`N × M` values
/// for regression).
pub fn mc_summaries(
    model: &Model,
    input: &InputWithUncertainty,
    n: usize,
    m: usize,
    rng: &RngStream,
) -> Result<(Vec<PassSummary>, Vec<f64>)> {
    ensure_len("combine_mc input", model.spec.input_dim(), input.mu.len())?;
    Realizations::sample(model, m, &rng.derive(0))?.mc_summaries(input, n, &rng.derive(1))
}

/// Epistemic method composed with Monte Carlo input propagation. Costs
/// `N × M` forward passes.
pub fn combine_mc(model: &Model, input: &InputWithUncertainty, n: usize, m: usize, rng: &RngStream) -> Result<UncertaintyDecomposition> {
    ensure_len("combine_mc input", model.spec.input_dim(), input.mu.len())?;
    Realizations::sample(model, m, &rng.derive(0))?.monte_carlo(input, n, &rng.derive(1))
}

/// Mean of `softmax(ẑ)` over `k` draws `ẑ ∼ N(mu, diag(var))`. With zero
/// variance this is exactly `softmax(mu)`.
pub fn sampling_softmax(mu: &[f64], var: &[f64], k: usize, rng: &mut RngStream) -> Result<Vector> {
    ensure_len("sampling_softmax", mu.len(), var.len())?;
    ensure_nonneg(var)?;
    if k == 0 {
        return Err(Error::InvalidArgument("sampling_softmax needs k >= 1"));
    }
    if var.iter().all(|v| *v == 0.0) {
        return Ok(softmax(mu));
    }
    let std: Vec<f64> = var.iter().map(|v| libm::sqrt(*v)).collect();
    let mut acc = Vector::zeros(mu.len());
    let mut z = Vector::zeros(mu.len());
    for _ in 0..k {
        for ((zi, m), s) in z.iter_mut().zip(mu).zip(&std) {
            *zi = if *s == 0.0 { *m } else { m + s * rng.standard_normal() };
        }
        for (a, p) in acc.iter_mut().zip(softmax(&z).iter()) {
            *a += p;
        }
    }
    acc.iter_mut().for_each(|a| *a /= k as f64);
    Ok(acc)
}

/// Aleatoric, input and epistemic class probabilities.
pub fn classify(decomp: &UncertaintyDecomposition, k: usize, rng: &mut RngStream) -> Result<ClassProbabilities> {
    if !matches!(decomp.task, Task::Classification { .. }) {
        return Err(Error::WrongTask {
            expected: "classification",
        });
    }
    Ok(ClassProbabilities {
        ale: softmax(&decomp.mu),
        inp: sampling_softmax(&decomp.mu, &decomp.var_inp, k, rng)?,
        epi: sampling_softmax(&decomp.mu, &decomp.var_epi, k, rng)?,
    })
}

pub fn regress(decomp: &UncertaintyDecomposition) -> Result<RegressionOutput> {
    match (&decomp.task, &decomp.var_ale) {
        (Task::Regression, Some(ale)) => Ok(RegressionOutput {
            mean: decomp.mu[0],
            var_ale: ale[0],
            var_inp: decomp.var_inp[0],
            var_epi: decomp.var_epi[0],
        }),
        _ => Err(Error::WrongTask { expected: "regression" }),
    }
}
