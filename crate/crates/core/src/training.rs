//! Losses, Adam, and the training loop.

use alloc::vec;
use alloc::vec::Vec;

use crate::datasets::{Labels, LabeledDataset};
use crate::error::{ensure_len, Error, Result};
use crate::linalg::{log_sum_exp, softmax, Vector};
use crate::network::{value_and_grad, EuMethod, Model, ModelSpec, ParameterSet, PassRealization, Task};
use crate::rng::RngStream;

/// `−log softmax(logits)[label]` and its gradient `softmax(logits) − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vector)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `log σ² + (μ − y)² / σ²` with `σ² = exp(log_var)`; returns the loss and
/// `(∂/∂μ, ∂/∂log_var)`.
pub fn gaussian_nll(mu: f64, log_var: f64, y: f64) -> (f64, (f64, f64)) {
    let precision = libm::exp(-log_var);
    let r = mu - y;
    let loss = log_var + r * r * precision;
    (loss, (2.0 * r * precision, 1.0 - r * r * precision))
}

/// `KL(N(mean, exp(log_var)) ‖ N(0, prior_variance))` summed over entries.
pub fn kl_gaussian(mean: &[f64], log_var: &[f64], prior_variance: f64) -> f64 {
    let log_prior = libm::log(prior_variance);
    mean.iter()
        .zip(log_var)
        .map(|(m, lv)| 0.5 * ((libm::exp(*lv) + m * m) / prior_variance - 1.0 - lv + log_prior))
        .sum()
}

/// KL of every mean-field Gaussian layer against the prior, adding
/// `scale * ∂KL/∂θ` into `grads`.
pub fn kl_parameters(params: &ParameterSet, prior_variance: f64, grads: &mut ParameterSet, scale: f64) -> f64 {
    let mut total = 0.0;
    for (layer, g) in params.layers.iter().zip(grads.layers.iter_mut()) {
        let pairs = [
            (layer.weight.as_slice(), layer.weight_log_var.as_ref().map(|m| m.as_slice())),
            (layer.bias.as_slice(), layer.bias_log_var.as_deref()),
        ];
        for (block, (mean, log_var)) in pairs.into_iter().enumerate() {
            let Some(log_var) = log_var else { continue };
            total += kl_gaussian(mean, log_var, prior_variance);
            let (g_mean, g_lv): (&mut [f64], &mut [f64]) = if block == 0 {
                (
                    g.weight.as_mut_slice(),
                    g.weight_log_var.as_mut().expect("shaped like params").as_mut_slice(),
                )
            } else {
                (&mut g.bias[..], &mut g.bias_log_var.as_mut().expect("shaped like params")[..])
            };
            for i in 0..mean.len() {
                g_mean[i] += scale * mean[i] / prior_variance;
                g_lv[i] += scale * 0.5 * (libm::exp(log_var[i]) / prior_variance - 1.0);
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the KL term for mean-field layers; `None` means
    /// `1 / training-set size`.
    pub kl_weight: Option<f64>,
    /// Rescale each minibatch gradient to at most this global L2 norm.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            kl_weight: None,
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::InvalidArgument("Adam betas must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("Adam epsilon must be positive"));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::InvalidArgument("max gradient norm must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(block_sizes: impl IntoIterator<Item = usize>) -> Self {
        let first: Vec<Vec<f64>> = block_sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn for_params(params: &ParameterSet) -> Self {
        Self::new(params.blocks().iter().map(|b| b.len()))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over raw parameter blocks.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], config: &TrainConfig) -> Result<()> {
        ensure_len("adam blocks", self.first.len(), params.len())?;
        ensure_len("adam gradient blocks", params.len(), grads.len())?;
        for (p, g) in params.iter().zip(grads) {
            ensure_len("adam block", p.len(), g.len())?;
        }
        for (i, m) in self.first.iter().enumerate() {
            ensure_len("adam state block", m.len(), params[i].len())?;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(config.beta1, t as f64);
        let c2 = 1.0 - libm::pow(config.beta2, t as f64);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= config.learning_rate * m_hat / (libm::sqrt(v_hat) + config.epsilon);
            }
        }
        Ok(())
    }
}

/// Adam update of a [`ParameterSet`] in place.
pub fn adam_step(params: &mut ParameterSet, grads: &ParameterSet, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    let g = grads.blocks();
    let mut p = params.blocks_mut();
    state.update(&mut p, &g, config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch loss, including the weighted KL term.
    pub loss: f64,
    /// Training accuracy (classification) or RMSE of the mean head
    /// (regression) of the deterministic network, averaged over members.
    pub metric: f64,
}

/// Output of the deterministic network(s): ensemble members are averaged.
pub fn predict_mean(model: &Model, x: &[f64]) -> Result<Vector> {
    let outs = (0..model.members.len())
        .map(|m| {
            let real = if model.members.len() > 1 {
                PassRealization::Member(m)
            } else {
                PassRealization::Deterministic
            };
            model.forward(&real, x)
        })
        .collect::<Result<Vec<_>>>()?;
    crate::linalg::mean(&outs)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if *x > best.1 { (i, *x) } else { best })
        .0
}

/// Accuracy for classification, RMSE of the mean head for regression.
pub fn evaluate(model: &Model, data: &LabeledDataset) -> Result<f64> {
    score(data, |x| predict_mean(model, x))
}

fn score(data: &LabeledDataset, mut predict: impl FnMut(&[f64]) -> Result<Vector>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset"));
    }
    match &data.labels {
        Labels::Classes(labels) => {
            let mut correct = 0usize;
            for (x, y) in data.inputs.iter().zip(labels) {
                correct += usize::from(argmax(&predict(x)?) == *y);
            }
            Ok(correct as f64 / data.len() as f64)
        }
        Labels::Targets(targets) => {
            let mut sse = 0.0;
            for (x, y) in data.inputs.iter().zip(targets) {
                let out = predict(x)?;
                sse += (out[0] - y) * (out[0] - y);
            }
            Ok(libm::sqrt(sse / data.len() as f64))
        }
    }
}

fn check_task(spec: &ModelSpec, data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset"));
    }
    ensure_len("training inputs", spec.input_dim(), data.input_dim())?;
    match (spec.task(), &data.labels) {
        (Task::Classification { classes }, Labels::Classes(labels)) => {
            if let Some(&bad) = labels.iter().find(|c| **c >= classes) {
                return Err(Error::LabelOutOfRange { label: bad, classes });
            }
            Ok(())
        }
        (Task::Regression, Labels::Targets(_)) => Ok(()),
        (Task::Classification { .. }, _) => Err(Error::WrongTask {
            expected: "classification",
        }),
        (Task::Regression, _) => Err(Error::WrongTask { expected: "regression" }),
    }
}

/// Scales `grads` down so their global L2 norm is at most `max`.
pub fn clip_gradients(grads: &mut ParameterSet, max: f64) {
    let norm = libm::sqrt(grads.blocks().iter().flat_map(|b| b.iter()).map(|g| g * g).sum::<f64>());
    if norm > max {
        let s = max / norm;
        grads.blocks_mut().iter_mut().for_each(|b| b.iter_mut().for_each(|g| *g *= s));
    }
}

/// Trains one parameter set. `realizations` supplies a fresh realization for
/// every training example.
fn train_member(
    model: &Model,
    member: usize,
    data: &LabeledDataset,
    config: &TrainConfig,
    rng: &RngStream,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<ParameterSet> {
    let spec = &model.spec;
    let mut params = model.members[member].clone();
    let mut state = AdamState::for_params(&params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng.derive(0);
    let mut sampler = crate::network::RealizationSampler::new(spec, rng.derive(1));
    let kl = match spec.eu_method() {
        EuMethod::Flipout { prior_variance } => {
            Some((prior_variance, config.kl_weight.unwrap_or(1.0 / data.len() as f64)))
        }
        _ => None,
    };
    let mut grads = params.zeros_like();
    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            grads.blocks_mut().iter_mut().for_each(|b| b.fill(0.0));
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let real = match spec.eu_method() {
                    EuMethod::Ensemble { .. } => PassRealization::Member(member),
                    _ => sampler.sample(),
                };
                let x = &data.inputs[i];
                let (value, _) = match &data.labels {
                    Labels::Classes(labels) => value_and_grad(
                        spec,
                        &params,
                        &real,
                        x,
                        |out| cross_entropy(out, labels[i]),
                        &mut grads,
                        scale,
                    )?,
                    Labels::Targets(targets) => value_and_grad(
                        spec,
                        &params,
                        &real,
                        x,
                        |out| {
                            let (l, (dm, dlv)) = gaussian_nll(out[0], out[1], targets[i]);
                            Ok((l, Vector::from([dm, dlv])))
                        },
                        &mut grads,
                        scale,
                    )?,
                };
                batch_loss += value * scale;
            }
            if let Some((prior, weight)) = kl {
                batch_loss += weight * kl_parameters(&params, prior, &mut grads, weight);
            }
            if let Some(max) = config.max_grad_norm {
                clip_gradients(&mut grads, max);
            }
            adam_step(&mut params, &grads, &mut state, config)?;
            loss_sum += batch_loss;
            batches += 1;
        }
        let metric = score(data, |x| {
            crate::network::forward(spec, &params, &PassRealization::Deterministic, x)
        })?;
        on_epoch(epoch, loss_sum / batches.max(1) as f64, metric);
    }
    Ok(params)
}

/// Trains every parameter set of `model` in place and returns one log line
/// per epoch (losses averaged over ensemble members).
///
/// Ensemble member `i` uses the streams derived from `config.seed` and `i`
/// for both initialization and data order, so members differ only by seed.
pub fn train_model(model: &mut Model, data: &LabeledDataset, config: &TrainConfig) -> Result<Vec<EpochLog>> {
    config.validate()?;
    model.validate()?;
    check_task(&model.spec, data)?;
    let root = RngStream::new(config.seed, 0x7261_696e);
    let members = model.members.len();
    let mut log: Vec<EpochLog> = (0..config.epochs)
        .map(|epoch| EpochLog {
            epoch,
            loss: 0.0,
            metric: 0.0,
        })
        .collect();
    for m in 0..members {
        let params = train_member(model, m, data, config, &root.derive(m as u64), |epoch, loss, metric| {
            log[epoch].loss += loss / members as f64;
            log[epoch].metric += metric / members as f64;
        })?;
        model.members[m] = params;
    }
    Ok(log)
}

/// Initializes a model from `config.seed` and trains it.
pub fn train(spec: &ModelSpec, data: &LabeledDataset, config: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    let mut model = Model::init(spec.clone(), &RngStream::new(config.seed, 0x696e_6974));
    let log = train_model(&mut model, data, config)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn cross_entropy_uniform_and_extreme() {
        let (loss, grad) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad.as_slice(), &[-0.5, 0.5]);
        let (loss, grad) = cross_entropy(&[1000.0, -1000.0], 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
        assert_eq!(
            cross_entropy(&[0.0, 1.0], 2).unwrap_err(),
            Error::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..4).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let label = rng.index(4);
            let (_, grad) = cross_entropy(&logits, label).unwrap();
            for k in 0..4 {
                let num = fd(
                    |v| {
                        let mut z = logits.clone();
                        z[k] = v;
                        cross_entropy(&z, label).unwrap().0
                    },
                    logits[k],
                    1e-5,
                );
                assert!((num - grad[k]).abs() < 1e-6, "{num} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn nll_spot_values() {
        assert_eq!(gaussian_nll(0.7, 0.0, 0.7).0, 0.0);
        assert_eq!(gaussian_nll(2.0, 0.0, 1.0).0, 1.0);
        assert_eq!(gaussian_nll(0.0, 0.0, 1.0).0, 1.0);
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let mut rng = RngStream::new(4, 0);
        for _ in 0..100 {
            let (mu, lv, y) = (rng.uniform(-3.0, 3.0), rng.uniform(-2.0, 2.0), rng.uniform(-3.0, 3.0));
            let (_, (dm, dlv)) = gaussian_nll(mu, lv, y);
            let num_m = fd(|v| gaussian_nll(v, lv, y).0, mu, 1e-5);
            let num_lv = fd(|v| gaussian_nll(mu, v, y).0, lv, 1e-5);
            assert!((num_m - dm).abs() < 1e-6);
            assert!((num_lv - dlv).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_closed_forms() {
        assert!(kl_gaussian(&[0.0, 0.0], &[0.0, 0.0], 1.0).abs() < 1e-15);
        assert!(kl_gaussian(&[0.0], &[libm::log(2.5)], 2.5).abs() < 1e-15);
        assert!((kl_gaussian(&[1.0], &[0.0], 1.0) - 0.5).abs() < 1e-15);
    }

    /// `∫ q log(q / p)` by composite Simpson over ±12 posterior std.
    fn kl_quadrature(mean: f64, var: f64, prior_var: f64) -> f64 {
        let pdf = |x: f64, m: f64, v: f64| {
            libm::exp(-(x - m) * (x - m) / (2.0 * v)) / libm::sqrt(2.0 * core::f64::consts::PI * v)
        };
        let s = libm::sqrt(var);
        let (a, b, n) = (mean - 12.0 * s, mean + 12.0 * s, 20_000usize);
        let h = (b - a) / n as f64;
        let f = |x: f64| {
            let q = pdf(x, mean, var);
            if q == 0.0 {
                0.0
            } else {
                q * (libm::log(q) - libm::log(pdf(x, 0.0, prior_var)))
            }
        };
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn kl_matches_quadrature() {
        let mut rng = RngStream::new(12, 0);
        for _ in 0..20 {
            let mean = rng.uniform(-2.0, 2.0);
            let lv = rng.uniform(-3.0, 1.0);
            let prior = rng.uniform(0.3, 3.0);
            let exact = kl_gaussian(&[mean], &[lv], prior);
            let quad = kl_quadrature(mean, libm::exp(lv), prior);
            assert!((exact - quad).abs() < 1e-6, "{exact} vs {quad}");
        }
    }

    fn scalar_config(lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_noop() {
        let mut state = AdamState::new([3]);
        let mut w = [1.0, -2.0, 0.5];
        state.update(&mut [&mut w[..]], &[&[0.0; 3][..]], &scalar_config(0.1)).unwrap();
        assert_eq!(w, [1.0, -2.0, 0.5]);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn adam_first_step_is_learning_rate_times_sign() {
        for g in [3.0, -0.02] {
            let mut state = AdamState::new([1]);
            let mut w = [0.0];
            state.update(&mut [&mut w[..]], &[&[g][..]], &scalar_config(0.01)).unwrap();
            assert!((w[0] + 0.01 * f64::signum(g)).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = scalar_config(0.1);
        let mut state = AdamState::new([1]);
        let mut w = [1.0];
        for _ in 0..100 {
            let g = [2.0 * w[0]];
            state.update(&mut [&mut w[..]], &[&g[..]], &cfg).unwrap();
        }
        assert!(w[0].abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut state = AdamState::new([2]);
        let mut w = [0.0; 3];
        assert!(state.update(&mut [&mut w[..]], &[&[0.0; 3][..]], &scalar_config(0.1)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let spec = ModelSpec::mlp(2, &[8, 8], Task::Classification { classes: 2 }, EuMethod::None).unwrap();
        let data = crate::datasets::two_moons(20, 0.1, 0).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (model, log) = train(&spec, &data, &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(model, Model::init(spec, &RngStream::new(0, 0x696e_6974)));
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let spec = ModelSpec::mlp(1, &[4], Task::Regression, EuMethod::None).unwrap();
        let data = crate::datasets::two_moons(20, 0.1, 0).unwrap();
        assert!(train(&spec, &data, &TrainConfig::default()).is_err());
    }
}
