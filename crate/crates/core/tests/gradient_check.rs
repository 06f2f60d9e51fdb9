//! Analytic Jacobians and parameter gradients against central differences.

use uniunc_core::network::{
    backward, forward, init_parameters, jacobian, preactivations, EuMethod, ModelSpec, ParameterSet,
    PassRealization, RealizationSampler, Task,
};
use uniunc_core::training::{cross_entropy, gaussian_nll};
use uniunc_core::RngStream;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: usize = 100;

fn methods() -> Vec<EuMethod> {
    vec![
        EuMethod::None,
        EuMethod::McDropout { p: 0.2 },
        EuMethod::McDropconnect { p: 0.05 },
        EuMethod::Ensemble { members: 3 },
        EuMethod::Flipout { prior_variance: 1.0 },
    ]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn model_for(eu: EuMethod, task: Task, seed: u64) -> (ModelSpec, ParameterSet) {
    let input = if task == Task::Regression { 1 } else { 3 };
    let spec = ModelSpec::mlp(input, &[7, 6, 5], task, eu).unwrap();
    let mut params = init_parameters(&spec, &mut RngStream::new(seed, 0));
    let mut rng = RngStream::new(seed, 1);
    for layer in &mut params.layers {
        layer.bias.iter_mut().for_each(|b| *b = rng.uniform(-0.3, 0.3));
        if let Some(lv) = &mut layer.weight_log_var {
            lv.as_mut_slice().iter_mut().for_each(|v| *v = rng.uniform(-4.0, -1.0));
        }
        if let Some(lv) = &mut layer.bias_log_var {
            lv.iter_mut().for_each(|v| *v = rng.uniform(-4.0, -1.0));
        }
    }
    (spec, params)
}

/// Input points whose hidden pre-activations all stay `margin` away from
/// the ReLU kink.
fn away_from_kinks(
    spec: &ModelSpec,
    params: &ParameterSet,
    real: &PassRealization,
    rng: &mut RngStream,
    margin: f64,
) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..spec.input_dim()).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let pre = preactivations(spec, params, real, &x).unwrap();
        let hidden = &pre[..pre.len() - 1];
        if hidden.iter().flat_map(|z| z.iter()).all(|z| z.abs() > margin) {
            return x;
        }
    }
}

#[test]
fn jacobian_matches_central_differences() {
    for eu in methods() {
        let (spec, params) = model_for(eu, Task::Classification { classes: 2 }, 10);
        let mut sampler = RealizationSampler::new(&spec, RngStream::new(10, 2));
        let mut rng = RngStream::new(10, 3);
        for _ in 0..POINTS {
            let real = match sampler.sample() {
                PassRealization::Member(_) => PassRealization::Deterministic,
                r => r,
            };
            let x = away_from_kinks(&spec, &params, &real, &mut rng, 1e-3);
            let j = jacobian(&spec, &params, &real, &x).unwrap();
            assert_eq!(j.output, forward(&spec, &params, &real, &x).unwrap());
            for d in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += H;
                xm[d] -= H;
                let fp = forward(&spec, &params, &real, &xp).unwrap();
                let fm = forward(&spec, &params, &real, &xm).unwrap();
                for k in 0..spec.output_dim() {
                    let num = (fp[k] - fm[k]) / (2.0 * H);
                    let err = rel_err(num, j.jacobian[(k, d)]);
                    assert!(err < TOL, "{}: J[{k},{d}] {num} vs {}", eu.name(), j.jacobian[(k, d)]);
                }
            }
        }
    }
}

#[test]
fn jacobian_first_order_remainder_shrinks_quadratically() {
    let (spec, params) = model_for(EuMethod::McDropout { p: 0.2 }, Task::Classification { classes: 2 }, 4);
    let real = RealizationSampler::new(&spec, RngStream::new(4, 9)).sample();
    let mut rng = RngStream::new(4, 10);
    let x = away_from_kinks(&spec, &params, &real, &mut rng, 0.05);
    let j = jacobian(&spec, &params, &real, &x).unwrap();
    let dir = [0.6, -0.3, 0.74];
    let remainder = |t: f64| {
        let xd: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a + t * b).collect();
        let f = forward(&spec, &params, &real, &xd).unwrap();
        let lin = j.jacobian.matvec(&dir).unwrap();
        (0..2).map(|k| (f[k] - j.output[k] - t * lin[k]).abs()).fold(0.0, f64::max)
    };
    // Piecewise linear: inside one linear region the remainder vanishes.
    for t in [1e-2, 1e-3, 1e-4] {
        assert!(remainder(t) <= 1e-9 * (1.0 + t), "t={t} r={}", remainder(t));
    }
}

type Loss = fn(&[f64]) -> (f64, Vec<f64>);

fn ce_loss(out: &[f64]) -> (f64, Vec<f64>) {
    let (l, g) = cross_entropy(out, 1).unwrap();
    (l, g.into_inner())
}

fn nll_loss(out: &[f64]) -> (f64, Vec<f64>) {
    let (l, (dm, dlv)) = gaussian_nll(out[0], out[1], 0.7);
    (l, vec![dm, dlv])
}

fn check_parameter_gradients(task: Task, loss: Loss) {
    for eu in methods() {
        let (spec, params) = model_for(eu, task, 20);
        let mut sampler = RealizationSampler::new(&spec, RngStream::new(20, 2));
        let mut rng = RngStream::new(20, 3);
        for point in 0..POINTS {
            let real = match sampler.sample() {
                PassRealization::Member(_) => PassRealization::Deterministic,
                r => r,
            };
            let x = away_from_kinks(&spec, &params, &real, &mut rng, 1e-2);
            let out = forward(&spec, &params, &real, &x).unwrap();
            let (_, upstream) = loss(&out);
            let grads = backward(&spec, &params, &real, &x, &upstream).unwrap();
            let eval = |p: &ParameterSet| loss(&forward(&spec, p, &real, &x).unwrap()).0;
            let analytic = grads.blocks();
            // Check a rotating subset of entries so every parameter is
            // visited across the points.
            let mut probe = params.clone();
            let n_blocks = analytic.len();
            for b in 0..n_blocks {
                let len = analytic[b].len();
                for i in (point % 5..len).step_by(5) {
                    let orig = probe.blocks()[b][i];
                    probe.blocks_mut()[b][i] = orig + H;
                    let lp = eval(&probe);
                    probe.blocks_mut()[b][i] = orig - H;
                    let lm = eval(&probe);
                    probe.blocks_mut()[b][i] = orig;
                    let num = (lp - lm) / (2.0 * H);
                    let err = rel_err(num, analytic[b][i]);
                    assert!(err < TOL, "{} block {b} entry {i}: {num} vs {}", eu.name(), analytic[b][i]);
                }
            }
        }
    }
}

#[test]
fn classification_gradients_match_central_differences() {
    check_parameter_gradients(Task::Classification { classes: 2 }, ce_loss);
}

#[test]
fn regression_gradients_match_central_differences() {
    check_parameter_gradients(Task::Regression, nll_loss);
}
