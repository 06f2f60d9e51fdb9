//! Synthetic datasets: two moons, the `x sin x` toy regression, and input
//! uncertainty injection.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::rng::RngStream;

/// Std of both additive noise terms of the toy regression target.
pub const TOY_NOISE_STD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Targets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetMeta {
    pub generator: String,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Vec<Vector>,
    pub labels: Labels,
    /// Per-feature input variance shared by every point.
    pub input_var: Option<Vector>,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vector>, labels: Labels, input_var: Option<Vector>, meta: DatasetMeta) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            input_var,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        crate::error::ensure_len("dataset labels", self.inputs.len(), self.labels.len())?;
        if let Some(dim) = self.inputs.first().map(|x| x.len()) {
            for x in &self.inputs {
                crate::error::ensure_len("dataset inputs", dim, x.len())?;
            }
            if let Some(var) = &self.input_var {
                crate::error::ensure_len("dataset input_var", dim, var.len())?;
                crate::error::ensure_nonneg(var)?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.len())
    }
}

fn meta(generator: &str, params: &[(&str, f64)], seed: u64) -> DatasetMeta {
    DatasetMeta {
        generator: generator.to_string(),
        params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        seed,
    }
}

/// Two interleaving half circles, `⌊n/2⌋` points of class 0 followed by
/// `⌈n/2⌉` of class 1, with isotropic Gaussian noise of std `noise_sigma`.
///
/// Angles come from stream 0 of `seed` and noise from stream 1, so the same
/// seed yields the same underlying manifold points at every noise level.
pub fn two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("two_moons needs n >= 2"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise sigma must be non-negative"));
    }
    let mut angles = RngStream::new(seed, 0);
    let mut noise = RngStream::new(seed, 1);
    let n0 = n / 2;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = angles.uniform(0.0, PI);
        let class = usize::from(i >= n0);
        let (c, s) = (libm::cos(t), libm::sin(t));
        let (mut x1, mut x2) = if class == 0 { (c, s) } else { (1.0 - c, 0.5 - s) };
        if noise_sigma > 0.0 {
            x1 += noise_sigma * noise.standard_normal();
            x2 += noise_sigma * noise.standard_normal();
        }
        inputs.push(Vector::from([x1, x2]));
        labels.push(class);
    }
    let var = noise_sigma * noise_sigma;
    LabeledDataset::new(
        inputs,
        Labels::Classes(labels),
        Some(Vector::filled(2, var)),
        meta("two_moons", &[("n", n as f64), ("noise_sigma", noise_sigma)], seed),
    )
}

/// `x sin x + ε₁ + ε₂ x`.
pub fn toy_regression_target(x: f64, eps1: f64, eps2: f64) -> f64 {
    x * libm::sin(x) + eps1 + eps2 * x
}

/// `n` equally spaced points on `[lo, hi]`, both ends included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => alloc::vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn toy_split(xs: Vec<f64>, rng: &mut RngStream, generator: &str, seed: u64) -> Result<LabeledDataset> {
    let n = xs.len();
    let targets = xs
        .iter()
        .map(|&x| {
            let e1 = TOY_NOISE_STD * rng.standard_normal();
            let e2 = TOY_NOISE_STD * rng.standard_normal();
            toy_regression_target(x, e1, e2)
        })
        .collect();
    LabeledDataset::new(
        xs.into_iter().map(|x| Vector::from([x])).collect(),
        Labels::Targets(targets),
        None,
        meta(generator, &[("n", n as f64), ("noise_std", TOY_NOISE_STD)], seed),
    )
}

/// Training set on `[0, 10]` and out-of-distribution set on `[10, 12]`, both
/// equally spaced; the inputs are noise free.
pub fn toy_regression(n_train: usize, n_ood: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if n_train < 2 {
        return Err(Error::InvalidArgument("toy_regression needs n_train >= 2"));
    }
    let train = toy_split(linspace(0.0, 10.0, n_train), &mut RngStream::new(seed, 0), "toy_regression", seed)?;
    let ood = toy_split(linspace(10.0, 12.0, n_ood), &mut RngStream::new(seed, 1), "toy_regression_ood", seed)?;
    Ok((train, ood))
}

/// Declares input variance `sigma²` on every feature; with `corrupt` the
/// stored inputs are also perturbed with `N(0, sigma²)` noise.
pub fn with_input_uncertainty(ds: &LabeledDataset, sigma: f64, seed: u64, corrupt: bool) -> Result<LabeledDataset> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument("sigma must be non-negative"));
    }
    let mut out = ds.clone();
    let var = sigma * sigma;
    out.input_var = Some(Vector::filled(ds.input_dim(), var));
    out.meta.params.insert("input_sigma".to_string(), sigma);
    if corrupt && sigma > 0.0 {
        let mut rng = RngStream::new(seed, 2);
        for x in &mut out.inputs {
            for v in x.iter_mut() {
                *v += sigma * rng.standard_normal();
            }
        }
        out.meta.params.insert("corrupt_seed".to_string(), seed as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_half_circles() {
        let ds = two_moons(101, 0.0, 3).unwrap();
        let Labels::Classes(labels) = &ds.labels else { panic!() };
        assert_eq!(labels.iter().filter(|c| **c == 0).count(), 50);
        assert_eq!(labels.iter().filter(|c| **c == 1).count(), 51);
        for (x, c) in ds.inputs.iter().zip(labels) {
            let (cx, cy) = if *c == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = libm::hypot(x[0] - cx, x[1] - cy);
            assert!((r - 1.0).abs() < 1e-12);
            assert!(x[0] >= -1.0 - 1e-12 && x[0] <= 2.0 + 1e-12);
            assert!(x[1] >= -0.5 - 1e-12 && x[1] <= 1.0 + 1e-12);
            if *c == 0 {
                assert!(x[1] >= 0.0);
            }
        }
    }

    #[test]
    fn moons_noise_is_isotropic_with_given_sigma() {
        let clean = two_moons(1000, 0.0, 8).unwrap();
        let noisy = two_moons(1000, 0.1, 8).unwrap();
        let msd = clean
            .inputs
            .iter()
            .zip(&noisy.inputs)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum::<f64>()
            / 1000.0;
        assert!((msd - 0.02).abs() < 0.2 * 0.02, "msd {msd}");
        assert_eq!(noisy.meta.params["noise_sigma"], 0.1);
        assert_eq!(noisy.input_var.as_ref().unwrap().as_slice(), &[0.1 * 0.1; 2]);
    }

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(two_moons(50, 0.1, 1).unwrap(), two_moons(50, 0.1, 1).unwrap());
        assert_ne!(two_moons(50, 0.1, 1).unwrap(), two_moons(50, 0.1, 2).unwrap());
        assert_eq!(toy_regression(20, 5, 4).unwrap(), toy_regression(20, 5, 4).unwrap());
        assert!(two_moons(1, 0.1, 0).is_err());
    }

    #[test]
    fn toy_regression_ranges() {
        let (train, ood) = toy_regression(1000, 200, 0).unwrap();
        assert_eq!((train.len(), ood.len()), (1000, 200));
        assert_eq!(train.inputs[0][0], 0.0);
        assert_eq!(train.inputs[999][0], 10.0);
        assert_eq!(ood.inputs[0][0], 10.0);
        assert_eq!(ood.inputs[199][0], 12.0);
        assert!(train.input_var.is_none());
        let spacing = train.inputs[1][0] - train.inputs[0][0];
        assert!((spacing - 10.0 / 999.0).abs() < 1e-15);
    }

    #[test]
    fn toy_target_without_noise() {
        assert!(toy_regression_target(PI, 0.0, 0.0).abs() < 1e-9);
    }

    #[test]
    fn toy_noise_is_heteroscedastic() {
        for &x in &[0.0f64, 2.0, 7.5] {
            let expected = 0.09 * (1.0 + x * x);
            let n = 10_000;
            let mut rng = RngStream::new(x.to_bits(), 0);
            let draws: Vec<f64> = (0..n)
                .map(|_| {
                    let e1 = TOY_NOISE_STD * rng.standard_normal();
                    let e2 = TOY_NOISE_STD * rng.standard_normal();
                    toy_regression_target(x, e1, e2) - x * libm::sin(x)
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var - expected).abs() < 0.25 * expected, "x={x} var={var}");
        }
    }

    #[test]
    fn input_uncertainty_metadata_only() {
        let ds = two_moons(40, 0.1, 5).unwrap();
        let same = with_input_uncertainty(&ds, 0.0, 1, true).unwrap();
        assert_eq!(same.inputs, ds.inputs);
        assert_eq!(same.input_var.as_ref().unwrap().as_slice(), &[0.0, 0.0]);
        let declared = with_input_uncertainty(&ds, 0.5, 1, false).unwrap();
        assert_eq!(declared.inputs, ds.inputs);
        assert_eq!(declared.input_var.unwrap().as_slice(), &[0.25, 0.25]);
        assert!(with_input_uncertainty(&ds, -1.0, 1, false).is_err());
    }

    #[test]
    fn corruption_has_declared_variance() {
        let ds = two_moons(10_000, 0.1, 6).unwrap();
        let noisy = with_input_uncertainty(&ds, 0.5, 9, true).unwrap();
        for d in 0..2 {
            let diffs: Vec<f64> = ds.inputs.iter().zip(&noisy.inputs).map(|(a, b)| b[d] - a[d]).collect();
            let var = diffs.iter().map(|v| v * v).sum::<f64>() / diffs.len() as f64;
            assert!((var - 0.25).abs() < 0.025, "feature {d} var {var}");
        }
    }
}
