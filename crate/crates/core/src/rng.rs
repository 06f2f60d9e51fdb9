//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by `seed` and positioned on
//! `stream_id`; the same pair always yields the same sequence. Child streams
//! for parallel work are derived with [`RngStream::derive`], never shared.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_len, ensure_nonneg, Error, Result};
use crate::linalg::Vector;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A child stream that depends only on `(seed, stream_id, child)`, not on
    /// how much of this stream has been consumed.
    pub fn derive(&self, child: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(child.wrapping_add(0x5851_f42d_4c95_7f2d)));
        RngStream::new(self.seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// `n` independent draws from `N(mu, diag(var))`.
    pub fn gaussian(&mut self, mu: &[f64], var: &[f64], n: usize) -> Result<Vec<Vector>> {
        ensure_len("gaussian", mu.len(), var.len())?;
        ensure_nonneg(var)?;
        if n == 0 {
            return Err(Error::InvalidArgument("gaussian needs n >= 1"));
        }
        let std: Vec<f64> = var.iter().map(|v| libm::sqrt(*v)).collect();
        Ok((0..n)
            .map(|_| {
                mu.iter()
                    .zip(&std)
                    .map(|(m, s)| {
                        if *s == 0.0 {
                            *m
                        } else {
                            m + s * self.standard_normal()
                        }
                    })
                    .collect::<Vec<_>>()
                    .into()
            })
            .collect())
    }
}
