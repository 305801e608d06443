//! Shared helpers for the integration tests: reference implementations
//! written independently of the library, and a finite-difference harness.
#![allow(dead_code)]

pub mod fd;
pub mod oracles;
pub mod suites;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeir::tensor::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values in `[-hi, -lo] U [lo, hi]`, away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distance between two floats in units in the last place.
pub fn ulps(a: f32, b: f32) -> u64 {
    if a == b {
        return 0;
    }
    let key = |v: f32| {
        let bits = v.to_bits() as i64;
        if bits < 0x8000_0000 {
            bits
        } else {
            0x8000_0000 - bits
        }
    };
    (key(a) - key(b)).unsigned_abs()
}

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Outcome {
            name: name.into(),
            ok,
            detail: detail.into(),
        }
    }
}

pub fn assert_all(outcomes: &[Outcome]) {
    let bad: Vec<_> = outcomes.iter().filter(|o| !o.ok).collect();
    assert!(bad.is_empty(), "failed checks: {bad:#?}");
}
