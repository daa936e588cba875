#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terrafuse::tensor::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Random linear functional of `v`: `sum(v * r)` with a fixed random `r`.
/// Gives every output element a distinct, O(1) gradient.
pub fn project<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut r = rng(seed);
    let w = Tensor::from_fn(v.shape(), |_| r.gen_range(-1.0..1.0));
    let w = tape.constant(w);
    v.mul(&w).unwrap().sum()
}
