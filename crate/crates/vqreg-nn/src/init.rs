//! Weight initialization helpers. All draws come from an explicit seeded
//! generator; the caller derives one stream per layer.

use rand_chacha::ChaCha12Rng;
use vqreg_core::rng::normal;
use vqreg_core::Scalar;

/// He (Kaiming) normal init for a conv weight of `fan_in = ci * k^3`.
pub fn he_normal<T: Scalar>(rng: &mut ChaCha12Rng, len: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::from_f64(normal(rng) * std)).collect()
}

pub fn zeros<T: Scalar>(len: usize) -> Vec<T> {
    vec![T::ZERO; len]
}

pub fn ones<T: Scalar>(len: usize) -> Vec<T> {
    vec![T::ONE; len]
}
