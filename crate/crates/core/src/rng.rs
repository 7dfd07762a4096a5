//! Seeded random streams. Each purpose gets its own stream derived from the
//! run seed and a tag, so adding a consumer never shifts another one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Array, Scalar};

pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    // FNV-1a over the tag, mixed into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed.rotate_left(29) ^ h)
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Array<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Array::new(shape, data).expect("shape")
}

pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Array<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Array::new(shape, data).expect("shape")
}

/// `out×in` weight drawn from `U(±1/√in)`.
pub fn fan_in<T: Scalar>(rng: &mut impl Rng, out: usize, inp: usize) -> Array<T> {
    uniform(rng, &[out, inp], 1.0 / (inp as f64).sqrt())
}
