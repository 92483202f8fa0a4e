//! Criterion benchmarks for the tokenfusion kernels and models; see `benches/`.

use tokenfusion::{Element, Tensor};

/// Deterministic values in [-1, 1), cheap enough to build inside a benchmark setup.
pub fn filled<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let n = shape.iter().product();
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let data: Vec<f64> = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape matches data")
}
