//! Parameter initialization helpers shared by the network modules.
//!
//! All random draws go through a caller-supplied [`ChaCha20Rng`] so that a
//! single seed pins every parameter value in the model. Draw order is the
//! row-major element order of each tensor, which keeps checkpoints
//! reproducible across platforms.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::tensor::Tensor;

/// Kaiming-style uniform init: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub(crate) fn kaiming(rng: &mut ChaCha20Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape is internally consistent")
}

/// All-zero tensor, used for biases.
pub(crate) fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

/// Zero tensor with one entry overridden, used for gate biases that start
/// with a positive offset.
pub(crate) fn fill(shape: Vec<usize>, value: f64) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::new(shape, vec![value; len]).expect("init shape is internally consistent")
}

/// All-ones tensor, used for layer-norm gains.
pub(crate) fn ones(shape: Vec<usize>) -> Tensor {
    fill(shape, 1.0)
}

/// Square orthogonal matrix via Gram-Schmidt on a random uniform matrix.
///
/// Used for recurrent weights, where orthogonality keeps early iterates of
/// the recurrence well conditioned. Uniform draws are full rank with
/// probability one; if a column degenerates it is replaced by a basis
/// vector before normalization.
pub(crate) fn orthogonal(rng: &mut ChaCha20Rng, n: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &cols {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-9 {
            v = vec![0.0; n];
            v[j] = 1.0;
        } else {
            for vi in &mut v {
                *vi /= norm;
            }
        }
        cols.push(v);
    }
    let mut data = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            data[i * n + j] = col[i];
        }
    }
    Tensor::new(vec![n, n], data).expect("init shape is internally consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kaiming_respects_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let t = kaiming(&mut rng, vec![8, 8], 8);
        let bound = (6.0 / 8.0_f64).sqrt();
        assert!(t.data.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let n = 16;
        let t = orthogonal(&mut rng, n);
        for a in 0..n {
            for b in a..n {
                let dot: f64 = (0..n).map(|i| t.data[i * n + a] * t.data[i * n + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (dot - want).abs() < 1e-10,
                    "columns {a},{b}: dot {dot} want {want}"
                );
            }
        }
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let mut r1 = ChaCha20Rng::seed_from_u64(5);
        let mut r2 = ChaCha20Rng::seed_from_u64(5);
        let a = kaiming(&mut r1, vec![3, 4], 3);
        let b = kaiming(&mut r2, vec![3, 4], 3);
        assert_eq!(a.data, b.data);
    }
}
