//! Multi-scale convolutional feature extraction.
//!
//! A single-channel sequence of length `L` is lifted to `F` channels by four
//! parallel branches whose outputs are concatenated along the channel axis.
//! Each branch produces `F / 4` channels:
//!
//! * branch 1: pointwise conv (`k = 1`),
//! * branch 2: pointwise conv, then `k = 3` conv,
//! * branch 3: pointwise conv, then `k = 5` conv,
//! * branch 4: max-pool (`k = 3`), then pointwise conv.
//!
//! Every convolution is followed by GeLU, all convolutions use same-padding,
//! and the sequence length is preserved throughout, so the module maps
//! `L x 1 -> L x F`.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{BoundParams, Graph, ParamSet, Var};

/// Configuration for the feature extraction module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FemConfig {
    /// Total output channels `F`; must be divisible by 4.
    pub channels: usize,
}

impl FemConfig {
    /// Validate the channel count.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "fem channels must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Channels produced by each of the four branches.
    pub fn branch_channels(&self) -> usize {
        self.channels / 4
    }
}

/// Kernel sizes for the (first, second) convolution of each branch. Branches
/// 1 and 4 have a single convolution.
const BRANCH_KERNELS: [(usize, Option<usize>); 4] = [(1, None), (1, Some(3)), (1, Some(5)), (1, None)];

/// Register the module parameters under `fem.br{1..4}.conv{a,b}.{w,b}`.
pub fn init_fem_params(cfg: &FemConfig, rng: &mut ChaCha20Rng, params: &mut ParamSet) -> Result<()> {
    cfg.validate()?;
    let q = cfg.branch_channels();
    for (bi, (ka, kb)) in BRANCH_KERNELS.iter().enumerate() {
        let br = bi + 1;
        params.insert(
            format!("fem.br{br}.conva.w"),
            init::kaiming(rng, vec![*ka, 1, q], *ka),
        )?;
        params.insert(format!("fem.br{br}.conva.b"), init::zeros(vec![1, q]))?;
        if let Some(kb) = kb {
            params.insert(
                format!("fem.br{br}.convb.w"),
                init::kaiming(rng, vec![*kb, q, q], kb * q),
            )?;
            params.insert(format!("fem.br{br}.convb.b"), init::zeros(vec![1, q]))?;
        }
    }
    Ok(())
}

/// One branch: optional pre-pool, conv + GeLU, optional second conv + GeLU.
fn branch(g: &mut Graph, x: Var, p: &BoundParams, br: usize, pool_first: bool) -> Result<Var> {
    let mut h = if pool_first { g.maxpool1d(x, 3)? } else { x };
    let wa = p.var(&format!("fem.br{br}.conva.w"))?;
    let ba = p.var(&format!("fem.br{br}.conva.b"))?;
    h = g.conv1d(h, wa, ba)?;
    h = g.gelu(h)?;
    if let Some(kb) = BRANCH_KERNELS[br - 1].1 {
        debug_assert!(kb % 2 == 1);
        let wb = p.var(&format!("fem.br{br}.convb.w"))?;
        let bb = p.var(&format!("fem.br{br}.convb.b"))?;
        h = g.conv1d(h, wb, bb)?;
        h = g.gelu(h)?;
    }
    Ok(h)
}

/// Forward pass: `L x 1 -> L x F` with the four branch outputs concatenated
/// along the channel axis in branch order.
pub fn fem_forward(g: &mut Graph, x: Var, p: &BoundParams, cfg: &FemConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != 1 {
        return Err(Error::Shape {
            op: "fem",
            detail: format!("expected input shape [L, 1], got {shape:?}"),
        });
    }
    if shape[0] < 5 {
        return Err(Error::Usage(format!(
            "fem requires sequence length >= 5 so the widest kernel fits, got {}",
            shape[0]
        )));
    }
    let b1 = branch(g, x, p, 1, false)?;
    let b2 = branch(g, x, p, 2, false)?;
    let b3 = branch(g, x, p, 3, false)?;
    let b4 = branch(g, x, p, 4, true)?;
    g.concat(&[b1, b2, b3, b4], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{max_rel_err, numerical_grad, FD_STEP};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn params_for(f: usize, seed: u64) -> ParamSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        init_fem_params(&FemConfig { channels: f }, &mut rng, &mut ps).unwrap();
        ps
    }

    fn forward_values(ps: &ParamSet, xs: &[f64], f: usize) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![xs.len(), 1], xs.to_vec()).unwrap());
        let bound = ps.bind(&mut g);
        let y = fem_forward(&mut g, x, &bound, &FemConfig { channels: f }).unwrap();
        g.data(y).to_vec()
    }

    #[test]
    fn rejects_channels_not_divisible_by_four() {
        let cfg = FemConfig { channels: 30 };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.code(), "config");
    }

    #[test]
    fn output_shape_is_l_by_f() {
        let ps = params_for(8, 3);
        let y = forward_values(&ps, &[0.1, -0.2, 0.3, 0.05, -0.4, 0.9], 8);
        assert_eq!(y.len(), 6 * 8);
    }

    #[test]
    fn identity_weight_branch_passes_gelu_of_input() {
        // With branch-1 conv weight 1 and bias 0, channel 0 of the output is
        // exactly gelu(input) because the pointwise conv is the identity.
        let f = 4;
        let mut ps = params_for(f, 11);
        let w = ps.get_mut("fem.br1.conva.w").unwrap();
        w.data = vec![1.0];
        let b = ps.get_mut("fem.br1.conva.b").unwrap();
        b.data = vec![0.0];
        let xs = [0.3, -1.1, 0.0, 2.4, 0.7];
        let y = forward_values(&ps, &xs, f);
        for (i, x) in xs.iter().enumerate() {
            let got = y[i * f];
            let want = {
                let mut g = Graph::new();
                let xv = g.leaf(Tensor::new(vec![1, 1], vec![*x]).unwrap());
                let gv = g.gelu(xv).unwrap();
                g.data(gv)[0]
            };
            assert_eq!(got, want, "row {i}");
        }
    }

    #[test]
    fn translation_equivariance_in_the_interior() {
        // Shifting the input by two steps shifts interior output rows by the
        // same amount: every branch has receptive-field radius <= 2, so rows
        // that stay at least two steps away from either boundary see the same
        // window before and after the shift.
        let f = 8;
        let ps = params_for(f, 29);
        let l = 16;
        let shift = 2;
        let mut rng = ChaCha20Rng::seed_from_u64(91);
        let base: Vec<f64> = (0..l + shift).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a: Vec<f64> = base[..l].to_vec();
        let b: Vec<f64> = base[shift..].to_vec();
        let ya = forward_values(&ps, &a, f);
        let yb = forward_values(&ps, &b, f);
        // Row r of yb corresponds to row r + shift of ya. Branch 4's pool plus
        // its pointwise conv has radius 1; branch 3 has radius 2. Require the
        // source row to sit in the interior of both sequences.
        for r in 2..l - 2 - shift {
            let from_a = &ya[(r + shift) * f..(r + shift + 1) * f];
            let from_b = &yb[r * f..(r + 1) * f];
            assert_eq!(from_a, from_b, "row {r}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = 4;
        let ps = params_for(f, 5);
        let l = 7;
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let xs: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // The pool branch picks window maxima; finite differences are only
        // valid while no perturbation flips an argmax, so require a healthy
        // gap between any two input values.
        for i in 0..l {
            for j in i + 1..l {
                assert!(
                    (xs[i] - xs[j]).abs() > 1e-3,
                    "seeded input has near-tie at ({i},{j}); pick another seed"
                );
            }
        }

        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![l, 1], xs.clone())
                .unwrap()
                .requires_grad(),
        );
        let bound = ps.bind(&mut g);
        let y = fem_forward(&mut g, x, &bound, &FemConfig { channels: f }).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let numeric = numerical_grad(
            |vals| {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::new(vec![l, 1], vals.to_vec()).unwrap());
                let bound = ps.bind(&mut g);
                let y = fem_forward(&mut g, x, &bound, &FemConfig { channels: f }).unwrap();
                let loss = g.sum_all(y).unwrap();
                g.data(loss)[0]
            },
            &xs,
            FD_STEP,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-5, "max rel err {err}");
    }
}
