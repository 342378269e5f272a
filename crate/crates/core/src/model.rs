//! Full network assembly: feature extraction, recurrent encoding, dual
//! attention streams, and the two task heads, plus the joint training loss.
//!
//! One forward pass maps an `L x 1` voltage sequence to two scalars: the
//! state-of-health fraction and a normalized remaining-useful-life value.
//! The SOH output is deliberately unconstrained — capacity regeneration can
//! push true SOH above 1 early in life, so squashing would bias it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::dataio::{read_kv_file, write_kv_file};
use crate::dsam::{
    self, Act, FfnConfig, PolarizedConfig, SparseConfig,
};
use crate::error::{Error, Result};
use crate::fem::{self, FemConfig};
use crate::ielstm::{self, IeLstmConfig};
use crate::init;
use crate::tensor::{BoundParams, Graph, ParamSet, Tensor, Var};

/// Network hyperparameters, persisted alongside checkpoints as key=value
/// text.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input sequence length `L`.
    pub seq_len: usize,
    /// Feature channels `F`; divisible by 4 (branches) and by `heads`.
    pub fem_channels: usize,
    /// Recurrent hidden width `H`.
    pub lstm_hidden: usize,
    /// Task-head hidden width.
    pub task_hidden: usize,
    /// Encoder feed-forward hidden width.
    pub ffn_hidden: usize,
    /// Sparse-attention heads.
    pub heads: usize,
    /// Sparse-attention query budget factor.
    pub c_u: f64,
    /// Sparse-attention key-sample factor.
    pub c_s: f64,
    /// Normalize the sparsity measure's mean term by the sample size
    /// instead of the sequence length.
    pub mean_over_sample: bool,
    /// Encoder feed-forward activation.
    pub ffn_act: Act,
    /// Task-head hidden activation.
    pub task_act: Act,
    /// Weight of the RUL term in the joint loss.
    pub rul_weight: f64,
    /// Positive normalizer mapping RUL cycles to the unit-scale target.
    pub rul_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            seq_len: 200,
            fem_channels: 64,
            lstm_hidden: 128,
            task_hidden: 128,
            ffn_hidden: 64,
            heads: 4,
            c_u: 5.0,
            c_s: 5.0,
            mean_over_sample: false,
            ffn_act: Act::Sigmoid,
            task_act: Act::Gelu,
            rul_weight: 1.0,
            rul_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 5 {
            return Err(Error::Config(format!(
                "seq_len must be >= 5 (widest conv kernel), got {}",
                self.seq_len
            )));
        }
        for (name, v) in [
            ("fem_channels", self.fem_channels),
            ("lstm_hidden", self.lstm_hidden),
            ("task_hidden", self.task_hidden),
            ("ffn_hidden", self.ffn_hidden),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.fem_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "fem_channels must be divisible by 4, got {}",
                self.fem_channels
            )));
        }
        if !self.fem_channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "fem_channels ({}) must be divisible by heads ({})",
                self.fem_channels, self.heads
            )));
        }
        if !(self.c_u > 0.0 && self.c_s > 0.0) {
            return Err(Error::Config(format!(
                "c_u and c_s must be positive, got {} and {}",
                self.c_u, self.c_s
            )));
        }
        if !(self.rul_weight >= 0.0 && self.rul_weight.is_finite()) {
            return Err(Error::Config(format!(
                "rul_weight must be a finite non-negative number, got {}",
                self.rul_weight
            )));
        }
        if !(self.rul_scale > 0.0 && self.rul_scale.is_finite()) {
            return Err(Error::Config(format!(
                "rul_scale must be a finite positive number, got {}",
                self.rul_scale
            )));
        }
        Ok(())
    }

    pub fn fem(&self) -> FemConfig {
        FemConfig { channels: self.fem_channels }
    }

    pub fn ielstm(&self) -> IeLstmConfig {
        IeLstmConfig { channels: self.fem_channels, hidden: self.lstm_hidden }
    }

    pub fn polarized(&self) -> PolarizedConfig {
        PolarizedConfig { channels: self.fem_channels }
    }

    pub fn sparse(&self) -> SparseConfig {
        SparseConfig {
            channels: self.fem_channels,
            heads: self.heads,
            c_u: self.c_u,
            c_s: self.c_s,
            mean_over_sample: self.mean_over_sample,
        }
    }

    pub fn ffn(&self) -> FfnConfig {
        FfnConfig { channels: self.fem_channels, hidden: self.ffn_hidden, act: self.ffn_act }
    }

    /// Write as key=value text.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_kv_file(
            path,
            &[
                ("seq_len", self.seq_len.to_string()),
                ("fem_channels", self.fem_channels.to_string()),
                ("lstm_hidden", self.lstm_hidden.to_string()),
                ("task_hidden", self.task_hidden.to_string()),
                ("ffn_hidden", self.ffn_hidden.to_string()),
                ("heads", self.heads.to_string()),
                ("c_u", self.c_u.to_string()),
                ("c_s", self.c_s.to_string()),
                ("mean_over_sample", self.mean_over_sample.to_string()),
                ("ffn_act", self.ffn_act.as_str().to_string()),
                ("task_act", self.task_act.as_str().to_string()),
                ("rul_weight", self.rul_weight.to_string()),
                ("rul_scale", self.rul_scale.to_string()),
            ],
        )
    }

    /// Read from key=value text; missing keys keep defaults.
    pub fn load(path: &Path) -> Result<ModelConfig> {
        let kv = read_kv_file(path)?;
        let mut cfg = ModelConfig::default();
        let parse_err = |k: &str, v: &str| Error::Parse {
            path: path.display().to_string(),
            detail: format!("key {k} has invalid value {v:?}"),
        };
        for (k, v) in &kv {
            match k.as_str() {
                "seq_len" => cfg.seq_len = v.parse().map_err(|_| parse_err(k, v))?,
                "fem_channels" => cfg.fem_channels = v.parse().map_err(|_| parse_err(k, v))?,
                "lstm_hidden" => cfg.lstm_hidden = v.parse().map_err(|_| parse_err(k, v))?,
                "task_hidden" => cfg.task_hidden = v.parse().map_err(|_| parse_err(k, v))?,
                "ffn_hidden" => cfg.ffn_hidden = v.parse().map_err(|_| parse_err(k, v))?,
                "heads" => cfg.heads = v.parse().map_err(|_| parse_err(k, v))?,
                "c_u" => cfg.c_u = v.parse().map_err(|_| parse_err(k, v))?,
                "c_s" => cfg.c_s = v.parse().map_err(|_| parse_err(k, v))?,
                "mean_over_sample" => {
                    cfg.mean_over_sample = v.parse().map_err(|_| parse_err(k, v))?
                }
                "ffn_act" => cfg.ffn_act = Act::parse(v)?,
                "task_act" => cfg.task_act = Act::parse(v)?,
                "rul_weight" => cfg.rul_weight = v.parse().map_err(|_| parse_err(k, v))?,
                "rul_scale" => cfg.rul_scale = v.parse().map_err(|_| parse_err(k, v))?,
                other => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        detail: format!("unknown model config key {other:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One forward pass's outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// State-of-health as a fraction of rated capacity.
    pub soh_hat: f64,
    /// Normalized remaining useful life.
    pub rul_hat_norm: f64,
}

impl Prediction {
    /// Remaining useful life in cycles.
    pub fn rul_hat(&self, rul_scale: f64) -> f64 {
        self.rul_hat_norm * rul_scale
    }
}

/// Supervision for one sample. `rul_norm` is absent for cells without an
/// end-of-life crossing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub soh: f64,
    pub rul_norm: Option<f64>,
}

/// Joint loss value with its per-task parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub soh: f64,
    pub rul: f64,
}

/// Initialize all network parameters from one seed.
///
/// Insertion order is fixed (fem, ielstm, polarized stream, sparse stream,
/// task heads), which pins the checkpoint layout and the optimizer buffer
/// order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    fem::init_fem_params(&cfg.fem(), &mut rng, &mut ps)?;
    ielstm::init_ielstm_params(&cfg.ielstm(), &mut rng, &mut ps)?;
    dsam::init_polarized_params(&cfg.polarized(), &mut rng, &mut ps)?;
    dsam::init_encoder_params("dsam.pa.enc", &cfg.ffn(), &mut rng, &mut ps)?;
    dsam::init_sparse_params(&cfg.sparse(), &mut rng, &mut ps)?;
    dsam::init_encoder_params("dsam.sa.enc", &cfg.ffn(), &mut rng, &mut ps)?;
    for head in ["soh", "rul"] {
        ps.insert(
            format!("head.{head}.w1"),
            init::kaiming(&mut rng, vec![cfg.fem_channels, cfg.task_hidden], cfg.fem_channels),
        )?;
        ps.insert(format!("head.{head}.b1"), init::zeros(vec![1, cfg.task_hidden]))?;
        ps.insert(
            format!("head.{head}.w2"),
            init::kaiming(&mut rng, vec![cfg.task_hidden, 1], cfg.task_hidden),
        )?;
        ps.insert(format!("head.{head}.b2"), init::zeros(vec![1, 1]))?;
    }
    Ok(ps)
}

/// Task head: mean-pool over the sequence, hidden layer, linear scalar out.
pub fn task_head(
    g: &mut Graph,
    x: Var,
    p: &BoundParams,
    prefix: &str,
    act: Act,
) -> Result<Var> {
    let pool = g.mean_rows(x)?;
    let w1 = p.var(&format!("{prefix}.w1"))?;
    let b1 = p.var(&format!("{prefix}.b1"))?;
    let h = g.matmul(pool, w1)?;
    let h = g.add(h, b1)?;
    let h = act.apply(g, h)?;
    let w2 = p.var(&format!("{prefix}.w2"))?;
    let b2 = p.var(&format!("{prefix}.b2"))?;
    let out = g.matmul(h, w2)?;
    g.add(out, b2)
}

/// Build the whole network in an existing graph. Returns the two scalar
/// output nodes `(soh_hat, rul_hat_norm)`.
pub fn forward_graph(
    g: &mut Graph,
    x: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != cfg.seq_len || shape[1] != 1 {
        return Err(Error::Shape {
            op: "model_forward",
            detail: format!("expected input shape [{}, 1], got {shape:?}", cfg.seq_len),
        });
    }
    let feat = fem::fem_forward(g, x, p, &cfg.fem())?;
    let enc = ielstm::ielstm_forward(g, feat, p, &cfg.ielstm())?;
    let ffn = cfg.ffn();
    let (soh_stream, rul_stream) =
        dsam::dsam_forward(g, enc, p, &cfg.polarized(), &cfg.sparse(), &ffn, &ffn, seed)?;
    let soh = task_head(g, soh_stream, p, "head.soh", cfg.task_act)?;
    let rul = task_head(g, rul_stream, p, "head.rul", cfg.task_act)?;
    Ok((soh, rul))
}

/// Run one sequence through the network.
pub fn model_forward(
    xs: &[f64],
    params: &ParamSet,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Prediction> {
    cfg.validate()?;
    if xs.len() != cfg.seq_len {
        return Err(Error::Shape {
            op: "model_forward",
            detail: format!("expected {} input samples, got {}", cfg.seq_len, xs.len()),
        });
    }
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![xs.len(), 1], xs.to_vec())?);
    let bound = params.bind(&mut g);
    let (soh, rul) = forward_graph(&mut g, x, &bound, cfg, seed)?;
    Ok(Prediction { soh_hat: g.data(soh)[0], rul_hat_norm: g.data(rul)[0] })
}

/// Joint MSE loss over a batch: the SOH term averages over all samples, the
/// RUL term averages over RUL-labeled samples only and is scaled by
/// `rul_weight`.
pub fn joint_loss(preds: &[Prediction], targets: &[Target], rul_weight: f64) -> Result<LossParts> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Usage(format!(
            "joint_loss needs equal nonzero batch sizes, got {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut soh_sq = 0.0;
    let mut rul_sq = 0.0;
    let mut n_rul = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        let d = p.soh_hat - t.soh;
        soh_sq += d * d;
        if let Some(rn) = t.rul_norm {
            let d = p.rul_hat_norm - rn;
            rul_sq += d * d;
            n_rul += 1;
        }
    }
    let soh = soh_sq / preds.len() as f64;
    let rul = if n_rul > 0 { rul_sq / n_rul as f64 } else { 0.0 };
    Ok(LossParts { total: soh + rul_weight * rul, soh, rul })
}

/// In-graph loss contribution of one sample, weighted so that summing the
/// contributions over a batch reproduces [`joint_loss`]: `inv_batch` is
/// `1 / B` and `rul_coeff` is `rul_weight / B_rul` (zero when the batch has
/// no RUL labels).
pub fn sample_loss_graph(
    g: &mut Graph,
    soh_hat: Var,
    rul_hat_norm: Var,
    target: &Target,
    inv_batch: f64,
    rul_coeff: f64,
) -> Result<Var> {
    let t = g.scalar(target.soh);
    let d = g.sub(soh_hat, t)?;
    let sq = g.mul(d, d)?;
    let mut loss = g.scale(sq, inv_batch)?;
    if let Some(rn) = target.rul_norm {
        if rul_coeff != 0.0 {
            let t2 = g.scalar(rn);
            let d2 = g.sub(rul_hat_norm, t2)?;
            let sq2 = g.mul(d2, d2)?;
            let term = g.scale(sq2, rul_coeff)?;
            loss = g.add(loss, term)?;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{max_rel_err, numerical_grad, FD_STEP};
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            seq_len: 16,
            fem_channels: 8,
            lstm_hidden: 8,
            task_hidden: 16,
            ffn_hidden: 16,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation_catches_bad_divisibility() {
        let not_by_four = ModelConfig { fem_channels: 66, ..ModelConfig::default() };
        assert_eq!(not_by_four.validate().unwrap_err().code(), "config");
        let bad_heads = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert_eq!(bad_heads.validate().unwrap_err().code(), "config");
    }

    #[test]
    fn config_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cfg");
        let mut cfg = small_cfg();
        cfg.c_u = 3.5;
        cfg.mean_over_sample = true;
        cfg.task_act = Act::Sigmoid;
        cfg.rul_scale = 37.0;
        cfg.save(&path).unwrap();
        let back = ModelConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn task_head_zero_input_zero_biases_gives_zero() {
        let cfg = small_cfg();
        let ps = init_params(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![6, cfg.fem_channels]));
        let bound = ps.bind(&mut g);
        let y = task_head(&mut g, x, &bound, "head.soh", Act::Gelu).unwrap();
        assert_eq!(g.data(y), &[0.0]);
    }

    #[test]
    fn task_head_is_permutation_invariant() {
        let cfg = small_cfg();
        let ps = init_params(&cfg, 2).unwrap();
        let f = cfg.fem_channels;
        let l = 6;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..l * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |rows: &[usize]| -> f64 {
            let mut data = Vec::with_capacity(l * f);
            for &r in rows {
                data.extend_from_slice(&xs[r * f..(r + 1) * f]);
            }
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![l, f], data).unwrap());
            let bound = ps.bind(&mut g);
            let y = task_head(&mut g, x, &bound, "head.soh", Act::Gelu).unwrap();
            g.data(y)[0]
        };
        let ident = run(&[0, 1, 2, 3, 4, 5]);
        let swapped = run(&[5, 3, 1, 0, 4, 2]);
        assert!(
            (ident - swapped).abs() < 1e-12,
            "permutation moved head output: {ident} vs {swapped}"
        );
    }

    #[test]
    fn task_head_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let ps = init_params(&cfg, 3).unwrap();
        let f = 8;
        let l = 6;
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let xs: Vec<f64> = (0..l * f).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![l, f], xs.clone()).unwrap().requires_grad());
        let bound = ps.bind(&mut g);
        let y = task_head(&mut g, x, &bound, "head.rul", Act::Gelu).unwrap();
        g.backward(y).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let numeric = numerical_grad(
            |vals| {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::new(vec![l, f], vals.to_vec()).unwrap());
                let bound = ps.bind(&mut g);
                let y = task_head(&mut g, x, &bound, "head.rul", Act::Gelu).unwrap();
                g.data(y)[0]
            },
            &xs,
            FD_STEP,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn forward_produces_finite_scalars_and_is_deterministic() {
        let cfg = small_cfg();
        let ps = init_params(&cfg, 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..cfg.seq_len).map(|_| rng.gen_range(3.0..4.2)).collect();
        let a = model_forward(&xs, &ps, &cfg, 11).unwrap();
        assert!(a.soh_hat.is_finite() && a.rul_hat_norm.is_finite());
        let b = model_forward(&xs, &ps, &cfg, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_length_before_compute() {
        let cfg = small_cfg();
        let ps = init_params(&cfg, 4).unwrap();
        let err = model_forward(&[1.0; 7], &ps, &cfg, 0).unwrap_err();
        assert_eq!(err.code(), "shape");
    }

    #[test]
    fn rul_hat_scales_proportionally() {
        let p = Prediction { soh_hat: 0.9, rul_hat_norm: 0.25 };
        assert_eq!(p.rul_hat(100.0), 25.0);
        assert_eq!(p.rul_hat(200.0), 50.0);
    }

    #[test]
    fn joint_loss_hand_case() {
        let preds = [Prediction { soh_hat: 0.9, rul_hat_norm: 0.5 }];
        let targets = [Target { soh: 1.0, rul_norm: Some(0.7) }];
        let parts = joint_loss(&preds, &targets, 1.0).unwrap();
        assert!((parts.soh - 0.01).abs() < 1e-15);
        assert!((parts.rul - 0.04).abs() < 1e-15);
        assert!((parts.total - 0.05).abs() < 1e-15);
    }

    #[test]
    fn joint_loss_zero_for_perfect_predictions() {
        let preds = [Prediction { soh_hat: 0.8, rul_hat_norm: 0.3 }];
        let targets = [Target { soh: 0.8, rul_norm: Some(0.3) }];
        let parts = joint_loss(&preds, &targets, 1.0).unwrap();
        assert_eq!(parts.total, 0.0);
    }

    #[test]
    fn joint_loss_averages_rul_over_labeled_samples_only() {
        let preds = [
            Prediction { soh_hat: 1.0, rul_hat_norm: 0.8 },
            Prediction { soh_hat: 1.0, rul_hat_norm: 123.0 },
        ];
        let targets = [
            Target { soh: 1.0, rul_norm: Some(0.6) },
            Target { soh: 1.0, rul_norm: None },
        ];
        let parts = joint_loss(&preds, &targets, 1.0).unwrap();
        // (0.8 - 0.6)^2 averaged over the single labeled sample.
        assert!((parts.rul - 0.04).abs() < 1e-15, "rul part {}", parts.rul);
        assert_eq!(parts.soh, 0.0);
    }

    #[test]
    fn joint_loss_rejects_empty_batch() {
        let err = joint_loss(&[], &[], 1.0).unwrap_err();
        assert_eq!(err.code(), "usage");
    }

    #[test]
    fn graph_loss_sums_to_joint_loss() {
        let cfg = small_cfg();
        let ps = init_params(&cfg, 9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let batch: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..cfg.seq_len).map(|_| rng.gen_range(3.0..4.2)).collect())
            .collect();
        let targets = [
            Target { soh: 0.95, rul_norm: Some(0.5) },
            Target { soh: 0.90, rul_norm: None },
            Target { soh: 0.85, rul_norm: Some(0.2) },
        ];
        let inv_b = 1.0 / 3.0;
        let rul_coeff = 1.0 / 2.0; // two labeled samples, weight 1
        let mut preds = Vec::new();
        let mut total = 0.0;
        for (xs, t) in batch.iter().zip(&targets) {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![cfg.seq_len, 1], xs.clone()).unwrap());
            let bound = ps.bind(&mut g);
            let (soh, rul) = forward_graph(&mut g, x, &bound, &cfg, 77).unwrap();
            let loss = sample_loss_graph(&mut g, soh, rul, t, inv_b, rul_coeff).unwrap();
            total += g.data(loss)[0];
            preds.push(Prediction { soh_hat: g.data(soh)[0], rul_hat_norm: g.data(rul)[0] });
        }
        let parts = joint_loss(&preds, &targets, 1.0).unwrap();
        assert!(
            (total - parts.total).abs() < 1e-12,
            "graph {total} vs joint {}",
            parts.total
        );
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let ps = init_params(&cfg, 12).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let xs: Vec<f64> = (0..cfg.seq_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seed = 5;

        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![cfg.seq_len, 1], xs.clone()).unwrap().requires_grad());
        let bound = ps.bind(&mut g);
        let (soh, rul) = forward_graph(&mut g, x, &bound, &cfg, seed).unwrap();
        let loss = g.add(soh, rul).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let numeric = numerical_grad(
            |vals| {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::new(vec![cfg.seq_len, 1], vals.to_vec()).unwrap());
                let bound = ps.bind(&mut g);
                let (soh, rul) = forward_graph(&mut g, x, &bound, &cfg, seed).unwrap();
                let loss = g.add(soh, rul).unwrap();
                g.data(loss)[0]
            },
            &xs,
            FD_STEP,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-3, "max rel err {err}");
    }
}
