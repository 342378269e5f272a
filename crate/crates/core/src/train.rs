//! Training loop: joint MSE loss, Adam with warmup + geometric decay,
//! deterministic shuffling, global-norm gradient clipping, checkpointing
//! and CSV logging.
//!
//! Determinism contract: given one seed, parameter init, epoch shuffles,
//! per-sample attention seeds and the gradient reduction order are all
//! fixed, so training is bit-reproducible for any worker-thread count. The
//! `CELLPROG_THREADS` environment variable (default 1) only caps how many
//! samples of a batch evaluate concurrently; their gradients are summed in
//! batch order afterwards.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::dataio::{self, CellDataset};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Prediction, Target};
use crate::tensor::adam::AdamState;
use crate::tensor::checkpoint;
use crate::tensor::{Graph, ParamSet, Tensor};

/// Optimization hyperparameters, persisted as key=value text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            base_lr: 1e-4,
            warmup_epochs: 7,
            decay: 0.75,
            grad_clip_norm: 1.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "epochs and batch_size must be positive, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("decay must be positive, got {}", self.decay)));
        }
        if !(self.grad_clip_norm >= 0.0 && self.grad_clip_norm.is_finite()) {
            return Err(Error::Config(format!(
                "grad_clip_norm must be non-negative (0 disables), got {}",
                self.grad_clip_norm
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        dataio::write_kv_file(
            path,
            &[
                ("epochs", self.epochs.to_string()),
                ("batch_size", self.batch_size.to_string()),
                ("base_lr", self.base_lr.to_string()),
                ("warmup_epochs", self.warmup_epochs.to_string()),
                ("decay", self.decay.to_string()),
                ("grad_clip_norm", self.grad_clip_norm.to_string()),
                ("seed", self.seed.to_string()),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let kv = dataio::read_kv_file(path)?;
        let mut cfg = TrainConfig::default();
        let parse_err = |k: &str, v: &str| Error::Parse {
            path: path.display().to_string(),
            detail: format!("key {k} has invalid value {v:?}"),
        };
        for (k, v) in &kv {
            match k.as_str() {
                "epochs" => cfg.epochs = v.parse().map_err(|_| parse_err(k, v))?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| parse_err(k, v))?,
                "base_lr" => cfg.base_lr = v.parse().map_err(|_| parse_err(k, v))?,
                "warmup_epochs" => cfg.warmup_epochs = v.parse().map_err(|_| parse_err(k, v))?,
                "decay" => cfg.decay = v.parse().map_err(|_| parse_err(k, v))?,
                "grad_clip_norm" => cfg.grad_clip_norm = v.parse().map_err(|_| parse_err(k, v))?,
                "seed" => cfg.seed = v.parse().map_err(|_| parse_err(k, v))?,
                other => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        detail: format!("unknown train config key {other:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One completed epoch's log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub soh_loss: f64,
    pub rul_loss: f64,
    pub seconds: f64,
}

/// Append-only training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub entries: Vec<EpochLog>,
}

impl TrainLog {
    /// Write as CSV with header `epoch,lr,loss,soh_loss,rul_loss,seconds`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = dataio::csv_writer(path)?;
        dataio::write_rec(&mut w, path, &["epoch", "lr", "loss", "soh_loss", "rul_loss", "seconds"])?;
        for e in &self.entries {
            dataio::write_rec(
                &mut w,
                path,
                &[
                    e.epoch.to_string(),
                    e.lr.to_string(),
                    e.loss.to_string(),
                    e.soh_loss.to_string(),
                    e.rul_loss.to_string(),
                    e.seconds.to_string(),
                ],
            )?;
        }
        dataio::finish_csv(w, path)
    }
}

/// Leave-one-cell-out split with an observation cycle for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionScheme {
    /// `cell_id` of the held-out test cell.
    pub hold_out: String,
    /// Evaluation starts at this cycle index.
    pub oc: usize,
}

/// Split cells into (training set, held-out test cell).
pub fn partition(
    cells: Vec<CellDataset>,
    scheme: &PartitionScheme,
) -> Result<(Vec<CellDataset>, CellDataset)> {
    let pos = cells.iter().position(|c| c.cell_id == scheme.hold_out).ok_or_else(|| {
        let ids: Vec<&str> = cells.iter().map(|c| c.cell_id.as_str()).collect();
        Error::Data(format!(
            "hold-out cell {:?} not found; available cells: {}",
            scheme.hold_out,
            ids.join(", ")
        ))
    })?;
    let mut cells = cells;
    let held = cells.remove(pos);
    Ok((cells, held))
}

/// Learning rate for a 0-based epoch: linear ramp from `base_lr / 8` to
/// `base_lr` across the warmup, then `decay` applied once per epoch past
/// it. The decayed value is computed by repeated multiplication so epoch
/// `warmup_epochs` is exactly `base_lr` and each later epoch is exactly
/// `decay` times its predecessor.
pub fn lr_at_epoch(e: usize, cfg: &TrainConfig) -> Result<f64> {
    if e >= cfg.epochs {
        return Err(Error::Usage(format!(
            "epoch {e} out of range for {} configured epochs",
            cfg.epochs
        )));
    }
    if e < cfg.warmup_epochs {
        let start = cfg.base_lr / 8.0;
        Ok(start + (cfg.base_lr - start) * (e as f64 / cfg.warmup_epochs as f64))
    } else {
        let mut lr = cfg.base_lr;
        for _ in 0..(e - cfg.warmup_epochs) {
            lr *= cfg.decay;
        }
        Ok(lr)
    }
}

/// Scale all gradient buffers so their global L2 norm is at most
/// `max_norm`; `max_norm <= 0` disables. Returns the pre-clip norm.
pub fn global_clip(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// One training sample: a cycle's voltage sequence and its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cell_id: String,
    pub cycle_index: usize,
    pub xs: Vec<f64>,
    pub target: Target,
}

/// RUL normalizer: the largest end-of-life position over the cells, at
/// least 1. Cells that never cross their threshold contribute nothing.
pub fn rul_scale_of(cells: &[CellDataset]) -> f64 {
    cells
        .iter()
        .filter_map(|c| dataio::derive_labels(c).n_eol)
        .max()
        .unwrap_or(1)
        .max(1) as f64
}

/// Flatten cells into per-cycle samples. Every sequence must already be
/// interpolated to `seq_len`.
pub fn build_samples(cells: &[CellDataset], seq_len: usize, rul_scale: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for cell in cells {
        let labels = dataio::derive_labels(cell);
        for (i, cyc) in cell.cycles.iter().enumerate() {
            if cyc.voltages.len() != seq_len {
                return Err(Error::Data(format!(
                    "cell {} cycle {} has {} samples but the model expects {}; \
                     run preprocess to interpolate",
                    cell.cell_id,
                    cyc.cycle_index,
                    cyc.voltages.len(),
                    seq_len
                )));
            }
            let rul_norm = labels.rul.as_ref().map(|r| r[i] as f64 / rul_scale);
            out.push(Sample {
                cell_id: cell.cell_id.clone(),
                cycle_index: cyc.cycle_index,
                xs: cyc.voltages.clone(),
                target: Target { soh: labels.soh[i], rul_norm },
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no training samples found".into()));
    }
    Ok(out)
}

/// Worker-thread cap from `CELLPROG_THREADS`; defaults to 1.
pub fn worker_threads() -> usize {
    std::env::var("CELLPROG_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1)
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub params: ParamSet,
    /// Parameters at the lowest-training-loss epoch.
    pub best_params: ParamSet,
    pub log: TrainLog,
    /// The model config actually used (with the derived `rul_scale`).
    pub model_cfg: ModelConfig,
}

struct SampleResult {
    loss: f64,
    soh_sq: f64,
    rul_sq: Option<f64>,
    grads: Vec<Vec<f64>>,
}

fn run_sample(
    params: &ParamSet,
    cfg: &ModelConfig,
    sample: &Sample,
    forward_seed: u64,
    inv_batch: f64,
    rul_coeff: f64,
) -> Result<SampleResult> {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![cfg.seq_len, 1], sample.xs.clone())?);
    let bound = params.bind(&mut g);
    let (soh, rul) = model::forward_graph(&mut g, x, &bound, cfg, forward_seed)?;
    let loss = model::sample_loss_graph(&mut g, soh, rul, &sample.target, inv_batch, rul_coeff)?;
    g.backward(loss)?;
    let grads = params.grads_from(&g, &bound);
    let pred = Prediction { soh_hat: g.data(soh)[0], rul_hat_norm: g.data(rul)[0] };
    let soh_d = pred.soh_hat - sample.target.soh;
    let rul_sq = sample.target.rul_norm.map(|rn| {
        let d = pred.rul_hat_norm - rn;
        d * d
    });
    Ok(SampleResult { loss: g.data(loss)[0], soh_sq: soh_d * soh_d, rul_sq, grads })
}

/// FNV-1a hash used to fingerprint the run configuration in the log.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn config_fingerprint(model_cfg: &ModelConfig, cfg: &TrainConfig) -> String {
    let text = format!("{model_cfg:?}|{cfg:?}");
    format!("{:016x}", fnv1a64(text.as_bytes()))
}

/// Train on the given cells. `rul_scale` is derived from the training
/// cells (largest end-of-life position), overriding whatever the incoming
/// model config carried, and the effective config is returned (and written
/// to `model.cfg` when `out_dir` is given, together with `run.cfg`,
/// `train_log.csv`, `checkpoint_best.cpg` and `checkpoint_final.cpg`).
pub fn train_run(
    cells: &[CellDataset],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut effective = model_cfg.clone();
    effective.rul_scale = rul_scale_of(cells);
    effective.validate()?;
    if cells.is_empty() {
        return Err(Error::Data("training requires at least one cell".into()));
    }
    let samples = build_samples(cells, effective.seq_len, effective.rul_scale)?;

    let mut params = model::init_params(&effective, cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(crate::derive_seed(cfg.seed, 1));
    let threads = worker_threads();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("failed to build worker pool: {e}")))?;

    let mut log = TrainLog {
        seed: cfg.seed,
        config_hash: config_fingerprint(&effective, cfg),
        entries: Vec::with_capacity(cfg.epochs),
    };
    let mut best_params = params.clone();
    let mut best_loss = f64::INFINITY;

    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    for e in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(e, cfg)?;
        order.shuffle(&mut shuffle_rng);

        let mut epoch_soh_sq = 0.0;
        let mut epoch_rul_sq = 0.0;
        let mut epoch_rul_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let b_rul = chunk
                .iter()
                .filter(|&&si| samples[si].target.rul_norm.is_some())
                .count();
            let inv_batch = 1.0 / b as f64;
            let rul_coeff =
                if b_rul > 0 { effective.rul_weight / b_rul as f64 } else { 0.0 };

            // Forward seed keyed on (epoch, stable sample index) so results
            // do not depend on batch composition or thread count.
            let jobs: Vec<(usize, u64)> = chunk
                .iter()
                .map(|&si| (si, crate::derive_seed(cfg.seed, ((e as u64) << 32) | si as u64)))
                .collect();
            let run_one = |&(si, fseed): &(usize, u64)| {
                run_sample(&params, &effective, &samples[si], fseed, inv_batch, rul_coeff)
            };
            let results: Vec<SampleResult> = if threads <= 1 {
                jobs.iter().map(run_one).collect::<Result<_>>()?
            } else {
                pool.install(|| jobs.par_iter().map(run_one).collect::<Result<_>>())?
            };

            let batch_loss: f64 = results.iter().map(|r| r.loss).sum();
            if !batch_loss.is_finite() {
                let members: Vec<String> = chunk
                    .iter()
                    .map(|&si| format!("{}#{}", samples[si].cell_id, samples[si].cycle_index))
                    .collect();
                return Err(Error::NonFinite(format!(
                    "epoch {e}: batch loss became non-finite at lr {lr}; batch samples: {}",
                    members.join(" ")
                )));
            }
            for r in &results {
                epoch_soh_sq += r.soh_sq;
                if let Some(rs) = r.rul_sq {
                    epoch_rul_sq += rs;
                    epoch_rul_n += 1;
                }
            }

            // Sum gradients in batch order: bit-identical for any thread count.
            let mut acc = results[0].grads.clone();
            for r in &results[1..] {
                for (dst, src) in acc.iter_mut().zip(&r.grads) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            global_clip(&mut acc, cfg.grad_clip_norm);
            adam.apply(&mut params, &acc, lr)?;
        }

        let soh_loss = epoch_soh_sq / n as f64;
        let rul_loss = if epoch_rul_n > 0 { epoch_rul_sq / epoch_rul_n as f64 } else { 0.0 };
        let loss = soh_loss + effective.rul_weight * rul_loss;
        if loss < best_loss {
            best_loss = loss;
            best_params = params.clone();
        }
        log.entries.push(EpochLog {
            epoch: e,
            lr,
            loss,
            soh_loss,
            rul_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        checkpoint::save_params(&dir.join("checkpoint_final.cpg"), &params)?;
        checkpoint::save_params(&dir.join("checkpoint_best.cpg"), &best_params)?;
        effective.save(&dir.join("model.cfg"))?;
        cfg.save(&dir.join("run.cfg"))?;
        log.write_csv(&dir.join("train_log.csv"))?;
    }
    Ok(TrainOutcome { params, best_params, log, model_cfg: effective })
}
