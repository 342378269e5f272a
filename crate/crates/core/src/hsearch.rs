//! Hyperparameter search: random sampling over a declared space with an
//! optional TPE-lite refinement that biases later draws toward the
//! top-quartile region of completed trials.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dataio;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// One search dimension. All values are carried as `f64`; integer and
/// categorical dimensions round-trip exactly within the f64 mantissa.
#[derive(Debug, Clone, PartialEq)]
pub enum Dim {
    Categorical(Vec<f64>),
    LogUniform { lo: f64, hi: f64 },
    IntUniform { lo: i64, hi: i64 },
}

impl Dim {
    fn validate(&self, name: &str) -> Result<()> {
        match self {
            Dim::Categorical(vs) => {
                if vs.is_empty() {
                    return Err(Error::Usage(format!("dimension {name}: empty categorical set")));
                }
                if vs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Usage(format!("dimension {name}: non-finite category")));
                }
            }
            Dim::LogUniform { lo, hi } => {
                if !(*lo > 0.0 && hi.is_finite() && lo <= hi) {
                    return Err(Error::Usage(format!(
                        "dimension {name}: log-uniform bounds must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
                    )));
                }
            }
            Dim::IntUniform { lo, hi } => {
                if lo > hi {
                    return Err(Error::Usage(format!(
                        "dimension {name}: integer bounds out of order, got [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha20Rng) -> f64 {
        match self {
            Dim::Categorical(vs) => vs[rng.gen_range(0..vs.len())],
            Dim::LogUniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    rng.gen_range(lo.ln()..hi.ln()).exp()
                }
            }
            Dim::IntUniform { lo, hi } => rng.gen_range(*lo..=*hi) as f64,
        }
    }
}

/// Ordered set of named dimensions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchSpace {
    pub dims: Vec<(String, Dim)>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Usage("search space has no dimensions".into()));
        }
        for (name, dim) in &self.dims {
            dim.validate(name)?;
        }
        Ok(())
    }

    /// Parse a space plus options from a `key = value` file.
    ///
    /// Dimension syntax: `cat:1,2,3`, `log:1e-5,1e-3`, `int:32,128`.
    /// The keys `tpe` (`on`/`off`) and `trial_epochs` set options instead
    /// of dimensions. `#` starts a comment; blank lines are ignored.
    pub fn load(path: &Path) -> Result<(SearchSpace, SearchOptions)> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut dims = Vec::new();
        let mut opts = SearchOptions::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = |msg: String| Error::Data(format!("{}:{}: {msg}", path.display(), lineno + 1));
            match key {
                "tpe" => {
                    opts.use_tpe = match value {
                        "on" => true,
                        "off" => false,
                        other => return Err(ctx(format!("tpe must be on or off, got {other}"))),
                    };
                }
                "trial_epochs" => {
                    opts.trial_epochs = value
                        .parse()
                        .map_err(|e| ctx(format!("bad trial_epochs {value}: {e}")))?;
                }
                _ => {
                    if dims.iter().any(|(n, _)| n == key) {
                        return Err(ctx(format!("duplicate dimension {key}")));
                    }
                    dims.push((key.to_string(), parse_dim(value).map_err(ctx)?));
                }
            }
        }
        let space = SearchSpace { dims };
        space.validate()?;
        Ok((space, opts))
    }
}

fn parse_dim(value: &str) -> std::result::Result<Dim, String> {
    let (kind, body) = value
        .split_once(':')
        .ok_or_else(|| format!("expected cat:/log:/int: prefix, got {value}"))?;
    let parts: Vec<&str> = body.split(',').map(str::trim).collect();
    let nums = |parts: &[&str]| -> std::result::Result<Vec<f64>, String> {
        parts
            .iter()
            .map(|p| p.parse::<f64>().map_err(|e| format!("bad number {p}: {e}")))
            .collect()
    };
    match kind.trim() {
        "cat" => Ok(Dim::Categorical(nums(&parts)?)),
        "log" => {
            let v = nums(&parts)?;
            if v.len() != 2 {
                return Err(format!("log dimension needs lo,hi, got {body}"));
            }
            Ok(Dim::LogUniform { lo: v[0], hi: v[1] })
        }
        "int" => {
            if parts.len() != 2 {
                return Err(format!("int dimension needs lo,hi, got {body}"));
            }
            let lo = parts[0].parse().map_err(|e| format!("bad integer {}: {e}", parts[0]))?;
            let hi = parts[1].parse().map_err(|e| format!("bad integer {}: {e}", parts[1]))?;
            Ok(Dim::IntUniform { lo, hi })
        }
        other => Err(format!("unknown dimension kind {other}")),
    }
}

/// Search behavior knobs. Trials train for `trial_epochs` as a cheap proxy
/// for the full schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    pub use_tpe: bool,
    pub trial_epochs: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { use_tpe: false, trial_epochs: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStatus {
    Completed,
    Failed,
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialStatus::Completed => "completed",
            TrialStatus::Failed => "failed",
        })
    }
}

/// One evaluated configuration. Failed trials carry a NaN objective and the
/// error text in `note`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub config: BTreeMap<String, f64>,
    pub objective: f64,
    pub seed: u64,
    pub status: TrialStatus,
    pub note: String,
}

/// Draw one configuration: independent per-dimension draws in declaration
/// order, log-uniform via exp of a uniform draw in log bounds.
pub fn sample(space: &SearchSpace, rng: &mut ChaCha20Rng) -> BTreeMap<String, f64> {
    space
        .dims
        .iter()
        .map(|(name, dim)| (name.clone(), dim.draw(rng)))
        .collect()
}

/// Run `budget` trials and return `(best, all trials ranked by objective)`.
///
/// Each trial draws its configuration from an RNG seeded with
/// `derive_seed(seed, index)` and passes that same seed to `eval`, so any
/// single trial replays bit-for-bit from its logged seed. With
/// `opts.use_tpe`, trials after the first half sample candidates from a
/// kernel density fit to the top-quartile configs and keep the candidate
/// with the best good-to-rest density ratio. Ranking breaks objective ties
/// by trial index; failed trials sort last.
pub fn search<F>(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    opts: &SearchOptions,
    mut eval: F,
) -> Result<(Trial, Vec<Trial>)>
where
    F: FnMut(&BTreeMap<String, f64>, u64) -> Result<f64>,
{
    space.validate()?;
    if budget == 0 {
        return Err(Error::Usage("search budget must be at least 1".into()));
    }
    let mut trials: Vec<Trial> = Vec::with_capacity(budget);
    for i in 0..budget {
        let trial_seed = crate::derive_seed(seed, i as u64);
        let mut rng = ChaCha20Rng::seed_from_u64(trial_seed);
        let config = if opts.use_tpe && i >= budget.div_ceil(2) {
            tpe_sample(space, &trials, &mut rng)
        } else {
            sample(space, &mut rng)
        };
        let trial = match eval(&config, trial_seed) {
            Ok(obj) if obj.is_finite() => Trial {
                index: i,
                config,
                objective: obj,
                seed: trial_seed,
                status: TrialStatus::Completed,
                note: String::new(),
            },
            Ok(obj) => Trial {
                index: i,
                config,
                objective: f64::NAN,
                seed: trial_seed,
                status: TrialStatus::Failed,
                note: format!("non-finite objective {obj}"),
            },
            Err(e) => Trial {
                index: i,
                config,
                objective: f64::NAN,
                seed: trial_seed,
                status: TrialStatus::Failed,
                note: e.to_string(),
            },
        };
        trials.push(trial);
    }
    if trials.iter().all(|t| t.status == TrialStatus::Failed) {
        let diags: Vec<String> = trials
            .iter()
            .map(|t| format!("trial {} (seed {}): {}", t.index, t.seed, t.note))
            .collect();
        return Err(Error::Data(format!("all {budget} trials failed: {}", diags.join("; "))));
    }
    trials.sort_by(|a, b| rank_key(a).partial_cmp(&rank_key(b)).unwrap().then(a.index.cmp(&b.index)));
    let best = trials[0].clone();
    Ok((best, trials))
}

fn rank_key(t: &Trial) -> f64 {
    if t.status == TrialStatus::Completed {
        t.objective
    } else {
        f64::INFINITY
    }
}

/// Sample a TPE-lite candidate: split completed trials into the top
/// quartile ("good") and the rest, draw candidates near good configs, and
/// keep the one maximizing the product of per-dimension good/rest density
/// ratios. Falls back to a plain random draw while there are fewer than
/// four completed trials.
fn tpe_sample(
    space: &SearchSpace,
    trials: &[Trial],
    rng: &mut ChaCha20Rng,
) -> BTreeMap<String, f64> {
    let done: Vec<&Trial> = trials.iter().filter(|t| t.status == TrialStatus::Completed).collect();
    if done.len() < 4 {
        return sample(space, rng);
    }
    let mut ranked = done.clone();
    ranked.sort_by(|a, b| a.objective.partial_cmp(&b.objective).unwrap());
    let n_good = (ranked.len() / 4).max(1);
    let (good, rest) = ranked.split_at(n_good);

    let column = |set: &[&Trial], name: &str| -> Vec<f64> {
        set.iter().filter_map(|t| t.config.get(name).copied()).collect()
    };

    const N_CANDIDATES: usize = 24;
    let mut best: Option<(f64, BTreeMap<String, f64>)> = None;
    for _ in 0..N_CANDIDATES {
        let mut config = BTreeMap::new();
        let mut score = 0.0;
        for (name, dim) in &space.dims {
            let g = column(good, name);
            let r = column(rest, name);
            let value = draw_near(dim, &g, rng);
            score += density(dim, &g, value).ln() - density(dim, &r, value).ln();
            config.insert(name.clone(), value);
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, config));
        }
    }
    best.unwrap().1
}

/// Draw a value near a random member of `anchors` (good-set configs).
fn draw_near(dim: &Dim, anchors: &[f64], rng: &mut ChaCha20Rng) -> f64 {
    if anchors.is_empty() {
        let mut one = ChaCha20Rng::seed_from_u64(rng.gen());
        return dim.draw(&mut one);
    }
    let anchor = anchors[rng.gen_range(0..anchors.len())];
    match dim {
        Dim::Categorical(_) => anchor,
        Dim::LogUniform { lo, hi } => {
            let bw = bandwidth(&anchors.iter().map(|v| v.ln()).collect::<Vec<_>>());
            let z = gaussian(rng);
            (anchor.ln() + bw * z).exp().clamp(*lo, *hi)
        }
        Dim::IntUniform { lo, hi } => {
            let jitter = rng.gen_range(-1i64..=1);
            ((anchor as i64).saturating_add(jitter)).clamp(*lo, *hi) as f64
        }
    }
}

/// Smoothed density of `value` under the observations for one dimension.
/// Continuous dims use a Gaussian kernel density in log space; discrete
/// dims use Laplace-smoothed frequencies.
fn density(dim: &Dim, obs: &[f64], value: f64) -> f64 {
    if obs.is_empty() {
        return 1e-12;
    }
    match dim {
        Dim::Categorical(vs) => {
            let hits = obs.iter().filter(|o| **o == value).count();
            (hits as f64 + 1.0) / (obs.len() as f64 + vs.len() as f64)
        }
        Dim::IntUniform { lo, hi } => {
            let hits = obs.iter().filter(|o| **o == value).count();
            let k = (hi - lo + 1) as f64;
            (hits as f64 + 1.0) / (obs.len() as f64 + k)
        }
        Dim::LogUniform { .. } => {
            let logs: Vec<f64> = obs.iter().map(|v| v.ln()).collect();
            let bw = bandwidth(&logs);
            let x = value.ln();
            let sum: f64 = logs
                .iter()
                .map(|m| {
                    let z = (x - m) / bw;
                    (-0.5 * z * z).exp()
                })
                .sum();
            (sum / (obs.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt())).max(1e-12)
        }
    }
}

/// Silverman's rule of thumb with a floor to keep kernels finite.
fn bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (1.06 * var.sqrt() * n.powf(-0.2)).max(1e-3)
}

/// Standard normal draw via Box-Muller.
fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Write trials as CSV `trial,config_json,objective,seed,status` in the
/// given order. Config JSON keys are sorted.
pub fn write_trials_csv(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut w = dataio::csv_writer(path)?;
    dataio::write_rec(&mut w, path, &["trial", "config_json", "objective", "seed", "status"])?;
    for t in trials {
        let json = serde_json::to_string(&t.config)
            .map_err(|e| Error::Data(format!("trial config serialization: {e}")))?;
        dataio::write_rec(
            &mut w,
            path,
            &[
                t.index.to_string(),
                json,
                t.objective.to_string(),
                t.seed.to_string(),
                t.status.to_string(),
            ],
        )?;
    }
    dataio::finish_csv(w, path)
}

/// Apply a sampled configuration onto model and train configs by
/// dimension name. Accepts both short aliases and full field names.
pub fn apply_config(
    config: &BTreeMap<String, f64>,
    model: &mut ModelConfig,
    train: &mut TrainConfig,
) -> Result<()> {
    for (key, &value) in config {
        let as_usize = || -> Result<usize> {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::Usage(format!(
                    "dimension {key} needs a non-negative integer, got {value}"
                )));
            }
            Ok(value as usize)
        };
        match key.as_str() {
            "F" | "fem_channels" => model.fem_channels = as_usize()?,
            "H" | "lstm_hidden" => model.lstm_hidden = as_usize()?,
            "ffn" | "ffn_hidden" => model.ffn_hidden = as_usize()?,
            "task" | "task_hidden" => model.task_hidden = as_usize()?,
            "heads" => model.heads = as_usize()?,
            "rul_weight" => model.rul_weight = value,
            "lr" | "base_lr" => train.base_lr = value,
            "batch" | "batch_size" => train.batch_size = as_usize()?,
            "decay" => train.decay = value,
            "warmup" | "warmup_epochs" => train.warmup_epochs = as_usize()?,
            "epochs" => train.epochs = as_usize()?,
            "clip" | "grad_clip_norm" => train.grad_clip_norm = value,
            other => {
                return Err(Error::Usage(format!("unknown search dimension {other}")));
            }
        }
    }
    Ok(())
}
