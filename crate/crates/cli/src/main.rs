//! Batch front end for the cellprog battery prognostics engine. Six
//! commands cover the workflow end to end: synthesize a corpus, interpolate
//! it to a shared length, train the multi-task SOH/RUL network, evaluate a
//! checkpoint from an observation cycle onward, search hyperparameters and
//! extract charge-curve feature factors. Every command writes a
//! run_manifest.txt into its output directory before doing any work, all
//! randomness flows through a --seed flag, and every failure exits 1 with a
//! single machine-parsable "E:<code>: ..." line on standard error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use cellprog_core::dataio::{self, CellDataset};
use cellprog_core::hsearch::{self, SearchSpace, TrialStatus};
use cellprog_core::metrics::{self, MetricsReport, Task};
use cellprog_core::model::{self, ModelConfig};
use cellprog_core::tensor::checkpoint;
use cellprog_core::tensor::ParamSet;
use cellprog_core::train::{self, PartitionScheme, TrainConfig};
use cellprog_core::{derive_seed, Error, Result};

#[derive(Parser)]
#[command(
    name = "cellprog",
    version,
    about = "Battery SOH/RUL prognostics: data synthesis, preprocessing, \
             training, evaluation, hyperparameter search and feature extraction"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic degradation corpus
    Synth(SynthArgs),
    /// Interpolate every cycle of a corpus to a shared length
    Preprocess(PreprocessArgs),
    /// Train the multi-task SOH/RUL network on all but one held-out cell
    Train(TrainArgs),
    /// Evaluate a checkpoint from an observation cycle onward
    Evaluate(EvaluateArgs),
    /// Hyperparameter search over a declared space
    Search(SearchArgs),
    /// Extract charge-curve feature factors and their capacity correlations
    Features(FeaturesArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// RNG seed for the generated corpus
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of cells to generate
    #[arg(long, default_value_t = 4)]
    cells: usize,
    /// Number of cycles per cell
    #[arg(long, default_value_t = 50)]
    cycles: usize,
    /// Samples per voltage trace
    #[arg(long, default_value_t = 200)]
    seq_len: usize,
    /// Output corpus directory (one subdirectory per cell)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input corpus directory
    #[arg(long = "in")]
    input: PathBuf,
    /// Length every cycle is interpolated to
    #[arg(long)]
    target_len: usize,
    /// Output corpus directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory to train on
    #[arg(long)]
    data: PathBuf,
    /// Cell id excluded from training
    #[arg(long)]
    hold_out: String,
    /// Observation cycle the downstream evaluation starts from
    #[arg(long)]
    oc: usize,
    /// Model config file (key=value)
    #[arg(long)]
    model_cfg: PathBuf,
    /// Training config file (key=value)
    #[arg(long)]
    train_cfg: PathBuf,
    /// Output directory for checkpoints, configs and the training log
    #[arg(long)]
    out: PathBuf,
    /// Override the seed from the training config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint file (its sibling model.cfg describes the architecture)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory to evaluate on
    #[arg(long)]
    data: PathBuf,
    /// First cycle index predictions are made for
    #[arg(long)]
    oc: usize,
    /// Output directory for reports and per-cycle error series
    #[arg(long)]
    out: PathBuf,
    /// Seed for the stochastic sparse-attention sampler
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct SearchArgs {
    /// Search-space file (key = cat:../log:../int:.. lines)
    #[arg(long)]
    space: PathBuf,
    /// Number of trials
    #[arg(long)]
    budget: usize,
    /// Corpus directory; the last cell (by id) is held out for scoring
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the trials table and best configs
    #[arg(long)]
    out: PathBuf,
    /// Seed driving trial sampling and per-trial training
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Input corpus directory
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory (per-cell feature and Pearson tables)
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            let rendered = e.render().to_string();
            let mut lines = rendered.lines();
            let first = lines.next().unwrap_or("invalid arguments");
            eprintln!("E:usage: {}", first.strip_prefix("error: ").unwrap_or(first));
            for line in lines {
                eprintln!("{line}");
            }
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        let msg = e.to_string();
        let msg = msg.strip_prefix(&format!("{}: ", e.code())).unwrap_or(&msg);
        eprintln!("E:{}: {msg}", e.code());
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Preprocess(a) => cmd_preprocess(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Search(a) => cmd_search(a),
        Cmd::Features(a) => cmd_features(a),
    }
}

// ---- run manifest ------------------------------------------------------------

/// Record the command and every flag in `<out>/run_manifest.txt` before any
/// work happens, so a run can be replayed from the manifest alone. The
/// timestamp line is the one field that varies between identical runs.
fn write_run_manifest(out: &Path, command: &str, flags: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut pairs: Vec<(&str, String)> = vec![("command", command.to_string())];
    pairs.extend(flags.iter().cloned());
    pairs.push(("timestamp_unix", timestamp_unix()));
    dataio::write_kv_file(&out.join("run_manifest.txt"), &pairs)
}

fn timestamp_unix() -> String {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_else(|_| "0".to_string())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

// ---- csv helpers -------------------------------------------------------------

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_rec<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    path: &Path,
    rec: &[String],
) -> Result<()> {
    w.write_record(rec).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn finish_csv<W: std::io::Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

// ---- synth ---------------------------------------------------------------------

fn cmd_synth(a: SynthArgs) -> Result<()> {
    write_run_manifest(
        &a.out,
        "synth",
        &[
            ("seed", a.seed.to_string()),
            ("cells", a.cells.to_string()),
            ("cycles", a.cycles.to_string()),
            ("seq_len", a.seq_len.to_string()),
            ("out", path_str(&a.out)),
        ],
    )?;
    let cells = dataio::synth_cells(a.seed, a.cells, a.cycles, a.seq_len, SYNTH_REGEN_RATE)?;
    for cell in &cells {
        dataio::save_cell_dir(&a.out.join(&cell.cell_id), cell)?;
    }
    println!("synth: wrote {} cells x {} cycles to {}", cells.len(), a.cycles, a.out.display());
    Ok(())
}

/// Fraction of cycles that see a capacity-regeneration jump in synthetic data.
const SYNTH_REGEN_RATE: f64 = 0.05;

// ---- preprocess ------------------------------------------------------------------

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    write_run_manifest(
        &a.out,
        "preprocess",
        &[
            ("in", path_str(&a.input)),
            ("target_len", a.target_len.to_string()),
            ("out", path_str(&a.out)),
        ],
    )?;
    let cells = dataio::load_cells_root(&a.input)?;
    let mut n = 0usize;
    for mut cell in cells {
        cell.target_len = a.target_len;
        let aligned = dataio::interpolate_cell(&cell)?;
        dataio::save_cell_dir(&a.out.join(&aligned.cell_id), &aligned)?;
        n += 1;
    }
    println!("preprocess: wrote {n} cells at length {} to {}", a.target_len, a.out.display());
    Ok(())
}

// ---- train ---------------------------------------------------------------------

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut flags = vec![
        ("data", path_str(&a.data)),
        ("hold_out", a.hold_out.clone()),
        ("oc", a.oc.to_string()),
        ("model_cfg", path_str(&a.model_cfg)),
        ("train_cfg", path_str(&a.train_cfg)),
        ("out", path_str(&a.out)),
    ];
    if let Some(seed) = a.seed {
        flags.push(("seed", seed.to_string()));
    }
    write_run_manifest(&a.out, "train", &flags)?;

    let model_cfg = ModelConfig::load(&a.model_cfg)?;
    let mut train_cfg = TrainConfig::load(&a.train_cfg)?;
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }
    let cells = dataio::load_cells_root(&a.data)?;
    let scheme = PartitionScheme { hold_out: a.hold_out.clone(), oc: a.oc };
    let (train_cells, held) = train::partition(cells, &scheme)?;

    let outcome = train::train_run(&train_cells, &model_cfg, &train_cfg, Some(&a.out))?;
    let first = outcome.log.entries.first();
    let last = outcome.log.entries.last();
    let best = outcome
        .log
        .entries
        .iter()
        .min_by(|x, y| x.loss.total_cmp(&y.loss));
    println!(
        "train: {} training cells, {} held out, {} epochs, seed {}",
        train_cells.len(),
        held.cell_id,
        train_cfg.epochs,
        train_cfg.seed
    );
    if let (Some(f), Some(l), Some(b)) = (first, last, best) {
        println!(
            "train: loss {:.6} -> {:.6} (best {:.6} at epoch {})",
            f.loss, l.loss, b.loss, b.epoch
        );
    }
    println!(
        "train: wrote checkpoint_final.cpg, checkpoint_best.cpg, model.cfg, run.cfg, \
         train_log.csv to {}",
        a.out.display()
    );
    Ok(())
}

// ---- evaluate ------------------------------------------------------------------

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    write_run_manifest(
        &a.out,
        "evaluate",
        &[
            ("checkpoint", path_str(&a.checkpoint)),
            ("data", path_str(&a.data)),
            ("oc", a.oc.to_string()),
            ("out", path_str(&a.out)),
            ("seed", a.seed.to_string()),
        ],
    )?;

    let params = checkpoint::load_params(&a.checkpoint)?;
    let cfg_path = a
        .checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .join("model.cfg");
    let cfg = ModelConfig::load(&cfg_path)?;
    validate_checkpoint(&params, &cfg)?;

    let cells = dataio::load_cells_root(&a.data)?;
    let mut rows: Vec<MetricsReport> = Vec::new();
    let mut pooled_soh: (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    let mut pooled_rul: (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    let mut stream = 0u64;

    for cell in &cells {
        let samples = train::build_samples(std::slice::from_ref(cell), cfg.seq_len, cfg.rul_scale)?;
        let evaluated: Vec<_> = samples.iter().filter(|s| s.cycle_index >= a.oc).collect();
        if evaluated.is_empty() {
            continue;
        }

        let mut cycles = Vec::with_capacity(evaluated.len());
        let mut soh_true = Vec::with_capacity(evaluated.len());
        let mut soh_hat = Vec::with_capacity(evaluated.len());
        let mut rul_true = Vec::new();
        let mut rul_hat = Vec::new();
        let has_rul = evaluated.iter().all(|s| s.target.rul_norm.is_some());
        for s in &evaluated {
            let pred = model::model_forward(&s.xs, &params, &cfg, derive_seed(a.seed, stream))?;
            stream += 1;
            cycles.push(s.cycle_index);
            soh_true.push(s.target.soh);
            soh_hat.push(pred.soh_hat);
            if has_rul {
                rul_true.push(s.target.rul_norm.unwrap() * cfg.rul_scale);
                rul_hat.push(pred.rul_hat(cfg.rul_scale));
            }
        }

        let cell_dir = a.out.join(&cell.cell_id);
        fs::create_dir_all(&cell_dir).map_err(|e| Error::io(cell_dir.display().to_string(), e))?;
        write_predictions_csv(
            &cell_dir.join("predictions.csv"),
            &cycles,
            &soh_true,
            &soh_hat,
            has_rul.then_some((&rul_true, &rul_hat)),
        )?;
        let soh_err = metrics::soh_error_series(&soh_true, &soh_hat)?;
        write_series_csv(&cell_dir.join("soh_error.csv"), "error_pct", &cycles, &soh_err)?;
        rows.push(metrics::compute_metrics(&soh_true, &soh_hat, Task::Soh, &cell.cell_id)?);
        pooled_soh.0.extend_from_slice(&soh_true);
        pooled_soh.1.extend_from_slice(&soh_hat);
        if has_rul {
            let rul_err = metrics::rul_error_series(&rul_true, &rul_hat)?;
            write_series_csv(&cell_dir.join("rul_error.csv"), "error_cycles", &cycles, &rul_err)?;
            rows.push(metrics::compute_metrics(&rul_true, &rul_hat, Task::Rul, &cell.cell_id)?);
            pooled_rul.0.extend_from_slice(&rul_true);
            pooled_rul.1.extend_from_slice(&rul_hat);
        }
    }

    if rows.is_empty() {
        return Err(Error::Data(format!(
            "no cycles at or beyond observation cycle {}; nothing to evaluate",
            a.oc
        )));
    }
    if !pooled_soh.0.is_empty() {
        rows.push(metrics::compute_metrics(&pooled_soh.0, &pooled_soh.1, Task::Soh, "all")?);
    }
    if !pooled_rul.0.is_empty() {
        rows.push(metrics::compute_metrics(&pooled_rul.0, &pooled_rul.1, Task::Rul, "all")?);
    }
    metrics::write_report_csv(&a.out.join("report.csv"), &rows)?;

    println!("evaluate: from cycle {} with seed {}", a.oc, a.seed);
    println!("{:<10} {:<5} {:>12} {:>12} {:>14} {:>6}", "cell", "task", "mae", "rmse", "mape|medae", "n");
    for r in &rows {
        println!(
            "{:<10} {:<5} {:>12.6} {:>12.6} {:>14.6} {:>6}",
            r.cell_id, r.task, r.mae, r.rmse, r.mape_or_medae, r.n
        );
    }
    println!("evaluate: wrote report.csv and per-cell series to {}", a.out.display());
    Ok(())
}

/// A checkpoint matches a model config when it has exactly the parameter
/// tensors the architecture defines, each with the expected shape.
fn validate_checkpoint(params: &ParamSet, cfg: &ModelConfig) -> Result<()> {
    let expected = model::init_params(cfg, 0)?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            None => {
                return Err(Error::Config(format!(
                    "checkpoint does not match model.cfg: missing parameter {name}"
                )))
            }
            Some(got) if got.shape != t.shape => {
                return Err(Error::Config(format!(
                    "checkpoint does not match model.cfg: parameter {name} has shape {:?}, \
                     expected {:?}",
                    got.shape, t.shape
                )))
            }
            Some(_) => {}
        }
    }
    if params.len() != expected.len() {
        let extra: Vec<&str> =
            params.iter().map(|(n, _)| n).filter(|n| expected.get(n).is_none()).collect();
        return Err(Error::Config(format!(
            "checkpoint does not match model.cfg: unexpected parameters {}",
            extra.join(", ")
        )));
    }
    Ok(())
}

fn write_predictions_csv(
    path: &Path,
    cycles: &[usize],
    soh_true: &[f64],
    soh_hat: &[f64],
    rul: Option<(&Vec<f64>, &Vec<f64>)>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["cycle".to_string(), "soh_true".to_string(), "soh_hat".to_string()];
    if rul.is_some() {
        header.push("rul_true".to_string());
        header.push("rul_hat".to_string());
    }
    write_rec(&mut w, path, &header)?;
    for i in 0..cycles.len() {
        let mut rec = vec![cycles[i].to_string(), soh_true[i].to_string(), soh_hat[i].to_string()];
        if let Some((rt, rh)) = rul {
            rec.push(rt[i].to_string());
            rec.push(rh[i].to_string());
        }
        write_rec(&mut w, path, &rec)?;
    }
    finish_csv(w, path)
}

fn write_series_csv(path: &Path, value_name: &str, cycles: &[usize], values: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_rec(&mut w, path, &["cycle".to_string(), value_name.to_string()])?;
    for (c, v) in cycles.iter().zip(values) {
        write_rec(&mut w, path, &[c.to_string(), v.to_string()])?;
    }
    finish_csv(w, path)
}

// ---- search --------------------------------------------------------------------

fn cmd_search(a: SearchArgs) -> Result<()> {
    write_run_manifest(
        &a.out,
        "search",
        &[
            ("space", path_str(&a.space)),
            ("budget", a.budget.to_string()),
            ("data", path_str(&a.data)),
            ("out", path_str(&a.out)),
            ("seed", a.seed.to_string()),
        ],
    )?;

    let (space, opts) = SearchSpace::load(&a.space)?;
    let cells = dataio::load_cells_root(&a.data)?;
    if cells.len() < 2 {
        return Err(Error::Data(format!(
            "search needs at least two cells (one is held out for scoring), found {}",
            cells.len()
        )));
    }
    let seq_len = cells[0].target_len;
    for cell in &cells {
        for cyc in &cell.cycles {
            if cyc.voltages.len() != seq_len {
                return Err(Error::Data(format!(
                    "cell {} cycle {} has {} samples but the search expects {}; \
                     run preprocess first",
                    cell.cell_id,
                    cyc.cycle_index,
                    cyc.voltages.len(),
                    seq_len
                )));
            }
        }
    }
    let hold_out = cells.last().expect("at least two cells").cell_id.clone();
    let scheme = PartitionScheme { hold_out: hold_out.clone(), oc: 0 };
    let (train_cells, held) = train::partition(cells, &scheme)?;

    let base_model = ModelConfig { seq_len, ..ModelConfig::default() };
    let mut base_train = TrainConfig { epochs: opts.trial_epochs, ..TrainConfig::default() };
    clamp_warmup(&mut base_train);

    println!(
        "search: {} trials over {} dims, {} train cells, cell {} held out, {} epochs per trial",
        a.budget,
        space.dims.len(),
        train_cells.len(),
        hold_out,
        base_train.epochs
    );

    let eval = |config: &BTreeMap<String, f64>, trial_seed: u64| -> Result<f64> {
        let mut mcfg = base_model.clone();
        let mut tcfg = base_train.clone();
        hsearch::apply_config(config, &mut mcfg, &mut tcfg)?;
        clamp_warmup(&mut tcfg);
        tcfg.seed = trial_seed;
        let outcome = train::train_run(&train_cells, &mcfg, &tcfg, None)?;
        held_out_objective(&held, &outcome.params, &outcome.model_cfg, trial_seed)
    };
    let (best, trials) = hsearch::search(&space, a.budget, a.seed, &opts, eval)?;

    hsearch::write_trials_csv(&a.out.join("trials.csv"), &trials)?;
    let mut best_model = base_model.clone();
    let mut best_train = base_train.clone();
    hsearch::apply_config(&best.config, &mut best_model, &mut best_train)?;
    clamp_warmup(&mut best_train);
    best_train.seed = best.seed;
    best_model.save(&a.out.join("best_model.cfg"))?;
    best_train.save(&a.out.join("best_train.cfg"))?;

    println!("{:<6} {:>14} {:<10} config", "trial", "objective", "status");
    for t in &trials {
        let json = serde_json::to_string(&t.config)
            .map_err(|e| Error::Data(format!("trial config serialization: {e}")))?;
        match t.status {
            TrialStatus::Completed => {
                println!("{:<6} {:>14.6} {:<10} {json}", t.index, t.objective, t.status)
            }
            TrialStatus::Failed => println!("{:<6} {:>14} {:<10} {json}", t.index, "-", t.status),
        }
    }
    println!(
        "search: best trial {} (objective {:.6}); wrote trials.csv, best_model.cfg, \
         best_train.cfg to {}",
        best.index,
        best.objective,
        a.out.display()
    );
    Ok(())
}

/// Trials with too few epochs for the default warmup get the longest ramp
/// that still validates.
fn clamp_warmup(cfg: &mut TrainConfig) {
    if cfg.warmup_epochs >= cfg.epochs {
        cfg.warmup_epochs = cfg.epochs.saturating_sub(1);
    }
}

/// Joint loss of a trained trial on the held-out cell, with a forward seed
/// stream disjoint from training.
fn held_out_objective(
    held: &CellDataset,
    params: &ParamSet,
    cfg: &ModelConfig,
    trial_seed: u64,
) -> Result<f64> {
    let samples = train::build_samples(std::slice::from_ref(held), cfg.seq_len, cfg.rul_scale)?;
    let mut preds = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let seed = derive_seed(trial_seed, 1_000_000 + i as u64);
        preds.push(model::model_forward(&s.xs, params, cfg, seed)?);
        targets.push(s.target);
    }
    Ok(model::joint_loss(&preds, &targets, cfg.rul_weight)?.total)
}

// ---- features ------------------------------------------------------------------

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    write_run_manifest(
        &a.out,
        "features",
        &[("in", path_str(&a.input)), ("out", path_str(&a.out))],
    )?;
    let cells = dataio::load_cells_root(&a.input)?;
    for cell in &cells {
        let factors: Vec<_> = cell
            .cycles
            .iter()
            .map(|c| dataio::extract_feature_factors(c, cell.saturation_voltage))
            .collect();
        let capacities: Vec<f64> = cell.cycles.iter().map(|c| c.capacity).collect();

        let cell_dir = a.out.join(&cell.cell_id);
        fs::create_dir_all(&cell_dir).map_err(|e| Error::io(cell_dir.display().to_string(), e))?;

        let fpath = cell_dir.join("features.csv");
        let mut w = csv_writer(&fpath)?;
        write_rec(
            &mut w,
            &fpath,
            &[
                "cycle".to_string(),
                "onset_to_peak_s".to_string(),
                "plateau_s".to_string(),
                "slope_v_per_s".to_string(),
                "cc_integral_vs".to_string(),
                "slope_degenerate".to_string(),
            ],
        )?;
        for (cyc, f) in cell.cycles.iter().zip(&factors) {
            write_rec(
                &mut w,
                &fpath,
                &[
                    cyc.cycle_index.to_string(),
                    f.onset_to_peak_s.to_string(),
                    f.plateau_s.to_string(),
                    f.slope_v_per_s.to_string(),
                    f.cc_integral_vs.to_string(),
                    f.slope_degenerate.to_string(),
                ],
            )?;
        }
        finish_csv(w, &fpath)?;

        let series: [(&str, Vec<f64>); 5] = [
            ("onset_to_peak_s", factors.iter().map(|f| f.onset_to_peak_s).collect()),
            ("plateau_s", factors.iter().map(|f| f.plateau_s).collect()),
            ("slope_v_per_s", factors.iter().map(|f| f.slope_v_per_s).collect()),
            ("cc_integral_vs", factors.iter().map(|f| f.cc_integral_vs).collect()),
            ("capacity", capacities.clone()),
        ];
        let ppath = cell_dir.join("pearson.csv");
        let mut w = csv_writer(&ppath)?;
        write_rec(&mut w, &ppath, &["series".to_string(), "pearson_r".to_string()])?;
        println!("features: cell {} ({} cycles)", cell.cell_id, cell.cycles.len());
        for (name, values) in &series {
            let r = match dataio::pearson(values, &capacities) {
                Ok(r) => r.to_string(),
                Err(_) => String::new(),
            };
            let shown = if r.is_empty() { "-" } else { &r };
            println!("  {name:<16} vs capacity: {shown}");
            write_rec(&mut w, &ppath, &[name.to_string(), r])?;
        }
        finish_csv(w, &ppath)?;
    }
    println!("features: wrote per-cell features.csv and pearson.csv to {}", a.out.display());
    Ok(())
}
