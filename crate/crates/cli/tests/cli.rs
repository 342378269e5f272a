//! End-to-end tests of the cellprog binary: each spawns the compiled
//! executable against a temp directory and checks files, stdout, stderr
//! and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn cellprog(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellprog"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn cellprog")
}

fn run_ok(args: &[&str], cwd: &Path) -> String {
    let out = cellprog(args, cwd);
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn run_err(args: &[&str], cwd: &Path) -> String {
    let out = cellprog(args, cwd);
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    assert_eq!(out.status.code(), Some(1), "command {args:?} exit code");
    String::from_utf8(out.stderr).expect("utf-8 stderr")
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn write_tiny_model_cfg(path: &Path, seq_len: usize) {
    fs::write(
        path,
        format!(
            "seq_len={seq_len}\nfem_channels=4\nlstm_hidden=4\ntask_hidden=8\nffn_hidden=8\nheads=2\n"
        ),
    )
    .unwrap();
}

fn write_tiny_train_cfg(path: &Path) {
    fs::write(
        path,
        "epochs=2\nbatch_size=4\nbase_lr=0.001\nwarmup_epochs=1\ndecay=0.9\ngrad_clip_norm=1\nseed=7\n",
    )
    .unwrap();
}

/// A hand-written cell whose capacities never cross the EOL threshold.
fn write_survivor_cell(dir: &Path, seq_len: usize) {
    fs::create_dir_all(dir).unwrap();
    fs::write(
        dir.join("manifest.txt"),
        format!(
            "cell_id=survivor\nrated_capacity_ah=2\neol_threshold_ah=1.4\n\
             saturation_voltage_v=4.2\ntarget_len={seq_len}\n"
        ),
    )
    .unwrap();
    let mut cycles = String::from("cycle,t,v\n");
    for cycle in 0..3 {
        for i in 0..seq_len {
            let t = i as f64 * 10.0;
            let v = 3.0 + 1.2 * i as f64 / (seq_len - 1) as f64 + 0.01 * cycle as f64;
            cycles.push_str(&format!("{cycle},{t},{v}\n"));
        }
    }
    fs::write(dir.join("cycles.csv"), cycles).unwrap();
    fs::write(dir.join("labels.csv"), "cycle,capacity_ah\n0,1.95\n1,1.93\n2,1.91\n").unwrap();
}

#[test]
fn synth_defaults_produce_four_cells() {
    let tmp = TempDir::new().unwrap();
    let out = run_ok(&["synth", "--out", "corpus"], tmp.path());
    assert!(out.contains("4 cells"), "stdout: {out}");
    let mut dirs: Vec<String> = fs::read_dir(tmp.path().join("corpus"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "run_manifest.txt")
        .collect();
    dirs.sort();
    assert_eq!(dirs.len(), 4);
    for d in &dirs {
        let cell = tmp.path().join("corpus").join(d);
        assert!(cell.join("manifest.txt").exists());
        assert!(cell.join("cycles.csv").exists());
        assert!(cell.join("labels.csv").exists());
    }
    let manifest = read(&tmp.path().join("corpus/run_manifest.txt"));
    assert!(manifest.contains("command=synth"));
    assert!(manifest.contains("seed=42"));
    assert!(manifest.contains("timestamp_unix="));
}

#[test]
fn synth_same_seed_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let args = ["synth", "--seed", "9", "--cells", "2", "--cycles", "6", "--seq-len", "24"];
    run_ok(&[&args[..], &["--out", "a"]].concat(), tmp.path());
    run_ok(&[&args[..], &["--out", "b"]].concat(), tmp.path());
    for cell in ["synth00", "synth01"] {
        for file in ["manifest.txt", "cycles.csv", "labels.csv"] {
            let a = read(&tmp.path().join("a").join(cell).join(file));
            let b = read(&tmp.path().join("b").join(cell).join(file));
            assert_eq!(a, b, "{cell}/{file} differs between identical runs");
        }
    }
}

#[test]
fn synth_cycle_count_sets_label_rows() {
    let tmp = TempDir::new().unwrap();
    run_ok(
        &["synth", "--cells", "1", "--cycles", "60", "--seq-len", "24", "--out", "c"],
        tmp.path(),
    );
    let labels = read(&tmp.path().join("c/synth00/labels.csv"));
    assert_eq!(labels.lines().count(), 61, "header plus one row per cycle");
}

#[test]
fn preprocess_inserts_midpoints() {
    let tmp = TempDir::new().unwrap();
    let cell = tmp.path().join("raw/onecell");
    fs::create_dir_all(&cell).unwrap();
    fs::write(
        cell.join("manifest.txt"),
        "cell_id=onecell\nrated_capacity_ah=2\neol_threshold_ah=1.4\n\
         saturation_voltage_v=4.2\ntarget_len=2\n",
    )
    .unwrap();
    fs::write(cell.join("cycles.csv"), "cycle,t,v\n0,0,1\n0,2,3\n").unwrap();
    fs::write(cell.join("labels.csv"), "cycle,capacity_ah\n0,1.8\n").unwrap();

    run_ok(&["preprocess", "--in", "raw", "--target-len", "3", "--out", "prep"], tmp.path());
    let cycles = read(&tmp.path().join("prep/onecell/cycles.csv"));
    let lines: Vec<&str> = cycles.lines().collect();
    assert_eq!(lines, vec!["cycle,t,v", "0,0,1", "0,1,2", "0,2,3"]);

    // Preprocessing already-aligned input writes byte-identical data files.
    run_ok(&["preprocess", "--in", "prep", "--target-len", "3", "--out", "prep2"], tmp.path());
    for file in ["manifest.txt", "cycles.csv", "labels.csv"] {
        assert_eq!(
            read(&tmp.path().join("prep/onecell").join(file)),
            read(&tmp.path().join("prep2/onecell").join(file)),
            "{file} changed on an aligned corpus"
        );
    }
}

#[test]
fn preprocess_rejects_shrinking_and_names_cycle() {
    let tmp = TempDir::new().unwrap();
    let cell = tmp.path().join("raw/onecell");
    fs::create_dir_all(&cell).unwrap();
    fs::write(
        cell.join("manifest.txt"),
        "cell_id=onecell\nrated_capacity_ah=2\neol_threshold_ah=1.4\n\
         saturation_voltage_v=4.2\ntarget_len=4\n",
    )
    .unwrap();
    fs::write(cell.join("cycles.csv"), "cycle,t,v\n7,0,1\n7,1,2\n7,2,3\n7,3,4\n").unwrap();
    fs::write(cell.join("labels.csv"), "cycle,capacity_ah\n7,1.8\n").unwrap();

    let err = run_err(&["preprocess", "--in", "raw", "--target-len", "3", "--out", "p"], tmp.path());
    assert!(err.starts_with("E:data:"), "stderr: {err}");
    assert!(err.contains("cycle 7"), "error must name the offending cycle: {err}");
}

#[test]
fn unknown_flag_gets_usage_prefix() {
    let tmp = TempDir::new().unwrap();
    let err = run_err(&["synth", "--bogus"], tmp.path());
    assert!(err.starts_with("E:usage:"), "stderr: {err}");
}

#[test]
fn run_manifest_is_written_before_work() {
    let tmp = TempDir::new().unwrap();
    let err = run_err(
        &[
            "train",
            "--data",
            "missing",
            "--hold-out",
            "x",
            "--oc",
            "0",
            "--model-cfg",
            "nope.cfg",
            "--train-cfg",
            "nope.cfg",
            "--out",
            "run",
        ],
        tmp.path(),
    );
    assert!(err.starts_with("E:"), "stderr: {err}");
    let manifest = read(&tmp.path().join("run/run_manifest.txt"));
    assert!(manifest.contains("command=train"));
    assert!(manifest.contains("hold_out=x"));
}

#[test]
fn features_emit_factor_columns_and_exact_self_correlation() {
    let tmp = TempDir::new().unwrap();
    run_ok(
        &["synth", "--cells", "1", "--cycles", "8", "--seq-len", "24", "--out", "c"],
        tmp.path(),
    );
    run_ok(&["features", "--in", "c", "--out", "f"], tmp.path());

    let features = read(&tmp.path().join("f/synth00/features.csv"));
    let header = features.lines().next().unwrap();
    assert_eq!(
        header,
        "cycle,onset_to_peak_s,plateau_s,slope_v_per_s,cc_integral_vs,slope_degenerate"
    );
    assert_eq!(features.lines().count(), 9, "header plus one row per cycle");

    let pearson = read(&tmp.path().join("f/synth00/pearson.csv"));
    let lines: Vec<&str> = pearson.lines().collect();
    assert_eq!(lines[0], "series,pearson_r");
    assert_eq!(lines.len(), 6, "four factors plus the capacity identity row");
    assert_eq!(*lines.last().unwrap(), "capacity,1");
}

#[test]
fn train_evaluate_search_roundtrip() {
    let tmp = TempDir::new().unwrap();
    run_ok(
        &["synth", "--cells", "2", "--cycles", "8", "--seq-len", "16", "--out", "raw"],
        tmp.path(),
    );
    run_ok(&["preprocess", "--in", "raw", "--target-len", "16", "--out", "data"], tmp.path());
    write_tiny_model_cfg(&tmp.path().join("model.cfg"), 16);
    write_tiny_train_cfg(&tmp.path().join("train.cfg"));

    let out = run_ok(
        &[
            "train",
            "--data",
            "data",
            "--hold-out",
            "synth01",
            "--oc",
            "3",
            "--model-cfg",
            "model.cfg",
            "--train-cfg",
            "train.cfg",
            "--out",
            "run",
        ],
        tmp.path(),
    );
    assert!(out.contains("1 training cells"), "stdout: {out}");
    for file in
        ["checkpoint_final.cpg", "checkpoint_best.cpg", "model.cfg", "run.cfg", "train_log.csv"]
    {
        assert!(tmp.path().join("run").join(file).exists(), "missing {file}");
    }

    // Evaluation from cycle 3 onward covers both cells and both tasks.
    run_ok(
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint_best.cpg",
            "--data",
            "data",
            "--oc",
            "3",
            "--out",
            "eval",
        ],
        tmp.path(),
    );
    let report = read(&tmp.path().join("eval/report.csv"));
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "cell,task,mae,rmse,mape_or_medae,n");
    assert!(lines.iter().any(|l| l.starts_with("synth00,soh,")));
    assert!(lines.iter().any(|l| l.starts_with("all,soh,")));
    let preds = read(&tmp.path().join("eval/synth00/predictions.csv"));
    assert!(preds.lines().next().unwrap().starts_with("cycle,soh_true,soh_hat"));
    assert!(tmp.path().join("eval/synth00/soh_error.csv").exists());

    // An observation cycle past the data is an error, not an empty report.
    let err = run_err(
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint_best.cpg",
            "--data",
            "data",
            "--oc",
            "99",
            "--out",
            "eval2",
        ],
        tmp.path(),
    );
    assert!(err.starts_with("E:data:"), "stderr: {err}");

    // A cell that never crosses EOL gets SOH output and no RUL section.
    write_survivor_cell(&tmp.path().join("surv/survivor"), 16);
    run_ok(
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint_best.cpg",
            "--data",
            "surv",
            "--oc",
            "0",
            "--out",
            "eval3",
        ],
        tmp.path(),
    );
    let report = read(&tmp.path().join("eval3/report.csv"));
    assert!(report.contains("survivor,soh,"));
    assert!(!report.contains("survivor,rul,"), "report: {report}");
    let preds = read(&tmp.path().join("eval3/survivor/predictions.csv"));
    assert_eq!(preds.lines().next().unwrap(), "cycle,soh_true,soh_hat");
    assert!(!tmp.path().join("eval3/survivor/rul_error.csv").exists());

    // Search with budget 1 writes exactly one trial row and a best config
    // that train accepts as-is.
    fs::write(tmp.path().join("space.txt"), "lr = log:1e-4,1e-3\ntrial_epochs = 1\n").unwrap();
    run_ok(
        &[
            "search", "--space", "space.txt", "--budget", "1", "--data", "data", "--out", "srch",
        ],
        tmp.path(),
    );
    let trials = read(&tmp.path().join("srch/trials.csv"));
    assert_eq!(trials.lines().count(), 2, "header plus one trial: {trials}");
    assert_eq!(trials.lines().nth(1).unwrap().split(',').next().unwrap(), "0");
    run_ok(
        &[
            "train",
            "--data",
            "data",
            "--hold-out",
            "synth01",
            "--oc",
            "3",
            "--model-cfg",
            "srch/best_model.cfg",
            "--train-cfg",
            "srch/best_train.cfg",
            "--out",
            "run2",
        ],
        tmp.path(),
    );

    // Same seed, same data: the training log repeats apart from wall times.
    let strip_seconds = |p: &Path| -> Vec<String> {
        read(p)
            .lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
            .collect()
    };
    run_ok(
        &[
            "train",
            "--data",
            "data",
            "--hold-out",
            "synth01",
            "--oc",
            "3",
            "--model-cfg",
            "model.cfg",
            "--train-cfg",
            "train.cfg",
            "--out",
            "run3",
        ],
        tmp.path(),
    );
    assert_eq!(
        strip_seconds(&tmp.path().join("run/train_log.csv")),
        strip_seconds(&tmp.path().join("run3/train_log.csv")),
        "training is not reproducible across identical runs"
    );
    assert_eq!(
        fs::read(tmp.path().join("run/checkpoint_final.cpg")).unwrap(),
        fs::read(tmp.path().join("run3/checkpoint_final.cpg")).unwrap(),
        "checkpoints differ across identical runs"
    );

    // The --seed override changes the run; the manifest records it.
    run_ok(
        &[
            "train",
            "--data",
            "data",
            "--hold-out",
            "synth01",
            "--oc",
            "3",
            "--model-cfg",
            "model.cfg",
            "--train-cfg",
            "train.cfg",
            "--out",
            "run4",
            "--seed",
            "99",
        ],
        tmp.path(),
    );
    let manifest = read(&tmp.path().join("run4/run_manifest.txt"));
    assert!(manifest.contains("seed=99"));
    let run_cfg = read(&tmp.path().join("run4/run.cfg"));
    assert!(run_cfg.contains("seed=99"));
}
