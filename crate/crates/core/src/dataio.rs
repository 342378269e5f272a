//! Cycle-level data ingestion: canonical CSV loading, interpolation
//! alignment, SOH/RUL label derivation, charge-curve feature factors,
//! Pearson screening, and a synthetic degradation generator for desk-scale
//! experiments.
//!
//! On-disk layout per cell: a directory holding `cycles.csv` (header
//! `cycle,t,v`), `labels.csv` (header `cycle,capacity_ah`) and
//! `manifest.txt` (key=value lines: cell_id, rated_capacity_ah,
//! eol_threshold_ah, saturation_voltage_v, target_len).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

// ---- domain types ---------------------------------------------------------

/// One charge cycle: a voltage-vs-time trace plus its capacity label.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle_index: usize,
    pub times: Vec<f64>,
    pub voltages: Vec<f64>,
    pub capacity: f64,
}

/// An ordered sequence of cycles for one cell, with its thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDataset {
    pub cell_id: String,
    pub rated_capacity: f64,
    pub eol_threshold: f64,
    pub saturation_voltage: f64,
    pub target_len: usize,
    pub cycles: Vec<CycleRecord>,
}

/// Per-cycle SOH fractions and, when the cell crosses its EOL threshold,
/// remaining-useful-life counts.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCell {
    pub cell_id: String,
    pub cycle_indices: Vec<usize>,
    pub soh: Vec<f64>,
    /// None when the cell never drops below the EOL threshold (SOH-only).
    pub rul: Option<Vec<usize>>,
    pub n_eol: Option<usize>,
}

/// The four charge-curve feature factors of one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFactors {
    /// Time from the first constant-current sample to the CC voltage peak.
    pub onset_to_peak_s: f64,
    /// Total time spent with 3.9 V <= v <= 4.1 V.
    pub plateau_s: f64,
    /// Least-squares dV/dt over CC samples with 3.6 V <= v <= 4.0 V.
    pub slope_v_per_s: f64,
    /// Trapezoidal integral of v dt over the CC phase.
    pub cc_integral_vs: f64,
    /// Set when the slope window held fewer than 2 samples (slope forced 0).
    pub slope_degenerate: bool,
}

/// Per-cell configuration stored as key=value lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub cell_id: String,
    pub rated_capacity_ah: f64,
    pub eol_threshold_ah: f64,
    pub saturation_voltage_v: f64,
    pub target_len: usize,
}

// ---- key=value files -------------------------------------------------------

/// Parse a key=value text file. Blank lines and `#` comments are skipped;
/// duplicate keys keep the last value.
pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut kv = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            detail: format!("line {} is not key=value: {line:?}", ln + 1),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

/// Write key=value lines in the given order.
pub fn write_kv_file(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---- manifest io -----------------------------------------------------------

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let kv = read_kv_file(path)?;
    let get = |k: &str| {
        kv.get(k).cloned().ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            detail: format!("missing key {k}"),
        })
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            detail: format!("key {k} is not a number"),
        })
    };
    let m = Manifest {
        cell_id: get("cell_id")?,
        rated_capacity_ah: num("rated_capacity_ah")?,
        eol_threshold_ah: num("eol_threshold_ah")?,
        saturation_voltage_v: num("saturation_voltage_v")?,
        target_len: num("target_len")? as usize,
    };
    if !(m.eol_threshold_ah > 0.0 && m.eol_threshold_ah < m.rated_capacity_ah) {
        return Err(Error::Data(format!(
            "cell {}: need 0 < eol_threshold ({}) < rated_capacity ({})",
            m.cell_id, m.eol_threshold_ah, m.rated_capacity_ah
        )));
    }
    Ok(m)
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let text = format!(
        "cell_id={}\nrated_capacity_ah={}\neol_threshold_ah={}\nsaturation_voltage_v={}\ntarget_len={}\n",
        m.cell_id, m.rated_capacity_ah, m.eol_threshold_ah, m.saturation_voltage_v, m.target_len
    );
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---- csv loading -----------------------------------------------------------

fn open_csv(path: &Path, want_header: &[&str]) -> Result<csv::Reader<fs::File>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if got != want_header {
        return Err(Error::Parse {
            path: path.display().to_string(),
            detail: format!("expected header {:?}, got {:?}", want_header.join(","), got.join(",")),
        });
    }
    Ok(rdr)
}

fn parse_field<T: std::str::FromStr>(path: &Path, row: usize, field: &str, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        detail: format!("data row {row}: bad {field} value {s:?}"),
    })
}

/// Load one cell from its cycles CSV, labels CSV and manifest. Every cycle
/// present in either file must be present in both; times must strictly
/// increase within a cycle; labeled cycles need at least 2 samples.
pub fn load_cell(cycles_path: &Path, labels_path: &Path, manifest: &Manifest) -> Result<CellDataset> {
    let mut labels: BTreeMap<usize, f64> = BTreeMap::new();
    let mut rdr = open_csv(labels_path, &["cycle", "capacity_ah"])?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: labels_path.display().to_string(),
            detail: e.to_string(),
        })?;
        let row = i + 1;
        if rec.len() != 2 {
            return Err(Error::Parse {
                path: labels_path.display().to_string(),
                detail: format!("data row {row}: expected 2 fields"),
            });
        }
        let cycle: usize = parse_field(labels_path, row, "cycle", &rec[0])?;
        let cap: f64 = parse_field(labels_path, row, "capacity_ah", &rec[1])?;
        if cap <= 0.0 {
            return Err(Error::Data(format!(
                "cell {}: cycle {cycle} has non-positive capacity {cap}",
                manifest.cell_id
            )));
        }
        if labels.insert(cycle, cap).is_some() {
            return Err(Error::Data(format!(
                "cell {}: duplicate label for cycle {cycle}",
                manifest.cell_id
            )));
        }
    }

    let mut traces: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut rdr = open_csv(cycles_path, &["cycle", "t", "v"])?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: cycles_path.display().to_string(),
            detail: e.to_string(),
        })?;
        let row = i + 1;
        if rec.len() != 3 {
            return Err(Error::Parse {
                path: cycles_path.display().to_string(),
                detail: format!("data row {row}: expected 3 fields"),
            });
        }
        let cycle: usize = parse_field(cycles_path, row, "cycle", &rec[0])?;
        let t: f64 = parse_field(cycles_path, row, "t", &rec[1])?;
        let v: f64 = parse_field(cycles_path, row, "v", &rec[2])?;
        if !t.is_finite() || !v.is_finite() {
            return Err(Error::Data(format!(
                "cell {}: data row {row} carries a non-finite value",
                manifest.cell_id
            )));
        }
        let entry = traces.entry(cycle).or_default();
        if let Some(&last) = entry.0.last() {
            if t <= last {
                return Err(Error::Data(format!(
                    "cell {}: non-monotone time at data row {row} of cycle {cycle} ({t} after {last})",
                    manifest.cell_id
                )));
            }
        }
        entry.0.push(t);
        entry.1.push(v);
    }

    for &cycle in traces.keys() {
        if !labels.contains_key(&cycle) {
            return Err(Error::Data(format!(
                "cell {}: cycle {cycle} has voltage data but no capacity label",
                manifest.cell_id
            )));
        }
    }
    for &cycle in labels.keys() {
        if !traces.contains_key(&cycle) {
            return Err(Error::Data(format!(
                "cell {}: label for cycle {cycle} has no rows in the cycles file",
                manifest.cell_id
            )));
        }
    }

    let mut cycles = Vec::with_capacity(labels.len());
    for (cycle, (times, voltages)) in traces {
        if times.len() < 2 {
            return Err(Error::Data(format!(
                "cell {}: cycle {cycle} has fewer than 2 samples",
                manifest.cell_id
            )));
        }
        cycles.push(CycleRecord { cycle_index: cycle, times, voltages, capacity: labels[&cycle] });
    }

    Ok(CellDataset {
        cell_id: manifest.cell_id.clone(),
        rated_capacity: manifest.rated_capacity_ah,
        eol_threshold: manifest.eol_threshold_ah,
        saturation_voltage: manifest.saturation_voltage_v,
        target_len: manifest.target_len,
        cycles,
    })
}

/// Load a cell from a directory holding cycles.csv, labels.csv, manifest.txt.
pub fn load_cell_dir(dir: &Path) -> Result<CellDataset> {
    let manifest = load_manifest(&dir.join("manifest.txt"))?;
    load_cell(&dir.join("cycles.csv"), &dir.join("labels.csv"), &manifest)
}

/// Write a cell back out in the canonical layout.
pub fn save_cell_dir(dir: &Path, cell: &CellDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    save_manifest(
        &dir.join("manifest.txt"),
        &Manifest {
            cell_id: cell.cell_id.clone(),
            rated_capacity_ah: cell.rated_capacity,
            eol_threshold_ah: cell.eol_threshold,
            saturation_voltage_v: cell.saturation_voltage,
            target_len: cell.target_len,
        },
    )?;
    let cyc_path = dir.join("cycles.csv");
    let mut w = csv_writer(&cyc_path)?;
    write_rec(&mut w, &cyc_path, &["cycle", "t", "v"])?;
    for c in &cell.cycles {
        for (t, v) in c.times.iter().zip(&c.voltages) {
            write_rec(&mut w, &cyc_path, &[c.cycle_index.to_string(), t.to_string(), v.to_string()])?;
        }
    }
    finish_csv(w, &cyc_path)?;

    let lab_path = dir.join("labels.csv");
    let mut w = csv_writer(&lab_path)?;
    write_rec(&mut w, &lab_path, &["cycle", "capacity_ah"])?;
    for c in &cell.cycles {
        write_rec(&mut w, &lab_path, &[c.cycle_index.to_string(), c.capacity.to_string()])?;
    }
    finish_csv(w, &lab_path)
}

/// Load every cell directory under `root`, sorted by cell id.
pub fn load_cells_root(root: &Path) -> Result<Vec<CellDataset>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("manifest.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no cell directories under {}", root.display())));
    }
    let mut cells: Vec<CellDataset> = dirs.iter().map(|d| load_cell_dir(d)).collect::<Result<_>>()?;
    cells.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
    Ok(cells)
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })
}

pub(crate) fn write_rec<S: AsRef<[u8]>>(
    w: &mut csv::Writer<fs::File>,
    path: &Path,
    rec: &[S],
) -> Result<()> {
    w.write_record(rec)
        .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })
}

pub(crate) fn finish_csv(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

// ---- interpolation ----------------------------------------------------------

/// Insertion positions for stretching a sequence of `len` samples to
/// `len + count`: p_j = round(j*len/(count+1)), clamped into [1, len-1];
/// an insertion at position p sits between original samples p-1 and p.
fn insertion_counts(len: usize, count: usize) -> Vec<usize> {
    let mut per_gap = vec![0usize; len];
    for j in 1..=count {
        let p = ((j * len) as f64 / (count + 1) as f64).round() as usize;
        let p = p.clamp(1, len - 1);
        per_gap[p] += 1;
    }
    per_gap
}

/// Stretch a voltage sequence to exactly `target` samples by inserting
/// neighbor means at uniformly distributed positions. Originals are kept in
/// order as a subsequence; insertion is the only permitted operation.
pub fn interpolate_to_length(v: &[f64], target: usize) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::Usage(format!("interpolation needs >= 2 samples, got {}", v.len())));
    }
    if v.len() > target {
        return Err(Error::Data(format!(
            "sequence of {} samples exceeds target {target}; only insertion is supported",
            v.len()
        )));
    }
    let per_gap = insertion_counts(v.len(), target - v.len());
    let mut out = Vec::with_capacity(target);
    out.push(v[0]);
    for p in 1..v.len() {
        let mid = (v[p - 1] + v[p]) / 2.0;
        for _ in 0..per_gap[p] {
            out.push(mid);
        }
        out.push(v[p]);
    }
    debug_assert_eq!(out.len(), target);
    Ok(out)
}

/// Companion stretch for the time axis: same insertion positions, but
/// inserted times are spaced evenly inside their gap so strict monotonicity
/// is preserved even when several land in one gap.
pub fn interpolate_times(t: &[f64], target: usize) -> Result<Vec<f64>> {
    if t.len() < 2 {
        return Err(Error::Usage(format!("interpolation needs >= 2 samples, got {}", t.len())));
    }
    if t.len() > target {
        return Err(Error::Data(format!(
            "sequence of {} samples exceeds target {target}; only insertion is supported",
            t.len()
        )));
    }
    let per_gap = insertion_counts(t.len(), target - t.len());
    let mut out = Vec::with_capacity(target);
    out.push(t[0]);
    for p in 1..t.len() {
        let m = per_gap[p];
        for i in 0..m {
            out.push(t[p - 1] + (t[p] - t[p - 1]) * (i + 1) as f64 / (m + 1) as f64);
        }
        out.push(t[p]);
    }
    Ok(out)
}

/// Stretch every cycle of a cell to the manifest's target length.
pub fn interpolate_cell(cell: &CellDataset) -> Result<CellDataset> {
    let mut out = cell.clone();
    for c in &mut out.cycles {
        c.voltages = interpolate_to_length(&c.voltages, cell.target_len).map_err(|e| match e {
            Error::Data(d) => Error::Data(format!("cell {} cycle {}: {d}", cell.cell_id, c.cycle_index)),
            other => other,
        })?;
        c.times = interpolate_times(&c.times, cell.target_len)?;
    }
    Ok(out)
}

// ---- labels ------------------------------------------------------------------

/// SOH per cycle; RUL relative to the first cycle whose capacity drops
/// below the EOL threshold (absent when never crossed).
pub fn derive_labels(cell: &CellDataset) -> LabeledCell {
    let cycle_indices: Vec<usize> = cell.cycles.iter().map(|c| c.cycle_index).collect();
    let soh: Vec<f64> = cell.cycles.iter().map(|c| c.capacity / cell.rated_capacity).collect();
    let n_eol = cell
        .cycles
        .iter()
        .find(|c| c.capacity < cell.eol_threshold)
        .map(|c| c.cycle_index);
    let rul = n_eol.map(|eol| {
        cycle_indices.iter().map(|&i| eol.saturating_sub(i)).collect()
    });
    LabeledCell { cell_id: cell.cell_id.clone(), cycle_indices, soh, rul, n_eol }
}

// ---- feature factors ----------------------------------------------------------

/// Extract the four charge-curve features of one cycle. The CC phase is the
/// prefix before the first sample at or above `saturation_voltage`; features
/// (1), (3) and (4) are restricted to it, the 3.9-4.1 V plateau duration is
/// measured over the whole trace.
pub fn extract_feature_factors(cycle: &CycleRecord, saturation_voltage: f64) -> FeatureFactors {
    let n = cycle.times.len();
    let cc_end = cycle
        .voltages
        .iter()
        .position(|&v| v >= saturation_voltage)
        .unwrap_or(n);
    let cc_end = cc_end.max(1);
    let t = &cycle.times[..cc_end];
    let v = &cycle.voltages[..cc_end];

    let mut peak = 0usize;
    for (i, &vi) in v.iter().enumerate() {
        if vi > v[peak] {
            peak = i;
        }
    }
    let onset_to_peak_s = t[peak] - t[0];

    let mut plateau_s = 0.0;
    for i in 1..n {
        let in_win = |x: f64| (3.9..=4.1).contains(&x);
        if in_win(cycle.voltages[i - 1]) && in_win(cycle.voltages[i]) {
            plateau_s += cycle.times[i] - cycle.times[i - 1];
        }
    }

    let win: Vec<(f64, f64)> = t
        .iter()
        .zip(v)
        .filter(|(_, &vv)| (3.6..=4.0).contains(&vv))
        .map(|(&tt, &vv)| (tt, vv))
        .collect();
    let (slope_v_per_s, slope_degenerate) = if win.len() < 2 {
        (0.0, true)
    } else {
        let nw = win.len() as f64;
        let tm = win.iter().map(|p| p.0).sum::<f64>() / nw;
        let vm = win.iter().map(|p| p.1).sum::<f64>() / nw;
        let num: f64 = win.iter().map(|&(tt, vv)| (tt - tm) * (vv - vm)).sum();
        let den: f64 = win.iter().map(|&(tt, _)| (tt - tm) * (tt - tm)).sum();
        if den == 0.0 {
            (0.0, true)
        } else {
            (num / den, false)
        }
    };

    let mut cc_integral_vs = 0.0;
    for i in 1..cc_end {
        cc_integral_vs += (v[i] + v[i - 1]) / 2.0 * (t[i] - t[i - 1]);
    }

    FeatureFactors { onset_to_peak_s, plateau_s, slope_v_per_s, cc_integral_vs, slope_degenerate }
}

// ---- pearson -------------------------------------------------------------------

/// Standard Pearson correlation; errors on zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Usage(format!(
            "pearson needs two equal-length series of >= 2 samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Data("pearson is undefined for zero-variance series".into()));
    }
    // sqrt of the product (not the product of sqrts) so that a series
    // correlated with itself yields exactly 1.0.
    Ok(cov / (vx * vy).sqrt())
}

// ---- synthetic corpus ------------------------------------------------------------

/// Deterministic synthetic degradation corpus. Capacity follows a
/// double-exponential fade with multiplicative decrement noise and optional
/// regeneration jumps; each cycle's voltage trace is a CC ramp whose slope
/// and a CV plateau whose length both track the cycle's SOH, so the trace
/// carries a recoverable SOH signal through interpolation.
pub fn synth_cells(
    seed: u64,
    n_cells: usize,
    n_cycles: usize,
    seq_len: usize,
    regen_rate: f64,
) -> Result<Vec<CellDataset>> {
    if n_cells == 0 || n_cycles == 0 {
        return Err(Error::Config("synth needs positive cell and cycle counts".into()));
    }
    if seq_len < 16 {
        return Err(Error::Config(format!("synth needs seq_len >= 16, got {seq_len}")));
    }
    if !(0.0..=1.0).contains(&regen_rate) {
        return Err(Error::Config(format!("regen_rate must lie in [0,1], got {regen_rate}")));
    }
    let rated = 2.0;
    let eol = 0.78 * rated;
    let saturation = 4.18;
    let mut cells = Vec::with_capacity(n_cells);
    for c in 0..n_cells {
        let mut rng = ChaCha20Rng::seed_from_u64(crate::derive_seed(seed, c as u64));
        let a = rng.gen_range(0.83..0.87);
        let cfrac = 1.0 - a;
        let beta = rng.gen_range(0.19..0.24);
        let gamma = rng.gen_range(4.2..5.4);
        let horizon = (n_cycles.max(2) - 1) as f64;
        let base = |i: f64| a * (-beta * i / horizon).exp() + cfrac * (-gamma * i / horizon).exp();

        let mut frac = Vec::with_capacity(n_cycles);
        frac.push(1.0);
        for i in 1..n_cycles {
            let dec = (base((i - 1) as f64) - base(i as f64)).max(1e-9);
            let noisy_dec = dec * (1.0 + 0.3 * rng.gen_range(-1.0..1.0));
            let mut next = frac[i - 1] - noisy_dec;
            if i >= 2 && rng.gen_bool(regen_rate) {
                let jump = dec * rng.gen_range(1.0..3.0);
                next = (frac[i - 1] + jump).min(1.0);
            }
            frac.push(next);
        }

        let cc_base = ((0.6 * seq_len as f64).ceil() as usize).max(6);
        let cv_base = seq_len - cc_base;
        let mut cycles = Vec::with_capacity(n_cycles);
        for (i, &soh) in frac.iter().enumerate() {
            // Aging shortens the constant-current ramp and lengthens the
            // constant-voltage taper, so the CC/CV knee moves to an earlier
            // fraction of the trace and survives length interpolation.
            let cc_len_f = cc_base as f64 * (0.35 + 0.65 * soh);
            let n_cc = (cc_len_f.ceil() as usize).clamp(4, cc_base);
            let n_cv = ((cv_base as f64 * (1.6 - 0.6 * soh)).round() as usize)
                .clamp(2, seq_len - n_cc);
            // Internal-resistance growth lifts the whole CC ramp as the
            // cell ages.
            let ir_lift = 0.25 * (1.0 - soh);
            let mut voltages = Vec::with_capacity(n_cc + n_cv);
            for j in 0..n_cc {
                let ramp = (3.0 + ir_lift + 1.15 * (j + 1) as f64 / cc_len_f).min(4.174);
                voltages.push(ramp + rng.gen_range(-0.003..0.003));
            }
            voltages.extend(std::iter::repeat_n(4.2, n_cv));
            let times: Vec<f64> = (0..voltages.len()).map(|j| j as f64).collect();
            cycles.push(CycleRecord {
                cycle_index: i,
                times,
                voltages,
                capacity: rated * soh,
            });
        }
        cells.push(CellDataset {
            cell_id: format!("synth{c:02}"),
            rated_capacity: rated,
            eol_threshold: eol,
            saturation_voltage: saturation,
            target_len: seq_len,
            cycles,
        });
    }
    Ok(cells)
}
