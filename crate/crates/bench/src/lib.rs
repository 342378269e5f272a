//! Shared fixtures for the engine benchmarks.

use cellprog_core::dataio::CellDataset;
use cellprog_core::model::ModelConfig;
use cellprog_core::tensor::params::ParamSet;
use cellprog_core::{dataio, model};

/// Benchmark-sized model: long enough that attention sparsity matters,
/// small enough that a backward pass stays in the millisecond range.
pub fn bench_config() -> ModelConfig {
    ModelConfig {
        seq_len: 128,
        fem_channels: 16,
        lstm_hidden: 32,
        task_hidden: 32,
        ffn_hidden: 32,
        heads: 4,
        ..ModelConfig::default()
    }
}

pub fn bench_params(cfg: &ModelConfig) -> ParamSet {
    model::init_params(cfg, 17).expect("bench params")
}

/// A deterministic voltage-like input sequence in the CC/CV band.
pub fn bench_input(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let t = i as f64 / len as f64;
            3.0 + 1.2 * t.min(0.8) + 0.01 * (t * 40.0).sin()
        })
        .collect()
}

/// One synthetic cell with irregular per-cycle lengths, for the
/// interpolation benchmark.
pub fn bench_cell() -> CellDataset {
    let mut cells = dataio::synth_cells(5, 1, 40, 128, 0.05).expect("bench cell");
    cells.remove(0)
}
