//! Recurrent sequence encoder with exponential gating and a normalizer
//! state.
//!
//! The cell replaces the usual sigmoid input/forget gates with exponential
//! gates. A running maximum `m_t` rescales both exponentials before they are
//! applied, and a normalizer state `n_t` accumulates the same gate mass as
//! the cell state `c_t`, so the emitted hidden state `h_t = o_t * c_t / n_t`
//! is invariant to the rescaling while individual gate values never leave
//! the representable range:
//!
//! ```text
//! m_t = max(pre_f + m_{t-1}, pre_i)
//! i_t = exp(pre_i - m_t)            f_t = exp(pre_f + m_{t-1} - m_t)
//! n_t = f_t * n_{t-1} + i_t         c_t = f_t * c_{t-1} + i_t * tanh(pre_z)
//! h_t = sigmoid(pre_o) * c_t / n_t
//! ```
//!
//! By construction either `f_t = 1` or `i_t = 1` at every step, so `n_t`
//! never collapses toward zero for bounded pre-activations.
//!
//! Input-side wiring: the input/forget gates read a pre-gated signal (layer
//! norm followed by a width-3 convolution over the raw input), while the
//! candidate and output gates read the raw input directly. A gated linear
//! projection with a residual connection maps the stacked hidden states back
//! to the input width.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{BoundParams, Graph, ParamSet, Var};

/// Configuration for the recurrent encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IeLstmConfig {
    /// Input (and output) channel count `F`.
    pub channels: usize,
    /// Hidden width `H`.
    pub hidden: usize,
}

impl IeLstmConfig {
    /// Validate the dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "ielstm channels and hidden width must be positive, got F={} H={}",
                self.channels, self.hidden
            )));
        }
        Ok(())
    }
}

/// Recurrent state after one step: hidden, cell, normalizer, stabilizer.
/// All are `1 x H`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
    pub n: Var,
    pub m: Var,
}

const GATES: [&str; 4] = ["i", "f", "z", "o"];

/// Register parameters under `ielstm.{norm,conv,gates,proj}.*`.
///
/// The forget-gate bias starts at +1 so early steps favor carrying state,
/// the recurrent weights start orthogonal, and everything else uses
/// fan-in-scaled uniform init.
pub fn init_ielstm_params(
    cfg: &IeLstmConfig,
    rng: &mut ChaCha20Rng,
    params: &mut ParamSet,
) -> Result<()> {
    cfg.validate()?;
    let f = cfg.channels;
    let h = cfg.hidden;
    params.insert("ielstm.norm.gamma", init::ones(vec![1, f]))?;
    params.insert("ielstm.norm.beta", init::zeros(vec![1, f]))?;
    params.insert("ielstm.conv.w", init::kaiming(rng, vec![3, f, f], 3 * f))?;
    params.insert("ielstm.conv.b", init::zeros(vec![1, f]))?;
    for gate in GATES {
        params.insert(
            format!("ielstm.gates.wx{gate}"),
            init::kaiming(rng, vec![f, h], f),
        )?;
        params.insert(format!("ielstm.gates.wh{gate}"), init::orthogonal(rng, h))?;
        let bias = if gate == "f" {
            init::fill(vec![1, h], 1.0)
        } else {
            init::zeros(vec![1, h])
        };
        params.insert(format!("ielstm.gates.b{gate}"), bias)?;
    }
    params.insert("ielstm.proj.w1", init::kaiming(rng, vec![h, f], h))?;
    params.insert("ielstm.proj.b1", init::zeros(vec![1, f]))?;
    params.insert("ielstm.proj.w2", init::kaiming(rng, vec![h, h], h))?;
    params.insert("ielstm.proj.b2", init::zeros(vec![1, h]))?;
    params.insert("ielstm.proj.w3", init::kaiming(rng, vec![h, h], h))?;
    params.insert("ielstm.proj.b3", init::zeros(vec![1, h]))?;
    Ok(())
}

/// All-zero initial state.
pub fn zero_state(g: &mut Graph, hidden: usize) -> LstmState {
    let h = g.leaf(crate::tensor::Tensor::zeros(vec![1, hidden]));
    let c = g.leaf(crate::tensor::Tensor::zeros(vec![1, hidden]));
    let n = g.leaf(crate::tensor::Tensor::zeros(vec![1, hidden]));
    let m = g.leaf(crate::tensor::Tensor::zeros(vec![1, hidden]));
    LstmState { h, c, n, m }
}

/// Pre-gating path: layer norm over channels, then a width-3 convolution.
pub fn pregate(g: &mut Graph, x: Var, p: &BoundParams) -> Result<Var> {
    let gamma = p.var("ielstm.norm.gamma")?;
    let beta = p.var("ielstm.norm.beta")?;
    let ln = g.layer_norm(x, gamma, beta)?;
    let w = p.var("ielstm.conv.w")?;
    let b = p.var("ielstm.conv.b")?;
    g.conv1d(ln, w, b)
}

/// One recurrence step from gate pre-activations (each `1 x H`).
///
/// Errors if the updated normalizer is not strictly positive, which for
/// finite pre-activations can only happen through upstream numerical damage.
pub fn cell_update(
    g: &mut Graph,
    pre_i: Var,
    pre_f: Var,
    pre_z: Var,
    pre_o: Var,
    prev: &LstmState,
) -> Result<LstmState> {
    let f_shift = g.add(pre_f, prev.m)?;
    let m = g.max_pair(f_shift, pre_i)?;
    let i_arg = g.sub(pre_i, m)?;
    let i = g.exp(i_arg)?;
    let f_arg = g.sub(f_shift, m)?;
    let f = g.exp(f_arg)?;
    let z = g.tanh(pre_z)?;
    let o = g.sigmoid(pre_o)?;
    let fn_prev = g.mul(f, prev.n)?;
    let n = g.add(fn_prev, i)?;
    if g.data(n).iter().any(|v| *v <= 0.0) {
        return Err(Error::NonFinite(
            "ielstm normalizer state lost positivity".into(),
        ));
    }
    let fc_prev = g.mul(f, prev.c)?;
    let iz = g.mul(i, z)?;
    let c = g.add(fc_prev, iz)?;
    let ratio = g.div(c, n)?;
    let h = g.mul(o, ratio)?;
    Ok(LstmState { h, c, n, m })
}

/// Full forward pass: `L x F -> L x F`.
///
/// The input-side affine maps for all four gates are computed as whole-
/// sequence matmuls up front; the per-step work is then four `H x H`
/// recurrent products plus the elementwise cell update.
pub fn ielstm_forward(g: &mut Graph, x: Var, p: &BoundParams, cfg: &IeLstmConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.channels {
        return Err(Error::Shape {
            op: "ielstm",
            detail: format!(
                "expected input shape [L, {}], got {shape:?}",
                cfg.channels
            ),
        });
    }
    let l = shape[0];
    let xt = pregate(g, x, p)?;

    let mut pre_x = Vec::with_capacity(4);
    for gate in GATES {
        let wx = p.var(&format!("ielstm.gates.wx{gate}"))?;
        let b = p.var(&format!("ielstm.gates.b{gate}"))?;
        let source = if gate == "i" || gate == "f" { xt } else { x };
        let prod = g.matmul(source, wx)?;
        pre_x.push(g.add(prod, b)?);
    }
    let wh: Vec<Var> = GATES
        .iter()
        .map(|gate| p.var(&format!("ielstm.gates.wh{gate}")))
        .collect::<Result<_>>()?;

    let mut state = zero_state(g, cfg.hidden);
    let mut hs = Vec::with_capacity(l);
    for t in 0..l {
        let mut pre = [state.h; 4];
        for (gi, slot) in pre.iter_mut().enumerate() {
            let row = g.gather_rows(pre_x[gi], &[t])?;
            let rec = g.matmul(state.h, wh[gi])?;
            *slot = g.add(row, rec)?;
        }
        state = cell_update(g, pre[0], pre[1], pre[2], pre[3], &state)
            .map_err(|e| Error::NonFinite(format!("step {t}: {e}")))?;
        hs.push(state.h);
    }
    let hstack = g.concat(&hs, 0)?;

    let w2 = p.var("ielstm.proj.w2")?;
    let b2 = p.var("ielstm.proj.b2")?;
    let w3 = p.var("ielstm.proj.w3")?;
    let b3 = p.var("ielstm.proj.b3")?;
    let w1 = p.var("ielstm.proj.w1")?;
    let b1 = p.var("ielstm.proj.b1")?;
    let lin2 = g.matmul(hstack, w2)?;
    let lin2 = g.add(lin2, b2)?;
    let lin3 = g.matmul(hstack, w3)?;
    let lin3 = g.add(lin3, b3)?;
    let gated = g.gelu(lin3)?;
    let prod = g.mul(lin2, gated)?;
    let proj = g.matmul(prod, w1)?;
    let proj = g.add(proj, b1)?;
    g.add(proj, x)
}
