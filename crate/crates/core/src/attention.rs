//! Single-head self- and cross-attention. Each call returns both the
//! attended values and the row-stochastic attention map, since downstream
//! modules consume the maps as first-class values.
//!
//! No residual, no layer norm, no output projection: `softmax(QK^T/sqrt(d))V`
//! and nothing else.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

/// Indices of the Q/K/V projection parameters in a [`ParamStore`], all
/// `d x d`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub d: usize,
}

impl AttentionBlock {
    /// Registers the three projections under `<prefix>.wq/wk/wv`,
    /// initialized uniform in `±1/sqrt(d)`.
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) -> Result<Self> {
        let wq = store.register_uniform(&format!("{prefix}.wq"), vec![d, d], d, seed)?;
        // W_K starts tied to W_Q (every entry still uniform in ±1/√d): with
        // Q and K drawn independently the initial logits ⟨eW_Q, e'W_K⟩ are
        // arbitrary and the softmax maps scramble row identity; with a
        // shared draw the logits are a projected similarity, so the maps
        // start diagonal-dominant. The two matrices decouple from the
        // first optimizer step on.
        let wq_values = store.get(wq).values.clone();
        let wk = store.register(&format!("{prefix}.wk"), vec![d, d], wq_values)?;
        let wv = store.register_uniform(&format!("{prefix}.wv"), vec![d, d], d, seed)?;
        Ok(AttentionBlock { wq, wk, wv, d })
    }

    /// Loads the projections onto a tape as differentiable leaves.
    pub fn load(&self, tape: &Tape, store: &ParamStore) -> LoadedBlock {
        let load = |idx: usize| {
            let e = store.get(idx);
            tape.leaf(e.shape.clone(), e.values.clone())
        };
        LoadedBlock { wq: load(self.wq), wk: load(self.wk), wv: load(self.wv), d: self.d }
    }
}

/// Tape-resident Q/K/V projections for one forward pass.
pub struct LoadedBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub d: usize,
}

/// Attended values plus the attention map.
pub struct AttentionResult {
    /// `[n, d]`
    pub output: Tensor,
    /// `[n, m]`, row-stochastic
    pub map: Tensor,
}

/// `softmax(E Wq (E Wk)^T / sqrt(d)) (E Wv)`.
pub fn self_attention(tape: &Tape, block: &LoadedBlock, e: &Tensor) -> Result<AttentionResult> {
    cross_attention(tape, block, e, e)
}

/// Queries from `e`, keys and values from `z`.
pub fn cross_attention(
    tape: &Tape,
    block: &LoadedBlock,
    e: &Tensor,
    z: &Tensor,
) -> Result<AttentionResult> {
    let q = tape.matmul(e, &block.wq)?;
    let k = tape.matmul(z, &block.wk)?;
    let v = tape.matmul(z, &block.wv)?;
    let logits = tape.matmul_nt(&q, &k)?;
    let scaled = tape.scale(&logits, 1.0 / (block.d as f64).sqrt());
    let map = tape.softmax_rows(&scaled)?;
    let output = tape.matmul(&map, &v)?;
    Ok(AttentionResult { output, map })
}
