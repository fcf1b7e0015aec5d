//! The PVLR recognition head: dual prompting (KAP/CAP), interaction and
//! fusion (channel interaction, KCR, relation aggregation), bidirectional
//! dual-modal attention, and similarity-based prediction, plus the three
//! reference heads used for comparison (classifier learning, static label
//! representations, static representations with DMA).
//!
//! Every mechanism sits behind a toggle so ablation runs can switch it off.

use crate::attention::{cross_attention, self_attention, AttentionBlock, AttentionResult};
use crate::error::{Error, Result};
use crate::objective::{asl_loss, kcr_loss, total_loss, LossConfig};
use crate::params::ParamStore;
use crate::tensor::{Grads, Tape, Tensor};
use crate::text_sim::{
    build_hard_prompts, build_name_encodings, build_soft_prompts_on_tape, name_embeddings,
    PseudoTextEncoder, TokenEmbeddingTable, Vocabulary,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Pvlr,
    ClassifierLearning,
    LabelRep,
    LabelRepDma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptingMode {
    /// Soft prompts interact with visual features after the text encoder.
    Post,
    /// Per-sample prompt tokens are generated from learnable queries and
    /// visual features before the text encoder.
    Pre,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadConfig {
    pub c: usize,
    pub d: usize,
    pub m: usize,
    /// Soft-prompt token count.
    pub l: usize,
    pub use_kap: bool,
    pub use_cap: bool,
    pub use_channel_interaction: bool,
    pub use_relation_aggregation: bool,
    pub use_v2s: bool,
    pub use_s2v: bool,
    pub prompting_mode: PromptingMode,
    pub head_mode: HeadMode,
    /// Adds the query matrix back onto every attention output
    /// (transformer-style residual path). Off by default: the bare
    /// softmax-mixing form is the reference; the residual is a
    /// configurable extension.
    #[serde(default)]
    pub attention_residual: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            c: 20,
            d: 32,
            m: 16,
            l: 4,
            use_kap: true,
            use_cap: true,
            use_channel_interaction: true,
            use_relation_aggregation: true,
            use_v2s: true,
            use_s2v: true,
            prompting_mode: PromptingMode::Post,
            head_mode: HeadMode::Pvlr,
            attention_residual: false,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.d == 0 || self.m == 0 {
            return Err(Error::Config("c, d, m must all be >= 1".into()));
        }
        if self.head_mode == HeadMode::Pvlr && !self.use_kap && !self.use_cap {
            return Err(Error::Config(
                "pvlr mode needs at least one of use_kap/use_cap".into(),
            ));
        }
        if (self.use_channel_interaction || self.use_relation_aggregation)
            && !(self.use_kap && self.use_cap)
        {
            return Err(Error::Config(
                "channel interaction and relation aggregation need both KAP and CAP".into(),
            ));
        }
        if self.prompting_mode == PromptingMode::Pre && !self.use_cap {
            return Err(Error::Config("pre-interaction prompting needs CAP".into()));
        }
        Ok(())
    }
}

/// Parameter slots actually registered for the configured mode.
#[derive(Clone, Debug, Default)]
struct Slots {
    kap: Option<AttentionBlock>,
    cap_cross: Option<AttentionBlock>,
    cap_self: Option<AttentionBlock>,
    pre_cross: Option<AttentionBlock>,
    v2s: Option<AttentionBlock>,
    s2v: Option<AttentionBlock>,
    clf_cross: Option<AttentionBlock>,
    soft_prompts: Option<usize>,
    pre_queries: Option<usize>,
    ifm_w1: Option<usize>,
    ifm_b1: Option<usize>,
    ifm_w2: Option<usize>,
    ifm_b2: Option<usize>,
    alpha_raw: Option<usize>,
    clf_w: Option<usize>,
    clf_b: Option<usize>,
}

/// Frozen model state: config, vocabulary, encoder, and the cached static
/// label embeddings. Trainable values live in the [`ParamStore`] built by
/// [`PvlrModel::init_params`], so the model itself is `Sync` and one
/// instance can serve parallel per-sample forwards.
pub struct PvlrModel {
    pub config: HeadConfig,
    pub vocab: Vocabulary,
    pub encoder: PseudoTextEncoder,
    pub table: TokenEmbeddingTable,
    /// Template-encoded label embeddings, `[C, d]`; static per run.
    t_hard: Vec<f64>,
    /// Bare-name encodings, `[C, d]`; centers of the baseline modes.
    t_names: Vec<f64>,
    /// Word embeddings of the label names, `[C, d_tok]`.
    s_names: Vec<f64>,
    slots: Slots,
}

/// One sample's recorded forward pass with handles to every exposed
/// intermediate.
pub struct SampleTrace {
    pub tape: Tape,
    /// Tape leaves aligned with the param store entries.
    pub leaves: Vec<Tensor>,
    pub probs: Tensor,
    pub t_ka: Option<Tensor>,
    pub m_ka: Option<Tensor>,
    /// Post-interaction CAP embeddings (Eq. 5 output when enabled).
    pub t_ca: Option<Tensor>,
    pub m_ca: Option<Tensor>,
    /// Blended relation map when aggregation is enabled.
    pub m_blend: Option<Tensor>,
    pub t: Option<Tensor>,
    pub t_vs: Option<Tensor>,
    pub x_sv: Option<Tensor>,
    pub v2s_map: Option<Tensor>,
    pub s2v_map: Option<Tensor>,
    pub kcr: Option<Tensor>,
}

impl SampleTrace {
    pub fn probs_values(&self) -> Vec<f64> {
        self.tape.values(&self.probs)
    }

    /// Named aux maps/tensors for CSV export; `(name, rows, cols, values)`.
    pub fn aux_maps(&self) -> Vec<(&'static str, usize, usize, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push = |name: &'static str, t: &Option<Tensor>| {
            if let Some(t) = t {
                out.push((name, t.rows(), t.cols(), self.tape.values(t)));
            }
        };
        push("m_ka", &self.m_ka);
        push("m_ca", &self.m_ca);
        push("m_blend", &self.m_blend);
        push("v2s_map", &self.v2s_map);
        push("s2v_map", &self.s2v_map);
        push("t_ka", &self.t_ka);
        push("t_ca", &self.t_ca);
        push("t", &self.t);
        push("t_vs", &self.t_vs);
        out
    }
}

impl PvlrModel {
    /// Builds the frozen state and caches the static label embeddings.
    /// `d_tok` equals `d`.
    pub fn new(config: HeadConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.c {
            return Err(Error::Config(format!(
                "vocabulary has {} names but config.c = {}",
                vocab.len(),
                config.c
            )));
        }
        let table = TokenEmbeddingTable::new(seed, config.d);
        let encoder = PseudoTextEncoder::new(seed, config.d, config.d);
        let t_hard = build_hard_prompts(&vocab, &table, &encoder)?;
        let t_names = build_name_encodings(&vocab, &table, &encoder)?;
        let s_names = name_embeddings(&vocab, &table)?;
        Ok(PvlrModel {
            config,
            vocab,
            encoder,
            table,
            t_hard,
            t_names,
            s_names,
            slots: Slots::default(),
        })
    }

    pub fn t_hard(&self) -> &[f64] {
        &self.t_hard
    }

    pub fn t_names(&self) -> &[f64] {
        &self.t_names
    }

    /// Registers every parameter the configured mode needs and fills the
    /// internal slots. Must be called exactly once before any forward.
    pub fn init_params(&mut self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let (c, d, l) = (self.config.c, self.config.d, self.config.l);
        match self.config.head_mode {
            HeadMode::Pvlr => {
                if self.config.use_kap {
                    self.slots.kap = Some(AttentionBlock::register(&mut store, "kap_attn", d, seed)?);
                }
                if self.config.use_cap {
                    if l > 0 {
                        match self.config.prompting_mode {
                            PromptingMode::Post => {
                                self.slots.soft_prompts = Some(store.register_uniform(
                                    "soft_prompts",
                                    vec![l, d],
                                    d,
                                    seed,
                                )?);
                            }
                            PromptingMode::Pre => {
                                self.slots.pre_queries = Some(store.register_uniform(
                                    "pre_queries",
                                    vec![l, d],
                                    d,
                                    seed,
                                )?);
                                self.slots.pre_cross =
                                    Some(AttentionBlock::register(&mut store, "pre_cross", d, seed)?);
                            }
                        }
                    }
                    self.slots.cap_cross =
                        Some(AttentionBlock::register(&mut store, "cap_cross", d, seed)?);
                    self.slots.cap_self =
                        Some(AttentionBlock::register(&mut store, "cap_self", d, seed)?);
                }
                if self.config.use_channel_interaction {
                    self.slots.ifm_w1 =
                        Some(store.register_uniform("ifm_mlp.w1", vec![2 * d, d], 2 * d, seed)?);
                    self.slots.ifm_b1 = Some(store.register("ifm_mlp.b1", vec![d], vec![0.0; d])?);
                    // zero-initialized output layer: the interaction starts
                    // as an exact identity on T_ca
                    self.slots.ifm_w2 =
                        Some(store.register("ifm_mlp.w2", vec![d, d], vec![0.0; d * d])?);
                    self.slots.ifm_b2 = Some(store.register("ifm_mlp.b2", vec![d], vec![0.0; d])?);
                }
                if self.config.use_relation_aggregation {
                    // raw 0 -> alpha = 0.5
                    self.slots.alpha_raw = Some(store.register("alpha.raw", vec![1], vec![0.0])?);
                }
                if self.config.use_v2s {
                    self.slots.v2s = Some(AttentionBlock::register(&mut store, "dma_v2s", d, seed)?);
                }
                if self.config.use_s2v {
                    self.slots.s2v = Some(AttentionBlock::register(&mut store, "dma_s2v", d, seed)?);
                }
            }
            HeadMode::ClassifierLearning => {
                self.slots.clf_cross =
                    Some(AttentionBlock::register(&mut store, "clf_cross", d, seed)?);
                self.slots.clf_w =
                    Some(store.register_uniform("classifier.w", vec![c, d], d, seed)?);
                self.slots.clf_b = Some(store.register("classifier.b", vec![c], vec![0.0; c])?);
            }
            // LabelRep scores the pooled visual vector directly against the
            // static centers — nothing to train (the paper's counterpart
            // trains only the backbone, which has no analogue here).
            HeadMode::LabelRep => {}
            HeadMode::LabelRepDma => {
                if self.config.use_v2s {
                    self.slots.v2s = Some(AttentionBlock::register(&mut store, "dma_v2s", d, seed)?);
                }
                if self.config.use_s2v {
                    self.slots.s2v = Some(AttentionBlock::register(&mut store, "dma_s2v", d, seed)?);
                }
            }
        }
        Ok(store)
    }

    fn load_leaves(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        store
            .entries()
            .iter()
            .map(|e| tape.leaf(e.shape.clone(), e.values.clone()))
            .collect()
    }

    fn loaded_block(
        &self,
        tape: &Tape,
        leaves: &[Tensor],
        block: &AttentionBlock,
    ) -> crate::attention::LoadedBlock {
        let _ = tape;
        crate::attention::LoadedBlock {
            wq: leaves[block.wq].clone(),
            wk: leaves[block.wk].clone(),
            wv: leaves[block.wv].clone(),
            d: block.d,
        }
    }

    fn self_att(
        &self,
        tape: &Tape,
        block: &crate::attention::LoadedBlock,
        e: &Tensor,
    ) -> Result<AttentionResult> {
        let mut att = self_attention(tape, block, e)?;
        if self.config.attention_residual {
            att.output = tape.add(&att.output, e)?;
        }
        Ok(att)
    }

    fn cross_att(
        &self,
        tape: &Tape,
        block: &crate::attention::LoadedBlock,
        e: &Tensor,
        z: &Tensor,
    ) -> Result<AttentionResult> {
        let mut att = cross_attention(tape, block, e, z)?;
        if self.config.attention_residual {
            att.output = tape.add(&att.output, e)?;
        }
        Ok(att)
    }

    /// Records one sample's full forward pass. `x` is the `M x d` visual
    /// feature grid in row-major order.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<SampleTrace> {
        let cfg = &self.config;
        if x.len() != cfg.m * cfg.d {
            return Err(Error::Dimension(format!(
                "forward: sample has {} values, expected {} ({}x{})",
                x.len(),
                cfg.m * cfg.d,
                cfg.m,
                cfg.d
            )));
        }
        let tape = Tape::new();
        let leaves = self.load_leaves(&tape, store);
        let xt = tape.constant(vec![cfg.m, cfg.d], x.to_vec());

        let mut trace = SampleTrace {
            probs: xt.clone(), // placeholder, replaced below
            tape: Tape::new(),
            leaves: Vec::new(),
            t_ka: None,
            m_ka: None,
            t_ca: None,
            m_ca: None,
            m_blend: None,
            t: None,
            t_vs: None,
            x_sv: None,
            v2s_map: None,
            s2v_map: None,
            kcr: None,
        };

        let probs = match cfg.head_mode {
            HeadMode::Pvlr => self.forward_pvlr(&tape, &leaves, &xt, &mut trace)?,
            HeadMode::ClassifierLearning => {
                let t_hard = tape.constant(vec![cfg.c, cfg.d], self.t_hard.clone());
                let block = self.loaded_block(&tape, &leaves, self.slots.clf_cross.as_ref().unwrap());
                let att = self.cross_att(&tape, &block, &t_hard, &xt)?;
                trace.v2s_map = Some(att.map);
                let w = &leaves[self.slots.clf_w.unwrap()];
                let b = &leaves[self.slots.clf_b.unwrap()];
                let scores = tape.row_dot(&att.output, w)?;
                let scores = tape.add(&scores, b)?;
                tape.sigmoid(&scores)
            }
            HeadMode::LabelRep => {
                let centers = tape.constant(vec![cfg.c, cfg.d], self.t_names.clone());
                let xm = tape.row_mean(&xt)?;
                trace.x_sv = Some(xm.clone());
                trace.t_vs = Some(centers.clone());
                let logits = tape.matvec(&centers, &xm)?;
                tape.sigmoid(&logits)
            }
            HeadMode::LabelRepDma => {
                let centers = tape.constant(vec![cfg.c, cfg.d], self.t_names.clone());
                trace.t = Some(centers.clone());
                let (t_vs, x_sv) = self.dma(&tape, &leaves, &centers, &xt, &mut trace)?;
                let logits = tape.matvec(&t_vs, &x_sv)?;
                trace.t_vs = Some(t_vs);
                trace.x_sv = Some(x_sv);
                tape.sigmoid(&logits)
            }
        };

        trace.tape = tape;
        trace.leaves = leaves;
        trace.probs = probs;
        Ok(trace)
    }

    fn forward_pvlr(
        &self,
        tape: &Tape,
        leaves: &[Tensor],
        xt: &Tensor,
        trace: &mut SampleTrace,
    ) -> Result<Tensor> {
        let cfg = &self.config;

        if cfg.use_kap {
            let t_hard = tape.constant(vec![cfg.c, cfg.d], self.t_hard.clone());
            let block = self.loaded_block(tape, leaves, self.slots.kap.as_ref().unwrap());
            let AttentionResult { output, map } = self.self_att(tape, &block, &t_hard)?;
            trace.t_ka = Some(output);
            trace.m_ka = Some(map);
        }

        if cfg.use_cap {
            let s_names = tape.constant(vec![cfg.c, cfg.d], self.s_names.clone());
            let prompt_mean = if cfg.l == 0 {
                None
            } else {
                match cfg.prompting_mode {
                    PromptingMode::Post => {
                        let p = &leaves[self.slots.soft_prompts.unwrap()];
                        Some(tape.row_mean(p)?)
                    }
                    PromptingMode::Pre => {
                        let q = &leaves[self.slots.pre_queries.unwrap()];
                        let block =
                            self.loaded_block(tape, leaves, self.slots.pre_cross.as_ref().unwrap());
                        let att = self.cross_att(tape, &block, q, xt)?;
                        Some(tape.row_mean(&att.output)?)
                    }
                }
            };
            let t_soft =
                build_soft_prompts_on_tape(tape, &self.encoder, &s_names, prompt_mean.as_ref(), cfg.l)?;
            let cross = self.loaded_block(tape, leaves, self.slots.cap_cross.as_ref().unwrap());
            let t_soft_x = self.cross_att(tape, &cross, &t_soft, xt)?.output;
            let selfb = self.loaded_block(tape, leaves, self.slots.cap_self.as_ref().unwrap());
            let AttentionResult { output, map } = self.self_att(tape, &selfb, &t_soft_x)?;
            trace.t_ca = Some(output);
            trace.m_ca = Some(map);
        }

        // IFM channel interaction: T_ca <- T_ca + MLP([T_ka, T_ca])
        if cfg.use_channel_interaction {
            let t_ka = trace.t_ka.as_ref().unwrap();
            let t_ca = trace.t_ca.as_ref().unwrap();
            let cat = tape.concat_cols(t_ka, t_ca)?;
            let h = tape.linear(
                &cat,
                &leaves[self.slots.ifm_w1.unwrap()],
                Some(&leaves[self.slots.ifm_b1.unwrap()]),
            )?;
            let h = tape.relu(&h);
            let delta = tape.linear(
                &h,
                &leaves[self.slots.ifm_w2.unwrap()],
                Some(&leaves[self.slots.ifm_b2.unwrap()]),
            )?;
            trace.t_ca = Some(tape.add(t_ca, &delta)?);
        }

        // KCR on the (possibly modulated) CAP embeddings
        if cfg.use_kap && cfg.use_cap {
            trace.kcr = Some(kcr_loss(
                tape,
                trace.t_ka.as_ref().unwrap(),
                trace.t_ca.as_ref().unwrap(),
            )?);
        }

        // relation aggregation: T = (a M_ka + (1-a) M_ca) T_ca
        let t = if cfg.use_relation_aggregation {
            let alpha_raw = &leaves[self.slots.alpha_raw.unwrap()];
            let alpha = tape.sigmoid(alpha_raw);
            let neg = tape.scale(&alpha, -1.0);
            let one_minus = tape.add_const(&neg, 1.0);
            let a_ka = tape.mul_scalar(trace.m_ka.as_ref().unwrap(), &alpha)?;
            let a_ca = tape.mul_scalar(trace.m_ca.as_ref().unwrap(), &one_minus)?;
            let blend = tape.add(&a_ka, &a_ca)?;
            trace.m_blend = Some(blend.clone());
            tape.matmul(&blend, trace.t_ca.as_ref().unwrap())?
        } else if cfg.use_cap {
            trace.t_ca.clone().unwrap()
        } else {
            trace.t_ka.clone().unwrap()
        };
        trace.t = Some(t.clone());

        let (t_vs, x_sv) = self.dma(tape, leaves, &t, xt, trace)?;
        let logits = tape.matvec(&t_vs, &x_sv)?;
        trace.t_vs = Some(t_vs);
        trace.x_sv = Some(x_sv);
        Ok(tape.sigmoid(&logits))
    }

    /// DMA with per-direction toggles: disabled v2s passes `t` through,
    /// disabled s2v pools the raw visual grid.
    fn dma(
        &self,
        tape: &Tape,
        leaves: &[Tensor],
        t: &Tensor,
        xt: &Tensor,
        trace: &mut SampleTrace,
    ) -> Result<(Tensor, Tensor)> {
        let t_vs = match &self.slots.v2s {
            Some(block) if self.config.use_v2s => {
                let b = self.loaded_block(tape, leaves, block);
                let att = self.cross_att(tape, &b, t, xt)?;
                trace.v2s_map = Some(att.map);
                att.output
            }
            _ => t.clone(),
        };
        let x_sv = match &self.slots.s2v {
            Some(block) if self.config.use_s2v => {
                let b = self.loaded_block(tape, leaves, block);
                let att = self.cross_att(tape, &b, xt, t)?;
                trace.s2v_map = Some(att.map);
                tape.row_mean(&att.output)?
            }
            _ => tape.row_mean(xt)?,
        };
        Ok((t_vs, x_sv))
    }

    /// Composite loss (Eq. 12) on an existing trace.
    pub fn loss(&self, trace: &SampleTrace, targets: &[f64], cfg: &LossConfig) -> Result<Tensor> {
        let cls = asl_loss(&trace.tape, &trace.probs, targets, cfg)?;
        total_loss(&trace.tape, &cls, trace.kcr.as_ref(), cfg)
    }

    /// Forward + backward for one sample. Returns the loss value, the
    /// per-label probabilities, and per-parameter gradients aligned with
    /// the store's entry order (zeros where a parameter is unreachable).
    pub fn sample_grads(
        &self,
        store: &ParamStore,
        x: &[f64],
        targets: &[f64],
        cfg: &LossConfig,
    ) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let trace = self.forward(store, x)?;
        let loss = self.loss(&trace, targets, cfg)?;
        let grads = trace.tape.backward(&loss)?;
        let out = collect_grads(&trace, store, &grads);
        Ok((trace.tape.scalar_value(&loss), trace.probs_values(), out))
    }
}

/// Extracts per-parameter gradients from a backward pass, zero-filling
/// parameters the loss does not reach.
pub fn collect_grads(trace: &SampleTrace, store: &ParamStore, grads: &Grads) -> Vec<Vec<f64>> {
    trace
        .leaves
        .iter()
        .enumerate()
        .map(|(i, leaf)| match grads.get(leaf) {
            Some(g) => g.to_vec(),
            None => vec![0.0; store.get(i).values.len()],
        })
        .collect()
}
