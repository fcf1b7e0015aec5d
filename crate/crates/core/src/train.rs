//! Training loop, evaluation, and experiment drivers (gradient check,
//! ablation grid, lambda sweep).
//!
//! Within a batch each sample's forward/backward runs on its own tape;
//! gradients are reduced in sample-index order regardless of how the
//! per-sample work is scheduled, so the `parallel` feature changes wall
//! clock only, never results.

use crate::checkpoint::{pack_training_state, unpack_training_state, Checkpoint};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadMode, PromptingMode, PvlrModel};
use crate::metrics::{evaluate, MetricsReport, ScoreMatrix};
use crate::objective::LossConfig;
use crate::optim::{adamw_step, cosine_lr, AdamWParams, AdamWState, EmaState};
use crate::params::ParamStore;
use crate::rng::indexed_rng;
use crate::synthdata::{make_dataset, Dataset, Splits};
use crate::tensor::finite_diff_check;
use crate::text_sim::Vocabulary;
use rand::seq::SliceRandom;
use std::time::Instant;

/// Everything a run needs after setup; `resume` continues from
/// `global_step`.
pub struct Session {
    pub config: TrainConfig,
    pub model: PvlrModel,
    pub splits: Splits,
    pub store: ParamStore,
    pub ema: EmaState,
    pub opt: AdamWState,
    pub global_step: u64,
}

pub struct TrainOutcome {
    pub final_report: MetricsReport,
    /// Per-epoch CSV log (header + one row per epoch).
    pub epoch_log: String,
}

pub const EPOCH_LOG_HEADER: &str =
    "epoch,loss,map,cp,cr,cf1,op,or,of1,map_top3,cp_top3,cr_top3,cf1_top3,op_top3,or_top3,of1_top3";

impl Session {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::synthetic(config.head.c)?;
        let mut model = PvlrModel::new(config.head.clone(), vocab, config.dataset.seed)?;
        let store = model.init_params(config.seed)?;
        let splits = make_dataset(&config.dataset, &model.vocab, &model.table, &model.encoder)?;
        let ema = EmaState::new(&store, config.ema_decay);
        let opt = AdamWState::new(&store);
        Ok(Session { config, model, splits, store, ema, opt, global_step: 0 })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        let n = self.splits.train.n as u64;
        let b = self.config.batch_size as u64;
        n.div_ceil(b)
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let within = (step % spe) as usize;
        let n = self.splits.train.n;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = indexed_rng(self.config.seed, "shuffle", epoch);
        order.shuffle(&mut rng);
        let b = self.config.batch_size;
        order[within * b..n.min((within + 1) * b)].to_vec()
    }

    /// Runs `steps` optimizer steps from the current position; returns the
    /// mean batch loss over those steps.
    pub fn run_steps(&mut self, steps: u64) -> Result<f64> {
        let hp = AdamWParams {
            weight_decay: self.config.weight_decay,
            ..AdamWParams::default()
        };
        let total = self.total_steps();
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            if self.global_step >= total {
                return Err(Error::Contract(format!(
                    "run_steps: step {} beyond schedule of {total}",
                    self.global_step
                )));
            }
            let indices = self.batch_indices(self.global_step);
            let (loss, grads) = batch_grads(
                &self.model,
                &self.store,
                &self.splits.train,
                &indices,
                &self.config.loss,
            )?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at step {} (batch of {})",
                    self.global_step,
                    indices.len()
                )));
            }
            let lr = cosine_lr(self.global_step, total, self.config.lr_max, self.config.lr_min)?;
            adamw_step(&mut self.store, &grads, &mut self.opt, lr, &hp)?;
            self.ema.update(&self.store)?;
            self.global_step += 1;
            loss_sum += loss;
        }
        Ok(loss_sum / steps.max(1) as f64)
    }

    /// Scores the test split with EMA or live weights per the config.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let store = if self.config.eval_with_ema {
            self.ema.shadow_store(&self.store)?
        } else {
            self.store.clone()
        };
        evaluate_dataset(
            &self.model,
            &store,
            &self.splits.test,
            self.config.threshold,
            self.config.topk,
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": serde_json::to_value(&self.config).expect("config serializes"),
            "global_step": self.global_step,
        });
        pack_training_state(meta.to_string(), &self.store, &self.ema, &self.opt)
    }

    /// Rebuilds a session from a checkpoint produced by
    /// [`Session::checkpoint`].
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::Format { offset: 0, msg: format!("bad config JSON: {e}") })?;
        let config: TrainConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format { offset: 0, msg: format!("bad config: {e}") })?;
        let global_step = meta["global_step"]
            .as_u64()
            .ok_or_else(|| Error::Format { offset: 0, msg: "missing global_step".into() })?;
        let mut session = Session::new(config)?;
        unpack_training_state(ckpt, &mut session.store, &mut session.ema, &mut session.opt)?;
        session.global_step = global_step;
        Ok(session)
    }
}

/// Mean loss and mean gradients over one batch. Per-sample results are
/// reduced in index order for bit-reproducibility.
pub fn batch_grads(
    model: &PvlrModel,
    store: &ParamStore,
    data: &Dataset,
    indices: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    #[cfg(feature = "parallel")]
    {
        batch_grads_parallel(model, store, data, indices, loss_cfg)
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch_grads_sequential(model, store, data, indices, loss_cfg)
    }
}

pub fn batch_grads_sequential(
    model: &PvlrModel,
    store: &ParamStore,
    data: &Dataset,
    indices: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_sample: Vec<(f64, Vec<f64>, Vec<Vec<f64>>)> = indices
        .iter()
        .map(|&i| model.sample_grads(store, data.sample_x(i), data.sample_y(i), loss_cfg))
        .collect::<Result<_>>()?;
    Ok(reduce_batch(store, per_sample))
}

#[cfg(feature = "parallel")]
pub fn batch_grads_parallel(
    model: &PvlrModel,
    store: &ParamStore,
    data: &Dataset,
    indices: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    use rayon::prelude::*;
    let per_sample: Vec<(f64, Vec<f64>, Vec<Vec<f64>>)> = indices
        .par_iter()
        .map(|&i| model.sample_grads(store, data.sample_x(i), data.sample_y(i), loss_cfg))
        .collect::<Result<_>>()?;
    Ok(reduce_batch(store, per_sample))
}

fn reduce_batch(
    store: &ParamStore,
    per_sample: Vec<(f64, Vec<f64>, Vec<Vec<f64>>)>,
) -> (f64, Vec<Vec<f64>>) {
    let b = per_sample.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = store
        .entries()
        .iter()
        .map(|e| vec![0.0; e.values.len()])
        .collect();
    for (l, _, g) in &per_sample {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, v) in acc.iter_mut().zip(gi) {
                *a += v;
            }
        }
    }
    for g in &mut grads {
        for v in g.iter_mut() {
            *v /= b;
        }
    }
    (loss / b, grads)
}

/// Scores every sample of a dataset and computes the metrics report.
pub fn evaluate_dataset(
    model: &PvlrModel,
    store: &ParamStore,
    data: &Dataset,
    threshold: f64,
    topk: usize,
) -> Result<MetricsReport> {
    let scores = score_dataset(model, store, data)?;
    let m = ScoreMatrix::new(data.n, data.c, scores, data.y.clone())?;
    evaluate(&m, threshold, topk)
}

/// Per-sample probabilities over a whole dataset, row-major `[N, C]`.
pub fn score_dataset(model: &PvlrModel, store: &ParamStore, data: &Dataset) -> Result<Vec<f64>> {
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..data.n)
            .into_par_iter()
            .map(|i| Ok(model.forward(store, data.sample_x(i))?.probs_values()))
            .collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<f64>> = (0..data.n)
        .map(|i| Ok(model.forward(store, data.sample_x(i))?.probs_values()))
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Full training run: per-epoch evaluation with the configured weights,
/// deterministic under the config seed.
pub fn train(config: TrainConfig) -> Result<(TrainOutcome, Session)> {
    let mut session = Session::new(config)?;
    let mut log = String::from(EPOCH_LOG_HEADER);
    log.push('\n');
    let spe = session.steps_per_epoch();
    let mut final_report = None;
    for epoch in 0..session.config.epochs {
        let mean_loss = session.run_steps(spe)?;
        let report = session.evaluate()?;
        log.push_str(&format!("{},{},{}\n", epoch, mean_loss, report.csv_row()));
        final_report = Some(report);
    }
    let final_report = final_report.expect("epochs >= 1");
    Ok((TrainOutcome { final_report, epoch_log: log }, session))
}

// ---------------------------------------------------------------------------
// gradient check

pub struct GradCheckGroup {
    /// `<mode>/<parameter name>`
    pub name: String,
    pub max_rel_err: f64,
}

pub struct GradCheckReport {
    pub groups: Vec<GradCheckGroup>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

fn gradcheck_config(mode: HeadMode, prompting: PromptingMode) -> HeadConfig {
    HeadConfig {
        c: 4,
        d: 8,
        m: 4,
        l: 2,
        prompting_mode: prompting,
        head_mode: mode,
        ..HeadConfig::default()
    }
}

/// Finite-difference comparison of the full composite-objective gradient
/// for every parameter group, across the PVLR head (post and pre
/// prompting) and the reference heads.
pub fn gradcheck(seed: u64) -> Result<GradCheckReport> {
    let loss_cfg = LossConfig::default();
    let mut groups = Vec::new();
    let cases = [
        ("pvlr", HeadMode::Pvlr, PromptingMode::Post),
        ("pvlr_pre", HeadMode::Pvlr, PromptingMode::Pre),
        ("classifier_learning", HeadMode::ClassifierLearning, PromptingMode::Post),
        ("label_rep", HeadMode::LabelRep, PromptingMode::Post),
        ("label_rep_dma", HeadMode::LabelRepDma, PromptingMode::Post),
    ];
    for (tag, mode, prompting) in cases {
        let config = gradcheck_config(mode, prompting);
        let vocab = Vocabulary::synthetic(config.c)?;
        let mut model = PvlrModel::new(config.clone(), vocab, seed)?;
        let store = model.init_params(seed.wrapping_add(1))?;
        let mut rng = indexed_rng(seed, "gradcheck_sample", 0);
        let x: Vec<f64> = (0..config.m * config.d)
            .map(|_| crate::synthdata::normal(&mut rng))
            .collect();
        let mut y = vec![0.0; config.c];
        y[0] = 1.0;
        y[2] = 1.0;
        let (_, _, grads) = model.sample_grads(&store, &x, &y, &loss_cfg)?;
        let mut params: Vec<(String, Vec<f64>)> = store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.values.clone()))
            .collect();
        let f = |p: &[(String, Vec<f64>)]| -> Result<f64> {
            let mut s = store.clone();
            for (i, (_, values)) in p.iter().enumerate() {
                s.set_values(i, values.clone())?;
            }
            let trace = model.forward(&s, &x)?;
            let loss = model.loss(&trace, &y, &loss_cfg)?;
            Ok(trace.tape.scalar_value(&loss))
        };
        let report = finite_diff_check(f, &mut params, &grads, 2e-3)?;
        for (name, err) in report.per_param {
            groups.push(GradCheckGroup { name: format!("{tag}/{name}"), max_rel_err: err });
        }
    }
    Ok(GradCheckReport { groups })
}

// ---------------------------------------------------------------------------
// ablation grid and lambda sweep

/// The toggle grids the ablation runner covers.
pub fn ablation_modes() -> Vec<(&'static str, &'static str)> {
    vec![
        ("table4", "baseline"),
        ("table4", "kap"),
        ("table4", "kap_cap"),
        ("table4", "kap_cap_ifm"),
        ("table4", "pvlr_full"),
        ("table5", "classifier_learning"),
        ("table5", "label_rep"),
        ("table5", "label_rep_dma"),
        ("table5", "pvlr"),
        ("table8", "dma_none"),
        ("table8", "v2s_only"),
        ("table8", "s2v_only"),
        ("table8", "bidirectional"),
    ]
}

/// Applies a named ablation mode to a base config.
pub fn apply_mode(base: &TrainConfig, mode: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    let h = &mut cfg.head;
    // start from the full head and switch pieces off
    h.head_mode = HeadMode::Pvlr;
    h.use_kap = true;
    h.use_cap = true;
    h.use_channel_interaction = true;
    h.use_relation_aggregation = true;
    h.use_v2s = true;
    h.use_s2v = true;
    match mode {
        "baseline" | "label_rep" => h.head_mode = HeadMode::LabelRep,
        "classifier_learning" => h.head_mode = HeadMode::ClassifierLearning,
        "label_rep_dma" => h.head_mode = HeadMode::LabelRepDma,
        "kap" => {
            h.use_cap = false;
            h.use_channel_interaction = false;
            h.use_relation_aggregation = false;
            h.use_v2s = false;
            h.use_s2v = false;
        }
        "kap_cap" => {
            h.use_channel_interaction = false;
            h.use_relation_aggregation = false;
            h.use_v2s = false;
            h.use_s2v = false;
        }
        "cap" => {
            h.use_kap = false;
            h.use_channel_interaction = false;
            h.use_relation_aggregation = false;
            h.use_v2s = false;
            h.use_s2v = false;
        }
        "kap_cap_ifm" | "dma_none" => {
            h.use_v2s = false;
            h.use_s2v = false;
        }
        "v2s_only" => h.use_s2v = false,
        "s2v_only" => h.use_v2s = false,
        "pvlr_full" | "pvlr" | "bidirectional" => {}
        other => return Err(Error::Config(format!("unknown ablation mode {other:?}"))),
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct AblationRow {
    pub group: String,
    pub mode: String,
    pub seeds: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub cf1_mean: f64,
    pub cf1_std: f64,
    pub of1_mean: f64,
    pub of1_std: f64,
    /// Error messages from failed cells, if any.
    pub failures: Vec<String>,
}

pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str =
        "group,mode,seeds,map_mean,map_std,cf1_mean,cf1_std,of1_mean,of1_std";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.group,
                r.mode,
                r.seeds,
                r.map_mean,
                r.map_std,
                r.cf1_mean,
                r.cf1_std,
                r.of1_mean,
                r.of1_std
            ));
        }
        out
    }

    pub fn row(&self, group: &str, mode: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.group == group && r.mode == mode)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains every ablation mode for every seed; failed cells are recorded
/// and the grid continues. Identical configurations shared between groups
/// are trained once.
pub fn run_ablation(base: &TrainConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut cache: std::collections::HashMap<String, std::result::Result<MetricsReport, String>> =
        std::collections::HashMap::new();
    let mut rows = Vec::new();
    for (group, mode) in ablation_modes() {
        let mut maps = Vec::new();
        let mut cf1s = Vec::new();
        let mut of1s = Vec::new();
        let mut failures = Vec::new();
        for &seed in seeds {
            let mut cfg = apply_mode(base, mode)?;
            cfg.seed = seed;
            let key = cfg.to_json();
            let outcome = cache
                .entry(key)
                .or_insert_with(|| match train(cfg) {
                    Ok((out, _)) => Ok(out.final_report),
                    Err(e) => Err(e.to_string()),
                })
                .clone();
            match outcome {
                Ok(report) => {
                    maps.push(report.map);
                    cf1s.push(report.cf1);
                    of1s.push(report.of1);
                }
                Err(e) => failures.push(format!("{group}/{mode} seed {seed}: {e}")),
            }
        }
        let (map_mean, map_std) = mean_std(&maps);
        let (cf1_mean, cf1_std) = mean_std(&cf1s);
        let (of1_mean, of1_std) = mean_std(&of1s);
        rows.push(AblationRow {
            group: group.to_string(),
            mode: mode.to_string(),
            seeds: maps.len(),
            map_mean,
            map_std,
            cf1_mean,
            cf1_std,
            of1_mean,
            of1_std,
            failures,
        });
    }
    Ok(AblationTable { rows })
}

pub struct SweepRow {
    pub lambda: f64,
    pub seeds: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub cf1_mean: f64,
    pub of1_mean: f64,
}

pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const CSV_HEADER: &'static str = "lambda,seeds,map_mean,map_std,cf1_mean,of1_mean";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.lambda, r.seeds, r.map_mean, r.map_std, r.cf1_mean, r.of1_mean
            ));
        }
        out
    }
}

pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

/// One full-head training run per (lambda, seed).
pub fn sweep_lambda(base: &TrainConfig, values: &[f64], seeds: &[u64]) -> Result<SweepTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs values and seeds".into()));
    }
    if values.iter().any(|&v| v < 0.0) {
        return Err(Error::Config("lambda values must be >= 0".into()));
    }
    let mut rows = Vec::new();
    for &lambda in values {
        let mut maps = Vec::new();
        let mut cf1s = Vec::new();
        let mut of1s = Vec::new();
        for &seed in seeds {
            let mut cfg = apply_mode(base, "pvlr")?;
            cfg.loss.lambda_kcr = lambda;
            cfg.seed = seed;
            let (out, _) = train(cfg)?;
            maps.push(out.final_report.map);
            cf1s.push(out.final_report.cf1);
            of1s.push(out.final_report.of1);
        }
        let (map_mean, map_std) = mean_std(&maps);
        rows.push(SweepRow {
            lambda,
            seeds: maps.len(),
            map_mean,
            map_std,
            cf1_mean: mean_std(&cf1s).0,
            of1_mean: mean_std(&of1s).0,
        });
    }
    Ok(SweepTable { rows })
}

/// Measured seconds per optimizer step for post- vs pre-interaction
/// prompting on an otherwise identical config.
pub fn compare_prompting_speed(base: &TrainConfig, steps: u64) -> Result<(f64, f64)> {
    let mut timing = [0.0f64; 2];
    for (slot, prompting) in [(0usize, PromptingMode::Post), (1, PromptingMode::Pre)] {
        let mut cfg = apply_mode(base, "pvlr")?;
        cfg.head.prompting_mode = prompting;
        let mut session = Session::new(cfg)?;
        let steps = steps.min(session.total_steps());
        // warm-up step excluded from the measurement
        session.run_steps(1)?;
        let start = Instant::now();
        session.run_steps(steps.saturating_sub(1).max(1))?;
        timing[slot] = start.elapsed().as_secs_f64() / steps.saturating_sub(1).max(1) as f64;
    }
    Ok((timing[0], timing[1]))
}
