//! `pvlr` — command-line runner for training, evaluation, and the
//! experiment grids (gradient check, ablation ladder, lambda sweep),
//! plus data generation and attention-map export.
//!
//! Every run is configured by an optional JSON config file plus any
//! number of `--<field.path> <value>` overrides, e.g.
//! `pvlr train --epochs 10 --head.use_kap false --loss.lambda_kcr 2.0`.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O or
//! file-format error.

use clap::{Args, Parser, Subcommand};
use pvlr_core::checkpoint::{Checkpoint, NamedTensor};
use pvlr_core::error::Error;
use pvlr_core::train::{
    compare_prompting_speed, gradcheck, run_ablation, sweep_lambda, train, Session,
    DEFAULT_LAMBDA_GRID,
};
use pvlr_core::TrainConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pvlr", version, about = "Prompt-driven multi-label recognition head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared config plumbing: a JSON file and/or `--key value` overrides.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply for absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as `--<field.path> <value>` pairs
    /// (e.g. `--epochs 10 --head.use_cap false`).
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                TrainConfig::from_json(&text)?
            }
            None => TrainConfig::default(),
        };
        let mut it = self.overrides.iter();
        while let Some(key) = it.next() {
            let path = key.strip_prefix("--").ok_or_else(|| {
                Error::Config(format!("expected --<field.path>, got {key:?}"))
            })?;
            let value = it
                .next()
                .ok_or_else(|| Error::Config(format!("--{path} is missing a value")))?;
            cfg.apply_override(&format!("{path}={value}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes per-epoch metrics CSV and a checkpoint.
    Train {
        /// Output directory for metrics.csv and model.ckpt.
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on its test split.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional CSV destination for the metrics row.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the composite-objective gradient.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Maximum acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Module-toggle ablation grid (component ladder, center-generation
    /// modes, DMA directions), mean/std over seeds.
    Ablate {
        /// Comma-separated optimizer seeds.
        #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Output CSV path.
        #[arg(long, default_value = "runs/ablation.csv")]
        out: PathBuf,
        /// Also time pre- vs post-interaction prompting over this many
        /// optimizer steps (0 skips the timing).
        #[arg(long, default_value_t = 0)]
        timing_steps: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the full head across a lambda grid; emits a CSV for plotting.
    SweepLambda {
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Comma-separated optimizer seeds.
        #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Output CSV path.
        #[arg(long, default_value = "runs/sweep_lambda.csv")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export attention maps and label representations for one test
    /// sample as CSV files.
    ExportMaps {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-split sample index.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Output directory; one CSV per exported tensor.
        #[arg(long, default_value = "runs/maps")]
        out_dir: PathBuf,
    },
    /// Generate the synthetic splits and write them to disk (tensor file
    /// per split plus a targets CSV).
    GenData {
        /// Output directory.
        #[arg(long, default_value = "runs/data")]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pvlr: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Degenerate(_) | Error::Determinism(_) => 3,
        Error::Io(_) | Error::Format { .. } => 4,
        _ => 2,
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train { out_dir, config } => cmd_train(&out_dir, &config),
        Command::Eval { checkpoint, out } => cmd_eval(&checkpoint, out.as_deref()),
        Command::Gradcheck { seed, tolerance } => cmd_gradcheck(seed, tolerance),
        Command::Ablate { seeds, out, timing_steps, config } => {
            cmd_ablate(&seeds, &out, timing_steps, &config)
        }
        Command::SweepLambda { values, seeds, out, config } => {
            let values = values.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
            cmd_sweep(&values, &seeds, &out, &config)
        }
        Command::ExportMaps { checkpoint, sample, out_dir } => {
            cmd_export_maps(&checkpoint, sample, &out_dir)
        }
        Command::GenData { out_dir, config } => cmd_gen_data(&out_dir, &config),
    }
}

fn cmd_train(out_dir: &Path, config: &ConfigArgs) -> Result<(), Error> {
    let cfg = config.build()?;
    std::fs::create_dir_all(out_dir)?;
    let (outcome, session) = train(cfg)?;
    let metrics_path = out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, &outcome.epoch_log)?;
    let ckpt_path = out_dir.join("model.ckpt");
    session.checkpoint().save(&ckpt_path)?;
    let r = &outcome.final_report;
    println!(
        "trained {} epochs ({} steps); mAP {:.4}  CF1 {:.4}  OF1 {:.4}",
        session.config.epochs,
        session.global_step,
        r.map,
        r.cf1,
        r.of1
    );
    println!("wrote {} and {}", metrics_path.display(), ckpt_path.display());
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, out: Option<&Path>) -> Result<(), Error> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let session = Session::resume(&ckpt)?;
    let report = session.evaluate()?;
    println!(
        "mAP {:.4}  CP {:.4}  CR {:.4}  CF1 {:.4}  OP {:.4}  OR {:.4}  OF1 {:.4}",
        report.map, report.cp, report.cr, report.cf1, report.op, report.or_, report.of1
    );
    println!(
        "top-3: mAP {:.4}  CF1 {:.4}  OF1 {:.4}",
        report.map_top3, report.cf1_top3, report.of1_top3
    );
    if let Some(path) = out {
        let mut csv = String::from(pvlr_core::MetricsReport::CSV_HEADER);
        csv.push('\n');
        csv.push_str(&report.csv_row());
        csv.push('\n');
        std::fs::write(path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, tolerance: f64) -> Result<(), Error> {
    let report = gradcheck(seed)?;
    for g in &report.groups {
        println!("{:<40} max rel err {:.3e}", g.name, g.max_rel_err);
    }
    let worst = report.max_rel_err();
    println!("worst: {worst:.3e} (tolerance {tolerance:.1e})");
    if worst > tolerance {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} > {tolerance:.1e}"
        )));
    }
    Ok(())
}

fn cmd_ablate(
    seeds: &[u64],
    out: &Path,
    timing_steps: u64,
    config: &ConfigArgs,
) -> Result<(), Error> {
    let base = config.build()?;
    let table = run_ablation(&base, seeds)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, table.to_csv())?;
    for row in &table.rows {
        println!(
            "{:<8} {:<20} mAP {:.4} ± {:.4}  ({} seeds)",
            row.group, row.mode, row.map_mean, row.map_std, row.seeds
        );
        for f in &row.failures {
            eprintln!("  failed cell: {f}");
        }
    }
    if timing_steps > 0 {
        let (post, pre) = compare_prompting_speed(&base, timing_steps)?;
        println!(
            "prompting timing over {timing_steps} steps: post {post:.4} s/step, \
             pre {pre:.4} s/step (ratio {:.2})",
            pre / post
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(
    values: &[f64],
    seeds: &[u64],
    out: &Path,
    config: &ConfigArgs,
) -> Result<(), Error> {
    let base = config.build()?;
    let table = sweep_lambda(&base, values, seeds)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, table.to_csv())?;
    for row in &table.rows {
        println!(
            "lambda {:<5} mAP {:.4} ± {:.4}  ({} seeds)",
            row.lambda, row.map_mean, row.map_std, row.seeds
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_export_maps(ckpt_path: &Path, sample: usize, out_dir: &Path) -> Result<(), Error> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let session = Session::resume(&ckpt)?;
    if sample >= session.splits.test.n {
        return Err(Error::Config(format!(
            "sample {sample} out of range for test split of {}",
            session.splits.test.n
        )));
    }
    let store = if session.config.eval_with_ema {
        session.ema.shadow_store(&session.store)?
    } else {
        session.store.clone()
    };
    let trace = session.model.forward(&store, session.splits.test.sample_x(sample))?;
    std::fs::create_dir_all(out_dir)?;
    let names = session.model.vocab.names();
    let c = session.config.head.c;
    for (tag, rows, cols, values) in trace.aux_maps() {
        let mut csv = String::from("row");
        for j in 0..cols {
            csv.push_str(&format!(",c{j}"));
        }
        csv.push('\n');
        for i in 0..rows {
            // label rows get the label name; token rows an index.
            if rows == c {
                csv.push_str(&names[i].replace(',', " "));
            } else {
                csv.push_str(&format!("token{i}"));
            }
            for j in 0..cols {
                csv.push_str(&format!(",{}", values[i * cols + j]));
            }
            csv.push('\n');
        }
        let path = out_dir.join(format!("{tag}.csv"));
        std::fs::write(&path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gen_data(out_dir: &Path, config: &ConfigArgs) -> Result<(), Error> {
    let cfg = config.build()?;
    let session = Session::new(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let spec_json =
        serde_json::to_string_pretty(&session.config.dataset).expect("spec serializes");
    for (name, data) in [("train", &session.splits.train), ("test", &session.splits.test)] {
        // tensor container reusing the checkpoint wire format
        let ckpt = Checkpoint {
            config_json: spec_json.clone(),
            tensors: vec![
                NamedTensor {
                    name: "x".into(),
                    shape: vec![data.n, data.m, data.d],
                    values: data.x.clone(),
                },
                NamedTensor {
                    name: "y".into(),
                    shape: vec![data.n, data.c],
                    values: data.y.clone(),
                },
            ],
        };
        let bin_path = out_dir.join(format!("{name}.bin"));
        ckpt.save(&bin_path)?;
        let mut csv = String::from("sample");
        for name in session.model.vocab.names() {
            csv.push_str(&format!(",{}", name.replace(',', " ")));
        }
        csv.push('\n');
        for i in 0..data.n {
            csv.push_str(&i.to_string());
            for &v in data.sample_y(i) {
                csv.push_str(&format!(",{}", v as u8));
            }
            csv.push('\n');
        }
        let csv_path = out_dir.join(format!("{name}_targets.csv"));
        std::fs::write(&csv_path, csv)?;
        println!(
            "wrote {} ({} samples) and {}",
            bin_path.display(),
            data.n,
            csv_path.display()
        );
    }
    Ok(())
}
