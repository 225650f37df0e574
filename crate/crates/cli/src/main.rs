//! Command-line entry point binding the library into reproducible
//! workflows: style transfer on image files, dataset generation,
//! two-stage training, evaluation, the stage-1 ablation table, and the
//! gradient-check battery.
//!
//! Exit codes: 0 success, 2 configuration/validation problems (bad flags,
//! unreadable inputs), 1 runtime failures.

use clap::{Args, Parser, Subcommand};
use fdaseg::eval::{ablation, ablation_csv, evaluate, AblationRow};
use fdaseg::gfda::{spectral_transfer, spectral_transfer_rect};
use fdaseg::gradcheck::run_gradcheck;
use fdaseg::netcore::checkpoint::extract_state;
use fdaseg::netcore::{load_checkpoint, save_checkpoint};
use fdaseg::synthdata::{
    generate, load_manifest, read_image, write_dataset, write_image, DatasetSplit, GenParams,
    LabeledAmount,
};
use fdaseg::trainer::{
    finetune_with_checkpoints, history_csv, pretrain_with_checkpoints, train_source_only,
    RunReport, TrainConfig,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fdaseg", version, about = "Fourier-domain adaptive segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest written by `gen`.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (env FDASEG_OUT_DIR overrides).
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch count for this stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Use the full-length 300/500 epoch schedule.
    #[arg(long)]
    full_schedule: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Transfer the style of one image onto another through the frequency
    /// domain.
    Gfda {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long, default_value_t = fdaseg::gfda::DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
        /// Use the hard rectangular mask baseline (sigma is read as the
        /// band fraction beta).
        #[arg(long)]
        rect_baseline: bool,
        /// Accepted for interface uniformity; this command draws nothing.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the synthetic two-domain benchmark and write it with its
    /// manifest.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        n_source: usize,
        #[arg(long, default_value_t = 40)]
        n_target: usize,
        #[arg(long, default_value_t = 16)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Fraction of target training samples that keep labels.
        #[arg(long, default_value_t = 0.5, conflicts_with_all = ["labeled_count", "uda"])]
        labeled_fraction: f64,
        /// Absolute number of labeled target samples.
        #[arg(long, conflicts_with = "uda")]
        labeled_count: Option<usize>,
        /// Withhold every target label (unsupervised adaptation layout).
        #[arg(long)]
        uda: bool,
        #[arg(long, default_value = "out/dataset")]
        out_dir: PathBuf,
    },
    /// Stage 1: contrastive pretraining. Writes checkpoint + loss CSV.
    Pretrain(TrainArgs),
    /// Stage 2: fine-tune a pretrained encoder. Writes checkpoint, loss
    /// CSV, and a run report with test metrics.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        /// Pretraining checkpoint providing the encoder.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Train the no-adaptation baseline instead (fresh encoder,
        /// source labels only); the checkpoint is ignored.
        #[arg(long)]
        source_only: bool,
    },
    /// Segment a test set with a fine-tuned checkpoint and report metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run stage-1 ablation rows over common seeds and emit the CSV table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rows to run, e.g. "a,e".
        #[arg(long, default_value = "a,b,c,d,e")]
        rows: String,
        /// Common seeds, e.g. "1,2,3".
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value_t = 40)]
        n_source: usize,
        #[arg(long, default_value_t = 40)]
        n_target: usize,
        #[arg(long, default_value_t = 16)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Check every loss gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

/// Input-loading and validation failures exit 2.
fn input<T>(r: fdaseg::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::validation(e.to_string()))
}

/// Execution failures exit 1.
fn run_phase<T>(r: fdaseg::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::runtime(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn out_dir_override(requested: &Path) -> PathBuf {
    match std::env::var_os("FDASEG_OUT_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => requested.to_path_buf(),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig, CliError> {
    let cfg: TrainConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::validation(format!("config {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()
        .map_err(|e| CliError::validation(e.to_string()))?;
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut TrainConfig, args: &TrainArgs, stage1: bool) {
    if args.full_schedule {
        *cfg = cfg.clone().with_full_schedule();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        if stage1 {
            cfg.pretrain_epochs = epochs;
        } else {
            cfg.finetune_epochs = epochs;
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn echo_config(dir: &Path, name: &str, cfg: &TrainConfig) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| CliError::runtime(format!("config echo: {e}")))?;
    write_text(&dir.join(name), &json)
}

fn load_split(path: &Path) -> Result<DatasetSplit, CliError> {
    load_manifest(path).map_err(|e| CliError::validation(e.to_string()))
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Gfda {
            src,
            tgt,
            sigma,
            out,
            rect_baseline,
            seed: _,
        } => {
            let src_img = input(read_image(&src))?;
            let tgt_img = input(read_image(&tgt))?;
            let result = if rect_baseline {
                run_phase(spectral_transfer_rect(&src_img, &tgt_img, sigma))?
            } else {
                run_phase(spectral_transfer(&src_img, &tgt_img, sigma))?
            };
            run_phase(write_image(&out, &result))?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::Gen {
            seed,
            n_source,
            n_target,
            n_test,
            size,
            labeled_fraction,
            labeled_count,
            uda,
            out_dir,
        } => {
            let out_dir = out_dir_override(&out_dir);
            let params = GenParams {
                seed,
                n_source,
                n_target,
                n_test,
                size,
                ..GenParams::default()
            };
            let dataset = input(generate(&params))?;
            let split = if uda {
                dataset.unlabeled_split()
            } else {
                let amount = match labeled_count {
                    Some(c) => LabeledAmount::Count(c),
                    None => LabeledAmount::Fraction(labeled_fraction),
                };
                input(dataset.with_labeled(amount, seed))?
            };
            ensure_dir(&out_dir)?;
            run_phase(write_dataset(&out_dir, &split).map(|_| ()))?;
            println!("wrote {}", out_dir.join("manifest.json").display());
            Ok(())
        }

        Command::Pretrain(args) => {
            let mut cfg = load_config(&args.config)?;
            apply_train_flags(&mut cfg, &args, true);
            let split = load_split(&args.manifest)?;
            let dataset = split_as_dataset(&split);
            let out_dir = out_dir_override(&args.out_dir);
            ensure_dir(&out_dir)?;
            echo_config(&out_dir, "pretrain_config.json", &cfg)?;
            let ckpt_path = out_dir.join("pretrain.ckpt");
            let outcome =
                run_phase(pretrain_with_checkpoints(&cfg, &dataset, Some(&ckpt_path)))?;
            write_text(
                &out_dir.join("pretrain_history.csv"),
                &history_csv(&outcome.history),
            )?;
            println!("wrote {}", ckpt_path.display());
            Ok(())
        }

        Command::Finetune {
            train: args,
            checkpoint,
            source_only,
        } => {
            let mut cfg = load_config(&args.config)?;
            apply_train_flags(&mut cfg, &args, false);
            let split = load_split(&args.manifest)?;
            let out_dir = out_dir_override(&args.out_dir);
            ensure_dir(&out_dir)?;
            echo_config(&out_dir, "finetune_config.json", &cfg)?;
            let ckpt_path = out_dir.join("finetune.ckpt");
            let outcome = if source_only {
                let o = run_phase(train_source_only(&cfg, &split))?;
                let mut ckpt = fdaseg::netcore::Checkpoint::default();
                for (name, t) in o.student.iter() {
                    ckpt.insert(format!("model.{name}"), t.clone());
                }
                ckpt.insert_scalar("meta.kind", 2.0);
                run_phase(save_checkpoint(&ckpt_path, &ckpt))?;
                o
            } else {
                let pre_ckpt = load_checkpoint(&checkpoint)
                    .map_err(|e| CliError::validation(e.to_string()))?;
                let pretrained = input(extract_state(&pre_ckpt, "model"))?;
                run_phase(finetune_with_checkpoints(
                    &cfg,
                    &pretrained,
                    &split,
                    Some(&ckpt_path),
                ))?
            };
            write_text(
                &out_dir.join("finetune_history.csv"),
                &history_csv(&outcome.history),
            )?;
            let report = RunReport {
                config: cfg.clone(),
                pretrain: Vec::new(),
                finetune: outcome.history.clone(),
                eval_source: Some(run_phase(evaluate(
                    &outcome.student,
                    &cfg.net,
                    &split.test_source,
                ))?),
                eval_target: Some(run_phase(evaluate(
                    &outcome.student,
                    &cfg.net,
                    &split.test_target,
                ))?),
                wall_clock_secs: None,
            };
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::runtime(format!("report: {e}")))?;
            write_text(&out_dir.join("run_report.json"), &json)?;
            println!("wrote {}", ckpt_path.display());
            Ok(())
        }

        Command::Eval {
            checkpoint,
            manifest,
            out,
            config,
            seed: _,
        } => {
            let cfg = load_config(&config)?;
            let split = load_split(&manifest)?;
            let ckpt =
                load_checkpoint(&checkpoint).map_err(|e| CliError::validation(e.to_string()))?;
            let student = input(extract_state(&ckpt, "model"))?;
            let target = run_phase(evaluate(&student, &cfg.net, &split.test_target))?;
            let source = run_phase(evaluate(&student, &cfg.net, &split.test_source))?;
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "test_target": target,
                "test_source": source,
            }))
            .map_err(|e| CliError::runtime(format!("report: {e}")))?;
            match out {
                Some(path) => {
                    write_text(&path, &json)?;
                    println!("wrote {}", path.display());
                }
                None => println!("{json}"),
            }
            Ok(())
        }

        Command::Ablate {
            config,
            rows,
            seeds,
            n_source,
            n_target,
            n_test,
            size,
            out_dir,
        } => {
            let cfg = load_config(&config)?;
            let rows = parse_rows(&rows)?;
            let seeds = parse_seeds(&seeds)?;
            let gen = GenParams {
                n_source,
                n_target,
                n_test,
                size,
                ..GenParams::default()
            };
            let out_dir = out_dir_override(&out_dir);
            ensure_dir(&out_dir)?;
            let results = run_phase(ablation(&cfg, &gen, &rows, &seeds))?;
            let csv = ablation_csv(&results);
            write_text(&out_dir.join("ablation.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }

        Command::Gradcheck { seed, h, tol } => {
            if h <= 0.0 || tol <= 0.0 {
                return Err(CliError::validation("h and tol must be positive"));
            }
            let checks = run_phase(run_gradcheck(seed, h, tol))?;
            let mut all_pass = true;
            for c in &checks {
                println!(
                    "{} {:10} max_rel_err={:.3e} over {} params",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel_err,
                    c.checked_params
                );
                all_pass &= c.pass;
            }
            if all_pass {
                Ok(())
            } else {
                Err(CliError::runtime("gradient check failed"))
            }
        }
    }
}

/// Reassemble the training pools for stage 1 from a split manifest.
fn split_as_dataset(split: &DatasetSplit) -> fdaseg::synthdata::Dataset {
    fdaseg::synthdata::Dataset {
        source: split.source.clone(),
        target: split.t1.iter().chain(&split.t2).cloned().collect(),
        test_source: split.test_source.clone(),
        test_target: split.test_target.clone(),
        params: split.params.clone(),
    }
}

fn parse_rows(text: &str) -> Result<Vec<AblationRow>, CliError> {
    text.split(',')
        .map(|t| match t.trim() {
            "a" => Ok(AblationRow::A),
            "b" => Ok(AblationRow::B),
            "c" => Ok(AblationRow::C),
            "d" => Ok(AblationRow::D),
            "e" => Ok(AblationRow::E),
            other => Err(CliError::validation(format!("unknown ablation row {other}"))),
        })
        .collect()
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|e| CliError::validation(format!("bad seed {t}: {e}")))
        })
        .collect()
}
