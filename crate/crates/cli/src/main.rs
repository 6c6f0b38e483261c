use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use mra_core::checks::gradient_suite;
use mra_core::config::RunConfig;
use mra_core::cost::profile_report;
use mra_core::io::write_atomic;
use mra_core::model::{generate, Checkpoint, MraModel, Stage};
use mra_core::rng::{stream, substream};
use mra_core::synth::{load_manifest, write_manifest, Sample};
use mra_core::tensor::GradCheckConfig;
use mra_core::train::{evaluate_accuracy, metrics_csv, run_stage1, run_stage2, StageOutcome};

#[derive(Parser)]
#[command(
    name = "mra",
    version,
    about = "Dual-resolution visual encoder training and analysis"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(
        short,
        long,
        global = true,
        default_value = "crates/cli/configs/default.toml"
    )]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage and write its checkpoint and metrics.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint to start stage 2 from (overrides paths.stage1_checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (overrides paths.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every component at the stage-2 resolutions.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a manifest of generated training samples.
    GenData {
        /// Output path (defaults to paths.manifest, then <output_dir>/manifest.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of samples (defaults to data.train_samples).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Write the analytical cost table as CSV.
    Profile {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode answers with a checkpoint for manifest or held-out samples.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MRA_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    let mut line = String::new();
    for cause in e.chain().map(|c| c.to_string()) {
        // Some errors repeat their source in their own message.
        if line.ends_with(&cause) {
            continue;
        }
        if !line.is_empty() {
            line.push_str(": ");
        }
        line.push_str(&cause);
    }
    line
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(&cli.config)
        .with_context(|| format!("loading {}", cli.config.display()))?;
    match cli.command {
        Command::Train {
            stage,
            checkpoint,
            out,
        } => train(&cfg, stage, checkpoint, out),
        Command::Gradcheck { seed } => gradcheck(&cfg, seed),
        Command::GenData { out, count } => gen_data(&cfg, out, count),
        Command::Profile { out } => profile(&cfg, out),
        Command::Generate {
            checkpoint,
            manifest,
            limit,
        } => decode(&cfg, &checkpoint, manifest, limit),
    }
}

fn save_outcome(dir: &Path, outcome: &StageOutcome) -> Result<PathBuf> {
    let stage = outcome.checkpoint.meta.stage;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ckpt = dir.join(format!("stage{stage}.ckpt"));
    outcome.checkpoint.save(&ckpt)?;
    let metrics = dir.join(format!("stage{stage}_metrics.csv"));
    write_atomic(&metrics, metrics_csv(&outcome.metrics).as_bytes())?;
    info!("wrote {} and {}", ckpt.display(), metrics.display());
    Ok(ckpt)
}

fn train(
    cfg: &RunConfig,
    stage: u8,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.paths.output_dir.clone());
    let stage = if stage == 1 { Stage::One } else { Stage::Two };
    let stage_cfg = cfg.stage_config(stage);
    let outcome = match stage {
        Stage::One => {
            let model = MraModel::init(
                cfg.model_config(Stage::One),
                &mut substream(cfg.seed, stream::INIT),
            )?;
            let data = cfg.train_set()?;
            info!(
                "stage 1: {} samples, {} steps",
                data.len(),
                stage_cfg.steps_for(data.len())
            );
            run_stage1(model, &stage_cfg, &data, cfg.seed)?
        }
        Stage::Two => {
            let Some(path) = checkpoint.or_else(|| cfg.paths.stage1_checkpoint.clone()) else {
                bail!("stage 2 needs a stage-1 checkpoint: pass --checkpoint or set paths.stage1_checkpoint");
            };
            let ckpt = Checkpoint::load(&path)
                .with_context(|| format!("reading stage-1 checkpoint {}", path.display()))?;
            let data = cfg.train_set()?;
            info!(
                "stage 2: {} samples, {} steps",
                data.len(),
                stage_cfg.steps_for(data.len())
            );
            run_stage2(&ckpt, &stage_cfg, &data, cfg.seed)?
        }
    };
    if let Some((first, last)) = outcome.loss_drop(10.min(outcome.metrics.len())) {
        info!("mean loss {first:.4} over the first steps, {last:.4} over the last");
    }
    save_outcome(&dir, &outcome)?;
    let eval = cfg.eval_set()?;
    let acc = evaluate_accuracy(&outcome.model(), stage, &eval, stage_cfg.parallel)?;
    println!(
        "stage {stage}: held-out accuracy {:.3} on {} samples",
        acc,
        eval.len()
    );
    Ok(())
}

fn gradcheck(cfg: &RunConfig, seed: u64) -> Result<()> {
    let model = cfg.model_config(Stage::Two);
    let check = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let suites = gradient_suite(&model, seed, &check)?;
    println!(
        "{:<14} {:>7} {:>9} {:>12}  result",
        "suite", "params", "elements", "max_rel_err"
    );
    let mut failed = 0;
    for s in &suites {
        let ok = s.passed();
        failed += usize::from(!ok);
        println!(
            "{:<14} {:>7} {:>9} {:>12.3e}  {}",
            s.suite,
            s.reports.len(),
            s.checked(),
            s.max_rel_err(),
            if ok { "PASS" } else { "FAIL" }
        );
        for r in s.reports.iter().filter(|r| !r.passed) {
            println!("  {} max_rel_err {:.3e}", r.param, r.max_rel_err);
        }
    }
    if failed > 0 {
        bail!(
            "{failed} gradient suite(s) failed at tolerance {}",
            check.tol
        );
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: Option<PathBuf>, count: Option<usize>) -> Result<()> {
    let path = out
        .or_else(|| cfg.paths.manifest.clone())
        .unwrap_or_else(|| cfg.paths.output_dir.join("manifest.jsonl"));
    let mut plain = cfg.clone();
    plain.paths.manifest = None;
    if let Some(n) = count {
        plain.data.train_samples = n;
    }
    let samples = plain.train_set()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    write_manifest(
        &path,
        &cfg.data.task,
        cfg.model.decoder.vocab_size,
        &samples,
    )?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn profile(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let path = out.unwrap_or_else(|| cfg.paths.output_dir.join("profile.csv"));
    let csv = profile_report(&cfg.profile_entries()?)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    write_atomic(&path, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn decode(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: Option<PathBuf>,
    limit: usize,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let stage = ckpt.meta.stage;
    let model = MraModel {
        config: ckpt.meta.config,
        params: ckpt.params,
    };
    let (task, samples): (_, Vec<Sample>) = match manifest.or_else(|| cfg.paths.manifest.clone()) {
        Some(path) => {
            let (task, vocab, samples) = load_manifest(&path)?;
            if vocab > model.config.decoder.vocab_size {
                bail!(
                    "manifest {} needs a vocabulary of {vocab} but the checkpoint has {}",
                    path.display(),
                    model.config.decoder.vocab_size
                );
            }
            (task, samples)
        }
        None => (cfg.data.task.clone(), cfg.eval_set()?),
    };
    let vocab = task.vocab();
    let word = |t: usize| {
        if t == model.config.decoder.end_token() {
            "<end>".to_string()
        } else {
            vocab.word(t)
        }
    };
    let (low, high) = (model.config.low.resolution, model.config.high.resolution);
    let shown = &samples[..limit.min(samples.len())];
    for s in shown {
        let images = s.render(low, high)?;
        let answer = generate(
            &model.config,
            &model.params,
            &images,
            &s.tokens.instruction,
            stage,
            s.tokens.answer.len() + 1,
        )?;
        let text: Vec<String> = answer.iter().map(|&t| word(t)).collect();
        println!(
            "{} -> {} (expected {})",
            s.instruction_text(&vocab),
            text.join(" "),
            s.answer_text(&vocab)
        );
    }
    let acc = evaluate_accuracy(&model, stage, shown, true)?;
    println!("accuracy {:.3} on {} samples", acc, shown.len());
    Ok(())
}
