//! `lgvq` — train, evaluate, and inspect language-guided codebook models.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lgvq::checkpoint;
use lgvq::config::Config;
use lgvq::diag::{dump_codebook_images, write_diagnostics};
use lgvq::eval::Evaluator;
use lgvq::train::Trainer;

#[derive(Parser)]
#[command(name = "lgvq", version, about = "Language-guided codebook learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (fresh, or resumed from a checkpoint).
    Train(TrainArgs),
    /// Evaluate a checkpoint: PSNR, usage, recall, retrieval, similarity gap.
    Eval(CheckpointArgs),
    /// Emit word/code similarity matrices and the usage histogram.
    Diagnose(CheckpointArgs),
    /// Decode every codebook entry to an image plus a tiled overview.
    DumpCodebook(CheckpointArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of key=value lines; omitted keys use their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable, later wins).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for the metrics log, resolved config, checkpoint.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for --set manifest=PATH.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Resume from this checkpoint instead of initializing fresh.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Trained checkpoint to load.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override one config key (repeatable, later wins).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate against this manifest instead of the training one.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Diagnose(a) => run_diagnose(a),
        Cmd::DumpCodebook(a) => run_dump_codebook(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 2 config, 3 data/checkpoint/IO, 4 divergence, 1 anything else.
fn exit_code_for(e: &anyhow::Error) -> u8 {
    if let Some(err) = e.downcast_ref::<lgvq::Error>() {
        return match err {
            lgvq::Error::Config(_) => 2,
            lgvq::Error::Divergence { .. } => 4,
            _ => 3,
        };
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    1
}

/// Sugar flags first, then --set pairs in order, so an explicit --set always
/// has the last word.
fn overrides(
    set: &[String],
    seed: Option<u64>,
    manifest: Option<&PathBuf>,
) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(s) = seed {
        out.push(("seed".to_string(), s.to_string()));
    }
    if let Some(m) = manifest {
        out.push(("manifest".to_string(), m.display().to_string()));
    }
    for item in set {
        let (k, v) = item.split_once('=').ok_or_else(|| {
            lgvq::Error::Config(vec![format!("--set {item}: expected KEY=VALUE")])
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))?;
    let ovr = overrides(&a.set, a.seed, a.manifest.as_ref())?;
    let mut trainer = match &a.checkpoint {
        Some(ck) => checkpoint::load(ck, &ovr)?,
        None => {
            let cfg = match &a.config {
                Some(p) => Config::from_file(p, &ovr)?,
                None => Config::from_sources(None, &ovr)?,
            };
            Trainer::new(cfg)?
        }
    };
    trainer.cfg.write_resolved(&a.out.join("config.resolved"))?;

    let metrics_path = a.out.join("metrics.jsonl");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let total_steps = trainer.cfg.steps;
    let outcome = trainer.run(|m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(metrics, "{line}").expect("metrics log writable");
        if m.step % 50 == 0 || m.step == total_steps {
            eprintln!("step {}/{} total {:.6}", m.step, total_steps, m.total);
        }
    });

    // written even when training diverged: the trainer has rolled back to
    // the last completed step
    let ck_path = a.out.join("checkpoint.lgvq");
    checkpoint::save(&trainer, &ck_path)?;
    outcome?;
    eprintln!(
        "trained to step {}; checkpoint {}",
        trainer.step,
        ck_path.display()
    );
    Ok(())
}

fn run_eval(a: CheckpointArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))?;
    let ovr = overrides(&a.set, a.seed, a.manifest.as_ref())?;
    let trainer = checkpoint::load(&a.checkpoint, &ovr)?;
    trainer.cfg.write_resolved(&a.out.join("config.resolved"))?;
    let report = Evaluator::new(&trainer).report(1, 1);

    let pretty = serde_json::to_string_pretty(&report)?;
    println!("{pretty}");
    std::fs::write(a.out.join("report.json"), format!("{pretty}\n"))?;

    // the same report as one record per metric
    let value = serde_json::to_value(&report)?;
    let mut lines = String::new();
    for (k, v) in value.as_object().expect("report is an object") {
        lines.push_str(&serde_json::to_string(
            &serde_json::json!({"metric": k, "value": v}),
        )?);
        lines.push('\n');
    }
    std::fs::write(a.out.join("report_metrics.jsonl"), lines)?;
    Ok(())
}

fn run_diagnose(a: CheckpointArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))?;
    let ovr = overrides(&a.set, a.seed, a.manifest.as_ref())?;
    let trainer = checkpoint::load(&a.checkpoint, &ovr)?;
    trainer.cfg.write_resolved(&a.out.join("config.resolved"))?;
    let files = write_diagnostics(&Evaluator::new(&trainer), &a.out)?;
    eprintln!(
        "wrote similarity matrices over {} words and the usage histogram:",
        files.words.len()
    );
    for p in [
        &files.word_matrix,
        &files.word_heatmap,
        &files.code_matrix,
        &files.code_heatmap,
        &files.histogram,
        &files.histogram_image,
    ] {
        eprintln!("  {}", p.display());
    }
    Ok(())
}

fn run_dump_codebook(a: CheckpointArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))?;
    let ovr = overrides(&a.set, a.seed, a.manifest.as_ref())?;
    let trainer = checkpoint::load(&a.checkpoint, &ovr)?;
    trainer.cfg.write_resolved(&a.out.join("config.resolved"))?;
    let (patches, grid) = dump_codebook_images(&trainer.models, &trainer.cfg, &a.out)?;
    eprintln!("wrote {} code images and {}", patches.len(), grid.display());
    Ok(())
}
