mod commands;
mod data;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "tph",
    version,
    about = "Detection post-processing, evaluation and augmentation toolkit"
)]
struct Cli {
    /// Run every stage on a single thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label statistics for a VisDrone annotation directory.
    Analyze(commands::AnalyzeArgs),
    /// Paint tiny labels gray and drop them from the annotation.
    MaskTiny(commands::MaskTinyArgs),
    /// Mosaic, mixup, affine and HSV augmentation of PPM samples.
    Augment(commands::AugmentArgs),
    /// Fuse detections from several models per image.
    Fuse(commands::FuseArgs),
    /// Print the six ms-testing views for an image size.
    TtaPlan(commands::TtaPlanArgs),
    /// Map per-view detections back to the source image and fuse them.
    TtaFuse(commands::TtaFuseArgs),
    /// COCO-style AP and AP50 per class.
    Eval(commands::EvalArgs),
    /// Confusion matrix as CSV.
    Confusion(commands::ConfusionArgs),
    /// Relabel detections with a patch classifier.
    Rescore(commands::RescoreArgs),
    /// Train the patch classifier from annotated images.
    TrainClassifier(commands::TrainArgs),
    /// Inverse-frequency class weights.
    ClassWeights(commands::ClassWeightsArgs),
    /// Finite-difference check of the encoder, CBAM and head decode.
    BlocksCheck(commands::BlocksCheckArgs),
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<tph_core::Error>() {
            return e.kind();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "format";
        }
    }
    "error"
}

fn report(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message.trim() });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line: Vec<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
                .collect();
            report("usage", &line.join(" "));
            return ExitCode::from(2);
        }
    };
    let mode = if cli.sequential {
        tph_core::ExecMode::Sequential
    } else {
        tph_core::ExecMode::default()
    };
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::MaskTiny(a) => commands::mask_tiny(a),
        Command::Augment(a) => commands::augment(a, mode),
        Command::Fuse(a) => commands::fuse(a, mode),
        Command::TtaPlan(a) => commands::tta_plan(a),
        Command::TtaFuse(a) => commands::tta_fuse(a),
        Command::Eval(a) => commands::eval(a, mode),
        Command::Confusion(a) => commands::confusion(a, mode),
        Command::Rescore(a) => commands::rescore(a, mode),
        Command::TrainClassifier(a) => commands::train_classifier(a, mode),
        Command::ClassWeights(a) => commands::class_weights(a),
        Command::BlocksCheck(a) => commands::blocks_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(error_kind(&e), &format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
