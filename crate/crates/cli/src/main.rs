//! `aspectedit`: plan, group, edit and evaluate multi-aspect prompt edits.
//!
//! Every invocation prints exactly one JSON document on stdout. Exit codes:
//! 0 success, 1 usage or validation failure, 2 backend failure.

mod commands;
mod io;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use aspectedit_core::Error;

#[derive(Debug, Parser)]
#[command(name = "aspectedit", version, about = "Multi-aspect text-driven latent editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Infer and validate the edit plan of a prompt pair.
    Plan(PlanArgs),
    /// Type and group the edits of a plan from attention maps.
    Group(GroupArgs),
    /// Run the multi-branch editor and emit the edited latent.
    Edit(EditArgs),
    /// Score an edited image against its source.
    Eval(EvalArgs),
    /// Run the two-aspect mixture-world scenario and check its bounds.
    Demo(DemoArgs),
}

#[derive(Debug, Clone, Args)]
struct PlanInput {
    #[arg(long = "source-prompt", value_name = "S")]
    source_prompt: Option<String>,
    #[arg(long = "target-prompt", value_name = "S")]
    target_prompt: Option<String>,
    /// Annotation record (JSON) with prompts, edit actions and aspect mapping.
    #[arg(long, value_name = "PATH")]
    annotation: Option<std::path::PathBuf>,
    /// Plan document written by `aspectedit plan --out`.
    #[arg(long, value_name = "PATH")]
    plan: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct GroupingFlags {
    /// Overlap threshold for rigid typing and grouping [default: 0.9].
    #[arg(long, value_name = "F")]
    lambda: Option<f64>,
    /// Area ratio threshold for global typing [default: 0.8].
    #[arg(long, value_name = "F")]
    beta: Option<f64>,
    /// Attention binarization threshold [default: 0.5].
    #[arg(long = "bin-threshold", value_name = "F")]
    bin_threshold: Option<f64>,
    /// Directory of `*.map` files (source and target token maps).
    #[arg(long, value_name = "DIR")]
    maps: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Gmm,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeFlag {
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Args)]
struct BackendFlags {
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// `host:port`, `tcp://host:port` or `exec:COMMAND ARGS`.
    #[arg(long, value_name = "ADDR")]
    endpoint: Option<String>,
    /// Mixture world (JSON) for the gmm backend; defaults to the demo world.
    #[arg(long, value_name = "PATH")]
    world: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct SamplingFlags {
    /// Sampling steps [default: 15].
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Classifier-free guidance scale [default: 4.0].
    #[arg(long, value_name = "F")]
    guidance: Option<f64>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeFlag>,
    /// TOML run configuration; explicit flags win over it.
    #[arg(long, value_name = "PATH")]
    config: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    input: PlanInput,
    /// Also write the plan document here.
    #[arg(long, value_name = "PATH")]
    out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
struct GroupArgs {
    #[command(flatten)]
    input: PlanInput,
    #[command(flatten)]
    grouping: GroupingFlags,
    #[command(flatten)]
    backend: BackendFlags,
    #[arg(long, value_name = "PATH")]
    config: Option<std::path::PathBuf>,
    #[arg(long, value_name = "PATH")]
    out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[command(flatten)]
    input: PlanInput,
    #[command(flatten)]
    grouping: GroupingFlags,
    #[command(flatten)]
    backend: BackendFlags,
    #[command(flatten)]
    sampling: SamplingFlags,
    /// Source image as a JSON tensor `{"shape": [C, H, W], "data": [...]}`.
    #[arg(long, value_name = "PATH")]
    image: Option<std::path::PathBuf>,
    /// Write the per-branch, per-step trace (JSON lines) here.
    #[arg(long, value_name = "PATH")]
    out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    input: PlanInput,
    /// Source image as a JSON tensor.
    #[arg(long, value_name = "PATH")]
    image: Option<std::path::PathBuf>,
    /// Edited image as a JSON tensor.
    #[arg(long, value_name = "PATH")]
    edited: Option<std::path::PathBuf>,
    /// Comma-separated subset of psnr,mse,ssim,dclip,aspacc.
    #[arg(long, value_name = "LIST")]
    metrics: Option<String>,
    /// Token maps whose union is excluded from the pixel metrics.
    #[arg(long, value_name = "DIR")]
    maps: Option<std::path::PathBuf>,
    #[arg(long = "bin-threshold", value_name = "F")]
    bin_threshold: Option<f64>,
    #[arg(long, value_name = "PATH")]
    out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[command(flatten)]
    sampling: SamplingFlags,
    #[arg(long, value_name = "PATH")]
    out: Option<std::path::PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = if e.is_backend() { (2, "backend") } else { (1, "validation") };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn emit(doc: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(doc).expect("JSON values always serialize"));
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("aspectedit: {}", f.message);
    emit(&json!({"error": {"kind": f.kind, "message": f.message, "exit_code": f.code}}));
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(Failure::usage(e.render().to_string().trim().to_string())),
    };
    let result = match cli.command {
        Command::Plan(a) => commands::plan(a),
        Command::Group(a) => commands::group(a),
        Command::Edit(a) => commands::edit(a),
        Command::Eval(a) => commands::eval(a),
        Command::Demo(a) => commands::demo(a),
    };
    match result {
        Ok(outcome) => {
            emit(&outcome.doc);
            ExitCode::from(outcome.code)
        }
        Err(f) => fail(f),
    }
}
