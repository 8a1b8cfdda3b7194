//! `icl-assoc`: run in-context associative learning experiments from a
//! TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icl_assoc_core::backend::BackendOptions;
use icl_assoc_core::pipeline::{export_plots, verify_run, ExperimentConfig, Pipeline, PlotKind, RunReport, Stage};
use icl_assoc_core::{Error, Result};
use icl_assoc_llama::ModelBackendFactory;
use serde_json::json;

#[derive(Parser)]
#[command(name = "icl-assoc", version, about = "In-context associative learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage in order, reusing up-to-date stages.
    Run(Common),
    /// Find stimulus pairs for each similarity group.
    SearchStimuli(Common),
    /// Score interference for the stimuli and the competitor pool.
    Interference(Common),
    /// Fill the similarity by interference grid.
    SampleGrid(Common),
    /// Present each pair repeatedly and record accuracy and ΔS.
    RunTrials(Common),
    /// Segment the accuracy curve into learning phases.
    Segment(Common),
    /// Per-group, per-phase tests with BY correction.
    Analyze(Common),
    /// Plot data tables and figures.
    ExportPlots {
        #[command(flatten)]
        common: Common,
        /// Comma-separated plot kinds; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<PlotKind>>,
    },
    /// Recompute similarities, ΔS identities and rejections from the exports.
    Verify(Common),
    /// Print the config with every default filled in.
    ShowConfig(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Run(c)
            | Command::SearchStimuli(c)
            | Command::Interference(c)
            | Command::SampleGrid(c)
            | Command::RunTrials(c)
            | Command::Segment(c)
            | Command::Analyze(c)
            | Command::Verify(c)
            | Command::ShowConfig(c) => c,
            Command::ExportPlots { common, .. } => common,
        }
    }

    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::SearchStimuli(_) => Stage::Search,
            Command::Interference(_) => Stage::Interference,
            Command::SampleGrid(_) => Stage::SampleGrid,
            Command::RunTrials(_) => Stage::Trials,
            Command::Segment(_) => Stage::Segment,
            Command::Analyze(_) => Stage::Analyze,
            Command::ExportPlots { kinds: None, .. } => Stage::Plots,
            _ => return None,
        })
    }
}

/// Hardware hints from the environment.
fn backend_options() -> Result<(BackendOptions, Option<usize>)> {
    let options = BackendOptions {
        device: std::env::var("ICL_ASSOC_DEVICE").ok().filter(|d| !d.is_empty()),
        ..BackendOptions::default()
    };
    let cap = match std::env::var("ICL_ASSOC_MEMORY_CAP") {
        Ok(v) if !v.is_empty() => Some(
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("ICL_ASSOC_MEMORY_CAP must be a token count, got `{v}`")))?,
        ),
        _ => None,
    };
    Ok((options, cap))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.output {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn summary(report: &RunReport) -> serde_json::Value {
    let names = |s: &[Stage]| s.iter().map(|st| st.as_str()).collect::<Vec<_>>();
    json!({
        "executed": names(&report.executed),
        "reused": names(&report.reused),
        "complete": report.manifest.complete,
    })
}

fn execute(command: Command) -> Result<()> {
    let mut config = load_config(command.common())?;
    if let Command::ShowConfig(_) = command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let (options, cap) = backend_options()?;
    if cap.is_some() {
        config.memory_cap = cap;
    }
    let factory = ModelBackendFactory::default();
    let mut pipeline = Pipeline::new(config.clone(), &factory, options)?;

    match command {
        Command::Run(_) => {
            let report = pipeline.run()?;
            println!("{}", summary(&report));
        }
        Command::ExportPlots { kinds: Some(kinds), .. } => {
            let written = export_plots(&config.output_dir, &kinds)?;
            println!("{}", json!({ "written": written }));
        }
        Command::Verify(_) => {
            let report = verify_run(&config, pipeline.backend()?)?;
            println!("{}", serde_json::to_string(&report)?);
            if !report.passed() {
                return Err(Error::Verification(format!(
                    "{} discrepancies; see verify_report.json",
                    report.discrepancies.len()
                )));
            }
        }
        other => {
            let stage = other.stage().expect("stage subcommand");
            let report = pipeline.run_stage(stage)?;
            println!("{}", summary(&report));
        }
    }
    Ok(())
}

fn error_record(e: &Error) -> serde_json::Value {
    match e {
        Error::Stage { stage, source } => json!({
            "kind": e.kind(),
            "message": source.to_string(),
            "stage": stage,
        }),
        _ => json!({ "kind": e.kind(), "message": e.to_string() }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
