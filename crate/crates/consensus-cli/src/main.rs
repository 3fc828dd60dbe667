use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use consensus_cli::{builtins, config, output, report};
use consensus_cli::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "consensus-sim",
    version,
    about = "Event-triggered consensus simulator and condition checker"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario and write trace.csv, events.csv, summary.json.
    Run(ScenarioArgs),
    /// Evaluate convergence conditions only; no trajectory is computed.
    Check(ScenarioArgs),
    /// List builtin scenarios.
    List,
}

#[derive(Args)]
struct ScenarioArgs {
    /// JSON run config path.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin scenario name (overrides the config's scenario).
    #[arg(long)]
    builtin: Option<String>,
    /// Output directory (overrides the config's `outputs`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed for seeded scenario content.
    #[arg(long)]
    seed: Option<u64>,
    /// Integration step override.
    #[arg(long)]
    step: Option<f64>,
    /// Horizon override.
    #[arg(long)]
    horizon: Option<f64>,
    /// Keep every k-th sample in trace.csv.
    #[arg(long)]
    decimation: Option<usize>,
    /// Also emit a gnuplot script next to the CSVs.
    #[arg(long)]
    gnuplot: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::List => {
            for name in builtins::BUILTIN_NAMES {
                let about = builtins::describe(name).expect("every builtin has a description");
                println!("{name:<17} {about}");
            }
            0
        }
        Cmd::Run(args) => run_cmd(args, true),
        Cmd::Check(args) => run_cmd(args, false),
    };
    ExitCode::from(code)
}

fn fail(msg: &str) -> u8 {
    eprintln!("error: {msg}");
    1
}

fn run_cmd(args: ScenarioArgs, simulate: bool) -> u8 {
    let cfg = match &args.config {
        Some(path) => {
            let text = match fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => return fail(&format!("cannot read {}: {e}", path.display())),
            };
            match serde_json::from_str::<RunConfig>(&text) {
                Ok(c) => c,
                Err(e) => return fail(&format!("config parse error in {}: {e}", path.display())),
            }
        }
        None => RunConfig::default(),
    };
    let ov = Overrides {
        builtin: args.builtin,
        out: args.out,
        seed: args.seed,
        step: args.step,
        horizon: args.horizon,
        decimation: args.decimation,
        gnuplot: args.gnuplot,
    };
    let run = match config::resolve(cfg, &ov) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };

    if !simulate {
        let doc = match report::check_run(&run) {
            Ok(d) => d,
            Err(e) => return fail(&e),
        };
        let text = match output::summary_json(&doc) {
            Ok(t) => t,
            Err(e) => return fail(&format!("summary serialization: {e}")),
        };
        match &run.outputs {
            Some(dir) => {
                if let Err(e) = fs::create_dir_all(dir)
                    .and_then(|()| fs::write(dir.join("summary.json"), &text))
                {
                    return fail(&format!("cannot write summary.json: {e}"));
                }
                println!("wrote {}", dir.join("summary.json").display());
            }
            None => print!("{text}"),
        }
        return 0;
    }

    let Some(dir) = run.outputs.clone() else {
        return fail("no output directory: pass --out or set `outputs` in the config");
    };
    let outcome = match report::execute_run(&run) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    if let Err(e) = output::write_outputs(&dir, &outcome.doc, &outcome.trace, run.decimation, run.gnuplot)
    {
        return fail(&format!("cannot write outputs to {}: {e}", dir.display()));
    }

    let label = run.builtin.as_deref().unwrap_or("scenario");
    let summary = outcome.doc.summary.as_ref().expect("run summaries are always present");
    let t_min = summary
        .t_min
        .map(|t| format!("{t:.3}"))
        .unwrap_or_else(|| "none".to_string());
    let outcome_name = serde_json::to_value(outcome.doc.outcome)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    println!(
        "{label}: outcome={outcome_name} t_min={t_min} final_error={:.3e} events={} out={}",
        summary.final_consensus_error,
        summary.event_counts.iter().sum::<usize>(),
        dir.display()
    );
    u8::try_from(outcome.exit_code).unwrap_or(1)
}
