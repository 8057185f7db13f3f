//! Command-line front end. Exit status: 0 on success, 1 on usage errors,
//! 2 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cbfrrt::cbf::{Checkpoint, Variant};
use cbfrrt::planner::SteerKind;
use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{to_json, write};
use crate::evaluate::Setting;
use crate::harness::{load_methods, metrics_csv, run_bench, run_one, write_bench, Method};
use crate::pipeline::{
    eval_checkpoint, eval_controllers, load_runs, make_dataset, make_problems, read_dataset, replay, train_variant, Config,
};
use crate::problems::{read_problems, write_problems, Difficulty};

#[derive(Debug, Parser)]
#[command(name = "cbfrrt", version, about = "Learned-CBF steering for RRT on planar arms")]
pub struct Cli {
    /// Base seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON document overriding defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    State,
    Cloud,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::State => Variant::State,
            VariantArg::Cloud => Variant::Cloud,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SettingArg {
    StaticFull,
    DynamicPartial,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::StaticFull => Setting::StaticFull,
            SettingArg::DynamicPartial => Setting::DynamicPartial,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate planning problems (tagged easy/hard unless disabled).
    GenProblems {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Collect a labeled training dataset.
    CollectData,
    /// Train a barrier network and write a checkpoint.
    Train {
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Dataset file; collected in-process if omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Constraint satisfaction rates of a checkpoint on fresh data.
    EvalCbf {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Plan one problem with one method.
    Plan {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        id: usize,
        /// rrt, cbf-inc-rrt, cbf-filter-lqr-rrt, cbf-filter-lqr-only-rrt or hcbf-rrt.
        #[arg(long)]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every configured method on every problem and seed.
    Bench {
        #[arg(long)]
        problems: PathBuf,
        /// Checkpoint for learned methods that do not name one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only problems with this tag.
        #[arg(long, value_enum)]
        difficulty: Option<DifficultyArg>,
    },
    /// Roll the filtered controller out directly from start to goal.
    EvalController {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "static-full")]
        setting: SettingArg,
        /// Skip the handcrafted baseline.
        #[arg(long)]
        no_baseline: bool,
    },
    /// Re-validate stored plans against their problems.
    Replay {
        #[arg(long)]
        problems: PathBuf,
        /// runs.jsonl from `bench` or plan.json from `plan`.
        #[arg(long)]
        runs: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DifficultyArg {
    Easy,
    Hard,
}

fn parse_method(name: &str, planner_nodes: usize) -> anyhow::Result<SteerKind> {
    Ok(match name {
        "rrt" => SteerKind::StraightLine,
        "cbf-inc-rrt" => SteerKind::CbfInc,
        "cbf-filter-lqr-rrt" => SteerKind::CbfFilterLqr { activation_after: planner_nodes / 2 },
        "cbf-filter-lqr-only-rrt" => SteerKind::CbfFilterLqr { activation_after: 0 },
        "hcbf-rrt" => SteerKind::HandCbf { margin: 0.1 },
        other => bail!("unknown method {other}"),
    })
}

fn out_file(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

/// Runs a parsed command and returns a one-line summary.
pub fn execute(cli: &Cli) -> anyhow::Result<String> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let (seed, out) = (cli.seed, cli.out.as_path());
    match &cli.command {
        Command::GenProblems { count } => {
            let problems = make_problems(&cfg, seed, count.unwrap_or(cfg.problem_count))?;
            let path = out_file(out, "problems.json");
            write_problems(&path, &problems)?;
            let hard = problems.iter().filter(|p| p.difficulty == Difficulty::Hard).count();
            Ok(format!("wrote {} problems ({hard} hard) to {}", problems.len(), path.display()))
        }
        Command::CollectData => {
            let data = make_dataset(&cfg, seed)?;
            let path = out_file(out, "dataset.jsonl");
            let mut buf = Vec::new();
            data.write_jsonl(&mut buf)?;
            write(&path, buf)?;
            Ok(format!("wrote {} samples, labels {:?}, to {}", data.len(), data.label_histogram(), path.display()))
        }
        Command::Train { variant, data } => {
            let variant = Variant::from(*variant);
            let data = match data {
                Some(p) => read_dataset(p)?,
                None => make_dataset(&cfg, seed)?,
            };
            let (ckpt, report) = train_variant(&cfg, seed, variant, &data)?;
            let tag = match variant {
                Variant::State => "state",
                Variant::Cloud => "cloud",
            };
            let path = out_file(out, &format!("checkpoint_{tag}.json"));
            write(&path, ckpt.to_json()?)?;
            write(&out_file(out, &format!("train_report_{tag}.json")), to_json(&report)?)?;
            let v = report.final_validation().context("no epochs were run")?;
            Ok(format!(
                "wrote {}; validation rates safe {:.4} unsafe {:.4} derivative {:.4}",
                path.display(),
                v.safe_rate,
                v.unsafe_rate,
                v.deriv_rate
            ))
        }
        Command::EvalCbf { checkpoint } => {
            let report = eval_checkpoint(&cfg, seed, &Checkpoint::load(checkpoint)?)?;
            write(&out_file(out, "cbf_eval.json"), to_json(&report)?)?;
            Ok(format!(
                "rates safe {:.4} unsafe {:.4} derivative {:.4} over {} samples",
                report.safe_rate, report.unsafe_rate, report.deriv_rate, report.n_total
            ))
        }
        Command::Plan { problems, id, method, checkpoint } => {
            let problems = read_problems(problems)?;
            let problem = problems.iter().find(|p| p.id == *id).with_context(|| format!("no problem with id {id}"))?;
            let method = Method { name: method.clone(), steer: parse_method(method, cfg.bench.planner.max_nodes)?, checkpoint: checkpoint.clone() };
            let nets = load_methods(std::slice::from_ref(&method))?;
            let run = run_one(&cfg.arm, problem, &method, nets[0].as_ref(), &cfg.bench, seed, 0)?;
            let path = out_file(out, "plan.json");
            write(&path, to_json(&run)?)?;
            Ok(format!("{:?} after {} steer attempts; wrote {}", run.result.status, run.result.explored_nodes, path.display()))
        }
        Command::Bench { problems, checkpoint, difficulty } => {
            let mut problems = read_problems(problems)?;
            if let Some(d) = difficulty {
                let want = match d {
                    DifficultyArg::Easy => Difficulty::Easy,
                    DifficultyArg::Hard => Difficulty::Hard,
                };
                problems.retain(|p| p.difficulty == want);
            }
            let mut settings = cfg.bench.clone();
            for m in &mut settings.methods {
                if m.steer.needs_network() && m.checkpoint.is_none() {
                    m.checkpoint = checkpoint.clone();
                }
            }
            let output = run_bench(&cfg.arm, &problems, &settings, seed)?;
            write_bench(out, &output, settings.planner.max_nodes)?;
            Ok(metrics_csv(&output.rows).trim_end().to_string())
        }
        Command::EvalController { problems, checkpoint, setting, no_baseline } => {
            let problems = read_problems(problems)?;
            if checkpoint.is_none() && *no_baseline {
                bail!("nothing to evaluate: give --checkpoint or drop --no-baseline");
            }
            let learned = checkpoint.as_deref().map(|p| Checkpoint::load(p).and_then(|c| c.to_learned())).transpose()?;
            let results = eval_controllers(&cfg, seed, &problems, learned.as_ref(), Setting::from(*setting), !no_baseline)?;
            let rows: Vec<_> = results.iter().map(|(row, _)| row.clone()).collect();
            write(&out_file(out, "controller_metrics.json"), to_json(&rows)?)?;
            let mut lines = String::new();
            for (row, runs) in &results {
                let text: String = runs.iter().map(|r| serde_json::to_string(&(&row.method, r)).map(|s| s + "\n")).collect::<Result<_, _>>()?;
                lines += &text;
            }
            write(&out_file(out, "controller_runs.jsonl"), lines)?;
            Ok(rows
                .iter()
                .map(|r| format!("{}: goal {:.3} safety {:.4} makespan {:?}", r.method, r.goal_reaching_rate, r.safety_rate, r.makespan_mean))
                .collect::<Vec<_>>()
                .join("\n"))
        }
        Command::Replay { problems, runs } => {
            let problems = read_problems(problems)?;
            let runs = load_runs(runs)?;
            let report = replay(&cfg.arm, &problems, &runs, &cfg.bench.planner)?;
            if !report.failures.is_empty() {
                bail!("{} of {} solved paths failed validation: {}", report.failures.len(), report.solved, to_json(&report.failures)?);
            }
            Ok(format!("{} runs, {} solved paths, all valid", report.runs, report.solved))
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
