//! The experiment pipeline behind each CLI subcommand. All randomness is
//! drawn from named sub-streams of one seed.

use std::path::Path;

use cbfrrt::cbf::{
    collect_dataset, evaluate_constraints, train, CbfHyper, CbfNetwork, Checkpoint, ConstraintReport, DataConfig, Dataset, LearnedCbf,
    NetworkConfig, TrainReport, TrainSchedule, TrainingMeta, TrainingSet, Variant,
};
use cbfrrt::cbf::HandcraftedCbf;
use cbfrrt::environment::{EnvGenConfig, ObservationModel};
use cbfrrt::kinematics::ArmModel;
use cbfrrt::planner::{valid_prefix, PlanStatus, PlannerConfig};
use cbfrrt::rng::stream;
use serde::{Deserialize, Serialize};

use crate::error::{read, read_json, BenchError, Result};
use crate::evaluate::{eval_controller, learned_for_setting, ControllerEvalConfig, ControllerMetricsRow, ControllerRun, Setting};
use crate::harness::{read_runs, BenchSettings, RunRecord};
use crate::problems::{difficulty_split, gen_problems, ProblemGenConfig, ProblemSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSettings {
    pub enabled: bool,
    pub proxy_runs: usize,
    pub planner: PlannerConfig,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self { enabled: true, proxy_runs: 3, planner: PlannerConfig { timing: false, ..PlannerConfig::default() } }
    }
}

/// Every tunable default, overridable from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub arm: ArmModel,
    pub problem_count: usize,
    pub problems: ProblemGenConfig,
    pub split: SplitSettings,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub state_hyper: CbfHyper,
    pub cloud_hyper: CbfHyper,
    pub cloud_observation: ObservationModel,
    pub schedule: TrainSchedule,
    pub bench: BenchSettings,
    pub controller: ControllerEvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            arm: ArmModel::default(),
            problem_count: 400,
            problems: ProblemGenConfig::default(),
            split: SplitSettings::default(),
            // Training worlds keep the obstacle count but cover the size
            // range of the evaluation problems.
            data: DataConfig { env: EnvGenConfig { size_range: [0.05, 0.15], ..EnvGenConfig::default() }, ..DataConfig::default() },
            network: NetworkConfig::default(),
            state_hyper: CbfHyper::default(),
            cloud_hyper: CbfHyper::cloud_default(),
            cloud_observation: ObservationModel::SurfaceCloud { points: 64, seed: 0, pad_range: 1.5 },
            schedule: TrainSchedule { epochs: 20, ..TrainSchedule::default() },
            bench: BenchSettings::default(),
            controller: ControllerEvalConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn variant_setup(&self, variant: Variant) -> (ObservationModel, CbfHyper) {
        match variant {
            Variant::State => (ObservationModel::SignedDistance, self.state_hyper.clone()),
            Variant::Cloud => (self.cloud_observation.clone(), self.cloud_hyper.clone()),
        }
    }
}

pub fn make_problems(cfg: &Config, seed: u64, count: usize) -> Result<Vec<ProblemSpec>> {
    let problems = gen_problems(&cfg.arm, &cfg.problems, count, &mut stream(seed, "problem-gen"))?;
    if !cfg.split.enabled {
        return Ok(problems);
    }
    difficulty_split(&cfg.arm, &problems, cfg.split.proxy_runs, &cfg.split.planner, seed)
}

pub fn make_dataset(cfg: &Config, seed: u64) -> Result<Dataset> {
    Ok(collect_dataset(&cfg.arm, &cfg.data, &mut stream(seed, "data"))?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| BenchError::Io { path: path.into(), source })?;
    Ok(Dataset::read_jsonl(std::io::BufReader::new(file))?)
}

/// Trains one network variant and packs it as a checkpoint.
pub fn train_variant(cfg: &Config, seed: u64, variant: Variant, data: &Dataset) -> Result<(Checkpoint, TrainReport)> {
    let (model, hyper) = cfg.variant_setup(variant);
    let set = TrainingSet::build(data, &model, &hyper)?;
    let net = CbfNetwork::init(variant, &data.arm, &cfg.network, &mut stream(seed, "init"))?;
    let (net, report) = train(&set, net, &hyper, &cfg.schedule, &mut stream(seed, "training"))?;
    let meta = TrainingMeta { seed, schedule: cfg.schedule.clone(), dataset_samples: data.len() };
    let cbf = LearnedCbf { net, hyper, model };
    Ok((Checkpoint::from_learned(&cbf, Some(meta)), report))
}

/// Constraint satisfaction of a checkpoint on a freshly collected dataset.
pub fn eval_checkpoint(cfg: &Config, seed: u64, checkpoint: &Checkpoint) -> Result<ConstraintReport> {
    let cbf = checkpoint.to_learned()?;
    let data = collect_dataset(&cfg.arm, &cfg.data, &mut stream(seed, "eval-data"))?;
    let set = TrainingSet::build(&data, &cbf.model, &cbf.hyper)?;
    let all: Vec<usize> = (0..set.len()).collect();
    Ok(evaluate_constraints(&cbf.net, &set, &all, &cbf.hyper)?)
}

/// Evaluates the learned controller and, optionally, the handcrafted
/// baseline on the same problems.
pub fn eval_controllers(
    cfg: &Config,
    seed: u64,
    problems: &[ProblemSpec],
    learned: Option<&LearnedCbf>,
    setting: Setting,
    with_baseline: bool,
) -> Result<Vec<(ControllerMetricsRow, Vec<ControllerRun>)>> {
    let cc = &cfg.controller;
    let mut out = Vec::new();
    if let Some(cbf) = learned {
        let name = match cbf.net.variant() {
            Variant::State => "s-cbf-inc",
            Variant::Cloud => "o-cbf-inc",
        };
        let cbf = learned_for_setting(cbf, setting, cc);
        out.push(eval_controller(&cfg.arm, problems, name, &cbf, setting, cc, seed)?);
    }
    if with_baseline {
        let hand = HandcraftedCbf { margin: cc.hand_margin, fd_step: cc.hand_fd_step, alpha: cc.controller.alpha };
        out.push(eval_controller(&cfg.arm, problems, "hcbf", &hand, setting, cc, seed)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayFailure {
    pub problem_id: usize,
    pub method: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayReport {
    pub runs: usize,
    pub solved: usize,
    pub failures: Vec<ReplayFailure>,
}

/// Reads run records from a JSONL file or a single JSON record.
pub fn load_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let text = read(path)?;
    match serde_json::from_str::<RunRecord>(&text) {
        Ok(one) => Ok(vec![one]),
        Err(_) => read_runs(&text),
    }
}

/// Re-validates every solved path: it must start at the problem's start,
/// end in the goal ball and be collision-free at `check_resolution`.
pub fn replay(arm: &ArmModel, problems: &[ProblemSpec], runs: &[RunRecord], planner: &PlannerConfig) -> Result<ReplayReport> {
    let mut report = ReplayReport { runs: runs.len(), ..Default::default() };
    for run in runs.iter().filter(|r| r.result.status == PlanStatus::Solved) {
        report.solved += 1;
        let fail = |reason: &str| ReplayFailure { problem_id: run.problem_id, method: run.method.clone(), seed: run.seed, reason: reason.into() };
        let Some(problem) = problems.iter().find(|p| p.id == run.problem_id) else {
            report.failures.push(fail("unknown problem id"));
            continue;
        };
        let path = &run.result.path;
        if path.first() != Some(&problem.q0) {
            report.failures.push(fail("path does not start at the start configuration"));
        } else if path.last().is_none_or(|q| q.distance(&problem.qg) > planner.r_goal) {
            report.failures.push(fail("path does not end in the goal region"));
        } else if valid_prefix(&problem.environment, arm, &path[0], &path[1..], planner.check_resolution)? != path.len() - 1 {
            report.failures.push(fail("path collides"));
        }
    }
    Ok(report)
}
