//! Planner comparison runs and their aggregate tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cbfrrt::cbf::{Checkpoint, LearnedCbf};
use cbfrrt::kinematics::ArmModel;
use cbfrrt::planner::{plan_with_tree, valid_prefix, PlanProblem, PlanResult, PlanStatus, PlannerConfig, SearchTree, Steer, SteerKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{missing, to_json, write, BenchError, Result};
use crate::problems::{task_seed, Difficulty, ProblemSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub steer: SteerKind,
    /// Required for learned steer kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Method {
    pub fn new(steer: SteerKind) -> Self {
        Self { name: steer.label(), steer, checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub methods: Vec<Method>,
    /// Repetitions per problem; each index names its own planner stream.
    pub seeds: Vec<u64>,
    pub planner: PlannerConfig,
    /// Finite-difference step of the handcrafted barrier's gradient.
    pub hand_fd_step: f64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        let planner = PlannerConfig::default();
        Self {
            methods: vec![
                Method::new(SteerKind::StraightLine),
                Method::new(SteerKind::CbfInc),
                Method::new(SteerKind::CbfFilterLqr { activation_after: planner.max_nodes / 2 }),
                Method::new(SteerKind::HandCbf { margin: 0.1 }),
            ],
            seeds: vec![0, 1, 2],
            planner,
            hand_fd_step: 1e-4,
        }
    }
}

/// One planner run. Every aggregate table is recomputable from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub problem_id: usize,
    pub difficulty: Difficulty,
    pub method: String,
    pub seed: u64,
    /// Edges in the final search tree, and how many pass the geometric audit.
    pub edges: usize,
    pub edges_valid: usize,
    pub result: PlanResult,
}

impl RunRecord {
    pub fn solved(&self) -> bool {
        self.result.status == PlanStatus::Solved
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub difficulty: Difficulty,
    pub sr: f64,
    pub nodes_mean: f64,
    pub time_s_mean: f64,
    pub n_runs: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub rows: Vec<MetricsRow>,
    pub runs: Vec<RunRecord>,
}

/// Planner seed for repetition `seed` of problem `id`; shared by all
/// methods so runs pair up.
pub fn plan_seed(global_seed: u64, seed: u64, id: usize) -> u64 {
    task_seed(global_seed, &format!("planner-{seed}"), id as u64)
}

/// Loads every learned method's checkpoint. Fails before any planning.
pub fn load_methods(methods: &[Method]) -> Result<Vec<Option<LearnedCbf>>> {
    methods
        .iter()
        .map(|m| {
            if !m.steer.needs_network() {
                return Ok(None);
            }
            let path = m.checkpoint.as_ref().ok_or_else(|| BenchError::MissingCheckpoint { method: m.name.clone() })?;
            if !path.exists() {
                return Err(missing(path));
            }
            Ok(Some(Checkpoint::load(path)?.to_learned()?))
        })
        .collect()
}

/// Re-checks every tree edge against the geometry; returns (edges, valid).
pub fn audit_tree(arm: &ArmModel, problem: &ProblemSpec, tree: &SearchTree, resolution: f64) -> Result<(usize, usize)> {
    let mut valid = 0;
    for node in &tree.nodes[1..] {
        let parent = &tree.nodes[node.parent.expect("non-root node")].config;
        let keep = valid_prefix(&problem.environment, arm, parent, &node.edge.states, resolution)?;
        valid += (keep == node.edge.states.len()) as usize;
    }
    Ok((tree.nodes.len() - 1, valid))
}

pub fn run_one(
    arm: &ArmModel,
    problem: &ProblemSpec,
    method: &Method,
    net: Option<&LearnedCbf>,
    settings: &BenchSettings,
    global_seed: u64,
    seed: u64,
) -> Result<RunRecord> {
    let steer = Steer::bind(method.steer, net, settings.hand_fd_step)?;
    let plan = PlanProblem { arm, env: &problem.environment, start: &problem.q0, goal: &problem.qg };
    let (result, tree) = plan_with_tree(&plan, &steer, &settings.planner, plan_seed(global_seed, seed, problem.id))?;
    let (edges, edges_valid) = audit_tree(arm, problem, &tree, settings.planner.check_resolution)?;
    Ok(RunRecord { problem_id: problem.id, difficulty: problem.difficulty, method: method.name.clone(), seed, edges, edges_valid, result })
}

/// Runs every (problem, method, seed) combination on the worker pool.
/// Records come back in problem, method, seed order regardless of
/// scheduling.
pub fn run_bench(arm: &ArmModel, problems: &[ProblemSpec], settings: &BenchSettings, global_seed: u64) -> Result<BenchOutput> {
    settings.planner.validate()?;
    if settings.methods.is_empty() || settings.seeds.is_empty() {
        return Err(BenchError::Config("bench needs at least one method and one seed".into()));
    }
    let nets = load_methods(&settings.methods)?;
    let tasks: Vec<(usize, usize, u64)> = (0..problems.len())
        .flat_map(|p| (0..settings.methods.len()).flat_map(move |m| settings.seeds.iter().map(move |&s| (p, m, s))))
        .collect();
    let runs = tasks
        .par_iter()
        .map(|&(p, m, s)| run_one(arm, &problems[p], &settings.methods[m], nets[m].as_ref(), settings, global_seed, s))
        .collect::<Result<Vec<_>>>()?;
    let rows = aggregate(&settings.methods, &runs);
    Ok(BenchOutput { rows, runs })
}

/// Per method and difficulty: success rate, mean explored nodes and mean
/// planning time over all runs.
pub fn aggregate(methods: &[Method], runs: &[RunRecord]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for method in methods {
        let mut groups: BTreeMap<Difficulty, Vec<&RunRecord>> = BTreeMap::new();
        for r in runs.iter().filter(|r| r.method == method.name) {
            groups.entry(r.difficulty).or_default().push(r);
        }
        for (difficulty, group) in groups {
            let n = group.len() as f64;
            let mut seeds: Vec<u64> = group.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            rows.push(MetricsRow {
                method: method.name.clone(),
                difficulty,
                sr: group.iter().filter(|r| r.solved()).count() as f64 / n,
                nodes_mean: group.iter().map(|r| r.result.explored_nodes as f64).sum::<f64>() / n,
                time_s_mean: group.iter().map(|r| r.result.planning_seconds).sum::<f64>() / n,
                n_runs: group.len(),
                seeds,
            });
        }
    }
    rows
}

pub const CSV_HEADER: &str = "method,difficulty,sr,nodes_mean,time_s_mean,n_runs";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.method, r.difficulty.as_str(), r.sr, r.nodes_mean, r.time_s_mean, r.n_runs).unwrap();
    }
    out
}

pub fn runs_jsonl(runs: &[RunRecord]) -> Result<String> {
    let mut out = String::new();
    for r in runs {
        out += &serde_json::to_string(r)?;
        out.push('\n');
    }
    Ok(out)
}

pub fn read_runs(text: &str) -> Result<Vec<RunRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Grouped bars of success rate and mean explored nodes per difficulty.
pub fn metrics_svg(rows: &[MetricsRow], max_nodes: usize) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut difficulties: Vec<Difficulty> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !difficulties.contains(&r.difficulty) {
            difficulties.push(r.difficulty);
        }
    }
    let palette = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"];
    let (bar, gap, panel_h, top) = (18.0, 24.0, 160.0, 30.0);
    let group_w = methods.len() as f64 * bar + gap;
    let panel_w = difficulties.len() as f64 * group_w + gap;
    let width = 2.0 * panel_w + 60.0;
    let height = top + panel_h + 40.0 + 16.0 * methods.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let panels: [(&str, f64, fn(&MetricsRow) -> f64); 2] = [("success rate", 1.0, |r| r.sr), ("mean explored nodes", max_nodes.max(1) as f64, |r| r.nodes_mean)];
    for (k, (title, scale, value)) in panels.iter().enumerate() {
        let x0 = 20.0 + k as f64 * (panel_w + 20.0);
        writeln!(svg, "<text x=\"{x0}\" y=\"16\">{title}</text>").unwrap();
        writeln!(svg, "<line x1=\"{x0}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", top + panel_h, x0 + panel_w, top + panel_h).unwrap();
        for (d, difficulty) in difficulties.iter().enumerate() {
            let gx = x0 + gap / 2.0 + d as f64 * group_w;
            writeln!(svg, "<text x=\"{gx}\" y=\"{}\">{}</text>", top + panel_h + 14.0, difficulty.as_str()).unwrap();
            for (m, method) in methods.iter().enumerate() {
                let Some(row) = rows.iter().find(|r| r.method == *method && r.difficulty == *difficulty) else { continue };
                let h = (value(row) / scale).clamp(0.0, 1.0) * panel_h;
                writeln!(
                    svg,
                    "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{h}\" fill=\"{}\"/>",
                    gx + m as f64 * bar,
                    top + panel_h - h,
                    bar - 2.0,
                    palette[m % palette.len()]
                )
                .unwrap();
            }
        }
    }
    for (m, method) in methods.iter().enumerate() {
        let y = top + panel_h + 30.0 + 16.0 * m as f64;
        writeln!(svg, "<rect x=\"20\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>", y - 9.0, palette[m % palette.len()]).unwrap();
        writeln!(svg, "<text x=\"36\" y=\"{y}\">{method}</text>").unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `metrics.csv`, `metrics.json`, `runs.jsonl` and `metrics.svg`.
pub fn write_bench(dir: &Path, output: &BenchOutput, max_nodes: usize) -> Result<()> {
    write(&dir.join("metrics.csv"), metrics_csv(&output.rows))?;
    write(&dir.join("metrics.json"), to_json(&output.rows)?)?;
    write(&dir.join("runs.jsonl"), runs_jsonl(&output.runs)?)?;
    write(&dir.join("metrics.svg"), metrics_svg(&output.rows, max_nodes))
}
