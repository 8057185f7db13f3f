use std::path::PathBuf;

use cbfrrt::environment::{Environment, Workspace};
use cbfrrt::kinematics::{ArmModel, JointConfig};
use cbfrrt::planner::{PlannerConfig, SteerKind};
use cbfrrt::rng::stream;
use cbfrrt_bench::harness::*;
use cbfrrt_bench::problems::*;
use cbfrrt_bench::BenchError;
use rand::Rng;

fn settings(methods: Vec<Method>) -> BenchSettings {
    BenchSettings { methods, seeds: vec![0, 1], planner: PlannerConfig { timing: false, max_nodes: 60, ..Default::default() }, hand_fd_step: 1e-4 }
}

fn easy_problems(n: usize) -> Vec<ProblemSpec> {
    let mut rng = stream(1, "easy");
    (0..n)
        .map(|id| {
            let q0 = JointConfig::new((0..3).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let qg = JointConfig::new(q0.angles.iter().map(|a| a - 0.3).collect());
            ProblemSpec { id, environment: Environment::empty(Workspace::default()), q0, qg, difficulty: Difficulty::Easy, score: None }
        })
        .collect()
}

fn mixed_problems() -> Vec<ProblemSpec> {
    let arm = ArmModel::default();
    let problems = gen_problems(&arm, &ProblemGenConfig::default(), 8, &mut stream(4, "problem-gen")).unwrap();
    difficulty_split(&arm, &problems, 1, &PlannerConfig { timing: false, max_nodes: 60, ..Default::default() }, 4).unwrap()
}

#[test]
fn straight_line_solves_trivially_easy_problems() {
    let out = run_bench(&ArmModel::default(), &easy_problems(10), &settings(vec![Method::new(SteerKind::StraightLine)]), 0).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.rows[0].sr, 1.0);
    assert_eq!(out.rows[0].n_runs, 20);
    assert_eq!(out.rows[0].seeds, vec![0, 1]);
}

#[test]
fn csv_has_one_row_per_method_and_difficulty() {
    let methods = vec![Method::new(SteerKind::StraightLine), Method::new(SteerKind::HandCbf { margin: 0.1 })];
    let out = run_bench(&ArmModel::default(), &mixed_problems(), &settings(methods), 0).unwrap();
    let csv = metrics_csv(&out.rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(out.rows.iter().all(|r| (0.0..=1.0).contains(&r.sr)));
    assert_eq!(out.runs.len(), 8 * 2 * 2);
}

#[test]
fn reruns_give_byte_identical_outputs() {
    let methods = vec![Method::new(SteerKind::StraightLine), Method::new(SteerKind::HandCbf { margin: 0.1 })];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let out = run_bench(&ArmModel::default(), &mixed_problems(), &settings(methods.clone()), 3).unwrap();
        write_bench(dir.path(), &out, 60).unwrap();
    }
    for name in ["metrics.csv", "metrics.json", "runs.jsonl", "metrics.svg"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn tables_are_pure_aggregations_of_the_run_records() {
    let methods = vec![Method::new(SteerKind::StraightLine), Method::new(SteerKind::HandCbf { margin: 0.1 })];
    let set = settings(methods.clone());
    let out = run_bench(&ArmModel::default(), &mixed_problems(), &set, 0).unwrap();
    let reread = read_runs(&runs_jsonl(&out.runs).unwrap()).unwrap();
    assert_eq!(reread, out.runs);
    assert_eq!(metrics_csv(&aggregate(&methods, &reread)), metrics_csv(&out.rows));
    // Recompute one cell by hand.
    let hard: Vec<&RunRecord> = reread.iter().filter(|r| r.method == "rrt" && r.difficulty == Difficulty::Hard).collect();
    let sr = hard.iter().filter(|r| r.solved()).count() as f64 / hard.len() as f64;
    let row = out.rows.iter().find(|r| r.method == "rrt" && r.difficulty == Difficulty::Hard).unwrap();
    assert_eq!(row.sr, sr);
}

#[test]
fn methods_share_planner_seeds_per_problem() {
    assert_eq!(plan_seed(1, 0, 5), plan_seed(1, 0, 5));
    assert_ne!(plan_seed(1, 0, 5), plan_seed(1, 1, 5));
    assert_ne!(plan_seed(1, 0, 5), plan_seed(1, 0, 6));
    assert_ne!(plan_seed(1, 0, 5), plan_seed(2, 0, 5));
}

#[test]
fn every_stored_edge_passes_the_audit() {
    let methods = vec![Method::new(SteerKind::StraightLine), Method::new(SteerKind::HandCbf { margin: 0.1 })];
    let out = run_bench(&ArmModel::default(), &mixed_problems(), &settings(methods), 0).unwrap();
    assert!(out.runs.iter().all(|r| r.edges == r.edges_valid && r.result.tree_nodes == r.edges + 1));
    assert!(out.runs.iter().all(|r| r.result.explored_nodes + 1 >= r.result.tree_nodes));
}

#[test]
fn missing_checkpoints_fail_before_planning() {
    let mut cbf = Method::new(SteerKind::CbfInc);
    let err = run_bench(&ArmModel::default(), &easy_problems(2), &settings(vec![Method::new(SteerKind::StraightLine), cbf.clone()]), 0);
    assert!(matches!(err, Err(BenchError::MissingCheckpoint { .. })));
    cbf.checkpoint = Some(PathBuf::from("/nonexistent/checkpoint.json"));
    let err = run_bench(&ArmModel::default(), &easy_problems(2), &settings(vec![cbf]), 0);
    assert!(matches!(err, Err(BenchError::Io { .. })));
}

#[test]
fn svg_chart_has_a_bar_per_row() {
    let methods = vec![Method::new(SteerKind::StraightLine), Method::new(SteerKind::HandCbf { margin: 0.1 })];
    let out = run_bench(&ArmModel::default(), &mixed_problems(), &settings(methods), 0).unwrap();
    let svg = metrics_svg(&out.rows, 60);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    // Two panels of bars plus one legend swatch per method.
    assert_eq!(svg.matches("<rect").count(), 2 * out.rows.len() + 2);
}
