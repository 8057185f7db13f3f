use super::*;
use crate::cbf::HandcraftedCbf;
use crate::environment::{Obstacle, Shape, Workspace};
use crate::kinematics::Point;
use crate::rng::stream;
use proptest::prelude::*;
use rand::Rng;

fn strict() -> SafeControllerConfig {
    SafeControllerConfig { mode: QpMode::Strict, ..Default::default() }
}

fn objective(u: &[f64], u_nom: &[f64]) -> f64 {
    u.iter().zip(u_nom).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn relaxed_objective(u: &[f64], u_nom: &[f64], a: &[f64], b: f64, rho: f64) -> f64 {
    let v = (dot(a, u) + b).max(0.0);
    objective(u, u_nom) + rho * v * v
}

/// Exhaustive active-set enumeration: every coordinate at its lower bound,
/// upper bound or free, with the halfspace (or penalty) active or not.
/// The optimum of a strictly convex QP is the best feasible candidate.
fn enumeration_oracle(u_nom: &[f64], a: &[f64], b: f64, lo: &[f64], hi: &[f64], relax: Option<f64>) -> Option<(Vec<f64>, f64)> {
    let n = u_nom.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for code in 0..3usize.pow(n as u32) {
        let status: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
        for active in [false, true] {
            let fixed = |i: usize| match status[i] {
                0 => Some(lo[i]),
                1 => Some(hi[i]),
                _ => None,
            };
            let mut u: Vec<f64> = (0..n).map(|i| fixed(i).unwrap_or(u_nom[i])).collect();
            if active {
                let s: f64 = (0..n).filter(|&i| fixed(i).is_none()).map(|i| a[i] * a[i]).sum();
                let base = dot(a, &u) + b;
                let shift = match relax {
                    None if s == 0.0 => continue,
                    None => base / s,
                    Some(rho) => rho * base / (1.0 + rho * s),
                };
                for i in 0..n {
                    if fixed(i).is_none() {
                        u[i] -= shift * a[i];
                    }
                }
            }
            if (0..n).any(|i| u[i] < lo[i] - 1e-12 || u[i] > hi[i] + 1e-12) {
                continue;
            }
            let value = match relax {
                None if dot(a, &u) + b > 1e-10 => continue,
                None => objective(&u, u_nom),
                Some(rho) => relaxed_objective(&u, u_nom, a, b, rho),
            };
            if best.as_ref().map_or(true, |(_, v)| value < *v) {
                best = Some((u, value));
            }
        }
    }
    best
}

#[test]
fn nominal_control_examples() {
    let p = NominalPolicy { gain: 1.0 };
    let box_lo = [-1.0, -1.0];
    let box_hi = [1.0, 1.0];
    let q = JointConfig::new(vec![0.3, -0.2]);
    assert_eq!(nominal_control(&p, &q, &q, &box_lo, &box_hi), vec![0.0, 0.0]);
    let q = JointConfig::new(vec![2.0, 0.0]);
    let g = JointConfig::zeros(2);
    assert_eq!(nominal_control(&p, &q, &g, &box_lo, &box_hi), vec![-1.0, 0.0]);
}

#[test]
fn inactive_constraint_returns_nominal_unchanged() {
    let u_nom = [0.123456789, -0.3];
    let (u, d) = solve_safety_qp(&u_nom, &[1.0, 1.0], -1.0, &strict(), &[-1.0; 2], &[1.0; 2]).unwrap();
    assert_eq!(u, u_nom.to_vec());
    assert!(!d.constraint_active && !d.infeasible);
    assert_eq!(d.violation, 0.0);
}

#[test]
fn hyperplane_projection_inside_box() {
    let (u, d) = solve_safety_qp(&[1.0, 0.0], &[1.0, 0.0], 0.0, &strict(), &[-1.0; 2], &[1.0; 2]).unwrap();
    assert_eq!(u, vec![0.0, 0.0]);
    assert!(d.constraint_active && !d.infeasible);
    // Grid search at 0.01 spacing over the box.
    let mut best = f64::INFINITY;
    for i in 0..=200 {
        for j in 0..=200 {
            let v = [-1.0 + i as f64 * 0.01, -1.0 + j as f64 * 0.01];
            if v[0] <= 1e-12 {
                best = best.min(objective(&v, &[1.0, 0.0]));
            }
        }
    }
    assert!((objective(&u, &[1.0, 0.0]) - best).abs() < 1e-9);
}

#[test]
fn disjoint_halfspace_is_reported_and_relaxed_mode_still_solves() {
    let (lo, hi) = ([-1.0; 2], [1.0; 2]);
    let (a, b) = ([1.0, 1.0], 3.0);
    let u_nom = [0.5, -0.2];
    let (u, d) = solve_safety_qp(&u_nom, &a, b, &strict(), &lo, &hi).unwrap();
    assert!(d.infeasible && d.constraint_active);
    assert_eq!(u, vec![-1.0, -1.0]);
    assert!((d.violation - 1.0).abs() < 1e-12);

    let rho = 10.0;
    let cfg = SafeControllerConfig { relax_penalty: rho, mode: QpMode::Relaxed, ..Default::default() };
    let (u, d) = solve_safety_qp(&u_nom, &a, b, &cfg, &lo, &hi).unwrap();
    assert!(d.infeasible);
    let mine = relaxed_objective(&u, &u_nom, &a, b, rho);
    let mut best = f64::INFINITY;
    for i in 0..=200 {
        for j in 0..=200 {
            let v = [-1.0 + i as f64 * 0.01, -1.0 + j as f64 * 0.01];
            best = best.min(relaxed_objective(&v, &u_nom, &a, b, rho));
        }
    }
    assert!(mine <= best + 1e-12);
    // Within grid resolution of the grid optimum: the objective's gradient is
    // bounded by ~2ρ·|a|·max violation on this box.
    assert!(best - mine < 2.0 * rho * 2.0 * 2.0 * 0.01);
}

#[test]
fn invalid_inputs_are_errors() {
    let cfg = strict();
    assert!(solve_safety_qp(&[0.0], &[1.0, 0.0], 0.0, &cfg, &[-1.0], &[1.0]).is_err());
    assert!(solve_safety_qp(&[f64::NAN], &[1.0], 0.0, &cfg, &[-1.0], &[1.0]).is_err());
    assert!(solve_safety_qp(&[0.0], &[1.0], 0.0, &cfg, &[1.0], &[-1.0]).is_err());
    let bad = SafeControllerConfig { relax_penalty: 0.0, mode: QpMode::Relaxed, ..Default::default() };
    assert!(solve_safety_qp(&[0.0], &[1.0], 1.0, &bad, &[-1.0], &[1.0]).is_err());
}

fn qp_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, Vec<f64>, Vec<f64>)> {
    (1usize..=4).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0..1.0f64, n),
            prop::collection::vec(prop_oneof![Just(0.0), -2.0..2.0f64], n),
            -3.0..3.0f64,
            prop::collection::vec(0.2..1.5f64, n),
        )
            .prop_map(|(t, a, b, bound)| {
                let lo: Vec<f64> = bound.iter().map(|v| -v).collect();
                let u_nom = t.iter().zip(&bound).map(|(t, v)| t * v).collect();
                (u_nom, a, b, lo, bound)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn strict_mode_matches_active_set_enumeration((u_nom, a, b, lo, hi) in qp_instance()) {
        let (u, d) = solve_safety_qp(&u_nom, &a, b, &strict(), &lo, &hi).unwrap();
        let closed_form = crate::cbf::inf_control_term(&a, &lo, &hi).0 + b > 0.0;
        prop_assert_eq!(d.infeasible, closed_form);
        for i in 0..u.len() {
            prop_assert!(u[i] >= lo[i] && u[i] <= hi[i]);
        }
        if !d.constraint_active {
            prop_assert_eq!(&u, &u_nom);
        }
        if !d.infeasible {
            prop_assert!(dot(&a, &u) + b <= 1e-9);
            let (_, best) = enumeration_oracle(&u_nom, &a, b, &lo, &hi, None).expect("feasible instance");
            prop_assert!((objective(&u, &u_nom) - best).abs() <= 1e-9, "{} vs {}", objective(&u, &u_nom), best);
        }
    }

    #[test]
    fn relaxed_mode_matches_enumeration(
        (u_nom, a, b, lo, hi) in qp_instance(),
        rho in prop_oneof![Just(1.0), Just(1e3), 0.1..100.0f64],
    ) {
        let cfg = SafeControllerConfig { relax_penalty: rho, mode: QpMode::Relaxed, ..Default::default() };
        let (u, _) = solve_safety_qp(&u_nom, &a, b, &cfg, &lo, &hi).unwrap();
        for i in 0..u.len() {
            prop_assert!(u[i] >= lo[i] && u[i] <= hi[i]);
        }
        let (_, best) = enumeration_oracle(&u_nom, &a, b, &lo, &hi, Some(rho)).unwrap();
        let mine = relaxed_objective(&u, &u_nom, &a, b, rho);
        prop_assert!((mine - best).abs() <= 1e-9 * (1.0 + best), "{} vs {}", mine, best);
    }
}

fn empty_world() -> Environment {
    Environment::empty(Workspace::default())
}

fn hand() -> HandcraftedCbf {
    HandcraftedCbf { margin: 0.1, fd_step: 1e-4, alpha: 1.0 }
}

#[test]
fn unconstrained_rollout_reaches_goal() {
    let arm = ArmModel::default();
    let q0 = JointConfig::new(vec![0.0, 0.5, -0.5]);
    let goal = JointConfig::new(vec![1.0, -0.4, 0.8]);
    let rec = safe_rollout(&hand(), &NominalPolicy::default(), &SafeControllerConfig::default(), &arm, &q0, &goal, &empty_world(), &RolloutLimits::default()).unwrap();
    assert!(rec.reached_goal && !rec.collided);
    assert_eq!(rec.qp_infeasible_count, 0);
    assert!(rec.configs.last().unwrap().distance(&goal) <= 0.1);
    assert_eq!(rec.configs.len(), rec.controls.len() + 1);
    assert_eq!(rec.min_signed_distance.len(), rec.configs.len());
    assert_eq!(rec.steps_used, rec.controls.len());
    assert!(rec.steps_used <= rec.ticks_used * 4 && rec.steps_used > (rec.ticks_used - 1) * 4);
}

#[test]
fn start_inside_goal_ball_needs_no_steps() {
    let arm = ArmModel::default();
    let q0 = JointConfig::new(vec![0.0, 0.5, -0.5]);
    let goal = JointConfig::new(vec![0.05, 0.5, -0.5]);
    let rec = safe_rollout(&hand(), &NominalPolicy::default(), &SafeControllerConfig::default(), &arm, &q0, &goal, &empty_world(), &RolloutLimits::default()).unwrap();
    assert!(rec.reached_goal);
    assert_eq!((rec.steps_used, rec.ticks_used), (0, 0));
    assert_eq!(rec.configs, vec![q0]);
}

#[test]
fn nominal_descent_is_monotone_in_free_space() {
    let arm = ArmModel::default();
    let mut rng = stream(1, "nominal");
    let (lo, hi) = (arm.action_lower(), arm.action_upper());
    for _ in 0..20 {
        let mut q = JointConfig::new((0..3).map(|_| rng.gen_range(-2.5..2.5)).collect());
        let goal = JointConfig::new((0..3).map(|_| rng.gen_range(-2.5..2.5)).collect());
        let mut prev = q.distance(&goal);
        for _ in 0..200 {
            let u = nominal_control(&NominalPolicy::default(), &q, &goal, &lo, &hi);
            q = integrate(&arm, &q, &u, 1.0 / 120.0).unwrap().0;
            let now = q.distance(&goal);
            assert!(now < prev || prev == 0.0);
            prev = now;
        }
    }
}

fn one_obstacle_world() -> Environment {
    Environment::new(
        vec![Obstacle::fixed(Shape::Circle { center: Point::new(0.6, 0.3), radius: 0.12 })],
        Workspace::default(),
    )
}

#[test]
fn control_is_held_between_ticks_and_flags_are_consistent() {
    let arm = ArmModel::default();
    let env = one_obstacle_world();
    let q0 = JointConfig::new(vec![-0.3, 0.0, 0.0]);
    let goal = JointConfig::new(vec![1.2, 0.0, 0.0]);
    let limits = RolloutLimits { horizon_s: 3.0, ..Default::default() };
    let rec = safe_rollout(&hand(), &NominalPolicy::default(), &SafeControllerConfig::default(), &arm, &q0, &goal, &env, &limits).unwrap();
    for tick in rec.controls.chunks(limits.substeps()) {
        assert!(tick.iter().all(|u| u == &tick[0]));
    }
    assert_eq!(rec.collided, rec.min_signed_distance.iter().any(|d| *d < 0.0));
    assert!(rec.ticks_used <= limits.max_ticks());
}

#[test]
fn handcrafted_filter_keeps_single_obstacle_rollouts_safe() {
    let arm = ArmModel::default();
    let env = one_obstacle_world();
    let mut rng = stream(4, "problems");
    let mut runs = 0;
    let mut safe = 0;
    while runs < 100 {
        let q0 = JointConfig::new((0..3).map(|_| rng.gen_range(-2.5..2.5)).collect());
        let goal = JointConfig::new((0..3).map(|_| rng.gen_range(-2.5..2.5)).collect());
        if signed_distance(&env, &arm, &q0).unwrap() < 0.15 || signed_distance(&env, &arm, &goal).unwrap() < 0.15 {
            continue;
        }
        runs += 1;
        let limits = RolloutLimits { horizon_s: 6.0, ..Default::default() };
        let rec = safe_rollout(&hand(), &NominalPolicy::default(), &SafeControllerConfig::default(), &arm, &q0, &goal, &env, &limits).unwrap();
        safe += !rec.collided as usize;
    }
    // The minimum over link pairs is not differentiable where the closest
    // pair switches, so the filter is not a certificate; it is still a very
    // effective one.
    assert!(safe >= 95, "{safe}/{runs}");
}

#[test]
fn moving_obstacles_advance_during_rollout() {
    // Two links: no self pairs, so the distance is to the obstacle.
    let arm = ArmModel::uniform(&[0.5, 0.4], 0.04, 2.8, 1.0);
    let mut env = one_obstacle_world();
    env.obstacles[0].velocity = Point::new(0.0, 0.2);
    let q0 = JointConfig::new(vec![-1.0, 0.0]);
    let goal = JointConfig::new(vec![-0.5, 0.0]);
    let policy = NominalPolicy::default();
    let cfg = SafeControllerConfig::default();
    let limits = RolloutLimits::default();
    let rec = safe_rollout(&hand(), &policy, &cfg, &arm, &q0, &goal, &env, &limits).unwrap();
    let frozen = safe_rollout(&hand(), &policy, &cfg, &arm, &q0, &goal, &env.frozen(), &limits).unwrap();
    assert!(rec.reached_goal && frozen.reached_goal);
    assert_eq!(rec.configs, frozen.configs);
    let k = rec.steps_used;
    let drift = rec.min_signed_distance[k] - frozen.min_signed_distance[k];
    assert!(drift > 0.0, "obstacle moving away should add clearance, got {drift}");
}

#[test]
fn stall_rule_stops_pinned_rollouts() {
    let arm = ArmModel::default();
    // Goal straight through the obstacle: the filter pins the arm.
    let env = Environment::new(
        vec![Obstacle::fixed(Shape::Rectangle { center: Point::new(0.0, 0.9), half_extents: Point::new(0.6, 0.1) })],
        Workspace::default(),
    );
    let q0 = JointConfig::new(vec![0.3, 0.0, 0.0]);
    let goal = JointConfig::new(vec![2.8, 0.0, 0.0]);
    let limits = RolloutLimits { horizon_s: 20.0, stall: Some(StallRule::default()), ..Default::default() };
    let rec = safe_rollout(&hand(), &NominalPolicy::default(), &strict(), &arm, &q0, &goal, &env, &limits).unwrap();
    assert!(!rec.reached_goal && !rec.collided);
    assert!(rec.stalled);
    assert!(rec.ticks_used < limits.max_ticks());
}

#[test]
fn starting_in_collision_is_an_error() {
    let arm = ArmModel::default();
    let env = one_obstacle_world();
    let q0 = JointConfig::new(vec![0.46, 0.0, 0.0]);
    let r = safe_rollout(&hand(), &NominalPolicy::default(), &SafeControllerConfig::default(), &arm, &q0, &q0, &env, &RolloutLimits::default());
    assert!(matches!(r, Err(Error::InvalidProblem(_))));
}

#[test]
fn rollout_record_serializes() {
    let arm = ArmModel::default();
    let q0 = JointConfig::new(vec![0.0, 0.5, -0.5]);
    let goal = JointConfig::new(vec![0.3, 0.5, -0.5]);
    let rec = safe_rollout(&hand(), &NominalPolicy::default(), &SafeControllerConfig::default(), &arm, &q0, &goal, &empty_world(), &RolloutLimits::default()).unwrap();
    let json = serde_json::to_string(&rec).unwrap();
    let back: RolloutRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back, rec);
}

#[test]
fn rollouts_can_run_through_collisions_for_scoring() {
    let arm = ArmModel::default();
    let env = one_obstacle_world();
    let q0 = JointConfig::new(vec![-0.3, 0.0, 0.0]);
    let goal = JointConfig::new(vec![1.2, 0.0, 0.0]);
    // A barrier this negative never filters anything.
    let blind = HandcraftedCbf { margin: -10.0, fd_step: 1e-4, alpha: 1.0 };
    let run = |stop_on_collision| {
        let limits = RolloutLimits { stop_on_collision, ..Default::default() };
        safe_rollout(&blind, &NominalPolicy::default(), &SafeControllerConfig::default(), &arm, &q0, &goal, &env, &limits).unwrap()
    };
    let stopped = run(true);
    assert!(stopped.collided && !stopped.reached_goal);
    assert!(*stopped.min_signed_distance.last().unwrap() < 0.0);
    let scored = run(false);
    assert!(scored.collided && scored.reached_goal);
    assert!(*scored.min_signed_distance.last().unwrap() >= 0.0);
    assert_eq!(scored.configs[..stopped.configs.len()], stopped.configs[..]);
}
