//! Obstacle worlds and what the robot can observe of them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    box_sdf, circle_sdf, ray_box, ray_circle, segment_box_sdf, segment_circle_sdf, segment_segment_distance,
};
use crate::kinematics::{forward_kinematics, ArmModel, JointConfig, LinkSegment, Point};
use crate::rng::{indexed_stream, ChaCha8Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Rectangle { center: Point, half_extents: Point },
    Circle { center: Point, radius: f64 },
}

impl Shape {
    pub fn center(&self) -> Point {
        match self {
            Shape::Rectangle { center, .. } | Shape::Circle { center, .. } => *center,
        }
    }

    fn center_mut(&mut self) -> &mut Point {
        match self {
            Shape::Rectangle { center, .. } | Shape::Circle { center, .. } => center,
        }
    }

    pub fn sdf(&self, p: &Point) -> f64 {
        match self {
            Shape::Rectangle { center, half_extents } => box_sdf(p, center, half_extents),
            Shape::Circle { center, radius } => circle_sdf(p, center, *radius),
        }
    }

    /// Minimum signed distance over the segment `ab`.
    pub fn segment_sdf(&self, a: &Point, b: &Point) -> f64 {
        match self {
            Shape::Rectangle { center, half_extents } => segment_box_sdf(a, b, center, half_extents),
            Shape::Circle { center, radius } => segment_circle_sdf(a, b, center, *radius),
        }
    }

    pub fn perimeter(&self) -> f64 {
        match self {
            Shape::Rectangle { half_extents, .. } => 4.0 * (half_extents.x + half_extents.y),
            Shape::Circle { radius, .. } => std::f64::consts::TAU * radius,
        }
    }

    /// Boundary point at arc length `s ∈ [0, perimeter)` and its outward normal.
    fn boundary_point(&self, s: f64) -> (Point, Point) {
        match self {
            Shape::Circle { center, radius } => {
                let a = s / radius;
                let n = Point::new(a.cos(), a.sin());
                (center + n * *radius, n)
            }
            Shape::Rectangle { center, half_extents: h } => {
                let (w, t) = (2.0 * h.x, 2.0 * h.y);
                // Sides in order: bottom, right, top, left (counter-clockwise).
                if s < w {
                    (center + Point::new(-h.x + s, -h.y), Point::new(0.0, -1.0))
                } else if s < w + t {
                    (center + Point::new(h.x, -h.y + (s - w)), Point::new(1.0, 0.0))
                } else if s < 2.0 * w + t {
                    (center + Point::new(h.x - (s - w - t), h.y), Point::new(0.0, 1.0))
                } else {
                    let r = (s - 2.0 * w - t).min(t);
                    (center + Point::new(-h.x, h.y - r), Point::new(-1.0, 0.0))
                }
            }
        }
    }

    fn ray(&self, origin: &Point, dir: &Point) -> Option<(f64, Point)> {
        match self {
            Shape::Rectangle { center, half_extents } => ray_box(origin, dir, center, half_extents),
            Shape::Circle { center, radius } => ray_circle(origin, dir, center, *radius),
        }
    }

    fn is_valid(&self) -> bool {
        match self {
            Shape::Rectangle { center, half_extents } => {
                half_extents.x > 0.0 && half_extents.y > 0.0 && center.iter().chain(half_extents.iter()).all(|v| v.is_finite())
            }
            Shape::Circle { center, radius } => *radius > 0.0 && radius.is_finite() && center.iter().all(|v| v.is_finite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub shape: Shape,
    #[serde(default = "Point::zeros")]
    pub velocity: Point,
}

impl Obstacle {
    pub fn fixed(shape: Shape) -> Self {
        Self { shape, velocity: Point::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: Point,
    pub max: Point,
}

impl Default for Workspace {
    fn default() -> Self {
        Self { min: Point::new(-1.4, -1.4), max: Point::new(1.4, 1.4) }
    }
}

impl Workspace {
    fn center(&self) -> Point {
        (self.min + self.max) * 0.5
    }

    fn half(&self) -> Point {
        (self.max - self.min) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub workspace: Workspace,
    #[serde(default)]
    pub time: f64,
}

impl Environment {
    pub fn empty(workspace: Workspace) -> Self {
        Self { obstacles: Vec::new(), workspace, time: 0.0 }
    }

    pub fn new(obstacles: Vec<Obstacle>, workspace: Workspace) -> Self {
        Self { obstacles, workspace, time: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = &self.workspace;
        if !(ws.min.x < ws.max.x && ws.min.y < ws.max.y) {
            return Err(Error::InvalidEnvironment("empty workspace".into()));
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            if !ob.shape.is_valid() || !ob.velocity.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidEnvironment(format!("obstacle {i} is malformed")));
            }
            // The workspace point nearest the center must touch the obstacle.
            let c = ob.shape.center();
            let near = Point::new(c.x.clamp(ws.min.x, ws.max.x), c.y.clamp(ws.min.y, ws.max.y));
            if ob.shape.sdf(&near) > 0.0 {
                return Err(Error::InvalidEnvironment(format!("obstacle {i} lies outside the workspace")));
            }
        }
        Ok(())
    }

    pub fn is_static(&self) -> bool {
        self.obstacles.iter().all(|o| o.velocity == Point::zeros())
    }

    /// Copy with every obstacle at rest.
    pub fn frozen(&self) -> Environment {
        let mut env = self.clone();
        for ob in &mut env.obstacles {
            ob.velocity = Point::zeros();
        }
        env
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SafetyLabel {
    Safe,
    Boundary,
    Unsafe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateObservation {
    pub min_signed_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloudSource {
    SurfaceSampled,
    RayCast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    pub position: Point,
    pub normal: Point,
    /// Padding entry standing in for a ray miss or an empty world.
    #[serde(default)]
    pub sentinel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudObservation {
    pub points: Vec<CloudPoint>,
    pub source: CloudSource,
}

impl CloudObservation {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    State(StateObservation),
    Cloud(CloudObservation),
}

fn link_pair_distance(a: &LinkSegment, b: &LinkSegment) -> f64 {
    segment_segment_distance(&a.endpoint_a, &a.endpoint_b, &b.endpoint_a, &b.endpoint_b) - a.radius - b.radius
}

/// Signed clearance of already-computed link segments.
pub fn segments_signed_distance(env: &Environment, segments: &[LinkSegment]) -> f64 {
    let mut best = f64::INFINITY;
    for seg in segments {
        for ob in &env.obstacles {
            best = best.min(ob.shape.segment_sdf(&seg.endpoint_a, &seg.endpoint_b) - seg.radius);
        }
    }
    // Adjacent links share a joint and are exempt.
    for i in 0..segments.len() {
        for j in i + 2..segments.len() {
            best = best.min(link_pair_distance(&segments[i], &segments[j]));
        }
    }
    if best.is_infinite() {
        // No obstacles and no non-adjacent pairs: clearance to the workspace walls.
        let ws = &env.workspace;
        for seg in segments {
            for p in [seg.endpoint_a, seg.endpoint_b] {
                best = best.min(-box_sdf(&p, &ws.center(), &ws.half()) - seg.radius);
            }
        }
    }
    best
}

/// Minimum clearance between the arm's capsules and the obstacles, and
/// between non-adjacent links. Negative under penetration.
pub fn signed_distance(env: &Environment, arm: &ArmModel, q: &JointConfig) -> Result<f64> {
    Ok(segments_signed_distance(env, &forward_kinematics(arm, q)?))
}

pub fn label_from_distance(d: f64, r_thres: f64) -> SafetyLabel {
    if d < 0.0 {
        SafetyLabel::Unsafe
    } else if d >= r_thres {
        SafetyLabel::Safe
    } else {
        SafetyLabel::Boundary
    }
}

/// `Unsafe` below zero clearance, `Safe` at or beyond `r_thres`, else `Boundary`.
pub fn classify(env: &Environment, arm: &ArmModel, q: &JointConfig, r_thres: f64) -> Result<SafetyLabel> {
    if !(r_thres > 0.0) {
        return Err(Error::InvalidConfig("r_thres must be positive".into()));
    }
    Ok(label_from_distance(signed_distance(env, arm, q)?, r_thres))
}

/// `n` points uniformly distributed over the total obstacle perimeter, with
/// outward normals.
pub fn sample_surface_points(env: &Environment, n: usize, rng: &mut impl Rng) -> Result<CloudObservation> {
    if env.obstacles.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if n == 0 {
        return Err(Error::InvalidConfig("cloud size must be positive".into()));
    }
    let perimeters: Vec<f64> = env.obstacles.iter().map(|o| o.shape.perimeter()).collect();
    let total: f64 = perimeters.iter().sum();
    // Stratified along the total arc length: one uniform draw per stratum,
    // so every point is still uniform on the boundary but gaps stay bounded.
    let points = (0..n)
        .map(|i| {
            let mut s = (i as f64 + rng.gen::<f64>()) / n as f64 * total;
            let mut idx = 0;
            while idx + 1 < perimeters.len() && s >= perimeters[idx] {
                s -= perimeters[idx];
                idx += 1;
            }
            let s = s.min(perimeters[idx] * (1.0 - f64::EPSILON));
            let (position, normal) = env.obstacles[idx].shape.boundary_point(s);
            CloudPoint { position, normal, sentinel: false }
        })
        .collect();
    Ok(CloudObservation { points, source: CloudSource::SurfaceSampled })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanSpec {
    pub mount_links: Vec<usize>,
    pub rays_per_mount: usize,
    pub max_range: f64,
    /// Angular width of each fan, centred on the link direction.
    pub fov: f64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self { mount_links: vec![1, 2], rays_per_mount: 32, max_range: 1.5, fov: std::f64::consts::TAU }
    }
}

/// Planar LiDAR: one fan of rays per mounted link, cast from the link
/// midpoint. A miss yields a sentinel point at `max_range` whose normal points
/// back along the ray, so the cloud size is always
/// `mount_links.len() * rays_per_mount`.
pub fn ray_cast_scan(env: &Environment, arm: &ArmModel, q: &JointConfig, spec: &ScanSpec) -> Result<CloudObservation> {
    let segments = forward_kinematics(arm, q)?;
    let mut points = Vec::with_capacity(spec.mount_links.len() * spec.rays_per_mount);
    for &link in &spec.mount_links {
        let seg = segments
            .get(link)
            .ok_or_else(|| Error::InvalidConfig(format!("mount link {link} out of range")))?;
        let origin = seg.midpoint();
        let heading = seg.angle();
        for k in 0..spec.rays_per_mount {
            let a = heading - spec.fov / 2.0 + spec.fov * (k as f64 + 0.5) / spec.rays_per_mount as f64;
            let dir = Point::new(a.cos(), a.sin());
            let hit = env
                .obstacles
                .iter()
                .filter_map(|o| o.shape.ray(&origin, &dir))
                .filter(|(t, _)| *t <= spec.max_range)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            points.push(match hit {
                Some((t, normal)) => CloudPoint { position: origin + dir * t, normal, sentinel: false },
                None => CloudPoint { position: origin + dir * spec.max_range, normal: -dir, sentinel: true },
            });
        }
    }
    Ok(CloudObservation { points, source: CloudSource::RayCast })
}

/// Sentinel-only cloud on a ring of radius `range` around `center`, normals
/// pointing inward. Stands in for a surface cloud of an obstacle-free world.
pub fn sentinel_ring(center: &Point, n: usize, range: f64) -> CloudObservation {
    let points = (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            let dir = Point::new(a.cos(), a.sin());
            CloudPoint { position: center + dir * range, normal: -dir, sentinel: true }
        })
        .collect();
    CloudObservation { points, source: CloudSource::SurfaceSampled }
}

/// Advance every obstacle at its constant velocity.
pub fn step_obstacles(env: &Environment, dt: f64) -> Environment {
    let mut next = env.clone();
    step_obstacles_in_place(&mut next, dt);
    next
}

pub fn step_obstacles_in_place(env: &mut Environment, dt: f64) {
    for ob in &mut env.obstacles {
        let v = ob.velocity;
        *ob.shape.center_mut() += v * dt;
    }
    env.time += dt;
}

/// How the robot perceives the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationModel {
    /// Minimum signed distance.
    SignedDistance,
    /// Points sampled uniformly over all obstacle surfaces. The sampling
    /// stream is fixed by `seed`, so a given world always yields the same
    /// cloud and moving obstacles carry their points with them.
    SurfaceCloud { points: usize, seed: u64, pad_range: f64 },
    /// Ray fans from links of the arm itself.
    RayCast(ScanSpec),
}

impl ObservationModel {
    pub fn observe(&self, env: &Environment, arm: &ArmModel, q: &JointConfig) -> Result<Observation> {
        match self {
            ObservationModel::SignedDistance => Ok(Observation::State(StateObservation {
                min_signed_distance: signed_distance(env, arm, q)?,
            })),
            ObservationModel::SurfaceCloud { points, seed, pad_range } => {
                if env.obstacles.is_empty() {
                    return Ok(Observation::Cloud(sentinel_ring(&arm.base_position, *points, *pad_range)));
                }
                let mut rng = indexed_stream(*seed, "surface-cloud", 0);
                Ok(Observation::Cloud(sample_surface_points(env, *points, &mut rng)?))
            }
            ObservationModel::RayCast(spec) => Ok(Observation::Cloud(ray_cast_scan(env, arm, q, spec)?)),
        }
    }

    /// Whether the observation changes when only the configuration changes.
    pub fn depends_on_configuration(&self) -> bool {
        !matches!(self, ObservationModel::SurfaceCloud { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvGenConfig {
    pub num_obstacles: usize,
    /// Range for circle radii and rectangle half-extents.
    pub size_range: [f64; 2],
    pub workspace: Workspace,
    pub min_clearance_from_base: f64,
    pub base_position: Point,
    pub circle_fraction: f64,
    pub speed_range: [f64; 2],
    pub max_attempts: usize,
}

impl Default for EnvGenConfig {
    fn default() -> Self {
        Self {
            num_obstacles: 4,
            size_range: [0.1, 0.1],
            workspace: Workspace::default(),
            min_clearance_from_base: 0.25,
            base_position: Point::zeros(),
            circle_fraction: 0.3,
            speed_range: [0.0, 0.0],
            max_attempts: 10_000,
        }
    }
}

impl EnvGenConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidConfig(format!("bad size_range {:?}", self.size_range)));
        }
        let [slo, shi] = self.speed_range;
        if !(slo >= 0.0 && slo <= shi) {
            return Err(Error::InvalidConfig(format!("bad speed_range {:?}", self.speed_range)));
        }
        if !(0.0..=1.0).contains(&self.circle_fraction) {
            return Err(Error::InvalidConfig("circle_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Obstacles with uniformly random centers inside the workspace, resampled
/// until none comes within `min_clearance_from_base` of the base.
pub fn random_environment(cfg: &EnvGenConfig, rng: &mut ChaCha8Rng) -> Result<Environment> {
    cfg.validate()?;
    let ws = cfg.workspace;
    let mut obstacles = Vec::with_capacity(cfg.num_obstacles);
    for index in 0..cfg.num_obstacles {
        let mut attempts = 0;
        let shape = loop {
            if attempts == cfg.max_attempts {
                return Err(Error::Generation { what: format!("obstacle {index} clear of the base"), attempts });
            }
            attempts += 1;
            let center = Point::new(uniform(rng, ws.min.x, ws.max.x), uniform(rng, ws.min.y, ws.max.y));
            let shape = if rng.gen::<f64>() < cfg.circle_fraction {
                Shape::Circle { center, radius: uniform(rng, cfg.size_range[0], cfg.size_range[1]) }
            } else {
                let hx = uniform(rng, cfg.size_range[0], cfg.size_range[1]);
                let hy = uniform(rng, cfg.size_range[0], cfg.size_range[1]);
                Shape::Rectangle { center, half_extents: Point::new(hx, hy) }
            };
            if shape.sdf(&cfg.base_position) >= cfg.min_clearance_from_base {
                break shape;
            }
        };
        let velocity = if cfg.speed_range[1] > 0.0 {
            let speed = uniform(rng, cfg.speed_range[0], cfg.speed_range[1]);
            let heading = rng.gen::<f64>() * std::f64::consts::TAU;
            Point::new(heading.cos(), heading.sin()) * speed
        } else {
            Point::zeros()
        };
        obstacles.push(Obstacle { shape, velocity });
    }
    Ok(Environment::new(obstacles, ws))
}
