//! Exact 2D distance primitives for capsules against circles and
//! axis-aligned rectangles, plus ray intersections.

use crate::kinematics::Point;

/// Distance from `p` to the segment `ab`, and the clamped segment parameter
/// of the closest point.
pub fn point_segment_distance(p: &Point, a: &Point, b: &Point) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((a + ab * t - p).norm(), t)
}

fn cross(a: &Point, b: &Point) -> f64 {
    a.x * b.y - a.y * b.x
}

fn on_segment(p: &Point, a: &Point, b: &Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

pub fn segments_intersect(a0: &Point, a1: &Point, b0: &Point, b1: &Point) -> bool {
    let da = a1 - a0;
    let db = b1 - b0;
    let d1 = cross(&db, &(a0 - b0));
    let d2 = cross(&db, &(a1 - b0));
    let d3 = cross(&da, &(b0 - a0));
    let d4 = cross(&da, &(b1 - a0));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(a0, b0, b1))
        || (d2 == 0.0 && on_segment(a1, b0, b1))
        || (d3 == 0.0 && on_segment(b0, a0, a1))
        || (d4 == 0.0 && on_segment(b1, a0, a1))
}

pub fn segment_segment_distance(a0: &Point, a1: &Point, b0: &Point, b1: &Point) -> f64 {
    if segments_intersect(a0, a1, b0, b1) {
        return 0.0;
    }
    point_segment_distance(a0, b0, b1)
        .0
        .min(point_segment_distance(a1, b0, b1).0)
        .min(point_segment_distance(b0, a0, a1).0)
        .min(point_segment_distance(b1, a0, a1).0)
}

/// Signed distance from `p` to a circle (negative inside).
pub fn circle_sdf(p: &Point, center: &Point, radius: f64) -> f64 {
    (p - center).norm() - radius
}

/// Signed distance from `p` to an axis-aligned box (negative inside).
pub fn box_sdf(p: &Point, center: &Point, half: &Point) -> f64 {
    let d = (p - center).abs() - half;
    let outside = Point::new(d.x.max(0.0), d.y.max(0.0)).norm();
    outside + d.x.max(d.y).min(0.0)
}

/// Minimum over the segment of the circle's signed distance.
pub fn segment_circle_sdf(a: &Point, b: &Point, center: &Point, radius: f64) -> f64 {
    point_segment_distance(center, a, b).0 - radius
}

/// Parameter interval of the segment `a + t (b - a)`, `t ∈ [0, 1]`, that lies
/// in the closed box, if any.
fn clip_to_box(a: &Point, b: &Point, center: &Point, half: &Point) -> Option<(f64, f64)> {
    let d = b - a;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        let lo = center[axis] - half[axis];
        let hi = center[axis] + half[axis];
        if d[axis] == 0.0 {
            if a[axis] < lo || a[axis] > hi {
                return None;
            }
        } else {
            let ta = (lo - a[axis]) / d[axis];
            let tb = (hi - a[axis]) / d[axis];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
            if t0 > t1 {
                return None;
            }
        }
    }
    Some((t0, t1))
}

/// Minimum over the segment of the box's signed distance. Exact: disjoint
/// case is a vertex-to-feature distance, penetrating case maximizes the
/// concave piecewise-linear depth over its breakpoints.
pub fn segment_box_sdf(a: &Point, b: &Point, center: &Point, half: &Point) -> f64 {
    match clip_to_box(a, b, center, half) {
        None => {
            let corners = [
                center + Point::new(half.x, half.y),
                center + Point::new(-half.x, half.y),
                center + Point::new(-half.x, -half.y),
                center + Point::new(half.x, -half.y),
            ];
            let mut best = box_sdf(a, center, half).min(box_sdf(b, center, half));
            for c in &corners {
                best = best.min(point_segment_distance(c, a, b).0);
            }
            best
        }
        Some((t0, t1)) => {
            // Coordinates relative to the box center.
            let p0 = a - center;
            let dir = b - a;
            let depth = |t: f64| {
                let p = p0 + dir * t;
                (half.x - p.x.abs()).min(half.y - p.y.abs())
            };
            let mut best = depth(t0).max(depth(t1));
            let k = half.x - half.y;
            // Breakpoints: x = 0, y = 0 and the four lines ±x ∓ y = k.
            let lines: [(f64, f64, f64); 6] = [
                (1.0, 0.0, 0.0),
                (0.0, 1.0, 0.0),
                (1.0, -1.0, k),
                (1.0, 1.0, k),
                (-1.0, 1.0, k),
                (-1.0, -1.0, k),
            ];
            for (ax, ay, c) in lines {
                let slope = ax * dir.x + ay * dir.y;
                if slope != 0.0 {
                    let t = (c - (ax * p0.x + ay * p0.y)) / slope;
                    if t > t0 && t < t1 {
                        best = best.max(depth(t));
                    }
                }
            }
            -best
        }
    }
}

/// First boundary crossing of the ray `origin + t dir` (`dir` unit, `t > 0`)
/// with a circle: `(t, outward normal)`.
pub fn ray_circle(origin: &Point, dir: &Point, center: &Point, radius: f64) -> Option<(f64, Point)> {
    let oc = origin - center;
    let b = dir.dot(&oc);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = if -b - s > 0.0 {
        -b - s
    } else if -b + s > 0.0 {
        -b + s
    } else {
        return None;
    };
    let hit = origin + dir * t;
    Some((t, (hit - center) / radius))
}

/// First boundary crossing of a ray with an axis-aligned box. From inside
/// the box this is the exit point.
pub fn ray_box(origin: &Point, dir: &Point, center: &Point, half: &Point) -> Option<(f64, Point)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut n_enter = Point::zeros();
    let mut n_exit = Point::zeros();
    for axis in 0..2 {
        let lo = center[axis] - half[axis];
        let hi = center[axis] + half[axis];
        let mut unit = Point::zeros();
        if dir[axis] == 0.0 {
            if origin[axis] < lo || origin[axis] > hi {
                return None;
            }
            continue;
        }
        let ta = (lo - origin[axis]) / dir[axis];
        let tb = (hi - origin[axis]) / dir[axis];
        // Entering through the low face means the outward normal points to -axis.
        let (near, far, sign) = if ta < tb { (ta, tb, -1.0) } else { (tb, ta, 1.0) };
        unit[axis] = sign;
        if near > t_enter {
            t_enter = near;
            n_enter = unit;
        }
        if far < t_exit {
            t_exit = far;
            n_exit = -unit;
        }
    }
    if t_enter > t_exit || t_exit <= 0.0 {
        return None;
    }
    if t_enter > 0.0 {
        Some((t_enter, n_enter))
    } else {
        Some((t_exit, n_exit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    /// Dense sampling of the segment; only an upper bound, tight to O(1/n).
    fn sampled_min(a: &Point, b: &Point, f: impl Fn(&Point) -> f64) -> f64 {
        let n = 4000;
        (0..=n)
            .map(|i| f(&a.lerp(b, i as f64 / n as f64)))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn box_sdf_basics() {
        let c = p(0.0, 0.0);
        let h = p(1.0, 0.5);
        assert!((box_sdf(&p(2.0, 0.0), &c, &h) - 1.0).abs() < 1e-15);
        assert!((box_sdf(&p(0.0, 0.0), &c, &h) + 0.5).abs() < 1e-15);
        assert!((box_sdf(&p(2.0, 1.5), &c, &h) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn segment_through_box_center() {
        let v = segment_box_sdf(&p(-2.0, 0.0), &p(2.0, 0.0), &p(0.0, 0.0), &p(1.0, 0.3));
        assert!((v + 0.3).abs() < 1e-12);
    }

    #[test]
    fn parallel_segments() {
        let d = segment_segment_distance(&p(0.0, 0.0), &p(1.0, 0.0), &p(0.5, 0.2), &p(2.0, 0.2));
        assert!((d - 0.2).abs() < 1e-15);
        let x = segment_segment_distance(&p(0.0, 0.0), &p(1.0, 1.0), &p(0.0, 1.0), &p(1.0, 0.0));
        assert_eq!(x, 0.0);
    }

    #[test]
    fn rays() {
        let (t, n) = ray_circle(&p(0.0, 0.0), &p(1.0, 0.0), &p(3.0, 0.0), 0.5).unwrap();
        assert!((t - 2.5).abs() < 1e-12 && (n - p(-1.0, 0.0)).norm() < 1e-12);
        let (t, n) = ray_box(&p(0.0, 0.0), &p(0.0, 1.0), &p(0.0, 2.0), &p(0.5, 0.5)).unwrap();
        assert!((t - 1.5).abs() < 1e-12 && (n - p(0.0, -1.0)).norm() < 1e-12);
        assert!(ray_box(&p(0.0, 0.0), &p(0.0, -1.0), &p(0.0, 2.0), &p(0.5, 0.5)).is_none());
        let (t, n) = ray_box(&p(0.0, 2.0), &p(1.0, 0.0), &p(0.0, 2.0), &p(0.5, 0.5)).unwrap();
        assert!((t - 0.5).abs() < 1e-12 && (n - p(1.0, 0.0)).norm() < 1e-12);
    }

    fn pt() -> impl Strategy<Value = Point> {
        (-2.0f64..2.0, -2.0f64..2.0).prop_map(|(x, y)| Point::new(x, y))
    }

    proptest! {
        #[test]
        fn segment_box_matches_dense_sampling(a in pt(), b in pt(), c in pt(), hx in 0.05f64..1.0, hy in 0.05f64..1.0) {
            let h = Point::new(hx, hy);
            let exact = segment_box_sdf(&a, &b, &c, &h);
            let sampled = sampled_min(&a, &b, |q| box_sdf(q, &c, &h));
            let tol = (b - a).norm() / 4000.0 + 1e-12;
            prop_assert!(exact <= sampled + 1e-12);
            prop_assert!(sampled - exact <= tol, "exact {exact} sampled {sampled}");
        }

        #[test]
        fn segment_circle_matches_dense_sampling(a in pt(), b in pt(), c in pt(), r in 0.05f64..1.0) {
            let exact = segment_circle_sdf(&a, &b, &c, r);
            let sampled = sampled_min(&a, &b, |q| circle_sdf(q, &c, r));
            prop_assert!(exact <= sampled + 1e-12);
            prop_assert!(sampled - exact <= (b - a).norm() / 4000.0 + 1e-12);
        }

        #[test]
        fn segment_segment_matches_dense_sampling(a0 in pt(), a1 in pt(), b0 in pt(), b1 in pt()) {
            let exact = segment_segment_distance(&a0, &a1, &b0, &b1);
            let sampled = sampled_min(&a0, &a1, |q| point_segment_distance(q, &b0, &b1).0);
            prop_assert!(exact <= sampled + 1e-12);
            prop_assert!(sampled - exact <= (a1 - a0).norm() / 4000.0 + 1e-12);
        }

        #[test]
        fn ray_hits_lie_on_boundary(o in pt(), ang in 0.0f64..6.3, c in pt(), hx in 0.05f64..1.0, hy in 0.05f64..1.0) {
            let dir = Point::new(ang.cos(), ang.sin());
            let h = Point::new(hx, hy);
            if let Some((t, n)) = ray_box(&o, &dir, &c, &h) {
                let hit = o + dir * t;
                prop_assert!(box_sdf(&hit, &c, &h).abs() < 1e-9);
                prop_assert!((n.norm() - 1.0).abs() < 1e-12);
            }
            if let Some((t, n)) = ray_circle(&o, &dir, &c, hx) {
                let hit = o + dir * t;
                prop_assert!(circle_sdf(&hit, &c, hx).abs() < 1e-9);
                prop_assert!((n.norm() - 1.0).abs() < 1e-9);
            }
        }
    }
}
