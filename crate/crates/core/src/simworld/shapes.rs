//! Convex primitives: ray casting, support mapping, containment, surface sampling.

use nalgebra::Vector3;

use crate::geometry::Pose;
use crate::graspsense::SurfacePoint;

/// Primitive in its own frame: centered at the origin, cylinder axis along z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box { half: Vector3<f64> },
    Cylinder { radius: f64, half_height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    pub fn cuboid(x: f64, y: f64, z: f64) -> Shape {
        Shape::Box {
            half: Vector3::new(x / 2.0, y / 2.0, z / 2.0),
        }
    }

    pub fn cylinder(radius: f64, height: f64) -> Shape {
        Shape::Cylinder {
            radius,
            half_height: height / 2.0,
        }
    }

    pub fn sphere(radius: f64) -> Shape {
        Shape::Sphere { radius }
    }

    /// Height of the center above the table when resting upright.
    pub fn rest_height(&self) -> f64 {
        match *self {
            Shape::Box { half } => half.z,
            Shape::Cylinder { half_height, .. } => half_height,
            Shape::Sphere { radius } => radius,
        }
    }

    /// Radius of the footprint's bounding circle.
    pub fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Box { half } => half.x.hypot(half.y),
            Shape::Cylinder { radius, .. } => radius,
            Shape::Sphere { radius } => radius,
        }
    }

    pub fn support(&self, d: &Vector3<f64>) -> Vector3<f64> {
        let sgn = |v: f64, h: f64| if v >= 0.0 { h } else { -h };
        match *self {
            Shape::Box { half } => Vector3::new(sgn(d.x, half.x), sgn(d.y, half.y), sgn(d.z, half.z)),
            Shape::Sphere { radius } => {
                let n = d.norm();
                if n < 1e-15 {
                    Vector3::new(radius, 0.0, 0.0)
                } else {
                    d * (radius / n)
                }
            }
            Shape::Cylinder { radius, half_height } => {
                let r = d.x.hypot(d.y);
                let z = sgn(d.z, half_height);
                if r < 1e-15 {
                    Vector3::new(0.0, 0.0, z)
                } else {
                    Vector3::new(d.x * radius / r, d.y * radius / r, z)
                }
            }
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match *self {
            Shape::Box { half } => p.x.abs() <= half.x && p.y.abs() <= half.y && p.z.abs() <= half.z,
            Shape::Sphere { radius } => p.norm_squared() <= radius * radius,
            Shape::Cylinder { radius, half_height } => {
                p.x * p.x + p.y * p.y <= radius * radius && p.z.abs() <= half_height
            }
        }
    }

    /// Nearest entry hit with `t > 0` of the ray `o + t·d` (`d` unit), with the outward normal.
    pub fn ray_cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        const EPS: f64 = 1e-12;
        match *self {
            Shape::Box { half } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis = 0;
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > half[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[i] - o[i]) / d[i];
                    let b = (half[i] - o[i]) / d[i];
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    if lo > t0 {
                        t0 = lo;
                        axis = i;
                    }
                    t1 = t1.min(hi);
                }
                if t0 > t1 || t0 <= EPS {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = -d[axis].signum();
                Some((t0, n))
            }
            Shape::Sphere { radius } => {
                let b = o.dot(d);
                let c = o.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t <= EPS {
                    return None;
                }
                let p = o + d * t;
                Some((t, p / radius))
            }
            Shape::Cylinder { radius, half_height } => {
                let mut best: Option<(f64, Vector3<f64>)> = None;
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-18 {
                    let b = o.x * d.x + o.y * d.y;
                    let c = o.x * o.x + o.y * o.y - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        let z = o.z + t * d.z;
                        if t > EPS && z.abs() <= half_height {
                            let p = o + d * t;
                            best = Some((t, Vector3::new(p.x / radius, p.y / radius, 0.0)));
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    for cap in [half_height, -half_height] {
                        let t = (cap - o.z) / d.z;
                        if t <= EPS || (cap > 0.0) != (d.z < 0.0) {
                            continue;
                        }
                        let p = o + d * t;
                        if p.x * p.x + p.y * p.y <= radius * radius && best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, Vector3::new(0.0, 0.0, cap.signum())));
                        }
                    }
                }
                best
            }
        }
    }

    /// Surface samples at roughly `spacing`, skipping the face resting on the table.
    pub fn surface_points(&self, spacing: f64, object: usize) -> Vec<SurfacePoint> {
        let cells = |len: f64| ((len / spacing).round() as usize).max(1);
        let mut out = Vec::new();
        match *self {
            Shape::Box { half } => {
                for axis in 0..3 {
                    for sign in [1.0, -1.0] {
                        if axis == 2 && sign < 0.0 {
                            continue;
                        }
                        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                        let (nu, nv) = (cells(2.0 * half[u]), cells(2.0 * half[v]));
                        for i in 0..nu {
                            for j in 0..nv {
                                let mut p = Vector3::zeros();
                                p[axis] = sign * half[axis];
                                p[u] = -half[u] + (i as f64 + 0.5) * 2.0 * half[u] / nu as f64;
                                p[v] = -half[v] + (j as f64 + 0.5) * 2.0 * half[v] / nv as f64;
                                let mut n = Vector3::zeros();
                                n[axis] = sign;
                                out.push(SurfacePoint::new(p, n, object));
                            }
                        }
                    }
                }
            }
            Shape::Cylinder { radius, half_height } => {
                let nt = cells(2.0 * std::f64::consts::PI * radius).max(8);
                let nz = cells(2.0 * half_height);
                for i in 0..nt {
                    let th = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / nt as f64;
                    let n = Vector3::new(th.cos(), th.sin(), 0.0);
                    for j in 0..nz {
                        let z = -half_height + (j as f64 + 0.5) * 2.0 * half_height / nz as f64;
                        out.push(SurfacePoint::new(
                            Vector3::new(radius * n.x, radius * n.y, z),
                            n,
                            object,
                        ));
                    }
                }
                let rings = cells(radius);
                for k in 0..rings {
                    let r = (k as f64 + 0.5) * radius / rings as f64;
                    let m = cells(2.0 * std::f64::consts::PI * r).max(3);
                    for i in 0..m {
                        let th = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / m as f64;
                        out.push(SurfacePoint::new(
                            Vector3::new(r * th.cos(), r * th.sin(), half_height),
                            Vector3::z(),
                            object,
                        ));
                    }
                }
            }
            Shape::Sphere { radius } => {
                let n = (4.0 * std::f64::consts::PI * radius * radius / (spacing * spacing)).round() as usize;
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                for i in 0..n.max(1) {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n.max(1) as f64;
                    if z < -0.9 {
                        continue;
                    }
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * i as f64;
                    let dir = Vector3::new(r * th.cos(), r * th.sin(), z);
                    out.push(SurfacePoint::new(dir * radius, dir, object));
                }
            }
        }
        out
    }
}

/// A shape placed in the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placed {
    pub shape: Shape,
    pub pose: Pose,
}

impl Placed {
    pub fn support(&self, d: &Vector3<f64>) -> Vector3<f64> {
        let local = self.pose.rotation().transpose() * d;
        self.pose.transform_point(&self.shape.support(&local))
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.shape.contains(&self.pose.inverse_transform_point(p))
    }

    pub fn ray_cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let lo = self.pose.inverse_transform_point(o);
        let ld = self.pose.rotation().transpose() * d;
        self.shape
            .ray_cast(&lo, &ld)
            .map(|(t, n)| (t, self.pose.rotate(&n)))
    }

    /// Lowest world z over the shape.
    pub fn min_z(&self) -> f64 {
        self.support(&Vector3::new(0.0, 0.0, -1.0)).z
    }

    pub fn center(&self) -> Vector3<f64> {
        *self.pose.translation()
    }
}

fn triple(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    a.cross(b).cross(c)
}

/// Boolean GJK on the Minkowski difference `a − b`.
pub fn intersects(a: &Placed, b: &Placed) -> bool {
    let support = |d: &Vector3<f64>| a.support(d) - b.support(&-d);
    let mut d = a.center() - b.center();
    if d.norm_squared() < 1e-20 {
        d = Vector3::x();
    }
    let mut simplex: Vec<Vector3<f64>> = vec![support(&d)];
    d = -simplex[0];
    for _ in 0..96 {
        if d.norm_squared() < 1e-24 {
            return true;
        }
        let p = support(&d);
        if p.dot(&d) < 0.0 {
            return false;
        }
        simplex.push(p);
        if do_simplex(&mut simplex, &mut d) {
            return true;
        }
    }
    true
}

fn do_simplex(s: &mut Vec<Vector3<f64>>, d: &mut Vector3<f64>) -> bool {
    match s.len() {
        2 => {
            let (b, a) = (s[0], s[1]);
            line_case(s, d, a, b)
        }
        3 => {
            let (c, b, a) = (s[0], s[1], s[2]);
            triangle_case(s, d, a, b, c)
        }
        4 => {
            let (dd, c, b, a) = (s[0], s[1], s[2], s[3]);
            let ao = -a;
            let abc = (b - a).cross(&(c - a));
            let acd = (c - a).cross(&(dd - a));
            let adb = (dd - a).cross(&(b - a));
            // orient normals away from the opposite vertex
            let orient = |n: Vector3<f64>, opp: Vector3<f64>| if n.dot(&(opp - a)) > 0.0 { -n } else { n };
            let abc = orient(abc, dd);
            let acd = orient(acd, b);
            let adb = orient(adb, c);
            if abc.dot(&ao) > 0.0 {
                *s = vec![c, b, a];
                return triangle_case(s, d, a, b, c);
            }
            if acd.dot(&ao) > 0.0 {
                *s = vec![dd, c, a];
                return triangle_case(s, d, a, c, dd);
            }
            if adb.dot(&ao) > 0.0 {
                *s = vec![b, dd, a];
                return triangle_case(s, d, a, dd, b);
            }
            true
        }
        _ => unreachable!("simplex size"),
    }
}

fn line_case(s: &mut Vec<Vector3<f64>>, d: &mut Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>) -> bool {
    let ab = b - a;
    let ao = -a;
    if ab.dot(&ao) > 0.0 {
        let n = triple(&ab, &ao, &ab);
        if n.norm_squared() < 1e-30 {
            return true;
        }
        *s = vec![b, a];
        *d = n;
    } else {
        *s = vec![a];
        *d = ao;
    }
    false
}

fn triangle_case(
    s: &mut Vec<Vector3<f64>>,
    d: &mut Vector3<f64>,
    a: Vector3<f64>,
    b: Vector3<f64>,
    c: Vector3<f64>,
) -> bool {
    let ab = b - a;
    let ac = c - a;
    let ao = -a;
    let abc = ab.cross(&ac);
    if abc.norm_squared() < 1e-30 {
        return line_case(s, d, a, b);
    }
    if abc.cross(&ac).dot(&ao) > 0.0 {
        if ac.dot(&ao) > 0.0 {
            *s = vec![c, a];
            *d = triple(&ac, &ao, &ac);
            if d.norm_squared() < 1e-30 {
                return true;
            }
            return false;
        }
        return line_case(s, d, a, b);
    }
    if ab.cross(&abc).dot(&ao) > 0.0 {
        return line_case(s, d, a, b);
    }
    let side = abc.dot(&ao);
    if side.abs() < 1e-18 {
        return true;
    }
    if side > 0.0 {
        *s = vec![c, b, a];
        *d = abc;
    } else {
        *s = vec![b, c, a];
        *d = -abc;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_hits_each_primitive_from_above() {
        let o = Vector3::new(0.0, 0.0, 1.0);
        let d = Vector3::new(0.0, 0.0, -1.0);
        for (s, expect) in [
            (Shape::cuboid(0.04, 0.04, 0.04), 0.98),
            (Shape::cylinder(0.02, 0.1), 0.95),
            (Shape::sphere(0.03), 0.97),
        ] {
            let (t, n) = s.ray_cast(&o, &d).unwrap();
            assert!((t - expect).abs() < 1e-12, "{s:?}: {t}");
            assert!((n - Vector3::z()).norm() < 1e-12);
        }
        assert!(Shape::sphere(0.03).ray_cast(&Vector3::new(0.1, 0.0, 1.0), &d).is_none());
    }

    #[test]
    fn ray_hits_cylinder_side() {
        let s = Shape::cylinder(0.02, 0.1);
        let (t, n) = s.ray_cast(&Vector3::new(-1.0, 0.0, 0.01), &Vector3::x()).unwrap();
        assert!((t - 0.98).abs() < 1e-12);
        assert!((n + Vector3::x()).norm() < 1e-12);
    }

    #[test]
    fn gjk_separated_and_overlapping_boxes() {
        let a = Placed {
            shape: Shape::cuboid(0.1, 0.1, 0.1),
            pose: Pose::identity(),
        };
        let mut b = a;
        b.pose = Pose::from_translation(Vector3::new(0.09, 0.02, 0.0));
        assert!(intersects(&a, &b));
        b.pose = Pose::from_translation(Vector3::new(0.11, 0.0, 0.0));
        assert!(!intersects(&a, &b));
        b.pose = Pose::from_axis_angle(&Vector3::z(), 0.785, Vector3::new(0.115, 0.0, 0.0));
        assert!(intersects(&a, &b));
        b.pose = Pose::from_axis_angle(&Vector3::z(), 0.785, Vector3::new(0.125, 0.0, 0.0));
        assert!(!intersects(&a, &b));
    }

    #[test]
    fn surface_points_have_unit_normals_and_skip_bottom() {
        for s in [Shape::cuboid(0.04, 0.06, 0.05), Shape::cylinder(0.02, 0.08), Shape::sphere(0.03)] {
            let pts = s.surface_points(0.005, 0);
            assert!(pts.len() > 50);
            for p in &pts {
                assert!((p.normal.norm() - 1.0).abs() < 1e-9);
                assert!(p.normal.z > -0.95);
            }
        }
    }
}
