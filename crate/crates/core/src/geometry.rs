//! 3D primitives for axis-aligned indoor scenes: vectors, spherical
//! direction angles, planar surfaces with materials, and the ray-surface
//! intersection / specular reflection laws used by the tracer.
//!
//! Convention: directions map to angles via `x = sin(theta)cos(phi)`,
//! `y = sin(theta)sin(phi)`, `z = cos(theta)` with `phi in [0, 2pi)` and
//! `theta in [0, pi]` (z-polar).

use serde::{Deserialize, Serialize};
use std::ops::{Add, Div, Mul, Neg, Sub};
use thiserror::Error;

/// Minimum forward distance for a ray-surface hit, guarding self-intersection.
pub const HIT_GUARD: f64 = 1e-9;
/// Offset applied along the outgoing direction after each bounce.
pub const LAUNCH_OFFSET: f64 = 1e-6;
/// Tolerance for unit-norm checks on direction vectors.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("direction is not unit-norm (|v| = {norm})")]
    NonUnitDirection { norm: f64 },
    #[error("invalid material {name:?}: {reason}")]
    InvalidMaterial { name: String, reason: String },
    #[error("invalid surface: {0}")]
    InvalidSurface(String),
    #[error("invalid scene {id:?}: {reason}")]
    InvalidScene { id: String, reason: String },
}

/// 3D point or direction, in meters (dimensionless when used as a direction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            Vec3::ZERO
        } else {
            self / n
        }
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn axis(self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }

    pub fn with_axis(mut self, axis: Axis, value: f64) -> Vec3 {
        match axis {
            Axis::X => self.x = value,
            Axis::Y => self.y = value,
            Axis::Z => self.z = value,
        }
        self
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Out-angle of a hop: `phi in [0, 2pi)`, `theta in [0, pi]`, canonicalized
/// on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleAction {
    phi: f64,
    theta: f64,
}

impl AngleAction {
    /// Wraps `phi` into `[0, 2pi)` and clamps `theta` into `[0, pi]`.
    pub fn new(phi: f64, theta: f64) -> Self {
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut phi = phi % two_pi;
        if phi < 0.0 {
            phi += two_pi;
        }
        // The modulo above can land exactly on 2pi for tiny negative inputs.
        if phi >= two_pi {
            phi = 0.0;
        }
        let theta = theta.clamp(0.0, std::f64::consts::PI);
        AngleAction { phi, theta }
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

/// Unit direction under the z-polar convention.
pub fn dir_from_angles(a: AngleAction) -> Vec3 {
    let (sp, cp) = a.phi().sin_cos();
    let (st, ct) = a.theta().sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

/// Inverse of [`dir_from_angles`]; pole inputs canonicalize to `phi = 0`.
pub fn angles_from_dir(v: Vec3) -> Result<AngleAction, GeometryError> {
    let norm = v.norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(GeometryError::NonUnitDirection { norm });
    }
    Ok(angles_from_unit(v))
}

/// Angle extraction without the unit-norm check; callers must pass a
/// normalized vector.
pub(crate) fn angles_from_unit(v: Vec3) -> AngleAction {
    let theta = v.z.clamp(-1.0, 1.0).acos();
    let st = (v.x * v.x + v.y * v.y).sqrt();
    if st < UNIT_TOL {
        // Pole: phi is undefined, canonicalize to 0.
        return AngleAction::new(0.0, theta);
    }
    let phi = v.y.atan2(v.x);
    AngleAction::new(phi, theta)
}

/// Geodesic angle between the two direction vectors, in `[0, pi]`.
pub fn angular_distance(a: AngleAction, b: AngleAction) -> f64 {
    let d = dir_from_angles(a).dot(dir_from_angles(b));
    d.clamp(-1.0, 1.0).acos()
}

/// Specular reflection `d - 2(d.n)n`.
pub fn reflect(dir: Vec3, normal: Vec3) -> Vec3 {
    dir - normal * (2.0 * dir.dot(normal))
}

/// Plane-normal axis of an axis-aligned surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    /// The two in-plane axes, in a fixed order: X -> (Y, Z), Y -> (X, Z),
    /// Z -> (X, Y).
    pub fn plane_axes(self) -> (Axis, Axis) {
        match self {
            Axis::X => (Axis::Y, Axis::Z),
            Axis::Y => (Axis::X, Axis::Z),
            Axis::Z => (Axis::X, Axis::Y),
        }
    }

    pub fn unit(self) -> Vec3 {
        match self {
            Axis::X => Vec3::new(1.0, 0.0, 0.0),
            Axis::Y => Vec3::new(0.0, 1.0, 0.0),
            Axis::Z => Vec3::new(0.0, 0.0, 1.0),
        }
    }
}

/// Surface interaction behavior: at least one of `reflective`/`transmissive`
/// must be set; losses are applied per interaction event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    pub reflective: bool,
    pub transmissive: bool,
    pub reflection_loss_db: f64,
    pub transmission_loss_db: f64,
}

impl Material {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.reflective && !self.transmissive {
            return Err(GeometryError::InvalidMaterial {
                name: self.name.clone(),
                reason: "neither reflective nor transmissive".into(),
            });
        }
        for (label, v) in [
            ("reflection_loss_db", self.reflection_loss_db),
            ("transmission_loss_db", self.transmission_loss_db),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(GeometryError::InvalidMaterial {
                    name: self.name.clone(),
                    reason: format!("{label} = {v} (must be finite and >= 0)"),
                });
            }
        }
        Ok(())
    }
}

/// Bounded axis-aligned rectangle: the plane `axis = offset`, extending over
/// `[rect_min, rect_max]` in the two in-plane axes (see [`Axis::plane_axes`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub axis: Axis,
    pub offset: f64,
    pub rect_min: [f64; 2],
    pub rect_max: [f64; 2],
    pub material: Material,
}

impl Surface {
    pub fn validate(&self) -> Result<(), GeometryError> {
        self.material.validate()?;
        if !(self.rect_min[0] < self.rect_max[0] && self.rect_min[1] < self.rect_max[1]) {
            return Err(GeometryError::InvalidSurface(format!(
                "rect_min {:?} must be componentwise below rect_max {:?}",
                self.rect_min, self.rect_max
            )));
        }
        if !self.offset.is_finite() {
            return Err(GeometryError::InvalidSurface(format!(
                "offset {} not finite",
                self.offset
            )));
        }
        Ok(())
    }

    /// In-plane coordinates of a point, in `plane_axes` order.
    pub fn plane_coords(&self, p: Vec3) -> [f64; 2] {
        let (u, v) = self.axis.plane_axes();
        [p.axis(u), p.axis(v)]
    }

    fn rect_contains(&self, p: Vec3) -> bool {
        let [u, v] = self.plane_coords(p);
        u >= self.rect_min[0] && u <= self.rect_max[0] && v >= self.rect_min[1] && v <= self.rect_max[1]
    }

    fn rects_overlap(&self, other: &Surface) -> bool {
        self.rect_min[0] < other.rect_max[0]
            && other.rect_min[0] < self.rect_max[0]
            && self.rect_min[1] < other.rect_max[1]
            && other.rect_min[1] < self.rect_max[1]
    }
}

/// Axis-aligned indoor environment: a bounding box whose six faces are
/// surfaces, plus optional interior partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub surfaces: Vec<Surface>,
}

impl Scene {
    /// Checks the structural invariants: ordered bounds, all six boundary
    /// faces present, no coplanar-overlapping surfaces, valid materials.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let err = |reason: String| GeometryError::InvalidScene {
            id: self.id.clone(),
            reason,
        };
        if !(self.bounds_min.is_finite() && self.bounds_max.is_finite()) {
            return Err(err("non-finite bounds".into()));
        }
        if !(self.bounds_min.x < self.bounds_max.x
            && self.bounds_min.y < self.bounds_max.y
            && self.bounds_min.z < self.bounds_max.z)
        {
            return Err(err("bounds_min must be componentwise below bounds_max".into()));
        }
        for s in &self.surfaces {
            s.validate()?;
            if s.offset < self.bounds_min.axis(s.axis) - 1e-12
                || s.offset > self.bounds_max.axis(s.axis) + 1e-12
            {
                return Err(err(format!(
                    "surface offset {} on axis {:?} outside scene bounds",
                    s.offset, s.axis
                )));
            }
        }
        for axis in Axis::ALL {
            for face in [self.bounds_min.axis(axis), self.bounds_max.axis(axis)] {
                let found = self.surfaces.iter().any(|s| {
                    s.axis == axis && (s.offset - face).abs() < 1e-9 && self.face_covered(s, axis)
                });
                if !found {
                    return Err(err(format!(
                        "missing boundary face on axis {axis:?} at offset {face}"
                    )));
                }
            }
        }
        for (i, a) in self.surfaces.iter().enumerate() {
            for b in &self.surfaces[i + 1..] {
                if a.axis == b.axis && (a.offset - b.offset).abs() < 1e-9 && a.rects_overlap(b) {
                    return Err(err(format!(
                        "coplanar overlapping surfaces on axis {:?} at offset {}",
                        a.axis, a.offset
                    )));
                }
            }
        }
        Ok(())
    }

    fn face_covered(&self, s: &Surface, axis: Axis) -> bool {
        let (u, v) = axis.plane_axes();
        s.rect_min[0] <= self.bounds_min.axis(u) + 1e-9
            && s.rect_max[0] >= self.bounds_max.axis(u) - 1e-9
            && s.rect_min[1] <= self.bounds_min.axis(v) + 1e-9
            && s.rect_max[1] >= self.bounds_max.axis(v) - 1e-9
    }

    pub fn center(&self) -> Vec3 {
        (self.bounds_min + self.bounds_max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.bounds_max - self.bounds_min
    }
}

/// True iff `p` lies within the closed scene bounds.
pub fn in_bounds(scene: &Scene, p: Vec3) -> bool {
    p.x >= scene.bounds_min.x
        && p.x <= scene.bounds_max.x
        && p.y >= scene.bounds_min.y
        && p.y <= scene.bounds_max.y
        && p.z >= scene.bounds_min.z
        && p.z <= scene.bounds_max.z
}

/// Nearest forward intersection of the ray `origin + t*dir` with the bounded
/// rectangle, requiring `t > HIT_GUARD`. `None` if parallel or outside the
/// rectangle extent.
pub fn intersect(origin: Vec3, dir: Vec3, s: &Surface) -> Option<(Vec3, f64)> {
    let denom = dir.axis(s.axis);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (s.offset - origin.axis(s.axis)) / denom;
    if t <= HIT_GUARD {
        return None;
    }
    // Snap the plane coordinate exactly; the in-plane coordinates keep the
    // propagated floating point values.
    let p = (origin + dir * t).with_axis(s.axis, s.offset);
    if s.rect_contains(p) {
        Some((p, t))
    } else {
        None
    }
}

/// Convenience constructor for a fully covering boundary face.
pub fn boundary_face(
    bounds_min: Vec3,
    bounds_max: Vec3,
    axis: Axis,
    offset: f64,
    material: Material,
) -> Surface {
    let (u, v) = axis.plane_axes();
    Surface {
        axis,
        offset,
        rect_min: [bounds_min.axis(u), bounds_min.axis(v)],
        rect_max: [bounds_max.axis(u), bounds_max.axis(v)],
        material,
    }
}

/// An empty box scene with identical material on all six faces.
pub fn box_scene(id: &str, bounds_min: Vec3, bounds_max: Vec3, material: Material) -> Scene {
    let mut surfaces = Vec::with_capacity(6);
    for axis in Axis::ALL {
        for offset in [bounds_min.axis(axis), bounds_max.axis(axis)] {
            surfaces.push(boundary_face(bounds_min, bounds_max, axis, offset, material.clone()));
        }
    }
    Scene {
        id: id.to_string(),
        bounds_min,
        bounds_max,
        surfaces,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    pub(crate) fn concrete() -> Material {
        Material {
            name: "concrete".into(),
            reflective: true,
            transmissive: false,
            reflection_loss_db: 6.0,
            transmission_loss_db: 0.0,
        }
    }

    fn test_box() -> Scene {
        box_scene(
            "box",
            Vec3::ZERO,
            Vec3::new(10.0, 10.0, 3.0),
            concrete(),
        )
    }

    fn assert_vec3_close(a: Vec3, b: Vec3, tol: f64) {
        assert!(a.distance(b) < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn dir_from_angles_convention() {
        assert_vec3_close(
            dir_from_angles(AngleAction::new(0.0, FRAC_PI_2)),
            Vec3::new(1.0, 0.0, 0.0),
            1e-12,
        );
        assert_vec3_close(
            dir_from_angles(AngleAction::new(1.234, 0.0)),
            Vec3::new(0.0, 0.0, 1.0),
            1e-12,
        );
        assert_vec3_close(
            dir_from_angles(AngleAction::new(FRAC_PI_2, FRAC_PI_2)),
            Vec3::new(0.0, 1.0, 0.0),
            1e-12,
        );
    }

    #[test]
    fn angles_from_dir_pole_and_axis() {
        let a = angles_from_dir(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(a.phi(), 0.0);
        assert_eq!(a.theta(), 0.0);

        let a = angles_from_dir(Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(a.phi().abs() < 1e-12);
        assert!((a.theta() - FRAC_PI_2).abs() < 1e-12);

        assert!(angles_from_dir(Vec3::new(2.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn angle_round_trip_random() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let v = Vec3::new(next() * 2.0 - 1.0, next() * 2.0 - 1.0, next() * 2.0 - 1.0);
            if v.norm() < 1e-3 {
                continue;
            }
            let u = v.normalized();
            let rt = dir_from_angles(angles_from_dir(u).unwrap());
            assert_vec3_close(rt, u, 1e-9);
        }
    }

    #[test]
    fn angular_distance_basics() {
        let a = AngleAction::new(0.0, FRAC_PI_2);
        assert_eq!(angular_distance(a, a), 0.0);
        let b = AngleAction::new(PI, FRAC_PI_2);
        assert!((angular_distance(a, b) - PI).abs() < 1e-12);
        let c = AngleAction::new(FRAC_PI_2, FRAC_PI_2);
        assert!((angular_distance(a, c) - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn intersect_wall() {
        let scene = test_box();
        let wall = scene
            .surfaces
            .iter()
            .find(|s| s.axis == Axis::X && (s.offset - 10.0).abs() < 1e-9)
            .unwrap();
        let (p, d) = intersect(
            Vec3::new(5.0, 5.0, 1.5),
            Vec3::new(1.0, 0.0, 0.0),
            wall,
        )
        .unwrap();
        assert_vec3_close(p, Vec3::new(10.0, 5.0, 1.5), 1e-12);
        assert!((d - 5.0).abs() < 1e-12);

        // Parallel ray misses.
        assert!(intersect(Vec3::new(5.0, 5.0, 1.5), Vec3::new(0.0, 1.0, 0.0), wall).is_none());
        // On the surface, pointing away: forward-only guard.
        assert!(intersect(Vec3::new(10.0, 5.0, 1.5), Vec3::new(-1.0, 0.0, 0.0), wall).is_none());
        assert!(intersect(Vec3::new(10.0, 5.0, 1.5), Vec3::new(1.0, 0.0, 0.0), wall).is_none());
    }

    #[test]
    fn reflect_floor_bounce() {
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        let d = Vec3::new(inv_sqrt2, 0.0, -inv_sqrt2);
        let r = reflect(d, Vec3::new(0.0, 0.0, 1.0));
        assert_vec3_close(r, Vec3::new(inv_sqrt2, 0.0, inv_sqrt2), 1e-12);

        let r = reflect(Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 0.0, 1.0));
        assert_vec3_close(r, Vec3::new(0.0, 0.0, 1.0), 1e-12);
    }

    #[test]
    fn in_bounds_closed() {
        let scene = test_box();
        assert!(in_bounds(&scene, Vec3::new(5.0, 5.0, 1.5)));
        assert!(in_bounds(&scene, Vec3::ZERO));
        assert!(in_bounds(&scene, Vec3::new(10.0, 10.0, 3.0)));
        assert!(!in_bounds(&scene, Vec3::new(10.001, 5.0, 1.5)));
        assert!(!in_bounds(&scene, Vec3::new(5.0, -0.001, 1.5)));
    }

    #[test]
    fn scene_validation_catches_defects() {
        let mut scene = test_box();
        assert!(scene.validate().is_ok());

        let removed = scene.surfaces.pop().unwrap();
        assert!(scene.validate().is_err());
        scene.surfaces.push(removed.clone());

        // Coplanar overlap with a boundary face.
        scene.surfaces.push(removed);
        assert!(scene.validate().is_err());
    }

    proptest! {
        #[test]
        fn dir_from_angles_unit_norm(phi in 0.0..(2.0 * PI), theta in 0.0..PI) {
            let v = dir_from_angles(AngleAction::new(phi, theta));
            prop_assert!((v.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn reflect_is_involution(phi in 0.0..(2.0 * PI), theta in 0.0..PI, ax in 0usize..3) {
            let d = dir_from_angles(AngleAction::new(phi, theta));
            let n = Axis::ALL[ax].unit();
            let rr = reflect(reflect(d, n), n);
            prop_assert!(rr.distance(d) < 1e-9);
        }

        #[test]
        fn reflect_preserves_tangent(phi in 0.0..(2.0 * PI), theta in 0.0..PI, ax in 0usize..3) {
            let d = dir_from_angles(AngleAction::new(phi, theta));
            let n = Axis::ALL[ax].unit();
            let r = reflect(d, n);
            let tangent_in = d - n * d.dot(n);
            let tangent_out = r - n * r.dot(n);
            prop_assert!(tangent_in.distance(tangent_out) < 1e-9);
        }

        #[test]
        fn angular_distance_triangle_inequality(
            p1 in 0.0..(2.0 * PI), t1 in 0.0..PI,
            p2 in 0.0..(2.0 * PI), t2 in 0.0..PI,
            p3 in 0.0..(2.0 * PI), t3 in 0.0..PI,
        ) {
            let a = AngleAction::new(p1, t1);
            let b = AngleAction::new(p2, t2);
            let c = AngleAction::new(p3, t3);
            prop_assert!(
                angular_distance(a, c) <= angular_distance(a, b) + angular_distance(b, c) + 1e-9
            );
        }
    }
}
