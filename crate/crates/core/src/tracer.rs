//! Deterministic shooting-and-bouncing-ray simulator: single-segment
//! transitions, exhaustive Fibonacci-lattice ray search per (Tx, Rx) pair,
//! receiver capture, and an analytic image-method oracle for tests.
//!
//! `max_depth` counts surface interactions after launch, so a sequence has
//! at most `max_depth + 1` hops (launch included). Penetration through a
//! boundary face would leave the environment and is never branched.

use crate::augment::fibonacci_sphere;
use crate::geometry::{
    self, angles_from_unit, dir_from_angles, in_bounds, intersect, reflect, AngleAction, Scene,
    Vec3, LAUNCH_OFFSET,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("ray from {origin:?} toward {dir:?} escaped all surfaces; scene is malformed")]
    NoIntersection { origin: Vec3, dir: Vec3 },
    #[error("endpoint {0:?} outside scene bounds")]
    EndpointOutOfBounds(Vec3),
    #[error("tx and rx coincide at {0:?}")]
    CoincidentEndpoints(Vec3),
    #[error("empty location set: {0}")]
    EmptyLocationSet(&'static str),
    #[error("invalid trace config: {0}")]
    InvalidConfig(String),
}

/// Per-hop interaction label. Ground truth emits only `Launch`,
/// `Reflection` and `Penetration`; `Diffraction` and `Arrival` exist for
/// classifier-head completeness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionType {
    Launch,
    Reflection,
    Diffraction,
    Penetration,
    Arrival,
}

impl InteractionType {
    pub const COUNT: usize = 5;

    pub fn class_index(self) -> usize {
        match self {
            InteractionType::Launch => 0,
            InteractionType::Reflection => 1,
            InteractionType::Diffraction => 2,
            InteractionType::Penetration => 3,
            InteractionType::Arrival => 4,
        }
    }

    pub fn from_class_index(i: usize) -> Option<InteractionType> {
        match i {
            0 => Some(InteractionType::Launch),
            1 => Some(InteractionType::Reflection),
            2 => Some(InteractionType::Diffraction),
            3 => Some(InteractionType::Penetration),
            4 => Some(InteractionType::Arrival),
            _ => None,
        }
    }
}

/// One step of a ray sequence: the state `s_i`, the outgoing action `a_i`,
/// and the interaction type attributed to `s_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hop {
    pub state: Vec3,
    pub action: AngleAction,
    pub itype: InteractionType,
}

/// A shooting-and-bouncing sequence between one (tx, rx) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySequence {
    pub hops: Vec<Hop>,
    pub tx: Vec3,
    pub rx: Vec3,
    pub reached: bool,
    pub miss_distance: f64,
    pub path_length: f64,
}

impl RaySequence {
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = AngleAction> + '_ {
        self.hops.iter().map(|h| h.action)
    }
}

/// Search parameters for the exhaustive SBS pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Number of Fibonacci-lattice launch directions.
    pub n_dirs: usize,
    /// Maximum surface interactions after launch (hops per ray <= max_depth + 1).
    pub max_depth: usize,
    /// Receiver capture radius, meters.
    pub d0: f64,
    /// Per-pair cap on retained rays.
    pub max_rays: usize,
    pub allow_penetration: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            n_dirs: 4096,
            max_depth: 2,
            d0: 0.3,
            max_rays: 30,
            allow_penetration: true,
        }
    }
}

impl TraceConfig {
    /// Maximum hop count of any ray under this config.
    pub fn l_max(&self) -> usize {
        self.max_depth + 1
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.n_dirs < 1 {
            return Err(TraceError::InvalidConfig("n_dirs must be >= 1".into()));
        }
        if self.max_depth < 1 {
            return Err(TraceError::InvalidConfig("max_depth must be >= 1".into()));
        }
        if !(self.d0 > 0.0) {
            return Err(TraceError::InvalidConfig(format!("d0 = {} must be > 0", self.d0)));
        }
        if self.max_rays < 1 {
            return Err(TraceError::InvalidConfig("max_rays must be >= 1".into()));
        }
        Ok(())
    }
}

/// Traced ground truth for a set of (tx, rx) pairs in one scene.
#[derive(Debug, Clone)]
pub struct RayDataset {
    pub scene_id: String,
    pub trace_config: TraceConfig,
    pub records: Vec<PairRecord>,
}

#[derive(Debug, Clone)]
pub struct PairRecord {
    pub tx: Vec3,
    pub rx: Vec3,
    pub rays: Vec<RaySequence>,
}

/// Outcome of casting one segment from `s` along `a`.
#[derive(Debug, Clone, Copy)]
pub struct Step {
    /// Nearest surface point hit.
    pub point: Vec3,
    pub distance: f64,
    pub surface: usize,
    /// Primary interaction label: `Reflection` when the material reflects,
    /// `Penetration` when it only transmits.
    pub itype: InteractionType,
    /// Specular continuation off the hit surface.
    pub reflect_action: AngleAction,
    pub reflective: bool,
    /// True if the material transmits and the surface is not a boundary face.
    pub transmissive: bool,
}

fn nearest_hit(scene: &Scene, origin: Vec3, dir: Vec3) -> Option<(usize, Vec3, f64)> {
    let mut best: Option<(usize, Vec3, f64)> = None;
    for (i, s) in scene.surfaces.iter().enumerate() {
        if let Some((p, t)) = intersect(origin, dir, s) {
            match best {
                Some((_, _, bt)) if bt <= t => {}
                _ => best = Some((i, p, t)),
            }
        }
    }
    best
}

fn is_boundary_surface(scene: &Scene, idx: usize) -> bool {
    let s = &scene.surfaces[idx];
    let lo = scene.bounds_min.axis(s.axis);
    let hi = scene.bounds_max.axis(s.axis);
    (s.offset - lo).abs() < 1e-9 || (s.offset - hi).abs() < 1e-9
}

/// Single transition: casts from `s` along `a` to the nearest surface.
pub fn step(scene: &Scene, s: Vec3, a: AngleAction) -> Result<Step, TraceError> {
    let dir = dir_from_angles(a);
    let (surface, point, distance) =
        nearest_hit(scene, s, dir).ok_or(TraceError::NoIntersection { origin: s, dir })?;
    let mat = &scene.surfaces[surface].material;
    let normal = scene.surfaces[surface].axis.unit();
    let reflect_dir = reflect(dir, normal);
    let transmissive = mat.transmissive && !is_boundary_surface(scene, surface);
    let itype = if mat.reflective {
        InteractionType::Reflection
    } else {
        InteractionType::Penetration
    };
    Ok(Step {
        point,
        distance,
        surface,
        itype,
        reflect_action: angles_from_unit(reflect_dir),
        reflective: mat.reflective,
        transmissive,
    })
}

/// Minimum distance from `rx` to the closed segment, and whether it is
/// within the capture radius.
pub fn receiver_check(rx: Vec3, d0: f64, seg_start: Vec3, seg_end: Vec3) -> (bool, f64) {
    let miss = rx.distance(closest_point_on_segment(rx, seg_start, seg_end));
    (miss <= d0, miss)
}

fn closest_point_on_segment(p: Vec3, a: Vec3, b: Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// True when no surface blocks the open segment (a, b).
pub fn segment_unobstructed(scene: &Scene, a: Vec3, b: Vec3) -> bool {
    let d = b - a;
    let len = d.norm();
    if len < geometry::HIT_GUARD {
        return true;
    }
    let dir = d / len;
    for s in &scene.surfaces {
        if let Some((_, t)) = intersect(a, dir, s) {
            if t < len - 1e-6 {
                return false;
            }
        }
    }
    true
}

struct Candidate {
    pos: Vec3,
    dir: Vec3,
    hops: Vec<Hop>,
    path_len: f64,
    bounces: usize,
}

// Live-branch cap per launch direction; dual-material branching doubles
// candidates, so this bounds total work at 4x n_dirs.
const BRANCH_CAP: usize = 4;

fn trace_one_direction(
    scene: &Scene,
    tx: Vec3,
    rx: Vec3,
    cfg: &TraceConfig,
    launch_dir: Vec3,
) -> Result<Vec<RaySequence>, TraceError> {
    let launch = Candidate {
        pos: tx,
        dir: launch_dir,
        hops: vec![Hop {
            state: tx,
            action: angles_from_unit(launch_dir),
            itype: InteractionType::Launch,
        }],
        path_len: 0.0,
        bounces: 0,
    };
    let mut stack = vec![launch];
    let mut reached = Vec::new();
    while let Some(c) = stack.pop() {
        // Offset after a bounce avoids re-hitting the surface just left.
        let origin = if c.bounces == 0 { c.pos } else { c.pos + c.dir * LAUNCH_OFFSET };
        let hit = step(scene, origin, angles_from_unit(c.dir))?;
        let (captured, miss) = receiver_check(rx, cfg.d0, c.pos, hit.point);
        if captured {
            let capture = closest_point_on_segment(rx, c.pos, hit.point);
            reached.push(RaySequence {
                path_length: c.path_len + c.pos.distance(capture),
                hops: c.hops,
                tx,
                rx,
                reached: true,
                miss_distance: miss,
            });
            continue;
        }
        if c.bounces >= cfg.max_depth {
            continue;
        }
        let path_len = c.path_len + c.pos.distance(hit.point);
        let mut branched = false;
        if hit.reflective {
            let dir = dir_from_angles(hit.reflect_action);
            let mut hops = c.hops.clone();
            hops.push(Hop {
                state: hit.point,
                action: hit.reflect_action,
                itype: InteractionType::Reflection,
            });
            stack.push(Candidate {
                pos: hit.point,
                dir,
                hops,
                path_len,
                bounces: c.bounces + 1,
            });
            branched = true;
        }
        if hit.transmissive && cfg.allow_penetration && (!branched || stack.len() < BRANCH_CAP) {
            let mut hops = c.hops;
            hops.push(Hop {
                state: hit.point,
                action: angles_from_unit(c.dir),
                itype: InteractionType::Penetration,
            });
            stack.push(Candidate {
                pos: hit.point,
                dir: c.dir,
                hops,
                path_len,
                bounces: c.bounces + 1,
            });
        }
    }
    Ok(reached)
}

fn states_within(a: &RaySequence, b: &RaySequence, tol: f64) -> bool {
    a.hops.len() == b.hops.len()
        && a.hops
            .iter()
            .zip(&b.hops)
            .all(|(ha, hb)| ha.state.distance(hb.state) <= tol)
}

/// Total order on rays used for the deterministic final sort.
fn ray_order(a: &RaySequence, b: &RaySequence) -> std::cmp::Ordering {
    a.path_length
        .total_cmp(&b.path_length)
        .then(a.hops.len().cmp(&b.hops.len()))
        .then_with(|| {
            for (ha, hb) in a.hops.iter().zip(&b.hops) {
                for (ca, cb) in ha.state.to_array().iter().zip(hb.state.to_array()) {
                    let o = ca.total_cmp(&cb);
                    if o != std::cmp::Ordering::Equal {
                        return o;
                    }
                }
            }
            std::cmp::Ordering::Equal
        })
}

/// Analytic line-of-sight ray, present when no surface blocks the pair.
pub fn line_of_sight(scene: &Scene, tx: Vec3, rx: Vec3) -> Option<RaySequence> {
    if !segment_unobstructed(scene, tx, rx) {
        return None;
    }
    let dir = (rx - tx).normalized();
    Some(RaySequence {
        hops: vec![Hop {
            state: tx,
            action: angles_from_unit(dir),
            itype: InteractionType::Launch,
        }],
        tx,
        rx,
        reached: true,
        miss_distance: 0.0,
        path_length: tx.distance(rx),
    })
}

/// Exhaustive SBS search: launches `cfg.n_dirs` Fibonacci-lattice directions
/// from `tx`, propagates with branching on dual materials, keeps rays whose
/// segments pass the receiver check, deduplicates near-identical hop chains
/// (states within `d0/2`, shorter path wins) and returns at most
/// `cfg.max_rays` rays sorted by path length. The analytic line-of-sight
/// ray, when unobstructed, replaces any single-hop lattice find.
pub fn shoot_and_bounce(
    scene: &Scene,
    tx: Vec3,
    rx: Vec3,
    cfg: &TraceConfig,
) -> Result<Vec<RaySequence>, TraceError> {
    cfg.validate()?;
    if !in_bounds(scene, tx) {
        return Err(TraceError::EndpointOutOfBounds(tx));
    }
    if !in_bounds(scene, rx) {
        return Err(TraceError::EndpointOutOfBounds(rx));
    }
    if tx.distance(rx) < geometry::HIT_GUARD {
        return Err(TraceError::CoincidentEndpoints(tx));
    }

    let dirs = fibonacci_sphere(cfg.n_dirs);
    let per_dir: Result<Vec<Vec<RaySequence>>, TraceError> = dirs
        .par_iter()
        .map(|d| trace_one_direction(scene, tx, rx, cfg, *d))
        .collect();

    let mut kept: Vec<RaySequence> = Vec::new();
    for ray in per_dir?.into_iter().flatten() {
        match kept.iter_mut().find(|k| states_within(k, &ray, cfg.d0 / 2.0)) {
            Some(dup) => {
                if ray.path_length < dup.path_length {
                    *dup = ray;
                }
            }
            None => kept.push(ray),
        }
    }

    if let Some(los) = line_of_sight(scene, tx, rx) {
        kept.retain(|r| r.hops.len() > 1);
        kept.push(los);
    }

    kept.sort_by(ray_order);
    kept.truncate(cfg.max_rays);
    Ok(kept)
}

fn mirror(p: Vec3, s: &crate::geometry::Surface) -> Vec3 {
    p.with_axis(s.axis, 2.0 * s.offset - p.axis(s.axis))
}

fn plane_crossing(from: Vec3, to: Vec3, s: &crate::geometry::Surface) -> Option<Vec3> {
    let a = from.axis(s.axis);
    let b = to.axis(s.axis);
    let denom = b - a;
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (s.offset - a) / denom;
    if !(t > 1e-9 && t < 1.0 - 1e-9) {
        return None;
    }
    let p = (from + (to - from) * t).with_axis(s.axis, s.offset);
    let [u, v] = s.plane_coords(p);
    let inside = u >= s.rect_min[0] && u <= s.rect_max[0] && v >= s.rect_min[1] && v <= s.rect_max[1];
    inside.then_some(p)
}

fn sequence_from_points(tx: Vec3, rx: Vec3, points: &[Vec3]) -> RaySequence {
    let mut hops = Vec::with_capacity(points.len() + 1);
    let mut chain = Vec::with_capacity(points.len() + 2);
    chain.push(tx);
    chain.extend_from_slice(points);
    chain.push(rx);
    let mut path_length = 0.0;
    for i in 0..chain.len() - 1 {
        path_length += chain[i].distance(chain[i + 1]);
        let dir = (chain[i + 1] - chain[i]).normalized();
        hops.push(Hop {
            state: chain[i],
            action: angles_from_unit(dir),
            itype: if i == 0 {
                InteractionType::Launch
            } else {
                InteractionType::Reflection
            },
        });
    }
    RaySequence {
        hops,
        tx,
        rx,
        reached: true,
        miss_distance: 0.0,
        path_length,
    }
}

/// Analytic specular paths of exactly the given reflection order (0 = line
/// of sight) via mirror images, with occlusion checked on every leg. Valid
/// for axis-aligned reflective surfaces; used as the test oracle.
pub fn image_method_reference(scene: &Scene, tx: Vec3, rx: Vec3, order: usize) -> Vec<RaySequence> {
    let mut out = Vec::new();
    match order {
        0 => {
            if let Some(ray) = line_of_sight(scene, tx, rx) {
                out.push(ray);
            }
        }
        1 => {
            for s in scene.surfaces.iter().filter(|s| s.material.reflective) {
                let img = mirror(tx, s);
                let Some(p) = plane_crossing(img, rx, s) else { continue };
                if segment_unobstructed(scene, tx, p) && segment_unobstructed(scene, p, rx) {
                    out.push(sequence_from_points(tx, rx, &[p]));
                }
            }
        }
        2 => {
            let n = scene.surfaces.len();
            for i in 0..n {
                if !scene.surfaces[i].material.reflective {
                    continue;
                }
                for j in 0..n {
                    if i == j || !scene.surfaces[j].material.reflective {
                        continue;
                    }
                    let s1 = &scene.surfaces[i];
                    let s2 = &scene.surfaces[j];
                    let m1 = mirror(tx, s1);
                    let m2 = mirror(m1, s2);
                    let Some(p2) = plane_crossing(m2, rx, s2) else { continue };
                    let Some(p1) = plane_crossing(m1, p2, s1) else { continue };
                    if segment_unobstructed(scene, tx, p1)
                        && segment_unobstructed(scene, p1, p2)
                        && segment_unobstructed(scene, p2, rx)
                    {
                        out.push(sequence_from_points(tx, rx, &[p1, p2]));
                    }
                }
            }
        }
        _ => {}
    }
    out.sort_by(ray_order);
    out
}

/// Replays an action sequence from `tx` through the scene, recomputing
/// states and geometric interaction types; stops at receiver capture, on
/// exiting the environment, or after the last action. Used to materialize
/// rays from action-only predictions.
pub fn retrace_actions(
    scene: &Scene,
    tx: Vec3,
    rx: Vec3,
    actions: &[AngleAction],
    d0: f64,
) -> RaySequence {
    let mut hops: Vec<Hop> = Vec::with_capacity(actions.len());
    let mut state = tx;
    let mut itype = InteractionType::Launch;
    let mut reached = false;
    let mut best_miss = f64::INFINITY;
    let mut path_length = 0.0;
    for (i, action) in actions.iter().enumerate() {
        hops.push(Hop { state, action: *action, itype });
        let origin = if i == 0 { state } else { state + dir_from_angles(*action) * LAUNCH_OFFSET };
        let Ok(hit) = step(scene, origin, *action) else { break };
        let (captured, miss) = receiver_check(rx, d0, state, hit.point);
        best_miss = best_miss.min(miss);
        if captured {
            reached = true;
            let capture = closest_point_on_segment(rx, state, hit.point);
            path_length += state.distance(capture);
            break;
        }
        path_length += state.distance(hit.point);
        state = hit.point;
        itype = if hit.reflective { InteractionType::Reflection } else { InteractionType::Penetration };
    }
    RaySequence { hops, tx, rx, reached, miss_distance: best_miss, path_length }
}

/// Traces every (tx, rx) pair; pairs with zero reached rays are retained
/// with an empty ray list.
pub fn generate_dataset(
    scene: &Scene,
    tx_set: &[Vec3],
    rx_set: &[Vec3],
    cfg: &TraceConfig,
) -> Result<RayDataset, TraceError> {
    if tx_set.is_empty() {
        return Err(TraceError::EmptyLocationSet("tx_set"));
    }
    if rx_set.is_empty() {
        return Err(TraceError::EmptyLocationSet("rx_set"));
    }
    let pairs: Vec<(Vec3, Vec3)> = tx_set
        .iter()
        .flat_map(|t| rx_set.iter().map(move |r| (*t, *r)))
        .collect();
    let records: Result<Vec<PairRecord>, TraceError> = pairs
        .par_iter()
        .map(|(tx, rx)| {
            let rays = shoot_and_bounce(scene, *tx, *rx, cfg)?;
            Ok(PairRecord { tx: *tx, rx: *rx, rays })
        })
        .collect();
    Ok(RayDataset {
        scene_id: scene.id.clone(),
        trace_config: cfg.clone(),
        records: records?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_scene, Material};

    pub(crate) fn concrete() -> Material {
        Material {
            name: "concrete".into(),
            reflective: true,
            transmissive: false,
            reflection_loss_db: 6.0,
            transmission_loss_db: 0.0,
        }
    }

    pub(crate) fn glass() -> Material {
        Material {
            name: "glass".into(),
            reflective: false,
            transmissive: true,
            reflection_loss_db: 0.0,
            transmission_loss_db: 8.0,
        }
    }

    pub(crate) fn empty_box() -> Scene {
        box_scene("box", Vec3::ZERO, Vec3::new(10.0, 10.0, 3.0), concrete())
    }

    fn glass_wall_box() -> Scene {
        let mut scene = empty_box();
        scene.surfaces.push(crate::geometry::Surface {
            axis: crate::geometry::Axis::X,
            offset: 7.0,
            rect_min: [0.0, 0.0],
            rect_max: [10.0, 3.0],
            material: glass(),
        });
        scene
    }

    #[test]
    fn step_reflects_off_wall() {
        let scene = empty_box();
        let out = step(
            &scene,
            Vec3::new(5.0, 5.0, 1.5),
            AngleAction::new(0.0, std::f64::consts::FRAC_PI_2),
        )
        .unwrap();
        assert!(out.point.distance(Vec3::new(10.0, 5.0, 1.5)) < 1e-9);
        assert_eq!(out.itype, InteractionType::Reflection);
        let cont = dir_from_angles(out.reflect_action);
        assert!(cont.distance(Vec3::new(-1.0, 0.0, 0.0)) < 1e-9);
    }

    #[test]
    fn step_penetrates_glass() {
        let scene = glass_wall_box();
        let a = AngleAction::new(0.0, std::f64::consts::FRAC_PI_2);
        let out = step(&scene, Vec3::new(5.0, 5.0, 1.5), a).unwrap();
        assert!(out.point.distance(Vec3::new(7.0, 5.0, 1.5)) < 1e-9);
        assert_eq!(out.itype, InteractionType::Penetration);
        assert!(out.transmissive);
        assert!(!out.reflective);
    }

    #[test]
    fn step_lands_on_some_surface_randomly() {
        let scene = glass_wall_box();
        let mut state = 42u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let s = Vec3::new(next() * 9.9 + 0.05, next() * 9.9 + 0.05, next() * 2.9 + 0.05);
            let a = AngleAction::new(next() * std::f64::consts::TAU, next() * std::f64::consts::PI);
            let out = step(&scene, s, a).unwrap();
            let on_surface = scene.surfaces.iter().any(|sf| {
                (out.point.axis(sf.axis) - sf.offset).abs() < 1e-9
            });
            assert!(on_surface, "step landed off-surface: {:?}", out.point);
        }
    }

    #[test]
    fn receiver_check_clamps_to_segment() {
        let rx = Vec3::new(5.0, 5.0, 1.5);
        let a = Vec3::new(0.0, 5.0, 1.5);
        let b = Vec3::new(10.0, 5.0, 1.5);
        let (hit, miss) = receiver_check(rx, 0.5, a, b);
        assert!(hit);
        assert!(miss.abs() < 1e-12);

        let (hit, miss) = receiver_check(Vec3::new(5.0, 5.6, 1.5), 0.5, a, b);
        assert!(!hit);
        assert!((miss - 0.6).abs() < 1e-12);

        // Beyond the segment end: distance to the endpoint.
        let (_, miss) = receiver_check(Vec3::new(12.0, 5.0, 1.5), 0.5, a, b);
        assert!((miss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn los_always_found_in_empty_box() {
        let scene = empty_box();
        let tx = Vec3::new(2.0, 3.0, 1.5);
        let rx = Vec3::new(8.0, 6.0, 1.2);
        let cfg = TraceConfig { n_dirs: 64, ..TraceConfig::default() };
        let rays = shoot_and_bounce(&scene, tx, rx, &cfg).unwrap();
        let los = rays.iter().find(|r| r.hops.len() == 1).expect("LOS ray present");
        assert!((los.path_length - tx.distance(rx)).abs() < 1e-12);
        assert_eq!(los.miss_distance, 0.0);
    }

    #[test]
    fn max_rays_cap_respected() {
        let scene = empty_box();
        let cfg = TraceConfig { n_dirs: 2048, max_depth: 2, max_rays: 3, ..TraceConfig::default() };
        let rays =
            shoot_and_bounce(&scene, Vec3::new(3.0, 4.0, 1.5), Vec3::new(6.0, 5.5, 1.5), &cfg)
                .unwrap();
        assert!(rays.len() <= 3);
        // Sorted ascending by path length.
        for w in rays.windows(2) {
            assert!(w[0].path_length <= w[1].path_length);
        }
    }

    #[test]
    fn image_method_order0_is_los() {
        let scene = empty_box();
        let tx = Vec3::new(2.0, 2.0, 1.0);
        let rx = Vec3::new(7.0, 8.0, 2.0);
        let rays = image_method_reference(&scene, tx, rx, 0);
        assert_eq!(rays.len(), 1);
        assert!((rays[0].path_length - tx.distance(rx)).abs() < 1e-12);
    }

    #[test]
    fn image_method_order1_box_has_six_rays() {
        let scene = empty_box();
        let rays =
            image_method_reference(&scene, Vec3::new(3.0, 4.0, 1.5), Vec3::new(6.0, 5.5, 1.2), 1);
        assert_eq!(rays.len(), 6);
        for r in &rays {
            assert_eq!(r.hops.len(), 2);
            assert_eq!(r.hops[1].itype, InteractionType::Reflection);
        }
    }

    #[test]
    fn image_method_bounce_point_matches_mirror_construction() {
        // Bounce off the x = 10 wall, computed here independently.
        let tx = Vec3::new(2.0, 5.0, 1.5);
        let rx = Vec3::new(8.0, 5.0, 1.5);
        let img = Vec3::new(18.0, 5.0, 1.5); // mirror of tx across x = 10
        let t = (10.0 - img.x) / (rx.x - img.x);
        let expect = img + (rx - img) * t;

        let scene = empty_box();
        let rays = image_method_reference(&scene, tx, rx, 1);
        let wall_ray = rays
            .iter()
            .find(|r| (r.hops[1].state.x - 10.0).abs() < 1e-9)
            .expect("x=10 wall reflection");
        assert!(wall_ray.hops[1].state.distance(expect) < 1e-9);
    }

    #[test]
    fn sbs_recovers_first_order_reflections() {
        let scene = empty_box();
        let tx = Vec3::new(4.0, 4.5, 1.5);
        let rx = Vec3::new(6.0, 5.5, 1.5);
        let cfg = TraceConfig { n_dirs: 4096, max_depth: 2, d0: 0.3, max_rays: 30, allow_penetration: true };
        let rays = shoot_and_bounce(&scene, tx, rx, &cfg).unwrap();
        let oracle = image_method_reference(&scene, tx, rx, 1);
        assert_eq!(oracle.len(), 6);
        for want in &oracle {
            let found = rays.iter().any(|r| {
                r.hops.len() == want.hops.len()
                    && r.hops
                        .iter()
                        .zip(&want.hops)
                        .all(|(a, b)| a.state.distance(b.state) <= cfg.d0)
            });
            assert!(found, "missing first-order ray via {:?}", want.hops[1].state);
        }
    }

    #[test]
    fn penetration_preserves_direction_invariant() {
        let scene = glass_wall_box();
        let tx = Vec3::new(2.0, 5.0, 1.5);
        let rx = Vec3::new(9.0, 5.0, 1.5);
        let cfg = TraceConfig { n_dirs: 2048, ..TraceConfig::default() };
        let rays = shoot_and_bounce(&scene, tx, rx, &cfg).unwrap();
        assert!(!rays.is_empty());
        let mut saw_penetration = false;
        for r in &rays {
            for w in r.hops.windows(2) {
                if w[1].itype == InteractionType::Penetration {
                    saw_penetration = true;
                    let before = dir_from_angles(w[0].action);
                    let after = dir_from_angles(w[1].action);
                    assert!(before.distance(after) < 1e-9);
                }
            }
        }
        assert!(saw_penetration, "glass wall should force penetration paths");
    }

    #[test]
    fn reflection_law_holds_on_traced_rays() {
        let scene = empty_box();
        let cfg = TraceConfig { n_dirs: 2048, ..TraceConfig::default() };
        let rays =
            shoot_and_bounce(&scene, Vec3::new(3.0, 4.0, 1.5), Vec3::new(6.0, 5.5, 1.2), &cfg)
                .unwrap();
        for r in &rays {
            for i in 1..r.hops.len() {
                if r.hops[i].itype != InteractionType::Reflection {
                    continue;
                }
                let state = r.hops[i].state;
                let axis = scene
                    .surfaces
                    .iter()
                    .find(|s| (state.axis(s.axis) - s.offset).abs() < 1e-6)
                    .map(|s| s.axis)
                    .expect("reflection state on a surface");
                let incoming = dir_from_angles(r.hops[i - 1].action);
                let outgoing = dir_from_angles(r.hops[i].action);
                let expect = reflect(incoming, axis.unit());
                assert!(outgoing.distance(expect) < 1e-9);
            }
        }
    }

    #[test]
    fn replay_reproduces_states() {
        let scene = glass_wall_box();
        let cfg = TraceConfig { n_dirs: 2048, ..TraceConfig::default() };
        let rays =
            shoot_and_bounce(&scene, Vec3::new(2.0, 4.0, 1.5), Vec3::new(9.0, 6.0, 1.2), &cfg)
                .unwrap();
        assert!(!rays.is_empty());
        for r in &rays {
            for i in 0..r.hops.len() - 1 {
                let offset = if i == 0 {
                    r.hops[i].state
                } else {
                    r.hops[i].state + dir_from_angles(r.hops[i].action) * LAUNCH_OFFSET
                };
                let out = step(&scene, offset, r.hops[i].action).unwrap();
                assert!(
                    out.point.distance(r.hops[i + 1].state) < 1e-6,
                    "replay diverged at hop {i}"
                );
            }
        }
    }

    #[test]
    fn dataset_covers_all_pairs_and_reaches() {
        let scene = empty_box();
        let tx_set = vec![Vec3::new(2.0, 2.0, 1.5)];
        let rx_set = vec![Vec3::new(8.0, 8.0, 1.0), Vec3::new(5.0, 7.0, 1.0)];
        let cfg = TraceConfig { n_dirs: 512, ..TraceConfig::default() };
        let ds = generate_dataset(&scene, &tx_set, &rx_set, &cfg).unwrap();
        assert_eq!(ds.records.len(), 2);
        for rec in &ds.records {
            assert!(!rec.rays.is_empty());
            assert!(rec.rays.iter().all(|r| r.reached));
            assert!(rec.rays.len() <= cfg.max_rays);
        }
    }

    #[test]
    fn trace_is_deterministic() {
        let scene = glass_wall_box();
        let cfg = TraceConfig { n_dirs: 1024, ..TraceConfig::default() };
        let tx = Vec3::new(2.0, 4.0, 1.5);
        let rx = Vec3::new(9.0, 6.0, 1.2);
        let a = shoot_and_bounce(&scene, tx, rx, &cfg).unwrap();
        let b = shoot_and_bounce(&scene, tx, rx, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
