//! Fibonacci-sphere data augmentation: quasi-uniform direction lattice,
//! Gaussian action perturbation snapped to the lattice, and physically
//! consistent re-tracing of perturbed sequences through the simulator.

use crate::dataset::{compute_returns_to_go, SbsRecord};
use crate::geometry::{angles_from_unit, dir_from_angles, AngleAction, Scene, Vec3};
use crate::rewards::{r_sbs, RewardConfig};
use crate::tracer::{step, Hop, InteractionType, RaySequence, TraceConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Augmentation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FibConfig {
    /// Lattice size used for snapping perturbed directions.
    pub n_points: usize,
    pub sigma_phi: f64,
    pub sigma_theta: f64,
    /// Augmented sequences drawn per ground-truth ray.
    pub per_ray_augments: usize,
    pub seed: u64,
}

impl Default for FibConfig {
    fn default() -> Self {
        FibConfig {
            n_points: 4096,
            sigma_phi: 0.05,
            sigma_theta: 0.05,
            per_ray_augments: 4,
            seed: 0,
        }
    }
}

/// Deterministic Fibonacci-sphere lattice: `z_i = 1 - (2i+1)/n`,
/// `phi_i = i * 2pi * (2 - golden_ratio)`.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    assert!(n >= 1, "lattice needs at least one point");
    let golden_angle = 2.0 * std::f64::consts::PI * (2.0 - (1.0 + 5.0_f64.sqrt()) / 2.0);
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden_angle * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Precomputed lattice for repeated snapping.
#[derive(Debug, Clone)]
pub struct FibLattice {
    dirs: Vec<Vec3>,
}

impl FibLattice {
    pub fn new(n_points: usize) -> Self {
        FibLattice { dirs: fibonacci_sphere(n_points) }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Nearest lattice direction by maximum dot product; ties keep the
    /// first index.
    pub fn snap(&self, dir: Vec3) -> AngleAction {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, d) in self.dirs.iter().enumerate() {
            let dot = d.dot(dir);
            if dot > best_dot {
                best_dot = dot;
                best = i;
            }
        }
        angles_from_unit(self.dirs[best])
    }
}

/// Gaussian offsets on (phi, theta) followed by a lattice snap; zero sigmas
/// return the snap of the input itself.
pub fn perturb_action<R: Rng>(
    a: AngleAction,
    lattice: &FibLattice,
    sigma_phi: f64,
    sigma_theta: f64,
    rng: &mut R,
) -> AngleAction {
    let dphi = if sigma_phi > 0.0 {
        Normal::new(0.0, sigma_phi).expect("finite sigma").sample(rng)
    } else {
        0.0
    };
    let dtheta = if sigma_theta > 0.0 {
        Normal::new(0.0, sigma_theta).expect("finite sigma").sample(rng)
    } else {
        0.0
    };
    let moved = AngleAction::new(a.phi() + dphi, a.theta() + dtheta);
    lattice.snap(dir_from_angles(moved))
}

fn attempt_rng(cfg: &FibConfig, ray_seed: u64, attempt: u64) -> ChaCha20Rng {
    // splitmix-style mixing keeps draws independent per (seed, ray, attempt).
    let mut x = cfg
        .seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(ray_seed.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(attempt.wrapping_mul(0x94d0_49bb_1331_11eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    ChaCha20Rng::seed_from_u64(x)
}

fn classify(reflective: bool, transmissive: bool, original: Option<InteractionType>) -> InteractionType {
    match (reflective, transmissive) {
        (true, false) => InteractionType::Reflection,
        (false, _) => InteractionType::Penetration,
        (true, true) => match original {
            Some(InteractionType::Penetration) => InteractionType::Penetration,
            _ => InteractionType::Reflection,
        },
    }
}

/// Draws `per_ray_augments` perturbed variants of a reached ray. Each hop
/// action is perturbed and the sequence is re-propagated from tx through
/// the simulator, so states stay on true surfaces and interaction types are
/// recomputed. Attempts whose segment leaves the environment are truncated
/// at the exit hop. The terminal reward is recomputed against the pair's
/// ground-truth set; records are marked augmented.
pub fn fib_augment(
    r: &RaySequence,
    scene: &Scene,
    rx: Vec3,
    cfg: &FibConfig,
    _trace_cfg: &TraceConfig,
    gt_set: &[SbsRecord],
    reward_cfg: &RewardConfig,
    ray_seed: u64,
) -> Vec<SbsRecord> {
    assert!(r.reached, "augmentation takes reached rays");
    let lattice = FibLattice::new(cfg.n_points);
    let mut out = Vec::with_capacity(cfg.per_ray_augments);
    for attempt in 0..cfg.per_ray_augments {
        let mut rng = attempt_rng(cfg, ray_seed, attempt as u64);
        let mut hops: Vec<Hop> = Vec::with_capacity(r.hops.len());
        let mut cur_state = r.tx;
        let mut cur_type = InteractionType::Launch;
        for (j, orig) in r.hops.iter().enumerate() {
            let action = perturb_action(orig.action, &lattice, cfg.sigma_phi, cfg.sigma_theta, &mut rng);
            hops.push(Hop { state: cur_state, action, itype: cur_type });
            if j + 1 == r.hops.len() {
                break;
            }
            let origin = if j == 0 {
                cur_state
            } else {
                cur_state + dir_from_angles(action) * crate::geometry::LAUNCH_OFFSET
            };
            match step(scene, origin, action) {
                Ok(hit) => {
                    cur_state = hit.point;
                    cur_type = classify(
                        hit.reflective,
                        hit.transmissive,
                        r.hops.get(j + 1).map(|h| h.itype),
                    );
                }
                Err(_) => break, // exited the environment; keep the prefix
            }
        }
        let rec = SbsRecord {
            tx: r.tx,
            rx,
            hops,
            reward_to_go: Vec::new(),
            is_augmented: true,
        };
        let reward = r_sbs(&rec, gt_set, scene, rx, reward_cfg).unwrap_or(f64::NEG_INFINITY);
        out.push(compute_returns_to_go(rec, reward));
    }
    out
}

/// Seeded shuffle of the concatenated ground-truth and augmented records.
pub fn shuffle_mix<R: Rng>(
    gt: Vec<SbsRecord>,
    aug: Vec<SbsRecord>,
    rng: &mut R,
) -> Vec<SbsRecord> {
    use rand::seq::SliceRandom;
    let mut all = gt;
    all.extend(aug);
    all.shuffle(rng);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::segment_ray;
    use crate::geometry::{box_scene, Material};
    use crate::tracer::{shoot_and_bounce, TraceConfig};

    fn scene() -> Scene {
        box_scene(
            "box",
            Vec3::ZERO,
            Vec3::new(10.0, 10.0, 3.0),
            Material {
                name: "concrete".into(),
                reflective: true,
                transmissive: false,
                reflection_loss_db: 6.0,
                transmission_loss_db: 0.0,
            },
        )
    }

    #[test]
    fn lattice_small_cases() {
        let one = fibonacci_sphere(1);
        assert_eq!(one.len(), 1);
        assert!(one[0].distance(Vec3::new(1.0, 0.0, 0.0)) < 1e-12);

        let two = fibonacci_sphere(2);
        assert!((two[0].z - 0.5).abs() < 1e-12);
        assert!((two[1].z + 0.5).abs() < 1e-12);
    }

    #[test]
    fn lattice_min_separation_n100() {
        let pts = fibonacci_sphere(100);
        let mut min_angle = f64::INFINITY;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let a = pts[i].dot(pts[j]).clamp(-1.0, 1.0).acos();
                min_angle = min_angle.min(a);
            }
        }
        assert!((0.25..=0.45).contains(&min_angle), "min angle {min_angle}");
    }

    #[test]
    fn lattice_unit_norm_and_distinct() {
        let pts = fibonacci_sphere(4096);
        for p in &pts {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
        for w in pts.windows(2) {
            assert!(w[0].distance(w[1]) > 1e-9);
        }
    }

    #[test]
    fn snap_covers_with_dense_lattice() {
        let lattice = FibLattice::new(16384);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = AngleAction::new(
                rng.gen::<f64>() * std::f64::consts::TAU,
                rng.gen::<f64>() * std::f64::consts::PI,
            );
            let snapped = perturb_action(a, &lattice, 0.0, 0.0, &mut rng);
            assert!(crate::geometry::angular_distance(a, snapped) < 0.05);
        }
    }

    #[test]
    fn perturb_is_reproducible() {
        let lattice = FibLattice::new(1024);
        let a = AngleAction::new(1.0, 1.2);
        let one = perturb_action(a, &lattice, 0.1, 0.1, &mut ChaCha20Rng::seed_from_u64(9));
        let two = perturb_action(a, &lattice, 0.1, 0.1, &mut ChaCha20Rng::seed_from_u64(9));
        assert_eq!(one, two);
    }

    fn traced_pair() -> (Scene, Vec3, Vec3, Vec<RaySequence>) {
        let scene = scene();
        let tx = Vec3::new(3.0, 4.0, 1.5);
        let rx = Vec3::new(7.0, 6.0, 1.5);
        let cfg = TraceConfig { n_dirs: 2048, ..TraceConfig::default() };
        let rays = shoot_and_bounce(&scene, tx, rx, &cfg).unwrap();
        (scene, tx, rx, rays)
    }

    #[test]
    fn augmented_states_stay_on_surfaces() {
        let (scene, _tx, rx, rays) = traced_pair();
        let gt: Vec<SbsRecord> = rays.iter().map(|r| segment_ray(r).unwrap()).collect();
        let cfg = FibConfig { per_ray_augments: 3, seed: 2, ..FibConfig::default() };
        let rcfg = RewardConfig::default();
        let multi_hop = rays.iter().find(|r| r.hops.len() >= 2).expect("bounced ray");
        let augs = fib_augment(multi_hop, &scene, rx, &cfg, &TraceConfig::default(), &gt, &rcfg, 0);
        assert_eq!(augs.len(), 3);
        for a in &augs {
            assert!(a.is_augmented);
            for h in a.hops.iter().skip(1) {
                let on_surface = scene
                    .surfaces
                    .iter()
                    .any(|s| (h.state.axis(s.axis) - s.offset).abs() < 1e-9);
                assert!(on_surface);
            }
            // Constant returns-to-go, recomputed per attempt.
            assert_eq!(a.reward_to_go.len(), a.hops.len());
            for w in a.reward_to_go.windows(2) {
                assert_eq!(w[0], w[1]);
            }
        }
    }

    #[test]
    fn sigma_zero_stays_near_original() {
        let (scene, _tx, rx, rays) = traced_pair();
        let gt: Vec<SbsRecord> = rays.iter().map(|r| segment_ray(r).unwrap()).collect();
        let cfg = FibConfig {
            n_points: 16384,
            sigma_phi: 0.0,
            sigma_theta: 0.0,
            per_ray_augments: 1,
            seed: 0,
        };
        let rcfg = RewardConfig::default();
        for r in rays.iter().take(4) {
            let augs = fib_augment(r, &scene, rx, &cfg, &TraceConfig::default(), &gt, &rcfg, 1);
            let a = &augs[0];
            assert_eq!(a.len(), r.hops.len());
            for (ha, hr) in a.hops.iter().zip(&r.hops) {
                assert!(ha.state.distance(hr.state) < 0.3, "drifted {:?}", ha.state);
            }
        }
    }

    #[test]
    fn augmented_rewards_below_gt_reward() {
        let (scene, _tx, rx, rays) = traced_pair();
        let gt: Vec<SbsRecord> = rays.iter().map(|r| segment_ray(r).unwrap()).collect();
        let rcfg = RewardConfig::default();
        let cfg = FibConfig {
            sigma_phi: 0.1,
            sigma_theta: 0.1,
            per_ray_augments: 8,
            seed: 4,
            ..FibConfig::default()
        };
        let gt_reward = rcfg.max_return();
        let mut below = 0usize;
        let mut total = 0usize;
        for (i, r) in rays.iter().enumerate() {
            for a in fib_augment(r, &scene, rx, &cfg, &TraceConfig::default(), &gt, &rcfg, i as u64) {
                total += 1;
                if a.reward_to_go[0] <= gt_reward {
                    below += 1;
                }
            }
        }
        assert!(total >= 8);
        assert!(below as f64 >= 0.95 * total as f64, "{below}/{total}");
    }

    #[test]
    fn shuffle_mix_preserves_multiset() {
        let (_, _, rx, rays) = traced_pair();
        let gt: Vec<SbsRecord> = rays.iter().map(|r| segment_ray(r).unwrap()).collect();
        let mut aug = gt.clone();
        for a in &mut aug {
            a.is_augmented = true;
            a.rx = rx;
        }
        let n_gt = gt.len();
        let mut rng1 = ChaCha20Rng::seed_from_u64(3);
        let mixed = shuffle_mix(gt.clone(), aug.clone(), &mut rng1);
        assert_eq!(mixed.len(), n_gt * 2);
        for rec in &gt {
            assert!(mixed.iter().filter(|m| *m == rec).count() >= 1);
        }
        let mut rng2 = ChaCha20Rng::seed_from_u64(3);
        let mixed2 = shuffle_mix(gt, aug, &mut rng2);
        assert_eq!(mixed, mixed2);
    }
}
