//! Offline-RL dataset machinery: ray segmentation into training records,
//! train/test location splits, returns-to-go, padding/batching, and the
//! empirical statistics used for input standardization.

use crate::geometry::{in_bounds, Scene, Vec3};
use crate::tracer::{Hop, RaySequence};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Margin kept between generated locations and scene bounds, meters.
pub const SPLIT_MARGIN: f64 = 0.5;

/// Number of (phi, theta) bins in the initial-action histogram.
pub const RHO0_PHI_BINS: usize = 36;
pub const RHO0_THETA_BINS: usize = 18;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot segment an unreached ray")]
    UnreachedRay,
    #[error("record with {len} hops exceeds l_max = {l_max}")]
    RecordTooLong { len: usize, l_max: usize },
    #[error("empty record set")]
    EmptyRecords,
    #[error("split produced an empty {0} set")]
    EmptySplit(&'static str),
    #[error("invalid split spec: {0}")]
    BadSpec(String),
}

/// One training sequence: the hops of a (possibly augmented) SBS with its
/// returns-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct SbsRecord {
    pub tx: Vec3,
    pub rx: Vec3,
    pub hops: Vec<Hop>,
    /// Constant across steps: terminal-reward convention.
    pub reward_to_go: Vec<f64>,
    pub is_augmented: bool,
}

impl SbsRecord {
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }
}

/// Copies the hops of a reached ray into a record; returns-to-go are filled
/// later by [`compute_returns_to_go`].
pub fn segment_ray(r: &RaySequence) -> Result<SbsRecord, DatasetError> {
    if !r.reached {
        return Err(DatasetError::UnreachedRay);
    }
    Ok(SbsRecord {
        tx: r.tx,
        rx: r.rx,
        hops: r.hops.clone(),
        reward_to_go: vec![0.0; r.hops.len()],
        is_augmented: false,
    })
}

/// Terminal-only reward: every step carries the same return-to-go.
pub fn compute_returns_to_go(mut rec: SbsRecord, terminal_reward: f64) -> SbsRecord {
    rec.reward_to_go = vec![terminal_reward; rec.hops.len()];
    rec
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// Out-of-distribution Tx (grid parity), identical Rx locations.
    Checkerboard,
    /// Test Rx on a different horizontal plane.
    Genz,
    /// Test Rx sampled from a diagonal band absent from training.
    GenDiag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    /// Tx grid step, meters; the Rx grid uses half this step.
    pub grid_step: f64,
    pub rx_plane_train: f64,
    pub rx_plane_test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            kind: SplitKind::Checkerboard,
            grid_step: 1.0,
            rx_plane_train: 1.0,
            rx_plane_test: 2.0,
            seed: 0,
        }
    }
}

/// Transmitter/receiver location sets; pairs are the cross product.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub tx: Vec<Vec3>,
    pub rx: Vec<Vec3>,
}

impl PairSet {
    pub fn pairs(&self) -> impl Iterator<Item = (Vec3, Vec3)> + '_ {
        self.tx.iter().flat_map(move |t| self.rx.iter().map(move |r| (*t, *r)))
    }

    pub fn n_pairs(&self) -> usize {
        self.tx.len() * self.rx.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: PairSet,
    pub test: PairSet,
}

fn axis_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut x = lo + SPLIT_MARGIN;
    while x <= hi - SPLIT_MARGIN + 1e-9 {
        v.push(x);
        x += step;
    }
    v
}

fn plane_grid(scene: &Scene, step: f64, z: f64) -> Vec<(usize, usize, Vec3)> {
    let xs = axis_grid(scene.bounds_min.x, scene.bounds_max.x, step);
    let ys = axis_grid(scene.bounds_min.y, scene.bounds_max.y, step);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            out.push((i, j, Vec3::new(*x, *y, z)));
        }
    }
    out
}

/// Tx height above the floor; clamped into the scene with margin.
fn tx_plane(scene: &Scene) -> f64 {
    (scene.bounds_min.z + 1.5).min(scene.bounds_max.z - SPLIT_MARGIN)
}

/// Builds the train/test location split per the requested generalization
/// regime. All three kinds partition the Tx grid by cell parity, so train
/// and test pair sets are always disjoint.
pub fn make_splits(scene: &Scene, spec: &SplitSpec) -> Result<Splits, DatasetError> {
    if !(spec.grid_step > 0.0) {
        return Err(DatasetError::BadSpec(format!(
            "grid_step = {} must be > 0",
            spec.grid_step
        )));
    }
    for (label, z) in [("rx_plane_train", spec.rx_plane_train), ("rx_plane_test", spec.rx_plane_test)] {
        if z < scene.bounds_min.z + SPLIT_MARGIN - 1e-9 || z > scene.bounds_max.z - SPLIT_MARGIN + 1e-9 {
            return Err(DatasetError::BadSpec(format!(
                "{label} = {z} outside scene with margin {SPLIT_MARGIN}"
            )));
        }
    }
    if spec.kind != SplitKind::Checkerboard
        && (spec.rx_plane_train - spec.rx_plane_test).abs() < 1e-9
    {
        return Err(DatasetError::BadSpec(format!(
            "{:?} requires distinct train/test rx planes",
            spec.kind
        )));
    }

    let tx_grid = plane_grid(scene, spec.grid_step, tx_plane(scene));
    let (tx_train, tx_test): (Vec<_>, Vec<_>) =
        tx_grid.into_iter().partition(|(i, j, _)| (i + j) % 2 == 0);
    let tx_train: Vec<Vec3> = tx_train.into_iter().map(|(_, _, p)| p).collect();
    let tx_test: Vec<Vec3> = tx_test.into_iter().map(|(_, _, p)| p).collect();

    let rx_step = spec.grid_step / 2.0;
    let rx_train: Vec<Vec3> = plane_grid(scene, rx_step, spec.rx_plane_train)
        .into_iter()
        .map(|(_, _, p)| p)
        .collect();

    let rx_test: Vec<Vec3> = match spec.kind {
        SplitKind::Checkerboard => rx_train.clone(),
        SplitKind::Genz => plane_grid(scene, rx_step, spec.rx_plane_test)
            .into_iter()
            .map(|(_, _, p)| p)
            .collect(),
        SplitKind::GenDiag => diag_band_samples(scene, spec, &rx_train)?,
    };

    let splits = Splits {
        train: PairSet { tx: tx_train, rx: rx_train },
        test: PairSet { tx: tx_test, rx: rx_test },
    };
    if splits.train.tx.is_empty() || splits.train.rx.is_empty() {
        return Err(DatasetError::EmptySplit("train"));
    }
    if splits.test.tx.is_empty() || splits.test.rx.is_empty() {
        return Err(DatasetError::EmptySplit("test"));
    }
    debug_assert!(splits.train.pairs().all(|(t, r)| in_bounds(scene, t) && in_bounds(scene, r)));
    Ok(splits)
}

/// Seeded samples from a distribution absent from training: a diagonal band
/// of the floor plan with heights drawn between the two rx planes, kept at
/// least `grid_step / 2` away from every training receiver.
fn diag_band_samples(
    scene: &Scene,
    spec: &SplitSpec,
    rx_train: &[Vec3],
) -> Result<Vec<Vec3>, DatasetError> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ 0xd1a6_0000);
    let lo = Vec3::new(
        scene.bounds_min.x + SPLIT_MARGIN,
        scene.bounds_min.y + SPLIT_MARGIN,
        0.0,
    );
    let hi = Vec3::new(
        scene.bounds_max.x - SPLIT_MARGIN,
        scene.bounds_max.y - SPLIT_MARGIN,
        0.0,
    );
    let z_lo = spec.rx_plane_train.min(spec.rx_plane_test);
    let z_hi = spec.rx_plane_train.max(spec.rx_plane_test);
    let band = spec.grid_step / 2.0;
    let min_dist = spec.grid_step / 2.0;
    let target = (rx_train.len() / 8).clamp(4, 64);
    let mut out: Vec<Vec3> = Vec::new();
    // The diagonal runs corner to corner; the perpendicular (in plan view)
    // is (-dy, dx) normalized.
    let diag = hi - lo;
    let perp = Vec3::new(-diag.y, diag.x, 0.0).normalized();
    for _ in 0..target * 500 {
        if out.len() >= target {
            break;
        }
        let t: f64 = rng.gen();
        let u: f64 = rng.gen_range(-band..band);
        let z: f64 = rng.gen_range(z_lo..=z_hi);
        let p = (lo + diag * t + perp * u).with_axis(crate::geometry::Axis::Z, z);
        if p.x < lo.x || p.x > hi.x || p.y < lo.y || p.y > hi.y {
            continue;
        }
        if rx_train.iter().any(|r| r.distance(p) < min_dist) {
            continue;
        }
        if out.iter().any(|r| r.distance(p) < min_dist / 2.0) {
            continue;
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(DatasetError::EmptySplit("test"));
    }
    Ok(out)
}

/// Right-zero-padded batch of decision sequences, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub batch: usize,
    pub l_max: usize,
    /// `[batch * l_max]`
    pub returns_to_go: Vec<f64>,
    /// `[batch * l_max * 3]`
    pub states: Vec<f64>,
    /// `[batch * l_max * 2]`, (phi, theta)
    pub actions: Vec<f64>,
    /// `[batch * l_max]`, interaction class indices
    pub types: Vec<usize>,
    /// `[batch * l_max]`, 1.0 on real steps
    pub mask: Vec<f64>,
}

impl EpisodeBatch {
    pub fn real_len(&self, episode: usize) -> usize {
        (0..self.l_max)
            .take_while(|i| self.mask[episode * self.l_max + i] > 0.5)
            .count()
    }
}

/// Standardization and initial-action statistics of a record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Initial-action histogram over `RHO0_PHI_BINS x RHO0_THETA_BINS`
    /// (phi-major), normalized to sum 1.
    pub rho0: Vec<f64>,
    pub state_mean: [f64; 3],
    pub state_std: [f64; 3],
    pub action_mean: [f64; 2],
    pub action_std: [f64; 2],
    /// Count of records per hop count; index 0 holds L_k = 1.
    pub lk_hist: Vec<usize>,
}

impl DatasetStats {
    pub fn standardize_state(&self, s: Vec3) -> [f64; 3] {
        let raw = s.to_array();
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = (raw[i] - self.state_mean[i]) / self.state_std[i];
        }
        out
    }

    pub fn standardize_action(&self, phi: f64, theta: f64) -> [f64; 2] {
        [
            (phi - self.action_mean[0]) / self.action_std[0],
            (theta - self.action_mean[1]) / self.action_std[1],
        ]
    }
}

pub fn rho0_bin(phi: f64, theta: f64) -> usize {
    let two_pi = 2.0 * std::f64::consts::PI;
    let pb = ((phi / two_pi * RHO0_PHI_BINS as f64) as usize).min(RHO0_PHI_BINS - 1);
    let tb = ((theta / std::f64::consts::PI * RHO0_THETA_BINS as f64) as usize)
        .min(RHO0_THETA_BINS - 1);
    pb * RHO0_THETA_BINS + tb
}

/// Welford-style single-pass statistics over all real hops plus the
/// first-action histogram.
pub fn compute_stats(records: &[SbsRecord]) -> Result<DatasetStats, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::EmptyRecords);
    }
    let mut rho0 = vec![0.0; RHO0_PHI_BINS * RHO0_THETA_BINS];
    let mut lk_hist: Vec<usize> = Vec::new();
    let mut n = 0.0f64;
    let mut s_mean = [0.0f64; 3];
    let mut s_m2 = [0.0f64; 3];
    let mut a_mean = [0.0f64; 2];
    let mut a_m2 = [0.0f64; 2];
    for rec in records {
        let first = rec.hops.first().ok_or(DatasetError::EmptyRecords)?;
        rho0[rho0_bin(first.action.phi(), first.action.theta())] += 1.0;
        if rec.len() > lk_hist.len() {
            lk_hist.resize(rec.len(), 0);
        }
        lk_hist[rec.len() - 1] += 1;
        for h in &rec.hops {
            n += 1.0;
            let s = h.state.to_array();
            for i in 0..3 {
                let d = s[i] - s_mean[i];
                s_mean[i] += d / n;
                s_m2[i] += d * (s[i] - s_mean[i]);
            }
            let a = [h.action.phi(), h.action.theta()];
            for i in 0..2 {
                let d = a[i] - a_mean[i];
                a_mean[i] += d / n;
                a_m2[i] += d * (a[i] - a_mean[i]);
            }
        }
    }
    let total: f64 = rho0.iter().sum();
    for v in &mut rho0 {
        *v /= total;
    }
    let var = |m2: f64| if n > 1.0 { m2 / n } else { 0.0 };
    let std_floor = |v: f64| v.sqrt().max(1e-6);
    Ok(DatasetStats {
        rho0,
        state_mean: s_mean,
        state_std: [std_floor(var(s_m2[0])), std_floor(var(s_m2[1])), std_floor(var(s_m2[2]))],
        action_mean: a_mean,
        action_std: [std_floor(var(a_m2[0])), std_floor(var(a_m2[1]))],
        lk_hist,
    })
}

/// Right-pads records to `l_max` with explicit zeros, after optional
/// standardization. Record order is preserved.
pub fn pad_and_batch(
    records: &[SbsRecord],
    l_max: usize,
    stats: Option<&DatasetStats>,
) -> Result<EpisodeBatch, DatasetError> {
    let batch = records.len();
    let mut out = EpisodeBatch {
        batch,
        l_max,
        returns_to_go: vec![0.0; batch * l_max],
        states: vec![0.0; batch * l_max * 3],
        actions: vec![0.0; batch * l_max * 2],
        types: vec![0; batch * l_max],
        mask: vec![0.0; batch * l_max],
    };
    for (b, rec) in records.iter().enumerate() {
        if rec.len() > l_max {
            return Err(DatasetError::RecordTooLong { len: rec.len(), l_max });
        }
        for (i, h) in rec.hops.iter().enumerate() {
            let t = b * l_max + i;
            out.mask[t] = 1.0;
            out.returns_to_go[t] = rec.reward_to_go.get(i).copied().unwrap_or(0.0);
            out.types[t] = h.itype.class_index();
            let s = match stats {
                Some(st) => st.standardize_state(h.state),
                None => h.state.to_array(),
            };
            out.states[t * 3..t * 3 + 3].copy_from_slice(&s);
            let a = match stats {
                Some(st) => st.standardize_action(h.action.phi(), h.action.theta()),
                None => [h.action.phi(), h.action.theta()],
            };
            out.actions[t * 2..t * 2 + 2].copy_from_slice(&a);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_scene, AngleAction, Material};
    use crate::tracer::{InteractionType, RaySequence};

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

    fn ray(n_hops: usize) -> RaySequence {
        let hops = (0..n_hops)
            .map(|i| Hop {
                state: Vec3::new(1.0 + i as f64, 2.0, 1.5),
                action: AngleAction::new(0.1 * i as f64, 1.0),
                itype: if i == 0 { InteractionType::Launch } else { InteractionType::Reflection },
            })
            .collect();
        RaySequence {
            hops,
            tx: Vec3::new(1.0, 2.0, 1.5),
            rx: Vec3::new(9.0, 2.0, 1.5),
            reached: true,
            miss_distance: 0.1,
            path_length: 8.0,
        }
    }

    #[test]
    fn segment_preserves_hops() {
        let r = ray(2);
        let rec = segment_ray(&r).unwrap();
        assert_eq!(rec.len(), 2);
        assert_eq!(rec.hops, r.hops);
        assert!(!rec.is_augmented);

        let rec1 = segment_ray(&ray(1)).unwrap();
        assert_eq!(rec1.len(), 1);

        let mut unreached = ray(2);
        unreached.reached = false;
        assert!(segment_ray(&unreached).is_err());
    }

    #[test]
    fn returns_to_go_constant() {
        let rec = compute_returns_to_go(segment_ray(&ray(3)).unwrap(), 5.0);
        assert_eq!(rec.reward_to_go, vec![5.0, 5.0, 5.0]);
        let rec = compute_returns_to_go(segment_ray(&ray(3)).unwrap(), 0.0);
        assert_eq!(rec.reward_to_go, vec![0.0, 0.0, 0.0]);
        let rec = compute_returns_to_go(segment_ray(&ray(1)).unwrap(), 2.5);
        assert_eq!(rec.reward_to_go, vec![2.5]);
    }

    #[test]
    fn checkerboard_split_contract() {
        let scene = scene();
        let spec = SplitSpec { kind: SplitKind::Checkerboard, grid_step: 2.0, ..SplitSpec::default() };
        let s = make_splits(&scene, &spec).unwrap();
        assert_eq!(s.train.rx, s.test.rx);
        for t in &s.train.tx {
            assert!(!s.test.tx.contains(t));
        }
        assert!(!s.train.tx.is_empty() && !s.test.tx.is_empty());
    }

    #[test]
    fn genz_split_moves_rx_plane() {
        let scene = scene();
        let spec = SplitSpec {
            kind: SplitKind::Genz,
            grid_step: 2.0,
            rx_plane_train: 1.0,
            rx_plane_test: 2.0,
            seed: 3,
        };
        let s = make_splits(&scene, &spec).unwrap();
        assert!(s.test.rx.iter().all(|r| (r.z - 2.0).abs() < 1e-12));
        assert!(s.train.rx.iter().all(|r| (r.z - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gendiag_keeps_distance_from_train_rx() {
        let scene = scene();
        let spec = SplitSpec { kind: SplitKind::GenDiag, grid_step: 2.0, seed: 11, ..SplitSpec::default() };
        let s = make_splits(&scene, &spec).unwrap();
        assert!(!s.test.rx.is_empty());
        // Nearest-neighbor check against the generated training receivers.
        for t in &s.test.rx {
            let nn = s
                .train
                .rx
                .iter()
                .map(|r| r.distance(*t))
                .fold(f64::INFINITY, f64::min);
            assert!(nn >= spec.grid_step / 2.0 - 1e-9, "nn = {nn}");
        }
    }

    #[test]
    fn splits_reproducible_and_disjoint() {
        let scene = scene();
        for kind in [SplitKind::Checkerboard, SplitKind::Genz, SplitKind::GenDiag] {
            let spec = SplitSpec { kind, grid_step: 2.0, seed: 9, ..SplitSpec::default() };
            let a = make_splits(&scene, &spec).unwrap();
            let b = make_splits(&scene, &spec).unwrap();
            assert_eq!(a, b);
            let train: Vec<(Vec3, Vec3)> = a.train.pairs().collect();
            for p in a.test.pairs() {
                assert!(!train.contains(&p), "{kind:?} shares pair {p:?}");
            }
        }
    }

    #[test]
    fn pad_and_batch_masks_and_zeros() {
        let rec = compute_returns_to_go(segment_ray(&ray(2)).unwrap(), 1.0);
        let batch = pad_and_batch(&[rec.clone()], 4, None).unwrap();
        assert_eq!(batch.mask, vec![1.0, 1.0, 0.0, 0.0]);
        assert!(batch.actions[4..].iter().all(|v| *v == 0.0));
        assert!(batch.states[6..].iter().all(|v| *v == 0.0));
        assert_eq!(batch.real_len(0), 2);

        let many = vec![rec.clone(), rec.clone(), rec];
        let batch = pad_and_batch(&many, 4, None).unwrap();
        assert_eq!(batch.batch, 3);

        assert!(pad_and_batch(&[segment_ray(&ray(3)).unwrap()], 2, None).is_err());
    }

    #[test]
    fn pad_then_unpad_is_identity() {
        let recs: Vec<SbsRecord> = (1..=3)
            .map(|n| compute_returns_to_go(segment_ray(&ray(n)).unwrap(), 7.0))
            .collect();
        let batch = pad_and_batch(&recs, 5, None).unwrap();
        for (b, rec) in recs.iter().enumerate() {
            assert_eq!(batch.real_len(b), rec.len());
            for (i, h) in rec.hops.iter().enumerate() {
                let t = b * batch.l_max + i;
                assert_eq!(batch.returns_to_go[t], 7.0);
                assert_eq!(batch.types[t], h.itype.class_index());
                assert_eq!(&batch.states[t * 3..t * 3 + 3], &h.state.to_array());
                assert_eq!(batch.actions[t * 2], h.action.phi());
                assert_eq!(batch.actions[t * 2 + 1], h.action.theta());
            }
        }
    }

    #[test]
    fn stats_rho0_and_moments() {
        // All first actions identical: a single rho0 bin carries mass 1.
        let recs: Vec<SbsRecord> = (0..4).map(|_| segment_ray(&ray(2)).unwrap()).collect();
        let stats = compute_stats(&recs).unwrap();
        let total: f64 = stats.rho0.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(stats.rho0.iter().filter(|v| **v > 0.0).count(), 1);
        assert_eq!(stats.lk_hist, vec![0, 4]);

        // Independent two-pass oracle for mean/std.
        let mut states = Vec::new();
        for r in &recs {
            for h in &r.hops {
                states.push(h.state.to_array());
            }
        }
        let n = states.len() as f64;
        for c in 0..3 {
            let mean: f64 = states.iter().map(|s| s[c]).sum::<f64>() / n;
            let var: f64 = states.iter().map(|s| (s[c] - mean).powi(2)).sum::<f64>() / n;
            assert!((stats.state_mean[c] - mean).abs() < 1e-12);
            assert!((stats.state_std[c] - var.sqrt().max(1e-6)).abs() < 1e-9);
        }
        assert!(compute_stats(&[]).is_err());
    }

    #[test]
    fn standardized_padding_still_zero() {
        let recs: Vec<SbsRecord> = (1..=3)
            .map(|n| compute_returns_to_go(segment_ray(&ray(n)).unwrap(), 1.0))
            .collect();
        let stats = compute_stats(&recs).unwrap();
        let batch = pad_and_batch(&recs, 5, Some(&stats)).unwrap();
        for b in 0..batch.batch {
            for i in batch.real_len(b)..batch.l_max {
                let t = b * batch.l_max + i;
                assert_eq!(batch.mask[t], 0.0);
                assert!(batch.states[t * 3..t * 3 + 3].iter().all(|v| *v == 0.0));
                assert!(batch.actions[t * 2..t * 2 + 2].iter().all(|v| *v == 0.0));
            }
        }
    }
}
