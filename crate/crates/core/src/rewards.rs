//! Scalar reward/penalty stack for scoring predicted ray sequences against
//! a ground-truth ray set: the weighted log-angular loss, the out-of-bounds
//! / geometric-consistency / terminal-miss penalties, the set fitness used
//! as the sequence return, and the combined training loss.
//!
//! These are the reference (non-autodiff) implementations; the training
//! module rebuilds the same quantities as graph ops and is tested for
//! agreement against this module.

use crate::dataset::SbsRecord;
use crate::geometry::{angular_distance, dir_from_angles, in_bounds, Scene, Vec3};
use crate::tracer::InteractionType;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("type/logit length mismatch: {types} types vs {logits} logit rows")]
    LengthMismatch { types: usize, logits: usize },
    #[error("empty ground-truth set")]
    EmptyGtSet,
    #[error("empty sequence")]
    EmptySequence,
}

/// Weights and thresholds of the objective stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Decay of the per-step weights `w_j = gamma^j` (normalized to sum 1).
    pub gamma: f64,
    /// Clamp floor inside the log of the angular loss, radians.
    pub eps_ang: f64,
    /// Receiver capture radius, meters.
    pub d0: f64,
    /// Mixing weight of the angular term in the combined loss.
    pub alpha: f64,
    /// Out-of-bounds penalty magnitude per offending state.
    pub c_ob: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            gamma: 0.9,
            eps_ang: 1e-6,
            d0: 0.3,
            alpha: 1.0,
            c_ob: 10.0,
        }
    }
}

impl RewardConfig {
    /// Best attainable sequence return: an exact, constraint-satisfying match.
    pub fn max_return(&self) -> f64 {
        -self.eps_ang.ln()
    }
}

/// Decreasing per-step weights `gamma^j`, normalized to sum 1 over `len`.
pub fn step_weights(gamma: f64, len: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..len).map(|j| gamma.powi(j as i32)).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Per-step angular gaps between two hop chains, compared over
/// `max(L_gt, L_pred)` steps; steps present on one side only are charged
/// the worst-case angle pi.
fn angular_gaps(gt: &SbsRecord, pred: &SbsRecord) -> Vec<f64> {
    let len = gt.len().max(pred.len());
    (0..len)
        .map(|j| match (gt.hops.get(j), pred.hops.get(j)) {
            (Some(g), Some(p)) => angular_distance(g.action, p.action),
            _ => PI,
        })
        .collect()
}

/// Weighted log angular set loss between a ground-truth ray and a
/// prediction: `sum_j w_j * ln(max(angle_j, eps_ang))`.
pub fn l_ray(gt: &SbsRecord, pred: &SbsRecord, cfg: &RewardConfig) -> f64 {
    let gaps = angular_gaps(gt, pred);
    let w = step_weights(cfg.gamma, gaps.len());
    gaps.iter()
        .zip(&w)
        .map(|(gap, w)| w * gap.max(cfg.eps_ang).ln())
        .sum()
}

/// Out-of-bounds penalty: `-c_ob` per hop state outside the scene.
pub fn ob(pred: &SbsRecord, scene: &Scene, cfg: &RewardConfig) -> f64 {
    let outside = pred.hops.iter().filter(|h| !in_bounds(scene, h.state)).count();
    -cfg.c_ob * outside as f64
}

/// Terminal miss penalty: `-e^d` when the final segment's closest approach
/// to the receiver is `d >= d0`, else 0. The final segment is the half-line
/// leaving the last hop (the record does not store its endpoint).
pub fn te(pred: &SbsRecord, rx: Vec3, cfg: &RewardConfig) -> f64 {
    let Some(last) = pred.hops.last() else { return 0.0 };
    let dir = dir_from_angles(last.action);
    let rel = rx - last.state;
    let t = rel.dot(dir).max(0.0);
    let d = (rel - dir * t).norm().max(if rel.dot(dir) < 0.0 { rel.norm() } else { 0.0 });
    if d < cfg.d0 {
        0.0
    } else {
        -d.exp()
    }
}

/// Geometric-consistency penalty. For a reflection hop the per-axis
/// absolute direction components must be preserved (exact for specular
/// bounces off axis-aligned planes); the smallest per-axis mismatch is
/// charged. A penetration hop whose direction differs from the incoming
/// one is charged a flat -10.
pub fn bu(pred: &SbsRecord) -> f64 {
    let mut total = 0.0;
    for j in 1..pred.hops.len() {
        let prev = dir_from_angles(pred.hops[j - 1].action);
        let cur = dir_from_angles(pred.hops[j].action);
        match pred.hops[j].itype {
            InteractionType::Reflection => {
                let diffs = [
                    cur.x.abs() - prev.x.abs(),
                    cur.y.abs() - prev.y.abs(),
                    cur.z.abs() - prev.z.abs(),
                ];
                let min = diffs.iter().copied().fold(f64::INFINITY, f64::min);
                total -= min.abs();
            }
            InteractionType::Penetration => {
                let angle = prev.dot(cur).clamp(-1.0, 1.0).acos();
                if angle > 1e-9 {
                    total -= 10.0;
                }
            }
            _ => {}
        }
    }
    total
}

/// Combined physical penalty, always <= 0.
pub fn p_angle(pred: &SbsRecord, scene: &Scene, rx: Vec3, cfg: &RewardConfig) -> f64 {
    ob(pred, scene, cfg) + bu(pred) + te(pred, rx, cfg)
}

/// Set fitness of a predicted sequence: `-min_k (l_ray(r_k, pred) -
/// p_angle(pred))`. A physically valid exact match attains
/// `-ln(eps_ang)`.
pub fn r_sbs(
    pred: &SbsRecord,
    gt_set: &[SbsRecord],
    scene: &Scene,
    rx: Vec3,
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    if gt_set.is_empty() {
        return Err(RewardError::EmptyGtSet);
    }
    let penalty = p_angle(pred, scene, rx, cfg);
    let min_ray = gt_set
        .iter()
        .map(|gt| l_ray(gt, pred, cfg))
        .fold(f64::INFINITY, f64::min);
    Ok(-(min_ray - penalty))
}

/// Numerically stable per-row cross entropy from raw logits.
pub fn cross_entropy_row(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    log_sum - logits[label]
}

/// Mean cross entropy of predicted type logits against ground-truth types
/// over the real (unmasked) steps.
pub fn l_type(gt_types: &[InteractionType], pred_logits: &[Vec<f64>]) -> Result<f64, RewardError> {
    if gt_types.len() != pred_logits.len() {
        return Err(RewardError::LengthMismatch {
            types: gt_types.len(),
            logits: pred_logits.len(),
        });
    }
    if gt_types.is_empty() {
        return Err(RewardError::EmptySequence);
    }
    let total: f64 = gt_types
        .iter()
        .zip(pred_logits)
        .map(|(t, logits)| cross_entropy_row(logits, t.class_index()))
        .sum();
    Ok(total / gt_types.len() as f64)
}

/// Combined training loss: `min_k (alpha * l_ray(r_k, pred) + sum_i
/// CE(t'_i, t_i))` with type targets taken from the arg-min ground-truth
/// ray; ties break on the first index.
pub fn l_t(
    pred: &SbsRecord,
    pred_logits: &[Vec<f64>],
    gt_set: &[SbsRecord],
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    if gt_set.is_empty() {
        return Err(RewardError::EmptyGtSet);
    }
    if pred_logits.len() != pred.len() {
        return Err(RewardError::LengthMismatch {
            types: pred.len(),
            logits: pred_logits.len(),
        });
    }
    let mut best = f64::INFINITY;
    for gt in gt_set {
        let mut v = cfg.alpha * l_ray(gt, pred, cfg);
        let steps = gt.len().min(pred.len());
        for i in 0..steps {
            v += cross_entropy_row(&pred_logits[i], gt.hops[i].itype.class_index());
        }
        if v < best {
            best = v;
        }
    }
    Ok(best)
}
