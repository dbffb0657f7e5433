//! Set-matched angular accuracy (the headline metric), a one-to-one
//! assignment variant for sensitivity analysis, per-method evaluation over
//! a traced test set including channel comparisons, and report rows ready
//! for CSV emission.

use crate::channel::{kl_divergence, rssi, ChannelParams, ChannelSummary};
use crate::geometry::{angular_distance, Scene, Vec3};
use crate::model::{
    generate, knn_predict, mlp_predict, DTConfig, GenerationConfig, KnnMode, MlpConfig, ModelError,
    ParamSet,
};
use crate::rewards::RewardConfig;
use crate::tracer::{retrace_actions, RayDataset, RaySequence};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test dataset")]
    EmptyTestSet,
    #[error("method {0:?} requires a trained checkpoint that was not provided")]
    MissingArtifacts(Method),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Channel(#[from] crate::channel::ChannelError),
}

/// Hop-aligned mean angular gap between one predicted and one ground-truth
/// ray; steps present on one side only are charged pi.
pub fn ray_loss(pred: &RaySequence, gt: &RaySequence) -> f64 {
    let len = pred.len().max(gt.len());
    if len == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..len {
        total += match (pred.hops.get(j), gt.hops.get(j)) {
            (Some(p), Some(g)) => angular_distance(p.action, g.action),
            _ => PI,
        };
    }
    total / len as f64
}

/// Set-matched angular MAE: each predicted ray scores against its
/// best-matching ground-truth ray (min over the set), and the result is the
/// mean over predicted rays. An empty prediction set is charged pi.
pub fn angular_mae(pred_set: &[RaySequence], gt_set: &[RaySequence]) -> f64 {
    assert!(!gt_set.is_empty(), "angular_mae needs a nonempty ground-truth set");
    if pred_set.is_empty() {
        return PI;
    }
    let total: f64 = pred_set
        .iter()
        .map(|p| gt_set.iter().map(|g| ray_loss(p, g)).fold(f64::INFINITY, f64::min))
        .sum();
    total / pred_set.len() as f64
}

/// Minimum-cost assignment via the potentials (Kuhn-Munkres) algorithm on
/// a square cost matrix in row-major order. Returns the column assigned to
/// each row.
fn hungarian_min(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-indexed potentials form; O(n^3).
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// One-to-one assignment variant of [`angular_mae`]: predictions are
/// matched to distinct ground-truth rays (Hungarian); predictions left
/// without a partner are charged pi. Flagged alternative for sensitivity
/// analysis.
pub fn angular_mae_assignment(pred_set: &[RaySequence], gt_set: &[RaySequence]) -> f64 {
    assert!(!gt_set.is_empty(), "assignment needs a nonempty ground-truth set");
    if pred_set.is_empty() {
        return PI;
    }
    let n = pred_set.len().max(gt_set.len());
    let mut cost = vec![PI; n * n];
    for (i, p) in pred_set.iter().enumerate() {
        for (j, g) in gt_set.iter().enumerate() {
            cost[i * n + j] = ray_loss(p, g);
        }
    }
    let assign = hungarian_min(&cost, n);
    let total: f64 = (0..pred_set.len()).map(|i| cost[i * n + assign[i]]).sum();
    total / pred_set.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dt,
    Knn1,
    KnnBest,
    Mlp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dt, Method::Knn1, Method::KnnBest, Method::Mlp];

    pub fn label(self) -> &'static str {
        match self {
            Method::Dt => "dt",
            Method::Knn1 => "knn1",
            Method::KnnBest => "knnbest",
            Method::Mlp => "mlp",
        }
    }
}

/// Trained artifacts and settings handed to the evaluator.
pub struct EvalInputs<'a> {
    pub scene: &'a Scene,
    pub train: &'a RayDataset,
    pub test: &'a RayDataset,
    pub dt: Option<(&'a ParamSet, &'a DTConfig, &'a GenerationConfig)>,
    pub mlp: Option<(&'a ParamSet, &'a MlpConfig)>,
    pub channel: &'a ChannelParams,
    pub reward: &'a RewardConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvalRow {
    pub tx: [f64; 3],
    pub rx: [f64; 3],
    pub n_gt: usize,
    pub n_pred: usize,
    pub angular_mae: f64,
    pub rssi_gt_dbm: f64,
    pub rssi_pred_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub gt_length: usize,
    pub mae: f64,
    pub count: usize,
}

/// Per-method evaluation over one split's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEval {
    pub method: Method,
    pub angular_mae: f64,
    pub channel: ChannelSummary,
    pub per_pair: Vec<PairEvalRow>,
    pub per_length: Vec<LengthBucket>,
    /// Pairs skipped because the oracle found no rays.
    pub skipped_pairs: usize,
}

/// Distinct return-to-go prompts: the stated quantiles of the training
/// returns (ground-truth returns are constant, so this usually collapses
/// to a single prompt).
pub fn return_prompts(reward: &RewardConfig) -> Vec<f64> {
    let base = reward.max_return();
    let mut prompts = vec![base];
    prompts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    prompts
}

fn predict_pair(
    method: Method,
    inputs: &EvalInputs<'_>,
    tx: Vec3,
    rx: Vec3,
    gt: &[RaySequence],
) -> Result<Vec<RaySequence>, EvalError> {
    match method {
        Method::Dt => {
            let (params, cfg, gcfg) = inputs.dt.ok_or(EvalError::MissingArtifacts(method))?;
            let mut rays: Vec<RaySequence> = Vec::new();
            for prompt in return_prompts(inputs.reward) {
                let g = generate(
                    params,
                    inputs.scene,
                    tx,
                    rx,
                    cfg,
                    &GenerationConfig { target_return: prompt, ..gcfg.clone() },
                )?;
                if !rays.contains(&g.ray) {
                    rays.push(g.ray);
                }
            }
            Ok(rays)
        }
        Method::Knn1 => Ok(knn_predict(inputs.train, tx, rx, 1, KnnMode::Nearest, None)),
        Method::KnnBest => Ok(knn_predict(inputs.train, tx, rx, 6, KnnMode::BestOfN, Some(gt))),
        Method::Mlp => {
            let (params, cfg) = inputs.mlp.ok_or(EvalError::MissingArtifacts(method))?;
            let pred = mlp_predict(params, cfg, tx, rx)?;
            let mut rays = Vec::new();
            for (seq, valid) in pred.action_seqs.iter().zip(&pred.validity) {
                if *valid > 0.5 {
                    rays.push(retrace_actions(inputs.scene, tx, rx, seq, inputs.reward.d0));
                }
            }
            if rays.is_empty() {
                // Fall back to the most confident slot.
                let best = pred
                    .validity
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                rays.push(retrace_actions(inputs.scene, tx, rx, &pred.action_seqs[best], inputs.reward.d0));
            }
            Ok(rays)
        }
    }
}

/// Evaluates one method over every test pair: set-matched angular MAE,
/// per-gt-length breakdown, and channel metrics against the analytic
/// aggregator applied to the oracle rays (the topline comparator).
pub fn eval_model(method: Method, inputs: &EvalInputs<'_>) -> Result<MethodEval, EvalError> {
    if inputs.test.records.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut per_pair = Vec::new();
    let mut skipped = 0usize;
    let mut mae_sum = 0.0;
    let mut length_sums: Vec<(f64, usize)> = Vec::new();
    let mut rssi_gt_list = Vec::new();
    let mut rssi_pred_list = Vec::new();
    let mut mae_db_sum = 0.0;

    for rec in &inputs.test.records {
        if rec.rays.is_empty() {
            skipped += 1;
            continue;
        }
        let preds = predict_pair(method, inputs, rec.tx, rec.rx, &rec.rays)?;
        let mae = angular_mae(&preds, &rec.rays);
        mae_sum += mae;

        for p in &preds {
            let (best_g, loss) = rec
                .rays
                .iter()
                .map(|g| (g, ray_loss(p, g)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("nonempty gt");
            let len = best_g.len();
            if length_sums.len() < len {
                length_sums.resize(len, (0.0, 0));
            }
            length_sums[len - 1].0 += loss;
            length_sums[len - 1].1 += 1;
        }

        let r_gt = rssi(&rec.rays, inputs.channel);
        let r_pred = rssi(&preds, inputs.channel);
        rssi_gt_list.push(r_gt);
        rssi_pred_list.push(r_pred);
        mae_db_sum += (r_gt - r_pred).abs();

        per_pair.push(PairEvalRow {
            tx: rec.tx.to_array(),
            rx: rec.rx.to_array(),
            n_gt: rec.rays.len(),
            n_pred: preds.len(),
            angular_mae: mae,
            rssi_gt_dbm: r_gt,
            rssi_pred_dbm: r_pred,
        });
    }
    if per_pair.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let n = per_pair.len() as f64;
    let kl = kl_divergence(&rssi_gt_list, &rssi_pred_list, 1.0, 1e-6)?;
    Ok(MethodEval {
        method,
        angular_mae: mae_sum / n,
        channel: ChannelSummary {
            mae_db: mae_db_sum / n,
            kl_div: kl,
            bin_width_db: 1.0,
            n_pairs: per_pair.len(),
        },
        per_pair,
        per_length: length_sums
            .into_iter()
            .enumerate()
            .filter(|(_, (_, c))| *c > 0)
            .map(|(i, (sum, count))| LengthBucket {
                gt_length: i + 1,
                mae: sum / count as f64,
                count,
            })
            .collect(),
        skipped_pairs: skipped,
    })
}

/// Per-pair CSV of one method's evaluation.
pub fn per_pair_csv(eval: &MethodEval) -> String {
    let mut out = String::from(
        "method,tx_x,tx_y,tx_z,rx_x,rx_y,rx_z,n_gt,n_pred,angular_mae_rad,rssi_gt_dbm,rssi_pred_dbm,abs_err_db\n",
    );
    for r in &eval.per_pair {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            eval.method.label(),
            r.tx[0],
            r.tx[1],
            r.tx[2],
            r.rx[0],
            r.rx[1],
            r.rx[2],
            r.n_gt,
            r.n_pred,
            r.angular_mae,
            r.rssi_gt_dbm,
            r.rssi_pred_dbm,
            (r.rssi_gt_dbm - r.rssi_pred_dbm).abs(),
        ));
    }
    out
}

/// MAE-vs-path-length plot data.
pub fn per_length_csv(eval: &MethodEval) -> String {
    let mut out = String::from("method,gt_length,angular_mae_rad,count\n");
    for b in &eval.per_length {
        out.push_str(&format!("{},{},{},{}\n", eval.method.label(), b.gt_length, b.mae, b.count));
    }
    out
}

/// Summary line per method, fixed column order.
pub fn summary_csv(evals: &[MethodEval]) -> String {
    let mut out = String::from("method,angular_mae_rad,rssi_mae_db,kl_div,n_pairs,skipped_pairs\n");
    for e in evals {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.method.label(),
            e.angular_mae,
            e.channel.mae_db,
            e.channel.kl_div,
            e.channel.n_pairs,
            e.skipped_pairs,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_scene, AngleAction, Material};
    use crate::tracer::{Hop, InteractionType};

    fn ray_with_actions(actions: &[(f64, f64)]) -> RaySequence {
        RaySequence {
            hops: actions
                .iter()
                .enumerate()
                .map(|(i, (p, t))| Hop {
                    state: Vec3::new(i as f64, 0.0, 1.0),
                    action: AngleAction::new(*p, *t),
                    itype: if i == 0 { InteractionType::Launch } else { InteractionType::Reflection },
                })
                .collect(),
            tx: Vec3::new(0.0, 0.0, 1.0),
            rx: Vec3::new(5.0, 0.0, 1.0),
            reached: true,
            miss_distance: 0.0,
            path_length: 5.0,
        }
    }

    #[test]
    fn identical_sets_score_zero() {
        let set = vec![
            ray_with_actions(&[(0.1, 1.0), (0.4, 1.3)]),
            ray_with_actions(&[(2.0, 0.7)]),
        ];
        assert_eq!(angular_mae(&set, &set), 0.0);
        assert_eq!(angular_mae_assignment(&set, &set), 0.0);
    }

    #[test]
    fn uniform_perturbation_scores_its_magnitude() {
        let gt = vec![ray_with_actions(&[(0.3, 1.0), (1.0, 1.2)])];
        // Rotate every action by exactly 0.1 rad in theta.
        let pred = vec![ray_with_actions(&[(0.3, 1.1), (1.0, 1.3)])];
        let mae = angular_mae(&pred, &gt);
        assert!((mae - 0.1).abs() < 1e-9, "{mae}");
    }

    #[test]
    fn redundant_gt_never_increases_score() {
        let gt = vec![ray_with_actions(&[(0.3, 1.0)]), ray_with_actions(&[(2.0, 2.0)])];
        let pred = vec![ray_with_actions(&[(0.35, 1.0)])];
        let base = angular_mae(&pred, &gt);
        let mut more = gt.clone();
        more.push(ray_with_actions(&[(4.0, 0.4)]));
        assert!(angular_mae(&pred, &more) <= base + 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let a = ray_with_actions(&[(0.3, 1.0)]);
        let b = ray_with_actions(&[(1.3, 2.0), (0.1, 0.5)]);
        let c = ray_with_actions(&[(4.0, 1.5)]);
        let gt = vec![a.clone(), b.clone()];
        let fwd = angular_mae(&[a.clone(), c.clone()], &gt);
        let rev = angular_mae(&[c, a], &gt);
        assert_eq!(fwd, rev);
    }

    #[test]
    fn empty_and_mismatched_lengths_charged_pi() {
        let gt = vec![ray_with_actions(&[(0.3, 1.0), (1.0, 1.2)])];
        assert_eq!(angular_mae(&[], &gt), PI);
        // A one-hop prediction against the two-hop gt: exact on step 0,
        // pi on the missing step, averaged.
        let pred = vec![ray_with_actions(&[(0.3, 1.0)])];
        let mae = angular_mae(&pred, &gt);
        assert!((mae - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut state = 31u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for i in 0..n {
                    let mut q: Vec<usize> = p.iter().map(|v| if *v >= i { v + 1 } else { *v }).collect();
                    q.insert(0, i);
                    out.push(q);
                }
            }
            out
        }
        for n in 2..=5 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| next() * 3.0).collect();
                let assign = hungarian_min(&cost, n);
                let got: f64 = (0..n).map(|i| cost[i * n + assign[i]]).sum();
                let best: f64 = permutations(n)
                    .iter()
                    .map(|p| (0..n).map(|i| cost[i * n + p[i]]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!((got - best).abs() < 1e-9, "n={n}: {got} vs {best}");
            }
        }
    }

    #[test]
    fn assignment_at_least_as_strict_as_min_matching() {
        // Two predictions both nearest to the same gt ray: the assignment
        // variant must send one of them elsewhere.
        let gt = vec![ray_with_actions(&[(0.3, 1.0)]), ray_with_actions(&[(3.0, 2.0)])];
        let pred = vec![ray_with_actions(&[(0.31, 1.0)]), ray_with_actions(&[(0.29, 1.0)])];
        let free = angular_mae(&pred, &gt);
        let strict = angular_mae_assignment(&pred, &gt);
        assert!(strict >= free);
    }

    #[test]
    fn knn_eval_end_to_end() {
        let scene = box_scene(
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
        );
        let tcfg = crate::tracer::TraceConfig { n_dirs: 512, ..Default::default() };
        let train = crate::tracer::generate_dataset(
            &scene,
            &[Vec3::new(2.0, 2.0, 1.5), Vec3::new(3.0, 2.0, 1.5)],
            &[Vec3::new(8.0, 8.0, 1.0)],
            &tcfg,
        )
        .unwrap();
        let test = crate::tracer::generate_dataset(
            &scene,
            &[Vec3::new(2.5, 2.0, 1.5)],
            &[Vec3::new(8.0, 8.0, 1.0)],
            &tcfg,
        )
        .unwrap();
        let channel = ChannelParams::default();
        let reward = RewardConfig::default();
        let inputs = EvalInputs {
            scene: &scene,
            train: &train,
            test: &test,
            dt: None,
            mlp: None,
            channel: &channel,
            reward: &reward,
        };
        let e1 = eval_model(Method::Knn1, &inputs).unwrap();
        let e2 = eval_model(Method::KnnBest, &inputs).unwrap();
        assert!(e2.angular_mae <= e1.angular_mae + 1e-12);
        assert_eq!(e1.per_pair.len(), 1);
        assert!(e1.channel.mae_db >= 0.0);
        assert!(e1.channel.kl_div >= 0.0);
        // Report rows render.
        assert!(per_pair_csv(&e1).lines().count() == 2);
        assert!(per_length_csv(&e1).lines().count() >= 1);
        assert!(summary_csv(&[e1, e2]).lines().count() == 3);
    }
}
