//! The decision-transformer policy with its type-readout head, plus the
//! KNN and MLP comparison baselines and the named flat parameter store
//! they all share.

use crate::autodiff::{AutodiffError, Graph, TensorId};
use crate::dataset::{DatasetStats, EpisodeBatch};
use crate::geometry::{dir_from_angles, AngleAction, Scene, Vec3};
use crate::tracer::{
    line_of_sight, receiver_check, step, Hop, InteractionType, RayDataset, RaySequence,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("graph evaluation produced a non-finite value in {0}")]
    NonFinite(&'static str),
}

// ----- named parameter store -------------------------------------------------

/// One named weight array with its recorded shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamEntry {
    /// Entries prefixed `norm.` carry dataset statistics, not weights.
    pub fn trainable(&self) -> bool {
        !self.name.starts_with("norm.")
    }
}

/// All model weights as named flat arrays, in a fixed construction order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<(), ModelError> {
        if self.index.contains_key(name) {
            return Err(ModelError::DuplicateParam(name.to_string()));
        }
        assert_eq!(shape.iter().product::<usize>(), values.len(), "{name}: shape/value mismatch");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), shape, values });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn slot(&self, name: &str) -> Result<usize, ModelError> {
        self.index.get(name).copied().ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry, ModelError> {
        Ok(&self.entries[self.slot(name)?])
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn n_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn trainable_len(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable()).map(|e| e.values.len()).sum()
    }

    /// Flattened trainable values in entry order (for gradient checking).
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for e in self.entries.iter().filter(|e| e.trainable()) {
            out.extend_from_slice(&e.values);
        }
        out
    }

    /// Registers every entry as a graph leaf; trainable entries require
    /// gradients when `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|e| g.leaf(e.shape.clone(), e.values.clone(), trainable && e.trainable()))
            .collect();
        Bound { ids }
    }

    /// Binds trainable entries as slices of one flat leaf (gradient
    /// checking); `norm.` entries come in as constants.
    pub fn bind_flat(&self, g: &mut Graph, flat: TensorId) -> Result<Bound, ModelError> {
        let total = self.trainable_len();
        let col = g.reshape(flat, vec![total, 1])?;
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for e in &self.entries {
            if e.trainable() {
                let n = e.values.len();
                let rows = g.slice_rows(col, offset, offset + n)?;
                ids.push(g.reshape(rows, e.shape.clone())?);
                offset += n;
            } else {
                ids.push(g.constant(e.shape.clone(), e.values.clone()));
            }
        }
        Ok(Bound { ids })
    }
}

/// Graph handles of one [`ParamSet`] binding, aligned with entry order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub ids: Vec<TensorId>,
}

impl Bound {
    pub fn id(&self, set: &ParamSet, name: &str) -> Result<TensorId, ModelError> {
        Ok(self.ids[set.slot(name)?])
    }
}

// ----- decision transformer ---------------------------------------------------

/// Architecture of the decision transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DTConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub l_max: usize,
    pub dropout: f64,
    pub type_classes: usize,
}

impl Default for DTConfig {
    fn default() -> Self {
        DTConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            l_max: 6,
            dropout: 0.1,
            type_classes: InteractionType::COUNT,
        }
    }
}

impl DTConfig {
    pub fn validate(&self) {
        assert!(self.d_model % self.n_heads == 0, "d_model must divide by n_heads");
        assert!(self.type_classes == InteractionType::COUNT);
    }
}

const INIT_STD: f64 = 0.02;

fn normal_init<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, INIT_STD).expect("fixed std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Fresh decision-transformer weights (scaled-normal, zero biases) with the
/// dataset standardization constants stored as `norm.` entries.
pub fn dt_init(cfg: &DTConfig, stats: &DatasetStats, seed: u64) -> ParamSet {
    cfg.validate();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let mut p = ParamSet::new();
    let mut add = |p: &mut ParamSet, name: String, shape: Vec<usize>, values: Vec<f64>| {
        p.insert(&name, shape, values).expect("unique init names");
    };
    for (src, dim) in [("rtg", 1), ("state", 3), ("action", 2)] {
        add(&mut p, format!("embed.{src}.w"), vec![dim, d], normal_init(&mut rng, dim * d));
        add(&mut p, format!("embed.{src}.b"), vec![d], vec![0.0; d]);
    }
    add(&mut p, "embed.time".into(), vec![cfg.l_max, d], normal_init(&mut rng, cfg.l_max * d));
    for l in 0..cfg.n_layers {
        for ln in ["ln1", "ln2"] {
            add(&mut p, format!("layer{l}.{ln}.g"), vec![d], vec![1.0; d]);
            add(&mut p, format!("layer{l}.{ln}.b"), vec![d], vec![0.0; d]);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            add(&mut p, format!("layer{l}.attn.{w}"), vec![d, d], normal_init(&mut rng, d * d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            add(&mut p, format!("layer{l}.attn.{b}"), vec![d], vec![0.0; d]);
        }
        let hidden = 4 * d;
        add(&mut p, format!("layer{l}.mlp.w1"), vec![d, hidden], normal_init(&mut rng, d * hidden));
        add(&mut p, format!("layer{l}.mlp.b1"), vec![hidden], vec![0.0; hidden]);
        add(&mut p, format!("layer{l}.mlp.w2"), vec![hidden, d], normal_init(&mut rng, hidden * d));
        add(&mut p, format!("layer{l}.mlp.b2"), vec![d], vec![0.0; d]);
    }
    add(&mut p, "final_ln.g".into(), vec![d], vec![1.0; d]);
    add(&mut p, "final_ln.b".into(), vec![d], vec![0.0; d]);
    add(&mut p, "head.action.w".into(), vec![d, 2], normal_init(&mut rng, d * 2));
    add(&mut p, "head.action.b".into(), vec![2], vec![0.0; 2]);
    add(&mut p, "head.type.w".into(), vec![d, cfg.type_classes], normal_init(&mut rng, d * cfg.type_classes));
    add(&mut p, "head.type.b".into(), vec![cfg.type_classes], vec![0.0; cfg.type_classes]);
    add(&mut p, "norm.state_mean".into(), vec![3], stats.state_mean.to_vec());
    add(&mut p, "norm.state_std".into(), vec![3], stats.state_std.to_vec());
    add(&mut p, "norm.action_mean".into(), vec![2], stats.action_mean.to_vec());
    add(&mut p, "norm.action_std".into(), vec![2], stats.action_std.to_vec());
    p
}

/// Standardization constants recovered from the `norm.` entries.
pub fn norm_from_params(set: &ParamSet) -> Result<DatasetStats, ModelError> {
    let take3 = |name: &str| -> Result<[f64; 3], ModelError> {
        let v = &set.get(name)?.values;
        Ok([v[0], v[1], v[2]])
    };
    let take2 = |name: &str| -> Result<[f64; 2], ModelError> {
        let v = &set.get(name)?.values;
        Ok([v[0], v[1]])
    };
    Ok(DatasetStats {
        rho0: Vec::new(),
        state_mean: take3("norm.state_mean")?,
        state_std: take3("norm.state_std")?,
        action_mean: take2("norm.action_mean")?,
        action_std: take2("norm.action_std")?,
        lk_hist: Vec::new(),
    })
}

/// Optional training-time stochasticity for [`dt_forward`].
pub struct DropoutCtx<'a> {
    pub rng: &'a mut ChaCha20Rng,
    pub rate: f64,
}

/// Token embedding: interleaved (return, state, action) triples with shared
/// timestep embeddings; masked steps contribute exactly zero tokens.
/// Output shape `[batch * 3 * l_max, d_model]`.
pub fn dt_embed(
    g: &mut Graph,
    set: &ParamSet,
    bound: &Bound,
    batch: &EpisodeBatch,
    cfg: &DTConfig,
) -> Result<TensorId, ModelError> {
    let (b, t, _d) = (batch.batch, batch.l_max, cfg.d_model);
    let n = b * t;
    let rtg = g.constant(vec![n, 1], batch.returns_to_go.clone());
    let states = g.constant(vec![n, 3], batch.states.clone());
    let actions = g.constant(vec![n, 2], batch.actions.clone());

    let mut project = |input: TensorId, src: &str| -> Result<TensorId, ModelError> {
        let w = bound.id(set, &format!("embed.{src}.w"))?;
        let bias = bound.id(set, &format!("embed.{src}.b"))?;
        let proj = g.matmul(input, w)?;
        Ok(g.add_bias(proj, bias)?)
    };
    let r_tok = project(rtg, "rtg")?;
    let s_tok = project(states, "state")?;
    let a_tok = project(actions, "action")?;

    let time_indices: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let table = bound.id(set, "embed.time")?;
    let time = g.embedding_lookup(table, &time_indices)?;

    let mask = g.constant(vec![n], batch.mask.clone());
    let mut tok = |tokens: TensorId| -> Result<TensorId, ModelError> {
        let with_time = g.add(tokens, time)?;
        Ok(g.mul_rows(with_time, mask)?)
    };
    let r_tok = tok(r_tok)?;
    let s_tok = tok(s_tok)?;
    let a_tok = tok(a_tok)?;
    Ok(g.interleave3(r_tok, s_tok, a_tok)?)
}

/// Full forward pass. Action predictions are read from each step's state
/// token (causal over the interleaved stream) and squashed into
/// `[0, 2pi) x [0, pi]`; type logits come from the same positions.
pub struct DtOutputs {
    /// `[batch * l_max, 2]` squashed (phi, theta)
    pub action_pred: TensorId,
    /// `[batch * l_max, type_classes]`
    pub type_logits: TensorId,
}

pub fn dt_forward(
    g: &mut Graph,
    set: &ParamSet,
    bound: &Bound,
    batch: &EpisodeBatch,
    cfg: &DTConfig,
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<DtOutputs, ModelError> {
    cfg.validate();
    let (b, t, d, h) = (batch.batch, batch.l_max, cfg.d_model, cfg.n_heads);
    let seq = 3 * t;
    let dh = d / h;

    let mut x = dt_embed(g, set, bound, batch, cfg)?;
    if let Some(ctx) = dropout.as_mut() {
        x = g.dropout(x, ctx.rate, ctx.rng);
    }

    // Causal mask over token positions, shared across batch and heads.
    let mut mask_vals = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in i + 1..seq {
            mask_vals[i * seq + j] = -1e9;
        }
    }
    let causal = g.constant(vec![seq, seq], mask_vals);

    for l in 0..cfg.n_layers {
        let name = |part: &str| format!("layer{l}.{part}");
        // Attention block.
        let ln = g.layer_norm_rows(x)?;
        let ln = {
            let gain = bound.id(set, &name("ln1.g"))?;
            let bias = bound.id(set, &name("ln1.b"))?;
            let scaled = g.mul_bias(ln, gain)?;
            g.add_bias(scaled, bias)?
        };
        let mut qkv = |wname: &str, bname: &str| -> Result<TensorId, ModelError> {
            let w = bound.id(set, &name(wname))?;
            let bias = bound.id(set, &name(bname))?;
            let m = g.matmul(ln, w)?;
            let m = g.add_bias(m, bias)?;
            Ok(g.split_heads(m, b, seq, h)?)
        };
        let q = qkv("attn.wq", "attn.bq")?;
        let k = qkv("attn.wk", "attn.bk")?;
        let v = qkv("attn.wv", "attn.bv")?;
        let kt = g.transpose_last(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = g.add_broadcast_mat(scores, causal)?;
        let flat = g.reshape(scores, vec![b * h * seq, seq])?;
        let mut probs = g.softmax_rows(flat)?;
        if let Some(ctx) = dropout.as_mut() {
            probs = g.dropout(probs, ctx.rate, ctx.rng);
        }
        let probs = g.reshape(probs, vec![b * h, seq, seq])?;
        let ctx_heads = g.bmm(probs, v)?;
        let merged = g.merge_heads(ctx_heads, b, seq, h)?;
        let wo = bound.id(set, &name("attn.wo"))?;
        let bo = bound.id(set, &name("attn.bo"))?;
        let mut proj = g.matmul(merged, wo)?;
        proj = g.add_bias(proj, bo)?;
        if let Some(ctx) = dropout.as_mut() {
            proj = g.dropout(proj, ctx.rate, ctx.rng);
        }
        x = g.add(x, proj)?;

        // Feed-forward block.
        let ln2 = g.layer_norm_rows(x)?;
        let ln2 = {
            let gain = bound.id(set, &name("ln2.g"))?;
            let bias = bound.id(set, &name("ln2.b"))?;
            let scaled = g.mul_bias(ln2, gain)?;
            g.add_bias(scaled, bias)?
        };
        let w1 = bound.id(set, &name("mlp.w1"))?;
        let b1 = bound.id(set, &name("mlp.b1"))?;
        let w2 = bound.id(set, &name("mlp.w2"))?;
        let b2 = bound.id(set, &name("mlp.b2"))?;
        let h1 = g.matmul(ln2, w1)?;
        let h1 = g.add_bias(h1, b1)?;
        let h1 = g.gelu(h1);
        let mut h2 = g.matmul(h1, w2)?;
        h2 = g.add_bias(h2, b2)?;
        if let Some(ctx) = dropout.as_mut() {
            h2 = g.dropout(h2, ctx.rate, ctx.rng);
        }
        x = g.add(x, h2)?;
    }

    let xf = g.layer_norm_rows(x)?;
    let xf = {
        let gain = bound.id(set, "final_ln.g")?;
        let bias = bound.id(set, "final_ln.b")?;
        let scaled = g.mul_bias(xf, gain)?;
        g.add_bias(scaled, bias)?
    };

    // Hidden rows of the state tokens: position 3*i + 1 within each episode.
    let rows: Vec<usize> = (0..b)
        .flat_map(|bi| (0..t).map(move |ti| bi * seq + 3 * ti + 1))
        .collect();
    let state_rows = g.gather_rows(xf, &rows)?;

    let aw = bound.id(set, "head.action.w")?;
    let ab = bound.id(set, "head.action.b")?;
    let raw = g.matmul(state_rows, aw)?;
    let raw = g.add_bias(raw, ab)?;
    let squashed = g.sigmoid_op(raw);
    let ranges = g.constant(vec![b * t, 2], (0..b * t).flat_map(|_| [TAU, PI]).collect());
    let action_pred = g.mul(squashed, ranges)?;

    let tw = bound.id(set, "head.type.w")?;
    let tb = bound.id(set, "head.type.b")?;
    let logits = g.matmul(state_rows, tw)?;
    let type_logits = g.add_bias(logits, tb)?;

    Ok(DtOutputs { action_pred, type_logits })
}

// ----- autoregressive generation ----------------------------------------------

/// Test-time generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Return-to-go prompt; defaults to the best attainable return.
    pub target_return: f64,
    pub l_max: usize,
    pub greedy: bool,
    pub d0: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            target_return: -(1e-6f64).ln(),
            l_max: 6,
            greedy: true,
            d0: 0.3,
        }
    }
}

/// A generated ray with the model's own per-step type readout next to the
/// geometric types recorded in the hops.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedRay {
    pub ray: RaySequence,
    pub predicted_types: Vec<InteractionType>,
    pub model_calls: usize,
}

/// Autoregressive rollout: starts at tx with a constant return-to-go
/// prompt, casts each predicted action through the simulator for the next
/// state, and stops on receiver capture or `l_max` hops. Unobstructed
/// pairs short-circuit to the analytic line-of-sight ray with no model
/// call.
pub fn generate(
    set: &ParamSet,
    scene: &Scene,
    tx: Vec3,
    rx: Vec3,
    cfg: &DTConfig,
    gcfg: &GenerationConfig,
) -> Result<GeneratedRay, ModelError> {
    if let Some(ray) = line_of_sight(scene, tx, rx) {
        return Ok(GeneratedRay { ray, predicted_types: vec![InteractionType::Launch], model_calls: 0 });
    }
    let stats = norm_from_params(set)?;
    let l_max = gcfg.l_max.min(cfg.l_max);

    let mut states: Vec<Vec3> = vec![tx];
    let mut actions: Vec<AngleAction> = Vec::new();
    let mut geo_types: Vec<InteractionType> = vec![InteractionType::Launch];
    let mut pred_types: Vec<InteractionType> = Vec::new();
    let mut model_calls = 0usize;
    let mut reached = false;
    let mut best_miss = f64::INFINITY;
    let mut path_length = 0.0;
    let mut capped_path = None;

    for i in 0..l_max {
        // Assemble the prefix batch: steps 0..=i are real; the current
        // step's action slot stays zero (causally invisible to its own
        // prediction).
        let t = l_max;
        let mut batch = EpisodeBatch {
            batch: 1,
            l_max: t,
            returns_to_go: vec![0.0; t],
            states: vec![0.0; t * 3],
            actions: vec![0.0; t * 2],
            types: vec![0; t],
            mask: vec![0.0; t],
        };
        for (j, s) in states.iter().enumerate() {
            batch.mask[j] = 1.0;
            batch.returns_to_go[j] = gcfg.target_return;
            batch.states[j * 3..j * 3 + 3].copy_from_slice(&stats.standardize_state(*s));
            batch.types[j] = geo_types[j].class_index();
        }
        for (j, a) in actions.iter().enumerate() {
            batch.actions[j * 2..j * 2 + 2]
                .copy_from_slice(&stats.standardize_action(a.phi(), a.theta()));
        }

        let mut g = Graph::new();
        let bound = set.bind(&mut g, false);
        let out = dt_forward(&mut g, set, &bound, &batch, cfg, None)?;
        model_calls += 1;
        let av = g.values(out.action_pred);
        let (phi, theta) = (av[i * 2], av[i * 2 + 1]);
        if !(phi.is_finite() && theta.is_finite()) {
            return Err(ModelError::NonFinite("action head"));
        }
        let action = AngleAction::new(phi, theta);
        actions.push(action);
        let tv = g.values(out.type_logits);
        let row = &tv[i * cfg.type_classes..(i + 1) * cfg.type_classes];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(c, _)| c)
            .unwrap_or(0);
        pred_types.push(InteractionType::from_class_index(argmax).unwrap_or(InteractionType::Launch));

        // Cast the segment geometrically.
        let origin = if i == 0 {
            states[i]
        } else {
            states[i] + dir_from_angles(action) * crate::geometry::LAUNCH_OFFSET
        };
        let cast = match step(scene, origin, action) {
            Ok(s) => s,
            Err(_) => break, // left the environment: terminate unreached
        };
        let (hit, miss) = receiver_check(rx, gcfg.d0, states[i], cast.point);
        best_miss = best_miss.min(miss);
        if hit {
            reached = true;
            // Path ends at the closest approach to the receiver.
            let dir = dir_from_angles(action);
            let tcap = (rx - states[i]).dot(dir).clamp(0.0, states[i].distance(cast.point));
            capped_path = Some(path_length + tcap);
            break;
        }
        path_length += states[i].distance(cast.point);
        if i + 1 < l_max {
            states.push(cast.point);
            geo_types.push(cast.itype);
        }
    }

    let hops: Vec<Hop> = states
        .iter()
        .zip(&actions)
        .zip(&geo_types)
        .map(|((s, a), ty)| Hop { state: *s, action: *a, itype: *ty })
        .collect();
    let ray = RaySequence {
        hops,
        tx,
        rx,
        reached,
        miss_distance: if best_miss.is_finite() { best_miss } else { f64::INFINITY },
        path_length: capped_path.unwrap_or(path_length),
    };
    Ok(GeneratedRay { ray, predicted_types: pred_types, model_calls })
}

// ----- KNN baseline -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnMode {
    /// Rays of the single nearest training pair.
    Nearest,
    /// Best of the n nearest by evaluation angular loss against the query's
    /// ground truth (upper-bound variant; evaluation-only).
    BestOfN,
}

/// Nearest-neighbor prediction on the concatenated (tx, rx) 6-vector.
/// `gt` is required for [`KnnMode::BestOfN`] and ignored otherwise.
pub fn knn_predict(
    train: &RayDataset,
    tx: Vec3,
    rx: Vec3,
    n: usize,
    mode: KnnMode,
    gt: Option<&[RaySequence]>,
) -> Vec<RaySequence> {
    assert!(!train.records.is_empty(), "knn needs a nonempty training set");
    let dist2 = |t: Vec3, r: Vec3| -> f64 {
        let dt = t - tx;
        let dr = r - rx;
        dt.dot(dt) + dr.dot(dr)
    };
    let mut order: Vec<usize> = (0..train.records.len()).collect();
    order.sort_by(|a, b| {
        let da = dist2(train.records[*a].tx, train.records[*a].rx);
        let db = dist2(train.records[*b].tx, train.records[*b].rx);
        da.total_cmp(&db).then(a.cmp(b))
    });
    match mode {
        KnnMode::Nearest => train.records[order[0]].rays.clone(),
        KnnMode::BestOfN => {
            let gt = gt.expect("BestOfN requires ground-truth access");
            let mut best_idx = order[0];
            let mut best_loss = f64::INFINITY;
            for &i in order.iter().take(n.max(1)) {
                let loss = crate::evaluation::angular_mae(&train.records[i].rays, gt);
                if loss < best_loss {
                    best_loss = loss;
                    best_idx = i;
                }
            }
            train.records[best_idx].rays.clone()
        }
    }
}

// ----- MLP baseline -------------------------------------------------------------

/// Feed-forward baseline mapping sinusoidally encoded (tx, rx) to a fixed
/// set of action sequences with per-slot validity logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub n_freqs: usize,
    /// Output ray slots (the per-pair ray cap).
    pub max_rays: usize,
    pub l_max: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: 128, n_freqs: 8, max_rays: 6, l_max: 6 }
    }
}

impl MlpConfig {
    pub fn in_dim(&self) -> usize {
        6 * 2 * self.n_freqs
    }

    pub fn out_dim(&self) -> usize {
        self.max_rays * (self.l_max * 2 + 1)
    }
}

/// Sinusoidal positional encoding of both endpoints, normalized by the
/// scene bounds into [-1, 1].
pub fn mlp_features(cfg: &MlpConfig, scene_min: Vec3, scene_max: Vec3, tx: Vec3, rx: Vec3) -> Vec<f64> {
    let norm = |p: Vec3| -> [f64; 3] {
        let e = scene_max - scene_min;
        [
            2.0 * (p.x - scene_min.x) / e.x - 1.0,
            2.0 * (p.y - scene_min.y) / e.y - 1.0,
            2.0 * (p.z - scene_min.z) / e.z - 1.0,
        ]
    };
    let mut out = Vec::with_capacity(cfg.in_dim());
    for c in norm(tx).into_iter().chain(norm(rx)) {
        for k in 0..cfg.n_freqs {
            let f = (1 << k) as f64 * PI * c;
            out.push(f.sin());
            out.push(f.cos());
        }
    }
    out
}

/// Fresh MLP weights plus the scene bounds as `norm.` entries.
pub fn mlp_init(cfg: &MlpConfig, scene: &Scene, seed: u64) -> ParamSet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let dims = [cfg.in_dim(), cfg.hidden, cfg.hidden, cfg.out_dim()];
    for l in 0..3 {
        let (din, dout) = (dims[l], dims[l + 1]);
        p.insert(&format!("mlp.l{l}.w"), vec![din, dout], normal_init(&mut rng, din * dout))
            .expect("unique");
        p.insert(&format!("mlp.l{l}.b"), vec![dout], vec![0.0; dout]).expect("unique");
    }
    p.insert("norm.bounds_min", vec![3], scene.bounds_min.to_array().to_vec()).expect("unique");
    p.insert("norm.bounds_max", vec![3], scene.bounds_max.to_array().to_vec()).expect("unique");
    p
}

/// Graph forward over a batch of feature rows: returns squashed actions
/// `[batch * max_rays * l_max, 2]` and validity logits `[batch * max_rays]`.
pub fn mlp_forward(
    g: &mut Graph,
    set: &ParamSet,
    bound: &Bound,
    features: TensorId,
    cfg: &MlpConfig,
) -> Result<(TensorId, TensorId), ModelError> {
    let rows = g.shape(features)[0];
    let mut x = features;
    for l in 0..3 {
        let w = bound.id(set, &format!("mlp.l{l}.w"))?;
        let b = bound.id(set, &format!("mlp.l{l}.b"))?;
        x = g.matmul(x, w)?;
        x = g.add_bias(x, b)?;
        if l < 2 {
            x = g.gelu(x);
        }
    }
    // Layout per row: [max_rays * l_max * 2 action logits][max_rays validity].
    let n_action = cfg.max_rays * cfg.l_max * 2;
    let per_row = g.reshape(x, vec![rows * (n_action + cfg.max_rays), 1])?;
    let mut action_rows = Vec::with_capacity(rows);
    let mut valid_rows = Vec::with_capacity(rows);
    for r in 0..rows {
        let base = r * (n_action + cfg.max_rays);
        action_rows.push(g.slice_rows(per_row, base, base + n_action)?);
        valid_rows.push(g.slice_rows(per_row, base + n_action, base + n_action + cfg.max_rays)?);
    }
    let actions = g.concat_rows(&action_rows)?;
    let actions = g.reshape(actions, vec![rows * cfg.max_rays * cfg.l_max, 2])?;
    let squashed = g.sigmoid_op(actions);
    let ranges = g.constant(
        vec![rows * cfg.max_rays * cfg.l_max, 2],
        (0..rows * cfg.max_rays * cfg.l_max).flat_map(|_| [TAU, PI]).collect(),
    );
    let action_pred = g.mul(squashed, ranges)?;
    let validity = g.concat_rows(&valid_rows)?;
    let validity = g.reshape(validity, vec![rows * cfg.max_rays])?;
    Ok((action_pred, validity))
}

/// Decoded MLP output for one (tx, rx) pair.
#[derive(Debug, Clone)]
pub struct MlpPrediction {
    /// `max_rays` sequences of `l_max` actions each.
    pub action_seqs: Vec<Vec<AngleAction>>,
    /// Per-slot validity probability.
    pub validity: Vec<f64>,
}

pub fn mlp_predict(set: &ParamSet, cfg: &MlpConfig, tx: Vec3, rx: Vec3) -> Result<MlpPrediction, ModelError> {
    let bmin = Vec3::from_array([
        set.get("norm.bounds_min")?.values[0],
        set.get("norm.bounds_min")?.values[1],
        set.get("norm.bounds_min")?.values[2],
    ]);
    let bmax = Vec3::from_array([
        set.get("norm.bounds_max")?.values[0],
        set.get("norm.bounds_max")?.values[1],
        set.get("norm.bounds_max")?.values[2],
    ]);
    let mut g = Graph::new();
    let bound = set.bind(&mut g, false);
    let feats = mlp_features(cfg, bmin, bmax, tx, rx);
    let f = g.constant(vec![1, cfg.in_dim()], feats);
    let (actions, validity) = mlp_forward(&mut g, set, &bound, f, cfg)?;
    let av = g.values(actions);
    let vv = g.values(validity);
    let mut action_seqs = Vec::with_capacity(cfg.max_rays);
    for m in 0..cfg.max_rays {
        let mut seq = Vec::with_capacity(cfg.l_max);
        for i in 0..cfg.l_max {
            let idx = (m * cfg.l_max + i) * 2;
            seq.push(AngleAction::new(av[idx], av[idx + 1]));
        }
        action_seqs.push(seq);
    }
    let validity = vv.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
    Ok(MlpPrediction { action_seqs, validity })
}
