//! The graph transformer segmentation network.
//!
//! A U-shaped stack over the events-3D graph: an input MLP, three encoder
//! units (vector self-attention point transformer + transition down), a
//! global aggregation branch off the deepest stage, three decoder units
//! (transition up with skip connections + point transformer), and a
//! two-class softmax head. Stage node counts follow `[N, ceil(N/4),
//! ceil(N/16)]` for down rates `[1, 4, 4]`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{farthest_point_sampling, knn_graph_indices, spatiotemporal_distance, EventGraph};
use crate::tensor::{NodeId, NormMode, Tape, Tensor};

const NORM_EPS: f64 = 1e-8;

/// Hyperparameters of the network. `down_rates` is pinned to `[1, 4, 4]`
/// shape-wise: three stages with no reduction at the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtnnConfig {
    pub encoder_dims: [usize; 3],
    pub down_rates: [usize; 3],
    pub k: usize,
    pub global_dim: usize,
    pub head_hidden: usize,
}

impl Default for GtnnConfig {
    fn default() -> Self {
        GtnnConfig {
            encoder_dims: [32, 64, 128],
            down_rates: [1, 4, 4],
            k: 16,
            global_dim: 128,
            head_hidden: 64,
        }
    }
}

impl GtnnConfig {
    /// Reduced configuration for desk-scale experiments.
    pub fn reduced(dims: [usize; 3], k: usize) -> Self {
        GtnnConfig {
            encoder_dims: dims,
            down_rates: [1, 4, 4],
            k,
            global_dim: dims[2],
            head_hidden: dims[2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.down_rates[0] != 1 {
            return Err(Error::InvalidConfig("down_rates[0] must be 1".into()));
        }
        if self.down_rates.iter().any(|&r| r == 0)
            || self.encoder_dims.iter().any(|&d| d == 0)
            || self.k == 0
            || self.global_dim == 0
            || self.head_hidden == 0
        {
            return Err(Error::InvalidConfig("dimensions and rates must be positive".into()));
        }
        Ok(())
    }

    /// key=value lines mirroring the configuration.
    pub fn to_text(&self) -> String {
        format!(
            "encoder_dims={},{},{}\ndown_rates={},{},{}\nk={}\nglobal_dim={}\nhead_hidden={}\nglobal_branch=deepest_encoder\n",
            self.encoder_dims[0],
            self.encoder_dims[1],
            self.encoder_dims[2],
            self.down_rates[0],
            self.down_rates[1],
            self.down_rates[2],
            self.k,
            self.global_dim,
            self.head_hidden
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = GtnnConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("expected key=value, got {line:?}"))
            })?;
            let parse_triple = |v: &str| -> Result<[usize; 3]> {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::InvalidConfig(format!("bad triple {v:?}")))?;
                if parts.len() != 3 {
                    return Err(Error::InvalidConfig(format!("expected 3 values in {v:?}")));
                }
                Ok([parts[0], parts[1], parts[2]])
            };
            match key.trim() {
                "encoder_dims" => cfg.encoder_dims = parse_triple(value)?,
                "down_rates" => cfg.down_rates = parse_triple(value)?,
                "k" => cfg.k = value.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad k {value:?}")))?,
                "global_dim" => cfg.global_dim = value.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad global_dim {value:?}")))?,
                "head_hidden" => cfg.head_hidden = value.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad head_hidden {value:?}")))?,
                "global_branch" => {}
                other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams { w: Tensor::glorot(fan_in, fan_out, rng), b: Tensor::zeros(1, fan_out) }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Vec<NodeId>) -> Result<BoundLinear> {
        let w = tape.param(self.w.clone())?;
        let b = tape.param(self.b.clone())?;
        reg.push(w);
        reg.push(b);
        Ok(BoundLinear { w, b })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    w: NodeId,
    b: NodeId,
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.linear(x, self.w, self.b)
    }
}

/// Per-graph feature normalization with learned affine and running
/// statistics for inference.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl NormParams {
    pub fn new(width: usize) -> Self {
        NormParams {
            scale: Tensor::filled(1, width, 1.0),
            shift: Tensor::zeros(1, width),
            running_mean: Tensor::zeros(1, width),
            running_var: Tensor::filled(1, width, 1.0),
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Vec<NodeId>, mode: ForwardMode) -> Result<BoundNorm> {
        let scale = tape.param(self.scale.clone())?;
        let shift = tape.param(self.shift.clone())?;
        reg.push(scale);
        reg.push(shift);
        let mode = match mode {
            ForwardMode::Train => NormMode::Batch,
            ForwardMode::Infer => NormMode::Running {
                mean: Arc::new(self.running_mean.data().to_vec()),
                var: Arc::new(self.running_var.data().to_vec()),
            },
        };
        Ok(BoundNorm { scale, shift, mode })
    }

    /// Exponential moving average toward freshly observed batch stats.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundNorm {
    scale: NodeId,
    shift: NodeId,
    mode: NormMode,
}

impl BoundNorm {
    pub fn apply(&self, tape: &mut Tape, x: NodeId, norms: &mut Vec<NodeId>) -> Result<NodeId> {
        let out = tape.feature_norm(x, self.scale, self.shift, NORM_EPS, self.mode.clone())?;
        norms.push(out);
        Ok(out)
    }
}

/// Parameters of one vector self-attention block at a fixed width.
#[derive(Debug, Clone)]
pub struct PointTransformerParams {
    pub pre: LinearParams,
    pub phi: LinearParams,
    pub psi: LinearParams,
    pub alpha: LinearParams,
    pub delta1: LinearParams,
    pub delta2: LinearParams,
    pub gamma1: LinearParams,
    pub gamma2: LinearParams,
    pub post: LinearParams,
}

impl PointTransformerParams {
    pub fn new(width: usize, rng: &mut ChaCha8Rng) -> Self {
        PointTransformerParams {
            pre: LinearParams::new(width, width, rng),
            phi: LinearParams::new(width, width, rng),
            psi: LinearParams::new(width, width, rng),
            alpha: LinearParams::new(width, width, rng),
            delta1: LinearParams::new(3, width, rng),
            delta2: LinearParams::new(width, width, rng),
            gamma1: LinearParams::new(width, width, rng),
            gamma2: LinearParams::new(width, width, rng),
            post: LinearParams::new(width, width, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Vec<NodeId>) -> Result<BoundPointTransformer> {
        Ok(BoundPointTransformer {
            pre: self.pre.bind(tape, reg)?,
            phi: self.phi.bind(tape, reg)?,
            psi: self.psi.bind(tape, reg)?,
            alpha: self.alpha.bind(tape, reg)?,
            delta1: self.delta1.bind(tape, reg)?,
            delta2: self.delta2.bind(tape, reg)?,
            gamma1: self.gamma1.bind(tape, reg)?,
            gamma2: self.gamma2.bind(tape, reg)?,
            post: self.post.bind(tape, reg)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPointTransformer {
    pre: BoundLinear,
    phi: BoundLinear,
    psi: BoundLinear,
    alpha: BoundLinear,
    delta1: BoundLinear,
    delta2: BoundLinear,
    gamma1: BoundLinear,
    gamma2: BoundLinear,
    post: BoundLinear,
}

/// Neighborhood structure of one stage, ready for attention: pair r = i*k+j
/// couples node i with its j-th neighbor.
#[derive(Debug, Clone)]
pub struct StageAttention {
    pub n: usize,
    pub k: usize,
    pub pair_i: Arc<Vec<u32>>,
    pub pair_j: Arc<Vec<u32>>,
    /// Constant position differences pos_i - pos_j, one row per pair.
    pub rel_pos: Tensor,
}

impl StageAttention {
    pub fn new(positions: &[[f64; 3]], neighbors: &[u32], k: usize) -> Self {
        let n = positions.len();
        debug_assert_eq!(neighbors.len(), n * k);
        let mut pair_i = Vec::with_capacity(n * k);
        let mut rel = Vec::with_capacity(n * k * 3);
        for i in 0..n {
            for &j in &neighbors[i * k..(i + 1) * k] {
                pair_i.push(i as u32);
                let (a, b) = (positions[i], positions[j as usize]);
                rel.extend_from_slice(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
            }
        }
        StageAttention {
            n,
            k,
            pair_i: Arc::new(pair_i),
            pair_j: Arc::new(neighbors.to_vec()),
            rel_pos: Tensor::from_vec(n * k, 3, rel).unwrap(),
        }
    }
}

/// One point transformer layer: vector self-attention over each node's
/// neighborhood wrapped in pre/post projections and a residual add.
///
/// Per pair (i, j): attention logits gamma(phi(x_i) - psi(x_j) + delta_ij)
/// normalized by softmax over j per channel, applied to alpha(x_j) +
/// delta_ij via the Hadamard product and summed over the neighborhood.
pub fn point_transformer_layer(
    tape: &mut Tape,
    params: &BoundPointTransformer,
    x: NodeId,
    attn: &StageAttention,
) -> Result<NodeId> {
    let y = params.pre.apply(tape, x)?;
    let q = params.phi.apply(tape, y)?;
    let key = params.psi.apply(tape, y)?;
    let val = params.alpha.apply(tape, y)?;

    let qi = tape.gather_rows(q, attn.pair_i.clone())?;
    let kj = tape.gather_rows(key, attn.pair_j.clone())?;
    let vj = tape.gather_rows(val, attn.pair_j.clone())?;

    let rel = tape.constant(attn.rel_pos.clone())?;
    let d1 = params.delta1.apply(tape, rel)?;
    let d1 = tape.relu(d1)?;
    let delta = params.delta2.apply(tape, d1)?;

    let diff = tape.sub(qi, kj)?;
    let pre_gamma = tape.add(diff, delta)?;
    let g1 = params.gamma1.apply(tape, pre_gamma)?;
    let g1 = tape.relu(g1)?;
    let logits = params.gamma2.apply(tape, g1)?;
    let weights = tape.softmax_groups(logits, attn.k)?;

    let value = tape.add(vj, delta)?;
    let weighted = tape.hadamard(weights, value)?;
    let agg = tape.scatter_sum(weighted, attn.pair_i.clone(), attn.n)?;

    let out = params.post.apply(tape, agg)?;
    tape.add(out, x)
}

#[derive(Debug, Clone)]
pub struct TransitionDownParams {
    pub linear: LinearParams,
    pub norm: NormParams,
}

impl TransitionDownParams {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        TransitionDownParams {
            linear: LinearParams::new(fan_in, fan_out, rng),
            norm: NormParams::new(fan_out),
        }
    }
}

/// linear -> norm -> relu on every input row, then, when downsampling,
/// max pooling of each kept node over its source-graph neighborhood.
pub fn transition_down(
    tape: &mut Tape,
    linear: &BoundLinear,
    norm: &BoundNorm,
    norms: &mut Vec<NodeId>,
    x: NodeId,
    pool: Option<(Arc<Vec<u32>>, usize)>,
) -> Result<NodeId> {
    let h = linear.apply(tape, x)?;
    let h = norm.apply(tape, h, norms)?;
    let h = tape.relu(h)?;
    match pool {
        None => Ok(h),
        Some((idx, k)) => tape.neighborhood_max_pool(h, idx, k),
    }
}

#[derive(Debug, Clone)]
pub struct TransitionUpParams {
    pub linear: LinearParams,
    pub norm: NormParams,
    pub project: LinearParams,
}

impl TransitionUpParams {
    pub fn new(coarse_dim: usize, fine_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        TransitionUpParams {
            linear: LinearParams::new(coarse_dim, fine_dim, rng),
            norm: NormParams::new(fine_dim),
            project: LinearParams::new(2 * fine_dim, fine_dim, rng),
        }
    }
}

/// Inverse-squared-distance interpolation plan from a coarse stage onto a
/// fine one: per fine node, up to 3 nearest coarse nodes and their
/// normalized weights. A coincident coarse node takes the full weight.
#[derive(Debug, Clone)]
pub struct InterpPlan {
    pub slots: Vec<Arc<Vec<u32>>>,
    pub weights: Vec<Vec<f64>>,
    pub fine_len: usize,
}

impl InterpPlan {
    /// Fine and coarse stages coincide: every node keeps its own feature.
    pub fn identity(n: usize) -> Self {
        InterpPlan {
            slots: vec![Arc::new((0..n as u32).collect())],
            weights: vec![vec![1.0; n]],
            fine_len: n,
        }
    }

    pub fn build(fine: &[[f64; 3]], coarse: &[[f64; 3]]) -> Self {
        let s = coarse.len().min(3);
        let per_node = crate::par::map_slice(fine, |&fp| {
            // Bounded selection of the s nearest coarse nodes, ties by index.
            let mut nearest: Vec<(f64, u32)> = Vec::with_capacity(s + 1);
            for (ci, &cp) in coarse.iter().enumerate() {
                let cand = (spatiotemporal_distance(fp, cp), ci as u32);
                let pos = nearest.partition_point(|&(d, i)| {
                    d < cand.0 || (d == cand.0 && i < cand.1)
                });
                if pos < s {
                    nearest.insert(pos, cand);
                    nearest.truncate(s);
                }
            }
            let mut w = vec![0.0; s];
            if nearest[0].0 == 0.0 {
                w[0] = 1.0;
            } else {
                let inv: Vec<f64> = nearest.iter().map(|&(d, _)| 1.0 / (d * d)).collect();
                let total: f64 = inv.iter().sum();
                for (wi, iv) in w.iter_mut().zip(&inv) {
                    *wi = iv / total;
                }
            }
            (nearest, w)
        });
        let mut slots = vec![Vec::with_capacity(fine.len()); s];
        let mut weights = vec![Vec::with_capacity(fine.len()); s];
        for (nearest, w) in per_node {
            for slot in 0..s {
                slots[slot].push(nearest[slot].1);
                weights[slot].push(w[slot]);
            }
        }
        InterpPlan {
            slots: slots.into_iter().map(Arc::new).collect(),
            weights,
            fine_len: fine.len(),
        }
    }

    /// Constant weight matrix for one slot at a given feature width.
    fn weight_tensor(&self, slot: usize, width: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.fine_len * width);
        for &w in &self.weights[slot] {
            data.extend(std::iter::repeat(w).take(width));
        }
        Tensor::from_vec(self.fine_len, width, data).unwrap()
    }
}

/// Transform coarse features (linear -> norm -> relu), interpolate onto the
/// fine stage, concatenate the skip features, and project back to the
/// stage width.
pub fn transition_up(
    tape: &mut Tape,
    linear: &BoundLinear,
    norm: &BoundNorm,
    project: &BoundLinear,
    norms: &mut Vec<NodeId>,
    coarse_x: NodeId,
    plan: &InterpPlan,
    skip: NodeId,
) -> Result<NodeId> {
    let h = linear.apply(tape, coarse_x)?;
    let h = norm.apply(tape, h, norms)?;
    let h = tape.relu(h)?;
    let width = tape.value(h).cols();

    let mut interp: Option<NodeId> = None;
    for slot in 0..plan.slots.len() {
        let gathered = tape.gather_rows(h, plan.slots[slot].clone())?;
        let w = tape.constant(plan.weight_tensor(slot, width))?;
        let term = tape.hadamard(gathered, w)?;
        interp = Some(match interp {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let interp = interp.expect("at least one interpolation slot");
    let cat = tape.concat_features(interp, skip)?;
    project.apply(tape, cat)
}

#[derive(Debug, Clone)]
pub struct GlobalParams {
    pub mlp1: LinearParams,
    pub mlp2: LinearParams,
}

impl GlobalParams {
    pub fn new(fan_in: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        GlobalParams {
            mlp1: LinearParams::new(fan_in, dim, rng),
            mlp2: LinearParams::new(dim, dim, rng),
        }
    }
}

/// Collapse the deepest stage to one node by max pooling over all of its
/// nodes, run the MLP, and average-pool into the global feature vector.
pub fn global_aggregate(
    tape: &mut Tape,
    mlp1: &BoundLinear,
    mlp2: &BoundLinear,
    x: NodeId,
) -> Result<NodeId> {
    let p = tape.value(x).rows();
    let all: Arc<Vec<u32>> = Arc::new((0..p as u32).collect());
    let pooled = tape.neighborhood_max_pool(x, all, p)?;
    let h = mlp1.apply(tape, pooled)?;
    let h = tape.relu(h)?;
    let g = mlp2.apply(tape, h)?;
    tape.global_avg_pool(g)
}

#[derive(Debug, Clone)]
pub struct EncoderUnit {
    pub down: TransitionDownParams,
    pub pt: PointTransformerParams,
}

#[derive(Debug, Clone)]
pub struct DecoderUnit {
    pub up: TransitionUpParams,
    pub pt: PointTransformerParams,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub hidden: LinearParams,
    pub out: LinearParams,
}

/// Full parameter set of the segmentation network.
#[derive(Debug, Clone)]
pub struct GtnnModel {
    pub config: GtnnConfig,
    pub input_linear: LinearParams,
    pub input_norm: NormParams,
    pub encoders: Vec<EncoderUnit>,
    pub global: GlobalParams,
    pub decoders: Vec<DecoderUnit>,
    pub head: HeadParams,
}

impl GtnnModel {
    pub fn new(config: GtnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1, w2] = config.encoder_dims;
        let input_linear = LinearParams::new(3, w0, &mut rng);
        let input_norm = NormParams::new(w0);
        let encoders = vec![
            EncoderUnit {
                down: TransitionDownParams::new(w0, w0, &mut rng),
                pt: PointTransformerParams::new(w0, &mut rng),
            },
            EncoderUnit {
                down: TransitionDownParams::new(w0, w1, &mut rng),
                pt: PointTransformerParams::new(w1, &mut rng),
            },
            EncoderUnit {
                down: TransitionDownParams::new(w1, w2, &mut rng),
                pt: PointTransformerParams::new(w2, &mut rng),
            },
        ];
        let global = GlobalParams::new(w2, config.global_dim, &mut rng);
        let decoders = vec![
            DecoderUnit {
                up: TransitionUpParams::new(w2, w1, &mut rng),
                pt: PointTransformerParams::new(w1, &mut rng),
            },
            DecoderUnit {
                up: TransitionUpParams::new(w1, w0, &mut rng),
                pt: PointTransformerParams::new(w0, &mut rng),
            },
            DecoderUnit {
                up: TransitionUpParams::new(w0, w0, &mut rng),
                pt: PointTransformerParams::new(w0, &mut rng),
            },
        ];
        let head = HeadParams {
            hidden: LinearParams::new(w0 + config.global_dim, config.head_hidden, &mut rng),
            out: LinearParams::new(config.head_hidden, 2, &mut rng),
        };
        Ok(GtnnModel {
            config,
            input_linear,
            input_norm,
            encoders,
            global,
            decoders,
            head,
        })
    }

    /// Visit every trainable tensor in binding order.
    pub fn visit_trainable(&self, f: &mut impl FnMut(&str, &Tensor)) {
        let visit_linear = |f: &mut dyn FnMut(&str, &Tensor), name: &str, l: &LinearParams| {
            f(&format!("{name}.w"), &l.w);
            f(&format!("{name}.b"), &l.b);
        };
        let visit_norm = |f: &mut dyn FnMut(&str, &Tensor), name: &str, n: &NormParams| {
            f(&format!("{name}.scale"), &n.scale);
            f(&format!("{name}.shift"), &n.shift);
        };
        let visit_pt = |f: &mut dyn FnMut(&str, &Tensor), name: &str, p: &PointTransformerParams| {
            visit_linear(f, &format!("{name}.pre"), &p.pre);
            visit_linear(f, &format!("{name}.phi"), &p.phi);
            visit_linear(f, &format!("{name}.psi"), &p.psi);
            visit_linear(f, &format!("{name}.alpha"), &p.alpha);
            visit_linear(f, &format!("{name}.delta1"), &p.delta1);
            visit_linear(f, &format!("{name}.delta2"), &p.delta2);
            visit_linear(f, &format!("{name}.gamma1"), &p.gamma1);
            visit_linear(f, &format!("{name}.gamma2"), &p.gamma2);
            visit_linear(f, &format!("{name}.post"), &p.post);
        };
        visit_linear(f, "input.linear", &self.input_linear);
        visit_norm(f, "input.norm", &self.input_norm);
        for (s, enc) in self.encoders.iter().enumerate() {
            visit_linear(f, &format!("enc{s}.down.linear"), &enc.down.linear);
            visit_norm(f, &format!("enc{s}.down.norm"), &enc.down.norm);
            visit_pt(f, &format!("enc{s}.pt"), &enc.pt);
        }
        visit_linear(f, "global.mlp1", &self.global.mlp1);
        visit_linear(f, "global.mlp2", &self.global.mlp2);
        for (s, dec) in self.decoders.iter().enumerate() {
            visit_linear(f, &format!("dec{s}.up.linear"), &dec.up.linear);
            visit_norm(f, &format!("dec{s}.up.norm"), &dec.up.norm);
            visit_linear(f, &format!("dec{s}.up.project"), &dec.up.project);
            visit_pt(f, &format!("dec{s}.pt"), &dec.pt);
        }
        visit_linear(f, "head.hidden", &self.head.hidden);
        visit_linear(f, "head.out", &self.head.out);
    }

    pub fn visit_trainable_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        let visit_linear = |f: &mut dyn FnMut(&mut Tensor), l: &mut LinearParams| {
            f(&mut l.w);
            f(&mut l.b);
        };
        let visit_pt = |f: &mut dyn FnMut(&mut Tensor), p: &mut PointTransformerParams| {
            for l in [
                &mut p.pre, &mut p.phi, &mut p.psi, &mut p.alpha, &mut p.delta1, &mut p.delta2,
                &mut p.gamma1, &mut p.gamma2, &mut p.post,
            ] {
                f(&mut l.w);
                f(&mut l.b);
            }
        };
        visit_linear(f, &mut self.input_linear);
        f(&mut self.input_norm.scale);
        f(&mut self.input_norm.shift);
        for enc in &mut self.encoders {
            visit_linear(f, &mut enc.down.linear);
            f(&mut enc.down.norm.scale);
            f(&mut enc.down.norm.shift);
            visit_pt(f, &mut enc.pt);
        }
        visit_linear(f, &mut self.global.mlp1);
        visit_linear(f, &mut self.global.mlp2);
        for dec in &mut self.decoders {
            visit_linear(f, &mut dec.up.linear);
            f(&mut dec.up.norm.scale);
            f(&mut dec.up.norm.shift);
            visit_linear(f, &mut dec.up.project);
            visit_pt(f, &mut dec.pt);
        }
        visit_linear(f, &mut self.head.hidden);
        visit_linear(f, &mut self.head.out);
    }

    /// Norm layers in the order their batch statistics appear in a
    /// training forward pass.
    pub fn norms_mut(&mut self) -> Vec<&mut NormParams> {
        let mut out: Vec<&mut NormParams> = Vec::with_capacity(7);
        out.push(&mut self.input_norm);
        for enc in &mut self.encoders {
            out.push(&mut enc.down.norm);
        }
        for dec in &mut self.decoders {
            out.push(&mut dec.up.norm);
        }
        out
    }

    /// Checkpoint state: trainable tensors followed by running statistics.
    pub fn visit_state(&self, f: &mut impl FnMut(&str, &Tensor)) {
        self.visit_trainable(f);
        let mut names = Vec::new();
        names.push(("input.norm".to_string(), &self.input_norm));
        for (s, enc) in self.encoders.iter().enumerate() {
            names.push((format!("enc{s}.down.norm"), &enc.down.norm));
        }
        for (s, dec) in self.decoders.iter().enumerate() {
            names.push((format!("dec{s}.up.norm"), &dec.up.norm));
        }
        for (name, norm) in names {
            f(&format!("{name}.running_mean"), &norm.running_mean);
            f(&format!("{name}.running_var"), &norm.running_var);
        }
    }

    pub fn visit_state_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        self.visit_trainable_mut(f);
        f(&mut self.input_norm.running_mean);
        f(&mut self.input_norm.running_var);
        for i in 0..self.encoders.len() {
            f(&mut self.encoders[i].down.norm.running_mean);
            f(&mut self.encoders[i].down.norm.running_var);
        }
        for i in 0..self.decoders.len() {
            f(&mut self.decoders[i].up.norm.running_mean);
            f(&mut self.decoders[i].up.norm.running_var);
        }
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit_trainable(&mut |_, _| n += 1);
        n
    }

    /// Round every state tensor through f32, matching checkpoint storage.
    pub fn quantize_f32(&mut self) {
        self.visit_state_mut(&mut |t| t.quantize_f32());
    }

    /// Inference: per-event class probabilities, rows summing to 1.
    pub fn forward(&self, graph: &EventGraph) -> Result<Tensor> {
        let pyramid = StagePyramid::build(graph, &self.config)?;
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, graph, &pyramid, ForwardMode::Infer)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Forward pass on a caller-owned tape, returning the output node, the
    /// bound parameter ids (in `visit_trainable` order), and norm nodes.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        graph: &EventGraph,
        pyramid: &StagePyramid,
        mode: ForwardMode,
    ) -> Result<ForwardPass> {
        let mut reg = Vec::new();
        let mut norms = Vec::new();

        let input_linear = self.input_linear.bind(tape, &mut reg)?;
        let input_norm = self.input_norm.bind(tape, &mut reg, mode)?;
        let enc_bound: Vec<_> = self
            .encoders
            .iter()
            .map(|e| {
                Ok((
                    e.down.linear.bind(tape, &mut reg)?,
                    e.down.norm.bind(tape, &mut reg, mode)?,
                    e.pt.bind(tape, &mut reg)?,
                ))
            })
            .collect::<Result<_>>()?;
        let gm1 = self.global.mlp1.bind(tape, &mut reg)?;
        let gm2 = self.global.mlp2.bind(tape, &mut reg)?;
        let dec_bound: Vec<_> = self
            .decoders
            .iter()
            .map(|d| {
                Ok((
                    d.up.linear.bind(tape, &mut reg)?,
                    d.up.norm.bind(tape, &mut reg, mode)?,
                    d.up.project.bind(tape, &mut reg)?,
                    d.pt.bind(tape, &mut reg)?,
                ))
            })
            .collect::<Result<_>>()?;
        let head_hidden = self.head.hidden.bind(tape, &mut reg)?;
        let head_out = self.head.out.bind(tape, &mut reg)?;

        // Input MLP on raw (x, y, t_scaled) features.
        let feats = Tensor::from_vec(
            graph.features.len(),
            3,
            graph.features.iter().flatten().copied().collect(),
        )?;
        let x = tape.constant(feats)?;
        let x = input_linear.apply(tape, x)?;
        let x = input_norm.apply(tape, x, &mut norms)?;
        let x0 = tape.relu(x)?;

        // Encoder: [transition down, point transformer] per stage.
        let mut skips = Vec::with_capacity(3);
        let mut x = x0;
        for (s, (lin, norm, pt)) in enc_bound.iter().enumerate() {
            let pool = pyramid.stages[s]
                .pool
                .as_ref()
                .map(|p| (p.idx.clone(), p.k));
            let h = transition_down(tape, lin, norm, &mut norms, x, pool)?;
            x = point_transformer_layer(tape, pt, h, &pyramid.stages[s].attention)?;
            skips.push(x);
        }

        // Global branch from the deepest encoder output.
        let global = global_aggregate(tape, &gm1, &gm2, x)?;

        // Decoder: transition up + point transformer, coarse to fine.
        // Skips pair by stage size: e1, e0, then the input features.
        let skip_sources = [skips[1], skips[0], x0];
        for (d, (lin, norm, project, pt)) in dec_bound.iter().enumerate() {
            let stage = 2 - d; // coarse stage the features currently live on
            let plan = &pyramid.stages[stage].interp;
            let fine_attention = if stage >= 1 {
                &pyramid.stages[stage - 1].attention
            } else {
                &pyramid.stages[0].attention
            };
            x = transition_up(tape, lin, norm, project, &mut norms, x, plan, skip_sources[d])?;
            x = point_transformer_layer(tape, pt, x, fine_attention)?;
        }

        // Append the global vector to every node feature.
        let n = tape.value(x).rows();
        let bcast_idx: Arc<Vec<u32>> = Arc::new(vec![0; n]);
        let g_rows = tape.gather_rows(global, bcast_idx)?;
        let cat = tape.concat_features(x, g_rows)?;
        let h = head_hidden.apply(tape, cat)?;
        let h = tape.relu(h)?;
        let logits = head_out.apply(tape, h)?;
        let output = tape.softmax_rows(logits)?;

        Ok(ForwardPass { output, params: reg, norms })
    }
}

/// Predicted class per row: argmax with ties resolved to background.
pub fn predicted_labels(probs: &Tensor) -> Vec<u8> {
    (0..probs.rows())
        .map(|r| if probs.get(r, 1) > probs.get(r, 0) { 1 } else { 0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Infer,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub output: NodeId,
    pub params: Vec<NodeId>,
    pub norms: Vec<NodeId>,
}

/// Pooling source for a downsampled stage: each kept node's neighborhood
/// rows in the previous stage.
#[derive(Debug, Clone)]
pub struct PoolPlan {
    pub idx: Arc<Vec<u32>>,
    pub k: usize,
}

/// Geometry of one stage plus the plans coupling it to its neighbors.
#[derive(Debug, Clone)]
pub struct PyramidStage {
    pub positions: Vec<[f64; 3]>,
    pub attention: StageAttention,
    /// Present for stages produced by an actual reduction.
    pub pool: Option<PoolPlan>,
    /// Interpolation back onto the previous (or same, for stage 0) stage.
    pub interp: InterpPlan,
}

/// Node-count pyramid precomputed per input graph. Stage 0 reuses the
/// input kNN structure; coarser stages are farthest-point samples with
/// fresh kNN graphs, k capped at stage size minus one.
#[derive(Debug, Clone)]
pub struct StagePyramid {
    pub stages: Vec<PyramidStage>,
}

impl StagePyramid {
    pub fn build(graph: &EventGraph, config: &GtnnConfig) -> Result<Self> {
        config.validate()?;
        let n = graph.len();
        let deepest = n.div_ceil(config.down_rates[1]).div_ceil(config.down_rates[2]);
        if deepest < 2 {
            return Err(Error::Size(format!(
                "graph of {n} nodes is too small for the down-rate pyramid (deepest stage {deepest} < 2)"
            )));
        }

        let mut stages: Vec<PyramidStage> = Vec::with_capacity(3);
        // Stage 0: the input graph itself; interpolation onto itself is the
        // identity (used by the rate-1 decoder).
        let stage0_attention = StageAttention::new(&graph.positions, &graph.neighbors, graph.k);
        let stage0_interp = InterpPlan::identity(n);
        stages.push(PyramidStage {
            positions: graph.positions.clone(),
            attention: stage0_attention,
            pool: None,
            interp: stage0_interp,
        });

        let mut prev_positions = graph.positions.clone();
        let mut prev_neighbors: Arc<Vec<u32>> = Arc::new(graph.neighbors.clone());
        let mut prev_k = graph.k;
        for s in 1..3 {
            let rate = config.down_rates[s];
            let p2 = prev_positions.len().div_ceil(rate);
            let selected = farthest_point_sampling(&prev_positions, p2)?;
            let positions: Vec<[f64; 3]> = selected.iter().map(|&i| prev_positions[i]).collect();
            let mut pool_idx = Vec::with_capacity(p2 * prev_k);
            for &node in &selected {
                pool_idx.extend_from_slice(&prev_neighbors[node * prev_k..(node + 1) * prev_k]);
            }
            let k = config.k.min(positions.len() - 1).max(1);
            let neighbors = knn_graph_indices(&positions, k)?;
            let attention = StageAttention::new(&positions, &neighbors, k);
            let interp = InterpPlan::build(&prev_positions, &positions);
            stages.push(PyramidStage {
                positions: positions.clone(),
                attention,
                pool: Some(PoolPlan { idx: Arc::new(pool_idx), k: prev_k }),
                interp,
            });
            prev_neighbors = Arc::new(neighbors);
            prev_positions = positions;
            prev_k = k;
        }
        Ok(StagePyramid { stages })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.positions.len()).collect()
    }
}
