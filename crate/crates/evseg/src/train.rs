//! Loss functions, subset-cycling schedules, and the training loop.
//!
//! Training splits the sample list into `L` subsets and exposes the
//! network to subset `i mod L` at epoch `i`, so every `L` consecutive
//! epochs cover the full set once. Within an epoch, mini-batches of
//! graphs run forward/backward on independent tapes (in parallel) and
//! their averaged gradients feed one Adam step per batch.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::EventGraph;
use crate::gtnn::{ForwardMode, GtnnModel, StagePyramid};
use crate::par;
use crate::tensor::{AdamConfig, AdamState, NodeId, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Focal,
    DualFocal,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "focal" => Ok(LossKind::Focal),
            "dual_focal" | "dfl" => Ok(LossKind::DualFocal),
            other => Err(Error::InvalidConfig(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Focusing exponent; ignored by plain cross entropy.
    pub gamma: f64,
    /// Per-class weights (background, foreground).
    pub weights: [f64; 2],
}

impl LossConfig {
    pub fn cross_entropy() -> Self {
        LossConfig { kind: LossKind::CrossEntropy, gamma: 0.0, weights: [1.0, 1.0] }
    }

    pub fn focal(gamma: f64) -> Self {
        LossConfig { kind: LossKind::Focal, gamma, weights: [1.0, 1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.weights.iter().any(|&w| w < 0.0 || !w.is_finite())
            || self.weights.iter().all(|&w| w == 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "class weights must be non-negative and not both zero, got {:?}",
                self.weights
            )));
        }
        Ok(())
    }

    /// Inverse class frequency over a label set: w_c = n / (2 * n_c).
    pub fn with_inverse_frequency(mut self, labels: impl Iterator<Item = u8>) -> Self {
        let mut counts = [0usize; 2];
        for l in labels {
            counts[(l > 0) as usize] += 1;
        }
        let total = (counts[0] + counts[1]) as f64;
        for c in 0..2 {
            self.weights[c] = if counts[c] == 0 { 0.0 } else { total / (2.0 * counts[c] as f64) };
        }
        self
    }
}

/// Mean per-event loss of class probabilities against labels, recorded on
/// the tape so gradients flow back through `probs`.
///
/// focal: -w_c (1 - p_true)^gamma log p_true; dual_focal adds the
/// complementary -w_c p_other^gamma log(1 - p_other); cross entropy is the
/// gamma-free special case. Probabilities are clamped at 1e-12 before
/// every log.
pub fn compute_loss(
    tape: &mut Tape,
    probs: NodeId,
    labels: &[u8],
    config: &LossConfig,
) -> Result<NodeId> {
    config.validate()?;
    let n = tape.value(probs).rows();
    if tape.value(probs).cols() != 2 || labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "compute_loss",
            msg: format!(
                "probs {:?} against {} labels",
                tape.value(probs).shape(),
                labels.len()
            ),
        });
    }
    let mut onehot_true = Tensor::zeros(n, 2);
    let mut onehot_other = Tensor::zeros(n, 2);
    let mut w = Tensor::zeros(n, 1);
    for (i, &l) in labels.iter().enumerate() {
        let c = (l > 0) as usize;
        onehot_true.set(i, c, 1.0);
        onehot_other.set(i, 1 - c, 1.0);
        w.set(i, 0, config.weights[c]);
    }
    let onehot_true = tape.constant(onehot_true)?;
    let onehot_other = tape.constant(onehot_other)?;
    let w = tape.constant(w)?;
    let col_ones = tape.constant(Tensor::filled(2, 1, 1.0))?;
    let ones_n = tape.constant(Tensor::filled(n, 1, 1.0))?;
    let neg_ones = tape.constant(Tensor::filled(n, 1, -1.0))?;

    let masked_true = tape.hadamard(probs, onehot_true)?;
    let p_true = tape.matmul(masked_true, col_ones)?;
    let log_p = tape.log_clamped(p_true)?;
    let neg_log_p = tape.hadamard(log_p, neg_ones)?;

    let mut per_event = match config.kind {
        LossKind::CrossEntropy => neg_log_p,
        LossKind::Focal | LossKind::DualFocal => {
            let miss = tape.sub(ones_n, p_true)?;
            let factor = tape.pow_scalar(miss, config.gamma)?;
            tape.hadamard(factor, neg_log_p)?
        }
    };
    if config.kind == LossKind::DualFocal {
        let masked_other = tape.hadamard(probs, onehot_other)?;
        let p_other = tape.matmul(masked_other, col_ones)?;
        let clamp_arg = tape.sub(ones_n, p_other)?;
        let log_c = tape.log_clamped(clamp_arg)?;
        let neg_log_c = tape.hadamard(log_c, neg_ones)?;
        let factor = tape.pow_scalar(p_other, config.gamma)?;
        let extra = tape.hadamard(factor, neg_log_c)?;
        per_event = tape.add(per_event, extra)?;
    }
    let weighted = tape.hadamard(per_event, w)?;
    tape.global_avg_pool(weighted)
}

/// A deterministic shuffled partition of sample indices into `L`
/// near-equal subsets (sizes differ by at most one).
#[derive(Debug, Clone)]
pub struct TrainingSchedule {
    subsets: Vec<Vec<usize>>,
}

impl TrainingSchedule {
    pub fn subset_count(&self) -> usize {
        self.subsets.len()
    }

    pub fn subset(&self, j: usize) -> &[usize] {
        &self.subsets[j]
    }

    /// Subset index used at epoch `i`: J = i mod L.
    pub fn subset_for_epoch(&self, epoch: usize) -> usize {
        epoch % self.subsets.len()
    }
}

pub fn make_schedule(n_samples: usize, l: usize, seed: u64) -> Result<TrainingSchedule> {
    if l == 0 || l > n_samples {
        return Err(Error::Schedule(format!("cannot split {n_samples} samples into {l} subsets")));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let base = n_samples / l;
    let rem = n_samples % l;
    let mut subsets = Vec::with_capacity(l);
    let mut cursor = 0;
    for j in 0..l {
        let size = base + (j < rem) as usize;
        subsets.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(TrainingSchedule { subsets })
}

/// One labeled graph.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub graph: EventGraph,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
pub struct WindowingParams {
    pub window_us: i64,
    pub n_max: usize,
    pub k: usize,
    /// Windows below this event count are skipped.
    pub min_events: usize,
    pub geometry: crate::events::SensorGeometry,
}

/// Slice a labeled sequence into window graphs ready for training. The
/// per-window cap keeps the most recent events, and their labels follow.
pub fn build_window_samples(
    events: &[crate::events::Event],
    labels: &[crate::events::EventLabel],
    params: &WindowingParams,
) -> Result<Vec<TrainSample>> {
    if labels.len() != events.len() {
        return Err(Error::ShapeMismatch {
            op: "build_window_samples",
            msg: format!("{} labels for {} events", labels.len(), events.len()),
        });
    }
    let windows = crate::events::slice_windows(events, params.window_us, usize::MAX)?;
    let metric = crate::graph::MetricConfig::auto(params.geometry, params.window_us);
    let floor = params.min_events.max(params.k + 1).max(17);
    let mut samples = Vec::new();
    let mut cursor = 0usize;
    for mut window in windows {
        let start = cursor;
        cursor += window.len();
        if window.len() < floor {
            continue;
        }
        let mut first = start;
        if window.len() > params.n_max {
            let drop = window.len() - params.n_max;
            window.events.drain(..drop);
            first += drop;
        }
        window.n_max = params.n_max;
        let graph = crate::graph::build_knn_graph(&window, params.k, metric, params.geometry)?;
        let node_labels: Vec<u8> = labels[first..first + window.len()]
            .iter()
            .map(|l| l.foreground as u8)
            .collect();
        samples.push(TrainSample { graph, labels: node_labels });
    }
    Ok(samples)
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub subset: usize,
    pub loss: f64,
    pub seconds: f64,
    pub checksum: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub entries: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV rows `epoch,subset,loss,seconds`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,subset,loss,seconds")?;
        for e in &self.entries {
            writeln!(w, "{},{},{:.9},{:.3}", e.epoch, e.subset, e.loss, e.seconds)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Momentum for running normalization statistics.
    pub stats_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            adam: AdamConfig::default(),
            loss: LossConfig::focal(2.0),
            seed: 0,
            stats_momentum: 0.1,
        }
    }
}

/// FNV-1a over the trainable parameters in visit order.
pub fn parameter_checksum(model: &GtnnModel) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    model.visit_trainable(&mut |_, t| {
        for &v in t.data() {
            for b in v.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    });
    hash
}

struct SampleResult {
    loss: f64,
    grads: Vec<Tensor>,
    stats: Vec<(Vec<f64>, Vec<f64>)>,
}

fn run_sample(
    model: &GtnnModel,
    sample: &TrainSample,
    pyramid: &StagePyramid,
    loss_cfg: &LossConfig,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let pass = model.forward_on_tape(&mut tape, &sample.graph, pyramid, ForwardMode::Train)?;
    let loss_id = compute_loss(&mut tape, pass.output, &sample.labels, loss_cfg)?;
    let loss = tape.value(loss_id).item();
    tape.backward(loss_id)?;
    let grads = pass.params.iter().map(|&id| tape.grad(id)).collect();
    let stats = pass
        .norms
        .iter()
        .map(|&id| {
            let (m, v) = tape.norm_batch_stats(id).expect("batch mode records stats");
            (m.to_vec(), v.to_vec())
        })
        .collect();
    Ok(SampleResult { loss, grads, stats })
}

/// Subset-cycling training. Epoch `i` runs mini-batch gradient descent
/// over subset `i mod L` only; gradients are averaged over each batch and
/// applied with a single Adam step.
pub fn train(
    model: &mut GtnnModel,
    samples: &[TrainSample],
    schedule: &TrainingSchedule,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.loss.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.labels.len() != s.graph.len() {
            return Err(Error::ShapeMismatch {
                op: "train",
                msg: format!(
                    "sample {i} has {} labels for {} nodes",
                    s.labels.len(),
                    s.graph.len()
                ),
            });
        }
    }

    // Stage pyramids depend only on geometry; build each once.
    let pyramids: Vec<StagePyramid> = par::map_slice(samples, |s| StagePyramid::build(&s.graph, &model.config))
        .into_iter()
        .collect::<Result<_>>()?;

    let mut params: Vec<Tensor> = Vec::new();
    model.visit_trainable(&mut |_, t| params.push(t.clone()));
    let mut adam = AdamState::new(&params.iter().collect::<Vec<_>>(), cfg.adam);
    drop(params);

    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let j = schedule.subset_for_epoch(epoch);
        let subset = schedule.subset(j);
        if subset.is_empty() {
            return Err(Error::Schedule(format!("subset {j} is empty")));
        }
        let mut order = subset.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15),
        );
        for i in (1..order.len()).rev() {
            let swap = rng.gen_range(0..=i);
            order.swap(i, swap);
        }

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<SampleResult>> = par::map_slice(batch, |&i| {
                run_sample(model, &samples[i], &pyramids[i], &cfg.loss)
            });
            let mut batch_grads: Option<Vec<Tensor>> = None;
            let mut batch_stats: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
            for (pos, res) in results.into_iter().enumerate() {
                let res = res?;
                if !res.loss.is_finite() {
                    return Err(Error::TrainAbort(format!(
                        "non-finite loss {} at epoch {epoch}, sample {}",
                        res.loss, batch[pos]
                    )));
                }
                epoch_loss += res.loss;
                match &mut batch_grads {
                    None => batch_grads = Some(res.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&res.grads) {
                            for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                                *av += gv;
                            }
                        }
                    }
                }
                match &mut batch_stats {
                    None => batch_stats = Some(res.stats),
                    Some(acc) => {
                        for (a, s) in acc.iter_mut().zip(&res.stats) {
                            for (av, sv) in a.0.iter_mut().zip(&s.0) {
                                *av += sv;
                            }
                            for (av, sv) in a.1.iter_mut().zip(&s.1) {
                                *av += sv;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = batch_grads.expect("non-empty batch");
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            // One optimizer step per batch over averaged gradients.
            adam.begin_step();
            let mut idx = 0;
            let mut step_err: Option<Error> = None;
            model.visit_trainable_mut(&mut |t| {
                if step_err.is_none() {
                    if let Err(e) = adam.update_one(idx, t, &grads[idx]) {
                        step_err = Some(e);
                    }
                }
                idx += 1;
            });
            if let Some(e) = step_err {
                return Err(e);
            }

            // Fold averaged batch statistics into running estimates.
            let stats = batch_stats.expect("non-empty batch");
            for ((mean, var), norm) in stats.into_iter().zip(model.norms_mut()) {
                let m: Vec<f64> = mean.iter().map(|v| v * scale).collect();
                let v: Vec<f64> = var.iter().map(|v| v * scale).collect();
                norm.update_running(&m, &v, cfg.stats_momentum);
            }
        }
        history.entries.push(EpochRecord {
            epoch,
            subset: j,
            loss: epoch_loss / subset.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
            checksum: parameter_checksum(model),
        });
    }
    Ok(history)
}
