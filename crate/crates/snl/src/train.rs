//! Training procedures: dense pretraining, the budgeted linearization loop
//! with its multiplicative lambda schedule, KD finetuning, the zero-out and
//! from-scratch variants, and an L1-magnitude structured-pruning baseline.

use crate::data::{DataSplit, Dataset};
use crate::error::{Result, SnlError};
use crate::network::{GatedNetwork, Layer};
use crate::optim::{Adam, SgdMomentum};
use crate::tape::{GateMode, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Knowledge-distillation settings for the finetune stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KdConfig {
    pub enabled: bool,
    pub temperature: f64,
    pub hard_weight: f64,
    pub soft_weight: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig { enabled: true, temperature: 4.0, hard_weight: 0.5, soft_weight: 0.5 }
    }
}

/// Hyperparameters of the linearization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnlConfig {
    /// Initial Lasso coefficient.
    pub lambda0: f64,
    /// Multiplicative schedule factor applied when the count stalls.
    pub kappa: f64,
    /// Gate threshold.
    pub epsilon: f64,
    /// ReLU budget, in ReLU operations.
    pub budget: usize,
    pub adam_lr: f64,
    pub finetune_lr: f64,
    pub finetune_momentum: f64,
    pub finetune_epochs: usize,
    pub kd: KdConfig,
    /// Safeguard: the joint loop has no termination guarantee when the
    /// budget is unreachable.
    pub max_joint_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep the relaxed gates inside [0,1] during the joint phase.
    pub clip_gates: bool,
    /// Weight decay applied to the gate group (off by default).
    pub weight_decay_c: f64,
    /// Disable the homotopy schedule and keep lambda fixed (ablation use).
    pub lambda_schedule: bool,
}

impl Default for SnlConfig {
    fn default() -> Self {
        SnlConfig {
            lambda0: 1e-5,
            kappa: 1.1,
            epsilon: 0.01,
            budget: 0,
            adam_lr: 1e-3,
            finetune_lr: 1e-3,
            finetune_momentum: 0.9,
            finetune_epochs: 10,
            kd: KdConfig::default(),
            max_joint_epochs: 500,
            batch_size: 64,
            seed: 0,
            clip_gates: false,
            weight_decay_c: 0.0,
            lambda_schedule: true,
        }
    }
}

impl SnlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda0 <= 0.0 {
            return Err(SnlError::InvalidArgument("lambda0 must be > 0".into()));
        }
        if self.kappa <= 1.0 {
            return Err(SnlError::InvalidArgument("kappa must be > 1".into()));
        }
        if self.epsilon < 0.0 {
            return Err(SnlError::InvalidArgument("epsilon must be >= 0".into()));
        }
        if self.kd.enabled && (self.kd.hard_weight + self.kd.soft_weight - 1.0).abs() > 1e-12 {
            return Err(SnlError::InvalidArgument(
                "KD hard and soft weights must sum to 1".into(),
            ));
        }
        if self.kd.enabled && self.kd.temperature <= 0.0 {
            return Err(SnlError::InvalidArgument("KD temperature must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(SnlError::InvalidArgument("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Terminal condition of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    BudgetReached,
    MaxEpochs,
    Diverged,
    Completed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub test_acc: f64,
    pub relu_count: usize,
    pub lambda: f64,
}

/// Per-epoch trace of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub status: RunStatus,
}

impl TrainReport {
    /// CSV trace with a versioned header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# train-report-v1\nepoch,loss,test_acc,relu_count,lambda\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.loss, r.test_acc, r.relu_count, r.lambda
            ));
        }
        out
    }
}

/// Piecewise-constant learning-rate schedule for pretraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    /// Standard step schedule scaled to the epoch count: decay at 1/2 and
    /// 3/4 of the run.
    pub fn for_epochs(epochs: usize) -> Self {
        LrSchedule {
            initial: 0.1,
            milestones: vec![epochs / 2, epochs * 3 / 4],
            factor: 0.1,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(decays as i32)
    }
}

/// Sum of |c| over all gate entries, with the subgradient sign(c)
/// (sign(0) = 0).
pub fn lasso_penalty(gate_values: &[f64]) -> (f64, Vec<f64>) {
    let value = gate_values.iter().map(|v| v.abs()).sum();
    let sub = gate_values
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    (value, sub)
}

/// Homotopy step: bump lambda by kappa when the count failed to decrease.
pub fn lambda_step(lambda: f64, count_now: usize, count_prev: usize, kappa: f64) -> f64 {
    if count_now >= count_prev {
        kappa * lambda
    } else {
        lambda
    }
}

/// Fraction of correct argmax predictions.
pub fn evaluate(net: &GatedNetwork, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(SnlError::EmptyDataset);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(512) {
        let (x, labels) = data.batch(chunk);
        let logits = net.forward(&x)?;
        let classes = logits.shape()[1];
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn grads_or_zeros(tape: &Tape, ids: &[crate::tape::ValId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| match tape.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; tape.value(id).numel()],
        })
        .collect()
}

/// One epoch of CE-only SGD over the weight group. Returns mean loss.
fn sgd_epoch(
    net: &mut GatedNetwork,
    train: &Dataset,
    batch_size: usize,
    sgd: &mut SgdMomentum,
    teacher: Option<(&GatedNetwork, &KdConfig)>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let order = shuffled_indices(train.len(), rng);
    let mut total_loss = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let (x, labels) = train.batch(chunk);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let ids = net.forward_tape(&mut tape, xi)?;
        let ce = tape.softmax_cross_entropy(ids.output, &labels)?;
        let loss = match teacher {
            Some((teacher_net, kd)) if kd.enabled => {
                let t_logits = tape.leaf(teacher_net.forward(&x)?);
                let kl = tape.kl_soft_targets(ids.output, t_logits, kd.temperature)?;
                let v = kd.hard_weight * tape.value(ce).item()
                    + kd.soft_weight * tape.value(kl).item();
                tape.backward(&[(ce, kd.hard_weight), (kl, kd.soft_weight)])?;
                v
            }
            _ => {
                let v = tape.value(ce).item();
                tape.backward(&[(ce, 1.0)])?;
                v
            }
        };
        if !loss.is_finite() {
            return Err(SnlError::Diverged);
        }
        let grads = grads_or_zeros(&tape, &ids.w_group);
        let mut params = net.w_params_mut();
        let mut slices: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data_mut()).collect();
        sgd.step(&mut slices, &grads);
        total_loss += loss;
        batches += 1;
    }
    Ok(total_loss / batches.max(1) as f64)
}

/// Dense pretraining: SGD with momentum 0.9 on cross-entropy, gates
/// untouched (no L1 term).
pub fn pretrain(
    net: &mut GatedNetwork,
    data: &DataSplit,
    epochs: usize,
    schedule: &LrSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(SnlError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = SgdMomentum::new(schedule.initial, 0.9);
    let mut records = Vec::new();
    for epoch in 0..epochs {
        sgd.lr = schedule.lr_at(epoch);
        let loss = match sgd_epoch(net, &data.train, batch_size, &mut sgd, None, &mut rng) {
            Ok(l) => l,
            Err(SnlError::Diverged) => {
                return Ok(TrainReport { records, status: RunStatus::Diverged })
            }
            Err(e) => return Err(e),
        };
        records.push(EpochRecord {
            epoch,
            loss,
            test_acc: evaluate(net, &data.test)?,
            relu_count: net.relu_count(0.01),
            lambda: 0.0,
        });
    }
    Ok(TrainReport { records, status: RunStatus::Completed })
}

/// One joint epoch: Adam over W and C on CE + lambda*||C||_1, the L1 term
/// entering as a subgradient added to the gate gradients.
fn joint_epoch(
    net: &mut GatedNetwork,
    train: &Dataset,
    cfg: &SnlConfig,
    lambda: f64,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let order = shuffled_indices(train.len(), rng);
    let mut total_loss = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, labels) = train.batch(chunk);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let ids = net.forward_tape(&mut tape, xi)?;
        let ce = tape.softmax_cross_entropy(ids.output, &labels)?;
        let ce_val = tape.value(ce).item();
        tape.backward(&[(ce, 1.0)])?;

        let w_grads = grads_or_zeros(&tape, &ids.w_group);
        let mut c_grads = grads_or_zeros(&tape, &ids.c_group);

        let loss;
        {
            let (mut w_params, c_params) = net.params_mut();
            let mut unfrozen: Vec<&mut crate::network::GateVector> =
                c_params.into_iter().filter(|g| !g.frozen).collect();
            debug_assert_eq!(unfrozen.len(), c_grads.len());
            let (penalty, _) = lasso_penalty(
                &unfrozen.iter().flat_map(|g| g.values.iter().copied()).collect::<Vec<_>>(),
            );
            for (g, grad) in unfrozen.iter().zip(c_grads.iter_mut()) {
                for (j, &v) in g.values.iter().enumerate() {
                    let sign = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    grad[j] += lambda * sign + cfg.weight_decay_c * v;
                }
            }
            loss = ce_val + lambda * penalty;
            if !loss.is_finite() {
                return Err(SnlError::Diverged);
            }

            let mut slices: Vec<&mut [f64]> = w_params
                .iter_mut()
                .map(|t| t.data_mut())
                .chain(unfrozen.iter_mut().map(|g| g.values.as_mut_slice()))
                .collect();
            let mut grads = w_grads;
            grads.extend(c_grads);
            adam.step(&mut slices, &grads);
        }
        if cfg.clip_gates {
            let (_, cs) = net.params_mut();
            for g in cs {
                for v in &mut g.values {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
        total_loss += loss;
        batches += 1;
    }
    Ok(total_loss / batches.max(1) as f64)
}

/// The full linearization loop: joint Adam phase under the ReLU budget,
/// homotopy lambda schedule, binarize, freeze, finetune (with KD when
/// enabled, against the dense input network as teacher).
pub fn snl_run(
    pretrained: &GatedNetwork,
    data: &DataSplit,
    cfg: &SnlConfig,
) -> Result<(GatedNetwork, TrainReport)> {
    cfg.validate()?;
    if pretrained.gates().iter().any(|g| g.frozen) {
        return Err(SnlError::GatesFrozen);
    }
    let teacher = pretrained.clone();
    let mut net = pretrained.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x1a550));
    let mut adam = Adam::new(cfg.adam_lr);
    let mut lambda = cfg.lambda0;
    let mut records = Vec::new();
    let mut count_prev = net.relu_count(cfg.epsilon);
    let mut epoch = 0;
    let mut diverged = false;

    while net.relu_count(cfg.epsilon) > cfg.budget && epoch < cfg.max_joint_epochs {
        let loss = match joint_epoch(&mut net, &data.train, cfg, lambda, &mut adam, &mut rng) {
            Ok(l) => l,
            Err(SnlError::Diverged) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let count_now = net.relu_count(cfg.epsilon);
        if cfg.lambda_schedule {
            lambda = lambda_step(lambda, count_now, count_prev, cfg.kappa);
        }
        records.push(EpochRecord {
            epoch,
            loss,
            test_acc: evaluate(&net, &data.test)?,
            relu_count: count_now,
            lambda,
        });
        count_prev = count_now;
        epoch += 1;
    }

    let status = if diverged {
        RunStatus::Diverged
    } else if net.relu_count(cfg.epsilon) <= cfg.budget {
        RunStatus::BudgetReached
    } else {
        RunStatus::MaxEpochs
    };

    if !diverged {
        net.binarize_gates(cfg.epsilon)?;
        net.freeze_gates()?;
        finetune_kd(&mut net, Some(&teacher), data, cfg)?;
    }
    Ok((net, TrainReport { records, status }))
}

/// Finetune the weight group of a gate-frozen student with
/// hard_weight*CE + soft_weight*T^2*KL against the teacher's soft targets.
/// The gate pattern is bit-identical before and after.
pub fn finetune_kd(
    student: &mut GatedNetwork,
    teacher: Option<&GatedNetwork>,
    data: &DataSplit,
    cfg: &SnlConfig,
) -> Result<()> {
    if !student.gates().is_empty() && !student.gates_frozen() {
        return Err(SnlError::GatesNotFrozen);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xf17e));
    let mut sgd = SgdMomentum::new(cfg.finetune_lr, cfg.finetune_momentum);
    let kd_pair = match (teacher, cfg.kd.enabled) {
        (Some(t), true) => Some((t, &cfg.kd)),
        _ => None,
    };
    for _ in 0..cfg.finetune_epochs {
        sgd_epoch(student, &data.train, cfg.batch_size, &mut sgd, kd_pair, &mut rng)?;
    }
    Ok(())
}

/// L1-magnitude structured pruning baseline: rank each gated layer's
/// channels (units for dense layers) by the L1 norm of incoming weights,
/// zero the gates of the dropped channels in zero-out mode, zero their
/// outgoing weights, then finetune.
///
/// Supports plain sequential stacks (no residual blocks).
pub fn prune_baseline(
    net: &GatedNetwork,
    keep_fraction: f64,
    data: &DataSplit,
    cfg: &SnlConfig,
) -> Result<(GatedNetwork, TrainReport)> {
    let mut pruned = prune_structure(net, keep_fraction)?;
    pruned.freeze_gates()?;
    finetune_kd(&mut pruned, Some(net), data, cfg)?;
    let report = TrainReport {
        records: vec![EpochRecord {
            epoch: 0,
            loss: f64::NAN,
            test_acc: evaluate(&pruned, &data.test)?,
            relu_count: pruned.relu_count(cfg.epsilon),
            lambda: 0.0,
        }],
        status: RunStatus::Completed,
    };
    Ok((pruned, report))
}

/// The pruning transformation alone: gate zeroing plus outgoing-weight
/// zeroing, no finetuning.
pub fn prune_structure(net: &GatedNetwork, keep_fraction: f64) -> Result<GatedNetwork> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(SnlError::InvalidArgument(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    if net.layers.iter().any(|l| matches!(l, Layer::Residual(_))) {
        return Err(SnlError::InvalidArgument(
            "prune_baseline supports sequential nets only".into(),
        ));
    }
    let mut pruned = net.clone();

    // Locate (linear layer, gated activation, next linear layer) triples.
    let n_layers = pruned.layers.len();
    for i in 0..n_layers {
        if !matches!(pruned.layers[i], Layer::Gated(_)) {
            continue;
        }
        // Incoming linear layer is the closest Dense/Conv before i.
        let prev = (0..i)
            .rev()
            .find(|&j| matches!(pruned.layers[j], Layer::Dense { .. } | Layer::Conv { .. }));
        let next = ((i + 1)..n_layers)
            .find(|&j| matches!(pruned.layers[j], Layer::Dense { .. } | Layer::Conv { .. }));
        let prev = match prev {
            Some(p) => p,
            None => continue,
        };

        // Channel count and per-channel L1 norms of incoming weights.
        let norms: Vec<f64> = match &pruned.layers[prev] {
            Layer::Dense { w, .. } => {
                let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
                (0..n_out)
                    .map(|j| (0..n_in).map(|k| w.data()[k * n_out + j].abs()).sum())
                    .collect()
            }
            Layer::Conv { k, .. } => {
                let per = k.numel() / k.shape()[0];
                k.data().chunks(per).map(|c| c.iter().map(|v| v.abs()).sum()).collect()
            }
            _ => unreachable!(),
        };
        let n_ch = norms.len();
        let keep = ((n_ch as f64 * keep_fraction).round() as usize).clamp(1, n_ch);
        let mut order: Vec<usize> = (0..n_ch).collect();
        order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
        let dropped: Vec<usize> = order[keep..].to_vec();

        // Zero the gates of dropped channels; switch the layer to zero-out
        // semantics so the feature map truly disappears.
        if let Layer::Gated(g) = &mut pruned.layers[i] {
            if !dropped.is_empty() {
                g.mode = GateMode::ZeroOut;
            }
            let sites = g.values.len();
            let sites_per_ch = sites / n_ch;
            for &ch in &dropped {
                for s in 0..sites_per_ch {
                    g.values[ch * sites_per_ch + s] = 0.0;
                }
            }
        }

        // Zero outgoing weights of dropped channels in the next linear layer.
        if let Some(nj) = next {
            match &mut pruned.layers[nj] {
                Layer::Dense { w, .. } => {
                    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
                    let rows_per_ch = n_in / n_ch;
                    for &ch in &dropped {
                        for r in 0..rows_per_ch {
                            let row = ch * rows_per_ch + r;
                            for c in 0..n_out {
                                w.data_mut()[row * n_out + c] = 0.0;
                            }
                        }
                    }
                }
                Layer::Conv { k, .. } => {
                    let (cout, cin, kh, kw) =
                        (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
                    debug_assert_eq!(cin, n_ch);
                    for co in 0..cout {
                        for &ch in &dropped {
                            for t in 0..kh * kw {
                                k.data_mut()[(co * cin + ch) * kh * kw + t] = 0.0;
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }

    Ok(pruned)
}
