//! Experiment harness: budget-sweep grids over seeds and method variants,
//! per-layer retention reports, ablations, and the small rank statistics the
//! reports use.

use crate::data::{load_dataset, DataSplit, DatasetSpec};
use crate::error::{Result, SnlError};
use crate::latency::{estimate_online_latency, LatencyModel};
use crate::network::{build_network, ArchSpec, GatedNetwork};
use crate::tape::GateMode;
use crate::train::{
    evaluate, prune_baseline, snl_run, EpochRecord, LrSchedule, RunStatus, SnlConfig, TrainReport,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Method variants compared by the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Gated linearization from a pretrained net (identity fallback).
    Snl,
    /// Same, but disabled sites output zero instead of passing through.
    SnlZeroOut,
    /// Linearization started from random initialization.
    SnlScratch,
    /// L1-magnitude structured pruning to the same ReLU count.
    PruneBaseline,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Snl => "snl",
            Variant::SnlZeroOut => "snl_zero_out",
            Variant::SnlScratch => "snl_scratch",
            Variant::PruneBaseline => "prune_baseline",
        }
    }
}

/// A full sweep description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    pub dataset: DatasetSpec,
    pub snl: SnlConfig,
    /// ReLU-operation budgets, one sweep column each.
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub pretrain_epochs: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.snl.validate()?;
        if self.seeds.is_empty() {
            return Err(SnlError::InvalidArgument("at least one seed required".into()));
        }
        if self.budgets.is_empty() {
            return Err(SnlError::InvalidArgument("at least one budget required".into()));
        }
        if self.variants.is_empty() {
            return Err(SnlError::InvalidArgument("at least one variant required".into()));
        }
        Ok(())
    }
}

/// One sweep cell outcome. `error` carries a per-cell failure without
/// aborting the rest of the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub variant: Variant,
    pub budget: usize,
    pub seed: u64,
    pub relu_count: usize,
    pub test_acc: f64,
    /// Estimated online latency in seconds under the default cost model.
    pub latency: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Per-layer retention of the final net (empty on failure).
    pub retention: Vec<RetentionRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<ParetoPoint>,
}

impl SweepReport {
    /// Deterministic CSV: rows ordered by (variant, budget, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "# pareto-sweep-v1\nvariant,budget,seed,relu_count,test_acc,latency,status,error\n",
        );
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:?},{}\n",
                p.variant.name(),
                p.budget,
                p.seed,
                p.relu_count,
                p.test_acc,
                p.latency,
                p.status,
                p.error.as_deref().unwrap_or("")
            ));
        }
        out
    }

    /// Combined retention table across cells, one block per row source.
    pub fn retention_csv(&self) -> String {
        let mut out = String::from(
            "# sweep-retention-v1\nvariant,budget,seed,layer,total_relu_ops,kept_relu_ops,fraction\n",
        );
        for p in &self.points {
            for r in &p.retention {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    p.variant.name(),
                    p.budget,
                    p.seed,
                    r.layer,
                    r.total_relu_ops,
                    r.kept_relu_ops,
                    r.fraction
                ));
            }
        }
        out
    }

    /// Median test accuracy over seeds for one (variant, budget) cell.
    pub fn median_acc(&self, variant: Variant, budget: usize) -> Option<f64> {
        let accs: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.variant == variant && p.budget == budget && p.error.is_none())
            .map(|p| p.test_acc)
            .collect();
        if accs.is_empty() {
            None
        } else {
            Some(median(&accs))
        }
    }
}

/// Derived per-cell seed: deterministic, distinct across cells, independent
/// of grid ordering.
pub fn cell_seed(base: u64, variant: Variant, budget: usize, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mix_byte = |h: &mut u64, byte: u8| {
        *h ^= byte as u64;
        *h = h.wrapping_mul(0x100000001b3);
    };
    for byte in base.to_le_bytes() {
        mix_byte(&mut h, byte);
    }
    for &byte in variant.name().as_bytes() {
        mix_byte(&mut h, byte);
    }
    for byte in (budget as u64).to_le_bytes() {
        mix_byte(&mut h, byte);
    }
    for byte in seed.to_le_bytes() {
        mix_byte(&mut h, byte);
    }
    h
}

fn zero_out_clone(net: &GatedNetwork) -> GatedNetwork {
    let mut out = net.clone();
    out.spec.gate_mode = GateMode::ZeroOut;
    for g in out.gates_mut() {
        g.mode = GateMode::ZeroOut;
    }
    out
}

fn run_cell(
    variant: Variant,
    budget: usize,
    seed: u64,
    pretrained: &GatedNetwork,
    data: &DataSplit,
    cfg: &ExperimentConfig,
) -> Result<(GatedNetwork, f64, RunStatus)> {
    let mut snl_cfg = cfg.snl.clone();
    snl_cfg.budget = budget;
    snl_cfg.seed = cell_seed(cfg.snl.seed, variant, budget, seed);
    let (net, report) = match variant {
        Variant::Snl => snl_run(pretrained, data, &snl_cfg)?,
        Variant::SnlZeroOut => snl_run(&zero_out_clone(pretrained), data, &snl_cfg)?,
        Variant::SnlScratch => {
            let fresh = build_network(&pretrained.spec, snl_cfg.seed)?;
            snl_run(&fresh, data, &snl_cfg)?
        }
        Variant::PruneBaseline => {
            let total = pretrained.total_relu_ops().max(1);
            let keep = (budget as f64 / total as f64).clamp(1e-12, 1.0);
            prune_baseline(pretrained, keep, data, &snl_cfg)?
        }
    };
    let acc = evaluate(&net, &data.test)?;
    Ok((net, acc, report.status))
}

/// Run the full (variant x budget x seed) grid. Pretraining happens once
/// per seed and is shared across cells; cells run in parallel and failures
/// are recorded per row.
pub fn run_pareto_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;

    let mut budgets = cfg.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();

    let schedule = LrSchedule::for_epochs(cfg.pretrain_epochs);
    let pretrained: Vec<(u64, GatedNetwork)> = seeds
        .par_iter()
        .map(|&seed| -> Result<(u64, GatedNetwork)> {
            let mut net = build_network(&cfg.arch, seed)?;
            crate::train::pretrain(
                &mut net,
                &data,
                cfg.pretrain_epochs,
                &schedule,
                cfg.snl.batch_size,
                seed,
            )?;
            Ok((seed, net))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for &variant in &cfg.variants {
        for &budget in &budgets {
            for (i, &seed) in seeds.iter().enumerate() {
                cells.push((variant, budget, seed, i));
            }
        }
    }
    let model = LatencyModel::default();
    let points: Vec<ParetoPoint> = cells
        .par_iter()
        .map(|&(variant, budget, seed, i)| {
            match run_cell(variant, budget, seed, &pretrained[i].1, &data, cfg) {
                Ok((net, test_acc, status)) => {
                    let relu_count = net.relu_count(cfg.snl.epsilon);
                    let retention =
                        layer_retention_report(&net).map(|r| r.rows).unwrap_or_default();
                    ParetoPoint {
                        variant,
                        budget,
                        seed,
                        relu_count,
                        test_acc,
                        latency: estimate_online_latency(relu_count, &model),
                        status,
                        error: None,
                        retention,
                    }
                }
                Err(e) => ParetoPoint {
                    variant,
                    budget,
                    seed,
                    relu_count: 0,
                    test_acc: f64::NAN,
                    latency: f64::NAN,
                    status: RunStatus::Diverged,
                    error: Some(e.to_string().replace([',', '\n'], ";")),
                    retention: Vec::new(),
                },
            }
        })
        .collect();
    Ok(SweepReport { points })
}

/// Per-layer retention after binarization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetentionRow {
    pub layer: usize,
    pub total_relu_ops: usize,
    pub kept_relu_ops: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetentionReport {
    pub rows: Vec<RetentionRow>,
}

impl RetentionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# retention-v1\nlayer,total_relu_ops,kept_relu_ops,fraction\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.layer, r.total_relu_ops, r.kept_relu_ops, r.fraction
            ));
        }
        out
    }
}

/// Which fraction of each gated layer survived. Only meaningful on binary
/// gates; errors otherwise.
pub fn layer_retention_report(net: &GatedNetwork) -> Result<RetentionReport> {
    if net.gates().iter().any(|g| !g.is_binary()) {
        return Err(SnlError::GatesNotBinary("layer_retention_report"));
    }
    let rows = net
        .gates()
        .iter()
        .enumerate()
        .map(|(layer, g)| {
            let total = g.values.len() * g.ops_per_gate;
            let kept = g.relu_count(0.5);
            RetentionRow {
                layer,
                total_relu_ops: total,
                kept_relu_ops: kept,
                fraction: kept as f64 / total as f64,
            }
        })
        .collect();
    Ok(RetentionReport { rows })
}

/// Ablation axes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AblationKind {
    /// Fixed-lambda runs (homotopy schedule off) over a lambda grid.
    LambdaGrid(Vec<f64>),
    /// Joint-phase learning-rate grid.
    LrGrid(Vec<f64>),
    /// Method-variant comparison at the base budget.
    Variants,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub relu_count: usize,
    pub test_acc: f64,
    pub status: RunStatus,
    /// Joint-phase epoch trace (accuracy and ReLU count per epoch).
    pub records: Vec<EpochRecord>,
}

impl AblationRow {
    pub fn trace_csv(&self) -> String {
        TrainReport { records: self.records.clone(), status: self.status }.to_csv()
    }

    /// First epoch index with relu_count <= threshold, if reached.
    pub fn epochs_to_count(&self, threshold: usize) -> Option<usize> {
        self.records.iter().find(|r| r.relu_count <= threshold).map(|r| r.epoch)
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("# ablation-v1\nsetting,relu_count,test_acc,status\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:?}\n", r.setting, r.relu_count, r.test_acc, r.status));
    }
    out
}

/// One run per grid point, reporting the terminal ReLU count and accuracy.
pub fn run_ablation(
    pretrained: &GatedNetwork,
    data: &DataSplit,
    base: &SnlConfig,
    kind: &AblationKind,
) -> Result<Vec<AblationRow>> {
    let run_one = |setting: String, cfg: &SnlConfig,
                   start: &GatedNetwork|
     -> Result<AblationRow> {
        let (net, report) = snl_run(start, data, cfg)?;
        Ok(AblationRow {
            setting,
            relu_count: net.relu_count(cfg.epsilon),
            test_acc: evaluate(&net, &data.test)?,
            status: report.status,
            records: report.records,
        })
    };
    match kind {
        AblationKind::LambdaGrid(lambdas) => lambdas
            .iter()
            .map(|&l| {
                let mut cfg = base.clone();
                cfg.lambda0 = l;
                cfg.lambda_schedule = false;
                run_one(format!("lambda={l}"), &cfg, pretrained)
            })
            .collect(),
        AblationKind::LrGrid(lrs) => lrs
            .iter()
            .map(|&lr| {
                let mut cfg = base.clone();
                cfg.adam_lr = lr;
                run_one(format!("adam_lr={lr}"), &cfg, pretrained)
            })
            .collect(),
        AblationKind::Variants => {
            let mut rows = Vec::new();
            rows.push(run_one("snl".into(), base, pretrained)?);
            rows.push(run_one("snl_zero_out".into(), base, &zero_out_clone(pretrained))?);
            let fresh = build_network(&pretrained.spec, base.seed.wrapping_add(0x5c7a))?;
            rows.push(run_one("snl_scratch".into(), base, &fresh)?);
            let total = pretrained.total_relu_ops().max(1);
            let keep = (base.budget as f64 / total as f64).clamp(1e-12, 1.0);
            let (net, report) = prune_baseline(pretrained, keep, data, base)?;
            rows.push(AblationRow {
                setting: "prune_baseline".into(),
                relu_count: net.relu_count(base.epsilon),
                test_acc: evaluate(&net, &data.test)?,
                status: report.status,
                records: report.records,
            });
            Ok(rows)
        }
    }
}

/// Median of a nonempty slice.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Average ranks, ties sharing their midrank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of midranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..rx.len() {
        let (dx, dy) = (rx[i] - mx, ry[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
