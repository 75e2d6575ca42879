//! End-to-end acceptance suite. Each test prints a single PASS line on
//! success; a failing test reports through the harness as usual.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snl::capacity::{
    allocation_grid_search, bound_full, bound_pruned, bound_snl, optimal_alphas,
    rounded_closed_form_objective, verify_capacity_bounds,
};
use snl::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use snl::data::{bar_images, concentric_rings, DataSplit, DatasetSpec};
use snl::harness::{
    layer_retention_report, median, run_ablation, run_pareto_sweep, spearman, AblationKind,
    ExperimentConfig, Variant,
};
use snl::latency::{estimate_online_latency, fit_per_relu_cost, LatencyModel};
use snl::network::{build_network, ArchSpec, GatedNetwork, Granularity, Layer, LayerSpec};
use snl::tape::{grad_check, GateLayout, GateMode};
use snl::tensor::Tensor;
use snl::train::{evaluate, finetune_kd, pretrain, snl_run, LrSchedule, RunStatus, SnlConfig};

fn randt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Gradient exactness

#[test]
fn criterion_1_gradient_exactness() {
    let start = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for probe in 0..100u64 {
        // Kink collisions are resolved by re-sampling the probe point.
        let mut attempt = 0u64;
        let err = loop {
            let mut rng = ChaCha8Rng::seed_from_u64(probe * 1000 + attempt);
            let result = match probe % 6 {
                0 => {
                    let params = vec![
                        randt(&mut rng, vec![2, 3]),
                        randt(&mut rng, vec![3, 4]),
                        randt(&mut rng, vec![4]),
                    ];
                    grad_check(&params, |tape, ids| {
                        let y = tape.affine(ids[0], ids[1], ids[2])?;
                        Ok(tape.sum(y))
                    })
                }
                1 => {
                    let params = vec![
                        randt(&mut rng, vec![1, 2, 5, 5]),
                        randt(&mut rng, vec![3, 2, 3, 3]),
                        randt(&mut rng, vec![3]),
                    ];
                    grad_check(&params, |tape, ids| {
                        let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                        Ok(tape.sum(y))
                    })
                }
                2 | 3 => {
                    let mode = if probe % 6 == 2 { GateMode::Identity } else { GateMode::ZeroOut };
                    let params = vec![randt(&mut rng, vec![2, 6]), randt(&mut rng, vec![6])];
                    grad_check(&params, move |tape, ids| {
                        let y = tape.gated_activation(
                            ids[0],
                            ids[1],
                            GateLayout { len: 6, group: 1 },
                            mode,
                        )?;
                        Ok(tape.sum(y))
                    })
                }
                4 => {
                    let params = vec![randt(&mut rng, vec![4, 5])];
                    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
                    grad_check(&params, move |tape, ids| {
                        tape.softmax_cross_entropy(ids[0], &labels)
                    })
                }
                _ => {
                    let params = vec![randt(&mut rng, vec![4, 5])];
                    let teacher = randt(&mut rng, vec![4, 5]);
                    grad_check(&params, move |tape, ids| {
                        let t = tape.leaf(teacher.clone());
                        tape.kl_soft_targets(ids[0], t, 4.0)
                    })
                }
            };
            match result {
                Ok(e) => break e,
                Err(snl::SnlError::KinkDetected) => {
                    attempt += 1;
                    assert!(attempt < 20, "probe {probe}: persistent kink collisions");
                }
                Err(e) => panic!("probe {probe}: {e}"),
            }
        };
        assert!(err < 1e-5, "probe {probe}: rel err {err}");
        worst = worst.max(err);
        checked += 1;
    }
    assert!(start.elapsed().as_secs() < 60);
    println!("[PASS] criterion 1: gradient exactness ({checked} probes, max rel err {worst:.2e})");
}

// ---------------------------------------------------------------------------
// 2. Gate semantics

fn plain_relu_reference(net: &GatedNetwork) -> GatedNetwork {
    let mut reference = net.clone();
    for layer in &mut reference.layers {
        if matches!(layer, Layer::Gated(_)) {
            *layer = Layer::PlainRelu;
        }
    }
    reference
}

#[test]
fn criterion_2_gate_semantics() {
    let net = build_network(&ArchSpec::mlp(&[3, 10, 10, 2], GateMode::Identity), 21).unwrap();
    let reference = plain_relu_reference(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let x = randt(&mut rng, vec![1, 3]);
        let a = net.forward(&x).unwrap();
        let b = reference.forward(&x).unwrap();
        assert_eq!(a.data(), b.data(), "all-ones gated net must equal plain ReLU bit-exactly");
    }

    let mut linear = net.clone();
    for g in linear.gates_mut() {
        g.values.iter_mut().for_each(|v| *v = 0.0);
    }
    for _ in 0..100 {
        let x = randt(&mut rng, vec![1, 3]);
        let y = randt(&mut rng, vec![1, 3]);
        let xy = Tensor::new(
            vec![1, 3],
            x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let zero = Tensor::zeros(vec![1, 3]);
        let (fx, fy) = (linear.forward(&x).unwrap(), linear.forward(&y).unwrap());
        let (fxy, f0) = (linear.forward(&xy).unwrap(), linear.forward(&zero).unwrap());
        for j in 0..2 {
            let r = fxy.data()[j] - fx.data()[j] - fy.data()[j] + f0.data()[j];
            assert!(r.abs() < 1e-9, "affine collapse residual {r}");
        }
    }
    println!("[PASS] criterion 2: gate semantics (plain-ReLU equality and affine collapse)");
}

// ---------------------------------------------------------------------------
// 3. Algorithm contract

fn fast_cfg(budget: usize, seed: u64) -> SnlConfig {
    SnlConfig {
        budget,
        seed,
        adam_lr: 0.01,
        max_joint_epochs: 400,
        finetune_epochs: 5,
        ..SnlConfig::default()
    }
}

fn check_run_contract(net: &GatedNetwork, data: &DataSplit, cfg: &SnlConfig) {
    let start = std::time::Instant::now();
    let (out, report) = snl_run(net, data, cfg).unwrap();
    assert_eq!(report.status, RunStatus::BudgetReached, "run must reach its budget");
    assert!(out.gates().iter().all(|g| g.is_binary() && g.frozen));
    assert!(out.relu_count(cfg.epsilon) <= cfg.budget);
    for pair in report.records.windows(2) {
        assert!(pair[1].lambda >= pair[0].lambda, "lambda trace must be non-decreasing");
    }
    assert!(start.elapsed().as_secs() < 120, "run exceeded 2 minutes");
}

#[test]
fn criterion_3_algorithm_contract() {
    // MLP on the rings task.
    let data = concentric_rings(300, 0.1, 11);
    let spec = ArchSpec::mlp(&[2, 16, 16, 2], GateMode::Identity);
    let mut mlp = build_network(&spec, 11).unwrap();
    pretrain(&mut mlp, &data, 20, &LrSchedule::for_epochs(20), 64, 11).unwrap();
    check_run_contract(&mlp, &data, &fast_cfg(mlp.total_relu_ops() / 2, 11));

    // Small CNN on the bar-image task, per-channel gates.
    let bars = bar_images(240, 8, 0.1, 13);
    let cnn_spec = ArchSpec {
        input_shape: vec![1, 8, 8],
        layers: vec![
            LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Activation,
            LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Activation,
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 2 },
        ],
        granularity: Granularity::PerChannel,
        gate_mode: GateMode::Identity,
        first_activation_plain: true,
        epsilon: 0.01,
    };
    let mut cnn = build_network(&cnn_spec, 13).unwrap();
    pretrain(&mut cnn, &bars, 10, &LrSchedule::for_epochs(10), 64, 13).unwrap();
    check_run_contract(&cnn, &bars, &fast_cfg(cnn.total_relu_ops() / 2, 13));

    // Gate pattern is untouched by finetuning.
    let mut frozen = build_network(&spec, 17).unwrap();
    pretrain(&mut frozen, &data, 5, &LrSchedule::for_epochs(5), 64, 17).unwrap();
    frozen.binarize_gates(0.01).unwrap();
    frozen.freeze_gates().unwrap();
    let teacher = frozen.clone();
    let hash = frozen.gate_hash();
    finetune_kd(&mut frozen, Some(&teacher), &data, &fast_cfg(0, 17)).unwrap();
    assert_eq!(frozen.gate_hash(), hash, "finetune must not alter the gate pattern");

    println!("[PASS] criterion 3: budgeted runs end binary/frozen under budget with monotone lambda");
}

// ---------------------------------------------------------------------------
// 4. Capacity formulas

#[test]
fn criterion_4_capacity_formulas() {
    assert_eq!(bound_full(4, 3, 2), 29);
    assert_eq!(bound_snl(4, 3, 2, 1.0, 1.0), 29.0);
    assert_eq!(bound_pruned(4, 3, 2, 1.0, 1.0), 29.0);

    let (a1, a2) = optimal_alphas(50000, 5000, 10000).unwrap();
    assert_eq!(a1, 0.14999);
    assert_eq!(a2, 0.5001);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let d1 = rng.gen_range(1..200usize);
        let d2 = rng.gen_range(1..200usize);
        let p = rng.gen_range(2..5usize);
        let a1 = rng.gen_range(0.0..1.0);
        let a2 = rng.gen_range(0.0..1.0);
        let gap = bound_snl(d1, d2, p, a1, a2) - bound_pruned(d1, d2, p, a1, a2);
        let expected = a1 * (1.0 - a2) * (d1 * d2 * (p - 1)) as f64;
        assert!(
            (gap - expected).abs() < 1e-9,
            "gap identity failed at d1={d1} d2={d2} p={p}: {gap} vs {expected}"
        );
    }
    println!("[PASS] criterion 4: capacity closed forms, worked example, gap identity (1000 draws)");
}

// ---------------------------------------------------------------------------
// 5. Piece-counting oracle

#[test]
fn criterion_5_piece_counting_oracle() {
    let start = std::time::Instant::now();
    // Midpoint-secant exactness is enforced inside the counting oracle for
    // every reported piece; any failure surfaces as an error here.
    let report = verify_capacity_bounds(500, 8, false, 42).unwrap();
    assert!(report.rows.len() >= 490);
    assert_eq!(report.violations, 0, "piece bound violated");
    assert!(report.max_ratio <= 1.0);
    assert!(start.elapsed().as_secs() < 120);
    println!(
        "[PASS] criterion 5: {} random nets within the piece bound (max ratio {:.3})",
        report.rows.len(),
        report.max_ratio
    );
}

// ---------------------------------------------------------------------------
// 6. Optimal-allocation agreement

#[test]
fn criterion_6_allocation_agreement() {
    for budget in [15usize, 20, 30] {
        let (k1, k2, grid_obj) = allocation_grid_search(40, 10, budget);
        let rounded = rounded_closed_form_objective(40, 10, budget);
        // One lattice step: the largest objective change from moving a
        // single ReLU between layers at the grid optimum.
        let mut step: f64 = 0.0;
        for (n1, n2) in [(k1 + 1, k2.saturating_sub(1)), (k1.saturating_sub(1), k2 + 1)] {
            if n1 <= 40 && n2 <= 10 && n1 + n2 == budget {
                let obj = bound_snl(40, 10, 2, n1 as f64 / 40.0, n2 as f64 / 10.0);
                step = step.max((grid_obj - obj).abs());
            }
        }
        assert!(
            (grid_obj - rounded).abs() <= step + 1e-9,
            "B={budget}: grid {grid_obj} vs rounded closed form {rounded} (step {step})"
        );
    }
    println!("[PASS] criterion 6: grid search matches rounded closed form within one lattice step");
}

// ---------------------------------------------------------------------------
// 7. Latency model

#[test]
fn criterion_7_latency_model() {
    let model = LatencyModel { t_per_1k: 0.021, linear_time: 0.0 };
    assert_eq!(estimate_online_latency(1000, &model), 0.021);

    // Published DeepReDuce (ReLU count, online seconds) measurements.
    let deepreduce = [
        (12300.0, 0.45),
        (28700.0, 0.56),
        (49200.0, 1.19),
        (197000.0, 3.94),
        (229400.0, 4.61),
    ];
    let (slope, _) = fit_per_relu_cost(&deepreduce).unwrap();
    let per_1k = slope * 1000.0;
    assert!(
        (per_1k - 0.019).abs() <= 0.002,
        "DeepReDuce fit slope {per_1k} s/1K outside 0.019 +/- 0.002"
    );

    // Published linearized-network rows, grouped by base architecture; the
    // linear-layer time is back-solved from one anchor row per group.
    let groups: [&[(f64, f64)]; 2] = [
        &[(12900.0, 0.291), (15000.0, 0.334), (24900.0, 0.542), (49900.0, 1.066)],
        &[(120000.0, 2.802), (150000.0, 3.398), (180000.0, 4.054)],
    ];
    for rows in groups {
        let (anchor_count, anchor_lat) = *rows.last().unwrap();
        let linear_time = anchor_lat - anchor_count / 1000.0 * 0.021;
        let m = LatencyModel { t_per_1k: 0.021, linear_time };
        for &(count, published) in rows {
            let est = estimate_online_latency(count as usize, &m);
            let rel = (est - published).abs() / published;
            assert!(rel < 0.05, "row ({count}, {published}): estimate {est} off by {rel:.3}");
        }
    }
    println!("[PASS] criterion 7: latency anchor exact, fitted slope in band, table rows within 5%");
}

// ---------------------------------------------------------------------------
// 8. Trend reproduction

const TREND_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[test]
fn criterion_8a_8b_budget_monotonicity_and_prune_baseline() {
    let start = std::time::Instant::now();
    let arch = ArchSpec {
        input_shape: vec![1, 8, 8],
        layers: vec![
            LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Activation,
            LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Activation,
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 2 },
        ],
        granularity: Granularity::PerChannel,
        gate_mode: GateMode::Identity,
        first_activation_plain: false,
        epsilon: 0.01,
    };
    let total = build_network(&arch, 0).unwrap().total_relu_ops();
    let cfg = ExperimentConfig {
        arch,
        dataset: DatasetSpec::BarImages { n: 240, side: 8, noise: 0.45, seed: 3 },
        snl: SnlConfig {
            adam_lr: 0.01,
            max_joint_epochs: 300,
            finetune_epochs: 10,
            ..SnlConfig::default()
        },
        budgets: vec![total / 4, total / 2, total],
        seeds: TREND_SEEDS.to_vec(),
        variants: vec![Variant::Snl, Variant::PruneBaseline],
        pretrain_epochs: 20,
    };
    let report = run_pareto_sweep(&cfg).unwrap();
    for p in &report.points {
        assert!(p.error.is_none(), "cell failed: {:?}", p.error);
    }

    // 8a: seed-median accuracy non-decreasing in budget.
    let medians: Vec<f64> = cfg
        .budgets
        .iter()
        .map(|&b| report.median_acc(Variant::Snl, b).unwrap())
        .collect();
    assert!(
        medians[0] <= medians[1] + 1e-12 && medians[1] <= medians[2] + 1e-12,
        "median accuracy not monotone across budgets: {medians:?}"
    );

    // 8b: linearization beats structured pruning at iso-budget (medians).
    for &b in &cfg.budgets {
        let snl_acc = report.median_acc(Variant::Snl, b).unwrap();
        let prune_acc = report.median_acc(Variant::PruneBaseline, b).unwrap();
        assert!(
            snl_acc >= prune_acc,
            "budget {b}: snl median {snl_acc} below prune baseline {prune_acc}"
        );
    }
    println!(
        "[PASS] criterion 8a/8b: budget monotonicity {medians:?} and iso-budget win over pruning \
         ({}s)",
        start.elapsed().as_secs()
    );
}

#[test]
fn criterion_8c_retention_depth_correlation() {
    let start = std::time::Instant::now();
    // Contractive stack: widths fall with depth.
    let spec = ArchSpec::mlp(&[2, 40, 28, 18, 10, 6, 2], GateMode::Identity);
    let data = concentric_rings(300, 0.1, 7);
    let total = build_network(&spec, 0).unwrap().total_relu_ops();
    let mut per_layer: Vec<Vec<f64>> = Vec::new();
    for &seed in &TREND_SEEDS {
        let mut net = build_network(&spec, seed).unwrap();
        pretrain(&mut net, &data, 20, &LrSchedule::for_epochs(20), 64, seed).unwrap();
        let (out, _) = snl_run(&net, &data, &fast_cfg(total / 4, seed)).unwrap();
        let rows = layer_retention_report(&out).unwrap().rows;
        if per_layer.is_empty() {
            per_layer = vec![Vec::new(); rows.len()];
        }
        for (i, r) in rows.iter().enumerate() {
            per_layer[i].push(r.fraction);
        }
    }
    let med: Vec<f64> = per_layer.iter().map(|fr| median(fr)).collect();
    let depth: Vec<f64> = (0..med.len()).map(|i| i as f64).collect();
    let rho = spearman(&depth, &med);
    assert!(rho > 0.0, "retention not increasing with depth: medians {med:?}, rho {rho}");
    println!(
        "[PASS] criterion 8c: retention/depth Spearman {rho:.3} over medians {med:?} ({}s)",
        start.elapsed().as_secs()
    );
}

#[test]
fn criterion_8d_identity_beats_zero_out() {
    let start = std::time::Instant::now();
    let spec = ArchSpec::mlp(&[2, 16, 16, 2], GateMode::Identity);
    let data = concentric_rings(300, 0.1, 19);
    let total = build_network(&spec, 0).unwrap().total_relu_ops();
    let sparse = total / 10; // sparse regime
    let mut id_accs = Vec::new();
    let mut zo_accs = Vec::new();
    for &seed in &TREND_SEEDS {
        let mut net = build_network(&spec, seed).unwrap();
        pretrain(&mut net, &data, 20, &LrSchedule::for_epochs(20), 64, seed).unwrap();
        let (id_net, _) = snl_run(&net, &data, &fast_cfg(sparse, seed)).unwrap();
        id_accs.push(evaluate(&id_net, &data.test).unwrap());

        let mut zo = net.clone();
        zo.spec.gate_mode = GateMode::ZeroOut;
        for g in zo.gates_mut() {
            g.mode = GateMode::ZeroOut;
        }
        let (zo_net, _) = snl_run(&zo, &data, &fast_cfg(sparse, seed)).unwrap();
        zo_accs.push(evaluate(&zo_net, &data.test).unwrap());
    }
    let (id_med, zo_med) = (median(&id_accs), median(&zo_accs));
    assert!(
        id_med >= zo_med,
        "identity median {id_med} below zero-out median {zo_med} at budget {sparse}"
    );
    println!(
        "[PASS] criterion 8d: identity {id_med:.3} >= zero-out {zo_med:.3} at sparse budget ({}s)",
        start.elapsed().as_secs()
    );
}

#[test]
fn criterion_8e_larger_lambda_reaches_threshold_sooner() {
    let start = std::time::Instant::now();
    let spec = ArchSpec::mlp(&[2, 16, 16, 2], GateMode::Identity);
    let data = concentric_rings(300, 0.1, 23);
    let total = build_network(&spec, 0).unwrap().total_relu_ops();
    let threshold = total / 2;
    let max_epochs = 150usize;
    let mut small_epochs = Vec::new();
    let mut large_epochs = Vec::new();
    for &seed in &TREND_SEEDS {
        let mut net = build_network(&spec, seed).unwrap();
        pretrain(&mut net, &data, 10, &LrSchedule::for_epochs(10), 64, seed).unwrap();
        let base = SnlConfig {
            budget: 0,
            seed,
            adam_lr: 0.01,
            max_joint_epochs: max_epochs,
            finetune_epochs: 0,
            ..SnlConfig::default()
        };
        let rows = run_ablation(
            &net,
            &data,
            &base,
            &AblationKind::LambdaGrid(vec![1e-3, 1e-1]),
        )
        .unwrap();
        // Unreached threshold counts as one past the epoch cap.
        small_epochs
            .push(rows[0].epochs_to_count(threshold).unwrap_or(max_epochs + 1) as f64);
        large_epochs
            .push(rows[1].epochs_to_count(threshold).unwrap_or(max_epochs + 1) as f64);
    }
    let (small_med, large_med) = (median(&small_epochs), median(&large_epochs));
    assert!(
        large_med <= max_epochs as f64,
        "large lambda failed to reach the threshold within {max_epochs} epochs"
    );
    assert!(
        large_med <= small_med,
        "larger lambda slower to threshold: {large_med} vs {small_med} epochs"
    );
    println!(
        "[PASS] criterion 8e: epochs-to-threshold median {large_med} (large lambda) <= {small_med} \
         (small lambda) ({}s)",
        start.elapsed().as_secs()
    );
}

// ---------------------------------------------------------------------------
// 9. Reproducibility

#[test]
fn criterion_9_reproducibility() {
    let cfg = ExperimentConfig {
        arch: ArchSpec::mlp(&[2, 8, 2], GateMode::Identity),
        dataset: DatasetSpec::ConcentricRings { n: 120, noise: 0.1, seed: 5 },
        snl: SnlConfig {
            adam_lr: 0.01,
            max_joint_epochs: 50,
            finetune_epochs: 2,
            batch_size: 32,
            ..SnlConfig::default()
        },
        budgets: vec![4, 8],
        seeds: vec![1, 2],
        variants: vec![Variant::Snl, Variant::PruneBaseline],
        pretrain_epochs: 5,
    };
    let a = run_pareto_sweep(&cfg).unwrap();
    let b = run_pareto_sweep(&cfg).unwrap();
    assert_eq!(a.to_csv(), b.to_csv(), "sweep CSV must be byte-identical across re-runs");
    assert_eq!(a.retention_csv(), b.retention_csv());

    // Checkpoint round-trip preserves forward outputs bit-exactly.
    let data = concentric_rings(200, 0.1, 31);
    let mut net = build_network(&ArchSpec::mlp(&[2, 12, 12, 2], GateMode::Identity), 31).unwrap();
    pretrain(&mut net, &data, 10, &LrSchedule::for_epochs(10), 64, 31).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&net, TrainState { epoch: 10, lambda: 0.0 }, &path).unwrap();
    let (loaded, _) = load_checkpoint(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let x = randt(&mut rng, vec![4, 2]);
        assert_eq!(net.forward(&x).unwrap().data(), loaded.forward(&x).unwrap().data());
    }
    println!("[PASS] criterion 9: byte-identical sweep CSVs and bit-exact checkpoint round-trip");
}
