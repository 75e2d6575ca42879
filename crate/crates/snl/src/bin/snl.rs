//! Command-line driver: pretraining, linearization runs, pruning, sweep
//! grids, ablations, capacity checks, latency estimates, and reports.
//!
//! Exit codes: 0 success, 1 configuration error, 2 run failure, 3 invariant
//! violation detected.

use clap::{Args, Parser, Subcommand};
use snl::capacity::{
    allocation_grid_search, optimal_alphas, rounded_closed_form_objective, verify_capacity_bounds,
};
use snl::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use snl::data::DatasetSpec;
use snl::error::SnlError;
use snl::harness::{
    ablation_csv, layer_retention_report, run_ablation, run_pareto_sweep, AblationKind,
    ExperimentConfig, Variant,
};
use snl::latency::{estimate_online_latency, fit_per_relu_cost, LatencyModel, DEFAULT_T_PER_1K};
use snl::network::{build_network, ArchSpec, Granularity, LayerSpec};
use snl::tape::GateMode;
use snl::train::{
    evaluate, pretrain, prune_baseline, snl_run, KdConfig, LrSchedule, SnlConfig,
};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "snl", about = "Selective ReLU linearization under a budget")]
struct Cli {
    /// Key-value config file (one `key = value` per line); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dense pretraining; writes a checkpoint usable as teacher/start point.
    Pretrain(PretrainArgs),
    /// The budgeted linearization run from a pretrained checkpoint.
    Snl(SnlArgs),
    /// Structured-pruning baseline from a pretrained checkpoint.
    Prune(PruneArgs),
    /// (variant x budget x seed) grid; writes pareto and retention CSVs.
    Sweep(SweepArgs),
    /// Lambda-grid, lr-grid, or variant-compare ablations.
    Ablate(AblateArgs),
    /// Capacity-bound tools.
    #[command(subcommand)]
    Capacity(CapacityCmd),
    /// Latency-model tools.
    #[command(subcommand)]
    Latency(LatencyCmd),
    /// Report generators.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Args)]
struct NetDataArgs {
    /// Architecture: `mlp:w0,w1,...,wk` or `cnn:side,ch1,ch2,classes`.
    #[arg(long)]
    arch: Option<String>,
    /// Gate granularity: per-unit | per-channel.
    #[arg(long)]
    granularity: Option<String>,
    /// Gate fallback: identity | zero-out.
    #[arg(long)]
    gate_mode: Option<String>,
    /// Keep the first activation as a plain (ungated) ReLU.
    #[arg(long)]
    first_plain: Option<bool>,
    /// Dataset: two-gaussians | rings | xor | bars:side | file:path.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct SnlFlags {
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    adam_lr: Option<f64>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    finetune_momentum: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    max_joint_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    kd_enabled: Option<bool>,
    #[arg(long)]
    kd_temperature: Option<f64>,
    #[arg(long)]
    kd_hard_weight: Option<f64>,
    #[arg(long)]
    kd_soft_weight: Option<f64>,
    #[arg(long)]
    clip_gates: Option<bool>,
    #[arg(long)]
    weight_decay_c: Option<f64>,
    #[arg(long)]
    lambda_schedule: Option<bool>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    net: NetDataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional epoch-trace CSV path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SnlArgs {
    /// Pretrained checkpoint (also the KD teacher).
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    net: NetDataArgs,
    #[command(flatten)]
    snl: SnlFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    net: NetDataArgs,
    #[command(flatten)]
    snl: SnlFlags,
    /// Channel keep fraction; derived from --budget when omitted.
    #[arg(long)]
    keep_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    net: NetDataArgs,
    #[command(flatten)]
    snl: SnlFlags,
    /// Comma-separated ReLU-operation budgets.
    #[arg(long)]
    budgets: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated variants: snl | snl-zero-out | snl-scratch | prune-baseline.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Output directory for pareto.csv and retention.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    net: NetDataArgs,
    #[command(flatten)]
    snl: SnlFlags,
    /// lambda-grid | lr-grid | variant-compare.
    #[arg(long)]
    kind: String,
    /// Comma-separated grid values (for lambda-grid / lr-grid).
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum CapacityCmd {
    /// Random-net piece counts against the closed-form bound.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        d_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Force full retention (alpha1 = alpha2 = 1).
        #[arg(long, default_value_t = false)]
        full_retention: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form optimal retention split plus integer grid search.
    Optimal {
        #[arg(long)]
        d1: usize,
        #[arg(long)]
        d2: usize,
        #[arg(long)]
        budget: usize,
    },
}

#[derive(Subcommand)]
enum LatencyCmd {
    /// Online latency for a ReLU count.
    Estimate {
        #[arg(long)]
        relu_count: usize,
        #[arg(long, default_value_t = 0.0)]
        linear_time: f64,
        #[arg(long, default_value_t = DEFAULT_T_PER_1K)]
        t_per_1k: f64,
    },
    /// OLS per-ReLU cost from `count:seconds` pairs.
    Fit {
        /// Comma-separated pairs, e.g. `12300:0.45,28700:0.56`.
        #[arg(long)]
        points: String,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Per-layer retention of a binarized checkpoint.
    Retention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

// ---------------------------------------------------------------------------
// Config-file merging

struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, SnlError> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    SnlError::InvalidArgument(format!(
                        "config line {} is not `key = value`: {line}",
                        lineno + 1
                    ))
                })?;
                map.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    /// Flag value if given, else the file's, else None.
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, SnlError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.0.get(key) {
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                SnlError::InvalidArgument(format!("config key {key}: cannot parse `{raw}`"))
            }),
            None => Ok(None),
        }
    }
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>, SnlError> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| SnlError::InvalidArgument(format!("bad {what} entry: {s}")))
        })
        .collect()
}

fn parse_variant(raw: &str) -> Result<Variant, SnlError> {
    match raw.trim() {
        "snl" => Ok(Variant::Snl),
        "snl-zero-out" | "snl_zero_out" => Ok(Variant::SnlZeroOut),
        "snl-scratch" | "snl_scratch" => Ok(Variant::SnlScratch),
        "prune-baseline" | "prune_baseline" => Ok(Variant::PruneBaseline),
        other => Err(SnlError::InvalidArgument(format!("unknown variant: {other}"))),
    }
}

fn build_arch(args: &NetDataArgs, file: &FileConfig) -> Result<ArchSpec, SnlError> {
    let raw = file
        .get(args.arch.clone(), "arch")?
        .ok_or_else(|| SnlError::InvalidArgument("--arch is required".into()))?;
    let granularity = match file
        .get(args.granularity.clone(), "granularity")?
        .unwrap_or_else(|| "per-unit".into())
        .as_str()
    {
        "per-unit" | "per_unit" => Granularity::PerUnit,
        "per-channel" | "per_channel" => Granularity::PerChannel,
        other => {
            return Err(SnlError::InvalidArgument(format!("unknown granularity: {other}")))
        }
    };
    let gate_mode = match file
        .get(args.gate_mode.clone(), "gate_mode")?
        .unwrap_or_else(|| "identity".into())
        .as_str()
    {
        "identity" => GateMode::Identity,
        "zero-out" | "zero_out" => GateMode::ZeroOut,
        other => return Err(SnlError::InvalidArgument(format!("unknown gate mode: {other}"))),
    };
    let first_plain = file.get(args.first_plain, "first_plain")?.unwrap_or(false);

    let (kind, body) = raw
        .split_once(':')
        .ok_or_else(|| SnlError::InvalidArgument(format!("bad arch: {raw}")))?;
    let mut spec = match kind {
        "mlp" => {
            let widths: Vec<usize> = parse_list(body, "arch width")?;
            if widths.len() < 2 {
                return Err(SnlError::InvalidArgument("mlp needs at least 2 widths".into()));
            }
            ArchSpec::mlp(&widths, gate_mode)
        }
        "cnn" => {
            let dims: Vec<usize> = parse_list(body, "arch dim")?;
            if dims.len() != 4 {
                return Err(SnlError::InvalidArgument(
                    "cnn arch needs side,ch1,ch2,classes".into(),
                ));
            }
            let (side, ch1, ch2, classes) = (dims[0], dims[1], dims[2], dims[3]);
            ArchSpec {
                input_shape: vec![1, side, side],
                layers: vec![
                    LayerSpec::Conv { out_channels: ch1, kernel: 3, stride: 1, padding: 1 },
                    LayerSpec::Activation,
                    LayerSpec::Conv { out_channels: ch2, kernel: 3, stride: 1, padding: 1 },
                    LayerSpec::Activation,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { out: classes },
                ],
                granularity,
                gate_mode,
                first_activation_plain: first_plain,
                epsilon: 0.01,
            }
        }
        other => return Err(SnlError::InvalidArgument(format!("unknown arch kind: {other}"))),
    };
    spec.granularity = granularity;
    spec.gate_mode = gate_mode;
    spec.first_activation_plain = first_plain;
    Ok(spec)
}

fn build_dataset_spec(args: &NetDataArgs, file: &FileConfig) -> Result<DatasetSpec, SnlError> {
    let raw = file
        .get(args.dataset.clone(), "dataset")?
        .ok_or_else(|| SnlError::InvalidArgument("--dataset is required".into()))?;
    let n = file.get(args.n, "n")?.unwrap_or(400);
    let noise = file.get(args.noise, "noise")?.unwrap_or(0.2);
    let seed = file.get(args.data_seed, "data_seed")?.unwrap_or(0);
    match raw.split_once(':') {
        Some(("file", path)) => Ok(DatasetSpec::File { path: PathBuf::from(path), seed }),
        Some(("bars", side)) => {
            let side: usize = side
                .parse()
                .map_err(|_| SnlError::InvalidArgument(format!("bad bars side: {side}")))?;
            Ok(DatasetSpec::BarImages { n, side, noise, seed })
        }
        _ => match raw.as_str() {
            "two-gaussians" => Ok(DatasetSpec::TwoGaussians { n, noise, seed }),
            "rings" => Ok(DatasetSpec::ConcentricRings { n, noise, seed }),
            "xor" => Ok(DatasetSpec::XorGrid { n, noise, seed }),
            other => Err(SnlError::InvalidArgument(format!("unknown dataset: {other}"))),
        },
    }
}

fn load_data(args: &NetDataArgs, file: &FileConfig) -> Result<snl::data::DataSplit, SnlError> {
    snl::data::load_dataset(&build_dataset_spec(args, file)?)
}

fn build_snl_config(flags: &SnlFlags, file: &FileConfig) -> Result<SnlConfig, SnlError> {
    let d = SnlConfig::default();
    let kd = KdConfig {
        enabled: file.get(flags.kd_enabled, "kd_enabled")?.unwrap_or(d.kd.enabled),
        temperature: file.get(flags.kd_temperature, "kd_temperature")?.unwrap_or(d.kd.temperature),
        hard_weight: file.get(flags.kd_hard_weight, "kd_hard_weight")?.unwrap_or(d.kd.hard_weight),
        soft_weight: file.get(flags.kd_soft_weight, "kd_soft_weight")?.unwrap_or(d.kd.soft_weight),
    };
    let cfg = SnlConfig {
        lambda0: file.get(flags.lambda0, "lambda0")?.unwrap_or(d.lambda0),
        kappa: file.get(flags.kappa, "kappa")?.unwrap_or(d.kappa),
        epsilon: file.get(flags.epsilon, "epsilon")?.unwrap_or(d.epsilon),
        budget: file.get(flags.budget, "budget")?.unwrap_or(d.budget),
        adam_lr: file.get(flags.adam_lr, "adam_lr")?.unwrap_or(d.adam_lr),
        finetune_lr: file.get(flags.finetune_lr, "finetune_lr")?.unwrap_or(d.finetune_lr),
        finetune_momentum: file
            .get(flags.finetune_momentum, "finetune_momentum")?
            .unwrap_or(d.finetune_momentum),
        finetune_epochs: file
            .get(flags.finetune_epochs, "finetune_epochs")?
            .unwrap_or(d.finetune_epochs),
        kd,
        max_joint_epochs: file
            .get(flags.max_joint_epochs, "max_joint_epochs")?
            .unwrap_or(d.max_joint_epochs),
        batch_size: file.get(flags.batch_size, "batch_size")?.unwrap_or(d.batch_size),
        seed: file.get(flags.seed, "seed")?.unwrap_or(d.seed),
        clip_gates: file.get(flags.clip_gates, "clip_gates")?.unwrap_or(d.clip_gates),
        weight_decay_c: file
            .get(flags.weight_decay_c, "weight_decay_c")?
            .unwrap_or(d.weight_decay_c),
        lambda_schedule: file
            .get(flags.lambda_schedule, "lambda_schedule")?
            .unwrap_or(d.lambda_schedule),
    };
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Subcommand drivers

fn cmd_pretrain(args: &PretrainArgs, file: &FileConfig) -> Result<(), SnlError> {
    let arch = build_arch(&args.net, file)?;
    let data = load_data(&args.net, file)?;
    let epochs = file.get(args.epochs, "epochs")?.unwrap_or(20);
    let batch_size = file.get(args.batch_size, "batch_size")?.unwrap_or(64);
    let seed = file.get(args.seed, "seed")?.unwrap_or(0);
    let mut net = build_network(&arch, seed)?;
    let report =
        pretrain(&mut net, &data, epochs, &LrSchedule::for_epochs(epochs), batch_size, seed)?;
    save_checkpoint(&net, TrainState { epoch: epochs, lambda: 0.0 }, &args.out)?;
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_csv())?;
    }
    let acc = evaluate(&net, &data.test)?;
    println!("pretrained: test_acc={acc} relu_count={}", net.relu_count(0.01));
    Ok(())
}

fn cmd_snl(args: &SnlArgs, file: &FileConfig) -> Result<(), SnlError> {
    let (net, _) = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&args.net, file)?;
    let cfg = build_snl_config(&args.snl, file)?;
    let (out, report) = snl_run(&net, &data, &cfg)?;
    save_checkpoint(&out, TrainState { epoch: report.records.len(), lambda: cfg.lambda0 }, &args.out)?;
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_csv())?;
    }
    let acc = evaluate(&out, &data.test)?;
    println!(
        "snl: status={:?} relu_count={} budget={} test_acc={acc}",
        report.status,
        out.relu_count(cfg.epsilon),
        cfg.budget
    );
    if report.status == snl::train::RunStatus::Diverged {
        return Err(SnlError::Diverged);
    }
    Ok(())
}

fn cmd_prune(args: &PruneArgs, file: &FileConfig) -> Result<(), SnlError> {
    let (net, _) = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&args.net, file)?;
    let cfg = build_snl_config(&args.snl, file)?;
    let keep = match file.get(args.keep_fraction, "keep_fraction")? {
        Some(k) => k,
        None => {
            let total = net.total_relu_ops().max(1);
            (cfg.budget as f64 / total as f64).clamp(1e-12, 1.0)
        }
    };
    let (pruned, report) = prune_baseline(&net, keep, &data, &cfg)?;
    save_checkpoint(&pruned, TrainState::default(), &args.out)?;
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_csv())?;
    }
    println!(
        "pruned: keep_fraction={keep} relu_count={} test_acc={}",
        pruned.relu_count(cfg.epsilon),
        evaluate(&pruned, &data.test)?
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, file: &FileConfig) -> Result<(), SnlError> {
    let cfg = ExperimentConfig {
        arch: build_arch(&args.net, file)?,
        dataset: build_dataset_spec(&args.net, file)?,
        snl: build_snl_config(&args.snl, file)?,
        budgets: parse_list(
            &file
                .get(args.budgets.clone(), "budgets")?
                .ok_or_else(|| SnlError::InvalidArgument("--budgets is required".into()))?,
            "budget",
        )?,
        seeds: parse_list(
            &file
                .get(args.seeds.clone(), "seeds")?
                .ok_or_else(|| SnlError::InvalidArgument("--seeds is required".into()))?,
            "seed",
        )?,
        variants: file
            .get(args.variants.clone(), "variants")?
            .unwrap_or_else(|| "snl".into())
            .split(',')
            .map(parse_variant)
            .collect::<Result<_, _>>()?,
        pretrain_epochs: file.get(args.pretrain_epochs, "pretrain_epochs")?.unwrap_or(20),
    };
    let report = run_pareto_sweep(&cfg)?;
    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("pareto.csv"), report.to_csv())?;
    std::fs::write(args.out_dir.join("retention.csv"), report.retention_csv())?;
    let failures = report.points.iter().filter(|p| p.error.is_some()).count();
    println!(
        "sweep: {} cells, {} failed, wrote {}",
        report.points.len(),
        failures,
        args.out_dir.display()
    );
    if failures == report.points.len() {
        return Err(SnlError::Other("every sweep cell failed".into()));
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs, file: &FileConfig) -> Result<(), SnlError> {
    let (net, _) = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&args.net, file)?;
    let cfg = build_snl_config(&args.snl, file)?;
    let kind = match args.kind.as_str() {
        "lambda-grid" | "lambda_grid" => AblationKind::LambdaGrid(parse_list(
            &args
                .grid
                .clone()
                .ok_or_else(|| SnlError::InvalidArgument("--grid required".into()))?,
            "lambda",
        )?),
        "lr-grid" | "lr_grid" => AblationKind::LrGrid(parse_list(
            &args
                .grid
                .clone()
                .ok_or_else(|| SnlError::InvalidArgument("--grid required".into()))?,
            "lr",
        )?),
        "variant-compare" | "variant_compare" | "variants" => AblationKind::Variants,
        other => return Err(SnlError::InvalidArgument(format!("unknown ablation: {other}"))),
    };
    let rows = run_ablation(&net, &data, &cfg, &kind)?;
    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("ablation.csv"), ablation_csv(&rows))?;
    for (i, row) in rows.iter().enumerate() {
        std::fs::write(args.out_dir.join(format!("trace_{i}.csv")), row.trace_csv())?;
    }
    println!("ablation: {} grid points, wrote {}", rows.len(), args.out_dir.display());
    Ok(())
}

fn cmd_capacity(cmd: &CapacityCmd) -> Result<(), SnlError> {
    match cmd {
        CapacityCmd::Verify { trials, d_max, seed, full_retention, out } => {
            let report = verify_capacity_bounds(*trials, *d_max, *full_retention, *seed)?;
            if let Some(path) = out {
                std::fs::write(path, report.to_csv())?;
            }
            println!(
                "capacity verify: {} trials, {} violations, max ratio {}",
                report.rows.len(),
                report.violations,
                report.max_ratio
            );
            if report.violations > 0 {
                return Err(SnlError::Other("piece-bound violation detected".into()));
            }
            Ok(())
        }
        CapacityCmd::Optimal { d1, d2, budget } => {
            match optimal_alphas(*d1, *d2, *budget) {
                Ok((a1, a2)) => println!("closed form: alpha1={a1} alpha2={a2}"),
                Err(e) => println!("closed form: {e}"),
            }
            let (k1, k2, obj) = allocation_grid_search(*d1, *d2, *budget);
            println!(
                "grid search: k1={k1} k2={k2} objective={obj} (rounded closed form {})",
                rounded_closed_form_objective(*d1, *d2, *budget)
            );
            Ok(())
        }
    }
}

fn cmd_latency(cmd: &LatencyCmd) -> Result<(), SnlError> {
    match cmd {
        LatencyCmd::Estimate { relu_count, linear_time, t_per_1k } => {
            let model = LatencyModel { t_per_1k: *t_per_1k, linear_time: *linear_time };
            println!("estimated online latency: {} s", estimate_online_latency(*relu_count, &model));
            Ok(())
        }
        LatencyCmd::Fit { points } => {
            let pts: Vec<(f64, f64)> = points
                .split(',')
                .map(|pair| {
                    let (x, y) = pair.split_once(':').ok_or_else(|| {
                        SnlError::InvalidArgument(format!("bad point (want count:seconds): {pair}"))
                    })?;
                    Ok((
                        x.trim().parse().map_err(|_| {
                            SnlError::InvalidArgument(format!("bad count: {x}"))
                        })?,
                        y.trim().parse().map_err(|_| {
                            SnlError::InvalidArgument(format!("bad seconds: {y}"))
                        })?,
                    ))
                })
                .collect::<Result<_, SnlError>>()?;
            let (slope, intercept) = fit_per_relu_cost(&pts)?;
            println!(
                "fit: {} s per 1K ReLUs, intercept {intercept} s",
                slope * 1000.0
            );
            Ok(())
        }
    }
}

fn cmd_report(cmd: &ReportCmd) -> Result<(), SnlError> {
    match cmd {
        ReportCmd::Retention { checkpoint, out } => {
            let (net, _) = load_checkpoint(checkpoint)?;
            let report = layer_retention_report(&net)?;
            let csv = report.to_csv();
            match out {
                Some(path) => std::fs::write(path, &csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn exit_code_for(err: &SnlError) -> u8 {
    match err {
        SnlError::InvalidArgument(_)
        | SnlError::DatasetFormat(_)
        | SnlError::CheckpointFormat(_)
        | SnlError::CheckpointVersion { .. }
        | SnlError::LabelOutOfRange { .. }
        | SnlError::EmptyDataset => 1,
        SnlError::NonFinite(_)
        | SnlError::KinkDetected
        | SnlError::GatesNotBinary(_)
        | SnlError::GatesFrozen
        | SnlError::GatesNotFrozen
        | SnlError::CheckpointTruncated
        | SnlError::CheckpointChecksum
        | SnlError::InteriorSolution(_) => 3,
        SnlError::Other(msg) if msg.contains("violation") => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; bad flags are config errors.
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let result = (|| -> Result<(), SnlError> {
        let file = FileConfig::load(cli.config.as_deref())?;
        match &cli.command {
            Command::Pretrain(args) => cmd_pretrain(args, &file),
            Command::Snl(args) => cmd_snl(args, &file),
            Command::Prune(args) => cmd_prune(args, &file),
            Command::Sweep(args) => cmd_sweep(args, &file),
            Command::Ablate(args) => cmd_ablate(args, &file),
            Command::Capacity(cmd) => cmd_capacity(cmd),
            Command::Latency(cmd) => cmd_latency(cmd),
            Command::Report(cmd) => cmd_report(cmd),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
