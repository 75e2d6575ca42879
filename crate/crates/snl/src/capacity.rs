//! Memorization-capacity bounds for 2-hidden-layer networks with partially
//! linearized activations, the optimal budget-allocation closed form, and a
//! brute-force linear-piece-counting oracle on 1-D rays.

use crate::error::{Result, SnlError};
use crate::network::{GatedNetwork, Layer};
use crate::tape::GateMode;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Parameters of a capacity statement.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CapacitySpec {
    pub d1: usize,
    pub d2: usize,
    /// Activation piece count (2 for ReLU).
    pub p: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub budget: usize,
    pub dataset_size: usize,
}

/// Capacity bound of the fully nonlinear network:
/// p(p-1)d1d2 + (p-1)d2 + 2.
pub fn bound_full(d1: usize, d2: usize, p: usize) -> u64 {
    let (d1, d2, p) = (d1 as u64, d2 as u64, p as u64);
    p * (p - 1) * d1 * d2 + (p - 1) * d2 + 2
}

/// Capacity bound after selective linearization with retention fractions
/// alpha1, alpha2:
/// a1*a2*d1*d2*p(p-1) + a2*d2*(p-1) + a1*(1-a2)*d1*d2*(p-1) + 2.
pub fn bound_snl(d1: usize, d2: usize, p: usize, alpha1: f64, alpha2: f64) -> f64 {
    let (d1, d2, pf) = (d1 as f64, d2 as f64, p as f64);
    alpha1 * alpha2 * d1 * d2 * pf * (pf - 1.0)
        + alpha2 * d2 * (pf - 1.0)
        + alpha1 * (1.0 - alpha2) * d1 * d2 * (pf - 1.0)
        + 2.0
}

/// Capacity bound after structured pruning to widths alpha1*d1, alpha2*d2:
/// a1*a2*d1*d2*p(p-1) + a2*d2*(p-1) + 2.
pub fn bound_pruned(d1: usize, d2: usize, p: usize, alpha1: f64, alpha2: f64) -> f64 {
    let (d1, d2, pf) = (d1 as f64, d2 as f64, p as f64);
    alpha1 * alpha2 * d1 * d2 * pf * (pf - 1.0) + alpha2 * d2 * (pf - 1.0) + 2.0
}

/// Closed-form maximizer of the ReLU (p=2) selective-linearization bound
/// subject to alpha1*d1 + alpha2*d2 = B:
/// alpha1 = (B+d2-1)/(2d1), alpha2 = (B-d2+1)/(2d2).
///
/// Errors when the theorem's interior-solution hypothesis fails (B <= d2 or
/// a maximizer component outside [0,1]).
pub fn optimal_alphas(d1: usize, d2: usize, budget: usize) -> Result<(f64, f64)> {
    if budget <= d2 {
        return Err(SnlError::InteriorSolution(format!(
            "requires B > d2 (B={budget}, d2={d2})"
        )));
    }
    let alpha1 = (budget as f64 + d2 as f64 - 1.0) / (2.0 * d1 as f64);
    let alpha2 = (budget as f64 - d2 as f64 + 1.0) / (2.0 * d2 as f64);
    if !(0.0..=1.0).contains(&alpha1) || !(0.0..=1.0).contains(&alpha2) {
        return Err(SnlError::InteriorSolution(format!(
            "maximizer ({alpha1}, {alpha2}) outside [0,1]^2"
        )));
    }
    Ok((alpha1, alpha2))
}

/// Exhaustive search over integer ReLU allocations k1 + k2 = B maximizing
/// the p=2 selective-linearization bound. Returns (k1, k2, objective).
pub fn allocation_grid_search(d1: usize, d2: usize, budget: usize) -> (usize, usize, f64) {
    let mut best = (0usize, 0usize, f64::NEG_INFINITY);
    for k1 in 0..=d1.min(budget) {
        let k2 = budget - k1;
        if k2 > d2 {
            continue;
        }
        let obj = bound_snl(d1, d2, 2, k1 as f64 / d1 as f64, k2 as f64 / d2 as f64);
        if obj > best.2 {
            best = (k1, k2, obj);
        }
    }
    best
}

/// Objective of the closed form with components clamped into [0,1] and the
/// allocation rounded to the integer lattice; used to compare against
/// [`allocation_grid_search`].
pub fn rounded_closed_form_objective(d1: usize, d2: usize, budget: usize) -> f64 {
    let alpha1 = ((budget as f64 + d2 as f64 - 1.0) / (2.0 * d1 as f64)).clamp(0.0, 1.0);
    let k1 = ((alpha1 * d1 as f64).round() as usize).min(d1).min(budget);
    let k2 = (budget - k1).min(d2);
    bound_snl(d1, d2, 2, k1 as f64 / d1 as f64, k2 as f64 / d2 as f64)
}

/// Piece bound along a 1-D ray for integer retention counts (k1 of d1, k2
/// of d2 activations kept nonlinear, p pieces each): one less than the
/// corresponding capacity bound.
pub fn piece_bound(k1: usize, d2: usize, k2: usize, p: usize) -> u64 {
    let (k1, d2, k2, p) = (k1 as u64, d2 as u64, k2 as u64, p as u64);
    k1 * k2 * p * (p - 1) + k2 * (p - 1) + k1 * (d2 - k2) * (p - 1) + 1
}

/// Piece structure of t -> f(t*u) on a domain.
#[derive(Debug, Clone)]
pub struct RayPieceCount {
    pub direction: Vec<f64>,
    pub domain: (f64, f64),
    /// Sorted t values where an active pre-activation crosses zero.
    pub breakpoints: Vec<f64>,
}

impl RayPieceCount {
    pub fn pieces(&self) -> usize {
        self.breakpoints.len() + 1
    }
}

/// Per-unit affine form a(t) = slope*t + intercept on a segment.
#[derive(Clone, Copy)]
struct Affine {
    slope: f64,
    intercept: f64,
}

struct TwoLayerScalarNet {
    /// Pre-activation affine forms of layer 1 along the ray.
    z1: Vec<Affine>,
    /// Gate values and mode per layer-1 unit.
    g1: Vec<f64>,
    m1: GateMode,
    w2: Tensor,
    b2: Tensor,
    g2: Vec<f64>,
}

fn extract(net: &GatedNetwork, u: &[f64]) -> Result<TwoLayerScalarNet> {
    let gate_of = |l: &Layer, width: usize| -> Result<(Vec<f64>, GateMode)> {
        match l {
            Layer::Gated(g) => {
                if g.ops_per_gate != 1 {
                    return Err(SnlError::InvalidArgument(
                        "ray oracle requires per-unit gates".into(),
                    ));
                }
                Ok((g.values.clone(), g.mode))
            }
            Layer::PlainRelu => Ok((vec![1.0; width], GateMode::Identity)),
            _ => Err(SnlError::InvalidArgument(
                "ray oracle expects dense-activation-dense-activation-dense".into(),
            )),
        }
    };
    match net.layers.as_slice() {
        [Layer::Dense { w: w1, b: b1 }, act1, Layer::Dense { w: w2, b: b2 }, act2, Layer::Dense { w: w3, b: _ }] =>
        {
            let (din, d1) = (w1.shape()[0], w1.shape()[1]);
            let d2 = w2.shape()[1];
            if w3.shape()[1] != 1 {
                return Err(SnlError::InvalidArgument("ray oracle needs scalar output".into()));
            }
            if u.len() != din || u.iter().all(|&v| v == 0.0) {
                return Err(SnlError::InvalidArgument(
                    "direction must be nonzero with input dimension".into(),
                ));
            }
            let (g1, m1) = gate_of(act1, d1)?;
            let (g2, _) = gate_of(act2, d2)?;
            let z1 = (0..d1)
                .map(|j| Affine {
                    slope: (0..din).map(|k| u[k] * w1.data()[k * d1 + j]).sum(),
                    intercept: b1.data()[j],
                })
                .collect();
            Ok(TwoLayerScalarNet {
                z1,
                g1,
                m1,
                w2: w2.clone(),
                b2: b2.clone(),
                g2,
            })
        }
        _ => Err(SnlError::InvalidArgument(
            "ray oracle expects a 2-hidden-layer dense stack".into(),
        )),
    }
}

fn gate_affine(z: Affine, active_relu: bool, c: f64, mode: GateMode) -> Affine {
    // a = c*relu(z) + (1-c)*z (identity) or c*relu(z) (zero-out), with
    // relu(z) locally equal to z or 0 depending on the segment sign.
    let relu = if active_relu { z } else { Affine { slope: 0.0, intercept: 0.0 } };
    match mode {
        GateMode::Identity => Affine {
            slope: c * relu.slope + (1.0 - c) * z.slope,
            intercept: c * relu.intercept + (1.0 - c) * z.intercept,
        },
        GateMode::ZeroOut => Affine { slope: c * relu.slope, intercept: c * relu.intercept },
    }
}

/// Exact breakpoint enumeration of t -> f(t*u): layer-1 crossings solved
/// analytically, layer-2 crossings solved per locally-affine segment.
/// Each reported piece is validated against its secant at the midpoint to
/// 1e-9 relative scale.
pub fn count_pieces_ray(net: &GatedNetwork, u: &[f64], domain: (f64, f64)) -> Result<RayPieceCount> {
    let (t_lo, t_hi) = domain;
    if !(t_lo < t_hi) {
        return Err(SnlError::InvalidArgument("empty ray domain".into()));
    }
    let nn = extract(net, u)?;
    let tol = 1e-9 * (t_hi - t_lo).max(1.0);

    // Layer-1 breakpoints: active units with nonzero slope crossing zero.
    let mut bps: Vec<f64> = Vec::new();
    for (j, z) in nn.z1.iter().enumerate() {
        if nn.g1[j] != 0.0 && z.slope != 0.0 {
            let t = -z.intercept / z.slope;
            if t > t_lo + tol && t < t_hi - tol {
                bps.push(t);
            }
        }
    }
    bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bps.dedup_by(|a, b| (*a - *b).abs() <= tol);

    // Layer-2 breakpoints, segment by segment.
    let d1 = nn.z1.len();
    let d2 = nn.g2.len();
    let mut boundaries = vec![t_lo];
    boundaries.extend_from_slice(&bps);
    boundaries.push(t_hi);
    let mut bps2: Vec<f64> = Vec::new();
    for seg in boundaries.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let mid = 0.5 * (a + b);
        // Affine form of each layer-1 output on this segment.
        let a1: Vec<Affine> = (0..d1)
            .map(|j| {
                let z = nn.z1[j];
                let active = z.slope * mid + z.intercept > 0.0;
                gate_affine(z, active, nn.g1[j], nn.m1)
            })
            .collect();
        for k in 0..d2 {
            if nn.g2[k] == 0.0 {
                continue;
            }
            let mut z2 = Affine { slope: 0.0, intercept: nn.b2.data()[k] };
            for (j, aj) in a1.iter().enumerate() {
                let w = nn.w2.data()[j * d2 + k];
                z2.slope += w * aj.slope;
                z2.intercept += w * aj.intercept;
            }
            if z2.slope != 0.0 {
                let t = -z2.intercept / z2.slope;
                if t > a + tol && t < b - tol {
                    bps2.push(t);
                }
            }
        }
    }
    let mut breakpoints = bps;
    breakpoints.extend_from_slice(&bps2);
    breakpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breakpoints.dedup_by(|a, b| (*a - *b).abs() <= tol);

    let rpc = RayPieceCount { direction: u.to_vec(), domain, breakpoints };
    verify_midpoint_secant(net, &rpc)?;
    Ok(rpc)
}

/// On every reported piece, f must agree with the secant of the piece's
/// endpoints at the midpoint to 1e-9 (relative to the value scale).
pub fn verify_midpoint_secant(net: &GatedNetwork, rpc: &RayPieceCount) -> Result<()> {
    let eval = |t: f64| -> Result<f64> {
        let x: Vec<f64> = rpc.direction.iter().map(|&ui| t * ui).collect();
        Ok(net.forward(&Tensor::new(vec![1, x.len()], x)?)?.item())
    };
    let mut boundaries = vec![rpc.domain.0];
    boundaries.extend_from_slice(&rpc.breakpoints);
    boundaries.push(rpc.domain.1);
    for seg in boundaries.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (fa, fb) = (eval(a)?, eval(b)?);
        let fm = eval(0.5 * (a + b))?;
        let secant = 0.5 * (fa + fb);
        let scale = fa.abs().max(fb.abs()).max(1.0);
        if (fm - secant).abs() > 1e-9 * scale {
            return Err(SnlError::Other(format!(
                "piece [{a}, {b}] is not affine: midpoint deviates by {}",
                (fm - secant).abs()
            )));
        }
    }
    Ok(())
}

/// One row of a bound-verification sweep.
#[derive(Debug, Clone)]
pub struct VerifyRow {
    pub trial: usize,
    pub d1: usize,
    pub d2: usize,
    pub k1: usize,
    pub k2: usize,
    pub measured_pieces: usize,
    pub bound: u64,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub violations: usize,
    pub max_ratio: f64,
}

impl VerifyReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("# capacity-verify-v1\ntrial,d1,d2,alpha1,alpha2,measured_pieces,bound\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.trial,
                r.d1,
                r.d2,
                r.k1 as f64 / r.d1 as f64,
                r.k2 as f64 / r.d2 as f64,
                r.measured_pieces,
                r.bound
            ));
        }
        out
    }
}

/// Random-net sweep asserting the measured piece count never exceeds the
/// counting-argument bound. `full_retention` forces alpha1 = alpha2 = 1.
pub fn verify_capacity_bounds(
    trials: usize,
    d_max: usize,
    full_retention: bool,
    seed: u64,
) -> Result<VerifyReport> {
    use crate::network::{build_network, ArchSpec};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(trials);
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for trial in 0..trials {
        let din = rng.gen_range(1..=3usize);
        let d1 = rng.gen_range(1..=d_max);
        let d2 = rng.gen_range(1..=d_max);
        let mode = if rng.gen_bool(0.5) { GateMode::Identity } else { GateMode::ZeroOut };
        let mut spec = ArchSpec::mlp(&[din, d1, d2, 1], mode);
        spec.gate_mode = mode;
        let mut net = build_network(&spec, seed.wrapping_add(trial as u64 * 7919))?;
        // Randomize biases too; Kaiming leaves them at zero, which would
        // place every kink at t=0.
        for t in net.w_params_mut() {
            if t.shape().len() == 1 {
                for v in t.data_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let (k1, k2) = if full_retention {
            (d1, d2)
        } else {
            (rng.gen_range(0..=d1), rng.gen_range(0..=d2))
        };
        {
            let gates = net.gates_mut();
            let set_gate = |g: &mut crate::network::GateVector, keep: usize, rng: &mut ChaCha8Rng| {
                let n = g.values.len();
                let mut idx: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    let j = rng.gen_range(0..=i);
                    idx.swap(i, j);
                }
                for v in g.values.iter_mut() {
                    *v = 0.0;
                }
                for &i in idx.iter().take(keep) {
                    g.values[i] = 1.0;
                }
            };
            let mut it = gates.into_iter();
            set_gate(it.next().unwrap(), k1, &mut rng);
            set_gate(it.next().unwrap(), k2, &mut rng);
        }
        let u: Vec<f64> = (0..din).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if u.iter().all(|&v| v.abs() < 1e-3) {
            continue;
        }
        let rpc = count_pieces_ray(&net, &u, (-4.0, 4.0))?;
        let bound = piece_bound(k1, d2, k2, 2);
        if (rpc.pieces() as u64) > bound {
            violations += 1;
        }
        max_ratio = max_ratio.max(rpc.pieces() as f64 / bound as f64);
        rows.push(VerifyRow { trial, d1, d2, k1, k2, measured_pieces: rpc.pieces(), bound });
    }
    Ok(VerifyReport { rows, violations, max_ratio })
}

/// Sawtooth composition (tent map feeding a tent map) at d1 = d2 = 2: a
/// deliberately piece-rich construction used to probe bound tightness.
pub fn sawtooth_probe_net() -> GatedNetwork {
    use crate::network::{build_network, ArchSpec};
    let spec = ArchSpec::mlp(&[1, 2, 2, 1], GateMode::Identity);
    let mut net = build_network(&spec, 0).unwrap();
    {
        let mut ws = net.w_params_mut();
        // W1 [1x2], b1, W2 [2x2], b2, W3 [2x1], b3
        ws[0].data_mut().copy_from_slice(&[1.0, 1.0]);
        ws[1].data_mut().copy_from_slice(&[0.0, -0.5]);
        ws[2].data_mut().copy_from_slice(&[2.0, 2.0, -4.0, -4.0]);
        ws[3].data_mut().copy_from_slice(&[0.0, -0.5]);
        ws[4].data_mut().copy_from_slice(&[2.0, -4.0]);
        ws[5].data_mut().copy_from_slice(&[0.0]);
    }
    net
}
