//! Gated-activation networks: construction, forward evaluation, gate
//! accounting, binarization and freezing.
//!
//! Every activation site carries a relaxed slope parameter c. With c=1 the
//! site is a plain ReLU; with c=0 it is the identity (identity mode) or a
//! hard zero (zero-out mode). Gates are architecture parameters shared
//! across the batch.

use crate::error::{Result, SnlError};
use crate::tape::{GateLayout, GateMode, Tape, ValId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Gate placement granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// One gate per activation scalar (per (channel, row, col) for conv maps).
    PerUnit,
    /// One gate per output channel, broadcast over spatial positions.
    PerChannel,
}

/// Relaxed slope parameters for one activation layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateVector {
    pub values: Vec<f64>,
    pub granularity: Granularity,
    pub mode: GateMode,
    pub frozen: bool,
    pub epsilon: f64,
    /// ReLU operations each gate site controls (1 per-unit, h*w per-channel).
    pub ops_per_gate: usize,
}

impl GateVector {
    /// Gate sites with value strictly above `eps`, weighted by the ReLU
    /// operations each site controls.
    pub fn relu_count(&self, eps: f64) -> usize {
        self.values.iter().filter(|&&v| v > eps).count() * self.ops_per_gate
    }

    pub fn surviving_sites(&self, eps: f64) -> usize {
        self.values.iter().filter(|&&v| v > eps).count()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn binarize(&mut self, eps: f64) {
        for v in &mut self.values {
            *v = if *v > eps { 1.0 } else { 0.0 };
        }
    }
}

/// One entry of an architecture descriptor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { out: usize },
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    /// Activation site; gated unless it is the first activation and
    /// `first_activation_plain` is set.
    Activation,
    Flatten,
    /// Inner stack whose output is added back to its input.
    Residual(Vec<LayerSpec>),
}

/// Architecture descriptor: enough to rebuild the layer stack and gate
/// layout deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Per-sample input shape, e.g. [2] or [1, 8, 8].
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub granularity: Granularity,
    pub gate_mode: GateMode,
    /// Keep the first activation as a plain ReLU, outside the gate budget.
    pub first_activation_plain: bool,
    pub epsilon: f64,
}

impl ArchSpec {
    /// Convenience constructor for a dense stack [in, h1, ..., hk, out] with
    /// a gated activation after every hidden layer.
    pub fn mlp(widths: &[usize], mode: GateMode) -> Self {
        let mut layers = Vec::new();
        for (i, &w) in widths[1..].iter().enumerate() {
            layers.push(LayerSpec::Dense { out: w });
            if i + 2 < widths.len() {
                layers.push(LayerSpec::Activation);
            }
        }
        ArchSpec {
            input_shape: vec![widths[0]],
            layers,
            granularity: Granularity::PerUnit,
            gate_mode: mode,
            first_activation_plain: false,
            epsilon: 0.01,
        }
    }
}

/// A runtime layer with its parameters.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense { w: Tensor, b: Tensor },
    Conv { k: Tensor, b: Tensor, stride: usize, padding: usize },
    Gated(GateVector),
    PlainRelu,
    Flatten,
    Residual(Vec<Layer>),
}

/// The object the linearization loop manipulates: a layer stack whose
/// trainable parameters split into the weight group and the gate group.
#[derive(Debug, Clone)]
pub struct GatedNetwork {
    pub spec: ArchSpec,
    pub layers: Vec<Layer>,
    pub seed: u64,
}

/// Tape value ids of one forward pass, split by parameter group.
pub struct ForwardIds {
    pub output: ValId,
    pub w_group: Vec<ValId>,
    pub c_group: Vec<ValId>,
}

fn kaiming(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    // Box-Muller from uniform draws keeps us independent of distribution
    // crates and bit-stable across versions.
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn build_layers(
    specs: &[LayerSpec],
    shape: &mut Vec<usize>,
    arch: &ArchSpec,
    rng: &mut ChaCha8Rng,
    activation_index: &mut usize,
) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    for ls in specs {
        match ls {
            LayerSpec::Dense { out } => {
                if shape.len() != 1 {
                    return Err(SnlError::ShapeMismatch(format!(
                        "dense layer expects flat input, got shape {:?}",
                        shape
                    )));
                }
                let fan_in = shape[0];
                layers.push(Layer::Dense {
                    w: kaiming(rng, vec![fan_in, *out], fan_in),
                    b: Tensor::zeros(vec![*out]),
                });
                *shape = vec![*out];
            }
            LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                if shape.len() != 3 {
                    return Err(SnlError::ShapeMismatch(format!(
                        "conv layer expects [c,h,w] input, got shape {:?}",
                        shape
                    )));
                }
                let (cin, h, w) = (shape[0], shape[1], shape[2]);
                if (h + 2 * padding) < *kernel
                    || (w + 2 * padding) < *kernel
                    || (h + 2 * padding - kernel) % stride != 0
                    || (w + 2 * padding - kernel) % stride != 0
                {
                    return Err(SnlError::ShapeMismatch(
                        "conv layer dims do not produce an integer output size".into(),
                    ));
                }
                let fan_in = cin * kernel * kernel;
                layers.push(Layer::Conv {
                    k: kaiming(rng, vec![*out_channels, cin, *kernel, *kernel], fan_in),
                    b: Tensor::zeros(vec![*out_channels]),
                    stride: *stride,
                    padding: *padding,
                });
                *shape = vec![
                    *out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ];
            }
            LayerSpec::Activation => {
                let idx = *activation_index;
                *activation_index += 1;
                if idx == 0 && arch.first_activation_plain {
                    layers.push(Layer::PlainRelu);
                } else {
                    let sample: usize = shape.iter().product();
                    let (len, ops) = match arch.granularity {
                        Granularity::PerUnit => (sample, 1),
                        Granularity::PerChannel => {
                            // For flat shapes a "channel" is a unit.
                            let ch = shape[0];
                            (ch, sample / ch)
                        }
                    };
                    layers.push(Layer::Gated(GateVector {
                        values: vec![1.0; len],
                        granularity: arch.granularity,
                        mode: arch.gate_mode,
                        frozen: false,
                        epsilon: arch.epsilon,
                        ops_per_gate: ops,
                    }));
                }
            }
            LayerSpec::Flatten => {
                layers.push(Layer::Flatten);
                *shape = vec![shape.iter().product()];
            }
            LayerSpec::Residual(inner) => {
                let entry = shape.clone();
                let block = build_layers(inner, shape, arch, rng, activation_index)?;
                if *shape != entry {
                    return Err(SnlError::ShapeMismatch(format!(
                        "residual block changes shape {:?} -> {:?}",
                        entry, shape
                    )));
                }
                layers.push(Layer::Residual(block));
            }
        }
    }
    Ok(layers)
}

/// Build a network from a descriptor with all gates at 1.0 and
/// Kaiming-initialized weights.
pub fn build_network(spec: &ArchSpec, seed: u64) -> Result<GatedNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = spec.input_shape.clone();
    let mut act_idx = 0;
    let layers = build_layers(&spec.layers, &mut shape, spec, &mut rng, &mut act_idx)?;
    Ok(GatedNetwork { spec: spec.clone(), layers, seed })
}

fn forward_layers(
    layers: &[Layer],
    tape: &mut Tape,
    mut x: ValId,
    ids: &mut ForwardIds,
) -> Result<ValId> {
    for layer in layers {
        x = match layer {
            Layer::Dense { w, b } => {
                let wi = tape.leaf(w.clone());
                let bi = tape.leaf(b.clone());
                ids.w_group.push(wi);
                ids.w_group.push(bi);
                tape.affine(x, wi, bi)?
            }
            Layer::Conv { k, b, stride, padding } => {
                let ki = tape.leaf(k.clone());
                let bi = tape.leaf(b.clone());
                ids.w_group.push(ki);
                ids.w_group.push(bi);
                tape.conv2d(x, ki, bi, *stride, *padding)?
            }
            Layer::Gated(g) => {
                let ci = tape.leaf(Tensor::new(vec![g.values.len()], g.values.clone())?);
                if !g.frozen {
                    ids.c_group.push(ci);
                }
                tape.gated_activation(
                    x,
                    ci,
                    GateLayout { len: g.values.len(), group: g.ops_per_gate },
                    g.mode,
                )?
            }
            Layer::PlainRelu => tape.relu(x),
            Layer::Flatten => tape.flatten(x),
            Layer::Residual(inner) => {
                let skip = x;
                let out = forward_layers(inner, tape, x, ids)?;
                tape.add(skip, out)?
            }
        };
    }
    Ok(x)
}

impl GatedNetwork {
    /// Record a forward pass on `tape`. Parameters enter the tape as leaves
    /// in traversal order; frozen gates are excluded from the C group.
    pub fn forward_tape(&self, tape: &mut Tape, x: ValId) -> Result<ForwardIds> {
        let mut ids = ForwardIds { output: x, w_group: Vec::new(), c_group: Vec::new() };
        ids.output = forward_layers(&self.layers, tape, x, &mut ids)?;
        Ok(ids)
    }

    /// Forward evaluation of a batch. Runs through the same tape primitives
    /// as training, so values are bit-identical to the recorded pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let ids = self.forward_tape(&mut tape, xi)?;
        Ok(tape.value(ids.output).clone())
    }

    /// Weight-group tensors in traversal order (dense/conv weights and biases).
    pub fn w_params(&self) -> Vec<&Tensor> {
        fn walk<'a>(layers: &'a [Layer], out: &mut Vec<&'a Tensor>) {
            for l in layers {
                match l {
                    Layer::Dense { w, b } => {
                        out.push(w);
                        out.push(b);
                    }
                    Layer::Conv { k, b, .. } => {
                        out.push(k);
                        out.push(b);
                    }
                    Layer::Residual(inner) => walk(inner, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    pub fn w_params_mut(&mut self) -> Vec<&mut Tensor> {
        fn walk<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Tensor>) {
            for l in layers {
                match l {
                    Layer::Dense { w, b } => {
                        out.push(w);
                        out.push(b);
                    }
                    Layer::Conv { k, b, .. } => {
                        out.push(k);
                        out.push(b);
                    }
                    Layer::Residual(inner) => walk(inner, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&mut self.layers, &mut out);
        out
    }

    /// Gate vectors in traversal order.
    pub fn gates(&self) -> Vec<&GateVector> {
        fn walk<'a>(layers: &'a [Layer], out: &mut Vec<&'a GateVector>) {
            for l in layers {
                match l {
                    Layer::Gated(g) => out.push(g),
                    Layer::Residual(inner) => walk(inner, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    pub fn gates_mut(&mut self) -> Vec<&mut GateVector> {
        fn walk<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut GateVector>) {
            for l in layers {
                match l {
                    Layer::Gated(g) => out.push(g),
                    Layer::Residual(inner) => walk(inner, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&mut self.layers, &mut out);
        out
    }

    /// Both trainable groups from a single walk, in traversal order.
    pub fn params_mut(&mut self) -> (Vec<&mut Tensor>, Vec<&mut GateVector>) {
        fn walk<'a>(
            layers: &'a mut [Layer],
            ws: &mut Vec<&'a mut Tensor>,
            cs: &mut Vec<&'a mut GateVector>,
        ) {
            for l in layers {
                match l {
                    Layer::Dense { w, b } => {
                        ws.push(w);
                        ws.push(b);
                    }
                    Layer::Conv { k, b, .. } => {
                        ws.push(k);
                        ws.push(b);
                    }
                    Layer::Gated(g) => cs.push(g),
                    Layer::Residual(inner) => walk(inner, ws, cs),
                    _ => {}
                }
            }
        }
        let mut ws = Vec::new();
        let mut cs = Vec::new();
        walk(&mut self.layers, &mut ws, &mut cs);
        (ws, cs)
    }

    /// Total gate sites (constant for a fixed architecture).
    pub fn total_gates(&self) -> usize {
        self.gates().iter().map(|g| g.values.len()).sum()
    }

    /// Total ReLU operations under full gate retention (sites weighted by
    /// ops_per_gate; equals total_gates for per-unit granularity).
    pub fn total_relu_ops(&self) -> usize {
        self.gates().iter().map(|g| g.values.len() * g.ops_per_gate).sum()
    }

    /// `||1(C > eps)||_0` in ReLU operations.
    pub fn relu_count(&self, eps: f64) -> usize {
        self.gates().iter().map(|g| g.relu_count(eps)).sum()
    }

    /// Threshold every gate to {0, 1}. Idempotent.
    pub fn binarize_gates(&mut self, eps: f64) -> Result<()> {
        if self.gates().iter().any(|g| g.frozen) {
            return Err(SnlError::GatesFrozen);
        }
        for g in self.gates_mut() {
            g.binarize(eps);
        }
        Ok(())
    }

    /// Freeze binary gates so they receive no gradient.
    pub fn freeze_gates(&mut self) -> Result<()> {
        if self.gates().iter().any(|g| !g.is_binary()) {
            return Err(SnlError::GatesNotBinary("freeze_gates"));
        }
        for g in self.gates_mut() {
            g.frozen = true;
        }
        Ok(())
    }

    pub fn gates_frozen(&self) -> bool {
        !self.gates().is_empty() && self.gates().iter().all(|g| g.frozen)
    }

    /// FNV-1a over the raw gate bits; used to certify freeze integrity.
    pub fn gate_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for g in self.gates() {
            for v in &g.values {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Flat copy of all gate values in traversal order.
    pub fn gate_values(&self) -> Vec<f64> {
        self.gates().iter().flat_map(|g| g.values.iter().copied()).collect()
    }
}
