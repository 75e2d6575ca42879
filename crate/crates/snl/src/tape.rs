//! Tape-based reverse-mode differentiation over the primitive set the
//! artifact needs: affine, 2-D convolution, gated activation, plain ReLU,
//! residual add, flatten, softmax cross-entropy and soft-target KL.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] replays the
//! recorded nodes in exact reverse order and accumulates gradients into
//! buffers shaped like the corresponding values.

use crate::error::{Result, SnlError};
use crate::tensor::Tensor;

/// Identifier of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(pub(crate) usize);

/// Gate broadcast layout: `len` gate entries, each covering `group`
/// contiguous elements of a sample (1 for per-unit, h*w for per-channel).
#[derive(Debug, Clone, Copy)]
pub struct GateLayout {
    pub len: usize,
    pub group: usize,
}

/// Gate application mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GateMode {
    /// a = c*relu(z) + (1-c)*z; c=0 passes z through unchanged.
    Identity,
    /// a = c*relu(z); c=0 zeroes the feature.
    ZeroOut,
}

enum Node {
    Leaf,
    Affine {
        x: ValId,
        w: ValId,
        b: ValId,
    },
    Conv2d {
        x: ValId,
        k: ValId,
        b: ValId,
        stride: usize,
        padding: usize,
    },
    Gated {
        z: ValId,
        c: ValId,
        layout: GateLayout,
        mode: GateMode,
    },
    Relu {
        z: ValId,
    },
    Add {
        a: ValId,
        b: ValId,
    },
    Flatten {
        x: ValId,
    },
    Sum {
        x: ValId,
    },
    SoftmaxCe {
        logits: ValId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlSoft {
        student: ValId,
        temperature: f64,
        p_teacher: Vec<f64>,
        q_student: Vec<f64>,
    },
}

/// Records primitive operations of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, node: Node, val: Tensor) -> ValId {
        self.nodes.push(node);
        self.vals.push(val);
        self.grads.push(None);
        ValId(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> ValId {
        self.push(Node::Leaf, t)
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Gradient buffer of a value, if backward reached it.
    pub fn grad(&self, id: ValId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.vals[id.0].shape().to_vec(), g.clone()).unwrap())
    }

    /// x[batch, in] * w[in, out] + b[out].
    pub fn affine(&mut self, x: ValId, w: ValId, b: ValId) -> Result<ValId> {
        let (xs, ws, bs) = (
            self.vals[x.0].shape().to_vec(),
            self.vals[w.0].shape().to_vec(),
            self.vals[b.0].shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(SnlError::ShapeMismatch(format!(
                "affine: x {:?}, w {:?}, b {:?}",
                xs, ws, bs
            )));
        }
        let (batch, n_in, n_out) = (xs[0], xs[1], ws[1]);
        let xd = self.vals[x.0].data();
        let wd = self.vals[w.0].data();
        let bd = self.vals[b.0].data();
        let mut out = vec![0.0; batch * n_out];
        for i in 0..batch {
            for k in 0..n_in {
                let xv = xd[i * n_in + k];
                for j in 0..n_out {
                    out[i * n_out + j] += xv * wd[k * n_out + j];
                }
            }
            for j in 0..n_out {
                out[i * n_out + j] += bd[j];
            }
        }
        let val = Tensor::new(vec![batch, n_out], out)?;
        Ok(self.push(Node::Affine { x, w, b }, val))
    }

    /// Cross-correlation of x[batch, cin, h, w] with k[cout, cin, kh, kw].
    pub fn conv2d(
        &mut self,
        x: ValId,
        k: ValId,
        b: ValId,
        stride: usize,
        padding: usize,
    ) -> Result<ValId> {
        let xs = self.vals[x.0].shape().to_vec();
        let ks = self.vals[k.0].shape().to_vec();
        let bs = self.vals[b.0].shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 || xs[1] != ks[1] || bs[0] != ks[0] {
            return Err(SnlError::ShapeMismatch(format!(
                "conv2d: x {:?}, k {:?}, b {:?}",
                xs, ks, bs
            )));
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(SnlError::ShapeMismatch("conv2d: kernel larger than padded input".into()));
        }
        if (h + 2 * padding - kh) % stride != 0 || (w + 2 * padding - kw) % stride != 0 {
            return Err(SnlError::ShapeMismatch(
                "conv2d: non-integer output size".into(),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let xd = self.vals[x.0].data();
        let kd = self.vals[k.0].data();
        let bd = self.vals[b.0].data();
        let mut out = vec![0.0; batch * cout * ho * wo];
        for n in 0..batch {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bd[co];
                        for ci in 0..cin {
                            for dy in 0..kh {
                                let iy = (oy * stride + dy) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let ix = (ox * stride + dx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xd[((n * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * kd[((co * cin + ci) * kh + dy) * kw + dx];
                                }
                            }
                        }
                        out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let val = Tensor::new(vec![batch, cout, ho, wo], out)?;
        Ok(self.push(
            Node::Conv2d { x, k, b, stride, padding },
            val,
        ))
    }

    /// Gated activation per Eq-style semantics: identity mode
    /// a = c*relu(z) + (1-c)*z, zero-out mode a = c*relu(z).
    /// The gate broadcasts over the batch dimension and over `layout.group`
    /// contiguous elements per gate entry within a sample.
    pub fn gated_activation(
        &mut self,
        z: ValId,
        c: ValId,
        layout: GateLayout,
        mode: GateMode,
    ) -> Result<ValId> {
        let zs = self.vals[z.0].shape().to_vec();
        if zs.is_empty() {
            return Err(SnlError::ShapeMismatch("gated: scalar input".into()));
        }
        let sample: usize = zs[1..].iter().product();
        if self.vals[c.0].numel() != layout.len || layout.len * layout.group != sample {
            return Err(SnlError::ShapeMismatch(format!(
                "gated: gate len {} (group {}) does not tile sample of {} elements",
                layout.len, layout.group, sample
            )));
        }
        let batch = zs[0];
        let zd = self.vals[z.0].data();
        let cd = self.vals[c.0].data();
        let mut out = vec![0.0; zd.len()];
        for n in 0..batch {
            for r in 0..sample {
                let zi = zd[n * sample + r];
                let ci = cd[r / layout.group];
                let relu = if zi > 0.0 { zi } else { 0.0 };
                out[n * sample + r] = match mode {
                    GateMode::Identity => ci * relu + (1.0 - ci) * zi,
                    GateMode::ZeroOut => ci * relu,
                };
            }
        }
        let val = Tensor::new(zs, out)?;
        Ok(self.push(Node::Gated { z, c, layout, mode }, val))
    }

    /// Plain ReLU (ungated sites).
    pub fn relu(&mut self, z: ValId) -> ValId {
        let zt = &self.vals[z.0];
        let out: Vec<f64> = zt.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let val = Tensor::new(zt.shape().to_vec(), out).unwrap();
        self.push(Node::Relu { z }, val)
    }

    /// Elementwise residual add.
    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(SnlError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.vals[a.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let out: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let val = Tensor::new(self.vals[a.0].shape().to_vec(), out)?;
        Ok(self.push(Node::Add { a, b }, val))
    }

    /// Collapse all per-sample dims into one: [batch, ...] -> [batch, m].
    pub fn flatten(&mut self, x: ValId) -> ValId {
        let xs = self.vals[x.0].shape().to_vec();
        let m: usize = xs[1..].iter().product();
        let val = self.vals[x.0].reshape(vec![xs[0], m]).unwrap();
        self.push(Node::Flatten { x }, val)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: ValId) -> ValId {
        let s: f64 = self.vals[x.0].data().iter().sum();
        self.push(Node::Sum { x }, Tensor::scalar(s))
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn softmax_cross_entropy(&mut self, logits: ValId, labels: &[usize]) -> Result<ValId> {
        let ls = self.vals[logits.0].shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(SnlError::ShapeMismatch(format!(
                "softmax_ce: logits {:?}, {} labels",
                ls,
                labels.len()
            )));
        }
        let (batch, classes) = (ls[0], ls[1]);
        for &l in labels {
            if l >= classes {
                return Err(SnlError::LabelOutOfRange { label: l, classes });
            }
        }
        let ld = self.vals[logits.0].data();
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for i in 0..batch {
            let row = &ld[i * classes..(i + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - m).exp();
            }
            let log_denom = denom.ln() + m;
            for j in 0..classes {
                probs[i * classes + j] = (row[j] - log_denom).exp();
            }
            loss += log_denom - row[labels[i]];
        }
        loss /= batch as f64;
        Ok(self.push(
            Node::SoftmaxCe { logits, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
        ))
    }

    /// T^2-scaled mean KL( softmax(teacher/T) || softmax(student/T) ).
    /// The teacher is treated as a constant; only the student receives
    /// gradients.
    pub fn kl_soft_targets(
        &mut self,
        student: ValId,
        teacher: ValId,
        temperature: f64,
    ) -> Result<ValId> {
        if temperature <= 0.0 {
            return Err(SnlError::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let ss = self.vals[student.0].shape().to_vec();
        if ss != self.vals[teacher.0].shape() || ss.len() != 2 {
            return Err(SnlError::ShapeMismatch(format!(
                "kl_soft: student {:?}, teacher {:?}",
                ss,
                self.vals[teacher.0].shape()
            )));
        }
        let (batch, classes) = (ss[0], ss[1]);
        let softmax_t = |row: &[f64]| -> Vec<f64> {
            let m = row
                .iter()
                .map(|v| v / temperature)
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v / temperature - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            exps.iter().map(|e| e / denom).collect()
        };
        let sd = self.vals[student.0].data();
        let td = self.vals[teacher.0].data();
        let mut p_all = vec![0.0; batch * classes];
        let mut q_all = vec![0.0; batch * classes];
        let mut kl = 0.0;
        for i in 0..batch {
            let p = softmax_t(&td[i * classes..(i + 1) * classes]);
            let q = softmax_t(&sd[i * classes..(i + 1) * classes]);
            for j in 0..classes {
                if p[j] > 0.0 {
                    kl += p[j] * (p[j].ln() - q[j].ln());
                }
                p_all[i * classes + j] = p[j];
                q_all[i * classes + j] = q[j];
            }
        }
        let value = temperature * temperature * kl / batch as f64;
        Ok(self.push(
            Node::KlSoft {
                student,
                temperature,
                p_teacher: p_all,
                q_student: q_all,
            },
            Tensor::scalar(value),
        ))
    }

    fn grad_buf(&mut self, id: ValId) -> &mut Vec<f64> {
        let n = self.vals[id.0].numel();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// One reverse sweep. `seeds` are scalar outputs with their upstream
    /// weights; a combined loss like 0.5*ce + 0.5*kl backpropagates in a
    /// single call with two seeds. Call once per tape.
    pub fn backward(&mut self, seeds: &[(ValId, f64)]) -> Result<()> {
        for &(id, weight) in seeds {
            if self.vals[id.0].numel() != 1 {
                return Err(SnlError::InvalidArgument(
                    "backward seed must be scalar".into(),
                ));
            }
            self.grad_buf(id)[0] += weight;
        }
        for i in (0..self.nodes.len()).rev() {
            let g_out = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            // Split borrows: take the node out, restore after.
            let node = std::mem::replace(&mut self.nodes[i], Node::Leaf);
            self.backward_node(&node, &g_out);
            self.nodes[i] = node;
        }
        Ok(())
    }

    fn backward_node(&mut self, node: &Node, g_out: &[f64]) {
        match node {
            Node::Leaf => {}
            Node::Affine { x, w, b } => {
                let xs = self.vals[x.0].shape().to_vec();
                let ws = self.vals[w.0].shape().to_vec();
                let (batch, n_in, n_out) = (xs[0], xs[1], ws[1]);
                let xd = self.vals[x.0].data().to_vec();
                let wd = self.vals[w.0].data().to_vec();
                {
                    let gx = self.grad_buf(*x);
                    for i in 0..batch {
                        for k in 0..n_in {
                            let mut acc = 0.0;
                            for j in 0..n_out {
                                acc += g_out[i * n_out + j] * wd[k * n_out + j];
                            }
                            gx[i * n_in + k] += acc;
                        }
                    }
                }
                {
                    let gw = self.grad_buf(*w);
                    for k in 0..n_in {
                        for j in 0..n_out {
                            let mut acc = 0.0;
                            for i in 0..batch {
                                acc += xd[i * n_in + k] * g_out[i * n_out + j];
                            }
                            gw[k * n_out + j] += acc;
                        }
                    }
                }
                {
                    let gb = self.grad_buf(*b);
                    for j in 0..n_out {
                        let mut acc = 0.0;
                        for i in 0..batch {
                            acc += g_out[i * n_out + j];
                        }
                        gb[j] += acc;
                    }
                }
            }
            Node::Conv2d { x, k, b, stride, padding } => {
                let xs = self.vals[x.0].shape().to_vec();
                let ks = self.vals[k.0].shape().to_vec();
                let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let ho = (h + 2 * padding - kh) / stride + 1;
                let wo = (w + 2 * padding - kw) / stride + 1;
                let xd = self.vals[x.0].data().to_vec();
                let kd = self.vals[k.0].data().to_vec();
                let mut gx = vec![0.0; xd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gb = vec![0.0; cout];
                for n in 0..batch {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = g_out[((n * cout + co) * ho + oy) * wo + ox];
                                gb[co] += g;
                                for ci in 0..cin {
                                    for dy in 0..kh {
                                        let iy = (oy * stride + dy) as isize - *padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for dx in 0..kw {
                                            let ix =
                                                (ox * stride + dx) as isize - *padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ((n * cin + ci) * h + iy as usize) * w
                                                + ix as usize;
                                            let ki = ((co * cin + ci) * kh + dy) * kw + dx;
                                            gx[xi] += g * kd[ki];
                                            gk[ki] += g * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (dst, s) in self.grad_buf(*x).iter_mut().zip(&gx) {
                    *dst += s;
                }
                for (dst, s) in self.grad_buf(*k).iter_mut().zip(&gk) {
                    *dst += s;
                }
                for (dst, s) in self.grad_buf(*b).iter_mut().zip(&gb) {
                    *dst += s;
                }
            }
            Node::Gated { z, c, layout, mode } => {
                let zs = self.vals[z.0].shape().to_vec();
                let sample: usize = zs[1..].iter().product();
                let batch = zs[0];
                let zd = self.vals[z.0].data().to_vec();
                let cd = self.vals[c.0].data().to_vec();
                let mut gz = vec![0.0; zd.len()];
                let mut gc = vec![0.0; cd.len()];
                for n in 0..batch {
                    for r in 0..sample {
                        let idx = n * sample + r;
                        let zi = zd[idx];
                        let ci = cd[r / layout.group];
                        let relu = if zi > 0.0 { zi } else { 0.0 };
                        let step = if zi > 0.0 { 1.0 } else { 0.0 };
                        let (dz, dc) = match mode {
                            GateMode::Identity => (ci * step + (1.0 - ci), relu - zi),
                            GateMode::ZeroOut => (ci * step, relu),
                        };
                        gz[idx] += g_out[idx] * dz;
                        gc[r / layout.group] += g_out[idx] * dc;
                    }
                }
                for (dst, s) in self.grad_buf(*z).iter_mut().zip(&gz) {
                    *dst += s;
                }
                for (dst, s) in self.grad_buf(*c).iter_mut().zip(&gc) {
                    *dst += s;
                }
            }
            Node::Relu { z } => {
                let zd = self.vals[z.0].data().to_vec();
                let gz = self.grad_buf(*z);
                for (i, &zi) in zd.iter().enumerate() {
                    if zi > 0.0 {
                        gz[i] += g_out[i];
                    }
                }
            }
            Node::Add { a, b } => {
                for (dst, s) in self.grad_buf(*a).iter_mut().zip(g_out) {
                    *dst += s;
                }
                for (dst, s) in self.grad_buf(*b).iter_mut().zip(g_out) {
                    *dst += s;
                }
            }
            Node::Flatten { x } => {
                for (dst, s) in self.grad_buf(*x).iter_mut().zip(g_out) {
                    *dst += s;
                }
            }
            Node::Sum { x } => {
                let g = g_out[0];
                for dst in self.grad_buf(*x).iter_mut() {
                    *dst += g;
                }
            }
            Node::SoftmaxCe { logits, labels, probs } => {
                let classes = self.vals[logits.0].shape()[1];
                let batch = labels.len();
                let g = g_out[0] / batch as f64;
                let gl = self.grad_buf(*logits);
                for i in 0..batch {
                    for j in 0..classes {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        gl[i * classes + j] += g * (probs[i * classes + j] - onehot);
                    }
                }
            }
            Node::KlSoft {
                student,
                temperature,
                p_teacher,
                q_student,
            } => {
                let ss = self.vals[student.0].shape().to_vec();
                let (batch, classes) = (ss[0], ss[1]);
                let g = g_out[0] * temperature / batch as f64;
                let gs = self.grad_buf(*student);
                for i in 0..batch * classes {
                    gs[i] += g * (q_student[i] - p_teacher[i]);
                }
            }
        }
    }
}

/// Max relative error between analytic gradients and central differences
/// over every element of every parameter.
///
/// The probe must sit away from ReLU kinks; instability between the two
/// step sizes is reported as [`SnlError::KinkDetected`] so the caller can
/// re-sample.
pub fn grad_check<F>(params: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValId]) -> Result<ValId>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValId> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = build(&mut tape, &ids)?;
        if tape.value(out).numel() != 1 {
            return Err(SnlError::InvalidArgument("grad_check: output not scalar".into()));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<ValId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &ids)?;
    tape.backward(&[(out, 1.0)])?;

    let mut max_err: f64 = 0.0;
    for (pi, param) in params.iter().enumerate() {
        let analytic = tape
            .grad(ids[pi])
            .unwrap_or_else(|| Tensor::zeros(param.shape().to_vec()));
        for j in 0..param.numel() {
            let mut probe = params.to_vec();
            let base = probe[pi].data()[j];
            let mut diff_at = |h: f64| -> Result<f64> {
                probe[pi].data_mut()[j] = base + h;
                let fp = eval(&probe)?;
                probe[pi].data_mut()[j] = base - h;
                let fm = eval(&probe)?;
                probe[pi].data_mut()[j] = base;
                Ok((fp - fm) / (2.0 * h))
            };
            let d1 = diff_at(1e-5)?;
            let d2 = diff_at(5e-6)?;
            if (d1 - d2).abs() > 1e-3 * d1.abs().max(d2.abs()).max(1.0) && (d1 - d2).abs() > 1e-6 {
                return Err(SnlError::KinkDetected);
            }
            let a = analytic.data()[j];
            let err = (a - d1).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
