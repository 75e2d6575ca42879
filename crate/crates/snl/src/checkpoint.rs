//! Binary checkpoint format.
//!
//! Layout: magic `SNLC`, version u32 LE, length-prefixed UTF-8 JSON
//! descriptor, raw little-endian f64 buffers (weights in traversal order,
//! then gate values), trailing CRC32 over everything before it.

use crate::error::{Result, SnlError};
use crate::network::{build_network, ArchSpec, GatedNetwork};
use crate::tape::GateMode;
use crate::network::Granularity;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SNLC";
pub const VERSION: u32 = 1;

/// Per-gate-vector metadata stored alongside the architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateMeta {
    pub granularity: Granularity,
    pub mode: GateMode,
    pub frozen: bool,
    pub epsilon: f64,
    pub ops_per_gate: usize,
    pub len: usize,
}

/// JSON descriptor embedded in the checkpoint header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Descriptor {
    pub arch: ArchSpec,
    pub gate_meta: Vec<GateMeta>,
    pub seed: u64,
    pub epoch: usize,
    pub lambda: f64,
    pub w_buffer_lens: Vec<usize>,
}

/// Training-state fields carried with the network.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainState {
    pub epoch: usize,
    pub lambda: f64,
}

pub fn save_checkpoint(net: &GatedNetwork, state: TrainState, path: &Path) -> Result<()> {
    let desc = Descriptor {
        arch: net.spec.clone(),
        gate_meta: net
            .gates()
            .iter()
            .map(|g| GateMeta {
                granularity: g.granularity,
                mode: g.mode,
                frozen: g.frozen,
                epsilon: g.epsilon,
                ops_per_gate: g.ops_per_gate,
                len: g.values.len(),
            })
            .collect(),
        seed: net.seed,
        epoch: state.epoch,
        lambda: state.lambda,
        w_buffer_lens: net.w_params().iter().map(|t| t.numel()).collect(),
    };
    let desc_json = serde_json::to_vec(&desc)
        .map_err(|e| SnlError::CheckpointFormat(e.to_string()))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(desc_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&desc_json);
    for t in net.w_params() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for g in net.gates() {
        for v in &g.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(GatedNetwork, TrainState)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 {
        return Err(SnlError::CheckpointTruncated);
    }
    if &bytes[0..4] != MAGIC {
        return Err(SnlError::CheckpointFormat("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SnlError::CheckpointVersion { found: version, expected: VERSION });
    }
    let body_len = bytes.len() - 4;
    let crc_stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_len]) != crc_stored {
        return Err(SnlError::CheckpointChecksum);
    }
    let desc_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + desc_len {
        return Err(SnlError::CheckpointTruncated);
    }
    let desc: Descriptor = serde_json::from_slice(&bytes[12..12 + desc_len])
        .map_err(|e| SnlError::CheckpointFormat(e.to_string()))?;

    // Rebuild the stack from the descriptor, then overwrite its buffers.
    let mut net = build_network(&desc.arch, desc.seed)?;
    let expected_f64 = desc.w_buffer_lens.iter().sum::<usize>()
        + desc.gate_meta.iter().map(|m| m.len).sum::<usize>();
    let data_start = 12 + desc_len;
    if body_len < data_start || (body_len - data_start) != expected_f64 * 8 {
        return Err(SnlError::CheckpointTruncated);
    }
    let mut cursor = data_start;
    let read_f64 = |cursor: &mut usize| {
        let v = f64::from_le_bytes(bytes[*cursor..*cursor + 8].try_into().unwrap());
        *cursor += 8;
        v
    };
    {
        let mut params = net.w_params_mut();
        if params.len() != desc.w_buffer_lens.len() {
            return Err(SnlError::CheckpointFormat("weight buffer count mismatch".into()));
        }
        for (t, &len) in params.iter_mut().zip(&desc.w_buffer_lens) {
            if t.numel() != len {
                return Err(SnlError::CheckpointFormat("weight buffer length mismatch".into()));
            }
            for v in t.data_mut() {
                *v = read_f64(&mut cursor);
            }
        }
    }
    {
        let mut gates = net.gates_mut();
        if gates.len() != desc.gate_meta.len() {
            return Err(SnlError::CheckpointFormat("gate vector count mismatch".into()));
        }
        for (g, meta) in gates.iter_mut().zip(&desc.gate_meta) {
            if g.values.len() != meta.len {
                return Err(SnlError::CheckpointFormat("gate vector length mismatch".into()));
            }
            g.granularity = meta.granularity;
            g.mode = meta.mode;
            g.frozen = meta.frozen;
            g.epsilon = meta.epsilon;
            g.ops_per_gate = meta.ops_per_gate;
            for v in &mut g.values {
                *v = read_f64(&mut cursor);
            }
        }
    }
    Ok((net, TrainState { epoch: desc.epoch, lambda: desc.lambda }))
}
