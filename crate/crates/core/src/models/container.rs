//! EVSM v1 model container.
//!
//! Layout (little-endian): magic "EVSM", version u16, pad u16, header
//! length u64, header JSON, weight payload, FNV-1a 64 checksum over all
//! preceding bytes. The payload stores, per synapse layer, the f32 scale,
//! the raw int8 weight values, and optional i32 bias values.

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, QuantizedWeights};
use crate::models::{ModelGraph, ModelMeta};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 4] = b"EVSM";
const VERSION: u16 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: ModelMeta,
    backbone_len: usize,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    spec: LayerSpec,
    blob: Option<WeightBlob>,
}

#[derive(Serialize, Deserialize)]
struct WeightBlob {
    /// Offset of the f32 scale within the payload; values follow it.
    offset: u64,
    values_len: u64,
    bias_len: u64,
}

/// Serialize a graph; loading the result reproduces bit-identical inference.
pub fn save_model(graph: &ModelGraph) -> Result<Vec<u8>> {
    graph.validate()?;
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let mut spec = layer.clone();
        let blob = spec.weights.take().map(|w| {
            let offset = payload.len() as u64;
            payload.extend_from_slice(&w.scale.to_le_bytes());
            payload.extend(w.values.iter().map(|v| *v as u8));
            let bias_len = match &w.bias {
                Some(b) => {
                    for v in b {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    b.len() as u64
                }
                None => 0,
            };
            WeightBlob { offset, values_len: w.values.len() as u64, bias_len }
        });
        entries.push(LayerEntry { spec, blob });
    }

    let header = Header {
        meta: graph.meta.clone(),
        backbone_len: graph.backbone_len,
        layers: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub fn load_model(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 24 {
        return Err(Error::Truncated { offset: bytes.len() as u64, what: "EVSM header".into() });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("missing EVSM magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported EVSM version {version}")));
    }
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a64(&bytes[..bytes.len() - 8]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).ok_or_else(|| {
        Error::Format("header length overflows".into())
    })?;
    if header_end > bytes.len() - 8 {
        return Err(Error::Truncated { offset: bytes.len() as u64, what: "EVSM header json".into() });
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Format(format!("bad EVSM header: {e}")))?;
    let payload = &bytes[header_end..bytes.len() - 8];

    let mut layers = Vec::with_capacity(header.layers.len());
    for entry in header.layers {
        let mut spec = entry.spec;
        if let Some(blob) = entry.blob {
            let start = blob.offset as usize;
            let values_end = start + 4 + blob.values_len as usize;
            let end = values_end + 4 * blob.bias_len as usize;
            if end > payload.len() {
                return Err(Error::Truncated {
                    offset: (header_end + payload.len()) as u64,
                    what: format!("weight blob of layer '{}'", spec.name),
                });
            }
            let scale = f32::from_le_bytes(payload[start..start + 4].try_into().expect("4 bytes"));
            let values: Vec<i8> =
                payload[start + 4..values_end].iter().map(|b| *b as i8).collect();
            let bias = (blob.bias_len > 0).then(|| {
                payload[values_end..end]
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect()
            });
            spec.weights = Some(QuantizedWeights { values, scale, bias });
        }
        layers.push(spec);
    }

    let graph = ModelGraph { meta: header.meta, layers, backbone_len: header.backbone_len };
    graph.validate()?;
    Ok(graph)
}
