//! Model checkpoints: a human-readable text header (config, sharing mode,
//! tensor manifest) followed by the raw tensor data as little-endian f64.
//! Writing the same store twice produces byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{KdError, Result};
use crate::sps::{build_sharing_plan, ParamStore, SharingPlan, SpsMode};

const MAGIC: &str = "kdkit-checkpoint v1";
const END_HEADER: &str = "end-header";

pub fn save_checkpoint(path: &Path, store: &ParamStore, mode: SpsMode) -> Result<()> {
    let c = &store.config;
    let mut header = String::new();
    let _ = writeln!(header, "{MAGIC}");
    let _ = writeln!(header, "config vocab_size {}", c.vocab_size);
    let _ = writeln!(header, "config max_seq_len {}", c.max_seq_len);
    let _ = writeln!(header, "config hidden_dim {}", c.hidden_dim);
    let _ = writeln!(header, "config num_heads {}", c.num_heads);
    let _ = writeln!(header, "config ff_dim {}", c.ff_dim);
    let _ = writeln!(header, "config num_physical_layers {}", c.num_physical_layers);
    let _ = writeln!(header, "config num_classes {}", c.num_classes);
    let _ = writeln!(header, "plan {} {}", mode, store.num_param_sets());

    let mut offset = 0usize;
    for (_, name, tensor) in store.tensors.iter() {
        let dims: Vec<String> = tensor.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(header, "tensor {} {} {}", name, dims.join("x"), offset);
        offset += tensor.numel() * 8;
    }
    let _ = writeln!(header, "{END_HEADER}");

    let mut bytes = Vec::with_capacity(header.len() + offset);
    bytes.extend_from_slice(header.as_bytes());
    for (_, _, tensor) in store.tensors.iter() {
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, SharingPlan, SpsMode)> {
    let bytes = std::fs::read(path)
        .map_err(|e| KdError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let marker = format!("\n{END_HEADER}\n");
    let split = find_subslice(&bytes, marker.as_bytes()).ok_or_else(|| {
        KdError::Checkpoint(format!("{}: no end-header marker", path.display()))
    })?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| KdError::Checkpoint("header is not UTF-8".into()))?;
    let payload = &bytes[split + marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(KdError::Checkpoint(format!(
            "{}: not a {MAGIC} file",
            path.display()
        )));
    }

    let mut config_fields: Vec<(String, usize)> = Vec::new();
    let mut plan_line: Option<(SpsMode, usize)> = None;
    let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("config") => {
                let key = parts
                    .next()
                    .ok_or_else(|| KdError::Checkpoint(format!("bad config line {line:?}")))?;
                let value: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| KdError::Checkpoint(format!("bad config line {line:?}")))?;
                config_fields.push((key.to_string(), value));
            }
            Some("plan") => {
                let mode: SpsMode = parts
                    .next()
                    .ok_or_else(|| KdError::Checkpoint(format!("bad plan line {line:?}")))?
                    .parse()?;
                let sets: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| KdError::Checkpoint(format!("bad plan line {line:?}")))?;
                plan_line = Some((mode, sets));
            }
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| KdError::Checkpoint(format!("bad tensor line {line:?}")))?;
                let shape_s = parts
                    .next()
                    .ok_or_else(|| KdError::Checkpoint(format!("bad tensor line {line:?}")))?;
                let offset: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| KdError::Checkpoint(format!("bad tensor line {line:?}")))?;
                let shape = shape_s
                    .split('x')
                    .map(|d| {
                        d.parse::<usize>().map_err(|_| {
                            KdError::Checkpoint(format!("bad shape {shape_s:?} for {name}"))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?;
                manifest.push((name.to_string(), shape, offset));
            }
            Some(other) => {
                return Err(KdError::Checkpoint(format!("unknown header entry {other:?}")))
            }
            None => continue,
        }
    }

    let get = |key: &str| -> Result<usize> {
        config_fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| KdError::Checkpoint(format!("missing config key {key:?}")))
    };
    let config = EncoderConfig {
        vocab_size: get("vocab_size")?,
        max_seq_len: get("max_seq_len")?,
        hidden_dim: get("hidden_dim")?,
        num_heads: get("num_heads")?,
        ff_dim: get("ff_dim")?,
        num_physical_layers: get("num_physical_layers")?,
        num_classes: get("num_classes")?,
    };
    let (mode, num_sets) =
        plan_line.ok_or_else(|| KdError::Checkpoint("missing plan line".into()))?;

    let mut store = ParamStore::zeros_init(config, num_sets)?;
    let mut filled = vec![false; store.tensors.ids().count()];
    for (name, shape, offset) in &manifest {
        let id = store.tensors.id_by_name(name).ok_or_else(|| {
            KdError::Checkpoint(format!("unexpected tensor {name:?} for this geometry"))
        })?;
        let tensor = store.tensors.get_mut(id);
        if tensor.shape() != shape.as_slice() {
            return Err(KdError::Checkpoint(format!(
                "tensor {name}: shape {:?} on disk, expected {:?}",
                shape,
                tensor.shape()
            )));
        }
        let n = tensor.numel();
        let end = offset + n * 8;
        if end > payload.len() {
            return Err(KdError::Checkpoint(format!(
                "tensor {name}: payload truncated ({} bytes, need {end})",
                payload.len()
            )));
        }
        let data = tensor.data_mut();
        for (i, chunk) in payload[*offset..end].chunks_exact(8).enumerate() {
            data[i] = f64::from_le_bytes(chunk.try_into().expect("chunks_exact(8)"));
        }
        filled[id.index()] = true;
    }
    if let Some(id) = store.tensors.ids().find(|id| !filled[id.index()]) {
        return Err(KdError::Checkpoint(format!(
            "tensor {:?} missing from checkpoint",
            store.tensors.name(id)
        )));
    }

    let plan = build_sharing_plan(num_sets, mode);
    if plan.len() != config.num_physical_layers {
        return Err(KdError::Checkpoint(format!(
            "plan {mode} over {num_sets} sets gives {} physical layers, config says {}",
            plan.len(),
            config.num_physical_layers
        )));
    }
    Ok((store, plan, mode))
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}
