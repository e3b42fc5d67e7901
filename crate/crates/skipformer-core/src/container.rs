//! Binary artifact formats.
//!
//! Two tiny bit-exact container formats live here:
//!
//! - **MLLW** — model weights and pruning masks. Layout:
//!   magic `"MLLW"` | format version u32 LE (= 1) | header length u64 LE |
//!   UTF-8 JSON header (config fields, a dtype note, and an ordered tensor
//!   table of `{name, shape, byte_offset}`) | raw payload. Payload values are
//!   32-bit LE floats (dtype `"f32"`) or single bytes (dtype `"mask-u8"`),
//!   row-major, offsets relative to the payload start, tensors contiguous.
//!
//! - **PEMB** — pre-computed perceptual prompt rows. Layout:
//!   magic `"PEMB"` | version u32 LE (= 1) | rows u32 LE | dim u32 LE |
//!   rows×dim 32-bit LE floats, row-major.
//!
//! Readers validate everything they touch — magic, version, header shape,
//! tensor table consistency against the declared config, payload length —
//! and name the offending tensor or field in the error. A save → load round
//! trip is bitwise identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockWeights, LinearKind, Model, ModelConfig};
use crate::numerics::Matrix;

pub const MLLW_MAGIC: [u8; 4] = *b"MLLW";
pub const MLLW_VERSION: u32 = 1;
pub const PEMB_MAGIC: [u8; 4] = *b"PEMB";
pub const PEMB_VERSION: u32 = 1;

/// Weight payload dtype tag.
pub const DTYPE_F32: &str = "f32";
/// Mask payload dtype tag (one byte per element, 0 or 1).
pub const DTYPE_MASK_U8: &str = "mask-u8";

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    config: ModelConfig,
    dtype: String,
    tensors: Vec<TensorDesc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

/// One tensor as read back from a container, bytes still raw.
pub(crate) struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

fn elem_size(dtype: &str) -> usize {
    match dtype {
        DTYPE_MASK_U8 => 1,
        _ => 4,
    }
}

fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Writes a container; offsets are assigned from the given tensor order.
pub(crate) fn write_container(
    path: &Path,
    config: &ModelConfig,
    dtype: &str,
    tensors: &[(String, Vec<usize>, Vec<u8>)],
) -> Result<()> {
    let mut descs = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, bytes) in tensors {
        let expected = shape.iter().product::<usize>() * elem_size(dtype);
        debug_assert_eq!(bytes.len(), expected, "tensor {name} byte length");
        descs.push(TensorDesc {
            name: name.clone(),
            shape: shape.clone(),
            byte_offset: offset,
        });
        offset += bytes.len() as u64;
    }
    let header = ContainerHeader {
        config: *config,
        dtype: dtype.to_string(),
        tensors: descs,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::format(path_str(path), format!("header serialization: {e}")))?;
    let mut out =
        Vec::with_capacity(16 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&MLLW_MAGIC);
    out.extend_from_slice(&MLLW_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, _, bytes) in tensors {
        out.extend_from_slice(bytes);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path_str(path), e))
}

/// Reads and structurally validates a container: magic, version, header
/// JSON, dtype, offset contiguity, and exact payload length.
pub(crate) fn read_container(
    path: &Path,
    expected_dtype: &str,
) -> Result<(ModelConfig, Vec<RawTensor>)> {
    let p = path_str(path);
    let data = std::fs::read(path).map_err(|e| Error::io(p.clone(), e))?;
    if data.len() < 16 {
        return Err(Error::format(p, "file truncated before header"));
    }
    if data[0..4] != MLLW_MAGIC {
        return Err(Error::format(p, format!("bad magic {:?}", &data[0..4])));
    }
    let version = u32::from_le_bytes([data[4], data[5], data[6], data[7]]);
    if version != MLLW_VERSION {
        return Err(Error::format(
            p,
            format!("unsupported format version {version} (expected {MLLW_VERSION})"),
        ));
    }
    let header_len = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= data.len())
        .ok_or_else(|| Error::format(p.clone(), "header length exceeds file size"))?;
    let header: ContainerHeader = serde_json::from_slice(&data[16..payload_start])
        .map_err(|e| Error::format(p.clone(), format!("header JSON: {e}")))?;
    if header.dtype != expected_dtype {
        return Err(Error::format(
            p,
            format!("dtype {:?} (expected {expected_dtype:?})", header.dtype),
        ));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::format(p.clone(), format!("header config: {e}")))?;
    let payload = &data[payload_start..];
    let esize = elem_size(&header.dtype);
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0u64;
    for desc in &header.tensors {
        if desc.byte_offset != offset {
            return Err(Error::format(
                p,
                format!(
                    "tensor {}: offset {} breaks contiguity (expected {offset})",
                    desc.name, desc.byte_offset
                ),
            ));
        }
        let len = desc.shape.iter().product::<usize>() * esize;
        let end = offset as usize + len;
        if end > payload.len() {
            return Err(Error::format(
                p,
                format!("truncated data for tensor {}", desc.name),
            ));
        }
        tensors.push(RawTensor {
            name: desc.name.clone(),
            shape: desc.shape.clone(),
            bytes: payload[offset as usize..end].to_vec(),
        });
        offset = end as u64;
    }
    if offset as usize != payload.len() {
        return Err(Error::format(
            p,
            format!(
                "trailing bytes after tensor data ({} past declared end)",
                payload.len() - offset as usize
            ),
        ));
    }
    Ok((header.config, tensors))
}

/// Canonical model tensor table derived from a config: names and shapes in
/// serialization order. Both the writer and the loader use this, so any
/// header drift from the declared config is caught tensor-by-tensor.
pub(crate) fn model_tensor_table(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut table = Vec::new();
    for i in 0..cfg.n_layers {
        table.push((format!("blocks.{i}.ln1_gamma"), vec![d]));
        table.push((format!("blocks.{i}.ln1_beta"), vec![d]));
        table.push((format!("blocks.{i}.wq"), vec![d, d]));
        table.push((format!("blocks.{i}.wk"), vec![d, d]));
        table.push((format!("blocks.{i}.wv"), vec![d, d]));
        table.push((format!("blocks.{i}.wo"), vec![d, d]));
        table.push((format!("blocks.{i}.ln2_gamma"), vec![d]));
        table.push((format!("blocks.{i}.ln2_beta"), vec![d]));
        table.push((format!("blocks.{i}.fc1"), vec![d, cfg.d_ff]));
        table.push((format!("blocks.{i}.fc1_bias"), vec![cfg.d_ff]));
        table.push((format!("blocks.{i}.fc2"), vec![cfg.d_ff, d]));
        table.push((format!("blocks.{i}.fc2_bias"), vec![d]));
    }
    table.push(("token_embedding".into(), vec![cfg.vocab_size, d]));
    table.push(("position_embedding".into(), vec![cfg.max_positions, d]));
    table.push(("final_ln_gamma".into(), vec![d]));
    table.push(("final_ln_beta".into(), vec![d]));
    table.push(("unembedding".into(), vec![d, cfg.vocab_size]));
    table
}

/// Canonical mask tensor table: the six pruned linears per block, shapes in
/// model orientation (input-dim × output-dim).
pub(crate) fn mask_tensor_table(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut table = Vec::new();
    for i in 0..cfg.n_layers {
        for kind in LinearKind::ALL {
            let shape = match kind {
                LinearKind::Fc1 => vec![d, cfg.d_ff],
                LinearKind::Fc2 => vec![cfg.d_ff, d],
                _ => vec![d, d],
            };
            table.push((format!("blocks.{i}.{}", kind.name()), shape));
        }
    }
    table
}

/// Checks a loaded tensor list against a canonical table; errors name the
/// first mismatching tensor.
pub(crate) fn check_table(
    path: &Path,
    loaded: &[RawTensor],
    expected: &[(String, Vec<usize>)],
) -> Result<()> {
    let p = path_str(path);
    for (i, (name, shape)) in expected.iter().enumerate() {
        match loaded.get(i) {
            None => {
                return Err(Error::format(p, format!("missing tensor {name}")));
            }
            Some(t) if t.name != *name => {
                return Err(Error::format(
                    p,
                    format!("tensor {i}: expected {name}, found {}", t.name),
                ));
            }
            Some(t) if t.shape != *shape => {
                return Err(Error::format(
                    p,
                    format!("tensor {name}: shape {:?} (expected {shape:?})", t.shape),
                ));
            }
            Some(_) => {}
        }
    }
    if loaded.len() > expected.len() {
        return Err(Error::format(
            p,
            format!("unexpected tensor {}", loaded[expected.len()].name),
        ));
    }
    Ok(())
}

fn model_tensor_data(model: &Model) -> Vec<Vec<f32>> {
    let mut data = Vec::new();
    for b in &model.blocks {
        data.push(b.ln1_gamma.clone());
        data.push(b.ln1_beta.clone());
        data.push(b.wq.data().to_vec());
        data.push(b.wk.data().to_vec());
        data.push(b.wv.data().to_vec());
        data.push(b.wo.data().to_vec());
        data.push(b.ln2_gamma.clone());
        data.push(b.ln2_beta.clone());
        data.push(b.fc1.data().to_vec());
        data.push(b.fc1_bias.clone());
        data.push(b.fc2.data().to_vec());
        data.push(b.fc2_bias.clone());
    }
    data.push(model.token_embedding.data().to_vec());
    data.push(model.position_embedding.data().to_vec());
    data.push(model.final_ln_gamma.clone());
    data.push(model.final_ln_beta.clone());
    data.push(model.unembedding.data().to_vec());
    data
}

/// Saves model weights in the MLLW container.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let table = model_tensor_table(&model.config);
    let data = model_tensor_data(model);
    debug_assert_eq!(table.len(), data.len());
    let tensors: Vec<(String, Vec<usize>, Vec<u8>)> = table
        .into_iter()
        .zip(data)
        .map(|((name, shape), values)| (name, shape, f32s_to_bytes(&values)))
        .collect();
    write_container(path, &model.config, DTYPE_F32, &tensors)
}

/// Loads model weights, validating the tensor table against the declared
/// config; a save → load round trip is bitwise identical.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let (cfg, tensors) = read_container(path, DTYPE_F32)?;
    check_table(path, &tensors, &model_tensor_table(&cfg))?;
    let mut values = tensors.iter().map(|t| bytes_to_f32s(&t.bytes));
    let mut next_vec = move || values.next().expect("table length checked");
    let mut next_mat = |rows: usize, cols: usize| -> Matrix {
        Matrix::new(rows, cols, next_vec()).expect("shape checked against table")
    };
    let d = cfg.d_model;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        blocks.push(BlockWeights {
            ln1_gamma: next_mat(1, d).data().to_vec(),
            ln1_beta: next_mat(1, d).data().to_vec(),
            wq: next_mat(d, d),
            wk: next_mat(d, d),
            wv: next_mat(d, d),
            wo: next_mat(d, d),
            ln2_gamma: next_mat(1, d).data().to_vec(),
            ln2_beta: next_mat(1, d).data().to_vec(),
            fc1: next_mat(d, cfg.d_ff),
            fc1_bias: next_mat(1, cfg.d_ff).data().to_vec(),
            fc2: next_mat(cfg.d_ff, d),
            fc2_bias: next_mat(1, d).data().to_vec(),
        });
    }
    Ok(Model {
        config: cfg,
        blocks,
        token_embedding: next_mat(cfg.vocab_size, d),
        position_embedding: next_mat(cfg.max_positions, d),
        final_ln_gamma: next_mat(1, d).data().to_vec(),
        final_ln_beta: next_mat(1, d).data().to_vec(),
        unembedding: next_mat(d, cfg.vocab_size),
    })
}

/// Saves perceptual prompt rows in the PEMB format.
pub fn save_perceptual(rows: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + rows.data().len() * 4);
    out.extend_from_slice(&PEMB_MAGIC);
    out.extend_from_slice(&PEMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(rows.cols() as u32).to_le_bytes());
    out.extend_from_slice(&f32s_to_bytes(rows.data()));
    std::fs::write(path, out).map_err(|e| Error::io(path_str(path), e))
}

/// Loads perceptual prompt rows. The caller checks `cols() == d_model`
/// against its model; this validates everything structural.
pub fn load_perceptual(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let p = path_str(path);
    let data = std::fs::read(path).map_err(|e| Error::io(p.clone(), e))?;
    if data.len() < 16 {
        return Err(Error::format(p, "file truncated before header"));
    }
    if data[0..4] != PEMB_MAGIC {
        return Err(Error::format(p, format!("bad magic {:?}", &data[0..4])));
    }
    let version = u32::from_le_bytes([data[4], data[5], data[6], data[7]]);
    if version != PEMB_VERSION {
        return Err(Error::format(
            p,
            format!("unsupported format version {version} (expected {PEMB_VERSION})"),
        ));
    }
    let rows = u32::from_le_bytes([data[8], data[9], data[10], data[11]]) as usize;
    let dim = u32::from_le_bytes([data[12], data[13], data[14], data[15]]) as usize;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(p.clone(), "rows × dim overflows"))?;
    let payload = &data[16..];
    if payload.len() != expected {
        return Err(Error::format(
            p,
            format!(
                "payload length {} does not match rows {rows} × dim {dim} × 4 = {expected}",
                payload.len()
            ),
        ));
    }
    Matrix::new(rows, dim, bytes_to_f32s(payload))
}
