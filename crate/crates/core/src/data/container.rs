//! The GSMK1 binary container.
//!
//! Layout: the six magic bytes `GSMK1\n`, a little-endian `u32` header
//! length, a JSON header, then a payload of little-endian floats. Datasets
//! use 32-bit payloads, checkpoints 64-bit. Every entry in the header names
//! its element offset and shape, so any disagreement between header and
//! payload length is reported as a truncated payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, VideoRecord};
use crate::error::{ContainerError, Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 6] = b"GSMK1\n";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    kind: String,
    dtype: Dtype,
    #[serde(default)]
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_offset: Option<usize>,
}

impl Entry {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn encode(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::invalid("container header too large"))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

fn decode<'a>(bytes: &'a [u8], kind: &str) -> Result<(Header, &'a [u8])> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != b"GSMK" || bytes[5] != b'\n' {
        return Err(ContainerError::BadMagic.into());
    }
    if bytes[4] != MAGIC[4] {
        if bytes[4].is_ascii_digit() {
            return Err(ContainerError::VersionMismatch {
                found: (bytes[4] as char).to_string(),
                expected: VERSION,
            }
            .into());
        }
        return Err(ContainerError::BadMagic.into());
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(ContainerError::TruncatedPayload("missing header length".into()).into());
    }
    let hlen = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < hlen {
        return Err(ContainerError::TruncatedPayload(format!(
            "header declares {hlen} bytes, {} available",
            rest.len()
        ))
        .into());
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| ContainerError::Header(e.to_string()))?;
    if header.version != VERSION {
        return Err(ContainerError::VersionMismatch {
            found: header.version.to_string(),
            expected: VERSION,
        }
        .into());
    }
    if header.kind != kind {
        return Err(ContainerError::Header(format!("expected a {kind} container, found {}", header.kind)).into());
    }
    let payload = &rest[hlen..];
    let width = header.dtype.width();
    if payload.len() % width != 0 {
        return Err(ContainerError::TruncatedPayload(format!(
            "payload of {} bytes is not a whole number of {width}-byte values",
            payload.len()
        ))
        .into());
    }
    Ok((header, payload))
}

fn read_values(payload: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    }
}

/// Checks that the entries tile `0..total` exactly, in order.
fn check_layout(spans: &[(String, usize, usize)], total: usize) -> Result<()> {
    let mut cursor = 0;
    for (name, offset, len) in spans {
        if *offset != cursor {
            return Err(ContainerError::Header(format!("{name}: offset {offset}, expected {cursor}")).into());
        }
        cursor += len;
    }
    if cursor != total {
        return Err(ContainerError::TruncatedPayload(format!(
            "header declares {cursor} values, payload holds {total}"
        ))
        .into());
    }
    Ok(())
}

/// Serializes named `f64` tensors with free-form JSON metadata.
pub fn encode_tensors(meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            label: None,
            class: None,
            gt_offset: None,
        });
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: VERSION,
        kind: "checkpoint".into(),
        dtype: Dtype::F64,
        meta,
        entries,
    };
    encode(&header, &payload)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let (header, payload) = decode(bytes, "checkpoint")?;
    let values = read_values(payload, header.dtype);
    let spans: Vec<_> = header
        .entries
        .iter()
        .map(|e| (e.name.clone(), e.offset, e.numel()))
        .collect();
    check_layout(&spans, values.len())?;
    let mut out = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        let data = values[e.offset..e.offset + e.numel()].to_vec();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((header.meta, out))
}

pub fn save_tensors(path: impl AsRef<Path>, meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, encode_tensors(meta, tensors)?)?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    decode_tensors(&fs::read(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    class_names: Vec<String>,
    d_feat: usize,
}

fn to_f32(v: f64, what: &str) -> Result<f32> {
    let f = v as f32;
    if f as f64 != v && !(v.is_nan() && f.is_nan()) {
        return Err(Error::invalid(format!("{what}: value {v} is not representable as f32")));
    }
    Ok(f)
}

/// Serializes a dataset. Feature values must be exactly representable in
/// 32 bits so the round trip is lossless.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(ds.records.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for r in &ds.records {
        let mut push = |v: f64| -> Result<()> {
            payload.extend_from_slice(&to_f32(v, &r.id)?.to_le_bytes());
            Ok(())
        };
        for &v in r.features.data() {
            push(v)?;
        }
        let feat_len = r.features.len();
        let gt_offset = match &r.snippet_gt {
            Some(gt) => {
                for &g in gt {
                    push(g as f64)?;
                }
                Some(offset + feat_len)
            }
            None => None,
        };
        entries.push(Entry {
            name: r.id.clone(),
            shape: r.features.shape().to_vec(),
            offset,
            label: Some(u8::from(r.abnormal)),
            class: r.class_id,
            gt_offset,
        });
        offset += feat_len + r.snippet_gt.as_ref().map_or(0, Vec::len);
    }
    let header = Header {
        version: VERSION,
        kind: "dataset".into(),
        dtype: Dtype::F32,
        meta: serde_json::to_value(DatasetMeta {
            class_names: ds.class_names.clone(),
            d_feat: ds.d_feat,
        })?,
        entries,
    };
    encode(&header, &payload)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (header, payload) = decode(bytes, "dataset")?;
    let meta: DatasetMeta =
        serde_json::from_value(header.meta).map_err(|e| ContainerError::Header(e.to_string()))?;
    let values = read_values(payload, header.dtype);
    let mut spans = Vec::new();
    for e in &header.entries {
        if e.shape.len() != 2 {
            return Err(ContainerError::Header(format!("{}: features must be 2-D", e.name)).into());
        }
        spans.push((e.name.clone(), e.offset, e.numel()));
        if let Some(g) = e.gt_offset {
            spans.push((format!("{} ground truth", e.name), g, e.shape[0]));
        }
    }
    check_layout(&spans, values.len())?;
    let mut records = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        let label = e
            .label
            .ok_or_else(|| ContainerError::Header(format!("{}: missing label", e.name)))?;
        if label > 1 {
            return Err(ContainerError::Header(format!("{}: label {label} not in {{0, 1}}", e.name)).into());
        }
        let features = Tensor::new(e.shape.clone(), values[e.offset..e.offset + e.numel()].to_vec())?;
        let snippet_gt = e.gt_offset.map(|g| {
            values[g..g + e.shape[0]]
                .iter()
                .map(|&v| u8::from(v != 0.0))
                .collect()
        });
        records.push(VideoRecord {
            id: e.name.clone(),
            features,
            abnormal: label == 1,
            class_id: e.class,
            snippet_gt,
        });
    }
    Ok(Dataset {
        class_names: meta.class_names,
        d_feat: meta.d_feat,
        records,
    })
}

pub fn save_container(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
