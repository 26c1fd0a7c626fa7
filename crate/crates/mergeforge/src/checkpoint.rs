//! Binary checkpoints for parameter sets, task vectors and merge weights.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MRGFORG1"
//! version      u32
//! kind         u32      1 = parameters (f32), 2 = task vector (f64), 3 = merge weights (f64)
//! spec_hash    32 bytes SHA-256 of the canonical model spec
//! layer_count  u32
//! label_count  u32, then per label: u32 length + UTF-8
//! per layer:   u32 name length, UTF-8 name, u64 element count, raw values
//! ```
//!
//! A task vector carries its source task as the single label. Merge weights
//! carry their model ids as labels and store one column of `W` per layer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mergeforge_core::model::Layer;
use mergeforge_core::task_vector::DeltaLayer;
use mergeforge_core::{MergeWeights, ModelSpec, ParameterSet, SpecId, TaskVector};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MRGFORG1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Parameters = 1,
    TaskVector = 2,
    MergeWeights = 3,
}

impl Kind {
    fn from_u32(v: u32) -> Option<Kind> {
        match v {
            1 => Some(Kind::Parameters),
            2 => Some(Kind::TaskVector),
            3 => Some(Kind::MergeWeights),
            _ => None,
        }
    }

    fn element_width(self) -> usize {
        match self {
            Kind::Parameters => 4,
            Kind::TaskVector | Kind::MergeWeights => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint holds {found:?}, expected {expected:?}")]
    Kind { expected: Kind, found: Option<Kind> },
    #[error("checkpoint was written for spec {found}, expected {expected}")]
    SpecHash { expected: SpecId, found: SpecId },
    #[error("file truncated in the header")]
    TruncatedHeader,
    #[error("file truncated in layer {layer}")]
    TruncatedLayer { layer: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub kind: Kind,
    pub spec_hash: SpecId,
    pub layer_count: u32,
    pub labels: Vec<String>,
}

/// A decoded layer: name and raw little-endian element bytes.
struct RawLayer<'a> {
    name: String,
    data: &'a [u8],
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode<'a, I>(kind: Kind, spec_hash: SpecId, labels: &[&str], layers: I) -> Vec<u8>
where
    I: ExactSizeIterator<Item = (&'a str, Vec<u8>)>,
{
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&spec_hash.0);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for label in labels {
        put_str(&mut out, label);
    }
    let width = kind.element_width();
    for (name, data) in layers {
        put_str(&mut out, name);
        out.extend_from_slice(&((data.len() / width) as u64).to_le_bytes());
        out.extend_from_slice(&data);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<std::result::Result<String, CheckpointError>> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        Some(
            String::from_utf8(bytes.to_vec())
                .map_err(|_| CheckpointError::Malformed("name is not UTF-8".into())),
        )
    }
}

fn decode(buf: &[u8], expected: Kind) -> std::result::Result<(Header, Vec<RawLayer<'_>>), CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8).ok_or(CheckpointError::TruncatedHeader)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32().ok_or(CheckpointError::TruncatedHeader)?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let raw_kind = r.u32().ok_or(CheckpointError::TruncatedHeader)?;
    let kind = Kind::from_u32(raw_kind);
    if kind != Some(expected) {
        return Err(CheckpointError::Kind { expected, found: kind });
    }
    let spec_hash = SpecId(r.take(32).ok_or(CheckpointError::TruncatedHeader)?.try_into().unwrap());
    let layer_count = r.u32().ok_or(CheckpointError::TruncatedHeader)?;
    let label_count = r.u32().ok_or(CheckpointError::TruncatedHeader)?;
    let mut labels = Vec::new();
    for _ in 0..label_count {
        labels.push(r.string().ok_or(CheckpointError::TruncatedHeader)??);
    }

    let width = expected.element_width();
    let mut layers = Vec::new();
    for layer in 0..layer_count as usize {
        let truncated = CheckpointError::TruncatedLayer { layer };
        let name = r.string().ok_or_else(|| truncated.clone())??;
        let count = r.u64().ok_or_else(|| truncated.clone())?;
        let bytes = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(width))
            .ok_or_else(|| truncated.clone())?;
        let data = r.take(bytes).ok_or(truncated)?;
        layers.push(RawLayer { name, data });
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the last layer",
            buf.len() - r.pos
        )));
    }
    let header = Header {
        version,
        kind: expected,
        spec_hash,
        layer_count,
        labels,
    };
    Ok((header, layers))
}

fn check_spec(header: &Header, spec: &ModelSpec) -> std::result::Result<(), CheckpointError> {
    if header.spec_hash != spec.id() {
        return Err(CheckpointError::SpecHash {
            expected: spec.id(),
            found: header.spec_hash,
        });
    }
    Ok(())
}

fn f32s(data: &[u8]) -> Vec<f32> {
    data.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn f64s(data: &[u8]) -> Vec<f64> {
    data.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode_params(params: &ParameterSet) -> Vec<u8> {
    let layers = params.layers().iter().map(|l| (l.name.as_str(), f32_bytes(&l.values)));
    encode(Kind::Parameters, params.spec_id(), &[], layers)
}

/// Decodes a parameter checkpoint and checks it against `spec`.
pub fn decode_params(buf: &[u8], spec: &ModelSpec) -> Result<ParameterSet, CheckpointError> {
    let (header, layers) = decode(buf, Kind::Parameters)?;
    check_spec(&header, spec)?;
    let layers = layers
        .into_iter()
        .map(|l| Layer {
            name: l.name,
            values: f32s(l.data),
        })
        .collect();
    ParameterSet::from_layers(spec, layers).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn encode_task_vector(tv: &TaskVector) -> Vec<u8> {
    let layers = tv.layers().iter().map(|l| (l.name.as_str(), f64_bytes(&l.values)));
    encode(Kind::TaskVector, tv.spec_id(), &[tv.source_task()], layers)
}

pub fn decode_task_vector(buf: &[u8], spec: &ModelSpec) -> Result<TaskVector, CheckpointError> {
    let (header, layers) = decode(buf, Kind::TaskVector)?;
    check_spec(&header, spec)?;
    let [source] = <[String; 1]>::try_from(header.labels)
        .map_err(|_| CheckpointError::Malformed("task vector needs exactly one source label".into()))?;
    let matches_spec = layers.len() == spec.layer_count()
        && layers
            .iter()
            .zip(spec.layers())
            .all(|(l, d)| l.name == d.name && l.data.len() == 8 * d.param_count());
    if !matches_spec {
        return Err(CheckpointError::Malformed("layers do not match the model spec".into()));
    }
    let layers = layers
        .into_iter()
        .map(|l| DeltaLayer {
            name: l.name,
            values: f64s(l.data),
        })
        .collect();
    TaskVector::from_layers(spec.id(), source, layers).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn encode_weights(weights: &MergeWeights, spec_hash: SpecId) -> Vec<u8> {
    let ids: Vec<&str> = weights.model_ids().iter().map(String::as_str).collect();
    let columns: Vec<Vec<u8>> = (0..weights.n())
        .map(|j| (0..weights.k()).flat_map(|i| weights.get(i, j).to_le_bytes()).collect())
        .collect();
    let layers = weights
        .layer_names()
        .iter()
        .map(String::as_str)
        .zip(columns);
    encode(Kind::MergeWeights, spec_hash, &ids, layers)
}

pub fn decode_weights(buf: &[u8], spec: &ModelSpec) -> Result<MergeWeights, CheckpointError> {
    let (header, layers) = decode(buf, Kind::MergeWeights)?;
    check_spec(&header, spec)?;
    let k = header.labels.len();
    if layers.iter().any(|l| l.data.len() != 8 * k) {
        return Err(CheckpointError::Malformed(format!("every layer column must hold {k} weights")));
    }
    let n = layers.len();
    let mut values = vec![0.0; k * n];
    for (j, layer) in layers.iter().enumerate() {
        for (i, v) in f64s(layer.data).into_iter().enumerate() {
            values[i * n + j] = v;
        }
    }
    let names = layers.into_iter().map(|l| l.name).collect();
    MergeWeights::new(header.labels, names, values).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn wrap(path: &Path) -> impl FnOnce(CheckpointError) -> Error + '_ {
    move |source| Error::Checkpoint {
        path: PathBuf::from(path),
        source,
    }
}

pub fn save_params(params: &ParameterSet, path: &Path) -> Result<()> {
    write_atomic(path, &encode_params(params))
}

pub fn load_params(path: &Path, spec: &ModelSpec) -> Result<ParameterSet> {
    decode_params(&read(path)?, spec).map_err(wrap(path))
}

pub fn save_task_vector(tv: &TaskVector, path: &Path) -> Result<()> {
    write_atomic(path, &encode_task_vector(tv))
}

pub fn load_task_vector(path: &Path, spec: &ModelSpec) -> Result<TaskVector> {
    decode_task_vector(&read(path)?, spec).map_err(wrap(path))
}

pub fn save_weights(weights: &MergeWeights, spec: &ModelSpec, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(weights, spec.id()))
}

pub fn load_weights(path: &Path, spec: &ModelSpec) -> Result<MergeWeights> {
    decode_weights(&read(path)?, spec).map_err(wrap(path))
}

/// Reads only the header, without checking the spec.
pub fn read_header(path: &Path, kind: Kind) -> Result<Header> {
    decode(&read(path)?, kind).map(|(h, _)| h).map_err(wrap(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mergeforge_core::task_vector::compute_named;
    use mergeforge_core::Activation;

    fn spec() -> ModelSpec {
        ModelSpec::mlp(3, &[4], 2, Activation::Relu).unwrap()
    }

    #[test]
    fn params_round_trip() {
        let p = ParameterSet::init(&spec(), 0);
        let bytes = encode_params(&p);
        assert!(decode_params(&bytes, &spec()).unwrap().bit_eq(&p));
        assert_eq!(&bytes[..8], MAGIC);
    }

    #[test]
    fn header_fields() {
        let tv = compute_named(&ParameterSet::init(&spec(), 1), &ParameterSet::init(&spec(), 0), "a").unwrap();
        let bytes = encode_task_vector(&tv);
        let (header, layers) = decode(&bytes, Kind::TaskVector).unwrap();
        assert_eq!(header.layer_count, 4);
        assert_eq!(header.labels, vec!["a".to_string()]);
        assert_eq!(header.spec_hash, spec().id());
        assert_eq!(layers[0].name, "dense0.weight");
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_params(&ParameterSet::init(&spec(), 0));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_params(&bad, &spec()).unwrap_err(), CheckpointError::BadMagic);

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert_eq!(decode_params(&bad, &spec()).unwrap_err(), CheckpointError::Version { found: 9 });

        let other = ModelSpec::mlp(3, &[5], 2, Activation::Relu).unwrap();
        assert!(matches!(
            decode_params(&bytes, &other).unwrap_err(),
            CheckpointError::SpecHash { .. }
        ));

        assert_eq!(
            decode_params(&bytes[..20], &spec()).unwrap_err(),
            CheckpointError::TruncatedHeader
        );
        assert!(matches!(
            decode_task_vector(&bytes, &spec()).unwrap_err(),
            CheckpointError::Kind { .. }
        ));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_params(&long, &spec()).unwrap_err(), CheckpointError::Malformed(_)));
    }

    #[test]
    fn truncation_names_the_layer() {
        let p = ParameterSet::init(&spec(), 0);
        let bytes = encode_params(&p);
        // dense0.weight is 12 f32s, dense0.bias 4; cut into the bias values
        let header_len = 8 + 4 + 4 + 32 + 4 + 4;
        let first = 4 + "dense0.weight".len() + 8 + 12 * 4;
        let cut = header_len + first + 4 + "dense0.bias".len() + 8 + 6;
        assert_eq!(
            decode_params(&bytes[..cut], &spec()).unwrap_err(),
            CheckpointError::TruncatedLayer { layer: 1 }
        );
    }

    #[test]
    fn weights_round_trip() {
        let names: Vec<String> = spec().layers().iter().map(|l| l.name.clone()).collect();
        let values: Vec<f64> = (0..8).map(|v| v as f64 * 0.37 - 1.0).collect();
        let w = MergeWeights::new(vec!["a".into(), "b".into()], names, values).unwrap();
        let bytes = encode_weights(&w, spec().id());
        assert_eq!(decode_weights(&bytes, &spec()).unwrap(), w);
    }
}
