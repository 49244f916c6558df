//! Checkpoint file: a plain-text manifest followed by a little-endian,
//! row-major tensor payload.
//!
//! ```text
//! tsalign-checkpoint 1
//! stage alignment
//! dtype f32
//! config {"t_in":32,...}
//! tensor encoder.conv.weight encoder trainable 16x8x3 0 1536
//! ...
//! payload 123456
//! <payload bytes>
//! ```
//!
//! Tensor lines carry name, group, freeze flag, shape, byte offset into the
//! payload and byte length.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Stage;
use crate::model::{Model, ModelConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "tsalign-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: Stage,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC} {}", self.version).unwrap();
        writeln!(out, "stage {}", self.stage.as_str()).unwrap();
        writeln!(out, "dtype {}", self.dtype).unwrap();
        writeln!(
            out,
            "config {}",
            serde_json::to_string(&self.config).expect("config serializes")
        )
        .unwrap();
        for t in &self.tensors {
            let shape = t.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            writeln!(
                out,
                "tensor {} {} {} {} {} {}",
                t.name,
                t.group,
                if t.trainable { "trainable" } else { "frozen" },
                if shape.is_empty() { "scalar".into() } else { shape },
                t.offset,
                t.bytes
            )
            .unwrap();
        }
        writeln!(out, "payload {}", self.payload_bytes).unwrap();
        out
    }

    fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key} line")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected {key} line, found {line:?}")))
        };
        let version: u32 = field(MAGIC)?
            .parse()
            .map_err(|_| bad("unreadable format version".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let stage = field("stage")?.parse()?;
        let dtype = field("dtype")?;
        let config: ModelConfig = serde_json::from_str(&field("config")?).map_err(|e| bad(format!("config: {e}")))?;
        let mut tensors = Vec::new();
        let payload_bytes;
        loop {
            let line = lines
                .next()
                .ok_or_else(|| bad("manifest ends before payload line".into()))?;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["tensor", name, group, flag, shape, offset, bytes] => {
                    let num = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| bad(format!("bad number {s:?} in {line:?}")))
                    };
                    let shape = if *shape == "scalar" {
                        Vec::new()
                    } else {
                        shape.split('x').map(num).collect::<Result<Vec<_>>>()?
                    };
                    tensors.push(TensorEntry {
                        name: name.to_string(),
                        group: group.parse()?,
                        trainable: match *flag {
                            "trainable" => true,
                            "frozen" => false,
                            other => return Err(bad(format!("bad freeze flag {other:?}"))),
                        },
                        shape,
                        offset: num(offset)?,
                        bytes: num(bytes)?,
                    });
                }
                ["payload", n] => {
                    payload_bytes = n.parse().map_err(|_| bad(format!("bad payload size {n:?}")))?;
                    break;
                }
                _ => return Err(bad(format!("unrecognized manifest line {line:?}"))),
            }
        }
        Ok(Self {
            version,
            stage,
            dtype,
            config,
            tensors,
            payload_bytes,
        })
    }
}

/// Writes every tensor of `model` with its freeze flag.
pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>, stage: Stage) -> Result<Manifest> {
    let path = path.as_ref();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in model.params.iter() {
        let offset = payload.len();
        // iter() on a standard-layout array is row-major
        let contiguous = p.value.as_standard_layout();
        for &v in contiguous.iter() {
            v.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            trainable: p.trainable,
            shape: p.value.shape().to_vec(),
            offset,
            bytes: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        stage,
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        tensors,
        payload_bytes: payload.len(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(manifest.render().as_bytes())
        .and_then(|_| file.write_all(&payload))
        .map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

fn split_file(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    // the manifest ends with the newline after the "payload N" line
    let mut pos = 0;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("no payload line found".into()))?;
        let line = &bytes[pos..pos + nl];
        pos += nl + 1;
        if line.starts_with(b"payload ") {
            break;
        }
    }
    let text = std::str::from_utf8(&bytes[..pos]).map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let manifest = Manifest::parse(text)?;
    let payload = &bytes[pos..];
    if payload.len() != manifest.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    Ok((manifest, payload))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_file(&bytes)?.0)
}

/// Human-readable manifest listing.
pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<String> {
    let m = read_manifest(path)?;
    let mut out = format!(
        "format v{}  stage {}  dtype {}  layers {}  d_model {}  payload {} bytes\n",
        m.version,
        m.stage.as_str(),
        m.dtype,
        m.config.backbone.layers,
        m.config.backbone.d_model,
        m.payload_bytes
    );
    for t in &m.tensors {
        let shape = format!("{:?}", t.shape);
        writeln!(
            out,
            "{:<36} {:<12} {:<16} {}",
            t.name,
            t.group.as_str(),
            shape,
            if t.trainable { "trainable" } else { "frozen" }
        )
        .unwrap();
    }
    Ok(out)
}

fn decode<T: Scalar>(dtype: &str, raw: &[u8]) -> Result<Vec<T>> {
    match dtype {
        "f32" => Ok(raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect()),
        "f64" => Ok(raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect()),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

fn block_index(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?.split('.').next()?.parse().ok()
}

/// Loads blocks `0..first_layers` (all blocks when `None`) plus everything
/// outside the block stack. Values are bit-identical when the file's dtype
/// matches `T`.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>, first_layers: Option<usize>) -> Result<(Model<T>, Manifest)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, payload) = split_file(&bytes)?;
    let available = manifest.config.backbone.layers;
    let layers = first_layers.unwrap_or(available);
    if layers > available {
        return Err(Error::Checkpoint(format!(
            "requested {layers} blocks but the checkpoint holds only {available}"
        )));
    }
    let mut config = manifest.config.clone();
    config.backbone.layers = layers;

    // A freshly built model fixes the expected names and shapes.
    let skeleton = Model::<T>::new(config.clone(), 0)?;
    let mut store = ParamStore::<T>::new();
    for entry in &manifest.tensors {
        if block_index(&entry.name).is_some_and(|i| i >= layers) {
            continue;
        }
        let expected = skeleton
            .params
            .id(&entry.name)
            .map(|id| skeleton.params.get(id))
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
        if entry.shape != expected.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                expected.value.shape()
            )));
        }
        let end = entry.offset + entry.bytes;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} runs past the payload",
                entry.name
            )));
        }
        let values = decode::<T>(&manifest.dtype, &payload[entry.offset..end])?;
        let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|_| Error::Checkpoint(format!("tensor {} byte length does not match its shape", entry.name)))?;
        let id = store.push(entry.name.clone(), entry.group, value)?;
        store.get_mut(id).trainable = entry.trainable;
    }
    if let Some((_, missing)) = skeleton.params.iter().find(|(_, p)| store.id(&p.name).is_none()) {
        return Err(Error::Checkpoint(format!("missing tensor {}", missing.name)));
    }
    Ok((Model::from_store(config, store)?, manifest))
}
