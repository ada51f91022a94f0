//! On-disk model checkpoints.
//!
//! A checkpoint is a directory with two files:
//!
//! * `manifest.txt`: one `key=value` pair per line. Keys are
//!   `format_version`, `element_type` (`f32` or `f64`), `config.<field>`
//!   for every model config field (JSON-encoded value), `meta.<key>` for
//!   free-form run state, `array_count`, and for each array `i`:
//!   `array.<i>.name`, `array.<i>.kind` (`param`, `buffer` or `state`),
//!   `array.<i>.shape` (comma-separated), `array.<i>.offset` and
//!   `array.<i>.bytes` (byte range in the blob).
//! * `arrays.bin`: every array in manifest order, little-endian, no padding.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Float, Tensor, ELEMENT_TYPE};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "arrays.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArrayKind {
    Param,
    Buffer,
    /// Optimizer or other training state.
    State,
}

impl ArrayKind {
    fn as_str(self) -> &'static str {
        match self {
            ArrayKind::Param => "param",
            ArrayKind::Buffer => "buffer",
            ArrayKind::State => "state",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "param" => Ok(ArrayKind::Param),
            "buffer" => Ok(ArrayKind::Buffer),
            "state" => Ok(ArrayKind::State),
            other => Err(Error::Checkpoint(format!("unknown array kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub kind: ArrayKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub arrays: Vec<NamedArray>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn arrays_of(&self, kind: ArrayKind) -> impl Iterator<Item = &NamedArray> {
        self.arrays.iter().filter(move |a| a.kind == kind)
    }

    pub fn manifest(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "format_version={FORMAT_VERSION}");
        let _ = writeln!(out, "element_type={ELEMENT_TYPE}");
        let serde_json::Value::Object(fields) = serde_json::to_value(&self.config)? else {
            unreachable!("model config serializes to an object");
        };
        for (k, v) in fields {
            let _ = writeln!(out, "config.{k}={v}");
        }
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("meta entry {k:?} cannot be written")));
            }
            let _ = writeln!(out, "meta.{k}={v}");
        }
        let _ = writeln!(out, "array_count={}", self.arrays.len());
        let width = std::mem::size_of::<Float>();
        let mut offset = 0;
        for (i, a) in self.arrays.iter().enumerate() {
            let shape: Vec<String> = a.tensor.shape().iter().map(usize::to_string).collect();
            let bytes = a.tensor.numel() * width;
            let _ = writeln!(out, "array.{i}.name={}", a.name);
            let _ = writeln!(out, "array.{i}.kind={}", a.kind.as_str());
            let _ = writeln!(out, "array.{i}.shape={}", shape.join(","));
            let _ = writeln!(out, "array.{i}.offset={offset}");
            let _ = writeln!(out, "array.{i}.bytes={bytes}");
            offset += bytes;
        }
        Ok(out)
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for a in &self.arrays {
            for v in a.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), self.manifest()?)?;
        fs::write(dir.join(BLOB_FILE), self.blob())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        Self::parse(&manifest, &blob)
    }

    pub fn parse(manifest: &str, blob: &[u8]) -> Result<Self> {
        let mut keys = BTreeMap::new();
        for (n, line) in manifest.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("manifest line {}: missing '='", n + 1)))?;
            keys.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            keys.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("manifest is missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("{k} is not a number")))
        };

        let version: u32 = get("format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let width = match get("element_type")? {
            "f64" => 8,
            "f32" => 4,
            other => return Err(Error::Checkpoint(format!("unknown element type {other:?}"))),
        };

        let mut config = serde_json::Map::new();
        let mut meta = BTreeMap::new();
        for (k, v) in &keys {
            if let Some(field) = k.strip_prefix("config.") {
                config.insert(field.to_string(), serde_json::from_str(v)?);
            } else if let Some(field) = k.strip_prefix("meta.") {
                meta.insert(field.to_string(), v.clone());
            }
        }
        let config: ModelConfig = serde_json::from_value(serde_json::Value::Object(config))?;

        let count = num("array_count")?;
        let mut arrays = Vec::with_capacity(count);
        for i in 0..count {
            let name = get(&format!("array.{i}.name"))?.to_string();
            let kind = ArrayKind::parse(get(&format!("array.{i}.kind"))?)?;
            let shape = get(&format!("array.{i}.shape"))?
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| Error::Checkpoint(format!("array {i}: bad shape")))?;
            let offset = num(&format!("array.{i}.offset"))?;
            let bytes = num(&format!("array.{i}.bytes"))?;
            let numel: usize = shape.iter().product();
            if bytes != numel * width || offset + bytes > blob.len() {
                return Err(Error::Checkpoint(format!("array {i} ({name}): byte range does not fit")));
            }
            let raw = &blob[offset..offset + bytes];
            let data: Vec<Float> = if width == 8 {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Float)
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
                    .collect()
            };
            arrays.push(NamedArray {
                name,
                kind,
                tensor: Tensor::new(shape, data)?,
            });
        }
        Ok(Checkpoint { config, arrays, meta })
    }
}

impl Model {
    /// Parameters and batch-norm statistics, in creation order.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let store = self.store();
        let arrays = store
            .params()
            .iter()
            .map(|(n, t)| (n, t, ArrayKind::Param))
            .chain(store.buffers().iter().map(|(n, t)| (n, t, ArrayKind::Buffer)))
            .map(|(name, tensor, kind)| NamedArray {
                name: name.clone(),
                kind,
                tensor: tensor.clone(),
            })
            .collect();
        Checkpoint {
            config: self.config().clone(),
            arrays,
            meta: BTreeMap::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(ckpt.config.clone())?;
        model.load_weights(ckpt)?;
        Ok(model)
    }

    /// Copies weights from a checkpoint whose architecture matches.
    pub fn load_weights(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let check = |expected: &[(String, Tensor)], got: Vec<&NamedArray>| -> Result<Vec<Tensor>> {
            if expected.len() != got.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {} arrays, checkpoint has {}",
                    expected.len(),
                    got.len()
                )));
            }
            expected
                .iter()
                .zip(got)
                .map(|((name, _), a)| {
                    if *name == a.name {
                        Ok(a.tensor.clone())
                    } else {
                        Err(Error::Checkpoint(format!("expected array {name}, found {}", a.name)))
                    }
                })
                .collect()
        };
        let params = check(self.store().params(), ckpt.arrays_of(ArrayKind::Param).collect())?;
        let buffers = check(self.store().buffers(), ckpt.arrays_of(ArrayKind::Buffer).collect())?;
        self.store_mut().load_values(params, buffers)
    }
}
