//! Checkpoint files: 7-byte magic, u32 header length, JSON header with the
//! tensor directory, then concatenated f32 little-endian payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::optim::Moments;
use crate::engine::{AdamState, ParamSet, Shape5, Tensor5};
use crate::error::{Error, Result};
use crate::regnet::RegConfig;
use crate::rem::RemConfig;

pub const CKPT_MAGIC: &[u8; 7] = b"RCKPT1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 5],
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    rem: Option<RemConfig>,
    reg: Option<RegConfig>,
    iteration: u64,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub rem: Option<RemConfig>,
    pub reg: Option<RegConfig>,
    pub iteration: u64,
    /// Free-form training state (history, best metric, optimizer scalars).
    pub meta: serde_json::Value,
    /// Named tensors in insertion order.
    pub tensors: Vec<(String, Tensor5<f32>)>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            rem: None,
            reg: None,
            iteration: 0,
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor5<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor5<f32>) -> Result<()> {
        let name = name.into();
        if self.tensor(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        self.tensors.push((name, t));
        Ok(())
    }

    /// Stores every param of `params` as `<prefix>/<name>`.
    pub fn add_params(&mut self, prefix: &str, params: &ParamSet<f32>) -> Result<()> {
        for p in params.iter() {
            self.push_tensor(format!("{prefix}/{}", p.name), p.value.clone())?;
        }
        Ok(())
    }

    /// Loads `<prefix>/<name>` into every param; missing or misshapen
    /// tensors are errors.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet<f32>) -> Result<()> {
        params.load_values(|name| self.tensor(&format!("{prefix}/{name}")).cloned())
    }

    /// Stores Adam moments as `adam.m/<prefix>/<name>` and
    /// `adam.v/<prefix>/<name>`; scalars go into `meta["adam"][prefix]`.
    pub fn add_adam(&mut self, prefix: &str, state: &AdamState<f32>) -> Result<()> {
        for (name, mom) in &state.moments {
            self.push_tensor(format!("adam.m/{prefix}/{name}"), mom.m.clone())?;
            self.push_tensor(format!("adam.v/{prefix}/{name}"), mom.v.clone())?;
        }
        let scalars = serde_json::json!({
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "step": state.step,
        });
        if !self.meta.is_object() {
            self.meta = serde_json::json!({});
        }
        let adam = self
            .meta
            .as_object_mut()
            .expect("object")
            .entry("adam")
            .or_insert_with(|| serde_json::json!({}));
        if !adam.is_object() {
            *adam = serde_json::json!({});
        }
        adam.as_object_mut()
            .expect("object")
            .insert(prefix.to_string(), scalars);
        Ok(())
    }

    pub fn load_adam(&self, prefix: &str) -> Result<AdamState<f32>> {
        let scalars = self
            .meta
            .get("adam")
            .and_then(|a| a.get(prefix))
            .ok_or_else(|| Error::Checkpoint(format!("no optimizer state stored for {prefix}")))?;
        let num = |k: &str| {
            scalars
                .get(k)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::Checkpoint(format!("optimizer field {k} missing")))
        };
        let mut state = AdamState::new(num("beta1")?, num("beta2")?, num("eps")?);
        state.step = scalars
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("optimizer step missing".into()))?;
        let m_prefix = format!("adam.m/{prefix}/");
        for (name, m) in &self.tensors {
            if let Some(param) = name.strip_prefix(&m_prefix) {
                let v = self
                    .tensor(&format!("adam.v/{prefix}/{param}"))
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("second moment of {param} missing"))
                    })?;
                state.moments.insert(
                    param.to_string(),
                    Moments {
                        m: m.clone(),
                        v: v.clone(),
                    },
                );
            }
        }
        Ok(state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().0,
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            rem: self.rem,
            reg: self.reg,
            iteration: self.iteration,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
        let hlen =
            u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(11 + json.len() + offset as usize);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&hlen.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            t.data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 11 || &bytes[..7] != CKPT_MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let hlen = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes")) as usize;
        let body = &bytes[11..];
        if body.len() < hlen {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: hlen,
                found: body.len(),
            });
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Checkpoint(format!("header decoding: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_end = 0usize;
        for e in &header.tensors {
            let shape = Shape5(e.shape);
            let start = e.offset as usize;
            let end = start + 4 * shape.numel();
            if end > payload.len() {
                return Err(Error::Truncated {
                    path: path.to_path_buf(),
                    expected: end,
                    found: payload.len(),
                });
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor5::from_vec(shape, data)?));
            expected_end = expected_end.max(end);
        }
        if payload.len() != expected_end {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after tensor payloads",
                payload.len() - expected_end
            )));
        }
        Ok(Self {
            rem: header.rem,
            reg: header.reg,
            iteration: header.iteration,
            meta: header.meta,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(path, &bytes)
}
