//! "RSTN-W v1" weight files: a JSON manifest plus a raw little-endian `f64` payload.
//!
//! The manifest names every tensor with its shape and byte offset into the
//! payload (`data-file`, resolved next to the manifest). Tensors are stored
//! back to back in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    Architecture, BackboneParams, ConvParams, ModelBundle, SaliencyConfig, SaliencyParams,
};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;
use crate::volume::Axis;

pub const FORMAT: &str = "RSTN-W";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleKind {
    /// Jointly trained coarse, fine and saliency parameters.
    Joint,
    /// Independently trained coarse and fine networks.
    Stagewise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    pub version: u32,
    pub kind: BundleKind,
    pub viewpoint: Axis,
    pub architecture: Architecture,
    pub saliency: Option<SaliencyConfig>,
    pub dtype: String,
    #[serde(rename = "byte-order")]
    pub byte_order: String,
    #[serde(rename = "data-file")]
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory contents of a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub kind: BundleKind,
    pub viewpoint: Axis,
    pub architecture: Architecture,
    pub saliency: Option<SaliencyConfig>,
    pub tensors: Vec<(String, Tensor)>,
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl WeightFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin = payload_path(path);
        let manifest = WeightManifest {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind,
            viewpoint: self.viewpoint,
            architecture: self.architecture.clone(),
            saliency: self.saliency,
            dtype: "f64".into(),
            byte_order: "little".into(),
            data_file: bin
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors: entries,
        };
        fs::write(&bin, &payload).map_err(|e| Error::io(&bin, e))?;
        fs::write(path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: WeightManifest = serde_json::from_slice(&text)
            .map_err(|e| format_err(path, format!("bad manifest: {e}")))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(format_err(
                path,
                format!(
                    "expected {FORMAT} v{VERSION}, found {} v{}",
                    m.format, m.version
                ),
            ));
        }
        if m.dtype != "f64" || m.byte_order != "little" {
            return Err(format_err(
                path,
                format!("unsupported {} / {}", m.dtype, m.byte_order),
            ));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let bin = dir.join(&m.data_file);
        let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;

        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for e in &m.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + 8 * n > payload.len() {
                return Err(format_err(
                    path,
                    format!("tensor {} has a bad offset", e.name),
                ));
            }
            let data = payload[e.offset..e.offset + 8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            expected_offset += 8 * n;
        }
        if expected_offset != payload.len() {
            return Err(format_err(
                path,
                format!(
                    "payload has {} bytes, manifest covers {expected_offset}",
                    payload.len()
                ),
            ));
        }
        Ok(Self {
            kind: m.kind,
            viewpoint: m.viewpoint,
            architecture: m.architecture,
            saliency: m.saliency,
            tensors,
        })
    }

    /// Consume the conv layers stored under `prefix` (`prefix.0.kernel`, `prefix.0.bias`, ...).
    pub(crate) fn take_convs(&mut self, prefix: &str, count: usize) -> Result<Vec<ConvParams>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let kernel = self.take(&format!("{prefix}.{i}.kernel"))?;
            let bias = self.take(&format!("{prefix}.{i}.bias"))?;
            out.push(ConvParams { kernel, bias });
        }
        Ok(out)
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("weight file lacks tensor {name}")))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub(crate) fn push_convs(&mut self, prefix: &str, convs: &[ConvParams]) {
        for (i, c) in convs.iter().enumerate() {
            self.tensors
                .push((format!("{prefix}.{i}.kernel"), c.kernel.clone()));
            self.tensors
                .push((format!("{prefix}.{i}.bias"), c.bias.clone()));
        }
    }

    pub(crate) fn ensure_consumed(&self) -> Result<()> {
        match self.tensors.first() {
            Some((name, _)) => Err(Error::Format(format!(
                "unexpected tensor {name} in weight file"
            ))),
            None => Ok(()),
        }
    }
}

pub(crate) fn conv_count(arch: &Architecture) -> usize {
    arch.conv_shapes().len()
}

impl ModelBundle {
    pub fn to_weight_file(&self) -> WeightFile {
        let mut wf = WeightFile {
            kind: BundleKind::Joint,
            viewpoint: self.viewpoint,
            architecture: self.coarse.architecture().clone(),
            saliency: Some(self.saliency.config()),
            tensors: Vec::new(),
        };
        wf.push_convs("coarse", self.coarse.convs());
        wf.push_convs("fine", self.fine.convs());
        wf.push_convs("saliency", self.saliency.convs());
        wf
    }

    pub fn from_weight_file(mut wf: WeightFile) -> Result<Self> {
        if wf.kind != BundleKind::Joint {
            return Err(Error::Format("expected a joint bundle".into()));
        }
        let sal = wf
            .saliency
            .ok_or_else(|| Error::Format("joint bundle without saliency config".into()))?;
        let n = conv_count(&wf.architecture);
        let coarse = wf.take_convs("coarse", n)?;
        let fine = wf.take_convs("fine", n)?;
        let saliency = wf.take_convs("saliency", sal.layers)?;
        wf.ensure_consumed()?;
        Ok(Self {
            viewpoint: wf.viewpoint,
            coarse: BackboneParams::from_parts(wf.architecture.clone(), coarse)?,
            fine: BackboneParams::from_parts(wf.architecture, fine)?,
            saliency: SaliencyParams::from_parts(sal, saliency)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weight_file(WeightFile::load(path)?)
    }
}
