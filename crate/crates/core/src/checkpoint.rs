//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PAFUSECK"  u32 format version  u64 header length  header (JSON)
//! then per array: u32 name length, name (UTF-8), u32 ndim, u64 dims[ndim],
//!                 f64 values in row-major order
//! ```
//!
//! The header records the layout and its hash, the noise schedule, the data
//! scale, the model variant, every network's shape and the resolved run
//! configuration.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::model::{LiftingModel, Network, NetworkRole, Variant};
use crate::skeleton::SkeletonLayout;

const MAGIC: &[u8; 8] = b"PAFUSECK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkEntry {
    role: NetworkRole,
    config: DenoiserConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    layout: SkeletonLayout,
    layout_hash: String,
    schedule: ScheduleParams,
    data_scale: f64,
    variant: Variant,
    networks: Vec<NetworkEntry>,
    epoch: usize,
    config: serde_json::Value,
}

/// A trained model plus everything needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LiftingModel,
    pub schedule: ScheduleParams,
    pub data_scale: f64,
    /// Completed training epochs.
    pub epoch: usize,
    /// Resolved run configuration, echoed verbatim.
    pub config: serde_json::Value,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length does not fit in memory"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            layout: self.model.layout().clone(),
            layout_hash: self.model.layout().hash(),
            schedule: self.schedule,
            data_scale: self.data_scale,
            variant: self.model.variant(),
            networks: self
                .model
                .networks()
                .iter()
                .map(|n| NetworkEntry {
                    role: n.role,
                    config: n.denoiser.config().clone(),
                })
                .collect(),
            epoch: self.epoch,
            config: self.config.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for net in self.model.networks() {
            for (name, array) in net.denoiser.named_params() {
                let name = format!("{}/{name}", net.role.as_str());
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&2u32.to_le_bytes());
                for d in array.shape() {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in array.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let header_len = r.len()?;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(bad("header and preamble disagree on the format version"));
        }
        if header.layout.hash() != header.layout_hash {
            return Err(bad(format!(
                "layout hash {} does not match the stored layout ({})",
                header.layout_hash,
                header.layout.hash()
            )));
        }

        let mut arrays = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_owned();
            let ndim = r.u32()?;
            if ndim != 2 {
                return Err(bad(format!(
                    "array `{name}` has {ndim} dimensions, expected 2"
                )));
            }
            let (rows, cols) = (r.len()?, r.len()?);
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.checked_mul(8).is_some())
                .ok_or_else(|| bad(format!("array `{name}` is too large")))?;
            let data = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let array = Array2::from_shape_vec((rows, cols), data).expect("length checked");
            arrays.push((name, array));
        }

        let mut arrays = arrays.into_iter();
        let mut networks = Vec::with_capacity(header.networks.len());
        for entry in header.networks {
            let prefix = format!("{}/", entry.role.as_str());
            let count = crate::denoiser::tensor_count(&entry.config)?;
            let mut named = Vec::with_capacity(count);
            for _ in 0..count {
                let (name, array) = arrays.next().ok_or_else(|| {
                    bad(format!(
                        "missing arrays for network `{}`",
                        entry.config.name
                    ))
                })?;
                let local = name
                    .strip_prefix(&prefix)
                    .ok_or_else(|| bad(format!("array `{name}` does not belong to `{prefix}`")))?;
                named.push((local.to_owned(), array));
            }
            networks.push(Network {
                role: entry.role,
                denoiser: Denoiser::from_parts(entry.config, named)?,
            });
        }
        if let Some((name, _)) = arrays.next() {
            return Err(bad(format!("unexpected trailing array `{name}`")));
        }
        if networks.is_empty() {
            return Err(bad("no networks stored"));
        }
        Ok(Self {
            model: LiftingModel::from_networks(&header.layout, header.variant, networks)?,
            schedule: header.schedule,
            data_scale: header.data_scale,
            epoch: header.epoch,
            config: header.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { kind, message } => Error::Format {
                kind,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }
}
