//! TFW1 checkpoint archive.
//!
//! ```text
//! "TFW1" u32 header_len, header (UTF-8 key=value lines)
//! repeated: u16 name_len, name, u8 ndim, u32 dims[ndim], f32 data (little-endian)
//! ```
//!
//! Records are written in sorted name order. The `created` header line is
//! informational and left out of [`Checkpoint::canonical_bytes`].

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::formats::Cursor;
use crate::data::NormStats;
use crate::error::{Error, FormatError, Result};
use crate::nets::{EncoderConfig, Model, ModelKind, ParamStore, SegmentationNet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TFW1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub seed: u64,
    /// Epoch (1-based) whose end-of-epoch weights these are; 0 before training.
    pub epoch: usize,
    pub norm: NormStats,
    pub beta: f64,
    /// Free-form creation stamp, excluded from canonical bytes.
    pub created: Option<String>,
    pub params: ParamStore<f32>,
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| FormatError::Header(format!("{key}: bad value {x:?}")).into())
        })
        .collect()
}

fn field<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let raw = kv
        .get(key)
        .ok_or_else(|| FormatError::Header(format!("missing key {key}")))?;
    raw.parse()
        .map_err(|_| FormatError::Header(format!("{key}: bad value {raw:?}")).into())
}

impl Checkpoint {
    /// Rebuild the network described by this checkpoint.
    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.kind, &self.encoder, self.params.clone())
    }

    fn header(&self, with_created: bool) -> String {
        let mut h = format!(
            "kind={}\nin_channels={}\nwidths={}\nblocks={}\nseed={}\nepoch={}\nbeta={}\nnormstats={}\n",
            self.kind,
            self.encoder.in_channels,
            join(&self.encoder.stage_widths),
            self.encoder.blocks_per_stage,
            self.seed,
            self.epoch,
            self.beta,
            join(self.norm.to_values()),
        );
        if let (true, Some(c)) = (with_created, &self.created) {
            h.push_str(&format!("created={c}\n"));
        }
        h
    }

    fn encode(&self, with_created: bool) -> Vec<u8> {
        let header = self.header(with_created);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = p.tensor.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode(true)
    }

    /// File bytes without the creation stamp.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.encode(false)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        cur.magic(MAGIC)?;
        let header_len = cur.u32()? as usize;
        cur.require(header_len)?;
        let header = std::str::from_utf8(cur.take(header_len)?)
            .map_err(|_| FormatError::Header("header is not UTF-8".into()))?;
        let mut kv = BTreeMap::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FormatError::Header(format!("line {line:?} is not key=value")))?;
            if kv.insert(k, v).is_some() {
                return Err(FormatError::Header(format!("repeated key {k}")).into());
            }
        }
        let known = [
            "kind",
            "in_channels",
            "widths",
            "blocks",
            "seed",
            "epoch",
            "beta",
            "normstats",
            "created",
        ];
        if let Some(k) = kv.keys().find(|k| !known.contains(k)) {
            return Err(FormatError::Header(format!("unknown key {k}")).into());
        }
        let kind: ModelKind = kv
            .get("kind")
            .ok_or_else(|| FormatError::Header("missing key kind".into()))?
            .parse()
            .map_err(|e: Error| FormatError::Header(e.to_string()))?;
        let encoder = EncoderConfig {
            in_channels: field(&kv, "in_channels")?,
            stage_widths: parse_list("widths", kv.get("widths").copied().unwrap_or(""))?,
            blocks_per_stage: field(&kv, "blocks")?,
        };
        encoder
            .validate()
            .map_err(|e| FormatError::Header(e.to_string()))?;
        let norm_values: Vec<f32> =
            parse_list("normstats", kv.get("normstats").copied().unwrap_or(""))?;
        let norm =
            NormStats::from_values(&norm_values).map_err(|e| FormatError::Header(e.to_string()))?;

        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        while !cur.is_empty() {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| FormatError::Header("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| FormatError::Header(format!("{name}: dimensions overflow")))?;
            cur.require(numel * 4)?;
            let data = cur.f32s(numel)?;
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite { index: i }.into());
            }
            if tensors.contains_key(&name) {
                return Err(FormatError::DuplicateName(name).into());
            }
            tensors.insert(name, Tensor::new(shape, data)?);
        }

        let fresh = Model::<f32>::build(kind, &encoder, 0)?;
        let mut params = fresh.params().clone();
        for name in fresh.params().names() {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            let want = fresh.params().get(name)?.shape();
            if t.shape() != want {
                return Err(FormatError::Header(format!(
                    "{name}: shape {:?}, architecture expects {want:?}",
                    t.shape()
                ))
                .into());
            }
            params.set(name, t)?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(FormatError::Header(format!("unexpected parameter {extra}")).into());
        }
        Ok(Checkpoint {
            kind,
            encoder,
            seed: field(&kv, "seed")?,
            epoch: field(&kv, "epoch")?,
            norm,
            beta: field(&kv, "beta")?,
            created: kv.get("created").map(|s| s.to_string()),
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::from(e).at(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).at(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.at(path))
    }
}

/// Seconds since the Unix epoch, for the `created` stamp.
pub fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}
