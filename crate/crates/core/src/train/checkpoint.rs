//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "FNET"  u32 version
//! u32 len, architecture text (key = value lines)
//! u32 len, metadata text (batch-norm constants, normalization statistics)
//! f64 best validation loss, u32 epoch
//! u32 tensor count, then per tensor:
//!     u32 name len, name bytes, u32 rank, u32 dims[rank], f32 values
//! ```
//!
//! Batch-norm running statistics are stored as tensors named
//! `<layer>/running_mean` and `<layer>/running_var`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::RunningStats;
use crate::blocks::{BN_EPS, BN_MOMENTUM};
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, FocusNetParams};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FNET";
pub const VERSION: u32 = 1;

const RUNNING_MEAN: &str = "/running_mean";
const RUNNING_VAR: &str = "/running_var";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub arch: ArchConfig,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub stats: BTreeMap<String, RunningStats<f32>>,
    pub normalization: Option<NormalizationStats>,
    pub best_val_loss: f64,
    pub epoch: u32,
}

impl CheckpointRecord {
    pub fn new(model: &FocusNetParams<f32>, normalization: Option<NormalizationStats>, best_val_loss: f64, epoch: u32) -> Self {
        CheckpointRecord {
            arch: model.arch.clone(),
            params: model.params.clone(),
            stats: model.stats.clone(),
            normalization,
            best_val_loss,
            epoch,
        }
    }

    /// Checks every tensor against the shapes the architecture declares.
    pub fn to_model(&self) -> Result<FocusNetParams<f32>> {
        let skeleton = FocusNetParams::<f32>::skeleton(&self.arch)?;
        let names = |m: &BTreeMap<String, Tensor<f32>>| m.keys().cloned().collect::<Vec<_>>();
        if names(&skeleton.params) != names(&self.params) || skeleton.stats.keys().ne(self.stats.keys()) {
            return Err(Error::Checkpoint(
                "stored tensors do not match the stored architecture".to_string(),
            ));
        }
        for (name, t) in &self.params {
            let expect = skeleton.params[name].shape();
            if t.shape() != expect {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, architecture expects {expect:?}",
                    t.shape()
                )));
            }
        }
        for (name, s) in &self.stats {
            let c = skeleton.stats[name].mean.len();
            if s.mean.shape() != [c] || s.var.shape() != [c] {
                return Err(Error::Checkpoint(format!("running statistics of '{name}' have the wrong size")));
            }
        }
        Ok(FocusNetParams {
            arch: self.arch.clone(),
            params: self.params.clone(),
            stats: self.stats.clone(),
        })
    }

    fn metadata(&self) -> String {
        let mut s = format!("bn_eps = {BN_EPS}\nbn_momentum = {BN_MOMENTUM}\n");
        if let Some(n) = &self.normalization {
            let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
            s.push_str(&format!("norm_mean = {}\nnorm_std = {}\n", list(&n.mean), list(&n.std)));
        }
        s
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for block in [self.arch.to_text(), self.metadata()] {
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            out.extend_from_slice(block.as_bytes());
        }
        out.extend_from_slice(&self.best_val_loss.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());

        let mut tensors: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        for (k, s) in &self.stats {
            tensors.push((format!("{k}{RUNNING_MEAN}"), &s.mean));
            tensors.push((format!("{k}{RUNNING_VAR}"), &s.var));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let arch_text = r.text("architecture block")?;
        let arch = ArchConfig::from_text(&arch_text)
            .map_err(|e| Error::Checkpoint(format!("invalid architecture block: {e}")))?;
        let meta = r.text("metadata block")?;
        let normalization = parse_metadata(&meta)?;
        let best_val_loss = f64::from_le_bytes(r.take(8, "best validation loss")?.try_into().expect("8 bytes"));
        let epoch = r.u32("epoch")?;

        let count = r.u32("tensor count")? as usize;
        let mut params = BTreeMap::new();
        let mut means = BTreeMap::new();
        let mut vars = BTreeMap::new();
        for i in 0..count {
            let len = r.u32(&format!("name length of tensor #{i}"))? as usize;
            let name = String::from_utf8(r.take(len, &format!("name of tensor #{i}"))?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("tensor #{i} has a non-UTF-8 name")))?;
            let ctx = format!("tensor '{name}'");
            let rank = r.u32(&ctx)? as usize;
            let shape = (0..rank).map(|_| r.u32(&ctx).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, &ctx)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)?;
            let slot = if let Some(layer) = name.strip_suffix(RUNNING_MEAN) {
                means.insert(layer.to_string(), t)
            } else if let Some(layer) = name.strip_suffix(RUNNING_VAR) {
                vars.insert(layer.to_string(), t)
            } else {
                params.insert(name.clone(), t)
            };
            if slot.is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut stats = BTreeMap::new();
        for (layer, mean) in means {
            let var = vars
                .remove(&layer)
                .ok_or_else(|| Error::Checkpoint(format!("'{layer}' has a running mean but no running variance")))?;
            stats.insert(layer, RunningStats { mean, var });
        }
        if let Some(layer) = vars.keys().next() {
            return Err(Error::Checkpoint(format!("'{layer}' has a running variance but no running mean")));
        }
        Ok(CheckpointRecord {
            arch,
            params,
            stats,
            normalization,
            best_val_loss,
            epoch,
        })
    }
}

fn parse_metadata(text: &str) -> Result<Option<NormalizationStats>> {
    let (mut mean, mut std) = (None, None);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let bad = || Error::Checkpoint(format!("malformed metadata line '{line}'"));
        let (k, v) = line.split_once('=').ok_or_else(bad)?;
        let list = || -> Result<Vec<f64>> { v.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect() };
        match k.trim() {
            "bn_eps" | "bn_momentum" => {
                let value: f64 = v.trim().parse().map_err(|_| bad())?;
                let expect = if k.trim() == "bn_eps" { BN_EPS } else { BN_MOMENTUM };
                if value != expect {
                    return Err(Error::Checkpoint(format!(
                        "{} = {value} differs from this build's {expect}",
                        k.trim()
                    )));
                }
            }
            "norm_mean" => mean = Some(list()?),
            "norm_std" => std = Some(list()?),
            _ => return Err(bad()),
        }
    }
    match (mean, std) {
        (Some(mean), Some(std)) if mean.len() == std.len() => Ok(Some(NormalizationStats {
            clamped: std.iter().map(|&d| d <= crate::data::transform::STD_FLOOR).collect(),
            mean,
            std,
        })),
        (None, None) => Ok(None),
        _ => Err(Error::Checkpoint("incomplete normalization statistics".to_string())),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            context: context.to_string(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self, context: &str) -> Result<String> {
        let len = self.u32(context)? as usize;
        String::from_utf8(self.take(len, context)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{context} is not UTF-8")))
    }
}

pub fn save_checkpoint(record: &CheckpointRecord, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, record.encode()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointRecord> {
    CheckpointRecord::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
