//! The `LTT1` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LTT1"
//! u32 metadata length, metadata as JSON
//! u32 entry count
//! per entry: u16 name length, name, u8 rank, rank × u64 dims, u64 byte offset
//! payload: f64 arrays, row-major, offsets relative to the payload start
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabularies;
use crate::model::{ModelConfig, ModelParameters};
use crate::objective::{BaselineState, Ema};
use crate::params::{Array, ParamSet};
use crate::training::{SideBaselines, TrainConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LTT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocabs: Vocabularies,
    pub epoch: usize,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    /// Adam moments in parameter order.
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub baselines: SideBaselines,
}

fn baseline_arrays(prefix: &str, b: &BaselineState) -> [Array; 2] {
    let flag = |e: &Ema| if e.initialized { 1.0 } else { 0.0 };
    [
        Array::new(
            format!("baseline.{prefix}.reward"),
            vec![2],
            vec![b.reward.value, flag(&b.reward)],
        ),
        Array::new(
            format!("baseline.{prefix}.lm"),
            vec![b.lm.len(), 2],
            b.lm.iter().flat_map(|e| [e.value, flag(e)]).collect(),
        ),
    ]
}

fn ema_from(pair: &[f64]) -> Ema {
    Ema {
        value: pair[0],
        initialized: pair[1] != 0.0,
    }
}

impl Checkpoint {
    fn arrays(&self) -> Vec<Array> {
        let mut out: Vec<Array> = self.params.iter().map(|(_, a)| a.clone()).collect();
        for (tag, moments) in [("m", &self.adam_m), ("v", &self.adam_v)] {
            for ((_, a), data) in self.params.iter().zip(moments) {
                out.push(Array::new(
                    format!("adam.{tag}.{}", a.name()),
                    a.shape().to_vec(),
                    data.clone(),
                ));
            }
        }
        out.extend(baseline_arrays("enc", &self.baselines.encoder));
        out.extend(baseline_arrays("dec", &self.baselines.decoder));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let arrays = self.arrays();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for a in &arrays {
            let name = a.name().as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(a.shape().len() as u8);
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * a.len() as u64;
        }
        for a in &arrays {
            for x in a.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").ok() != Some(&MAGIC[..]) {
            return Err(Error::BadMagic);
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let count = r.u32("entry count")? as usize;
        let mut manifest = Vec::with_capacity(count);
        for i in 0..count {
            let what = format!("manifest entry {i}");
            let len = r.u16(&what)? as usize;
            let name = String::from_utf8(r.take(len, &what)?.to_vec())
                .map_err(|_| Error::Truncated(what.clone()))?;
            let rank = r.take(1, &name)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u64(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64(&name)? as usize;
            manifest.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut arrays: HashMap<String, Array> = HashMap::new();
        let mut order = Vec::new();
        for (name, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            let raw = offset
                .checked_add(8 * n)
                .and_then(|end| payload.get(offset..end))
                .ok_or_else(|| Error::Truncated(name.clone()))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            order.push(name.clone());
            arrays.insert(name.clone(), Array::new(name, shape, data));
        }
        Self::assemble(meta, arrays, &order)
    }

    fn assemble(meta: CheckpointMeta, mut arrays: HashMap<String, Array>, order: &[String]) -> Result<Self> {
        let mut take = |name: &str| arrays.remove(name).ok_or_else(|| Error::MissingEntry(name.to_string()));
        let mut params = ParamSet::new();
        for name in order.iter().filter(|n| !n.starts_with("adam.") && !n.starts_with("baseline.")) {
            params.add(take(name)?);
        }
        let mut moments = |tag: &str| -> Result<Vec<Vec<f64>>> {
            params
                .iter()
                .map(|(_, p)| {
                    let name = format!("adam.{tag}.{}", p.name());
                    let a = take(&name)?;
                    if a.shape() != p.shape() {
                        return Err(Error::ShapeMismatch {
                            entry: name,
                            expected: p.shape().to_vec(),
                            found: a.shape().to_vec(),
                        });
                    }
                    Ok(a.data().to_vec())
                })
                .collect()
        };
        let adam_m = moments("m")?;
        let adam_v = moments("v")?;
        let decay = meta.train.ema_decay;
        let mut baseline = |prefix: &str, classes: usize| -> Result<BaselineState> {
            let reward = take(&format!("baseline.{prefix}.reward"))?;
            let lm_name = format!("baseline.{prefix}.lm");
            let lm = take(&lm_name)?;
            if reward.shape() != [2] || lm.shape() != [classes, 2] {
                return Err(Error::ShapeMismatch {
                    entry: lm_name,
                    expected: vec![classes, 2],
                    found: lm.shape().to_vec(),
                });
            }
            let mut b = BaselineState::new(classes, decay);
            b.reward = ema_from(reward.data());
            b.lm = lm.data().chunks_exact(2).map(ema_from).collect();
            Ok(b)
        };
        let baselines = SideBaselines {
            encoder: baseline("enc", meta.model.source_vocab)?,
            decoder: baseline("dec", meta.model.decoder_classes())?,
        };
        Ok(Self {
            meta,
            params,
            adam_m,
            adam_v,
            baselines,
        })
    }

    /// Copies the stored parameters into `model`, checking every shape.
    pub fn restore_into(&self, model: &mut ModelParameters) -> Result<()> {
        let set = model.params_mut();
        let ids: Vec<_> = set.ids().collect();
        for id in ids {
            let target = set.get_mut(id);
            let name = target.name().to_string();
            let src = self
                .params
                .id(&name)
                .map(|i| self.params.get(i))
                .ok_or_else(|| Error::MissingEntry(name.clone()))?;
            if src.shape() != target.shape() {
                return Err(Error::ShapeMismatch {
                    entry: name,
                    expected: target.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            target.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// A model of the stored configuration holding the stored parameters.
    pub fn model(&self) -> Result<ModelParameters> {
        let mut model = ModelParameters::new(self.meta.model, 0);
        self.restore_into(&mut model)?;
        if model.params().len() != self.params.len() {
            let extra = self
                .params
                .iter()
                .find(|(_, a)| model.params().id(a.name()).is_none())
                .map(|(_, a)| a.name().to_string())
                .unwrap_or_default();
            return Err(Error::UnexpectedEntry(extra));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
