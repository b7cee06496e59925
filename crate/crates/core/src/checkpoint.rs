//! Binary checkpoint codec.
//!
//! Layout: the magic bytes `HRC1`, a `u32` little-endian length followed by
//! that many bytes of UTF-8 JSON metadata, then tensor records until the end
//! of the buffer. Each record is `[name length u32][name][rank u32]
//! [dims u32 x rank][little-endian f32 payload, row-major]`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::forward::TaskConfig;
use crate::losses::{LossSpec, ScalingFactors};
use crate::networks::{HyperNet, HyperNetConfig, MainNetConfig, MainNetParams};
use crate::numerics::NdArray;
use crate::training::{AdamState, Baseline, BestModel, EpochLog, Model, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"HRC1";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const BEST: &str = "best/";

/// Position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed as lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a 128-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: format!("{}", rng.get_word_pos()) }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("invalid RNG state {:?}", self.seed));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelMeta {
    Hyper { hyper: HyperNetConfig },
    Baseline { lambda: Vec<f64> },
}

/// Where the training data came from; not needed to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunContext {
    pub task: TaskConfig,
    pub image_size: [usize; 2],
    pub data: Option<DataConfig>,
    pub scaling: Option<ScalingFactors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelMeta,
    pub main: MainNetConfig,
    pub loss: LossSpec,
    pub train: TrainConfig,
    pub context: RunContext,
    pub epoch: usize,
    pub adam_step: u64,
    pub rng: RngState,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
}

/// Decoded checkpoint: metadata plus named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, NdArray<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.at == self.buf.len()
    }
}

/// Serializes `[name, rank, dims, payload]` records.
pub fn encode_records<'a>(
    out: &mut Vec<u8>,
    tensors: impl IntoIterator<Item = (&'a str, &'a NdArray<f32>)>,
) -> Result<()> {
    for (name, t) in tensors {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

/// Parses records until the end of `buf`.
pub fn decode_records(buf: &[u8]) -> Result<Vec<(String, NdArray<f32>)>> {
    let mut r = Reader { buf, at: 0 };
    let mut out = Vec::new();
    while !r.done() {
        let n = r.u32("record name length")?;
        let name = String::from_utf8(r.take(n, "record name")?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len
            .filter(|l| l.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format(format!("{name}: size overflow")))?;
        let payload = r.take(4 * len, "payload")?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let arr = NdArray::new(&dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, arr));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let mut out = Vec::with_capacity(8 + json.len());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        encode_records(&mut out, self.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let n = r.u32("metadata length")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(n, "metadata")?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", meta.format_version)));
        }
        let tensors = decode_records(&bytes[r.at..])?;
        Ok(Self { meta, tensors })
    }

    pub fn tensor(&self, name: &str) -> Option<&NdArray<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn from_trainer(t: &Trainer<f32>, context: RunContext) -> Self {
        let model = match &t.model {
            Model::Hyper(h) => ModelMeta::Hyper { hyper: h.config.clone() },
            Model::Baseline(b) => ModelMeta::Baseline { lambda: b.lambda.clone() },
        };
        let named = t.model.tensors();
        let mut tensors = Vec::new();
        for (name, a) in &named {
            tensors.push((format!("{PARAM}{name}"), (*a).clone()));
        }
        for (prefix, arrays) in [(ADAM_M, &t.adam.m), (ADAM_V, &t.adam.v)] {
            for ((name, _), a) in named.iter().zip(arrays) {
                tensors.push((format!("{prefix}{name}"), a.clone()));
            }
        }
        if let Some(best) = &t.best {
            for ((name, _), a) in named.iter().zip(&best.tensors) {
                tensors.push((format!("{BEST}{name}"), a.clone()));
            }
        }
        Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                model,
                main: t.model.main_config().clone(),
                loss: t.spec.clone(),
                train: t.config.clone(),
                context,
                epoch: t.epoch,
                adam_step: t.adam.step,
                rng: RngState::capture(&t.rng),
                history: t.history.clone(),
                best_epoch: t.best.as_ref().map(|b| b.epoch),
                best_score: t.best.as_ref().map(|b| b.score),
            },
            tensors,
        }
    }

    fn empty_model(&self) -> Result<Model<f32>> {
        Ok(match &self.meta.model {
            ModelMeta::Hyper { hyper } => Model::Hyper(HyperNet::zeros(&self.meta.main, hyper)?),
            ModelMeta::Baseline { lambda } => {
                Model::Baseline(Baseline { params: MainNetParams::zeros(&self.meta.main)?, lambda: lambda.clone() })
            }
        })
    }

    /// Tensors stored under `prefix`, ordered and shape-checked against `model`.
    fn group(&self, model: &Model<f32>, prefix: &str) -> Result<Option<Vec<NdArray<f32>>>> {
        let named = model.tensors();
        let mut out = Vec::with_capacity(named.len());
        for (i, (name, like)) in named.iter().enumerate() {
            let key = format!("{prefix}{name}");
            match self.tensor(&key) {
                Some(t) if t.shape() == like.shape() => out.push(t.clone()),
                Some(t) => {
                    return Err(Error::Format(format!(
                        "{key}: shape {:?} does not match configured {:?}",
                        t.shape(),
                        like.shape()
                    )))
                }
                None if i == 0 => return Ok(None),
                None => return Err(Error::Format(format!("missing tensor {key}"))),
            }
        }
        Ok(Some(out))
    }

    fn model_from(&self, prefix: &str) -> Result<Model<f32>> {
        let mut m = self.empty_model()?;
        let tensors = self.group(&m, prefix)?.ok_or_else(|| Error::Format(format!("no {prefix} tensors")))?;
        for (dst, src) in m.tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        Ok(m)
    }

    /// Best-validation model, or the latest parameters if none was recorded.
    pub fn model(&self) -> Result<Model<f32>> {
        self.model_from(BEST).or_else(|_| self.model_from(PARAM))
    }

    /// Latest parameters.
    pub fn latest_model(&self) -> Result<Model<f32>> {
        self.model_from(PARAM)
    }

    /// Restores the full training state for resumption.
    pub fn to_trainer(&self) -> Result<Trainer<f32>> {
        let model = self.latest_model()?;
        let m = self.group(&model, ADAM_M)?.ok_or_else(|| Error::Format("missing optimizer state".into()))?;
        let v = self.group(&model, ADAM_V)?.ok_or_else(|| Error::Format("missing optimizer state".into()))?;
        let best = match (self.meta.best_epoch, self.meta.best_score, self.group(&model, BEST)?) {
            (Some(epoch), Some(score), Some(tensors)) => Some(BestModel { epoch, score, tensors }),
            (None, None, None) => None,
            _ => return Err(Error::Format("incomplete best-model record".into())),
        };
        let mut t = Trainer::from_model(model, self.meta.loss.clone(), self.meta.train.clone())?;
        t.adam = AdamState { m, v, step: self.meta.adam_step };
        t.epoch = self.meta.epoch;
        t.rng = self.meta.rng.restore()?;
        t.history = self.meta.history.clone();
        t.best = best;
        Ok(t)
    }
}
