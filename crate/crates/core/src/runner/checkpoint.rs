//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "MVRFCKPT" | u32 version
//! u64 length | config JSON
//! u64 iteration
//! rng: [u8; 32] seed | u64 stream | u128 word position
//! context: optional state
//! replay: u8 flag, then u64 count | u64 seeds | optional state
//! u64 parameter count, then per parameter:
//!     u64 name length | name | u64 rank | u64 dims | f64 values
//! ```
//!
//! An optional state is a `u8` flag followed by a direction byte, the
//! width as `u64` and the `h` and `c` values.

use std::fs;
use std::path::Path;

use rand::SeedableRng;

use super::config::ExperimentConfig;
use super::model::MetaModel;
use super::{io_error, RunError};
use crate::autodiff::Tensor;
use crate::context::{ContextState, Direction};
use crate::rng::ChaCha8Rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MVRFCKPT";
const VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// The last training batch: its task seeds and the context state it
/// started from.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayRecord {
    pub seeds: Vec<u64>,
    pub initial: Option<ContextState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub iteration: u64,
    /// The task-seed stream, positioned after the last batch.
    pub rng: RngState,
    /// Context state carried into meta-test.
    pub context: Option<ContextState>,
    pub replay: Option<ReplayRecord>,
    /// Trainable parameters by name, in creation order.
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &MetaModel,
        iteration: u64,
        rng: RngState,
        context: Option<ContextState>,
        replay: Option<ReplayRecord>,
    ) -> Self {
        Self {
            config: model.config.clone(),
            iteration,
            rng,
            context,
            replay,
            params: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds the model and copies the stored parameters into it.
    pub fn model(&self) -> Result<MetaModel, RunError> {
        let mut model = MetaModel::new(&self.config)?;
        if model.store.len() != self.params.len() {
            return Err(RunError::Checkpoint(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| RunError::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(RunError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
        put_u64(&mut out, self.iteration);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_state(&mut out, self.context.as_ref());
        match &self.replay {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                put_u64(&mut out, r.seeds.len() as u64);
                for &s in &r.seeds {
                    put_u64(&mut out, s);
                }
                put_state(&mut out, r.initial.as_ref());
            }
        }
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in &self.params {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.rank() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RunError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let len = r.len()?;
        let config: ExperimentConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| corrupt(&format!("config: {e}")))?;
        let iteration = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let context = r.state()?;
        let replay = match r.u8()? {
            0 => None,
            1 => {
                let n = r.len()?;
                let seeds = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
                Some(ReplayRecord {
                    seeds,
                    initial: r.state()?,
                })
            }
            f => return Err(corrupt(&format!("replay flag {f}"))),
        };
        let count = r.len()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.len()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt("parameter name"))?;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape"))?;
            let data = r.f64s(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            config,
            iteration,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            context,
            replay,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), RunError> {
    fs::write(path, ckpt.to_bytes()).map_err(io_error(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, RunError> {
    let bytes = fs::read(path).map_err(io_error(path))?;
    Checkpoint::from_bytes(&bytes)
}

fn corrupt(what: &str) -> RunError {
    RunError::Checkpoint(format!("corrupt file: {what}"))
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_state(out: &mut Vec<u8>, state: Option<&ContextState>) {
    let Some(s) = state else {
        out.push(0);
        return;
    };
    out.push(1);
    out.push(match s.direction {
        Direction::Vanilla => 0,
        Direction::Bidirectional => 1,
    });
    put_u64(out, s.h.len() as u64);
    put_f64s(out, &s.h);
    put_f64s(out, &s.c);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RunError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, RunError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, RunError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A `u64` used as a length; bounded by the bytes that remain.
    fn len(&mut self) -> Result<usize, RunError> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| corrupt("length out of range"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, RunError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt("length"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn state(&mut self) -> Result<Option<ContextState>, RunError> {
        match self.u8()? {
            0 => Ok(None),
            1 => {
                let direction = match self.u8()? {
                    0 => Direction::Vanilla,
                    1 => Direction::Bidirectional,
                    d => return Err(corrupt(&format!("direction {d}"))),
                };
                let n = self.len()?;
                Ok(Some(ContextState {
                    direction,
                    h: self.f64s(n)?,
                    c: self.f64s(n)?,
                }))
            }
            f => Err(corrupt(&format!("state flag {f}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut cfg = ExperimentConfig::blobs().with_blob_dim(3);
        cfg.dims.embed = vec![3, 4];
        cfg.dims.context_hidden = 2;
        cfg.dims.net_hidden = 3;
        cfg.bases = 5;
        let model = MetaModel::new(&cfg).unwrap();
        let mut rng = seeded(11);
        rng.next_u64();
        let state = ContextState {
            direction: Direction::Bidirectional,
            h: vec![0.1, -f64::MIN_POSITIVE],
            c: vec![1e300, -0.0],
        };
        Checkpoint::from_model(
            &model,
            7,
            RngState::capture(&rng),
            Some(state.clone()),
            Some(ReplayRecord {
                seeds: vec![1, u64::MAX],
                initial: Some(state),
            }),
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"MVRFCKPT");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, c);
        let model = back.model().unwrap();
        assert_eq!(model.store.checksum(), c.model().unwrap().store.checksum());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut a = seeded(3);
        a.next_u64();
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
