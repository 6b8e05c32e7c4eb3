//! `FSCK` checkpoint: configuration echo, normalization statistics,
//! parameters, optimizer moments, early-stopping bookkeeping, RNG states
//! and the history so far. All numbers little-endian.

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::{AdamState, EpochRecord, TrainError, TrainResult, TrainState, Trainer};
use crate::binio::{put_f32s, put_f64s, put_str16, put_str32, Reader};
use crate::config::RunConfig;
use crate::data::{DataError, DataResult, NormStats};
use crate::models::ModelInstance;
use crate::nn::ParamStore;
use crate::prepared::Preprocessing;
use crate::rng::Pcg32;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub stats: Option<NormStats>,
    pub store: ParamStore<f32>,
    pub state: TrainState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> DataResult<()> {
    let v = u32::try_from(v).map_err(|_| DataError::Invalid(format!("{v} exceeds u32")))?;
    out.write_u32::<LittleEndian>(v)?;
    Ok(())
}

fn put_opt_index(out: &mut Vec<u8>, v: Option<usize>) -> DataResult<()> {
    out.write_i64::<LittleEndian>(v.map_or(-1, |x| x as i64))?;
    Ok(())
}

fn put_tensors<'a>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>) -> DataResult<()> {
    put_u32(out, items.len())?;
    for (name, t) in items {
        put_str16(out, name)?;
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        put_f32s(out, t.data());
    }
    Ok(())
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore<f32>) -> DataResult<()> {
    let params: Vec<_> = store.params().collect();
    put_tensors(out, params.into_iter())?;
    let buffers: Vec<_> = store.buffers().collect();
    put_tensors(out, buffers.into_iter())
}

fn get_tensors(r: &mut Reader<'_>) -> DataResult<Vec<(String, Tensor<f32>)>> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name = r.str16()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.format(format!("shape {shape:?} of {name} overflows")))?;
        let data = r.f32s(len)?;
        let t = Tensor::new(shape, data).map_err(|e| r.format(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

fn get_store(r: &mut Reader<'_>) -> DataResult<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (name, t) in get_tensors(r)? {
        store.insert_param(name, t).map_err(|e| r.format(e.to_string()))?;
    }
    for (name, t) in get_tensors(r)? {
        store.insert_buffer(name, t);
    }
    Ok(store)
}

fn get_opt_index(r: &mut Reader<'_>) -> DataResult<Option<usize>> {
    let v = r.i64()?;
    Ok((v >= 0).then_some(v as usize))
}

fn get_rng(r: &mut Reader<'_>) -> DataResult<Pcg32> {
    let s = r.u64()?;
    let inc = r.u64()?;
    Ok(Pcg32::from_state(s, inc))
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, run: &RunConfig, prep: Option<&Preprocessing>) -> Self {
        let mut run = run.clone();
        run.model = t.model.config;
        run.train = t.config.clone();
        if let Some(p) = prep {
            run.smoothing = p.smoothing;
        }
        Self {
            run,
            stats: prep.map(|p| p.stats.clone()),
            store: t.model.store.clone(),
            state: t.state.clone(),
        }
    }

    pub fn preprocessing(&self) -> Option<Preprocessing> {
        self.stats.clone().map(|stats| Preprocessing {
            stats,
            smoothing: self.run.smoothing,
        })
    }

    /// Model with the current (last-epoch) parameters.
    pub fn model(&self) -> TrainResult<ModelInstance<f32>> {
        Ok(ModelInstance::from_store(self.run.model, self.store.clone())?)
    }

    /// Model with the best-validation parameters, falling back to the
    /// current ones.
    pub fn best_model(&self) -> TrainResult<ModelInstance<f32>> {
        let store = self.state.best_store.clone().unwrap_or_else(|| self.store.clone());
        Ok(ModelInstance::from_store(self.run.model, store)?)
    }

    pub fn into_trainer(self) -> TrainResult<Trainer> {
        let model = self.model()?;
        Trainer::from_parts(model, self.run.train, self.state)
    }

    pub fn encode(&self) -> DataResult<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        put_str32(&mut out, &self.run.to_text())?;
        match &self.stats {
            Some(s) => {
                out.push(1);
                put_str32(&mut out, &s.to_text())?;
            }
            None => out.push(0),
        }
        put_store(&mut out, &self.store)?;

        let st = &self.state;
        put_u32(&mut out, st.epoch)?;
        out.write_u64::<LittleEndian>(st.adam.step)?;
        put_u32(&mut out, st.adam.m.len())?;
        for (name, m) in &st.adam.m {
            let v = st
                .adam
                .v
                .get(name)
                .ok_or_else(|| DataError::Invalid(format!("missing second moment for {name}")))?;
            put_str16(&mut out, name)?;
            put_u32(&mut out, m.len())?;
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        out.write_f64::<LittleEndian>(st.best_f1)?;
        put_opt_index(&mut out, st.best_epoch)?;
        put_u32(&mut out, st.since_best)?;
        put_opt_index(&mut out, st.reached_target)?;
        out.push(u8::from(st.finished));
        match &st.best_store {
            Some(b) => {
                out.push(1);
                put_store(&mut out, b)?;
            }
            None => out.push(0),
        }
        for rng in [&st.data_rng, &st.aug_rng, &st.dropout_rng] {
            let (s, inc) = rng.state();
            out.write_u64::<LittleEndian>(s)?;
            out.write_u64::<LittleEndian>(inc)?;
        }
        put_u32(&mut out, st.history.len())?;
        for h in &st.history {
            put_u32(&mut out, h.epoch)?;
            put_f64s(&mut out, &[h.lr, h.loss, h.wbce, h.dice, h.focal, h.val_f1]);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> DataResult<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(DataError::Format {
                offset: 0,
                detail: "bad magic, expected FSCK".into(),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(DataError::Format {
                offset: 4,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let at = r.pos;
        let run = RunConfig::from_text(&r.str32()?).map_err(|e| DataError::Format {
            offset: at,
            detail: e.to_string(),
        })?;
        let stats = match r.u8()? {
            0 => None,
            1 => {
                let at = r.pos;
                Some(NormStats::from_text(&r.str32()?).map_err(|e| DataError::Format {
                    offset: at,
                    detail: e.to_string(),
                })?)
            }
            f => return Err(r.format(format!("bad flag {f}"))),
        };
        let store = get_store(&mut r)?;

        let mut st = TrainState::new(&run.train);
        st.epoch = r.u32()? as usize;
        st.adam = AdamState::new();
        st.adam.step = r.u64()?;
        for _ in 0..r.u32()? {
            let name = r.str16()?;
            let n = r.u32()? as usize;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            st.adam.m.insert(name.clone(), m);
            st.adam.v.insert(name, v);
        }
        st.best_f1 = r.f64()?;
        st.best_epoch = get_opt_index(&mut r)?;
        st.since_best = r.u32()? as usize;
        st.reached_target = get_opt_index(&mut r)?;
        st.finished = r.u8()? != 0;
        st.best_store = match r.u8()? {
            0 => None,
            1 => Some(get_store(&mut r)?),
            f => return Err(r.format(format!("bad flag {f}"))),
        };
        st.data_rng = get_rng(&mut r)?;
        st.aug_rng = get_rng(&mut r)?;
        st.dropout_rng = get_rng(&mut r)?;
        let n = r.u32()? as usize;
        st.history = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let epoch = r.u32()? as usize;
            let v = r.f64s(6)?;
            st.history.push(EpochRecord {
                epoch,
                lr: v[0],
                loss: v[1],
                wbce: v[2],
                dice: v[3],
                focal: v[4],
                val_f1: v[5],
            });
        }
        if r.remaining() != 0 {
            return Err(r.format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            run,
            stats,
            store,
            state: st,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> TrainResult<()> {
        fs::write(path, self.encode()?).map_err(DataError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> TrainResult<Self> {
        let bytes = fs::read(path).map_err(DataError::from)?;
        Self::decode(&bytes).map_err(TrainError::from)
    }
}
