//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   names, shapes, offsets, dtype, config, RNG state, progress
//! <dir>/params.bin      little-endian f64: parameters, Adam first moments, Adam second moments
//! <dir>/replay.bin      optional replay buffer
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::agent::{AgentNetworks, Observation};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::history::{HistorySet, HistoryVector, HISTORY_LEN, HISTORY_WIDTH};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::trainer::{ReplayBuffer, TrainProgress, Transition};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const REPLAY: &str = "replay.bin";
const FORMAT: &str = "crowdnav-checkpoint-v1";
const REPLAY_MAGIC: &[u8; 8] = b"CNRPLY01";

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub nets: AgentNetworks,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub progress: TrainProgress,
    pub replay: Option<ReplayBuffer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in f64 elements from the start of `params.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
    pub adam: AdamConfig,
    pub adam_steps: Vec<u64>,
    pub rng: RngState,
    pub progress: TrainProgress,
    pub config: RunConfig,
    pub replay_transitions: Option<usize>,
}

pub fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

pub fn restore_rng(state: &RngState) -> Result<ChaCha8Rng> {
    let bad = || Error::Checkpoint("malformed RNG state".into());
    if state.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&state.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

fn push_f64s<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes `ck` to the directory `path`, replacing any previous checkpoint there
/// only once the new one is complete.
pub fn save(ck: &Checkpoint, path: &Path) -> Result<Manifest> {
    let store = &ck.nets.store;
    let mut params = Vec::with_capacity(store.len());
    let mut bytes = Vec::with_capacity(store.num_scalars() * 24);
    let mut offset = 0;
    for id in store.ids() {
        let v = store.value(id);
        params.push(ParamEntry {
            name: store.name(id).to_string(),
            shape: [v.nrows(), v.ncols()],
            offset,
        });
        offset += v.len();
        push_f64s(&mut bytes, v.iter());
    }
    for m in ck.adam.first.iter().chain(&ck.adam.second) {
        push_f64s(&mut bytes, m.iter());
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f64-le".into(),
        params,
        adam: ck.adam.config,
        adam_steps: ck.adam.steps.clone(),
        rng: rng_state(&ck.rng),
        progress: ck.progress.clone(),
        config: ck.config.clone(),
        replay_transitions: ck.replay.as_ref().map(|r| r.len()),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let old = path.with_file_name(format!(".{name}.old"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fs::write(tmp.join(PARAMS), &bytes).map_err(|e| Error::io(tmp.join(PARAMS), e))?;
    if let Some(r) = &ck.replay {
        fs::write(tmp.join(REPLAY), encode_replay(r)).map_err(|e| Error::io(tmp.join(REPLAY), e))?;
    }
    fs::write(tmp.join(MANIFEST), json).map_err(|e| Error::io(tmp.join(MANIFEST), e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    if path.exists() {
        fs::rename(path, &old).map_err(|e| Error::io(path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let p = path.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
    if m.format != FORMAT || m.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("{}: unsupported format", p.display())));
    }
    Ok(m)
}

/// Copies stored parameter values into `store`, checking names and shapes.
pub fn load_params_into(path: &Path, store: &mut ParamStore) -> Result<Manifest> {
    let manifest = read_manifest(path)?;
    let p = path.join(PARAMS);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    fill_store(&manifest, &bytes, store)?;
    Ok(manifest)
}

fn fill_store(manifest: &Manifest, bytes: &[u8], store: &mut ParamStore) -> Result<usize> {
    let total: usize = manifest.params.iter().map(|e| e.shape[0] * e.shape[1]).sum();
    if bytes.len() != 3 * total * 8 {
        return Err(Error::Checkpoint(format!(
            "params.bin holds {} bytes, manifest implies {}",
            bytes.len(),
            3 * total * 8
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    if manifest.params.len() != store.len() {
        let n = manifest.params.len().min(store.len());
        let first_diff = manifest
            .params
            .iter()
            .zip(&ids)
            .position(|(e, &id)| {
                e.name != store.name(id) || [store.value(id).nrows(), store.value(id).ncols()] != e.shape
            })
            .unwrap_or(n);
        let which = match (manifest.params.get(first_diff), ids.get(first_diff)) {
            (Some(e), Some(&id)) => format!(
                "checkpoint {} {:?} vs network {} {:?}",
                e.name,
                e.shape,
                store.name(id),
                store.value(id).dim()
            ),
            (Some(e), None) => format!("checkpoint has extra parameter {}", e.name),
            (None, Some(&id)) => format!("network parameter {} is missing", store.name(id)),
            (None, None) => String::new(),
        };
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, network has {}; first difference: {which}",
            manifest.params.len(),
            store.len()
        )));
    }
    for (entry, id) in manifest.params.iter().zip(ids) {
        if entry.name != store.name(id) {
            return Err(Error::Checkpoint(format!(
                "parameter {} found where {} was expected",
                entry.name,
                store.name(id)
            )));
        }
        let dst = store.value_mut(id);
        if [dst.nrows(), dst.ncols()] != entry.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} in the checkpoint but {:?} in the network",
                entry.name,
                entry.shape,
                dst.dim()
            )));
        }
        read_into(bytes, entry.offset, dst);
    }
    Ok(total)
}

fn read_into(bytes: &[u8], offset: usize, dst: &mut ndarray::Array2<f64>) {
    for (k, v) in dst.iter_mut().enumerate() {
        let s = (offset + k) * 8;
        *v = f64::from_le_bytes(bytes[s..s + 8].try_into().expect("8 bytes"));
    }
}

/// Loads a full checkpoint; the networks are rebuilt from the stored config.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(path)?;
    let p = path.join(PARAMS);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let cfg = manifest.config.clone();
    let mut nets = AgentNetworks::new(cfg.dims.clone(), cfg.env.max_step(), &mut ChaCha8Rng::seed_from_u64(0));
    let total = fill_store(&manifest, &bytes, &mut nets.store)?;
    let mut adam = Adam::new(&nets.store, manifest.adam);
    if manifest.adam_steps.len() != adam.steps.len() {
        return Err(Error::Checkpoint(
            "optimizer step counts do not match the parameters".into(),
        ));
    }
    adam.steps.clone_from(&manifest.adam_steps);
    for (entry, (m1, m2)) in manifest
        .params
        .iter()
        .zip(adam.first.iter_mut().zip(adam.second.iter_mut()))
    {
        read_into(&bytes, total + entry.offset, m1);
        read_into(&bytes, 2 * total + entry.offset, m2);
    }
    let replay = match manifest.replay_transitions {
        Some(n) => {
            let rp = path.join(REPLAY);
            let data = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
            let buf = decode_replay(&data)?;
            if buf.len() != n {
                return Err(Error::Checkpoint(format!(
                    "replay.bin holds {} transitions, manifest says {n}",
                    buf.len()
                )));
            }
            Some(buf)
        }
        None => None,
    };
    Ok(Checkpoint {
        rng: restore_rng(&manifest.rng)?,
        config: cfg,
        nets,
        adam,
        progress: manifest.progress,
        replay,
    })
}

fn encode_replay(buf: &ReplayBuffer) -> Vec<u8> {
    let mut ids: HashMap<*const Observation, u64> = HashMap::new();
    let mut table: Vec<&Observation> = Vec::new();
    let mut refs: Vec<(u64, u64)> = Vec::with_capacity(buf.len());
    for t in buf.iter() {
        let mut pair = [0u64; 2];
        for (slot, o) in pair.iter_mut().zip([&t.obs, &t.next_obs]) {
            *slot = *ids.entry(Arc::as_ptr(o)).or_insert_with(|| {
                table.push(o.as_ref());
                table.len() as u64 - 1
            });
        }
        refs.push((pair[0], pair[1]));
    }
    let mut out = Vec::new();
    out.extend_from_slice(REPLAY_MAGIC);
    for v in [buf.capacity() as u64, table.len() as u64, refs.len() as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for o in &table {
        out.extend_from_slice(&(o.histories.len() as u32).to_le_bytes());
        for h in &o.histories {
            for v in &h.0 {
                push_f64s(&mut out, v.to_array().iter());
            }
        }
        push_f64s(&mut out, [o.goal.x, o.goal.y, o.v_pref].iter());
    }
    for (t, (a, b)) in buf.iter().zip(refs) {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
        push_f64s(&mut out, [t.action.dx, t.action.dy, t.reward].iter());
        out.push(u8::from(t.done));
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let s = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint("replay.bin is truncated".into()))?;
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

fn decode_replay(data: &[u8]) -> Result<ReplayBuffer> {
    let mut r = Reader { data, pos: 0 };
    if r.take(8)? != REPLAY_MAGIC {
        return Err(Error::Checkpoint("replay.bin has a bad header".into()));
    }
    let capacity = r.u64()? as usize;
    let n_obs = r.u64()? as usize;
    let n_trans = r.u64()? as usize;
    let mut table = Vec::with_capacity(n_obs);
    for _ in 0..n_obs {
        let n = r.u32()? as usize;
        let mut histories = Vec::with_capacity(n);
        for _ in 0..n {
            let mut set = [HistoryVector::new(Vec2::ZERO, Vec2::ZERO, 0.0, Vec2::ZERO); HISTORY_LEN];
            for v in &mut set {
                let mut a = [0.0; HISTORY_WIDTH];
                for x in &mut a {
                    *x = r.f64()?;
                }
                *v = HistoryVector::new(
                    Vec2::new(a[0], a[1]),
                    Vec2::new(a[2], a[3]),
                    a[4],
                    Vec2::new(a[5], a[6]),
                );
            }
            histories.push(HistorySet(set));
        }
        let goal = Vec2::new(r.f64()?, r.f64()?);
        let v_pref = r.f64()?;
        table.push(Arc::new(Observation {
            histories,
            goal,
            v_pref,
        }));
    }
    let mut buf = ReplayBuffer::new(capacity);
    let lookup = |i: u64| {
        table
            .get(i as usize)
            .cloned()
            .ok_or_else(|| Error::Checkpoint("replay.bin references a missing observation".into()))
    };
    for _ in 0..n_trans {
        let obs = lookup(r.u64()?)?;
        let next_obs = lookup(r.u64()?)?;
        let action = Action::new(r.f64()?, r.f64()?);
        let reward = r.f64()?;
        let done = r.take(1)?[0] != 0;
        buf.push(Transition {
            obs,
            action,
            reward,
            next_obs,
            done,
        });
    }
    if r.pos != data.len() {
        return Err(Error::Checkpoint("replay.bin has trailing bytes".into()));
    }
    Ok(buf)
}
