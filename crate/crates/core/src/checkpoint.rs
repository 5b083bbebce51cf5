//! Single-file checkpoints.
//!
//! ```text
//! m2m-checkpoint 1\n
//! <manifest byte length>\n
//! <JSON manifest>
//! <little-endian array payload>
//! ```
//!
//! The manifest records the domain shape, model specs and seeds, training
//! config and its hash, iteration, optimizer step counts, the batch-sampling
//! RNG position, and for every array its name, dtype, shape and byte range.
//! Arrays are named `{role}/{param}` for model weights and
//! `adam.{role}.{m|v}/{param}` for optimizer moments.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::DomainShape;
use crate::error::{Error, Result};
use crate::networks::{load_params_into, ModelSpec};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::trainer::{GanModels, TrainConfig, TrainState, MODEL_ROLES};

const MAGIC: &str = "m2m-checkpoint 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub role: String,
    pub spec: ModelSpec,
    pub seed: u64,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::validation("corrupt RNG state in checkpoint");
        let bytes = hex::decode(&self.seed).map_err(|_| bad())?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub shape: DomainShape,
    pub config: TrainConfig,
    pub config_hash: String,
    pub iteration: u64,
    pub seed: u64,
    pub discriminator_receptive_field: usize,
    pub models: Vec<ModelEntry>,
    pub adam_steps: Vec<u64>,
    pub nonfinite_streak: u32,
    pub rng: RngState,
    pub arrays: Vec<ArrayEntry>,
}

fn push_store<T: Scalar>(prefix: &str, store: &ParamStore<T>, entries: &mut Vec<ArrayEntry>, payload: &mut Vec<u8>) {
    for (name, t) in store.iter() {
        push_array(format!("{prefix}/{name}"), t, entries, payload);
    }
}

pub(crate) fn push_array<T: Scalar>(name: String, t: &Tensor<T>, entries: &mut Vec<ArrayEntry>, payload: &mut Vec<u8>) {
    let offset = payload.len();
    for &v in t.data() {
        v.write_le(payload);
    }
    entries.push(ArrayEntry {
        name,
        dtype: T::DTYPE.name().into(),
        shape: t.shape().to_vec(),
        offset,
        bytes: payload.len() - offset,
    });
}

pub fn save_checkpoint<T: Scalar>(path: &Path, state: &TrainState<T>) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let stores = state.models.stores();
    for (role, store) in MODEL_ROLES.iter().zip(stores) {
        push_store(role, store, &mut entries, &mut payload);
    }
    for (role, (adam, store)) in MODEL_ROLES.iter().zip(state.adam.iter().zip(stores)) {
        for (k, (name, _)) in store.iter().enumerate() {
            push_array(format!("adam.{role}.m/{name}"), &adam.m[k], &mut entries, &mut payload);
            push_array(format!("adam.{role}.v/{name}"), &adam.v[k], &mut entries, &mut payload);
        }
    }
    let m = &state.models;
    let models = [
        (&m.g.model.spec, m.g.model.seed, m.g.params().count()),
        (&m.g_bar.model.spec, m.g_bar.model.seed, m.g_bar.params().count()),
        (&m.d_s.model.spec, m.d_s.model.seed, m.d_s.params().count()),
        (&m.d_t.model.spec, m.d_t.model.seed, m.d_t.params().count()),
    ]
    .iter()
    .zip(MODEL_ROLES)
    .map(|((spec, seed, n), role)| ModelEntry {
        role: role.into(),
        spec: (*spec).clone(),
        seed: *seed,
        parameters: *n,
    })
    .collect();
    let manifest = Manifest {
        dtype: T::DTYPE.name().into(),
        shape: m.shape,
        config: state.cfg.clone(),
        config_hash: state.cfg.hash(),
        iteration: state.iteration,
        seed: state.cfg.seed,
        discriminator_receptive_field: m.d_t.spec.receptive_field(),
        models,
        adam_steps: state.adam.iter().map(|a| a.step).collect(),
        nonfinite_streak: state.nonfinite_streak,
        rng: RngState::capture(&state.rng),
        arrays: entries,
    };
    write_container(path, MAGIC, &serde_json::to_string_pretty(&manifest)?, &payload)
}

/// Writes `magic`, the manifest length, the manifest and the payload via a
/// temporary file.
pub(crate) fn write_container(path: &Path, magic: &str, json: &str, payload: &[u8]) -> Result<()> {
    let mut out = format!("{magic}\n{}\n{json}", json.len()).into_bytes();
    out.extend_from_slice(payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e.to_string()))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::file(&tmp, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e.to_string()))
}

/// Splits a container into manifest bytes and payload.
pub(crate) fn read_container(path: &Path, magic: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
    let bad = |d: &str| Error::file(path, format!("not a {magic} file: {d}"));
    let nl1 = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header"))?;
    if &bytes[..nl1] != magic.as_bytes() {
        return Err(bad("bad magic"));
    }
    let rest = &bytes[nl1 + 1..];
    let nl2 = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing length"))?;
    let len: usize = std::str::from_utf8(&rest[..nl2])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad manifest length"))?;
    let body = &rest[nl2 + 1..];
    if body.len() < len {
        return Err(bad("truncated manifest"));
    }
    Ok((body[..len].to_vec(), body[len..].to_vec()))
}

pub(crate) fn check_extents(path: &Path, arrays: &[ArrayEntry], payload: &[u8]) -> Result<()> {
    if arrays.iter().any(|a| a.offset + a.bytes > payload.len()) {
        return Err(Error::file(path, "truncated payload"));
    }
    Ok(())
}

pub(crate) fn read_array<T: Scalar>(arrays: &[ArrayEntry], payload: &[u8], name: &str) -> Result<Tensor<T>> {
    let a = arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::validation(format!("file lacks array {name:?}")))?;
    if a.dtype != T::DTYPE.name() {
        return Err(Error::validation(format!(
            "array {name:?} is {} but {} was requested",
            a.dtype,
            T::DTYPE.name()
        )));
    }
    let size = T::DTYPE.size();
    let n: usize = a.shape.iter().product();
    if n * size != a.bytes {
        return Err(Error::validation(format!("array {name:?} has inconsistent size")));
    }
    let raw = &payload[a.offset..a.offset + a.bytes];
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(&a.shape, data)
}

/// Parsed checkpoint: manifest plus raw payload.
pub struct Archive {
    pub manifest: Manifest,
    payload: Vec<u8>,
}

impl Archive {
    pub fn read(path: &Path) -> Result<Self> {
        let (json, payload) = read_container(path, MAGIC)?;
        let manifest: Manifest =
            serde_json::from_slice(&json).map_err(|e| Error::file(path, format!("manifest: {e}")))?;
        check_extents(path, &manifest.arrays, &payload)?;
        Ok(Archive { manifest, payload })
    }

    pub fn array<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        read_array(&self.manifest.arrays, &self.payload, name)
    }

    fn fill_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let mut src = ParamStore::new();
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            src.add(n.clone(), self.array(&format!("{prefix}/{n}"))?)?;
        }
        load_params_into(store, &src)
    }

    pub fn models<T: Scalar>(&self) -> Result<GanModels<T>> {
        let m = &self.manifest;
        if m.dtype != T::DTYPE.name() {
            return Err(Error::validation(format!(
                "checkpoint holds {} parameters, {} requested",
                m.dtype,
                T::DTYPE.name()
            )));
        }
        let spec = |role: &str| -> Result<&ModelSpec> {
            m.models
                .iter()
                .find(|e| e.role == role)
                .map(|e| &e.spec)
                .ok_or_else(|| Error::validation(format!("checkpoint lacks model {role:?}")))
        };
        let (ModelSpec::Generator(gs), ModelSpec::Discriminator(ds), ModelSpec::Discriminator(dt)) =
            (spec("g")?, spec("d_s")?, spec("d_t")?)
        else {
            return Err(Error::validation("checkpoint model specs have unexpected types"));
        };
        let mut models = GanModels::from_specs(m.shape, *gs, *ds, *dt, m.seed)?;
        for (role, store) in MODEL_ROLES.iter().zip(models.stores_mut()) {
            self.fill_store(role, store)?;
        }
        for (e, model) in m.models.iter().zip([
            &mut models.g.model,
            &mut models.g_bar.model,
            &mut models.d_s.model,
            &mut models.d_t.model,
        ]) {
            model.seed = e.seed;
        }
        Ok(models)
    }

    pub fn state<T: Scalar>(&self) -> Result<TrainState<T>> {
        let m = &self.manifest;
        let models = self.models::<T>()?;
        let mut state = TrainState::with_models(m.config.clone(), models)?;
        for (k, role) in MODEL_ROLES.iter().enumerate() {
            let names: Vec<String> = state.models.stores()[k].iter().map(|(n, _)| n.to_string()).collect();
            let adam = &mut state.adam[k];
            adam.step = *m
                .adam_steps
                .get(k)
                .ok_or_else(|| Error::validation("checkpoint lacks optimizer steps"))?;
            for (i, n) in names.iter().enumerate() {
                adam.m[i] = self.array(&format!("adam.{role}.m/{n}"))?;
                adam.v[i] = self.array(&format!("adam.{role}.v/{n}"))?;
            }
        }
        state.iteration = m.iteration;
        state.nonfinite_streak = m.nonfinite_streak;
        state.rng = m.rng.restore()?;
        Ok(state)
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    Archive::read(path)?.state()
}

pub fn load_models<T: Scalar>(path: &Path) -> Result<GanModels<T>> {
    Archive::read(path)?.models()
}

/// Dtype recorded in a checkpoint.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let a = Archive::read(path)?;
    match a.manifest.dtype.as_str() {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        d => Err(Error::validation(format!("unknown dtype {d:?}"))),
    }
}
