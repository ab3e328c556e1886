//! Checkpoint directories: `checkpoint.toml` (manifest), `config.toml` (the
//! exact config text the run used) and `state.bin` (bincode payload holding
//! weights, momentum buffers, memory bank, generator state and history).

use std::path::Path;

use diffcl_core::labelprop::MemoryBank;
use diffcl_core::losses::LossReport;
use diffcl_core::params::ParamStore;
use diffcl_core::trainer::{HistoryRow, TrainConfig, TrainState};
use diffcl_core::{Rng, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_str, sha256_hex, to_toml};
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "checkpoint.toml";
pub const CONFIG: &str = "config.toml";
pub const PAYLOAD: &str = "state.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub epoch: usize,
    pub iteration: u64,
    /// SHA-256 of `config.toml`.
    pub config_hash: String,
    pub payload: String,
    pub payload_sha256: String,
    pub payload_bytes: u64,
    /// Loss terms of the last step.
    pub last_losses: Option<LossReport>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RngRecord {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct Payload {
    epoch: usize,
    iteration: u64,
    cs: Vec<TensorRecord>,
    ds: Vec<TensorRecord>,
    cs_momentum: Vec<TensorRecord>,
    ds_momentum: Vec<TensorRecord>,
    bank: MemoryBank,
    rng: RngRecord,
    history: Vec<HistoryRow>,
}

fn records(names: &[String], tensors: &[Tensor]) -> Vec<TensorRecord> {
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| TensorRecord { name: n.clone(), shape: t.shape().to_vec(), data: t.data().to_vec() })
        .collect()
}

fn restore(what: &str, store_names: &[String], expected: &[Tensor], recs: Vec<TensorRecord>) -> Result<Vec<Tensor>> {
    if recs.len() != expected.len() {
        return Err(CliError::Config(format!(
            "{what}: checkpoint holds {} tensors, the configured network has {}",
            recs.len(),
            expected.len()
        )));
    }
    recs.into_iter()
        .zip(store_names.iter().zip(expected))
        .map(|(r, (name, t))| {
            if r.name != *name || r.shape != t.shape() {
                return Err(CliError::Config(format!(
                    "{what}: checkpoint tensor {} {:?} does not match configured {name} {:?}",
                    r.name,
                    r.shape,
                    t.shape()
                )));
            }
            Ok(Tensor::new(&r.shape, r.data)?)
        })
        .collect()
}

fn set_params(what: &str, store: &mut ParamStore, recs: Vec<TensorRecord>) -> Result<()> {
    let tensors = restore(what, &store.names().to_vec(), store.tensors(), recs)?;
    store.tensors_mut().clone_from_slice(&tensors);
    Ok(())
}

fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let payload = Payload {
        epoch: state.epoch,
        iteration: state.iteration,
        cs: records(state.cs.params().names(), state.cs.params().tensors()),
        ds: records(state.ds.params().names(), state.ds.params().tensors()),
        cs_momentum: records(state.cs.params().names(), state.cs_opt.buffers()),
        ds_momentum: records(state.ds.params().names(), state.ds_opt.buffers()),
        bank: state.bank.clone(),
        rng: RngRecord {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos(),
        },
        history: state.history.clone(),
    };
    bincode::serialize(&payload).map_err(|e| CliError::Numeric(format!("cannot encode checkpoint: {e}")))
}

/// Writes a checkpoint into `dir`, creating it.
pub fn save_checkpoint(dir: &Path, config: &TrainConfig, state: &TrainState) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let config_text = to_toml(config)?;
    let bytes = encode(state)?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        epoch: state.epoch,
        iteration: state.iteration,
        config_hash: sha256_hex(config_text.as_bytes()),
        payload: PAYLOAD.into(),
        payload_sha256: sha256_hex(&bytes),
        payload_bytes: bytes.len() as u64,
        last_losses: state.history.last().map(|r| r.report),
    };
    write(&dir.join(CONFIG), config_text.as_bytes())?;
    write(&dir.join(PAYLOAD), &bytes)?;
    let text = toml::to_string(&manifest).map_err(|e| CliError::format(dir.join(MANIFEST), e))?;
    write(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(CliError::NoData(format!("{} not found", path.display())));
    }
    std::fs::read(path).map_err(CliError::io(path))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = String::from_utf8(read(&path)?).map_err(|e| CliError::format(&path, e))?;
    let value: toml::Table = toml::from_str(&text).map_err(|e| CliError::format(&path, e))?;
    // Check the version before the layout so that newer formats are named as such.
    match value.get("format_version").and_then(toml::Value::as_integer) {
        Some(v) if v == FORMAT_VERSION as i64 => {}
        Some(v) => {
            return Err(CliError::format(
                &path,
                format!("checkpoint format version {v} is not supported; this build reads version {FORMAT_VERSION}"),
            ))
        }
        None => return Err(CliError::format(&path, "missing integer `format_version`")),
    }
    toml::from_str(&text).map_err(|e| CliError::format(&path, e))
}

/// The config stored with a checkpoint.
pub fn read_config(dir: &Path) -> Result<(TrainConfig, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(CONFIG);
    let bytes = read(&path)?;
    if sha256_hex(&bytes) != manifest.config_hash {
        return Err(CliError::format(&path, "contents do not match the manifest's config hash"));
    }
    let text = String::from_utf8(bytes).map_err(|e| CliError::format(&path, e))?;
    Ok((parse_str(&text)?, manifest))
}

/// Loads a checkpoint into a state built from `config`, which must describe
/// the same networks and memory bank.
pub fn load_checkpoint(dir: &Path, config: &TrainConfig) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(&manifest.payload);
    let bytes = read(&path)?;
    if bytes.len() as u64 != manifest.payload_bytes || sha256_hex(&bytes) != manifest.payload_sha256 {
        return Err(CliError::format(&path, "payload does not match the manifest's size and hash"));
    }
    let p: Payload = bincode::deserialize(&bytes).map_err(|e| CliError::format(&path, e))?;
    if p.epoch != manifest.epoch || p.iteration != manifest.iteration {
        return Err(CliError::format(&path, "payload epoch or iteration disagrees with the manifest"));
    }
    let mut state = TrainState::new(config)?;
    set_params("cs", state.cs.params_mut(), p.cs)?;
    set_params("ds", state.ds.params_mut(), p.ds)?;
    let m = restore("cs momentum", state.cs.params().names(), state.cs_opt.buffers(), p.cs_momentum)?;
    state.cs_opt.set_buffers(m)?;
    let m = restore("ds momentum", state.ds.params().names(), state.ds_opt.buffers(), p.ds_momentum)?;
    state.ds_opt.set_buffers(m)?;
    if p.bank.classes() != state.bank.classes() || p.bank.dim() != state.bank.dim() || p.bank.capacity() != state.bank.capacity() {
        return Err(CliError::Config(format!(
            "memory bank in checkpoint is {}x{}x{}, configured {}x{}x{}",
            p.bank.classes(),
            p.bank.capacity(),
            p.bank.dim(),
            state.bank.classes(),
            state.bank.capacity(),
            state.bank.dim()
        )));
    }
    state.bank = p.bank;
    let mut rng = Rng::from_seed(p.rng.seed);
    rng.set_stream(p.rng.stream);
    rng.set_word_pos(p.rng.word_pos);
    state.rng = rng;
    state.history = p.history;
    state.epoch = p.epoch;
    state.iteration = p.iteration;
    Ok(state)
}
