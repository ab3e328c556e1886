//! Layered configuration: preset, then file, then `DIFFCL_SEED`, then
//! command-line overrides. Every layer is merged as TOML before a single
//! typed parse, so unknown keys and type errors are reported with their full
//! dotted path whichever layer introduced them.

use std::path::Path;

use diffcl_core::evalkit::EvalConfig;
use diffcl_core::trainer::TrainConfig;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "DIFFCL_SEED";

/// Key a config file may use to start from a preset.
const PRESET_KEY: &str = "preset";

/// Settings for one benchmark split.
struct BenchmarkRow {
    name: &'static str,
    labeled: usize,
    unlabeled: usize,
    beta_scale: f64,
    eta: f64,
    hf_threshold: f64,
    patch: [usize; 3],
    stride: [usize; 3],
}

const LA_PATCH: [usize; 3] = [112, 112, 80];
const LA_STRIDE: [usize; 3] = [18, 18, 4];

const BENCHMARK_ROWS: [BenchmarkRow; 6] = [
    BenchmarkRow { name: "la-4-76", labeled: 4, unlabeled: 76, beta_scale: 0.01, eta: 0.7, hf_threshold: 0.6, patch: LA_PATCH, stride: LA_STRIDE },
    BenchmarkRow { name: "la-8-72", labeled: 8, unlabeled: 72, beta_scale: 0.01, eta: 0.5, hf_threshold: 0.7, patch: LA_PATCH, stride: LA_STRIDE },
    BenchmarkRow { name: "pancreas-6-56", labeled: 6, unlabeled: 56, beta_scale: 0.1, eta: 0.007, hf_threshold: 0.8, patch: [96; 3], stride: [16; 3] },
    BenchmarkRow { name: "pancreas-12-50", labeled: 12, unlabeled: 50, beta_scale: 0.1, eta: 0.0003, hf_threshold: 0.5, patch: [96; 3], stride: [16; 3] },
    BenchmarkRow { name: "brats-25-225", labeled: 25, unlabeled: 225, beta_scale: 0.1, eta: 0.007, hf_threshold: 0.5, patch: [96; 3], stride: [64; 3] },
    BenchmarkRow { name: "brats-50-250", labeled: 50, unlabeled: 250, beta_scale: 0.1, eta: 0.003, hf_threshold: 0.5, patch: [96; 3], stride: [64; 3] },
];

/// Desk-scale comparison setup: 40 synthetic 16³ volumes, two labelled.
pub const SMOKE: &str = "smoke";

pub fn preset_names() -> Vec<&'static str> {
    let mut names = vec!["default", SMOKE];
    names.extend(BENCHMARK_ROWS.iter().map(|r| r.name));
    names
}

pub fn preset(name: &str) -> Result<TrainConfig> {
    if name == "default" {
        return Ok(TrainConfig::default());
    }
    if name == SMOKE {
        return Ok(smoke());
    }
    let row = BENCHMARK_ROWS.iter().find(|r| r.name == name).ok_or_else(|| {
        CliError::Config(format!("unknown preset `{name}`; known presets: {}", preset_names().join(", ")))
    })?;
    let mut c = TrainConfig::default();
    c.data.synthetic.count = row.labeled + row.unlabeled;
    c.data.labeled_count = row.labeled;
    // A synthetic stand-in one window larger than the patch on every axis.
    for axis in 0..3 {
        c.data.synthetic.size[axis] = row.patch[axis] + row.stride[axis];
    }
    c.data.synthetic.radius_min = 12.0;
    c.data.synthetic.radius_max = 30.0;
    c.data.synthetic.blur_sigma = 2.0;
    c.patch_size = row.patch;
    c.eval = EvalConfig { patch_size: row.patch, stride: row.stride };
    c.loss.beta1_scale = row.beta_scale;
    c.loss.beta2_scale = row.beta_scale;
    c.loss.eta = row.eta;
    c.net.hf_threshold = row.hf_threshold;
    Ok(c)
}

fn smoke() -> TrainConfig {
    let mut c = TrainConfig::default();
    let s = &mut c.data.synthetic;
    s.size = [16; 3];
    s.count = 40;
    s.noise = 0.6;
    s.distractors = 2;
    s.bias_field = 0.5;
    s.contrast_min = 0.4;
    s.radius_min = 2.5;
    s.radius_max = 5.0;
    c.data.labeled_count = 2;
    c.epochs = 30;
    c.iters_per_epoch = 10;
    c.loss.t_max = 30.0;
    c.loss.eta = 0.5;
    c.patch_size = [16; 3];
    c.eval = EvalConfig { patch_size: [16; 3], stride: [8; 3] };
    c
}

/// Where a config comes from, in increasing precedence.
#[derive(Clone, Debug, Default)]
pub struct ConfigSource<'a> {
    pub preset: Option<&'a str>,
    pub file: Option<&'a Path>,
    /// Value of the seed environment variable, if set.
    pub env_seed: Option<String>,
    /// `dotted.key=value` pairs.
    pub overrides: &'a [String],
}

impl<'a> ConfigSource<'a> {
    pub fn from_env(preset: Option<&'a str>, file: Option<&'a Path>, overrides: &'a [String]) -> Self {
        ConfigSource { preset, file, env_seed: std::env::var(SEED_ENV).ok(), overrides }
    }
}

pub fn load_config(source: &ConfigSource) -> Result<TrainConfig> {
    let mut file_table = None;
    let mut preset_name = source.preset.map(str::to_owned);
    if let Some(path) = source.file {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut table: Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(v) = table.remove(PRESET_KEY) {
            let name = v
                .as_str()
                .ok_or_else(|| CliError::Config(format!("{}: `{PRESET_KEY}` must be a string", path.display())))?;
            if preset_name.is_none() {
                preset_name = Some(name.to_owned());
            }
        }
        file_table = Some(table);
    }
    let base = preset(preset_name.as_deref().unwrap_or("default"))?;
    let mut merged = to_table(&base)?;
    if let Some(t) = file_table {
        merge(&mut merged, t);
    }
    if let Some(seed) = &source.env_seed {
        let seed: u64 =
            seed.trim().parse().map_err(|e| CliError::Config(format!("{SEED_ENV}={seed:?} is not a seed: {e}")))?;
        merged.insert("seed".into(), seed_value(seed)?);
    }
    for o in source.overrides {
        apply_override(&mut merged, o)?;
    }
    parse_table(merged)
}

/// Typed parse of a merged table, then validation.
pub fn parse_table(table: Table) -> Result<TrainConfig> {
    let config: TrainConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("field `{path}`: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_str(text: &str) -> Result<TrainConfig> {
    let table: Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    parse_table(table)
}

pub fn to_table(config: &TrainConfig) -> Result<Table> {
    Table::try_from(config).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
}

/// Canonical text form; its hash identifies a config.
pub fn to_toml(config: &TrainConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn seed_value(seed: u64) -> Result<Value> {
    i64::try_from(seed)
        .map(Value::Integer)
        .map_err(|_| CliError::Config(format!("seed {seed} exceeds the largest TOML integer")))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c=value`. The value is read as a TOML literal, falling back to a
/// bare string so that type errors are reported by the typed parse.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim().trim_start_matches("--");
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = parse_literal(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("split yields at least one part");
    let mut node = table;
    for (depth, p) in parts.iter().enumerate() {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(CliError::Config(format!("field `{}` is not a table", parts[..=depth].join("."))));
            }
        };
    }
    node.insert(leaf.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}")).map(|w| w.v).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in preset_names() {
            preset(name).unwrap().validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn literal_parsing() {
        assert_eq!(parse_literal("0.5"), Value::Float(0.5));
        assert_eq!(parse_literal("[8, 8, 8]"), Value::Array(vec![Value::Integer(8); 3]));
        assert_eq!(parse_literal("abc"), Value::String("abc".into()));
        assert_eq!(parse_literal("\"abc\""), Value::String("abc".into()));
    }

    #[test]
    fn overrides_create_nested_keys() {
        let mut t = Table::new();
        apply_override(&mut t, "optimizer.lr=0.1").unwrap();
        assert_eq!(t["optimizer"]["lr"], Value::Float(0.1));
        assert!(apply_override(&mut t, "optimizer.lr.x=1").is_err());
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
    }
}
