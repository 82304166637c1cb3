//! Run configuration: TOML file, dotted-path overrides, and hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::QueuePolicy;
use crate::checkpoint::sha256_hex;
use crate::decoder::DecoderDims;
use crate::error::{Error, Result};
use crate::metrics::Averaging;
use crate::optim::OptimConfig;
use crate::synth::GeneratorConfig;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "CTRG_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub decoder: DecoderConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Structure catalog file; the built-in chest CT catalog when absent.
    pub catalog: Option<PathBuf>,
    /// Corpus file written by `gen-data`; generated in memory when absent.
    pub corpus: Option<PathBuf>,
    pub generator: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_q: usize,
    pub d_a: usize,
    pub d_o: usize,
    pub d_t: usize,
    pub d_p: usize,
    pub text_buckets: usize,
    pub text_seed: u64,
    /// Patches kept per structure.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// When false, stage 1 writes the untrained initialization.
    pub enabled: bool,
    pub itc: bool,
    pub kl: bool,
    pub alpha: f64,
    pub tau: f64,
    pub queue_size: usize,
    pub queue: QueuePolicy,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub dims: DecoderDims,
    pub use_sv: bool,
    pub use_ts: bool,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub averaging: Averaging,
    pub ks: Vec<usize>,
    pub max_gen_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            decoder: DecoderConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            catalog: None,
            corpus: None,
            generator: GeneratorConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 64,
            d_q: 64,
            d_a: 64,
            d_o: 64,
            d_t: 64,
            d_p: 32,
            text_buckets: 4096,
            text_seed: 11,
            k: 10,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            itc: true,
            kl: true,
            alpha: 0.2,
            tau: 0.07,
            queue_size: 64,
            queue: QueuePolicy::Diversity,
            optim: OptimConfig {
                lr: 2e-3,
                steps: 2000,
                ..OptimConfig::default()
            },
        }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dims: DecoderDims::default(),
            use_sv: true,
            use_ts: true,
            optim: OptimConfig {
                lr: 2e-3,
                steps: 1000,
                ..OptimConfig::default()
            },
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            averaging: Averaging::Micro,
            ks: vec![1, 5, 10],
            max_gen_len: 127,
        }
    }
}

/// Parses `value` as a TOML scalar or array, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot separated) in `root` to `raw`.
pub fn apply_override(root: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override path {path:?}")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {k} is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text`, applies `path=value` overrides, and validates.
    pub fn with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (path, raw) in overrides {
            apply_override(&mut table, path, raw)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (defaults when `path` is `None`), applies overrides,
    /// then the output-directory environment override.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = Self::with_overrides(&text, overrides)?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pretrain;
        if !(0.0..=1.0).contains(&p.alpha) {
            return Err(Error::Config(format!("pretrain.alpha = {} outside [0, 1]", p.alpha)));
        }
        if !(0.01..=1.0).contains(&p.tau) {
            return Err(Error::Config(format!("pretrain.tau = {} outside [0.01, 1]", p.tau)));
        }
        if p.queue_size == 0 {
            return Err(Error::Config("pretrain.queue_size must be at least 1".into()));
        }
        p.optim.validate()?;
        self.decoder.optim.validate()?;
        let g = &self.data.generator;
        let n_v: usize = (0..3)
            .map(|a| if g.patch[a] == 0 { 0 } else { g.volume[a] / g.patch[a] })
            .product();
        if self.model.k == 0 || self.model.k > n_v {
            return Err(Error::Config(format!("model.k = {} must be in 1..={n_v}", self.model.k)));
        }
        let m = &self.model;
        if [m.d_v, m.d_q, m.d_a, m.d_o, m.d_t, m.d_p, m.text_buckets].contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.decoder.use_sv && !self.decoder.use_ts {
            return Err(Error::Config("decoder.use_sv and decoder.use_ts cannot both be off".into()));
        }
        if self.eval.max_gen_len == 0 || self.eval.ks.is_empty() {
            return Err(Error::Config("eval.max_gen_len and eval.ks must be non-empty".into()));
        }
        Ok(())
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(c.to_toml().as_bytes())
    }

    /// Hash of the settings that determine the stage-1 checkpoint.
    pub fn stage1_hash(&self) -> String {
        let key = (self.seed, &self.data, &self.model, &self.pretrain);
        sha256_hex(serde_json::to_string(&key).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn overrides_by_dotted_path() {
        let ov = |p: &str, v: &str| (p.to_string(), v.to_string());
        let c = RunConfig::with_overrides(
            "seed = 3\n[pretrain]\nalpha = 0.4\n",
            &[ov("pretrain.alpha", "0.1"), ov("pretrain.queue", "fifo"), ov("data.generator.volume", "[32, 32, 8]")],
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.pretrain.alpha, 0.1);
        assert_eq!(c.pretrain.queue, QueuePolicy::Fifo);
        assert_eq!(c.data.generator.volume, [32, 32, 8]);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["[pretrain]\nalpha = 1.5", "[model]\nk = 99", "bogus = 1", "[pretrain.optim]\nbatch_size = 0"] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.decoder.use_ts = false;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.stage1_hash(), b.stage1_hash());
    }
}
