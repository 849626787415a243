//! Declarative experiment configuration.
//!
//! A config is a TOML file. `include = ["base.toml"]` pulls other files in
//! first; keys in the including file win, tables merge recursively and
//! arrays are replaced whole. Everything not given falls back to
//! [`ExperimentConfig::default`] except `seed`, which must be spelled out.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use lrlens::model::{LayerKind, ModelConfig};
use lrlens::train::{Method, TrainConfig};
use lrlens::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Relative paths resolve against the top-level config file.
    pub output_dir: PathBuf,
    pub corpus: PathBuf,
    pub methods: Vec<Method>,
    pub data: DataConfig,
    pub model: SharedModel,
    pub sizes: Vec<SizeConfig>,
    pub train: TrainDefaults,
    /// Per-method replacements for `train` fields, keyed by method name.
    pub overrides: BTreeMap<String, TrainOverride>,
    pub metrics: MetricSuite,
    pub grids: Grids,
    pub predict: PredictConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seq_len: usize,
    pub val_sequences: usize,
    /// Reads at most this many corpus bytes; 0 reads everything.
    pub max_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedModel {
    pub vocab_size: usize,
    pub rank: usize,
    pub sltrain_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeConfig {
    pub name: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDefaults {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rank: usize,
    pub galore_refresh: u64,
    pub galore_scale: f64,
    pub relora_reset: u64,
    pub checkpoint_every: u64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverride {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub rank: Option<usize>,
    pub galore_refresh: Option<u64>,
    pub galore_scale: Option<f64>,
    pub relora_reset: Option<u64>,
    pub warmup_frac: Option<f64>,
    pub final_lr_frac: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSuite {
    pub landscape: bool,
    pub pca: bool,
    pub interp: bool,
    pub spectra: bool,
    pub activations: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grids {
    pub alpha_max: f64,
    pub num_offsets: usize,
    pub directions: usize,
    pub normalize_directions: bool,
    pub pca_components: Vec<usize>,
    pub beta_points: usize,
    pub tau: f64,
    /// Validation batches fed through the model for activations.
    pub activation_batches: usize,
    /// Roles pooled for the whole-run singular value dumps.
    pub spectrum_roles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// `"synthetic"` or a CSV path with columns method,size,step,target.
    pub target: String,
    /// Noise standard deviation of the synthetic target.
    pub target_noise: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: PathBuf::from("data/corpus.txt"),
            methods: Method::ALL.to_vec(),
            data: DataConfig { seq_len: 32, val_sequences: 16, max_bytes: 0 },
            model: SharedModel { vocab_size: 256, rank: 8, sltrain_density: 0.05 },
            sizes: vec![
                SizeConfig { name: "small".into(), d_model: 32, n_layers: 2, n_heads: 4, d_ff: 64 },
                SizeConfig { name: "medium".into(), d_model: 48, n_layers: 2, n_heads: 4, d_ff: 96 },
            ],
            train: TrainDefaults {
                steps: 400,
                batch_size: 8,
                lr: 3e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                rank: 8,
                galore_refresh: 50,
                galore_scale: 0.25,
                relora_reset: 100,
                checkpoint_every: 100,
                warmup_frac: 0.1,
                final_lr_frac: 0.1,
            },
            overrides: BTreeMap::new(),
            metrics: MetricSuite { landscape: true, pca: true, interp: true, spectra: true, activations: true },
            grids: Grids {
                alpha_max: 0.5,
                num_offsets: 5,
                directions: 8,
                normalize_directions: true,
                pca_components: vec![1, 2],
                beta_points: 11,
                tau: lrlens::spectra::DEFAULT_TAU,
                activation_batches: 1,
                spectrum_roles: vec!["wq".into(), "wk".into(), "wv".into(), "wo".into(), "wup".into(), "wdown".into()],
            },
            predict: PredictConfig { target: "synthetic".into(), target_noise: 0.05 },
        }
    }
}

impl ExperimentConfig {
    /// Every violated constraint, not only the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.methods.is_empty() {
            v.push("methods must name at least one of the six supported methods".into());
        }
        let unique: BTreeSet<_> = self.methods.iter().collect();
        if unique.len() != self.methods.len() {
            v.push("methods contains duplicates".into());
        }
        if self.sizes.is_empty() {
            v.push("sizes must not be empty".into());
        }
        let names: BTreeSet<_> = self.sizes.iter().map(|s| s.name.as_str()).collect();
        if names.len() != self.sizes.len() {
            v.push("size names must be unique".into());
        }
        for s in &self.sizes {
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                v.push(format!("size name `{}` must be non-empty [A-Za-z0-9_-]", s.name));
            }
            for m in &self.methods {
                v.extend(self.model_config(s, *m).violations().into_iter().map(|e| format!("sizes.{}: {e}", s.name)));
            }
        }
        for key in self.overrides.keys() {
            match key.parse::<Method>() {
                Ok(m) if !self.methods.contains(&m) => v.push(format!("overrides.{key}: method is not in `methods`")),
                Ok(_) => {}
                Err(_) => v.push(format!("overrides.{key}: unknown method")),
            }
        }
        for m in &self.methods {
            v.extend(self.train_config(*m).violations().into_iter().map(|e| format!("{}: {e}", m.name())));
        }
        if self.data.seq_len < 2 {
            v.push("data.seq_len must be ≥ 2".into());
        }
        if self.data.val_sequences == 0 {
            v.push("data.val_sequences must be > 0".into());
        }
        let g = &self.grids;
        if !(g.alpha_max.is_finite() && g.alpha_max > 0.0) {
            v.push("grids.alpha_max must be finite and > 0".into());
        }
        if g.num_offsets == 0 {
            v.push("grids.num_offsets must be > 0".into());
        }
        if g.directions == 0 {
            v.push("grids.directions must be > 0".into());
        }
        if g.pca_components.is_empty() || g.pca_components.contains(&0) {
            v.push("grids.pca_components must be non-empty 1-based indices".into());
        }
        if g.beta_points < 3 {
            v.push("grids.beta_points must be ≥ 3 for a barrier".into());
        }
        if !(g.tau.is_finite() && g.tau >= 0.0) {
            v.push("grids.tau must be finite and ≥ 0".into());
        }
        if g.activation_batches == 0 {
            v.push("grids.activation_batches must be > 0".into());
        }
        if self.metrics.activations && !self.methods.contains(&Method::FullRank) {
            v.push("metrics.activations compares against full_rank, which is not in `methods`".into());
        }
        if !(self.predict.target_noise.is_finite() && self.predict.target_noise >= 0.0) {
            v.push("predict.target_noise must be finite and ≥ 0".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Model config for one size; all methods share the seed so their inits coincide.
    pub fn model_config(&self, size: &SizeConfig, method: Method) -> ModelConfig {
        ModelConfig {
            vocab_size: self.model.vocab_size,
            d_model: size.d_model,
            n_layers: size.n_layers,
            n_heads: size.n_heads,
            d_ff: size.d_ff,
            max_seq_len: self.data.seq_len,
            layer_kind: method.layer_kind(),
            rank: self.model.rank,
            seed: self.seed,
            sltrain_density: self.model.sltrain_density,
            ..ModelConfig::default()
        }
    }

    pub fn dense_model_config(&self, size: &SizeConfig) -> ModelConfig {
        ModelConfig { layer_kind: LayerKind::Dense, ..self.model_config(size, Method::FullRank) }
    }

    pub fn train_config(&self, method: Method) -> TrainConfig {
        let t = &self.train;
        let o = self.overrides.get(method.name()).cloned().unwrap_or_default();
        TrainConfig {
            method,
            steps: t.steps,
            batch_size: o.batch_size.unwrap_or(t.batch_size),
            lr: o.lr.unwrap_or(t.lr),
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            rank: o.rank.unwrap_or(t.rank),
            galore_refresh: o.galore_refresh.unwrap_or(t.galore_refresh),
            galore_scale: o.galore_scale.unwrap_or(t.galore_scale),
            relora_reset: o.relora_reset.unwrap_or(t.relora_reset),
            checkpoint_every: t.checkpoint_every,
            seed: self.seed,
            warmup_frac: o.warmup_frac.unwrap_or(t.warmup_frac),
            final_lr_frac: o.final_lr_frac.unwrap_or(t.final_lr_frac),
        }
    }

    pub fn size(&self, name: &str) -> Option<&SizeConfig> {
        self.sizes.iter().find(|s| s.name == name)
    }

    /// TOML dump of the defaults, loadable as-is.
    pub fn defaults_toml() -> String {
        toml::to_string(&Self::default()).expect("defaults serialize")
    }
}

/// A loaded config plus what its paths resolve against.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.config.output_dir)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.base_dir.join(&self.config.corpus)
    }

    pub fn read_corpus(&self) -> Result<Vec<u8>> {
        let path = self.corpus_path();
        let mut bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if self.config.data.max_bytes > 0 {
            bytes.truncate(self.config.data.max_bytes);
        }
        Ok(bytes)
    }

    /// SHA-256 over the resolved config with the output location removed
    /// and the corpus path replaced by the corpus content hash, so the same
    /// experiment hashes alike wherever it is run.
    pub fn config_hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(&self.config)?;
        let obj = value.as_object_mut().expect("config is a table");
        obj.remove("output_dir");
        obj.insert("corpus".into(), serde_json::Value::String(hex::encode(Sha256::digest(self.read_corpus()?))));
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
    }
}

fn read_table(path: &Path, stack: &mut Vec<PathBuf>) -> Result<toml::Table> {
    let canonical = path.canonicalize().map_err(|e| Error::io(path, e))?;
    if stack.contains(&canonical) {
        return Err(Error::Config(vec![format!("include cycle through {}", path.display())]));
    }
    stack.push(canonical);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| Error::Config(vec![format!("{}: {e}", path.display())]))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(Error::Config(vec![format!("{}: include entries must be strings, got {other}", path.display())])),
            })
            .collect::<Result<_>>()?,
        Some(other) => {
            return Err(Error::Config(vec![format!("{}: include must be an array of paths, got {other}", path.display())]))
        }
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        let sub = read_table(&dir.join(inc), stack)?;
        merge(&mut merged, sub);
    }
    merge(&mut merged, table);
    stack.pop();
    Ok(merged)
}

/// Deep-merges `over` into `base`; `over` wins on conflicts.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Loads, merges and validates a config file.
pub fn load(path: &Path) -> Result<Loaded> {
    let user = read_table(path, &mut Vec::new())?;
    if !user.contains_key("seed") {
        return Err(Error::Config(vec!["seed is mandatory".into()]));
    }
    let mut table: toml::Table = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
    // Array-of-table and map sections replace the defaults rather than extend them.
    for key in ["sizes", "overrides", "methods"] {
        if user.contains_key(key) {
            table.remove(key);
        }
    }
    merge(&mut table, user);
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))?;
    config.validate()?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base_dir: if base_dir.as_os_str().is_empty() { PathBuf::from(".") } else { base_dir } })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.toml", &ExperimentConfig::defaults_toml());
        assert_eq!(load(&p).unwrap().config, ExperimentConfig::default());
    }

    #[test]
    fn includes_merge_with_including_file_winning() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "base.toml", "seed = 1\n[train]\nsteps = 20\nlr = 0.01\ncheckpoint_every = 10\n");
        let p = write(dir.path(), "top.toml", "include = [\"base.toml\"]\nseed = 5\n[train]\nlr = 0.02\n");
        let c = load(&p).unwrap().config;
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.steps, 20);
        assert_eq!(c.train.lr, 0.02);
        assert_eq!(c.train.batch_size, ExperimentConfig::default().train.batch_size);
    }

    #[test]
    fn include_cycles_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.toml", "include = [\"b.toml\"]\nseed = 1\n");
        let p = write(dir.path(), "b.toml", "include = [\"a.toml\"]\n");
        assert!(matches!(load(&p), Err(Error::Config(v)) if v[0].contains("cycle")));
    }

    #[test]
    fn seed_is_mandatory() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.toml", "[train]\nsteps = 10\n");
        assert!(matches!(load(&p), Err(Error::Config(v)) if v == vec!["seed is mandatory".to_string()]));
    }

    #[test]
    fn every_violation_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.toml",
            "seed = 1\nmethods = [\"galore\"]\n[train]\nsteps = 0\n[grids]\nbeta_points = 2\ntau = -1.0\n",
        );
        let Err(Error::Config(v)) = load(&p) else { panic!("expected config error") };
        assert!(v.iter().any(|m| m.contains("steps")));
        assert!(v.iter().any(|m| m.contains("beta_points")));
        assert!(v.iter().any(|m| m.contains("tau")));
        assert!(v.iter().any(|m| m.contains("full_rank")));
    }

    #[test]
    fn unknown_keys_and_methods_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.toml", "seed = 1\nbogus = 3\n");
        assert!(matches!(load(&p), Err(Error::Config(_))));
        let p = write(dir.path(), "d.toml", "seed = 1\nmethods = [\"lora\"]\n");
        assert!(matches!(load(&p), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply_per_method() {
        let mut c = ExperimentConfig::default();
        c.overrides.insert("galore".into(), TrainOverride { lr: Some(0.01), ..Default::default() });
        assert_eq!(c.train_config(Method::Galore).lr, 0.01);
        assert_eq!(c.train_config(Method::Fira).lr, c.train.lr);
        c.overrides.insert("nope".into(), TrainOverride::default());
        assert!(c.violations().iter().any(|v| v.contains("overrides.nope")));
    }

    #[test]
    fn hash_ignores_output_location() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "corpus.txt", "hello world, hello world");
        let a = Loaded {
            config: ExperimentConfig { corpus: "corpus.txt".into(), ..Default::default() },
            base_dir: dir.path().into(),
        };
        let mut b = a.clone();
        b.config.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.config.seed = 9;
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
    }
}
