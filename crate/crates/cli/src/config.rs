use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sparc_core::data::{generate, load_jsonl};
use sparc_core::model::PretrainConfig;
use sparc_core::{Dataset, DatasetKind, DomainSpec, RunConfig, TinyLmConfig};

use crate::CliError;

/// A dataset read from disk rather than generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlSource {
    pub path: PathBuf,
    pub kind: DatasetKind,
    /// Defaults to the file stem.
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub run: RunConfig,
    pub model: TinyLmConfig,
    pub pretrain: PretrainConfig,
    /// Corpus for `pretrain`; `domains` is used when this is empty.
    pub pretrain_domains: Vec<DomainSpec>,
    /// Generated datasets, in stage order.
    pub domains: Vec<DomainSpec>,
    /// Datasets loaded from JSONL, staged after the generated ones.
    pub jsonl: Vec<JsonlSource>,
    pub data_seed: u64,
    pub out: Option<PathBuf>,
}

/// Flag values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trainer: Option<String>,
    pub mode: Option<String>,
    pub k: Option<usize>,
    pub tokens: Option<usize>,
    pub tau_align: Option<f64>,
    pub tau_reuse: Option<f64>,
    pub out: Option<PathBuf>,
    /// `dotted.path=json` assignments applied to the raw document.
    pub set: Vec<String>,
}

fn assign(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {spec:?}")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Usage(format!("--set {path}: {key} is not inside an object"))
        })?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl CliConfig {
    /// Read `path` (or start from defaults), apply `--set` assignments, then
    /// the typed flags.
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<CliConfig, CliError> {
        let mut doc = match path {
            Some(p) => {
                serde_json::from_slice::<Value>(&fs::read(p).map_err(sparc_core::SparcError::from)?)
                    .map_err(sparc_core::SparcError::from)?
            }
            None => Value::Object(Default::default()),
        };
        for s in &o.set {
            assign(&mut doc, s)?;
        }
        let mut cfg: CliConfig =
            serde_json::from_value(doc).map_err(sparc_core::SparcError::from)?;
        if let Some(seed) = o.seed {
            cfg.run.seed = seed;
            cfg.model.seed = seed;
            cfg.pretrain.seed = seed;
        }
        if let Some(t) = &o.trainer {
            cfg.run.trainer = t
                .parse()
                .map_err(|_| CliError::Usage(format!("unknown trainer {t:?}")))?;
        }
        if let Some(m) = &o.mode {
            cfg.run.mode = m
                .parse()
                .map_err(|_| CliError::Usage(format!("unknown mode {m:?}")))?;
        }
        if let Some(k) = o.k {
            cfg.run.k = k;
        }
        if let Some(t) = o.tokens {
            cfg.run.tokens = t;
        }
        if let Some(t) = o.tau_align {
            cfg.run.tau_align = t;
        }
        if let Some(t) = o.tau_reuse {
            cfg.run.tau_reuse = t;
        }
        if o.out.is_some() {
            cfg.out = o.out.clone();
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| {
            CliError::Usage("no output path: pass --out or set \"out\" in the config".into())
        })
    }

    /// Generated domains followed by JSONL sources.
    pub fn datasets(&self, lenient: bool) -> Result<Vec<Dataset>, CliError> {
        let mut out = Vec::new();
        for spec in &self.domains {
            out.push(generate(spec, self.data_seed)?);
        }
        for src in &self.jsonl {
            let mut ds = load_jsonl(&src.path, src.kind, lenient)?;
            if let Some(id) = &src.id {
                ds.id = id.clone();
            }
            out.push(ds);
        }
        if out.is_empty() {
            return Err(CliError::Usage(
                "the config lists no domains or jsonl datasets".into(),
            ));
        }
        Ok(out)
    }
}
