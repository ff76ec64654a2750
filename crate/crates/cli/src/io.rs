use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use attrlab::data::{load_jsonl, Dataset, Vocab};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataSection;

/// Input problem the user can fix by changing flags or the config file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub checkpoint_sha256: Option<String>,
    pub data_sha256: Option<String>,
}

impl Provenance {
    pub fn new(command: &str, config_sha256: String) -> Self {
        Self {
            tool: "attrlab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: None,
            config_sha256,
            checkpoint_sha256: None,
            data_sha256: None,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn checkpoint(mut self, path: &Path) -> Result<Self> {
        self.checkpoint_sha256 = Some(file_sha256(path)?);
        Ok(self)
    }

    pub fn data(mut self, hash: &str) -> Self {
        self.data_sha256 = Some(hash.to_string());
        self
    }

    fn csv_comment(&self) -> String {
        let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| "-".into());
        format!(
            "# {} {} command={} seed={} config_sha256={} checkpoint_sha256={} data_sha256={}\n",
            self.tool,
            self.version,
            self.command,
            self.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
            self.config_sha256,
            opt(&self.checkpoint_sha256),
            opt(&self.data_sha256),
        )
    }
}

#[derive(Serialize, Deserialize)]
pub struct Envelope<T> {
    pub provenance: Provenance,
    pub kind: String,
    pub results: T,
}

pub fn write_json<T: Serialize>(path: &Path, provenance: &Provenance, kind: &str, results: &T) -> Result<()> {
    let env = Envelope {
        provenance: provenance.clone(),
        kind: kind.to_string(),
        results,
    };
    let text = serde_json::to_string_pretty(&env)? + "\n";
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Envelope<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn peek_kind(path: &Path) -> Result<String> {
    #[derive(Deserialize)]
    struct Kind {
        kind: String,
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str::<Kind>(&text)
        .with_context(|| format!("parsing {}", path.display()))?
        .kind)
}

/// Writes a provenance comment line followed by the CSV body.
pub fn write_csv<F>(path: &Path, provenance: &Provenance, body: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> attrlab::Result<()>,
{
    let mut buf = provenance.csv_comment().into_bytes();
    body(&mut buf)?;
    write_file(path, &buf)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub struct DataDir {
    pub vocab: Vocab,
    pub train: Dataset,
    pub test: Dataset,
    pub counterexamples: Option<Dataset>,
    pub sha256: String,
}

impl DataDir {
    pub fn split(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            "counterexamples" => self
                .counterexamples
                .as_ref()
                .ok_or_else(|| usage("data directory has no counterexamples.jsonl")),
            other => Err(usage(format!("unknown split {other:?}"))),
        }
    }
}

fn split_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.jsonl"))
}

pub fn load_data(dir: &Path, cfg: &DataSection) -> Result<DataDir> {
    let vocab_path = dir.join("vocab.json");
    let vocab = Vocab::load(&vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(std::fs::read(&vocab_path)?);
    let max_len = cfg.max_len();
    let mut load = |name: &str| -> Result<Option<Dataset>> {
        let path = split_path(dir, name);
        if !path.exists() {
            return Ok(None);
        }
        hasher.update(std::fs::read(&path)?);
        let ds = load_jsonl(&path, &cfg.schema, &cfg.label_names, &vocab, max_len, name)
            .with_context(|| format!("loading {}", path.display()))?;
        Ok(Some(ds))
    };
    let train = load("train")?.ok_or_else(|| anyhow::anyhow!("missing {}", split_path(dir, "train").display()))?;
    let test = load("test")?.ok_or_else(|| anyhow::anyhow!("missing {}", split_path(dir, "test").display()))?;
    let counterexamples = load("counterexamples")?;
    Ok(DataDir {
        vocab,
        train,
        test,
        counterexamples,
        sha256: format!("{:x}", hasher.finalize()),
    })
}

/// First `limit` instances, or all of them.
pub fn head(ds: &Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        None => Ok(ds.clone()),
        Some(0) => Err(usage("--limit must be positive")),
        Some(n) => {
            let ids: Vec<String> = ds.ids().into_iter().take(n).collect();
            Ok(ds.subset(&ids)?)
        }
    }
}
