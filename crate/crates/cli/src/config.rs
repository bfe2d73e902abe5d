use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dsrag::clients::{
    Embedder, FactReader, HashEmbedder, HttpClient, HttpConfig, HttpEmbedder, HttpReader, HttpReranker,
    OverlapReranker, Reader, Reranker, RunLog,
};
use dsrag::consistency::TaskKind;
use dsrag::evalharness::StrategyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    /// Deterministic token-hash vectors; no service needed.
    Hash { dims: usize, seed: u64 },
    Http(HttpConfig),
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hash { dims: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RerankerSpec {
    /// Counts shared query tokens; no service needed.
    Overlap,
    Http(HttpConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReaderSpec {
    /// Rule-based reader from a JSON-lines rule file.
    Facts { rules: PathBuf },
    Http(HttpConfig),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecontamStage {
    #[default]
    Off,
    /// Drop retrieved documents that share an n-gram with the test set.
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecontamConfig {
    pub stage: DecontamStage,
    pub ngram: usize,
    pub include_choices: bool,
    /// Test set the filter is built from; defaults to the evaluated one.
    pub test_set: Option<PathBuf>,
}

impl Default for DecontamConfig {
    fn default() -> Self {
        Self {
            stage: DecontamStage::Off,
            ngram: dsrag::decontam::MULTIPLE_CHOICE_NGRAM,
            include_choices: false,
            test_set: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub shards: Option<PathBuf>,
    pub shard_size: usize,
    pub normalize: bool,
    pub test_set: Option<PathBuf>,
    pub task_kind: Option<TaskKind>,
    pub template: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub workers: usize,
    pub runs: usize,
    /// Append-only record of every service request, bodies hashed.
    pub request_log: Option<PathBuf>,
    pub embedder: EmbedderSpec,
    pub reranker: Option<RerankerSpec>,
    pub reader: Option<ReaderSpec>,
    pub judge: Option<ReaderSpec>,
    pub decontam: DecontamConfig,
    pub strategy: StrategyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            shards: None,
            shard_size: 100_000,
            normalize: true,
            test_set: None,
            task_kind: None,
            template: None,
            run_dir: None,
            workers: 4,
            runs: 1,
            request_log: None,
            embedder: EmbedderSpec::default(),
            reranker: None,
            reader: None,
            judge: None,
            decontam: DecontamConfig::default(),
            strategy: StrategyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn log(&self) -> Result<Option<Arc<RunLog>>> {
        self.request_log
            .as_ref()
            .map(|p| {
                RunLog::open(p)
                    .map(Arc::new)
                    .with_context(|| format!("opening request log {}", p.display()))
            })
            .transpose()
    }

    fn http(&self, cfg: &HttpConfig) -> Result<HttpClient> {
        let client = HttpClient::new(cfg.clone()).with_context(|| format!("client for {:?}", cfg.endpoint))?;
        Ok(match self.log()? {
            Some(log) => client.with_log(log),
            None => client,
        })
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        Ok(match &self.embedder {
            EmbedderSpec::Hash { dims, seed } => {
                if *dims == 0 {
                    bail!("embedder dims must be positive");
                }
                Box::new(HashEmbedder::new(*dims, *seed))
            }
            EmbedderSpec::Http(cfg) => Box::new(HttpEmbedder::new(self.http(cfg)?, self.normalize)),
        })
    }

    pub fn embedder_batch(&self) -> usize {
        match &self.embedder {
            EmbedderSpec::Hash { .. } => 256,
            EmbedderSpec::Http(cfg) => cfg.batch_size.max(1),
        }
    }

    pub fn reranker(&self) -> Result<Option<Box<dyn Reranker>>> {
        Ok(match &self.reranker {
            None => None,
            Some(RerankerSpec::Overlap) => Some(Box::new(OverlapReranker)),
            Some(RerankerSpec::Http(cfg)) => Some(Box::new(HttpReranker::new(self.http(cfg)?))),
        })
    }

    fn build_reader(&self, spec: &ReaderSpec) -> Result<Box<dyn Reader>> {
        Ok(match spec {
            ReaderSpec::Facts { rules } => Box::new(FactReader::load(rules).map_err(anyhow::Error::msg)?),
            ReaderSpec::Http(cfg) => Box::new(HttpReader::new(self.http(cfg)?)),
        })
    }

    pub fn reader(&self) -> Result<Box<dyn Reader>> {
        match &self.reader {
            Some(spec) => self.build_reader(spec),
            None => bail!("no reader configured"),
        }
    }

    pub fn judge(&self) -> Result<Option<Box<dyn Reader>>> {
        self.judge.as_ref().map(|s| self.build_reader(s)).transpose()
    }

    pub fn embedder_description(&self) -> String {
        match &self.embedder {
            EmbedderSpec::Hash { dims, seed } => format!("hash(dims={dims},seed={seed})"),
            EmbedderSpec::Http(cfg) => format!("http({},{})", cfg.endpoint, cfg.model),
        }
    }
}

/// A missing required setting; reported as a usage error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// The path for `what`, which must be set and exist.
pub fn require_existing<'a>(path: Option<&'a PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path.ok_or_else(|| UsageError(format!("{what} is required")))?;
    if !p.exists() {
        return Err(UsageError(format!("{what} {} does not exist", p.display())).into());
    }
    Ok(p)
}

pub fn require<'a>(path: Option<&'a PathBuf>, what: &str) -> Result<&'a Path> {
    path.map(PathBuf::as_path)
        .ok_or_else(|| UsageError(format!("{what} is required")).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig {
            reader: Some(ReaderSpec::Facts {
                rules: "rules.jsonl".into(),
            }),
            reranker: Some(RerankerSpec::Http(HttpConfig {
                endpoint: "http://localhost:1/rerank".into(),
                ..HttpConfig::default()
            })),
            ..RunConfig::default()
        };
        c.strategy.n_trials = 3;
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("corpsu = \"x\"").is_err());
    }
}
