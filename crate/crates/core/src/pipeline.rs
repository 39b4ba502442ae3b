//! End-to-end orchestration: embed, fit and apply PCA, search, build
//! sub-corpora, and run diagnostics, all inside one output directory.
//!
//! Every stage records a fingerprint of its parameters and inputs plus the
//! SHA-256 of its outputs in `stages.json`. A pipeline run skips a stage
//! when the fingerprint is unchanged and all outputs are still present with
//! the recorded hashes.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{open_monolingual, open_parallel, sample_indices, CorpusHandle, CorpusRole, LineReader};
use crate::diagnostics::{centroid_similarity, write_centroids_tsv};
use crate::embedding_store::{read_all, read_embeddings, read_header, EmbeddingMatrix, EmbeddingWriter, HashEmbedder};
use crate::error::{Error, IoContext, Result};
use crate::hashing::{sha256_bytes, sha256_file};
use crate::pca::{self, CovarianceAccumulator, PcaModel};
use crate::selection_builder::{
    build_mixed_corpora, build_rank_corpora, emit_ranked_examples, mixed_file_names, rank_file_names, RankOptions,
    MANIFEST_FILE,
};
use crate::semantic_search::{search_report, top_n_search, SearchOptions, SelectionMatrix};

pub const IN_DOMAIN_EMB: &str = "in_domain.emb";
pub const OOD_EMB: &str = "ood.emb";
pub const TEST_EMB: &str = "test_set.emb";
pub const PCA_MODEL: &str = "pca.model";
pub const IN_DOMAIN_REDUCED: &str = "in_domain.reduced.emb";
pub const OOD_REDUCED: &str = "ood.reduced.emb";
pub const TEST_REDUCED: &str = "test_set.reduced.emb";
pub const SELECTION_TSV: &str = "selection.tsv";
pub const SELECTION_BIN: &str = "selection.sel";
pub const SEARCH_REPORT: &str = "search_report.txt";
pub const EXAMPLES: &str = "examples.txt";
pub const CENTROIDS_TSV: &str = "centroids.tsv";
pub const STAGES_FILE: &str = "stages.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.txt";
const LOCK_FILE: &str = ".lock";

const EMBED_BATCH: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    File,
    Hash,
    Bridge,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(Backend::File),
            "hash" => Ok(Backend::Hash),
            "bridge" => Ok(Backend::Bridge),
            other => Err(Error::Validation(format!("unknown backend {other:?} (file|hash|bridge)"))),
        }
    }
}

impl Backend {
    fn as_str(self) -> &'static str {
        match self {
            Backend::File => "file",
            Backend::Hash => "hash",
            Backend::Bridge => "bridge",
        }
    }
}

/// Which half of the general-domain corpus is compared with the in-domain text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Side::Source),
            "target" => Ok(Side::Target),
            other => Err(Error::Validation(format!("unknown compare side {other:?} (source|target)"))),
        }
    }
}

impl Side {
    fn as_str(self) -> &'static str {
        match self {
            Side::Source => "source",
            Side::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub in_domain: Option<PathBuf>,
    pub ood_source: Option<PathBuf>,
    pub ood_target: Option<PathBuf>,
    pub test_set: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub compare_side: Side,
    pub backend: Backend,
    pub hash_dims: usize,
    pub hash_seed: u64,
    pub bridge_command: Option<String>,
    pub in_domain_embeddings: Option<PathBuf>,
    pub ood_embeddings: Option<PathBuf>,
    pub test_set_embeddings: Option<PathBuf>,
    pub pca_enabled: bool,
    pub pca_in_dims: usize,
    pub pca_out_dims: usize,
    pub pca_sample: u64,
    pub pca_seed: u64,
    pub n: usize,
    pub chunk_rows: usize,
    pub workers: usize,
    pub dedup: bool,
    pub min_score: Option<f32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            in_domain: None,
            ood_source: None,
            ood_target: None,
            test_set: None,
            out_dir: None,
            compare_side: Side::Source,
            backend: Backend::Hash,
            hash_dims: pca::DEFAULT_IN_DIMS,
            hash_seed: 0,
            bridge_command: None,
            in_domain_embeddings: None,
            ood_embeddings: None,
            test_set_embeddings: None,
            pca_enabled: true,
            pca_in_dims: pca::DEFAULT_IN_DIMS,
            pca_out_dims: pca::DEFAULT_OUT_DIMS,
            pca_sample: pca::DEFAULT_SAMPLE_ROWS,
            pca_seed: 0,
            n: crate::semantic_search::DEFAULT_TOP_N,
            chunk_rows: 65_536,
            workers: 0,
            dedup: false,
            min_score: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("bad value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Validation(format!("bad value for {key}: {value:?} (expected true/false)"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Reads a flat `key = value` file; `#` starts a comment line.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).at(path)?;
        let mut config = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Validation(format!("{}:{}: expected `key = value`", path.display(), i + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "in_domain" => self.in_domain = opt_path(value),
            "ood_source" => self.ood_source = opt_path(value),
            "ood_target" => self.ood_target = opt_path(value),
            "test_set" => self.test_set = opt_path(value),
            "out_dir" => self.out_dir = opt_path(value),
            "compare_side" => self.compare_side = value.parse()?,
            "backend" => self.backend = value.parse()?,
            "hash.dims" => self.hash_dims = parse(key, value)?,
            "hash.seed" => self.hash_seed = parse(key, value)?,
            "bridge.command" => self.bridge_command = (!value.is_empty()).then(|| value.to_owned()),
            "embeddings.in_domain" => self.in_domain_embeddings = opt_path(value),
            "embeddings.ood" => self.ood_embeddings = opt_path(value),
            "embeddings.test_set" => self.test_set_embeddings = opt_path(value),
            "pca.enabled" => self.pca_enabled = parse_bool(key, value)?,
            "pca.in_dims" => self.pca_in_dims = parse(key, value)?,
            "pca.out_dims" => self.pca_out_dims = parse(key, value)?,
            "pca.sample" => self.pca_sample = parse(key, value)?,
            "pca.seed" => self.pca_seed = parse(key, value)?,
            "search.n" => self.n = parse(key, value)?,
            "search.chunk_rows" => self.chunk_rows = parse(key, value)?,
            "search.workers" => self.workers = parse(key, value)?,
            "build.dedup" => self.dedup = parse_bool(key, value)?,
            "build.min_score" => {
                self.min_score = if value.is_empty() { None } else { Some(parse(key, value)?) }
            }
            other => return Err(Error::Validation(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("in_domain", show_path(&self.in_domain)),
            ("ood_source", show_path(&self.ood_source)),
            ("ood_target", show_path(&self.ood_target)),
            ("test_set", show_path(&self.test_set)),
            ("out_dir", show_path(&self.out_dir)),
            ("compare_side", self.compare_side.as_str().to_owned()),
            ("backend", self.backend.as_str().to_owned()),
            ("hash.dims", self.hash_dims.to_string()),
            ("hash.seed", self.hash_seed.to_string()),
            ("bridge.command", self.bridge_command.clone().unwrap_or_default()),
            ("embeddings.in_domain", show_path(&self.in_domain_embeddings)),
            ("embeddings.ood", show_path(&self.ood_embeddings)),
            ("embeddings.test_set", show_path(&self.test_set_embeddings)),
            ("pca.enabled", self.pca_enabled.to_string()),
            ("pca.in_dims", self.pca_in_dims.to_string()),
            ("pca.out_dims", self.pca_out_dims.to_string()),
            ("pca.sample", self.pca_sample.to_string()),
            ("pca.seed", self.pca_seed.to_string()),
            ("search.n", self.n.to_string()),
            ("search.chunk_rows", self.chunk_rows.to_string()),
            ("search.workers", self.workers.to_string()),
            ("build.dedup", self.dedup.to_string()),
            ("build.min_score", self.min_score.map(|v| v.to_string()).unwrap_or_default()),
        ]
    }

    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        let p = value
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("missing required setting `{key}`")))?;
        if !p.is_file() {
            return Err(Error::Validation(format!("`{key}`: no such file {}", p.display())));
        }
        Ok(p)
    }

    /// Checks parameters and input files. Does no expensive work.
    pub fn validate(&self) -> Result<()> {
        self.require(&self.in_domain, "in_domain")?;
        self.require(&self.ood_source, "ood_source")?;
        self.require(&self.ood_target, "ood_target")?;
        if self.test_set.is_some() {
            self.require(&self.test_set, "test_set")?;
        }
        if self.out_dir.is_none() {
            return Err(Error::Validation("missing required setting `out_dir`".into()));
        }
        if self.n == 0 {
            return Err(Error::Validation("search.n must be at least 1".into()));
        }
        if self.chunk_rows == 0 {
            return Err(Error::Validation("search.chunk_rows must be at least 1".into()));
        }
        if self.pca_enabled {
            if self.pca_out_dims == 0 || self.pca_out_dims > self.pca_in_dims {
                return Err(Error::Validation(format!(
                    "pca.out_dims ({}) must be in 1..=pca.in_dims ({})",
                    self.pca_out_dims, self.pca_in_dims
                )));
            }
            if self.pca_sample < 2 {
                return Err(Error::Validation("pca.sample must be at least 2".into()));
            }
        }
        if let Some(t) = self.min_score {
            if !t.is_finite() {
                return Err(Error::Validation("build.min_score must be finite".into()));
            }
        }
        let expect_dims = |dims: usize, what: &str| -> Result<()> {
            if self.pca_enabled && dims != self.pca_in_dims {
                return Err(Error::Validation(format!(
                    "{what} has {dims} dims but pca.in_dims is {}",
                    self.pca_in_dims
                )));
            }
            Ok(())
        };
        match self.backend {
            Backend::Hash => {
                if self.hash_dims < 2 {
                    return Err(Error::Validation("hash.dims must be at least 2".into()));
                }
                expect_dims(self.hash_dims, "hash backend")?;
            }
            Backend::Bridge => {
                if self.bridge_command.as_deref().is_none_or(|c| c.trim().is_empty()) {
                    return Err(Error::Validation("backend `bridge` needs `bridge.command`".into()));
                }
            }
            Backend::File => {
                let mut keys = vec![
                    (&self.in_domain_embeddings, "embeddings.in_domain"),
                    (&self.ood_embeddings, "embeddings.ood"),
                ];
                if self.test_set.is_some() {
                    keys.push((&self.test_set_embeddings, "embeddings.test_set"));
                }
                for (value, key) in keys {
                    let p = self.require(value, key)?;
                    let header = read_header(p).map_err(|e| Error::Validation(format!("`{key}`: {e}")))?;
                    expect_dims(header.dims as usize, key)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Embed,
    PcaFit,
    PcaApply,
    Select,
    Build,
    Centroids,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Embed,
        Stage::PcaFit,
        Stage::PcaApply,
        Stage::Select,
        Stage::Build,
        Stage::Centroids,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Embed => "embed",
            Stage::PcaFit => "pca-fit",
            Stage::PcaApply => "pca-apply",
            Stage::Select => "select",
            Stage::Build => "build",
            Stage::Centroids => "centroids",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    fingerprint: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineReport {
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// Exclusive claim on an output directory for the lifetime of a run.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Validation(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Resolved embedding files for one run.
#[derive(Debug, Clone)]
struct EmbeddingPaths {
    in_domain: PathBuf,
    ood: PathBuf,
    test_set: Option<PathBuf>,
}

/// A validated configuration bound to its output directory.
pub struct Workspace {
    config: RunConfig,
    dir: PathBuf,
    in_domain: CorpusHandle,
    ood: CorpusHandle,
    test_set: Option<CorpusHandle>,
    hash_cache: HashMap<PathBuf, String>,
    _lock: DirLock,
}

impl Workspace {
    /// Validates the configuration and inputs, then claims the output directory.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let as_validation = |e: Error| match e {
            Error::Validation(_) => e,
            other => Error::Validation(other.to_string()),
        };
        let in_domain = open_monolingual(config.in_domain.as_ref().unwrap()).map_err(as_validation)?;
        let ood = open_parallel(config.ood_source.as_ref().unwrap(), config.ood_target.as_ref().unwrap())
            .map_err(as_validation)?;
        let test_set = match &config.test_set {
            Some(p) => Some(open_monolingual(p).map_err(as_validation)?.with_role(CorpusRole::TestSet)),
            None => None,
        };
        for (name, c) in [("in-domain", &in_domain), ("general-domain", &ood)] {
            if !c.validation_report().is_clean() {
                eprint!("{name} corpus: {}", c.validation_report());
            }
        }
        if config.backend == Backend::File {
            let check = |p: &Option<PathBuf>, lines: u64, key: &str| -> Result<()> {
                let rows = read_header(p.as_ref().unwrap())?.rows;
                if rows != lines {
                    return Err(Error::Validation(format!("`{key}` has {rows} rows but the corpus has {lines} lines")));
                }
                Ok(())
            };
            check(&config.in_domain_embeddings, in_domain.line_count(), "embeddings.in_domain")?;
            check(&config.ood_embeddings, ood.line_count(), "embeddings.ood")?;
            if let Some(t) = &test_set {
                check(&config.test_set_embeddings, t.line_count(), "embeddings.test_set")?;
            }
        }
        let dir = config.out_dir.clone().unwrap();
        fs::create_dir_all(&dir).at(&dir)?;
        let lock = DirLock::acquire(&dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), config.to_config_text()).at(&dir.join(RESOLVED_CONFIG))?;
        Ok(Workspace {
            config,
            dir,
            in_domain,
            ood,
            test_set,
            hash_cache: HashMap::new(),
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| self.config.pca_enabled || !matches!(s, Stage::PcaFit | Stage::PcaApply))
            .collect()
    }

    fn ood_compare_path(&self) -> &Path {
        match self.config.compare_side {
            Side::Source => self.ood.source_path(),
            Side::Target => self.ood.target_path().expect("general-domain corpus is parallel"),
        }
    }

    fn embeddings(&self) -> EmbeddingPaths {
        match self.config.backend {
            Backend::File => EmbeddingPaths {
                in_domain: self.config.in_domain_embeddings.clone().unwrap(),
                ood: self.config.ood_embeddings.clone().unwrap(),
                test_set: self.test_set.as_ref().map(|_| self.config.test_set_embeddings.clone().unwrap()),
            },
            _ => EmbeddingPaths {
                in_domain: self.out(IN_DOMAIN_EMB),
                ood: self.out(OOD_EMB),
                test_set: self.test_set.as_ref().map(|_| self.out(TEST_EMB)),
            },
        }
    }

    fn reduced(&self) -> EmbeddingPaths {
        if !self.config.pca_enabled {
            return self.embeddings();
        }
        EmbeddingPaths {
            in_domain: self.out(IN_DOMAIN_REDUCED),
            ood: self.out(OOD_REDUCED),
            test_set: self.test_set.as_ref().map(|_| self.out(TEST_REDUCED)),
        }
    }

    fn outputs(&self, stage: Stage) -> Vec<String> {
        let with_test = |a: &str, t: &str| {
            let mut v = vec![a.to_owned()];
            v.insert(0, IN_DOMAIN_EMB.to_owned());
            if self.test_set.is_some() {
                v.push(t.to_owned());
            }
            v
        };
        match stage {
            Stage::Embed if self.config.backend == Backend::File => Vec::new(),
            Stage::Embed => with_test(OOD_EMB, TEST_EMB),
            Stage::PcaFit => vec![PCA_MODEL.to_owned()],
            Stage::PcaApply => {
                let mut v = vec![IN_DOMAIN_REDUCED.to_owned(), OOD_REDUCED.to_owned()];
                if self.test_set.is_some() {
                    v.push(TEST_REDUCED.to_owned());
                }
                v
            }
            Stage::Select => vec![SELECTION_TSV.to_owned(), SELECTION_BIN.to_owned(), SEARCH_REPORT.to_owned()],
            Stage::Build => {
                let mut v = Vec::new();
                for r in 1..=self.config.n {
                    let (s, t) = rank_file_names(r);
                    v.extend([s, t]);
                }
                for k in 1..=self.config.n {
                    let (s, t) = mixed_file_names(k);
                    v.extend([s, t]);
                }
                v.extend([MANIFEST_FILE.to_owned(), EXAMPLES.to_owned()]);
                v
            }
            Stage::Centroids => vec![CENTROIDS_TSV.to_owned()],
        }
    }

    fn file_hash(&mut self, path: &Path) -> Result<String> {
        if let Some(h) = self.hash_cache.get(path) {
            return Ok(h.clone());
        }
        let h = sha256_file(path)?;
        self.hash_cache.insert(path.to_path_buf(), h.clone());
        Ok(h)
    }

    /// Hash of everything a stage's output depends on.
    fn fingerprint(&mut self, stage: Stage) -> Result<String> {
        let c = self.config.clone();
        let mut text = format!("{}\n", stage.name());
        let mut inputs: Vec<PathBuf> = Vec::new();
        match stage {
            Stage::Embed => {
                let _ = writeln!(text, "backend={} side={}", c.backend.as_str(), c.compare_side.as_str());
                match c.backend {
                    Backend::Hash => {
                        let _ = writeln!(text, "hash.dims={} hash.seed={}", c.hash_dims, c.hash_seed);
                    }
                    Backend::Bridge => {
                        let _ = writeln!(text, "bridge.command={}", c.bridge_command.unwrap_or_default());
                    }
                    Backend::File => {}
                }
                inputs.push(self.in_domain.source_path().to_path_buf());
                inputs.push(self.ood_compare_path().to_path_buf());
                if let Some(t) = &self.test_set {
                    inputs.push(t.source_path().to_path_buf());
                }
            }
            Stage::PcaFit => {
                let _ = writeln!(text, "out_dims={} sample={} seed={}", c.pca_out_dims, c.pca_sample, c.pca_seed);
                let e = self.embeddings();
                inputs.extend([e.in_domain, e.ood]);
            }
            Stage::PcaApply => {
                let e = self.embeddings();
                inputs.push(self.out(PCA_MODEL));
                inputs.extend([e.in_domain, e.ood]);
                inputs.extend(e.test_set);
            }
            Stage::Select => {
                let _ = writeln!(text, "n={}", c.n);
                let r = self.reduced();
                inputs.extend([r.in_domain, r.ood]);
            }
            Stage::Build => {
                let _ = writeln!(text, "dedup={} min_score={:?}", c.dedup, c.min_score);
                inputs.push(self.out(SELECTION_BIN));
                inputs.push(self.ood.source_path().to_path_buf());
                inputs.push(self.ood.target_path().unwrap().to_path_buf());
                inputs.push(self.in_domain.source_path().to_path_buf());
            }
            Stage::Centroids => {
                let r = self.reduced();
                inputs.push(self.out(SELECTION_BIN));
                inputs.extend([r.in_domain, r.ood]);
                inputs.extend(r.test_set);
            }
        }
        for p in inputs {
            if !p.is_file() {
                return Err(Error::Validation(format!(
                    "stage `{}` needs {} (run the earlier stages first)",
                    stage.name(),
                    p.display()
                )));
            }
            let h = self.file_hash(&p)?;
            let _ = writeln!(text, "{h}");
        }
        Ok(sha256_bytes(text.as_bytes()))
    }

    fn load_state(&self) -> Result<BTreeMap<String, StageRecord>> {
        let p = self.out(STAGES_FILE);
        if !p.is_file() {
            return Ok(BTreeMap::new());
        }
        let text = fs::read_to_string(&p).at(&p)?;
        // A corrupt state file only costs a full re-run.
        Ok(serde_json::from_str(&text).unwrap_or_default())
    }

    fn save_state(&self, state: &BTreeMap<String, StageRecord>) -> Result<()> {
        let p = self.out(STAGES_FILE);
        let mut json = serde_json::to_string_pretty(state).expect("state serializes");
        json.push('\n');
        fs::write(&p, json).at(&p)
    }

    fn up_to_date(&mut self, stage: Stage, fingerprint: &str, record: Option<&StageRecord>) -> Result<bool> {
        let Some(record) = record else { return Ok(false) };
        if record.fingerprint != fingerprint {
            return Ok(false);
        }
        let expected = self.outputs(stage);
        if expected.len() != record.outputs.len() {
            return Ok(false);
        }
        for name in expected {
            let p = self.out(&name);
            if !p.is_file() {
                return Ok(false);
            }
            match record.outputs.get(&name) {
                Some(h) if *h == self.file_hash(&p)? => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    /// Runs one stage unconditionally and records it.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        if !self.stages().contains(&stage) {
            return Err(Error::Validation(format!("stage `{}` is disabled by the configuration", stage.name())));
        }
        let fingerprint = self.fingerprint(stage)?;
        self.execute(stage, fingerprint)?;
        self.write_run_manifest()
    }

    fn execute(&mut self, stage: Stage, fingerprint: String) -> Result<()> {
        log::info!("stage {}: running", stage.name());
        for name in self.outputs(stage) {
            self.hash_cache.remove(&self.out(&name));
        }
        let result = match stage {
            Stage::Embed => self.stage_embed(),
            Stage::PcaFit => self.stage_pca_fit(),
            Stage::PcaApply => self.stage_pca_apply(),
            Stage::Select => self.stage_select(),
            Stage::Build => self.stage_build(),
            Stage::Centroids => self.stage_centroids(),
        };
        result.map_err(|e| Error::StageFailed {
            stage: stage.name(),
            source: Box::new(e),
        })?;
        let mut outputs = BTreeMap::new();
        for name in self.outputs(stage) {
            let h = self.file_hash(&self.out(&name))?;
            outputs.insert(name, h);
        }
        let mut state = self.load_state()?;
        state.insert(stage.name().to_owned(), StageRecord { fingerprint, outputs });
        self.save_state(&state)
    }

    /// Runs every enabled stage, skipping those whose outputs are current.
    pub fn run_pipeline(&mut self) -> Result<PipelineReport> {
        let mut report = PipelineReport::default();
        for stage in self.stages() {
            let fingerprint = self.fingerprint(stage)?;
            let state = self.load_state()?;
            if self.up_to_date(stage, &fingerprint, state.get(stage.name()))? {
                log::info!("stage {}: up to date, skipped", stage.name());
                report.skipped.push(stage);
                continue;
            }
            self.execute(stage, fingerprint)?;
            report.executed.push(stage);
        }
        self.write_run_manifest()?;
        Ok(report)
    }

    fn embed_with_backend(&self, lines: &Path, expected_rows: u64, out: &Path) -> Result<()> {
        match self.config.backend {
            Backend::Hash => hash_embed_file(lines, self.config.hash_dims, self.config.hash_seed, out),
            Backend::Bridge => run_bridge(self.config.bridge_command.as_deref().unwrap(), lines, expected_rows, out),
            Backend::File => Ok(()),
        }
    }

    fn stage_embed(&mut self) -> Result<()> {
        if self.config.backend == Backend::File {
            return Ok(());
        }
        let e = self.embeddings();
        self.embed_with_backend(self.in_domain.source_path(), self.in_domain.line_count(), &e.in_domain)?;
        self.embed_with_backend(self.ood_compare_path(), self.ood.line_count(), &e.ood)?;
        if let (Some(t), Some(p)) = (&self.test_set, &e.test_set) {
            self.embed_with_backend(t.source_path(), t.line_count(), p)?;
        }
        Ok(())
    }

    /// Row indices of the PCA fitting sample drawn from the concatenation of
    /// the in-domain and general-domain embeddings, split per file.
    fn pca_sample(&self) -> Result<(Vec<u64>, Vec<u64>)> {
        let k = self.in_domain.line_count();
        let total = k + self.ood.line_count();
        let count = self.config.pca_sample.min(total);
        let mut idx = sample_indices(total, count, self.config.pca_seed)?;
        idx.sort_unstable();
        let split = idx.partition_point(|&i| i < k);
        let ood = idx[split..].iter().map(|i| i - k).collect();
        idx.truncate(split);
        Ok((idx, ood))
    }

    fn stage_pca_fit(&mut self) -> Result<()> {
        let e = self.embeddings();
        let (from_in, from_ood) = self.pca_sample()?;
        log::info!(
            "pca: fitting on {} rows ({} in-domain, {} general-domain, seed {})",
            from_in.len() + from_ood.len(),
            from_in.len(),
            from_ood.len(),
            self.config.pca_seed
        );
        let dims = read_header(&e.in_domain)?.dims as usize;
        let ood_dims = read_header(&e.ood)?.dims as usize;
        if dims != ood_dims {
            return Err(Error::DimsMismatch {
                expected: dims,
                actual: ood_dims,
            });
        }
        let mut acc = CovarianceAccumulator::new(dims);
        for (path, rows) in [(&e.in_domain, &from_in), (&e.ood, &from_ood)] {
            for_selected_rows(path, rows, self.config.chunk_rows, |m| acc.add(&m))?;
        }
        let model = acc.finish(self.config.pca_out_dims)?;
        model.save(self.out(PCA_MODEL))
    }

    fn stage_pca_apply(&mut self) -> Result<()> {
        let model = PcaModel::load(self.out(PCA_MODEL))?;
        let e = self.embeddings();
        let r = self.reduced();
        let mut pairs = vec![(e.in_domain, r.in_domain), (e.ood, r.ood)];
        if let (Some(a), Some(b)) = (e.test_set, r.test_set) {
            pairs.push((a, b));
        }
        for (src, dst) in pairs {
            let mut w = EmbeddingWriter::create(&dst, model.out_dims(), false)?;
            for chunk in read_embeddings(&src, self.config.chunk_rows)? {
                w.push(&pca::transform(&chunk?, &model)?)?;
            }
            w.finish()?;
        }
        Ok(())
    }

    fn stage_select(&mut self) -> Result<()> {
        let r = self.reduced();
        let queries = read_all(&r.in_domain)?;
        let docs = read_embeddings(&r.ood, self.config.chunk_rows)?;
        let selection = top_n_search(
            &queries,
            docs,
            SearchOptions {
                n: self.config.n,
                workers: self.config.workers,
            },
        )?;
        selection.write_tsv(self.out(SELECTION_TSV))?;
        selection.write_binary(self.out(SELECTION_BIN))?;
        let report = search_report(&selection);
        fs::write(self.out(SEARCH_REPORT), report.to_string()).at(&self.out(SEARCH_REPORT))
    }

    fn stage_build(&mut self) -> Result<()> {
        let selection = SelectionMatrix::read_binary(self.out(SELECTION_BIN))?;
        // Leftovers from an earlier run with a larger n.
        for r in selection.n() + 1.. {
            let (s, t) = rank_file_names(r);
            let (ms, mt) = mixed_file_names(r);
            let stale: Vec<PathBuf> = [s, t, ms, mt].iter().map(|f| self.out(f)).filter(|p| p.exists()).collect();
            if stale.is_empty() {
                break;
            }
            for p in stale {
                fs::remove_file(&p).at(&p)?;
            }
        }
        let ranks = build_rank_corpora(
            &selection,
            &self.ood,
            &self.dir,
            RankOptions {
                min_score: self.config.min_score,
            },
        )?;
        let manifest = build_mixed_corpora(&ranks, &self.dir, self.config.dedup)?;
        manifest.write(self.out(MANIFEST_FILE))?;
        let examples = if selection.queries() > 0 {
            emit_ranked_examples(&selection, &self.in_domain, &self.ood, 0)?
        } else {
            String::new()
        };
        fs::write(self.out(EXAMPLES), examples).at(&self.out(EXAMPLES))
    }

    fn stage_centroids(&mut self) -> Result<()> {
        let selection = SelectionMatrix::read_binary(self.out(SELECTION_BIN))?;
        let r = self.reduced();
        let wanted: Vec<u64> = {
            let mut w: Vec<u64> = selection.matches().iter().map(|m| m.doc_index).collect();
            w.sort_unstable();
            w.dedup();
            w
        };
        let mut rows: HashMap<u64, Vec<f32>> = HashMap::with_capacity(wanted.len());
        let mut dims = 0;
        for_selected_rows_indexed(&r.ood, &wanted, self.config.chunk_rows, |i, row| {
            dims = row.len();
            rows.insert(i, row.to_vec());
        })?;
        let mut subs = Vec::with_capacity(selection.n());
        for rank in 0..selection.n() {
            let picked: Vec<&[f32]> = selection.iter_rows().map(|row| rows[&row[rank].doc_index].as_slice()).collect();
            subs.push(EmbeddingMatrix::from_rows(dims, &picked)?);
        }
        let reference = read_all(r.test_set.as_ref().unwrap_or(&r.in_domain))?;
        let scores = centroid_similarity(&subs, &reference)?;
        write_centroids_tsv(self.out(CENTROIDS_TSV), &scores)
    }

    /// Provenance record: resolved settings, input digests, output digests.
    fn write_run_manifest(&mut self) -> Result<()> {
        let mut config = BTreeMap::new();
        for (k, v) in self.config.entries() {
            // The manifest lives in out_dir; recording it would tie the bytes to one location.
            if k != "out_dir" {
                config.insert(k.to_owned(), v);
            }
        }
        let mut inputs = BTreeMap::new();
        let mut corpora = vec![
            ("in_domain", self.in_domain.source_path().to_path_buf(), self.in_domain.line_count()),
            ("ood_source", self.ood.source_path().to_path_buf(), self.ood.line_count()),
            ("ood_target", self.ood.target_path().unwrap().to_path_buf(), self.ood.line_count()),
        ];
        if let Some(t) = &self.test_set {
            corpora.push(("test_set", t.source_path().to_path_buf(), t.line_count()));
        }
        for (name, path, lines) in corpora {
            let sha256 = self.file_hash(&path)?;
            inputs.insert(
                name.to_owned(),
                InputRecord {
                    path: path.display().to_string(),
                    lines,
                    sha256,
                },
            );
        }
        let mut outputs = BTreeMap::new();
        for stage in self.stages() {
            for name in self.outputs(stage) {
                let p = self.out(&name);
                if p.is_file() {
                    let h = self.file_hash(&p)?;
                    outputs.insert(name, h);
                }
            }
        }
        let pca_sample = if self.config.pca_enabled {
            let (a, b) = self.pca_sample()?;
            Some(PcaSampleRecord {
                rows: (a.len() + b.len()) as u64,
                in_domain_rows: a.len() as u64,
                ood_rows: b.len() as u64,
                seed: self.config.pca_seed,
            })
        } else {
            None
        };
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config,
            inputs,
            pca_sample,
            outputs,
        };
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        let p = self.out(RUN_MANIFEST);
        fs::write(&p, json).at(&p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct InputRecord {
    path: String,
    lines: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PcaSampleRecord {
    rows: u64,
    in_domain_rows: u64,
    ood_rows: u64,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    version: String,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, InputRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pca_sample: Option<PcaSampleRecord>,
    outputs: BTreeMap<String, String>,
}

/// Streams the rows at sorted `indices` into `sink` as matrices.
fn for_selected_rows<F>(path: &Path, indices: &[u64], chunk_rows: usize, mut sink: F) -> Result<()>
where
    F: FnMut(EmbeddingMatrix) -> Result<()>,
{
    let dims = read_header(path)?.dims as usize;
    let mut batch: Vec<f32> = Vec::new();
    let mut pending = 0usize;
    let mut err = None;
    for_selected_rows_indexed(path, indices, chunk_rows, |_, row| {
        if err.is_some() {
            return;
        }
        batch.extend_from_slice(row);
        pending += 1;
        if pending == chunk_rows {
            let m = EmbeddingMatrix::new(pending, dims, std::mem::take(&mut batch));
            if let Err(e) = m.and_then(&mut sink) {
                err = Some(e);
            }
            pending = 0;
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    if pending > 0 {
        sink(EmbeddingMatrix::new(pending, dims, batch)?)?;
    }
    Ok(())
}

fn for_selected_rows_indexed<F>(path: &Path, indices: &[u64], chunk_rows: usize, mut visit: F) -> Result<()>
where
    F: FnMut(u64, &[f32]),
{
    let mut next = indices.iter().peekable();
    let mut chunks = read_embeddings(path, chunk_rows)?;
    let rows = chunks.header().rows;
    if let Some(&&last) = indices.last().as_ref() {
        if last >= rows {
            return Err(Error::IndexOutOfRange { index: last, limit: rows });
        }
    }
    while next.peek().is_some() {
        let start = chunks.position();
        let Some(chunk) = chunks.next() else { break };
        let chunk = chunk?;
        let end = start + chunk.rows() as u64;
        while let Some(&&i) = next.peek() {
            if i >= end {
                break;
            }
            visit(i, chunk.row((i - start) as usize));
            next.next();
        }
    }
    Ok(())
}

/// Hash-embeds a line file into an EMB1 file, in parallel batches.
pub fn hash_embed_file(lines: &Path, dims: usize, seed: u64, out: &Path) -> Result<()> {
    let embedder = HashEmbedder::new(dims, seed)?;
    let mut reader = LineReader::open(lines)?;
    let mut writer = EmbeddingWriter::create(out, dims, true)?;
    let mut zero = 0usize;
    loop {
        let mut batch = Vec::with_capacity(EMBED_BATCH);
        while batch.len() < EMBED_BATCH {
            match reader.next_line()? {
                Some(l) => batch.push(l),
                None => break,
            }
        }
        if batch.is_empty() {
            break;
        }
        let mut data = vec![0.0f32; batch.len() * dims];
        zero += data
            .par_chunks_mut(dims)
            .zip(&batch)
            .map(|(row, s)| usize::from(!embedder.embed_into(s, row)))
            .sum::<usize>();
        writer.push(&EmbeddingMatrix::new(batch.len(), dims, data)?)?;
    }
    if zero > 0 {
        log::warn!("{}: {zero} sentence(s) embedded as zero vectors", lines.display());
    }
    writer.finish()?;
    Ok(())
}

/// Runs an external encoder: sentences on stdin, EMB1 on stdout.
pub fn run_bridge(command: &str, lines: &Path, expected_rows: u64, out: &Path) -> Result<()> {
    let mut parts = command.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| Error::BackendUnavailable("empty bridge command".into()))?;
    let stdin = File::open(lines).at(lines)?;
    let stdout = File::create(out).at(out)?;
    let status = Command::new(program)
        .args(parts)
        .stdin(Stdio::from(stdin))
        .stdout(Stdio::from(stdout))
        .stderr(Stdio::inherit())
        .status()
        .map_err(|e| Error::BackendUnavailable(format!("cannot start `{program}`: {e}")))?;
    if !status.success() {
        return Err(Error::BackendUnavailable(format!("`{command}` exited with {status}")));
    }
    let bad = |e: Error| Error::BackendUnavailable(format!("bridge output {}: {e}", out.display()));
    let header = read_header(out).map_err(bad)?;
    if header.rows != expected_rows {
        return Err(Error::BackendUnavailable(format!(
            "bridge emitted {} rows for {expected_rows} input lines",
            header.rows
        )));
    }
    // Streams the payload once to reject NaN/Inf.
    for chunk in read_embeddings(out, 65_536).map_err(bad)? {
        chunk.map_err(bad)?;
    }
    Ok(())
}

/// Process exit code for an error: 1 for validation, 2 for stage failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::StageFailed { .. } => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        fs::write(&p, "# toy\nin_domain = a.txt\nsearch.n = 3\nbackend = hash\nbuild.dedup = yes\n").unwrap();
        let mut c = RunConfig::from_file(&p).unwrap();
        assert_eq!(c.n, 3);
        assert!(c.dedup);
        c.apply_overrides(&["search.n=4", "pca.out_dims = 16"]).unwrap();
        assert_eq!((c.n, c.pca_out_dims), (4, 16));
        assert!(c.apply_overrides(&["nope=1"]).is_err());
        assert!(c.apply_overrides(&["search.n"]).is_err());
        let text = c.to_config_text();
        assert!(text.contains("search.n = 4\n"));
        let round = dir.path().join("resolved.conf");
        fs::write(&round, &text).unwrap();
        assert_eq!(RunConfig::from_file(&round).unwrap(), c);
    }

    #[test]
    fn validation_catches_bad_settings() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["in.txt", "ood.src", "ood.tgt"] {
            fs::write(dir.path().join(name), "x\n").unwrap();
        }
        let base = RunConfig {
            in_domain: Some(dir.path().join("in.txt")),
            ood_source: Some(dir.path().join("ood.src")),
            ood_target: Some(dir.path().join("ood.tgt")),
            out_dir: Some(dir.path().join("out")),
            ..RunConfig::default()
        };
        base.validate().unwrap();

        let mut c = base.clone();
        c.pca_out_dims = 769;
        assert!(matches!(c.validate(), Err(Error::Validation(m)) if m.contains("pca.out_dims")));

        let mut c = base.clone();
        c.in_domain = Some(dir.path().join("missing.txt"));
        assert!(matches!(c.validate(), Err(Error::Validation(_))));

        let mut c = base.clone();
        c.hash_dims = 64;
        assert!(c.validate().is_err());
        c.pca_in_dims = 64;
        c.pca_out_dims = 8;
        c.validate().unwrap();

        let mut c = base.clone();
        c.backend = Backend::Bridge;
        assert!(c.validate().is_err());

        let mut c = base;
        c.backend = Backend::File;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Validation("x".into())), 1);
        let e = Error::StageFailed {
            stage: "select",
            source: Box::new(Error::EmptyMatrix),
        };
        assert_eq!(exit_code(&e), 2);
    }
}
