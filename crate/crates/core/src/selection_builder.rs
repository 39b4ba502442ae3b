//! Rank sub-corpora (`top1` .. `topN`) and stacked mixes (`mix1` .. `mixN`).
//!
//! Rank file `r` holds, for every query in order, the general-domain pair
//! selected at rank `r`. Mix `k` is rank files `1..=k` concatenated in rank
//! order, so mix `k-1` is a line-exact prefix of mix `k` unless
//! deduplication is on.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{CorpusHandle, LineReader, SentenceRecord};
use crate::error::{Error, IoContext, Result};
use crate::hashing::HashingWriter;
use crate::semantic_search::SelectionMatrix;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankFile {
    pub rank: usize,
    pub source_path: String,
    pub target_path: String,
    pub pair_count: u64,
    pub source_sha256: String,
    pub target_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedFile {
    pub k: usize,
    pub source_path: String,
    pub target_path: String,
    pub pair_count: u64,
    pub duplicate_count: u64,
    pub source_sha256: String,
    pub target_sha256: String,
}

/// Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubCorpusManifest {
    pub n: usize,
    pub rank_files: Vec<RankFile>,
    pub mixed_files: Vec<MixedFile>,
    pub dedup: bool,
    /// Experimental: matches scoring below this were left out of the rank files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_score: Option<f32>,
}

impl SubCorpusManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = serde_json::to_string_pretty(self).expect("manifest serializes");
        json.push('\n');
        fs::write(path, json).at(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            what: "manifest",
            detail: e.to_string(),
        })
    }

    /// Every file named in the manifest, relative to the output directory.
    pub fn files(&self) -> Vec<&str> {
        let ranks = self.rank_files.iter().flat_map(|f| [f.source_path.as_str(), f.target_path.as_str()]);
        let mixes = self.mixed_files.iter().flat_map(|f| [f.source_path.as_str(), f.target_path.as_str()]);
        ranks.chain(mixes).collect()
    }
}

pub fn rank_file_names(r: usize) -> (String, String) {
    (format!("top{r}.src"), format!("top{r}.tgt"))
}

pub fn mixed_file_names(k: usize) -> (String, String) {
    (format!("mix{k}.src"), format!("mix{k}.tgt"))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RankOptions {
    pub min_score: Option<f32>,
}

/// Writes `top{r}.src/.tgt` for every rank, gathering the needed pairs in a
/// single pass over the general-domain corpus.
pub fn build_rank_corpora(
    selection: &SelectionMatrix,
    ood: &CorpusHandle,
    out_dir: impl AsRef<Path>,
    opts: RankOptions,
) -> Result<SubCorpusManifest> {
    let out_dir = out_dir.as_ref();
    if !ood.is_parallel() {
        return Err(Error::MissingTarget(ood.source_path().to_path_buf()));
    }
    if let Some(max) = selection.max_doc_index() {
        if max >= ood.line_count() {
            return Err(Error::IndexOutOfRange {
                index: max,
                limit: ood.line_count(),
            });
        }
    }
    fs::create_dir_all(out_dir).at(out_dir)?;
    let pairs = ood.gather(selection.matches().iter().map(|m| m.doc_index))?;

    let rank_files = (1..=selection.n())
        .into_par_iter()
        .map(|r| {
            let (src_name, tgt_name) = rank_file_names(r);
            let picked = selection
                .iter_rows()
                .map(|row| &row[r - 1])
                .filter(|m| opts.min_score.is_none_or(|t| m.score >= t))
                .map(|m| &pairs[&m.doc_index]);
            let written = write_pairs(&out_dir.join(&src_name), &out_dir.join(&tgt_name), picked)?;
            Ok(RankFile {
                rank: r,
                source_path: src_name,
                target_path: tgt_name,
                pair_count: written.pairs,
                source_sha256: written.source_sha256,
                target_sha256: written.target_sha256,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SubCorpusManifest {
        n: selection.n(),
        rank_files,
        mixed_files: Vec::new(),
        dedup: false,
        min_score: opts.min_score,
    })
}

/// Writes `mix{k}.src/.tgt` for `k = 1..=n` and returns the completed manifest.
pub fn build_mixed_corpora(manifest: &SubCorpusManifest, out_dir: impl AsRef<Path>, dedup: bool) -> Result<SubCorpusManifest> {
    let out_dir = out_dir.as_ref();
    let mut ranks = manifest.rank_files.clone();
    ranks.sort_by_key(|f| f.rank);
    for f in &ranks {
        for p in [&f.source_path, &f.target_path] {
            let p = out_dir.join(p);
            if !p.is_file() {
                return Err(Error::MissingRankFile(p));
            }
        }
    }
    let mixed_files = (1..=ranks.len())
        .into_par_iter()
        .map(|k| write_mix(out_dir, &ranks[..k], k, dedup))
        .collect::<Result<Vec<_>>>()?;
    Ok(SubCorpusManifest {
        mixed_files,
        dedup,
        ..manifest.clone()
    })
}

fn write_mix(out_dir: &Path, ranks: &[RankFile], k: usize, dedup: bool) -> Result<MixedFile> {
    let (src_name, tgt_name) = mixed_file_names(k);
    let src_path = out_dir.join(&src_name);
    let tgt_path = out_dir.join(&tgt_name);
    let mut src = HashingWriter::new(BufWriter::new(File::create(&src_path).at(&src_path)?));
    let mut tgt = HashingWriter::new(BufWriter::new(File::create(&tgt_path).at(&tgt_path)?));
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let (mut pairs, mut duplicates) = (0u64, 0u64);
    for f in ranks {
        let sp = out_dir.join(&f.source_path);
        let tp = out_dir.join(&f.target_path);
        let mut sr = LineReader::open(&sp)?;
        let mut tr = LineReader::open(&tp)?;
        loop {
            match (sr.next_line()?, tr.next_line()?) {
                (Some(s), Some(t)) => {
                    if dedup && !seen.insert((s.clone(), t.clone())) {
                        duplicates += 1;
                        continue;
                    }
                    writeln!(src, "{s}").at(&src_path)?;
                    writeln!(tgt, "{t}").at(&tgt_path)?;
                    pairs += 1;
                }
                (None, None) => break,
                _ => {
                    return Err(Error::Malformed {
                        what: "rank file",
                        detail: format!("{} and {} differ in length", sp.display(), tp.display()),
                    })
                }
            }
        }
    }
    Ok(MixedFile {
        k,
        source_path: src_name,
        target_path: tgt_name,
        pair_count: pairs,
        duplicate_count: duplicates,
        source_sha256: src.finish().at(&src_path)?,
        target_sha256: tgt.finish().at(&tgt_path)?,
    })
}

struct Written {
    pairs: u64,
    source_sha256: String,
    target_sha256: String,
}

fn write_pairs<'a, I>(src_path: &PathBuf, tgt_path: &PathBuf, pairs: I) -> Result<Written>
where
    I: Iterator<Item = &'a SentenceRecord>,
{
    let mut src = HashingWriter::new(BufWriter::new(File::create(src_path).at(src_path)?));
    let mut tgt = HashingWriter::new(BufWriter::new(File::create(tgt_path).at(tgt_path)?));
    let mut n = 0;
    for rec in pairs {
        let target = rec.target.as_deref().unwrap_or_default();
        writeln!(src, "{}", rec.source).at(src_path)?;
        writeln!(tgt, "{target}").at(tgt_path)?;
        n += 1;
    }
    Ok(Written {
        pairs: n,
        source_sha256: src.finish().at(src_path)?,
        target_sha256: tgt.finish().at(tgt_path)?,
    })
}

/// Renders one query and its ranked pairs, scores on a /100 scale.
pub fn emit_ranked_examples(
    selection: &SelectionMatrix,
    in_domain: &CorpusHandle,
    ood: &CorpusHandle,
    query_index: u64,
) -> Result<String> {
    if query_index >= selection.queries() as u64 {
        return Err(Error::IndexOutOfRange {
            index: query_index,
            limit: selection.queries() as u64,
        });
    }
    let row = selection.row(query_index as usize);
    let query = in_domain
        .gather([query_index])?
        .remove(&query_index)
        .expect("gathered index is present");
    let docs = ood.gather(row.iter().map(|m| m.doc_index))?;

    let mut out = String::new();
    let _ = writeln!(out, "{:<14}{}", "Query:", query.source);
    let _ = writeln!(out, "{:<14}Score (/100)", "");
    for (r, m) in row.iter().enumerate() {
        let pair = &docs[&m.doc_index];
        let _ = writeln!(out, "Top{:<10} {:>6.2}  [doc {}]", r + 1, m.score * 100.0, m.doc_index);
        let _ = writeln!(out, "  SRC: {}", pair.source);
        if let Some(t) = &pair.target {
            let _ = writeln!(out, "  TGT: {t}");
        }
    }
    Ok(out)
}
