//! Line-aligned text corpora.
//!
//! A corpus is one sentence per line, LF-terminated, UTF-8. Parallel corpora
//! are two such files with equal line counts. Handles only remember paths and
//! counts; records are streamed from disk on every iteration so that very
//! large general-domain corpora never have to be resident.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// One aligned sentence (pair) with its 0-based position in the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceRecord {
    pub index: u64,
    pub source: String,
    pub target: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusRole {
    InDomain,
    OutOfDomain,
    TestSet,
}

/// Lines worth flagging, found while validating a corpus on open.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub empty_source: Vec<u64>,
    pub empty_target: Vec<u64>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.empty_source.is_empty() && self.empty_target.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 10;
        for (side, lines) in [("source", &self.empty_source), ("target", &self.empty_target)] {
            if lines.is_empty() {
                continue;
            }
            let head: Vec<String> = lines.iter().take(SHOWN).map(u64::to_string).collect();
            let more = if lines.len() > SHOWN { ", ..." } else { "" };
            writeln!(
                f,
                "warning: {} empty {side} line(s) at index {}{more}",
                lines.len(),
                head.join(", ")
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CorpusHandle {
    source_path: PathBuf,
    target_path: Option<PathBuf>,
    line_count: u64,
    role: CorpusRole,
    report: ValidationReport,
}

impl CorpusHandle {
    pub fn source_path(&self) -> &Path {
        &self.source_path
    }

    pub fn target_path(&self) -> Option<&Path> {
        self.target_path.as_deref()
    }

    pub fn line_count(&self) -> u64 {
        self.line_count
    }

    pub fn role(&self) -> CorpusRole {
        self.role
    }

    pub fn with_role(mut self, role: CorpusRole) -> Self {
        self.role = role;
        self
    }

    pub fn is_parallel(&self) -> bool {
        self.target_path.is_some()
    }

    pub fn validation_report(&self) -> &ValidationReport {
        &self.report
    }

    /// Streams records in file order.
    pub fn records(&self) -> Result<Records> {
        let source = LineReader::open(&self.source_path)?;
        let target = match &self.target_path {
            Some(p) => Some(LineReader::open(p)?),
            None => None,
        };
        Ok(Records {
            source,
            target,
            next_index: 0,
        })
    }

    /// Fetches the records at `indices` in one sequential pass.
    ///
    /// Duplicate indices are allowed; the map holds each record once.
    pub fn gather<I>(&self, indices: I) -> Result<HashMap<u64, SentenceRecord>>
    where
        I: IntoIterator<Item = u64>,
    {
        let mut wanted: Vec<u64> = indices.into_iter().collect();
        wanted.sort_unstable();
        wanted.dedup();
        if let Some(&last) = wanted.last() {
            if last >= self.line_count {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    limit: self.line_count,
                });
            }
        }
        let mut out = HashMap::with_capacity(wanted.len());
        let mut want = wanted.iter().peekable();
        for record in self.records()? {
            let Some(&&next) = want.peek() else { break };
            let record = record?;
            if record.index == next {
                want.next();
                out.insert(record.index, record);
            }
        }
        Ok(out)
    }
}

/// Opens a parallel corpus, checking encoding and line-count agreement.
pub fn open_parallel(source_path: impl AsRef<Path>, target_path: impl AsRef<Path>) -> Result<CorpusHandle> {
    let source_path = source_path.as_ref().to_path_buf();
    let target_path = target_path.as_ref().to_path_buf();
    let src = scan(&source_path)?;
    let tgt = scan(&target_path)?;
    if src.lines != tgt.lines {
        return Err(Error::MisalignedCorpus {
            source_lines: src.lines,
            target_lines: tgt.lines,
        });
    }
    Ok(CorpusHandle {
        source_path,
        target_path: Some(target_path),
        line_count: src.lines,
        role: CorpusRole::OutOfDomain,
        report: ValidationReport {
            empty_source: src.empty,
            empty_target: tgt.empty,
        },
    })
}

pub fn open_monolingual(path: impl AsRef<Path>) -> Result<CorpusHandle> {
    let source_path = path.as_ref().to_path_buf();
    let src = scan(&source_path)?;
    Ok(CorpusHandle {
        source_path,
        target_path: None,
        line_count: src.lines,
        role: CorpusRole::InDomain,
        report: ValidationReport {
            empty_source: src.empty,
            empty_target: Vec::new(),
        },
    })
}

/// Draws `count` distinct indices from `0..total`, uniformly and in shuffled
/// order, with a partial Fisher-Yates over a sparse swap table.
pub fn sample_indices(total: u64, count: u64, seed: u64) -> Result<Vec<u64>> {
    if count > total {
        return Err(Error::SampleTooLarge {
            requested: count,
            available: total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut swapped: HashMap<u64, u64> = HashMap::with_capacity(count as usize * 2);
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let j = rng.gen_range(i..total);
        let at_j = swapped.get(&j).copied().unwrap_or(j);
        let at_i = swapped.get(&i).copied().unwrap_or(i);
        swapped.insert(j, at_i);
        swapped.remove(&i);
        out.push(at_j);
    }
    Ok(out)
}

/// Uniform sample without replacement, returned in shuffled order.
pub fn sample_shuffled(corpus: &CorpusHandle, count: u64, seed: u64) -> Result<Vec<SentenceRecord>> {
    let order = sample_indices(corpus.line_count(), count, seed)?;
    let mut found = corpus.gather(order.iter().copied())?;
    Ok(order
        .iter()
        .map(|i| found.remove(i).expect("gather returned every requested index"))
        .collect())
}

/// Writes records as one or two line files. Returns the number of lines.
pub fn write_corpus<'a, I>(source_path: &Path, target_path: Option<&Path>, records: I) -> Result<u64>
where
    I: IntoIterator<Item = &'a SentenceRecord>,
{
    let mut src = BufWriter::new(File::create(source_path).at(source_path)?);
    let mut tgt = match target_path {
        Some(p) => Some((p, BufWriter::new(File::create(p).at(p)?))),
        None => None,
    };
    let mut n = 0u64;
    for rec in records {
        write_line(&mut src, &rec.source).at(source_path)?;
        if let Some((p, w)) = tgt.as_mut() {
            let t = rec.target.as_deref().ok_or_else(|| Error::MissingTarget(source_path.to_path_buf()))?;
            write_line(w, t).at(p)?;
        }
        n += 1;
    }
    src.flush().at(source_path)?;
    if let Some((p, mut w)) = tgt {
        w.flush().at(p)?;
    }
    Ok(n)
}

fn write_line<W: Write>(w: &mut W, line: &str) -> std::io::Result<()> {
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")
}

pub struct Records {
    source: LineReader,
    target: Option<LineReader>,
    next_index: u64,
}

impl Iterator for Records {
    type Item = Result<SentenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let source = match self.source.next_line() {
            Ok(Some(s)) => s,
            Ok(None) => return None,
            Err(e) => return Some(Err(e)),
        };
        let target = match self.target.as_mut().map(LineReader::next_line) {
            None => None,
            Some(Ok(Some(t))) => Some(t),
            Some(Ok(None)) => {
                return Some(Err(Error::MisalignedCorpus {
                    source_lines: self.next_index + 1,
                    target_lines: self.next_index,
                }))
            }
            Some(Err(e)) => return Some(Err(e)),
        };
        let index = self.next_index;
        self.next_index += 1;
        Some(Ok(SentenceRecord { index, source, target }))
    }
}

/// Reads LF-terminated UTF-8 lines, tracking the byte offset for errors.
pub(crate) struct LineReader {
    path: PathBuf,
    inner: BufReader<File>,
    buf: Vec<u8>,
    offset: u64,
}

impl LineReader {
    pub(crate) fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).at(path)?;
        Ok(LineReader {
            path: path.to_path_buf(),
            inner: BufReader::with_capacity(1 << 16, file),
            buf: Vec::new(),
            offset: 0,
        })
    }

    pub(crate) fn next_line(&mut self) -> Result<Option<String>> {
        self.buf.clear();
        let n = self.inner.read_until(b'\n', &mut self.buf).at(&self.path)?;
        if n == 0 {
            return Ok(None);
        }
        let start = self.offset;
        self.offset += n as u64;
        let mut body: &[u8] = &self.buf;
        if let Some(rest) = body.strip_suffix(b"\n") {
            body = rest;
        }
        if let Some(rest) = body.strip_suffix(b"\r") {
            body = rest;
        }
        match std::str::from_utf8(body) {
            Ok(s) => Ok(Some(s.to_owned())),
            Err(e) => Err(Error::InvalidEncoding {
                path: self.path.clone(),
                offset: start + e.valid_up_to() as u64,
            }),
        }
    }
}

struct Scan {
    lines: u64,
    empty: Vec<u64>,
}

fn scan(path: &Path) -> Result<Scan> {
    let mut reader = LineReader::open(path)?;
    let mut lines = 0u64;
    let mut empty = Vec::new();
    while let Some(line) = reader.next_line()? {
        if line.is_empty() {
            empty.push(lines);
        }
        lines += 1;
    }
    Ok(Scan { lines, empty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parallel_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "a.src", b"one\ntwo\nthree\n");
        let t = write(dir.path(), "a.tgt", b"un\ndeux\ntrois\n");
        let h = open_parallel(&s, &t).unwrap();
        assert_eq!(h.line_count(), 3);
        let recs: Vec<_> = h.records().unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(recs[2].index, 2);
        assert_eq!(recs[2].source, "three");
        assert_eq!(recs[2].target.as_deref(), Some("trois"));
    }

    #[test]
    fn misaligned_reports_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "a.src", b"1\n2\n3\n4\n");
        let t = write(dir.path(), "a.tgt", b"1\n2\n3\n");
        match open_parallel(&s, &t) {
            Err(Error::MisalignedCorpus {
                source_lines: 4,
                target_lines: 3,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_parallel_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "a.src", b"");
        let t = write(dir.path(), "a.tgt", b"");
        assert_eq!(open_parallel(&s, &t).unwrap().line_count(), 0);
    }

    #[test]
    fn monolingual_counts() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..887).map(|i| format!("sentence {i}\n")).collect();
        let p = write(dir.path(), "dev2010.en", body.as_bytes());
        let h = open_monolingual(&p).unwrap();
        assert_eq!(h.line_count(), 887);
        assert!(h.target_path().is_none());
        assert_eq!(h.role(), CorpusRole::InDomain);

        let p = write(dir.path(), "empty.en", b"");
        assert_eq!(open_monolingual(&p).unwrap().line_count(), 0);
    }

    #[test]
    fn trailing_newline_is_not_a_record() {
        let dir = tempfile::tempdir().unwrap();
        let with = write(dir.path(), "with", b"a\nb\n");
        let without = write(dir.path(), "without", b"a\nb");
        assert_eq!(open_monolingual(&with).unwrap().line_count(), 2);
        assert_eq!(open_monolingual(&without).unwrap().line_count(), 2);
    }

    #[test]
    fn empty_lines_are_kept_and_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m", b"a\n\nc\n\n");
        let h = open_monolingual(&p).unwrap();
        assert_eq!(h.line_count(), 4);
        assert_eq!(h.validation_report().empty_source, vec![1, 3]);
        assert!(h.validation_report().to_string().contains("2 empty source line(s)"));
    }

    #[test]
    fn invalid_utf8_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad", b"ok\nab\xffcd\n");
        match open_monolingual(&p) {
            Err(Error::InvalidEncoding { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sample_whole_corpus_is_permutation() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..50).map(|i| format!("s{i}\n")).collect();
        let p = write(dir.path(), "m", body.as_bytes());
        let h = open_monolingual(&p).unwrap();
        let sample = sample_shuffled(&h, 50, 7).unwrap();
        let mut idx: Vec<u64> = sample.iter().map(|r| r.index).collect();
        assert_ne!(idx, (0..50).collect::<Vec<_>>());
        idx.sort_unstable();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
        for r in &sample {
            assert_eq!(r.source, format!("s{}", r.index));
        }
        assert_eq!(sample, sample_shuffled(&h, 50, 7).unwrap());
    }

    #[test]
    fn sample_too_large() {
        assert!(matches!(
            sample_indices(10, 11, 0),
            Err(Error::SampleTooLarge {
                requested: 11,
                available: 10
            })
        ));
    }

    #[test]
    fn large_sample_is_distinct() {
        let idx = sample_indices(31_000_000, 500_000, 42).unwrap();
        assert_eq!(idx.len(), 500_000);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 500_000);
        assert!(*sorted.last().unwrap() < 31_000_000);
    }

    #[test]
    fn sample_is_roughly_uniform() {
        // every index of a 10-element population appears ~3000 times over 10k draws of 3
        let mut hits = [0u32; 10];
        for seed in 0..10_000 {
            for i in sample_indices(10, 3, seed).unwrap() {
                hits[i as usize] += 1;
            }
        }
        for h in hits {
            assert!((2700..3300).contains(&h), "{hits:?}");
        }
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m", b"a\nb\n");
        let h = open_monolingual(&p).unwrap();
        assert!(matches!(
            h.gather([0, 2]),
            Err(Error::IndexOutOfRange { index: 2, limit: 2 })
        ));
    }

    proptest::proptest! {
        #[test]
        fn write_then_open_round_trips(lines in proptest::collection::vec("[^\r\n]{0,20}", 0..30)) {
            let dir = tempfile::tempdir().unwrap();
            let recs: Vec<SentenceRecord> = lines.iter().enumerate().map(|(i, l)| SentenceRecord {
                index: i as u64, source: l.clone(), target: Some(l.chars().rev().collect()),
            }).collect();
            let s = dir.path().join("x.src");
            let t = dir.path().join("x.tgt");
            write_corpus(&s, Some(&t), &recs).unwrap();
            let h = open_parallel(&s, &t).unwrap();
            let back: Vec<_> = h.records().unwrap().collect::<Result<_>>().unwrap();
            proptest::prop_assert_eq!(back, recs);
        }

        #[test]
        fn sampled_indices_distinct_and_bounded(total in 0u64..500, frac in 0.0f64..=1.0, seed: u64) {
            let count = (total as f64 * frac) as u64;
            let idx = sample_indices(total, count, seed).unwrap();
            let set: HashSet<u64> = idx.iter().copied().collect();
            proptest::prop_assert_eq!(set.len() as u64, count);
            proptest::prop_assert!(idx.iter().all(|&i| i < total));
        }
    }
}
