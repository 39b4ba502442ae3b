//! Exact top-n cosine search of in-domain queries against general-domain
//! documents.
//!
//! Both sides are L2-normalized once, so each score is a plain f32 dot
//! product accumulated in dimension order. Every query keeps a bounded heap of
//! its `n` best documents; ordering is by score descending, then by
//! ascending document index, which makes the result a pure function of the
//! inputs regardless of chunking or thread count.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::embedding_store::{l2_normalize, EmbeddingMatrix};
use crate::error::{Error, IoContext, Result};

pub const DEFAULT_TOP_N: usize = 6;

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(q: &[f32], d: &[f32]) -> Result<f32> {
    if q.len() != d.len() {
        return Err(Error::DimsMismatch {
            expected: q.len(),
            actual: d.len(),
        });
    }
    let (mut dot, mut qq, mut dd) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in q.iter().zip(d) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        qq += a * a;
        dd += b * b;
    }
    if qq == 0.0 || dd == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (qq.sqrt() * dd.sqrt())) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMatch {
    pub query_index: u64,
    pub doc_index: u64,
    pub score: f32,
}

/// Per-query ranked matches, `n` per row, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix {
    n: usize,
    matches: Vec<ScoredMatch>,
}

impl SelectionMatrix {
    /// Builds a matrix from rows given best-first, checking the row invariants.
    pub fn from_rows(n: usize, rows: Vec<Vec<(u64, f32)>>) -> Result<Self> {
        let mut matches = Vec::with_capacity(rows.len() * n);
        for (q, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::Malformed {
                    what: "selection row",
                    detail: format!("query {q} has {} matches, expected {n}", row.len()),
                });
            }
            for (doc_index, score) in row {
                matches.push(ScoredMatch {
                    query_index: q as u64,
                    doc_index,
                    score,
                });
            }
        }
        let m = SelectionMatrix { n, matches };
        m.validate()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn queries(&self) -> usize {
        self.matches.len().checked_div(self.n).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn row(&self, query: usize) -> &[ScoredMatch] {
        &self.matches[query * self.n..(query + 1) * self.n]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[ScoredMatch]> + '_ {
        self.matches.chunks(self.n.max(1))
    }

    pub fn matches(&self) -> &[ScoredMatch] {
        &self.matches
    }

    pub fn max_doc_index(&self) -> Option<u64> {
        self.matches.iter().map(|m| m.doc_index).max()
    }

    fn validate(&self) -> Result<()> {
        for (q, row) in self.iter_rows().enumerate() {
            for w in row.windows(2) {
                if rank_order(w[0].score, w[0].doc_index, w[1].score, w[1].doc_index) != Ordering::Less {
                    return Err(Error::Malformed {
                        what: "selection row",
                        detail: format!("query {q} is not sorted best-first"),
                    });
                }
            }
            let mut docs: Vec<u64> = row.iter().map(|m| m.doc_index).collect();
            docs.sort_unstable();
            if docs.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Malformed {
                    what: "selection row",
                    detail: format!("query {q} lists a document twice"),
                });
            }
            if row.iter().any(|m| !m.score.is_finite()) {
                return Err(Error::Malformed {
                    what: "selection row",
                    detail: format!("query {q} has a non-finite score"),
                });
            }
        }
        Ok(())
    }

    /// One line per (query, rank): `query_index  rank  doc_index  score`.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).at(path)?);
        for row in self.iter_rows() {
            for (r, m) in row.iter().enumerate() {
                writeln!(w, "{}\t{}\t{}\t{:.6}", m.query_index, r + 1, m.doc_index, m.score).at(path)?;
            }
        }
        w.flush().at(path)
    }

    /// Parses a selection TSV. Scores carry only the six printed decimals.
    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path).at(path)?);
        let bad = |line: usize, detail: &str| Error::Malformed {
            what: "selection TSV",
            detail: format!("line {}: {detail}", line + 1),
        };
        let mut rows: Vec<Vec<(u64, f32)>> = Vec::new();
        for (ln, line) in reader.lines().enumerate() {
            let line = line.at(path)?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(ln, "expected 4 tab-separated fields"));
            }
            let q: usize = fields[0].parse().map_err(|_| bad(ln, "query_index"))?;
            let rank: usize = fields[1].parse().map_err(|_| bad(ln, "rank"))?;
            let doc: u64 = fields[2].parse().map_err(|_| bad(ln, "doc_index"))?;
            let score: f32 = fields[3].parse().map_err(|_| bad(ln, "score"))?;
            if q == rows.len() && rank == 1 {
                rows.push(Vec::new());
            }
            let current = rows.len();
            match rows.last_mut() {
                Some(row) if q + 1 == current && rank == row.len() + 1 => row.push((doc, score)),
                _ => return Err(bad(ln, "rows must be grouped by query with consecutive ranks")),
            }
        }
        let n = rows.first().map_or(0, Vec::len);
        Self::from_rows(n, rows)
    }

    /// Binary form: `SEL1`, u16 version, u32 n, u64 queries, then per match
    /// u64 doc_index and f32 score (little-endian), queries in order.
    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).at(path)?);
        let mut head = Vec::with_capacity(18);
        head.extend_from_slice(b"SEL1");
        head.extend_from_slice(&1u16.to_le_bytes());
        head.extend_from_slice(&(self.n as u32).to_le_bytes());
        head.extend_from_slice(&(self.queries() as u64).to_le_bytes());
        w.write_all(&head).at(path)?;
        for m in &self.matches {
            w.write_all(&m.doc_index.to_le_bytes()).at(path)?;
            w.write_all(&m.score.to_le_bytes()).at(path)?;
        }
        w.flush().at(path)
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
        if bytes.len() < 4 || &bytes[0..4] != b"SEL1" {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "SEL1",
            });
        }
        if bytes.len() < 18 {
            return Err(Error::TruncatedFile {
                path: path.to_path_buf(),
                expected: 18,
                actual: bytes.len() as u64,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != 1 {
            return Err(Error::VersionMismatch { found: version, expected: 1 });
        }
        let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let queries = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
        let expected = 18 + queries * n * 12;
        if bytes.len() != expected {
            return Err(Error::TruncatedFile {
                path: path.to_path_buf(),
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        let entries: Vec<(u64, f32)> = bytes[18..]
            .chunks_exact(12)
            .map(|b| {
                (
                    u64::from_le_bytes(b[0..8].try_into().unwrap()),
                    f32::from_le_bytes(b[8..12].try_into().unwrap()),
                )
            })
            .collect();
        let rows = entries.chunks(n.max(1)).map(<[_]>::to_vec).collect();
        Self::from_rows(n, rows)
    }
}

/// `Less` when (score_a, doc_a) ranks ahead of (score_b, doc_b).
fn rank_order(score_a: f32, doc_a: u64, score_b: f32, doc_b: u64) -> Ordering {
    score_b.total_cmp(&score_a).then(doc_a.cmp(&doc_b))
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f32,
    doc: u64,
}

// Heap order puts the worst candidate on top.
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(self.score, self.doc, other.score, other.doc)
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// Keeps the `n` best candidates seen so far.
#[derive(Debug, Clone)]
pub struct TopN {
    n: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopN {
    pub fn new(n: usize) -> Self {
        TopN {
            n,
            heap: BinaryHeap::with_capacity(n + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, score: f32, doc: u64) {
        // +0.0 folds a negative zero onto zero so ties compare equal.
        let cand = Candidate { score: score + 0.0, doc };
        if self.heap.len() < self.n {
            self.heap.push(cand);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if cand < *worst {
                *worst = cand;
            }
        }
    }

    /// Lowest score currently kept, once the heap is full.
    #[inline]
    fn floor(&self) -> Option<f32> {
        if self.heap.len() == self.n {
            self.heap.peek().map(|c| c.score)
        } else {
            None
        }
    }

    pub fn merge(&mut self, other: TopN) {
        for c in other.heap {
            self.push(c.score, c.doc);
        }
    }

    /// Best first.
    pub fn into_sorted(self) -> Vec<(u64, f32)> {
        self.heap.into_sorted_vec().into_iter().map(|c| (c.doc, c.score)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SearchOptions {
    pub n: usize,
    /// Worker threads; 0 uses the global rayon pool.
    pub workers: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            n: DEFAULT_TOP_N,
            workers: 0,
        }
    }
}

// Docs per tile, sized so a tile of 32-dim vectors stays in L2.
const DOC_TILE: usize = 2048;
const QUERY_GROUP: usize = 16;

/// Exact top-n search of every query against a stream of document chunks.
pub fn top_n_search<I>(queries: &EmbeddingMatrix, docs: I, opts: SearchOptions) -> Result<SelectionMatrix>
where
    I: IntoIterator<Item = Result<EmbeddingMatrix>>,
{
    if opts.n == 0 {
        return Err(Error::Validation("n must be at least 1".into()));
    }
    let pool = match opts.workers {
        0 => None,
        w => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::Validation(format!("cannot start {w} workers: {e}")))?,
        ),
    };
    let n = opts.n;
    let dims = queries.dims();
    let (queries, zero_queries) = l2_normalize(queries);
    if zero_queries > 0 {
        log::warn!("{zero_queries} query vector(s) are all zero and score 0 against every document");
    }
    let mut heaps: Vec<TopN> = (0..queries.rows()).map(|_| TopN::new(n)).collect();
    let mut offset = 0u64;
    let mut zero_docs = 0usize;
    for chunk in docs {
        let chunk = chunk?;
        if chunk.dims() != dims {
            return Err(Error::DimsMismatch {
                expected: dims,
                actual: chunk.dims(),
            });
        }
        let (chunk, zeros) = l2_normalize(&chunk);
        zero_docs += zeros;
        match &pool {
            Some(p) => p.install(|| scan_chunk(&queries, &chunk, offset, &mut heaps)),
            None => scan_chunk(&queries, &chunk, offset, &mut heaps),
        }
        offset += chunk.rows() as u64;
    }
    if zero_docs > 0 {
        log::warn!("{zero_docs} document vector(s) are all zero and score 0 against every query");
    }
    if offset < n as u64 {
        return Err(Error::InsufficientDocs {
            needed: n,
            available: offset,
        });
    }
    let rows = heaps.into_iter().map(TopN::into_sorted).collect();
    SelectionMatrix::from_rows(n, rows)
}

fn scan_chunk(queries: &EmbeddingMatrix, chunk: &EmbeddingMatrix, offset: u64, heaps: &mut [TopN]) {
    let dims = queries.dims();
    let docs = chunk.as_slice();
    heaps
        .par_chunks_mut(QUERY_GROUP)
        .enumerate()
        .for_each(|(g, group)| {
            let first = g * QUERY_GROUP;
            for (t, tile) in docs.chunks(DOC_TILE * dims.max(1)).enumerate() {
                let tile_offset = offset + (t * DOC_TILE) as u64;
                for (k, heap) in group.iter_mut().enumerate() {
                    scan_tile(queries.row(first + k), tile, dims, tile_offset, heap);
                }
            }
        });
}

/// Scores one query against a tile of docs, four docs at a time.
///
/// Each dot product is accumulated strictly in dimension order; the four
/// accumulators only interleave independent sums.
#[inline]
fn scan_tile(q: &[f32], tile: &[f32], dims: usize, offset: u64, heap: &mut TopN) {
    if dims == 0 {
        return;
    }
    let mut quads = tile.chunks_exact(4 * dims);
    let mut doc = offset;
    for quad in quads.by_ref() {
        let (d0, rest) = quad.split_at(dims);
        let (d1, rest) = rest.split_at(dims);
        let (d2, d3) = rest.split_at(dims);
        let (mut a0, mut a1, mut a2, mut a3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
        for i in 0..dims {
            let qi = q[i];
            a0 += qi * d0[i];
            a1 += qi * d1[i];
            a2 += qi * d2[i];
            a3 += qi * d3[i];
        }
        for (j, s) in [a0, a1, a2, a3].into_iter().enumerate() {
            if heap.floor().is_none_or(|f| s >= f) {
                heap.push(s, doc + j as u64);
            }
        }
        doc += 4;
    }
    for d in quads.remainder().chunks_exact(dims) {
        let s = dot(q, d);
        if heap.floor().is_none_or(|f| s >= f) {
            heap.push(s, doc);
        }
        doc += 1;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankStats {
    pub rank: usize,
    pub mean: f64,
    pub min: f32,
    pub max: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchSummary {
    pub queries: usize,
    pub n: usize,
    pub per_rank: Vec<RankStats>,
    /// Bucket lower edge in hundredths (`-100..=99`) to match count.
    pub histogram: BTreeMap<i32, u64>,
    /// Whether every row is non-increasing in score.
    pub descending: bool,
}

pub fn search_report(selection: &SelectionMatrix) -> SearchSummary {
    if selection.is_empty() {
        return SearchSummary {
            descending: true,
            ..SearchSummary::default()
        };
    }
    let n = selection.n();
    let queries = selection.queries();
    let mut per_rank: Vec<RankStats> = (0..n)
        .map(|r| RankStats {
            rank: r + 1,
            mean: 0.0,
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
        })
        .collect();
    let mut histogram = BTreeMap::new();
    let mut descending = true;
    for row in selection.iter_rows() {
        for (r, m) in row.iter().enumerate() {
            let s = &mut per_rank[r];
            s.mean += f64::from(m.score);
            s.min = s.min.min(m.score);
            s.max = s.max.max(m.score);
            let bucket = ((f64::from(m.score) * 100.0).floor() as i32).clamp(-100, 99);
            *histogram.entry(bucket).or_insert(0) += 1;
        }
        descending &= row.windows(2).all(|w| w[0].score >= w[1].score);
    }
    for s in &mut per_rank {
        s.mean /= queries as f64;
    }
    SearchSummary {
        queries,
        n,
        per_rank,
        histogram,
        descending,
    }
}

impl fmt::Display for SearchSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "queries\t{}\nn\t{}\ndescending\t{}", self.queries, self.n, self.descending)?;
        writeln!(f, "rank\tmean\tmin\tmax")?;
        for s in &self.per_rank {
            writeln!(f, "{}\t{:.6}\t{:.6}\t{:.6}", s.rank, s.mean, s.min, s.max)?;
        }
        writeln!(f, "bucket_low\tcount")?;
        for (b, c) in &self.histogram {
            writeln!(f, "{:.2}\t{c}", f64::from(*b) / 100.0)?;
        }
        Ok(())
    }
}
