//! Dense sentence-embedding matrices and the EMB1 file format.
//!
//! EMB1 layout (all integers little-endian):
//!
//! | bytes  | field                      |
//! |--------|----------------------------|
//! | 0..4   | magic `EMB1`               |
//! | 4..6   | version, u16 (= 1)         |
//! | 6..10  | dims, u32                  |
//! | 10..18 | rows, u64                  |
//! | 18     | normalized flag (0/1)      |
//! | 19..32 | reserved, zero             |
//!
//! followed by `rows * dims` f32 values, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_VERSION: u16 = 1;
pub const EMB_HEADER_LEN: usize = 32;

/// Row-major f32 matrix. Every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(dims) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{rows} x {dims} matrix needs {} values, got {}",
                rows.saturating_mul(dims),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: (pos / dims) as u64,
                col: (pos % dims) as u32,
            });
        }
        Ok(EmbeddingMatrix {
            rows,
            dims,
            data,
            normalized: false,
        })
    }

    pub fn zeros(rows: usize, dims: usize) -> Self {
        EmbeddingMatrix {
            rows,
            dims,
            data: vec![0.0; rows * dims],
            normalized: false,
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(dims: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dims);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dims {
                return Err(Error::DimsMismatch {
                    expected: dims,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dims, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Whether every nonzero row has unit norm.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on 0; a zero-dim matrix has no addressable rows.
        self.data.chunks_exact(self.dims.max(1)).take(if self.dims == 0 { 0 } else { self.rows })
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::IndexOutOfRange {
                    index: i as u64,
                    limit: self.rows as u64,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(EmbeddingMatrix {
            rows: indices.len(),
            dims: self.dims,
            data,
            normalized: self.normalized,
        })
    }

    /// Stacks matrices of equal width vertically.
    pub fn concat(parts: &[EmbeddingMatrix]) -> Result<Self> {
        let dims = parts.first().map_or(0, |m| m.dims);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        for m in parts {
            if m.dims != dims {
                return Err(Error::DimsMismatch {
                    expected: dims,
                    actual: m.dims,
                });
            }
            data.extend_from_slice(&m.data);
        }
        Ok(EmbeddingMatrix {
            rows: parts.iter().map(|m| m.rows).sum(),
            dims,
            data,
            normalized: parts.iter().all(|m| m.normalized),
        })
    }
}

/// Scales every nonzero row to unit Euclidean norm.
///
/// Zero rows stay zero and are counted in the returned tally; they score
/// cosine 0 against everything downstream.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> (EmbeddingMatrix, usize) {
    let mut data = matrix.data.clone();
    let mut zero_rows = 0;
    if matrix.dims > 0 {
        for row in data.chunks_exact_mut(matrix.dims) {
            if !normalize_in_place(row) {
                zero_rows += 1;
            }
        }
    }
    let out = EmbeddingMatrix {
        rows: matrix.rows,
        dims: matrix.dims,
        data,
        normalized: true,
    };
    (out, zero_rows)
}

/// Returns false (leaving the row untouched) when the row is all zeros.
pub(crate) fn normalize_in_place(row: &mut [f32]) -> bool {
    let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    for v in row.iter_mut() {
        *v = (f64::from(*v) / norm) as f32;
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub version: u16,
    pub dims: u32,
    pub rows: u64,
    pub normalized: bool,
}

impl EmbeddingHeader {
    pub fn payload_bytes(&self) -> u64 {
        self.rows * u64::from(self.dims) * 4
    }

    pub fn file_bytes(&self) -> u64 {
        EMB_HEADER_LEN as u64 + self.payload_bytes()
    }

    pub fn to_bytes(&self) -> [u8; EMB_HEADER_LEN] {
        let mut b = [0u8; EMB_HEADER_LEN];
        b[0..4].copy_from_slice(EMB_MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..10].copy_from_slice(&self.dims.to_le_bytes());
        b[10..18].copy_from_slice(&self.rows.to_le_bytes());
        b[18] = u8::from(self.normalized);
        b
    }

    pub fn parse(bytes: &[u8; EMB_HEADER_LEN], path: &Path) -> Result<Self> {
        if &bytes[0..4] != EMB_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "EMB1",
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != EMB_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: EMB_VERSION,
            });
        }
        let flag = bytes[18];
        if flag > 1 {
            return Err(Error::Malformed {
                what: "EMB1 header",
                detail: format!("normalized flag {flag}"),
            });
        }
        Ok(EmbeddingHeader {
            version,
            dims: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
            rows: u64::from_le_bytes(bytes[10..18].try_into().unwrap()),
            normalized: flag == 1,
        })
    }
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = EmbeddingWriter::create(path, matrix.dims, matrix.normalized)?;
    w.push(matrix)?;
    w.finish()?;
    Ok(())
}

/// Appends rows to an EMB1 file; the row count is patched in on `finish`.
pub struct EmbeddingWriter {
    path: PathBuf,
    out: BufWriter<File>,
    dims: usize,
    rows: u64,
    normalized: bool,
}

impl EmbeddingWriter {
    pub fn create(path: impl AsRef<Path>, dims: usize, normalized: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).at(&path)?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        let header = EmbeddingHeader {
            version: EMB_VERSION,
            dims: dims as u32,
            rows: 0,
            normalized,
        };
        out.write_all(&header.to_bytes()).at(&path)?;
        Ok(EmbeddingWriter {
            path,
            out,
            dims,
            rows: 0,
            normalized,
        })
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dims {
            return Err(Error::DimsMismatch {
                expected: self.dims,
                actual: row.len(),
            });
        }
        for (c, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: self.rows,
                    col: c as u32,
                });
            }
            self.out.write_all(&v.to_le_bytes()).at(&self.path)?;
        }
        self.rows += 1;
        Ok(())
    }

    pub fn push(&mut self, matrix: &EmbeddingMatrix) -> Result<()> {
        if matrix.dims != self.dims {
            return Err(Error::DimsMismatch {
                expected: self.dims,
                actual: matrix.dims,
            });
        }
        for row in matrix.iter_rows() {
            self.push_row(row)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<EmbeddingHeader> {
        let EmbeddingWriter {
            path,
            out,
            dims,
            rows,
            normalized,
        } = self;
        let mut file = out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        let header = EmbeddingHeader {
            version: EMB_VERSION,
            dims: dims as u32,
            rows,
            normalized,
        };
        file.seek(SeekFrom::Start(0)).at(&path)?;
        file.write_all(&header.to_bytes()).at(&path)?;
        file.sync_data().at(&path)?;
        Ok(header)
    }
}

/// Reads only the header of an EMB1 file.
pub fn read_header(path: impl AsRef<Path>) -> Result<EmbeddingHeader> {
    Ok(EmbeddingReader::open(path)?.header)
}

/// Streams an EMB1 file in chunks of at most `chunk_rows` rows.
pub fn read_embeddings(path: impl AsRef<Path>, chunk_rows: usize) -> Result<EmbeddingChunks> {
    EmbeddingReader::open(path)?.chunks(chunk_rows)
}

/// Loads a whole EMB1 file into memory.
pub fn read_all(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let reader = EmbeddingReader::open(path)?;
    let header = reader.header;
    match reader.chunks(header.rows.max(1) as usize)?.next() {
        Some(m) => m,
        None => {
            let mut m = EmbeddingMatrix::zeros(0, header.dims as usize);
            m.normalized = header.normalized;
            Ok(m)
        }
    }
}

pub struct EmbeddingReader {
    path: PathBuf,
    header: EmbeddingHeader,
    input: BufReader<File>,
}

impl EmbeddingReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).at(&path)?;
        let actual = file.metadata().at(&path)?.len();
        let mut input = BufReader::with_capacity(1 << 20, file);
        if actual < EMB_HEADER_LEN as u64 {
            // Too short to hold a header; only call it truncated if what is there looks like EMB1.
            let mut head = Vec::new();
            input.read_to_end(&mut head).at(&path)?;
            if !EMB_MAGIC.starts_with(&head[..head.len().min(4)]) {
                return Err(Error::BadMagic {
                    path,
                    expected: "EMB1",
                });
            }
            return Err(Error::TruncatedFile {
                path,
                expected: EMB_HEADER_LEN as u64,
                actual,
            });
        }
        let mut raw = [0u8; EMB_HEADER_LEN];
        input.read_exact(&mut raw).at(&path)?;
        let header = EmbeddingHeader::parse(&raw, &path)?;
        let expected = header.file_bytes();
        if actual < expected {
            return Err(Error::TruncatedFile {
                path,
                expected,
                actual,
            });
        }
        if actual > expected {
            return Err(Error::Malformed {
                what: "EMB1 file",
                detail: format!("{} trailing bytes after payload", actual - expected),
            });
        }
        Ok(EmbeddingReader {
            path,
            header,
            input,
        })
    }

    pub fn header(&self) -> EmbeddingHeader {
        self.header
    }

    pub fn chunks(self, chunk_rows: usize) -> Result<EmbeddingChunks> {
        if chunk_rows == 0 {
            return Err(Error::Validation("chunk_rows must be at least 1".into()));
        }
        Ok(EmbeddingChunks {
            reader: self,
            chunk_rows,
            next_row: 0,
            buf: Vec::new(),
        })
    }
}

pub struct EmbeddingChunks {
    reader: EmbeddingReader,
    chunk_rows: usize,
    next_row: u64,
    buf: Vec<u8>,
}

impl EmbeddingChunks {
    pub fn header(&self) -> EmbeddingHeader {
        self.reader.header
    }

    /// Index of the first row of the next chunk.
    pub fn position(&self) -> u64 {
        self.next_row
    }
}

impl Iterator for EmbeddingChunks {
    type Item = Result<EmbeddingMatrix>;

    fn next(&mut self) -> Option<Self::Item> {
        let header = self.reader.header;
        if self.next_row >= header.rows {
            return None;
        }
        let rows = (header.rows - self.next_row).min(self.chunk_rows as u64) as usize;
        let dims = header.dims as usize;
        self.buf.resize(rows * dims * 4, 0);
        if let Err(e) = self.reader.input.read_exact(&mut self.buf) {
            // The size was checked on open, so this means the file shrank underneath us.
            self.next_row = header.rows;
            return Some(Err(Error::io(&self.reader.path, e)));
        }
        let data: Vec<f32> = self
            .buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let first = self.next_row;
        self.next_row += rows as u64;
        Some(
            EmbeddingMatrix::new(rows, dims, data)
                .map(|mut m| {
                    m.normalized = header.normalized;
                    m
                })
                .map_err(|e| match e {
                    Error::NonFinite { row, col } => Error::NonFinite { row: row + first, col },
                    other => other,
                }),
        )
    }
}

/// Deterministic character-trigram feature hashing.
///
/// Each sentence is split into overlapping 3-character windows (sentences
/// shorter than that contribute themselves as a single feature), every
/// window is hashed with seeded FNV-1a into one of `dims` buckets, and the
/// count vector is L2-normalized. Empty sentences give zero vectors.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dims: usize,
    seed: u64,
}

pub const HASH_NGRAM: usize = 3;

impl HashEmbedder {
    pub fn new(dims: usize, seed: u64) -> Result<Self> {
        if dims < 2 {
            return Err(Error::Validation(format!("hash embedding dims must be >= 2, got {dims}")));
        }
        Ok(HashEmbedder { dims, seed })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    fn bucket(&self, gram: &[char]) -> usize {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |b: u8| {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        };
        self.seed.to_le_bytes().into_iter().for_each(&mut feed);
        let mut utf8 = [0u8; 4];
        for c in gram {
            c.encode_utf8(&mut utf8).bytes().for_each(&mut feed);
        }
        (h % self.dims as u64) as usize
    }

    /// Embeds one sentence. Returns the vector and whether it is nonzero.
    pub fn embed_into(&self, sentence: &str, out: &mut [f32]) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        let chars: Vec<char> = sentence.chars().collect();
        if chars.is_empty() {
            return false;
        }
        if chars.len() < HASH_NGRAM {
            out[self.bucket(&chars)] += 1.0;
        } else {
            for gram in chars.windows(HASH_NGRAM) {
                out[self.bucket(gram)] += 1.0;
            }
        }
        normalize_in_place(out)
    }

    pub fn embed(&self, sentence: &str) -> Vec<f32> {
        let mut v = vec![0.0; self.dims];
        self.embed_into(sentence, &mut v);
        v
    }
}

/// Embeds every sentence with [`HashEmbedder`].
pub fn hash_embed<I, S>(sentences: I, dims: usize, seed: u64) -> Result<EmbeddingMatrix>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let embedder = HashEmbedder::new(dims, seed)?;
    let mut data = Vec::new();
    let mut row = vec![0.0; dims];
    let mut rows = 0;
    for s in sentences {
        embedder.embed_into(s.as_ref(), &mut row);
        data.extend_from_slice(&row);
        rows += 1;
    }
    let mut m = EmbeddingMatrix::new(rows, dims, data)?;
    m.normalized = true;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cos64(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
        let na: f64 = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn zeros_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.emb");
        write_embeddings(&EmbeddingMatrix::zeros(2, 3), &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 32 + 24);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"EMB1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[3, 0, 0, 0]);
        assert_eq!(&bytes[10..18], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes[18], 0);
        assert!(bytes[19..32].iter().all(|&b| b == 0));
    }

    #[test]
    fn empty_file_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.emb");
        write_embeddings(&EmbeddingMatrix::zeros(0, 5), &p).unwrap();
        let h = read_header(&p).unwrap();
        assert_eq!((h.rows, h.dims), (0, 5));
        assert_eq!(read_embeddings(&p, 4).unwrap().count(), 0);
    }

    #[test]
    fn chunking() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.emb");
        let m = EmbeddingMatrix::new(10, 2, (0..20).map(|v| v as f32).collect()).unwrap();
        write_embeddings(&m, &p).unwrap();
        let sizes: Vec<usize> = read_embeddings(&p, 4).unwrap().map(|c| c.unwrap().rows()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let sizes: Vec<usize> = read_embeddings(&p, 10).unwrap().map(|c| c.unwrap().rows()).collect();
        assert_eq!(sizes, vec![10]);
        let sizes: Vec<usize> = read_embeddings(&p, 99).unwrap().map(|c| c.unwrap().rows()).collect();
        assert_eq!(sizes, vec![10]);
    }

    #[test]
    fn truncated_mid_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.emb");
        write_embeddings(&EmbeddingMatrix::zeros(3, 4), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 6]).unwrap();
        match read_embeddings(&p, 2) {
            Err(Error::TruncatedFile { expected, actual, .. }) => {
                assert_eq!(expected, 32 + 48);
                assert_eq!(actual, 32 + 42);
            }
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.emb");
        std::fs::write(&p, [b'X'; 40]).unwrap();
        assert!(matches!(read_header(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            EmbeddingMatrix::new(1, 2, vec![0.0, f32::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn normalize_examples() {
        let m = EmbeddingMatrix::from_rows(2, &[[3.0, 4.0], [0.0, 0.0], [0.6, 0.8]]).unwrap();
        let (n, zeros) = l2_normalize(&m);
        assert_eq!(zeros, 1);
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[0.0, 0.0]);
        assert!((n.row(2)[0] - 0.6).abs() < 1e-7 && (n.row(2)[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn hash_embed_is_deterministic() {
        let m = hash_embed(["the cat sat", "the cat sat", ""], 16, 3).unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert!((cos64(m.row(0), m.row(1)) - 1.0).abs() < 1e-6);
        assert!(m.row(2).iter().all(|&v| v == 0.0));
        assert_eq!(m, hash_embed(["the cat sat", "the cat sat", ""], 16, 3).unwrap());
    }

    #[test]
    fn hash_embed_buckets_match_reference() {
        // Buckets from an independent FNV-1a script: seed 0 as 8 LE bytes, then the UTF-8 trigram.
        //   "abc" -> 3, "xyz" -> 0 with dims = 8
        let m = hash_embed(["abc", "xyz"], 8, 0).unwrap();
        let mut a = [0.0f32; 8];
        a[3] = 1.0;
        let mut b = [0.0f32; 8];
        b[0] = 1.0;
        assert_eq!(m.row(0), &a);
        assert_eq!(m.row(1), &b);
        assert_eq!(cos64(m.row(0), m.row(1)), 0.0);
    }

    #[test]
    fn hash_embed_rejects_tiny_dims() {
        assert!(hash_embed(["a"], 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn write_read_bit_exact(rows in 0usize..20, dims in 1usize..9, chunk in 1usize..7,
                                seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * dims)
                .map(|i| f32::from_bits(((i as u32).wrapping_mul(2654435761) ^ seed) & 0x3fff_ffff))
                .collect();
            let m = EmbeddingMatrix::new(rows, dims, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.emb");
            write_embeddings(&m, &p).unwrap();
            let parts: Vec<_> = read_embeddings(&p, chunk).unwrap().collect::<Result<_>>().unwrap();
            let back: Vec<u32> = parts.iter().flat_map(|c| c.as_slice().iter().map(|v| v.to_bits())).collect();
            let orig: Vec<u32> = m.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(back, orig);
        }

        #[test]
        fn normalized_dot_is_raw_cosine(a in proptest::collection::vec(-10.0f32..10.0, 6),
                                        b in proptest::collection::vec(-10.0f32..10.0, 6)) {
            prop_assume!(a.iter().any(|&v| v != 0.0) && b.iter().any(|&v| v != 0.0));
            let m = EmbeddingMatrix::from_rows(6, &[a.clone(), b.clone()]).unwrap();
            let (n, _) = l2_normalize(&m);
            for r in 0..2 {
                let norm: f64 = n.row(r).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-6);
            }
            let dot: f64 = n.row(0).iter().zip(n.row(1)).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&dot));
            prop_assert!((dot - cos64(&a, &b)).abs() <= 1e-6);
        }
    }
}
