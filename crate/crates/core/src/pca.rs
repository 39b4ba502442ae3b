//! PCA pooling of sentence embeddings.
//!
//! The model is fitted from the `in_dims x in_dims` sample covariance
//! (divisor `n - 1`), so the fitting sample can be streamed in chunks and
//! never has to be resident. Component signs are fixed so that the
//! largest-magnitude entry of each component is positive.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::embedding_store::EmbeddingMatrix;
use crate::error::{Error, IoContext, Result};

pub const PCA_MAGIC: &[u8; 4] = b"PCA1";
pub const PCA_VERSION: u16 = 1;
const PCA_HEADER_LEN: usize = 14;

pub const DEFAULT_IN_DIMS: usize = 768;
pub const DEFAULT_OUT_DIMS: usize = 32;
pub const DEFAULT_SAMPLE_ROWS: u64 = 500_000;

// Rows per GEMM block and blocks per parallel batch. Both are fixed so that
// the floating-point reduction order does not depend on the thread count.
const BLOCK_ROWS: usize = 512;
const BATCH_BLOCKS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    in_dims: usize,
    out_dims: usize,
    mean: Vec<f32>,
    /// `out_dims x in_dims`, row-major; rows are principal axes.
    components: Vec<f32>,
    explained_variance: Vec<f32>,
}

impl PcaModel {
    pub fn in_dims(&self) -> usize {
        self.in_dims
    }

    pub fn out_dims(&self) -> usize {
        self.out_dims
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn component(&self, k: usize) -> &[f32] {
        &self.components[k * self.in_dims..(k + 1) * self.in_dims]
    }

    pub fn components(&self) -> &[f32] {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f32] {
        &self.explained_variance
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let floats = self.in_dims + self.components.len() + self.out_dims;
        let mut buf = Vec::with_capacity(PCA_HEADER_LEN + 4 * floats);
        buf.extend_from_slice(PCA_MAGIC);
        buf.extend_from_slice(&PCA_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.in_dims as u32).to_le_bytes());
        buf.extend_from_slice(&(self.out_dims as u32).to_le_bytes());
        for v in self.mean.iter().chain(&self.components).chain(&self.explained_variance) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).at(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).at(path)?;
        if bytes.len() < 4 || &bytes[0..4] != PCA_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "PCA1",
            });
        }
        if bytes.len() < PCA_HEADER_LEN {
            return Err(Error::TruncatedFile {
                path: path.to_path_buf(),
                expected: PCA_HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != PCA_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: PCA_VERSION,
            });
        }
        let in_dims = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let out_dims = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let floats = in_dims + out_dims * in_dims + out_dims;
        let expected = PCA_HEADER_LEN + 4 * floats;
        if bytes.len() != expected {
            return Err(Error::TruncatedFile {
                path: path.to_path_buf(),
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut values = bytes[PCA_HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let mut take = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };
        let mean = take(in_dims);
        let components = take(out_dims * in_dims);
        let explained_variance = take(out_dims);
        Ok(PcaModel {
            in_dims,
            out_dims,
            mean,
            components,
            explained_variance,
        })
    }
}

/// Streaming accumulator of the sample mean and covariance.
///
/// Sums are taken relative to the first row seen, which keeps the
/// single-pass co-moment well conditioned for embeddings with a large
/// common offset.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    dims: usize,
    count: u64,
    shift: Option<Vec<f64>>,
    sum: Vec<f64>,
    /// Column-major `dims x dims`.
    comoment: DMatrix<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dims: usize) -> Self {
        CovarianceAccumulator {
            dims,
            count: 0,
            shift: None,
            sum: vec![0.0; dims],
            comoment: DMatrix::zeros(dims, dims),
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn add(&mut self, matrix: &EmbeddingMatrix) -> Result<()> {
        if matrix.dims() != self.dims {
            return Err(Error::DimsMismatch {
                expected: self.dims,
                actual: matrix.dims(),
            });
        }
        if matrix.is_empty() {
            return Ok(());
        }
        let dims = self.dims;
        let shift = self
            .shift
            .get_or_insert_with(|| matrix.row(0).iter().map(|&v| f64::from(v)).collect())
            .clone();
        let blocks: Vec<&[f32]> = matrix.as_slice().chunks(BLOCK_ROWS * dims).collect();
        for batch in blocks.chunks(BATCH_BLOCKS) {
            let partials: Vec<(Vec<f64>, DMatrix<f64>, usize)> = batch
                .par_iter()
                .map(|block| {
                    let rows = block.len() / dims;
                    // Column j of `centered` is row j of the block.
                    let centered = DMatrix::from_iterator(
                        dims,
                        rows,
                        block.iter().enumerate().map(|(i, &v)| f64::from(v) - shift[i % dims]),
                    );
                    let sums = centered.column_sum().iter().copied().collect();
                    let co = &centered * centered.transpose();
                    (sums, co, rows)
                })
                .collect();
            for (sums, co, rows) in partials {
                for (acc, s) in self.sum.iter_mut().zip(sums) {
                    *acc += s;
                }
                self.comoment += co;
                self.count += rows as u64;
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        match &self.shift {
            Some(shift) => shift.iter().zip(&self.sum).map(|(s, t)| s + t / n).collect(),
            None => vec![0.0; self.dims],
        }
    }

    /// Sample covariance with divisor `n - 1`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.count as f64;
        let denom = (n - 1.0).max(1.0);
        let d = self.dims;
        let mut cov = DMatrix::zeros(d, d);
        for j in 0..d {
            for i in 0..d {
                cov[(i, j)] = (self.comoment[(i, j)] - self.sum[i] * self.sum[j] / n) / denom;
            }
        }
        // Symmetrize exactly; the GEMM partial sums are symmetric only up to rounding.
        for j in 0..d {
            for i in 0..j {
                let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        cov
    }

    /// Eigendecomposes the covariance and keeps the top `out_dims` axes.
    pub fn finish(&self, out_dims: usize) -> Result<PcaModel> {
        if out_dims == 0 || out_dims > self.dims {
            return Err(Error::Validation(format!(
                "out_dims must be in 1..={}, got {out_dims}",
                self.dims
            )));
        }
        if self.count < out_dims as u64 || self.count < 2 {
            return Err(Error::DegenerateSample {
                rows: self.count,
                out_dims,
            });
        }
        let cov = self.covariance();
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..self.dims).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

        let mut components = Vec::with_capacity(out_dims * self.dims);
        let mut explained_variance = Vec::with_capacity(out_dims);
        for &k in order.iter().take(out_dims) {
            let axis = eig.eigenvectors.column(k);
            let pivot = axis
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |best, (i, &v)| if v.abs() > best.1.abs() { (i, v) } else { best })
                .0;
            let sign = if axis[pivot] < 0.0 { -1.0 } else { 1.0 };
            components.extend(axis.iter().map(|&v| (sign * v) as f32));
            explained_variance.push(eig.eigenvalues[k].max(0.0) as f32);
        }
        Ok(PcaModel {
            in_dims: self.dims,
            out_dims,
            mean: self.mean().into_iter().map(|v| v as f32).collect(),
            components,
            explained_variance,
        })
    }
}

/// Fits PCA on an in-memory sample.
pub fn fit_pca(sample: &EmbeddingMatrix, out_dims: usize) -> Result<PcaModel> {
    if out_dims > sample.dims() {
        return Err(Error::Validation(format!(
            "out_dims {out_dims} exceeds input dims {}",
            sample.dims()
        )));
    }
    if sample.rows() < out_dims {
        return Err(Error::DegenerateSample {
            rows: sample.rows() as u64,
            out_dims,
        });
    }
    let mut acc = CovarianceAccumulator::new(sample.dims());
    acc.add(sample)?;
    acc.finish(out_dims)
}

/// Projects every row onto the principal axes: `components . (x - mean)`.
pub fn transform(matrix: &EmbeddingMatrix, model: &PcaModel) -> Result<EmbeddingMatrix> {
    if matrix.dims() != model.in_dims {
        return Err(Error::DimsMismatch {
            expected: model.in_dims,
            actual: matrix.dims(),
        });
    }
    let out_dims = model.out_dims;
    let mut out = vec![0.0f32; matrix.rows() * out_dims];
    if out_dims > 0 {
        out.par_chunks_mut(out_dims)
            .zip(matrix.as_slice().par_chunks(model.in_dims.max(1)))
            .for_each(|(dst, row)| project_row(model, row, dst));
    }
    EmbeddingMatrix::new(matrix.rows(), out_dims, out)
}

fn project_row(model: &PcaModel, row: &[f32], dst: &mut [f32]) {
    for (k, d) in dst.iter_mut().enumerate() {
        let axis = model.component(k);
        let mut acc = 0.0f64;
        for i in 0..model.in_dims {
            acc += f64::from(axis[i]) * (f64::from(row[i]) - f64::from(model.mean[i]));
        }
        *d = acc as f32;
    }
}
