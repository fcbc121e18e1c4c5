//! Residual injection, reparameterized sampling and ELBO terms on dense
//! `M x C` feature matrices.
//!
//! The loss is minimized: `loss = recon + kl`, the negated evidence lower bound.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub type FeatureMatrix = DMatrix<f64>;

/// Default latent residual weight.
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum VariationalError {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("sigma must be positive and finite, got {value} at ({row}, {col})")]
    NonPositiveSigma { row: usize, col: usize, value: f64 },
    #[error("matrix must have positive dimensions")]
    Empty,
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("malformed matrix file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, VariationalError>;

fn same_shape(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(VariationalError::DimensionMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn check_sigma(sigma: &FeatureMatrix) -> Result<()> {
    for c in 0..sigma.ncols() {
        for r in 0..sigma.nrows() {
            let v = sigma[(r, c)];
            if !(v.is_finite() && v > 0.0) {
                return Err(VariationalError::NonPositiveSigma { row: r, col: c, value: v });
            }
        }
    }
    Ok(())
}

/// `features + alpha * residual`.
pub fn inject_residual(features: &FeatureMatrix, residual: &FeatureMatrix, alpha: f64) -> Result<FeatureMatrix> {
    same_shape(features, residual)?;
    Ok(features + residual * alpha)
}

/// `mu + sigma .* eps`.
pub fn reparameterize(mu: &FeatureMatrix, sigma: &FeatureMatrix, eps: &FeatureMatrix) -> Result<FeatureMatrix> {
    same_shape(mu, sigma)?;
    same_shape(mu, eps)?;
    check_sigma(sigma)?;
    Ok(mu + sigma.component_mul(eps))
}

/// Standard-normal noise for [`reparameterize`].
pub fn sample_eps(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // row-major draw order so the stream does not depend on storage order
    let values: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    FeatureMatrix::from_row_slice(rows, cols, &values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// Mean over rows of the squared reconstruction error.
    pub recon: f64,
    /// KL divergence of `N(mu, sigma^2)` from the standard normal, averaged over rows.
    pub kl: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradients {
    pub d_mu: FeatureMatrix,
    pub d_sigma: FeatureMatrix,
    pub d_reconstruction: FeatureMatrix,
}

fn check_all(features: &FeatureMatrix, reconstruction: &FeatureMatrix, mu: &FeatureMatrix, sigma: &FeatureMatrix) -> Result<()> {
    if features.is_empty() {
        return Err(VariationalError::Empty);
    }
    same_shape(features, reconstruction)?;
    same_shape(features, mu)?;
    same_shape(features, sigma)?;
    check_sigma(sigma)
}

pub fn elbo_terms(
    features: &FeatureMatrix,
    reconstruction: &FeatureMatrix,
    mu: &FeatureMatrix,
    sigma: &FeatureMatrix,
) -> Result<ElboTerms> {
    check_all(features, reconstruction, mu, sigma)?;
    let m = features.nrows() as f64;
    let recon = (features - reconstruction).norm_squared() / m;
    let kl = mu
        .iter()
        .zip(sigma.iter())
        .map(|(mu, s)| {
            let s2 = s * s;
            mu * mu + s2 - 1.0 - s2.ln()
        })
        .sum::<f64>()
        * 0.5
        / m;
    Ok(ElboTerms {
        recon,
        kl,
        loss: recon + kl,
    })
}

/// Analytic gradients of `loss` with respect to `mu`, `sigma` and `reconstruction`.
pub fn elbo_gradients(
    features: &FeatureMatrix,
    reconstruction: &FeatureMatrix,
    mu: &FeatureMatrix,
    sigma: &FeatureMatrix,
) -> Result<ElboGradients> {
    check_all(features, reconstruction, mu, sigma)?;
    let m = features.nrows() as f64;
    Ok(ElboGradients {
        d_mu: mu / m,
        d_sigma: sigma.map(|s| (s - 1.0 / s) / m),
        d_reconstruction: (features - reconstruction) * (-2.0 / m),
    })
}

fn check_finite(m: &FeatureMatrix) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(VariationalError::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

/// Dense row-major CSV without a header.
pub fn read_matrix_csv<R: Read>(reader: R) -> Result<FeatureMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| VariationalError::Malformed(e.to_string()))?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(VariationalError::Malformed(format!("row {rows} has {} columns", record.len())));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| VariationalError::Malformed(format!("row {rows}: bad number {field:?}")))?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(VariationalError::Empty);
    }
    let m = FeatureMatrix::from_row_slice(rows, cols, &values);
    check_finite(&m)?;
    Ok(m)
}

pub fn write_matrix_csv<W: Write>(writer: W, m: &FeatureMatrix) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for row in m.row_iter() {
        wtr.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(|e| VariationalError::Malformed(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Binary layout: `u32 M`, `u32 C` (little endian), then `M * C` little-endian f64 in row-major order.
pub fn read_matrix_bin<R: Read>(mut reader: R) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(VariationalError::Malformed("header shorter than 8 bytes".into()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(VariationalError::Empty);
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| VariationalError::Malformed("dimensions overflow".into()))?;
    let payload = &bytes[8..];
    if payload.len() != expected {
        return Err(VariationalError::Malformed(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = FeatureMatrix::from_row_slice(rows, cols, &values);
    check_finite(&m)?;
    Ok(m)
}

pub fn write_matrix_bin<W: Write>(mut writer: W, m: &FeatureMatrix) -> Result<()> {
    let dim = |n: usize| u32::try_from(n).map_err(|_| VariationalError::Malformed("dimension exceeds u32".into()));
    let mut bytes = Vec::with_capacity(8 + m.len() * 8);
    bytes.extend_from_slice(&dim(m.nrows())?.to_le_bytes());
    bytes.extend_from_slice(&dim(m.ncols())?.to_le_bytes());
    for row in m.row_iter() {
        for v in row.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    writer.write_all(&bytes)?;
    Ok(())
}
