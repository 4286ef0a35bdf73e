//! Dense f64 arithmetic and labeled, seed-derived random streams.
//!
//! Everything the network needs is small and fixed-shape, so matrices are
//! plain row-major buffers and layer gradients are written by hand in
//! [`crate::model`].

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matmul output"));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }
}

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    a.matmul(b)
}

/// `out[j] = bias[j] + sum_i x[i] * w[i, j]` for a row-major `w` of shape `x.len() x out.len()`.
pub(crate) fn affine_t(w: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let n_out = out.len();
    debug_assert_eq!(w.len(), x.len() * n_out);
    out.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Backward of [`affine_t`]: accumulates `dw += x ⊗ dout`, `db += dout`, and `dx += w · dout`.
pub(crate) fn affine_t_backward(
    w: &[f64],
    x: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n_out = dout.len();
    for (b, d) in db.iter_mut().zip(dout) {
        *b += d;
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * n_out..(i + 1) * n_out];
        for (g, d) in row.iter_mut().zip(dout) {
            *g += xi * d;
        }
    }
    if let Some(dx) = dx {
        for (i, dxi) in dx.iter_mut().enumerate() {
            let row = &w[i * n_out..(i + 1) * n_out];
            *dxi += row.iter().zip(dout).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> Result<f64> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("l2_norm input"));
    }
    // scaled accumulation keeps huge or tiny entries from overflowing
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    let ss: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    Ok(scale * ss.sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sum(exp(scores)))` with max subtraction; `-inf` entries contribute nothing.
pub fn logsumexp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// A deterministic random stream derived from `(seed, label, keys...)`.
///
/// Streams with different labels or keys are independent, so the order of
/// draws on one stream never perturbs another.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        Self::derived(seed, label, &[])
    }

    pub fn derived(seed: u64, label: &str, keys: &[u64]) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        for k in keys {
            h.update(k.to_le_bytes());
        }
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest[..32]);
        Self {
            seed,
            label: label.to_string(),
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Child stream keyed by `keys` under this stream's seed and label.
    pub fn substream(&self, keys: &[u64]) -> Self {
        Self::derived(self.seed, &self.label, keys)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

pub fn gaussian_draw(rng: &mut RngStream, sigma: f64, n: usize) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; n]);
    }
    Ok((0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect())
}

/// Zero-mean Laplace draws with scale `b` by inverse CDF.
pub fn laplace_draw(rng: &mut RngStream, b: f64, n: usize) -> Result<Vec<f64>> {
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "laplace scale must be finite and >= 0, got {b}"
        )));
    }
    if b == 0.0 {
        return Ok(vec![0.0; n]);
    }
    Ok((0..n)
        .map(|_| {
            // u in (-0.5, 0.5), never exactly the endpoints
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            let u = if u == -0.5 { 0.0 } else { u };
            -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect())
}
