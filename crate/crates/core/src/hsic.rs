//! Gaussian-kernel HSIC, its normalized form and analytic gradients.
//!
//! `HSIC(A, B) = Tr(K_A J K_B J) / (n-1)²` with `J = I - 11ᵀ/n`. The trace is
//! evaluated as `Σ_ij (J K_A J)_ij (J K_B J)_ij`, so only O(n²) work is needed
//! and `J` is never materialized.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Symmetric Gaussian Gram matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: Matrix,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    /// `J K J`, using row, column and grand means.
    pub fn centered(&self) -> Matrix {
        CenteringMatrix::new(self.n()).conjugate(&self.values)
    }
}

/// The implicit centering matrix `J = I_n - (1/n) 11ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenteringMatrix {
    pub n: usize,
}

impl CenteringMatrix {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    /// `J v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mean = v.iter().sum::<f64>() / self.n as f64;
        v.iter().map(|x| x - mean).collect()
    }

    /// `J M J` for an n×n matrix.
    pub fn conjugate(&self, m: &Matrix) -> Matrix {
        let n = self.n;
        assert_eq!(m.shape(), (n, n));
        let row_means: Vec<f64> = m.row_iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let col_means = m.column_means();
        let grand = row_means.iter().sum::<f64>() / n as f64;
        Matrix::from_fn(n, n, |i, j| m[(i, j)] - row_means[i] - col_means[j] + grand)
    }

    /// Materialized `J`; only for small n.
    pub fn to_matrix(&self) -> Matrix {
        let inv = 1.0 / self.n as f64;
        Matrix::from_fn(self.n, self.n, |i, j| if i == j { 1.0 - inv } else { -inv })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `K_ij = exp(-‖x_i - x_j‖² / 2σ²)`.
pub fn gaussian_kernel(x: &Matrix, sigma: f64) -> Result<KernelMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    let n = x.rows();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in i + 1..n {
            let v = (-sq_dist(x.row(i), x.row(j)) * inv).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(KernelMatrix { values: k })
}

/// Median of the nonzero pairwise Euclidean distances, or 1.0 when every
/// pair coincides.
pub fn median_bandwidth(x: &Matrix) -> f64 {
    let n = x.rows();
    let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(x.row(i), x.row(j)).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<usize> {
    if a.rows() != b.rows() {
        return Err(Error::Input(format!(
            "HSIC inputs need equal row counts ({} vs {})",
            a.rows(),
            b.rows()
        )));
    }
    if a.rows() < 2 {
        return Err(Error::Input("HSIC needs at least 2 samples".into()));
    }
    Ok(a.rows())
}

/// `Σ_ij (J K_A J)_ij (J K_B J)_ij / (n-1)²`, equal to the trace form since
/// `J` is idempotent. Centering both sides makes constant inputs give exactly 0.
fn contract(ca: &Matrix, cb: &Matrix) -> f64 {
    let n = ca.rows() as f64;
    let s: f64 = ca
        .as_slice()
        .iter()
        .zip(cb.as_slice())
        .map(|(c, v)| c * v)
        .sum();
    s / ((n - 1.0) * (n - 1.0))
}

/// Biased HSIC estimator `Tr(K_A J K_B J) / (n-1)²`.
pub fn hsic(a: &Matrix, b: &Matrix, sigma_a: f64, sigma_b: f64) -> Result<f64> {
    check_pair(a, b)?;
    let ka = gaussian_kernel(a, sigma_a)?;
    let kb = gaussian_kernel(b, sigma_b)?;
    Ok(contract(&ka.centered(), &kb.centered()))
}

/// `HSIC(A,B) / sqrt((1 + HSIC(A,A)) (1 + HSIC(B,B)))`.
pub fn nhsic(a: &Matrix, b: &Matrix, sigma_a: f64, sigma_b: f64) -> Result<f64> {
    Ok(nhsic_with_grads(a, b, sigma_a, sigma_b, false, false)?.value)
}

/// Which argument of `nhsic` to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    First,
    Second,
}

/// Gradient of `nhsic` with respect to the entries of one argument, with the
/// bandwidths held fixed.
pub fn nhsic_grad(a: &Matrix, b: &Matrix, sigma_a: f64, sigma_b: f64, wrt: Wrt) -> Result<Matrix> {
    let out = nhsic_with_grads(a, b, sigma_a, sigma_b, wrt == Wrt::First, wrt == Wrt::Second)?;
    Ok(match wrt {
        Wrt::First => out.grad_a.expect("requested"),
        Wrt::Second => out.grad_b.expect("requested"),
    })
}

pub(crate) struct NhsicEval {
    pub value: f64,
    pub grad_a: Option<Matrix>,
    pub grad_b: Option<Matrix>,
}

pub(crate) fn nhsic_with_grads(
    a: &Matrix,
    b: &Matrix,
    sigma_a: f64,
    sigma_b: f64,
    want_a: bool,
    want_b: bool,
) -> Result<NhsicEval> {
    check_pair(a, b)?;
    let n = a.rows() as f64;
    let ka = gaussian_kernel(a, sigma_a)?;
    let kb = gaussian_kernel(b, sigma_b)?;
    let ca = ka.centered();
    let cb = kb.centered();
    let h_ab = contract(&ca, &cb);
    let h_aa = contract(&ca, &ca);
    let h_bb = contract(&cb, &cb);
    let s = ((1.0 + h_aa) * (1.0 + h_bb)).sqrt();
    let value = h_ab / s;

    let scale = 1.0 / ((n - 1.0) * (n - 1.0));
    // dnhsic/dK_A = (1/s) C_B/(n-1)² − h_ab/(2 s (1+h_aa)) · 2 C_A/(n-1)²
    let grad_for = |own_k: &KernelMatrix, own_c: &Matrix, other_c: &Matrix, own_h: f64, x: &Matrix, sigma: f64| {
        let w_other = scale / s;
        let w_self = -h_ab / (s * (1.0 + own_h)) * scale;
        let mut g = other_c.scale(w_other);
        g.add_scaled(own_c, w_self);
        kernel_input_grad(x, own_k, &g, sigma)
    };
    let grad_a = want_a.then(|| grad_for(&ka, &ca, &cb, h_aa, a, sigma_a));
    let grad_b = want_b.then(|| grad_for(&kb, &cb, &ca, h_bb, b, sigma_b));
    Ok(NhsicEval {
        value,
        grad_a,
        grad_b,
    })
}

/// Chains `dL/dK` (symmetric) through the Gaussian kernel to `dL/dX`:
/// `dx_i = Σ_j 2 G_ij K_ij (x_j - x_i) / σ²`.
fn kernel_input_grad(x: &Matrix, k: &KernelMatrix, g: &Matrix, sigma: f64) -> Matrix {
    let (n, d) = x.shape();
    let inv = 1.0 / (sigma * sigma);
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let xi = x.row(i);
        let mut acc = vec![0.0; d];
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = (g[(i, j)] + g[(j, i)]) * k.values[(i, j)] * inv;
            for ((a, xj), xi) in acc.iter_mut().zip(x.row(j)).zip(xi) {
                *a += w * (xj - xi);
            }
        }
        out.row_mut(i).copy_from_slice(&acc);
    }
    out
}
