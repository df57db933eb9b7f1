//! Spot radius graph and the normalized propagation operator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Spots joined when their Euclidean distance is strictly below `radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotGraph {
    pub coords: Vec<[f64; 2]>,
    pub radius: f64,
    /// Binary, symmetric, zero diagonal.
    pub adjacency: Matrix,
    /// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
    pub propagation: Matrix,
}

impl SpotGraph {
    pub fn n_spots(&self) -> usize {
        self.coords.len()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.as_slice().iter().filter(|&&v| v != 0.0).count() / 2
    }

    /// Undirected edge list `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_spots();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency[(i, j)] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Builds the radius adjacency and its self-looped symmetric normalization.
pub fn build_radius_adjacency(coords: &[[f64; 2]], radius: f64) -> Result<SpotGraph> {
    if coords.is_empty() {
        return Err(Error::Input("graph needs at least one spot".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Parameter(format!("radius must be positive, got {radius}")));
    }
    if let Some(i) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(Error::Input(format!("non-finite coordinates for spot {i}")));
    }
    let n = coords.len();
    let mut adjacency = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if dist(coords[i], coords[j]) < radius {
                adjacency[(i, j)] = 1.0;
                adjacency[(j, i)] = 1.0;
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let deg = 1.0 + adjacency.row(i).iter().sum::<f64>();
            1.0 / deg.sqrt()
        })
        .collect();
    let mut propagation = Matrix::zeros(n, n);
    for i in 0..n {
        propagation[(i, i)] = inv_sqrt_deg[i] * inv_sqrt_deg[i];
        for j in 0..n {
            if adjacency[(i, j)] != 0.0 {
                propagation[(i, j)] = inv_sqrt_deg[i] * inv_sqrt_deg[j];
            }
        }
    }
    Ok(SpotGraph {
        coords: coords.to_vec(),
        radius,
        adjacency,
        propagation,
    })
}

/// 1.5 × the minimum pairwise spot distance, which links only nearest
/// neighbours on square and hexagonal lattices.
pub fn default_radius(coords: &[[f64; 2]]) -> Result<f64> {
    if coords.len() < 2 {
        return Err(Error::Parameter(format!(
            "default radius needs at least 2 spots, got {}",
            coords.len()
        )));
    }
    let mut min = f64::INFINITY;
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            let d = dist(coords[i], coords[j]);
            if d > 0.0 && d < min {
                min = d;
            }
        }
    }
    if !min.is_finite() {
        return Err(Error::Input("all spots share the same coordinates".into()));
    }
    Ok(1.5 * min)
}

/// Seeded uniform permutation of `0..n`.
pub fn shuffle_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Row-shuffled copy of `x`; the DGI negative sample.
pub fn shuffle_rows(x: &Matrix, seed: u64) -> Matrix {
    x.select_rows(&shuffle_permutation(x.rows(), seed))
}
