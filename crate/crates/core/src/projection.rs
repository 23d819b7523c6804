//! Feature compression fitted on first-stage features and frozen afterwards:
//! PCA onto the top principal directions of the sample covariance, or a
//! seeded random sample of k coordinates. Both are affine, so prototypes may
//! be projected either before or after averaging with identical results.

use ndarray::{Array1, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::named_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMethod {
    Pca,
    Random,
}

impl std::str::FromStr for ProjectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ProjectionMethod::Pca),
            "random" => Ok(ProjectionMethod::Random),
            other => Err(Error::config(format!("unknown projection method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
enum ProjKind {
    Pca { mean: Array1<f64>, components: Array2<f64> },
    Random { indices: Vec<usize> },
}

/// A fitted, immutable projector from `input_dim` to `k` dimensions.
#[derive(Debug, Clone)]
pub struct Projector {
    input_dim: usize,
    k: usize,
    kind: ProjKind,
}

impl Projector {
    pub fn method(&self) -> ProjectionMethod {
        match self.kind {
            ProjKind::Pca { .. } => ProjectionMethod::Pca,
            ProjKind::Random { .. } => ProjectionMethod::Random,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.k
    }

    /// PCA mean vector, when applicable.
    pub fn mean(&self) -> Option<&Array1<f64>> {
        match &self.kind {
            ProjKind::Pca { mean, .. } => Some(mean),
            _ => None,
        }
    }

    /// PCA component matrix `[input_dim, k]`, orthonormal columns.
    pub fn components(&self) -> Option<&Array2<f64>> {
        match &self.kind {
            ProjKind::Pca { components, .. } => Some(components),
            _ => None,
        }
    }

    /// Sorted coordinate list for the random sampler.
    pub fn indices(&self) -> Option<&[usize]> {
        match &self.kind {
            ProjKind::Random { indices } => Some(indices),
            _ => None,
        }
    }

    pub fn project(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::shape(format!(
                "projector expects length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(match &self.kind {
            ProjKind::Pca { mean, components } => {
                let centered = x - mean;
                components.t().dot(&centered)
            }
            ProjKind::Random { indices } => indices.iter().map(|&i| x[i]).collect(),
        })
    }

    pub fn project_batch(&self, xs: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::<f64>::zeros((xs.shape()[0], self.k));
        for (i, row) in xs.outer_iter().enumerate() {
            out.row_mut(i).assign(&self.project(&row.to_owned())?);
        }
        Ok(out)
    }

    /// Named tensors for the binary container.
    pub fn to_tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        match &self.kind {
            ProjKind::Pca { mean, components } => vec![
                ("pca.mean".to_string(), mean.clone().into_dyn()),
                ("pca.components".to_string(), components.clone().into_dyn()),
            ],
            ProjKind::Random { indices } => {
                let v: Array1<f64> = indices.iter().map(|&i| i as f64).collect();
                vec![
                    ("random.indices".to_string(), v.into_dyn()),
                    (
                        "random.input_dim".to_string(),
                        Array1::from_vec(vec![self.input_dim as f64]).into_dyn(),
                    ),
                ]
            }
        }
    }

    pub fn from_tensors(tensors: Vec<(String, ArrayD<f64>)>) -> Result<Self> {
        let map: std::collections::HashMap<String, ArrayD<f64>> = tensors.into_iter().collect();
        if let Some(idx) = map.get("random.indices") {
            let indices: Vec<usize> = idx.iter().map(|&v| v as usize).collect();
            let input_dim = map
                .get("random.input_dim")
                .and_then(|v| v.first().copied())
                .ok_or_else(|| Error::Corrupt("projector container missing random.input_dim".into()))?
                as usize;
            return Ok(Projector { input_dim, k: indices.len(), kind: ProjKind::Random { indices } });
        }
        let mean = map
            .get("pca.mean")
            .ok_or_else(|| Error::Corrupt("projector container missing entries".into()))?
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::Corrupt("pca.mean must be rank 1".into()))?;
        let components = map
            .get("pca.components")
            .ok_or_else(|| Error::Corrupt("projector container missing pca.components".into()))?
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::Corrupt("pca.components must be rank 2".into()))?;
        Ok(Projector {
            input_dim: mean.len(),
            k: components.shape()[1],
            kind: ProjKind::Pca { mean, components },
        })
    }
}

/// Fit a projector on an `n x D` feature matrix.
pub fn fit_projector(
    features: &Array2<f64>,
    k: usize,
    method: ProjectionMethod,
    seed: u64,
) -> Result<Projector> {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    match method {
        ProjectionMethod::Pca => {
            if k == 0 || k > d.min(n) {
                return Err(Error::config(format!(
                    "pca: k = {k} outside 1..=min(n = {n}, dim = {d})"
                )));
            }
            let mean = features.mean_axis(Axis(0)).expect("n >= 1");
            let centered = features - &mean.view().insert_axis(Axis(0));
            let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
            let cov = centered.t().dot(&centered) / denom;
            let (eigvals, eigvecs) = symmetric_eigen(&cov);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
            let mut components = Array2::<f64>::zeros((d, k));
            for (col, &src) in order.iter().take(k).enumerate() {
                let mut v = eigvecs.column(src).to_owned();
                // Deterministic sign: largest-magnitude coordinate positive.
                let pivot = v
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if v[pivot] < 0.0 {
                    v.mapv_inplace(|x| -x);
                }
                components.column_mut(col).assign(&v);
            }
            Ok(Projector { input_dim: d, k, kind: ProjKind::Pca { mean, components } })
        }
        ProjectionMethod::Random => {
            if k == 0 || k > d {
                return Err(Error::config(format!("random: k = {k} outside 1..={d}")));
            }
            let mut rng = named_rng(seed, "projection/random");
            let mut indices = rand::seq::index::sample(&mut rng, d, k).into_vec();
            indices.sort_unstable();
            Ok(Projector { input_dim: d, k, kind: ProjKind::Random { indices } })
        }
    }
}

/// Eigenvalues of the PCA covariance in descending order (diagnostics).
pub fn pca_explained_variance(features: &Array2<f64>) -> Vec<f64> {
    let n = features.shape()[0];
    let mean = features.mean_axis(Axis(0)).expect("n >= 1");
    let centered = features - &mean.view().insert_axis(Axis(0));
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.t().dot(&centered) / denom;
    let (eigvals, _) = symmetric_eigen(&cov);
    let mut v: Vec<f64> = eigvals.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns), unsorted. Deterministic.
fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.shape()[0];
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = Array1::from_shape_fn(n, |i| m[[i, i]]);
    (eig, v)
}
