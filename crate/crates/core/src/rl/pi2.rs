use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalue floor applied when repairing an indefinite covariance.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// How the per-time cost `S_{k,t}` is accumulated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostToGo {
    /// `S_{k,t} = Σ_{j ≥ t} J_{k,j}`.
    #[default]
    Tail,
    /// `S_{k,t} = Σ_j J_{k,j}` at every `t`.
    FullSum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pi2Config {
    /// Softmax temperature. `None` picks a tenth of the largest per-time
    /// cost range.
    pub lambda: Option<f64>,
    pub cost_to_go: CostToGo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pi2Update {
    pub mean: DMatrix<f64>,
    /// Covariance over the column-major vectorized parameters.
    pub covariance: DMatrix<f64>,
    pub lambda: f64,
    /// `K × T` sample probabilities.
    pub probabilities: DMatrix<f64>,
}

/// Column-major vectorization of an `N × D` parameter matrix.
pub fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// `K` draws from `N(mean, cov)`, with `cov` over the column-major
/// vectorized mean.
pub fn sample_policies(mean: &DMatrix<f64>, cov: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> Result<Vec<DMatrix<f64>>> {
    let dim = mean.len();
    if k < 2 {
        return Err(Error::validation("need at least two samples"));
    }
    if cov.nrows() != dim || cov.ncols() != dim {
        return Err(Error::shape(format!(
            "covariance is {}x{}, parameters have {dim} entries",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("covariance must be finite"));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.min() < 0.0 {
        let worst = eig.eigenvalues.min();
        // Round-off negatives of a PSD matrix are not worth a warning.
        if worst < -1e-9 * eig.eigenvalues.amax().max(1.0) {
            log::warn!("covariance is not positive semi-definite (eigenvalue {worst:e}); flooring at {EIGEN_FLOOR:e}");
        }
    }
    let roots = eig.eigenvalues.map(|l| if l < 0.0 { EIGEN_FLOOR.sqrt() } else { l.sqrt() });
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    let mu = vectorize(mean);
    Ok((0..k)
        .map(|_| {
            let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
            let x = &mu + &factor * z;
            DMatrix::from_column_slice(mean.nrows(), mean.ncols(), x.as_slice())
        })
        .collect())
}

/// Softmax over samples at every time step, `K × T`, for the cost-to-go
/// matrix `s` (`K × T`).
pub fn probabilities(s: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(s.nrows(), s.ncols());
    for t in 0..s.ncols() {
        let col = s.column(t);
        let min = col.min();
        let e = col.map(|v| (-(v - min) / lambda).exp());
        let z = e.sum();
        p.column_mut(t).copy_from(&(e / z));
    }
    p
}

pub fn cost_to_go(costs: &[Vec<f64>], mode: CostToGo) -> DMatrix<f64> {
    let k = costs.len();
    let t = costs.first().map_or(0, Vec::len);
    let mut s = DMatrix::zeros(k, t);
    for (i, j) in costs.iter().enumerate() {
        match mode {
            CostToGo::Tail => {
                let mut acc = 0.0;
                for step in (0..t).rev() {
                    acc += j[step];
                    s[(i, step)] = acc;
                }
            }
            CostToGo::FullSum => {
                let total: f64 = j.iter().sum();
                s.row_mut(i).fill(total);
            }
        }
    }
    s
}

/// One PI²-CMA update from `K` sampled parameter matrices and their
/// per-step costs. The per-time estimates are averaged with weights
/// `T - t` (t = 1..T), so the last step carries no weight; the covariance
/// uses deviations from the pre-update `mean`.
pub fn pi2_cma_update(
    samples: &[DMatrix<f64>],
    costs: &[Vec<f64>],
    mean: &DMatrix<f64>,
    config: &Pi2Config,
) -> Result<Pi2Update> {
    let k = samples.len();
    if k < 2 || costs.len() != k {
        return Err(Error::validation(format!("{k} samples with {} cost vectors", costs.len())));
    }
    let t = costs[0].len();
    if t < 2 || costs.iter().any(|c| c.len() != t) {
        return Err(Error::shape("cost vectors must share a length of at least 2"));
    }
    if costs.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::validation("costs must be finite"));
    }
    if samples.iter().any(|s| s.shape() != mean.shape()) {
        return Err(Error::shape("samples and mean differ in shape"));
    }
    let s = cost_to_go(costs, config.cost_to_go);
    let lambda = match config.lambda {
        Some(l) if l > 0.0 && l.is_finite() => l,
        Some(l) => return Err(Error::validation(format!("lambda must be positive, got {l}"))),
        None => {
            let range = (0..t)
                .map(|c| s.column(c).max() - s.column(c).min())
                .fold(0.0, f64::max);
            // Identical costs make every temperature equivalent.
            if range > 0.0 {
                range / 10.0
            } else {
                1.0
            }
        }
    };
    let p = probabilities(&s, lambda);
    let weights: Vec<f64> = (0..t).map(|i| (t - 1 - i) as f64).collect();
    let total: f64 = weights.iter().sum();
    let pi = DVector::from_fn(k, |i, _| {
        weights.iter().enumerate().map(|(c, w)| w * p[(i, c)]).sum::<f64>() / total
    });
    let mut new_mean = DMatrix::zeros(mean.nrows(), mean.ncols());
    for (w, x) in pi.iter().zip(samples) {
        new_mean += x * *w;
    }
    let mu = vectorize(mean);
    let dim = mu.len();
    let mut cov = DMatrix::zeros(dim, dim);
    for (w, x) in pi.iter().zip(samples) {
        let d = vectorize(x) - &mu;
        cov.ger(*w, &d, &d, 1.0);
    }
    Ok(Pi2Update {
        mean: new_mean,
        covariance: cov,
        lambda,
        probabilities: p,
    })
}

/// Keeps only the `n × n` diagonal blocks of a covariance over `d` stacked
/// blocks, one per coupling dimension.
pub fn block_diagonal(cov: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(cov.nrows(), cov.ncols());
    for b in 0..cov.nrows() / n.max(1) {
        out.view_mut((b * n, b * n), (n, n))
            .copy_from(&cov.view((b * n, b * n), (n, n)));
    }
    out
}
