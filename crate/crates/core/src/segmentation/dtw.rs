use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::CorrespondenceSet;

/// How signals are made amplitude-invariant before matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Zero mean, unit variance.
    ZScore,
    /// 1st and 99th percentiles mapped to 0 and 1. Unlike z-scoring this does
    /// not depend on how much of the window is spent at rest.
    #[default]
    Range,
}

impl Normalization {
    pub fn apply(self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Normalization::ZScore => standardize(x),
            Normalization::Range => range_normalize(x),
        }
    }
}

/// Warping path and bookkeeping from one DTW run.
#[derive(Clone, Debug)]
pub struct DtwAlignment {
    /// Monotone path from `(0, 0)` to `(N-1, M-1)` as `(ref, guess)` indices.
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
    /// Number of cost-matrix cells evaluated.
    pub cells: u64,
}

/// Zero-mean, unit-variance copy of a signal.
pub fn standardize(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * (1.0 + mean.abs())) || !std.is_finite() {
        return Err(Error::validation(
            "cannot standardize a constant segment (zero variance)",
        ));
    }
    Ok(x.iter().map(|v| (v - mean) / std).collect())
}

/// Percentile range normalization.
pub fn range_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let lo = sorted[(n as f64 * 0.01) as usize];
    let hi = sorted[((n as f64 * 0.99) as usize).min(n - 1)];
    if !(hi - lo > 1e-12 * (1.0 + lo.abs())) || !(hi - lo).is_finite() {
        return Err(Error::validation("cannot normalize a constant segment"));
    }
    Ok(x.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Classic DTW on z-scored signals with squared-difference local cost and
/// steps `(1,0)`, `(0,1)`, `(1,1)`, the diagonal charged twice. Without that
/// weight a diagonal step is cheaper per sample covered and warping paths
/// lean toward unit slope.
pub fn dtw(reference: &[f64], guess: &[f64]) -> Result<DtwAlignment> {
    dtw_with(reference, guess, Normalization::ZScore)
}

/// [`dtw`] with a choice of normalization.
pub fn dtw_with(reference: &[f64], guess: &[f64], norm: Normalization) -> Result<DtwAlignment> {
    let (n, m) = (reference.len(), guess.len());
    if n < 2 || m < 2 {
        return Err(Error::validation(format!(
            "DTW needs segments of length >= 2 (got {n} and {m})"
        )));
    }
    let x = norm.apply(reference)?;
    let y = norm.apply(guess)?;
    let mut acc = vec![0.0f64; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let d = x[i] - y[j];
            let local = d * d;
            acc[at(i, j)] = match (i, j) {
                (0, 0) => local,
                (0, _) => acc[at(0, j - 1)] + local,
                (_, 0) => acc[at(i - 1, 0)] + local,
                _ => (acc[at(i - 1, j - 1)] + 2.0 * local)
                    .min(acc[at(i - 1, j)] + local)
                    .min(acc[at(i, j - 1)] + local),
            };
        }
    }
    let mut path = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n - 1, m - 1);
    path.push((i, j));
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let d = x[i] - y[j];
            let local = d * d;
            let diag = acc[at(i - 1, j - 1)] + 2.0 * local;
            let up = acc[at(i - 1, j)] + local;
            let left = acc[at(i, j - 1)] + local;
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwAlignment {
        path,
        cost: acc[at(n - 1, m - 1)],
        cells: (n * m) as u64,
    })
}

/// Reduces a warping path to `min(N, M)` one-to-one pairs by walking the
/// shorter sequence and keeping, for each of its indices, the middle of the
/// run of path visits that share it.
pub fn one_to_one_pairs(path: &[(usize, usize)], n: usize, m: usize) -> Vec<(usize, usize)> {
    let ref_shorter = n <= m;
    let key = |p: &(usize, usize)| if ref_shorter { p.0 } else { p.1 };
    let mut pairs = Vec::with_capacity(n.min(m));
    let mut start = 0;
    while start < path.len() {
        let k = key(&path[start]);
        let mut end = start;
        while end + 1 < path.len() && key(&path[end + 1]) == k {
            end += 1;
        }
        pairs.push(path[(start + end) / 2]);
        start = end + 1;
    }
    pairs
}

/// DTW correspondences between a reference and a guessed segment. All
/// weights start at one; see [`super::compute_ls_weights`].
pub fn dtw_correspondences(
    reference: &[f64],
    guess: &[f64],
    norm: Normalization,
) -> Result<(CorrespondenceSet, DtwAlignment)> {
    let alignment = dtw_with(reference, guess, norm)?;
    let pairs = one_to_one_pairs(&alignment.path, reference.len(), guess.len());
    let weights = vec![1.0; pairs.len()];
    Ok((CorrespondenceSet { pairs, weights }, alignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bump(n: usize, center: f64, width: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (-((i as f64 - center) / width).powi(2)).exp())
            .collect()
    }

    #[test]
    fn identical_signals_align_diagonally() {
        let x = bump(120, 60.0, 15.0);
        let (c, a) = dtw_correspondences(&x, &x, Normalization::ZScore).unwrap();
        assert_eq!(c.pairs.len(), 120);
        assert!(c.pairs.iter().all(|(i, j)| i == j));
        assert_eq!(a.cells, 120 * 120);
        assert!(a.cost < 1e-20);
    }

    #[test]
    fn delayed_signal_shows_offset() {
        let x = bump(200, 80.0, 15.0);
        let y = bump(200, 90.0, 15.0);
        let (c, _) = dtw_correspondences(&x, &y, Normalization::ZScore).unwrap();
        let active: Vec<_> = c.pairs.iter().filter(|(i, _)| (60..100).contains(i)).collect();
        assert!(!active.is_empty());
        assert!(active.iter().all(|(i, j)| *j == i + 10), "{active:?}");
    }

    #[test]
    fn amplitude_scaling_does_not_change_path() {
        let x: Vec<f64> = (0..150).map(|i| (i as f64 * 0.05).sin() + 0.01 * i as f64).collect();
        let y: Vec<f64> = (0..170).map(|i| (i as f64 * 0.045).sin() + 0.009 * i as f64).collect();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v + 3.0).collect();
        for norm in [Normalization::ZScore, Normalization::Range] {
            let a = dtw_with(&x, &y, norm).unwrap();
            let b = dtw_with(&x, &y2, norm).unwrap();
            assert_eq!(a.path, b.path);
        }
    }

    #[test]
    fn constant_segment_is_rejected() {
        assert!(dtw(&[1.0; 10], &bump(10, 5.0, 2.0)).is_err());
        assert!(dtw(&[1.0], &[1.0, 2.0]).is_err());
        assert!(dtw_with(&[2.0; 10], &bump(10, 5.0, 2.0), Normalization::Range).is_err());
    }

    proptest! {
        #[test]
        fn path_is_monotone_with_fixed_ends(
            xs in proptest::collection::vec(-5.0f64..5.0, 2..40),
            ys in proptest::collection::vec(-5.0f64..5.0, 2..40),
        ) {
            prop_assume!(standardize(&xs).is_ok() && standardize(&ys).is_ok());
            let a = dtw(&xs, &ys).unwrap();
            prop_assert_eq!(a.path[0], (0, 0));
            prop_assert_eq!(*a.path.last().unwrap(), (xs.len() - 1, ys.len() - 1));
            for w in a.path.windows(2) {
                let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!((di, dj) == (1, 0) || (di, dj) == (0, 1) || (di, dj) == (1, 1));
            }
            let pairs = one_to_one_pairs(&a.path, xs.len(), ys.len());
            prop_assert_eq!(pairs.len(), xs.len().min(ys.len()));
        }
    }
}
