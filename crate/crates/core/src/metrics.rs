//! Fréchet distance, Inception Score and mean-of-score over pluggable inputs.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{numeric, validation, Error, Result};

const SYM_TOL: f64 = 1e-9;

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub n_samples: usize,
}

#[derive(Serialize, Deserialize)]
struct StatsJson {
    mean: Vec<f64>,
    cov: Vec<f64>,
    n: usize,
}

impl FeatureStats {
    pub fn new(mean: Array1<f64>, cov: Array2<f64>, n_samples: usize) -> Result<Self> {
        let d = mean.len();
        if cov.dim() != (d, d) {
            return Err(validation(format!("covariance {:?} does not match mean dim {d}", cov.dim())));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[[i, j]] - cov[[j, i]]).abs() > SYM_TOL * (1.0 + cov[[i, j]].abs()) {
                    return Err(validation("covariance is not symmetric"));
                }
            }
        }
        Ok(Self { mean, cov, n_samples })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Combines two shards (pairwise update of mean and co-moment).
    pub fn merge(&self, other: &FeatureStats) -> Result<FeatureStats> {
        if self.dim() != other.dim() {
            return Err(validation("cannot merge stats of different dimension"));
        }
        let (na, nb) = (self.n_samples as f64, other.n_samples as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &(&delta * (nb / n));
        let outer = outer(&delta, &delta);
        let m2 = &self.cov * (na - 1.0) + &other.cov * (nb - 1.0) + outer * (na * nb / n);
        Ok(FeatureStats { mean, cov: m2 / (n - 1.0), n_samples: self.n_samples + other.n_samples })
    }

    pub fn to_json(&self) -> Result<String> {
        let js = StatsJson { mean: self.mean.to_vec(), cov: self.cov.iter().copied().collect(), n: self.n_samples };
        Ok(serde_json::to_string_pretty(&js)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let js: StatsJson = serde_json::from_str(text)?;
        let d = js.mean.len();
        let cov = Array2::from_shape_vec((d, d), js.cov).map_err(|e| validation(e.to_string()))?;
        Self::new(Array1::from(js.mean), cov, js.n)
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    &a2 * &b2
}

/// Sample mean and unbiased covariance (two-pass).
pub fn accumulate_stats<I, V>(features: I) -> Result<FeatureStats>
where
    I: IntoIterator<Item = V>,
    V: AsRef<[f64]>,
{
    let rows: Vec<Vec<f64>> = features.into_iter().map(|v| v.as_ref().to_vec()).collect();
    if rows.len() < 2 {
        return Err(validation(format!("need at least 2 samples, got {}", rows.len())));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(validation("feature vectors have inconsistent dimension"));
    }
    let n = rows.len();
    let data = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = &data - &mean;
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    symmetrize(&mut cov);
    Ok(FeatureStats { mean, cov, n_samples: n })
}

fn symmetrize(m: &mut Array2<f64>) {
    let t = m.t().to_owned();
    *m = (&*m + &t) * 0.5;
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues and the matrix whose columns are the eigenvectors.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(validation("eigendecomposition needs a square matrix"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(numeric("matrix contains non-finite values"));
    }
    let mut m = a.clone();
    symmetrize(&mut m);
    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= 1e-15 * scale * n as f64 {
            let vals = Array1::from_shape_fn(n, |i| m[[i, i]]);
            return Ok((vals, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(numeric("Jacobi eigendecomposition did not converge"))
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are clamped to 0.
pub fn sqrtm_psd(a: &Array2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = symmetric_eigen(a)?;
    let roots = vals.mapv(|l| l.max(0.0).sqrt());
    Ok((&vecs * &roots).dot(&vecs.t()))
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, evaluated through the
/// symmetric form `Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(validation(format!("feature dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let diff = &a.mean - &b.mean;
    let mean_term = diff.dot(&diff);
    let root_a = sqrtm_psd(&a.cov)?;
    let mut inner = root_a.dot(&b.cov).dot(&root_a);
    symmetrize(&mut inner);
    let (vals, _) = symmetric_eigen(&inner)?;
    let cross: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = mean_term + a.cov.diag().sum() + b.cov.diag().sum() - 2.0 * cross;
    if !d.is_finite() {
        return Err(numeric("Fréchet distance is not finite"));
    }
    Ok(d.max(0.0))
}

/// Rows are class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Array2<f64>);

impl ProbMatrix {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        if p.nrows() == 0 || p.ncols() == 0 {
            return Err(validation("probability matrix is empty"));
        }
        for (i, row) in p.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(validation(format!("row {i} has negative or non-finite entries")));
            }
            if (row.sum() - 1.0).abs() > 1e-9 {
                return Err(validation(format!("row {i} sums to {}", row.sum())));
            }
        }
        Ok(Self(p))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    /// Parses comma-separated rows; blank lines are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| validation(format!("line {}: {e}", ln + 1)))?;
            rows.push(row);
        }
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(validation("probability rows have different lengths"));
        }
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(Array2::from_shape_vec((n, k), flat).map_err(|e| validation(e.to_string()))?)
    }
}

/// `exp(mean_i KL(p_i || p_bar))` with `0 log 0 = 0`.
pub fn inception_score(p: &ProbMatrix) -> f64 {
    let p = &p.0;
    let marginal = p.mean_axis(Axis(0)).expect("non-empty");
    let mut kl_sum = 0.0;
    for row in p.rows() {
        for (&pi, &mi) in row.iter().zip(marginal.iter()) {
            if pi > 0.0 {
                kl_sum += pi * (pi / mi).ln();
            }
        }
    }
    (kl_sum / p.nrows() as f64).exp()
}

/// Arithmetic mean of the scores.
pub fn mean_of_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Validation("mean of score needs at least one score".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stats(seed: u64, d: usize, n: usize) -> FeatureStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        accumulate_stats(&rows).unwrap()
    }

    #[test]
    fn stats_examples() {
        let s = accumulate_stats([[1.5, -2.0], [1.5, -2.0]]).unwrap();
        assert_eq!(s.mean, array![1.5, -2.0]);
        assert_eq!(s.cov, Array2::<f64>::zeros((2, 2)));
        let s = accumulate_stats([[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(s.mean, array![1.0, 0.0]);
        assert_eq!(s.cov, array![[2.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(accumulate_stats([[1.0]]), Err(Error::Validation(_))));
    }

    #[test]
    fn stats_are_order_independent() {
        let rows = vec![vec![1.0, 4.0], vec![-3.0, 0.5], vec![2.0, 2.0], vec![0.0, -1.0]];
        let a = accumulate_stats(&rows).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        let b = accumulate_stats(&rev).unwrap();
        assert!((&a.mean - &b.mean).iter().all(|d| d.abs() < 1e-12));
        assert!((&a.cov - &b.cov).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn sharded_merge_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let full = accumulate_stats(&rows).unwrap();
        let merged = accumulate_stats(&rows[..13]).unwrap().merge(&accumulate_stats(&rows[13..]).unwrap()).unwrap();
        assert_eq!(merged.n_samples, 40);
        assert!((&full.mean - &merged.mean).iter().all(|d| d.abs() < 1e-9));
        assert!((&full.cov - &merged.cov).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn jacobi_reconstructs() {
        let s = random_stats(3, 6, 20);
        let (vals, vecs) = symmetric_eigen(&s.cov).unwrap();
        let back = (&vecs * &vals).dot(&vecs.t());
        assert!((back - &s.cov).iter().all(|d| d.abs() < 1e-10));
        let r = sqrtm_psd(&s.cov).unwrap();
        assert!((r.dot(&r) - &s.cov).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn frechet_examples() {
        let a = random_stats(5, 4, 30);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);

        let g1 = FeatureStats::new(array![0.0], array![[1.0]], 2).unwrap();
        let g2 = FeatureStats::new(array![1.0], array![[4.0]], 2).unwrap();
        assert!((frechet_distance(&g1, &g2).unwrap() - 2.0).abs() <= 1e-8);

        let a = FeatureStats::new(array![0.0, 1.0, -2.0], Array2::from_diag(&array![1.0, 0.25, 9.0]), 2).unwrap();
        let b = FeatureStats::new(array![0.5, 1.0, 0.0], Array2::from_diag(&array![4.0, 1.0, 1.0]), 2).unwrap();
        let oracle: f64 = [(0.0, 0.5, 1.0, 2.0), (1.0, 1.0, 0.5, 1.0), (-2.0, 0.0, 3.0, 1.0)]
            .iter()
            .map(|(m1, m2, s1, s2): &(f64, f64, f64, f64)| (m1 - m2).powi(2) + (s1 - s2).powi(2))
            .sum();
        assert!((frechet_distance(&a, &b).unwrap() - oracle).abs() <= 1e-9);

        let c = FeatureStats::new(array![0.0], array![[1.0]], 2).unwrap();
        assert!(frechet_distance(&a, &c).is_err());
    }

    #[test]
    fn frechet_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows_a: Vec<Vec<f64>> = (0..25).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let rows_b: Vec<Vec<f64>> = (0..25).map(|_| (0..3).map(|_| rng.random_range(-0.5..2.0)).collect()).collect();
        let (ct, st) = (0.7f64.cos(), 0.7f64.sin());
        let (cp, sp) = (1.3f64.cos(), 1.3f64.sin());
        let rz = array![[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]];
        let rx = array![[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let rot = rz.dot(&rx);
        let apply = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter().map(|r| rot.dot(&Array1::from(r.clone())).to_vec()).collect()
        };
        let d0 = frechet_distance(&accumulate_stats(&rows_a).unwrap(), &accumulate_stats(&rows_b).unwrap()).unwrap();
        let d1 = frechet_distance(&accumulate_stats(apply(&rows_a)).unwrap(), &accumulate_stats(apply(&rows_b)).unwrap()).unwrap();
        assert!((d0 - d1).abs() / d0 <= 1e-6);
    }

    #[test]
    fn stats_json_round_trip() {
        let s = random_stats(8, 3, 10);
        let back = FeatureStats::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn inception_score_examples() {
        let uniform = ProbMatrix::new(Array2::from_elem((4, 5), 0.2)).unwrap();
        assert_eq!(inception_score(&uniform), 1.0);
        let same = ProbMatrix::new(Array2::from_shape_fn((3, 3), |(_, j)| [0.1, 0.6, 0.3][j])).unwrap();
        assert_eq!(inception_score(&same), 1.0);
        let onehot = ProbMatrix::new(Array2::eye(6)).unwrap();
        assert!((inception_score(&onehot) - 6.0).abs() <= 1e-9);
        assert!(ProbMatrix::new(array![[0.5, 0.6]]).is_err());
        assert!(ProbMatrix::new(array![[-0.5, 1.5]]).is_err());
    }

    #[test]
    fn prob_csv_parsing() {
        let p = ProbMatrix::from_csv("0.5,0.5\n\n1,0\n").unwrap();
        assert_eq!(p.values().dim(), (2, 2));
        assert!(ProbMatrix::from_csv("0.5,x").is_err());
    }

    #[test]
    fn mean_of_score_examples() {
        assert_eq!(mean_of_score(&[5.0]).unwrap(), 5.0);
        assert_eq!(mean_of_score(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(mean_of_score(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert!(mean_of_score(&[]).is_err());
    }

    proptest! {
        #[test]
        fn frechet_symmetric(seed in any::<u64>()) {
            let a = random_stats(seed, 3, 8);
            let b = random_stats(seed.wrapping_add(1), 3, 8);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        }

        #[test]
        fn inception_score_at_least_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = Array2::from_shape_simple_fn((6, 4), || rng.random_range(0.0..1.0f64));
            let p = &raw / &raw.sum_axis(Axis(1)).insert_axis(Axis(1));
            let is = inception_score(&ProbMatrix::new(p).unwrap());
            prop_assert!(is >= 1.0 - 1e-12);
        }
    }
}
