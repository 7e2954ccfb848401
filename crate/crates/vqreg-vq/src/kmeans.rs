//! Lloyd's algorithm with k-means++ seeding, used to bootstrap the
//! collaborative dictionary from segmentation features.

use rand::Rng;
use vqreg_core::rng::rng;

use crate::error::VqError;
use crate::quantize::nearest_code;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// K x C centers, row-major.
    pub centers: Vec<f64>,
    pub k: usize,
    pub c: usize,
    /// Final sum of squared distances to assigned centers.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each assignment step; non-increasing.
    pub objective_trace: Vec<f64>,
}

/// K-means over `n` row-major C-dimensional vectors.
///
/// Terminates at `max_iters` or when the assignment reaches a fixed point.
/// Empty clusters keep their previous center.
pub fn kmeans(
    vectors: &[f64],
    n: usize,
    c: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KmeansResult, VqError> {
    if n == 0 || c == 0 {
        return Err(VqError::EmptyInput);
    }
    if vectors.len() != n * c {
        return Err(VqError::ShapeMismatch(format!(
            "vector data length {} does not match {n} x {c}",
            vectors.len()
        )));
    }
    if n < k {
        return Err(VqError::TooFewVectors { n, k });
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(VqError::NonFinite("k-means input"));
    }

    let mut r = rng(seed);
    let row = |i: usize| &vectors[i * c..(i + 1) * c];

    // k-means++ seeding
    let mut centers = vec![0.0f64; k * c];
    let first = r.gen_range(0..n);
    centers[..c].copy_from_slice(row(first));
    let mut min_d2 = vec![0.0f64; n];
    for i in 0..n {
        min_d2[i] = sq_dist(row(i), &centers[..c]);
    }
    for ci in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let threshold = r.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in min_d2.iter().enumerate() {
                acc += d;
                if acc >= threshold {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // all points coincide with chosen centers
            r.gen_range(0..n)
        };
        centers[ci * c..(ci + 1) * c].copy_from_slice(row(pick));
        for i in 0..n {
            let d = sq_dist(row(i), &centers[ci * c..(ci + 1) * c]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    // Lloyd iterations
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0usize;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut objective = 0.0;
        for i in 0..n {
            let (idx, d2) = nearest_code(row(i), &centers, k);
            objective += d2;
            if assignment[i] != idx {
                assignment[i] = idx;
                changed = true;
            }
        }
        trace.push(objective);
        if !changed {
            break;
        }
        let mut sums = vec![0.0f64; k * c];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assignment[i];
            counts[a] += 1;
            for j in 0..c {
                sums[a * c + j] += vectors[i * c + j];
            }
        }
        for ci in 0..k {
            if counts[ci] > 0 {
                for j in 0..c {
                    centers[ci * c + j] = sums[ci * c + j] / counts[ci] as f64;
                }
            }
        }
    }

    let objective = *trace.last().unwrap();
    Ok(KmeansResult { centers, k, c, objective, iterations, objective_trace: trace })
}

/// Deterministic uniform subsample (without replacement) of at most `cap`
/// rows, preserving the original row order.
pub fn subsample_rows(vectors: &[f64], n: usize, c: usize, cap: usize, seed: u64) -> Vec<f64> {
    if n <= cap {
        return vectors.to_vec();
    }
    // partial Fisher-Yates over indices, then sort for a stable row order
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng(seed);
    for i in 0..cap {
        let j = r.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut chosen = idx[..cap].to_vec();
    chosen.sort_unstable();
    let mut out = Vec::with_capacity(cap * c);
    for i in chosen {
        out.extend_from_slice(&vectors[i * c..(i + 1) * c]);
    }
    out
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn n_equals_k_reproduces_the_points() {
        let pts = vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0, -5.0, -5.0];
        let res = kmeans(&pts, 4, 2, 4, 1, 50).unwrap();
        assert_eq!(res.objective, 0.0);
        // centers are a permutation of the inputs
        for ci in 0..4 {
            let center = &res.centers[ci * 2..(ci + 1) * 2];
            assert!(
                (0..4).any(|i| pts[i * 2..(i + 1) * 2] == *center),
                "center {center:?} not among the inputs"
            );
        }
    }

    #[test]
    fn two_separated_blobs_recover_their_means() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut pts = Vec::new();
        let mut mean_a = [0.0f64; 3];
        let mut mean_b = [0.0f64; 3];
        for _ in 0..50 {
            let p = [
                rng.gen::<f64>() * 0.2,
                rng.gen::<f64>() * 0.2,
                rng.gen::<f64>() * 0.2,
            ];
            for j in 0..3 {
                mean_a[j] += p[j] / 50.0;
            }
            pts.extend_from_slice(&p);
        }
        for _ in 0..50 {
            let p = [
                100.0 + rng.gen::<f64>() * 0.2,
                100.0 + rng.gen::<f64>() * 0.2,
                100.0 + rng.gen::<f64>() * 0.2,
            ];
            for j in 0..3 {
                mean_b[j] += p[j] / 50.0;
            }
            pts.extend_from_slice(&p);
        }
        let res = kmeans(&pts, 100, 3, 2, 3, 100).unwrap();
        // match centers to blob means by proximity
        let c0 = &res.centers[0..3];
        let c1 = &res.centers[3..6];
        let (low, high) = if c0[0] < c1[0] { (c0, c1) } else { (c1, c0) };
        for j in 0..3 {
            assert!((low[j] - mean_a[j]).abs() < 1e-9);
            assert!((high[j] - mean_b[j]).abs() < 1e-9);
        }
    }

    /// Plain Lloyd's with random index seeding: the independent restart
    /// oracle for objective quality.
    fn oracle_lloyd(vectors: &[f64], n: usize, c: usize, k: usize, seed: u64) -> f64 {
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        let mut centers = vec![0.0; k * c];
        let mut used = std::collections::BTreeSet::new();
        let mut ci = 0;
        while ci < k {
            let i = r.gen_range(0..n);
            if used.insert(i) {
                centers[ci * c..(ci + 1) * c].copy_from_slice(&vectors[i * c..(i + 1) * c]);
                ci += 1;
            }
        }
        let mut assignment = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for i in 0..n {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for cc in 0..k {
                    let d = sq_dist(&vectors[i * c..(i + 1) * c], &centers[cc * c..(cc + 1) * c]);
                    if d < best_d {
                        best_d = d;
                        best = cc;
                    }
                }
                if assignment[i] != best {
                    assignment[i] = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = vec![0.0; k * c];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[assignment[i]] += 1;
                for j in 0..c {
                    sums[assignment[i] * c + j] += vectors[i * c + j];
                }
            }
            for cc in 0..k {
                if counts[cc] > 0 {
                    for j in 0..c {
                        centers[cc * c + j] = sums[cc * c + j] / counts[cc] as f64;
                    }
                }
            }
        }
        let mut objective = 0.0;
        for i in 0..n {
            objective += sq_dist(
                &vectors[i * c..(i + 1) * c],
                &centers[assignment[i] * c..(assignment[i] + 1) * c],
            );
        }
        objective
    }

    #[test]
    fn gaussian_mixture_objective_close_to_multi_restart_oracle() {
        // 4-component mixture in 8 dims, 2000 points
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 2000;
        let c = 8;
        let k = 4;
        let mut means = vec![0.0f64; k * c];
        for v in means.iter_mut() {
            *v = rng.gen::<f64>() * 10.0 - 5.0;
        }
        let mut pts = vec![0.0f64; n * c];
        for i in 0..n {
            let comp = rng.gen_range(0..k);
            for j in 0..c {
                pts[i * c + j] =
                    means[comp * c + j] + vqreg_core::rng::normal(&mut rng) * 0.8;
            }
        }
        let res = kmeans(&pts, n, c, k, 11, 100).unwrap();
        let best_oracle = (0..20)
            .map(|s| oracle_lloyd(&pts, n, c, k, 1000 + s))
            .fold(f64::INFINITY, f64::min);
        assert!(
            res.objective <= best_oracle * 1.05,
            "objective {} vs oracle best {best_oracle}",
            res.objective
        );
    }

    #[test]
    fn objective_is_monotonically_non_increasing() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for trial in 0..10u64 {
            let n = 300;
            let c = 4;
            let pts: Vec<f64> = (0..n * c).map(|_| rng.gen::<f64>() * 4.0).collect();
            let res = kmeans(&pts, n, c, 7, trial, 60).unwrap();
            for w in res.objective_trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "objective increased: {} -> {} (trial {trial})",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn error_cases() {
        assert!(matches!(kmeans(&[], 0, 3, 2, 0, 10), Err(VqError::EmptyInput)));
        let pts = vec![0.0; 6];
        assert!(matches!(
            kmeans(&pts, 2, 3, 5, 0, 10),
            Err(VqError::TooFewVectors { n: 2, k: 5 })
        ));
    }

    #[test]
    fn subsample_caps_and_preserves_rows() {
        let pts: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let sub = subsample_rows(&pts, 20, 2, 5, 77);
        assert_eq!(sub.len(), 10);
        // every sampled row exists in the source, in original order
        let mut last = -1.0;
        for r in sub.chunks(2) {
            assert_eq!(r[1], r[0] + 1.0);
            assert!(r[0] > last);
            last = r[0];
        }
        // no-op when under the cap
        assert_eq!(subsample_rows(&pts, 20, 2, 20, 77), pts);
        // deterministic
        assert_eq!(subsample_rows(&pts, 20, 2, 5, 77), sub);
    }
}
