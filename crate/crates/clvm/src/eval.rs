//! Evaluation metrics for latent representations: seeded k-means, adjusted
//! Rand index, silhouette score, and Procrustes disparity.

use nalgebra::DMatrix;

use crate::error::{ClvmError, Result};
use crate::num_core::rng::RngStream;

/// Lloyd's algorithm with k-means++ seeding and restarts.
///
/// Returns the cluster index per row of the best run (lowest within-cluster
/// sum of squares). Fully deterministic for a given seed.
pub fn kmeans(data: &DMatrix<f64>, k: usize, seed: u64, restarts: usize) -> Result<Vec<usize>> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(ClvmError::Config(format!(
            "k-means needs 1 ≤ k ≤ n (got k = {k}, n = {n})"
        )));
    }
    if restarts == 0 {
        return Err(ClvmError::Config("k-means needs at least one restart".into()));
    }
    let root = RngStream::new(seed).derive(0x4b4d); // k-means stream
    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 0..restarts {
        let mut rng = root.derive(r as u64);
        let (labels, inertia) = lloyd_once(data, k, &mut rng);
        if best.as_ref().map_or(true, |(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    Ok(best.expect("restarts ≥ 1").1)
}

fn sq_dist(data: &DMatrix<f64>, i: usize, center: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..data.ncols() {
        let dlt = data[(i, j)] - center[j];
        s += dlt * dlt;
    }
    s
}

fn lloyd_once(data: &DMatrix<f64>, k: usize, rng: &mut RngStream) -> (Vec<usize>, f64) {
    let (n, d) = (data.nrows(), data.ncols());

    // k-means++ seeding: first center uniform, the rest by squared-distance
    // weighted sampling.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.below(n);
    centers.push(data.row(first).iter().copied().collect());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.below(n)
        } else {
            let mut u = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        centers.push(data.row(next).iter().copied().collect());
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(data, i, centers.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _round in 0..100 {
        // Assign.
        let mut changed = false;
        let mut new_inertia = 0.0;
        for i in 0..n {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dist = sq_dist(data, i, center);
                if dist < best_d {
                    best_d = dist;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
            new_inertia += best_d;
        }
        inertia = new_inertia;
        if !changed && _round > 0 {
            break;
        }
        // Update; an emptied cluster grabs the point farthest from its center.
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; d]; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[labels[i]][j] += data[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(data, a, &centers[labels[a]])
                            .partial_cmp(&sq_dist(data, b, &centers[labels[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centers[c] = data.row(far).iter().copied().collect();
                labels[far] = c;
            } else {
                for j in 0..d {
                    centers[c][j] = sums[c][j] / counts[c] as f64;
                }
            }
        }
    }
    (labels, inertia)
}

/// Adjusted Rand index between two labelings of the same points.
///
/// 1 means identical partitions (up to label names), 0 is the expected value
/// under independent random partitions, negative means worse than chance.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ClvmError::Dimension(format!(
            "labelings have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(ClvmError::Config("ARI needs at least two points".into()));
    }
    let mut a_ids: Vec<i64> = a.to_vec();
    a_ids.sort_unstable();
    a_ids.dedup();
    let mut b_ids: Vec<i64> = b.to_vec();
    b_ids.sort_unstable();
    b_ids.dedup();
    let idx = |ids: &[i64], v: i64| ids.binary_search(&v).expect("label present");

    let mut table = vec![vec![0u64; b_ids.len()]; a_ids.len()];
    for i in 0..n {
        table[idx(&a_ids, a[i])][idx(&b_ids, b[i])] += 1;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut sum_ij = 0.0;
    let mut row_sums = vec![0u64; a_ids.len()];
    let mut col_sums = vec![0u64; b_ids.len()];
    for (r, row) in table.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            sum_ij += choose2(v);
            row_sums[r] += v;
            col_sums[c] += v;
        }
    }
    let sum_a: f64 = row_sums.iter().map(|&v| choose2(v)).sum();
    let sum_b: f64 = col_sums.iter().map(|&v| choose2(v)).sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-300 {
        // Both partitions are single clusters (or all singletons): define as 1
        // when identical structure, which is the conventional limit.
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max_index - expected))
}

/// Mean silhouette coefficient of a labeled point set (Euclidean distance).
///
/// Points in singleton clusters contribute 0. Requires at least two distinct
/// labels.
pub fn silhouette(data: &DMatrix<f64>, labels: &[i64]) -> Result<f64> {
    let n = data.nrows();
    if labels.len() != n {
        return Err(ClvmError::Dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    let mut ids: Vec<i64> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(ClvmError::Config(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let idx = |v: i64| ids.binary_search(&v).expect("label present");
    let counts: Vec<usize> = {
        let mut c = vec![0usize; ids.len()];
        for &l in labels {
            c[idx(l)] += 1;
        }
        c
    };

    let mut total = 0.0;
    for i in 0..n {
        let own = idx(labels[i]);
        if counts[own] <= 1 {
            continue; // contributes 0
        }
        let mut dist_sums = vec![0.0; ids.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut d2 = 0.0;
            for c in 0..data.ncols() {
                let dlt = data[(i, c)] - data[(j, c)];
                d2 += dlt * dlt;
            }
            dist_sums[idx(labels[j])] += d2.sqrt();
        }
        let a = dist_sums[own] / (counts[own] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| dist_sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

/// Procrustes disparity between two point configurations of equal shape.
///
/// Both are centered and scaled to unit Frobenius norm, then the optimal
/// orthogonal alignment (rotation/reflection, plus scale) is applied; the
/// result is the residual sum of squares, in [0, 1]. 0 means the
/// configurations are identical up to translation, rotation, reflection,
/// and scale.
pub fn procrustes_disparity(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(ClvmError::Dimension(format!(
            "configurations differ in shape: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let norm = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut c = m.clone();
        let means = c.row_mean();
        for i in 0..c.nrows() {
            for j in 0..c.ncols() {
                c[(i, j)] -= means[j];
            }
        }
        let f = c.norm();
        if f < 1e-300 {
            return Err(ClvmError::Numerical(
                "degenerate (constant) configuration in Procrustes alignment".into(),
            ));
        }
        Ok(c / f)
    };
    let xs = norm(x)?;
    let ys = norm(y)?;
    let svd = (xs.transpose() * ys).svd(false, false);
    let trace: f64 = svd.singular_values.iter().sum();
    Ok((1.0 - trace * trace).max(0.0))
}
