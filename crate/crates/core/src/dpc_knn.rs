//! Density-peaks selection of representative tokens.
//!
//! Local density is `exp(−mean squared distance to the k nearest
//! neighbours)`. Each point's `delta` is its squared distance to the nearest
//! point of higher density (the densest point takes the largest pairwise
//! distance). Points with the largest `rho · delta` are the peaks.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PeakSelection {
    /// Selected point indices, best score first.
    pub indices: Vec<usize>,
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub score: Vec<f64>,
}

/// `max(2, ⌊√N⌋)`, kept below `N`.
pub fn default_k_nn(n: usize) -> usize {
    let k = ((n as f64).sqrt().floor() as usize).max(2);
    k.min(n.saturating_sub(1)).max(1)
}

fn squared_distances(points: &Tensor) -> Vec<f64> {
    let n = points.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

pub fn density_peaks(points: &Tensor, k_nn: usize, n_select: usize) -> Result<PeakSelection> {
    let n = points.rows();
    if points.rank() != 2 || n == 0 {
        return Err(Error::invalid("density peaks need at least one point"));
    }
    if n_select == 0 || n_select > n {
        return Err(Error::invalid(format!(
            "cannot select {n_select} of {n} points"
        )));
    }
    if n == 1 {
        return Ok(PeakSelection {
            indices: vec![0],
            rho: vec![1.0],
            delta: vec![0.0],
            score: vec![0.0],
        });
    }
    if k_nn == 0 || k_nn >= n {
        return Err(Error::invalid(format!("k_nn {k_nn} outside 1..{n}")));
    }

    let dist = squared_distances(points);
    let rho: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist[i * n + j])
                .collect();
            row.select_nth_unstable_by(k_nn - 1, f64::total_cmp);
            let mean = row[..k_nn].iter().sum::<f64>() / k_nn as f64;
            (-mean).exp()
        })
        .collect();

    // density order, ties by index; "higher density" means earlier here
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    let max_dist = dist.iter().copied().fold(0.0, f64::max);
    let mut delta = vec![0.0; n];
    delta[order[0]] = max_dist;
    for (pos, &i) in order.iter().enumerate().skip(1) {
        delta[i] = order[..pos]
            .iter()
            .map(|&j| dist[i * n + j])
            .fold(f64::INFINITY, f64::min);
    }

    let score: Vec<f64> = rho.iter().zip(&delta).map(|(r, d)| r * d).collect();
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    ranked.truncate(n_select);
    Ok(PeakSelection {
        indices: ranked,
        rho,
        delta,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_clusters(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for center in [[0.0, 0.0], [10.0, 10.0]] {
            for _ in 0..5 {
                rows.push(vec![
                    center[0] + rng.gen_range(-0.3..0.3),
                    center[1] + rng.gen_range(-0.3..0.3),
                ]);
            }
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn full_selection_returns_everything() {
        let pts = two_clusters(1);
        let mut sel = density_peaks(&pts, 2, 10).unwrap().indices;
        sel.sort_unstable();
        assert_eq!(sel, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn one_peak_per_cluster() {
        for seed in 0..20 {
            let pts = two_clusters(seed);
            let sel = density_peaks(&pts, 2, 2).unwrap();
            let mut clusters: Vec<usize> = sel.indices.iter().map(|i| i / 5).collect();
            clusters.sort_unstable();
            assert_eq!(clusters, vec![0, 1], "seed {seed}: {sel:?}");
        }
    }

    /// Brute force: among all pairs, the selected pair maximizes the summed
    /// `rho·delta` score, and it straddles the two clusters.
    #[test]
    fn selected_pair_is_best_pair() {
        let pts = two_clusters(3);
        let sel = density_peaks(&pts, 2, 2).unwrap();
        let best = (0..10)
            .flat_map(|a| ((a + 1)..10).map(move |b| (a, b)))
            .max_by(|x, y| {
                (sel.score[x.0] + sel.score[x.1]).total_cmp(&(sel.score[y.0] + sel.score[y.1]))
            })
            .unwrap();
        let mut got = sel.indices.clone();
        got.sort_unstable();
        assert_eq!((got[0], got[1]), best);
    }

    #[test]
    fn identical_points_fall_back_to_index_order() {
        let pts = Tensor::matrix(6, 3, vec![1.5; 18]).unwrap();
        let sel = density_peaks(&pts, 2, 3).unwrap();
        assert!(sel.rho.iter().all(|&r| r == 1.0));
        assert_eq!(sel.indices, vec![0, 1, 2]);
    }

    #[test]
    fn densest_point_has_largest_delta() {
        let pts = two_clusters(9);
        let sel = density_peaks(&pts, 3, 4).unwrap();
        let densest = (0..10)
            .max_by(|&a, &b| sel.rho[a].total_cmp(&sel.rho[b]).then(b.cmp(&a)))
            .unwrap();
        let max_delta = sel.delta.iter().copied().fold(0.0, f64::max);
        assert_eq!(sel.delta[densest], max_delta);
    }

    #[test]
    fn rigid_motion_keeps_selection() {
        let pts = two_clusters(5);
        let base = density_peaks(&pts, 2, 3).unwrap().indices;
        let (c, s) = (0.6f64, 0.8f64);
        let moved: Vec<f64> = (0..10)
            .flat_map(|i| {
                let (x, y) = (pts.at(i, 0), pts.at(i, 1));
                [c * x - s * y + 3.0, s * x + c * y - 7.0]
            })
            .collect();
        let moved = Tensor::matrix(10, 2, moved).unwrap();
        assert_eq!(density_peaks(&moved, 2, 3).unwrap().indices, base);
    }

    #[test]
    fn duplicating_a_point_keeps_both_clusters_represented() {
        let pts = two_clusters(7);
        let mut rows: Vec<Vec<f64>> = (0..10).map(|i| pts.row(i).to_vec()).collect();
        rows.push(rows[2].clone());
        let dup = Tensor::from_rows(&rows).unwrap();
        let sel = density_peaks(&dup, 2, 2).unwrap();
        let mut clusters: Vec<usize> = sel
            .indices
            .iter()
            .map(|&i| if i == 10 { 0 } else { i / 5 })
            .collect();
        clusters.sort_unstable();
        assert_eq!(clusters, vec![0, 1]);
    }

    #[test]
    fn argument_errors() {
        let pts = two_clusters(0);
        assert!(density_peaks(&pts, 10, 2).is_err());
        assert!(density_peaks(&pts, 2, 0).is_err());
        assert!(density_peaks(&pts, 2, 11).is_err());
        assert!(density_peaks(&Tensor::zeros(&[0, 2]), 1, 1).is_err());
        assert_eq!(default_k_nn(36), 6);
        assert_eq!(default_k_nn(2), 1);
        assert_eq!(default_k_nn(5), 2);
    }
}
