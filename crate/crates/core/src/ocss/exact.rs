//! Exact selection marginals of the two-stage draw, by full enumeration.
//!
//! This path re-derives the partition and the draw probabilities from
//! scratch (its own sort, its own normalisation) and enumerates every ordered
//! sequence of draws, so it can serve as an oracle for the sampler.

use crate::error::{Error, Result};
use crate::rng::StreamId;

use super::{sample_with_spec, PartitionSpec};

/// Probability that each token ends up in the drawn set.
pub fn exact_marginals(scores: &[f64], k: usize, lambda: f64) -> Result<Vec<f64>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("budget {k} outside 1..={n}")));
    }
    let m = ((lambda * k as f64).round() as usize).max(k).min(n);

    let mut ranked: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
    let blocks: Vec<Vec<usize>> = ranked
        .chunks(m)
        .map(|c| c.iter().map(|&(_, j)| j).collect())
        .collect();

    let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weight: Vec<f64> = scores.iter().map(|s| (s - shift).exp()).collect();
    let total: f64 = weight.iter().sum();
    let mass: Vec<f64> = blocks
        .iter()
        .map(|b| {
            if b.len() < k {
                0.0
            } else {
                b.iter().map(|&j| weight[j]).sum::<f64>() / total
            }
        })
        .collect();
    let eligible: f64 = mass.iter().sum();
    if eligible <= 0.0 {
        return Err(Error::invalid("no block can hold the budget"));
    }

    let mut marginals = vec![0.0; n];
    for (block, &p) in blocks.iter().zip(&mass) {
        if p == 0.0 {
            continue;
        }
        let mut chosen = Vec::with_capacity(k);
        let mut used = vec![false; block.len()];
        enumerate(
            block,
            &weight,
            k,
            p / eligible,
            &mut chosen,
            &mut used,
            &mut marginals,
        );
    }
    Ok(marginals)
}

fn enumerate(
    block: &[usize],
    weight: &[f64],
    k: usize,
    prob: f64,
    chosen: &mut Vec<usize>,
    used: &mut [bool],
    marginals: &mut [f64],
) {
    if chosen.len() == k {
        for &j in chosen.iter() {
            marginals[j] += prob;
        }
        return;
    }
    let remaining: f64 = block
        .iter()
        .zip(used.iter())
        .filter(|(_, &u)| !u)
        .map(|(&j, _)| weight[j])
        .sum();
    for pos in 0..block.len() {
        if used[pos] {
            continue;
        }
        let j = block[pos];
        used[pos] = true;
        chosen.push(j);
        enumerate(
            block,
            weight,
            k,
            prob * weight[j] / remaining,
            chosen,
            used,
            marginals,
        );
        chosen.pop();
        used[pos] = false;
    }
}

/// Selection frequency of each token over `draws` sampler runs.
pub fn empirical_marginals(
    scores: &[f64],
    k: usize,
    lambda: f64,
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let spec = PartitionSpec::from_count(scores.len(), k, lambda)?;
    let mut counts = vec![0u64; scores.len()];
    for d in 0..draws {
        let c = sample_with_spec(scores, spec, StreamId::new(seed, d as u64))?;
        for j in c.indices {
            counts[j] += 1;
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / draws as f64).collect())
}

/// Total-variation distance between two marginal vectors, each normalised
/// to a distribution over tokens (divided by its sum, the budget `k`).
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a / sp - b / sq).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_stage_example() {
        // scores [2,1,0,-1], k=1, m=2
        let e = std::f64::consts::E;
        let m = exact_marginals(&[2.0, 1.0, 0.0, -1.0], 1, 2.0).unwrap();
        let p_top = (e * e + e) / (e * e + e + 1.0 + 1.0 / e);
        assert_abs_diff_eq!(m[0] + m[1], p_top, epsilon = 1e-12);
        assert_abs_diff_eq!(p_top, 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(m[0], p_top * e * e / (e * e + e), epsilon = 1e-12);
        assert_abs_diff_eq!(m[0], 0.6439, epsilon = 1e-4);
    }

    #[test]
    fn marginals_sum_to_budget() {
        let scores = [0.3, -1.2, 2.2, 0.0, 0.9, 1.7, -0.4, 0.5];
        for k in 1..=3 {
            let m = exact_marginals(&scores, k, 2.0).unwrap();
            assert_abs_diff_eq!(m.iter().sum::<f64>(), k as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampler_frequencies_approach_enumeration() {
        let scores = [0.3, -1.2, 2.2, 0.0, 0.9, 1.7];
        let exact = exact_marginals(&scores, 2, 2.0).unwrap();
        let emp = empirical_marginals(&scores, 2, 2.0, 40_000, 7).unwrap();
        assert!(total_variation(&exact, &emp) < 0.01);
    }
}
