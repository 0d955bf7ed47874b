//! Online combinatorial space sampling.
//!
//! Tokens are sorted by contribution score (descending, ties by index) and
//! cut into consecutive subspaces of `m` tokens. A subspace is drawn with
//! probability equal to its share of the softmax mass over all tokens, then
//! `k` tokens are drawn inside it without replacement, each draw weighted by
//! `exp(score)` over the tokens still available.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamId;

pub mod exact;

/// Subspace size multiplier used unless configured otherwise.
pub const DEFAULT_LAMBDA: f64 = 2.0;

/// Budget `k` and subspace size `m` for one sampling universe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n: usize,
    pub k: usize,
    pub m: usize,
}

impl PartitionSpec {
    /// `k = round(r·n)`, `m = round(λ·r·n)` raised to at least `k` and capped at `n`.
    pub fn from_ratio(n: usize, ratio: f64, lambda: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "sample ratio {ratio} outside (0, 1]"
            )));
        }
        if !(lambda >= 1.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda {lambda} must be finite and ≥ 1"
            )));
        }
        let k = (ratio * n as f64).round() as usize;
        if k == 0 {
            return Err(Error::invalid(format!("budget round({ratio}·{n}) is zero")));
        }
        let m = (lambda * ratio * n as f64).round() as usize;
        Ok(Self::sized(n, k, m))
    }

    /// Same rule with the budget given as a count.
    pub fn from_count(n: usize, k: usize, lambda: f64) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::invalid(format!("budget {k} outside 1..={n}")));
        }
        if !(lambda >= 1.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda {lambda} must be finite and ≥ 1"
            )));
        }
        let m = (lambda * k as f64).round() as usize;
        Ok(Self::sized(n, k, m))
    }

    fn sized(n: usize, k: usize, m: usize) -> Self {
        let m = m.max(k).max(1).min(n);
        Self { n, k, m }
    }

    /// Number of subspaces, `ceil(n/m)`.
    pub fn subspaces(&self) -> usize {
        self.n.div_ceil(self.m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspacePartition {
    pub spec: PartitionSpec,
    /// Token indices sorted by descending score.
    pub order: Vec<usize>,
    /// Consecutive blocks of `order`; the last one may be short.
    pub subspaces: Vec<Vec<usize>>,
}

/// Descending order of `scores`, ties broken by ascending index.
pub fn sort_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn partition(scores: &[f64], spec: PartitionSpec) -> Result<SubspacePartition> {
    if scores.len() != spec.n {
        return Err(Error::invalid(format!(
            "{} scores for a universe of {}",
            scores.len(),
            spec.n
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("contribution score".into()));
    }
    let order = sort_descending(scores);
    let subspaces = order.chunks(spec.m).map(<[usize]>::to_vec).collect();
    Ok(SubspacePartition {
        spec,
        order,
        subspaces,
    })
}

pub fn partition_by_ratio(scores: &[f64], ratio: f64, lambda: f64) -> Result<SubspacePartition> {
    partition(
        scores,
        PartitionSpec::from_ratio(scores.len(), ratio, lambda)?,
    )
}

impl SubspacePartition {
    /// Softmax mass of each subspace.
    pub fn masses(&self, scores: &[f64]) -> Vec<f64> {
        let lse = crate::diffcore::log_sum_exp(scores);
        self.subspaces
            .iter()
            .map(|c| c.iter().map(|&j| (scores[j] - lse).exp()).sum())
            .collect()
    }

    /// Subspace-draw probabilities after excluding subspaces too small to
    /// hold `k` tokens.
    pub fn draw_probabilities(&self, scores: &[f64]) -> Result<Vec<f64>> {
        let mut p = self.masses(scores);
        for (pi, c) in p.iter_mut().zip(&self.subspaces) {
            if c.len() < self.spec.k {
                *pi = 0.0;
            }
        }
        let total: f64 = p.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid(format!(
                "no subspace holds {} tokens",
                self.spec.k
            )));
        }
        p.iter_mut().for_each(|v| *v /= total);
        Ok(p)
    }
}

/// How combinations are drawn during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampler {
    /// Two-stage subspace sampling.
    Ocss { lambda: f64 },
    /// Score-weighted draws without replacement over the whole universe.
    Multinomial,
    /// Uniformly random `k`-subsets.
    Uniform,
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Ocss {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// Where OCSS is applied to the token universe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleScope {
    /// Independently inside each frame, budget `round(r·h·w)` per frame.
    #[default]
    Frame,
    /// Once over all `n_vid` tokens.
    Video,
}

/// A drawn index set together with the stream that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledCombination {
    /// Sorted, distinct global indices.
    pub indices: Vec<usize>,
    /// Drawn subspace per sampling unit (one entry, or one per frame).
    pub subspaces: Vec<usize>,
    pub stream: StreamId,
}

/// Draws `k` distinct members of `pool`, each draw weighted by
/// `exp(score)` among the members not yet drawn.
fn draw_without_replacement<R: Rng>(
    rng: &mut R,
    pool: &[usize],
    scores: &[f64],
    k: usize,
) -> Vec<usize> {
    let mut remaining = pool.to_vec();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        if remaining.len() == k - out.len() {
            out.append(&mut remaining);
            break;
        }
        let max = remaining
            .iter()
            .map(|&j| scores[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = remaining.iter().map(|&j| (scores[j] - max).exp()).collect();
        let pos = categorical(rng, &weights);
        out.push(remaining.swap_remove(pos));
    }
    out.sort_unstable();
    out
}

/// Index drawn with probability proportional to `weights`.
fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding left `u` past the last bucket
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// One OCSS draw over `scores` with the given budget.
pub fn sample_with_spec(
    scores: &[f64],
    spec: PartitionSpec,
    stream: StreamId,
) -> Result<SampledCombination> {
    let partition = partition(scores, spec)?;
    let probs = partition.draw_probabilities(scores)?;
    let mut rng = stream.rng();
    let chosen = categorical(&mut rng, &probs);
    let indices = draw_without_replacement(&mut rng, &partition.subspaces[chosen], scores, spec.k);
    Ok(SampledCombination {
        indices,
        subspaces: vec![chosen],
        stream,
    })
}

pub fn sample_combination(
    scores: &[f64],
    ratio: f64,
    lambda: f64,
    stream: StreamId,
) -> Result<SampledCombination> {
    sample_with_spec(
        scores,
        PartitionSpec::from_ratio(scores.len(), ratio, lambda)?,
        stream,
    )
}

/// One draw of `k` tokens using any [`Sampler`].
pub fn sample_k(
    sampler: Sampler,
    scores: &[f64],
    k: usize,
    stream: StreamId,
) -> Result<SampledCombination> {
    let n = scores.len();
    match sampler {
        Sampler::Ocss { lambda } => {
            sample_with_spec(scores, PartitionSpec::from_count(n, k, lambda)?, stream)
        }
        Sampler::Multinomial => {
            if k == 0 || k > n {
                return Err(Error::invalid(format!("budget {k} outside 1..={n}")));
            }
            let pool: Vec<usize> = (0..n).collect();
            let mut rng = stream.rng();
            Ok(SampledCombination {
                indices: draw_without_replacement(&mut rng, &pool, scores, k),
                subspaces: vec![0],
                stream,
            })
        }
        Sampler::Uniform => {
            if k == 0 || k > n {
                return Err(Error::invalid(format!("budget {k} outside 1..={n}")));
            }
            let mut rng = stream.rng();
            let mut indices = rand::seq::index::sample(&mut rng, n, k).into_vec();
            indices.sort_unstable();
            Ok(SampledCombination {
                indices,
                subspaces: vec![0],
                stream,
            })
        }
    }
}

/// `g` independent draws; member `i` uses stream `base.child(&[i])`.
pub fn sample_group(
    scores: &[f64],
    ratio: f64,
    lambda: f64,
    g: usize,
    base: StreamId,
) -> Result<Vec<SampledCombination>> {
    if g < 2 {
        return Err(Error::invalid(format!("group size {g} < 2")));
    }
    let spec = PartitionSpec::from_ratio(scores.len(), ratio, lambda)?;
    (0..g)
        .map(|i| sample_with_spec(scores, spec, base.child(&[i as u64])))
        .collect()
}

/// Per-frame budget `round(r·frame_size)`, at least one.
pub fn per_frame_budget(frame_size: usize, ratio: f64) -> Result<usize> {
    let k = (ratio * frame_size as f64).round() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "per-frame budget round({ratio}·{frame_size}) is zero"
        )));
    }
    Ok(k.min(frame_size))
}

/// Frame-by-frame draw of `k` tokens per frame; frame `f` uses
/// `stream_of(f)`. Indices are global.
pub fn sample_per_frame_with<F>(
    sampler: Sampler,
    frame_size: usize,
    scores: &[f64],
    k: usize,
    stream: StreamId,
    stream_of: F,
) -> Result<SampledCombination>
where
    F: Fn(usize) -> StreamId,
{
    if frame_size == 0 || scores.len() % frame_size != 0 {
        return Err(Error::invalid(format!(
            "{} scores do not split into frames of {frame_size}",
            scores.len()
        )));
    }
    let frames = scores.len() / frame_size;
    let mut indices = Vec::with_capacity(frames * k);
    let mut subspaces = Vec::with_capacity(frames);
    for f in 0..frames {
        let offset = f * frame_size;
        let local = &scores[offset..offset + frame_size];
        let c = sample_k(sampler, local, k, stream_of(f))?;
        indices.extend(c.indices.iter().map(|j| j + offset));
        subspaces.push(c.subspaces[0]);
    }
    Ok(SampledCombination {
        indices,
        subspaces,
        stream,
    })
}

/// OCSS inside every frame with per-frame budget `round(r·h·w)`.
pub fn sample_per_frame(
    frame_size: usize,
    scores: &[f64],
    ratio: f64,
    lambda: f64,
    stream: StreamId,
) -> Result<SampledCombination> {
    let k = per_frame_budget(frame_size, ratio)?;
    sample_per_frame_with(
        Sampler::Ocss { lambda },
        frame_size,
        scores,
        k,
        stream,
        |f| stream.child(&[f as u64]),
    )
}

/// Size of the search space, in bits, with and without subspace sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSpace {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub subspaces: usize,
    pub log2_arbitrary: f64,
    pub log2_ocss: f64,
    /// `log2_arbitrary / log2_ocss`; infinite when OCSS leaves one choice.
    pub reduction_ratio: f64,
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    use statrs::function::gamma::ln_gamma;
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Arbitrary subsets span `2^n`; OCSS spans `l · C(m, k)`.
pub fn exploration_log_space(n: usize, k: usize, lambda: f64) -> Result<ExplorationSpace> {
    let spec = PartitionSpec::from_count(n, k, lambda)?;
    let l = spec.subspaces();
    let log2_ocss = if l == 1 && spec.m == k {
        0.0
    } else {
        ((l as f64).ln() + ln_binomial(spec.m, k)) / std::f64::consts::LN_2
    };
    let log2_arbitrary = n as f64;
    let reduction_ratio = if log2_ocss <= 0.0 {
        f64::INFINITY
    } else {
        log2_arbitrary / log2_ocss
    };
    Ok(ExplorationSpace {
        n,
        k,
        m: spec.m,
        subspaces: l,
        log2_arbitrary,
        log2_ocss,
        reduction_ratio,
    })
}
