//! Inference-time token retention.
//!
//! Frame scores set per-frame budgets (equal split, or softmax shares rounded
//! by largest remainder); token scores pick the kept tokens inside each frame,
//! optionally blended with evenly strided positions.

use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax, Tensor};
use crate::error::{Error, Result};
use crate::ocss::sort_descending;
use crate::policy::{self, PolicyParams, TokenGrid};

pub const DEFAULT_ST_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    FrameAvg,
    FrameAda,
    #[serde(rename = "frame-ada-st")]
    FrameAdaST,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FrameAvg, Strategy::FrameAda, Strategy::FrameAdaST];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FrameAvg => "frame-avg",
            Strategy::FrameAda => "frame-ada",
            Strategy::FrameAdaST => "frame-ada-st",
        }
    }

    /// Fraction of each frame's budget given to strided positions.
    pub fn st_fraction(self) -> f64 {
        match self {
            Strategy::FrameAdaST => DEFAULT_ST_FRACTION,
            _ => 0.0,
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionPlan {
    pub strategy: Strategy,
    pub per_frame_budget: Vec<usize>,
    pub st_fraction: f64,
    pub total_budget: usize,
}

/// `round(r·n)`, rejected when zero.
pub fn total_budget(ratio: f64, n_vid: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "retention ratio {ratio} outside (0, 1]"
        )));
    }
    let total = (ratio * n_vid as f64).round() as usize;
    if total == 0 {
        return Err(Error::invalid(format!(
            "retention ratio {ratio} keeps no token of {n_vid}"
        )));
    }
    Ok(total.min(n_vid))
}

/// Integer split of `total` proportional to `shares`: floors first, then the
/// largest fractional parts (lower index on ties) take one more each.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let ideal: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut out: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Splits `total` by `shares` with every entry capped at `cap`; overflow from
/// saturated frames is re-split over the rest by their shares.
fn capped_split(shares: &[f64], total: usize, cap: usize) -> Vec<usize> {
    let t = shares.len();
    let mut out = vec![0; t];
    let mut open: Vec<usize> = (0..t).collect();
    let mut remaining = total;
    loop {
        let sub: Vec<f64> = open.iter().map(|&j| shares[j]).collect();
        let split = largest_remainder(&sub, remaining);
        let saturated: Vec<usize> = open
            .iter()
            .zip(&split)
            .filter(|&(_, &b)| b >= cap)
            .map(|(&j, _)| j)
            .collect();
        if saturated.is_empty() {
            for (&j, b) in open.iter().zip(split) {
                out[j] = b;
            }
            return out;
        }
        for &j in &saturated {
            out[j] = cap;
            remaining -= cap;
        }
        open.retain(|j| !saturated.contains(j));
        if open.is_empty() || remaining == 0 {
            return out;
        }
    }
}

pub fn allocate_budget(
    frame_scores: &[f64],
    ratio: f64,
    frame_size: usize,
    strategy: Strategy,
) -> Result<RetentionPlan> {
    let t = frame_scores.len();
    if t == 0 || frame_size == 0 {
        return Err(Error::invalid("allocation over an empty video"));
    }
    let total = total_budget(ratio, t * frame_size)?;
    let shares = match strategy {
        Strategy::FrameAvg => vec![1.0; t],
        Strategy::FrameAda | Strategy::FrameAdaST => softmax(frame_scores)?,
    };
    if shares.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("frame shares".into()));
    }
    Ok(RetentionPlan {
        strategy,
        per_frame_budget: capped_split(&shares, total, frame_size),
        st_fraction: strategy.st_fraction(),
        total_budget: total,
    })
}

/// Evenly strided positions of one frame, `count` of them, skipping `taken`.
fn strided(frame_size: usize, count: usize, taken: &mut [bool]) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    let stride = (frame_size / count).max(1);
    let mut pos = 0;
    for _ in 0..count {
        while taken[pos % frame_size] {
            pos += 1;
        }
        let p = pos % frame_size;
        taken[p] = true;
        out.push(p);
        pos = p + stride;
    }
    out
}

/// Global indices kept under `plan`, in increasing order.
pub fn select_tokens(
    token_scores: &[f64],
    frame_size: usize,
    plan: &RetentionPlan,
) -> Result<Vec<usize>> {
    let t = plan.per_frame_budget.len();
    if token_scores.len() != t * frame_size {
        return Err(Error::invalid(format!(
            "{} token scores for {t} frames of {frame_size}",
            token_scores.len()
        )));
    }
    if !(0.0..=1.0).contains(&plan.st_fraction) {
        return Err(Error::invalid(format!(
            "st_fraction {} outside [0, 1]",
            plan.st_fraction
        )));
    }
    let mut out = Vec::with_capacity(plan.total_budget);
    for (f, &budget) in plan.per_frame_budget.iter().enumerate() {
        if budget > frame_size {
            return Err(Error::invalid(format!(
                "frame {f} budget {budget} exceeds {frame_size} tokens"
            )));
        }
        let offset = f * frame_size;
        let local = &token_scores[offset..offset + frame_size];
        let top = ((1.0 - plan.st_fraction) * budget as f64 - 1e-9)
            .ceil()
            .max(0.0) as usize;
        let mut taken = vec![false; frame_size];
        for &j in sort_descending(local).iter().take(top) {
            taken[j] = true;
        }
        strided(frame_size, budget - top, &mut taken);
        out.extend((0..frame_size).filter(|&j| taken[j]).map(|j| j + offset));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Compression {
    pub plan: RetentionPlan,
    /// Kept video token indices, increasing.
    pub indices: Vec<usize>,
    /// Kept video tokens in original order.
    pub video: Tensor,
}

/// One policy pass, then budget allocation and token selection.
pub fn compress(
    grid: &TokenGrid,
    params: &PolicyParams,
    ratio: f64,
    strategy: Strategy,
) -> Result<Compression> {
    let scores = policy::forward(grid, params)?;
    let plan = allocate_budget(&scores.frame_scores, ratio, grid.frame_size(), strategy)?;
    let indices = select_tokens(&scores.token_scores, grid.frame_size(), &plan)?;
    Ok(Compression {
        video: grid.video().gather_rows(&indices),
        plan,
        indices,
    })
}

/// Per-video record written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub strategy: Strategy,
    pub retention_ratio: f64,
    pub per_frame_budget: Vec<usize>,
    pub selected: Vec<usize>,
}

impl CompressionReport {
    pub fn new(ratio: f64, c: &Compression) -> Self {
        Self {
            strategy: c.plan.strategy,
            retention_ratio: ratio,
            per_frame_budget: c.plan.per_frame_budget.clone(),
            selected: c.indices.clone(),
        }
    }
}
