//! Combinatorial policy optimization.
//!
//! Rewards for a group of sampled combinations are standardized into
//! advantages. Every index `j` of the universe then gets, for every rollout
//! `i`, an importance ratio between the current and the frozen policy's
//! probability of the observed selection state of `j` (selected or not), and
//! the objective is the mean over `(i, j)` of the clipped surrogate
//! `min(ratio·A_i, clip(ratio, 1−ε_low, 1+ε_high)·A_i)`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Feed, Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::policy::{
    self, build_policy, selection_log_prob, selection_mask, PolicyParams, TokenGrid,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self> {
        if !(0.0 < eps_low && eps_low <= eps_high && eps_high < 1.0) {
            return Err(Error::invalid(format!(
                "clip range needs 0 < ε_low ≤ ε_high < 1, got ({eps_low}, {eps_high})"
            )));
        }
        Ok(Self { eps_low, eps_high })
    }
}

/// Whether a group scores tokens or frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Token,
    Frame,
}

/// Binary accuracy reward over single-letter answer symbols.
#[derive(Debug)]
pub struct Rewarder {
    alphabet: usize,
    unknown: AtomicU64,
}

impl Rewarder {
    pub fn new(alphabet: usize) -> Self {
        Self {
            alphabet: alphabet.clamp(1, 26),
            unknown: AtomicU64::new(0),
        }
    }

    fn is_symbol(&self, s: &str) -> bool {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                c.is_ascii_uppercase() && ((c as u8 - b'A') as usize) < self.alphabet
            }
            _ => false,
        }
    }

    /// 1.0 on an exact match of two known symbols, else 0.0. Unknown
    /// symbols on either side count as a miss and bump [`Rewarder::unknown`].
    pub fn reward(&self, prediction: &str, answer: &str) -> f64 {
        if !self.is_symbol(prediction) || !self.is_symbol(answer) {
            self.unknown.fetch_add(1, Ordering::Relaxed);
            return 0.0;
        }
        if prediction == answer {
            1.0
        } else {
            0.0
        }
    }

    pub fn unknown(&self) -> u64 {
        self.unknown.load(Ordering::Relaxed)
    }
}

/// Standardized rewards of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct Advantages {
    pub values: Vec<f64>,
    /// All rewards equal: every advantage is zero and the group carries no
    /// gradient.
    pub degenerate: bool,
}

/// `(R − mean) / std` with the population standard deviation.
pub fn group_advantage(rewards: &[f64]) -> Result<Advantages> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!(
            "advantage needs at least two rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // a spread below rounding noise of the mean is no spread
    if std <= f64::EPSILON * mean.abs().max(1.0) * 8.0 {
        return Ok(Advantages {
            values: vec![0.0; rewards.len()],
            degenerate: true,
        });
    }
    Ok(Advantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub level: Level,
    pub combinations: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub advantages: Advantages,
}

impl RolloutGroup {
    pub fn new(level: Level, combinations: Vec<Vec<usize>>, rewards: Vec<f64>) -> Result<Self> {
        if combinations.len() != rewards.len() {
            return Err(Error::invalid(format!(
                "{} combinations but {} rewards",
                combinations.len(),
                rewards.len()
            )));
        }
        let advantages = group_advantage(&rewards)?;
        Ok(Self {
            level,
            combinations,
            rewards,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.combinations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combinations.is_empty()
    }
}

/// Constant tensors the objective needs for one group: the selection mask,
/// the frozen policy's log-probabilities of each observed selection state,
/// and the advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveInputs {
    pub universe: usize,
    pub mask: Tensor,
    pub old_log_prob: Tensor,
    pub advantages: Tensor,
}

impl ObjectiveInputs {
    pub fn new(old_logits: &Tensor, group: &RolloutGroup) -> Result<Self> {
        let universe = old_logits.rows();
        let refs: Vec<&[usize]> = group.combinations.iter().map(Vec::as_slice).collect();
        let mask = selection_mask(&refs, universe)?;
        let mut old = Vec::with_capacity(group.len() * universe);
        for sel in &refs {
            old.extend(selection_log_prob(old_logits, sel, universe)?);
        }
        if old.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("old-policy log-probability".into()));
        }
        Ok(Self {
            universe,
            old_log_prob: Tensor::matrix(group.len(), universe, old)?,
            mask,
            advantages: Tensor::vector(group.advantages.values.clone()),
        })
    }

    pub fn groups(&self) -> usize {
        self.mask.rows()
    }
}

/// Input-leaf names used by [`clipped_objective_node`] under `prefix`.
pub struct ObjectiveNames {
    pub mask: String,
    pub old_log_prob: String,
    pub advantages: String,
}

impl ObjectiveNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            mask: format!("{prefix}.mask"),
            old_log_prob: format!("{prefix}.old_log_prob"),
            advantages: format!("{prefix}.advantages"),
        }
    }

    pub fn bind<'a>(&'a self, feed: &mut Feed<'a>, inputs: &'a ObjectiveInputs) {
        feed.insert(&self.mask, &inputs.mask)
            .insert(&self.old_log_prob, &inputs.old_log_prob)
            .insert(&self.advantages, &inputs.advantages);
    }
}

/// Appends the clipped surrogate over `(groups × universe)` to `graph`,
/// reading logits from `logits`. Returns the scalar objective node.
pub fn clipped_objective_node(
    graph: &mut Graph,
    logits: NodeId,
    universe: usize,
    groups: usize,
    clip: ClipConfig,
    names: &ObjectiveNames,
) -> NodeId {
    let mask = graph.input(&names.mask, &[groups, universe]);
    let old = graph.input(&names.old_log_prob, &[groups, universe]);
    let adv = graph.input(&names.advantages, &[groups]);
    let new = policy::selection_log_prob_node(graph, logits, mask);
    let log_ratio = graph.sub(new, old);
    let ratio = graph.exp(log_ratio);
    let unclipped = graph.mul_col(ratio, adv);
    let clipped = graph.clamp(ratio, 1.0 - clip.eps_low, 1.0 + clip.eps_high);
    let clipped = graph.mul_col(clipped, adv);
    let surrogate = graph.minimum(unclipped, clipped);
    graph.mean(surrogate)
}

/// Objective and its gradient with respect to the current logits, for one
/// group at either level.
pub fn cpo_objective(
    new_logits: &Tensor,
    inputs: &ObjectiveInputs,
    clip: ClipConfig,
) -> Result<(f64, Tensor)> {
    if new_logits.rank() != 2 || new_logits.cols() != 2 || new_logits.rows() != inputs.universe {
        return Err(Error::invalid(format!(
            "logits {:?} for universe {}",
            new_logits.shape(),
            inputs.universe
        )));
    }
    let mut graph = Graph::new();
    let logits = graph.param("logits", new_logits.shape());
    let names = ObjectiveNames::new("obj");
    let out = clipped_objective_node(
        &mut graph,
        logits,
        inputs.universe,
        inputs.groups(),
        clip,
        &names,
    );
    graph.set_output(out);
    let mut params = ParamSet::new();
    params.insert("logits", new_logits.clone());
    let mut feed = Feed::new().with_params(&params);
    names.bind(&mut feed, inputs);
    let value = graph.forward(&feed)?.data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("clipped objective".into()));
    }
    let grads = graph.backward(&Tensor::scalar(1.0))?;
    let grad = grads.get("logits").cloned().expect("declared");
    Ok((value, grad))
}

/// Frame-level objective: same clipped surrogate over the frame universe.
pub fn frame_objective(
    new_frame_logits: &Tensor,
    inputs: &ObjectiveInputs,
    clip: ClipConfig,
) -> Result<(f64, Tensor)> {
    cpo_objective(new_frame_logits, inputs, clip)
}

/// Joint value of the token and frame objectives with parameter gradients.
#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub total: f64,
    pub token: f64,
    pub frame: f64,
    pub grads: ParamSet,
}

/// `J_t + J_f` through the policy network, differentiated with respect to
/// every policy parameter. A missing frame group contributes zero.
pub fn joint_objective(
    grid: &TokenGrid,
    params: &PolicyParams,
    token: &ObjectiveInputs,
    frame: Option<&ObjectiveInputs>,
    clip: ClipConfig,
) -> Result<ObjectiveValue> {
    if token.universe != grid.n_vid() {
        return Err(Error::invalid(
            "token objective universe differs from n_vid",
        ));
    }
    if let Some(f) = frame {
        if f.universe != grid.frames() {
            return Err(Error::invalid("frame objective universe differs from t"));
        }
    }
    let mut graph = Graph::new();
    let nodes = build_policy(
        &mut graph,
        grid.frames(),
        grid.frame_size(),
        grid.n_qst(),
        params.dim(),
        params.hidden(),
    );
    let token_names = ObjectiveNames::new("token");
    let frame_names = ObjectiveNames::new("frame");
    let j_t = clipped_objective_node(
        &mut graph,
        nodes.token_logits,
        token.universe,
        token.groups(),
        clip,
        &token_names,
    );
    let j_f = frame.map(|f| {
        clipped_objective_node(
            &mut graph,
            nodes.frame_logits,
            f.universe,
            f.groups(),
            clip,
            &frame_names,
        )
    });
    let total = match j_f {
        Some(j_f) => graph.add(j_t, j_f),
        None => j_t,
    };
    graph.set_output(total);

    let mut feed = Feed::new().with_params(params.params());
    feed.insert(policy::INPUT_VIDEO, grid.video())
        .insert(policy::INPUT_QUESTION, grid.question());
    token_names.bind(&mut feed, token);
    if let Some(f) = frame {
        frame_names.bind(&mut feed, f);
    }
    let value = graph.forward(&feed)?.data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("joint objective".into()));
    }
    let token_value = graph.value(j_t).expect("evaluated").data()[0];
    let frame_value = j_f.map_or(0.0, |n| graph.value(n).expect("evaluated").data()[0]);
    let grads = graph.backward(&Tensor::scalar(1.0))?;
    Ok(ObjectiveValue {
        total: value,
        token: token_value,
        frame: frame_value,
        grads,
    })
}
