//! Training loop: blind filtering, per-sample iterations with experience
//! replay, a dynamic token sample ratio and joint token/frame updates.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cpo::{
    group_advantage, joint_objective, Advantages, ClipConfig, Level, ObjectiveInputs, Rewarder,
    RolloutGroup,
};
use crate::diffcore::{ParamSet, Tensor};
use crate::dpc_knn::{default_k_nn, density_peaks};
use crate::env::{blind_reward, oracle_answer, EnvConfig, Episode};
use crate::error::{Error, Result};
use crate::ocss::{
    per_frame_budget, sample_k, sample_per_frame_with, SampleScope, SampledCombination, Sampler,
};
use crate::policy::{self, ContributionScores, PolicyParams, GROUP_ATTN};
use crate::rng::StreamId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Token sample ratio at the start of every sample.
    pub ratio: f64,
    pub frame_ratio: f64,
    pub token_group: usize,
    pub frame_group: usize,
    pub iterations: usize,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub lambda: f64,
    pub lr_attn: f64,
    pub lr_mlp: f64,
    /// Heavy-ball coefficient; 0 is plain gradient ascent.
    pub momentum: f64,
    /// Gradients with a larger norm are rescaled to it; 0 disables.
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Training samples drawn before blind filtering.
    pub samples: usize,
    /// Hidden width of both heads; 0 means twice the token width.
    pub hidden: usize,
    pub sampler: Sampler,
    pub scope: SampleScope,
    pub ratio_cap: f64,
    /// Lower clamp of the dynamic ratio; 0 means the smallest ratio that
    /// still keeps one token per frame.
    pub ratio_floor: f64,
    pub metrics_path: Option<PathBuf>,
    /// Where parameters are dumped when training hits a non-finite value.
    pub diagnostic_path: Option<PathBuf>,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ratio: 0.02,
            frame_ratio: 0.125,
            token_group: 24,
            frame_group: 8,
            iterations: 5,
            alpha_low: 0.125,
            alpha_high: 0.875,
            eps_low: 0.2,
            eps_high: 0.28,
            lambda: 2.0,
            lr_attn: 1e-7,
            lr_mlp: 1e-6,
            momentum: 0.0,
            max_grad_norm: 0.0,
            seed: 42,
            samples: 500,
            hidden: 0,
            sampler: Sampler::default(),
            scope: SampleScope::default(),
            ratio_cap: 0.5,
            ratio_floor: 0.0,
            metrics_path: None,
            diagnostic_path: None,
            env: EnvConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn clip(&self) -> Result<ClipConfig> {
        ClipConfig::new(self.eps_low, self.eps_high)
    }

    pub fn hidden_width(&self) -> usize {
        match self.hidden {
            0 => 2 * self.env.dim,
            h => h,
        }
    }

    pub fn floor(&self) -> f64 {
        if self.ratio_floor > 0.0 {
            self.ratio_floor
        } else {
            // round(floor·h·w) = 1
            0.5 / self.env.frame_size() as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.to_owned(),
                reason,
            })
        };
        self.env.validate()?;
        self.clip()?;
        for (key, v) in [("ratio", self.ratio), ("frame_ratio", self.frame_ratio)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(key, format!("{v} outside (0, 1]"));
            }
        }
        if self.token_group < 2 || self.frame_group < 2 {
            return bad(
                "token_group/frame_group",
                "groups need at least two members".into(),
            );
        }
        if self.iterations == 0 {
            return bad("iterations", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha_low)
            || !(0.0..=1.0).contains(&self.alpha_high)
            || self.alpha_low > self.alpha_high
        {
            return bad("alpha_low/alpha_high", "need 0 ≤ low ≤ high ≤ 1".into());
        }
        if !(self.lambda >= 1.0) {
            return bad("lambda", format!("{} < 1", self.lambda));
        }
        if !(self.lr_attn >= 0.0) || !(self.lr_mlp >= 0.0) {
            return bad(
                "lr_attn/lr_mlp",
                "learning rates must be non-negative".into(),
            );
        }
        if !(self.max_grad_norm >= 0.0) {
            return bad(
                "max_grad_norm",
                format!("{} is negative", self.max_grad_norm),
            );
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} outside [0, 1)", self.momentum));
        }
        if !(self.floor() <= self.ratio_cap && self.ratio_cap <= 1.0) {
            return bad(
                "ratio_cap",
                format!("cap {} below floor {}", self.ratio_cap, self.floor()),
            );
        }
        Ok(())
    }
}

/// Experience gathered for one training sample.
#[derive(Clone, Debug, Default)]
pub struct ReplayMemory {
    pub token: Vec<(SampledCombination, f64)>,
    pub frame: Vec<(SampledCombination, f64)>,
}

impl ReplayMemory {
    pub fn clear(&mut self) {
        self.token.clear();
        self.frame.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicRatioState {
    pub current: f64,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub floor: f64,
    pub cap: f64,
}

impl DynamicRatioState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            current: cfg.ratio,
            alpha_low: cfg.alpha_low,
            alpha_high: cfg.alpha_high,
            floor: cfg.floor(),
            cap: cfg.ratio_cap,
        }
    }
}

/// Halves the ratio after easy iterations, doubles it after hard ones.
pub fn update_sample_ratio(mean_reward: f64, state: DynamicRatioState) -> DynamicRatioState {
    let current = if mean_reward > state.alpha_high {
        state.current / 2.0
    } else if mean_reward < state.alpha_low {
        state.current * 2.0
    } else {
        state.current
    };
    DynamicRatioState {
        current: current.clamp(state.floor, state.cap),
        ..state
    }
}

/// Drops blind-answerable episodes, keeping order.
pub fn filter_dataset(episodes: Vec<Episode>, rewarder: &Rewarder) -> Result<Vec<Episode>> {
    let total = episodes.len();
    let kept: Vec<Episode> = episodes
        .into_iter()
        .filter(|ep| blind_reward(ep, rewarder) == 0.0)
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid(format!(
            "all {total} episodes are answerable blind; nothing to train on"
        )));
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub sample: usize,
    pub iteration: usize,
    pub mean_reward: f64,
    pub frame_mean_reward: f64,
    pub r_current: f64,
    pub advantage_norm: f64,
    pub grad_norm: f64,
    pub objective: f64,
    pub token_rollouts: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<IterationMetrics>,
    pub filtered: usize,
}

/// Tokens shown to the environment for a set of sampled frames: the density
/// peaks of each frame, `budget` tokens in total split evenly.
pub fn frame_representatives(ep: &Episode, frames: &[usize], budget: usize) -> Result<Vec<usize>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let hw = ep.grid.frame_size();
    let per_frame = budget.div_ceil(frames.len()).clamp(1, hw);
    let mut out = Vec::with_capacity(per_frame * frames.len());
    for &f in frames {
        let range = ep.grid.frame_range(f);
        let rows: Vec<usize> = range.clone().collect();
        let points = ep.grid.video().gather_rows(&rows);
        let peaks = density_peaks(&points, default_k_nn(hw), per_frame)?;
        out.extend(peaks.indices.iter().map(|i| range.start + i));
    }
    out.sort_unstable();
    Ok(out)
}

fn draw_tokens(
    cfg: &TrainConfig,
    scores: &[f64],
    frame_size: usize,
    ratio: f64,
    stream: StreamId,
) -> Result<SampledCombination> {
    match cfg.scope {
        SampleScope::Frame => {
            let k = per_frame_budget(frame_size, ratio)?;
            sample_per_frame_with(cfg.sampler, frame_size, scores, k, stream, |f| {
                stream.child(&[f as u64])
            })
        }
        SampleScope::Video => {
            let n = scores.len();
            let k = ((ratio * n as f64).round() as usize).clamp(1, n);
            sample_k(cfg.sampler, scores, k, stream)
        }
    }
}

fn rollout_group(level: Level, memory: &[(SampledCombination, f64)]) -> Result<RolloutGroup> {
    let combinations = memory.iter().map(|(c, _)| c.indices.clone()).collect();
    let rewards = memory.iter().map(|&(_, r)| r).collect();
    RolloutGroup::new(level, combinations, rewards)
}

fn norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

struct Optimizer {
    lr_attn: f64,
    lr_mlp: f64,
    momentum: f64,
    max_norm: f64,
    velocity: Option<ParamSet>,
}

impl Optimizer {
    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        let norm = grads.norm();
        let scale = if self.max_norm > 0.0 && norm > self.max_norm {
            self.max_norm / norm
        } else {
            1.0
        };
        let direction = if self.momentum > 0.0 {
            let v = self.velocity.get_or_insert_with(|| {
                let mut z = ParamSet::new();
                for (name, g) in grads.iter() {
                    z.insert(name, Tensor::zeros(g.shape()));
                }
                z
            });
            for (name, vt) in v.iter_mut() {
                let g = grads.require(name)?;
                for (a, b) in vt.data_mut().iter_mut().zip(g.data()) {
                    *a = self.momentum * *a + scale * b;
                }
            }
            v.clone()
        } else {
            let mut g = grads.clone();
            for (_, t) in g.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            g
        };
        for (name, p) in params.iter_mut() {
            let lr = if name.split('.').next() == Some(GROUP_ATTN) {
                self.lr_attn
            } else {
                self.lr_mlp
            };
            let g = direction.require(name)?;
            for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
                *a += lr * b;
            }
        }
        Ok(())
    }
}

/// Runs training on `episodes`, starting from `params`.
pub fn train_from(
    episodes: Vec<Episode>,
    mut params: PolicyParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let rewarder = Rewarder::new(cfg.env.alphabet);
    let total = episodes.len();
    let episodes = filter_dataset(episodes, &rewarder)?;
    let filtered = total - episodes.len();
    let clip = cfg.clip()?;
    let mut sink = match &cfg.metrics_path {
        Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => None,
    };
    let mut optimizer = Optimizer {
        lr_attn: cfg.lr_attn,
        lr_mlp: cfg.lr_mlp,
        momentum: cfg.momentum,
        max_norm: cfg.max_grad_norm,
        velocity: None,
    };
    let root = StreamId::new(cfg.seed, 0x7a1_5a3e);
    let mut metrics = Vec::with_capacity(episodes.len() * cfg.iterations);
    let mut memory = ReplayMemory::default();
    let answer_of = |sel: &[usize], ep: &Episode| {
        rewarder.reward(&oracle_answer(sel, ep).symbol(), &ep.answer.symbol())
    };

    for (s, ep) in episodes.iter().enumerate() {
        memory.clear();
        let mut ratio = DynamicRatioState::new(cfg);
        let old: ContributionScores = policy::forward(&ep.grid, &params)?;
        let (hw, t, n_vid) = (ep.grid.frame_size(), ep.grid.frames(), ep.n_vid());
        let frame_k = ((cfg.frame_ratio * t as f64).round() as usize).clamp(1, t);

        for j in 0..cfg.iterations {
            let stream = root.child(&[s as u64, j as u64]);
            let r = ratio.current;
            let mut token_rewards = Vec::with_capacity(cfg.token_group);
            for i in 0..cfg.token_group {
                let c = draw_tokens(cfg, &old.token_scores, hw, r, stream.child(&[0, i as u64]))?;
                let reward = answer_of(&c.indices, ep);
                token_rewards.push(reward);
                memory.token.push((c, reward));
            }
            let budget = ((r * n_vid as f64).round() as usize).max(1);
            let mut frame_rewards = Vec::with_capacity(cfg.frame_group);
            for i in 0..cfg.frame_group {
                let c = sample_k(
                    cfg.sampler,
                    &old.frame_scores,
                    frame_k,
                    stream.child(&[1, i as u64]),
                )?;
                let shown = frame_representatives(ep, &c.indices, budget)?;
                let reward = answer_of(&shown, ep);
                frame_rewards.push(reward);
                memory.frame.push((c, reward));
            }

            let token_group = rollout_group(Level::Token, &memory.token)?;
            let frame_group = rollout_group(Level::Frame, &memory.frame)?;
            let token_inputs = ObjectiveInputs::new(&old.token_logits, &token_group)?;
            let frame_inputs = ObjectiveInputs::new(&old.frame_logits, &frame_group)?;
            let value =
                joint_objective(&ep.grid, &params, &token_inputs, Some(&frame_inputs), clip)?;
            if !value.total.is_finite() || !value.grads.is_finite() {
                if let Some(path) = &cfg.diagnostic_path {
                    params.save(path)?;
                }
                return Err(Error::NonFinite(format!(
                    "objective at sample {s}, iteration {j} (value {})",
                    value.total
                )));
            }
            optimizer.step(params.params_mut(), &value.grads)?;

            let adv: &Advantages = &token_group.advantages;
            let record = IterationMetrics {
                sample: s,
                iteration: j,
                mean_reward: mean(&token_rewards),
                frame_mean_reward: mean(&frame_rewards),
                r_current: r,
                advantage_norm: norm(&adv.values),
                grad_norm: value.grads.norm(),
                objective: value.total,
                token_rollouts: token_rewards.len(),
            };
            ratio = update_sample_ratio(record.mean_reward, ratio);
            if let Some(w) = sink.as_mut() {
                serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            metrics.push(record);
        }
    }
    if let Some(mut w) = sink {
        w.flush()?;
    }
    Ok(TrainOutcome {
        params,
        metrics,
        filtered,
    })
}

/// Initializes a policy from the config seed and trains it on `episodes`.
pub fn train(episodes: Vec<Episode>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = PolicyParams::init(cfg.env.dim, cfg.hidden_width(), cfg.seed)?;
    train_from(episodes, params, cfg)
}

/// Fraction of planted tokens among the policy's top-|K| tokens, averaged
/// over episodes.
pub fn planted_recall(params: &PolicyParams, episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::invalid("recall over zero episodes"));
    }
    let mut sum = 0.0;
    for ep in episodes {
        let scores = policy::forward(&ep.grid, params)?.token_scores;
        let k = ep.planted.len();
        let top = crate::ocss::sort_descending(&scores);
        sum += ep.hits(&top[..k]) as f64 / k as f64;
    }
    Ok(sum / episodes.len() as f64)
}

/// Advantage over the whole replay list; exposed for inspection.
pub fn replay_advantages(memory: &[(SampledCombination, f64)]) -> Result<Advantages> {
    let rewards: Vec<f64> = memory.iter().map(|&(_, r)| r).collect();
    group_advantage(&rewards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, Split};

    fn tiny() -> TrainConfig {
        TrainConfig {
            samples: 3,
            token_group: 4,
            frame_group: 2,
            iterations: 3,
            ratio: 0.25,
            lr_attn: 1e-2,
            lr_mlp: 1e-1,
            env: EnvConfig {
                frames: 2,
                height: 3,
                width: 3,
                dim: 4,
                planted: 3,
                ..EnvConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn state(current: f64) -> DynamicRatioState {
        DynamicRatioState {
            current,
            alpha_low: 0.125,
            alpha_high: 0.875,
            floor: 0.001,
            cap: 0.5,
        }
    }

    #[test]
    fn ratio_update_examples() {
        assert_eq!(update_sample_ratio(0.9, state(0.02)).current, 0.01);
        assert_eq!(update_sample_ratio(0.1, state(0.02)).current, 0.04);
        assert_eq!(update_sample_ratio(0.5, state(0.02)).current, 0.02);
        assert_eq!(update_sample_ratio(0.125, state(0.02)).current, 0.02);
        assert_eq!(update_sample_ratio(0.875, state(0.02)).current, 0.02);
        assert_eq!(update_sample_ratio(0.0, state(0.4)).current, 0.5);
        assert_eq!(update_sample_ratio(1.0, state(0.0015)).current, 0.001);
    }

    #[test]
    fn defaults() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.ratio, cfg.frame_ratio), (0.02, 0.125));
        assert_eq!(
            (cfg.token_group, cfg.frame_group, cfg.iterations),
            (24, 8, 5)
        );
        assert_eq!((cfg.alpha_low, cfg.alpha_high), (0.125, 0.875));
        assert_eq!((cfg.eps_low, cfg.eps_high, cfg.lambda), (0.2, 0.28, 2.0));
        assert_eq!((cfg.lr_attn, cfg.lr_mlp, cfg.seed), (1e-7, 1e-6, 42));
        assert_eq!(cfg.floor(), 0.5 / 36.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn filtering() {
        let rewarder = Rewarder::new(4);
        let env = EnvConfig {
            blind_prob: 0.3,
            ..EnvConfig::default()
        };
        let eps = generate_dataset(&env, Split::Train, 1000).unwrap();
        let blind = eps.iter().filter(|e| e.blind).count();
        let kept = filter_dataset(eps.clone(), &rewarder).unwrap();
        assert_eq!(kept.len(), 1000 - blind);
        assert!((640..760).contains(&kept.len()), "{}", kept.len());
        let streams: Vec<_> = eps.iter().filter(|e| !e.blind).map(|e| e.stream).collect();
        assert_eq!(kept.iter().map(|e| e.stream).collect::<Vec<_>>(), streams);

        let none = generate_dataset(&EnvConfig::default(), Split::Train, 20).unwrap();
        assert_eq!(filter_dataset(none.clone(), &rewarder).unwrap(), none);
        let all = EnvConfig {
            blind_prob: 1.0,
            ..EnvConfig::default()
        };
        let all = generate_dataset(&all, Split::Train, 5).unwrap();
        assert!(filter_dataset(all, &rewarder).is_err());
    }

    #[test]
    fn zero_learning_rates_leave_params_alone() {
        let cfg = TrainConfig {
            lr_attn: 0.0,
            lr_mlp: 0.0,
            ..tiny()
        };
        let eps = generate_dataset(&cfg.env, Split::Train, cfg.samples).unwrap();
        let init = PolicyParams::init(cfg.env.dim, cfg.hidden_width(), cfg.seed).unwrap();
        let out = train(eps, &cfg).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn rollout_and_metric_counts() {
        let cfg = TrainConfig {
            samples: 1,
            token_group: 24,
            iterations: 5,
            ..tiny()
        };
        let eps = generate_dataset(&cfg.env, Split::Train, 1).unwrap();
        let out = train(eps, &cfg).unwrap();
        assert_eq!(out.metrics.len(), 5);
        assert_eq!(
            out.metrics.iter().map(|m| m.token_rollouts).sum::<usize>(),
            120
        );

        let cfg = tiny();
        let eps = generate_dataset(&cfg.env, Split::Train, cfg.samples).unwrap();
        let out = train(eps, &cfg).unwrap();
        assert_eq!(out.metrics.len(), cfg.samples * cfg.iterations);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny();
        let eps = generate_dataset(&cfg.env, Split::Train, cfg.samples).unwrap();
        let a = train(eps.clone(), &cfg).unwrap();
        let b = train(eps, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
        let init = PolicyParams::init(cfg.env.dim, cfg.hidden_width(), cfg.seed).unwrap();
        assert_ne!(a.params, init);
    }

    #[test]
    fn metrics_file_has_one_line_per_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let cfg = TrainConfig {
            metrics_path: Some(path.clone()),
            ..tiny()
        };
        let eps = generate_dataset(&cfg.env, Split::Train, cfg.samples).unwrap();
        let out = train(eps, &cfg).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let parsed: Vec<IterationMetrics> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed, out.metrics);
    }

    #[test]
    fn ratio_resets_each_sample() {
        let cfg = tiny();
        let eps = generate_dataset(&cfg.env, Split::Train, cfg.samples).unwrap();
        let out = train(eps, &cfg).unwrap();
        for m in out.metrics.iter().filter(|m| m.iteration == 0) {
            assert_eq!(m.r_current, cfg.ratio);
        }
        for m in &out.metrics {
            assert!(m.r_current >= cfg.floor() && m.r_current <= cfg.ratio_cap);
        }
    }

    #[test]
    fn representatives_stay_inside_chosen_frames() {
        let env = EnvConfig::default();
        let ep = crate::env::generate_episode(&env, StreamId::new(1, 1)).unwrap();
        let reps = frame_representatives(&ep, &[1, 3], 6).unwrap();
        assert_eq!(reps.len(), 6);
        assert!(reps.iter().all(|&j| [1, 3].contains(&(j / 36))));
        assert!(frame_representatives(&ep, &[], 6).unwrap().is_empty());
    }
}
