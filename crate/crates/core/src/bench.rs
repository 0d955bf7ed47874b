//! Experiment harness behind the `cacovid` binary: config loading, the FLOPs
//! model, and one runner per subcommand. Runners return serializable reports
//! and whether the assertions embedded in the config held.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cpo::{joint_objective, ClipConfig, Level, ObjectiveInputs, Rewarder, RolloutGroup};
use crate::diffcore::gradcheck::{central_difference, relative_error};
use crate::diffcore::Tensor;
use crate::env::{generate_dataset, generate_episode, oracle_answer, EnvConfig, Episode, Split};
use crate::error::{Error, Result};
use crate::ocss::exact::{empirical_marginals, exact_marginals, total_variation};
use crate::ocss::{
    exploration_log_space, partition, per_frame_budget, sample_k, sample_per_frame,
    ExplorationSpace, PartitionSpec,
};
use crate::policy::{self, PolicyParams, TokenGrid};
use crate::retention::{compress, total_budget, Strategy};
use crate::rng::StreamId;
use crate::trainer::{planted_recall, train, TrainConfig, TrainOutcome};

/// `T·(4nd² + 2n²d + 2ndm)`, exact.
///
/// # Panics
/// When the result exceeds `u128`; see [`checked_flops_estimate`].
pub fn flops_estimate(layers: u64, n: u64, d: u64, m: u64) -> u128 {
    checked_flops_estimate(layers, n, d, m).expect("FLOPs overflow u128")
}

/// [`flops_estimate`], or `None` on overflow.
pub fn checked_flops_estimate(layers: u64, n: u64, d: u64, m: u64) -> Option<u128> {
    let (t, n, d, m) = (layers as u128, n as u128, d as u128, m as u128);
    let nd = n.checked_mul(d)?;
    let width = d
        .checked_mul(4)?
        .checked_add(n.checked_mul(2)?)?
        .checked_add(m.checked_mul(2)?)?;
    t.checked_mul(nd)?.checked_mul(width)
}

fn flops_real(layers: f64, n: f64, d: f64, m: f64) -> f64 {
    layers * (4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsModel {
    pub layers: u64,
    pub hidden: u64,
    pub ffn: u64,
}

impl Default for FlopsModel {
    fn default() -> Self {
        Self {
            layers: 28,
            hidden: 3584,
            ffn: 18944,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsComparison {
    pub full_length: u64,
    pub compressed_length: f64,
    pub full: u128,
    pub compressed: f64,
    pub ratio: f64,
}

impl FlopsModel {
    /// FLOPs at `n_vid + n_qst` against `r·n_vid + n_qst`.
    pub fn compare(&self, n_vid: u64, n_qst: u64, ratio: f64) -> FlopsComparison {
        let (t, d, m) = (self.layers as f64, self.hidden as f64, self.ffn as f64);
        let compressed_length = ratio * n_vid as f64 + n_qst as f64;
        let full = flops_estimate(self.layers, n_vid + n_qst, self.hidden, self.ffn);
        let compressed = flops_real(t, compressed_length, d, m);
        FlopsComparison {
            full_length: n_vid + n_qst,
            compressed_length,
            full,
            compressed,
            ratio: compressed / flops_real(t, (n_vid + n_qst) as f64, d, m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub retention_ratio: f64,
    pub strategy: Strategy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            retention_ratio: 0.25,
            strategy: Strategy::FrameAdaST,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerStatsConfig {
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for SamplerStatsConfig {
    fn default() -> Self {
        Self {
            n: 8,
            k: 2,
            lambda: 2.0,
            draws: 200_000,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComplexityConfig {
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        Self {
            n: 196,
            k: 4,
            lambda: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 1,
            step: 1e-6,
        }
    }
}

/// Thresholds checked after a subcommand; unset ones are skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Assertions {
    pub min_recall: Option<f64>,
    pub min_success: Option<f64>,
    pub max_tv: Option<f64>,
    pub min_reduction: Option<f64>,
    pub max_grad_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    /// Keys left out of this section keep their [`planted_train_config`] values.
    #[serde(deserialize_with = "over_planted")]
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub flops: FlopsModel,
    pub sampler_stats: SamplerStatsConfig,
    pub complexity: ComplexityConfig,
    pub gradcheck: GradcheckConfig,
    pub assert: Assertions,
}

/// Training settings that learn the planted environment within 500 samples:
/// the paper's learning rates are sized for a pretrained attention layer and
/// barely move a randomly initialized one.
pub fn planted_train_config() -> TrainConfig {
    TrainConfig {
        lr_attn: 0.03,
        lr_mlp: 0.1,
        momentum: 0.9,
        max_grad_norm: 0.1,
        ..TrainConfig::default()
    }
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            // a tagged enum switches variant wholesale
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) if !p.contains_key("kind") => {
                merge(b, p)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn over_planted<'de, D: serde::Deserializer<'de>>(
    de: D,
) -> std::result::Result<TrainConfig, D::Error> {
    use serde::de::Error as _;
    let patch = toml::Table::deserialize(de)?;
    let mut base = toml::Table::try_from(planted_train_config()).map_err(D::Error::custom)?;
    merge(&mut base, patch);
    TrainConfig::deserialize(base).map_err(D::Error::custom)
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seeds: vec![42],
            train: planted_train_config(),
            eval: EvalConfig::default(),
            flops: FlopsModel::default(),
            sampler_stats: SamplerStatsConfig::default(),
            complexity: ComplexityConfig::default(),
            gradcheck: GradcheckConfig::default(),
            assert: Assertions::default(),
        }
    }
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            key: e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("<config>")
                .to_owned(),
            reason: e.message().to_owned(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; the name `default` selects the built-in config.
    pub fn load(path: &Path) -> Result<Self> {
        if path.as_os_str() == "default" {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "config".into(),
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config fields serialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config {
                key: "seeds".into(),
                reason: "at least one seed is required".into(),
            });
        }
        self.train.validate()?;
        total_budget(self.eval.retention_ratio, self.train.env.n_vid()).map_err(|e| {
            Error::Config {
                key: "eval.retention_ratio".into(),
                reason: e.to_string(),
            }
        })?;
        if self.eval.episodes == 0 {
            return Err(Error::Config {
                key: "eval.episodes".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Training config for one seed replica: the seed drives both the policy
    /// initialization and the episode stream.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        t.env.seed = seed;
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Compressed-answer success rate of `params` over `episodes`.
pub fn success_rate(
    params: &PolicyParams,
    episodes: &[Episode],
    ratio: f64,
    strategy: Strategy,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::invalid("success rate over zero episodes"));
    }
    let mut correct = 0usize;
    for ep in episodes {
        let c = compress(&ep.grid, params, ratio, strategy)?;
        if oracle_answer(&c.indices, ep) == ep.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / episodes.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub baseline_recall: f64,
    /// Recall of the top-|K| tokens; equal to precision at that cut.
    pub recall: f64,
    pub precision: f64,
    pub success_rate: f64,
    pub baseline_success_rate: f64,
    pub filtered: usize,
}

pub fn held_out(env: &EnvConfig, count: usize) -> Result<Vec<Episode>> {
    generate_dataset(env, Split::Eval, count)
}

pub fn evaluate(
    params: &PolicyParams,
    baseline: &PolicyParams,
    episodes: &[Episode],
    eval: &EvalConfig,
) -> Result<(f64, f64, f64, f64)> {
    let recall = planted_recall(params, episodes)?;
    let base = planted_recall(baseline, episodes)?;
    let success = success_rate(params, episodes, eval.retention_ratio, eval.strategy)?;
    let base_success = success_rate(baseline, episodes, eval.retention_ratio, eval.strategy)?;
    Ok((recall, base, success, base_success))
}

pub struct SeedRun {
    pub outcome: TrainOutcome,
    pub metrics: SeedMetrics,
    pub seconds: f64,
}

/// Trains one seed replica and evaluates it on held-out episodes.
pub fn run_seed(cfg: &BenchConfig, seed: u64, metrics_path: Option<PathBuf>) -> Result<SeedRun> {
    let start = Instant::now();
    let mut tcfg = cfg.train_for(seed);
    tcfg.metrics_path = metrics_path;
    let episodes = generate_dataset(&tcfg.env, Split::Train, tcfg.samples)?;
    let outcome = train(episodes, &tcfg)?;
    let baseline = PolicyParams::init(tcfg.env.dim, tcfg.hidden_width(), tcfg.seed)?;
    let eval_eps = held_out(&tcfg.env, cfg.eval.episodes)?;
    let (recall, base, success, base_success) =
        evaluate(&outcome.params, &baseline, &eval_eps, &cfg.eval)?;
    Ok(SeedRun {
        metrics: SeedMetrics {
            seed,
            baseline_recall: base,
            recall,
            precision: recall,
            success_rate: success,
            baseline_success_rate: base_success,
            filtered: outcome.filtered,
        },
        outcome,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub recall: MeanStd,
    pub baseline_recall: MeanStd,
    pub success_rate: MeanStd,
    pub baseline_success_rate: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: BenchConfig,
    pub seeds: Vec<SeedMetrics>,
    pub aggregate: Aggregate,
    pub flops: FlopsComparison,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Wall-clock timings kept apart from the report so the report itself is a
/// pure function of the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seed: u64,
    pub seconds: f64,
}

fn check(failures: &mut Vec<String>, name: &str, value: f64, bound: Option<f64>, at_least: bool) {
    if let Some(b) = bound {
        let ok = if at_least { value >= b } else { value <= b };
        if !ok {
            let rel = if at_least { "<" } else { ">" };
            failures.push(format!("{name} {value} {rel} {b}"));
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Trains and evaluates every seed; writes checkpoints, metrics, report.
pub fn run_experiment(cfg: &BenchConfig, out: &Path) -> Result<(ExperimentReport, Vec<Timing>)> {
    std::fs::create_dir_all(out)?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    let mut timings = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = run_seed(
            cfg,
            seed,
            Some(out.join(format!("metrics-seed{seed}.jsonl"))),
        )?;
        run.outcome
            .params
            .save(out.join(format!("policy-seed{seed}.ckpt")))?;
        timings.push(Timing {
            seed,
            seconds: run.seconds,
        });
        seeds.push(run.metrics);
    }
    let pick = |f: fn(&SeedMetrics) -> f64| MeanStd::of(&seeds.iter().map(f).collect::<Vec<_>>());
    let aggregate = Aggregate {
        recall: pick(|m| m.recall),
        baseline_recall: pick(|m| m.baseline_recall),
        success_rate: pick(|m| m.success_rate),
        baseline_success_rate: pick(|m| m.baseline_success_rate),
    };
    let env = &cfg.train.env;
    let flops = cfg.flops.compare(
        env.n_vid() as u64,
        env.question_tokens as u64,
        cfg.eval.retention_ratio,
    );
    let mut failures = Vec::new();
    check(
        &mut failures,
        "recall",
        aggregate.recall.mean,
        cfg.assert.min_recall,
        true,
    );
    check(
        &mut failures,
        "success_rate",
        aggregate.success_rate.mean,
        cfg.assert.min_success,
        true,
    );
    let report = ExperimentReport {
        config: cfg.clone(),
        seeds,
        aggregate,
        flops,
        passed: failures.is_empty(),
        failures,
    };
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("timing.json"), &timings)?;
    Ok((report, timings))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub retention_ratio: f64,
    pub strategy: Strategy,
    pub episodes: usize,
    pub recall: f64,
    pub success_rate: f64,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Evaluates a saved policy on the held-out episodes of `seed`.
pub fn run_eval(cfg: &BenchConfig, checkpoint: &Path, seed: u64) -> Result<EvalReport> {
    let params = PolicyParams::load(checkpoint)?;
    let env = cfg.train_for(seed).env;
    let episodes = held_out(&env, cfg.eval.episodes)?;
    let recall = planted_recall(&params, &episodes)?;
    let success = success_rate(
        &params,
        &episodes,
        cfg.eval.retention_ratio,
        cfg.eval.strategy,
    )?;
    let mut failures = Vec::new();
    check(&mut failures, "recall", recall, cfg.assert.min_recall, true);
    check(
        &mut failures,
        "success_rate",
        success,
        cfg.assert.min_success,
        true,
    );
    Ok(EvalReport {
        checkpoint: checkpoint.to_owned(),
        retention_ratio: cfg.eval.retention_ratio,
        strategy: cfg.eval.strategy,
        episodes: episodes.len(),
        recall,
        success_rate: success,
        passed: failures.is_empty(),
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub space: ExplorationSpace,
    pub flops_full: u128,
    pub flops: FlopsComparison,
    pub passed: bool,
    pub failures: Vec<String>,
}

pub fn run_complexity(cfg: &BenchConfig) -> Result<ComplexityReport> {
    let c = &cfg.complexity;
    let space = exploration_log_space(c.n, c.k, c.lambda)?;
    let ratio = c.k as f64 / c.n as f64;
    let flops = cfg.flops.compare(c.n as u64, 0, ratio);
    let mut failures = Vec::new();
    check(
        &mut failures,
        "reduction_ratio",
        space.reduction_ratio,
        cfg.assert.min_reduction,
        true,
    );
    Ok(ComplexityReport {
        space,
        flops_full: flops.full,
        flops,
        passed: failures.is_empty(),
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerStatsReport {
    pub scores: Vec<f64>,
    pub exact: Vec<f64>,
    pub empirical: Vec<f64>,
    pub total_variation: f64,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Scores drawn from a standard normal under `seed`.
pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = StreamId::new(seed, 0x5c0e5).rng();
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn run_sampler_stats(cfg: &BenchConfig) -> Result<SamplerStatsReport> {
    let s = &cfg.sampler_stats;
    let scores = random_scores(s.n, s.seed);
    let exact = exact_marginals(&scores, s.k, s.lambda)?;
    let empirical = empirical_marginals(&scores, s.k, s.lambda, s.draws, s.seed)?;
    let tv = total_variation(&exact, &empirical);
    let mut failures = Vec::new();
    check(
        &mut failures,
        "total_variation",
        tv,
        cfg.assert.max_tv,
        false,
    );
    Ok(SamplerStatsReport {
        scores,
        exact,
        empirical,
        total_variation: tv,
        passed: failures.is_empty(),
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckInstance {
    pub frames: usize,
    pub frame_size: usize,
    pub dim: usize,
    pub token_groups: usize,
    pub frame_groups: usize,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instances: Vec<GradcheckInstance>,
    pub max_relative_error: f64,
    pub passed: bool,
    pub failures: Vec<String>,
}

fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
}

/// Random subsets of `0..n` with sizes in `1..n`; the rewards always differ
/// so the group carries a gradient.
fn random_group<R: Rng>(rng: &mut R, level: Level, n: usize, g: usize) -> Result<RolloutGroup> {
    let mut combos = Vec::with_capacity(g);
    for _ in 0..g {
        let k = rng.gen_range(1..n.max(2)).min(n);
        let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
        idx.sort_unstable();
        combos.push(idx);
    }
    let mut rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0..2) as f64).collect();
    rewards[0] = 1.0;
    rewards[1] = 0.0;
    RolloutGroup::new(level, combos, rewards)
}

/// Finite-difference check of the joint token + frame objective through the
/// whole policy on random small instances.
pub fn run_gradcheck(cfg: &GradcheckConfig, max_error: Option<f64>) -> Result<GradcheckReport> {
    let mut rng = StreamId::new(cfg.seed, 0x9c4e).rng();
    let mut instances = Vec::with_capacity(cfg.instances);
    for i in 0..cfg.instances {
        let frames = rng.gen_range(1..=4);
        let frame_size = rng.gen_range(2..=32 / frames);
        let dim = rng.gen_range(2..=8);
        let hidden = rng.gen_range(2..=2 * dim);
        let n_qst = rng.gen_range(1..=3);
        let grid = TokenGrid::new(
            random_tensor(&mut rng, frames * frame_size, dim)?,
            random_tensor(&mut rng, n_qst, dim)?,
            frames,
            1,
            frame_size,
        )?;
        let old = PolicyParams::init(dim, hidden, cfg.seed.wrapping_add(i as u64))?;
        let mut params = old.clone();
        for (_, t) in params.params_mut().iter_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let old_scores = policy::forward(&grid, &old)?;
        let g_t = rng.gen_range(2..=4);
        let token = random_group(&mut rng, Level::Token, grid.n_vid(), g_t)?;
        let token = ObjectiveInputs::new(&old_scores.token_logits, &token)?;
        let frame = if frames >= 2 {
            let g_f = rng.gen_range(2..=4);
            let f = random_group(&mut rng, Level::Frame, frames, g_f)?;
            Some(ObjectiveInputs::new(&old_scores.frame_logits, &f)?)
        } else {
            None
        };
        let clip = ClipConfig::default();
        let analytic = joint_objective(&grid, &params, &token, frame.as_ref(), clip)?.grads;
        let numeric = central_difference(
            |p| {
                let p = PolicyParams::from_params(p.clone())?;
                Ok(joint_objective(&grid, &p, &token, frame.as_ref(), clip)?.total)
            },
            params.params(),
            cfg.step,
        )?;
        instances.push(GradcheckInstance {
            frames,
            frame_size,
            dim,
            token_groups: g_t,
            frame_groups: frame.as_ref().map_or(0, |f| f.groups()),
            relative_error: relative_error(&analytic, &numeric),
        });
    }
    let max = instances
        .iter()
        .map(|i| i.relative_error)
        .fold(0.0, f64::max);
    let mut failures = Vec::new();
    check(&mut failures, "max_relative_error", max, max_error, false);
    Ok(GradcheckReport {
        instances,
        max_relative_error: max,
        passed: failures.is_empty(),
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDemo {
    pub episode: StreamId,
    pub token_ratio: f64,
    pub per_frame_budget: usize,
    pub frame0_spec: PartitionSpec,
    pub frame0_subspaces: Vec<Vec<usize>>,
    pub frame0_probabilities: Vec<f64>,
    pub tokens: Vec<usize>,
    pub token_subspaces: Vec<usize>,
    pub frames: Vec<usize>,
    pub planted: Vec<usize>,
    pub planted_hits: usize,
    pub reward: f64,
}

/// One token draw and one frame draw on a fresh episode, with the partition
/// of the first frame spelled out.
pub fn run_sample_demo(
    cfg: &BenchConfig,
    seed: u64,
    params: Option<PolicyParams>,
) -> Result<SampleDemo> {
    let t = cfg.train_for(seed);
    let stream = StreamId::new(seed, 0xde70);
    let ep = generate_episode(&t.env, stream)?;
    let params = match params {
        Some(p) => p,
        None => PolicyParams::init(t.env.dim, t.hidden_width(), seed)?,
    };
    let scores = policy::forward(&ep.grid, &params)?;
    let hw = ep.grid.frame_size();
    let k = per_frame_budget(hw, t.ratio)?;
    let spec = PartitionSpec::from_count(hw, k, t.lambda)?;
    let frame0 = &scores.token_scores[..hw];
    let part = partition(frame0, spec)?;
    let probs = part.draw_probabilities(frame0)?;
    let tokens = sample_per_frame(
        hw,
        &scores.token_scores,
        t.ratio,
        t.lambda,
        stream.child(&[0]),
    )?;
    let frame_k =
        ((t.frame_ratio * ep.grid.frames() as f64).round() as usize).clamp(1, ep.grid.frames());
    let frames = sample_k(t.sampler, &scores.frame_scores, frame_k, stream.child(&[1]))?;
    let rewarder = Rewarder::new(t.env.alphabet);
    let reward = rewarder.reward(
        &oracle_answer(&tokens.indices, &ep).symbol(),
        &ep.answer.symbol(),
    );
    Ok(SampleDemo {
        episode: stream,
        token_ratio: t.ratio,
        per_frame_budget: k,
        frame0_spec: spec,
        frame0_subspaces: part.subspaces,
        frame0_probabilities: probs,
        planted_hits: ep.hits(&tokens.indices),
        tokens: tokens.indices,
        token_subspaces: tokens.subspaces,
        frames: frames.indices,
        planted: ep.planted,
        reward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flops_examples() {
        assert_eq!(flops_estimate(1, 2, 1, 1), 20);
        let n = 100_000u64;
        let r = flops_estimate(1, 2 * n, 1, 1) as f64 / flops_estimate(1, n, 1, 1) as f64;
        assert!((r - 4.0).abs() / 4.0 < 0.01, "{r}");
        // no overflow at long sequences and wide models
        let big = flops_estimate(80, 10_000_000, 16_384, 65_536);
        assert!(big > u64::MAX as u128);
        assert_eq!(
            checked_flops_estimate(80, 10_000_000, 16_384, 65_536),
            Some(big)
        );
        assert_eq!(
            checked_flops_estimate(u64::MAX, u64::MAX, u64::MAX, 1),
            None
        );
    }

    #[test]
    fn flops_comparison_matches_formula() {
        let model = FlopsModel::default();
        let c = model.compare(6272, 64, 0.25);
        assert_eq!(c.full, flops_estimate(28, 6336, 3584, 18944));
        assert_eq!(c.compressed_length, 1632.0);
        let expected = flops_estimate(28, 1632, 3584, 18944) as f64 / c.full as f64;
        assert!((c.ratio - expected).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_unknown_keys_by_name() {
        let err = BenchConfig::parse("seeds = [1]\nbogus_key = 3\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "bogus_key"),
            other => panic!("{other:?}"),
        }
        let err = BenchConfig::parse("[train]\nratio = 2.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err:?}");
        assert!(BenchConfig::parse("seeds = []\n").is_err());
        assert!(BenchConfig::load(Path::new("/nonexistent/cfg.toml")).is_err());
    }

    #[test]
    fn partial_train_section_keeps_preset() {
        let cfg = BenchConfig::parse("[train]\nsamples = 7\n[train.env]\nplanted = 5\n").unwrap();
        let mut expected = planted_train_config();
        expected.samples = 7;
        expected.env.planted = 5;
        assert_eq!(cfg.train, expected);
        let cfg = BenchConfig::parse("[train.sampler]\nkind = \"uniform\"\n").unwrap();
        assert_eq!(cfg.train.sampler, crate::ocss::Sampler::Uniform);
        let err = BenchConfig::parse("[train]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = BenchConfig::default();
        cfg.seeds = vec![1, 2, 3];
        cfg.assert.min_recall = Some(0.5);
        cfg.eval.strategy = Strategy::FrameAvg;
        let back = BenchConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn complexity_report() {
        let r = run_complexity(&BenchConfig::default()).unwrap();
        assert_eq!((r.space.m, r.space.subspaces), (8, 25));
        assert!(r.space.reduction_ratio >= 15.0);
        assert!(r.passed);
    }

    #[test]
    fn gradcheck_small() {
        let r = run_gradcheck(
            &GradcheckConfig {
                instances: 3,
                ..GradcheckConfig::default()
            },
            Some(1e-3),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }
}
