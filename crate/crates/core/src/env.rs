//! Synthetic video question answering.
//!
//! Each episode plants a set of critical tokens around a random signal
//! direction; the question tokens point along the same direction. The
//! environment answers correctly when the offered token subset covers enough
//! of the planted set (or when the episode is answerable blind), and otherwise
//! returns a wrong symbol that is fixed per (episode, subset).

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cpo::Rewarder;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::policy::TokenGrid;
use crate::rng::{splitmix64, StreamId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub question_tokens: usize,
    /// Size of the planted token set.
    pub planted: usize,
    /// Frames allowed to hold planted tokens; 0 means any frame.
    pub planted_frames: usize,
    /// Fraction of planted tokens a subset must cover to be answered.
    pub coverage: f64,
    /// Per-coordinate standard deviation of background tokens.
    pub noise: f64,
    /// Length of the signal component of planted tokens.
    pub signal: f64,
    /// Per-coordinate noise on planted tokens.
    pub planted_noise: f64,
    /// Per-coordinate noise on question tokens.
    pub question_noise: f64,
    /// Length of the shared offset separating question tokens from video
    /// tokens (along the first coordinate axis).
    pub question_offset: f64,
    /// Weight of a fixed axis (the last coordinate) in every episode's
    /// signal direction; 0 makes the direction fully random.
    pub topic: f64,
    pub blind_prob: f64,
    pub alphabet: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 6,
            width: 6,
            dim: 16,
            question_tokens: 4,
            planted: 8,
            planted_frames: 0,
            coverage: 0.5,
            noise: 1.0,
            signal: 5.0,
            planted_noise: 0.5,
            question_noise: 0.25,
            question_offset: 8.0,
            topic: 2.0,
            blind_prob: 0.0,
            alphabet: 4,
            seed: 42,
        }
    }
}

impl EnvConfig {
    pub fn n_vid(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn frame_size(&self) -> usize {
        self.height * self.width
    }

    fn planted_frame_count(&self) -> usize {
        match self.planted_frames {
            0 => self.frames,
            f => f.min(self.frames),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.to_owned(),
                reason,
            })
        };
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.dim == 0 {
            return bad("frames/height/width/dim", "must be positive".into());
        }
        if self.question_tokens == 0 {
            return bad("question_tokens", "must be positive".into());
        }
        if self.planted == 0 {
            return bad(
                "planted",
                "an episode needs at least one planted token".into(),
            );
        }
        let room = self.planted_frame_count() * self.frame_size();
        if self.planted > room {
            return bad(
                "planted",
                format!(
                    "{} planted tokens do not fit in {room} positions",
                    self.planted
                ),
            );
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return bad("coverage", format!("{} outside (0, 1]", self.coverage));
        }
        if !(self.noise > 0.0)
            || !(self.signal >= 0.0)
            || !(self.planted_noise >= 0.0)
            || !(self.question_noise >= 0.0)
            || !self.question_offset.is_finite()
            || !(self.topic >= 0.0)
        {
            return bad(
                "noise/signal",
                "must be non-negative (noise positive)".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.blind_prob) {
            return bad("blind_prob", format!("{} outside [0, 1]", self.blind_prob));
        }
        if !(2..=26).contains(&self.alphabet) {
            return bad("alphabet", format!("{} outside 2..=26", self.alphabet));
        }
        Ok(())
    }
}

/// Answer symbol `A`, `B`, … as an index into the alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Answer(pub u8);

impl Answer {
    pub fn symbol(self) -> String {
        ((b'A' + self.0) as char).to_string()
    }
}

impl std::fmt::Display for Answer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", (b'A' + self.0) as char)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub stream: StreamId,
    pub grid: TokenGrid,
    /// Sorted planted token indices.
    pub planted: Vec<usize>,
    /// Sorted frames that contain at least one planted token.
    pub planted_frames: Vec<usize>,
    pub answer: Answer,
    pub blind: bool,
    pub coverage: f64,
    pub alphabet: usize,
}

fn gaussian_row<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate_episode(cfg: &EnvConfig, stream: StreamId) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = stream.rng();
    let (t, hw, d) = (cfg.frames, cfg.frame_size(), cfg.dim);

    let mut direction = gaussian_row(&mut rng, d, 1.0);
    let len = direction
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    direction.iter_mut().for_each(|v| *v /= len);
    direction[d - 1] += cfg.topic;
    let len = direction
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    direction.iter_mut().for_each(|v| *v /= len);

    let frame_pool = sample(&mut rng, t, cfg.planted_frame_count()).into_vec();
    let positions: Vec<usize> = frame_pool
        .iter()
        .flat_map(|&f| f * hw..(f + 1) * hw)
        .collect();
    let mut planted: Vec<usize> = sample(&mut rng, positions.len(), cfg.planted)
        .into_iter()
        .map(|i| positions[i])
        .collect();
    planted.sort_unstable();
    let mut planted_frames: Vec<usize> = planted.iter().map(|j| j / hw).collect();
    planted_frames.dedup();

    let mut video = Vec::with_capacity(cfg.n_vid() * d);
    let mut next = 0;
    for j in 0..cfg.n_vid() {
        if next < planted.len() && planted[next] == j {
            next += 1;
            let noise = gaussian_row(&mut rng, d, cfg.planted_noise);
            video.extend(direction.iter().zip(noise).map(|(s, z)| cfg.signal * s + z));
        } else {
            video.extend(gaussian_row(&mut rng, d, cfg.noise));
        }
    }
    let mut question = Vec::with_capacity(cfg.question_tokens * d);
    for _ in 0..cfg.question_tokens {
        let noise = gaussian_row(&mut rng, d, cfg.question_noise);
        question.extend(direction.iter().zip(noise).map(|(s, z)| cfg.signal * s + z));
        let row = question.len() - d;
        question[row] += cfg.question_offset;
    }

    let answer = Answer(rng.gen_range(0..cfg.alphabet) as u8);
    let blind = rng.gen::<f64>() < cfg.blind_prob;
    let grid = TokenGrid::new(
        Tensor::matrix(cfg.n_vid(), d, video)?,
        Tensor::matrix(cfg.question_tokens, d, question)?,
        t,
        cfg.height,
        cfg.width,
    )?;
    Ok(Episode {
        stream,
        grid,
        planted,
        planted_frames,
        answer,
        blind,
        coverage: cfg.coverage,
        alphabet: cfg.alphabet,
    })
}

/// Disjoint episode families drawn from one config seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
}

/// Stream of episode `index` of `split` in the dataset seeded by `cfg.seed`.
pub fn episode_stream(cfg: &EnvConfig, split: Split, index: u64) -> StreamId {
    let family = match split {
        Split::Train => 0xe915_0de5,
        Split::Eval => 0x0e7a_1e75,
    };
    StreamId::new(cfg.seed, family).child(&[index])
}

pub fn generate_dataset(cfg: &EnvConfig, split: Split, count: usize) -> Result<Vec<Episode>> {
    (0..count as u64)
        .map(|i| generate_episode(cfg, episode_stream(cfg, split, i)))
        .collect()
}

impl Episode {
    pub fn n_vid(&self) -> usize {
        self.grid.n_vid()
    }

    /// Planted tokens present in `selected`.
    pub fn hits(&self, selected: &[usize]) -> usize {
        selected
            .iter()
            .filter(|j| self.planted.binary_search(j).is_ok())
            .count()
    }

    pub fn covers(&self, selected: &[usize]) -> bool {
        self.hits(selected) as f64 >= self.coverage * self.planted.len() as f64 - 1e-12
    }
}

/// What the stand-in model answers when shown the `selected` tokens.
pub fn oracle_answer(selected: &[usize], ep: &Episode) -> Answer {
    if ep.blind || ep.covers(selected) {
        return ep.answer;
    }
    let mut sorted = selected.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut h = splitmix64(ep.stream.seed ^ splitmix64(ep.stream.stream));
    for j in sorted {
        h = splitmix64(h ^ j as u64);
    }
    let offset = 1 + (h % (ep.alphabet as u64 - 1)) as u8;
    Answer((ep.answer.0 + offset) % ep.alphabet as u8)
}

/// Reward of the answer given with no visual tokens at all.
pub fn blind_reward(ep: &Episode, rewarder: &Rewarder) -> f64 {
    rewarder.reward(&oracle_answer(&[], ep).symbol(), &ep.answer.symbol())
}

/// Plain-text fixture from which an episode is regenerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub env: EnvConfig,
    pub episode: StreamId,
}

impl EpisodeRecord {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("plain fields serialize")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            key: "episode record".into(),
            reason: e.to_string(),
        })
    }

    pub fn regenerate(&self) -> Result<Episode> {
        generate_episode(&self.env, self.episode)
    }
}
