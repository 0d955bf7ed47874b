//! Compression policy network.
//!
//! One single-head self-attention layer runs over the concatenated video and
//! question tokens. The video half of its output feeds two two-channel
//! perceptron heads: `head_t` scores every token, `head_f` scores every frame
//! after averaging the frame's spatial positions. The contribution of a token
//! or frame is the difference between its "select" and "drop" channels.

use rand::distributions::{Distribution, Uniform};

use crate::diffcore::{Feed, Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::rng::StreamId;

pub const GROUP_ATTN: &str = "attn";
pub const GROUP_HEAD_T: &str = "head_t";
pub const GROUP_HEAD_F: &str = "head_f";

/// Channel holding the "select" logit; channel 0 is "drop".
pub const SELECT: usize = 1;

/// Encoded video tokens laid out frame-major, plus question tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    video: Tensor,
    question: Tensor,
    frames: usize,
    height: usize,
    width: usize,
}

impl TokenGrid {
    pub fn new(
        video: Tensor,
        question: Tensor,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if video.rank() != 2 || video.rows() != frames * height * width {
            return Err(Error::invalid(format!(
                "video tensor {:?} does not hold {frames}×{height}×{width} tokens",
                video.shape()
            )));
        }
        if question.rank() != 2 || question.rows() == 0 {
            return Err(Error::invalid("at least one question token is required"));
        }
        if question.cols() != video.cols() {
            return Err(Error::invalid(format!(
                "question width {} differs from video width {}",
                question.cols(),
                video.cols()
            )));
        }
        Ok(Self {
            video,
            question,
            frames,
            height,
            width,
        })
    }

    pub fn video(&self) -> &Tensor {
        &self.video
    }

    pub fn question(&self) -> &Tensor {
        &self.question
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.video.cols()
    }

    pub fn n_vid(&self) -> usize {
        self.video.rows()
    }

    pub fn n_qst(&self) -> usize {
        self.question.rows()
    }

    /// Tokens per frame, `h·w`.
    pub fn frame_size(&self) -> usize {
        self.height * self.width
    }

    /// `(frame, row, col)` of global token index `j`.
    pub fn position(&self, j: usize) -> (usize, usize, usize) {
        let hw = self.frame_size();
        (j / hw, (j % hw) / self.width, j % self.width)
    }

    pub fn frame_of(&self, j: usize) -> usize {
        j / self.frame_size()
    }

    pub fn frame_range(&self, frame: usize) -> std::ops::Range<usize> {
        let hw = self.frame_size();
        frame * hw..(frame + 1) * hw
    }

    pub fn with_question(&self, question: Tensor) -> Result<Self> {
        Self::new(
            self.video.clone(),
            question,
            self.frames,
            self.height,
            self.width,
        )
    }
}

/// Learnable weights of the attention block and both scoring heads.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    dim: usize,
    hidden: usize,
    params: ParamSet,
}

fn xavier(rng: &mut impl rand::Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

impl PolicyParams {
    /// Xavier-uniform weights for every projection, zero biases.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("d and d_hidden must be at least 1"));
        }
        let mut rng = StreamId::new(seed, 0x9011c7).rng();
        let mut params = ParamSet::new();
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert(format!("{GROUP_ATTN}.{w}"), xavier(&mut rng, dim, dim));
        }
        for head in [GROUP_HEAD_T, GROUP_HEAD_F] {
            params.insert(format!("{head}.w1"), xavier(&mut rng, dim, hidden));
            params.insert(format!("{head}.b1"), Tensor::zeros(&[hidden]));
            params.insert(format!("{head}.w2"), xavier(&mut rng, hidden, 2));
            params.insert(format!("{head}.b2"), Tensor::zeros(&[2]));
        }
        Ok(Self {
            dim,
            hidden,
            params,
        })
    }

    /// Validates names and shapes of a loaded parameter set.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let wq = params.require("attn.wq")?;
        let dim = wq.rows();
        let hidden = params.require("head_t.w1")?.cols();
        let expected = Self::init(dim.max(1), hidden.max(1), 0)?;
        if params.len() != expected.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.params.len(),
                params.len()
            )));
        }
        for (name, t) in expected.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            if !got.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(Self {
            dim,
            hidden,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::diffcore::save(path, &self.params)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(crate::diffcore::load(path)?)
    }
}

/// Two-channel logits and their channel differences.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionScores {
    /// `(n_vid × 2)` token logits.
    pub token_logits: Tensor,
    /// `(t × 2)` frame logits.
    pub frame_logits: Tensor,
    pub token_scores: Vec<f64>,
    pub frame_scores: Vec<f64>,
}

impl ContributionScores {
    pub fn from_logits(token_logits: Tensor, frame_logits: Tensor) -> Result<Self> {
        let token_scores = channel_difference(&token_logits)?;
        let frame_scores = channel_difference(&frame_logits)?;
        Ok(Self {
            token_logits,
            frame_logits,
            token_scores,
            frame_scores,
        })
    }
}

/// `S[:,1] − S[:,0]`.
pub fn channel_difference(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.rank() != 2 || logits.cols() != 2 {
        return Err(Error::invalid(format!(
            "expected two-channel logits, got {:?}",
            logits.shape()
        )));
    }
    Ok((0..logits.rows())
        .map(|r| logits.at(r, 1) - logits.at(r, 0))
        .collect())
}

/// Graph nodes produced by [`build_policy`].
#[derive(Clone, Copy, Debug)]
pub struct PolicyNodes {
    pub token_logits: NodeId,
    pub frame_logits: NodeId,
}

pub const INPUT_VIDEO: &str = "x_vid";
pub const INPUT_QUESTION: &str = "x_qst";

/// Adds the policy network to `graph` for one grid geometry. Parameters are
/// declared as trainable leaves named as in [`PolicyParams`].
pub fn build_policy(
    graph: &mut Graph,
    frames: usize,
    frame_size: usize,
    n_qst: usize,
    dim: usize,
    hidden: usize,
) -> PolicyNodes {
    let n_vid = frames * frame_size;
    let x_vid = graph.input(INPUT_VIDEO, &[n_vid, dim]);
    let x_qst = graph.input(INPUT_QUESTION, &[n_qst, dim]);
    let wq = graph.param("attn.wq", &[dim, dim]);
    let wk = graph.param("attn.wk", &[dim, dim]);
    let wv = graph.param("attn.wv", &[dim, dim]);
    let wo = graph.param("attn.wo", &[dim, dim]);

    let x = graph.concat_rows(x_vid, x_qst);
    let q = graph.matmul(x, wq);
    let k = graph.matmul(x, wk);
    let v = graph.matmul(x, wv);
    let logits = graph.matmul_t(q, k);
    let logits = graph.scale(logits, 1.0 / (dim as f64).sqrt());
    let attn = graph.row_softmax(logits);
    let mixed = graph.matmul(attn, v);
    let out = graph.matmul(mixed, wo);
    // question rows are attended to but never scored
    let video_out = graph.slice_rows(out, 0, n_vid);

    let head = |graph: &mut Graph, name: &str, input: NodeId| {
        let w1 = graph.param(&format!("{name}.w1"), &[dim, hidden]);
        let b1 = graph.param(&format!("{name}.b1"), &[hidden]);
        let w2 = graph.param(&format!("{name}.w2"), &[hidden, 2]);
        let b2 = graph.param(&format!("{name}.b2"), &[2]);
        let h = graph.matmul(input, w1);
        let h = graph.add_bias(h, b1);
        let h = graph.tanh(h);
        let o = graph.matmul(h, w2);
        graph.add_bias(o, b2)
    };
    let token_logits = head(graph, GROUP_HEAD_T, video_out);
    let pooled = graph.mean_pool_rows(video_out, frame_size);
    let frame_logits = head(graph, GROUP_HEAD_F, pooled);
    PolicyNodes {
        token_logits,
        frame_logits,
    }
}

/// Runs the policy on one grid.
pub fn forward(grid: &TokenGrid, params: &PolicyParams) -> Result<ContributionScores> {
    if grid.dim() != params.dim() {
        return Err(Error::invalid(format!(
            "grid width {} does not match policy width {}",
            grid.dim(),
            params.dim()
        )));
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
    graph.set_output(nodes.token_logits);
    let mut feed = Feed::new().with_params(params.params());
    feed.insert(INPUT_VIDEO, grid.video())
        .insert(INPUT_QUESTION, grid.question());
    graph.forward(&feed)?;
    let token_logits = graph.value(nodes.token_logits).expect("evaluated").clone();
    let frame_logits = graph.value(nodes.frame_logits).expect("evaluated").clone();
    ContributionScores::from_logits(token_logits, frame_logits)
}

/// `(g × n)` mask of channel indices: 1 where the index was selected.
pub fn selection_mask(selections: &[&[usize]], universe: usize) -> Result<Tensor> {
    let mut data = vec![0.0; selections.len() * universe];
    for (g, sel) in selections.iter().enumerate() {
        for &j in sel.iter() {
            if j >= universe {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    size: universe,
                });
            }
            data[g * universe + j] = SELECT as f64;
        }
    }
    Tensor::matrix(selections.len(), universe, data)
}

/// Per-index log-probability of the observed selection under the
/// channel-softmax policy: `log σ(S)[j,1]` for selected `j`, `log σ(S)[j,0]`
/// otherwise.
pub fn selection_log_prob(
    logits: &Tensor,
    selected: &[usize],
    universe: usize,
) -> Result<Vec<f64>> {
    if logits.rank() != 2 || logits.cols() != 2 || logits.rows() != universe {
        return Err(Error::invalid(format!(
            "logits {:?} for universe {universe}",
            logits.shape()
        )));
    }
    let mut picked = vec![0usize; universe];
    for &j in selected {
        if j >= universe {
            return Err(Error::IndexOutOfRange {
                index: j,
                size: universe,
            });
        }
        picked[j] = SELECT;
    }
    Ok(picked
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let row = logits.row(j);
            row[c] - crate::diffcore::log_sum_exp(row)
        })
        .collect())
}

/// Differentiable counterpart of [`selection_log_prob`] for a whole group:
/// `(n × 2)` logits and a `(g × n)` mask give `(g × n)` log-probabilities.
pub fn selection_log_prob_node(graph: &mut Graph, logits: NodeId, mask: NodeId) -> NodeId {
    let lp = graph.log_softmax(logits);
    graph.channel_pick(lp, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64, t: usize, h: usize, w: usize, q: usize, d: usize) -> TokenGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |rows: usize| {
            Tensor::matrix(
                rows,
                d,
                (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let video = m(t * h * w);
        let question = m(q);
        TokenGrid::new(video, question, t, h, w).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = PolicyParams::init(8, 16, 42).unwrap();
        let b = PolicyParams::init(8, 16, 42).unwrap();
        assert_eq!(a, b);
        let c = PolicyParams::init(8, 16, 43).unwrap();
        assert_ne!(a, c);
        let bound = (6.0f64 / (8.0 + 16.0)).sqrt();
        let w1 = a.params().get("head_t.w1").unwrap();
        assert!(w1.data().iter().all(|v| v.abs() <= bound));
        assert!(PolicyParams::init(0, 4, 1).is_err());
    }

    #[test]
    fn named_groups_cover_every_parameter() {
        let p = PolicyParams::init(4, 8, 1).unwrap();
        let counted = [GROUP_ATTN, GROUP_HEAD_T, GROUP_HEAD_F]
            .iter()
            .map(|g| p.params().group(g).count())
            .sum::<usize>();
        assert_eq!(counted, p.params().len());
        assert_eq!(p.params().group(GROUP_ATTN).count(), 4);
    }

    #[test]
    fn output_shapes() {
        let grid = random_grid(1, 3, 2, 2, 2, 4);
        let params = PolicyParams::init(4, 8, 7).unwrap();
        let s = forward(&grid, &params).unwrap();
        assert_eq!(s.token_logits.shape(), &[12, 2]);
        assert_eq!(s.frame_logits.shape(), &[3, 2]);
        assert_eq!(s.token_scores.len(), 12);
        assert_eq!(s.frame_scores.len(), 3);
        for j in 0..12 {
            assert_eq!(
                s.token_scores[j],
                s.token_logits.at(j, 1) - s.token_logits.at(j, 0)
            );
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let grid = random_grid(1, 1, 2, 2, 1, 4);
        let params = PolicyParams::init(5, 8, 7).unwrap();
        assert!(forward(&grid, &params).is_err());
        let v = Tensor::zeros(&[4, 3]);
        let q = Tensor::zeros(&[1, 4]);
        assert!(TokenGrid::new(v, q, 1, 2, 2).is_err());
    }

    #[test]
    fn token_positions() {
        let grid = random_grid(0, 2, 3, 4, 1, 2);
        assert_eq!(grid.position(0), (0, 0, 0));
        assert_eq!(grid.position(5), (0, 1, 1));
        assert_eq!(grid.position(12), (1, 0, 0));
        assert_eq!(grid.position(23), (1, 2, 3));
    }

    #[test]
    fn identical_frame_rows_pool_to_that_row() {
        // With all video tokens of a frame equal and the question equal to
        // them too, every attention output row in the frame is identical, so
        // with shared head weights the frame and token logits coincide.
        let d = 3;
        let row = [0.4, -0.2, 0.9];
        let video = Tensor::matrix(4, d, row.repeat(4)).unwrap();
        let question = Tensor::matrix(1, d, row.to_vec()).unwrap();
        let grid = TokenGrid::new(video, question, 1, 2, 2).unwrap();
        let mut params = PolicyParams::init(d, 5, 3).unwrap();
        for suffix in ["w1", "b1", "w2", "b2"] {
            let t = params
                .params()
                .get(&format!("head_t.{suffix}"))
                .unwrap()
                .clone();
            *params
                .params_mut()
                .get_mut(&format!("head_f.{suffix}"))
                .unwrap() = t;
        }
        let s = forward(&grid, &params).unwrap();
        assert_abs_diff_eq!(
            s.frame_logits.at(0, 0),
            s.token_logits.at(0, 0),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            s.frame_logits.at(0, 1),
            s.token_logits.at(0, 1),
            epsilon = 1e-12
        );
    }

    #[test]
    fn channel_difference_example() {
        let s = Tensor::matrix(1, 2, vec![0.2, 0.9]).unwrap();
        assert_abs_diff_eq!(channel_difference(&s).unwrap()[0], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn swapping_channels_negates_scores() {
        let grid = random_grid(4, 2, 2, 2, 3, 4);
        let params = PolicyParams::init(4, 6, 2).unwrap();
        let s = forward(&grid, &params).unwrap();
        let swapped: Vec<f64> = (0..s.token_logits.rows())
            .flat_map(|r| [s.token_logits.at(r, 1), s.token_logits.at(r, 0)])
            .collect();
        let swapped = Tensor::matrix(s.token_logits.rows(), 2, swapped).unwrap();
        for (a, b) in channel_difference(&swapped)
            .unwrap()
            .iter()
            .zip(&s.token_scores)
        {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn question_order_does_not_matter() {
        let grid = random_grid(9, 2, 2, 3, 4, 4);
        let params = PolicyParams::init(4, 8, 5).unwrap();
        let base = forward(&grid, &params).unwrap();
        let q = grid.question().gather_rows(&[2, 0, 3, 1]);
        let permuted = forward(&grid.with_question(q).unwrap(), &params).unwrap();
        // softmax row sums are reordered, so agreement is to rounding only
        for (a, b) in base
            .token_logits
            .data()
            .iter()
            .zip(permuted.token_logits.data())
        {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in base
            .frame_logits
            .data()
            .iter()
            .zip(permuted.frame_logits.data())
        {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn selection_probability_examples() {
        let s = Tensor::matrix(2, 2, vec![0.0, 0.0, 3f64.ln(), 0.0]).unwrap();
        let lp = selection_log_prob(&s, &[0], 2).unwrap();
        assert_abs_diff_eq!(lp[0].exp(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(lp[1].exp(), 0.75, epsilon = 1e-15);
        let lp = selection_log_prob(&s, &[1], 2).unwrap();
        assert_abs_diff_eq!(lp[1].exp(), 0.25, epsilon = 1e-15);
        assert!(matches!(
            selection_log_prob(&s, &[2], 2),
            Err(Error::IndexOutOfRange { index: 2, size: 2 })
        ));
    }

    #[test]
    fn selected_and_unselected_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let s = Tensor::matrix(20, 2, data).unwrap();
        let all: Vec<usize> = (0..20).collect();
        let sel = selection_log_prob(&s, &all, 20).unwrap();
        let unsel = selection_log_prob(&s, &[], 20).unwrap();
        for (a, b) in sel.iter().zip(&unsel) {
            assert_abs_diff_eq!(a.exp() + b.exp(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn graph_log_prob_matches_plain_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s = Tensor::matrix(6, 2, data).unwrap();
        let sels: [&[usize]; 2] = [&[0, 3], &[5]];
        let mask = selection_mask(&sels, 6).unwrap();
        let mut g = Graph::new();
        let sn = g.input("s", &[6, 2]);
        let mn = g.input("m", &[2, 6]);
        let out = selection_log_prob_node(&mut g, sn, mn);
        g.set_output(out);
        let mut feed = Feed::new();
        feed.insert("s", &s).insert("m", &mask);
        let lp = g.forward(&feed).unwrap().clone();
        for (row, sel) in sels.iter().enumerate() {
            let plain = selection_log_prob(&s, sel, 6).unwrap();
            for j in 0..6 {
                assert_abs_diff_eq!(lp.at(row, j), plain[j], epsilon = 1e-12);
            }
        }
        assert!(selection_mask(&[&[6]], 6).is_err());
    }
}
