//! Small autoregressive policy over the environment vocabulary.
//!
//! Logits are linear in sparse binary features, optionally plus a single
//! tanh hidden layer over the same features. The features at each step are
//!
//! * the format mode (which system prompt is in use),
//! * the task context from [`crate::env::task_context_features`],
//! * the grammar state: mode together with the most recent tag emitted,
//! * the previous token (or a begin marker),
//! * a bag of every token emitted so far,
//! * gated reads: each active question feature crossed with each attribute
//!   token already emitted.
//!
//! The gated reads are the only route from multiple image attributes to the
//! answer, and they see only tokens the policy wrote itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ContextFeatures, FeatureLayout, TokenKind, Vocab, END_TOKEN};
use crate::grpo::{clipped_surrogate, clipped_surrogate_with_grad, ClipConfig, GrpoError, SequenceLogProbs};
use crate::structured::FormatMode;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("parameter shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("token id {0} is outside the vocabulary")]
    BadToken(usize),
    #[error("context dimension {got} does not match the policy ({expected})")]
    ContextMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

const NUM_MODES: usize = 2;
/// No tag yet, or the last tag emitted (six tags).
const NUM_GRAMMAR_STATES: usize = 7;

fn mode_index(mode: FormatMode) -> usize {
    match mode {
        FormatMode::ReasonAnswer => 0,
        FormatMode::CaptionReasonAnswer => 1,
    }
}

/// Index arithmetic for the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyShape {
    pub k: usize,
    pub v: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub context_dim: usize,
    pub gate_dim: usize,
    pub num_attr_tokens: usize,
    pub attr_offset: usize,
}

impl PolicyShape {
    pub fn new(k: usize, v: usize, hidden: usize) -> Self {
        let vocab = Vocab::new(k, v);
        let layout = FeatureLayout::new(k, v);
        PolicyShape {
            k,
            v,
            hidden,
            vocab: vocab.len(),
            context_dim: layout.context_dim(),
            gate_dim: layout.gate_dim(),
            num_attr_tokens: vocab.num_attr_tokens(),
            attr_offset: vocab.attr_offset(),
        }
    }

    fn context_off(&self) -> usize {
        NUM_MODES
    }
    fn state_off(&self) -> usize {
        self.context_off() + self.context_dim
    }
    fn last_off(&self) -> usize {
        self.state_off() + NUM_MODES * NUM_GRAMMAR_STATES
    }
    fn bag_off(&self) -> usize {
        // previous-token block has an extra slot for the begin marker
        self.last_off() + self.vocab + 1
    }
    fn gated_off(&self) -> usize {
        self.bag_off() + self.vocab
    }

    /// Number of binary input features.
    pub fn num_features(&self) -> usize {
        self.gated_off() + self.gate_dim * self.num_attr_tokens
    }

    pub fn num_params(&self) -> usize {
        let d = self.num_features();
        d * self.vocab + d * self.hidden + self.hidden * self.vocab
    }

    fn u_off(&self) -> usize {
        self.num_features() * self.vocab
    }
    fn w2_off(&self) -> usize {
        self.u_off() + self.num_features() * self.hidden
    }

    fn mode_feature(&self, mode: FormatMode) -> usize {
        mode_index(mode)
    }
    fn state_feature(&self, mode: FormatMode, state: usize) -> usize {
        self.state_off() + mode_index(mode) * NUM_GRAMMAR_STATES + state
    }
    fn last_feature(&self, token: Option<usize>) -> usize {
        self.last_off() + token.unwrap_or(self.vocab)
    }
    fn bag_feature(&self, token: usize) -> usize {
        self.bag_off() + token
    }
    fn gated_feature(&self, gate: usize, attr: usize) -> usize {
        self.gated_off() + gate * self.num_attr_tokens + attr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub k: usize,
    pub v: usize,
    pub hidden: usize,
    pub data: Vec<f64>,
}

/// Strength of the hand-set prior that stands in for a pretrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Logit of the expected tag at segment boundaries.
    pub grammar: f64,
    /// Logit of misplaced tags and the end token.
    pub misplaced_tag: f64,
    /// Default logit of content tokens.
    pub content: f64,
    /// Boost of attribute tokens that are true of the image, inside `<info>`.
    pub perceive: f64,
    /// Logit of `</info>` inside the caption; above `perceive + content`
    /// makes greedy captions empty.
    pub caption_stop: f64,
    pub think_word: f64,
    pub think_stop: f64,
    pub answer_token: f64,
    pub repeat_penalty: f64,
    /// Boost of the answer tokens of the question's type (letter, yes/no,
    /// count), with a matching penalty outside `<answer>`.
    pub answer_kind: f64,
    /// Strength of the built-in ability to answer from attribute tokens
    /// already written; 0 gives a policy that cannot read its own caption.
    pub reading: f64,
    pub noise: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            grammar: 8.0,
            misplaced_tag: -6.0,
            content: -2.0,
            perceive: 4.0,
            caption_stop: 1.3,
            think_word: 1.0,
            think_stop: 2.0,
            answer_token: 3.0,
            repeat_penalty: -6.0,
            answer_kind: 2.0,
            reading: 1.0,
            noise: 0.01,
        }
    }
}

impl PolicyParams {
    pub fn zeros(k: usize, v: usize, hidden: usize) -> Self {
        let n = PolicyShape::new(k, v, hidden).num_params();
        PolicyParams {
            k,
            v,
            hidden,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape::new(self.k, self.v, self.hidden)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let expected = self.shape().num_params();
        if self.data.len() != expected {
            return Err(PolicyError::ShapeMismatch {
                expected,
                got: self.data.len(),
            });
        }
        Ok(())
    }

    fn w_mut(&mut self, feature: usize, token: usize) -> &mut f64 {
        let vocab = self.shape().vocab;
        &mut self.data[feature * vocab + token]
    }

    /// A policy that already follows the output grammar most of the time,
    /// writes partial captions from the image when asked to, fills its
    /// reasoning with filler words and knows none of the task semantics.
    pub fn pretrained(k: usize, v: usize, hidden: usize, prior: &PriorConfig, seed: u64) -> Self {
        let mut p = Self::zeros(k, v, hidden);
        let shape = p.shape();
        let vocab = Vocab::new(k, v);
        let layout = FeatureLayout::new(k, v);
        let tag = |i: usize| i;
        let (info_o, info_c, think_o, think_c, ans_o, ans_c) = (tag(0), tag(1), tag(2), tag(3), tag(4), tag(5));

        for mode in [FormatMode::ReasonAnswer, FormatMode::CaptionReasonAnswer] {
            for state in 0..NUM_GRAMMAR_STATES {
                let f = shape.state_feature(mode, state);
                for t in 0..shape.vocab {
                    *p.w_mut(f, t) = match vocab.kind(t) {
                        TokenKind::Tag(_) | TokenKind::End => prior.misplaced_tag,
                        TokenKind::Attribute { .. } if state != 1 + info_o => prior.content - prior.perceive,
                        TokenKind::Attribute { .. } => prior.content - 1.0,
                        TokenKind::Answer if state != 1 + ans_o => prior.content - prior.answer_kind,
                        _ => prior.content,
                    };
                }
                let set = |p: &mut PolicyParams, t: usize, x: f64| *p.w_mut(f, t) = x;
                match state {
                    0 => match mode {
                        FormatMode::CaptionReasonAnswer => set(&mut p, info_o, prior.grammar),
                        FormatMode::ReasonAnswer => set(&mut p, think_o, prior.grammar),
                    },
                    s if s == 1 + info_o => set(&mut p, info_c, prior.caption_stop),
                    s if s == 1 + info_c => set(&mut p, think_o, prior.grammar),
                    s if s == 1 + think_o => {
                        set(&mut p, think_c, prior.think_stop);
                        for t in vocab.operator_offset()..vocab.answer_offset() {
                            set(&mut p, t, prior.think_word);
                        }
                    }
                    s if s == 1 + think_c => set(&mut p, ans_o, prior.grammar),
                    s if s == 1 + ans_o => {
                        set(&mut p, ans_c, 0.0);
                        for t in vocab.answer_offset()..shape.vocab {
                            set(&mut p, t, prior.answer_token);
                        }
                    }
                    s if s == 1 + ans_c => set(&mut p, END_TOKEN, prior.grammar),
                    _ => {}
                }
            }
        }
        for t in vocab.answer_offset()..shape.vocab {
            let f = shape.last_feature(Some(t));
            *p.w_mut(f, ans_c) = prior.grammar + 1.0;
        }
        for t in 0..shape.vocab {
            if !matches!(vocab.kind(t), TokenKind::Tag(_) | TokenKind::End) {
                let f = shape.bag_feature(t);
                *p.w_mut(f, t) = prior.repeat_penalty;
            }
        }
        for j in 0..k {
            for s in 0..v {
                let f = shape.context_off() + layout.image_feature(j, s);
                *p.w_mut(f, vocab.attr_token(j, s)) = prior.perceive;
            }
        }

        p.add_task_prior(prior, &vocab, &layout);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lin = shape.u_off();
        for x in &mut p.data[..lin] {
            *x += prior.noise * (2.0 * rng.gen::<f64>() - 1.0);
        }
        // Hidden units start small and random so their gradients are not
        // all identical; the output layer starts at zero.
        let scale = 0.1;
        for x in &mut p.data[lin..shape.w2_off()] {
            *x = scale * (2.0 * rng.gen::<f64>() - 1.0);
        }
        p
    }
}

impl PolicyParams {
    /// Answer-type knowledge and reading of written attribute tokens.
    fn add_task_prior(&mut self, prior: &PriorConfig, vocab: &Vocab, layout: &FeatureLayout) {
        use crate::env::Template;
        let shape = self.shape();
        let (k, v) = (self.k, self.v);
        let ans = vocab.answer_offset();
        let letter_tok = |s: usize| ans + s;
        let (yes, no) = (ans + v, ans + v + 1);
        let digit = |c: usize| ans + v + 2 + c;
        let ctx = |f: usize| shape.context_off() + f;
        let attr = |j: usize, s: usize| vocab.attr_token(j, s) - shape.attr_offset;
        let r = prior.reading;

        for s in 0..v {
            *self.w_mut(ctx(layout.template_feature(Template::Lookup)), letter_tok(s)) += prior.answer_kind;
        }
        for t in [yes, no] {
            *self.w_mut(ctx(layout.template_feature(Template::Compare)), t) += prior.answer_kind;
        }
        for c in 0..=k {
            // count answers also carry the quadratic term of the reading rule
            *self.w_mut(ctx(layout.template_feature(Template::Count)), digit(c)) +=
                prior.answer_kind - r * (c * c) as f64 / 2.0;
        }
        let mid = (v as f64 - 1.0) / 2.0;
        for j in 0..k {
            for s in 0..v {
                let a = attr(j, s);
                // lookup: the letter written for the queried slot
                let f = shape.gated_feature(layout.first_slot_feature(j), a);
                *self.w_mut(f, letter_tok(s)) += 2.0 * r;
                // compare: later letter in the first slot favours "yes"
                let d = r * (s as f64 - mid);
                *self.w_mut(f, yes) += d;
                *self.w_mut(f, no) -= d;
                let f2 = shape.gated_feature(layout.second_slot_feature(j), a);
                *self.w_mut(f2, yes) -= d;
                *self.w_mut(f2, no) += d;
                // count: every written slot holding the asked letter adds one
                let fc = shape.gated_feature(layout.letter_feature(s), a);
                for c in 0..=k {
                    *self.w_mut(fc, digit(c)) += r * c as f64;
                }
            }
        }
    }
}

/// `params += learning_rate * gradient` (gradient ascent on the objective).
pub fn apply_update(params: &mut PolicyParams, gradient: &[f64], learning_rate: f64) -> Result<(), PolicyError> {
    if gradient.len() != params.data.len() {
        return Err(PolicyError::ShapeMismatch {
            expected: params.data.len(),
            got: gradient.len(),
        });
    }
    for (p, g) in params.data.iter_mut().zip(gradient) {
        *p += learning_rate * g;
    }
    Ok(())
}

/// Frozen copy used as the old or reference policy.
pub type PolicySnapshot = PolicyParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_tokens: usize,
    pub greedy: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.9,
            max_tokens: 32,
            greedy: false,
        }
    }
}

/// Decoder state while walking a token sequence.
struct Cursor<'a> {
    p: &'a PolicyParams,
    shape: PolicyShape,
    mode: FormatMode,
    gates: &'a [usize],
    /// Logits and hidden pre-activations from features that stay on.
    persistent: Vec<f64>,
    persistent_h: Vec<f64>,
    in_bag: Vec<bool>,
    state: usize,
    last: Option<usize>,
}

impl<'a> Cursor<'a> {
    fn new(p: &'a PolicyParams, mode: FormatMode, ctx: &'a ContextFeatures) -> Result<(Self, Vec<usize>), PolicyError> {
        let shape = p.shape();
        if ctx.dim != shape.context_dim {
            return Err(PolicyError::ContextMismatch {
                expected: shape.context_dim,
                got: ctx.dim,
            });
        }
        let mut c = Cursor {
            p,
            shape,
            mode,
            gates: &ctx.gates,
            persistent: vec![0.0; shape.vocab],
            persistent_h: vec![0.0; shape.hidden],
            in_bag: vec![false; shape.vocab],
            state: 0,
            last: None,
        };
        let mut static_features = vec![shape.mode_feature(mode)];
        static_features.extend(ctx.active.iter().map(|&i| shape.context_off() + i));
        for &f in &static_features {
            c.add_persistent(f);
        }
        Ok((c, static_features))
    }

    fn add_persistent(&mut self, f: usize) {
        let (vocab, hidden) = (self.shape.vocab, self.shape.hidden);
        let row = &self.p.data[f * vocab..(f + 1) * vocab];
        self.persistent.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        if hidden > 0 {
            let off = self.shape.u_off() + f * hidden;
            let row = &self.p.data[off..off + hidden];
            self.persistent_h.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }

    fn transient_features(&self) -> [usize; 2] {
        [
            self.shape.state_feature(self.mode, self.state),
            self.shape.last_feature(self.last),
        ]
    }

    /// Logits at the current step at temperature 1, and the hidden activations.
    fn logits(&self) -> (Vec<f64>, Vec<f64>) {
        let (vocab, hidden) = (self.shape.vocab, self.shape.hidden);
        let mut logits = self.persistent.clone();
        let mut pre = self.persistent_h.clone();
        for f in self.transient_features() {
            let row = &self.p.data[f * vocab..(f + 1) * vocab];
            logits.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            if hidden > 0 {
                let off = self.shape.u_off() + f * hidden;
                pre.iter_mut().zip(&self.p.data[off..off + hidden]).for_each(|(a, b)| *a += b);
            }
        }
        let h: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
        if hidden > 0 {
            let w2 = self.shape.w2_off();
            for (j, hj) in h.iter().enumerate() {
                let row = &self.p.data[w2 + j * vocab..w2 + (j + 1) * vocab];
                logits.iter_mut().zip(row).for_each(|(a, b)| *a += hj * b);
            }
        }
        (logits, h)
    }

    /// Advances past `token`; returns features that switched on.
    fn push(&mut self, token: usize) -> Vec<usize> {
        let mut fresh = Vec::new();
        if !self.in_bag[token] {
            self.in_bag[token] = true;
            fresh.push(self.shape.bag_feature(token));
            if (self.shape.attr_offset..self.shape.attr_offset + self.shape.num_attr_tokens).contains(&token) {
                let attr = token - self.shape.attr_offset;
                for &g in self.gates {
                    fresh.push(self.shape.gated_feature(g, attr));
                }
            }
        }
        for &f in &fresh {
            self.add_persistent(f);
        }
        if token < END_TOKEN {
            self.state = token + 1;
        }
        self.last = Some(token);
        fresh
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

fn check_tokens(shape: &PolicyShape, tokens: &[usize]) -> Result<(), PolicyError> {
    match tokens.iter().find(|&&t| t >= shape.vocab) {
        Some(&t) => Err(PolicyError::BadToken(t)),
        None => Ok(()),
    }
}

/// Samples a sequence; generation stops after the end token or `max_tokens`.
pub fn sample_sequence(
    params: &PolicyParams,
    mode: FormatMode,
    ctx: &ContextFeatures,
    cfg: &GenerationConfig,
    rng_seed: u64,
) -> Result<Vec<usize>, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (mut cur, _) = Cursor::new(params, mode, ctx)?;
    let mut out = Vec::new();
    while out.len() < cfg.max_tokens {
        let (logits, _) = cur.logits();
        let token = if cfg.greedy {
            // first maximum wins ties
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
            let logp = log_softmax(&scaled);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = logp.len() - 1;
            for (i, lp) in logp.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        out.push(token);
        if token == END_TOKEN {
            break;
        }
        cur.push(token);
    }
    Ok(out)
}

/// Per-token log-probabilities of `tokens` at temperature 1.
pub fn logprob_sequence(
    params: &PolicyParams,
    mode: FormatMode,
    ctx: &ContextFeatures,
    tokens: &[usize],
) -> Result<Vec<f64>, PolicyError> {
    let (mut cur, _) = Cursor::new(params, mode, ctx)?;
    check_tokens(&cur.shape, tokens)?;
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let (logits, _) = cur.logits();
        out.push(log_softmax(&logits)[t]);
        cur.push(t);
    }
    Ok(out)
}

/// Adds `coeff[t] * d logp(tokens[t]) / d params` to `grad`.
fn accumulate_logprob_grad(
    params: &PolicyParams,
    mode: FormatMode,
    ctx: &ContextFeatures,
    tokens: &[usize],
    coeff: &[f64],
    grad: &mut [f64],
) -> Result<(), PolicyError> {
    let (mut cur, static_features) = Cursor::new(params, mode, ctx)?;
    let shape = cur.shape;
    check_tokens(&shape, tokens)?;
    let (vocab, hidden) = (shape.vocab, shape.hidden);
    let (u_off, w2_off) = (shape.u_off(), shape.w2_off());
    // Running sums of the logit and hidden-preactivation gradients; a
    // feature switched on at step s collects total minus the sum at s.
    let mut sum_g = vec![0.0; vocab];
    let mut sum_gh = vec![0.0; hidden];
    let mut opened: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();

    for (&t, &c) in tokens.iter().zip(coeff) {
        let (logits, h) = cur.logits();
        let logp = log_softmax(&logits);
        let mut g: Vec<f64> = logp.iter().map(|lp| -c * lp.exp()).collect();
        g[t] += c;
        let mut gh = vec![0.0; hidden];
        for j in 0..hidden {
            let row = &params.data[w2_off + j * vocab..w2_off + (j + 1) * vocab];
            let dh: f64 = row.iter().zip(&g).map(|(w, x)| w * x).sum();
            gh[j] = (1.0 - h[j] * h[j]) * dh;
            let grow = &mut grad[w2_off + j * vocab..w2_off + (j + 1) * vocab];
            grow.iter_mut().zip(&g).for_each(|(a, x)| *a += h[j] * x);
        }
        for f in cur.transient_features() {
            grad[f * vocab..(f + 1) * vocab].iter_mut().zip(&g).for_each(|(a, x)| *a += x);
            grad[u_off + f * hidden..u_off + (f + 1) * hidden]
                .iter_mut()
                .zip(&gh)
                .for_each(|(a, x)| *a += x);
        }
        sum_g.iter_mut().zip(&g).for_each(|(a, x)| *a += x);
        sum_gh.iter_mut().zip(&gh).for_each(|(a, x)| *a += x);
        for f in cur.push(t) {
            opened.push((f, sum_g.clone(), sum_gh.clone()));
        }
    }
    for f in static_features {
        grad[f * vocab..(f + 1) * vocab].iter_mut().zip(&sum_g).for_each(|(a, x)| *a += x);
        grad[u_off + f * hidden..u_off + (f + 1) * hidden]
            .iter_mut()
            .zip(&sum_gh)
            .for_each(|(a, x)| *a += x);
    }
    for (f, before, before_h) in opened {
        for a in 0..vocab {
            grad[f * vocab + a] += sum_g[a] - before[a];
        }
        for j in 0..hidden {
            grad[u_off + f * hidden + j] += sum_gh[j] - before_h[j];
        }
    }
    Ok(())
}

/// One sampled completion with its old- and reference-policy log-probs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
}

/// The `n` completions of one prompt with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task_id: String,
    pub mode: FormatMode,
    pub context: ContextFeatures,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

fn group_logprobs(params: &PolicyParams, group: &RolloutGroup) -> Result<Vec<Vec<f64>>, PolicyError> {
    group
        .rollouts
        .iter()
        .map(|r| logprob_sequence(params, group.mode, &group.context, &r.tokens))
        .collect()
}

fn seq_views<'a>(group: &'a RolloutGroup, theta: &'a [Vec<f64>]) -> Vec<SequenceLogProbs<'a>> {
    group
        .rollouts
        .iter()
        .zip(theta)
        .map(|(r, th)| SequenceLogProbs {
            theta: th,
            old: &r.logp_old,
            reference: &r.logp_ref,
        })
        .collect()
}

/// Mean over groups of the clipped GRPO objective.
pub fn surrogate_objective(
    params: &PolicyParams,
    groups: &[RolloutGroup],
    clip: &ClipConfig,
    beta_hat: f64,
) -> Result<f64, PolicyError> {
    if groups.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for g in groups {
        let theta = group_logprobs(params, g)?;
        total += clipped_surrogate(&seq_views(g, &theta), &g.advantages, clip, beta_hat)?;
    }
    Ok(total / groups.len() as f64)
}

/// Objective value and gradient of one group.
pub fn group_gradient(
    params: &PolicyParams,
    group: &RolloutGroup,
    clip: &ClipConfig,
    beta_hat: f64,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let theta = group_logprobs(params, group)?;
    let (value, coeffs) = clipped_surrogate_with_grad(&seq_views(group, &theta), &group.advantages, clip, beta_hat)?;
    let mut grad = vec![0.0; params.data.len()];
    for (r, c) in group.rollouts.iter().zip(&coeffs) {
        accumulate_logprob_grad(params, group.mode, &group.context, &r.tokens, c, &mut grad)?;
    }
    Ok((value, grad))
}

/// Objective and its exact gradient, averaged over groups. Per-group
/// results are summed in group order whatever the execution strategy.
pub fn objective_gradient(
    params: &PolicyParams,
    groups: &[RolloutGroup],
    clip: &ClipConfig,
    beta_hat: f64,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let per_group: Vec<Result<(f64, Vec<f64>), PolicyError>> =
        crate::exec::map_indexed(groups.len(), |i| group_gradient(params, &groups[i], clip, beta_hat));
    let mut value = 0.0;
    let mut grad = vec![0.0; params.data.len()];
    for r in per_group {
        let (v, g) = r?;
        value += v;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    if !groups.is_empty() {
        let inv = 1.0 / groups.len() as f64;
        value *= inv;
        grad.iter_mut().for_each(|x| *x *= inv);
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub coordinates_checked: usize,
    pub max_relative_error: f64,
    pub worst_instance: usize,
    /// Instances where at least one ratio sat on the clipped branch.
    pub clip_active_instances: usize,
    pub per_sequence_instances: usize,
    pub zero_beta_instances: usize,
}

/// Whether any term of `groups` takes the clipped (zero-gradient) branch.
fn any_clip_active(live: &PolicyParams, groups: &[RolloutGroup], clip: &ClipConfig) -> Result<(bool, bool), PolicyError> {
    let (lo, hi) = (1.0 - clip.epsilon, 1.0 + clip.epsilon);
    let mut active = false;
    let mut near_kink = false;
    for g in groups {
        let theta = group_logprobs(live, g)?;
        for ((r, th), &a) in g.rollouts.iter().zip(&theta).zip(&g.advantages) {
            let ratios: Vec<f64> = match clip.ratio_level {
                crate::grpo::RatioLevel::PerToken => th.iter().zip(&r.logp_old).map(|(x, y)| (x - y).exp()).collect(),
                crate::grpo::RatioLevel::PerSequence => {
                    vec![(th.iter().sum::<f64>() - r.logp_old.iter().sum::<f64>()).exp()]
                }
            };
            for ratio in ratios {
                near_kink |= (ratio - lo).abs() < 1e-3 || (ratio - hi).abs() < 1e-3;
                active |= (a > 0.0 && ratio > hi) || (a < 0.0 && ratio < lo);
            }
        }
    }
    Ok((active, near_kink))
}

/// Compares [`objective_gradient`] with central finite differences of
/// [`surrogate_objective`] on random instances. The relative error of an
/// instance is `|g - fd| / max(|g|, |fd|)` over the sampled coordinates.
///
/// Instances cycle through beta in {0, 0.04}, both ratio levels, and a
/// live policy close to (clip inactive) or far from (clip active) the old one.
pub fn gradient_check(instances: usize, step: f64, hidden: usize, seed: u64) -> Result<GradCheckReport, PolicyError> {
    use crate::env::{generate_split, task_context_features, EnvConfig};
    use crate::grpo::RatioLevel;
    let env_cfg = EnvConfig {
        train_size: 16,
        test_size: 1,
        rng_seed: seed,
        ..EnvConfig::default()
    };
    let (tasks, _) = generate_split(&env_cfg).expect("default env config is valid");
    let (k, v) = (env_cfg.num_attributes, env_cfg.values_per_attribute);
    let layout = FeatureLayout::new(k, v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut report = GradCheckReport {
        instances,
        coordinates_checked: 0,
        max_relative_error: 0.0,
        worst_instance: 0,
        clip_active_instances: 0,
        per_sequence_instances: 0,
        zero_beta_instances: 0,
    };
    let gen = GenerationConfig {
        temperature: 1.0,
        max_tokens: 12,
        greedy: false,
    };
    let perturb = |base: &PolicyParams, scale: f64, rng: &mut ChaCha8Rng| {
        let mut p = base.clone();
        p.data.iter_mut().for_each(|x| *x += scale * (2.0 * rng.gen::<f64>() - 1.0));
        p
    };
    let mut inst = 0;
    while inst < instances {
        let beta_hat = if inst % 2 == 0 { 0.0 } else { 0.04 };
        let level = if (inst / 2) % 2 == 0 { RatioLevel::PerToken } else { RatioLevel::PerSequence };
        let want_active = (inst / 4) % 2 == 1;
        let clip = ClipConfig::new(crate::grpo::DEFAULT_CLIP_EPSILON, level)?;
        let base = PolicyParams::pretrained(k, v, hidden, &PriorConfig::default(), rng.gen());
        let old = perturb(&base, 0.05, &mut rng);
        let reference = perturb(&base, 0.3, &mut rng);
        let live = perturb(&old, if want_active { 0.3 } else { 0.002 }, &mut rng);
        let mut groups = Vec::new();
        for g in 0..2 {
            let task = &tasks[rng.gen_range(0..tasks.len())];
            let mode = if g == 0 { FormatMode::CaptionReasonAnswer } else { FormatMode::ReasonAnswer };
            let ctx = task_context_features(task, &layout, true);
            let mut rollouts = Vec::new();
            for _ in 0..3 {
                let tokens = sample_sequence(&old, mode, &ctx, &gen, rng.gen())?;
                rollouts.push(Rollout {
                    logp_old: logprob_sequence(&old, mode, &ctx, &tokens)?,
                    logp_ref: logprob_sequence(&reference, mode, &ctx, &tokens)?,
                    tokens,
                });
            }
            let advantages: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
            groups.push(RolloutGroup {
                task_id: task.task_id.clone(),
                mode,
                context: ctx,
                rollouts,
                rewards: advantages.clone(),
                advantages,
            });
        }
        // The objective is not differentiable where a ratio sits on a clip
        // boundary; redraw such instances, and those missing the regime.
        let (active, near_kink) = any_clip_active(&live, &groups, &clip)?;
        if near_kink || active != want_active {
            continue;
        }
        let (_, grad) = objective_gradient(&live, &groups, &clip, beta_hat)?;
        let coords = touched_coordinates(&live, &groups, &mut rng, 300);
        let mut diff2 = 0.0;
        let mut g2 = 0.0;
        let mut fd2 = 0.0;
        let mut probe = live.clone();
        for &i in &coords {
            let orig = probe.data[i];
            probe.data[i] = orig + step;
            let plus = surrogate_objective(&probe, &groups, &clip, beta_hat)?;
            probe.data[i] = orig - step;
            let minus = surrogate_objective(&probe, &groups, &clip, beta_hat)?;
            probe.data[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            diff2 += (grad[i] - fd).powi(2);
            g2 += grad[i].powi(2);
            fd2 += fd.powi(2);
        }
        let rel = diff2.sqrt() / g2.sqrt().max(fd2.sqrt()).max(1e-300);
        report.coordinates_checked += coords.len();
        report.clip_active_instances += usize::from(active);
        report.per_sequence_instances += usize::from(level == RatioLevel::PerSequence);
        report.zero_beta_instances += usize::from(beta_hat == 0.0);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_instance = inst;
        }
        inst += 1;
    }
    Ok(report)
}

/// A random sample of parameter indices whose input feature is active
/// somewhere in `groups`, plus a few arbitrary ones.
fn touched_coordinates(params: &PolicyParams, groups: &[RolloutGroup], rng: &mut ChaCha8Rng, cap: usize) -> Vec<usize> {
    let shape = params.shape();
    let mut features = std::collections::BTreeSet::new();
    for g in groups {
        for r in &g.rollouts {
            let Ok((mut cur, stat)) = Cursor::new(params, g.mode, &g.context) else { continue };
            features.extend(stat);
            for &t in &r.tokens {
                features.extend(cur.transient_features());
                features.extend(cur.push(t));
            }
        }
    }
    let mut coords = Vec::new();
    for &f in &features {
        coords.extend((0..shape.vocab).map(|a| f * shape.vocab + a));
        coords.extend((0..shape.hidden).map(|j| shape.u_off() + f * shape.hidden + j));
    }
    coords.extend(shape.w2_off()..shape.num_params());
    let mut picked: Vec<usize> = (0..cap.min(coords.len()))
        .map(|_| coords[rng.gen_range(0..coords.len())])
        .collect();
    picked.extend((0..10).map(|_| rng.gen_range(0..shape.num_params())));
    picked.sort_unstable();
    picked.dedup();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_split, task_context_features, EnvConfig};
    use crate::structured::{format_reward, parse_response};

    fn setup() -> (Vec<crate::env::SyntheticTask>, FeatureLayout, Vocab) {
        let (train, _) = generate_split(&EnvConfig::default()).unwrap();
        (train, FeatureLayout::new(4, 4), Vocab::new(4, 4))
    }

    #[test]
    fn uniform_first_token() {
        let (tasks, layout, vocab) = setup();
        let p = PolicyParams::zeros(4, 4, 0);
        let ctx = task_context_features(&tasks[0], &layout, true);
        let lp = logprob_sequence(&p, FormatMode::ReasonAnswer, &ctx, &[2]).unwrap();
        assert!((lp[0] + (vocab.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_is_argmax() {
        let (tasks, layout, _) = setup();
        let p = PolicyParams::pretrained(4, 4, 0, &PriorConfig::default(), 3);
        let ctx = task_context_features(&tasks[1], &layout, true);
        let greedy = GenerationConfig {
            greedy: true,
            ..GenerationConfig::default()
        };
        let cold = GenerationConfig {
            temperature: 1e-6,
            ..GenerationConfig::default()
        };
        let a = sample_sequence(&p, FormatMode::CaptionReasonAnswer, &ctx, &greedy, 0).unwrap();
        for seed in 0..5 {
            let b = sample_sequence(&p, FormatMode::CaptionReasonAnswer, &ctx, &cold, seed).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let (tasks, layout, _) = setup();
        let p = PolicyParams::pretrained(4, 4, 2, &PriorConfig::default(), 3);
        let ctx = task_context_features(&tasks[2], &layout, true);
        let cfg = GenerationConfig::default();
        let a = sample_sequence(&p, FormatMode::CaptionReasonAnswer, &ctx, &cfg, 42).unwrap();
        let b = sample_sequence(&p, FormatMode::CaptionReasonAnswer, &ctx, &cfg, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pretrained_mostly_follows_format() {
        let (tasks, layout, vocab) = setup();
        let p = PolicyParams::pretrained(4, 4, 0, &PriorConfig::default(), 1);
        for mode in [FormatMode::ReasonAnswer, FormatMode::CaptionReasonAnswer] {
            let mut ok = 0;
            for (i, t) in tasks.iter().take(200).enumerate() {
                let ctx = task_context_features(t, &layout, true);
                let toks = sample_sequence(&p, mode, &ctx, &GenerationConfig::default(), i as u64).unwrap();
                ok += format_reward(&vocab.render(&toks), mode, false) as usize;
            }
            assert!(ok >= 150, "{mode}: {ok}/200");
        }
    }

    #[test]
    fn pretrained_captions_are_partial_and_truthful() {
        let (tasks, layout, vocab) = setup();
        let p = PolicyParams::pretrained(4, 4, 0, &PriorConfig::default(), 1);
        let mut lens = Vec::new();
        for (i, t) in tasks.iter().take(200).enumerate() {
            let ctx = task_context_features(t, &layout, true);
            let toks = sample_sequence(&p, FormatMode::CaptionReasonAnswer, &ctx, &GenerationConfig::default(), i as u64).unwrap();
            if let Ok(r) = parse_response(&vocab.render(&toks), FormatMode::CaptionReasonAnswer) {
                let info = r.info.unwrap();
                let truth = t.image_ref();
                let mentions: Vec<&str> = info.split_whitespace().filter(|w| w.starts_with("slot")).collect();
                let true_count = mentions.iter().filter(|m| truth.split_whitespace().any(|x| x == **m)).count();
                lens.push((mentions.len(), true_count));
            }
        }
        let n = lens.len() as f64;
        let full = lens.iter().filter(|(m, _)| *m >= 4).count() as f64 / n;
        let truthful = lens.iter().map(|(_, t)| *t).sum::<usize>() as f64 / lens.iter().map(|(m, _)| *m).sum::<usize>().max(1) as f64;
        assert!(full > 0.05 && full < 0.6, "full-caption rate {full}");
        assert!(truthful > 0.85, "truthful rate {truthful}");
    }

    #[test]
    fn zero_advantage_zero_beta_gives_zero_gradient() {
        let (tasks, layout, _) = setup();
        let p = PolicyParams::pretrained(4, 4, 2, &PriorConfig::default(), 1);
        let ctx = task_context_features(&tasks[0], &layout, true);
        let mode = FormatMode::CaptionReasonAnswer;
        let rollouts: Vec<Rollout> = (0..4)
            .map(|s| {
                let tokens = sample_sequence(&p, mode, &ctx, &GenerationConfig::default(), s).unwrap();
                let lp = logprob_sequence(&p, mode, &ctx, &tokens).unwrap();
                Rollout {
                    tokens,
                    logp_old: lp.clone(),
                    logp_ref: lp,
                }
            })
            .collect();
        let group = RolloutGroup {
            task_id: "t".into(),
            mode,
            context: ctx,
            rollouts,
            rewards: vec![1.0; 4],
            advantages: vec![0.0; 4],
        };
        let (_, g) = objective_gradient(&p, &[group], &ClipConfig::default(), 0.0).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for hidden in [0, 3] {
            let r = gradient_check(8, 1e-5, hidden, 7 + hidden as u64).unwrap();
            assert!(r.max_relative_error < 1e-4, "hidden={hidden}: {r:?}");
            assert_eq!((r.clip_active_instances, r.per_sequence_instances, r.zero_beta_instances), (4, 4, 4));
        }
    }

    #[test]
    fn update_rejects_wrong_shape() {
        let mut p = PolicyParams::zeros(4, 4, 0);
        assert!(apply_update(&mut p, &[1.0], 0.1).is_err());
        let g = vec![1.0; p.data.len()];
        apply_update(&mut p, &g, 0.5).unwrap();
        assert!(p.data.iter().all(|&x| x == 0.5));
    }
}
