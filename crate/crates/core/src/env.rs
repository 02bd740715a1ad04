//! Seeded synthetic visual-QA tasks built to expose shortcut learning.
//!
//! An "image" is `k` slots, each holding one of `v` letters. Questions come
//! from three templates:
//!
//! * lookup: `What letter is in slot 2?`
//! * compare: `Is the letter in slot 0 later in the alphabet than the letter in slot 3?`
//! * count: `How many slots hold the letter C?`
//!
//! Easy tasks append a hint token to the question that equals the gold answer
//! with probability `rho`, so they can be answered from text alone. Hard tasks
//! carry no hint. The splits differ in which templates their hard tasks use:
//! by default hard training questions are lookups, which the policy can answer
//! by perceiving the single queried slot, while hard test questions are
//! compositional and need several attributes at once. Reading several
//! attributes is only possible through tokens the policy has written itself,
//! i.e. through a caption.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{Judge, JudgeError};
use crate::rewards::{Answer, AnswerKind};
use crate::structured::TAG_LITERALS;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid env config: {0}")]
    InvalidConfig(String),
    #[error("unrecognised question: {0}")]
    UnknownQuestion(String),
    #[error("invalid attribute reference `{0}`")]
    BadAttribute(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    Lookup,
    Compare,
    Count,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Lookup, Template::Compare, Template::Count];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Template::Lookup => "lookup",
            Template::Compare => "compare",
            Template::Count => "count",
        }
    }

    pub fn parse_name(s: &str) -> Option<Self> {
        Template::ALL.into_iter().find(|t| t.as_str() == s.trim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub easy_fraction_train: f64,
    pub easy_fraction_test: f64,
    pub shortcut_correlation: f64,
    pub rng_seed: u64,
    /// Templates used by uncued training questions.
    pub train_hard_templates: Vec<Template>,
    /// Templates used by uncued test questions.
    pub test_hard_templates: Vec<Template>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            num_attributes: 4,
            values_per_attribute: 4,
            train_size: 500,
            test_size: 200,
            easy_fraction_train: 0.8,
            easy_fraction_test: 0.2,
            shortcut_correlation: 0.95,
            rng_seed: 0,
            train_hard_templates: vec![Template::Lookup],
            test_hard_templates: vec![Template::Compare, Template::Count],
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.num_attributes < 2 {
            return bad("num_attributes must be at least 2".into());
        }
        if !(2..=26).contains(&self.values_per_attribute) {
            return bad("values_per_attribute must be in 2..=26".into());
        }
        if self.train_size < 1 || self.test_size < 1 {
            return bad("split sizes must be at least 1".into());
        }
        for (name, f) in [
            ("easy_fraction_train", self.easy_fraction_train),
            ("easy_fraction_test", self.easy_fraction_test),
            ("shortcut_correlation", self.shortcut_correlation),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} is outside [0, 1]"));
            }
        }
        if self.train_hard_templates.is_empty() || self.test_hard_templates.is_empty() {
            return bad("hard template lists must not be empty".into());
        }
        Ok(())
    }
}

pub fn letter(symbol: usize) -> char {
    (b'A' + symbol as u8) as char
}

fn parse_letter(s: &str, v: usize) -> Option<usize> {
    let mut chars = s.chars();
    let c = chars.next()?;
    if chars.next().is_some() || !c.is_ascii_uppercase() {
        return None;
    }
    let idx = (c as u8 - b'A') as usize;
    (idx < v).then_some(idx)
}

/// Template instance: which slots/letter the question refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionKind {
    Lookup { slot: usize },
    Compare { first: usize, second: usize },
    Count { symbol: usize },
}

impl QuestionKind {
    pub fn template(&self) -> Template {
        match self {
            QuestionKind::Lookup { .. } => Template::Lookup,
            QuestionKind::Compare { .. } => Template::Compare,
            QuestionKind::Count { .. } => Template::Count,
        }
    }

    /// Slots whose values the answer depends on.
    pub fn required_slots(&self, k: usize) -> Vec<usize> {
        match *self {
            QuestionKind::Lookup { slot } => vec![slot],
            QuestionKind::Compare { first, second } => vec![first, second],
            QuestionKind::Count { .. } => (0..k).collect(),
        }
    }

    /// Gold answer text given slot values (indexed by slot).
    pub fn evaluate(&self, values: &[usize]) -> String {
        match *self {
            QuestionKind::Lookup { slot } => letter(values[slot]).to_string(),
            QuestionKind::Compare { first, second } => {
                if values[first] > values[second] { "yes" } else { "no" }.to_owned()
            }
            QuestionKind::Count { symbol } => values.iter().filter(|&&x| x == symbol).count().to_string(),
        }
    }

    /// Answer labels the template can produce.
    pub fn choices(&self, k: usize, v: usize) -> Vec<String> {
        match self {
            QuestionKind::Lookup { .. } => (0..v).map(|s| letter(s).to_string()).collect(),
            QuestionKind::Compare { .. } => vec!["yes".to_owned(), "no".to_owned()],
            QuestionKind::Count { .. } => (0..=k).map(|c| c.to_string()).collect(),
        }
    }
}

/// A question plus its optional hint token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub kind: QuestionKind,
    pub cue: Option<String>,
}

const LOOKUP_PREFIX: &str = "What letter is in slot ";
const COMPARE_PREFIX: &str = "Is the letter in slot ";
const COMPARE_MID: &str = " later in the alphabet than the letter in slot ";
const COUNT_PREFIX: &str = "How many slots hold the letter ";
const HINT_PREFIX: &str = " Hint: ";

impl fmt::Display for Question {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            QuestionKind::Lookup { slot } => write!(f, "{LOOKUP_PREFIX}{slot}?")?,
            QuestionKind::Compare { first, second } => write!(f, "{COMPARE_PREFIX}{first}{COMPARE_MID}{second}?")?,
            QuestionKind::Count { symbol } => write!(f, "{COUNT_PREFIX}{}?", letter(symbol))?,
        }
        if let Some(cue) = &self.cue {
            write!(f, "{HINT_PREFIX}{cue}.")?;
        }
        Ok(())
    }
}

impl Question {
    pub fn parse(text: &str, k: usize, v: usize) -> Result<Self, EnvError> {
        let unknown = || EnvError::UnknownQuestion(text.to_owned());
        let (body, cue) = match text.find(HINT_PREFIX) {
            Some(at) => {
                let hint = text[at + HINT_PREFIX.len()..].strip_suffix('.').ok_or_else(unknown)?;
                (&text[..at], Some(hint.to_owned()))
            }
            None => (text, None),
        };
        let body = body.strip_suffix('?').ok_or_else(unknown)?;
        let slot = |s: &str| s.parse::<usize>().ok().filter(|&x| x < k).ok_or_else(unknown);
        let kind = if let Some(rest) = body.strip_prefix(LOOKUP_PREFIX) {
            QuestionKind::Lookup { slot: slot(rest)? }
        } else if let Some(rest) = body.strip_prefix(COMPARE_PREFIX) {
            let (a, b) = rest.split_once(COMPARE_MID).ok_or_else(unknown)?;
            let (first, second) = (slot(a)?, slot(b)?);
            if first == second {
                return Err(unknown());
            }
            QuestionKind::Compare { first, second }
        } else if let Some(rest) = body.strip_prefix(COUNT_PREFIX) {
            QuestionKind::Count {
                symbol: parse_letter(rest, v).ok_or_else(unknown)?,
            }
        } else {
            return Err(unknown());
        };
        Ok(Question { kind, cue })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    /// Value (letter index) of every slot, indexed by slot.
    pub attributes: Vec<usize>,
    pub question: Question,
    pub gold: Answer,
    pub difficulty: Difficulty,
}

impl SyntheticTask {
    pub fn question_text(&self) -> String {
        self.question.to_string()
    }

    pub fn shortcut_cue(&self) -> Option<&str> {
        self.question.cue.as_deref()
    }

    /// Attribute map keyed by slot name, e.g. `slot0 -> "B"`.
    pub fn attribute_map(&self) -> BTreeMap<String, String> {
        self.attributes
            .iter()
            .enumerate()
            .map(|(j, &s)| (format!("slot{j}"), letter(s).to_string()))
            .collect()
    }

    /// `slot0=B slot1=A ...`, the image reference used in exported records.
    pub fn image_ref(&self) -> String {
        self.attributes
            .iter()
            .enumerate()
            .map(|(j, &s)| format!("slot{j}={}", letter(s)))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn gold_answer(kind: &QuestionKind, values: &[usize], k: usize, v: usize) -> Answer {
    let choices = kind.choices(k, v);
    Answer {
        kind: AnswerKind::MultiChoice,
        value: kind.evaluate(values),
        choices: Some(choices),
        numeric_tolerance: None,
    }
}

/// Rebuilds a task from its exported pieces.
pub fn task_from_parts(
    task_id: &str,
    question: &str,
    image_ref: &str,
    k: usize,
    v: usize,
) -> Result<SyntheticTask, EnvError> {
    let question = Question::parse(question, k, v)?;
    let mentions = parse_mentions(image_ref, k, v);
    if mentions.len() != k || image_ref.split_whitespace().count() != k {
        return Err(EnvError::BadAttribute(image_ref.to_owned()));
    }
    let attributes: Vec<usize> = (0..k).map(|j| mentions[&j]).collect();
    let gold = gold_answer(&question.kind, &attributes, k, v);
    let difficulty = if question.cue.is_some() { Difficulty::Easy } else { Difficulty::Hard };
    Ok(SyntheticTask {
        task_id: task_id.to_owned(),
        attributes,
        question,
        gold,
        difficulty,
    })
}

fn random_kind(rng: &mut ChaCha8Rng, template: Template, k: usize, v: usize) -> QuestionKind {
    match template {
        Template::Lookup => QuestionKind::Lookup { slot: rng.gen_range(0..k) },
        Template::Compare => {
            let first = rng.gen_range(0..k);
            let mut second = rng.gen_range(0..k - 1);
            if second >= first {
                second += 1;
            }
            QuestionKind::Compare { first, second }
        }
        Template::Count => QuestionKind::Count { symbol: rng.gen_range(0..v) },
    }
}

fn generate_tasks(
    cfg: &EnvConfig,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    size: usize,
    easy_fraction: f64,
    hard_templates: &[Template],
) -> Vec<SyntheticTask> {
    let (k, v) = (cfg.num_attributes, cfg.values_per_attribute);
    let num_easy = (easy_fraction * size as f64).round() as usize;
    let mut easy_flags: Vec<bool> = (0..size).map(|i| i < num_easy).collect();
    easy_flags.shuffle(rng);
    easy_flags
        .into_iter()
        .enumerate()
        .map(|(i, easy)| {
            let attributes: Vec<usize> = (0..k).map(|_| rng.gen_range(0..v)).collect();
            let template = if easy {
                Template::ALL[rng.gen_range(0..Template::ALL.len())]
            } else {
                hard_templates[rng.gen_range(0..hard_templates.len())]
            };
            let kind = random_kind(rng, template, k, v);
            let gold = gold_answer(&kind, &attributes, k, v);
            let cue = easy.then(|| {
                if rng.gen::<f64>() < cfg.shortcut_correlation {
                    gold.value.clone()
                } else {
                    let others: Vec<String> = kind.choices(k, v).into_iter().filter(|c| *c != gold.value).collect();
                    others[rng.gen_range(0..others.len())].clone()
                }
            });
            SyntheticTask {
                task_id: format!("{prefix}-{i:05}"),
                attributes,
                question: Question { kind, cue },
                gold,
                difficulty: if easy { Difficulty::Easy } else { Difficulty::Hard },
            }
        })
        .collect()
}

/// Deterministic train/test splits for `cfg`.
pub fn generate_split(cfg: &EnvConfig) -> Result<(Vec<SyntheticTask>, Vec<SyntheticTask>), EnvError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let train = generate_tasks(
        cfg,
        &mut rng,
        "train",
        cfg.train_size,
        cfg.easy_fraction_train,
        &cfg.train_hard_templates,
    );
    let test = generate_tasks(
        cfg,
        &mut rng,
        "test",
        cfg.test_size,
        cfg.easy_fraction_test,
        &cfg.test_hard_templates,
    );
    Ok((train, test))
}

/// Token ids of the policy vocabulary.
///
/// Layout: the six tag literals, the end token, one attribute token
/// `slot{j}={L}` per (slot, letter), a few operator words, then the answer
/// tokens (letters, `yes`/`no`, counts `0..=k`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    k: usize,
    v: usize,
    texts: Vec<String>,
}

pub const END_TOKEN: usize = 6;
pub const OPERATOR_WORDS: [&str; 4] = ["so", "and", "compare", "count"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Tag(usize),
    End,
    Attribute { slot: usize, symbol: usize },
    Operator,
    Answer,
}

impl Vocab {
    pub fn new(k: usize, v: usize) -> Self {
        let mut texts: Vec<String> = TAG_LITERALS.iter().map(|t| t.to_string()).collect();
        texts.push("<end>".to_owned());
        for j in 0..k {
            for s in 0..v {
                texts.push(format!("slot{j}={}", letter(s)));
            }
        }
        texts.extend(OPERATOR_WORDS.iter().map(|w| w.to_string()));
        texts.extend((0..v).map(|s| letter(s).to_string()));
        texts.push("yes".to_owned());
        texts.push("no".to_owned());
        texts.extend((0..=k).map(|c| c.to_string()));
        Vocab { k, v, texts }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn num_attributes(&self) -> usize {
        self.k
    }

    pub fn values_per_attribute(&self) -> usize {
        self.v
    }

    pub fn attr_offset(&self) -> usize {
        END_TOKEN + 1
    }

    pub fn num_attr_tokens(&self) -> usize {
        self.k * self.v
    }

    pub fn attr_token(&self, slot: usize, symbol: usize) -> usize {
        self.attr_offset() + slot * self.v + symbol
    }

    pub fn operator_offset(&self) -> usize {
        self.attr_offset() + self.k * self.v
    }

    pub fn answer_offset(&self) -> usize {
        self.operator_offset() + OPERATOR_WORDS.len()
    }

    pub fn num_answer_tokens(&self) -> usize {
        self.v + 2 + self.k + 1
    }

    pub fn kind(&self, id: usize) -> TokenKind {
        if id < END_TOKEN {
            TokenKind::Tag(id)
        } else if id == END_TOKEN {
            TokenKind::End
        } else if id < self.operator_offset() {
            let a = id - self.attr_offset();
            TokenKind::Attribute {
                slot: a / self.v,
                symbol: a % self.v,
            }
        } else if id < self.answer_offset() {
            TokenKind::Operator
        } else {
            TokenKind::Answer
        }
    }

    pub fn text(&self, id: usize) -> &str {
        &self.texts[id]
    }

    pub fn token_id(&self, text: &str) -> Option<usize> {
        self.texts.iter().position(|t| t == text)
    }

    /// Answer-token index (0-based within the answer block) of an answer label.
    pub fn answer_index(&self, label: &str) -> Option<usize> {
        let off = self.answer_offset();
        self.texts[off..].iter().position(|t| t == label)
    }

    /// Renders tokens as text: tags are written verbatim, other tokens are
    /// space separated inside their segment. Stops at the end token.
    pub fn render(&self, tokens: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_content = false;
        for &t in tokens {
            match self.kind(t) {
                TokenKind::End => break,
                TokenKind::Tag(_) => {
                    out.push_str(&self.texts[t]);
                    prev_content = false;
                }
                _ => {
                    if prev_content {
                        out.push(' ');
                    }
                    out.push_str(&self.texts[t]);
                    prev_content = true;
                }
            }
        }
        out
    }
}

/// `(slot, letter)` mentions in caption text; the first mention of a slot wins.
pub fn parse_mentions(text: &str, k: usize, v: usize) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for word in text.split_whitespace() {
        let Some(rest) = word.strip_prefix("slot") else { continue };
        let Some((j, s)) = rest.split_once('=') else { continue };
        let (Ok(j), Some(s)) = (j.parse::<usize>(), parse_letter(s, v)) else { continue };
        if j < k {
            out.entry(j).or_insert(s);
        }
    }
    out
}

/// Answers `question` from the attribute mentions alone. `Ok(None)` means
/// the mentions do not cover every slot the question needs.
pub fn oracle_answer(
    question: &str,
    mentions: &BTreeMap<usize, usize>,
    k: usize,
    v: usize,
) -> Result<Option<String>, EnvError> {
    let q = Question::parse(question, k, v)?;
    let required = q.kind.required_slots(k);
    if !required.iter().all(|j| mentions.contains_key(j)) {
        return Ok(None);
    }
    let mut values = vec![0; k];
    for (&j, &s) in mentions {
        values[j] = s;
    }
    Ok(Some(q.kind.evaluate(&values)))
}

/// Judge that reads attribute tokens out of the caption and answers exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleJudge {
    pub k: usize,
    pub v: usize,
}

impl Judge for OracleJudge {
    fn id(&self) -> &str {
        "oracle"
    }

    fn answer(&self, caption: &str, question: &str) -> Result<String, JudgeError> {
        let mentions = parse_mentions(caption, self.k, self.v);
        match oracle_answer(question, &mentions, self.k, self.v) {
            Ok(Some(a)) => Ok(a),
            Ok(None) => Err(JudgeError::Insufficient),
            Err(e) => Err(JudgeError::UnknownQuestion(e.to_string())),
        }
    }
}

/// Index layout of the task-level features seen by the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub k: usize,
    pub v: usize,
}

impl FeatureLayout {
    pub fn new(k: usize, v: usize) -> Self {
        FeatureLayout { k, v }
    }

    fn num_answers(&self) -> usize {
        self.v + 2 + self.k + 1
    }

    // [template | first slot | second slot | letter | cue present | cue answer | image | glimpse]
    fn first_slot_off(&self) -> usize {
        Template::ALL.len()
    }
    fn second_slot_off(&self) -> usize {
        self.first_slot_off() + self.k
    }
    fn letter_off(&self) -> usize {
        self.second_slot_off() + self.k
    }
    fn cue_present_off(&self) -> usize {
        self.letter_off() + self.v
    }
    fn cue_off(&self) -> usize {
        self.cue_present_off() + 1
    }
    pub fn image_off(&self) -> usize {
        self.cue_off() + self.num_answers()
    }
    pub fn glimpse_off(&self) -> usize {
        self.image_off() + self.k * self.v
    }

    pub fn context_dim(&self) -> usize {
        self.glimpse_off() + self.v
    }

    /// Question features that gate the policy's reading of its own tokens.
    pub fn gate_dim(&self) -> usize {
        self.cue_present_off()
    }

    pub fn template_feature(&self, t: Template) -> usize {
        t.index()
    }

    pub fn first_slot_feature(&self, slot: usize) -> usize {
        self.first_slot_off() + slot
    }

    pub fn second_slot_feature(&self, slot: usize) -> usize {
        self.second_slot_off() + slot
    }

    pub fn letter_feature(&self, symbol: usize) -> usize {
        self.letter_off() + symbol
    }

    pub fn cue_feature(&self, answer_index: usize) -> usize {
        self.cue_off() + answer_index
    }

    pub fn image_feature(&self, slot: usize, symbol: usize) -> usize {
        self.image_off() + slot * self.v + symbol
    }

    pub fn glimpse_feature(&self, symbol: usize) -> usize {
        self.glimpse_off() + symbol
    }
}

/// Sparse binary task features: `active` indexes into the context block,
/// `gates` lists the active question features (a subset of `active`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextFeatures {
    pub active: Vec<usize>,
    pub gates: Vec<usize>,
    pub dim: usize,
}

impl ContextFeatures {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for &i in &self.active {
            d[i] = 1.0;
        }
        d
    }
}

/// Question features are always present; attribute features (the "image")
/// only when `reveal_image` is set.
pub fn task_context_features(task: &SyntheticTask, layout: &FeatureLayout, reveal_image: bool) -> ContextFeatures {
    let mut gates = vec![layout.template_feature(task.question.kind.template())];
    match task.question.kind {
        QuestionKind::Lookup { slot } => gates.push(layout.first_slot_off() + slot),
        QuestionKind::Compare { first, second } => {
            gates.push(layout.first_slot_off() + first);
            gates.push(layout.second_slot_off() + second);
        }
        QuestionKind::Count { symbol } => gates.push(layout.letter_off() + symbol),
    }
    let mut active = gates.clone();
    if let Some(cue) = &task.question.cue {
        active.push(layout.cue_present_off());
        let vocab_answers = Vocab::new(layout.k, layout.v);
        if let Some(idx) = vocab_answers.answer_index(cue) {
            active.push(layout.cue_feature(idx));
        }
    }
    if reveal_image {
        for (j, &s) in task.attributes.iter().enumerate() {
            active.push(layout.image_feature(j, s));
        }
        if let QuestionKind::Lookup { slot } = task.question.kind {
            active.push(layout.glimpse_feature(task.attributes[slot]));
        }
    }
    ContextFeatures {
        active,
        gates,
        dim: layout.context_dim(),
    }
}

/// Prior over answer labels implied by the question template alone, with
/// every slot uniform and independent.
fn template_prior(kind: &QuestionKind, k: usize, v: usize) -> Vec<(String, f64)> {
    match kind {
        QuestionKind::Lookup { .. } => (0..v).map(|s| (letter(s).to_string(), 1.0 / v as f64)).collect(),
        QuestionKind::Compare { .. } => {
            let yes = (1.0 - 1.0 / v as f64) / 2.0;
            vec![("yes".to_owned(), yes), ("no".to_owned(), 1.0 - yes)]
        }
        QuestionKind::Count { .. } => {
            let p = 1.0 / v as f64;
            (0..=k)
                .map(|c| {
                    let binom = (0..c).fold(1.0, |acc, i| acc * (k - i) as f64 / (i + 1) as f64);
                    (c.to_string(), binom * p.powi(c as i32) * (1.0 - p).powi((k - c) as i32))
                })
                .collect()
        }
    }
}

/// Probability that the best text-only guess is right for this question.
pub fn text_only_bayes_probability(question: &Question, cfg: &EnvConfig) -> f64 {
    let (k, v) = (cfg.num_attributes, cfg.values_per_attribute);
    let prior = template_prior(&question.kind, k, v);
    match &question.cue {
        None => prior.iter().map(|(_, p)| *p).fold(0.0, f64::max),
        Some(cue) => {
            let m = prior.len() as f64;
            let rho = cfg.shortcut_correlation;
            let joint: Vec<f64> = prior
                .iter()
                .map(|(a, p)| p * if a == cue { rho } else { (1.0 - rho) / (m - 1.0) })
                .collect();
            let z: f64 = joint.iter().sum();
            joint.iter().fold(0.0, |acc: f64, &x| acc.max(x)) / z
        }
    }
}

/// Expected accuracy on `split` of the Bayes-optimal predictor that sees
/// only question text.
pub fn text_only_bayes_accuracy(split: &[SyntheticTask], cfg: &EnvConfig) -> f64 {
    if split.is_empty() {
        return 0.0;
    }
    split
        .iter()
        .map(|t| text_only_bayes_probability(&t.question, cfg))
        .sum::<f64>()
        / split.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::accuracy_reward;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn determinism_and_disjoint_ids() {
        let a = generate_split(&cfg()).unwrap();
        let b = generate_split(&cfg()).unwrap();
        assert_eq!(a, b);
        let train_ids: std::collections::HashSet<_> = a.0.iter().map(|t| &t.task_id).collect();
        assert!(a.1.iter().all(|t| !train_ids.contains(&t.task_id)));
        assert_eq!(a.0.len(), 500);
        assert_eq!(a.1.len(), 200);
        let easy_train = a.0.iter().filter(|t| t.difficulty == Difficulty::Easy).count();
        assert_eq!(easy_train, 400);
        let easy_test = a.1.iter().filter(|t| t.difficulty == Difficulty::Easy).count();
        assert_eq!(easy_test, 40);
    }

    #[test]
    fn all_easy_train_has_cues() {
        let c = EnvConfig {
            easy_fraction_train: 1.0,
            ..cfg()
        };
        let (train, _) = generate_split(&c).unwrap();
        assert!(train.iter().all(|t| t.shortcut_cue().is_some()));
    }

    #[test]
    fn perfect_cue() {
        let c = EnvConfig {
            shortcut_correlation: 1.0,
            ..cfg()
        };
        let (train, test) = generate_split(&c).unwrap();
        for t in train.iter().chain(&test).filter(|t| t.difficulty == Difficulty::Easy) {
            assert_eq!(t.shortcut_cue(), Some(t.gold.value.as_str()));
        }
    }

    #[test]
    fn hard_tasks_use_split_templates() {
        let (train, test) = generate_split(&cfg()).unwrap();
        for t in train.iter().filter(|t| t.difficulty == Difficulty::Hard) {
            assert_eq!(t.question.kind.template(), Template::Lookup);
            assert!(t.shortcut_cue().is_none());
        }
        for t in test.iter().filter(|t| t.difficulty == Difficulty::Hard) {
            assert_ne!(t.question.kind.template(), Template::Lookup);
        }
    }

    #[test]
    fn invalid_configs() {
        for c in [
            EnvConfig { easy_fraction_train: 1.5, ..cfg() },
            EnvConfig { shortcut_correlation: -0.1, ..cfg() },
            EnvConfig { train_size: 0, ..cfg() },
            EnvConfig { test_hard_templates: vec![], ..cfg() },
        ] {
            assert!(matches!(generate_split(&c), Err(EnvError::InvalidConfig(_))));
        }
    }

    #[test]
    fn question_text_round_trip() {
        let (train, test) = generate_split(&cfg()).unwrap();
        for t in train.iter().chain(&test) {
            let q = Question::parse(&t.question_text(), 4, 4).unwrap();
            assert_eq!(q, t.question);
            let back = task_from_parts(&t.task_id, &t.question_text(), &t.image_ref(), 4, 4).unwrap();
            assert_eq!(&back, t);
        }
        assert!(Question::parse("What colour is the sky?", 4, 4).is_err());
        assert!(Question::parse("What letter is in slot 9?", 4, 4).is_err());
    }

    #[test]
    fn feature_shapes() {
        let layout = FeatureLayout::new(4, 4);
        let (train, _) = generate_split(&cfg()).unwrap();
        for t in &train {
            let f = task_context_features(t, &layout, true);
            assert_eq!(f.dim, layout.context_dim());
            assert_eq!(f.to_dense().len(), layout.context_dim());
            assert!(f.active.iter().all(|&i| i < f.dim));
            assert!(f.gates.iter().all(|&g| g < layout.gate_dim()));
        }
        let mut a = train[0].clone();
        let mut b = train[0].clone();
        a.attributes = vec![0, 1, 2, 3];
        b.attributes = vec![3, 3, 1, 0];
        let fa = task_context_features(&a, &layout, false);
        let fb = task_context_features(&b, &layout, false);
        assert_eq!(fa, fb);
        let dense = fa.to_dense();
        assert!(dense[layout.image_off()..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn oracle_examples() {
        let mut m = BTreeMap::new();
        m.insert(3, 2);
        assert_eq!(oracle_answer("What letter is in slot 3?", &m, 4, 4).unwrap().as_deref(), Some("C"));
        let mut only1 = BTreeMap::new();
        only1.insert(1, 0);
        assert_eq!(oracle_answer("What letter is in slot 3?", &only1, 4, 4).unwrap(), None);
        assert!(oracle_answer("Why?", &m, 4, 4).is_err());
    }

    /// Brute force over every assignment of a 3-slot image: a caption that
    /// names every slot makes the count oracle exact.
    #[test]
    fn count_oracle_matches_enumeration() {
        let (k, v) = (3, 4);
        for symbol in 0..v {
            let q = Question { kind: QuestionKind::Count { symbol }, cue: None }.to_string();
            for code in 0..v.pow(k as u32) {
                let values: Vec<usize> = (0..k).map(|j| code / v.pow(j as u32) % v).collect();
                let caption: String = values.iter().enumerate().map(|(j, &s)| format!("slot{j}={} ", letter(s))).collect();
                let mentions = parse_mentions(&caption, k, v);
                let mut expected = 0;
                for &x in &values {
                    if x == symbol {
                        expected += 1;
                    }
                }
                assert_eq!(oracle_answer(&q, &mentions, k, v).unwrap(), Some(expected.to_string()));
            }
        }
    }

    #[test]
    fn caption_sufficiency_and_omission() {
        let judge = OracleJudge { k: 4, v: 4 };
        let (train, test) = generate_split(&cfg()).unwrap();
        for t in train.iter().chain(&test) {
            let full = judge.answer(&t.image_ref(), &t.question_text()).unwrap();
            assert_eq!(accuracy_reward(&full, &t.gold), 1);
            // Drop one required slot: the oracle must refuse.
            let need = t.question.kind.required_slots(4);
            let partial: String = t
                .image_ref()
                .split_whitespace()
                .filter(|w| !w.starts_with(&format!("slot{}=", need[0])))
                .collect::<Vec<_>>()
                .join(" ");
            assert_eq!(judge.answer(&partial, &t.question_text()), Err(JudgeError::Insufficient));
        }
    }

    #[test]
    fn vocab_layout_and_render() {
        let vocab = Vocab::new(4, 4);
        assert_eq!(vocab.len(), 6 + 1 + 16 + 4 + 11);
        assert_eq!(vocab.kind(vocab.attr_token(2, 3)), TokenKind::Attribute { slot: 2, symbol: 3 });
        assert_eq!(vocab.text(vocab.attr_token(2, 3)), "slot2=D");
        let ids: Vec<usize> = ["<info>", "slot0=A", "slot1=B", "</info>", "<think>", "so", "</think>", "<answer>", "yes", "</answer>", "<end>", "so"]
            .iter()
            .map(|t| vocab.token_id(t).unwrap())
            .collect();
        assert_eq!(
            vocab.render(&ids),
            "<info>slot0=A slot1=B</info><think>so</think><answer>yes</answer>"
        );
    }

    /// Brute-force Bayes accuracy by enumerating every image for each
    /// question, independent of the closed-form priors.
    fn enumerated_bayes(task: &SyntheticTask, cfg: &EnvConfig) -> f64 {
        let (k, v) = (cfg.num_attributes, cfg.values_per_attribute);
        let choices = task.question.kind.choices(k, v);
        let m = choices.len() as f64;
        let mut mass: BTreeMap<String, f64> = choices.iter().map(|c| (c.clone(), 0.0)).collect();
        let total = v.pow(k as u32);
        for code in 0..total {
            let values: Vec<usize> = (0..k).map(|j| code / v.pow(j as u32) % v).collect();
            let gold = task.question.kind.evaluate(&values);
            let like = match &task.question.cue {
                None => 1.0,
                Some(c) if *c == gold => cfg.shortcut_correlation,
                Some(_) => (1.0 - cfg.shortcut_correlation) / (m - 1.0),
            };
            *mass.get_mut(&gold).unwrap() += like / total as f64;
        }
        let z: f64 = mass.values().sum();
        mass.values().fold(0.0, |a: f64, &b| a.max(b)) / z
    }

    #[test]
    fn bayes_examples() {
        let all_easy = EnvConfig {
            easy_fraction_train: 1.0,
            shortcut_correlation: 1.0,
            ..cfg()
        };
        let (train, _) = generate_split(&all_easy).unwrap();
        assert_eq!(text_only_bayes_accuracy(&train, &all_easy), 1.0);

        let all_hard = EnvConfig {
            easy_fraction_train: 0.0,
            ..cfg()
        };
        let (train, _) = generate_split(&all_hard).unwrap();
        assert!((text_only_bayes_accuracy(&train, &all_hard) - 0.25).abs() < 1e-15);

        let c = cfg();
        let (train, test) = generate_split(&c).unwrap();
        for split in [&train, &test] {
            let enumerated = split.iter().map(|t| enumerated_bayes(t, &c)).sum::<f64>() / split.len() as f64;
            assert!((text_only_bayes_accuracy(split, &c) - enumerated).abs() < 1e-12);
        }
    }

    /// The best question-only lookup table fitted on one split does no
    /// better than chance on hard lookups of another.
    #[test]
    fn hard_lookups_unpredictable_from_text() {
        let c = EnvConfig {
            easy_fraction_train: 0.0,
            easy_fraction_test: 0.0,
            train_size: 4000,
            test_size: 4000,
            test_hard_templates: vec![Template::Lookup],
            ..cfg()
        };
        let (train, test) = generate_split(&c).unwrap();
        let mut table: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for t in &train {
            *table.entry(t.question_text()).or_default().entry(t.gold.value.clone()).or_default() += 1;
        }
        let predict = |q: &str| {
            table
                .get(q)
                .and_then(|m| m.iter().max_by_key(|(_, &n)| n).map(|(a, _)| a.clone()))
                .unwrap_or_default()
        };
        let hits = test.iter().filter(|t| predict(&t.question_text()) == t.gold.value).count();
        let n = test.len() as f64;
        let acc = hits as f64 / n;
        let sigma = (0.25 * 0.75 / n).sqrt();
        assert!(acc <= 0.25 + 3.0 * sigma, "acc {acc}");
    }
}
