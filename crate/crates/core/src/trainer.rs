//! GRPO training loop, evaluation, checkpoints and sweeps.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::env::{generate_split, task_context_features, Difficulty, EnvError, FeatureLayout, OracleJudge, SyntheticTask, Vocab, END_TOKEN};
use crate::exec;
use crate::grpo::{compute_advantages, kl_penalty, ClipConfig, GrpoError, KlSchedule, KlStrategy, RatioLevel};
use crate::judge::{caption_reward, ExternalJudge, ExternalJudgeConfig, Judge, PromptTemplate, TemplateError};
use crate::metrics::{MetricsError, MetricsWriter, StepMetrics};
use crate::policy::{
    apply_update, logprob_sequence, objective_gradient, sample_sequence, GenerationConfig, PolicyError, PolicyParams,
    PriorConfig, Rollout, RolloutGroup,
};
use crate::rewards::{accuracy_reward, composite_reward, length_reward, RewardError};
use crate::structured::{format_reward, parse_response, FormatMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Auxiliary term weighted by `alpha` in the composite reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuxReward {
    None,
    Caption,
    Length,
}

impl AuxReward {
    pub fn as_str(self) -> &'static str {
        match self {
            AuxReward::None => "none",
            AuxReward::Caption => "caption",
            AuxReward::Length => "length",
        }
    }

    pub fn parse_name(s: &str) -> Option<Self> {
        match s.trim() {
            "none" => Some(AuxReward::None),
            "caption" => Some(AuxReward::Caption),
            "length" => Some(AuxReward::Length),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum JudgeSpec {
    Oracle,
    External {
        endpoint: String,
        model: String,
        timeout_ms: u64,
        max_in_flight: usize,
        template: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub format_mode: FormatMode,
    pub aux_reward: AuxReward,
    pub alpha: f64,
    pub length_target: usize,
    pub strict_format: bool,
    pub group_size: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub beta: f64,
    pub kl_strategy: KlStrategy,
    pub t_max: u64,
    pub clip_epsilon: f64,
    pub ratio_level: RatioLevel,
    pub learning_rate: f64,
    /// Rescale the gradient to this L2 norm when larger; 0 disables.
    pub grad_clip_norm: f64,
    pub old_policy_refresh_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub hidden_units: usize,
    pub std_floor: f64,
    /// When false the policy never sees image attributes (text-only diagnostic).
    pub reveal_image: bool,
    pub seed: u64,
    pub judge: JudgeSpec,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            format_mode: FormatMode::CaptionReasonAnswer,
            aux_reward: AuxReward::Caption,
            alpha: crate::rewards::DEFAULT_ALPHA,
            length_target: 12,
            strict_format: false,
            group_size: 8,
            batch_size: 8,
            temperature: 0.9,
            max_tokens: 32,
            beta: crate::grpo::DEFAULT_BETA,
            kl_strategy: KlStrategy::CosineAnnealing,
            t_max: 1000,
            clip_epsilon: crate::grpo::DEFAULT_CLIP_EPSILON,
            ratio_level: RatioLevel::PerToken,
            learning_rate: 1.0,
            grad_clip_norm: 0.0,
            old_policy_refresh_every: 1,
            eval_every: 25,
            checkpoint_every: 100,
            hidden_units: 0,
            std_floor: crate::grpo::DEFAULT_STD_FLOOR,
            reveal_image: true,
            seed: 0,
            judge: JudgeSpec::Oracle,
        }
    }
}

impl TrainerConfig {
    /// Plain GRPO: reason-then-answer output, no auxiliary reward.
    pub fn baseline() -> Self {
        TrainerConfig {
            format_mode: FormatMode::ReasonAnswer,
            aux_reward: AuxReward::None,
            ..Self::default()
        }
    }

    pub fn clip(&self) -> Result<ClipConfig, GrpoError> {
        ClipConfig::new(self.clip_epsilon, self.ratio_level)
    }

    pub fn schedule(&self) -> Result<KlSchedule, GrpoError> {
        KlSchedule::new(self.beta, self.kl_strategy, self.t_max)
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            greedy: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &'static str, msg: &str| Err(ConfigError::invalid(key, msg));
        if self.group_size < 2 {
            return bad("group_size", "must be at least 2");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature", "must be positive");
        }
        if self.max_tokens < 1 {
            return bad("max_tokens", "must be at least 1");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha", "must be finite and non-negative");
        }
        if self.schedule().is_err() {
            return bad("beta", "must be finite and non-negative with t_max >= 1");
        }
        if self.clip().is_err() {
            return bad("clip_epsilon", "must be in (0, 1)");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm >= 0.0) {
            return bad("grad_clip_norm", "must be finite and non-negative");
        }
        if self.old_policy_refresh_every < 1 {
            return bad("old_policy_refresh_every", "must be at least 1");
        }
        if self.eval_every < 1 {
            return bad("eval_every", "must be at least 1");
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every", "must be at least 1");
        }
        if !(self.std_floor.is_finite() && self.std_floor >= 0.0) {
            return bad("std_floor", "must be finite and non-negative");
        }
        if self.format_mode == FormatMode::ReasonAnswer && self.aux_reward == AuxReward::Caption {
            return bad("aux_reward", "caption reward needs format_mode = caption_reason_answer");
        }
        Ok(())
    }
}

/// SplitMix64 over `seed` and `parts`: independent streams per
/// (step, task, sample) regardless of execution order.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

const STREAM_BATCH: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_EVAL: u64 = 3;

pub fn build_judge(spec: &JudgeSpec, k: usize, v: usize) -> Result<Arc<dyn Judge>, TrainError> {
    Ok(match spec {
        JudgeSpec::Oracle => Arc::new(OracleJudge { k, v }),
        JudgeSpec::External {
            endpoint,
            model,
            timeout_ms,
            max_in_flight,
            template,
        } => {
            let template = match template {
                Some(p) => PromptTemplate::load(p, &["{caption}", "{question}"])?,
                None => PromptTemplate::judge_default(),
            };
            let cfg = ExternalJudgeConfig {
                endpoint: endpoint.clone(),
                model: model.clone(),
                timeout: Duration::from_millis(*timeout_ms),
                max_in_flight: *max_in_flight,
            };
            Arc::new(ExternalJudge::http(cfg, template))
        }
    })
}

pub struct TrainerState {
    pub config: ExperimentConfig,
    pub step: u64,
    pub live: PolicyParams,
    pub old: PolicyParams,
    pub reference: PolicyParams,
    pub train: Vec<SyntheticTask>,
    pub test: Vec<SyntheticTask>,
    pub judge: Arc<dyn Judge>,
    pub judge_errors: u64,
    vocab: Vocab,
    layout: FeatureLayout,
}

impl TrainerState {
    pub fn new(config: ExperimentConfig) -> Result<Self, TrainError> {
        let judge = build_judge(&config.trainer.judge, config.env.num_attributes, config.env.values_per_attribute)?;
        Self::with_judge(config, judge)
    }

    /// Starts from the pretrained prior, with a caller-supplied judge.
    pub fn with_judge(config: ExperimentConfig, judge: Arc<dyn Judge>) -> Result<Self, TrainError> {
        config.validate()?;
        let (k, v) = (config.env.num_attributes, config.env.values_per_attribute);
        let (train, test) = generate_split(&config.env)?;
        let init = PolicyParams::pretrained(
            k,
            v,
            config.trainer.hidden_units,
            &PriorConfig::default(),
            derive_seed(config.trainer.seed, &[0]),
        );
        Ok(TrainerState {
            step: 0,
            live: init.clone(),
            old: init.clone(),
            reference: init,
            train,
            test,
            judge,
            judge_errors: 0,
            vocab: Vocab::new(k, v),
            layout: FeatureLayout::new(k, v),
            config,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }
}

/// Everything observed about one sampled completion.
#[derive(Debug, Clone, PartialEq)]
struct SampleStats {
    r_a: f64,
    r_f: f64,
    caption: Option<f64>,
    length: Option<f64>,
    total: f64,
    tokens: usize,
    empty_think: bool,
    judge_error: bool,
    kl: f64,
}

fn output_length(tokens: &[usize]) -> usize {
    tokens.iter().filter(|&&t| t != END_TOKEN).count()
}

fn build_group(state: &TrainerState, task_index: usize, slot: usize) -> Result<(RolloutGroup, Vec<SampleStats>), TrainError> {
    let cfg = &state.config.trainer;
    let task = &state.train[task_index];
    let mode = cfg.format_mode;
    let ctx = task_context_features(task, &state.layout, cfg.reveal_image);
    let gen = cfg.generation();
    let question = task.question_text();
    let want_caption = mode == FormatMode::CaptionReasonAnswer
        && (cfg.aux_reward == AuxReward::Caption || cfg.judge == JudgeSpec::Oracle);
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    let mut stats = Vec::with_capacity(cfg.group_size);
    for i in 0..cfg.group_size {
        let seed = derive_seed(cfg.seed, &[STREAM_SAMPLE, state.step, slot as u64, i as u64]);
        let tokens = sample_sequence(&state.old, mode, &ctx, &gen, seed)?;
        let logp_old = logprob_sequence(&state.old, mode, &ctx, &tokens)?;
        let logp_ref = logprob_sequence(&state.reference, mode, &ctx, &tokens)?;
        let text = state.vocab.render(&tokens);
        let r_f = f64::from(format_reward(&text, mode, cfg.strict_format));
        let parsed = parse_response(&text, mode).ok();
        let r_a = parsed.as_ref().map_or(0.0, |r| f64::from(accuracy_reward(&r.answer, &task.gold)));
        let mut judge_error = false;
        let caption = match (&parsed, want_caption) {
            (Some(r), true) => {
                let out = caption_reward(r.info.as_deref().unwrap_or(""), &question, &task.gold, state.judge.as_ref());
                judge_error = out.judge_error;
                Some(f64::from(out.reward))
            }
            (None, true) => Some(0.0),
            _ => None,
        };
        let length = parsed.as_ref().map(|r| length_reward(r, cfg.length_target));
        let aux = match cfg.aux_reward {
            AuxReward::None => 0.0,
            AuxReward::Caption => caption.unwrap_or(0.0),
            AuxReward::Length => length.unwrap_or(0.0),
        };
        let total = composite_reward(r_a, r_f, aux, cfg.alpha)?.total;
        stats.push(SampleStats {
            r_a,
            r_f,
            caption,
            length: (cfg.aux_reward == AuxReward::Length).then(|| length.unwrap_or(0.0)),
            total,
            tokens: output_length(&tokens),
            empty_think: parsed.as_ref().is_some_and(|r| r.think.trim().is_empty()),
            judge_error,
            kl: kl_penalty(&logp_ref, &logp_old)?,
        });
        rollouts.push(Rollout {
            tokens,
            logp_old,
            logp_ref,
        });
    }
    let rewards: Vec<f64> = stats.iter().map(|s| s.total).collect();
    let advantages = compute_advantages(&rewards, cfg.std_floor)?;
    let group = RolloutGroup {
        task_id: task.task_id.clone(),
        mode,
        context: ctx,
        rollouts,
        rewards,
        advantages,
    };
    Ok((group, stats))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// One GRPO update: sample groups from the old policy, score them, take a
/// gradient step on the live policy and refresh the old policy on schedule.
pub fn train_step(state: &mut TrainerState) -> Result<StepMetrics, TrainError> {
    let cfg = state.config.trainer.clone();
    let beta_hat = cfg.schedule()?.beta_at(state.step.min(cfg.t_max))?;
    let clip = cfg.clip()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_BATCH, state.step]));
    let batch = cfg.batch_size.min(state.train.len());
    let picks = sample(&mut rng, state.train.len(), batch).into_vec();

    let shared: &TrainerState = state;
    let built = exec::map_indexed(picks.len(), |slot| build_group(shared, picks[slot], slot));
    let mut groups = Vec::with_capacity(built.len());
    let mut stats = Vec::new();
    for b in built {
        let (g, s) = b?;
        groups.push(g);
        stats.extend(s);
    }

    let (objective, mut grad) = objective_gradient(&state.live, &groups, &clip, beta_hat)?;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if cfg.grad_clip_norm > 0.0 && grad_norm > cfg.grad_clip_norm {
        let s = cfg.grad_clip_norm / grad_norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    apply_update(&mut state.live, &grad, cfg.learning_rate)?;

    let errors = stats.iter().filter(|s| s.judge_error).count() as u64;
    state.judge_errors += errors;
    let captions: Vec<f64> = stats.iter().filter_map(|s| s.caption).collect();
    let lengths: Vec<f64> = stats.iter().filter_map(|s| s.length).collect();
    let metrics = StepMetrics {
        step: state.step,
        mean_output_length: mean(stats.iter().map(|s| s.tokens as f64)),
        format_reward_rate: mean(stats.iter().map(|s| s.r_f)),
        accuracy_reward_rate: mean(stats.iter().map(|s| s.r_a)),
        caption_reward_rate: (!captions.is_empty()).then(|| mean(captions.iter().copied())),
        length_reward_mean: (!lengths.is_empty()).then(|| mean(lengths.iter().copied())),
        mean_total_reward: mean(stats.iter().map(|s| s.total)),
        kl_value: mean(stats.iter().map(|s| s.kl)),
        beta_hat,
        empty_think_rate: mean(stats.iter().map(|s| f64::from(u8::from(s.empty_think)))),
        judge_errors: state.judge_errors,
        objective,
        grad_norm,
        train_accuracy: None,
        test_accuracy: None,
        test_easy_accuracy: None,
        test_hard_accuracy: None,
    };

    state.step += 1;
    if state.step % cfg.old_policy_refresh_every == 0 {
        state.old = state.live.clone();
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    pub accuracy: f64,
    pub easy_tasks: usize,
    pub easy_accuracy: f64,
    pub hard_tasks: usize,
    pub hard_accuracy: f64,
    pub format_rate: f64,
    pub mean_output_length: f64,
    /// Fraction of outputs whose caption alone lets the oracle answer correctly.
    pub caption_sufficiency: f64,
}

/// Accuracy of the live policy on `split`, greedy or sampled.
pub fn evaluate(state: &TrainerState, split: &[SyntheticTask], greedy: bool) -> Result<EvalReport, TrainError> {
    let cfg = &state.config.trainer;
    let mode = cfg.format_mode;
    let gen = GenerationConfig {
        greedy,
        ..cfg.generation()
    };
    let oracle = OracleJudge {
        k: state.config.env.num_attributes,
        v: state.config.env.values_per_attribute,
    };
    let rows = exec::map_indexed(split.len(), |i| -> Result<(Difficulty, f64, f64, f64, f64), TrainError> {
        let task = &split[i];
        let ctx = task_context_features(task, &state.layout, cfg.reveal_image);
        let seed = derive_seed(cfg.seed, &[STREAM_EVAL, state.step, i as u64]);
        let tokens = sample_sequence(&state.live, mode, &ctx, &gen, seed)?;
        let text = state.vocab.render(&tokens);
        let parsed = parse_response(&text, mode).ok();
        let acc = parsed.as_ref().map_or(0.0, |r| f64::from(accuracy_reward(&r.answer, &task.gold)));
        let sufficient = parsed
            .as_ref()
            .and_then(|r| r.info.as_deref())
            .map_or(0.0, |info| f64::from(caption_reward(info, &task.question_text(), &task.gold, &oracle).reward));
        Ok((task.difficulty, acc, f64::from(u8::from(parsed.is_some())), output_length(&tokens) as f64, sufficient))
    });
    let rows: Vec<_> = rows.into_iter().collect::<Result<_, _>>()?;
    let easy: Vec<f64> = rows.iter().filter(|r| r.0 == Difficulty::Easy).map(|r| r.1).collect();
    let hard: Vec<f64> = rows.iter().filter(|r| r.0 == Difficulty::Hard).map(|r| r.1).collect();
    Ok(EvalReport {
        tasks: rows.len(),
        accuracy: mean(rows.iter().map(|r| r.1)),
        easy_tasks: easy.len(),
        easy_accuracy: mean(easy.iter().copied()),
        hard_tasks: hard.len(),
        hard_accuracy: mean(hard.iter().copied()),
        format_rate: mean(rows.iter().map(|r| r.2)),
        mean_output_length: mean(rows.iter().map(|r| r.3)),
        caption_sufficiency: mean(rows.iter().map(|r| r.4)),
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: String,
    pub rng_seed: u64,
    /// Streams are derived from `(rng_seed, step, ...)`, so the step is
    /// the whole generator position.
    pub rng_counter: u64,
    pub judge_errors: u64,
    pub live: PolicyParams,
    pub old: PolicyParams,
    pub reference: PolicyParams,
}

impl Checkpoint {
    pub fn of(state: &TrainerState) -> Self {
        Checkpoint {
            version: 1,
            step: state.step,
            config: state.config.to_kv_text(),
            rng_seed: state.config.trainer.seed,
            rng_counter: state.step,
            judge_errors: state.judge_errors,
            live: state.live.clone(),
            old: state.old.clone(),
            reference: state.reference.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(self).map_err(|e| TrainError::Checkpoint {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        for p in [&ck.live, &ck.old, &ck.reference] {
            p.validate().map_err(|e| TrainError::Checkpoint {
                path: path.to_owned(),
                reason: e.to_string(),
            })?;
        }
        Ok(ck)
    }

    /// Rebuilds the trainer state; the checkpoint's config wins.
    pub fn restore(self, judge: Option<Arc<dyn Judge>>) -> Result<TrainerState, TrainError> {
        let config = ExperimentConfig::from_kv_text(&self.config)?;
        let mut state = match judge {
            Some(j) => TrainerState::with_judge(config, j)?,
            None => TrainerState::new(config)?,
        };
        state.step = self.step;
        state.judge_errors = self.judge_errors;
        state.live = self.live;
        state.old = self.old;
        state.reference = self.reference;
        Ok(state)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.json` in the output directory when present.
    pub resume: bool,
    /// Stop once this many steps have completed (simulates an interruption).
    pub stop_after: Option<u64>,
    /// Use this judge instead of the one described by the config.
    pub judge: Option<Arc<dyn Judge>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub train: EvalReport,
    pub test: EvalReport,
    pub judge_errors: u64,
    pub completed: bool,
}

/// Trains to `t_max` steps, writing the resolved config, per-step metrics
/// CSV, checkpoints and a final summary into `output_dir`.
pub fn run_experiment(config: &ExperimentConfig, output_dir: &Path, opts: &RunOptions) -> Result<RunSummary, TrainError> {
    config.validate()?;
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let ck_path = output_dir.join(CHECKPOINT_FILE);
    let metrics_path = output_dir.join(METRICS_FILE);
    let mut state = if opts.resume && ck_path.exists() {
        let state = Checkpoint::load(&ck_path)?.restore(opts.judge.clone())?;
        log::info!("resuming {} at step {}", output_dir.display(), state.step);
        state
    } else {
        match &opts.judge {
            Some(j) => TrainerState::with_judge(config.clone(), j.clone())?,
            None => TrainerState::new(config.clone())?,
        }
    };
    let cfg_path = output_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, state.config.to_kv_text()).map_err(io_err(&cfg_path))?;
    let mut writer = MetricsWriter::open(&metrics_path, state.step)?;

    let t_max = state.config.trainer.t_max;
    let (eval_every, ck_every) = (state.config.trainer.eval_every, state.config.trainer.checkpoint_every);
    while state.step < t_max {
        if opts.stop_after.is_some_and(|s| state.step >= s) {
            break;
        }
        let mut m = train_step(&mut state)?;
        if state.step % eval_every == 0 || state.step == t_max {
            let test = evaluate(&state, &state.test, true)?;
            let train = evaluate(&state, &state.train, true)?;
            m.train_accuracy = Some(train.accuracy);
            m.test_accuracy = Some(test.accuracy);
            m.test_easy_accuracy = Some(test.easy_accuracy);
            m.test_hard_accuracy = Some(test.hard_accuracy);
            log::info!(
                "step {} train_acc {:.3} test_acc {:.3} hard {:.3} len {:.1}",
                state.step,
                train.accuracy,
                test.accuracy,
                test.hard_accuracy,
                m.mean_output_length
            );
        }
        writer.write(&m)?;
        if state.step % ck_every == 0 || state.step == t_max {
            writer.flush()?;
            Checkpoint::of(&state).save(&ck_path)?;
        }
    }
    writer.flush()?;
    Checkpoint::of(&state).save(&ck_path)?;
    let summary = RunSummary {
        steps: state.step,
        train: evaluate(&state, &state.train, true)?,
        test: evaluate(&state, &state.test, true)?,
        judge_errors: state.judge_errors,
        completed: state.step >= t_max,
    };
    let summary_path = output_dir.join(SUMMARY_FILE);
    let mut f = fs::File::create(&summary_path).map_err(io_err(&summary_path))?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    f.write_all(text.as_bytes()).map_err(io_err(&summary_path))?;
    Ok(summary)
}

/// One configuration in a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub config: ExperimentConfig,
}

/// The four output/reward variants compared in the caption ablation. All
/// rows share the base config's KL schedule and optimiser settings.
pub fn caption_ablation_rows(base: &ExperimentConfig) -> Vec<SweepRow> {
    let row = |name: &str, mode: FormatMode, aux: AuxReward| {
        let mut config = base.clone();
        config.trainer.format_mode = mode;
        config.trainer.aux_reward = aux;
        SweepRow {
            name: name.to_owned(),
            config,
        }
    };
    vec![
        row("grpo", FormatMode::ReasonAnswer, AuxReward::None),
        row("grpo+caption", FormatMode::CaptionReasonAnswer, AuxReward::None),
        row("grpo+caption+length_reward", FormatMode::CaptionReasonAnswer, AuxReward::Length),
        row("grpo+caption+caption_reward", FormatMode::CaptionReasonAnswer, AuxReward::Caption),
    ]
}

/// KL schedules compared on the full configuration: static at the base
/// beta, static at one fifth of it, linear decay and cosine annealing.
pub fn kl_schedule_rows(base: &ExperimentConfig) -> Vec<SweepRow> {
    let beta = base.trainer.beta;
    let row = |name: String, b: f64, s: KlStrategy| {
        let mut config = base.clone();
        config.trainer.beta = b;
        config.trainer.kl_strategy = s;
        SweepRow { name, config }
    };
    vec![
        row(format!("static_{beta}"), beta, KlStrategy::Static),
        row(format!("static_{}", beta / 5.0), beta / 5.0, KlStrategy::Static),
        row("linear".to_owned(), beta, KlStrategy::LinearDecay),
        row("cosine".to_owned(), beta, KlStrategy::CosineAnnealing),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub row: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_hard_accuracy: f64,
    pub train_accuracy: f64,
    pub mean_output_length: f64,
}

/// Runs every row under every seed (in `row/seed{n}` subdirectories) with at
/// most `workers` runs at a time, then writes `sweep.csv`.
pub fn run_sweep(rows: &[SweepRow], seeds: &[u64], output_dir: &Path, workers: usize, resume: bool) -> Result<Vec<SweepResult>, TrainError> {
    let jobs: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let run = |j: usize| -> Result<SweepResult, TrainError> {
        let (r, seed) = jobs[j];
        let mut config = rows[r].config.clone();
        config.trainer.seed = seed;
        let dir = output_dir.join(&rows[r].name).join(format!("seed{seed}"));
        let opts = RunOptions {
            resume,
            ..RunOptions::default()
        };
        let s = run_experiment(&config, &dir, &opts)?;
        Ok(SweepResult {
            row: rows[r].name.clone(),
            seed,
            test_accuracy: s.test.accuracy,
            test_hard_accuracy: s.test.hard_accuracy,
            train_accuracy: s.train.accuracy,
            mean_output_length: s.test.mean_output_length,
        })
    };
    let results = exec::map_indexed_with_workers(jobs.len(), workers, run).map_err(TrainError::Pool)?;
    let results: Vec<SweepResult> = results.into_iter().collect::<Result<_, _>>()?;
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let path = output_dir.join("sweep.csv");
    let mut text = String::from("row,seed,test_accuracy,test_hard_accuracy,train_accuracy,mean_output_length\n");
    for r in &results {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.row, r.seed, r.test_accuracy, r.test_hard_accuracy, r.train_accuracy, r.mean_output_length
        ));
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(results)
}

/// Median of `xs` (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Per-row medians of test accuracy, in row order.
pub fn summarize_sweep(rows: &[SweepRow], results: &[SweepResult]) -> Vec<(String, f64, f64)> {
    rows.iter()
        .map(|row| {
            let acc: Vec<f64> = results.iter().filter(|r| r.row == row.name).map(|r| r.test_accuracy).collect();
            let hard: Vec<f64> = results.iter().filter(|r| r.row == row.name).map(|r| r.test_hard_accuracy).collect();
            (row.name.clone(), median(&acc), median(&hard))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            env: EnvConfig {
                train_size: 40,
                test_size: 20,
                ..EnvConfig::default()
            },
            trainer: TrainerConfig {
                t_max: 6,
                eval_every: 3,
                checkpoint_every: 2,
                batch_size: 4,
                group_size: 4,
                ..TrainerConfig::default()
            },
        }
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(1, &[2, 0, 0]);
        assert_ne!(a, derive_seed(1, &[2, 0, 1]));
        assert_ne!(a, derive_seed(1, &[2, 1, 0]));
        assert_ne!(a, derive_seed(2, &[2, 0, 0]));
        assert_eq!(a, derive_seed(1, &[2, 0, 0]));
    }

    #[test]
    fn step_refreshes_old_and_freezes_reference() {
        let mut s = TrainerState::new(small()).unwrap();
        let reference = s.reference.clone();
        let m = train_step(&mut s).unwrap();
        assert_eq!(m.step, 0);
        assert_eq!(s.step, 1);
        assert_eq!(s.old, s.live);
        assert_eq!(s.reference, reference);
        assert!(m.format_reward_rate > 0.0);
        assert!(m.caption_reward_rate.is_some());
    }

    #[test]
    fn stale_old_policy_between_refreshes() {
        let mut c = small();
        c.trainer.old_policy_refresh_every = 3;
        let mut s = TrainerState::new(c).unwrap();
        let init = s.old.clone();
        train_step(&mut s).unwrap();
        train_step(&mut s).unwrap();
        assert_eq!(s.old, init);
        train_step(&mut s).unwrap();
        assert_eq!(s.old, s.live);
    }

    #[test]
    fn caption_reward_needs_caption_mode() {
        let mut c = small();
        c.trainer.format_mode = FormatMode::ReasonAnswer;
        assert!(c.validate().is_err());
    }

    #[test]
    fn evaluate_counts() {
        let s = TrainerState::new(small()).unwrap();
        let r = evaluate(&s, &s.test, true).unwrap();
        assert_eq!(r.tasks, 20);
        assert_eq!(r.easy_tasks + r.hard_tasks, 20);
        assert!((0.0..=1.0).contains(&r.accuracy));
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
