//! Rollout generation, the training loop and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{Decision, PriorConfig, TabularSoftmax, ToyPolicy, Trajectory};
use super::task::{ChainTask, Instance, TaskConfig};
use crate::analysis::{entropy_ratio, overlap_ratios, sampling_metrics, OverlapReport};
use crate::error::{Error, Result};
use crate::grpo::{assign_group_advantages, clipped_surrogate, GrpoConfig, PolicyEvals};
use crate::rollout::{Response, RolloutGroup};
use crate::shaping::{
    segment_group, shaped_advantages, token_categories, GroupSegmentation, ShapingConfig, TokenCategory,
};

/// Samples per prompt used by the periodic evaluation.
pub const EVAL_K: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Grpo,
    Less,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Grpo => "grpo",
            Mode::Less => "less",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Mode::Grpo),
            "less" => Ok(Mode::Less),
            other => Err(Error::config(format!("unknown mode `{other}`; expected grpo or less"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub task: TaskConfig,
    pub prior: PriorConfig,
    /// Segmentation settings; also used for the overlap metrics in GRPO mode.
    pub shaping: ShapingConfig,
    pub grpo: GrpoConfig,
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub buckets: usize,
    pub temperature: f64,
    /// Evaluate every this many steps, and always after the last one.
    pub eval_every: usize,
    pub eval_prompts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskConfig::default(),
            prior: PriorConfig::default(),
            shaping: ShapingConfig::default(),
            grpo: GrpoConfig::default(),
            group_size: 8,
            prompts_per_step: 16,
            steps: 300,
            learning_rate: 1000.0,
            buckets: 1 << 14,
            temperature: 1.0,
            eval_every: 25,
            eval_prompts: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.prior.validate()?;
        self.shaping.validate()?;
        self.grpo.validate()?;
        if self.group_size < 2 {
            return Err(Error::config(format!(
                "group size must be at least 2, got {}",
                self.group_size
            )));
        }
        if self.prompts_per_step == 0 || self.eval_every == 0 || self.eval_prompts == 0 {
            return Err(Error::config(
                "prompts_per_step, eval_every and eval_prompts must be positive",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Mean absolute per-token advantage applied in each token category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvantageMass {
    pub high: f64,
    pub frag: f64,
    pub shared: f64,
    pub correct_only: f64,
    pub incorrect_only: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub avg: f64,
    pub worst: f64,
    pub std: f64,
}

/// One line of a metrics trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Share of correct responses in the training batch.
    pub accuracy: f64,
    pub overlap_correct_only: f64,
    #[serde(rename = "entropy_ratio_wrong_over_right")]
    pub entropy_ratio: Option<f64>,
    pub advantage_mass: AdvantageMass,
    /// Evaluation after this step's update, when one was run.
    #[serde(rename = "avg@8")]
    pub eval_avg: Option<f64>,
    #[serde(rename = "worst@8")]
    pub eval_worst: Option<f64>,
    #[serde(rename = "std@8")]
    pub eval_std: Option<f64>,
}

impl StepMetrics {
    pub fn eval(&self) -> Option<EvalMetrics> {
        Some(EvalMetrics {
            avg: self.eval_avg?,
            worst: self.eval_worst?,
            std: self.eval_std?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub policy: ToyPolicy,
}

/// Samples `g` responses for one prompt. The group's query id is the
/// operand string.
pub fn generate_rollouts(
    policy: &ToyPolicy,
    task: &ChainTask,
    prompt: &Instance,
    g: usize,
    seed: u64,
) -> Result<(RolloutGroup, Vec<Trajectory>)> {
    if g < 2 {
        return Err(Error::domain(format!(
            "rollout groups need at least 2 responses, got {g}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories: Vec<Trajectory> = (0..g).map(|_| policy.sample(task, prompt, &mut rng)).collect();
    let responses = trajectories
        .iter()
        .map(|t| {
            let ok = task.verify(prompt, &t.tokens);
            Response::new(t.tokens.clone(), t.entropies.clone(), f64::from(u8::from(ok)), ok)
        })
        .collect::<Result<Vec<_>>>()?;
    let id: String = prompt.operands.iter().map(|d| char::from(b'0' + d)).collect();
    Ok((RolloutGroup::new(id, responses), trajectories))
}

/// Correctness scores of `k` samples for each prompt.
pub fn sample_scores(policy: &ToyPolicy, task: &ChainTask, prompts: &[Instance], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    prompts
        .iter()
        .map(|p| {
            (0..k)
                .map(|_| f64::from(u8::from(task.verify(p, &policy.sample(task, p, &mut rng).tokens))))
                .collect()
        })
        .collect()
}

/// avg@k, worst@k and std@k of the policy on a fixed prompt set.
pub fn evaluate(
    policy: &ToyPolicy,
    task: &ChainTask,
    prompts: &[Instance],
    k: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    let m = sampling_metrics(&sample_scores(policy, task, prompts, k, seed), k)?;
    Ok(EvalMetrics {
        avg: m.avg,
        worst: m.worst,
        std: m.std,
    })
}

/// Everything the surrogate needs for one group.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub decisions: Vec<Vec<Decision>>,
    pub advantages: Vec<Vec<f64>>,
    pub old_logprobs: Vec<Vec<f64>>,
    pub ref_logprobs: Option<Vec<Vec<f64>>>,
}

/// Mean surrogate loss over groups and its gradient with respect to `θ`.
pub fn batch_loss_and_grad(
    table: &TabularSoftmax,
    batch: &[GroupBatch],
    config: &GrpoConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; table.theta.len()];
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for gb in batch {
        let evals: Vec<PolicyEvals> = gb
            .decisions
            .iter()
            .enumerate()
            .map(|(i, d)| PolicyEvals {
                old_logprobs: gb.old_logprobs[i].clone(),
                new_logprobs: table.log_probs(d),
                ref_logprobs: gb.ref_logprobs.as_ref().map(|r| r[i].clone()),
            })
            .collect();
        let out = clipped_surrogate(&gb.advantages, &evals, config)?;
        loss += scale * out.loss;
        for (d, g) in gb.decisions.iter().zip(&out.token_grads) {
            table.accumulate_grad(d, g, scale, &mut grad);
        }
    }
    Ok((loss, grad))
}

#[derive(Default)]
struct MassAccumulator {
    sum: [f64; 5],
    count: [usize; 5],
}

impl MassAccumulator {
    fn add(&mut self, slot: usize, value: f64) {
        self.sum[slot] += value.abs();
        self.count[slot] += 1;
    }

    fn finish(&self) -> AdvantageMass {
        let mean = |i: usize| {
            if self.count[i] == 0 {
                0.0
            } else {
                self.sum[i] / self.count[i] as f64
            }
        };
        AdvantageMass {
            high: mean(0),
            frag: mean(1),
            shared: mean(2),
            correct_only: mean(3),
            incorrect_only: mean(4),
        }
    }
}

fn category_slot(cat: TokenCategory, seg: &GroupSegmentation) -> usize {
    match cat {
        TokenCategory::High => 0,
        TokenCategory::Frag | TokenCategory::UncoveredSegment => 1,
        TokenCategory::Segment(e) => {
            let entry = &seg.registry.entries()[e];
            match (entry.n_correct > 0, entry.n_incorrect > 0) {
                (true, true) => 2,
                (true, false) => 3,
                _ => 4,
            }
        }
    }
}

/// Trains a fresh policy built from `config`.
pub fn train(config: &TrainConfig, mode: Mode, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    let policy = ToyPolicy::new(config.buckets, config.temperature, config.prior)?;
    train_policy(config, mode, seed, policy)
}

/// Trains `policy` in place for `config.steps` steps. Reproducible from
/// `(config, mode, seed)` and the starting policy.
pub fn train_policy(config: &TrainConfig, mode: Mode, seed: u64, mut policy: ToyPolicy) -> Result<TrainOutcome> {
    config.validate()?;
    let task = ChainTask::new(config.task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Evaluation draws from its own stream so the training trajectory does
    // not depend on the evaluation schedule.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(1);
    let eval_prompts: Vec<Instance> = (0..config.eval_prompts)
        .map(|_| task.sample_instance(&mut eval_rng))
        .collect();

    let mut metrics = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.prompts_per_step);
        let mut overlap = OverlapReport::default();
        let mut ratios = Vec::new();
        let mut mass = MassAccumulator::default();
        let (mut correct, mut total) = (0usize, 0usize);

        for _ in 0..config.prompts_per_step {
            let prompt = task.sample_instance(&mut rng);
            let (mut group, trajectories) = generate_rollouts(&policy, &task, &prompt, config.group_size, rng.gen())?;
            assign_group_advantages(&mut group, &config.grpo)?;
            correct += group.num_correct();
            total += group.size();

            let seg = segment_group(&group, config.shaping.quantile, config.shaping.min_seg_len)?;
            overlap.push(
                group.query_id.clone(),
                overlap_ratios(&group, &seg.structures, &seg.registry),
            );
            ratios.extend(entropy_ratio(&group));

            let base: Vec<f64> = group
                .responses
                .iter()
                .map(|r| r.base_advantage().unwrap_or(0.0))
                .collect();
            let advantages = match mode {
                Mode::Grpo => group
                    .responses
                    .iter()
                    .zip(&base)
                    .map(|(r, &a)| vec![a; r.len()])
                    .collect(),
                Mode::Less => shaped_advantages(&group, &base, &seg, &config.shaping)?,
            };
            for (i, (r, adv)) in group.responses.iter().zip(&advantages).enumerate() {
                for (cat, a) in token_categories(&seg, i, r.len()).into_iter().zip(adv) {
                    mass.add(category_slot(cat, &seg), *a);
                }
            }

            let (decisions, old_logprobs) = trajectories.into_iter().map(|t| (t.decisions, t.logprobs)).unzip();
            batch.push(GroupBatch {
                decisions,
                advantages,
                old_logprobs,
                ref_logprobs: None,
            });
        }

        let (loss, grad) = batch_loss_and_grad(&policy.table, &batch, &config.grpo)?;
        for (t, g) in policy.table.theta.iter_mut().zip(&grad) {
            *t -= config.learning_rate * g;
        }
        let accuracy = correct as f64 / total as f64;
        if !loss.is_finite() || !accuracy.is_finite() || !policy.table.is_finite() {
            return Err(Error::Divergence {
                step,
                message: format!(
                    "loss {loss}, accuracy {accuracy}, parameters finite: {}",
                    policy.table.is_finite()
                ),
            });
        }

        let eval = if step % config.eval_every == 0 || step == config.steps {
            Some(evaluate(&policy, &task, &eval_prompts, EVAL_K, eval_rng.gen())?)
        } else {
            None
        };
        let ratio = if ratios.is_empty() {
            None
        } else {
            Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
        };
        metrics.push(StepMetrics {
            step,
            mode,
            seed,
            accuracy,
            overlap_correct_only: overlap.aggregate.ratios().correct_only,
            entropy_ratio: ratio,
            advantage_mass: mass.finish(),
            eval_avg: eval.map(|e| e.avg),
            eval_worst: eval.map(|e| e.worst),
            eval_std: eval.map(|e| e.std),
        });
        log::debug!("{} seed {seed} step {step}: accuracy {accuracy:.3}", mode.as_str());
    }
    Ok(TrainOutcome { metrics, policy })
}
