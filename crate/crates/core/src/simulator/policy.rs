//! Tabular softmax policy over hashed contexts.
//!
//! Logits at a position are `(prior(context) + θ[bucket(context)]) / T`. The
//! prior stands in for a pretrained model and is frozen; only `θ` is trained.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::{is_digit, ChainTask, Instance, ANS, BOS, EOS, EQ, PLUS, SEP, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::rollout::TokenId;

/// One sampled position: where its logits come from and what was emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub bucket: usize,
    /// Frozen logit offsets added to the trainable row.
    pub prior: Vec<f64>,
    pub token: TokenId,
}

/// `buckets × vocab` parameter table with a softmax read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftmax {
    buckets: usize,
    vocab: usize,
    temperature: f64,
    pub theta: Vec<f64>,
}

impl TabularSoftmax {
    pub fn new(buckets: usize, vocab: usize, temperature: f64) -> Result<Self> {
        if buckets == 0 || vocab < 2 {
            return Err(Error::config(format!(
                "policy table needs at least one bucket and two symbols, got {buckets} × {vocab}"
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(TabularSoftmax {
            buckets,
            vocab,
            temperature,
            theta: vec![0.0; buckets * vocab],
        })
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.theta[bucket * self.vocab..(bucket + 1) * self.vocab]
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// Log-probabilities of every symbol at a position.
    pub fn log_softmax(&self, bucket: usize, prior: &[f64]) -> Vec<f64> {
        debug_assert_eq!(prior.len(), self.vocab);
        let logits: Vec<f64> = prior
            .iter()
            .zip(self.row(bucket))
            .map(|(p, t)| (p + t) / self.temperature)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.into_iter().map(|l| l - log_z).collect()
    }

    pub fn log_prob(&self, d: &Decision) -> f64 {
        self.log_softmax(d.bucket, &d.prior)[d.token as usize]
    }

    pub fn log_probs(&self, decisions: &[Decision]) -> Vec<f64> {
        decisions.iter().map(|d| self.log_prob(d)).collect()
    }

    /// Adds `Σ_t g_t · ∂ log π(token_t) / ∂θ` into `grad`.
    pub fn accumulate_grad(&self, decisions: &[Decision], dlogprob: &[f64], scale: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.theta.len());
        for (d, &g) in decisions.iter().zip(dlogprob) {
            if g == 0.0 {
                continue;
            }
            let g = g * scale / self.temperature;
            let logp = self.log_softmax(d.bucket, &d.prior);
            let row = &mut grad[d.bucket * self.vocab..(d.bucket + 1) * self.vocab];
            for (v, (slot, lp)) in row.iter_mut().zip(&logp).enumerate() {
                let indicator = if v == d.token as usize { 1.0 } else { 0.0 };
                *slot += g * (indicator - lp.exp());
            }
        }
    }
}

/// Shannon entropy in nats of a distribution given by its log-probabilities.
pub fn entropy_from_log_probs(logp: &[f64]) -> f64 {
    logp.iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum()
}

/// What the policy sees at a position: the last four tokens, the operand it
/// should add next and whether further operands remain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Context {
    pub window: [TokenId; 4],
    pub operand: u8,
    pub more: bool,
}

impl Context {
    pub fn at(instance: &Instance, prefix: &[TokenId]) -> Self {
        let mut window = [BOS; 4];
        for (slot, t) in window.iter_mut().rev().zip(prefix.iter().rev()) {
            *slot = *t;
        }
        let k = instance.operands.len();
        let n_plus = prefix.iter().filter(|&&t| t == PLUS).count();
        Context {
            window,
            operand: instance.operands[n_plus.min(k - 1)],
            more: n_plus + 1 < k,
        }
    }

    fn key(&self) -> u64 {
        let mut k = 0u64;
        for t in self.window {
            k = (k << 5) | u64::from(t);
        }
        (k << 5) | (u64::from(self.operand) << 1) | u64::from(self.more)
    }

    pub fn bucket(&self, buckets: usize) -> usize {
        (mix(self.key()) % buckets as u64) as usize
    }
}

// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(seed: u64, key: u64) -> f64 {
    (mix(seed ^ mix(key)) >> 11) as f64 / (1u64 << 53) as f64
}

/// Shape of the frozen prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Zero prior everywhere: the untrained table alone.
    pub flat: bool,
    /// Mean logit of the grammatical token at format and copy positions.
    pub format_strength: f64,
    /// Per-context spread around `format_strength`.
    pub format_jitter: f64,
    /// Range of the correct digit's logit at addition facts.
    pub skill_min: f64,
    pub skill_max: f64,
    /// Share of addition facts with a preferred wrong digit.
    pub misconception_rate: f64,
    pub misconception_min: f64,
    pub misconception_max: f64,
    /// Logit of non-digit symbols at an addition fact.
    pub off_grammar: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            flat: false,
            format_strength: 7.0,
            format_jitter: 1.5,
            skill_min: 0.5,
            skill_max: 4.0,
            misconception_rate: 0.3,
            misconception_min: 1.0,
            misconception_max: 3.5,
            off_grammar: -2.0,
            seed: 17,
        }
    }
}

impl PriorConfig {
    pub fn flat() -> Self {
        PriorConfig {
            flat: true,
            ..PriorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.format_strength,
            self.format_jitter,
            self.skill_min,
            self.skill_max,
            self.misconception_min,
            self.misconception_max,
            self.off_grammar,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("prior parameters must be finite"));
        }
        if !(0.0..=1.0).contains(&self.misconception_rate) {
            return Err(Error::config("misconception_rate outside [0, 1]"));
        }
        if self.skill_min > self.skill_max || self.misconception_min > self.misconception_max {
            return Err(Error::config("prior ranges must have min <= max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Fact {
    skill: f64,
    misconception: Option<(u8, f64)>,
}

/// Frozen "pretrained" logits for the chain task.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPrior {
    config: PriorConfig,
    facts: Vec<Fact>,
}

impl ChainPrior {
    pub fn new(config: PriorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let facts = (0..100)
            .map(|ab| {
                let correct = ((ab / 10 + ab % 10) % 10) as u8;
                let skill = rng.gen_range(config.skill_min..=config.skill_max);
                let misconception = if rng.gen_bool(config.misconception_rate) {
                    let wrong = (correct + rng.gen_range(1..10u8)) % 10;
                    Some((
                        wrong,
                        rng.gen_range(config.misconception_min..=config.misconception_max),
                    ))
                } else {
                    None
                };
                Fact { skill, misconception }
            })
            .collect();
        Ok(ChainPrior { config, facts })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn logits(&self, ctx: &Context) -> Vec<f64> {
        let mut out = vec![0.0; VOCAB_SIZE];
        if self.config.flat {
            return out;
        }
        let [t1, t2, t3, t4] = ctx.window;
        if t4 == EQ && is_digit(t3) && t2 == PLUS && is_digit(t1) {
            let fact = self.facts[(t1 * 10 + t3) as usize];
            let correct = (t1 + t3) % 10;
            for (v, l) in out.iter_mut().enumerate() {
                if v >= 10 {
                    *l = self.config.off_grammar;
                }
            }
            out[correct as usize] = fact.skill;
            if let Some((wrong, strength)) = fact.misconception {
                out[wrong as usize] = strength;
            }
            return out;
        }
        if let Some(next) = grammatical_next(ctx) {
            let c = &self.config;
            let jitter = (2.0 * unit(c.seed, ctx.key()) - 1.0) * c.format_jitter;
            out[next as usize] = c.format_strength + jitter;
        }
        out
    }
}

/// The deterministic continuation at format and copy positions.
fn grammatical_next(ctx: &Context) -> Option<TokenId> {
    let [_, t2, t3, t4] = ctx.window;
    let operand = TokenId::from(ctx.operand);
    match t4 {
        BOS | PLUS => Some(operand),
        SEP if is_digit(t3) => Some(if ctx.more { t3 } else { ANS }),
        ANS if t3 == SEP && is_digit(t2) => Some(t2),
        d if is_digit(d) => match t3 {
            BOS | SEP => Some(PLUS),
            PLUS => Some(EQ),
            EQ => Some(SEP),
            ANS => Some(EOS),
            _ => None,
        },
        _ => None,
    }
}

/// A trainable table on top of the frozen prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub table: TabularSoftmax,
    pub prior: ChainPrior,
}

/// One sampled response with its per-position bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    pub entropies: Vec<f64>,
    pub logprobs: Vec<f64>,
    pub decisions: Vec<Decision>,
}

impl ToyPolicy {
    pub fn new(buckets: usize, temperature: f64, prior: PriorConfig) -> Result<Self> {
        Ok(ToyPolicy {
            table: TabularSoftmax::new(buckets, VOCAB_SIZE, temperature)?,
            prior: ChainPrior::new(prior)?,
        })
    }

    pub fn decision_at(&self, instance: &Instance, prefix: &[TokenId]) -> (usize, Vec<f64>) {
        let ctx = Context::at(instance, prefix);
        (ctx.bucket(self.table.buckets()), self.prior.logits(&ctx))
    }

    /// Samples until `EOS` or `max_len`, recording the exact entropy of the
    /// predictive distribution at every position.
    pub fn sample<R: Rng + ?Sized>(&self, task: &ChainTask, instance: &Instance, rng: &mut R) -> Trajectory {
        let max_len = task.config.max_len;
        let mut tr = Trajectory {
            tokens: Vec::with_capacity(max_len),
            entropies: Vec::with_capacity(max_len),
            logprobs: Vec::with_capacity(max_len),
            decisions: Vec::with_capacity(max_len),
        };
        while tr.tokens.len() < max_len {
            let (bucket, prior) = self.decision_at(instance, &tr.tokens);
            let logp = self.table.log_softmax(bucket, &prior);
            let token = sample_index(&logp, rng);
            tr.entropies.push(entropy_from_log_probs(&logp));
            tr.logprobs.push(logp[token]);
            tr.tokens.push(token as TokenId);
            tr.decisions.push(Decision {
                bucket,
                prior,
                token: token as TokenId,
            });
            if token as TokenId == EOS {
                break;
            }
        }
        tr
    }
}

fn sample_index<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum just under 1.
    logp.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}
