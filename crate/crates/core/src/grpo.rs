//! Group-relative advantages and the clipped surrogate objective.
//!
//! Ratios are taken per token, `α = exp(new − old)`, and each token uses its
//! own (possibly shaped) advantage. A response's contribution is the mean over
//! its tokens and the group objective is the mean over responses.

use std::io::BufRead;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rollout::RolloutGroup;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    pub epsilon_low: f64,
    pub epsilon_high: f64,
    /// KL penalty weight `β`; zero disables the penalty entirely.
    pub kl_coeff: f64,
    /// Reward groups whose population std falls below this get zero advantages.
    pub std_floor: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            epsilon_low: 0.2,
            epsilon_high: 0.28,
            kl_coeff: 0.0,
            std_floor: 1e-8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let GrpoConfig {
            epsilon_low: lo,
            epsilon_high: hi,
            kl_coeff,
            std_floor,
        } = *self;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!(
                "clip range needs 0 < epsilon_low <= epsilon_high < 1, got ({lo}, {hi})"
            )));
        }
        if !(kl_coeff >= 0.0 && kl_coeff.is_finite()) {
            return Err(Error::config(format!("kl_coeff must be >= 0, got {kl_coeff}")));
        }
        if std_floor.is_nan() || std_floor <= 0.0 {
            return Err(Error::config(format!("std_floor must be > 0, got {std_floor}")));
        }
        Ok(())
    }
}

/// `A_i = (r_i − mean(r)) / std(r)` with the population standard deviation.
/// A (numerically) constant reward vector yields all zeros.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::domain(format!(
            "group-relative advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Sets `base_advantage` on every response of the group. Undersized groups
/// get zero advantages.
pub fn assign_group_advantages(group: &mut RolloutGroup, config: &GrpoConfig) -> Result<()> {
    let adv = if group.is_undersized() {
        vec![0.0; group.size()]
    } else {
        group_advantages(&group.rewards(), config.std_floor)?
    };
    for (r, a) in group.responses.iter_mut().zip(adv) {
        r.set_base_advantage(a);
    }
    Ok(())
}

/// Per-token log-probabilities of one response under the behaviour, current
/// and (optionally) reference policies.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvals {
    pub old_logprobs: Vec<f64>,
    pub new_logprobs: Vec<f64>,
    pub ref_logprobs: Option<Vec<f64>>,
}

impl PolicyEvals {
    /// On-policy evaluation: `new == old`, no reference.
    pub fn on_policy(logprobs: Vec<f64>) -> Self {
        PolicyEvals {
            old_logprobs: logprobs.clone(),
            new_logprobs: logprobs,
            ref_logprobs: None,
        }
    }

    fn len(&self) -> usize {
        self.new_logprobs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    /// `−objective + β·KL`.
    pub loss: f64,
    pub objective: f64,
    /// Mean per-token KL estimate (zero when the penalty is off).
    pub kl: f64,
    /// Share of tokens where the clipped branch was strictly smaller.
    pub clip_fraction: f64,
    /// `∂loss / ∂new_logprob` for every token of every response.
    pub token_grads: Vec<Vec<f64>>,
}

/// Clipped surrogate over explicit per-token advantages.
pub fn clipped_surrogate(
    advantages: &[Vec<f64>],
    evals: &[PolicyEvals],
    config: &GrpoConfig,
) -> Result<SurrogateOutput> {
    config.validate()?;
    if advantages.len() != evals.len() {
        return Err(Error::domain(format!(
            "{} advantage rows for {} evaluations",
            advantages.len(),
            evals.len()
        )));
    }
    let use_kl = config.kl_coeff > 0.0;
    let g = advantages.len();
    if g == 0 {
        return Ok(SurrogateOutput {
            loss: 0.0,
            objective: 0.0,
            kl: 0.0,
            clip_fraction: 0.0,
            token_grads: Vec::new(),
        });
    }

    let lo = 1.0 - config.epsilon_low;
    let hi = 1.0 + config.epsilon_high;
    let mut objective = 0.0;
    let mut kl_total = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let mut token_grads = Vec::with_capacity(g);

    for (i, (adv, ev)) in advantages.iter().zip(evals).enumerate() {
        let len = adv.len();
        if len == 0 || ev.len() != len || ev.old_logprobs.len() != len {
            return Err(Error::domain(format!(
                "response {i}: {len} advantages, {} new and {} old logprobs",
                ev.len(),
                ev.old_logprobs.len()
            )));
        }
        let reference = match (&ev.ref_logprobs, use_kl) {
            (Some(r), true) if r.len() == len => Some(r.as_slice()),
            (Some(_), true) => {
                return Err(Error::domain(format!(
                    "response {i}: reference logprob length mismatch"
                )))
            }
            (None, true) => {
                return Err(Error::config(format!(
                    "kl_coeff > 0 but response {i} has no reference logprobs"
                )))
            }
            (_, false) => None,
        };

        let scale = 1.0 / (g as f64 * len as f64);
        let mut resp_obj = 0.0;
        let mut resp_kl = 0.0;
        let mut grads = Vec::with_capacity(len);
        for j in 0..len {
            let a = adv[j];
            let ratio = (ev.new_logprobs[j] - ev.old_logprobs[j]).exp();
            let unclipped = ratio * a;
            let clipped_val = ratio.clamp(lo, hi) * a;
            let (term, d_term) = if clipped_val < unclipped {
                clipped += 1;
                (clipped_val, 0.0)
            } else {
                (unclipped, unclipped)
            };
            resp_obj += term;
            let mut d_loss = -d_term;
            if let Some(r) = reference {
                let diff = r[j] - ev.new_logprobs[j];
                resp_kl += diff.exp() - diff - 1.0;
                d_loss += config.kl_coeff * (1.0 - diff.exp());
            }
            grads.push(d_loss * scale);
        }
        tokens += len;
        objective += resp_obj / len as f64;
        kl_total += resp_kl / len as f64;
        token_grads.push(grads);
    }

    objective /= g as f64;
    let kl = kl_total / g as f64;
    let loss = if use_kl {
        -objective + config.kl_coeff * kl
    } else {
        -objective
    };
    Ok(SurrogateOutput {
        loss,
        objective,
        kl,
        clip_fraction: clipped as f64 / tokens as f64,
        token_grads,
    })
}

/// Clipped surrogate for a shaped group.
pub fn surrogate_loss(group: &RolloutGroup, evals: &[PolicyEvals], config: &GrpoConfig) -> Result<SurrogateOutput> {
    let advantages = group
        .responses
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.shaped().map(<[f64]>::to_vec).ok_or_else(|| Error::Contract {
                query_id: group.query_id.clone(),
                response_index: i,
                message: "shaped advantages missing".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    clipped_surrogate(&advantages, evals, config)
}

pub const LOGPROB_HEADER: &str = "#less-logprobs v1";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LogprobRecord {
    query_id: String,
    old: Vec<f64>,
    new: Vec<f64>,
    #[serde(default, rename = "ref")]
    reference: Option<Vec<f64>>,
}

/// Reads per-response log-probabilities, one JSON record per line under a
/// `#less-logprobs v1` header, in the same response order as the rollout
/// file they belong to.
pub fn load_policy_evals<R: BufRead>(source: R) -> Result<Vec<(String, PolicyEvals)>> {
    let mut out = Vec::new();
    let mut seen_header = false;
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if !seen_header {
            if text != LOGPROB_HEADER {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected header `{LOGPROB_HEADER}`"),
                });
            }
            seen_header = true;
            continue;
        }
        let rec: LogprobRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let invalid = |message: String| Error::Validation {
            line: line_no,
            query_id: rec.query_id.clone(),
            message,
        };
        let lens_ok = rec.old.len() == rec.new.len() && rec.reference.as_ref().is_none_or(|r| r.len() == rec.new.len());
        if !lens_ok {
            return Err(invalid("old, new and ref log-probabilities differ in length".into()));
        }
        let all = rec.old.iter().chain(&rec.new).chain(rec.reference.iter().flatten());
        if all.clone().any(|v| !v.is_finite() || *v > 0.0) {
            return Err(invalid("log-probabilities must be finite and at most 0".into()));
        }
        out.push((
            rec.query_id,
            PolicyEvals {
                old_logprobs: rec.old,
                new_logprobs: rec.new,
                ref_logprobs: rec.reference,
            },
        ));
    }
    Ok(out)
}

/// Splits flat per-response evaluations along `groups`, checking query ids
/// and token counts.
pub fn align_policy_evals(groups: &[RolloutGroup], evals: Vec<(String, PolicyEvals)>) -> Result<Vec<Vec<PolicyEvals>>> {
    let total: usize = groups.iter().map(RolloutGroup::size).sum();
    if evals.len() != total {
        return Err(Error::domain(format!(
            "{} log-probability records for {total} responses",
            evals.len()
        )));
    }
    let mut it = evals.into_iter();
    groups
        .iter()
        .map(|g| {
            g.responses
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let (qid, ev) = it.next().expect("counts checked above");
                    let mismatch = |message: String| Error::Contract {
                        query_id: g.query_id.clone(),
                        response_index: i,
                        message,
                    };
                    if qid != g.query_id {
                        return Err(mismatch(format!("log-probability record is for query `{qid}`")));
                    }
                    if ev.len() != r.len() {
                        return Err(mismatch(format!(
                            "{} log-probabilities for {} tokens",
                            ev.len(),
                            r.len()
                        )));
                    }
                    Ok(ev)
                })
                .collect()
        })
        .collect()
}
