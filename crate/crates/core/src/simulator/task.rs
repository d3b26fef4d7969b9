//! Chain arithmetic mod 10.
//!
//! An instance is a list of single-digit operands `d1 … dk`. The reference
//! response writes every partial sum and then the answer:
//!
//! ```text
//! d1 + d2 = s2 ; s2 + d3 = s3 ; … ; ANS sk EOS
//! ```
//!
//! Only the final answer is verified: the first `ANS` must be followed by
//! `sk` and then `EOS`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::TokenId;

pub const PLUS: TokenId = 10;
pub const EQ: TokenId = 11;
pub const SEP: TokenId = 12;
pub const ANS: TokenId = 13;
pub const EOS: TokenId = 14;
pub const VOCAB_SIZE: usize = 15;
/// Padding symbol for context windows; never emitted.
pub const BOS: TokenId = VOCAB_SIZE as TokenId;

pub fn is_digit(t: TokenId) -> bool {
    t < 10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub num_operands: usize,
    pub max_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            num_operands: 4,
            max_len: 32,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_operands < 2 {
            return Err(Error::config("chain task needs at least 2 operands"));
        }
        if self.max_len > 64 {
            return Err(Error::config(format!("max_len {} exceeds 64", self.max_len)));
        }
        let needed = reference_len(self.num_operands);
        if self.max_len < needed {
            return Err(Error::config(format!(
                "max_len {} cannot hold a {}-operand reference response ({needed} tokens)",
                self.max_len, self.num_operands
            )));
        }
        Ok(())
    }
}

/// Token count of the reference response for `k` operands.
pub fn reference_len(k: usize) -> usize {
    5 + 6 * (k - 2) + 4
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instance {
    pub operands: Vec<u8>,
}

impl Instance {
    pub fn answer(&self) -> u8 {
        self.operands.iter().fold(0u8, |s, d| (s + d) % 10)
    }

    /// `s2 … sk`.
    pub fn partial_sums(&self) -> Vec<u8> {
        let mut s = self.operands[0];
        self.operands[1..]
            .iter()
            .map(|d| {
                s = (s + d) % 10;
                s
            })
            .collect()
    }

    pub fn reference_response(&self) -> Vec<TokenId> {
        let ops = &self.operands;
        let sums = self.partial_sums();
        let mut out = vec![TokenId::from(ops[0])];
        let mut prev = TokenId::from(ops[0]);
        for (d, s) in ops[1..].iter().zip(&sums) {
            if out.len() > 1 {
                out.extend([SEP, prev]);
            }
            out.extend([PLUS, TokenId::from(*d), EQ, TokenId::from(*s)]);
            prev = TokenId::from(*s);
        }
        out.extend([SEP, ANS, prev, EOS]);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainTask {
    pub config: TaskConfig,
}

impl ChainTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        config.validate()?;
        Ok(ChainTask { config })
    }

    pub fn sample_instance<R: Rng + ?Sized>(&self, rng: &mut R) -> Instance {
        Instance {
            operands: (0..self.config.num_operands).map(|_| rng.gen_range(0..10u8)).collect(),
        }
    }

    /// Pure and total: any token sequence gets a verdict.
    pub fn verify(&self, instance: &Instance, tokens: &[TokenId]) -> bool {
        let tokens = &tokens[..tokens.len().min(self.config.max_len)];
        match tokens.iter().position(|&t| t == ANS) {
            Some(p) => tokens.get(p + 1) == Some(&TokenId::from(instance.answer())) && tokens.get(p + 2) == Some(&EOS),
            None => false,
        }
    }
}
