//! Rollout domain types and the newline-delimited record format.
//!
//! A rollout file starts with the header line [`FORMAT_HEADER`] and then holds
//! one JSON object per line, one line per sampled response:
//!
//! ```text
//! #less-rollouts v1
//! {"query_id":"q0","tokens":[4,7,9],"entropies":[0.1,2.3,0.0],"reward":1.0,"correct":1}
//! ```
//!
//! Consecutive lines with the same `query_id` form one [`RolloutGroup`]. The
//! shaped variant of the format adds `base_advantage` and `shaped` to every
//! line and keeps the same header.

use std::fmt;
use std::io::{BufRead, Write};

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_HEADER: &str = "#less-rollouts v1";

/// Vocabulary index of a generated token.
pub type TokenId = u32;

/// One generated token and the entropy (nats) of the distribution it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenRecord {
    pub token_id: TokenId,
    pub entropy: f64,
}

/// One sampled trajectory.
///
/// Token ids and entropies are stored as parallel vectors so segment matching
/// can work on `&[TokenId]` slices directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    token_ids: Vec<TokenId>,
    entropies: Vec<f64>,
    reward: f64,
    correct: bool,
    base_advantage: Option<f64>,
    shaped: Option<Vec<f64>>,
}

impl Response {
    pub fn new(token_ids: Vec<TokenId>, entropies: Vec<f64>, reward: f64, correct: bool) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::InvalidResponse("token list is empty".into()));
        }
        if token_ids.len() != entropies.len() {
            return Err(Error::InvalidResponse(format!(
                "{} token ids but {} entropies",
                token_ids.len(),
                entropies.len()
            )));
        }
        if let Some((j, h)) = entropies.iter().enumerate().find(|(_, h)| !h.is_finite() || **h < 0.0) {
            return Err(Error::InvalidResponse(format!(
                "entropy at offset {j} is {h}; entropies must be finite and non-negative"
            )));
        }
        if !reward.is_finite() {
            return Err(Error::InvalidResponse(format!("reward {reward} is not finite")));
        }
        Ok(Response {
            token_ids,
            entropies,
            reward,
            correct,
            base_advantage: None,
            shaped: None,
        })
    }

    pub fn from_records(records: &[TokenRecord], reward: f64, correct: bool) -> Result<Self> {
        Self::new(
            records.iter().map(|r| r.token_id).collect(),
            records.iter().map(|r| r.entropy).collect(),
            reward,
            correct,
        )
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    /// Always false for a validated response; present for clippy's sake.
    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn entropies(&self) -> &[f64] {
        &self.entropies
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenRecord> + '_ {
        self.token_ids
            .iter()
            .zip(&self.entropies)
            .map(|(&token_id, &entropy)| TokenRecord { token_id, entropy })
    }

    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn correct(&self) -> bool {
        self.correct
    }

    pub fn base_advantage(&self) -> Option<f64> {
        self.base_advantage
    }

    pub fn set_base_advantage(&mut self, advantage: f64) {
        self.base_advantage = Some(advantage);
    }

    pub fn shaped(&self) -> Option<&[f64]> {
        self.shaped.as_deref()
    }

    pub fn set_shaped(&mut self, shaped: Vec<f64>) -> Result<()> {
        if shaped.len() != self.token_ids.len() {
            return Err(Error::InvalidResponse(format!(
                "shaped advantages have length {}, response has {} tokens",
                shaped.len(),
                self.token_ids.len()
            )));
        }
        self.shaped = Some(shaped);
        Ok(())
    }
}

/// The `G` responses sampled for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query_id: String,
    pub responses: Vec<Response>,
}

impl RolloutGroup {
    pub fn new(query_id: impl Into<String>, responses: Vec<Response>) -> Self {
        RolloutGroup {
            query_id: query_id.into(),
            responses,
        }
    }

    /// Group size `G`.
    pub fn size(&self) -> usize {
        self.responses.len()
    }

    /// Groups with fewer than two responses have no group-relative advantage
    /// and are passed through shaping untouched.
    pub fn is_undersized(&self) -> bool {
        self.responses.len() < 2
    }

    /// Number of correct responses, `N_r`.
    pub fn num_correct(&self) -> usize {
        self.responses.iter().filter(|r| r.correct).count()
    }

    /// Number of incorrect responses, `N_w`.
    pub fn num_incorrect(&self) -> usize {
        self.responses.len() - self.num_correct()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    pub fn token_count(&self) -> usize {
        self.responses.iter().map(Response::len).sum()
    }
}

/// Reads rollout groups from a record stream.
///
/// An empty stream yields no groups. Groups with fewer than two responses are
/// kept (see [`RolloutGroup::is_undersized`]) and logged as a warning.
/// Records carrying `base_advantage`/`shaped` (the shaped format) are accepted
/// and those fields restored.
pub fn load_rollout_groups<R: BufRead>(source: R) -> Result<Vec<RolloutGroup>> {
    let mut groups: Vec<RolloutGroup> = Vec::new();
    let mut seen_header = false;

    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if !seen_header {
            if text != FORMAT_HEADER {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected header `{FORMAT_HEADER}`, found `{}`", truncate(text)),
                });
            }
            seen_header = true;
            continue;
        }

        let record: RecordIn = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let (query_id, response) = record_to_response(record, line_no)?;

        match groups.last_mut() {
            Some(g) if g.query_id == query_id => g.responses.push(response),
            _ => groups.push(RolloutGroup::new(query_id, vec![response])),
        }
    }

    for g in groups.iter().filter(|g| g.is_undersized()) {
        log::warn!(
            "query `{}` has {} response(s); group-relative statistics need at least 2",
            g.query_id,
            g.size()
        );
    }
    Ok(groups)
}

/// Writes groups in the raw rollout format (no advantages).
pub fn write_rollout_groups<W: Write>(groups: &[RolloutGroup], mut sink: W) -> Result<()> {
    writeln!(sink, "{FORMAT_HEADER}")?;
    for g in groups {
        for r in &g.responses {
            let rec = RecordOut {
                query_id: &g.query_id,
                tokens: &r.token_ids,
                entropies: &r.entropies,
                reward: r.reward,
                correct: u8::from(r.correct),
                base_advantage: None,
                shaped: None,
            };
            write_record(&mut sink, &rec)?;
        }
    }
    sink.flush()?;
    Ok(())
}

/// Writes groups in the shaped-advantage format.
///
/// Every response must carry both a base advantage and shaped values; the
/// first one that does not is reported and nothing is written.
pub fn write_shaped_groups<W: Write>(groups: &[RolloutGroup], mut sink: W) -> Result<()> {
    for g in groups {
        for (i, r) in g.responses.iter().enumerate() {
            let missing = match (r.base_advantage, r.shaped.as_ref()) {
                (_, None) => Some("shaped advantages missing"),
                (None, Some(_)) => Some("base advantage missing"),
                (Some(a), Some(s)) if !a.is_finite() || s.iter().any(|v| !v.is_finite()) => {
                    Some("non-finite advantage")
                }
                _ => None,
            };
            if let Some(message) = missing {
                return Err(Error::Contract {
                    query_id: g.query_id.clone(),
                    response_index: i,
                    message: message.into(),
                });
            }
        }
    }

    writeln!(sink, "{FORMAT_HEADER}")?;
    for g in groups {
        for r in &g.responses {
            let rec = RecordOut {
                query_id: &g.query_id,
                tokens: &r.token_ids,
                entropies: &r.entropies,
                reward: r.reward,
                correct: u8::from(r.correct),
                base_advantage: r.base_advantage,
                shaped: r.shaped.as_deref(),
            };
            write_record(&mut sink, &rec)?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn write_record<W: Write>(sink: &mut W, rec: &RecordOut<'_>) -> Result<()> {
    serde_json::to_writer(&mut *sink, rec).map_err(std::io::Error::from)?;
    sink.write_all(b"\n")?;
    Ok(())
}

fn truncate(s: &str) -> String {
    s.chars().take(40).collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    query_id: String,
    tokens: Vec<TokenId>,
    #[serde(deserialize_with = "lenient_reals")]
    entropies: Vec<f64>,
    #[serde(deserialize_with = "lenient_real")]
    reward: f64,
    correct: u8,
    #[serde(default)]
    base_advantage: Option<f64>,
    #[serde(default)]
    shaped: Option<Vec<f64>>,
}

fn record_to_response(rec: RecordIn, line: usize) -> Result<(String, Response)> {
    let query_id = rec.query_id;
    let invalid = |message: String| Error::Validation {
        line,
        query_id: query_id.clone(),
        message,
    };
    if rec.correct > 1 {
        return Err(invalid(format!("`correct` must be 0 or 1, got {}", rec.correct)));
    }
    if rec.tokens.len() != rec.entropies.len() {
        return Err(invalid(format!(
            "{} tokens but {} entropies",
            rec.tokens.len(),
            rec.entropies.len()
        )));
    }
    let mut response = Response::new(rec.tokens, rec.entropies, rec.reward, rec.correct == 1).map_err(|e| match e {
        Error::InvalidResponse(m) => invalid(m),
        other => other,
    })?;
    if let Some(a) = rec.base_advantage {
        response.set_base_advantage(a);
    }
    if let Some(s) = rec.shaped {
        response.set_shaped(s).map_err(|e| invalid(e.to_string()))?;
    }
    Ok((query_id, response))
}

#[derive(Serialize)]
struct RecordOut<'a> {
    query_id: &'a str,
    tokens: &'a [TokenId],
    entropies: &'a [f64],
    reward: f64,
    correct: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_advantage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shaped: Option<&'a [f64]>,
}

/// A real that may also be spelled as a string (`"NaN"`, `"inf"`, ...), so
/// that non-finite values reach validation and are rejected there with the
/// query id attached instead of failing as an opaque syntax error.
struct LenientReal(f64);

impl<'de> Deserialize<'de> for LenientReal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct RealVisitor;

        impl Visitor<'_> for RealVisitor {
            type Value = LenientReal;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a numeric string")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<LenientReal, E> {
                Ok(LenientReal(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<LenientReal, E> {
                Ok(LenientReal(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<LenientReal, E> {
                Ok(LenientReal(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<LenientReal, E> {
                v.trim()
                    .parse::<f64>()
                    .map(LenientReal)
                    .map_err(|_| E::invalid_value(de::Unexpected::Str(v), &self))
            }
        }

        d.deserialize_any(RealVisitor)
    }
}

fn lenient_real<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    LenientReal::deserialize(d).map(|r| r.0)
}

fn lenient_reals<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    struct SeqVisitor;

    impl<'de> Visitor<'de> for SeqVisitor {
        type Value = Vec<f64>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("an array of reals")
        }

        fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Vec<f64>, A::Error> {
            let mut out = Vec::with_capacity(seq.size_hint().unwrap_or(0));
            while let Some(LenientReal(v)) = seq.next_element()? {
                out.push(v);
            }
            Ok(out)
        }
    }

    d.deserialize_seq(SeqVisitor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(ids: &[u32], correct: bool) -> Response {
        let ents = ids.iter().map(|&t| f64::from(t) * 0.25).collect();
        Response::new(ids.to_vec(), ents, if correct { 1.0 } else { 0.0 }, correct).unwrap()
    }

    fn load_str(s: &str) -> Result<Vec<RolloutGroup>> {
        load_rollout_groups(s.as_bytes())
    }

    #[test]
    fn empty_stream_is_empty() {
        assert!(load_str("").unwrap().is_empty());
        assert!(load_str("#less-rollouts v1\n").unwrap().is_empty());
    }

    #[test]
    fn one_group_two_responses() {
        let g = RolloutGroup::new("q", vec![resp(&[1, 2, 3], true), resp(&[4, 5, 6, 7], false)]);
        let mut buf = Vec::new();
        write_rollout_groups(std::slice::from_ref(&g), &mut buf).unwrap();
        let back = load_str(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].size(), 2);
        assert_eq!(back[0].responses[0].len(), 3);
        assert_eq!(back[0].responses[1].len(), 4);
        assert_eq!(back[0], g);
    }

    #[test]
    fn nan_entropy_is_a_validation_error() {
        let text = "#less-rollouts v1\n\
            {\"query_id\":\"q7\",\"tokens\":[1,2],\"entropies\":[0.5,\"NaN\"],\"reward\":1,\"correct\":1}\n";
        match load_str(text) {
            Err(Error::Validation { line, query_id, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(query_id, "q7");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn infinite_and_negative_entropies_rejected() {
        for bad in ["\"inf\"", "\"-Infinity\"", "-0.5"] {
            let text = format!(
                "#less-rollouts v1\n{{\"query_id\":\"q\",\"tokens\":[1],\"entropies\":[{bad}],\"reward\":0,\"correct\":0}}\n"
            );
            assert!(matches!(load_str(&text), Err(Error::Validation { .. })), "{bad}");
        }
    }

    #[test]
    fn length_mismatch_names_query() {
        let text = "#less-rollouts v1\n\
            {\"query_id\":\"alpha\",\"tokens\":[1,2,3],\"entropies\":[0.5,0.1],\"reward\":0,\"correct\":0}\n";
        let err = load_str(text).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "#less-rollouts v1\n\
            {\"query_id\":\"a\",\"tokens\":[1],\"entropies\":[0.5],\"reward\":0,\"correct\":0}\n\
            {\"query_id\":\"a\",\"tokens\":[1],\"entropies\":[0.5],\"reward\":0,\"correct\":0}\n\
            {\"query_id\":\"a\",\"tokens\":[1 \n";
        match load_str(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_header_is_parse_error() {
        let text = "{\"query_id\":\"a\",\"tokens\":[1],\"entropies\":[0.5],\"reward\":0,\"correct\":0}\n";
        assert!(matches!(load_str(text), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn bad_correct_flag_and_empty_tokens() {
        let t1 =
            "#less-rollouts v1\n{\"query_id\":\"a\",\"tokens\":[1],\"entropies\":[0.5],\"reward\":0,\"correct\":2}\n";
        assert!(matches!(load_str(t1), Err(Error::Validation { .. })));
        let t2 = "#less-rollouts v1\n{\"query_id\":\"a\",\"tokens\":[],\"entropies\":[],\"reward\":0,\"correct\":0}\n";
        assert!(matches!(load_str(t2), Err(Error::Validation { .. })));
    }

    #[test]
    fn contiguous_query_ids_group_and_singletons_are_kept() {
        let text = "#less-rollouts v1\n\
            {\"query_id\":\"a\",\"tokens\":[1],\"entropies\":[0.5],\"reward\":0,\"correct\":0}\n\
            {\"query_id\":\"a\",\"tokens\":[2],\"entropies\":[0.5],\"reward\":1,\"correct\":1}\n\
            \n\
            {\"query_id\":\"b\",\"tokens\":[3],\"entropies\":[0.5],\"reward\":1,\"correct\":1}\n\
            {\"query_id\":\"a\",\"tokens\":[4],\"entropies\":[0.5],\"reward\":1,\"correct\":1}\n";
        let groups = load_str(text).unwrap();
        let shape: Vec<(&str, usize)> = groups.iter().map(|g| (g.query_id.as_str(), g.size())).collect();
        assert_eq!(shape, vec![("a", 2), ("b", 1), ("a", 1)]);
        assert!(groups[1].is_undersized());
    }

    #[test]
    fn unshaped_response_is_a_contract_error() {
        let mut a = resp(&[1, 2], true);
        a.set_base_advantage(1.0);
        a.set_shaped(vec![1.0, 1.0]).unwrap();
        let mut b = resp(&[3], false);
        b.set_base_advantage(-1.0);
        let g = RolloutGroup::new("qq", vec![a, b]);
        match write_shaped_groups(&[g], Vec::new()) {
            Err(Error::Contract {
                query_id,
                response_index,
                ..
            }) => {
                assert_eq!(query_id, "qq");
                assert_eq!(response_index, 1);
            }
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn shaped_round_trip_is_byte_identical() {
        let mut a = resp(&[1, 2, 3], true);
        a.set_base_advantage(0.1 + 0.2);
        a.set_shaped(vec![1.0 / 3.0, -0.0, 1e-300]).unwrap();
        let mut b = resp(&[9], false);
        b.set_base_advantage(-2.5);
        b.set_shaped(vec![-2.5]).unwrap();
        let groups = vec![RolloutGroup::new("x", vec![a, b])];

        let mut first = Vec::new();
        write_shaped_groups(&groups, &mut first).unwrap();
        let loaded = load_rollout_groups(first.as_slice()).unwrap();
        assert_eq!(loaded, groups);
        let mut second = Vec::new();
        write_shaped_groups(&loaded, &mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn set_shaped_checks_length() {
        let mut a = resp(&[1, 2, 3], true);
        assert!(a.set_shaped(vec![0.0; 2]).is_err());
        assert!(a.shaped().is_none());
    }
}
