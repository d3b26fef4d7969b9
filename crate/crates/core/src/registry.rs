//! Group-level registry of maximal low-entropy segments.
//!
//! Every segment of every response in a group is a candidate. Identical
//! candidates are merged and any candidate strictly contained in another is
//! dropped, so the surviving set is containment-free. Each survivor then
//! records how many correct and incorrect responses contain it inside one of
//! their segments; a response counts at most once per entry.
//!
//! Matching is exact token-id equality. Window lookups go through a
//! polynomial rolling hash keyed by `(length, hash)` and are always confirmed
//! by slice comparison, so hash collisions cost time but never correctness.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rollout::{RolloutGroup, TokenId};
use crate::segmentation::EntropyStructures;

/// Where a registry entry was observed: token offset `start` of response
/// `response_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Witness {
    pub response_index: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentStats {
    pub key: Vec<TokenId>,
    /// Correct responses containing the key, `n_r`.
    pub n_correct: usize,
    /// Incorrect responses containing the key, `n_w`.
    pub n_incorrect: usize,
    pub occurrences: Vec<Witness>,
}

impl SegmentStats {
    pub fn support(&self) -> usize {
        self.n_correct + self.n_incorrect
    }
}

#[derive(Debug, Clone, Default)]
pub struct SegmentRegistry {
    entries: Vec<SegmentStats>,
    /// `covering[i][k]`: entry whose key equals segment `k` of response `i`.
    covering: Vec<Vec<Option<usize>>>,
}

impl SegmentRegistry {
    pub fn entries(&self) -> &[SegmentStats] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the entry matching segment `seg_index` of response
    /// `response_index` exactly, if that segment survived deduplication.
    pub fn covering_index(&self, response_index: usize, seg_index: usize) -> Option<usize> {
        self.covering
            .get(response_index)
            .and_then(|v| v.get(seg_index))
            .copied()
            .flatten()
    }

    pub fn covering_entry(&self, response_index: usize, seg_index: usize) -> Option<&SegmentStats> {
        self.covering_index(response_index, seg_index).map(|e| &self.entries[e])
    }
}

/// True iff `inner` occurs as a contiguous run inside `outer`.
pub fn is_contained(inner: &[TokenId], outer: &[TokenId]) -> bool {
    if inner.len() > outer.len() {
        return false;
    }
    if inner.is_empty() {
        return true;
    }
    outer.windows(inner.len()).any(|w| w == inner)
}

/// Containment with `inner` strictly shorter than `outer`; equal sequences
/// are contained in each other but not strictly.
pub fn is_strictly_contained(inner: &[TokenId], outer: &[TokenId]) -> bool {
    inner.len() < outer.len() && is_contained(inner, outer)
}

/// Counts `(n_r, n_w)` for `key` by direct scan: a response counts once if
/// any of its segments contains `key`.
pub fn count_occurrences(key: &[TokenId], group: &RolloutGroup, structures: &[EntropyStructures]) -> (usize, usize) {
    let mut n_correct = 0;
    let mut n_incorrect = 0;
    for (response, s) in group.responses.iter().zip(structures) {
        if s.segs.iter().any(|seg| is_contained(key, &seg.token_ids)) {
            if response.correct() {
                n_correct += 1;
            } else {
                n_incorrect += 1;
            }
        }
    }
    (n_correct, n_incorrect)
}

/// Builds the maximal segment set of a group and counts every entry.
///
/// `structures[i]` must belong to `group.responses[i]` and all of them must
/// have been extracted with the same quantile and minimum length.
pub fn build_registry(group: &RolloutGroup, structures: &[EntropyStructures]) -> Result<SegmentRegistry> {
    if structures.len() != group.size() {
        return Err(Error::domain(format!(
            "query `{}`: {} structure sets for {} responses",
            group.query_id,
            structures.len(),
            group.size()
        )));
    }

    let max_len = structures
        .iter()
        .flat_map(|s| s.segs.iter().map(|seg| seg.token_ids.len()))
        .max()
        .unwrap_or(0);
    let hasher = WindowHasher::new(max_len);

    // Unique candidates in first-seen order: response order, then span order.
    let mut seen: HashMap<&[TokenId], usize> = HashMap::new();
    let mut candidates: Vec<&[TokenId]> = Vec::new();
    for s in structures {
        for seg in &s.segs {
            seen.entry(seg.token_ids.as_slice()).or_insert_with(|| {
                candidates.push(seg.token_ids.as_slice());
                candidates.len() - 1
            });
        }
    }

    let candidate_index = LengthHashIndex::build(&hasher, &candidates);
    let mut removed = vec![false; candidates.len()];
    for cand in &candidates {
        let prefix = hasher.prefix(cand);
        for &len in candidate_index.lengths.iter().take_while(|&&l| l < cand.len()) {
            for start in 0..=cand.len() - len {
                let window = &cand[start..start + len];
                let h = hasher.window(&prefix, start, len);
                for &idx in candidate_index.lookup(len, h) {
                    if candidates[idx] == window {
                        removed[idx] = true;
                    }
                }
            }
        }
    }

    let keys: Vec<&[TokenId]> = candidates
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(c, _)| *c)
        .collect();
    let entry_index = LengthHashIndex::build(&hasher, &keys);

    let mut entries: Vec<SegmentStats> = keys
        .iter()
        .map(|k| SegmentStats {
            key: k.to_vec(),
            n_correct: 0,
            n_incorrect: 0,
            occurrences: Vec::new(),
        })
        .collect();
    let mut last_counted: Vec<Option<usize>> = vec![None; entries.len()];
    let mut covering = Vec::with_capacity(group.size());

    for (i, (response, s)) in group.responses.iter().zip(structures).enumerate() {
        let mut cover = vec![None; s.segs.len()];
        for (k, seg) in s.segs.iter().enumerate() {
            let span = seg.token_ids.as_slice();
            let prefix = hasher.prefix(span);
            for &len in entry_index.lengths.iter().take_while(|&&l| l <= span.len()) {
                for start in 0..=span.len() - len {
                    let window = &span[start..start + len];
                    let h = hasher.window(&prefix, start, len);
                    for &e in entry_index.lookup(len, h) {
                        if keys[e] != window {
                            continue;
                        }
                        entries[e].occurrences.push(Witness {
                            response_index: i,
                            start: seg.start + start,
                        });
                        if len == span.len() {
                            cover[k] = Some(e);
                        }
                        if last_counted[e] != Some(i) {
                            last_counted[e] = Some(i);
                            if response.correct() {
                                entries[e].n_correct += 1;
                            } else {
                                entries[e].n_incorrect += 1;
                            }
                        }
                    }
                }
            }
        }
        covering.push(cover);
    }

    Ok(SegmentRegistry { entries, covering })
}

const HASH_BASE: u64 = 0x9E37_79B9_7F4A_7C15 | 1;

/// Polynomial hash over `Z / 2^64` with O(1) window extraction.
struct WindowHasher {
    powers: Vec<u64>,
}

impl WindowHasher {
    fn new(max_len: usize) -> Self {
        let mut powers = Vec::with_capacity(max_len + 1);
        let mut p = 1u64;
        for _ in 0..=max_len {
            powers.push(p);
            p = p.wrapping_mul(HASH_BASE);
        }
        WindowHasher { powers }
    }

    fn prefix(&self, seq: &[TokenId]) -> Vec<u64> {
        let mut out = Vec::with_capacity(seq.len() + 1);
        let mut h = 0u64;
        out.push(h);
        for &t in seq {
            h = h.wrapping_mul(HASH_BASE).wrapping_add(u64::from(t) + 1);
            out.push(h);
        }
        out
    }

    fn window(&self, prefix: &[u64], start: usize, len: usize) -> u64 {
        prefix[start + len].wrapping_sub(prefix[start].wrapping_mul(self.powers[len]))
    }

    fn whole(&self, seq: &[TokenId]) -> u64 {
        *self.prefix(seq).last().unwrap()
    }
}

struct LengthHashIndex {
    /// Distinct key lengths, ascending.
    lengths: Vec<usize>,
    buckets: HashMap<(usize, u64), Vec<usize>>,
}

impl LengthHashIndex {
    fn build(hasher: &WindowHasher, keys: &[&[TokenId]]) -> Self {
        let mut buckets: HashMap<(usize, u64), Vec<usize>> = HashMap::new();
        for (i, k) in keys.iter().enumerate() {
            buckets.entry((k.len(), hasher.whole(k))).or_default().push(i);
        }
        let mut lengths: Vec<usize> = keys.iter().map(|k| k.len()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        LengthHashIndex { lengths, buckets }
    }

    fn lookup(&self, len: usize, hash: u64) -> &[usize] {
        self.buckets.get(&(len, hash)).map(Vec::as_slice).unwrap_or(&[])
    }
}
