//! Per-response entropy thresholding and span extraction.
//!
//! Each response gets its own threshold `τ`, the nearest-rank `h`-quantile of
//! its token entropies. Tokens at or above `τ` are high-entropy; maximal runs
//! of the remaining tokens become fragments (shorter than the minimum segment
//! length) or segments.

use crate::error::{Error, Result};
use crate::rollout::{Response, TokenId};

pub const DEFAULT_QUANTILE: f64 = 0.8;
pub const DEFAULT_MIN_SEG_LEN: usize = 5;

// Absorbs representation error in `h * n` so that e.g. h = 0.7, n = 10 gives
// rank 7 rather than 8.
const RANK_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntropyLabel {
    High,
    Low,
}

/// A contiguous low-entropy span of one response. `start` and `end` are
/// inclusive token offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub token_ids: Vec<TokenId>,
    pub response_index: usize,
    pub start: usize,
    pub end: usize,
}

#[allow(clippy::len_without_is_empty)]
impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn offsets(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// High-entropy offsets, fragments and segments of one response. Together
/// they cover every token offset exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyStructures {
    pub threshold: f64,
    pub high: Vec<usize>,
    pub frags: Vec<Segment>,
    pub segs: Vec<Segment>,
}

impl EntropyStructures {
    pub fn low_token_count(&self) -> usize {
        self.frags.iter().chain(&self.segs).map(Segment::len).sum()
    }

    pub fn seg_token_count(&self) -> usize {
        self.segs.iter().map(Segment::len).sum()
    }
}

/// Nearest-rank `h`-quantile: sort ascending and take index `ceil(h·n) − 1`,
/// clamped to `[0, n − 1]`.
pub fn entropy_threshold(entropies: &[f64], h: f64) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::domain("entropy threshold of an empty sequence"));
    }
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::domain(format!("quantile {h} outside [0, 1]")));
    }
    if entropies.iter().any(|e| !e.is_finite()) {
        return Err(Error::domain("entropy threshold over non-finite values"));
    }
    let n = entropies.len();
    let rank = (h * n as f64 - RANK_SLACK).ceil().max(1.0) as usize;
    let idx = rank.min(n) - 1;
    let mut scratch = entropies.to_vec();
    let (_, nth, _) = scratch.select_nth_unstable_by(idx, f64::total_cmp);
    Ok(*nth)
}

pub fn classify_entropies(entropies: &[f64], threshold: f64) -> Vec<EntropyLabel> {
    entropies
        .iter()
        .map(|&e| {
            if e >= threshold {
                EntropyLabel::High
            } else {
                EntropyLabel::Low
            }
        })
        .collect()
}

/// Labels each token HIGH when its entropy is at least `threshold`.
pub fn classify_tokens(response: &Response, threshold: f64) -> Vec<EntropyLabel> {
    classify_entropies(response.entropies(), threshold)
}

/// Splits a response into high-entropy offsets, fragments and segments.
pub fn extract_structures(
    response: &Response,
    response_index: usize,
    h: f64,
    min_seg_len: usize,
) -> Result<EntropyStructures> {
    if min_seg_len == 0 {
        return Err(Error::domain("minimum segment length must be at least 1"));
    }
    let threshold = entropy_threshold(response.entropies(), h)?;
    let labels = classify_tokens(response, threshold);
    Ok(structures_from_labels(
        response.token_ids(),
        &labels,
        threshold,
        response_index,
        min_seg_len,
    ))
}

/// Run-length pass over precomputed labels.
pub fn structures_from_labels(
    token_ids: &[TokenId],
    labels: &[EntropyLabel],
    threshold: f64,
    response_index: usize,
    min_seg_len: usize,
) -> EntropyStructures {
    debug_assert_eq!(token_ids.len(), labels.len());
    let mut out = EntropyStructures {
        threshold,
        high: Vec::new(),
        frags: Vec::new(),
        segs: Vec::new(),
    };

    let push_run = |start: usize, end: usize, out: &mut EntropyStructures| {
        let seg = Segment {
            token_ids: token_ids[start..=end].to_vec(),
            response_index,
            start,
            end,
        };
        if seg.len() >= min_seg_len {
            out.segs.push(seg);
        } else {
            out.frags.push(seg);
        }
    };

    let mut run_start: Option<usize> = None;
    for (j, label) in labels.iter().enumerate() {
        match label {
            EntropyLabel::High => {
                if let Some(s) = run_start.take() {
                    push_run(s, j - 1, &mut out);
                }
                out.high.push(j);
            }
            EntropyLabel::Low => {
                run_start.get_or_insert(j);
            }
        }
    }
    if let Some(s) = run_start {
        push_run(s, labels.len() - 1, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use EntropyLabel::{High as H, Low as L};

    /// Smallest sample value `v` with at least a fraction `h` of the sample at or below it.
    fn brute_quantile(xs: &[f64], h: f64) -> f64 {
        let n = xs.len() as f64;
        let mut candidates: Vec<f64> = xs.to_vec();
        candidates.sort_by(f64::total_cmp);
        for v in candidates.iter().copied() {
            let below = xs.iter().filter(|&&x| x <= v).count() as f64;
            if below / n >= h {
                return v;
            }
        }
        *candidates.last().unwrap()
    }

    fn response_with(ids: Vec<u32>, ents: Vec<f64>) -> Response {
        Response::new(ids, ents, 0.0, false).unwrap()
    }

    #[test]
    fn constant_entropies_threshold_and_all_high() {
        let ents = [1.0; 4];
        let tau = entropy_threshold(&ents, 0.8).unwrap();
        assert_eq!(tau, 1.0);
        assert!(classify_entropies(&ents, tau).iter().all(|&l| l == H));
    }

    #[test]
    fn tenths_at_point_eight() {
        let ents: Vec<f64> = (1..=10).map(|i| f64::from(i) / 10.0).collect();
        let tau = entropy_threshold(&ents, 0.8).unwrap();
        assert_eq!(tau, 0.8);
        assert_eq!(tau, brute_quantile(&ents, 0.8));
    }

    #[test]
    fn extreme_quantiles() {
        let ents = [0.3, 0.9, 0.1, 0.5];
        assert_eq!(entropy_threshold(&ents, 0.0).unwrap(), 0.1);
        assert_eq!(entropy_threshold(&ents, 1.0).unwrap(), 0.9);
        assert!(entropy_threshold(&[], 0.5).is_err());
        assert!(entropy_threshold(&ents, 1.5).is_err());
    }

    #[test]
    fn classify_examples() {
        let r = response_with(vec![1, 2, 3], vec![0.9, 0.1, 0.1]);
        assert_eq!(classify_tokens(&r, 0.5), vec![H, L, L]);
        assert_eq!(classify_tokens(&r, 1.0), vec![L, L, L]);
        assert_eq!(classify_tokens(&r, 0.9), vec![H, L, L]);
    }

    #[test]
    fn run_length_example() {
        let labels = [H, L, L, L, L, L, H, L, L];
        let ids: Vec<u32> = (0..9).collect();
        let s = structures_from_labels(&ids, &labels, 0.5, 3, 5);
        assert_eq!(s.high, vec![0, 6]);
        assert_eq!(s.segs.len(), 1);
        assert_eq!((s.segs[0].start, s.segs[0].end), (1, 5));
        assert_eq!(s.segs[0].token_ids, vec![1, 2, 3, 4, 5]);
        assert_eq!(s.segs[0].response_index, 3);
        assert_eq!(s.frags.len(), 1);
        assert_eq!((s.frags[0].start, s.frags[0].end), (7, 8));
    }

    #[test]
    fn all_high_and_short_all_low() {
        let ids = [5u32; 4];
        let s = structures_from_labels(&ids, &[H; 4], 0.0, 0, 5);
        assert!(s.segs.is_empty() && s.frags.is_empty());
        assert_eq!(s.high, vec![0, 1, 2, 3]);

        let s = structures_from_labels(&ids, &[L; 4], 1.0, 0, 5);
        assert!(s.segs.is_empty());
        assert_eq!(s.frags.len(), 1);
        assert_eq!(s.frags[0].len(), 4);
    }

    #[test]
    fn zero_min_len_rejected() {
        let r = response_with(vec![1], vec![0.0]);
        assert!(extract_structures(&r, 0, 0.8, 0).is_err());
    }

    fn entropy_vec() -> impl Strategy<Value = Vec<f64>> {
        // Coarse grid so ties at the threshold are common.
        prop::collection::vec((0u8..12).prop_map(|k| f64::from(k) * 0.25), 1..50)
    }

    proptest! {
        #[test]
        fn threshold_matches_brute_quantile(ents in entropy_vec(), hk in 0u8..=20) {
            let h = f64::from(hk) / 20.0;
            prop_assert_eq!(entropy_threshold(&ents, h).unwrap(), brute_quantile(&ents, h));
        }

        #[test]
        fn partition_and_maximality(ents in entropy_vec(), hk in 0u8..=10, mu in 1usize..8) {
            let h = f64::from(hk) / 10.0;
            let ids: Vec<u32> = (0..ents.len() as u32).collect();
            let r = response_with(ids, ents.clone());
            let s = extract_structures(&r, 0, h, mu).unwrap();

            let mut seen = vec![0u8; ents.len()];
            for &j in &s.high { seen[j] += 1; prop_assert!(ents[j] >= s.threshold); }
            for sp in s.frags.iter().chain(&s.segs) {
                for j in sp.offsets() { seen[j] += 1; prop_assert!(ents[j] < s.threshold); }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert!(s.frags.iter().all(|f| f.len() < mu));
            prop_assert!(s.segs.iter().all(|f| f.len() >= mu));

            let mut spans: Vec<(usize, usize)> =
                s.frags.iter().chain(&s.segs).map(|sp| (sp.start, sp.end)).collect();
            spans.sort_unstable();
            for w in spans.windows(2) {
                prop_assert!(w[1].0 > w[0].1 + 1, "adjacent spans {:?}", w);
            }
        }

        #[test]
        fn raising_min_len_only_moves_spans(ents in entropy_vec(), mu in 1usize..7) {
            let ids: Vec<u32> = (0..ents.len() as u32).collect();
            let r = response_with(ids, ents);
            let lo = extract_structures(&r, 0, 0.8, mu).unwrap();
            let hi = extract_structures(&r, 0, 0.8, mu + 1).unwrap();
            prop_assert_eq!(&lo.high, &hi.high);
            prop_assert_eq!(lo.low_token_count(), hi.low_token_count());
            prop_assert!(hi.segs.len() <= lo.segs.len());
            prop_assert_eq!(lo.segs.len() + lo.frags.len(), hi.segs.len() + hi.frags.len());
        }
    }
}
