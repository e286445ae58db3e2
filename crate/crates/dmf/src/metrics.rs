//! Automatic evaluation: max-over-reference BLEU-4, pooled perplexity,
//! average length, and Spearman rank correlation.
//!
//! Sentence BLEU on short comments hits zero n-gram counts constantly,
//! so zero precisions are floored at 1e-9 rather than zeroing the whole
//! score. Per-candidate scores are the maximum over the reference set,
//! and the corpus number is their mean. Both choices are echoed in the
//! report's `metadata` block so downstream readers see them.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::vocab::EOS;

/// Floor for zero n-gram precisions.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified n-gram precision: candidate n-gram hits are clipped at the
/// reference count. Returns the epsilon floor when the numerator or the
/// candidate's n-gram count is zero.
fn precision(candidate: &[usize], reference: &[usize], n: usize) -> f64 {
    let total = candidate.len().saturating_sub(n - 1);
    if total == 0 {
        return BLEU_EPSILON;
    }
    let ref_counts = ngram_counts(reference, n);
    let mut hits = 0usize;
    for (gram, count) in ngram_counts(candidate, n) {
        hits += count.min(ref_counts.get(gram).copied().unwrap_or(0));
    }
    if hits == 0 {
        BLEU_EPSILON
    } else {
        hits as f64 / total as f64
    }
}

/// Sentence BLEU-4 against a single reference: geometric mean of the
/// modified 1..4-gram precisions times the brevity penalty
/// `exp(1 - r/c)` applied when the candidate is shorter.
pub fn bleu4_sentence(candidate: &[usize], reference: &[usize]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::EmptyInput("bleu candidate"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("bleu reference"));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        log_sum += precision(candidate, reference, n).ln();
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(bp * (log_sum / 4.0).exp())
}

/// A pool of references with an optional 4-gram index for pruning.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    refs: Vec<Vec<usize>>,
    index: Option<HashMap<[usize; 4], Vec<usize>>>,
}

impl ReferenceSet {
    pub fn new(refs: Vec<Vec<usize>>) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::EmptyInput("reference set"));
        }
        if refs.iter().any(Vec::is_empty) {
            return Err(Error::EmptyInput("reference comment"));
        }
        Ok(ReferenceSet { refs, index: None })
    }

    /// Same pool with the 4-gram inverted index built.
    pub fn indexed(refs: Vec<Vec<usize>>) -> Result<Self> {
        let mut set = ReferenceSet::new(refs)?;
        let mut index: HashMap<[usize; 4], Vec<usize>> = HashMap::new();
        for (i, r) in set.refs.iter().enumerate() {
            for window in r.windows(4) {
                let key = [window[0], window[1], window[2], window[3]];
                let ids = index.entry(key).or_default();
                if ids.last() != Some(&i) {
                    ids.push(i);
                }
            }
        }
        set.index = Some(index);
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn references(&self) -> &[Vec<usize>] {
        &self.refs
    }
}

/// Maximum sentence BLEU-4 over the pool.
pub fn bleu4_max(candidate: &[usize], refs: &ReferenceSet) -> Result<f64> {
    Ok(bleu4_best(candidate, refs)?.1)
}

/// Index of the best-matching reference (first on ties) and its score.
///
/// With an index present, only references sharing a 4-gram with the
/// candidate are scored, and the result is kept when it provably beats
/// every unscored reference: a reference with no shared 4-gram scores at
/// most `BLEU_EPSILON^(1/4)` (its 4-gram precision is floored and the
/// brevity penalty never exceeds one). The comparison is strict, so a tie
/// at the bound, where an unscored reference could share both the score
/// and an earlier index, still falls through to the full scan. Shared ids
/// are visited in ascending order, which keeps the first-on-ties rule
/// aligned with the exhaustive path.
pub fn bleu4_best(candidate: &[usize], refs: &ReferenceSet) -> Result<(usize, f64)> {
    if candidate.is_empty() {
        return Err(Error::EmptyInput("bleu candidate"));
    }
    if let Some(index) = &refs.index {
        let mut shared: Vec<usize> = candidate
            .windows(4)
            .filter_map(|w| index.get(&[w[0], w[1], w[2], w[3]]))
            .flatten()
            .copied()
            .collect();
        shared.sort_unstable();
        shared.dedup();
        let mut best = f64::NEG_INFINITY;
        let mut at = 0;
        for &i in &shared {
            let score = bleu4_sentence(candidate, &refs.refs[i])?;
            if score > best {
                best = score;
                at = i;
            }
        }
        if best > BLEU_EPSILON.powf(0.25) {
            return Ok((at, best));
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut at = 0;
    for (i, r) in refs.refs.iter().enumerate() {
        let score = bleu4_sentence(candidate, r)?;
        if score > best {
            best = score;
            at = i;
        }
    }
    Ok((at, best))
}

/// Corpus perplexity from natural-log probability streams, pooled over
/// every scored token: `2^(-mean(log2 p))`.
pub fn perplexity(streams: &[Vec<f64>]) -> Result<f64> {
    let n: usize = streams.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::EmptyInput("probability stream"));
    }
    let sum_log2: f64 = streams
        .iter()
        .flatten()
        .map(|lp| lp / std::f64::consts::LN_2)
        .sum();
    Ok(2f64.powf(-sum_log2 / n as f64))
}

/// Arithmetic mean of per-sentence perplexities; the non-default
/// aggregation, selected by config flag.
pub fn perplexity_per_sentence(streams: &[Vec<f64>]) -> Result<f64> {
    if streams.is_empty() {
        return Err(Error::EmptyInput("probability stream"));
    }
    let mut total = 0.0;
    for s in streams {
        total += perplexity(std::slice::from_ref(s))?;
    }
    Ok(total / streams.len() as f64)
}

/// Mean token count with end markers excluded.
pub fn avg_length(candidates: &[Vec<usize>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("candidates"));
    }
    let total: usize = candidates
        .iter()
        .map(|c| c.iter().filter(|&&t| t != EOS).count())
        .sum();
    Ok(total as f64 / candidates.len() as f64)
}

/// How the numbers in an [`EvalReport`] were aggregated.
#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct ReportMetadata {
    pub smoothing: &'static str,
    pub bleu_aggregation: &'static str,
    pub perplexity_aggregation: &'static str,
}

/// The evaluation summary: BLEU-4 as a percentage, perplexity, average
/// candidate length, and the candidate count.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub perplexity: f64,
    pub avg_length: f64,
    #[serde(rename = "n")]
    pub num_candidates: usize,
    pub metadata: ReportMetadata,
}

/// Scores a generated corpus: per-candidate max BLEU averaged and scaled
/// to a percentage, pooled (or per-sentence) perplexity over the
/// probability streams, and mean length. All three inputs are aligned
/// per clip.
pub fn corpus_report(
    candidates: &[Vec<usize>],
    streams: &[Vec<f64>],
    refs: &[ReferenceSet],
    per_sentence_ppl: bool,
) -> Result<EvalReport> {
    if candidates.len() != streams.len() {
        return Err(Error::Misaligned {
            what: "candidates vs probability streams",
            lhs: candidates.len(),
            rhs: streams.len(),
        });
    }
    if candidates.len() != refs.len() {
        return Err(Error::Misaligned {
            what: "candidates vs reference sets",
            lhs: candidates.len(),
            rhs: refs.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput("candidates"));
    }
    let mut bleu_total = 0.0;
    for (cand, rs) in candidates.iter().zip(refs) {
        bleu_total += bleu4_max(cand, rs)?;
    }
    let ppl = if per_sentence_ppl {
        perplexity_per_sentence(streams)?
    } else {
        perplexity(streams)?
    };
    Ok(EvalReport {
        bleu4: 100.0 * bleu_total / candidates.len() as f64,
        perplexity: ppl,
        avg_length: avg_length(candidates)?,
        num_candidates: candidates.len(),
        metadata: ReportMetadata {
            smoothing: "epsilon-floor-1e-9",
            bleu_aggregation: "mean-of-max",
            perplexity_aggregation: if per_sentence_ppl {
                "per-sentence-mean"
            } else {
                "token-pooled"
            },
        },
    })
}

/// Ranks with ties averaged: each run of equal values gets the mean of
/// the positions it covers.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
/// A constant input has no rank ordering and is rejected.
pub fn spearman_rank(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Misaligned {
            what: "rank lists",
            lhs: x.len(),
            rhs: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("rank pairs (need at least 2)"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Undefined("rank input must be finite".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        var_x += (a - mean) * (a - mean);
        var_y += (b - mean) * (b - mean);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(Error::Undefined(
            "rank correlation of a constant list".into(),
        ));
    }
    Ok(cov / (var_x * var_y).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn toks(s: &str) -> Vec<usize> {
        s.split_whitespace()
            .map(|w| w.bytes().fold(7usize, |a, b| a * 31 + b as usize) % 97)
            .collect()
    }

    #[test]
    fn four_fifths_cascade_lands_on_the_hand_value() {
        let score = bleu4_sentence(&toks("a b c d e"), &toks("a b c d f")).unwrap();
        assert!((score - 0.2f64.powf(0.25)).abs() < 1e-9, "{score}");
    }

    #[test]
    fn identity_of_length_four_or_more_is_one() {
        for s in ["a b c d", "w x y z q r"] {
            assert!((bleu4_sentence(&toks(s), &toks(s)).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_sentences_sit_on_the_floor() {
        let score = bleu4_sentence(&toks("a b c d"), &toks("p q r s")).unwrap();
        assert!(score <= BLEU_EPSILON * 1.0001);
        assert!(score > 0.0);
    }

    #[test]
    fn a_shorter_candidate_pays_the_brevity_penalty() {
        let score = bleu4_sentence(&toks("a b c d"), &toks("a b c d e")).unwrap();
        assert!((score - (1.0 - 5.0 / 4.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(bleu4_sentence(&[], &toks("a")).is_err());
        assert!(bleu4_sentence(&toks("a"), &[]).is_err());
        assert!(ReferenceSet::new(vec![]).is_err());
        assert!(ReferenceSet::new(vec![vec![]]).is_err());
    }

    #[test]
    fn repeated_candidate_grams_are_clipped() {
        // "the the the" against "the cat": one "the" in the reference, so
        // p1 = 1/3; every higher order is floored.
        let cand = vec![5, 5, 5];
        let reference = vec![5, 9];
        let score = bleu4_sentence(&cand, &reference).unwrap();
        let expect = ((1.0f64 / 3.0).ln() / 4.0 + 3.0 * BLEU_EPSILON.ln() / 4.0).exp();
        assert!((score - expect).abs() < 1e-15);
    }

    #[test]
    fn verbatim_membership_scores_one() {
        let refs = ReferenceSet::indexed(vec![toks("x y z w"), toks("a b c d e")]).unwrap();
        let score = bleu4_max(&toks("a b c d e"), &refs).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn a_single_reference_degenerates_to_sentence_bleu() {
        let cand = toks("a b c d e");
        let r = toks("a b c q e");
        let refs = ReferenceSet::new(vec![r.clone()]).unwrap();
        assert_eq!(
            bleu4_max(&cand, &refs).unwrap(),
            bleu4_sentence(&cand, &r).unwrap()
        );
    }

    fn sample(rng: &mut Rng, lo: usize, span: usize, vocab: usize) -> Vec<usize> {
        let len = lo + rng.below(span);
        (0..len).map(|_| rng.below(vocab)).collect()
    }

    #[test]
    fn adding_references_never_lowers_the_max() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let cand = sample(&mut rng, 5, 1, 12);
            let mut pool = vec![sample(&mut rng, 4, 1, 12)];
            let mut last = 0.0;
            for _ in 0..8 {
                let refs = ReferenceSet::new(pool.clone()).unwrap();
                let score = bleu4_max(&cand, &refs).unwrap();
                assert!(score >= last - 1e-15);
                last = score;
                pool.push(sample(&mut rng, 3, 5, 12));
            }
        }
    }

    #[test]
    fn the_index_never_changes_the_answer() {
        let mut rng = Rng::new(23);
        let pool: Vec<Vec<usize>> = (0..200).map(|_| sample(&mut rng, 2, 6, 9)).collect();
        let plain = ReferenceSet::new(pool.clone()).unwrap();
        let indexed = ReferenceSet::indexed(pool).unwrap();
        for _ in 0..60 {
            let cand = sample(&mut rng, 1, 7, 9);
            let (ai, a) = bleu4_best(&cand, &plain).unwrap();
            let (bi, b) = bleu4_best(&cand, &indexed).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(ai, bi);
        }
    }

    #[test]
    fn relabeling_the_vocabulary_changes_nothing() {
        let mut rng = Rng::new(31);
        let mut perm: Vec<usize> = (0..40).collect();
        rng.shuffle(&mut perm);
        let relabel = |xs: &[usize]| -> Vec<usize> { xs.iter().map(|&t| perm[t]).collect() };
        for _ in 0..40 {
            let cand: Vec<usize> = (0..5).map(|_| rng.below(40)).collect();
            let rf: Vec<usize> = (0..6).map(|_| rng.below(40)).collect();
            let a = bleu4_sentence(&cand, &rf).unwrap();
            let b = bleu4_sentence(&relabel(&cand), &relabel(&rf)).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_streams_invert_to_the_vocabulary_size() {
        let v = 37.0f64;
        let streams = vec![vec![-v.ln(); 4], vec![-v.ln(); 7]];
        let ppl = perplexity(&streams).unwrap();
        assert!((ppl - v).abs() < 1e-9 * v);
    }

    #[test]
    fn perplexity_is_at_least_one() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let streams: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.uniform(0.001, 1.0).ln()).collect())
                .collect();
            assert!(perplexity(&streams).unwrap() >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn pooled_and_per_sentence_aggregation_differ_on_uneven_streams() {
        let streams = vec![vec![0.5f64.ln()], vec![0.1f64.ln(), 0.1f64.ln()]];
        let pooled = perplexity(&streams).unwrap();
        let per = perplexity_per_sentence(&streams).unwrap();
        // Pooled: 2^(-(log2 .5 + 2 log2 .1)/3); per-sentence: (2 + 10)/2.
        assert!((per - 6.0).abs() < 1e-12);
        assert!((pooled - (0.5 * 0.1 * 0.1f64).powf(-1.0 / 3.0)).abs() < 1e-12);
        assert!((pooled - per).abs() > 0.1);
    }

    #[test]
    fn empty_streams_are_rejected() {
        assert!(perplexity(&[]).is_err());
        assert!(perplexity(&[vec![], vec![]]).is_err());
        assert!(perplexity_per_sentence(&[]).is_err());
    }

    #[test]
    fn end_markers_do_not_count_toward_length() {
        let cands = vec![vec![7, 8, 9, EOS], vec![5, EOS]];
        assert!((avg_length(&cands).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn a_perfect_single_candidate_reports_round_numbers() {
        let cand = toks("a b c d e");
        let refs = vec![ReferenceSet::new(vec![cand.clone(), toks("x y")]).unwrap()];
        let streams = vec![vec![-0.5; 6]];
        let report = corpus_report(&[cand], &streams, &refs, false).unwrap();
        assert!((report.bleu4 - 100.0).abs() < 1e-9);
        assert!((report.avg_length - 5.0).abs() < 1e-12);
        assert_eq!(report.num_candidates, 1);
        assert!((report.perplexity - 0.5f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn report_json_uses_the_published_field_names() {
        let refs = vec![ReferenceSet::new(vec![vec![4, 5, 6, 7]]).unwrap()];
        let report = corpus_report(&[vec![4, 5, 6, 7]], &[vec![-1.0]], &refs, false).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        for key in ["bleu4", "perplexity", "avg_length", "n", "metadata"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["metadata"]["smoothing"], "epsilon-floor-1e-9");
        assert_eq!(json["metadata"]["bleu_aggregation"], "mean-of-max");
    }

    #[test]
    fn misaligned_report_inputs_are_rejected() {
        let refs = vec![ReferenceSet::new(vec![vec![4]]).unwrap()];
        let err = corpus_report(&[vec![4], vec![5]], &[vec![-1.0]], &refs, false);
        assert!(matches!(err, Err(Error::Misaligned { .. })));
    }

    #[test]
    fn spearman_hand_values() {
        assert!((spearman_rank(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(
            (spearman_rank(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12
        );
        let rho = spearman_rank(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ties_take_average_ranks() {
        // Ranks of x: 1, 2.5, 2.5, 4 against 1..4: rho = 3/sqrt(10).
        let rho = spearman_rank(&[5.0, 7.0, 7.0, 9.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((rho - 3.0 / 10.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rank_inputs_are_errors() {
        assert!(matches!(
            spearman_rank(&[1.0, 2.0], &[1.0]),
            Err(Error::Misaligned { .. })
        ));
        assert!(spearman_rank(&[1.0], &[1.0]).is_err());
        assert!(matches!(
            spearman_rank(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::Undefined(_))
        ));
        assert!(matches!(
            spearman_rank(&[f64::NAN, 1.0], &[1.0, 2.0]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn monotone_transforms_leave_spearman_alone() {
        let mut rng = Rng::new(41);
        for _ in 0..20 {
            let x: Vec<f64> = (0..9).map(|_| rng.uniform(-4.0, 4.0)).collect();
            let y: Vec<f64> = (0..9).map(|_| rng.uniform(-4.0, 4.0)).collect();
            let a = spearman_rank(&x, &y).unwrap();
            let x2: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let y2: Vec<f64> = y.iter().map(|v| 3.0 * v + 1.0).collect();
            let b = spearman_rank(&x2, &y2).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}
