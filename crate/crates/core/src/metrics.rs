//! Evaluation metrics: pooled edit-distance rates (WER/PER/CER),
//! classification accuracy, and slot F1 with slot-value CER.
//!
//! Corpus rates are pooled — total edit operations over total reference
//! length — rather than averaged per utterance.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

// ── Edit distance ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EditStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub hits: usize,
    pub reference_length: usize,
}

impl EditStats {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S+I+D) / reference_length`; infinite when scoring a nonempty
    /// hypothesis against an empty reference.
    pub fn rate(&self) -> f64 {
        if self.reference_length == 0 {
            if self.edits() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.edits() as f64 / self.reference_length as f64
        }
    }

    pub fn merge(&mut self, other: &EditStats) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.hits += other.hits;
        self.reference_length += other.reference_length;
    }
}

/// Minimal-cost alignment with unit costs and a deterministic traceback
/// that prefers hit > substitution > deletion > insertion on ties.
pub fn edit_distance_stats<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditStats {
    let (m, n) = (reference.len(), hypothesis.len());
    let width = n + 1;
    let mut cost = vec![0usize; (m + 1) * width];
    for j in 0..=n {
        cost[j] = j;
    }
    for i in 1..=m {
        cost[i * width] = i;
        for j in 1..=n {
            let same = reference[i - 1] == hypothesis[j - 1];
            let diag = cost[(i - 1) * width + j - 1] + usize::from(!same);
            let del = cost[(i - 1) * width + j] + 1;
            let ins = cost[i * width + j - 1] + 1;
            cost[i * width + j] = diag.min(del).min(ins);
        }
    }

    let mut stats = EditStats {
        reference_length: m,
        ..EditStats::default()
    };
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let c = cost[i * width + j];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && c == cost[(i - 1) * width + j - 1]
        {
            stats.hits += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && c == cost[(i - 1) * width + j - 1] + 1 {
            stats.substitutions += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && c == cost[(i - 1) * width + j] + 1 {
            stats.deletions += 1;
            i -= 1;
        } else {
            stats.insertions += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(
        stats.hits + stats.substitutions + stats.deletions,
        stats.reference_length
    );
    stats
}

// ── Corpus rates ─────────────────────────────────────────────────────

fn pooled_stats<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> EditStats {
    let mut total = EditStats::default();
    for (r, h) in pairs {
        total.merge(&edit_distance_stats(r, h));
    }
    total
}

fn check_lengths(n_ref: usize, n_hyp: usize) -> Result<()> {
    if n_ref != n_hyp {
        return Err(Error::Input(format!(
            "reference/hypothesis list lengths differ: {n_ref} vs {n_hyp}"
        )));
    }
    Ok(())
}

/// Word error rate, pooled over the corpus.
pub fn wer(refs: &[String], hyps: &[String]) -> Result<f64> {
    check_lengths(refs.len(), hyps.len())?;
    let pairs: Vec<(Vec<&str>, Vec<&str>)> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| {
            (
                r.split_whitespace().collect(),
                h.split_whitespace().collect(),
            )
        })
        .collect();
    Ok(pooled_stats(&pairs).rate())
}

/// Character error rate, pooled over the corpus. Spaces count as symbols.
pub fn cer(refs: &[String], hyps: &[String]) -> Result<f64> {
    check_lengths(refs.len(), hyps.len())?;
    let pairs: Vec<(Vec<char>, Vec<char>)> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| (r.chars().collect(), h.chars().collect()))
        .collect();
    Ok(pooled_stats(&pairs).rate())
}

/// Phone error rate over pre-tokenized symbol sequences.
pub fn per(refs: &[Vec<String>], hyps: &[Vec<String>]) -> Result<f64> {
    check_lengths(refs.len(), hyps.len())?;
    let pairs: Vec<(Vec<&String>, Vec<&String>)> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| (r.iter().collect(), h.iter().collect()))
        .collect();
    Ok(pooled_stats(&pairs).rate())
}

// ── Slot scoring ─────────────────────────────────────────────────────

fn normalize_value(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Accumulated slot counts, mergeable across examples.
#[derive(Clone, Debug, Default)]
pub struct SlotStats {
    pub true_positives: usize,
    pub n_ref: usize,
    pub n_hyp: usize,
    pub value_edits: EditStats,
}

impl SlotStats {
    pub fn merge(&mut self, other: &SlotStats) {
        self.true_positives += other.true_positives;
        self.n_ref += other.n_ref;
        self.n_hyp += other.n_hyp;
        self.value_edits.merge(&other.value_edits);
    }

    pub fn f1(&self) -> f64 {
        if self.n_ref == 0 && self.n_hyp == 0 {
            return 1.0;
        }
        if self.n_ref == 0 || self.n_hyp == 0 {
            return 0.0;
        }
        let p = self.true_positives as f64 / self.n_hyp as f64;
        let r = self.true_positives as f64 / self.n_ref as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn value_cer(&self) -> f64 {
        self.value_edits.rate()
    }
}

/// Scores one hypothesis slot list against the reference.
///
/// A hypothesis slot is a true positive iff its type and normalized value
/// exactly match a distinct reference slot (greedy one-to-one in order).
/// Slot-value CER pools character edits over type-matched pairs, whether or
/// not their values agree.
pub fn slot_stats(refs: &[(String, String)], hyps: &[(String, String)]) -> SlotStats {
    let mut stats = SlotStats {
        n_ref: refs.len(),
        n_hyp: hyps.len(),
        ..SlotStats::default()
    };

    // exact matches (type + value), greedy in order
    let mut used = vec![false; refs.len()];
    for (ty, value) in hyps {
        let want = normalize_value(value);
        if let Some(i) = refs.iter().enumerate().position(|(i, (rty, rv))| {
            !used[i] && rty == ty && normalize_value(rv) == want
        }) {
            used[i] = true;
            stats.true_positives += 1;
        }
    }

    // type-level pairing for the value CER
    let mut paired = vec![false; refs.len()];
    for (ty, value) in hyps {
        if let Some(i) = refs
            .iter()
            .enumerate()
            .position(|(i, (rty, _))| !paired[i] && rty == ty)
        {
            paired[i] = true;
            let r: Vec<char> = normalize_value(&refs[i].1).chars().collect();
            let h: Vec<char> = normalize_value(value).chars().collect();
            stats.value_edits.merge(&edit_distance_stats(&r, &h));
        }
    }
    stats
}

/// `(F1, slot-value CER)` for one reference/hypothesis slot pair.
pub fn slot_f1(refs: &[(String, String)], hyps: &[(String, String)]) -> (f64, f64) {
    let stats = slot_stats(refs, hyps);
    (stats.f1(), stats.value_cer())
}

// ── Accuracy ─────────────────────────────────────────────────────────

/// Exact-match fraction; absent hypotheses (`None`) count as wrong.
pub fn accuracy(refs: &[String], hyps: &[Option<String>]) -> Result<f64> {
    check_lengths(refs.len(), hyps.len())?;
    if refs.is_empty() {
        return Err(Error::Input("accuracy over an empty list".into()));
    }
    let correct = refs
        .iter()
        .zip(hyps)
        .filter(|(r, h)| h.as_deref() == Some(r.as_str()))
        .count();
    Ok(correct as f64 / refs.len() as f64)
}

// ── Report ───────────────────────────────────────────────────────────

/// Per-task metric values, serializable as JSON and as `metric<TAB>value`
/// lines.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsReport {
    pub per_task: BTreeMap<String, BTreeMap<String, f64>>,
    pub n_examples: usize,
}

impl MetricsReport {
    pub fn insert(&mut self, task: &str, metric: &str, value: f64) {
        self.per_task
            .entry(task.to_string())
            .or_default()
            .insert(metric.to_string(), value);
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (task, metrics) in &self.per_task {
            for (metric, value) in metrics {
                out.push_str(&format!("{task}.{metric}\t{value}\n"));
            }
        }
        out.push_str(&format!("n_examples\t{}\n", self.n_examples));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    /// Exponential-time reference implementation.
    fn recursive_distance(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let diag = recursive_distance(ra, rb) + usize::from(x != y);
                let del = recursive_distance(ra, b) + 1;
                let ins = recursive_distance(a, rb) + 1;
                diag.min(del).min(ins)
            }
        }
    }

    #[test]
    fn equal_sequences_have_zero_rate() {
        let s = edit_distance_stats(&chars("hello"), &chars("hello"));
        assert_eq!(s.rate(), 0.0);
        assert_eq!(s.hits, 5);
    }

    #[test]
    fn single_substitution() {
        let s = edit_distance_stats(&chars("abc"), &chars("axc"));
        assert_eq!(
            (s.substitutions, s.insertions, s.deletions),
            (1, 0, 0)
        );
        assert!((s.rate() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stats_partition_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let la = rng.gen_range(0..8);
            let lb = rng.gen_range(0..8);
            let a: Vec<u8> = (0..la).map(|_| rng.gen_range(0..4u8)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.gen_range(0..4u8)).collect();
            let s = edit_distance_stats(&a, &b);
            assert_eq!(s.hits + s.substitutions + s.deletions, a.len());
        }
    }

    #[test]
    fn distance_matches_recursive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let la = rng.gen_range(0..=8);
            let lb = rng.gen_range(0..=8);
            let a: Vec<u8> = (0..la).map(|_| rng.gen_range(0..4u8)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.gen_range(0..4u8)).collect();
            assert_eq!(edit_distance_stats(&a, &b).edits(), recursive_distance(&a, &b));
        }
    }

    #[test]
    fn distance_value_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a: Vec<u8> = (0..rng.gen_range(0..7)).map(|_| rng.gen_range(0..3u8)).collect();
            let b: Vec<u8> = (0..rng.gen_range(0..7)).map(|_| rng.gen_range(0..3u8)).collect();
            assert_eq!(
                edit_distance_stats(&a, &b).edits(),
                edit_distance_stats(&b, &a).edits()
            );
        }
    }

    #[test]
    fn triangle_inequality_spot_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let a: Vec<u8> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..3u8)).collect();
            let b: Vec<u8> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..3u8)).collect();
            let c: Vec<u8> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..3u8)).collect();
            let ab = edit_distance_stats(&a, &b).edits();
            let bc = edit_distance_stats(&b, &c).edits();
            let ac = edit_distance_stats(&a, &c).edits();
            assert!(ac <= ab + bc);
        }
    }

    #[test]
    fn empty_reference_rates() {
        let s = edit_distance_stats::<char>(&[], &chars("xy"));
        assert!(s.rate().is_infinite());
        let s2 = edit_distance_stats::<char>(&[], &[]);
        assert_eq!(s2.rate(), 0.0);
    }

    #[test]
    fn wer_hand_case() {
        let refs = vec!["a b".to_string(), "c".to_string()];
        let hyps = vec!["a x".to_string(), "c".to_string()];
        assert!((wer(&refs, &hyps).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_hypotheses_score_zero() {
        let refs = vec!["a b c".to_string()];
        assert_eq!(wer(&refs, &refs).unwrap(), 0.0);
        assert_eq!(cer(&refs, &refs).unwrap(), 0.0);
    }

    #[test]
    fn pooled_differs_from_per_utterance_mean() {
        // pooled: 1 edit over 5 reference words = 0.2
        // per-utterance mean: (1/1 + 0/4) / 2 = 0.5
        let refs = vec!["a".to_string(), "b c d e".to_string()];
        let hyps = vec!["x".to_string(), "b c d e".to_string()];
        let pooled = wer(&refs, &hyps).unwrap();
        assert!((pooled - 0.2).abs() < 1e-15);

        let per_utt: f64 = refs
            .iter()
            .zip(&hyps)
            .map(|(r, h)| wer(&[r.clone()], &[h.clone()]).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((per_utt - 0.5).abs() < 1e-15);
        assert!(pooled != per_utt);
    }

    #[test]
    fn wer_invariant_to_utterance_order() {
        let refs = vec!["a b".to_string(), "c d e".to_string()];
        let hyps = vec!["a x".to_string(), "c e".to_string()];
        let forward = wer(&refs, &hyps).unwrap();
        let refs_r: Vec<String> = refs.iter().rev().cloned().collect();
        let hyps_r: Vec<String> = hyps.iter().rev().cloned().collect();
        assert_eq!(forward, wer(&refs_r, &hyps_r).unwrap());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(wer(&["a".to_string()], &[]).is_err());
    }

    fn slots(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items
            .iter()
            .map(|(t, v)| (t.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn identical_slots_perfect_score() {
        let r = slots(&[("time", "ten"), ("city", "rome")]);
        let (f1, cer) = slot_f1(&r, &r);
        assert_eq!(f1, 1.0);
        assert_eq!(cer, 0.0);
    }

    #[test]
    fn empty_hypothesis_recall_zero() {
        let r = slots(&[("time", "ten")]);
        let (f1, _) = slot_f1(&r, &[]);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn slot_value_cer_pools_type_matched_pairs() {
        let r = slots(&[("time", "ten"), ("city", "rome")]);
        let h = slots(&[("time", "ten"), ("city", "roma")]);
        let (f1, cer) = slot_f1(&r, &h);
        assert!((f1 - 0.5).abs() < 1e-15, "one exact match of two");
        assert!((cer - 1.0 / 7.0).abs() < 1e-15, "one edit over 7 chars");
    }

    #[test]
    fn slot_f1_is_order_invariant() {
        let r = slots(&[("time", "ten"), ("city", "rome")]);
        let h = slots(&[("city", "rome"), ("time", "ten")]);
        let (f1, cer) = slot_f1(&r, &h);
        assert_eq!(f1, 1.0);
        assert_eq!(cer, 0.0);
    }

    #[test]
    fn accuracy_cases() {
        let refs: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let all: Vec<Option<String>> = refs.iter().cloned().map(Some).collect();
        assert_eq!(accuracy(&refs, &all).unwrap(), 1.0);

        let none: Vec<Option<String>> = vec![None; 4];
        assert_eq!(accuracy(&refs, &none).unwrap(), 0.0);

        let half = vec![
            Some("a".to_string()),
            Some("b".to_string()),
            Some("x".to_string()),
            None,
        ];
        assert_eq!(accuracy(&refs, &half).unwrap(), 0.5);
    }

    #[test]
    fn report_text_format() {
        let mut r = MetricsReport::default();
        r.insert("asr", "wer", 0.25);
        r.n_examples = 4;
        let text = r.to_text();
        assert!(text.contains("asr.wer\t0.25"));
        assert!(r.to_json().unwrap().contains("\"wer\""));
    }
}
