//! Word error rate scoring and corpus-level aggregates.

use serde::{Deserialize, Serialize};

use crate::dataset::UtteranceRecord;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Substitution/insertion/deletion counts of one hypothesis against its
/// reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S + I + D) / N`, optionally clamped into `[0, 1]`.
    pub fn wer(&self, clamp: bool) -> Result<f64> {
        if self.reference_words == 0 {
            return Err(Error::UndefinedWer("reference has no words".into()));
        }
        let raw = self.errors() as f64 / self.reference_words as f64;
        Ok(if clamp { raw.clamp(0.0, 1.0) } else { raw })
    }
}

impl std::ops::Add for ErrorCounts {
    type Output = ErrorCounts;

    fn add(self, o: ErrorCounts) -> ErrorCounts {
        ErrorCounts {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
            reference_words: self.reference_words + o.reference_words,
        }
    }
}

/// A manifest record together with its target WER.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    #[serde(flatten)]
    pub record: UtteranceRecord,
    #[serde(flatten)]
    pub counts: ErrorCounts,
    pub wer: f64,
}

/// Text preparation before whitespace tokenisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Normalization {
    pub lowercase: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

pub fn tokenize(text: &str, norm: Normalization) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            if norm.lowercase {
                w.to_lowercase()
            } else {
                w.to_owned()
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Step {
    Diag,
    Ins,
    Del,
}

/// Minimum-edit alignment with unit costs, returning the S/I/D split.
///
/// Among equal-cost paths the backtrace prefers the diagonal (match or
/// substitution), then insertion, then deletion. Only the split depends on
/// this; `S + I + D` is always the Levenshtein distance.
pub fn word_error_counts<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<ErrorCounts> {
    if reference.is_empty() {
        return Err(Error::UndefinedWer("empty reference".into()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        cost[i * w] = i;
        for j in 1..=m {
            let sub = usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            let diag = cost[(i - 1) * w + j - 1] + sub;
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = diag.min(ins).min(del);
        }
    }

    let mut counts = ErrorCounts {
        reference_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        let step = if i > 0 && j > 0 {
            let sub = usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            if cost[(i - 1) * w + j - 1] + sub == here {
                Step::Diag
            } else if cost[i * w + j - 1] + 1 == here {
                Step::Ins
            } else {
                Step::Del
            }
        } else if j > 0 {
            Step::Ins
        } else {
            Step::Del
        };
        match step {
            Step::Diag => {
                if reference[i - 1].as_ref() != hypothesis[j - 1].as_ref() {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
            }
            Step::Ins => {
                counts.insertions += 1;
                j -= 1;
            }
            Step::Del => {
                counts.deletions += 1;
                i -= 1;
            }
        }
    }
    Ok(counts)
}

/// Scores a record against its reference transcript.
pub fn score_record(record: &UtteranceRecord, norm: Normalization, clamp: bool) -> Result<ScoredPair> {
    let reference = record
        .reference
        .as_deref()
        .ok_or_else(|| Error::Data(format!("record {} has no reference", record.id)))?;
    let r = tokenize(reference, norm);
    let h = tokenize(&record.hypothesis, norm);
    let counts = word_error_counts(&r, &h)
        .map_err(|e| Error::UndefinedWer(format!("record {}: {e}", record.id)))?;
    Ok(ScoredPair {
        record: record.clone(),
        counts,
        wer: counts.wer(clamp)?,
    })
}

/// Corpus WER: total errors over total reference words (unclamped counts).
pub fn weighted_wer_by_words<'a>(counts: impl IntoIterator<Item = &'a ErrorCounts>) -> Result<f64> {
    let total = counts.into_iter().fold(ErrorCounts::default(), |acc, c| acc + *c);
    if total.reference_words == 0 {
        return Err(Error::UndefinedWer("no reference words in total".into()));
    }
    total.wer(false)
}

/// Duration-weighted mean of per-utterance estimates, given as
/// `(estimate, duration_seconds)`.
pub fn weighted_estimate_by_duration<T: Scalar>(estimates: &[(T, T)]) -> Result<T> {
    if estimates.is_empty() {
        return Err(Error::Data("no estimates to weight".into()));
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for &(est, dur) in estimates {
        if !(dur > T::zero()) {
            return Err(Error::Data(format!("non-positive duration {dur}")));
        }
        num += est * dur;
        den += dur;
    }
    Ok(num / den)
}

/// Relative gap between the word-weighted target and the duration-weighted
/// estimate.
pub fn werr<T: Scalar>(target_wrd: T, estimate_dur: T) -> Result<T> {
    if target_wrd == T::zero() {
        return Err(Error::UndefinedWer("WERR with zero target".into()));
    }
    Ok((target_wrd - estimate_dur).abs() / target_wrd)
}

/// Confidence-score estimate: one minus the mean token log-probability.
/// Not clamped; exceeds 1 whenever any token is uncertain.
pub fn confidence_score<T: Scalar>(token_logprobs: &[T]) -> Result<T> {
    Ok(T::one() - mean_logprob(token_logprobs)?)
}

/// Variant on the probability scale: `1 - exp(mean log-prob)`, in `[0, 1)`.
pub fn confidence_score_prob<T: Scalar>(token_logprobs: &[T]) -> Result<T> {
    Ok(T::one() - mean_logprob(token_logprobs)?.exp())
}

fn mean_logprob<T: Scalar>(lp: &[T]) -> Result<T> {
    if lp.is_empty() {
        return Err(Error::Data("no token log-probabilities".into()));
    }
    if let Some(bad) = lp.iter().find(|&&v| !(v <= T::zero())) {
        return Err(Error::Data(format!("log-probability {bad} is not <= 0")));
    }
    Ok(lp.iter().copied().sum::<T>() / T::from_usize(lp.len()).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn counts(r: &str, h: &str) -> ErrorCounts {
        word_error_counts(&words(r), &words(h)).unwrap()
    }

    #[test]
    fn identical_sequences() {
        let c = counts("a b c", "a b c");
        assert_eq!(c.errors(), 0);
        assert_eq!(c.wer(true).unwrap(), 0.0);
    }

    #[test]
    fn single_substitution() {
        let c = counts("a b c", "a x c");
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
        assert!((c.wer(true).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_insertion() {
        let c = counts("the cat", "the the cat");
        assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 1, 0));
        assert_eq!(c.wer(true).unwrap(), 0.5);
    }

    #[test]
    fn deletions_and_empty_hypothesis() {
        let c = counts("a b c d", "");
        assert_eq!(c.deletions, 4);
        assert!(c.deletions <= c.reference_words);
        assert!(matches!(
            word_error_counts::<&str>(&[], &["a"]),
            Err(Error::UndefinedWer(_))
        ));
    }

    #[test]
    fn clamping() {
        let c = ErrorCounts {
            substitutions: 2,
            insertions: 3,
            deletions: 1,
            reference_words: 5,
        };
        assert_eq!(c.wer(true).unwrap(), 1.0);
        assert!((c.wer(false).unwrap() - 1.2).abs() < 1e-15);
        let z = ErrorCounts::default();
        assert!(matches!(z.wer(true), Err(Error::UndefinedWer(_))));
    }

    #[test]
    fn word_weighting() {
        let c = ErrorCounts {
            substitutions: 1,
            reference_words: 4,
            ..Default::default()
        };
        assert_eq!(weighted_wer_by_words([&c]).unwrap(), 0.25);
        let a = ErrorCounts {
            substitutions: 1,
            reference_words: 10,
            ..Default::default()
        };
        let b = ErrorCounts {
            deletions: 3,
            reference_words: 10,
            ..Default::default()
        };
        assert!((weighted_wer_by_words([&a, &b]).unwrap() - 0.2).abs() < 1e-15);
        assert!(weighted_wer_by_words(std::iter::empty()).is_err());
    }

    #[test]
    fn duration_weighting() {
        assert_eq!(weighted_estimate_by_duration(&[(0.1, 5.0)]).unwrap(), 0.1);
        let w = weighted_estimate_by_duration(&[(0.2f64, 10.0), (0.0, 30.0)]).unwrap();
        assert!((w - 0.05).abs() < 1e-15);
        assert!(matches!(
            weighted_estimate_by_duration(&[(0.2, 0.0)]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn werr_values() {
        assert!((werr(0.1088f64, 0.1039).unwrap() - 0.0450).abs() < 1e-4);
        assert!((werr(0.0840f64, 0.3185).unwrap() - 2.7916).abs() < 1e-4);
        assert_eq!(werr(0.2, 0.2).unwrap(), 0.0);
        assert!(werr(0.0, 0.1).is_err());
    }

    #[test]
    fn confidence_scores() {
        assert_eq!(confidence_score(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((confidence_score(&[-0.1f64, -0.3]).unwrap() - 1.2).abs() < 1e-15);
        assert_eq!(confidence_score(&[-0.5]).unwrap(), 1.5);
        assert!(confidence_score::<f64>(&[]).is_err());
        assert!(confidence_score(&[0.1]).is_err());
        let p = confidence_score_prob(&[-0.5f64]).unwrap();
        assert!((p - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn tokenization_default_lowercases() {
        assert_eq!(tokenize("  The  Cat ", Normalization::default()), vec!["the", "cat"]);
        assert_eq!(
            tokenize("The Cat", Normalization { lowercase: false }),
            vec!["The", "Cat"]
        );
    }

    fn seq(max: usize, min: usize) -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..6, min..=max)
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(a in seq(20, 1), b in seq(20, 1)) {
            let sa: Vec<String> = a.iter().map(u8::to_string).collect();
            let sb: Vec<String> = b.iter().map(u8::to_string).collect();
            let ab = word_error_counts(&sa, &sb).unwrap().errors();
            let ba = word_error_counts(&sb, &sa).unwrap().errors();
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn corpus_wer_is_additive(pairs in prop::collection::vec((seq(15, 1), seq(15, 0)), 1..8)) {
            let all: Vec<ErrorCounts> = pairs.iter().map(|(r, h)| {
                let r: Vec<String> = r.iter().map(u8::to_string).collect();
                let h: Vec<String> = h.iter().map(u8::to_string).collect();
                word_error_counts(&r, &h).unwrap()
            }).collect();
            let total = all.iter().fold(ErrorCounts::default(), |a, c| a + *c);
            prop_assert_eq!(weighted_wer_by_words(&all).unwrap(), total.wer(false).unwrap());
        }

        #[test]
        fn duration_weighted_within_range(v in prop::collection::vec((0.0f64..1.0, 0.1f64..30.0), 1..20)) {
            let w = weighted_estimate_by_duration(&v).unwrap();
            let lo = v.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let hi = v.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
        }

        #[test]
        fn constant_estimates_ignore_durations(c in 0.0f64..1.0, d in prop::collection::vec(0.1f64..30.0, 1..20)) {
            let v: Vec<(f64, f64)> = d.iter().map(|&d| (c, d)).collect();
            prop_assert!((weighted_estimate_by_duration(&v).unwrap() - c).abs() < 1e-12);
        }

        #[test]
        fn werr_is_scale_free(t in 0.01f64..1.0, e in 0.0f64..1.0, k in 0.1f64..10.0) {
            let a = werr(t, e).unwrap();
            let b = werr(t * k, e * k).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
