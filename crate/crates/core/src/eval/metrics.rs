//! Edit-distance based error rates.

use serde::{Deserialize, Serialize};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Summed edit errors over summed reference length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub errors: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            if self.errors == 0 {
                0.0
            } else {
                1.0
            }
        } else {
            self.errors as f64 / self.ref_len as f64
        }
    }
}

impl std::ops::AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.errors += o.errors;
        self.ref_len += o.ref_len;
    }
}

impl std::iter::Sum for ErrorCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut acc = Self::default();
        for c in iter {
            acc += c;
        }
        acc
    }
}

/// Character errors; spaces count as characters.
pub fn char_errors(reference: &str, hypothesis: &str) -> ErrorCounts {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    ErrorCounts {
        errors: edit_distance(&r, &h),
        ref_len: r.len(),
    }
}

/// Word errors over whitespace-separated tokens.
pub fn word_errors(reference: &str, hypothesis: &str) -> ErrorCounts {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    ErrorCounts {
        errors: edit_distance(&r, &h),
        ref_len: r.len(),
    }
}

/// Word errors for space-delimited languages, character errors otherwise.
pub fn mixed_errors(reference: &str, hypothesis: &str, space_delimited: bool) -> ErrorCounts {
    if space_delimited {
        word_errors(reference, hypothesis)
    } else {
        char_errors(reference, hypothesis)
    }
}

pub fn cer(pairs: &[(&str, &str)]) -> f64 {
    pairs
        .iter()
        .map(|(r, h)| char_errors(r, h))
        .sum::<ErrorCounts>()
        .rate()
}

pub fn wer(pairs: &[(&str, &str)]) -> f64 {
    pairs
        .iter()
        .map(|(r, h)| word_errors(r, h))
        .sum::<ErrorCounts>()
        .rate()
}

/// Micro-averaged mixed error rate over `(reference, hypothesis,
/// space_delimited)` triples.
pub fn mer(items: &[(&str, &str, bool)]) -> f64 {
    items
        .iter()
        .map(|&(r, h, s)| mixed_errors(r, h, s))
        .sum::<ErrorCounts>()
        .rate()
}

/// Fraction of predictions equal to the truth; a missing prediction is wrong.
pub fn lid_accuracy(pairs: &[(&str, Option<&str>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|(t, p)| Some(*t) == *p).count();
    hits as f64 / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cer_examples() {
        assert_eq!(cer(&[("abc", "abc")]), 0.0);
        assert!((cer(&[("abc", "axc")]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(char_errors("a b", "ab").errors, 1);
        assert_eq!(char_errors("", "").rate(), 0.0);
        assert_eq!(char_errors("", "x").rate(), 1.0);
    }

    #[test]
    fn wer_counts_words() {
        assert_eq!(
            word_errors("the cat sat", "the bat sat"),
            ErrorCounts {
                errors: 1,
                ref_len: 3
            }
        );
        assert_eq!(wer(&[("a b", "a b c")]), 0.5);
    }

    #[test]
    fn micro_average_is_not_macro() {
        // 1/1 and 0/9 → 1/10, not the mean 0.5
        assert!((cer(&[("a", "b"), ("abcdefghi", "abcdefghi")]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lid_accuracy_counts_missing_as_wrong() {
        assert_eq!(lid_accuracy(&[("A", Some("A")), ("B", None)]), 0.5);
        assert_eq!(lid_accuracy(&[]), 0.0);
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(a in "[abc]{0,6}", b in "[abc]{0,6}", c in "[abc]{0,6}") {
            let (a, b, c): (Vec<char>, Vec<char>, Vec<char>) =
                (a.chars().collect(), b.chars().collect(), c.chars().collect());
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
            prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
        }
    }
}
