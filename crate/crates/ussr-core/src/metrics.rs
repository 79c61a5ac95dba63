//! Ranking evaluation. AUC in the Mann-Whitney form: the probability that
//! a uniformly random positive example scores above a uniformly random
//! negative one, ties counted one half.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// AUC over `scores` against binary `labels`.
///
/// Wins and ties are counted in integers over sorted tie groups, so the
/// result is the exact pairwise value: every partial sum is a multiple of
/// one half far below the f64 integer limit, and the single final division
/// matches a pair-by-pair count bit for bit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::invalid(alloc::format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(CoreError::invalid(alloc::format!("score {i} is NaN")));
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(CoreError::invalid(alloc::format!("label {i} is {l}, expected 0 or 1")));
        }
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::invalid("undefined AUC: need both classes"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut wins: u64 = 0;
    let mut tie_pairs: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos: u64 = 0;
        let mut group_neg: u64 = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                group_pos += 1;
            } else {
                group_neg += 1;
            }
            j += 1;
        }
        wins += group_pos * neg_below;
        tie_pairs += group_pos * group_neg;
        neg_below += group_neg;
        i = j;
    }
    let numerator = wins as f64 + 0.5 * tie_pairs as f64;
    Ok(numerator / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, stream};
    use rand::Rng;

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut sum = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    sum += 1.0;
                } else if si == sj {
                    sum += 0.5;
                }
            }
        }
        sum / pairs
    }

    #[test]
    fn perfectly_ordered_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        let flipped = [0, 0, 1, 1];
        assert_eq!(auc(&scores, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn all_equal_scores_give_half() {
        let scores = [0.5; 7];
        let labels = [1, 0, 1, 0, 0, 1, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn hand_counted_small_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.7, 0.5, 0.5, 0.3], &[1, 1, 0, 0]).unwrap(), 0.875);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        let err = auc(&[0.1, 0.2], &[1, 1]).unwrap_err();
        assert!(alloc::format!("{err}").contains("undefined AUC"));
        let err = auc(&[0.1, 0.2], &[0, 0]).unwrap_err();
        assert!(alloc::format!("{err}").contains("undefined AUC"));
        let err = auc(&[], &[]).unwrap_err();
        assert!(alloc::format!("{err}").contains("undefined AUC"));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(auc(&[0.1], &[1, 0]).is_err());
        assert!(auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
        assert!(auc(&[0.1, 0.2], &[1, 2]).is_err());
    }

    #[test]
    fn infinite_scores_rank_normally() {
        let scores = [f64::INFINITY, 0.0, f64::NEG_INFINITY];
        assert_eq!(auc(&scores, &[1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&scores, &[0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn matches_quadratic_count_exactly() {
        let mut rng = seeded(71, stream::EVAL);
        for _ in 0..100 {
            let n = rng.random_range(2..300);
            // Coarse dyadic grid so exact ties actually occur.
            let scores: Vec<f64> =
                (0..n).map(|_| rng.random_range(-16..17) as f64 / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = pairwise(&scores, &labels);
            assert_eq!(fast.to_bits(), slow.to_bits(), "fast {fast} vs slow {slow}");
        }
    }
}
