use crate::error::{Error, Result};

/// Area under the ROC curve by the rank-sum statistic; tied scores get their
/// average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Mean binary cross-entropy of logits.
pub fn logloss(logits: &[f64], labels: &[u8]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| softplus(z) - y as f64 * z)
        .sum();
    total / logits.len() as f64
}

pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_scores() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn random_scores_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let s: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let a = auc(&s, &y).unwrap();
        assert!((a - 0.5).abs() < 0.02, "{a}");
    }

    #[test]
    fn matches_pairwise_count() {
        let s = [0.3, 0.7, 0.5, 0.5, 0.1];
        let y = [1, 1, 1, 0, 0];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if y[i] == 1 && y[j] == 0 {
                    pairs += 1.0;
                    wins += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert_eq!(auc(&s, &y).unwrap(), wins / pairs);
    }

    #[test]
    fn single_class_is_degenerate() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn logloss_values() {
        assert!((logloss(&[0.0], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(logloss(&[40.0], &[1]) < 1e-15);
        assert!((logloss(&[-40.0], &[1]) - 40.0).abs() < 1e-9);
    }
}
