//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::invariance::InvariantPartition;

/// Largest `K` accepted by [`i_acc`].
pub const I_ACC_MAX_CHANNELS: usize = 8;

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. `O((p + n) log(p + n))`.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("AUC needs at least one positive and one negative score"));
    }
    if pos.iter().chain(neg).any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut neg = neg.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in pos {
        let below = neg.partition_point(|&x| x < p);
        let ties = neg[below..].partition_point(|&x| x <= p);
        wins += below as f64 + 0.5 * ties as f64;
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

/// Accuracy of predicted invariant sets against the ground-truth channel set,
/// maximized over relabelings of the channels.
///
/// A relabeling only changes which `|truth|` channels count as invariant, so
/// the best one puts the channels most often predicted invariant into the
/// truth set.
pub fn i_acc(predicted: &[InvariantPartition], truth: &[usize], k: usize) -> Result<f64> {
    if k > I_ACC_MAX_CHANNELS {
        return Err(Error::invalid(format!(
            "I_ACC permutation search limited to K ≤ {I_ACC_MAX_CHANNELS}, got {k}"
        )));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("I_ACC needs at least one node"));
    }
    if truth.len() > k || truth.iter().any(|&c| c >= k) {
        return Err(Error::invalid(format!("ground truth {truth:?} invalid for K={k}")));
    }
    let n = predicted.len() as i64;
    let mut gain: Vec<i64> = (0..k)
        .map(|c| {
            let a = predicted.iter().filter(|p| p.is_invariant(c)).count() as i64;
            2 * a - n
        })
        .collect();
    gain.sort_unstable_by(|a, b| b.cmp(a));
    // Correct memberships = Σ_{c ∈ truth} a_c + Σ_{c ∉ truth} (n − a_c).
    let base = (0..k).map(|_| n).sum::<i64>() - gain.iter().map(|g| (g + n) / 2).sum::<i64>();
    let correct = base + gain[..truth.len()].iter().sum::<i64>();
    Ok(correct as f64 / (n as f64 * k as f64))
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&p| r[p] = avg);
        i = j + 1;
    }
    r
}

/// Spearman rank correlation. Errors when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of length ≥ 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Numeric("spearman correlation of a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Mean and population standard deviation (`(0, 0)` for an empty slice).
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    if x.iter().all(|&v| v == x[0]) {
        return (x[0], 0.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean ± std of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(x: &[f64]) -> Self {
        let (mean, std) = mean_std(x);
        Self { mean, std }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(inv: &[usize], k: usize) -> InvariantPartition {
        InvariantPartition {
            invariant: inv.to_vec(),
            variant: (0..k).filter(|c| !inv.contains(c)).collect(),
        }
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.3; 3], &[0.3; 4]).unwrap(), 0.5);
        assert!(auc(&[], &[0.1]).is_err());
    }

    #[test]
    fn i_acc_cases() {
        let exact = vec![part(&[0, 2], 4); 3];
        assert_eq!(i_acc(&exact, &[0, 2], 4).unwrap(), 1.0);
        let flipped = vec![part(&[1], 2); 5];
        assert_eq!(i_acc(&flipped, &[0], 2).unwrap(), 1.0);
        // Two nodes disagree on a 2-channel truth of size 1: best is 1/2.
        let mixed = vec![part(&[0], 2), part(&[1], 2)];
        assert_eq!(i_acc(&mixed, &[0], 2).unwrap(), 0.5);
        assert!(i_acc(&exact, &[0], 9).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn summary_population_std() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(Summary::of(&[0.4; 5]).std, 0.0);
    }
}
