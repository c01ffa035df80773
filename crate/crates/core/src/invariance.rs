//! Invariant pattern recognition.
//!
//! For every node the temporal variance of each channel is summarized into a
//! scalar. A subset-sum dynamic program over the quantized variances finds
//! the most balanced two-way split; its imbalance `δ` sets the cutoff that
//! separates stable (invariant) channels from the rest.
//!
//! ```
//! use dyngraph_ood::invariance::{dp_delta, partition, PartitionRule, VarianceProfile};
//!
//! let p = VarianceProfile::new(vec![0.1, 0.2, 0.3, 0.4, 0.9]).unwrap();
//! let (delta, subset) = dp_delta(&p, 10).unwrap();
//! assert!((delta - 0.1).abs() < 1e-12);
//! assert_eq!(subset, vec![4]);
//! let part = partition(&p, delta, PartitionRule::Threshold);
//! assert_eq!(part.invariant, vec![0, 1, 2]);
//! ```

use serde::{Deserialize, Serialize};

use crate::encoder::EnvRepresentation;
use crate::error::{Error, Result};

/// Default quantization scale.
pub const DEFAULT_QUANTIZATION: u64 = 1000;

/// Largest `K` accepted by [`brute_force_delta`].
pub const BRUTE_FORCE_MAX_CHANNELS: usize = 20;

/// Per-channel temporal variance of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProfile {
    var: Vec<f64>,
}

impl VarianceProfile {
    pub fn new(var: Vec<f64>) -> Result<Self> {
        if var.is_empty() {
            return Err(Error::invalid("variance profile needs at least one channel"));
        }
        if var.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric(format!("invalid variance profile {var:?}")));
        }
        Ok(Self { var })
    }

    pub fn values(&self) -> &[f64] {
        &self.var
    }

    pub fn channels(&self) -> usize {
        self.var.len()
    }

    pub fn quantized(&self, q: u64) -> Vec<u64> {
        self.var.iter().map(|v| (v * q as f64).round() as u64).collect()
    }
}

/// Per-dimension population variance of `z[v][·][k][·]` over time, averaged
/// over the `d` dimensions.
pub fn channel_variance(rep: &EnvRepresentation, v: usize) -> Result<VarianceProfile> {
    let (n, t_count, k_count, d) = rep.dims();
    if v >= n {
        return Err(Error::invalid(format!("node {v} out of range for {n} nodes")));
    }
    let mut var = vec![0.0; k_count];
    for (k, out) in var.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..d {
            let series = (0..t_count).map(|t| rep.slice(v, t, k)[j]);
            let mean = series.clone().sum::<f64>() / t_count as f64;
            acc += series.map(|x| (x - mean) * (x - mean)).sum::<f64>() / t_count as f64;
        }
        *out = acc / d as f64;
    }
    VarianceProfile::new(var)
}

/// Minimum imbalance of a two-way split of the quantized profile and one
/// subset whose sum is the largest reachable value `j ≤ Σq/2`.
pub fn dp_delta(profile: &VarianceProfile, q: u64) -> Result<(f64, Vec<usize>)> {
    if q == 0 {
        return Err(Error::invalid("quantization scale must be ≥ 1"));
    }
    let items = profile.quantized(q);
    let total: u64 = items.iter().sum();
    let half = (total / 2) as usize;
    let k = items.len();
    // reach[i][j]: some subset of the first i items sums to j.
    let mut reach = vec![vec![false; half + 1]; k + 1];
    reach[0][0] = true;
    for i in 1..=k {
        let w = items[i - 1] as usize;
        for j in 0..=half {
            reach[i][j] = reach[i - 1][j] || (j >= w && reach[i - 1][j - w]);
        }
    }
    let best = (0..=half).rev().find(|&j| reach[k][j]).unwrap_or(0);
    let mut subset = Vec::new();
    let mut j = best;
    for i in (1..=k).rev() {
        let w = items[i - 1] as usize;
        if j >= w && reach[i - 1][j - w] {
            subset.push(i - 1);
            j -= w;
        }
    }
    subset.reverse();
    let delta = (total - 2 * best as u64) as f64 / q as f64;
    Ok((delta, subset))
}

/// Exhaustive oracle for [`dp_delta`].
pub fn brute_force_delta(profile: &VarianceProfile, q: u64) -> Result<f64> {
    let k = profile.channels();
    if k > BRUTE_FORCE_MAX_CHANNELS {
        return Err(Error::invalid(format!(
            "brute force limited to {BRUTE_FORCE_MAX_CHANNELS} channels, got {k}"
        )));
    }
    if q == 0 {
        return Err(Error::invalid("quantization scale must be ≥ 1"));
    }
    let items = profile.quantized(q);
    let total: i64 = items.iter().map(|&x| x as i64).sum();
    let mut best = i64::MAX;
    for mask in 0u32..(1 << k) {
        let s: i64 = (0..k)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| items[i] as i64)
            .sum();
        best = best.min((total - 2 * s).abs());
    }
    Ok(best as f64 / q as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionRule {
    /// `var[k] ≤ mean(var) − δ/2`.
    #[default]
    Threshold,
    /// The side of the balanced DP split with the smaller mean variance.
    Subset,
}

/// Channel split of one node. Both index lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantPartition {
    pub invariant: Vec<usize>,
    pub variant: Vec<usize>,
}

impl InvariantPartition {
    /// All `K` channels invariant.
    pub fn all_invariant(k: usize) -> Self {
        Self {
            invariant: (0..k).collect(),
            variant: Vec::new(),
        }
    }

    pub fn is_invariant(&self, k: usize) -> bool {
        self.invariant.binary_search(&k).is_ok()
    }

    /// Boolean mask over channels.
    pub fn mask(&self, k: usize) -> Vec<bool> {
        (0..k).map(|c| self.is_invariant(c)).collect()
    }
}

/// Partition with `delta` computed beforehand (see [`dp_delta`]). An empty
/// invariant set falls back to the minimum-variance channel.
pub fn partition(profile: &VarianceProfile, delta: f64, rule: PartitionRule) -> InvariantPartition {
    let var = profile.values();
    let k = var.len();
    let mut inv: Vec<bool> = match rule {
        PartitionRule::Threshold => {
            let cutoff = var.iter().sum::<f64>() / k as f64 - delta / 2.0;
            // Absorb rounding in the mean so equal variances stay invariant.
            let tol = 1e-12 * cutoff.abs().max(1.0);
            var.iter().map(|&v| v <= cutoff + tol).collect()
        }
        PartitionRule::Subset => {
            let (_, subset) = dp_delta(profile, DEFAULT_QUANTIZATION)
                .expect("default quantization is positive");
            let mut in_subset = vec![false; k];
            subset.iter().for_each(|&i| in_subset[i] = true);
            let side_mean = |side: bool| {
                let vals: Vec<f64> = (0..k).filter(|&i| in_subset[i] == side).map(|i| var[i]).collect();
                if vals.is_empty() {
                    f64::INFINITY
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            };
            let pick = side_mean(true) <= side_mean(false);
            in_subset.iter().map(|&s| s == pick).collect()
        }
    };
    if !inv.iter().any(|&b| b) {
        let argmin = (0..k)
            .min_by(|&a, &b| var[a].total_cmp(&var[b]))
            .expect("profile is nonempty");
        inv[argmin] = true;
    }
    InvariantPartition {
        invariant: (0..k).filter(|&i| inv[i]).collect(),
        variant: (0..k).filter(|&i| !inv[i]).collect(),
    }
}

/// Variance profile, DP threshold and partition for every node.
pub fn partition_all(
    rep: &EnvRepresentation,
    q: u64,
    rule: PartitionRule,
) -> Result<Vec<InvariantPartition>> {
    let (n, ..) = rep.dims();
    (0..n)
        .map(|v| {
            let p = channel_variance(rep, v)?;
            let (delta, _) = dp_delta(&p, q)?;
            Ok(partition(&p, delta, rule))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn profile(v: &[f64]) -> VarianceProfile {
        VarianceProfile::new(v.to_vec()).unwrap()
    }

    fn rep(n: usize, t: usize, k: usize, d: usize, data: Vec<f64>) -> EnvRepresentation {
        let z = Tensor::new(vec![n, t, k, d], data).unwrap();
        EnvRepresentation {
            pre_pool: z.clone(),
            z,
        }
    }

    #[test]
    fn variance_of_constant_and_pair() {
        let r = rep(1, 2, 2, 1, vec![0.5, 0.0, 0.5, 2.0]);
        let p = channel_variance(&r, 0).unwrap();
        assert_eq!(p.values(), &[0.0, 1.0]);
    }

    #[test]
    fn balanced_halves_and_small_cases() {
        assert_eq!(dp_delta(&profile(&[1.0; 4]), 1000).unwrap().0, 0.0);
        let (d, s) = dp_delta(&profile(&[0.5, 0.3, 0.2]), 10).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(s, vec![1, 2]);
        assert_eq!(brute_force_delta(&profile(&[0.5, 0.3, 0.2]), 10).unwrap(), 0.0);
        assert!((dp_delta(&profile(&[0.2]), 1000).unwrap().0 - 0.2).abs() < 1e-15);
        assert!(dp_delta(&profile(&[0.2]), 0).is_err());
        assert!(brute_force_delta(&profile(&[0.1; 21]), 1000).is_err());
    }

    #[test]
    fn threshold_rule_cases() {
        let p = profile(&[0.1, 0.2, 0.3, 0.4, 0.9]);
        let part = partition(&p, 0.1, PartitionRule::Threshold);
        assert_eq!(part.invariant, vec![0, 1, 2]);
        assert_eq!(part.variant, vec![3, 4]);
        let eq = partition(&profile(&[0.1; 5]), 0.0, PartitionRule::Threshold);
        assert_eq!(eq.invariant, vec![0, 1, 2, 3, 4]);
        let one = partition(&profile(&[0.7]), 0.7, PartitionRule::Threshold);
        assert_eq!(one.invariant, vec![0]);
        assert!(one.variant.is_empty());
    }

    #[test]
    fn subset_rule_takes_lower_mean_side() {
        let p = profile(&[0.1, 0.2, 0.3, 0.4, 0.9]);
        let part = partition(&p, 0.1, PartitionRule::Subset);
        assert_eq!(part.invariant, vec![0, 1, 2, 3]);
        assert_eq!(part.variant, vec![4]);
    }
}
