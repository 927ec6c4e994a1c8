//! Content and melody rewards, their weighted aggregate, and the
//! group-relative advantage used by policy post-training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{Error, Result};

pub const ADVANTAGE_EPS: f64 = 1e-8;
pub const CONTENT: &str = "con";
pub const MELODY: &str = "mel";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl WerBreakdown {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Word error rate under a unit-cost minimum edit alignment.
///
/// Ties in the backtrace prefer substitution, then deletion, then insertion.
pub fn wer(reference: &[Token], hypothesis: &[Token]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::UndefinedWer);
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        cost[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cost[i][j] = diag.min(cost[i - 1][j] + 1).min(cost[i][j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut d, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if cost[i][j] == cost[i - 1][j - 1] + mismatch {
                s += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i][j] == cost[i - 1][j] + 1 {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerBreakdown {
        wer: (s + d + ins) as f64 / n as f64,
        substitutions: s,
        deletions: d,
        insertions: ins,
    })
}

/// `1 - wer`, unclamped.
pub fn content_reward(wer: f64) -> f64 {
    1.0 - wer
}

/// Pearson correlation of two equally long series.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("series lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} paired samples", a.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Stretches a contour to `len` frames. Between two voiced frames values are
/// interpolated linearly; next to an unvoiced frame the nearest frame wins,
/// with a midpoint tie going to the voiced side.
pub fn resample_contour(contour: &[f64], len: usize) -> Vec<f64> {
    if contour.len() == len || contour.is_empty() {
        return contour.to_vec();
    }
    if contour.len() == 1 || len == 1 {
        return vec![contour[0]; len];
    }
    let scale = (contour.len() - 1) as f64 / (len - 1) as f64;
    (0..len)
        .map(|k| {
            let pos = k as f64 * scale;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(contour.len() - 1);
            let w = pos - lo as f64;
            let (a, b) = (contour[lo], contour[hi]);
            if a > 0.0 && b > 0.0 {
                a + w * (b - a)
            } else if w < 0.5 || (w == 0.5 && a > 0.0) {
                a
            } else {
                b
            }
        })
        .collect()
}

/// Pearson correlation over frames where both contours are voiced (non-zero).
pub fn melody_reward(generated: &[f64], target: &[f64]) -> Result<f64> {
    let len = generated.len().max(target.len());
    let g = resample_contour(generated, len);
    let t = resample_contour(target, len);
    let (gv, tv): (Vec<f64>, Vec<f64>) = g
        .iter()
        .zip(&t)
        .filter(|(a, b)| **a != 0.0 && **b != 0.0)
        .map(|(a, b)| (*a, *b))
        .unzip();
    if gv.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} jointly voiced frames", gv.len())));
    }
    pearson(&gv, &tv)
}

/// [`melody_reward`] with undefined correlations mapped to 0.
pub fn melody_reward_or_zero(generated: &[f64], target: &[f64]) -> f64 {
    melody_reward(generated, target).unwrap_or(0.0)
}

pub fn contour_to_f64(contour: &[u32]) -> Vec<f64> {
    contour.iter().map(|&n| f64::from(n)).collect()
}

/// `sum_k w_k * r_k`.
pub fn aggregate_reward(parts: &BTreeMap<String, f64>, weights: &BTreeMap<String, f64>) -> Result<f64> {
    parts.iter().try_fold(0.0, |acc, (name, r)| {
        let w = weights
            .get(name)
            .ok_or_else(|| Error::Config(format!("no weight for reward `{name}`")))?;
        Ok(acc + w * r)
    })
}

/// `(R_i - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!("group needs at least 2 members, got {}", rewards.len())));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect())
}

pub fn default_weights() -> BTreeMap<String, f64> {
    BTreeMap::from([(CONTENT.to_string(), 1.0), (MELODY.to_string(), 1.0)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub r_con: f64,
    pub r_mel: f64,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
    pub advantage: f64,
    pub wer: WerBreakdown,
}

impl RewardBundle {
    pub fn new(wer: WerBreakdown, r_mel: f64, weights: BTreeMap<String, f64>) -> Result<Self> {
        let r_con = content_reward(wer.wer);
        let parts = BTreeMap::from([(CONTENT.to_string(), r_con), (MELODY.to_string(), r_mel)]);
        let total = aggregate_reward(&parts, &weights)?;
        Ok(Self {
            r_con,
            r_mel,
            weights,
            total,
            advantage: 0.0,
            wer,
        })
    }
}

/// Fills the `advantage` field of every bundle in a group.
pub fn assign_advantages(group: &mut [RewardBundle]) -> Result<()> {
    let totals: Vec<f64> = group.iter().map(|b| b.total).collect();
    for (b, a) in group.iter_mut().zip(group_advantage(&totals)?) {
        b.advantage = a;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wer_identical_is_zero() {
        let w = wer(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!((w.wer, w.substitutions, w.deletions, w.insertions), (0.0, 0, 0, 0));
    }

    #[test]
    fn wer_substitution_and_deletion() {
        // a b c d vs a x c
        let w = wer(&[1, 2, 3, 4], &[1, 9, 3]).unwrap();
        assert_eq!(w.wer, 0.5);
        assert_eq!((w.substitutions, w.deletions, w.insertions), (1, 1, 0));
    }

    #[test]
    fn wer_insertions_can_exceed_one() {
        let w = wer(&[1], &[1, 2, 3]).unwrap();
        assert_eq!(w.wer, 2.0);
        assert_eq!(w.insertions, 2);
        assert_eq!(content_reward(w.wer), -1.0);
    }

    #[test]
    fn wer_empty_reference_is_undefined() {
        assert!(matches!(wer(&[], &[1]), Err(Error::UndefinedWer)));
    }

    #[test]
    fn content_reward_values() {
        assert_eq!(content_reward(0.0), 1.0);
        assert_eq!(content_reward(0.5), 0.5);
    }

    #[test]
    fn melody_reward_fixtures() {
        let f = [1.0, 2.0, 3.0, 4.0];
        assert!((melody_reward(&f, &f).unwrap() - 1.0).abs() < 1e-15);
        let r = melody_reward(&f, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12, "{r}");
        let shifted: Vec<f64> = f.iter().map(|v| v + 5.0).collect();
        assert!((melody_reward(&shifted, &f).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn melody_reward_uses_joint_voicing() {
        let g = [0.0, 5.0, 6.0, 7.0, 9.0];
        let t = [3.0, 5.0, 6.0, 0.0, 9.0];
        // jointly voiced frames 1, 2, 4
        let expected = pearson(&[5.0, 6.0, 9.0], &[5.0, 6.0, 9.0]).unwrap();
        assert_eq!(melody_reward(&g, &t).unwrap(), expected);
    }

    #[test]
    fn melody_reward_degenerate_cases() {
        assert!(melody_reward(&[0.0, 0.0, 3.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(melody_reward(&[4.0, 4.0, 4.0], &[1.0, 2.0, 3.0]).is_err());
        assert_eq!(melody_reward_or_zero(&[4.0, 4.0, 4.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn melody_reward_resamples_shorter_contour() {
        let long = [1.0, 2.0, 3.0, 4.0, 5.0];
        let short = [1.0, 3.0, 5.0];
        assert!((melody_reward(&short, &long).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(resample_contour(&[2.0, 0.0, 4.0], 5), vec![2.0, 2.0, 0.0, 4.0, 4.0]);
    }

    #[test]
    fn aggregate_fixtures() {
        let w = default_weights();
        let parts = BTreeMap::from([(CONTENT.into(), 1.0), (MELODY.into(), 1.0)]);
        assert_eq!(aggregate_reward(&parts, &w).unwrap(), 2.0);
        let parts = BTreeMap::from([(CONTENT.into(), 0.5), (MELODY.into(), 0.8)]);
        let w = BTreeMap::from([(CONTENT.into(), 1.0), (MELODY.into(), 0.0)]);
        assert_eq!(aggregate_reward(&parts, &w).unwrap(), 0.5);
        assert_eq!(aggregate_reward(&BTreeMap::new(), &w).unwrap(), 0.0);
        let missing = BTreeMap::from([("other".to_string(), 1.0)]);
        assert!(matches!(aggregate_reward(&missing, &w), Err(Error::Config(_))));
    }

    #[test]
    fn advantage_fixtures() {
        let a = group_advantage(&[0.2, 0.5, 0.8]).unwrap();
        let expected = 0.3 / 0.06f64.sqrt();
        assert!((a[0] + expected).abs() < 1e-6 && a[1].abs() < 1e-12 && (a[2] - expected).abs() < 1e-6);
        assert!((expected - 1.2247).abs() < 1e-4);
        assert_eq!(group_advantage(&[0.1, 0.1, 0.1]).unwrap(), vec![0.0; 3]);
        assert!(group_advantage(&[1.0]).is_err());
    }

    #[test]
    fn bundle_total_is_weighted_sum() {
        let w = wer(&[1, 2], &[1, 3]).unwrap();
        let b = RewardBundle::new(w, 0.25, default_weights()).unwrap();
        assert_eq!(b.total, b.r_con + b.r_mel);
        assert_eq!(b.r_con, 0.5);
    }

    proptest! {
        #[test]
        fn two_point_advantage(r in -10.0f64..10.0, c in 0.02f64..100.0) {
            let a = group_advantage(&[r, r + c]).unwrap();
            prop_assert!((a[0] + 1.0).abs() < 1e-6 && (a[1] - 1.0).abs() < 1e-6);
        }

        #[test]
        fn content_reward_complements_wer(
            r in proptest::collection::vec(0u32..8, 1..20),
            h in proptest::collection::vec(0u32..8, 0..20),
        ) {
            let w = wer(&r, &h).unwrap();
            prop_assert_eq!(content_reward(w.wer) + w.wer, 1.0);
            prop_assert_eq!(w.insertions as i64 - w.deletions as i64, h.len() as i64 - r.len() as i64);
        }

        #[test]
        fn advantage_mean_is_zero(rs in proptest::collection::vec(-5.0f64..5.0, 2..16)) {
            let a = group_advantage(&rs).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() / (a.len() as f64) < 1e-9);
        }
    }
}
