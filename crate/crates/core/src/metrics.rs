//! Evaluation metrics: MSE, KS unfairness, tail-unfairness and the
//! threshold-mass gap, all computed from empirical CDFs.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dp_tails::{DpTailsParams, GroupId, GroupedScores};
use crate::empirical_dist::{ks_distance, SampleSet};
use crate::error::{Error, Result};
use crate::serde_ext::extended_f64;

fn group_sets(scores: &GroupedScores) -> Result<Vec<SampleSet>> {
    if scores.num_groups() < 2 {
        return Err(Error::TooFewGroups {
            count: scores.num_groups(),
            required: 2,
        });
    }
    scores.iter().map(|(_, v)| SampleSet::new(v.to_vec())).collect()
}

/// `sup_{t >= alpha} |F_a(t) - F_b(t)|` for two empirical CDFs. Both are
/// right-continuous steps, so the sup is attained at `alpha` or at a sample
/// point above it.
fn tail_distance(a: &SampleSet, b: &SampleSet, alpha: f64) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let gap = |t: f64| (a.count_le(t) as f64 / na - b.count_le(t) as f64 / nb).abs();
    let above = |s: &SampleSet| {
        let start = s.values().partition_point(|&x| x < alpha);
        s.values()[start..].iter().map(|&x| gap(x)).fold(0.0, f64::max)
    };
    gap(alpha).max(above(a)).max(above(b))
}

/// Tail-unfairness: the largest pairwise sup-distance between group CDFs over
/// `t >= alpha`. `alpha = -inf` gives [`ks_unfairness`].
pub fn tail_unfairness(scores: &GroupedScores, alpha: f64) -> Result<f64> {
    if alpha.is_nan() {
        return Err(Error::param("alpha", "must not be NaN"));
    }
    let sets = group_sets(scores)?;
    if alpha == f64::NEG_INFINITY {
        return Ok(max_pairwise(&sets, ks_distance));
    }
    Ok(max_pairwise(&sets, |a, b| tail_distance(a, b, alpha)))
}

/// Largest pairwise Kolmogorov-Smirnov distance between groups.
pub fn ks_unfairness(scores: &GroupedScores) -> Result<f64> {
    Ok(max_pairwise(&group_sets(scores)?, ks_distance))
}

fn max_pairwise(sets: &[SampleSet], d: impl Fn(&SampleSet, &SampleSet) -> f64) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            best = best.max(d(&sets[i], &sets[j]));
        }
    }
    best
}

pub fn mse(truth: &[f64], predictions: &[f64]) -> Result<f64> {
    if truth.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: predictions.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptySample);
    }
    let sum: f64 = truth.iter().zip(predictions).map(|(y, f)| (y - f) * (y - f)).sum();
    Ok(sum / truth.len() as f64)
}

/// Per group, `|F_s(alpha) - p|`.
pub fn threshold_mass_gap(scores: &GroupedScores, alpha: f64, p: f64) -> Result<BTreeMap<GroupId, f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param("p", format!("must lie in [0, 1], got {p}")));
    }
    if alpha.is_nan() {
        return Err(Error::param("alpha", "must not be NaN"));
    }
    Ok(scores
        .iter()
        .map(|(g, v)| {
            let below = v.iter().filter(|&&x| x <= alpha).count() as f64 / v.len() as f64;
            (g.clone(), (below - p).abs())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    #[serde(with = "extended_f64")]
    pub alpha: f64,
    pub p: f64,
    pub xi: f64,
    pub sigma: f64,
    /// Present when targets were supplied.
    pub mse: Option<f64>,
    pub ks: f64,
    pub tail_unfairness: f64,
    pub threshold_gap: BTreeMap<GroupId, f64>,
    pub sample_sizes: BTreeMap<GroupId, usize>,
}

impl MetricsReport {
    /// Evaluates `predictions`, optionally against `targets` aligned with it
    /// group by group.
    pub fn compute(
        predictions: &GroupedScores,
        targets: Option<&GroupedScores>,
        params: &DpTailsParams,
        seed: u64,
    ) -> Result<Self> {
        let mse = match targets {
            Some(targets) => {
                let mut truth = Vec::with_capacity(predictions.total());
                let mut pred = Vec::with_capacity(predictions.total());
                for (g, v) in predictions.iter() {
                    let y = targets.get(g).ok_or_else(|| Error::UnknownGroup(g.to_string()))?;
                    if y.len() != v.len() {
                        return Err(Error::LengthMismatch {
                            left: y.len(),
                            right: v.len(),
                        });
                    }
                    truth.extend_from_slice(y);
                    pred.extend_from_slice(v);
                }
                if targets.total() != predictions.total() {
                    return Err(Error::LengthMismatch {
                        left: targets.total(),
                        right: predictions.total(),
                    });
                }
                Some(mse(&truth, &pred)?)
            }
            None => None,
        };
        Ok(Self {
            seed,
            alpha: params.alpha,
            p: params.p,
            xi: params.xi,
            sigma: params.sigma,
            mse,
            ks: ks_unfairness(predictions)?,
            tail_unfairness: tail_unfairness(predictions, params.alpha)?,
            threshold_gap: threshold_mass_gap(predictions, params.alpha, params.p)?,
            sample_sizes: predictions.labels().map(|g| (g.clone(), predictions.count(g))).collect(),
        })
    }

    pub fn max_threshold_gap(&self) -> f64 {
        self.threshold_gap.values().copied().fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Column names of the flat CSV form; per-group columns follow the
    /// shared ones in label order.
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "seed",
            "alpha",
            "p",
            "xi",
            "sigma",
            "mse",
            "ks",
            "tail_unfairness",
            "threshold_gap_max",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(self.threshold_gap.keys().map(|g| format!("threshold_gap_{g}")));
        h.extend(self.sample_sizes.keys().map(|g| format!("n_{g}")));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![
            self.seed.to_string(),
            self.alpha.to_string(),
            self.p.to_string(),
            self.xi.to_string(),
            self.sigma.to_string(),
            self.mse.map(|m| m.to_string()).unwrap_or_default(),
            self.ks.to_string(),
            self.tail_unfairness.to_string(),
            self.max_threshold_gap().to_string(),
        ];
        r.extend(self.threshold_gap.values().map(|v| v.to_string()));
        r.extend(self.sample_sizes.values().map(|v| v.to_string()));
        r
    }

    /// Writes reports sharing the header of the first one.
    pub fn write_csv<W: Write>(reports: &[MetricsReport], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if let Some(first) = reports.first() {
            w.write_record(first.csv_header())?;
        }
        for r in reports {
            w.write_record(r.csv_row())?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(a: &[f64], b: &[f64]) -> GroupedScores {
        GroupedScores::from_pairs(a.iter().map(|&x| ("A", x)).chain(b.iter().map(|&x| ("B", x)))).unwrap()
    }

    /// Brute force over a fine grid plus the sample points themselves.
    fn tail_brute(a: &[f64], b: &[f64], alpha: f64) -> f64 {
        let f = |s: &[f64], t: f64| s.iter().filter(|&&x| x <= t).count() as f64 / s.len() as f64;
        let mut ts: Vec<f64> = a.iter().chain(b).copied().filter(|&x| x >= alpha).collect();
        ts.push(alpha);
        ts.iter().map(|&t| (f(a, t) - f(b, t)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn tail_unfairness_examples() {
        let s = pairs(&[0.0, 1.0], &[0.0, 2.0]);
        assert_eq!(tail_unfairness(&s, 0.5).unwrap(), 0.5);
        assert_eq!(tail_unfairness(&s, 2.5).unwrap(), 0.0);
        let same = pairs(&[0.3, 0.9, 1.2], &[0.3, 0.9, 1.2]);
        assert_eq!(tail_unfairness(&same, 0.0).unwrap(), 0.0);
        assert_eq!(ks_unfairness(&same).unwrap(), 0.0);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_unfairness(&pairs(&[0.0], &[1.0])).unwrap(), 1.0);
    }

    #[test]
    fn single_group_is_rejected() {
        let s = GroupedScores::from_pairs([("A", 1.0)]).unwrap();
        assert!(matches!(ks_unfairness(&s), Err(Error::TooFewGroups { .. })));
        assert!(matches!(tail_unfairness(&s, 0.0), Err(Error::TooFewGroups { .. })));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert!((mse(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn threshold_gap_examples() {
        let grid: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        let s = GroupedScores::from_pairs(grid.iter().map(|&x| ("u", x))).unwrap();
        let gap = threshold_mass_gap(&s, 0.35, 0.5).unwrap();
        assert!((gap[&GroupId::from("u")] - 0.2).abs() < 1e-15);
        let gap = threshold_mass_gap(&s, 0.35, 0.3).unwrap();
        assert_eq!(gap[&GroupId::from("u")], 0.0);
        let above = pairs(&[2.0, 3.0], &[4.0]);
        let gap = threshold_mass_gap(&above, 1.0, 0.0).unwrap();
        assert!(gap.values().all(|&g| g == 0.0));
        assert!(threshold_mass_gap(&above, 1.0, 1.5).is_err());
    }

    #[test]
    fn report_csv_and_json() {
        let s = pairs(&[0.0, 1.0], &[0.0, 2.0]);
        let params = DpTailsParams::new(0.5, 0.5);
        let r = MetricsReport::compute(&s, Some(&s), &params, 9).unwrap();
        assert_eq!(r.mse, Some(0.0));
        assert_eq!(r.csv_header().len(), r.csv_row().len());
        let mut buf = Vec::new();
        MetricsReport::write_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("seed,alpha,p,xi,sigma,mse,ks,tail_unfairness"));
        assert_eq!(text.lines().count(), 2);
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn report_rejects_misaligned_targets() {
        let s = pairs(&[0.0, 1.0], &[0.0, 2.0]);
        let t = pairs(&[0.0], &[0.0, 2.0]);
        assert!(MetricsReport::compute(&s, Some(&t), &DpTailsParams::new(0.0, 0.5), 0).is_err());
    }

    fn small_sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((-20i32..20).prop_map(|k| k as f64 / 4.0), 1..25)
    }

    proptest! {
        #[test]
        fn tail_matches_brute_force(a in small_sample(), b in small_sample(), alpha in -6.0f64..6.0) {
            let s = pairs(&a, &b);
            prop_assert_eq!(tail_unfairness(&s, alpha).unwrap(), tail_brute(&a, &b, alpha));
        }

        #[test]
        fn minus_infinity_is_ks(a in small_sample(), b in small_sample()) {
            let s = pairs(&a, &b);
            prop_assert_eq!(tail_unfairness(&s, f64::NEG_INFINITY).unwrap(), ks_unfairness(&s).unwrap());
            prop_assert_eq!(tail_unfairness(&s, -1e9).unwrap(), ks_unfairness(&s).unwrap());
        }

        #[test]
        fn tail_nonincreasing_in_alpha(a in small_sample(), b in small_sample()) {
            let s = pairs(&a, &b);
            let vals: Vec<f64> = (-30..30).map(|k| tail_unfairness(&s, k as f64 / 4.0 + 0.1).unwrap()).collect();
            prop_assert!(vals.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
