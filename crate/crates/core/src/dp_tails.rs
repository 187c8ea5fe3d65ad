//! Fitting and applying the tail-fair quantile transform.
//!
//! Given base scores split by sensitive group, the fitted transform maps a
//! score `x` of group `s` to
//!
//! ```text
//!   g(x, s) = Q_s^adj( F_s(x + eps) ),   eps ~ U[-sigma, sigma]
//!
//!   Q_s^adj(t) = min{ alpha, Q_s(t) }                         if t <= p
//!              = max{ alpha + xi, sum_s' w_s' Q_s'(t) }       if t >  p
//! ```
//!
//! where `F_s` is the empirical CDF of one half of the group's calibration
//! scores, `Q_s` the empirical quantile function of the other half, and
//! `w_s = N_s / N` the group proportions. Above `alpha` every group shares the
//! same distribution, and each group puts mass `p` at or below `alpha`.
//!
//! `p = 0` disables the lower branch and `p = 1` disables the upper branch.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::empirical_dist::{jitter, uniform_noise, EmpiricalCdf, QuantileTable, SampleSet, StepFunction};
use crate::error::{Error, Result};
use crate::seed::{stream, Purpose};
use crate::serde_ext::extended_f64;

/// Default slack on the upper branch.
pub const DEFAULT_XI: f64 = 1e-5;
/// Default jitter half-width.
pub const DEFAULT_SIGMA: f64 = 1e-6;
/// Version tag of the serialized transform document.
pub const FORMAT_VERSION: u32 = 1;

/// Label of a sensitive group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(String);

impl GroupId {
    pub fn new(label: impl Into<String>) -> Self {
        Self(label.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for GroupId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for GroupId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Scores partitioned by group, in input order within each group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedScores {
    groups: BTreeMap<GroupId, Vec<f64>>,
}

impl GroupedScores {
    /// Rejects an empty map, empty groups and non-finite scores.
    pub fn new(groups: BTreeMap<GroupId, Vec<f64>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::TooFewGroups { count: 0, required: 1 });
        }
        for (g, values) in &groups {
            if values.is_empty() {
                return Err(Error::TooFewSamples {
                    group: g.to_string(),
                    count: 0,
                    required: 1,
                });
            }
            if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite { index, value });
            }
        }
        Ok(Self { groups })
    }

    pub fn from_pairs<I, G>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (G, f64)>,
        G: Into<GroupId>,
    {
        let mut groups: BTreeMap<GroupId, Vec<f64>> = BTreeMap::new();
        for (g, v) in pairs {
            groups.entry(g.into()).or_default().push(v);
        }
        Self::new(groups)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupId, &[f64])> {
        self.groups.iter().map(|(g, v)| (g, v.as_slice()))
    }

    pub fn labels(&self) -> impl Iterator<Item = &GroupId> {
        self.groups.keys()
    }

    pub fn get(&self, group: &GroupId) -> Option<&[f64]> {
        self.groups.get(group).map(Vec::as_slice)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// `N_s`.
    pub fn count(&self, group: &GroupId) -> usize {
        self.groups.get(group).map_or(0, Vec::len)
    }

    /// `N = sum_s N_s`.
    pub fn total(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    /// Sorted per-group samples.
    pub fn sample_set(&self, group: &GroupId) -> Option<SampleSet> {
        self.groups
            .get(group)
            .map(|v| SampleSet::new(v.clone()).expect("validated at construction"))
    }

    pub fn into_inner(self) -> BTreeMap<GroupId, Vec<f64>> {
        self.groups
    }
}

/// Parameters of the transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpTailsParams {
    /// Fairness threshold (prediction units). `-inf` requires `p = 0`,
    /// `+inf` requires `p = 1`.
    #[serde(with = "extended_f64")]
    pub alpha: f64,
    /// Mass each group keeps at or below `alpha`.
    pub p: f64,
    /// Slack making the upper branch strictly exceed `alpha`.
    pub xi: f64,
    /// Jitter half-width used on the calibration samples.
    pub sigma: f64,
    /// Jitter half-width used when transforming new scores; `0` disables it.
    pub transform_sigma: f64,
}

impl DpTailsParams {
    pub fn new(alpha: f64, p: f64) -> Self {
        Self {
            alpha,
            p,
            xi: DEFAULT_XI,
            sigma: DEFAULT_SIGMA,
            transform_sigma: DEFAULT_SIGMA,
        }
    }

    pub fn with_xi(mut self, xi: f64) -> Self {
        self.xi = xi;
        self
    }

    /// Sets both the calibration and the transform jitter.
    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self.transform_sigma = sigma;
        self
    }

    pub fn with_transform_sigma(mut self, sigma: f64) -> Self {
        self.transform_sigma = sigma;
        self
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() {
            return Err(Error::param("alpha", "must not be NaN"));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::param("p", format!("must lie in [0, 1], got {}", self.p)));
        }
        if self.alpha == f64::NEG_INFINITY && self.p != 0.0 {
            return Err(Error::param("p", "alpha = -inf requires p = 0"));
        }
        if self.alpha == f64::INFINITY && self.p != 1.0 {
            return Err(Error::param("p", "alpha = +inf requires p = 1"));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(Error::param("xi", format!("must be finite and >= 0, got {}", self.xi)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::param("sigma", format!("must be finite and > 0, got {}", self.sigma)));
        }
        if !(self.transform_sigma >= 0.0 && self.transform_sigma.is_finite()) {
            return Err(Error::param(
                "transform_sigma",
                format!("must be finite and >= 0, got {}", self.transform_sigma),
            ));
        }
        Ok(())
    }
}

#[inline]
fn lower_branch(p: f64, t: f64) -> bool {
    p > 0.0 && t <= p
}

/// The shared branch formula behind both the empirical and population
/// transforms. `own` is the group's own quantile at `t`, `average` the
/// proportion-weighted average of all groups' quantiles at `t`.
#[inline]
pub(crate) fn branch_value(alpha: f64, p: f64, xi: f64, t: f64, own: f64, average: impl FnOnce() -> f64) -> f64 {
    if lower_branch(p, t) {
        own.min(alpha)
    } else {
        average().max(alpha + xi)
    }
}

/// Which case of the optimal-solution split the fitted tables fall into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `alpha <= sum_s w_s Q_s(p)`: the unconstrained-slack optimum is feasible.
    Attained,
    /// `alpha > sum_s w_s Q_s(p)`: only `xi`-optimal solutions exist.
    NoMinimum,
}

/// Randomly splits every group into a CDF half (first) and a quantile half
/// (second). Odd groups give the extra element to the CDF half. Input order
/// is preserved within each half.
pub fn split_calibration(scores: &GroupedScores, seed: u64) -> Result<(GroupedScores, GroupedScores)> {
    let mut cdf_half = BTreeMap::new();
    let mut quantile_half = BTreeMap::new();
    for (g, values) in scores.iter() {
        let n = values.len();
        if n < 2 {
            return Err(Error::TooFewSamples {
                group: g.to_string(),
                count: n,
                required: 2,
            });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream(seed, Purpose::Split, g.as_str(), 0));
        let (a, b) = idx.split_at(n.div_ceil(2));
        let pick = |part: &[usize]| {
            let mut part = part.to_vec();
            part.sort_unstable();
            part.into_iter().map(|i| values[i]).collect::<Vec<_>>()
        };
        cdf_half.insert(g.clone(), pick(a));
        quantile_half.insert(g.clone(), pick(b));
    }
    Ok((GroupedScores::new(cdf_half)?, GroupedScores::new(quantile_half)?))
}

/// Frozen per-group tables of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTables {
    pub cdf: EmpiricalCdf,
    pub quantile: QuantileTable,
    /// `N_s`, the group's full calibration count.
    pub count: usize,
    /// `N_s / N`.
    pub proportion: f64,
}

/// Everything needed to apply the transform to new scores.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedTransform {
    params: DpTailsParams,
    seed: u64,
    groups: BTreeMap<GroupId, GroupTables>,
}

/// Fits per-group tables on `scores`: splits each group, jitters both halves
/// with width `sigma`, and records `N_s / N`.
pub fn fit(scores: &GroupedScores, params: &DpTailsParams, seed: u64) -> Result<FittedTransform> {
    params.validate()?;
    let (cdf_half, quantile_half) = split_calibration(scores, seed)?;
    let mut tables = BTreeMap::new();
    for (g, _) in scores.iter() {
        let label = g.as_str();
        let cdf_raw = cdf_half.sample_set(g).expect("same labels");
        let q_raw = quantile_half.sample_set(g).expect("same labels");
        let cdf = jitter(&cdf_raw, params.sigma, &mut stream(seed, Purpose::JitterCdf, label, 0))?;
        let quantile = jitter(&q_raw, params.sigma, &mut stream(seed, Purpose::JitterQuantile, label, 0))?;
        tables.insert(g.clone(), (cdf, quantile, scores.count(g)));
    }
    FittedTransform::from_tables(tables, *params, seed)
}

impl FittedTransform {
    /// Assembles a transform from explicit per-group `(cdf samples, quantile
    /// samples, N_s)`. Used by [`fit`], by deserialization and by fixtures.
    pub fn from_tables(
        tables: BTreeMap<GroupId, (SampleSet, SampleSet, usize)>,
        params: DpTailsParams,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if tables.is_empty() {
            return Err(Error::TooFewGroups { count: 0, required: 1 });
        }
        let total: usize = tables.values().map(|t| t.2).sum();
        let mut groups = BTreeMap::new();
        for (g, (cdf, quantile, count)) in tables {
            if count == 0 {
                return Err(Error::TooFewSamples {
                    group: g.to_string(),
                    count,
                    required: 1,
                });
            }
            groups.insert(
                g,
                GroupTables {
                    cdf: EmpiricalCdf::new(cdf),
                    quantile: QuantileTable::new(quantile),
                    count,
                    proportion: count as f64 / total as f64,
                },
            );
        }
        Ok(Self { params, seed, groups })
    }

    pub fn params(&self) -> &DpTailsParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn groups(&self) -> &BTreeMap<GroupId, GroupTables> {
        &self.groups
    }

    /// The same tables with different parameters. Calibration parameters
    /// (`sigma`) are not re-applied.
    pub fn with_params(mut self, params: DpTailsParams) -> Result<Self> {
        params.validate()?;
        self.params = params;
        Ok(self)
    }

    pub fn with_p(self, p: f64) -> Result<Self> {
        let params = self.params.with_p(p);
        self.with_params(params)
    }

    fn tables(&self, group: &GroupId) -> Result<&GroupTables> {
        self.groups
            .get(group)
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))
    }

    pub fn proportion(&self, group: &GroupId) -> Result<f64> {
        Ok(self.tables(group)?.proportion)
    }

    /// `sum_s w_s Q_s(t)` for `t` in `[0, 1]`.
    pub fn average_quantile(&self, t: f64) -> f64 {
        self.groups
            .values()
            .map(|tb| tb.proportion * tb.quantile.eval_clamped(t))
            .sum()
    }

    /// Regime diagnostic: compares `alpha` with `sum_s w_s Q_s(p)`.
    pub fn regime(&self) -> Regime {
        if self.params.alpha <= self.average_quantile(self.params.p) {
            Regime::Attained
        } else {
            Regime::NoMinimum
        }
    }

    /// Adjusted quantile of `group` at level `t` with the fitted parameters.
    pub fn adjusted_quantile(&self, group: &GroupId, t: f64) -> Result<f64> {
        let p = &self.params;
        self.adjusted_quantile_with(group, t, p.alpha, p.p, p.xi)
    }

    /// Adjusted quantile with explicit `(alpha, p, xi)`.
    pub fn adjusted_quantile_with(&self, group: &GroupId, t: f64, alpha: f64, p: f64, xi: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::LevelOutOfRange(t));
        }
        let tb = self.tables(group)?;
        Ok(self.adjusted_unchecked(tb, t, alpha, p, xi))
    }

    #[inline]
    pub(crate) fn adjusted_unchecked(&self, tb: &GroupTables, t: f64, alpha: f64, p: f64, xi: f64) -> f64 {
        branch_value(alpha, p, xi, t, tb.quantile.eval_clamped(t), || self.average_quantile(t))
    }

    /// `F_s(score + eps)`, the level of a new score inside its group.
    pub fn level<R: Rng + ?Sized>(&self, score: f64, group: &GroupId, rng: &mut R) -> Result<f64> {
        if !score.is_finite() {
            return Err(Error::NonFinite { index: 0, value: score });
        }
        let tb = self.tables(group)?;
        let eps = if self.params.transform_sigma > 0.0 {
            rng.sample(uniform_noise(self.params.transform_sigma)?)
        } else {
            0.0
        };
        Ok(tb.cdf.eval(score + eps))
    }

    /// Transforms one score, drawing the jitter from `rng`.
    pub fn transform<R: Rng + ?Sized>(&self, score: f64, group: &GroupId, rng: &mut R) -> Result<f64> {
        let t = self.level(score, group, rng)?;
        self.adjusted_quantile(group, t)
    }

    /// Transforms the `index`-th score of `group` using that element's own
    /// noise stream derived from `(seed, group, index)`.
    pub fn transform_element(&self, score: f64, group: &GroupId, index: usize, seed: u64) -> Result<f64> {
        let mut rng = stream(seed, Purpose::Transform, group.as_str(), index as u64);
        self.transform(score, group, &mut rng)
    }

    /// Elementwise transform preserving grouping and order.
    pub fn transform_batch(&self, scores: &GroupedScores, seed: u64) -> Result<GroupedScores> {
        let mut out = BTreeMap::new();
        for (g, values) in scores.iter() {
            self.tables(g)?;
            let mapped = values
                .iter()
                .enumerate()
                .map(|(i, &x)| self.transform_element(x, g, i, seed))
                .collect::<Result<Vec<_>>>()?;
            out.insert(g.clone(), mapped);
        }
        GroupedScores::new(out)
    }

    /// The adjusted quantile of `group` as an explicit step function on
    /// `(0, 1)`, exact at every level.
    pub fn adjusted_step_function(&self, group: &GroupId) -> Result<StepFunction> {
        let tb = self.tables(group)?;
        let mut breaks: Vec<f64> = self
            .groups
            .values()
            .flat_map(|tb| {
                let n = tb.quantile.samples().len();
                (0..=n).map(move |k| k as f64 / n as f64)
            })
            .collect();
        if self.params.p > 0.0 && self.params.p < 1.0 {
            breaks.push(self.params.p);
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let p = &self.params;
        let values = breaks[1..]
            .iter()
            .map(|&b| self.adjusted_unchecked(tb, b, p.alpha, p.p, p.xi))
            .collect();
        StepFunction::new(breaks, values)
    }

    /// Serializes to the versioned JSON transform document.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TransformDocument::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: TransformDocument = serde_json::from_str(s)?;
        doc.try_into()
    }
}

/// On-disk form of a [`FittedTransform`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformDocument {
    pub format_version: u32,
    pub params: DpTailsParams,
    pub seed: u64,
    pub groups: Vec<GroupDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupDocument {
    pub label: GroupId,
    pub count: usize,
    pub proportion: f64,
    pub cdf_samples: Vec<f64>,
    pub quantile_samples: Vec<f64>,
}

impl From<&FittedTransform> for TransformDocument {
    fn from(f: &FittedTransform) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            params: f.params,
            seed: f.seed,
            groups: f
                .groups
                .iter()
                .map(|(g, tb)| GroupDocument {
                    label: g.clone(),
                    count: tb.count,
                    proportion: tb.proportion,
                    cdf_samples: tb.cdf.samples().values().to_vec(),
                    quantile_samples: tb.quantile.samples().values().to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<TransformDocument> for FittedTransform {
    type Error = Error;

    fn try_from(doc: TransformDocument) -> Result<Self> {
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: doc.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let mut tables = BTreeMap::new();
        for g in doc.groups {
            tables.insert(
                g.label,
                (SampleSet::new(g.cdf_samples)?, SampleSet::new(g.quantile_samples)?, g.count),
            );
        }
        FittedTransform::from_tables(tables, doc.params, doc.seed)
    }
}

/// A population quantile function on `[0, 1]`.
pub type QuantileFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Exact per-group quantile functions with group proportions; the analytic
/// counterpart of a [`FittedTransform`], used for fixtures and oracles.
#[derive(Clone)]
pub struct PopulationModel {
    quantiles: Vec<QuantileFn>,
    proportions: Vec<f64>,
    kinks: Vec<f64>,
}

impl fmt::Debug for PopulationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PopulationModel")
            .field("groups", &self.quantiles.len())
            .field("proportions", &self.proportions)
            .field("kinks", &self.kinks.len())
            .finish()
    }
}

impl PopulationModel {
    /// Proportions must be positive and sum to one within `1e-12`.
    pub fn new(quantiles: Vec<QuantileFn>, proportions: Vec<f64>) -> Result<Self> {
        if quantiles.is_empty() {
            return Err(Error::TooFewGroups { count: 0, required: 1 });
        }
        if quantiles.len() != proportions.len() {
            return Err(Error::LengthMismatch {
                left: quantiles.len(),
                right: proportions.len(),
            });
        }
        let sum: f64 = proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || proportions.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidProportions { sum });
        }
        Ok(Self {
            quantiles,
            proportions,
            kinks: Vec::new(),
        })
    }

    /// Declares levels in `(0, 1)` where some quantile function jumps, so
    /// quadrature can split there.
    pub fn with_kinks(mut self, mut kinks: Vec<f64>) -> Self {
        kinks.retain(|k| *k > 0.0 && *k < 1.0);
        kinks.sort_by(f64::total_cmp);
        kinks.dedup();
        self.kinks = kinks;
        self
    }

    pub fn num_groups(&self) -> usize {
        self.quantiles.len()
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    pub fn kinks(&self) -> &[f64] {
        &self.kinks
    }

    pub fn quantile(&self, group: usize, t: f64) -> f64 {
        (self.quantiles[group])(t)
    }

    /// `sum_s w_s Q_s(t)`.
    pub fn average_quantile(&self, t: f64) -> f64 {
        self.quantiles
            .iter()
            .zip(&self.proportions)
            .map(|(q, w)| w * q(t))
            .sum()
    }
}

/// Whether the upper branch is clipped at `alpha` or at `alpha + xi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Star,
    Xi,
}

/// Population adjusted quantile `Q*_s` or `Q^xi_s`.
#[derive(Debug, Clone)]
pub struct PopulationTransform<'a> {
    model: &'a PopulationModel,
    alpha: f64,
    p: f64,
    slack: f64,
}

/// Builds the population adjusted quantile for `params` and `variant`.
pub fn population_adjusted_quantile<'a>(
    model: &'a PopulationModel,
    params: &DpTailsParams,
    variant: Variant,
) -> Result<PopulationTransform<'a>> {
    params.validate()?;
    let slack = match variant {
        Variant::Star => 0.0,
        Variant::Xi => params.xi,
    };
    Ok(PopulationTransform {
        model,
        alpha: params.alpha,
        p: params.p,
        slack,
    })
}

impl PopulationTransform<'_> {
    pub fn eval(&self, group: usize, t: f64) -> f64 {
        branch_value(self.alpha, self.p, self.slack, t, self.model.quantile(group, t), || {
            self.model.average_quantile(t)
        })
    }

    pub fn regime(&self) -> Regime {
        if self.alpha <= self.model.average_quantile(self.p) {
            Regime::Attained
        } else {
            Regime::NoMinimum
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::empirical_dist::dual_generalized_inverse;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(s: &str) -> GroupId {
        GroupId::from(s)
    }

    /// Grid `{offset + k/m : k = 1..m}`, whose empirical quantile at level
    /// `k/m` is exactly `offset + k/m`.
    fn grid(offset: f64, m: usize) -> SampleSet {
        SampleSet::new((1..=m).map(|k| offset + k as f64 / m as f64).collect()).unwrap()
    }

    fn uniform_fixture(params: DpTailsParams) -> FittedTransform {
        let m = 1000;
        let mut tables = BTreeMap::new();
        tables.insert(g("0"), (grid(0.0, m), grid(0.0, m), m));
        tables.insert(g("1"), (grid(1.0, m), grid(1.0, m), m));
        FittedTransform::from_tables(tables, params, 0).unwrap()
    }

    fn uniform_model() -> PopulationModel {
        PopulationModel::new(vec![Arc::new(|u| u), Arc::new(|u| u + 1.0)], vec![0.5, 0.5]).unwrap()
    }

    fn fixture_params() -> DpTailsParams {
        DpTailsParams::new(0.75, 0.5).with_xi(0.0).with_transform_sigma(0.0)
    }

    fn scores(n: usize, shift: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() + shift).collect()
    }

    fn two_groups(n0: usize, n1: usize, seed: u64) -> GroupedScores {
        let mut m = BTreeMap::new();
        m.insert(g("a"), scores(n0, 0.0, seed));
        m.insert(g("b"), scores(n1, 1.0, seed + 1));
        GroupedScores::new(m).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(DpTailsParams::new(0.0, 0.5).validate().is_ok());
        assert!(DpTailsParams::new(0.0, 1.5).validate().is_err());
        assert!(DpTailsParams::new(f64::NAN, 0.5).validate().is_err());
        assert!(DpTailsParams::new(0.0, 0.5).with_xi(-1.0).validate().is_err());
        assert!(DpTailsParams::new(0.0, 0.5).with_sigma(0.0).validate().is_err());
        assert!(DpTailsParams::new(f64::NEG_INFINITY, 0.5).validate().is_err());
        assert!(DpTailsParams::new(f64::NEG_INFINITY, 0.0).validate().is_ok());
        assert!(DpTailsParams::new(f64::INFINITY, 1.0).validate().is_ok());
        assert!(DpTailsParams::new(0.0, 0.5).with_transform_sigma(0.0).validate().is_ok());
    }

    #[test]
    fn grouped_scores_reject_empty_group() {
        let mut m = BTreeMap::new();
        m.insert(g("a"), vec![1.0]);
        m.insert(g("b"), vec![]);
        assert!(matches!(GroupedScores::new(m), Err(Error::TooFewSamples { .. })));
        assert!(GroupedScores::new(BTreeMap::new()).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let mut m = BTreeMap::new();
        m.insert(g("ten"), scores(10, 0.0, 1));
        m.insert(g("five"), scores(5, 0.0, 2));
        let s = GroupedScores::new(m).unwrap();
        let (a, b) = split_calibration(&s, 9).unwrap();
        assert_eq!((a.count(&g("ten")), b.count(&g("ten"))), (5, 5));
        assert_eq!((a.count(&g("five")), b.count(&g("five"))), (3, 2));
        let (a2, b2) = split_calibration(&s, 9).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn split_halves_partition_the_group() {
        let s = two_groups(31, 20, 4);
        let (a, b) = split_calibration(&s, 5).unwrap();
        for (label, values) in s.iter() {
            let mut joined: Vec<f64> = a.get(label).unwrap().iter().chain(b.get(label).unwrap()).copied().collect();
            let mut orig = values.to_vec();
            joined.sort_by(f64::total_cmp);
            orig.sort_by(f64::total_cmp);
            assert_eq!(joined, orig);
        }
    }

    #[test]
    fn split_rejects_tiny_groups() {
        let s = GroupedScores::from_pairs([("a", 1.0), ("b", 2.0), ("b", 3.0)]).unwrap();
        assert!(matches!(split_calibration(&s, 0), Err(Error::TooFewSamples { required: 2, .. })));
    }

    #[test]
    fn fit_proportions() {
        let f = fit(&two_groups(500, 500, 1), &DpTailsParams::new(0.5, 0.5), 3).unwrap();
        assert_eq!(f.proportion(&g("a")).unwrap(), 0.5);
        assert_eq!(f.proportion(&g("b")).unwrap(), 0.5);

        let single = GroupedScores::from_pairs(scores(20, 0.0, 1).into_iter().map(|v| ("only", v))).unwrap();
        let f = fit(&single, &DpTailsParams::new(0.5, 0.5), 3).unwrap();
        assert_eq!(f.proportion(&g("only")).unwrap(), 1.0);

        let f = fit(&two_groups(1032, 962, 1), &DpTailsParams::new(0.5, 0.5), 3).unwrap();
        assert_eq!(f.proportion(&g("a")).unwrap(), 1032.0 / 1994.0);
        let total: f64 = f.groups().values().map(|t| t.proportion).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fit_tables_come_from_disjoint_halves() {
        let s = two_groups(41, 30, 2);
        let f = fit(&s, &DpTailsParams::new(0.5, 0.5), 8).unwrap();
        let tb = &f.groups()[&g("a")];
        assert_eq!(tb.cdf.samples().len(), 21);
        assert_eq!(tb.quantile.samples().len(), 20);
        assert_eq!(tb.count, 41);
    }

    #[test]
    fn adjusted_quantile_uniform_fixture() {
        let f = uniform_fixture(fixture_params());
        assert_eq!(f.adjusted_quantile(&g("1"), 0.25).unwrap(), 0.75);
        let v0 = f.adjusted_quantile(&g("0"), 0.6).unwrap();
        let v1 = f.adjusted_quantile(&g("1"), 0.6).unwrap();
        assert!((v0 - 1.1).abs() < 1e-12);
        assert_eq!(v0.to_bits(), v1.to_bits());
        // lower branch below alpha leaves the quantile untouched
        assert_eq!(f.adjusted_quantile(&g("0"), 0.25).unwrap(), 0.25);
        assert!(matches!(f.adjusted_quantile(&g("x"), 0.2), Err(Error::UnknownGroup(_))));
        assert!(f.adjusted_quantile(&g("0"), 1.2).is_err());
    }

    #[test]
    fn level_equal_to_p_goes_low() {
        let f = uniform_fixture(fixture_params());
        assert_eq!(f.adjusted_quantile(&g("1"), 0.5).unwrap(), 0.75);
        assert!(f.adjusted_quantile(&g("1"), 0.501).unwrap() > 0.75);
    }

    #[test]
    fn transform_uniform_fixture() {
        let f = uniform_fixture(fixture_params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = f.transform(0.6, &g("0"), &mut rng).unwrap();
        assert!((y - 1.1).abs() < 1e-12);
        assert!(f.transform(f64::NAN, &g("0"), &mut rng).is_err());
        assert!(matches!(f.transform(0.6, &g("zz"), &mut rng), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn transform_identity_regimes() {
        // one group, p = 0 and alpha below the support: the average quantile is the group's own
        let pts = SampleSet::new(scores(400, 0.0, 5)).unwrap();
        let mut tables = BTreeMap::new();
        tables.insert(g("g"), (pts.clone(), pts.clone(), 400));
        let params = DpTailsParams::new(-10.0, 0.0).with_xi(0.0).with_transform_sigma(0.0);
        let f = FittedTransform::from_tables(tables, params, 0).unwrap();
        for (i, &x) in pts.values().iter().enumerate() {
            assert_eq!(f.transform_element(x, &g("g"), i, 2).unwrap(), x);
        }
        // with a real split the round trip goes through the other half
        let s = GroupedScores::from_pairs(scores(400, 0.0, 5).into_iter().map(|v| ("g", v))).unwrap();
        let f = fit(&s, &params.with_sigma(1e-12), 1).unwrap();
        for (i, &x) in s.get(&g("g")).unwrap().iter().enumerate() {
            assert!((f.transform_element(x, &g("g"), i, 2).unwrap() - x).abs() < 0.15);
        }

        // alpha above all supports with p = 1: min{alpha, .} is inactive
        let params = DpTailsParams::new(10.0, 1.0).with_xi(0.0).with_sigma(1e-12);
        let f = uniform_fixture(params.with_transform_sigma(0.0));
        for k in 1..1000 {
            let x = k as f64 / 1000.0;
            let y = f.transform_element(x, &g("0"), k, 0).unwrap();
            assert!((y - x).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matches_elementwise_and_is_deterministic() {
        let s = two_groups(60, 40, 3);
        let f = fit(&s, &DpTailsParams::new(0.8, 0.4), 4).unwrap();
        let a = f.transform_batch(&s, 77).unwrap();
        let b = f.transform_batch(&s, 77).unwrap();
        assert_eq!(a, b);
        for (label, values) in s.iter() {
            let out = a.get(label).unwrap();
            assert_eq!(out.len(), values.len());
            for (i, &x) in values.iter().enumerate() {
                assert_eq!(out[i], f.transform_element(x, label, i, 77).unwrap());
            }
        }
        let unknown = GroupedScores::from_pairs([("nope", 1.0)]).unwrap();
        assert!(f.transform_batch(&unknown, 1).is_err());
    }

    #[test]
    fn regime_diagnostic() {
        let f = uniform_fixture(fixture_params());
        // average quantile at p = 0.5 is 1.0
        assert_eq!(f.regime(), Regime::Attained);
        let f = f.with_params(fixture_params().with_p(0.2)).unwrap();
        // average at 0.2 is 0.7 < 0.75
        assert_eq!(f.regime(), Regime::NoMinimum);
    }

    #[test]
    fn threshold_level_is_exactly_p() {
        let s = two_groups(300, 200, 6);
        for &p in &[0.0, 0.1, 0.37, 0.5, 0.9, 1.0] {
            for &alpha in &[-1.0, 0.3, 0.9, 1.4, 3.0] {
                let f = fit(&s, &DpTailsParams::new(alpha, p), 2).unwrap();
                for label in s.labels() {
                    let step = f.adjusted_step_function(label).unwrap();
                    assert_eq!(step.dual_inverse(alpha), p, "alpha {alpha} p {p}");
                    let bis = dual_generalized_inverse(|t| f.adjusted_quantile(label, t).unwrap(), 0.0, 1.0, alpha);
                    assert!((bis - p).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn calibration_half_cdfs_agree_above_alpha() {
        let s = two_groups(301, 180, 7);
        let alpha = 0.9;
        let params = DpTailsParams::new(alpha, 0.4).with_transform_sigma(0.0);
        let f = fit(&s, &params, 3).unwrap();
        let mut transformed = BTreeMap::new();
        let mut min_half = usize::MAX;
        for (label, tb) in f.groups() {
            let pts = tb.cdf.samples().values();
            min_half = min_half.min(pts.len());
            let out: Vec<f64> = pts.iter().map(|&x| f.transform_element(x, label, 0, 0).unwrap()).collect();
            transformed.insert(label.clone(), SampleSet::new(out).unwrap());
        }
        let sets: Vec<&SampleSet> = transformed.values().collect();
        let (a, b) = (sets[0], sets[1]);
        let fa = EmpiricalCdf::new(a.clone());
        let fb = EmpiricalCdf::new(b.clone());
        let points = a.values().iter().chain(b.values()).copied().filter(|&t| t >= alpha).chain([alpha]);
        for t in points {
            assert!((fa.eval(t) - fb.eval(t)).abs() <= 1.0 / min_half as f64 + 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_value_exact() {
        let s = two_groups(50, 33, 9);
        let f = fit(&s, &DpTailsParams::new(0.123456789012345, 0.3).with_xi(1e-5), 11).unwrap();
        let back = FittedTransform::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(f, back);

        let inf = fit(&s, &DpTailsParams::new(f64::NEG_INFINITY, 0.0), 1).unwrap();
        let json = inf.to_json().unwrap();
        assert!(json.contains("\"-inf\""));
        assert_eq!(FittedTransform::from_json(&json).unwrap(), inf);
    }

    #[test]
    fn json_rejects_other_versions() {
        let s = two_groups(10, 10, 1);
        let f = fit(&s, &DpTailsParams::new(0.5, 0.5), 1).unwrap();
        let json = f.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            FittedTransform::from_json(&json),
            Err(Error::FormatVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn population_model_validation() {
        let q: QuantileFn = Arc::new(|u| u);
        assert!(PopulationModel::new(vec![q.clone(), q.clone()], vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            PopulationModel::new(vec![q.clone(), q.clone()], vec![0.5, 0.6]),
            Err(Error::InvalidProportions { .. })
        ));
        assert!(PopulationModel::new(vec![q.clone(), q], vec![0.5, 0.5 + 1e-11]).is_err());
    }

    #[test]
    fn population_uniform_fixture() {
        let model = uniform_model();
        let star = population_adjusted_quantile(&model, &fixture_params(), Variant::Star).unwrap();
        assert_eq!(star.eval(1, 0.25), 0.75);
        assert!((star.eval(0, 0.6) - 1.1).abs() < 1e-15);
        assert_eq!(star.eval(0, 0.6), star.eval(1, 0.6));
    }

    #[test]
    fn population_single_group_at_alpha_equals_q_is_identity() {
        let model = PopulationModel::new(vec![Arc::new(|u: f64| 2.0 * u - 1.0)], vec![1.0]).unwrap();
        let p = 0.3;
        let params = DpTailsParams::new(2.0 * p - 1.0, p).with_xi(0.0);
        let star = population_adjusted_quantile(&model, &params, Variant::Star).unwrap();
        for k in 0..=100 {
            let t = k as f64 / 100.0;
            assert_eq!(star.eval(0, t), model.quantile(0, t));
        }
    }

    proptest! {
        #[test]
        fn star_and_xi_differ_by_at_most_xi(
            alpha in -1.0f64..3.0, p in 0.0f64..=1.0, xi in 0.0f64..0.5, t in 0.0f64..=1.0
        ) {
            let model = uniform_model();
            let params = DpTailsParams::new(alpha, p).with_xi(xi);
            let star = population_adjusted_quantile(&model, &params, Variant::Star).unwrap();
            let xq = population_adjusted_quantile(&model, &params, Variant::Xi).unwrap();
            for s in 0..2 {
                let gap = (xq.eval(s, t) - star.eval(s, t)).abs();
                prop_assert!(gap <= (alpha + xi) - alpha);
            }
        }

        #[test]
        fn adjusted_quantile_is_monotone_and_shared_above_p(
            seed in 0u64..1000, alpha in -0.5f64..2.5, p in 0.0f64..=1.0, xi in 0.0f64..0.1
        ) {
            let s = two_groups(30, 17, seed);
            let f = fit(&s, &DpTailsParams::new(alpha, p).with_xi(xi), seed).unwrap();
            let levels: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
            for label in s.labels() {
                let vals: Vec<f64> = levels.iter().map(|&t| f.adjusted_quantile(label, t).unwrap()).collect();
                prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
                for (&t, &v) in levels.iter().zip(&vals) {
                    if lower_branch(p, t) {
                        prop_assert!(v <= alpha);
                    } else if xi > 0.0 {
                        prop_assert!(v > alpha);
                    }
                }
            }
            for &t in levels.iter().filter(|&&t| !lower_branch(p, t)) {
                let a = f.adjusted_quantile(&g("a"), t).unwrap();
                let b = f.adjusted_quantile(&g("b"), t).unwrap();
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
