//! Choosing the unfairness proportion `p` for a fixed threshold `alpha`.
//!
//! Two objectives are provided:
//!
//! * [`population_objective`], the exact risk of the optimal `(alpha, p)`
//!   transform for known quantile functions, by quadrature;
//! * [`EmpiricalObjective`], the mean squared change that the `xi = 0`
//!   transform applies to the calibration scores.
//!
//! The empirical objective only depends on which calibration points fall in
//! the lower branch, so it is a step function of `p` with jumps at the
//! points' levels. [`optimize_p`] scans every step by default; bounded Brent
//! is available as an alternative.

use serde::{Deserialize, Serialize};

use crate::brent::minimize_bounded;
use crate::dp_tails::{fit, DpTailsParams, FittedTransform, GroupedScores, PopulationModel};
use crate::empirical_dist::dual_generalized_inverse;
use crate::error::{Error, Result};
use crate::quadrature::integrate;
use crate::seed::{stream, Purpose};
use crate::serde_ext::extended_f64;

/// Absolute tolerance of [`population_objective`].
pub const QUADRATURE_TOL: f64 = 1e-9;
/// Absolute x-tolerance of the Brent search.
pub const BRENT_XTOL: f64 = 1e-6;
/// Evaluation cap of the Brent search.
pub const BRENT_MAX_EVALS: usize = 200;

/// Risk of the optimal `(alpha, p)` transform under `model`:
///
/// `sum_s w_s [ int_0^p (Q_s - min{alpha, Q_s})^2 + int_p^1 (Q_s - max{alpha, Qbar})^2 ]`
pub fn population_objective(model: &PopulationModel, alpha: f64, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param("p", format!("must lie in [0, 1], got {p}")));
    }
    if alpha.is_nan() {
        return Err(Error::param("alpha", "must not be NaN"));
    }
    let weights = model.proportions();
    let integrand = |x: f64| -> f64 {
        if p > 0.0 && x <= p {
            (0..model.num_groups())
                .map(|s| {
                    let q = model.quantile(s, x);
                    weights[s] * (q - q.min(alpha)).powi(2)
                })
                .sum()
        } else {
            let target = model.average_quantile(x).max(alpha);
            (0..model.num_groups())
                .map(|s| weights[s] * (model.quantile(s, x) - target).powi(2))
                .sum()
        }
    };

    // kinks: p, where the average crosses alpha, and where each group does
    let mut breaks = vec![0.0, 1.0, p];
    if alpha.is_finite() {
        breaks.push(dual_generalized_inverse(|x| model.average_quantile(x), 0.0, 1.0, alpha));
        for s in 0..model.num_groups() {
            breaks.push(dual_generalized_inverse(|x| model.quantile(s, x), 0.0, 1.0, alpha));
        }
    }
    breaks.extend_from_slice(model.kinks());
    breaks.retain(|b| (0.0..=1.0).contains(b));
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    Ok(integrate(&integrand, &breaks, QUADRATURE_TOL))
}

/// The empirical objective for fixed tables and `alpha`, precomputed so every
/// evaluation costs one binary search.
#[derive(Debug, Clone)]
pub struct EmpiricalObjective {
    alpha: f64,
    /// Calibration levels `F_s(x + eps)`, ascending.
    levels: Vec<f64>,
    /// `prefix_lower[k]`: lower-branch squared change of the `k` lowest levels.
    prefix_lower: Vec<f64>,
    /// `suffix_upper[k]`: upper-branch squared change of all but the `k` lowest.
    suffix_upper: Vec<f64>,
}

impl EmpiricalObjective {
    /// Computes the level and both branch costs of every calibration score.
    /// Jitter is drawn from per-element streams of the fitted seed.
    pub fn new(fitted: &FittedTransform, calibration: &GroupedScores) -> Result<Self> {
        let alpha = fitted.params().alpha;
        let seed = fitted.seed();
        let mut points = Vec::with_capacity(calibration.total());
        for (g, values) in calibration.iter() {
            let tb = fitted
                .groups()
                .get(g)
                .ok_or_else(|| Error::UnknownGroup(g.to_string()))?;
            for (i, &x) in values.iter().enumerate() {
                let mut rng = stream(seed, Purpose::Objective, g.as_str(), i as u64);
                let t = fitted.level(x, g, &mut rng)?;
                let lower = x - fitted.adjusted_unchecked(tb, t, alpha, 1.0, 0.0);
                let upper = x - fitted.adjusted_unchecked(tb, t, alpha, 0.0, 0.0);
                points.push((t, lower * lower, upper * upper));
            }
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = points.len();
        let mut prefix_lower = vec![0.0; n + 1];
        let mut suffix_upper = vec![0.0; n + 1];
        for (k, pt) in points.iter().enumerate() {
            prefix_lower[k + 1] = prefix_lower[k] + pt.1;
        }
        for (k, pt) in points.iter().enumerate().rev() {
            suffix_upper[k] = suffix_upper[k + 1] + pt.2;
        }
        Ok(Self {
            alpha,
            levels: points.into_iter().map(|pt| pt.0).collect(),
            prefix_lower,
            suffix_upper,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of calibration points in the lower branch at `p`.
    fn lower_count(&self, p: f64) -> usize {
        if p > 0.0 {
            self.levels.partition_point(|&t| t <= p)
        } else {
            0
        }
    }

    /// Objective value at `p` in `[0, 1]`.
    pub fn value(&self, p: f64) -> f64 {
        let k = self.lower_count(p);
        (self.prefix_lower[k] + self.suffix_upper[k]) / self.levels.len() as f64
    }

    /// Distinct levels strictly inside `(0, 1)`; the objective is constant
    /// between consecutive entries of `{0} ∪ breakpoints ∪ {1}`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.levels.iter().copied().filter(|&t| t > 0.0 && t < 1.0).collect();
        b.dedup();
        b
    }

    /// Evaluation points covering every constant piece: `0`, `1` and the
    /// midpoint of each pair of consecutive breakpoints.
    pub fn grid(&self) -> Vec<f64> {
        let mut edges = vec![0.0];
        edges.extend(self.breakpoints());
        edges.push(1.0);
        let mut grid = vec![0.0];
        grid.extend(edges.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        grid.push(1.0);
        grid
    }
}

/// `(1/N) sum (x - g0(x))^2` over the calibration pool at proportion `p`.
pub fn empirical_objective(fitted: &FittedTransform, calibration: &GroupedScores, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param("p", format!("must lie in [0, 1], got {p}")));
    }
    Ok(EmpiricalObjective::new(fitted, calibration)?.value(p))
}

/// Search strategy for [`optimize_p`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Grid,
    Brent,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Method::Grid),
            "brent" => Ok(Method::Brent),
            other => Err(Error::param("method", format!("expected `grid` or `brent`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub p: f64,
    pub value: f64,
}

/// Result of a `p` search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PObjectiveReport {
    #[serde(with = "extended_f64")]
    pub alpha: f64,
    pub method: Method,
    pub argmin_p: f64,
    pub argmin_value: f64,
    pub evaluation_count: usize,
    /// The minimum is attained on more than one constant piece (within a
    /// relative `1e-12`).
    pub plateau: bool,
    pub evaluations: Vec<Evaluation>,
}

impl PObjectiveReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Minimizes the empirical objective for the tables and `alpha` of `fitted`.
///
/// `alpha = -inf` forces `p = 0` and `alpha = +inf` forces `p = 1`.
pub fn optimize_p_fitted(fitted: &FittedTransform, calibration: &GroupedScores, method: Method) -> Result<PObjectiveReport> {
    let objective = EmpiricalObjective::new(fitted, calibration)?;
    let alpha = objective.alpha();
    let forced = if alpha == f64::NEG_INFINITY {
        Some(0.0)
    } else if alpha == f64::INFINITY {
        Some(1.0)
    } else {
        None
    };
    if let Some(p) = forced {
        let value = objective.value(p);
        return Ok(PObjectiveReport {
            alpha,
            method,
            argmin_p: p,
            argmin_value: value,
            evaluation_count: 1,
            plateau: false,
            evaluations: vec![Evaluation { p, value }],
        });
    }

    let evaluations: Vec<Evaluation> = match method {
        Method::Grid => objective
            .grid()
            .into_iter()
            .map(|p| Evaluation { p, value: objective.value(p) })
            .collect(),
        Method::Brent => minimize_bounded(|p| objective.value(p), 0.0, 1.0, BRENT_XTOL, BRENT_MAX_EVALS)
            .evaluations
            .into_iter()
            .map(|(p, value)| Evaluation { p, value })
            .collect(),
    };

    // exact minimum; ties go to the smallest p
    let best = evaluations
        .iter()
        .copied()
        .reduce(|best, e| {
            if e.value < best.value || (e.value == best.value && e.p < best.p) {
                e
            } else {
                best
            }
        })
        .expect("at least one evaluation");

    let slack = 1e-12 * best.value.abs().max(f64::MIN_POSITIVE);
    let mut pieces: Vec<usize> = evaluations
        .iter()
        .filter(|e| e.value <= best.value + slack)
        .map(|e| objective.lower_count(e.p))
        .collect();
    pieces.sort_unstable();
    pieces.dedup();

    Ok(PObjectiveReport {
        alpha,
        method,
        argmin_p: best.p,
        argmin_value: best.value,
        evaluation_count: evaluations.len(),
        plateau: pieces.len() > 1,
        evaluations,
    })
}

/// Fits tables on `calibration` with `params` (whose `p` is ignored) and
/// minimizes the empirical objective over `p`.
pub fn optimize_p(calibration: &GroupedScores, params: &DpTailsParams, method: Method, seed: u64) -> Result<PObjectiveReport> {
    let provisional = provisional_params(params);
    let fitted = fit(calibration, &provisional, seed)?;
    optimize_p_fitted(&fitted, calibration, method)
}

/// Fits, optimizes `p`, and returns the transform with the chosen `p`.
pub fn fit_optimized(
    calibration: &GroupedScores,
    params: &DpTailsParams,
    method: Method,
    seed: u64,
) -> Result<(FittedTransform, PObjectiveReport)> {
    let fitted = fit(calibration, &provisional_params(params), seed)?;
    let report = optimize_p_fitted(&fitted, calibration, method)?;
    let fitted = fitted.with_p(report.argmin_p)?;
    Ok((fitted, report))
}

fn provisional_params(params: &DpTailsParams) -> DpTailsParams {
    let p = if params.alpha == f64::INFINITY {
        1.0
    } else if params.alpha == f64::NEG_INFINITY {
        0.0
    } else {
        params.p.clamp(0.0, 1.0)
    };
    params.with_p(p)
}
