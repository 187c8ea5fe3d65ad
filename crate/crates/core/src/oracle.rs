//! Brute-force ground truth on discrete quantile grids.
//!
//! A [`DiscreteInstance`] fixes each group's quantile values at the midpoint
//! levels `t_i = (i - 1/2)/m`. The constrained risk then decouples over
//! levels: below `p` each group independently picks the grid value `<= alpha`
//! closest to its own quantile, above `p` all groups share the grid value
//! above `alpha` closest to the weighted mean. [`grid_search_optimum`] does
//! this by exhaustive scan, and the `verify_*` functions compare the result
//! with the library's closed form.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp_tails::{population_adjusted_quantile, DpTailsParams, PopulationModel, QuantileFn, Regime, Variant};
use crate::error::{Error, Result};
use crate::p_optimizer::population_objective;

/// Default spacing of the candidate value grid.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    /// `values[s][i]` is `Q_s(t_i)`, strictly increasing in `i`.
    pub values: Vec<Vec<f64>>,
    pub proportions: Vec<f64>,
    pub alpha: f64,
    /// `p = k / m`.
    pub k: usize,
}

impl DiscreteInstance {
    pub fn new(values: Vec<Vec<f64>>, proportions: Vec<f64>, alpha: f64, k: usize) -> Result<Self> {
        let inst = Self {
            values,
            proportions,
            alpha,
            k,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::TooFewGroups { count: 0, required: 1 });
        }
        if self.values.len() != self.proportions.len() {
            return Err(Error::LengthMismatch {
                left: self.values.len(),
                right: self.proportions.len(),
            });
        }
        let m = self.values[0].len();
        if m == 0 {
            return Err(Error::EmptySample);
        }
        for (s, v) in self.values.iter().enumerate() {
            if v.len() != m {
                return Err(Error::LengthMismatch { left: m, right: v.len() });
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { index: i, value: v[i] });
            }
            if let Some(i) = v.windows(2).position(|w| w[1] <= w[0]) {
                return Err(Error::NonMonotone { group: s, level: i + 1 });
            }
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.proportions.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidProportions { sum });
        }
        if !self.alpha.is_finite() {
            return Err(Error::param("alpha", "must be finite for a discrete instance"));
        }
        if self.k > m {
            return Err(Error::param("k", format!("must be at most m = {m}, got {}", self.k)));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.values.len()
    }

    pub fn m(&self) -> usize {
        self.values[0].len()
    }

    pub fn p(&self) -> f64 {
        self.k as f64 / self.m() as f64
    }

    pub fn level(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.m() as f64
    }

    /// Zero-based level `i` lies in the lower branch.
    pub fn is_lower(&self, i: usize) -> bool {
        i < self.k
    }

    pub fn average(&self, i: usize) -> f64 {
        self.values.iter().zip(&self.proportions).map(|(v, w)| w * v[i]).sum()
    }

    fn min_value(&self) -> f64 {
        self.values.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min)
    }

    fn max_value(&self) -> f64 {
        self.values.iter().map(|v| v[v.len() - 1]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Left-continuous step quantiles, constant on `((i-1)/m, i/m]`.
    pub fn population_model(&self) -> Result<PopulationModel> {
        let m = self.m();
        let quantiles: Vec<QuantileFn> = self
            .values
            .iter()
            .map(|v| {
                let v = v.clone();
                Arc::new(move |u: f64| {
                    let i = (u * m as f64).ceil() as usize;
                    v[i.clamp(1, m) - 1]
                }) as QuantileFn
            })
            .collect();
        let kinks = (1..m).map(|i| i as f64 / m as f64).collect();
        Ok(PopulationModel::new(quantiles, self.proportions.clone())?.with_kinks(kinks))
    }

    pub fn regime(&self) -> Regime {
        // Q(p) of the step model: the last lower level, or the first level at p = 0
        let i = self.k.max(1) - 1;
        if self.alpha <= self.average(i) {
            Regime::Attained
        } else {
            Regime::NoMinimum
        }
    }

    /// `{alpha + j * step}` covering `[min Q - 1, max Q + 1]`; contains `alpha`.
    pub fn value_grid(&self, step: f64) -> Vec<f64> {
        let lo = ((self.min_value() - 1.0 - self.alpha) / step).floor() as i64;
        let hi = ((self.max_value() + 1.0 - self.alpha) / step).ceil() as i64;
        (lo.min(0)..=hi.max(0)).map(|j| self.alpha + j as f64 * step).collect()
    }
}

pub fn wasserstein2_discrete(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptySample);
    }
    for (s, xs) in [a, b].iter().enumerate() {
        if let Some(i) = xs.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::NonMonotone { group: s, level: i + 1 });
        }
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Feasible set of the shared upper-branch value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperBranch {
    /// `v > alpha`, i.e. at least one grid step above.
    Strict,
    /// `v >= alpha`.
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSolution {
    /// `values[s][i]`, optimal value for group `s` at level `i`.
    pub values: Vec<Vec<f64>>,
    pub objective: f64,
}

/// `sum_s w_s mean_i (Q_s(t_i) - v_{s,i})^2`.
pub fn objective(instance: &DiscreteInstance, solution: &[Vec<f64>]) -> f64 {
    let m = instance.m() as f64;
    instance
        .values
        .iter()
        .zip(solution)
        .zip(&instance.proportions)
        .map(|((q, v), w)| w * q.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m)
        .sum()
}

/// Exhaustive per-level search over `grid` (sorted, containing `alpha`).
pub fn grid_search_optimum(instance: &DiscreteInstance, grid: &[f64], upper: UpperBranch) -> Result<GridSolution> {
    instance.validate()?;
    let alpha = instance.alpha;
    let (g, m) = (instance.num_groups(), instance.m());
    let lower_set: Vec<f64> = grid.iter().copied().filter(|&v| v <= alpha).collect();
    let upper_set: Vec<f64> = grid
        .iter()
        .copied()
        .filter(|&v| match upper {
            UpperBranch::Strict => v > alpha,
            UpperBranch::Closed => v >= alpha,
        })
        .collect();

    let argmin = |set: &[f64], cost: &dyn Fn(f64) -> f64| -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for &v in set {
            let c = cost(v);
            if best.is_none_or(|(_, bc)| c < bc) {
                best = Some((v, c));
            }
        }
        best.map(|(v, _)| v)
    };

    let mut values = vec![vec![0.0; m]; g];
    for i in 0..m {
        if instance.is_lower(i) {
            for s in 0..g {
                let q = instance.values[s][i];
                values[s][i] = argmin(&lower_set, &|v| (q - v) * (q - v))
                    .ok_or(Error::InfeasibleGrid { branch: "lower", level: i })?;
            }
        } else {
            let cost = |v: f64| -> f64 {
                (0..g)
                    .map(|s| instance.proportions[s] * (instance.values[s][i] - v).powi(2))
                    .sum()
            };
            let v = argmin(&upper_set, &cost).ok_or(Error::InfeasibleGrid { branch: "upper", level: i })?;
            for row in values.iter_mut() {
                row[i] = v;
            }
        }
    }
    for (s, row) in values.iter().enumerate() {
        if let Some(i) = row.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::NonMonotone { group: s, level: i + 1 });
        }
    }
    let objective = objective(instance, &values);
    Ok(GridSolution { values, objective })
}

/// Closed-form candidate: `(instance, variant, xi) -> values[s][i]`.
pub type ClosedForm = dyn Fn(&DiscreteInstance, Variant, f64) -> Result<Vec<Vec<f64>>> + Send + Sync;

/// The library's population adjusted quantile evaluated at the levels.
pub fn library_closed_form(instance: &DiscreteInstance, variant: Variant, xi: f64) -> Result<Vec<Vec<f64>>> {
    let model = instance.population_model()?;
    let params = DpTailsParams::new(instance.alpha, instance.p()).with_xi(xi);
    let q = population_adjusted_quantile(&model, &params, variant)?;
    Ok((0..instance.num_groups())
        .map(|s| (0..instance.m()).map(|i| q.eval(s, instance.level(i))).collect())
        .collect())
}

/// A deliberately wrong closed form: the library's, with every upper-branch
/// value shifted by `shift`. Used as a negative control.
pub fn shifted_closed_form(shift: f64) -> impl Fn(&DiscreteInstance, Variant, f64) -> Result<Vec<Vec<f64>>> + Send + Sync {
    move |inst, variant, xi| {
        let mut v = library_closed_form(inst, variant, xi)?;
        for row in v.iter_mut() {
            for (i, x) in row.iter_mut().enumerate() {
                if !inst.is_lower(i) {
                    *x += shift;
                }
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormReport {
    pub groups: usize,
    pub m: usize,
    pub alpha: f64,
    pub p: f64,
    pub step: f64,
    pub tol: f64,
    pub regime: Regime,
    /// Closed branch against `Q*`, strict branch against `Q^xi` (xi = step).
    pub max_value_deviation: f64,
    pub objective_deviation: f64,
    /// Strict minus closed grid objective, and its bound
    /// `2 xi |alpha - sum w_s Q_s(p)| + 2 xi^2`.
    pub strict_gap: f64,
    pub strict_gap_bound: f64,
    /// Closed grid objective against the quadrature objective of the step model.
    pub population_deviation: f64,
    pub pass: bool,
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn verify_closed_form(instance: &DiscreteInstance, step: f64, tol: f64) -> Result<ClosedFormReport> {
    verify_closed_form_with(instance, step, tol, &library_closed_form)
}

/// Like [`verify_closed_form`] with an arbitrary closed-form candidate.
pub fn verify_closed_form_with(instance: &DiscreteInstance, step: f64, tol: f64, closed_form: &ClosedForm) -> Result<ClosedFormReport> {
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(Error::param("step", "step and tol must be positive"));
    }
    let grid = instance.value_grid(step);
    let closed = grid_search_optimum(instance, &grid, UpperBranch::Closed)?;
    let strict = grid_search_optimum(instance, &grid, UpperBranch::Strict)?;
    let star = closed_form(instance, Variant::Star, 0.0)?;
    let xi = closed_form(instance, Variant::Xi, step)?;

    let max_value_deviation = max_abs_diff(&closed.values, &star).max(max_abs_diff(&strict.values, &xi));
    let objective_deviation = (closed.objective - objective(instance, &star))
        .abs()
        .max((strict.objective - objective(instance, &xi)).abs());

    let q_at_p = instance.average(instance.k.max(1) - 1);
    let strict_gap = strict.objective - closed.objective;
    let strict_gap_bound = 2.0 * step * (instance.alpha - q_at_p).abs() + 2.0 * step * step;

    let model = instance.population_model()?;
    let population = population_objective(&model, instance.alpha, instance.p())?;
    let population_deviation = (closed.objective - population).abs();

    let pass = max_value_deviation <= tol
        && objective_deviation <= tol
        && strict_gap <= strict_gap_bound
        && strict_gap >= 0.0
        && population_deviation <= step * step + 1e-8;

    Ok(ClosedFormReport {
        groups: instance.num_groups(),
        m: instance.m(),
        alpha: instance.alpha,
        p: instance.p(),
        step,
        tol,
        regime: instance.regime(),
        max_value_deviation,
        objective_deviation,
        strict_gap,
        strict_gap_bound,
        population_deviation,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarycenterReport {
    /// `sum_s w_s W2^2(Q_s, v*_s)`.
    pub wasserstein: f64,
    /// The grid-search objective.
    pub objective: f64,
    pub deviation: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Checks that the weighted Wasserstein cost of the grid optimum equals its
/// quantile-integral objective.
pub fn verify_barycenter_identity(instance: &DiscreteInstance, step: f64, tol: f64) -> Result<BarycenterReport> {
    let grid = instance.value_grid(step);
    let sol = grid_search_optimum(instance, &grid, UpperBranch::Closed)?;
    let mut wasserstein = 0.0;
    for (s, w) in instance.proportions.iter().enumerate() {
        wasserstein += w * wasserstein2_discrete(&instance.values[s], &sol.values[s])?;
    }
    let deviation = (wasserstein - sol.objective).abs();
    Ok(BarycenterReport {
        wasserstein,
        objective: sol.objective,
        deviation,
        tol,
        pass: deviation <= tol,
    })
}

/// Random instance with `groups` groups and `m` levels. `alpha` is placed
/// within 0.75 of the weighted mean at the first upper level.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, groups: usize, m: usize) -> Result<DiscreteInstance> {
    let values: Vec<Vec<f64>> = (0..groups)
        .map(|_| {
            let mut x = rng.random_range(-1.0..1.0);
            (0..m)
                .map(|_| {
                    x += rng.random_range(0.05..0.5);
                    x
                })
                .collect()
        })
        .collect();
    let raw: Vec<f64> = (0..groups).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut proportions: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let rest: f64 = proportions[1..].iter().sum();
    proportions[0] = 1.0 - rest;
    let k = rng.random_range(0..=m);
    let mut inst = DiscreteInstance::new(values, proportions, 0.0, k)?;
    let anchor = inst.average(k.min(m - 1));
    inst.alpha = anchor + rng.random_range(-0.75..0.75);
    Ok(inst)
}

/// Named instance for the verification battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedInstance {
    pub name: String,
    pub instance: DiscreteInstance,
}

/// Fixed fixtures followed by `random` random instances.
pub fn battery<R: Rng + ?Sized>(rng: &mut R, random: usize) -> Result<Vec<NamedInstance>> {
    let m = 8;
    let grid = |offset: f64| (0..m).map(|i| offset + (i as f64 + 0.5) / m as f64).collect::<Vec<_>>();
    let mut out = vec![
        NamedInstance {
            name: "uniform-two-group".into(),
            instance: DiscreteInstance::new(vec![grid(0.0), grid(1.0)], vec![0.5, 0.5], 0.75, 4)?,
        },
        NamedInstance {
            name: "all-below-alpha".into(),
            instance: DiscreteInstance::new(vec![grid(0.0), grid(1.0)], vec![0.5, 0.5], 5.0, m)?,
        },
        NamedInstance {
            name: "alpha-below-support".into(),
            instance: DiscreteInstance::new(vec![grid(0.0), grid(1.0)], vec![0.3, 0.7], -2.0, 0)?,
        },
        NamedInstance {
            name: "no-minimum-regime".into(),
            instance: DiscreteInstance::new(vec![grid(0.0), grid(1.0)], vec![0.5, 0.5], 1.6, 2)?,
        },
    ];
    for j in 0..random {
        let groups = if j % 2 == 0 { 2 } else { 3 };
        let m = if j % 4 < 2 { 8 } else { 16 };
        out.push(NamedInstance {
            name: format!("random-{j:02}"),
            instance: random_instance(rng, groups, m)?,
        });
    }
    Ok(out)
}
