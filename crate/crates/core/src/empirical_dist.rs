//! Order-statistics machinery: empirical CDFs, left-continuous empirical
//! quantile functions, dual generalized inverses, jittering and the
//! two-sample Kolmogorov–Smirnov distance.
//!
//! Conventions:
//!
//! * `F(t) = #{x_i <= t} / n` (right-continuous step function).
//! * `Q(t) = inf { y : F(y) >= t }` for `t` in `(0, 1]`, i.e. the
//!   `ceil(n t)`-th order statistic, and `Q(0) = Q(0+)`, the minimum.
//!
//! Levels are computed as `k as f64 / n as f64` everywhere, and the order
//! statistic index is chosen against that same floating-point grid, so `Q`
//! is the exact generalized inverse of the `F` that is actually evaluated.

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A non-empty, finite, ascending sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SampleSet {
    values: Vec<f64>,
}

impl SampleSet {
    /// Sorts `values`; rejects empty input and any NaN or infinity.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Number of values `<= t`.
    pub fn count_le(&self, t: f64) -> usize {
        self.values.partition_point(|&v| v <= t)
    }
}

impl TryFrom<Vec<f64>> for SampleSet {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        SampleSet::new(values)
    }
}

impl From<SampleSet> for Vec<f64> {
    fn from(s: SampleSet) -> Self {
        s.values
    }
}

#[inline]
fn level(count: usize, n: usize) -> f64 {
    count as f64 / n as f64
}

/// Right-continuous empirical CDF of a [`SampleSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmpiricalCdf {
    samples: SampleSet,
}

impl EmpiricalCdf {
    pub fn new(samples: SampleSet) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    /// `#{x_i <= t} / n`.
    pub fn eval(&self, t: f64) -> f64 {
        level(self.samples.count_le(t), self.samples.len())
    }
}

/// Builds the empirical CDF of `samples`.
pub fn build_ecdf(samples: Vec<f64>) -> Result<EmpiricalCdf> {
    Ok(EmpiricalCdf::new(SampleSet::new(samples)?))
}

/// Left-continuous empirical quantile function of a [`SampleSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantileTable {
    samples: SampleSet,
}

/// Smallest `k` in `1..=n` with `k / n >= t` (in floating point).
fn order_index(n: usize, t: f64) -> usize {
    let nf = n as f64;
    let mut k = ((nf * t).ceil() as usize).clamp(1, n);
    while k > 1 && level(k - 1, n) >= t {
        k -= 1;
    }
    while k < n && level(k, n) < t {
        k += 1;
    }
    k
}

impl QuantileTable {
    pub fn new(samples: SampleSet) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    /// `Q(t)`; errors when `t` is outside `[0, 1]`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::LevelOutOfRange(t));
        }
        Ok(self.eval_clamped(t))
    }

    /// `Q(t)` for a level already known to lie in `[0, 1]`.
    pub(crate) fn eval_clamped(&self, t: f64) -> f64 {
        let n = self.samples.len();
        self.samples.values[order_index(n, t) - 1]
    }

    /// The quantile function as an explicit step function on `(0, 1)`.
    pub fn to_step_function(&self) -> StepFunction {
        let n = self.samples.len();
        let breaks = (0..=n).map(|k| level(k, n)).collect();
        StepFunction::new(breaks, self.samples.values.clone())
            .expect("order statistics form a valid step function")
    }
}

/// Evaluates `table` at level `t`.
pub fn quantile_eval(table: &QuantileTable, t: f64) -> Result<f64> {
    table.eval(t)
}

/// Dual generalized inverse `sup { x in (a, b) : f(x) <= y }` of a
/// nondecreasing left-continuous `f` on the finite interval `(a, b)`, with
/// `sup(empty) = a`.
///
/// Computed by bisection down to adjacent floating-point numbers, so the
/// result is within one ulp of the exact value. For step functions use
/// [`StepFunction::dual_inverse`], which is exact.
pub fn dual_generalized_inverse<F>(f: F, a: f64, b: f64, y: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    debug_assert!(a < b);
    let (mut lo, mut hi) = (a, b);
    loop {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) <= y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// A nondecreasing, left-continuous step function on `(b_0, b_K)` taking
/// value `v_j` on `(b_{j-1}, b_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    /// `breaks` must be strictly increasing with one more entry than
    /// `values`, and `values` nondecreasing.
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || breaks.len() != values.len() + 1 {
            return Err(Error::LengthMismatch {
                left: breaks.len(),
                right: values.len() + 1,
            });
        }
        if breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::param("breaks", "must be strictly increasing"));
        }
        if values.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::param("values", "must be nondecreasing"));
        }
        Ok(Self { breaks, values })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.breaks[0], self.breaks[self.breaks.len() - 1])
    }

    pub fn eval(&self, x: f64) -> f64 {
        // first break >= x closes the interval containing x
        let j = self.breaks[1..].partition_point(|&b| b < x);
        self.values[j.min(self.values.len() - 1)]
    }

    /// Exact `sup { x : f(x) <= y }`.
    pub fn dual_inverse(&self, y: f64) -> f64 {
        let j = self.values.partition_point(|&v| v <= y);
        self.breaks[j]
    }
}

/// Perturbs every value by an independent `U[-sigma, sigma]` draw.
pub fn jitter<R: Rng + ?Sized>(samples: &SampleSet, sigma: f64, rng: &mut R) -> Result<SampleSet> {
    let noise = uniform_noise(sigma)?;
    let values = samples
        .values
        .iter()
        .map(|&v| v + rng.sample(noise))
        .collect();
    SampleSet::new(values)
}

pub(crate) fn uniform_noise(sigma: f64) -> Result<Uniform<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", format!("must be positive and finite, got {sigma}")));
    }
    Uniform::new_inclusive(-sigma, sigma).map_err(|e| Error::param("sigma", e.to_string()))
}

/// `sup_t |F_a(t) - F_b(t)|`, evaluated at every point of the union of the
/// two samples.
pub fn ks_distance(a: &SampleSet, b: &SampleSet) -> f64 {
    let (x, y) = (a.values(), b.values());
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = x[i].min(y[j]);
        while i < n && x[i] <= t {
            i += 1;
        }
        while j < m && y[j] <= t {
            j += 1;
        }
        d = d.max((level(i, n) - level(j, m)).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(v: &[f64]) -> SampleSet {
        SampleSet::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ecdf_examples() {
        let f = build_ecdf(vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(f.eval(2.0), 2.0 / 3.0);
        assert_eq!(f.eval(0.5), 0.0);
        assert_eq!(f.eval(3.0), 1.0);
        assert_eq!(f.eval(10.0), 1.0);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(build_ecdf(vec![]), Err(Error::EmptySample)));
        assert!(matches!(
            SampleSet::new(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(SampleSet::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn quantile_examples() {
        let q = QuantileTable::new(set(&[1.0, 2.0, 3.0]));
        assert_eq!(quantile_eval(&q, 0.5).unwrap(), 2.0);
        assert_eq!(quantile_eval(&q, 0.0).unwrap(), 1.0);
        assert_eq!(quantile_eval(&q, 1.0).unwrap(), 3.0);
        assert_eq!(q.eval(1.0 / 3.0).unwrap(), 1.0);
        assert!(matches!(q.eval(1.5), Err(Error::LevelOutOfRange(_))));
        assert!(q.eval(-0.1).is_err());
    }

    #[test]
    fn quantile_on_float_grid_levels() {
        // 3 * (2/3) rounds above 2 in floating point; the index must not jump
        let q = QuantileTable::new(set(&[1.0, 2.0, 3.0]));
        assert_eq!(q.eval(2.0 / 3.0).unwrap(), 2.0);
        let n = 49;
        let vals: Vec<f64> = (0..n).map(f64::from).collect();
        let q = QuantileTable::new(set(&vals));
        for k in 1..=n as usize {
            assert_eq!(q.eval(k as f64 / n as f64).unwrap(), (k - 1) as f64);
        }
    }

    #[test]
    fn dual_inverse_examples() {
        let id = dual_generalized_inverse(|x| x, 0.0, 1.0, 0.3);
        assert!((id - 0.3).abs() < 1e-15);

        let step = StepFunction::new(vec![0.0, 0.5, 1.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(step.dual_inverse(0.5), 0.5);
        assert_eq!(step.dual_inverse(-1.0), 0.0);
        assert_eq!(step.dual_inverse(1.0), 1.0);
        let bis = dual_generalized_inverse(|x| step.eval(x), 0.0, 1.0, 0.5);
        assert!((bis - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dual_inverse_recovers_true_inverse() {
        for i in 1..100 {
            let y = i as f64 / 100.0;
            let x = dual_generalized_inverse(|x| x, 0.0, 1.0, y);
            assert!((x - y).abs() < 1e-15);
            let y2 = 1.0 + 2.0 * y;
            let x2 = dual_generalized_inverse(|x| 2.0 * x + 1.0, 0.0, 1.0, y2);
            assert!((x2 - y).abs() < 1e-15);
        }
    }

    #[test]
    fn step_function_eval_is_left_continuous() {
        let s = StepFunction::new(vec![0.0, 0.5, 1.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(s.eval(0.5), 0.0);
        assert_eq!(s.eval(0.5000001), 1.0);
        assert_eq!(s.eval(0.25), 0.0);
    }

    #[test]
    fn quantile_step_function_inverse_is_ecdf() {
        let vals = [0.3, 1.2, 1.2, 2.5, 4.0];
        let q = QuantileTable::new(set(&vals));
        let f = EmpiricalCdf::new(set(&vals));
        let step = q.to_step_function();
        for y in [-1.0, 0.3, 0.5, 1.2, 2.0, 2.5, 3.9, 4.0, 9.0] {
            assert_eq!(step.dual_inverse(y), f.eval(y), "y = {y}");
        }
    }

    #[test]
    fn jitter_bounds_and_determinism() {
        let s = set(&[0.0, 1.0, 2.0, 3.0]);
        let a = jitter(&s, 1e-6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = jitter(&s, 1e-6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        for (x, y) in s.values().iter().zip(a.values()) {
            assert!((x - y).abs() <= 1e-6);
        }
        assert!(jitter(&s, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(jitter(&s, -1.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn jitter_breaks_ties() {
        let s = set(&[1.0; 100]);
        let j = jitter(&s, 1e-6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(j.values().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ks_examples() {
        let a = set(&[0.0, 1.0]);
        assert_eq!(ks_distance(&a, &a), 0.0);
        assert_eq!(ks_distance(&a, &set(&[0.0, 2.0])), 0.5);
        assert_eq!(ks_distance(&set(&[0.0]), &set(&[1.0])), 1.0);
    }

    fn brute_ks(a: &SampleSet, b: &SampleSet) -> f64 {
        let fa = EmpiricalCdf::new(a.clone());
        let fb = EmpiricalCdf::new(b.clone());
        a.values()
            .iter()
            .chain(b.values())
            .map(|&t| (fa.eval(t) - fb.eval(t)).abs())
            .fold(0.0, f64::max)
    }

    fn sample_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![(-5i32..5).prop_map(f64::from), -5.0f64..5.0], 1..40)
    }

    proptest! {
        #[test]
        fn galois_round_trip(vals in sample_strategy()) {
            let s = SampleSet::new(vals).unwrap();
            let n = s.len();
            let f = EmpiricalCdf::new(s.clone());
            let q = QuantileTable::new(s);
            for k in 1..=n {
                let t = k as f64 / n as f64;
                let qt = q.eval(t).unwrap();
                prop_assert!(f.eval(qt) >= t);
                prop_assert_eq!(q.eval(f.eval(qt)).unwrap(), qt);
            }
        }

        #[test]
        fn ecdf_of_quantile_dominates_level(vals in sample_strategy(), t in 0.0f64..=1.0) {
            let s = SampleSet::new(vals).unwrap();
            let f = EmpiricalCdf::new(s.clone());
            let q = QuantileTable::new(s);
            if t > 0.0 {
                prop_assert!(f.eval(q.eval(t).unwrap()) >= t);
            }
        }

        #[test]
        fn quantile_is_generalized_inverse(vals in sample_strategy(), t in 0.0f64..=1.0) {
            // Q(t) = min { x_i : F(x_i) >= t }
            let s = SampleSet::new(vals).unwrap();
            let f = EmpiricalCdf::new(s.clone());
            let q = QuantileTable::new(s.clone());
            let expect = s.values().iter().copied().find(|&x| f.eval(x) >= t).unwrap();
            prop_assert_eq!(q.eval(t).unwrap(), expect);
        }

        #[test]
        fn dual_inverse_nondecreasing(vals in sample_strategy(), y1 in -6.0f64..6.0, y2 in -6.0f64..6.0) {
            let q = QuantileTable::new(SampleSet::new(vals).unwrap());
            let step = q.to_step_function();
            let (lo, hi) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
            prop_assert!(step.dual_inverse(lo) <= step.dual_inverse(hi));
            let b_lo = dual_generalized_inverse(|x| step.eval(x), 0.0, 1.0, lo);
            let b_hi = dual_generalized_inverse(|x| step.eval(x), 0.0, 1.0, hi);
            prop_assert!(b_lo <= b_hi);
        }

        #[test]
        fn ks_matches_brute_force_and_is_a_metric(
            a in sample_strategy(), b in sample_strategy(), c in sample_strategy()
        ) {
            let (a, b, c) = (
                SampleSet::new(a).unwrap(),
                SampleSet::new(b).unwrap(),
                SampleSet::new(c).unwrap(),
            );
            let ab = ks_distance(&a, &b);
            prop_assert_eq!(ab, brute_ks(&a, &b));
            prop_assert_eq!(ab, ks_distance(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!(ab <= ks_distance(&a, &c) + ks_distance(&c, &b) + 1e-15);
            prop_assert_eq!(ks_distance(&a, &a), 0.0);
        }
    }
}
