//! Adaptive Simpson quadrature over panels split at known kinks.

const MAX_DEPTH: u32 = 48;
const MIN_DEPTH: u32 = 4;

/// Integrates `f` over `[breaks[0], breaks[last]]`, splitting at every entry
/// of `breaks` (which must be sorted). `f` is treated as left-continuous:
/// the left end of each panel is evaluated one ulp inside the panel, so jumps
/// located exactly at breakpoints are integrated without error.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, breaks: &[f64], tol: f64) -> f64 {
    let total = breaks[breaks.len() - 1] - breaks[0];
    if total <= 0.0 {
        return 0.0;
    }
    breaks
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let panel_tol = tol * (b - a) / total;
            let fa = f(a.next_up().min(b));
            let fb = f(b);
            let m = 0.5 * (a + b);
            let fm = f(m);
            let whole = simpson(a, b, fa, fm, fb);
            adaptive(f, a, b, fa, fm, fb, whole, panel_tol, 0)
        })
        .sum()
}

#[inline]
fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth >= MAX_DEPTH || (depth >= MIN_DEPTH && delta.abs() <= 15.0 * tol) {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)
        + adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)
}
