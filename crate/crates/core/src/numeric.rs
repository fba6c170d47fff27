//! Log-domain and summation primitives shared by the belief recursions and
//! the Monte Carlo aggregators.
//!
//! All belief arithmetic runs in log space; exact zeros are represented as
//! `f64::NEG_INFINITY` and must pass through these helpers unchanged so that
//! boundary parameter values (geometric parameters of 0 or 1) stay exact.

/// `ln(1 + e^x)`, stable over the whole real line.
///
/// `NEG_INFINITY` maps to 0 and `INFINITY` to itself.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        0.0
    } else if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(e^a + e^b)` with absorbing `NEG_INFINITY`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a >= b {
        if b == f64::NEG_INFINITY {
            a
        } else {
            a + (b - a).exp().ln_1p()
        }
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// `ln Σ e^{v_i}` over a slice.
///
/// The maximum term is factored out and excluded from the residual sum so the
/// two-element case agrees bit-for-bit with [`log_add_exp`]; `NEG_INFINITY`
/// entries are skipped.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut arg_max = usize::MAX;
    for (i, &v) in values.iter().enumerate() {
        if v > max {
            max = v;
            arg_max = i;
        }
    }
    if arg_max == usize::MAX {
        return f64::NEG_INFINITY;
    }
    let mut rest = 0.0;
    for (i, &v) in values.iter().enumerate() {
        if i != arg_max && v != f64::NEG_INFINITY {
            rest += (v - max).exp();
        }
    }
    max + rest.ln_1p()
}

/// Pairwise (cascade) summation.
///
/// Order of evaluation is a fixed function of the slice length, so totals are
/// reproducible no matter how many threads produced the inputs, and rounding
/// error grows as O(log n) rather than O(n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 64;
    if values.len() <= BASE {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sample mean and standard error via pairwise summation.
///
/// Returns `(mean, se)` with the (n-1)-denominator sample variance; `se` is 0
/// for fewer than two values.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
