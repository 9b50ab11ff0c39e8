//! Adaptive Gauss–Kronrod integration and log-space helpers.

use crate::error::{Error, Result};

// 7-point Gauss / 15-point Kronrod abscissae and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for k in 0..7 {
        let dx = h * XGK[k];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[k] * s;
        if k % 2 == 1 {
            gauss += WG[k / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// `∫_a^b f` by globally adaptive bisection until the summed error estimate
/// is below `max(abs_tol, rel_tol·|I|)`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (v0, e0) = gk15(&mut f, a, b);
    let mut pieces = vec![(a, b, v0, e0)];
    let (mut total, mut err) = (v0, e0);
    for _ in 0..5000 {
        if !total.is_finite() {
            return Err(Error::Numeric("integrand produced a non-finite value".into()));
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            // Re-sum to shed drift from the running updates.
            return Ok(pieces.iter().map(|p| p.2).sum());
        }
        let worst = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(k, _)| k)
            .expect("nonempty");
        let (lo, hi, v, e) = pieces.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&mut f, lo, mid);
        let (v2, e2) = gk15(&mut f, mid, hi);
        total += v1 + v2 - v;
        err += e1 + e2 - e;
        pieces.push((lo, mid, v1, e1));
        pieces.push((mid, hi, v2, e2));
    }
    Err(Error::Numeric(format!("adaptive quadrature on [{a}, {b}] did not converge")))
}

/// `ln ∫_lo^hi exp(g(t)) dt` for a unimodal-ish log-integrand, robust to
/// huge or tiny magnitudes: locates the effective support on a grid, then
/// integrates `exp(g − max)` adaptively.
pub fn log_integrate<G: FnMut(f64) -> f64>(mut g: G, lo: f64, hi: f64, rel_tol: f64) -> Result<f64> {
    const GRID: usize = 400;
    const DROP: f64 = 60.0;
    let (mut a, mut b) = (lo, hi);
    let mut peak = f64::NEG_INFINITY;
    let mut peak_at = 0.5 * (lo + hi);
    for _ in 0..8 {
        let step = (b - a) / GRID as f64;
        let vals: Vec<f64> = (0..=GRID).map(|k| g(a + step * k as f64)).collect();
        let (arg, &max) = vals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .expect("grid nonempty");
        if max > peak {
            peak = max;
            peak_at = a + step * arg as f64;
        }
        if !peak.is_finite() {
            return Err(Error::Numeric("log-integrand has no finite values on the grid".into()));
        }
        let first = vals.iter().position(|&v| v > peak - DROP).unwrap_or(arg);
        let last = vals.iter().rposition(|&v| v > peak - DROP).unwrap_or(arg);
        let (na, nb) = (
            a + step * first.saturating_sub(1) as f64,
            a + step * (last + 1).min(GRID) as f64,
        );
        let wide_enough = last - first >= 40;
        a = na;
        b = nb;
        if wide_enough {
            break;
        }
    }
    let m = peak;
    let f = |t: f64| (g(t) - m).exp();
    let split = peak_at.clamp(a, b);
    let mut g2 = f;
    let left = integrate(&mut g2, a, split, 0.0, rel_tol)?;
    let right = integrate(&mut g2, split, b, 0.0, rel_tol)?;
    let total = left + right;
    if !(total > 0.0) {
        return Err(Error::Numeric("log-space integral vanished".into()));
    }
    Ok(m + total.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_gaussian_integrals() {
        let v = integrate(|x| x * x, 0.0, 3.0, 1e-14, 1e-14).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
        let g = integrate(|x| (-0.5 * x * x).exp(), -40.0, 40.0, 1e-14, 1e-14).unwrap();
        assert!((g - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn log_integrate_handles_extreme_scales() {
        // ∫ exp(-1000 - (t-3)²/(2·1e-4)) dt = exp(-1000)·sqrt(2π·1e-4)
        let v = log_integrate(|t| -1000.0 - (t - 3.0).powi(2) / 2e-4, -50.0, 50.0, 1e-13).unwrap();
        let exact = -1000.0 + (2.0 * std::f64::consts::PI * 1e-4).sqrt().ln();
        assert!((v - exact).abs() < 1e-11, "{v} vs {exact}");
    }
}

/// `ln ∫_lo^hi exp(g(t)) dt` for a unimodal log-integrand: golden-section
/// search for the mode, geometric outward bracketing to where `g` has fallen
/// by 60 nats, then adaptive integration of `exp(g − max)` on both sides.
pub fn log_integrate_unimodal<G: FnMut(f64) -> f64>(mut g: G, lo: f64, hi: f64, rel_tol: f64) -> Result<f64> {
    const DROP: f64 = 60.0;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    for _ in 0..200 {
        if (b - a) <= 1e-12 * (1.0 + c.abs()) {
            break;
        }
        if gc >= gd {
            b = d;
            d = c;
            gd = gc;
            c = b - inv_phi * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + inv_phi * (b - a);
            gd = g(d);
        }
    }
    let mode = if gc >= gd { c } else { d };
    let peak = g(mode);
    if !peak.is_finite() {
        return Err(Error::Numeric(format!("log-integrand is not finite at its mode {mode}")));
    }
    let mut step = 1e-6 * (hi - lo).max(1e-12);
    let mut right = mode;
    while right < hi {
        right = (mode + step).min(hi);
        if g(right) < peak - DROP {
            break;
        }
        step *= 1.6;
    }
    let mut step = 1e-6 * (hi - lo).max(1e-12);
    let mut left = mode;
    while left > lo {
        left = (mode - step).max(lo);
        if g(left) < peak - DROP {
            break;
        }
        step *= 1.6;
    }
    let mut f = |t: f64| (g(t) - peak).exp();
    let total = integrate(&mut f, left, mode, 0.0, rel_tol)? + integrate(&mut f, mode, right, 0.0, rel_tol)?;
    if !(total > 0.0) {
        return Err(Error::Numeric("log-space integral vanished".into()));
    }
    Ok(peak + total.ln())
}
