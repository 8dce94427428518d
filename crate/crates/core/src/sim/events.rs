//! Dense output and zero-crossing location inside an accepted step.

use nalgebra::DVector;

/// Cubic Hermite interpolant on `[t0, t0 + h]`.
pub struct Hermite<'a> {
    pub t0: f64,
    pub h: f64,
    pub y0: &'a DVector<f64>,
    pub f0: &'a DVector<f64>,
    pub y1: &'a DVector<f64>,
    pub f1: &'a DVector<f64>,
}

impl Hermite<'_> {
    /// State at fraction `theta` of the step.
    pub fn at(&self, theta: f64) -> DVector<f64> {
        let s = theta;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        self.y0 * h00 + self.f0 * (h10 * self.h) + self.y1 * h01 + self.f1 * (h11 * self.h)
    }
}

/// Illinois variant of regula falsi on `[a, b]` with `g(a) >= 0 >= g(b)`.
/// Returns the smallest bracketed abscissa where `g` is within `gtol` of zero,
/// or the bracket end once its width drops below `xtol`.
pub fn illinois<F: FnMut(f64) -> f64>(mut g: F, mut a: f64, mut ga: f64, mut b: f64, mut gb: f64, xtol: f64, gtol: f64) -> f64 {
    if ga == 0.0 {
        return a;
    }
    if gb.abs() <= gtol && ga.abs() > gtol && (b - a) <= xtol {
        return b;
    }
    let mut side = 0i8;
    for _ in 0..200 {
        if (b - a).abs() <= xtol {
            break;
        }
        let c = (a * gb - b * ga) / (gb - ga);
        let c = if c.is_finite() && c > a && c < b { c } else { 0.5 * (a + b) };
        let gc = g(c);
        if gc.abs() <= gtol {
            return c;
        }
        if (gc > 0.0) == (ga > 0.0) {
            a = c;
            ga = gc;
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        } else {
            b = c;
            gb = gc;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        }
    }
    b
}
