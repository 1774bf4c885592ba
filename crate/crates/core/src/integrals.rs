//! Complete integrals for the bundled one-dimensional models, in both
//! representations. The constant is `β = (E)` for the stationary ones and
//! the momentum (q-rep) or minus the initial coordinate (p-rep) for the
//! free particle.
//!
//! The oscillator integrals use the branch with positive momentum
//! (q-representation) or positive coordinate (p-representation); the
//! recovered orbit is valid until that branch reaches a turning point.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Axes;
use crate::hj::CompleteIntegral;

fn check(m: f64, other: f64, what: &str) -> Result<()> {
    if m > 0.0 && other.is_finite() && other != 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("complete integral needs m > 0 and nonzero {what}")))
    }
}

/// `Φ = βx − β²t/2m`; `∂Φ/∂β = α` gives `q = α + βt/m`.
pub fn free_particle_q(m: f64) -> Result<CompleteIntegral> {
    check(m, 1.0, "mass")?;
    CompleteIntegral::parse(1, Axes::Q, &format!("b1*x - b1^2*t/(2*{m})"))
}

/// `Φ = −p²t/2m + βp`; `∂Φ/∂β = α` fixes `p = α` and `q = pt/m − β`.
pub fn free_particle_p(m: f64) -> Result<CompleteIntegral> {
    check(m, 1.0, "mass")?;
    CompleteIntegral::parse(1, Axes::P, &format!("-p1^2*t/(2*{m}) + b1*p1"))
}

/// `Φ = −Et + (2m(E + F0 x))^{3/2} / (3 m F0)`; `∂Φ/∂E = −t + p/F0`.
pub fn uniform_force_q(m: f64, f0: f64) -> Result<CompleteIntegral> {
    check(m, f0, "force")?;
    CompleteIntegral::parse(1, Axes::Q, &format!("-b1*t + (2*{m}*(b1 + {f0}*x))^1.5/(3*{m}*{f0})"))
}

/// `Φ = −Et + Ep/F0 − p³/(6 m F0)`.
pub fn uniform_force_p(m: f64, f0: f64) -> Result<CompleteIntegral> {
    check(m, f0, "force")?;
    CompleteIntegral::parse(1, Axes::P, &format!("-b1*t + b1*p1/{f0} - p1^3/(6*{m}*{f0})"))
}

/// `Φ = −Et + W(x; E)` with `∂W/∂x = mω sqrt(a² − x²)`, `a² = 2E/mω²`.
/// `∂Φ/∂E = −t + asin(x/a)/ω`, so `q = a sin(ω(t + α))`.
pub fn oscillator_q(m: f64, omega: f64) -> Result<CompleteIntegral> {
    check(m, omega, "frequency")?;
    let amp2 = move |e: f64| 2.0 * e / (m * omega * omega);
    let phi = Arc::new(move |t: f64, x: &[f64], b: &[f64]| {
        let a2 = amp2(b[0]);
        let r = (a2 - x[0] * x[0]).max(0.0).sqrt();
        let a = a2.sqrt();
        -b[0] * t + m * omega * 0.5 * (x[0] * r + a2 * (x[0] / a).clamp(-1.0, 1.0).asin())
    });
    let d_beta = Arc::new(move |t: f64, x: &[f64], b: &[f64], out: &mut [f64]| {
        let a = amp2(b[0]).sqrt();
        out[0] = -t + (x[0] / a).asin() / omega;
    });
    let d_x = Arc::new(move |_t: f64, x: &[f64], b: &[f64], out: &mut [f64]| {
        out[0] = m * omega * (amp2(b[0]) - x[0] * x[0]).sqrt();
    });
    let mixed = Arc::new(move |_t: f64, x: &[f64], b: &[f64], out: &mut [f64]| {
        out[0] = 1.0 / (omega * (amp2(b[0]) - x[0] * x[0]).sqrt());
    });
    Ok(CompleteIntegral::from_fn(1, Axes::Q, phi)
        .with_beta_partials(d_beta)
        .with_x_partials(d_x)
        .with_mixed_partials(mixed))
}

/// `Φ = −Et + W(p; E)` with `q = −∂W/∂p = sqrt(b² − p²)/mω`, `b² = 2mE`.
/// `∂Φ/∂E = −t − asin(p/b)/ω`, so `p = −b sin(ω(t + α))`. For the same
/// orbit `α_p = α_q − π/2ω`.
pub fn oscillator_p(m: f64, omega: f64) -> Result<CompleteIntegral> {
    check(m, omega, "frequency")?;
    let mom2 = move |e: f64| 2.0 * m * e;
    let phi = Arc::new(move |t: f64, p: &[f64], b: &[f64]| {
        let b2 = mom2(b[0]);
        let r = (b2 - p[0] * p[0]).max(0.0).sqrt();
        let bb = b2.sqrt();
        -b[0] * t - (0.5 * p[0] * r + 0.5 * b2 * (p[0] / bb).clamp(-1.0, 1.0).asin()) / (m * omega)
    });
    let d_beta = Arc::new(move |t: f64, p: &[f64], b: &[f64], out: &mut [f64]| {
        out[0] = -t - (p[0] / mom2(b[0]).sqrt()).asin() / omega;
    });
    let d_x = Arc::new(move |_t: f64, p: &[f64], b: &[f64], out: &mut [f64]| {
        out[0] = -(mom2(b[0]) - p[0] * p[0]).sqrt() / (m * omega);
    });
    let mixed = Arc::new(move |_t: f64, p: &[f64], b: &[f64], out: &mut [f64]| {
        out[0] = -1.0 / (omega * (mom2(b[0]) - p[0] * p[0]).sqrt());
    });
    Ok(CompleteIntegral::from_fn(1, Axes::P, phi)
        .with_beta_partials(d_beta)
        .with_x_partials(d_x)
        .with_mixed_partials(mixed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn oscillator_partials_match_differences() {
        let t = 0.3;
        for ci in [oscillator_q(1.3, 0.7).unwrap(), oscillator_p(1.3, 0.7).unwrap()] {
            let (x, e) = (0.25, 0.4);
            let mut out = [0.0];
            ci.beta_partials(t, &[x], &[e], &mut out);
            assert!((out[0] - fd(|b| ci.value(t, &[x], &[b]), e)).abs() < 1e-7);
            ci.x_partials(t, &[x], &[e], &mut out);
            assert!((out[0] - fd(|y| ci.value(t, &[y], &[e]), x)).abs() < 1e-7);
            let mixed = ci.mixed_partials(t, &[x], &[e])[(0, 0)];
            let num = fd(
                |y| {
                    let mut o = [0.0];
                    ci.beta_partials(t, &[y], &[e], &mut o);
                    o[0]
                },
                x,
            );
            assert!((mixed - num).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_force_p_recovery_is_linear_in_time() {
        let ci = uniform_force_p(1.0, 2.0).unwrap();
        let times: Vec<f64> = (0..5).map(|k| 0.2 * k as f64).collect();
        let traj = crate::prep::jacobi_recover_p(&ci, &[0.7], &[0.5], &times, &[1.0]).unwrap();
        for s in &traj.samples {
            assert!((s.p[0] - 2.0 * (s.t + 0.5)).abs() < 1e-12);
        }
    }
}
