//! Closed-form complexity bounds and Monte-Carlo checks of the random-matrix
//! facts they rest on.
//!
//! Suppressed big-O constants are set to 1, so the bound functions give
//! shapes (scaling in `t`, `m`, `ε`, ...) rather than calibrated values.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{min_singular_value, singular_values, spectral_norm, sym_eigen, Mat};
use crate::model::{param_count, PeMode};
use crate::rng::{stream, substream_rng};

/// Inputs to the bound expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryParams {
    pub d: usize,
    pub t: usize,
    /// Number of training prompts.
    pub m: usize,
    pub d_m: usize,
    /// Parameter dimension entering the covering number.
    pub big_d: usize,
    /// Tolerance of the solution ellipsoid.
    pub r: f64,
    pub gamma_eff: f64,
    pub c_pe: f64,
    pub l_f: f64,
    pub l_x: f64,
    /// Output bound `M`.
    pub m_out: f64,
    pub m_y: f64,
    pub eps: f64,
}

impl Default for TheoryParams {
    fn default() -> Self {
        let (d, d_m, t) = (5, 64, 20);
        Self {
            d,
            t,
            m: 309,
            d_m,
            big_d: param_count(d, d_m, PeMode::None, t).theory,
            r: 1.0,
            gamma_eff: 1.0,
            c_pe: 1.0,
            l_f: 1.0,
            l_x: 1.0,
            m_out: 1.0,
            m_y: m_y_bound(1.0, 0.05).expect("valid defaults"),
            eps: 0.2,
        }
    }
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("r", self.r),
            ("gamma_eff", self.gamma_eff),
            ("c_pe", self.c_pe),
            ("l_f", self.l_f),
            ("l_x", self.l_x),
            ("m_out", self.m_out),
            ("m_y", self.m_y),
            ("eps", self.eps),
        ];
        for (name, v) in reals {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.m == 0 || self.t == 0 {
            return Err(Error::Domain("m and t must be at least 1".into()));
        }
        Ok(())
    }
}

/// Attack amplification `1/(1 − √(d/t) − ε/√t)`.
pub fn phi(eps: f64, t: usize, d: usize) -> Result<f64> {
    if t <= d {
        return Err(Error::Domain(format!("need t > d, got t={t}, d={d}")));
    }
    let (tf, df) = (t as f64, d as f64);
    let limit = tf.sqrt() - df.sqrt();
    if !(eps >= 0.0) || eps >= limit {
        return Err(Error::Domain(format!("eps={eps} outside [0, √t − √d = {limit})")));
    }
    let denom = 1.0 - (df / tf).sqrt() - eps / tf.sqrt();
    if denom <= 0.0 {
        return Err(Error::Domain(format!("eps={eps} leaves a non-positive denominator {denom}")));
    }
    Ok(1.0 / denom)
}

/// Diameter `2√(r/λ_min(A))` of `{w : wᵀAw ≤ r}`.
pub fn ellipsoid_diameter(a: &Mat, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("r must be positive, got {r}")));
    }
    let (vals, _) = sym_eigen(a)?;
    let lmin = vals[0];
    if !(lmin > 0.0) {
        return Err(Error::Degenerate(format!("matrix is not positive definite (λ_min = {lmin:e})")));
    }
    Ok(2.0 * (r / lmin).sqrt())
}

/// `D·log(3·diam/ε)`.
pub fn covering_log_bound(big_d: f64, diam: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) || !(diam > 0.0) {
        return Err(Error::Domain(format!("need eps > 0 and diam > 0, got eps={eps}, diam={diam}")));
    }
    Ok(big_d * (3.0 * diam / eps).ln())
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
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
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// `∫₀^diam √(log(K·diam/u)) du`.
///
/// The substitution `u = diam·e^{−s²}` turns the log singularity at 0 into a
/// smooth, Gaussian-decaying integrand on `s ∈ [0, ∞)`.
pub fn dudley_quadrature(diam: f64, k: f64) -> Result<f64> {
    if !(diam > 0.0) || !(k >= 1.0) {
        return Err(Error::Domain(format!("need diam > 0 and K ≥ 1, got diam={diam}, K={k}")));
    }
    let log_k = k.ln();
    let f = |s: f64| (log_k + s * s).sqrt() * 2.0 * s * (-s * s).exp();
    // e^{−s²} is below 1e-35 past s = 9
    let (a, b) = (0.0, 9.0 + log_k.sqrt());
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    Ok(diam * adaptive_simpson(&f, a, b, fa, fm, fb, whole, 1e-10, 50))
}

/// Clean complexity without PE, `l_f·√(rD)·√(log(t/r))/√(mt)`.
pub fn rc_bound_nope(p: &TheoryParams) -> Result<f64> {
    p.validate()?;
    let t = p.t as f64;
    if !(t > p.r) || !(p.r > 0.0) {
        return Err(Error::Domain(format!("need 0 < r < t, got r={}, t={}", p.r, p.t)));
    }
    Ok(p.l_f * (p.r * p.big_d as f64).sqrt() * (t / p.r).ln().sqrt() / (p.m as f64 * t).sqrt())
}

/// Clean complexity with PE: the no-PE value shifted by `C_PE·√d/√m`.
pub fn rc_bound_pe(p: &TheoryParams) -> Result<f64> {
    Ok(rc_bound_nope(p)? + p.c_pe * (p.d as f64).sqrt() / (p.m as f64).sqrt())
}

/// Lipschitz constant of the squared loss on the surrogate domain.
pub fn l_h(m_out: f64, m_y: f64, l_x: f64, eps: f64) -> Result<f64> {
    for (name, v) in [("m_out", m_out), ("m_y", m_y), ("l_x", l_x), ("eps", eps)] {
        if !(v >= 0.0) {
            return Err(Error::Domain(format!("{name} must be non-negative, got {v}")));
        }
    }
    Ok(2.0 * ((m_out + m_y) + l_x * eps))
}

fn l_h_of(p: &TheoryParams) -> Result<f64> {
    l_h(p.m_out, p.m_y, p.l_x, p.eps)
}

/// Adversarial complexity without PE.
pub fn arc_bound_nope(p: &TheoryParams) -> Result<f64> {
    let phi = phi(p.eps, p.t, p.d)?;
    Ok(l_h_of(p)? * rc_bound_nope(p)? * phi)
}

/// Adversarial complexity with PE.
pub fn arc_bound_pe(p: &TheoryParams) -> Result<f64> {
    let phi = phi(p.eps, p.t, p.d)?;
    let sqrt_m = (p.m as f64).sqrt();
    let shift = p.c_pe * (p.d as f64).sqrt() / sqrt_m + p.c_pe * p.eps / sqrt_m;
    Ok(l_h_of(p)? * (shift + rc_bound_nope(p)? * phi))
}

/// High-probability response bound `√C_μ·√(2·log(2/δ))`.
pub fn m_y_bound(c_mu: f64, delta: f64) -> Result<f64> {
    if !(c_mu > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("need c_mu > 0 and 0 < δ < 1, got c_mu={c_mu}, δ={delta}")));
    }
    Ok(c_mu.sqrt() * (2.0 * (2.0 / delta).ln()).sqrt())
}

/// Empirical tail rate of `σ_min` of a Gaussian matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailEstimate {
    pub threshold: f64,
    pub rate: f64,
    /// `e^{−k²/2}`.
    pub bound: f64,
    /// `bound + 3·√(bound/trials) + 0.01`.
    pub allowed: f64,
}

/// Fraction of `t×d` standard Gaussian matrices with
/// `σ_min ≤ √t − √d − k`.
pub fn sigma_min_tail_mc(t: usize, d: usize, k: f64, trials: usize, seed: u64) -> Result<TailEstimate> {
    if t <= d || d == 0 {
        return Err(Error::Domain(format!("need t > d ≥ 1, got t={t}, d={d}")));
    }
    if trials < 1000 {
        return Err(Error::Domain(format!("need at least 1000 trials, got {trials}")));
    }
    let threshold = (t as f64).sqrt() - (d as f64).sqrt() - k;
    let bound = (-k * k / 2.0).exp();
    let allowed = bound + 3.0 * (bound / trials as f64).sqrt() + 0.01;
    if threshold <= 0.0 {
        return Ok(TailEstimate { threshold, rate: 0.0, bound, allowed });
    }
    let hits: usize = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream_rng(seed, stream::MONTE_CARLO, i);
            let g = Mat::from_fn(t, d, |_, _| StandardNormal.sample(&mut rng));
            usize::from(min_singular_value(&g).expect("t > d") <= threshold)
        })
        .sum();
    Ok(TailEstimate { threshold, rate: hits as f64 / trials as f64, bound, allowed })
}

/// `max_i |σ_i(A+B) − σ_i(A)| − ‖B‖₂`; never positive up to rounding.
pub fn weyl_check(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s_sum = singular_values(&a.add(b));
    let s_a = singular_values(a);
    let worst = s_sum.iter().zip(&s_a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(worst - spectral_norm(b))
}

/// Spectral-norm bound on the change of the example Gram mean under a
/// Frobenius-ε perturbation, `ε²/t + 2√d·ε/√t`.
pub fn delta_cov_bound(eps: f64, t: usize, d: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::Domain("t must be at least 1".into()));
    }
    let tf = t as f64;
    Ok(eps * eps / tf + 2.0 * (d as f64).sqrt() * eps / tf.sqrt())
}

/// Diameter `2√r/σ_min(X_t)` of the set of exact-fit tolerant solutions.
pub fn solution_diameter_clean(x_t: &Mat, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("r must be positive, got {r}")));
    }
    let s = min_singular_value(x_t)?;
    if !(s > 1e-12) {
        return Err(Error::Degenerate(format!("design has σ_min = {s:e}")));
    }
    Ok(2.0 * r.sqrt() / s)
}
