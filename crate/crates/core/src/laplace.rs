//! Laplace latent densities.
//!
//! The prior is `Lap(0, √0.5)`, which has unit variance. A posterior is
//! parametrized by a location `μ` and a dimensionless multiplier `σ`, realizing
//! the scale `b = σ·√0.5`; at `(μ, σ) = (0, 1)` it coincides with the prior.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Tensor, Var};

/// `√0.5`, the scale of the unit-variance Laplace prior.
pub const SQRT_HALF: f64 = FRAC_1_SQRT_2;

/// Location/scale of a one-dimensional Laplace density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceParams {
    pub mu: f64,
    pub b: f64,
}

impl LaplaceParams {
    pub fn new(mu: f64, b: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite() && mu.is_finite()) {
            return Err(Error::invalid(format!(
                "Laplace needs finite location and positive scale, got ({mu}, {b})"
            )));
        }
        Ok(LaplaceParams { mu, b })
    }

    pub fn density(&self, z: f64) -> f64 {
        (-(z - self.mu).abs() / self.b).exp() / (2.0 * self.b)
    }

    pub fn log_density(&self, z: f64) -> f64 {
        -(z - self.mu).abs() / self.b - (2.0 * self.b).ln()
    }

    pub fn cdf(&self, z: f64) -> f64 {
        let t = (z - self.mu) / self.b;
        if t < 0.0 {
            0.5 * t.exp()
        } else {
            1.0 - 0.5 * (-t).exp()
        }
    }

    pub fn variance(&self) -> f64 {
        2.0 * self.b * self.b
    }
}

/// Posterior parametrization `(μ, σ)` with realized scale `σ·√0.5`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: f64,
    pub sigma: f64,
}

impl PosteriorParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Error::invalid(format!(
                "posterior needs finite location and positive sigma, got ({mu}, {sigma})"
            )));
        }
        Ok(PosteriorParams { mu, sigma })
    }

    pub fn scale(&self) -> f64 {
        self.sigma * SQRT_HALF
    }

    pub fn laplace(&self) -> LaplaceParams {
        LaplaceParams {
            mu: self.mu,
            b: self.scale(),
        }
    }
}

/// The unit-variance prior `(μ, σ) = (0, 1)`.
pub fn prior() -> PosteriorParams {
    PosteriorParams {
        mu: 0.0,
        sigma: 1.0,
    }
}

/// Standardized inverse-CDF draw: `s(u) = −sign(u − ½)·ln(1 − 2|u − ½|)`.
pub fn standard_noise(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::invalid(format!("uniform draw {u} outside (0, 1)")));
    }
    let c = u - 0.5;
    if c == 0.0 {
        return Ok(0.0);
    }
    Ok(-c.signum() * (1.0 - 2.0 * c.abs()).ln())
}

/// Reparametrized sample `z = μ + b·s(u)`.
pub fn sample(u: f64, p: LaplaceParams) -> Result<f64> {
    Ok(p.mu + p.b * standard_noise(u)?)
}

fn check_sigma(p: &PosteriorParams) -> Result<()> {
    if p.sigma > 0.0 && p.sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "sigma must be positive, got {}",
            p.sigma
        )))
    }
}

/// Generative error between a posterior `(μ₁, σ₁)` and a target `(μ₂, σ₂)`:
///
/// `−ln(σ₂/σ₁) + |μ₁ − μ₂|/(√0.5·σ₂) + (σ₁/σ₂)·exp(−|μ₁ − μ₂|/(σ₁·√0.5)) − 1`.
///
/// This is the closed form used for training, term for term. Its leading
/// logarithm has the opposite sign to the one obtained by integrating the
/// Kullback–Leibler divergence directly; the two agree whenever `σ₁ = σ₂`.
/// [`kl_quadrature`] evaluates the integral itself and [`discrepancy_report`]
/// maps the difference.
pub fn generative_error(post: PosteriorParams, target: PosteriorParams) -> Result<f64> {
    check_sigma(&post)?;
    check_sigma(&target)?;
    let (s1, s2) = (post.sigma, target.sigma);
    let d = (post.mu - target.mu).abs();
    Ok(-(s2 / s1).ln() + d / (SQRT_HALF * s2) + (s1 / s2) * (-d / (s1 * SQRT_HALF)).exp() - 1.0)
}

/// Tape version of [`generative_error`], elementwise over same-shaped tensors.
///
/// `log_sigma` must hold `ln σ₁` for the posterior scale `sigma`; targets are
/// constants.
pub fn generative_error_var(
    g: &mut Graph,
    mu: Var,
    log_sigma: Var,
    sigma: Var,
    target_mu: &Tensor,
    target_sigma: &Tensor,
) -> Result<Var> {
    if !target_sigma.data().iter().all(|&s| s > 0.0) {
        return Err(Error::invalid("target sigma must be positive"));
    }
    let mu2 = g.constant(target_mu.clone());
    let log_s2 = g.constant(target_sigma.map(f64::ln));
    let inv_b2 = g.constant(target_sigma.map(|s| 1.0 / (SQRT_HALF * s)));
    let inv_s2 = g.constant(target_sigma.map(|s| 1.0 / s));

    let diff = g.sub(mu, mu2)?;
    let d = g.abs(diff);
    // −ln(σ₂/σ₁) = ln σ₁ − ln σ₂
    let t1 = g.sub(log_sigma, log_s2)?;
    let t2 = g.mul(d, inv_b2)?;
    let ratio = g.mul(sigma, inv_s2)?;
    let d_over_s1 = g.div(d, sigma)?;
    let arg = g.scale(d_over_s1, -1.0 / SQRT_HALF);
    let e = g.exp(arg);
    let t3 = g.mul(ratio, e)?;
    let s = g.add(t1, t2)?;
    let s = g.add(s, t3)?;
    Ok(g.offset(s, -1.0))
}

/// Adaptive composite Simpson quadrature of `f` over `[a, b]`.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
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
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Integrates `f` piecewise between sorted breakpoints, splitting the tolerance.
pub fn integrate_piecewise(f: &impl Fn(f64) -> f64, points: &[f64], tol: f64) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let pieces = (pts.len().max(2) - 1) as f64;
    pts.windows(2)
        .map(|w| adaptive_simpson(f, w[0], w[1], tol / pieces))
        .sum()
}

/// Absolute tolerance of the quadrature oracle.
pub const QUADRATURE_TOL: f64 = 1e-9;
/// Half-width of the integration window, in units of the largest scale.
pub const QUADRATURE_SPAN: f64 = 40.0;

/// `D(Lap(μ₁, σ₁√0.5) ‖ Lap(μ₂, σ₂√0.5))` by numerical integration.
pub fn kl_quadrature(post: PosteriorParams, target: PosteriorParams) -> Result<f64> {
    check_sigma(&post)?;
    check_sigma(&target)?;
    let (p, q) = (post.laplace(), target.laplace());
    let bmax = p.b.max(q.b);
    let lo = p.mu.min(q.mu) - QUADRATURE_SPAN * bmax;
    let hi = p.mu.max(q.mu) + QUADRATURE_SPAN * bmax;
    let integrand = |z: f64| {
        let lp = p.log_density(z);
        let w = lp.exp();
        if w == 0.0 {
            0.0
        } else {
            w * (lp - q.log_density(z))
        }
    };
    Ok(integrate_piecewise(
        &integrand,
        &[lo, p.mu, q.mu, hi],
        QUADRATURE_TOL,
    ))
}

/// One cell of the printed-formula versus quadrature comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscrepancyRow {
    pub post: PosteriorParams,
    pub target: PosteriorParams,
    pub printed: f64,
    pub quadrature: f64,
}

impl DiscrepancyRow {
    pub fn difference(&self) -> f64 {
        self.printed - self.quadrature
    }

    pub fn printed_negative(&self) -> bool {
        self.printed < 0.0
    }
}

/// Evaluates both routes over the full grid `mus² × sigmas²`.
pub fn discrepancy_report(mus: &[f64], sigmas: &[f64]) -> Result<Vec<DiscrepancyRow>> {
    let mut rows = Vec::with_capacity(mus.len().pow(2) * sigmas.len().pow(2));
    for &m1 in mus {
        for &m2 in mus {
            for &s1 in sigmas {
                for &s2 in sigmas {
                    let post = PosteriorParams::new(m1, s1)?;
                    let target = PosteriorParams::new(m2, s2)?;
                    rows.push(DiscrepancyRow {
                        post,
                        target,
                        printed: generative_error(post, target)?,
                        quadrature: kl_quadrature(post, target)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// CSV rendering of a discrepancy report.
pub fn discrepancy_csv(rows: &[DiscrepancyRow]) -> String {
    let mut out =
        String::from("mu1,sigma1,mu2,sigma2,printed,quadrature,difference,printed_negative\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.12e},{:.12e},{:.12e},{}\n",
            r.post.mu,
            r.post.sigma,
            r.target.mu,
            r.target.sigma,
            r.printed,
            r.quadrature,
            r.difference(),
            r.printed_negative()
        ));
    }
    out
}

/// The `|Δμ|`-free part of the difference between the printed closed form and
/// the integrated divergence: `2·ln(σ₁/σ₂)`.
pub fn log_term_gap(post: PosteriorParams, target: PosteriorParams) -> f64 {
    2.0 * (post.sigma / target.sigma).ln()
}
