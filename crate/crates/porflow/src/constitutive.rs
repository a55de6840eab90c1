//! Free-energy constitutive relations: energy, chemical potential and its
//! monotone inverse, mobilities, capillary pressure, and the Kirchhoff-type
//! pressure transforms.
//!
//! The free energy of the mixture in terms of the wetting saturation `S` is
//!
//! ```text
//! F(S) = gamma_w S (ln S - 1) + gamma_n (1-S)(ln(1-S) - 1) + gamma_wn S (1-S)
//! ```
//!
//! and `mu_w = F'(S)` is strictly increasing whenever the admissibility margin
//! `(sqrt(gamma_w) + sqrt(gamma_n))^2 - 2 gamma_wn` is positive, which makes
//! the inversion `S(mu)` well defined on all of R.

use thiserror::Error;

/// Guaranteed absolute tolerance (in saturation) of the inversion.
pub const INVERT_MU_TOL: f64 = 1e-13;
/// Internal stopping tolerance: the residual noise the inversion injects is
/// amplified by 1/tau in the storage term, so iterate to machine precision.
const INVERT_STOP_TOL: f64 = 5e-16;
/// Bracket offset for the inversion: the root is sought in `[DELTA, 1-DELTA]`.
const INVERT_BRACKET_DELTA: f64 = 1e-12;
const INVERT_MAX_ITERS: usize = 200;
/// Relative tolerance for the adaptive Simpson quadrature of the transforms.
const QUAD_REL_TOL: f64 = 1e-10;
/// Intervals below this width abort the quadrature instead of recursing.
const QUAD_MIN_INTERVAL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum ConstitutiveError {
    #[error("saturation {0} outside the open interval (0, 1)")]
    SaturationDomain(f64),
    #[error("chemical potential must be finite, got {0}")]
    NonFiniteMu(f64),
    #[error(
        "energy parameters violate the admissibility condition: \
         (sqrt(gamma_w)+sqrt(gamma_n))^2 - 2*gamma_wn = {margin} must be positive"
    )]
    Inadmissible { margin: f64 },
    #[error("invalid material parameter {name} = {value}: {reason}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("chemical-potential inversion did not converge for mu = {mu} (bracket [{lo}, {hi}])")]
    InversionDiverged { mu: f64, lo: f64, hi: f64 },
    #[error("adaptive quadrature did not converge on [{a}, {b}]")]
    QuadratureNonConvergent { a: f64, b: f64 },
}

/// Fluid phase selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Wetting,
    NonWetting,
}

/// Relative-permeability model, always composed with the residual-saturation
/// clamp so mobilities stay in `[lambda_min, lambda_max]` with
/// `lambda_min > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelPermKind {
    /// `k_rw = S^2`, `k_rn = (1-S)^2`
    Quadratic,
    /// `k_rw = S`, `k_rn = 1-S`
    Linear,
}

/// Energy coefficients, viscosities, and the clamping/admissibility data.
///
/// `c_min` defaults to the computed admissibility margin; a smaller value may
/// be set explicitly with [`MaterialParams::with_c_min`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub gamma_w: f64,
    pub gamma_n: f64,
    pub gamma_wn: f64,
    pub eta_w: f64,
    pub eta_n: f64,
    /// Residual saturation; constitutive coefficients are frozen outside
    /// `[s_eps, 1 - s_eps]`.
    pub s_eps: f64,
    /// Lower porosity bound, used by the energy-inequality diagnostic.
    pub phi_m: f64,
    /// Admissibility margin in use (convexity modulus of the energy).
    pub c_min: f64,
}

/// Computes the admissibility margin `(sqrt(gamma_w)+sqrt(gamma_n))^2 - 2*gamma_wn`,
/// rejecting non-positive margins.
pub fn check_admissibility(
    gamma_w: f64,
    gamma_n: f64,
    gamma_wn: f64,
) -> Result<f64, ConstitutiveError> {
    let margin = (gamma_w.sqrt() + gamma_n.sqrt()).powi(2) - 2.0 * gamma_wn;
    if margin > 0.0 && margin.is_finite() {
        Ok(margin)
    } else {
        Err(ConstitutiveError::Inadmissible { margin })
    }
}

impl MaterialParams {
    pub fn new(
        gamma_w: f64,
        gamma_n: f64,
        gamma_wn: f64,
        eta_w: f64,
        eta_n: f64,
        s_eps: f64,
        phi_m: f64,
    ) -> Result<Self, ConstitutiveError> {
        let positive = |name: &'static str, value: f64| -> Result<(), ConstitutiveError> {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(ConstitutiveError::InvalidParam {
                    name,
                    value,
                    reason: "must be positive and finite",
                })
            }
        };
        positive("gamma_w", gamma_w)?;
        positive("gamma_n", gamma_n)?;
        if !gamma_wn.is_finite() || gamma_wn < 0.0 {
            return Err(ConstitutiveError::InvalidParam {
                name: "gamma_wn",
                value: gamma_wn,
                reason: "must be nonnegative and finite",
            });
        }
        positive("eta_w", eta_w)?;
        positive("eta_n", eta_n)?;
        if !(s_eps > 0.0 && s_eps < 0.5) {
            return Err(ConstitutiveError::InvalidParam {
                name: "s_eps",
                value: s_eps,
                reason: "residual saturation must lie in (0, 1/2)",
            });
        }
        if !(phi_m > 0.0 && phi_m <= 1.0) {
            return Err(ConstitutiveError::InvalidParam {
                name: "phi_m",
                value: phi_m,
                reason: "porosity bound must lie in (0, 1]",
            });
        }
        let c_min = check_admissibility(gamma_w, gamma_n, gamma_wn)?;
        Ok(Self {
            gamma_w,
            gamma_n,
            gamma_wn,
            eta_w,
            eta_n,
            s_eps,
            phi_m,
            c_min,
        })
    }

    /// Overrides `c_min` with a smaller positive margin.
    pub fn with_c_min(mut self, c_min: f64) -> Result<Self, ConstitutiveError> {
        let margin = check_admissibility(self.gamma_w, self.gamma_n, self.gamma_wn)?;
        if !(c_min > 0.0 && c_min <= margin) {
            return Err(ConstitutiveError::InvalidParam {
                name: "c_min",
                value: c_min,
                reason: "override must be positive and at most the computed margin",
            });
        }
        self.c_min = c_min;
        Ok(self)
    }
}

/// Immutable bundle of material parameters plus the derived bounds; all
/// evaluators are pure functions of `(self, arguments)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstitutiveModel {
    params: MaterialParams,
    rel_perm_kind: RelPermKind,
    /// min/max of `dmu/dS` over the clamped interval `[s_eps, 1-s_eps]`.
    lipschitz_bounds: (f64, f64),
    /// min/max phase mobility over the clamped interval.
    mobility_bounds: (f64, f64),
}

impl ConstitutiveModel {
    pub fn new(params: MaterialParams, rel_perm_kind: RelPermKind) -> Self {
        let (a, b) = (params.s_eps, 1.0 - params.s_eps);
        let d = |s: f64| params.gamma_w / s + params.gamma_n / (1.0 - s) - 2.0 * params.gamma_wn;
        // dmu/dS is strictly convex with interior minimizer
        // s* = sqrt(gamma_w)/(sqrt(gamma_w)+sqrt(gamma_n)).
        let s_star = params.gamma_w.sqrt() / (params.gamma_w.sqrt() + params.gamma_n.sqrt());
        let l_max = d(a).max(d(b));
        let l_min = if s_star >= a && s_star <= b {
            d(s_star)
        } else {
            d(a).min(d(b))
        };
        // evaluate through the same expressions as `rel_perm` so the bounds
        // hold bitwise for clamped arguments
        let mut kr_lo = f64::INFINITY;
        let mut kr_hi = f64::NEG_INFINITY;
        for s in [a, b] {
            for phase in [Phase::Wetting, Phase::NonWetting] {
                let kr = rel_perm_of(rel_perm_kind, s, phase);
                kr_lo = kr_lo.min(kr);
                kr_hi = kr_hi.max(kr);
            }
        }
        let eta_max = params.eta_w.max(params.eta_n);
        let eta_min = params.eta_w.min(params.eta_n);
        Self {
            params,
            rel_perm_kind,
            lipschitz_bounds: (l_min, l_max),
            mobility_bounds: (kr_lo / eta_max, kr_hi / eta_min),
        }
    }

    pub fn params(&self) -> &MaterialParams {
        &self.params
    }

    pub fn rel_perm_kind(&self) -> RelPermKind {
        self.rel_perm_kind
    }

    /// `(L_min, L_max)`: extrema of `dmu/dS` over `[s_eps, 1-s_eps]`.
    pub fn lipschitz_bounds(&self) -> (f64, f64) {
        self.lipschitz_bounds
    }

    /// `(lambda_min, lambda_max)` over the clamped saturation range.
    pub fn mobility_bounds(&self) -> (f64, f64) {
        self.mobility_bounds
    }

    /// Clamps a saturation to `[s_eps, 1-s_eps]`.
    pub fn clamp_s(&self, s: f64) -> f64 {
        s.clamp(self.params.s_eps, 1.0 - self.params.s_eps)
    }

    fn check_domain(&self, s: f64) -> Result<(), ConstitutiveError> {
        if s > 0.0 && s < 1.0 {
            Ok(())
        } else {
            Err(ConstitutiveError::SaturationDomain(s))
        }
    }

    /// Free-energy density `F(S)`.
    pub fn free_energy(&self, s: f64) -> Result<f64, ConstitutiveError> {
        self.check_domain(s)?;
        let p = &self.params;
        Ok(p.gamma_w * s * (s.ln() - 1.0)
            + p.gamma_n * (1.0 - s) * ((1.0 - s).ln() - 1.0)
            + p.gamma_wn * s * (1.0 - s))
    }

    /// Chemical potential `mu_w(S) = F'(S)`.
    pub fn chemical_potential(&self, s: f64) -> Result<f64, ConstitutiveError> {
        self.check_domain(s)?;
        let p = &self.params;
        Ok(p.gamma_w * s.ln() - p.gamma_n * (1.0 - s).ln() + p.gamma_wn * (1.0 - 2.0 * s))
    }

    /// `dmu_w/dS`, strictly positive under the admissibility condition.
    pub fn dmu_ds(&self, s: f64) -> Result<f64, ConstitutiveError> {
        self.check_domain(s)?;
        let p = &self.params;
        Ok(p.gamma_w / s + p.gamma_n / (1.0 - s) - 2.0 * p.gamma_wn)
    }

    /// `d2mu_w/dS2`, used by the manufactured-solution harness.
    pub fn d2mu_ds2(&self, s: f64) -> Result<f64, ConstitutiveError> {
        self.check_domain(s)?;
        let p = &self.params;
        Ok(-p.gamma_w / (s * s) + p.gamma_n / ((1.0 - s) * (1.0 - s)))
    }

    /// Inverts the chemical potential: the unique `S` in `(0,1)` with
    /// `mu_w(S) = mu`, by safeguarded Newton on the bracket
    /// `[1e-12, 1-1e-12]` with bisection fallback whenever the Newton iterate
    /// leaves the current bracket. Saturates at the bracket ends for `mu`
    /// beyond their potential values.
    pub fn invert_mu(&self, mu: f64) -> Result<f64, ConstitutiveError> {
        if !mu.is_finite() {
            return Err(ConstitutiveError::NonFiniteMu(mu));
        }
        let mut lo = INVERT_BRACKET_DELTA;
        let mut hi = 1.0 - INVERT_BRACKET_DELTA;
        if self.chemical_potential(lo)? >= mu {
            return Ok(lo);
        }
        if self.chemical_potential(hi)? <= mu {
            return Ok(hi);
        }
        // f(lo) < 0 < f(hi) with f(s) = mu_w(s) - mu.
        let mut s = 0.5;
        for _ in 0..INVERT_MAX_ITERS {
            let f = self.chemical_potential(s)? - mu;
            if f > 0.0 {
                hi = s;
            } else {
                lo = s;
            }
            let df = self.dmu_ds(s)?;
            let mut s_new = s - f / df;
            if !(s_new > lo && s_new < hi) {
                s_new = 0.5 * (lo + hi);
            }
            let delta = (s_new - s).abs();
            s = s_new;
            if delta <= INVERT_STOP_TOL || (hi - lo) <= INVERT_STOP_TOL {
                return Ok(s);
            }
        }
        Err(ConstitutiveError::InversionDiverged { mu, lo, hi })
    }

    fn rel_perm(&self, s_clamped: f64, phase: Phase) -> f64 {
        rel_perm_of(self.rel_perm_kind, s_clamped, phase)
    }

    fn rel_perm_deriv(&self, s_clamped: f64, phase: Phase) -> f64 {
        match (self.rel_perm_kind, phase) {
            (RelPermKind::Quadratic, Phase::Wetting) => 2.0 * s_clamped,
            (RelPermKind::Quadratic, Phase::NonWetting) => -2.0 * (1.0 - s_clamped),
            (RelPermKind::Linear, Phase::Wetting) => 1.0,
            (RelPermKind::Linear, Phase::NonWetting) => -1.0,
        }
    }

    /// Phase mobility `lambda = k_r(clamp(S)) / eta`; total in `S`.
    pub fn mobility(&self, s: f64, phase: Phase) -> f64 {
        let sc = self.clamp_s(s);
        let eta = match phase {
            Phase::Wetting => self.params.eta_w,
            Phase::NonWetting => self.params.eta_n,
        };
        self.rel_perm(sc, phase) / eta
    }

    /// Derivative of the clamped mobility; zero outside `[s_eps, 1-s_eps]`.
    pub fn dmobility_ds(&self, s: f64, phase: Phase) -> f64 {
        if s < self.params.s_eps || s > 1.0 - self.params.s_eps {
            return 0.0;
        }
        let eta = match phase {
            Phase::Wetting => self.params.eta_w,
            Phase::NonWetting => self.params.eta_n,
        };
        self.rel_perm_deriv(s, phase) / eta
    }

    /// `lambda_t = lambda_w + lambda_n`.
    pub fn total_mobility(&self, s: f64) -> f64 {
        self.mobility(s, Phase::Wetting) + self.mobility(s, Phase::NonWetting)
    }

    pub fn dtotal_mobility_ds(&self, s: f64) -> f64 {
        self.dmobility_ds(s, Phase::Wetting) + self.dmobility_ds(s, Phase::NonWetting)
    }

    /// Capillary pressure `p_c(S) = mu_n(S) - mu_w(S)` from the per-phase
    /// potentials `mu_w = gamma_w ln S + gamma_wn (1-S)` and
    /// `mu_n = gamma_n ln(1-S) + gamma_wn S`.
    pub fn capillary_pressure(&self, s: f64) -> Result<f64, ConstitutiveError> {
        self.check_domain(s)?;
        let p = &self.params;
        let mu_w_phase = p.gamma_w * s.ln() + p.gamma_wn * (1.0 - s);
        let mu_n_phase = p.gamma_n * (1.0 - s).ln() + p.gamma_wn * s;
        Ok(mu_n_phase - mu_w_phase)
    }

    /// Single-step convexity gap
    /// `F(S_new) - F(S_old) + (c_min/2)(S_new - S_old)^2 - (S_new - S_old) mu_new`,
    /// nonpositive whenever `mu_new = mu_w(S_new)` and the admissibility
    /// condition holds; zero exactly at `S_new = S_old`.
    pub fn convexity_gap(
        &self,
        s_old: f64,
        s_new: f64,
        mu_new: f64,
    ) -> Result<f64, ConstitutiveError> {
        let ds = s_new - s_old;
        Ok(
            self.free_energy(s_new)? - self.free_energy(s_old)? + 0.5 * self.params.c_min * ds * ds
                - ds * mu_new,
        )
    }

    /// Shift between the pressure and the artificial (global) pressure:
    /// the integral of `(lambda_w/lambda_t) dmu/dS` from `s_eps` to
    /// `clamp(S)`. Monotone nondecreasing; zero at `S <= s_eps`.
    pub fn artificial_pressure_shift(&self, s: f64) -> Result<f64, ConstitutiveError> {
        let upper = self.clamp_s(s);
        self.transform_integral(upper, |m, x| {
            m.mobility(x, Phase::Wetting) / m.total_mobility(x)
        })
    }

    /// Complementary (Kirchhoff) pressure: integral of
    /// `(lambda_w lambda_n / lambda_t) dmu/dS` from `s_eps` to `clamp(S)`.
    pub fn complementary_pressure(&self, s: f64) -> Result<f64, ConstitutiveError> {
        let upper = self.clamp_s(s);
        self.transform_integral(upper, |m, x| {
            m.mobility(x, Phase::Wetting) * m.mobility(x, Phase::NonWetting) / m.total_mobility(x)
        })
    }

    fn transform_integral(
        &self,
        upper: f64,
        weight: impl Fn(&Self, f64) -> f64,
    ) -> Result<f64, ConstitutiveError> {
        let lower = self.params.s_eps;
        if upper <= lower {
            return Ok(0.0);
        }
        let f = |x: f64| {
            let d = self.params.gamma_w / x + self.params.gamma_n / (1.0 - x)
                - 2.0 * self.params.gamma_wn;
            weight(self, x) * d
        };
        adaptive_simpson(&f, lower, upper, QUAD_REL_TOL, QUAD_MIN_INTERVAL)
    }
}

fn rel_perm_of(kind: RelPermKind, s_clamped: f64, phase: Phase) -> f64 {
    match (kind, phase) {
        (RelPermKind::Quadratic, Phase::Wetting) => s_clamped * s_clamped,
        (RelPermKind::Quadratic, Phase::NonWetting) => (1.0 - s_clamped) * (1.0 - s_clamped),
        (RelPermKind::Linear, Phase::Wetting) => s_clamped,
        (RelPermKind::Linear, Phase::NonWetting) => 1.0 - s_clamped,
    }
}

/// Adaptive Simpson quadrature with a relative tolerance on the whole
/// integral and a hard floor on the interval width.
fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    rel_tol: f64,
    min_interval: f64,
) -> Result<f64, ConstitutiveError> {
    if a == b {
        return Ok(0.0);
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let tol = rel_tol * whole.abs().max(1e-30);
    simpson_recurse(f, a, b, fa, fm, fb, whole, tol, min_interval, 60)
        .ok_or(ConstitutiveError::QuadratureNonConvergent { a, b })
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    min_interval: f64,
    depth: usize,
) -> Option<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Some(left + right + delta / 15.0);
    }
    if (b - a) < min_interval || depth == 0 {
        return None;
    }
    let l = simpson_recurse(
        f,
        a,
        m,
        fa,
        flm,
        fm,
        left,
        0.5 * tol,
        min_interval,
        depth - 1,
    )?;
    let r = simpson_recurse(
        f,
        m,
        b,
        fm,
        frm,
        fb,
        right,
        0.5 * tol,
        min_interval,
        depth - 1,
    )?;
    Some(l + r)
}
