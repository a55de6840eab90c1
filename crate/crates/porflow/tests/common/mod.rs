//! Shared helpers for the integration suites: independent oracles that do
//! not touch the library's assembly or inversion code paths.

#![allow(dead_code)]

/// Composite trapezoid rule; the brute-force quadrature oracle.
pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = 0.5 * (f(a) + f(b));
    for i in 1..n {
        acc += f(a + i as f64 * h);
    }
    acc * h
}

/// Independent dense oracle for the smallest nontrivial closed system:
/// two linear elements on the unit interval, one implicit step. Everything
/// (constitutive formulas, quadrature, inversion, linear algebra) is written
/// out by hand here; the only shared inputs are the problem constants.
pub mod two_cell {
    pub const GAMMA_W: f64 = 1.0;
    pub const GAMMA_N: f64 = 1.0;
    pub const GAMMA_WN: f64 = 0.5;
    pub const S_EPS: f64 = 0.1;
    pub const H: f64 = 0.5;
    const INV_SQRT3: f64 = 0.577_350_269_189_625_8;

    pub fn mu_w(s: f64) -> f64 {
        GAMMA_W * s.ln() - GAMMA_N * (1.0 - s).ln() + GAMMA_WN * (1.0 - 2.0 * s)
    }

    fn dmu_ds(s: f64) -> f64 {
        GAMMA_W / s + GAMMA_N / (1.0 - s) - 2.0 * GAMMA_WN
    }

    /// Saturation from potential by plain bisection (no Newton, no shared code).
    pub fn invert(mu: f64) -> f64 {
        let (mut lo, mut hi) = (1e-14, 1.0 - 1e-14);
        if mu_w(lo) >= mu {
            return lo;
        }
        if mu_w(hi) <= mu {
            return hi;
        }
        for _ in 0..120 {
            let mid = 0.5 * (lo + hi);
            if mu_w(mid) > mu {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn clamp(s: f64) -> f64 {
        s.clamp(S_EPS, 1.0 - S_EPS)
    }

    fn lam_w(s: f64) -> f64 {
        let c = clamp(s);
        c * c
    }

    fn lam_n(s: f64) -> f64 {
        let c = 1.0 - clamp(s);
        c * c
    }

    fn lam_t(s: f64) -> f64 {
        lam_w(s) + lam_n(s)
    }

    /// Gauss points of cell `c` as (local coordinate t, weight).
    fn gauss() -> [(f64, f64); 2] {
        [
            (0.5 * (1.0 - INV_SQRT3), 0.5 * H),
            (0.5 * (1.0 + INV_SQRT3), 0.5 * H),
        ]
    }

    /// Dense Gaussian elimination with partial pivoting.
    pub fn dense_solve(a: &mut [Vec<f64>], b: &mut [f64]) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let mut piv = k;
            for i in k + 1..n {
                if a[i][k].abs() > a[piv][k].abs() {
                    piv = i;
                }
            }
            a.swap(k, piv);
            b.swap(k, piv);
            for i in k + 1..n {
                let m = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= m * a[k][j];
                }
                b[i] -= m * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut v = b[i];
            for j in i + 1..n {
                v -= a[i][j] * x[j];
            }
            x[i] = v / a[i][i];
        }
        x
    }

    /// Solves the pressure system for a given potential vector: the
    /// total-mobility stiffness rows plus the zero-mean constraint.
    pub fn pressure_of(mu: &[f64; 3]) -> ([f64; 3], f64) {
        let mut a = vec![vec![0.0; 4]; 4];
        let mut b = vec![0.0; 4];
        for cell in 0..2 {
            let nodes = [cell, cell + 1];
            let grads = [-1.0 / H, 1.0 / H];
            let dmu_dx = (mu[nodes[1]] - mu[nodes[0]]) / H;
            for (t, w) in gauss() {
                let mu_q = (1.0 - t) * mu[nodes[0]] + t * mu[nodes[1]];
                let s_q = invert(mu_q);
                for i in 0..2 {
                    b[nodes[i]] -= w * lam_w(s_q) * dmu_dx * grads[i];
                    for j in 0..2 {
                        a[nodes[i]][nodes[j]] += w * lam_t(s_q) * grads[i] * grads[j];
                    }
                }
            }
        }
        // zero-mean constraint with hat masses [H/2, H, H/2]
        let c = [0.5 * H, H, 0.5 * H];
        for i in 0..3 {
            a[i][3] = c[i];
            a[3][i] = c[i];
        }
        let x = dense_solve(&mut a, &mut b);
        ([x[0], x[1], x[2]], x[3])
    }

    /// Potential-equation residual at `(mu, p)` for the step from `mu_old`.
    pub fn mu_residual(mu: &[f64; 3], p: &[f64; 3], mu_old: &[f64; 3], tau: f64) -> [f64; 3] {
        let mut r = [0.0; 3];
        for cell in 0..2 {
            let (l, rr) = (cell, cell + 1);
            let dmu_dx = (mu[rr] - mu[l]) / H;
            let dp_dx = (p[rr] - p[l]) / H;
            for (t, w) in gauss() {
                let mu_q = (1.0 - t) * mu[l] + t * mu[rr];
                let mu_old_q = (1.0 - t) * mu_old[l] + t * mu_old[rr];
                let s_q = invert(mu_q);
                let s_old_q = invert(mu_old_q);
                let basis = [1.0 - t, t];
                let grads = [-1.0 / H, 1.0 / H];
                for k in 0..2 {
                    let node = if k == 0 { l } else { rr };
                    r[node] += w
                        * ((s_q - s_old_q) / tau * basis[k]
                            + lam_w(s_q) * (dmu_dx + dp_dx) * grads[k]);
                }
            }
        }
        r
    }

    /// Pressure-equation residual rows at `(mu, p)` (closed system).
    pub fn p_residual(mu: &[f64; 3], p: &[f64; 3]) -> [f64; 3] {
        let mut r = [0.0; 3];
        for cell in 0..2 {
            let nodes = [cell, cell + 1];
            let grads = [-1.0 / H, 1.0 / H];
            let dmu_dx = (mu[nodes[1]] - mu[nodes[0]]) / H;
            let dp_dx = (p[nodes[1]] - p[nodes[0]]) / H;
            for (t, w) in gauss() {
                let mu_q = (1.0 - t) * mu[nodes[0]] + t * mu[nodes[1]];
                let s_q = invert(mu_q);
                for k in 0..2 {
                    r[nodes[k]] += w * (lam_t(s_q) * dp_dx + lam_w(s_q) * dmu_dx) * grads[k];
                }
            }
        }
        r
    }

    /// Damped Jacobi-style fixed point on the three potential unknowns, with
    /// the pressure eliminated exactly at every evaluation.
    pub fn solve(mu_old: [f64; 3], tau: f64, tol: f64) -> ([f64; 3], [f64; 3]) {
        let mut mu = mu_old;
        let masses = [0.5 * H, H, 0.5 * H];
        let norm = |r: &[f64; 3]| (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        let mut omega = 0.5;
        let (mut p, _) = pressure_of(&mu);
        let mut res = mu_residual(&mu, &p, &mu_old, tau);
        let mut rnorm = norm(&res);
        for iter in 0..200_000 {
            if rnorm <= tol {
                break;
            }
            assert!(iter < 199_999, "oracle fixed point stalled at {rnorm:e}");
            let mut trial = mu;
            for i in 0..3 {
                let s_i = invert(mu[i]);
                let diag = masses[i] / (dmu_ds(s_i) * tau);
                trial[i] -= omega * res[i] / diag;
            }
            let (p_t, _) = pressure_of(&trial);
            let res_t = mu_residual(&trial, &p_t, &mu_old, tau);
            let n_t = norm(&res_t);
            if n_t < rnorm {
                mu = trial;
                p = p_t;
                res = res_t;
                rnorm = n_t;
                omega = (omega * 1.2).min(1.0);
            } else {
                omega *= 0.5;
                assert!(omega > 1e-8, "oracle damping collapsed at {rnorm:e}");
            }
        }
        (mu, p)
    }
}
