//! Random-intercept model `y_ij = a x_i + b + u_i + e_ij` fitted by REML,
//! profiled over the variance ratio `lambda = var_u / var_e`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const LOG_LAMBDA_MIN: f64 = -12.0;
pub const LOG_LAMBDA_MAX: f64 = 12.0;
const TOL: f64 = 1e-8;
const MAX_ITER: usize = 200;
const GRID_STEPS: usize = 48;
const P: f64 = 2.0;

/// One ego with its ES and the ES of its interaction partners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoGroup {
    pub ego: String,
    pub x: f64,
    pub ys: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegregationEstimate {
    pub rho: f64,
    /// Slope per standard deviation of ego ES.
    pub a: f64,
    pub b: f64,
    pub var_u: f64,
    pub var_e: f64,
    pub n_egos: usize,
    pub n_obs: usize,
    pub reml_loglik: f64,
    pub converged: bool,
    pub lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostic: Option<String>,
}

/// Per-group sufficient statistics, with x already standardized.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub x: Vec<f64>,
    pub n: Vec<f64>,
    pub ybar: Vec<f64>,
    pub ssw: f64,
    pub n_obs: usize,
}

impl GroupStats {
    /// Standardizes x over the egos (population SD) and summarizes ys.
    pub fn new(groups: &[EgoGroup]) -> Result<Self> {
        let groups: Vec<&EgoGroup> = groups.iter().filter(|g| !g.ys.is_empty()).collect();
        if groups.len() < 2 {
            return Err(Error::Degenerate(format!("need at least 2 egos with alters, got {}", groups.len())));
        }
        let xs: Vec<f64> = groups.iter().map(|g| g.x).collect();
        let mx = stats::mean(&xs);
        let sx = stats::pop_std(&xs);
        if !(sx > 0.0) || !sx.is_finite() {
            return Err(Error::Degenerate("ego ES has zero variance".into()));
        }
        let mut out = GroupStats {
            x: Vec::with_capacity(groups.len()),
            n: Vec::with_capacity(groups.len()),
            ybar: Vec::with_capacity(groups.len()),
            ssw: 0.0,
            n_obs: 0,
        };
        for g in groups {
            let m = stats::mean(&g.ys);
            out.x.push((g.x - mx) / sx);
            out.n.push(g.ys.len() as f64);
            out.ybar.push(m);
            out.ssw += g.ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>();
            out.n_obs += g.ys.len();
        }
        Ok(out)
    }

    pub fn n_groups(&self) -> usize {
        self.x.len()
    }

    /// GLS fit at `lambda`: returns (a, b, Q, log|M|, sum log(1 + lambda n)).
    fn gls(&self, lambda: f64) -> Option<(f64, f64, f64, f64, f64)> {
        let (mut sxx, mut sx, mut s1, mut sxy, mut sy, mut logdet_v) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..self.x.len() {
            let d = 1.0 + lambda * self.n[k];
            let w = self.n[k] / d;
            let x = self.x[k];
            sxx += w * x * x;
            sx += w * x;
            s1 += w;
            sxy += w * x * self.ybar[k];
            sy += w * self.ybar[k];
            logdet_v += d.ln();
        }
        let det = sxx * s1 - sx * sx;
        if !(det > 0.0) {
            return None;
        }
        let a = (s1 * sxy - sx * sy) / det;
        let b = (sxx * sy - sx * sxy) / det;
        let mut q = self.ssw;
        for k in 0..self.x.len() {
            let w = self.n[k] / (1.0 + lambda * self.n[k]);
            let r = self.ybar[k] - a * self.x[k] - b;
            q += w * r * r;
        }
        Some((a, b, q, det.ln(), logdet_v))
    }

    /// Derivative of the profiled REML log-likelihood with respect to
    /// `ln lambda`.
    pub fn reml_score(&self, lambda: f64) -> f64 {
        let df = self.n_obs as f64 - P;
        let Some((a, b, q, _, _)) = self.gls(lambda) else {
            return f64::NAN;
        };
        let (mut sxx, mut sx, mut s1) = (0.0, 0.0, 0.0);
        let (mut axx, mut ax, mut a1) = (0.0, 0.0, 0.0);
        let (mut sum_w, mut sum_w2r2) = (0.0, 0.0);
        for k in 0..self.x.len() {
            let w = self.n[k] / (1.0 + lambda * self.n[k]);
            let x = self.x[k];
            let r = self.ybar[k] - a * x - b;
            sxx += w * x * x;
            sx += w * x;
            s1 += w;
            axx += w * w * x * x;
            ax += w * w * x;
            a1 += w * w;
            sum_w += w;
            sum_w2r2 += w * w * r * r;
        }
        let det = sxx * s1 - sx * sx;
        let trace = (s1 * axx - 2.0 * sx * ax + sxx * a1) / det;
        -0.5 * lambda * (-df * sum_w2r2 / q + sum_w - trace)
    }

    /// Profiled REML log-likelihood at `lambda`.
    pub fn reml_profile(&self, lambda: f64) -> f64 {
        let df = self.n_obs as f64 - P;
        match self.gls(lambda) {
            Some((_, _, q, logdet_m, logdet_v)) if q > 0.0 => {
                -0.5 * (df * (q / df).ln() + logdet_v + logdet_m + df) - 0.5 * df * (2.0 * std::f64::consts::PI).ln()
            }
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Brent minimization of `f` on `[lo, hi]` starting from `x0`.
fn brent_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, x0: f64) -> (f64, f64, bool) {
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let (mut x, mut w, mut v) = (x0, x0, x0);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..MAX_ITER {
        let xm = 0.5 * (lo + hi);
        let tol1 = 0.5 * TOL;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (hi - lo) {
            return (x, fx, true);
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (lo - x) && p < q * (hi - x) {
                d = p / q;
                let u = x + d;
                if u - lo < tol2 || hi - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { lo - x } else { hi - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                lo = x;
            } else {
                hi = x;
            }
            (v, w, x) = (w, x, u);
            (fv, fw, fx) = (fw, fx, fu);
        } else {
            if u < x {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == x {
                (v, w) = (w, u);
                (fv, fw) = (fw, fu);
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx, false)
}

/// Refines a maximizer by locating the sign change of the score near it,
/// which is far better conditioned than the objective itself.
fn polish(st: &GroupStats, s: f64, fs: f64) -> (f64, f64) {
    let g = |s: f64| st.reml_score(s.exp());
    let (mut lo, mut hi) = (s - 1e-5, s + 1e-5);
    let (mut glo, mut ghi) = (g(lo), g(hi));
    if !(glo > 0.0 && ghi < 0.0) {
        return (s, fs);
    }
    let mut side = 0i8;
    for _ in 0..MAX_ITER {
        let m = (lo * ghi - hi * glo) / (ghi - glo);
        let gm = g(m);
        if gm == 0.0 || hi - lo < 1e-14 {
            lo = m;
            hi = m;
            break;
        }
        if gm > 0.0 {
            lo = m;
            glo = gm;
            if side == 1 {
                ghi *= 0.5;
            }
            side = 1;
        } else {
            hi = m;
            ghi = gm;
            if side == -1 {
                glo *= 0.5;
            }
            side = -1;
        }
    }
    let r = 0.5 * (lo + hi);
    let fr = -st.reml_profile(r.exp());
    if fr <= fs + 1e-9 * fs.abs().max(1.0) {
        (r, fr.min(fs))
    } else {
        (s, fs)
    }
}

fn estimate(
    st: &GroupStats,
    lambda: f64,
    loglik: f64,
    converged: bool,
    diagnostic: Option<String>,
) -> SegregationEstimate {
    let (a, b, q, _, _) = st.gls(lambda).expect("design checked before optimizing");
    let var_e = q / (st.n_obs as f64 - P);
    let var_u = lambda * var_e;
    SegregationEstimate {
        rho: rho_of(a, var_u),
        a,
        b,
        var_u,
        var_e,
        n_egos: st.n_groups(),
        n_obs: st.n_obs,
        reml_loglik: loglik,
        converged,
        lambda,
        diagnostic,
    }
}

pub fn rho_of(a: f64, var_u: f64) -> f64 {
    let den = (a * a + var_u).sqrt();
    if den > 0.0 {
        a / den
    } else {
        0.0
    }
}

/// REML fit of the random-intercept model over egos with at least one alter.
///
/// A maximum at `lambda = 0` is a boundary solution (`var_u = 0`) and is
/// reported as converged; a maximum at the upper end of the search range is
/// not.
pub fn fit_mixed(groups: &[EgoGroup]) -> Result<SegregationEstimate> {
    let st = GroupStats::new(groups)?;
    fit_stats(&st)
}

pub fn fit_stats(st: &GroupStats) -> Result<SegregationEstimate> {
    if (st.n_obs as f64) <= P {
        return Err(Error::Degenerate(format!("{} observations cannot identify the model", st.n_obs)));
    }
    let (a0, b0, q0, _, _) = st.gls(0.0).ok_or_else(|| Error::Degenerate("singular fixed-effect design".into()))?;
    if q0 <= 1e-24 * (1.0 + st.ybar.iter().map(|y| y * y).sum::<f64>()) {
        return Ok(SegregationEstimate {
            rho: rho_of(a0, 0.0),
            a: a0,
            b: b0,
            var_u: 0.0,
            var_e: 0.0,
            n_egos: st.n_groups(),
            n_obs: st.n_obs,
            reml_loglik: f64::INFINITY,
            converged: true,
            lambda: 0.0,
            diagnostic: Some("alters' ES is an exact linear function of ego ES".into()),
        });
    }
    if st.n.iter().all(|&n| n == 1.0) {
        // Without replication the profile is flat in lambda.
        let total = q0 / (st.n_obs as f64 - P);
        let mut est = estimate(st, 1.0, st.reml_profile(1.0), false, None);
        est.var_u = 0.5 * total;
        est.var_e = 0.5 * total;
        est.rho = rho_of(est.a, est.var_u);
        est.diagnostic = Some("every ego has one alter; variance components are not identifiable".into());
        return Ok(est);
    }
    let neg = |s: f64| -st.reml_profile(s.exp());
    let step = (LOG_LAMBDA_MAX - LOG_LAMBDA_MIN) / GRID_STEPS as f64;
    let grid: Vec<(f64, f64)> = (0..=GRID_STEPS)
        .map(|k| {
            let s = LOG_LAMBDA_MIN + k as f64 * step;
            (s, neg(s))
        })
        .collect();
    let best = (0..grid.len()).min_by(|&p, &q| grid[p].1.total_cmp(&grid[q].1)).unwrap();
    let lo = grid[best.saturating_sub(1)].0;
    let hi = grid[(best + 1).min(GRID_STEPS)].0;
    let (s, fs, ok) = brent_min(neg, lo, hi, grid[best].0);
    let (s, fs) = polish(st, s, fs);
    let at_zero = st.reml_profile(0.0);
    if at_zero >= -fs || (best == 0 && s - LOG_LAMBDA_MIN < 1e-6) {
        let ll = at_zero.max(-fs);
        let lambda = if at_zero >= -fs { 0.0 } else { s.exp() };
        return Ok(estimate(st, lambda, ll, true, Some("person-level variance at its lower bound".into())));
    }
    if s > LOG_LAMBDA_MAX - 1e-6 {
        return Ok(estimate(st, s.exp(), -fs, false, Some("variance ratio at the upper search bound".into())));
    }
    let diag = (!ok).then(|| format!("line search stopped after {MAX_ITER} iterations"));
    if !fs.is_finite() {
        return Err(Error::Convergence("REML objective is not finite".into()));
    }
    Ok(estimate(st, s.exp(), -fs, ok, diag))
}

/// Pearson correlation of ego ES with the mean ES of its alters.
pub fn naive_corr(groups: &[EgoGroup]) -> Result<f64> {
    let g: Vec<&EgoGroup> = groups.iter().filter(|g| !g.ys.is_empty()).collect();
    if g.len() < 2 {
        return Err(Error::Degenerate(format!("need at least 2 egos with alters, got {}", g.len())));
    }
    let x: Vec<f64> = g.iter().map(|g| g.x).collect();
    let y: Vec<f64> = g.iter().map(|g| stats::mean(&g.ys)).collect();
    stats::pearson(&x, &y).ok_or_else(|| Error::Degenerate("zero variance in ego or alter-mean ES".into()))
}
