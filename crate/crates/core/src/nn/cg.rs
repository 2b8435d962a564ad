//! Polak-Ribière nonlinear conjugate gradient.
//!
//! The line search brackets a point satisfying the strong Wolfe conditions
//! using quadratic/cubic interpolation and cubic extrapolation; the initial
//! step of each search is the previous step scaled by the slope ratio, capped
//! at [`CgParams::ratio`]. This is the classic `minimize`/`fmincg` scheme.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgParams {
    /// Sufficient-decrease constant.
    pub rho: f64,
    /// Curvature constant.
    pub sigma: f64,
    /// Do not re-evaluate within this fraction of the current bracket.
    pub interpolation_guard: f64,
    /// Extrapolate at most this multiple of the current step.
    pub extrapolation_cap: f64,
    pub max_evals_per_search: usize,
    /// Cap on the slope-ratio growth of the initial step.
    pub ratio: f64,
}

impl Default for CgParams {
    fn default() -> Self {
        Self {
            rho: 0.01,
            sigma: 0.5,
            interpolation_guard: 0.1,
            extrapolation_cap: 3.0,
            max_evals_per_search: 20,
            ratio: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    /// Two consecutive line searches failed.
    LineSearchFailed,
    /// Zero gradient (or zero search direction).
    Stationary,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxIterations => "max-iterations",
            StopReason::LineSearchFailed => "line-search-failed",
            StopReason::Stationary => "stationary",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome<T> {
    /// Line searches attempted in this call.
    pub iterations: usize,
    pub reason: StopReason,
    /// Cost after each accepted line search.
    pub trace: Vec<T>,
}

fn dot<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> T {
    a.dot(b)
}

/// Resumable minimizer state: the current point, its cost and gradient, the
/// search direction and the slope along it.
pub struct ConjugateGradient<T: Scalar> {
    params: CgParams,
    x: Array1<T>,
    f1: T,
    df1: Array1<T>,
    s: Array1<T>,
    d1: T,
    z1: T,
    ls_failed: bool,
    finished: Option<StopReason>,
}

impl<T: Scalar> ConjugateGradient<T> {
    pub fn new<F>(params: CgParams, x0: Array1<T>, objective: &mut F) -> Result<Self>
    where
        F: FnMut(&Array1<T>) -> Result<(T, Array1<T>)>,
    {
        let (f1, df1) = objective(&x0)?;
        if !f1.is_finite() || df1.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("objective is not finite at the starting point"));
        }
        if df1.len() != x0.len() {
            return Err(Error::arg("gradient length differs from parameter length"));
        }
        let s = df1.mapv(|v| -v);
        let d1 = -dot(&s, &s);
        let finished = (d1 == T::zero()).then_some(StopReason::Stationary);
        Ok(Self {
            params,
            x: x0,
            f1,
            df1,
            s,
            d1,
            z1: T::one() / (T::one() - d1),
            ls_failed: false,
            finished,
        })
    }

    pub fn x(&self) -> &Array1<T> {
        &self.x
    }

    pub fn cost(&self) -> T {
        self.f1
    }

    pub fn finished(&self) -> Option<StopReason> {
        self.finished
    }

    pub fn into_x(self) -> Array1<T> {
        self.x
    }

    /// Runs up to `max_iters` line searches. The point held afterwards is the
    /// best seen: accepted steps strictly decrease the cost and failed searches
    /// restore the previous point.
    pub fn run<F>(&mut self, objective: &mut F, max_iters: usize) -> Result<CgOutcome<T>>
    where
        F: FnMut(&Array1<T>) -> Result<(T, Array1<T>)>,
    {
        let mut trace = Vec::new();
        if let Some(reason) = self.finished {
            return Ok(CgOutcome {
                iterations: 0,
                reason,
                trace,
            });
        }
        let p = &self.params;
        let (rho, sig, int, ext, ratio) = (
            T::of(p.rho),
            T::of(p.sigma),
            T::of(p.interpolation_guard),
            T::of(p.extrapolation_cap),
            T::of(p.ratio),
        );
        let half = T::of(0.5);
        let (two, three, six) = (T::of(2.0), T::of(3.0), T::of(6.0));

        let mut eval = |x: &Array1<T>, s: &Array1<T>| -> Result<(T, Array1<T>, T)> {
            let (f, g) = objective(x)?;
            if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Ok((T::infinity(), g, T::infinity()));
            }
            let d = dot(&g, s);
            Ok((f, g, d))
        };

        let mut iterations = 0;
        while iterations < max_iters {
            iterations += 1;
            let (x0, f0, df0) = (self.x.clone(), self.f1, self.df1.clone());
            let (f1, d1) = (self.f1, self.d1);
            let mut z1 = self.z1;

            self.x.scaled_add(z1, &self.s);
            let (mut f2, mut df2, mut d2) = eval(&self.x, &self.s)?;
            let (mut f3, mut d3, mut z3) = (f1, d1, -z1);
            let mut budget = p.max_evals_per_search;
            let mut success = false;
            let mut limit = -T::one();

            loop {
                while (f2 > f1 + z1 * rho * d1 || d2 > -sig * d1) && budget > 0 {
                    limit = z1;
                    let mut z2 = if f2 > f1 {
                        // quadratic fit
                        z3 - (half * d3 * z3 * z3) / (d3 * z3 + f2 - f3)
                    } else {
                        // cubic fit
                        let a = six * (f2 - f3) / z3 + three * (d2 + d3);
                        let b = three * (f3 - f2) - z3 * (d3 + two * d2);
                        ((b * b - a * d2 * z3 * z3).sqrt() - b) / a
                    };
                    if !z2.is_finite() {
                        z2 = z3 / two;
                    }
                    z2 = z2.min(int * z3).max((T::one() - int) * z3);
                    z1 += z2;
                    self.x.scaled_add(z2, &self.s);
                    (f2, df2, d2) = eval(&self.x, &self.s)?;
                    budget -= 1;
                    z3 -= z2;
                }
                if f2 > f1 + z1 * rho * d1 || d2 > -sig * d1 {
                    break;
                } else if d2 > sig * d1 {
                    success = true;
                    break;
                } else if budget == 0 {
                    break;
                }
                // cubic extrapolation
                let a = six * (f2 - f3) / z3 + three * (d2 + d3);
                let b = three * (f3 - f2) - z3 * (d3 + two * d2);
                let mut z2 = -d2 * z3 * z3 / (b + (b * b - a * d2 * z3 * z3).sqrt());
                let no_limit = limit < -half;
                if !z2.is_finite() || z2 < T::zero() {
                    z2 = if no_limit {
                        z1 * (ext - T::one())
                    } else {
                        (limit - z1) / two
                    };
                } else if !no_limit && z2 + z1 > limit {
                    z2 = (limit - z1) / two;
                } else if no_limit && z2 + z1 > z1 * ext {
                    z2 = z1 * (ext - T::one());
                } else if z2 < -z3 * int {
                    z2 = -z3 * int;
                } else if !no_limit && z2 < (limit - z1) * (T::one() - int) {
                    z2 = (limit - z1) * (T::one() - int);
                }
                f3 = f2;
                d3 = d2;
                z3 = -z2;
                z1 += z2;
                self.x.scaled_add(z2, &self.s);
                (f2, df2, d2) = eval(&self.x, &self.s)?;
                budget -= 1;
            }

            if success {
                self.f1 = f2;
                trace.push(f2);
                let g1g1 = dot(&self.df1, &self.df1);
                let beta = (dot(&df2, &df2) - dot(&self.df1, &df2)) / g1g1;
                self.s = &self.s * beta - &df2;
                self.df1 = df2;
                let mut d_new = dot(&self.df1, &self.s);
                if d_new > T::zero() {
                    self.s = self.df1.mapv(|v| -v);
                    d_new = -dot(&self.s, &self.s);
                }
                self.z1 = z1 * ratio.min(d1 / (d_new - T::min_positive_value()));
                self.d1 = d_new;
                self.ls_failed = false;
                if d_new == T::zero() {
                    self.finished = Some(StopReason::Stationary);
                    return Ok(CgOutcome {
                        iterations,
                        reason: StopReason::Stationary,
                        trace,
                    });
                }
            } else {
                self.x = x0;
                self.f1 = f0;
                self.df1 = df0;
                if self.ls_failed {
                    self.finished = Some(StopReason::LineSearchFailed);
                    return Ok(CgOutcome {
                        iterations,
                        reason: StopReason::LineSearchFailed,
                        trace,
                    });
                }
                // restart along steepest descent
                self.s = self.df1.mapv(|v| -v);
                self.d1 = -dot(&self.s, &self.s);
                self.z1 = T::one() / (T::one() - self.d1);
                self.ls_failed = true;
                if self.d1 == T::zero() {
                    self.finished = Some(StopReason::Stationary);
                    return Ok(CgOutcome {
                        iterations,
                        reason: StopReason::Stationary,
                        trace,
                    });
                }
            }
        }
        Ok(CgOutcome {
            iterations,
            reason: StopReason::MaxIterations,
            trace,
        })
    }
}

/// Minimizes `objective` from `w0` for at most `max_iters` line searches.
///
/// Returns the best point found and the cost trace, starting with the cost at
/// `w0` and followed by the cost after every accepted line search.
pub fn cg_minimize<T, F>(
    mut objective: F,
    w0: Array1<T>,
    max_iters: usize,
    params: &CgParams,
) -> Result<(Array1<T>, Vec<T>, StopReason)>
where
    T: Scalar,
    F: FnMut(&Array1<T>) -> Result<(T, Array1<T>)>,
{
    let mut cg = ConjugateGradient::new(params.clone(), w0, &mut objective)?;
    let mut trace = vec![cg.cost()];
    let outcome = cg.run(&mut objective, max_iters)?;
    trace.extend(outcome.trace);
    Ok((cg.into_x(), trace, outcome.reason))
}
