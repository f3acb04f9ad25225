//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Curvature pairs with `sᵀy` at or below this are discarded.
const CURVATURE_EPS: f64 = 1e-10;
/// Relative band within which objective values are treated as rounding noise.
const NOISE_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    /// Stop once `‖∇f‖∞` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of stored curvature pairs.
    pub history: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iter: 200,
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// `‖∇f(x)‖∞` at the returned point.
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Objective value after each accepted iteration, starting with `f(x₀)`.
    pub f_history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizer of the cubic interpolating `(x1, f1, g1)` and `(x2, f2, g2)`,
/// clamped to `[lo, hi]`; falls back to the midpoint when the cubic has no
/// real minimizer.
fn cubic_minimizer(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, lo: f64, hi: f64) -> f64 {
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let disc = d1 * d1 - g1 * g2;
    if disc >= 0.0 {
        let d2 = disc.sqrt() * (x2 - x1).signum();
        let t = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2));
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct Probe {
    alpha: f64,
    f: f64,
    slope: f64,
    grad: Vec<f64>,
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
    evals: usize,
    best: Option<Probe>,
    point: Vec<f64>,
}

impl<'a, F: FnMut(&[f64], &mut [f64]) -> f64> LineSearch<'a, F> {
    fn eval(&mut self, alpha: f64) -> Probe {
        for ((p, &x), &d) in self.point.iter_mut().zip(self.x).zip(self.dir) {
            *p = x + alpha * d;
        }
        let mut grad = vec![0.0; self.x.len()];
        let f = (self.f)(&self.point, &mut grad);
        self.evals += 1;
        let slope = dot(&grad, self.dir);
        let probe = Probe {
            alpha,
            f,
            slope,
            grad,
        };
        if probe.f.is_finite()
            && probe.f < self.f0
            && self.best.as_ref().map_or(true, |b| probe.f < b.f)
        {
            self.best = Some(Probe {
                alpha,
                f,
                slope,
                grad: probe.grad.clone(),
            });
        }
        probe
    }

    /// Approximate Wolfe decrease (Hager and Zhang): once the sufficient
    /// decrease term is below the objective's rounding error, a step that keeps
    /// `f` within the noise band is judged by its slope alone.
    fn approx_decrease(&self, p: &Probe) -> bool {
        p.f <= self.f0 + NOISE_REL * self.f0.abs()
            && p.slope <= (2.0 * self.c1 - 1.0) * self.slope0
    }

    fn armijo_fails(&self, p: &Probe) -> bool {
        !p.f.is_finite()
            || (p.f > self.f0 + self.c1 * p.alpha * self.slope0 && !self.approx_decrease(p))
    }

    fn curvature_ok(&self, p: &Probe) -> bool {
        p.slope.abs() <= -self.c2 * self.slope0
    }

    /// Bracketing phase; `Ok` holds a point satisfying the strong Wolfe conditions.
    fn run(mut self, alpha0: f64) -> (Result<Probe, Option<Probe>>, usize) {
        let mut prev = Probe {
            alpha: 0.0,
            f: self.f0,
            slope: self.slope0,
            grad: Vec::new(),
        };
        let mut alpha = alpha0;
        while self.evals < self.budget {
            let cur = self.eval(alpha);
            if self.armijo_fails(&cur)
                || (self.evals > 1 && cur.f >= prev.f && !self.approx_decrease(&cur))
            {
                let r = self.zoom(prev, cur);
                return (r, self.evals);
            }
            if self.curvature_ok(&cur) {
                return (Ok(cur), self.evals);
            }
            if cur.slope >= 0.0 {
                let r = self.zoom(cur, prev);
                return (r, self.evals);
            }
            let next = cubic_minimizer(
                prev.alpha,
                prev.f,
                prev.slope,
                cur.alpha,
                cur.f,
                cur.slope,
                cur.alpha * 1.1,
                cur.alpha * 10.0,
            );
            prev = cur;
            alpha = next;
        }
        let evals = self.evals;
        (Err(self.best), evals)
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe) -> Result<Probe, Option<Probe>> {
        while self.evals < self.budget {
            let (a, b) = if lo.alpha < hi.alpha {
                (lo.alpha, hi.alpha)
            } else {
                (hi.alpha, lo.alpha)
            };
            let width = b - a;
            if width <= f64::EPSILON * b.max(1.0) {
                break;
            }
            let alpha = if hi.f.is_finite() {
                cubic_minimizer(
                    lo.alpha,
                    lo.f,
                    lo.slope,
                    hi.alpha,
                    hi.f,
                    hi.slope,
                    a + 0.1 * width,
                    b - 0.1 * width,
                )
            } else {
                0.5 * (a + b)
            };
            let cur = self.eval(alpha);
            if self.armijo_fails(&cur) || (cur.f >= lo.f && !self.approx_decrease(&cur)) {
                hi = cur;
            } else {
                if self.curvature_ok(&cur) {
                    return Ok(cur);
                }
                if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        Err(self.best.take())
    }
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the objective value.
///
/// The first iteration (and any iteration after the history was reset) takes
/// a steepest-descent step whose trial length is scaled by `1/‖g‖₂`. A line
/// search that exhausts its evaluation budget ends the run with
/// `converged = false`, keeping the best point it saw.
pub fn lbfgs_minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    let mut f_history = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut iterations = 0;

    let finish =
        |x: Vec<f64>, fx: f64, g: &[f64], iterations, evaluations, termination, f_history| {
            let grad_norm = inf_norm(g);
            LbfgsResult {
                x,
                f: fx,
                grad_norm,
                iterations,
                evaluations,
                converged: termination == Termination::GradientTolerance,
                termination,
                f_history,
            }
        };

    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return finish(x, fx, &g, 0, evaluations, Termination::NonFinite, f_history);
    }

    let mut alphas = vec![0.0; cfg.history];
    loop {
        if inf_norm(&g) < cfg.tol {
            return finish(
                x,
                fx,
                &g,
                iterations,
                evaluations,
                Termination::GradientTolerance,
                f_history,
            );
        }
        if iterations >= cfg.max_iter {
            return finish(
                x,
                fx,
                &g,
                iterations,
                evaluations,
                Termination::MaxIterations,
                f_history,
            );
        }

        // Two-loop recursion.
        let mut dir: Vec<f64> = g.clone();
        for (i, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alphas[i] = a;
            dir.iter_mut().zip(y).for_each(|(q, &yv)| *q -= a * yv);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|v| *v *= gamma);
        }
        for (i, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &dir);
            let a = alphas[i];
            dir.iter_mut()
                .zip(s)
                .for_each(|(r, &sv)| *r += sv * (a - b));
        }
        dir.iter_mut().for_each(|v| *v = -*v);

        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            pairs.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let alpha0 = if pairs.is_empty() {
            1.0 / dot(&g, &g).sqrt()
        } else {
            1.0
        };

        let ls = LineSearch {
            f: &mut f,
            x: &x,
            dir: &dir,
            f0: fx,
            slope0: slope,
            c1: cfg.c1,
            c2: cfg.c2,
            budget: cfg.max_line_search,
            evals: 0,
            best: None,
            point: vec![0.0; n],
        };
        let (outcome, used) = ls.run(alpha0);
        evaluations += used;
        match outcome {
            Ok(p) => {
                let s: Vec<f64> = dir.iter().map(|d| p.alpha * d).collect();
                let y: Vec<f64> = p.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > CURVATURE_EPS {
                    if pairs.len() == cfg.history {
                        pairs.pop_front();
                    }
                    pairs.push_back((s.clone(), y, 1.0 / sy));
                }
                x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
                fx = p.f;
                g = p.grad;
                iterations += 1;
                f_history.push(fx);
            }
            Err(best) => {
                if let Some(p) = best {
                    x.iter_mut()
                        .zip(&dir)
                        .for_each(|(xi, d)| *xi += p.alpha * d);
                    fx = p.f;
                    g = p.grad;
                    iterations += 1;
                    f_history.push(fx);
                }
                return finish(
                    x,
                    fx,
                    &g,
                    iterations,
                    evaluations,
                    Termination::LineSearchFailed,
                    f_history,
                );
            }
        }
    }
}
