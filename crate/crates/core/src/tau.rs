//! Per-pair scaling-factor optimization.
//!
//! For a fixed reward difference the adaptive loss is convex and univariate in
//! `tau`, so each pair's factor is found by a handful of projected Newton steps
//! on `Ω`. This module also carries the population optima of the expected
//! adaptive losses and a brute-force check of the primal/dual equivalence
//! between the KL-constrained worst case and the adaptive loss.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{grad_hess_tau, logit, LossConfig, LossKind};

/// Settings of the per-pair projected Newton solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSolverConfig {
    /// Newton iterations per solve.
    pub newton_iters: usize,
    pub init_tau: f64,
    pub grad_tol: f64,
    /// Below this `|Δ|` the linear kind returns `τ₀` without iterating.
    pub zero_delta_eps: f64,
    pub bisection_max_iters: usize,
    /// Start from the previous solution instead of `init_tau` (trainer only).
    #[serde(default)]
    pub warm_start: bool,
}

impl Default for TauSolverConfig {
    fn default() -> Self {
        Self {
            newton_iters: 3,
            init_tau: 1.0,
            grad_tol: 1e-8,
            zero_delta_eps: 1e-12,
            bisection_max_iters: 60,
            warm_start: false,
        }
    }
}

impl TauSolverConfig {
    pub fn with_iters(newton_iters: usize) -> Self {
        Self {
            newton_iters,
            ..Self::default()
        }
    }

    pub fn validate(&self, loss: &LossConfig) -> Result<()> {
        if self.newton_iters == 0 {
            return Err(Error::InvalidConfig(
                "newton_iters must be at least 1".into(),
            ));
        }
        if loss.kind.is_adaptive() && !loss.contains_tau(self.init_tau) {
            return Err(Error::InvalidConfig(format!(
                "init_tau {} outside [{}, {}]",
                self.init_tau,
                loss.tau0,
                loss.upper_bound()
            )));
        }
        if !(self.grad_tol > 0.0) || !(self.zero_delta_eps > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one per-pair solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSolveResult {
    pub tau: f64,
    pub iterations: usize,
    /// Projected gradient within `grad_tol`, or the iterate sits on a bound
    /// with the gradient pointing out of `Ω`.
    pub converged: bool,
    pub final_grad: f64,
    pub used_fallback: bool,
}

/// Clamp onto `Ω`.
pub fn project_tau(tau: f64, cfg: &LossConfig) -> f64 {
    tau.max(cfg.tau0).min(cfg.upper_bound())
}

/// Unprojected Newton iterate `τ - ∇ℓ/∇²ℓ`. `None` when the hessian vanishes
/// or the step is not finite; the caller must fall back.
pub fn newton_step(tau: f64, delta: f64, cfg: &LossConfig) -> Result<Option<f64>> {
    let d = grad_hess_tau(delta, tau, cfg)?;
    if d.gradient == 0.0 {
        return Ok(Some(tau));
    }
    if !(d.hessian > 0.0) {
        return Ok(None);
    }
    let next = tau - d.gradient / d.hessian;
    Ok(next.is_finite().then_some(next))
}

fn projected_grad_small(tau: f64, grad: f64, cfg: &LossConfig, tol: f64) -> bool {
    if grad.abs() <= tol {
        return true;
    }
    (tau <= cfg.tau0 && grad > 0.0) || (tau >= cfg.upper_bound() && grad < 0.0)
}

/// Minimize the adaptive loss over `Ω` for one pair, starting from `init_tau`.
pub fn solve_tau(
    delta: f64,
    loss: &LossConfig,
    solver: &TauSolverConfig,
) -> Result<TauSolveResult> {
    solve_tau_from(delta, solver.init_tau, loss, solver)
}

/// [`solve_tau`] with an explicit starting point (used for warm starts).
pub fn solve_tau_from(
    delta: f64,
    init: f64,
    loss: &LossConfig,
    solver: &TauSolverConfig,
) -> Result<TauSolveResult> {
    if !loss.kind.is_adaptive() {
        return Err(Error::InvalidConfig(format!(
            "tau solve requested for non-adaptive loss {}",
            loss.kind
        )));
    }
    if !delta.is_finite() {
        return Err(Error::NonFinite(format!("reward difference {delta}")));
    }

    // Linear kind at Δ = 0: the loss is ρ₀τ, minimized at the lower bound.
    if loss.kind == LossKind::AdaptiveLinear && delta.abs() < solver.zero_delta_eps {
        return Ok(TauSolveResult {
            tau: loss.tau0,
            iterations: 0,
            converged: true,
            final_grad: loss.rho0,
            used_fallback: true,
        });
    }

    let f = |t: f64| loss.value(delta, t);
    let mut tau = project_tau(init, loss);
    let mut iterations = 0;
    for _ in 0..solver.newton_iters {
        let d = grad_hess_tau(delta, tau, loss)?;
        if projected_grad_small(tau, d.gradient, loss, solver.grad_tol) {
            break;
        }
        iterations += 1;
        let Some(target) = newton_step(tau, delta, loss)? else {
            return bisection_fallback(delta, loss, solver, iterations);
        };
        // Armijo backtracking along the projection arc keeps every iterate a
        // descent step even where the pure Newton step would overshoot.
        let f_tau = f(tau);
        let direction = target - tau;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = project_tau(tau + alpha * direction, loss);
            if f(cand) <= f_tau + 1e-4 * d.gradient * (cand - tau) {
                accepted = Some(cand);
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(next) if next != tau => tau = next,
            // No representable decrease left: already at the minimizer.
            _ => break,
        }
    }

    let d = grad_hess_tau(delta, tau, loss)?;
    Ok(TauSolveResult {
        tau,
        iterations,
        converged: projected_grad_small(tau, d.gradient, loss, solver.grad_tol),
        final_grad: d.gradient,
        used_fallback: false,
    })
}

// Bisection on the (monotone) τ-gradient over Ω, in log space.
fn bisection_fallback(
    delta: f64,
    loss: &LossConfig,
    solver: &TauSolverConfig,
    iterations: usize,
) -> Result<TauSolveResult> {
    let grad = |t: f64| grad_hess_tau(delta, t, loss).map(|d| d.gradient);
    let mut lo = loss.tau0;
    let mut hi = loss.upper_bound();
    if !hi.is_finite() {
        hi = lo.max(1.0);
        while grad(hi)? < 0.0 && hi < 1e12 {
            hi *= 2.0;
        }
    }
    let g_lo = grad(lo)?;
    let g_hi = grad(hi)?;
    let finish = |tau: f64, g: f64, iterations: usize| TauSolveResult {
        tau,
        iterations,
        converged: projected_grad_small(tau, g, loss, solver.grad_tol),
        final_grad: g,
        used_fallback: true,
    };
    if g_lo >= 0.0 {
        return Ok(finish(lo, g_lo, iterations));
    }
    if g_hi <= 0.0 {
        return Ok(finish(hi, g_hi, iterations));
    }
    if !(g_lo < 0.0 && g_hi > 0.0) {
        // No usable bracket: keep the better endpoint.
        let tau = if loss.value(delta, lo) <= loss.value(delta, hi) {
            lo
        } else {
            hi
        };
        return Ok(finish(tau, grad(tau)?, iterations));
    }
    let mut mid = (lo * hi).sqrt();
    let mut g_mid = grad(mid)?;
    for _ in 0..solver.bisection_max_iters {
        if g_mid.abs() <= solver.grad_tol {
            break;
        }
        if g_mid < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        mid = (lo * hi).sqrt();
        g_mid = grad(mid)?;
    }
    Ok(TauSolveResult {
        tau: mid,
        iterations: iterations + solver.bisection_max_iters,
        converged: projected_grad_small(mid, g_mid, loss, solver.grad_tol) || hi / lo - 1.0 < 1e-12,
        final_grad: g_mid,
        used_fallback: true,
    })
}

/// Minimize a unimodal function on `[lo, hi]` by a uniform scan at `step`
/// followed by golden-section refinement around the best grid point.
pub fn scan_minimize(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
    assert!(step > 0.0 && hi >= lo);
    let n = ((hi - lo) / step).ceil() as usize;
    let point = |i: usize| if i >= n { hi } else { lo + i as f64 * step };
    let mut best = 0;
    let mut best_val = f(lo);
    for i in 1..=n {
        let v = f(point(i));
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let a = point(best.saturating_sub(1));
    let b = point((best + 1).min(n));
    let x = golden_section(&f, a, b, 1e-13);
    let mut out = point(best);
    for cand in [x, a, b] {
        if f(cand) < f(out) {
            out = cand;
        }
    }
    out
}

/// Golden-section search for the minimizer of a unimodal `f` on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() <= tol * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Brute-force minimizer of the adaptive loss over `[τ₀, min(τ_max, hi)]`.
/// Independent of the Newton path; used as a test oracle.
pub fn grid_search_tau(delta: f64, loss: &LossConfig, resolution: f64, hi: f64) -> Result<f64> {
    if !loss.kind.is_adaptive() {
        return Err(Error::InvalidConfig(
            "grid search needs an adaptive loss".into(),
        ));
    }
    if !(resolution > 0.0) {
        return Err(Error::InvalidInput("resolution must be positive".into()));
    }
    let upper = loss.upper_bound().min(hi);
    if upper < loss.tau0 {
        return Err(Error::InvalidInput(format!(
            "scan upper limit {upper} below tau0 {}",
            loss.tau0
        )));
    }
    Ok(scan_minimize(
        |t| loss.value(delta, t),
        loss.tau0,
        upper,
        resolution,
    ))
}

/// Binary entropy `-p ln p - (1 - p) ln(1 - p)` in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// A minimizer `(τ*, Δ*)` of an expected adaptive loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationOptimum {
    pub tau: f64,
    pub delta: f64,
}

/// Population optimum of the expected linear-kind loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauStar {
    Unique(PopulationOptimum),
    /// `H(p*) + ρ = 0`: the objective is flat in `τ`; every `τ ∈ Ω` with
    /// `Δ = τ · logit` is optimal.
    Degenerate {
        logit: f64,
    },
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "preference probability must lie in (0, 1), got {p}"
        )))
    }
}

/// Closed-form optimum of the expected linear-kind loss when the winner is
/// preferred with probability `p_star`. After profiling out `Δ = τ σ⁻¹(p*)`
/// the objective is `(H(p*) + ρ) τ`, so `τ*` sits on a bound.
pub fn tau_star_linear(p_star: f64, cfg: &LossConfig) -> Result<TauStar> {
    check_probability(p_star)?;
    let slope = binary_entropy(p_star) + cfg.rho();
    let z = logit(p_star);
    if slope.abs() <= 1e-12 {
        return Ok(TauStar::Degenerate { logit: z });
    }
    let tau = if slope > 0.0 { cfg.tau0 } else { cfg.tau_max };
    Ok(TauStar::Unique(PopulationOptimum {
        tau,
        delta: tau * z,
    }))
}

/// Closed-form optimum of the expected quadratic-kind loss:
/// `τ* = max(τ₀, (ln 2 - H(p*)) / (2ρ₀))`, finite without an upper bound.
pub fn tau_star_quadratic(p_star: f64, cfg: &LossConfig) -> Result<PopulationOptimum> {
    check_probability(p_star)?;
    let tau = cfg
        .tau0
        .max((LN_2 - binary_entropy(p_star)) / (2.0 * cfg.rho0));
    Ok(PopulationOptimum {
        tau,
        delta: tau * logit(p_star),
    })
}

/// Expected adaptive loss for a pair whose first element wins with probability `p_star`.
pub fn expected_loss(delta: f64, tau: f64, p_star: f64, cfg: &LossConfig) -> f64 {
    p_star * cfg.value(delta, tau) + (1.0 - p_star) * cfg.value(-delta, tau)
}

/// The per-pair worst case over label distributions in a KL ball around uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroPrimalProblem {
    /// Directed loss when the first segment is the labelled winner.
    pub d1: f64,
    pub d2: f64,
    pub tau0: f64,
    pub rho0: f64,
}

/// `KL(p, uniform)` for the two-point distribution `(p, 1 - p)`.
pub fn kl_to_uniform(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { q * (2.0 * q).ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// `max_p p d₁ + (1-p) d₂ - τ₀ KL(p, ½)` subject to `KL(p, ½) ≤ ρ₀`, by brute force.
///
/// The feasible set is an interval symmetric about `½`; its edges are found by
/// bisection. The objective is scanned over the feasible interval, rescanned at
/// a resolution of `1e-6` around the best point and polished by golden section.
pub fn dro_primal_value(prob: &DroPrimalProblem) -> Result<f64> {
    if !(prob.rho0 > 0.0) || !(prob.tau0 > 0.0) {
        return Err(Error::InvalidInput("tau0 and rho0 must be positive".into()));
    }
    let objective = |p: f64| p * prob.d1 + (1.0 - p) * prob.d2 - prob.tau0 * kl_to_uniform(p);

    // Left edge a of the feasible interval [a, 1 - a]; KL is decreasing on [0, ½].
    let edge = if prob.rho0 >= LN_2 {
        0.0
    } else {
        let (mut lo, mut hi) = (0.0f64, 0.5f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if kl_to_uniform(mid) > prob.rho0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let (a, b) = (edge, 1.0 - edge);
    let neg = |p: f64| -objective(p);

    let coarse = scan_minimize(neg, a, b, 1e-4);
    let fine_lo = (coarse - 1e-4).max(a);
    let fine_hi = (coarse + 1e-4).min(b);
    let fine = scan_minimize(neg, fine_lo, fine_hi, 1e-6);
    let best = [fine, coarse, a, b]
        .into_iter()
        .map(objective)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best)
}

/// Primal value, dual value and their gap for one reward difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualCheck {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

pub const DUALITY_TOLERANCE: f64 = 1e-5;

/// Compare the worst-case (primal) value with `min_{τ ≥ τ₀}` of the linear
/// adaptive loss minus `τ₀ρ₀`. Both sides are computed by brute force.
pub fn dual_check(delta: f64, cfg: &LossConfig) -> Result<DualCheck> {
    if cfg.kind != LossKind::AdaptiveLinear {
        return Err(Error::InvalidConfig(
            "dual check applies to the linear kind".into(),
        ));
    }
    let primal = dro_primal_value(&DroPrimalProblem {
        d1: -delta,
        d2: 0.0,
        tau0: cfg.tau0,
        rho0: cfg.rho0,
    })?;
    // Past the unconstrained minimizer the objective increases with slope ρ₀,
    // so this upper limit loses nothing.
    let tau_hi = 10f64.max(10.0 * delta.abs());
    let f = |t: f64| cfg.value(delta, t);
    let tau = scan_minimize(f, cfg.tau0, tau_hi, 1e-3);
    let dual = f(tau) - cfg.tau0 * cfg.rho0;
    Ok(DualCheck {
        primal,
        dual,
        gap: (primal - dual).abs(),
    })
}

/// Loss after minimizing over `τ ∈ Ω` at fixed `Δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveLoss {
    pub value: f64,
    pub tau: f64,
    /// Envelope derivative `σ(Δ/τ*) - 1`.
    pub envelope_grad: f64,
}

pub fn effective_loss(delta: f64, cfg: &LossConfig) -> Result<EffectiveLoss> {
    let solver = TauSolverConfig::with_iters(100);
    let tau = solve_tau(delta, cfg, &solver)?.tau;
    Ok(EffectiveLoss {
        value: cfg.value(delta, tau),
        tau,
        envelope_grad: crate::loss::grad_delta(delta, tau),
    })
}
