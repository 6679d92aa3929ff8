//! Oracle comparisons for the analytic results: duality of the per-pair
//! robust problem, the population optima of both adaptive kinds, the Newton
//! solver, analytic gradients and the DPO reparameterization identity.
//!
//! Every oracle here is brute force (grids, golden section, finite
//! differences) and shares no code path with the quantity it checks beyond
//! the loss value itself.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMode, PreferencePair, Segment};
use crate::dpo::{objective, reparam_check, DpoConfig, DpoPair, TabularPolicy};
use crate::error::{Error, Result};
use crate::loss::{grad_hess_tau, LossConfig, LossKind};
use crate::model::{Architecture, RewardModel};
use crate::tau::{
    binary_entropy, dual_check, expected_loss, grid_search_tau, scan_minimize, solve_tau,
    tau_star_linear, tau_star_quadratic, TauSolverConfig, TauStar, DUALITY_TOLERANCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Duality,
    Prop1,
    Prop2,
    Newton,
    Gradcheck,
    Reparam,
    All,
}

impl Suite {
    pub const EACH: [Suite; 6] = [
        Suite::Duality,
        Suite::Prop1,
        Suite::Prop2,
        Suite::Newton,
        Suite::Gradcheck,
        Suite::Reparam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Duality => "duality",
            Suite::Prop1 => "prop1",
            Suite::Prop2 => "prop2",
            Suite::Newton => "newton",
            Suite::Gradcheck => "gradcheck",
            Suite::Reparam => "reparam",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown suite {s:?}")))
    }
}

/// A statistic compared against an upper tolerance. Pass/fail counts are
/// reported as a violation count with tolerance 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(suite: Suite, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<CheckResult>,
    pub wall_clock_secs: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs one suite, or every suite for [`Suite::All`].
pub fn run(suite: Suite, seed: u64) -> Result<Vec<SuiteReport>> {
    let suites: Vec<Suite> = match suite {
        Suite::All => Suite::EACH.to_vec(),
        s => vec![s],
    };
    suites
        .into_iter()
        .map(|s| {
            let started = Instant::now();
            let checks = match s {
                Suite::Duality => duality(seed)?,
                Suite::Prop1 => prop1()?,
                Suite::Prop2 => prop2()?,
                Suite::Newton => newton(seed)?,
                Suite::Gradcheck => gradcheck(seed)?,
                Suite::Reparam => reparam(seed)?,
                Suite::All => unreachable!(),
            };
            Ok(SuiteReport {
                suite: s,
                checks,
                wall_clock_secs: started.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

/// Brute-force primal against brute-force dual at the 41 integers in
/// `[-20, 20]` for ten random `(τ₀, ρ₀) ∈ [0.05, 1]²`.
pub fn duality(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs: Vec<LossConfig> = (0..10)
        .map(|_| {
            let tau0 = rng.random_range(0.05..=1.0);
            let rho0 = rng.random_range(0.05..=1.0);
            LossConfig::adaptive_linear(tau0, f64::INFINITY, rho0)
        })
        .collect();
    let points: Vec<(LossConfig, f64)> = configs
        .iter()
        .flat_map(|c| (-20..=20).map(move |d| (*c, d as f64)))
        .collect();
    let gaps: Vec<f64> = points
        .par_iter()
        .map(|(c, d)| dual_check(*d, c).map(|r| r.gap))
        .collect::<Result<_>>()?;
    Ok(vec![CheckResult::new(
        Suite::Duality,
        format!("max |primal - dual| over {} points", gaps.len()),
        max_of(gaps),
        DUALITY_TOLERANCE,
    )])
}

pub const PROP_TAU_TOLERANCE: f64 = 1e-3;
pub const PROP_DELTA_TOLERANCE: f64 = 1e-2;
const ORACLE_TAU_STEP: f64 = 1e-3;
const ORACLE_DELTA_STEP: f64 = 0.1;
const ORACLE_DELTA_RANGE: f64 = 25.0;

/// `(τ, Δ)` minimizing the expected loss on a `τ` grid over `[lo, hi]`, with
/// `Δ` minimized by brute force at every grid `τ`.
pub fn population_grid_oracle(p_star: f64, cfg: &LossConfig, lo: f64, hi: f64) -> (f64, f64) {
    let best_delta = |tau: f64| {
        scan_minimize(
            |d| expected_loss(d, tau, p_star, cfg),
            -ORACLE_DELTA_RANGE,
            ORACLE_DELTA_RANGE,
            ORACLE_DELTA_STEP,
        )
    };
    let profile = |tau: f64| expected_loss(best_delta(tau), tau, p_star, cfg);
    let tau = scan_minimize(profile, lo, hi, ORACLE_TAU_STEP);
    (tau, best_delta(tau))
}

/// 50 evenly spaced probabilities in `[0.02, 0.98]`.
pub fn prop_probabilities() -> Vec<f64> {
    (0..50).map(|i| 0.02 + 0.96 * i as f64 / 49.0).collect()
}

/// The `p < ½` where `H(p) = ln 2 − ρ₀`, by bisection.
pub fn switch_point(rho0: f64) -> Option<f64> {
    let target = LN_2 - rho0;
    if !(target > 0.0) {
        return None;
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binary_entropy(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

pub fn prop1() -> Result<Vec<CheckResult>> {
    let cfg = LossConfig::adaptive_linear(0.1, 5.0, 0.1);
    let ps = prop_probabilities();
    let rows: Vec<(TauStar, (f64, f64))> = ps
        .par_iter()
        .map(|&p| {
            let closed = tau_star_linear(p, &cfg)?;
            Ok((
                closed,
                population_grid_oracle(p, &cfg, cfg.tau0, cfg.tau_max),
            ))
        })
        .collect::<Result<_>>()?;
    let (mut tau_err, mut delta_err, mut degenerate) = (0.0f64, 0.0f64, 0.0);
    for (closed, (tau, delta)) in &rows {
        match closed {
            TauStar::Unique(opt) => {
                tau_err = tau_err.max((opt.tau - tau).abs());
                delta_err = delta_err.max((opt.delta - delta).abs());
            }
            TauStar::Degenerate { .. } => degenerate += 1.0,
        }
    }
    // The oracle's τ* should jump between the bounds exactly where the
    // closed form's entropy condition flips.
    let mid = 0.5 * (cfg.tau0 + cfg.tau_max);
    let at_max: Vec<bool> = rows.iter().map(|(_, (t, _))| *t > mid).collect();
    let jumps: Vec<usize> = (1..ps.len())
        .filter(|&i| at_max[i] != at_max[i - 1])
        .collect();
    let mut misses = 0.0;
    match switch_point(cfg.rho0) {
        Some(ps_low) => {
            let ps_high = 1.0 - ps_low;
            if jumps.len() != 2 {
                misses += 1.0;
            }
            for target in [ps_low, ps_high] {
                if !jumps.iter().any(|&i| ps[i - 1] < target && target < ps[i]) {
                    misses += 1.0;
                }
            }
        }
        None => misses += jumps.len() as f64,
    }
    Ok(vec![
        CheckResult::new(
            Suite::Prop1,
            "max |tau* - oracle|",
            tau_err,
            PROP_TAU_TOLERANCE,
        ),
        CheckResult::new(
            Suite::Prop1,
            "max |delta* - oracle|",
            delta_err,
            PROP_DELTA_TOLERANCE,
        ),
        CheckResult::new(Suite::Prop1, "switch points not bracketed", misses, 0.0),
        CheckResult::new(
            Suite::Prop1,
            "degenerate probabilities in sample",
            degenerate,
            0.0,
        ),
    ])
}

pub const PROP2_SPOT_P: f64 = 0.95;
pub const PROP2_SPOT_TAU: f64 = 2.4732;

pub fn prop2() -> Result<Vec<CheckResult>> {
    let cfg = LossConfig::adaptive_quadratic(0.1, 0.1);
    // The regularizer keeps τ* below ln 2 / (2ρ₀).
    let hi = LN_2 / (2.0 * cfg.rho0) + 1.0;
    let mut ps = prop_probabilities();
    ps.push(PROP2_SPOT_P);
    let rows: Vec<(f64, f64, f64, f64)> = ps
        .par_iter()
        .map(|&p| {
            let closed = tau_star_quadratic(p, &cfg)?;
            let (tau, delta) = population_grid_oracle(p, &cfg, cfg.tau0, hi);
            Ok((closed.tau, closed.delta, tau, delta))
        })
        .collect::<Result<_>>()?;
    let tau_err = max_of(rows.iter().map(|r| (r.0 - r.2).abs()));
    let delta_err = max_of(rows.iter().map(|r| (r.1 - r.3).abs()));
    let spot = rows.last().expect("spot row");
    Ok(vec![
        CheckResult::new(
            Suite::Prop2,
            "max |tau* - oracle|",
            tau_err,
            PROP_TAU_TOLERANCE,
        ),
        CheckResult::new(
            Suite::Prop2,
            "max |delta* - oracle|",
            delta_err,
            PROP_DELTA_TOLERANCE,
        ),
        CheckResult::new(
            Suite::Prop2,
            "closed-form |tau*(0.95) - 2.4732|",
            (spot.0 - PROP2_SPOT_TAU).abs(),
            PROP_TAU_TOLERANCE,
        ),
        CheckResult::new(
            Suite::Prop2,
            "oracle |tau*(0.95) - 2.4732|",
            (spot.2 - PROP2_SPOT_TAU).abs(),
            PROP_TAU_TOLERANCE,
        ),
    ])
}

pub const NEWTON_DRAWS: usize = 1000;
pub const NEWTON_TOLERANCE: f64 = 1e-3;
const NEWTON_GRID_RESOLUTION: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
struct NewtonDraw {
    delta: f64,
    loss: LossConfig,
}

fn newton_draws(seed: u64) -> Vec<NewtonDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..NEWTON_DRAWS)
        .map(|_| {
            let tau0 = rng.random_range(0.05..=1.0);
            let rho0 = rng.random_range(0.05..=1.0);
            let loss = if rng.random::<bool>() {
                LossConfig::adaptive_linear(tau0, rng.random_range(1.0..=10.0), rho0)
            } else {
                LossConfig::adaptive_quadratic(tau0, rho0)
            };
            let delta = if rng.random::<f64>() < 0.02 {
                0.0
            } else {
                rng.random_range(-20.0..=20.0)
            };
            NewtonDraw { delta, loss }
        })
        .collect()
}

pub fn newton(seed: u64) -> Result<Vec<CheckResult>> {
    let draws = newton_draws(seed);
    let rows: Vec<(f64, f64, bool, f64)> = draws
        .par_iter()
        .map(|d| {
            let hi = match d.loss.kind {
                LossKind::AdaptiveQuadratic => d.loss.tau0.max(LN_2 / (2.0 * d.loss.rho0)) + 0.5,
                _ => d.loss.tau_max,
            };
            let oracle = grid_search_tau(d.delta, &d.loss, NEWTON_GRID_RESOLUTION, hi)?;
            let k10 = solve_tau(d.delta, &d.loss, &TauSolverConfig::with_iters(10))?;
            let k3 = solve_tau(d.delta, &d.loss, &TauSolverConfig::with_iters(3))?;
            let fallback = k10.used_fallback || k3.used_fallback;
            Ok((
                (k10.tau - oracle).abs(),
                (k3.tau - oracle).abs(),
                fallback,
                d.delta,
            ))
        })
        .collect::<Result<_>>()?;
    let max_k10 = max_of(rows.iter().map(|r| r.0));
    let mut k3: Vec<f64> = rows.iter().map(|r| r.1).collect();
    k3.sort_by(f64::total_cmp);
    let median_k3 = 0.5 * (k3[(k3.len() - 1) / 2] + k3[k3.len() / 2]);
    let stray_fallbacks = rows.iter().filter(|r| r.2 && r.3.abs() >= 1e-12).count();
    Ok(vec![
        CheckResult::new(
            Suite::Newton,
            "max |tau(K=10) - grid|",
            max_k10,
            NEWTON_TOLERANCE,
        ),
        CheckResult::new(
            Suite::Newton,
            "median |tau(K=3) - grid|",
            median_k3,
            NEWTON_TOLERANCE,
        ),
        CheckResult::new(
            Suite::Newton,
            "fallbacks with |delta| >= 1e-12",
            stray_fallbacks as f64,
            0.0,
        ),
    ])
}

pub const GRADCHECK_PROBES: usize = 1000;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const GRADCHECK_DEEP_TOLERANCE: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn random_loss(rng: &mut ChaCha8Rng, adaptive_only: bool) -> LossConfig {
    let tau0 = rng.random_range(0.05..=1.0);
    let rho0 = rng.random_range(0.05..=1.0);
    match rng.random_range(0..if adaptive_only { 2 } else { 4 }) {
        0 => LossConfig::adaptive_linear(tau0, rng.random_range(1.0..=10.0), rho0),
        1 => LossConfig::adaptive_quadratic(tau0, rho0),
        2 => LossConfig::cross_entropy(),
        _ => LossConfig::hinge(rng.random_range(0.5..=2.0)),
    }
}

fn random_tau(rng: &mut ChaCha8Rng, loss: &LossConfig) -> f64 {
    match loss.kind {
        LossKind::AdaptiveLinear => rng.random_range(loss.tau0..=loss.tau_max),
        LossKind::AdaptiveQuadratic => rng.random_range(loss.tau0..=loss.tau0 + 5.0),
        _ => 1.0,
    }
}

fn random_segment(rng: &mut ChaCha8Rng, dim: usize, len: usize) -> Segment {
    Segment {
        steps: (0..len)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect(),
    }
}

fn model_probe(rng: &mut ChaCha8Rng, architecture: Architecture) -> Result<f64> {
    let dim = 4;
    let len = rng.random_range(1..=3);
    let gamma = rng.random_range(0.5..=1.0);
    let mut model = RewardModel::init(architecture, dim, rng.random());
    let pair = PreferencePair {
        winner: random_segment(rng, dim, len),
        loser: random_segment(rng, dim, len),
        strength: 1.0,
        label_mode: LabelMode::Deterministic,
        p_star: None,
    };
    let loss = random_loss(rng, false);
    let delta = model.pair_delta(&pair, gamma)?.value();
    let tau = random_tau(rng, &loss);
    let grad = model.backward(&pair, gamma, loss.grad_delta(delta, tau))?;
    let k = rng.random_range(0..model.param_count());
    let x = model.params[k];
    let h = 1e-5 * x.abs().max(1.0);
    let mut at = |v: f64| -> Result<f64> {
        model.params[k] = v;
        Ok(loss.value(model.pair_delta(&pair, gamma)?.value(), tau))
    };
    let numeric = (at(x + h)? - at(x - h)?) / (2.0 * h);
    Ok(relative_error(grad[k], numeric))
}

fn dpo_probe(rng: &mut ChaCha8Rng, adaptive: bool) -> Result<f64> {
    let (n_s, n_a) = (rng.random_range(1..=4), rng.random_range(2..=5));
    let reference = TabularPolicy::random(n_s, n_a, 1.0, rng.random());
    let mut policy = TabularPolicy::random(n_s, n_a, 1.0, rng.random());
    let pairs: Vec<DpoPair> = (0..6)
        .map(|_| {
            let a_w = rng.random_range(0..n_a);
            let a_l = (a_w + rng.random_range(1..n_a)) % n_a;
            DpoPair {
                s: rng.random_range(0..n_s),
                a_w,
                a_l,
            }
        })
        .collect();
    let cfg = DpoConfig {
        beta: rng.random_range(0.1..=2.0),
        loss: if adaptive {
            random_loss(rng, true)
        } else {
            LossConfig::cross_entropy()
        },
        ..DpoConfig::default()
    };
    let o = objective(&policy, &reference, &pairs, &cfg, None)?;
    let k = rng.random_range(0..policy.logits.len());
    let x = policy.logits[k];
    let h = 1e-5;
    let mut at = |v: f64| -> Result<f64> {
        policy.logits[k] = v;
        Ok(objective(&policy, &reference, &pairs, &cfg, Some(&o.taus))?.loss)
    };
    let numeric = (at(x + h)? - at(x - h)?) / (2.0 * h);
    Ok(relative_error(o.grad[k], numeric))
}

/// `∂ℓ/∂Δ`, `∂ℓ/∂τ`, `∂²ℓ/∂τ²`, reward-model backpropagation and both DPO
/// objectives against central differences, one random coordinate per probe.
pub fn gradcheck(seed: u64) -> Result<Vec<CheckResult>> {
    type Probe = fn(&mut ChaCha8Rng) -> Result<f64>;
    let probes: [(&str, f64, Probe); 7] = [
        ("dl/ddelta", GRADCHECK_TOLERANCE, |rng| {
            let loss = random_loss(rng, false);
            let tau = random_tau(rng, &loss);
            let mut delta: f64 = rng.random_range(-8.0..=8.0);
            if loss.kind == LossKind::Hinge && (delta - loss.hinge_margin).abs() < 1e-2 {
                delta += 0.1;
            }
            let numeric = central_difference(|d| loss.value(d, tau), delta, 1e-5);
            Ok(relative_error(loss.grad_delta(delta, tau), numeric))
        }),
        ("dl/dtau", GRADCHECK_TOLERANCE, |rng| {
            let loss = random_loss(rng, true);
            let tau = random_tau(rng, &loss);
            let delta = rng.random_range(-8.0..=8.0);
            let d = grad_hess_tau(delta, tau, &loss)?;
            let h = 1e-5 * tau;
            let numeric = central_difference(|t| loss.value(delta, t), tau, h);
            Ok(relative_error(d.gradient, numeric))
        }),
        ("d2l/dtau2", GRADCHECK_TOLERANCE, |rng| {
            let loss = random_loss(rng, true);
            let tau = random_tau(rng, &loss);
            let delta = rng.random_range(-8.0..=8.0);
            let d = grad_hess_tau(delta, tau, &loss)?;
            let h = 1e-5 * tau;
            let numeric = central_difference(
                |t| {
                    grad_hess_tau(delta, t, &loss)
                        .map(|x| x.gradient)
                        .unwrap_or(f64::NAN)
                },
                tau,
                h,
            );
            Ok(relative_error(d.hessian, numeric))
        }),
        ("backprop linear", GRADCHECK_TOLERANCE, |rng| {
            model_probe(rng, Architecture::Linear)
        }),
        ("backprop mlp2", GRADCHECK_DEEP_TOLERANCE, |rng| {
            model_probe(rng, Architecture::Mlp2 { hidden: 8 })
        }),
        ("dpo logits", GRADCHECK_TOLERANCE, |rng| {
            dpo_probe(rng, false)
        }),
        ("ada-dpo logits", GRADCHECK_TOLERANCE, |rng| {
            dpo_probe(rng, true)
        }),
    ];
    probes
        .iter()
        .enumerate()
        .map(|(i, (name, tol, probe))| {
            let errors: Vec<f64> = (0..GRADCHECK_PROBES)
                .into_par_iter()
                .map(|j| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32) ^ j as u64);
                    probe(&mut rng)
                })
                .collect::<Result<_>>()?;
            let worst = max_of(errors.iter().copied());
            if worst.is_nan() || errors.iter().any(|e| e.is_nan()) {
                return Err(Error::NonFinite(format!("gradient check {name}")));
            }
            Ok(CheckResult::new(
                Suite::Gradcheck,
                format!("max rel err {name} ({GRADCHECK_PROBES} probes)"),
                worst,
                *tol,
            ))
        })
        .collect()
}

pub const REPARAM_INSTANCES: usize = 100;
pub const REPARAM_TOLERANCE: f64 = 1e-9;

/// Random `(r, π_ref, β)` with up to 20 states and actions.
pub fn reparam(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..REPARAM_INSTANCES {
        let n_s = rng.random_range(1..=20);
        let n_a = rng.random_range(2..=20);
        let reference = TabularPolicy::random(n_s, n_a, rng.random_range(0.1..=3.0), rng.random());
        let scale = rng.random_range(0.1..=5.0);
        let reward: Vec<f64> = (0..n_s * n_a)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let beta = 10f64.powf(rng.random_range(-1.0..=1.0));
        worst = worst.max(reparam_check(&reward, &reference, beta)?);
    }
    Ok(vec![CheckResult::new(
        Suite::Reparam,
        format!("max identity error over {REPARAM_INSTANCES} instances"),
        worst,
        REPARAM_TOLERANCE,
    )])
}
