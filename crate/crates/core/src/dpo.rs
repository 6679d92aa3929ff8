//! Tabular direct preference optimization over finite state and action sets.
//!
//! A policy is a `n_states × n_actions` table of logits; `π(·|s)` is the
//! softmax of row `s`. The implicit reward difference of a pair is the
//! difference of log-probability ratios against a fixed reference policy.
//! Plain DPO scales it by `β`; the adaptive objective solves a per-pair `τ`
//! on the unscaled difference, with `β` absorbed into `τ₀`, `τ_max` and `ρ₀`.

use std::io::{BufRead, Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabelMode;
use crate::error::{Error, Result};
use crate::loss::{sigmoid, LossConfig};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tau::{solve_tau_from, TauSolverConfig};
use crate::train::{bin_statistics, StrengthBinStats, STRENGTH_BINS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major, one row per state.
    pub logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        let p = Self {
            n_states,
            n_actions,
            logits,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    /// Logits drawn from `N(0, scale²)`.
    pub fn random(n_states: usize, n_actions: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..n_states * n_actions)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            n_states,
            n_actions,
            logits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions < 2 {
            return Err(Error::InvalidInput(
                "tabular policy needs at least one state and two actions".into(),
            ));
        }
        if self.logits.len() != self.n_states * self.n_actions {
            return Err(Error::DimensionMismatch {
                expected: self.n_states * self.n_actions,
                got: self.logits.len(),
            });
        }
        if self.logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(())
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.logits[s * self.n_actions..(s + 1) * self.n_actions]
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::InvalidInput(format!(
                "state {s} out of range for {} states",
                self.n_states
            )));
        }
        Ok(())
    }

    /// `ln π(·|s)`, via a max-shifted log-sum-exp.
    pub fn log_probs(&self, s: usize) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let lse = log_sum_exp(self.row(s));
        Ok(self.row(s).iter().map(|x| x - lse).collect())
    }

    pub fn log_prob(&self, s: usize, a: usize) -> Result<f64> {
        self.check_state(s)?;
        if a >= self.n_actions {
            return Err(Error::InvalidInput(format!(
                "action {a} out of range for {} actions",
                self.n_actions
            )));
        }
        Ok(self.row(s)[a] - log_sum_exp(self.row(s)))
    }

    pub fn probs(&self, s: usize) -> Result<Vec<f64>> {
        Ok(self.log_probs(s)?.into_iter().map(f64::exp).collect())
    }

    /// Largest deviation of a row's probability sum from one.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.n_states)
            .map(|s| {
                let sum: f64 = self.probs(s).map(|p| p.iter().sum()).unwrap_or(f64::NAN);
                (sum - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::DimensionMismatch {
                expected: self.n_states * self.n_actions,
                got: other.n_states * other.n_actions,
            });
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let ckpt = PolicyCheckpoint {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            policy: self.clone(),
        };
        serde_json::to_writer_pretty(&mut out, &ckpt)?;
        writeln!(out)?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let ckpt: PolicyCheckpoint = serde_json::from_reader(input)?;
        if ckpt.format != POLICY_FORMAT || ckpt.version != POLICY_VERSION {
            return Err(Error::Format(format!(
                "expected {POLICY_FORMAT} v{POLICY_VERSION}, found {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.policy.validate()?;
        Ok(ckpt.policy)
    }
}

pub const POLICY_FORMAT: &str = "adapref-tabular-policy";
pub const POLICY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub policy: TabularPolicy,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoPair {
    pub s: usize,
    pub a_w: usize,
    pub a_l: usize,
}

impl DpoPair {
    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.s >= n_states || self.a_w >= n_actions || self.a_l >= n_actions {
            return Err(Error::InvalidInput(format!(
                "pair {self:?} out of range for {n_states}x{n_actions}"
            )));
        }
        if self.a_w == self.a_l {
            return Err(Error::InvalidInput(format!(
                "pair {self:?} compares an action with itself"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    /// Scale of the log-ratio difference for the non-adaptive kinds. The
    /// adaptive kinds work on the unscaled difference.
    pub beta: f64,
    pub loss: LossConfig,
    #[serde(default)]
    pub solver: TauSolverConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            loss: LossConfig::cross_entropy(),
            solver: TauSolverConfig::default(),
            optimizer: OptimizerConfig::adam(1e-2),
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        self.loss.validate()?;
        self.solver.validate(&self.loss)?;
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn delta_scale(&self) -> f64 {
        if self.loss.kind.is_adaptive() {
            1.0
        } else {
            self.beta
        }
    }
}

/// `ln π(a|s) − ln π_ref(a|s)`.
pub fn log_ratio(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    s: usize,
    a: usize,
) -> Result<f64> {
    policy.same_shape(reference)?;
    Ok(policy.log_prob(s, a)? - reference.log_prob(s, a)?)
}

fn check_pairs(policy: &TabularPolicy, reference: &TabularPolicy, pairs: &[DpoPair]) -> Result<()> {
    policy.same_shape(reference)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no preference pairs".into()));
    }
    for p in pairs {
        p.validate(policy.n_states, policy.n_actions)?;
    }
    Ok(())
}

fn ratio_gap(policy: &TabularPolicy, reference: &TabularPolicy, p: &DpoPair) -> Result<f64> {
    Ok(log_ratio(policy, reference, p.s, p.a_w)? - log_ratio(policy, reference, p.s, p.a_l)?)
}

#[derive(Debug, Clone, Copy)]
struct PairTerm {
    loss: f64,
    tau: f64,
    /// `∂ℓ/∂logit(s, a_w)`; the loser coordinate gets the negation.
    coeff: f64,
}

/// One pair's loss and logit gradient. `tau` is solved unless given.
fn pair_term(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pair: &DpoPair,
    cfg: &DpoConfig,
    fixed_tau: Option<f64>,
) -> Result<PairTerm> {
    let scale = cfg.delta_scale();
    let delta = scale * ratio_gap(policy, reference, pair)?;
    let tau = match fixed_tau {
        Some(t) => t,
        None if cfg.loss.kind.is_adaptive() => {
            solve_tau_from(delta, cfg.solver.init_tau, &cfg.loss, &cfg.solver)?.tau
        }
        None => 1.0,
    };
    let loss = cfg.loss.value(delta, tau);
    let coeff = scale * cfg.loss.grad_delta(delta, tau);
    Ok(PairTerm { loss, tau, coeff })
}

fn accumulate(grad: &mut [f64], n_actions: usize, pair: &DpoPair, coeff: f64) {
    grad[pair.s * n_actions + pair.a_w] += coeff;
    grad[pair.s * n_actions + pair.a_l] -= coeff;
}

/// Mean DPO loss `−ln σ(β·(ratio(a_w) − ratio(a_l)))`.
pub fn dpo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[DpoPair],
    beta: f64,
) -> Result<f64> {
    Ok(dpo_loss_grad(policy, reference, pairs, beta)?.0)
}

/// Mean DPO loss and its gradient in the policy logits.
pub fn dpo_loss_grad(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[DpoPair],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let cfg = DpoConfig {
        beta,
        ..DpoConfig::default()
    };
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be positive, got {beta}"
        )));
    }
    objective(policy, reference, pairs, &cfg, None).map(|o| (o.loss, o.grad))
}

/// Value, gradient and per-pair `τ` of a DPO-family objective.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoObjective {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub taus: Vec<f64>,
}

/// Mean loss over `pairs` under `cfg.loss`. With `fixed_taus` the scaling
/// factors are held at the given values; otherwise adaptive kinds solve them.
pub fn objective(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[DpoPair],
    cfg: &DpoConfig,
    fixed_taus: Option<&[f64]>,
) -> Result<DpoObjective> {
    check_pairs(policy, reference, pairs)?;
    if let Some(t) = fixed_taus {
        if t.len() != pairs.len() {
            return Err(Error::DimensionMismatch {
                expected: pairs.len(),
                got: t.len(),
            });
        }
    }
    let terms: Vec<PairTerm> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| pair_term(policy, reference, p, cfg, fixed_taus.map(|t| t[i])))
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    let mut grad = vec![0.0; policy.logits.len()];
    let mut loss = 0.0;
    for (p, t) in pairs.iter().zip(&terms) {
        loss += t.loss;
        accumulate(&mut grad, policy.n_actions, p, t.coeff);
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(DpoObjective {
        loss: loss / n,
        grad,
        taus: terms.iter().map(|t| t.tau).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaDpoLoss {
    pub loss: f64,
    pub taus: Vec<f64>,
}

/// Mean adaptive loss on the unscaled log-ratio differences, with each `τ`
/// solved per pair.
pub fn ada_dpo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[DpoPair],
    cfg: &DpoConfig,
) -> Result<AdaDpoLoss> {
    if !cfg.loss.kind.is_adaptive() {
        return Err(Error::InvalidConfig(format!(
            "adaptive DPO needs an adaptive loss, got {}",
            cfg.loss.kind
        )));
    }
    cfg.loss.validate()?;
    let o = objective(policy, reference, pairs, cfg, None)?;
    Ok(AdaDpoLoss {
        loss: o.loss,
        taus: o.taus,
    })
}

/// Builds `π_r ∝ π_ref·exp(r/β)` and returns the largest deviation of
/// `β·ln(π_r/π_ref) + β·ln Z(s)` from `r(s, a)`.
pub fn reparam_check(reward: &[f64], reference: &TabularPolicy, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "beta must be positive, got {beta}"
        )));
    }
    reference.validate()?;
    if reward.len() != reference.logits.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.logits.len(),
            got: reward.len(),
        });
    }
    let n_a = reference.n_actions;
    let mut logits = Vec::with_capacity(reward.len());
    let mut log_z = Vec::with_capacity(reference.n_states);
    for s in 0..reference.n_states {
        let ref_lp = reference.log_probs(s)?;
        let r = &reward[s * n_a..(s + 1) * n_a];
        // Z(s) = Σ π_ref exp(r/β), with the largest exponent factored out.
        let m = r.iter().map(|x| x / beta).fold(f64::NEG_INFINITY, f64::max);
        let z_scaled: f64 = ref_lp
            .iter()
            .zip(r)
            .map(|(lp, x)| lp.exp() * (x / beta - m).exp())
            .sum();
        log_z.push(m + z_scaled.ln());
        logits.extend(ref_lp.iter().zip(r).map(|(lp, x)| lp + x / beta));
    }
    let pi_r = TabularPolicy::new(reference.n_states, n_a, logits)?;
    let mut worst: f64 = 0.0;
    for s in 0..reference.n_states {
        for a in 0..n_a {
            let recovered = beta * log_ratio(&pi_r, reference, s, a)? + beta * log_z[s];
            worst = worst.max((recovered - reward[s * n_a + a]).abs());
        }
    }
    Ok(worst)
}

/// Fraction of pairs whose log-ratio difference is positive; ties count half.
pub fn dpo_accuracy(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[DpoPair],
) -> Result<f64> {
    check_pairs(policy, reference, pairs)?;
    let mut score = 0.0;
    for p in pairs {
        let d = ratio_gap(policy, reference, p)?;
        score += if d > 0.0 {
            1.0
        } else if d == 0.0 {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoEpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub mean_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub config: DpoConfig,
    pub epochs: Vec<DpoEpochStats>,
    pub final_taus: Option<Vec<f64>>,
    /// Per-pair implicit reward difference on the scale the loss sees.
    pub learned_deltas: Vec<f64>,
    pub strengths: Option<Vec<f64>>,
    pub strength_bins: Option<StrengthBinStats>,
    pub wall_clock_secs: f64,
}

impl DpoReport {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub policy: TabularPolicy,
    pub report: DpoReport,
}

/// Minimizes the configured objective over the policy logits, starting from
/// the reference policy. `strengths` (one per pair) enables the per-bin
/// summary.
pub fn train_dpo(
    pairs: &[DpoPair],
    reference: &TabularPolicy,
    cfg: &DpoConfig,
    strengths: Option<&[f64]>,
) -> Result<DpoOutcome> {
    cfg.validate()?;
    reference.validate()?;
    check_pairs(reference, reference, pairs)?;
    if let Some(s) = strengths {
        if s.len() != pairs.len() {
            return Err(Error::DimensionMismatch {
                expected: pairs.len(),
                got: s.len(),
            });
        }
    }
    let started = Instant::now();
    let mut policy = reference.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, policy.logits.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut taus = vec![cfg.solver.init_tau; pairs.len()];
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let terms: Vec<PairTerm> = batch
                .par_iter()
                .map(|&i| pair_term(&policy, reference, &pairs[i], cfg, None))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; policy.logits.len()];
            for (&i, t) in batch.iter().zip(&terms) {
                if !t.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { pair: i, epoch });
                }
                loss_sum += t.loss;
                taus[i] = t.tau;
                accumulate(&mut grad, policy.n_actions, &pairs[i], t.coeff);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut policy.logits, &grad)?;
        }
        epochs.push(DpoEpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / pairs.len() as f64,
            accuracy: dpo_accuracy(&policy, reference, pairs)?,
            mean_tau: cfg
                .loss
                .kind
                .is_adaptive()
                .then(|| taus.iter().sum::<f64>() / pairs.len() as f64),
        });
    }

    let last = objective(&policy, reference, pairs, cfg, None)?;
    let scale = cfg.delta_scale();
    let learned_deltas = pairs
        .iter()
        .map(|p| Ok(scale * ratio_gap(&policy, reference, p)?))
        .collect::<Result<Vec<_>>>()?;
    let final_taus = cfg.loss.kind.is_adaptive().then_some(last.taus);
    let strength_bins = match strengths {
        Some(s) => bin_statistics(s, final_taus.as_deref(), &learned_deltas, STRENGTH_BINS)?,
        None => None,
    };
    let report = DpoReport {
        config: cfg.clone(),
        epochs,
        final_taus,
        learned_deltas,
        strengths: strengths.map(<[f64]>::to_vec),
        strength_bins,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(DpoOutcome { policy, report })
}

pub const DPO_DATASET_FORMAT: &str = "adapref-dpo";
pub const DPO_DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoHeader {
    pub format: String,
    pub version: u32,
    pub n_states: usize,
    pub n_actions: usize,
    /// Planted reward table the labels were drawn from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_table: Option<Vec<f64>>,
}

/// Header line followed by one `{s, a_w, a_l}` record per line.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoDataset {
    pub header: DpoHeader,
    pub pairs: Vec<DpoPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoDataConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_pairs: usize,
    pub label_mode: LabelMode,
    /// Sharpness of the stochastic labels, `P(a wins) = σ(scale·gap)`.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for DpoDataConfig {
    fn default() -> Self {
        Self {
            n_states: 8,
            n_actions: 6,
            n_pairs: 400,
            label_mode: LabelMode::Deterministic,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl DpoDataset {
    /// Pairs labelled from a standard-normal reward table. Exact reward ties
    /// are not resampled; with continuous rewards they have probability zero.
    pub fn generate(cfg: &DpoDataConfig) -> Result<Self> {
        if cfg.n_states == 0 || cfg.n_actions < 2 || cfg.n_pairs == 0 {
            return Err(Error::InvalidConfig(
                "need at least one state, two actions and one pair".into(),
            ));
        }
        if !(cfg.noise_scale > 0.0) {
            return Err(Error::InvalidConfig("noise_scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let table: Vec<f64> = (0..cfg.n_states * cfg.n_actions)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let mut pairs = Vec::with_capacity(cfg.n_pairs);
        for _ in 0..cfg.n_pairs {
            let s = rng.random_range(0..cfg.n_states);
            let a = rng.random_range(0..cfg.n_actions);
            let mut b = rng.random_range(0..cfg.n_actions - 1);
            if b >= a {
                b += 1;
            }
            let gap = table[s * cfg.n_actions + a] - table[s * cfg.n_actions + b];
            let a_first = match cfg.label_mode {
                LabelMode::Deterministic => gap > 0.0,
                LabelMode::Stochastic => rng.random::<f64>() < sigmoid(cfg.noise_scale * gap),
            };
            let (a_w, a_l) = if a_first { (a, b) } else { (b, a) };
            pairs.push(DpoPair { s, a_w, a_l });
        }
        Ok(Self {
            header: DpoHeader {
                format: DPO_DATASET_FORMAT.into(),
                version: DPO_DATASET_VERSION,
                n_states: cfg.n_states,
                n_actions: cfg.n_actions,
                reward_table: Some(table),
            },
            pairs,
        })
    }

    /// `|r(s, a_w) − r(s, a_l)|` from the planted table.
    pub fn strengths(&self) -> Option<Vec<f64>> {
        let t = self.header.reward_table.as_ref()?;
        let n_a = self.header.n_actions;
        Some(
            self.pairs
                .iter()
                .map(|p| (t[p.s * n_a + p.a_w] - t[p.s * n_a + p.a_l]).abs())
                .collect(),
        )
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        writeln!(out)?;
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p)?;
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input
            .lines()
            .enumerate()
            .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Format("empty DPO dataset".into()))?;
        let header: DpoHeader = serde_json::from_str(&first?).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.format != DPO_DATASET_FORMAT || header.version != DPO_DATASET_VERSION {
            return Err(Error::Format(format!(
                "expected {DPO_DATASET_FORMAT} v{DPO_DATASET_VERSION}, found {} v{}",
                header.format, header.version
            )));
        }
        if let Some(t) = &header.reward_table {
            if t.len() != header.n_states * header.n_actions {
                return Err(Error::Format(
                    "reward table does not match the state/action counts".into(),
                ));
            }
        }
        let mut pairs = Vec::new();
        for (i, line) in lines {
            let pair: DpoPair = serde_json::from_str(&line?).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            pair.validate(header.n_states, header.n_actions)
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            pairs.push(pair);
        }
        Ok(Self { header, pairs })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
