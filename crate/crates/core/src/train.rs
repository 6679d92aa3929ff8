//! Reward-model training: per-pair scaling solve, mini-batch gradient step,
//! evaluation and scaling-factor analytics.
//!
//! Each visit to a pair re-solves its `τ` from the configured starting point
//! with the current reward model, then the batch-mean loss at those `τ` is
//! differentiated through the reward model. Pairs in a batch are processed in
//! parallel; their gradients are summed in pair-index order so results do not
//! depend on the thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{strength_bins, Dataset, PreferencePair};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{Activation, Architecture, RewardModel};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tau::{solve_tau_from, TauSolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    None,
    #[default]
    EveryEpoch,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub solver: TauSolverConfig,
    pub optimizer: OptimizerConfig,
    pub architecture: Architecture,
    #[serde(default)]
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate accuracies every this many epochs (the last epoch always).
    pub eval_every: usize,
    #[serde(default)]
    pub checkpoints: CheckpointPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            solver: TauSolverConfig::default(),
            optimizer: OptimizerConfig::adam(1e-3),
            architecture: Architecture::mlp2(),
            activation: Activation::Tanh,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            eval_every: 1,
            checkpoints: CheckpointPolicy::EveryEpoch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
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
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub mean_tau: Option<f64>,
}

/// Per-strength-bin averages over the training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthBinStats {
    pub n_bins: usize,
    pub mean_strength: Vec<f64>,
    pub mean_tau: Option<Vec<f64>>,
    pub mean_abs_delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    /// `τ` per training pair, solved at the final parameters (adaptive losses).
    pub final_taus: Option<Vec<f64>>,
    /// Preference strength `|r*(w) - r*(l)|` per training pair.
    pub strengths: Vec<f64>,
    /// Learned `Δ` per training pair at the final parameters.
    pub learned_deltas: Vec<f64>,
    pub strength_bins: Option<StrengthBinStats>,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<String>,
}

impl TrainReport {
    pub fn final_epoch(&self) -> &EpochStats {
        self.epochs
            .last()
            .expect("a report always has at least one epoch")
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.final_epoch().test_accuracy
    }
}

pub const STRENGTH_BINS: usize = 5;

/// Fraction of pairs ranked correctly; exact ties count one half.
pub fn eval_pref_accuracy(
    model: &RewardModel,
    pairs: &[PreferencePair],
    gamma: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty pair set".into()));
    }
    let scores: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            let d = model.pair_delta(p, gamma)?.value();
            Ok(if d > 0.0 {
                1.0
            } else if d == 0.0 {
                0.5
            } else {
                0.0
            })
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / pairs.len() as f64)
}

struct PairStep {
    loss: f64,
    tau: f64,
    grad: Vec<f64>,
}

fn pair_step(
    model: &RewardModel,
    pair: &PreferencePair,
    gamma: f64,
    cfg: &TrainConfig,
    init_tau: f64,
) -> Result<PairStep> {
    let delta = model.pair_delta(pair, gamma)?.value();
    let tau = if cfg.loss.kind.is_adaptive() {
        let solved = solve_tau_from(delta, init_tau, &cfg.loss, &cfg.solver)?;
        assert!(
            cfg.loss.contains_tau(solved.tau),
            "solver returned tau {} outside the feasible set",
            solved.tau
        );
        solved.tau
    } else {
        1.0
    };
    let loss = cfg.loss.value(delta, tau);
    let upstream = cfg.loss.grad_delta(delta, tau);
    let mut grad = vec![0.0; model.param_count()];
    model.accumulate_pair_grad(pair, gamma, upstream, &mut grad)?;
    Ok(PairStep { loss, tau, grad })
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RewardModel,
    pub report: TrainReport,
}

/// Train a reward model on `train`, optionally scoring `test` as it goes.
pub fn train(train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(train, test, cfg, |_, _| Ok(None))
}

/// [`train`] with a hook called after every epoch with the current model;
/// whatever reference the hook returns is recorded in the report's
/// checkpoint list.
pub fn train_with_hook<F>(
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochStats, &RewardModel) -> Result<Option<String>>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let started = Instant::now();
    let gamma = train.gamma();
    let n = train.len();
    let mut model = RewardModel::init(cfg.architecture, train.header.input_dim, cfg.seed)
        .with_activation(cfg.activation);
    let mut opt = OptimizerState::new(cfg.optimizer, model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..n).collect();
    let mut taus = vec![cfg.solver.init_tau; n];
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let steps: Vec<PairStep> = batch
                .par_iter()
                .map(|&i| {
                    let init = if cfg.solver.warm_start {
                        taus[i]
                    } else {
                        cfg.solver.init_tau
                    };
                    pair_step(&model, &train.pairs[i], gamma, cfg, init)
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; model.param_count()];
            for (&i, step) in batch.iter().zip(&steps) {
                if !step.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { pair: i, epoch });
                }
                loss_sum += step.loss;
                taus[i] = step.tau;
                for (g, s) in grad.iter_mut().zip(&step.grad) {
                    *g += s;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut model.params, &grad)?;
        }

        let last = epoch + 1 == cfg.epochs;
        let evaluate = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let (train_accuracy, test_accuracy) = if evaluate {
            let tr = eval_pref_accuracy(&model, &train.pairs, gamma)?;
            let te = match test {
                Some(t) if !t.is_empty() => Some(eval_pref_accuracy(&model, &t.pairs, gamma)?),
                _ => None,
            };
            (Some(tr), te)
        } else {
            (None, None)
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / n as f64,
            train_accuracy,
            test_accuracy,
            mean_tau: cfg
                .loss
                .kind
                .is_adaptive()
                .then(|| taus.iter().sum::<f64>() / n as f64),
        };
        let save = match cfg.checkpoints {
            CheckpointPolicy::None => false,
            CheckpointPolicy::EveryEpoch => true,
            CheckpointPolicy::Final => last,
        };
        if save {
            if let Some(reference) = on_epoch(&stats, &model)? {
                checkpoints.push(reference);
            }
        }
        epochs.push(stats);
    }

    let (final_taus, learned_deltas) = final_pair_state(&model, train, cfg)?;
    let strengths: Vec<f64> = train
        .pairs
        .iter()
        .map(PreferencePair::preference_strength)
        .collect();
    let strength_bins = bin_statistics(
        &strengths,
        final_taus.as_deref(),
        &learned_deltas,
        STRENGTH_BINS,
    )?;
    let report = TrainReport {
        config: cfg.clone(),
        epochs,
        final_taus,
        strengths,
        learned_deltas,
        strength_bins,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoints,
    };
    Ok(TrainOutcome { model, report })
}

type FinalState = (Option<Vec<f64>>, Vec<f64>);

fn final_pair_state(model: &RewardModel, data: &Dataset, cfg: &TrainConfig) -> Result<FinalState> {
    let gamma = data.gamma();
    let rows: Vec<(f64, f64)> = data
        .pairs
        .par_iter()
        .map(|p| {
            let delta = model.pair_delta(p, gamma)?.value();
            let tau = if cfg.loss.kind.is_adaptive() {
                solve_tau_from(delta, cfg.solver.init_tau, &cfg.loss, &cfg.solver)?.tau
            } else {
                1.0
            };
            Ok((delta, tau))
        })
        .collect::<Result<_>>()?;
    let deltas = rows.iter().map(|r| r.0).collect();
    let taus = cfg
        .loss
        .kind
        .is_adaptive()
        .then(|| rows.iter().map(|r| r.1).collect());
    Ok((taus, deltas))
}

fn bin_means(values: &[f64], bins: &[usize], n_bins: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (v, &b) in values.iter().zip(bins) {
        sums[b] += v;
        counts[b] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| s / c.max(1) as f64)
        .collect()
}

/// Means of strength, `τ` and `|Δ|` per equal-count strength bin. `None` when
/// there are fewer pairs than bins.
pub fn bin_statistics(
    strengths: &[f64],
    taus: Option<&[f64]>,
    deltas: &[f64],
    n_bins: usize,
) -> Result<Option<StrengthBinStats>> {
    if strengths.len() < n_bins {
        return Ok(None);
    }
    let bins = strength_bins(strengths, n_bins)?;
    let abs: Vec<f64> = deltas.iter().map(|d| d.abs()).collect();
    Ok(Some(StrengthBinStats {
        n_bins,
        mean_strength: bin_means(strengths, &bins, n_bins),
        mean_tau: taus.map(|t| bin_means(t, &bins, n_bins)),
        mean_abs_delta: bin_means(&abs, &bins, n_bins),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauAnalytics {
    pub histogram: Vec<HistogramBin>,
    pub bin_means_tau: Vec<f64>,
    pub bin_means_abs_delta: Vec<f64>,
    pub bin_mean_strength: Vec<f64>,
    /// All strengths are equal, so strength bins collapse to one.
    pub degenerate: bool,
}

/// Histogram of the final `τ` values plus per-strength-quintile means of `τ`
/// and of the learned `|Δ|`.
pub fn tau_analytics(report: &TrainReport, histogram_bins: usize) -> Result<TauAnalytics> {
    let taus = report
        .final_taus
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("tau analytics need an adaptive-loss report".into()))?;
    if taus.is_empty() || histogram_bins == 0 {
        return Err(Error::InvalidInput(
            "empty tau set or zero histogram bins".into(),
        ));
    }
    let lo = report
        .config
        .loss
        .tau0
        .min(taus.iter().copied().fold(f64::INFINITY, f64::min));
    let upper = report.config.loss.upper_bound();
    let max_tau = taus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hi = if upper.is_finite() {
        upper.max(max_tau)
    } else {
        max_tau
    };
    let histogram = if hi - lo <= 0.0 {
        vec![HistogramBin {
            lo,
            hi,
            count: taus.len(),
        }]
    } else {
        let width = (hi - lo) / histogram_bins as f64;
        let mut counts = vec![0usize; histogram_bins];
        for &t in taus {
            let b = (((t - lo) / width) as usize).min(histogram_bins - 1);
            counts[b] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| HistogramBin {
                lo: lo + i as f64 * width,
                hi: if i + 1 == histogram_bins {
                    hi
                } else {
                    lo + (i + 1) as f64 * width
                },
                count,
            })
            .collect()
    };

    let strengths = &report.strengths;
    let first = strengths.first().copied().unwrap_or(0.0);
    let degenerate = strengths.iter().all(|&s| s == first);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let abs: Vec<f64> = report.learned_deltas.iter().map(|d| d.abs()).collect();
    let (bin_means_tau, bin_means_abs_delta, bin_mean_strength) = if degenerate
        || strengths.len() < STRENGTH_BINS
    {
        (vec![mean(taus)], vec![mean(&abs)], vec![mean(strengths)])
    } else {
        let stats = bin_statistics(strengths, Some(taus), &report.learned_deltas, STRENGTH_BINS)?
            .expect("enough pairs for the strength bins");
        (
            stats.mean_tau.expect("taus supplied"),
            stats.mean_abs_delta,
            stats.mean_strength,
        )
    };
    Ok(TauAnalytics {
        histogram,
        bin_means_tau,
        bin_means_abs_delta,
        bin_mean_strength,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetConfig, GroundTruth};
    use std::f64::consts::LN_2;

    fn dataset(n: usize, seed: u64) -> (Dataset, Dataset) {
        let gt = GroundTruth::random_linear(4, 1.0, seed);
        let cfg = DatasetConfig {
            n_pairs: n,
            input_dim: 4,
            seed,
            ..DatasetConfig::default()
        };
        let s = generate(&cfg, &gt).unwrap();
        (s.train, s.test)
    }

    fn small_cfg(loss: LossConfig) -> TrainConfig {
        TrainConfig {
            loss,
            architecture: Architecture::Mlp2 { hidden: 8 },
            optimizer: OptimizerConfig::adam(1e-2),
            epochs: 3,
            batch_size: 16,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn accuracy_conventions() {
        let (train, _) = dataset(100, 1);
        let gt = train.header.ground_truth.clone();
        assert_eq!(eval_pref_accuracy(&gt, &train.pairs, 1.0).unwrap(), 1.0);
        assert_eq!(
            eval_pref_accuracy(&gt.negated(), &train.pairs, 1.0).unwrap(),
            0.0
        );
        let zero = RewardModel::zeros(Architecture::Linear, 4);
        assert_eq!(eval_pref_accuracy(&zero, &train.pairs, 1.0).unwrap(), 0.5);
        assert!(eval_pref_accuracy(&zero, &[], 1.0).is_err());
    }

    #[test]
    fn unit_interval_adaptive_run_reproduces_cross_entropy() {
        let (train, test) = dataset(120, 2);
        let ce =
            super::train(&train, Some(&test), &small_cfg(LossConfig::cross_entropy())).unwrap();
        let ada_cfg = small_cfg(LossConfig::adaptive_linear(1.0, 1.0, LN_2));
        let ada = super::train(&train, Some(&test), &ada_cfg).unwrap();
        assert_eq!(ce.model.params, ada.model.params);
        for (a, b) in ce.report.epochs.iter().zip(&ada.report.epochs) {
            assert_eq!(a.mean_loss, b.mean_loss);
        }
        assert!(ada
            .report
            .final_taus
            .as_ref()
            .unwrap()
            .iter()
            .all(|&t| t == 1.0));
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let (train, test) = dataset(100, 3);
        let cfg = small_cfg(LossConfig::default());
        let mut a = super::train(&train, Some(&test), &cfg).unwrap().report;
        let mut b = super::train(&train, Some(&test), &cfg).unwrap().report;
        a.wall_clock_secs = 0.0;
        b.wall_clock_secs = 0.0;
        assert_eq!(a, b);
    }

    #[test]
    fn separable_linear_problem_reaches_full_train_accuracy() {
        let (train, _) = dataset(200, 5);
        let cfg = TrainConfig {
            architecture: Architecture::Linear,
            epochs: 300,
            batch_size: train.len(),
            optimizer: OptimizerConfig::adam(5e-2),
            ..small_cfg(LossConfig::cross_entropy())
        };
        let out = super::train(&train, None, &cfg).unwrap();
        assert_eq!(out.report.final_epoch().train_accuracy, Some(1.0));
    }

    #[test]
    fn taus_stay_in_feasible_set() {
        let (train, _) = dataset(150, 6);
        let cfg = small_cfg(LossConfig::adaptive_linear(0.1, 3.0, 0.2));
        let out = super::train(&train, None, &cfg).unwrap();
        for &t in out.report.final_taus.as_ref().unwrap() {
            assert!((0.1..=3.0).contains(&t));
        }
        let acc = out.report.final_epoch().train_accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn hook_collects_checkpoint_references() {
        let (train, _) = dataset(60, 7);
        let mut cfg = small_cfg(LossConfig::hinge(1.0));
        cfg.checkpoints = CheckpointPolicy::EveryEpoch;
        let out = train_with_hook(&train, None, &cfg, |s, _| {
            Ok(Some(format!("epoch-{}", s.epoch)))
        })
        .unwrap();
        assert_eq!(
            out.report.checkpoints,
            vec!["epoch-1", "epoch-2", "epoch-3"]
        );
        cfg.checkpoints = CheckpointPolicy::Final;
        let out = train_with_hook(&train, None, &cfg, |s, _| {
            Ok(Some(format!("epoch-{}", s.epoch)))
        })
        .unwrap();
        assert_eq!(out.report.checkpoints, vec!["epoch-3"]);
        assert!(out.report.final_taus.is_none());
    }

    #[test]
    fn analytics_edge_cases() {
        let (train, _) = dataset(60, 8);
        let cfg = small_cfg(LossConfig::adaptive_linear(1.0, 1.0, LN_2));
        let out = super::train(&train, None, &cfg).unwrap();
        let a = tau_analytics(&out.report, 10).unwrap();
        assert_eq!(a.histogram.len(), 1);
        assert_eq!(a.histogram[0].count, train.len());
        assert!(!a.degenerate);

        let mut flat = out.report.clone();
        flat.strengths.iter_mut().for_each(|s| *s = 1.0);
        let a = tau_analytics(&flat, 10).unwrap();
        assert!(a.degenerate);
        assert_eq!(a.bin_means_tau.len(), 1);

        let ce = super::train(&train, None, &small_cfg(LossConfig::cross_entropy())).unwrap();
        assert!(tau_analytics(&ce.report, 10).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let (train, _) = dataset(20, 9);
        let mut cfg = small_cfg(LossConfig::default());
        cfg.batch_size = 0;
        assert!(super::train(&train, None, &cfg).is_err());
        let mut cfg = small_cfg(LossConfig::default());
        cfg.solver.init_tau = 7.0;
        assert!(super::train(&train, None, &cfg).is_err());
    }
}
