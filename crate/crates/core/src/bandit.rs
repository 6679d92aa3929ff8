//! Contextual-bandit evaluation of learned rewards and the two
//! hyperparameter-selection rules.
//!
//! Every context offers `m` candidate actions. A candidate's feature vector is
//! `(c + a) / √2` with context `c` and action noise `a` both standard normal,
//! so candidates share the marginal distribution of dataset segments. The
//! policy induced by a reward model picks the candidate it scores highest and
//! earns the ground-truth reward of that pick.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_from, DatasetConfig, GroundTruth, Segment, Splits};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossKind};
use crate::model::RewardModel;
use crate::train::{train, TrainConfig};

pub const DEFAULT_CANDIDATES: usize = 10;
pub const DEFAULT_EVAL_CONTEXTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BanditConfig {
    pub input_dim: usize,
    pub n_candidates: usize,
    pub n_eval_contexts: usize,
    pub seed: u64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            n_candidates: DEFAULT_CANDIDATES,
            n_eval_contexts: DEFAULT_EVAL_CONTEXTS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BanditEnv {
    pub config: BanditConfig,
    pub ground_truth: GroundTruth,
    /// `n_eval_contexts × n_candidates` feature vectors, context-major.
    candidates: Vec<Vec<f64>>,
    /// Ground-truth reward of each candidate, same layout.
    true_rewards: Vec<f64>,
}

fn candidate(rng: &mut ChaCha8Rng, context: &[f64]) -> Vec<f64> {
    context
        .iter()
        .map(|c| (c + rng.sample::<f64, _>(StandardNormal)) * std::f64::consts::FRAC_1_SQRT_2)
        .collect()
}

fn context(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

impl BanditEnv {
    pub fn new(config: BanditConfig, ground_truth: GroundTruth) -> Result<Self> {
        if config.n_candidates < 2 || config.n_eval_contexts == 0 {
            return Err(Error::InvalidConfig(
                "bandit needs at least two candidates and one evaluation context".into(),
            ));
        }
        if ground_truth.model.input_dim != config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: config.input_dim,
                got: ground_truth.model.input_dim,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut candidates = Vec::with_capacity(config.n_eval_contexts * config.n_candidates);
        for _ in 0..config.n_eval_contexts {
            let c = context(&mut rng, config.input_dim);
            for _ in 0..config.n_candidates {
                candidates.push(candidate(&mut rng, &c));
            }
        }
        let true_rewards = candidates
            .iter()
            .map(|x| ground_truth.model.reward(x))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            ground_truth,
            candidates,
            true_rewards,
        })
    }

    fn context_rows(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let m = self.config.n_candidates;
        (0..self.config.n_eval_contexts).map(move |i| i * m..(i + 1) * m)
    }

    /// Highest oracle return: always pick the truly best candidate.
    pub fn oracle_max(&self) -> f64 {
        self.mean_over_contexts(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Lowest oracle return: always pick the truly worst candidate.
    pub fn oracle_min(&self) -> f64 {
        self.mean_over_contexts(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
    }

    fn mean_over_contexts(&self, pick: impl Fn(&[f64]) -> f64) -> f64 {
        let total: f64 = self
            .context_rows()
            .map(|rows| pick(&self.true_rewards[rows]))
            .sum();
        total / self.config.n_eval_contexts as f64
    }

    /// Preference data whose pairs are two candidates of one context, labelled
    /// by the environment's ground truth. Uses every field of `cfg` except
    /// `input_dim` and `segment_length`, which follow the environment.
    pub fn preference_data(&self, cfg: &DatasetConfig) -> Result<Splits> {
        let cfg = DatasetConfig {
            input_dim: self.config.input_dim,
            segment_length: 1,
            ..cfg.clone()
        };
        let dim = cfg.input_dim;
        generate_from(&cfg, &self.ground_truth, |rng| {
            let c = context(rng, dim);
            let a = Segment {
                steps: vec![candidate(rng, &c)],
            };
            let b = Segment {
                steps: vec![candidate(rng, &c)],
            };
            (a, b)
        })
    }
}

/// Mean ground-truth reward of the candidate `model` ranks first in each
/// evaluation context; ties go to the lowest index.
pub fn policy_return(model: &RewardModel, env: &BanditEnv) -> Result<f64> {
    if model.input_dim != env.config.input_dim {
        return Err(Error::DimensionMismatch {
            expected: env.config.input_dim,
            got: model.input_dim,
        });
    }
    let picks: Vec<f64> = env
        .context_rows()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|rows| {
            let mut best = rows.start;
            let mut best_score = f64::NEG_INFINITY;
            for i in rows {
                let score = model.reward(&env.candidates[i])?;
                if score > best_score {
                    best = i;
                    best_score = score;
                }
            }
            Ok(env.true_rewards[best])
        })
        .collect::<Result<_>>()?;
    Ok(picks.iter().sum::<f64>() / picks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    ByReturn,
    ByAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub criterion: Criterion,
    pub id: usize,
    #[serde(rename = "return")]
    pub policy_return: f64,
    pub accuracy: f64,
}

/// One trained grid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub id: usize,
    pub loss: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub tau0: f64,
    pub tau_max: Option<f64>,
    pub rho0: f64,
    pub accuracy: f64,
    #[serde(rename = "return")]
    pub policy_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub id: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStudy {
    pub results: Vec<GridResult>,
    pub failures: Vec<GridFailure>,
    pub by_return: SelectionOutcome,
    pub by_accuracy: SelectionOutcome,
    pub gap: f64,
}

/// First index attaining the maximum of `key`.
fn argmax_by(results: &[GridResult], key: impl Fn(&GridResult) -> f64) -> &GridResult {
    let mut best = &results[0];
    for r in &results[1..] {
        if key(r) > key(best) {
            best = r;
        }
    }
    best
}

fn outcome(r: &GridResult, criterion: Criterion) -> SelectionOutcome {
    SelectionOutcome {
        criterion,
        id: r.id,
        policy_return: r.policy_return,
        accuracy: r.accuracy,
    }
}

/// Trains every configuration on `data.train`, scores it by test preference
/// accuracy and by bandit return, and compares the two selections.
/// Configurations that fail to train are reported and left out.
pub fn run_selection_study(
    grid: &[TrainConfig],
    data: &Splits,
    env: &BanditEnv,
) -> Result<SelectionStudy> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty configuration grid".into()));
    }
    if data.test.is_empty() {
        return Err(Error::InvalidInput(
            "selection needs a nonempty test split".into(),
        ));
    }
    let runs: Vec<std::result::Result<GridResult, GridFailure>> = grid
        .par_iter()
        .enumerate()
        .map(|(id, cfg)| {
            let cfg = TrainConfig {
                checkpoints: crate::train::CheckpointPolicy::None,
                eval_every: cfg.epochs,
                ..cfg.clone()
            };
            let scored = train(&data.train, Some(&data.test), &cfg).and_then(|out| {
                let accuracy = out
                    .report
                    .final_test_accuracy()
                    .ok_or_else(|| Error::InvalidInput("missing test accuracy".into()))?;
                Ok((accuracy, policy_return(&out.model, env)?))
            });
            match scored {
                Ok((accuracy, policy_return)) => Ok(GridResult {
                    id,
                    loss: cfg.loss.kind,
                    learning_rate: cfg.optimizer.learning_rate,
                    epochs: cfg.epochs,
                    tau0: cfg.loss.tau0,
                    tau_max: cfg.loss.tau_max.is_finite().then_some(cfg.loss.tau_max),
                    rho0: cfg.loss.rho0,
                    accuracy,
                    policy_return,
                }),
                Err(e) => Err(GridFailure {
                    id,
                    error: e.to_string(),
                }),
            }
        })
        .collect();
    let (mut results, mut failures) = (Vec::new(), Vec::new());
    for r in runs {
        match r {
            Ok(g) => results.push(g),
            Err(f) => failures.push(f),
        }
    }
    if results.is_empty() {
        return Err(Error::InvalidInput(format!(
            "every grid configuration failed; first error: {}",
            failures[0].error
        )));
    }
    let by_return = outcome(
        argmax_by(&results, |r| r.policy_return),
        Criterion::ByReturn,
    );
    let by_accuracy = outcome(argmax_by(&results, |r| r.accuracy), Criterion::ByAccuracy);
    Ok(SelectionStudy {
        gap: by_return.policy_return - by_accuracy.policy_return,
        results,
        failures,
        by_return,
        by_accuracy,
    })
}

/// Product grid over learning rates and epoch counts for each loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub losses: Vec<LossConfig>,
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl GridSpec {
    /// Configurations for one loss, learning rate varying fastest.
    pub fn expand(&self, loss: &LossConfig) -> Vec<TrainConfig> {
        let mut grid = Vec::with_capacity(self.learning_rates.len() * self.epochs.len());
        for &epochs in &self.epochs {
            for &lr in &self.learning_rates {
                let mut cfg = self.base.clone();
                cfg.loss = *loss;
                cfg.optimizer.learning_rate = lr;
                cfg.epochs = epochs;
                grid.push(cfg);
            }
        }
        grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() || self.learning_rates.is_empty() || self.epochs.is_empty() {
            return Err(Error::InvalidConfig(
                "grid needs losses, learning rates and epochs".into(),
            ));
        }
        for loss in &self.losses {
            for cfg in self.expand(loss) {
                cfg.validate()?;
            }
        }
        Ok(())
    }
}

/// Settings of the multi-seed comparison of losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignStudyConfig {
    pub grid: GridSpec,
    pub bandit: BanditConfig,
    /// Ground truth is a random two-layer network of this width, or linear when absent.
    pub ground_truth_hidden: Option<usize>,
    pub data: DatasetConfig,
    pub seeds: Vec<u64>,
}

impl AlignStudyConfig {
    /// Twelve configurations per loss (learning rates `1e-4..3e-3` by epochs
    /// `{1, 3, 5}`) comparing cross-entropy with the default adaptive loss, on
    /// 1000 stochastic labels from a width-16 two-layer ground truth. The
    /// label scale 10 matches that ground truth's small reward range.
    pub fn standard(n_seeds: u64) -> Self {
        Self {
            grid: GridSpec {
                base: TrainConfig {
                    checkpoints: crate::train::CheckpointPolicy::None,
                    ..TrainConfig::default()
                },
                losses: vec![LossConfig::cross_entropy(), LossConfig::default()],
                learning_rates: vec![1e-4, 3e-4, 1e-3, 3e-3],
                epochs: vec![1, 3, 5],
            },
            bandit: BanditConfig::default(),
            ground_truth_hidden: Some(16),
            data: DatasetConfig {
                n_pairs: 1000,
                label_mode: crate::data::LabelMode::Stochastic,
                noise_scale: 10.0,
                ..DatasetConfig::default()
            },
            seeds: (0..n_seeds).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStudy {
    pub seed: u64,
    pub oracle_max: f64,
    pub oracle_min: f64,
    /// One study per loss, in grid order.
    pub studies: Vec<SelectionStudy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignStudyReport {
    pub config: AlignStudyConfig,
    pub per_seed: Vec<SeedStudy>,
    /// Mean selection gap per loss, in grid order.
    pub mean_gaps: Vec<f64>,
}

impl AlignStudyReport {
    /// Seeds where loss `a`'s gap is no larger than loss `b`'s.
    pub fn sign_wins(&self, a: usize, b: usize) -> usize {
        self.per_seed
            .iter()
            .filter(|s| s.studies[a].gap <= s.studies[b].gap)
            .count()
    }
}

/// For each seed: a fresh ground truth, environment and dataset shared by all
/// losses; every loss's grid is trained and selected on them.
pub fn run_align_study(cfg: &AlignStudyConfig) -> Result<AlignStudyReport> {
    cfg.grid.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "align study needs at least one seed".into(),
        ));
    }
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dim = cfg.bandit.input_dim;
        let gt = match cfg.ground_truth_hidden {
            Some(h) => GroundTruth::random_mlp2(dim, h, 1.0, seed),
            None => GroundTruth::random_linear(dim, 1.0, seed),
        };
        let env = BanditEnv::new(
            BanditConfig {
                seed: cfg.bandit.seed.wrapping_add(seed),
                ..cfg.bandit
            },
            gt,
        )?;
        let data = env.preference_data(&DatasetConfig {
            seed: cfg.data.seed.wrapping_add(seed),
            ..cfg.data.clone()
        })?;
        let studies = cfg
            .grid
            .losses
            .iter()
            .map(|loss| {
                let grid: Vec<TrainConfig> = cfg
                    .grid
                    .expand(loss)
                    .into_iter()
                    .map(|c| TrainConfig {
                        seed: c.seed.wrapping_add(seed),
                        ..c
                    })
                    .collect();
                run_selection_study(&grid, &data, &env)
            })
            .collect::<Result<_>>()?;
        per_seed.push(SeedStudy {
            seed,
            oracle_max: env.oracle_max(),
            oracle_min: env.oracle_min(),
            studies,
        });
    }
    let n = per_seed.len() as f64;
    let mean_gaps = (0..cfg.grid.losses.len())
        .map(|k| per_seed.iter().map(|s| s.studies[k].gap).sum::<f64>() / n)
        .collect();
    Ok(AlignStudyReport {
        config: cfg.clone(),
        per_seed,
        mean_gaps,
    })
}

/// One CSV row per trained configuration.
pub fn write_study_csv<W: Write>(report: &AlignStudyReport, mut out: W) -> Result<()> {
    writeln!(
        out,
        "seed,id,loss,learning_rate,epochs,tau0,tau_max,rho0,accuracy,return"
    )?;
    for s in &report.per_seed {
        for study in &s.studies {
            for r in &study.results {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    s.seed,
                    r.id,
                    r.loss,
                    r.learning_rate,
                    r.epochs,
                    r.tau0,
                    r.tau_max.map_or("inf".to_string(), |t| t.to_string()),
                    r.rho0,
                    r.accuracy,
                    r.policy_return
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelMode;
    use crate::model::Architecture;
    use crate::optim::OptimizerConfig;

    fn env(seed: u64) -> BanditEnv {
        let gt = GroundTruth::random_linear(4, 1.0, seed);
        BanditEnv::new(
            BanditConfig {
                input_dim: 4,
                n_candidates: 5,
                n_eval_contexts: 300,
                seed,
            },
            gt,
        )
        .unwrap()
    }

    #[test]
    fn oracle_sandwich() {
        let e = env(1);
        let (lo, hi) = (e.oracle_min(), e.oracle_max());
        assert!(lo < hi);
        assert_eq!(policy_return(&e.ground_truth.model, &e).unwrap(), hi);
        assert_eq!(
            policy_return(&e.ground_truth.model.negated(), &e).unwrap(),
            lo
        );
        for seed in 0..5 {
            let m = RewardModel::init(Architecture::mlp2(), 4, seed);
            let r = policy_return(&m, &e).unwrap();
            assert!(lo <= r && r <= hi);
        }
    }

    #[test]
    fn constant_model_picks_first_candidate() {
        let e = env(2);
        let zero = RewardModel::zeros(Architecture::Linear, 4);
        let first: f64 = (0..300).map(|i| e.true_rewards[i * 5]).sum::<f64>() / 300.0;
        assert!((policy_return(&zero, &e).unwrap() - first).abs() < 1e-12);
        let wrong_dim = RewardModel::zeros(Architecture::Linear, 3);
        assert!(policy_return(&wrong_dim, &e).is_err());
    }

    #[test]
    fn candidates_are_standard_normal() {
        let e = env(3);
        let n = e.candidates.len() as f64 * 4.0;
        let (mut s, mut s2) = (0.0, 0.0);
        for x in e.candidates.iter().flatten() {
            s += x;
            s2 += x * x;
        }
        assert!((s / n).abs() < 0.05);
        assert!((s2 / n - 1.0).abs() < 0.05);
    }

    fn small_data(e: &BanditEnv) -> Splits {
        e.preference_data(&DatasetConfig {
            n_pairs: 200,
            label_mode: LabelMode::Deterministic,
            seed: 4,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    fn cfg(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            architecture: Architecture::Linear,
            optimizer: OptimizerConfig::adam(lr),
            epochs,
            batch_size: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_configuration_has_zero_gap() {
        let e = env(4);
        let d = small_data(&e);
        let s = run_selection_study(&[cfg(1e-2, 3)], &d, &e).unwrap();
        assert_eq!(s.gap, 0.0);
        assert_eq!(s.by_return.id, s.by_accuracy.id);
        assert!(run_selection_study(&[], &d, &e).is_err());
    }

    #[test]
    fn gap_is_nonnegative_and_failures_are_reported() {
        let e = env(5);
        let d = small_data(&e);
        let mut bad = cfg(1e-2, 1);
        bad.batch_size = 0;
        let grid = [cfg(1e-4, 1), cfg(1e-2, 5), bad, cfg(3e-3, 2)];
        let s = run_selection_study(&grid, &d, &e).unwrap();
        assert!(s.gap >= 0.0);
        assert_eq!(s.results.len(), 3);
        assert_eq!(s.failures.len(), 1);
        assert_eq!(s.failures[0].id, 2);
        let best = s
            .results
            .iter()
            .map(|r| r.policy_return)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(s.by_return.policy_return, best);
    }

    #[test]
    fn dominant_configuration_is_chosen_by_both_rules() {
        let e = env(6);
        let d = small_data(&e);
        // One epoch at a tiny rate stays near the random initialization.
        let grid = [cfg(1e-6, 1), cfg(5e-2, 20)];
        let s = run_selection_study(&grid, &d, &e).unwrap();
        assert_eq!(s.by_return.id, 1);
        assert_eq!(s.by_accuracy.id, 1);
        assert_eq!(s.gap, 0.0);
    }

    #[test]
    fn grid_expansion_order() {
        let grid_spec = GridSpec {
            base: cfg(1.0, 1),
            losses: vec![LossConfig::cross_entropy()],
            learning_rates: vec![1e-3, 1e-2],
            epochs: vec![1, 3, 5],
        };
        let g = grid_spec.expand(&grid_spec.losses[0]);
        assert_eq!(g.len(), 6);
        assert_eq!((g[1].optimizer.learning_rate, g[1].epochs), (1e-2, 1));
        assert_eq!((g[2].optimizer.learning_rate, g[2].epochs), (1e-3, 3));
        grid_spec.validate().unwrap();
    }
}
