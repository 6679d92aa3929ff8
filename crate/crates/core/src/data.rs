//! Synthetic preference datasets labelled by a known ground-truth reward.
//!
//! A dataset file is line-delimited JSON. The first line is a header:
//!
//! ```text
//! {"version":1,"input_dim":8,"segment_length":1,"gamma":1.0,"seed":7,
//!  "label_mode":"deterministic","noise_scale":null,"ground_truth":{...}}
//! ```
//!
//! and every following line is one pair:
//!
//! ```text
//! {"winner":[[...step features...]],"loser":[[...]],"strength":0.83,"p_star":null}
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every value bit for bit.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::sigmoid;
use crate::model::{Architecture, FeatureVector, RewardModel};

pub const DATASET_VERSION: u32 = 1;

/// A run of consecutive state–action feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Segment {
    pub steps: Vec<FeatureVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Winner is the segment with the higher true reward; near-ties are resampled.
    Deterministic,
    /// Winner drawn from a Bradley–Terry labeller `σ(s · Δ*)`.
    Stochastic,
}

/// One labelled comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub winner: Segment,
    pub loser: Segment,
    /// True reward difference `r*(winner) - r*(loser)`. Positive in
    /// deterministic mode; negative in stochastic mode when the drawn label
    /// disagrees with the ground truth.
    pub strength: f64,
    pub label_mode: LabelMode,
    /// Probability the labeller prefers `winner` (stochastic mode only).
    pub p_star: Option<f64>,
}

impl PreferencePair {
    /// Magnitude of the true reward gap.
    pub fn preference_strength(&self) -> f64 {
        self.strength.abs()
    }
}

/// The reward that labels a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub model: RewardModel,
    pub gamma: f64,
}

impl GroundTruth {
    /// Linear reward with a unit-norm Gaussian weight direction and zero bias.
    pub fn random_linear(input_dim: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
        let mut w: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = w
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        w.iter_mut().for_each(|x| *x /= norm);
        Self {
            model: RewardModel::linear(w, 0.0),
            gamma,
        }
    }

    /// Randomly initialized two-hidden-layer network.
    pub fn random_mlp2(input_dim: usize, hidden: usize, gamma: f64, seed: u64) -> Self {
        Self {
            model: RewardModel::init(
                Architecture::Mlp2 { hidden },
                input_dim,
                seed ^ 0xbb67_ae85_84ca_a73b,
            ),
            gamma,
        }
    }

    pub fn segment_reward(&self, segment: &Segment) -> Result<f64> {
        self.model.segment_reward(segment, self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_pairs: usize,
    pub input_dim: usize,
    pub segment_length: usize,
    pub gamma: f64,
    pub label_mode: LabelMode,
    /// Scale `s` of the stochastic labeller `σ(s · Δ*)`.
    pub noise_scale: f64,
    pub tie_eps: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_pairs: 1000,
            input_dim: 8,
            segment_length: 1,
            gamma: 1.0,
            label_mode: LabelMode::Deterministic,
            noise_scale: 1.0,
            tie_eps: 1e-6,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::InvalidConfig("n_pairs must be at least 1".into()));
        }
        if self.input_dim == 0 || self.segment_length == 0 {
            return Err(Error::InvalidConfig(
                "input_dim and segment_length must be positive".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.label_mode == LabelMode::Stochastic && !(self.noise_scale > 0.0) {
            return Err(Error::InvalidConfig("noise scale must be positive".into()));
        }
        if !(self.tie_eps >= 0.0) {
            return Err(Error::InvalidConfig("tie_eps must be nonnegative".into()));
        }
        Ok(())
    }
}

/// File header carried by every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub input_dim: usize,
    pub segment_length: usize,
    pub gamma: f64,
    pub seed: u64,
    pub label_mode: LabelMode,
    pub noise_scale: Option<f64>,
    pub ground_truth: RewardModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub pairs: Vec<PreferencePair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.header.gamma
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            model: self.header.ground_truth.clone(),
            gamma: self.header.gamma,
        }
    }

    /// Writes the header line followed by one line per pair.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for pair in &self.pairs {
            let record = PairRecordRef {
                winner: &pair.winner.steps,
                loser: &pair.loser.steps,
                strength: pair.strength,
                p_star: pair.p_star,
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let header: DatasetHeader = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::Parse {
                line: 1,
                msg: e.to_string(),
            })?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing header".into(),
                })
            }
        };
        if header.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "dataset version {} not supported (expected {DATASET_VERSION})",
                header.version
            )));
        }
        if header.ground_truth.input_dim != header.input_dim {
            return Err(Error::Format(format!(
                "ground truth expects dimension {}, header says {}",
                header.ground_truth.input_dim, header.input_dim
            )));
        }
        header.ground_truth.validate()?;
        let mut pairs = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PairRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            for seg in [&rec.winner, &rec.loser] {
                if seg.is_empty() {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "empty segment".into(),
                    });
                }
                if let Some(step) = seg.iter().find(|s| s.len() != header.input_dim) {
                    return Err(Error::Format(format!(
                        "line {lineno}: step of dimension {} in a dataset of dimension {}",
                        step.len(),
                        header.input_dim
                    )));
                }
            }
            pairs.push(PreferencePair {
                winner: Segment { steps: rec.winner },
                loser: Segment { steps: rec.loser },
                strength: rec.strength,
                label_mode: header.label_mode,
                p_star: rec.p_star,
            });
        }
        Ok(Self { header, pairs })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

#[derive(Serialize)]
struct PairRecordRef<'a> {
    winner: &'a [FeatureVector],
    loser: &'a [FeatureVector],
    strength: f64,
    p_star: Option<f64>,
}

#[derive(Deserialize)]
struct PairRecord {
    winner: Vec<FeatureVector>,
    loser: Vec<FeatureVector>,
    strength: f64,
    p_star: Option<f64>,
}

fn sample_segment(rng: &mut ChaCha8Rng, dim: usize, len: usize) -> Segment {
    Segment {
        steps: (0..len)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect(),
    }
}

/// Sample i.i.d. segment pairs, label them with the ground truth and split
/// into train and test sets.
pub fn generate(cfg: &DatasetConfig, gt: &GroundTruth) -> Result<Splits> {
    let (dim, len) = (cfg.input_dim, cfg.segment_length);
    generate_from(cfg, gt, |rng| {
        let a = sample_segment(rng, dim, len);
        let b = sample_segment(rng, dim, len);
        (a, b)
    })
}

/// As [`generate`], with the unlabelled segment pairs drawn by `sample_pair`.
pub fn generate_from<F>(cfg: &DatasetConfig, gt: &GroundTruth, mut sample_pair: F) -> Result<Splits>
where
    F: FnMut(&mut ChaCha8Rng) -> (Segment, Segment),
{
    cfg.validate()?;
    if gt.model.input_dim != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.input_dim,
            got: gt.model.input_dim,
        });
    }
    let gt = GroundTruth {
        model: gt.model.clone(),
        gamma: cfg.gamma,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let budget = 100 * cfg.n_pairs;
    let mut attempts = 0usize;
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    while pairs.len() < cfg.n_pairs {
        if attempts >= budget {
            return Err(Error::DegenerateGroundTruth(format!(
                "only {} of {} pairs cleared the tie threshold after {budget} draws",
                pairs.len(),
                cfg.n_pairs
            )));
        }
        attempts += 1;
        let (a, b) = sample_pair(&mut rng);
        let gap = gt.segment_reward(&a)? - gt.segment_reward(&b)?;
        let pair = match cfg.label_mode {
            LabelMode::Deterministic => {
                if gap.abs() <= cfg.tie_eps {
                    continue;
                }
                let (winner, loser) = if gap > 0.0 { (a, b) } else { (b, a) };
                PreferencePair {
                    winner,
                    loser,
                    strength: gap.abs(),
                    label_mode: LabelMode::Deterministic,
                    p_star: None,
                }
            }
            LabelMode::Stochastic => {
                let p_a = sigmoid(cfg.noise_scale * gap);
                let a_wins = rng.random::<f64>() < p_a;
                let (winner, loser, strength, p) = if a_wins {
                    (a, b, gap, p_a)
                } else {
                    (b, a, -gap, 1.0 - p_a)
                };
                PreferencePair {
                    winner,
                    loser,
                    strength,
                    label_mode: LabelMode::Stochastic,
                    p_star: Some(p),
                }
            }
        };
        pairs.push(pair);
    }

    let header = DatasetHeader {
        version: DATASET_VERSION,
        input_dim: cfg.input_dim,
        segment_length: cfg.segment_length,
        gamma: cfg.gamma,
        seed: cfg.seed,
        label_mode: cfg.label_mode,
        noise_scale: (cfg.label_mode == LabelMode::Stochastic).then_some(cfg.noise_scale),
        ground_truth: gt.model.clone(),
    };
    let n_train = ((cfg.n_pairs as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, cfg.n_pairs);
    let test_pairs = pairs.split_off(n_train);
    Ok(Splits {
        train: Dataset {
            header: header.clone(),
            pairs,
        },
        test: Dataset {
            header,
            pairs: test_pairs,
        },
    })
}

/// Equal-count percentile bins by strength. Ties keep input order, and
/// bin indices are nondecreasing along ascending strength.
pub fn strength_bins(strengths: &[f64], n_bins: usize) -> Result<Vec<usize>> {
    if n_bins < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 bins, got {n_bins}"
        )));
    }
    let n = strengths.len();
    if n < n_bins {
        return Err(Error::InvalidInput(format!(
            "{n} pairs cannot fill {n_bins} bins"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| strengths[a].total_cmp(&strengths[b]));
    let mut bins = vec![0; n];
    for (rank, &idx) in order.iter().enumerate() {
        bins[idx] = rank * n_bins / n;
    }
    Ok(bins)
}
