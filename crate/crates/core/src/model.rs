//! Reward functions over feature vectors: a linear model and a feed-forward
//! network with two hidden layers, both with exact reverse-mode gradients.
//!
//! Parameters live in one flat vector so the optimizers and the batch
//! reduction can treat every architecture alike. Layout for `Mlp2` with input
//! dimension `d` and width `h`:
//!
//! ```text
//! W1 (h×d, row-major) | b1 (h) | W2 (h×h) | b2 (h) | w3 (h) | b3 (1)
//! ```
//!
//! and for `Linear`: `w (d) | b (1)`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PreferencePair, Segment};
use crate::error::{Error, Result};
use crate::loss::RewardDiff;

pub type FeatureVector = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Architecture {
    Linear,
    Mlp2 { hidden: usize },
}

impl Architecture {
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn mlp2() -> Self {
        Architecture::Mlp2 {
            hidden: Self::DEFAULT_HIDDEN,
        }
    }

    pub fn param_count(self, input_dim: usize) -> usize {
        match self {
            Architecture::Linear => input_dim + 1,
            Architecture::Mlp2 { hidden: h } => h * input_dim + h + h * h + h + h + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    // Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture descriptor plus flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub architecture: Architecture,
    #[serde(default)]
    pub activation: Activation,
    pub input_dim: usize,
    pub params: Vec<f64>,
}

struct Mlp2View<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    w3: &'a [f64],
    b3: f64,
}

struct Mlp2Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

fn mlp2_offsets(d: usize, h: usize) -> Mlp2Offsets {
    let w1 = 0;
    let b1 = w1 + h * d;
    let w2 = b1 + h;
    let b2 = w2 + h * h;
    let w3 = b2 + h;
    let b3 = w3 + h;
    Mlp2Offsets {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
    }
}

impl RewardModel {
    pub fn zeros(architecture: Architecture, input_dim: usize) -> Self {
        Self {
            architecture,
            activation: Activation::default(),
            input_dim,
            params: vec![0.0; architecture.param_count(input_dim)],
        }
    }

    /// Fan-in scaled uniform initialization, `U(-1/√fan_in, 1/√fan_in)` for
    /// weights and zero biases.
    pub fn init(architecture: Architecture, input_dim: usize, seed: u64) -> Self {
        let mut model = Self::zeros(architecture, input_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for w in slice {
                *w = rng.random_range(-bound..bound);
            }
        };
        match architecture {
            Architecture::Linear => fill(&mut model.params[..input_dim], input_dim),
            Architecture::Mlp2 { hidden: h } => {
                let o = mlp2_offsets(input_dim, h);
                fill(&mut model.params[o.w1..o.b1], input_dim);
                fill(&mut model.params[o.w2..o.b2], h);
                fill(&mut model.params[o.w3..o.b3], h);
            }
        }
        model
    }

    pub fn linear(weights: Vec<f64>, bias: f64) -> Self {
        let input_dim = weights.len();
        let mut params = weights;
        params.push(bias);
        Self {
            architecture: Architecture::Linear,
            activation: Activation::default(),
            input_dim,
            params,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.architecture.param_count(self.input_dim);
        if self.params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.params.len(),
            });
        }
        if let Architecture::Mlp2 { hidden: 0 } = self.architecture {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// Negated copy: `-r` for every input.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        match self.architecture {
            Architecture::Linear => out.params.iter_mut().for_each(|p| *p = -*p),
            Architecture::Mlp2 { hidden } => {
                let o = mlp2_offsets(self.input_dim, hidden);
                out.params[o.w3..].iter_mut().for_each(|p| *p = -*p);
            }
        }
        out
    }

    fn mlp2_view(&self, h: usize) -> Mlp2View<'_> {
        let o = mlp2_offsets(self.input_dim, h);
        let p = &self.params;
        Mlp2View {
            w1: &p[o.w1..o.b1],
            b1: &p[o.b1..o.w2],
            w2: &p[o.w2..o.b2],
            b2: &p[o.b2..o.w3],
            w3: &p[o.w3..o.b3],
            b3: p[o.b3],
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Per-step reward `r(x)`.
    pub fn reward(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.reward_unchecked(x))
    }

    fn reward_unchecked(&self, x: &[f64]) -> f64 {
        match self.architecture {
            Architecture::Linear => {
                dot(&self.params[..self.input_dim], x) + self.params[self.input_dim]
            }
            Architecture::Mlp2 { hidden } => {
                let (_, a2) = self.hidden_activations(hidden, x);
                let v = self.mlp2_view(hidden);
                dot(v.w3, &a2) + v.b3
            }
        }
    }

    fn hidden_activations(&self, h: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let v = self.mlp2_view(h);
        let d = self.input_dim;
        let a1: Vec<f64> = (0..h)
            .map(|j| {
                self.activation
                    .apply(dot(&v.w1[j * d..(j + 1) * d], x) + v.b1[j])
            })
            .collect();
        let a2: Vec<f64> = (0..h)
            .map(|j| {
                self.activation
                    .apply(dot(&v.w2[j * h..(j + 1) * h], &a1) + v.b2[j])
            })
            .collect();
        (a1, a2)
    }

    /// Adds `scale · ∂r(x)/∂φ` into `grad`.
    fn accumulate_reward_grad(&self, x: &[f64], scale: f64, grad: &mut [f64]) {
        if scale == 0.0 {
            return;
        }
        let d = self.input_dim;
        match self.architecture {
            Architecture::Linear => {
                for (g, xi) in grad[..d].iter_mut().zip(x) {
                    *g += scale * xi;
                }
                grad[d] += scale;
            }
            Architecture::Mlp2 { hidden: h } => {
                let (a1, a2) = self.hidden_activations(h, x);
                let v = self.mlp2_view(h);
                let o = mlp2_offsets(d, h);
                // Output layer.
                for j in 0..h {
                    grad[o.w3 + j] += scale * a2[j];
                }
                grad[o.b3] += scale;
                // Second hidden layer.
                let delta2: Vec<f64> = (0..h)
                    .map(|j| scale * v.w3[j] * self.activation.derivative_from_output(a2[j]))
                    .collect();
                let mut back1 = vec![0.0; h];
                for j in 0..h {
                    let dj = delta2[j];
                    if dj == 0.0 {
                        continue;
                    }
                    let row = &v.w2[j * h..(j + 1) * h];
                    let grow = &mut grad[o.w2 + j * h..o.w2 + (j + 1) * h];
                    for k in 0..h {
                        grow[k] += dj * a1[k];
                        back1[k] += dj * row[k];
                    }
                    grad[o.b2 + j] += dj;
                }
                // First hidden layer.
                for k in 0..h {
                    let dk = back1[k] * self.activation.derivative_from_output(a1[k]);
                    if dk == 0.0 {
                        continue;
                    }
                    let grow = &mut grad[o.w1 + k * d..o.w1 + (k + 1) * d];
                    for (g, xi) in grow.iter_mut().zip(x) {
                        *g += dk * xi;
                    }
                    grad[o.b1 + k] += dk;
                }
            }
        }
    }

    /// Discounted segment reward `Σ_t γ^t r(s_t, a_t)`, `t` counted from 0.
    pub fn segment_reward(&self, segment: &Segment, gamma: f64) -> Result<f64> {
        if segment.steps.is_empty() {
            return Err(Error::InvalidInput("empty segment".into()));
        }
        let mut total = 0.0;
        let mut discount = 1.0;
        for step in &segment.steps {
            total += discount * self.reward(step)?;
            discount *= gamma;
        }
        Ok(total)
    }

    /// `r(winner) - r(loser)` at the segment level.
    pub fn pair_delta(&self, pair: &PreferencePair, gamma: f64) -> Result<RewardDiff> {
        let delta =
            self.segment_reward(&pair.winner, gamma)? - self.segment_reward(&pair.loser, gamma)?;
        RewardDiff::new(delta)
    }

    /// Gradient of `upstream · Δ(φ)` with respect to every parameter.
    pub fn backward(&self, pair: &PreferencePair, gamma: f64, upstream: f64) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_pair_grad(pair, gamma, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Adds the gradient of `upstream · Δ(φ)` into `grad`.
    pub fn accumulate_pair_grad(
        &self,
        pair: &PreferencePair,
        gamma: f64,
        upstream: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if !upstream.is_finite() {
            return Err(Error::NonFinite(format!("upstream gradient {upstream}")));
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        for (segment, sign) in [(&pair.winner, 1.0), (&pair.loser, -1.0)] {
            let mut discount = 1.0;
            for step in &segment.steps {
                self.check_dim(step)?;
                self.accumulate_reward_grad(step, sign * upstream * discount, grad);
                discount *= gamma;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        }
    }

    /// Writes the versioned JSON checkpoint.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, &self.to_checkpoint())?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(input)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unexpected checkpoint format {:?}",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.model.validate()?;
        Ok(ckpt.model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "adapref-reward-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: a format tag, a version and the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: RewardModel,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelMode;

    fn seg(steps: Vec<Vec<f64>>) -> Segment {
        Segment { steps }
    }

    fn pair(w: Vec<Vec<f64>>, l: Vec<Vec<f64>>) -> PreferencePair {
        PreferencePair {
            winner: seg(w),
            loser: seg(l),
            strength: 0.0,
            label_mode: LabelMode::Deterministic,
            p_star: None,
        }
    }

    fn random_pair(rng: &mut ChaCha8Rng, d: usize, len: usize) -> PreferencePair {
        let mut s = || {
            (0..len)
                .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
                .collect()
        };
        let w = s();
        let l = s();
        pair(w, l)
    }

    #[test]
    fn forward_examples() {
        let zero = RewardModel::zeros(Architecture::Linear, 3);
        assert_eq!(zero.reward(&[1.0, -2.0, 5.0]).unwrap(), 0.0);
        let m = RewardModel::linear(vec![1.0, 2.0], 0.0);
        assert_eq!(m.reward(&[3.0, -1.0]).unwrap(), 1.0);
        assert!(m.reward(&[1.0]).is_err());

        let mut mlp = RewardModel::init(Architecture::Mlp2 { hidden: 5 }, 3, 1);
        let o = mlp2_offsets(3, 5);
        mlp.params[o.w3..o.b3].iter_mut().for_each(|w| *w = 0.0);
        mlp.params[o.b3] = 0.25;
        assert_eq!(mlp.reward(&[0.3, -1.0, 2.0]).unwrap(), 0.25);
    }

    #[test]
    fn segment_reward_examples() {
        let m = RewardModel::linear(vec![1.0, 0.0], 0.5);
        let one = seg(vec![vec![2.0, 7.0]]);
        assert_eq!(m.segment_reward(&one, 0.3).unwrap(), 2.5);
        let c = RewardModel::linear(vec![0.0], 1.0);
        let two = seg(vec![vec![1.0], vec![1.0]]);
        assert_eq!(c.segment_reward(&two, 1.0).unwrap(), 2.0);
        let long = seg(vec![vec![0.0]; 25]);
        let expected: f64 = (0..25).map(|t| 0.99f64.powi(t)).sum();
        let got = c.segment_reward(&long, 0.99).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 22.218).abs() < 1e-3);
        assert!(c.segment_reward(&seg(vec![]), 0.9).is_err());
    }

    #[test]
    fn pair_delta_antisymmetry_and_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = RewardModel::init(Architecture::Mlp2 { hidden: 6 }, 4, 9);
        let p = random_pair(&mut rng, 4, 3);
        let same = pair(p.winner.steps.clone(), p.winner.steps.clone());
        assert_eq!(m.pair_delta(&same, 0.9).unwrap().value(), 0.0);
        let swapped = pair(p.loser.steps.clone(), p.winner.steps.clone());
        let a = m.pair_delta(&p, 0.9).unwrap().value();
        let b = m.pair_delta(&swapped, 0.9).unwrap().value();
        assert_eq!(a, -b);

        // Shifting the output bias changes every step reward by the same
        // constant; equal-length segments keep the same difference.
        let mut shifted = m.clone();
        *shifted.params.last_mut().unwrap() += 3.0;
        let c = shifted.pair_delta(&p, 0.9).unwrap().value();
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn linear_delta_is_linear_in_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pair(&mut rng, 3, 2);
        let m = RewardModel::linear(vec![0.3, -1.2, 0.8], 0.1);
        let mut doubled = m.clone();
        doubled.params.iter_mut().for_each(|w| *w *= 2.0);
        let a = m.pair_delta(&p, 0.95).unwrap().value();
        let b = doubled.pair_delta(&p, 0.95).unwrap().value();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn backward_linear_closed_form() {
        let m = RewardModel::linear(vec![0.4, -0.7], 2.0);
        let p = pair(vec![vec![1.0, 3.0]], vec![vec![-2.0, 0.5]]);
        let g = m.backward(&p, 1.0, -0.3).unwrap();
        assert!((g[0] - -0.3 * 3.0).abs() < 1e-15);
        assert!((g[1] - -0.3 * 2.5).abs() < 1e-15);
        assert_eq!(g[2], 0.0);
        let zero = m.backward(&p, 1.0, 0.0).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(m.backward(&p, 1.0, f64::NAN).is_err());
    }

    fn fd_check(model: &RewardModel, p: &PreferencePair, gamma: f64, coords: &[usize]) {
        let upstream = -0.37;
        let g = model.backward(p, gamma, upstream).unwrap();
        let h = 1e-6;
        for &i in coords {
            let mut plus = model.clone();
            plus.params[i] += h;
            let mut minus = model.clone();
            minus.params[i] -= h;
            let fd = upstream
                * (plus.pair_delta(p, gamma).unwrap().value()
                    - minus.pair_delta(p, gamma).unwrap().value())
                / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (g[i] - fd).abs() / scale < 1e-4,
                "coord {i}: {} vs {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for activation in [Activation::Tanh, Activation::Relu] {
            let model = RewardModel::init(Architecture::Mlp2 { hidden: 7 }, 4, 2)
                .with_activation(activation);
            let p = random_pair(&mut rng, 4, 3);
            let coords: Vec<usize> = (0..20)
                .map(|_| rng.random_range(0..model.param_count()))
                .collect();
            fd_check(&model, &p, 0.9, &coords);
        }
        let lin = RewardModel::init(Architecture::Linear, 5, 4);
        let p = random_pair(&mut rng, 5, 2);
        fd_check(&lin, &p, 0.8, &(0..6).collect::<Vec<_>>());
    }

    #[test]
    fn negated_model_flips_rewards() {
        let m = RewardModel::init(Architecture::Mlp2 { hidden: 4 }, 3, 8);
        let x = [0.2, -0.4, 1.1];
        assert!((m.reward(&x).unwrap() + m.negated().reward(&x).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let m = RewardModel::init(Architecture::Mlp2 { hidden: 3 }, 2, 5);
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = RewardModel::load(buf.as_slice()).unwrap();
        assert_eq!(back, m);

        let text = String::from_utf8(buf)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            RewardModel::load(text.as_bytes()),
            Err(Error::Format(_))
        ));
    }
}
