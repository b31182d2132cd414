//! Fully connected regressor with two ReLU hidden layers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boost::training_columns;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Hidden widths; derived from the input width when absent.
    pub hidden: Option<(usize, usize)>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: None,
            learning_rate: 0.03,
            epochs: 500,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn with_seed(seed: u64) -> Self {
        MlpConfig {
            seed,
            ..Self::default()
        }
    }
}

/// Narrowest hidden layer; single-unit ReLU layers die too easily.
pub const MIN_HIDDEN: usize = 4;

/// Two thirds of the input, then two thirds of the first hidden layer, each
/// at least [`MIN_HIDDEN`].
pub fn hidden_widths(input: usize) -> (usize, usize) {
    let shrink = |w: usize| ((2.0 * w as f64 / 3.0).round() as usize).max(MIN_HIDDEN);
    let h1 = shrink(input);
    (h1, shrink(h1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub feature_names: Vec<String>,
    /// Per-feature training mean and standard deviation (1 for constant features).
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub layers: [Dense; 3],
    pub config: MlpConfig,
    pub clamp: bool,
}

/// Activations of one forward pass.
struct Trace {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    out: f64,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

impl Mlp {
    /// Untrained network with standardization fitted to `x`.
    pub fn init(x: &FeatureMatrix, config: &MlpConfig, clamp: bool) -> Result<Self> {
        let d = x.width();
        if d == 0 {
            return Err(Error::InvalidInput("training data has no features".into()));
        }
        let (h1, h2) = config.hidden.unwrap_or_else(|| hidden_widths(d));
        if h1 == 0 || h2 == 0 {
            return Err(Error::Config("hidden layers must be non-empty".into()));
        }
        let n = x.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d)
            .map(|j| {
                let var = x.rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = [
            Dense::init(&mut rng, d, h1),
            Dense::init(&mut rng, h1, h2),
            Dense::init(&mut rng, h2, 1),
        ];
        Ok(Mlp {
            feature_names: x.names.clone(),
            mean,
            std,
            layers,
            config: config.clone(),
            clamp,
        })
    }

    /// Trains by mini-batch SGD on `0.5 · mean squared error`. The hidden
    /// layers start uniform in `±1/√fan_in`; the output layer starts at zero
    /// weights with the target mean as bias.
    pub fn train(x: &FeatureMatrix, y: &[f64], config: &MlpConfig, clamp: bool) -> Result<Self> {
        training_columns(x, y)?;
        if config.batch_size == 0 || !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        let mut net = Mlp::init(x, config, clamp)?;
        // Start from the target mean, like the boosted base score.
        let out = &mut net.layers[2];
        out.weights.fill(0.0);
        out.bias[0] = y.iter().sum::<f64>() / y.len() as f64;
        let inputs: Vec<Vec<f64>> = x.rows.iter().map(|r| net.standardize(r)).collect();
        // Batch order has its own stream.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut order: Vec<usize> = (0..y.len()).collect();
        let mut grad = vec![0.0; net.num_params()];
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                grad.fill(0.0);
                for &i in batch {
                    net.accumulate_gradient(&inputs[i], y[i], &mut grad);
                }
                let step = config.learning_rate / batch.len() as f64;
                net.apply_step(&grad, step);
            }
        }
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("training diverged to non-finite weights".into()));
        }
        Ok(net)
    }

    pub fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn trace(&self, input: &[f64]) -> Trace {
        let mut pre1 = Vec::new();
        self.layers[0].forward(input, &mut pre1);
        let act1 = relu(&pre1);
        let mut pre2 = Vec::new();
        self.layers[1].forward(&act1, &mut pre2);
        let act2 = relu(&pre2);
        let mut out = Vec::new();
        self.layers[2].forward(&act2, &mut out);
        Trace {
            input: input.to_vec(),
            pre1,
            act1,
            pre2,
            act2,
            out: out[0],
        }
    }

    /// Smallest absolute hidden pre-activation over the inputs. Finite
    /// differences are only meaningful when this is well above the step.
    pub fn kink_margin(&self, inputs: &[Vec<f64>]) -> f64 {
        inputs
            .iter()
            .flat_map(|x| {
                let t = self.trace(x);
                t.pre1.into_iter().chain(t.pre2)
            })
            .map(f64::abs)
            .fold(f64::INFINITY, f64::min)
    }

    /// Output for an already standardized input.
    pub fn forward_standardized(&self, input: &[f64]) -> f64 {
        self.trace(input).out
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let out = self.forward_standardized(&self.standardize(row));
        if self.clamp {
            out.clamp(0.0, 1.0)
        } else {
            out
        }
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        x.require_names(&self.feature_names)?;
        Ok(x.rows.iter().map(|r| self.predict_row(r)).collect())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// All weights and biases, layer by layer (weights then bias).
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend(&l.weights);
            p.extend(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::InvalidInput(format!(
                "{} parameters, network has {}",
                p.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    fn apply_step(&mut self, grad: &[f64], step: f64) {
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w -= step * grad[k];
                k += 1;
            }
        }
    }

    /// Adds the gradient of `0.5 · (out − y)²` for one standardized input.
    fn accumulate_gradient(&self, input: &[f64], y: f64, grad: &mut [f64]) {
        let t = self.trace(input);
        let [l1, l2, l3] = &self.layers;
        let o1 = l1.num_params();
        let o2 = o1 + l2.num_params();

        let d_out = t.out - y;
        // Output layer.
        for j in 0..l3.inputs {
            grad[o2 + j] += d_out * t.act2[j];
        }
        grad[o2 + l3.weights.len()] += d_out;

        let d2: Vec<f64> = (0..l2.outputs)
            .map(|j| if t.pre2[j] > 0.0 { d_out * l3.weights[j] } else { 0.0 })
            .collect();
        for (o, d) in d2.iter().enumerate() {
            for i in 0..l2.inputs {
                grad[o1 + o * l2.inputs + i] += d * t.act1[i];
            }
            grad[o1 + l2.weights.len() + o] += d;
        }

        let d1: Vec<f64> = (0..l1.outputs)
            .map(|i| {
                if t.pre1[i] > 0.0 {
                    d2.iter()
                        .enumerate()
                        .map(|(o, d)| d * l2.weights[o * l2.inputs + i])
                        .sum()
                } else {
                    0.0
                }
            })
            .collect();
        for (o, d) in d1.iter().enumerate() {
            for i in 0..l1.inputs {
                grad[o * l1.inputs + i] += d * t.input[i];
            }
            grad[l1.weights.len() + o] += d;
        }
    }

    /// Loss `0.5 · mean((out − y)²)` over standardized inputs and its gradient.
    pub fn loss_and_gradient(&self, inputs: &[Vec<f64>], y: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.num_params()];
        let mut loss = 0.0;
        for (x, t) in inputs.iter().zip(y) {
            let out = self.forward_standardized(x);
            loss += 0.5 * (out - t).powi(2);
            self.accumulate_gradient(x, *t, &mut grad);
        }
        let n = inputs.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_names.len();
        let bad = |m: &str| Err(Error::ModelFile(m.to_string()));
        if self.mean.len() != d || self.std.len() != d {
            return bad("standardization constants do not match the features");
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return bad("standardization constants must be finite with positive scale");
        }
        let [l1, l2, l3] = &self.layers;
        if l1.inputs != d || l2.inputs != l1.outputs || l3.inputs != l2.outputs || l3.outputs != 1 {
            return bad("layer shapes do not chain");
        }
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return bad("layer parameter counts do not match shapes");
            }
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return bad("non-finite weights");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        let names = (0..rows[0].len()).map(|j| format!("f{j}")).collect();
        FeatureMatrix::from_rows(names, rows).unwrap()
    }

    fn uniform_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn widths_follow_two_thirds_rule() {
        assert_eq!(hidden_widths(20), (13, 9));
        assert_eq!(hidden_widths(11), (7, 5));
        assert_eq!(hidden_widths(9), (6, 4));
        assert_eq!(hidden_widths(1), (4, 4));
    }

    #[test]
    fn constant_target() {
        let x = matrix(uniform_rows(500, 3, 1));
        let m = Mlp::train(&x, &[0.4; 500], &MlpConfig::default(), false).unwrap();
        for r in uniform_rows(20, 3, 2) {
            assert!((m.predict_row(&r) - 0.4).abs() < 0.01, "{}", m.predict_row(&r));
        }
    }

    #[test]
    fn linear_target() {
        let rows = uniform_rows(500, 1, 3);
        let y: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let m = Mlp::train(&matrix(rows), &y, &MlpConfig::default(), false).unwrap();
        let test = uniform_rows(500, 1, 4);
        let mse = test.iter().map(|r| (m.predict_row(r) - r[0]).powi(2)).sum::<f64>() / 500.0;
        assert!(mse < 0.01, "{mse}");
    }

    #[test]
    fn deterministic_per_seed() {
        let rows = uniform_rows(64, 2, 5);
        let y: Vec<f64> = rows.iter().map(|r| r[0] * r[1]).collect();
        let x = matrix(rows);
        let cfg = MlpConfig {
            epochs: 5,
            ..MlpConfig::with_seed(11)
        };
        assert_eq!(
            Mlp::train(&x, &y, &cfg, true).unwrap(),
            Mlp::train(&x, &y, &cfg, true).unwrap()
        );
    }

    #[test]
    fn params_round_trip() {
        let x = matrix(uniform_rows(10, 4, 6));
        let mut m = Mlp::init(&x, &MlpConfig::default(), false).unwrap();
        let p: Vec<f64> = (0..m.num_params()).map(|i| i as f64 * 0.01).collect();
        m.set_params(&p).unwrap();
        assert_eq!(m.params(), p);
        assert!(m.set_params(&p[1..]).is_err());
        m.validate().unwrap();
    }
}
