//! Squared-error gradient boosting over regression trees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree, Presorted, Tree, TreeParams};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub max_depth: usize,
    /// Fraction of rows drawn without replacement for each tree.
    pub subsample: f64,
    pub learning_rate: f64,
    pub num_rounds: usize,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            max_depth: 5,
            subsample: 0.7,
            learning_rate: 0.1,
            num_rounds: 300,
            min_samples_leaf: 5,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn with_seed(seed: u64) -> Self {
        BoostConfig {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config(format!("subsample {} must be in (0,1]", self.subsample)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min_samples_leaf must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    pub feature_names: Vec<String>,
    /// Mean of the training targets.
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub config: BoostConfig,
    /// Whether predictions are clamped to [0,1].
    pub clamp: bool,
}

/// Checks a training set and returns its columns.
pub(crate) fn training_columns(x: &FeatureMatrix, y: &[f64]) -> Result<Vec<Vec<f64>>> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("{} rows but {} targets", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 training rows, got {}",
            x.len()
        )));
    }
    if x.width() == 0 {
        return Err(Error::InvalidInput("training data has no features".into()));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("target {i} is not finite")));
    }
    x.check()?;
    Ok((0..x.width()).map(|j| x.column(j)).collect())
}

/// Row mask with `⌊subsample·n⌋` rows set, at least one.
pub(crate) fn draw_subsample(rng: &mut ChaCha8Rng, n: usize, subsample: f64) -> Vec<bool> {
    let mut mask = vec![false; n];
    if subsample >= 1.0 {
        mask.fill(true);
        return mask;
    }
    let k = ((subsample * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    for i in rand::seq::index::sample(rng, n, k) {
        mask[i] = true;
    }
    mask
}

impl BoostedEnsemble {
    /// Fits `y` from `x`. With `clamp` set, predictions are clamped to [0,1].
    pub fn train(x: &FeatureMatrix, y: &[f64], config: &BoostConfig, clamp: bool) -> Result<Self> {
        config.validate()?;
        let columns = training_columns(x, y)?;
        let n = y.len();
        let base_score = y.iter().sum::<f64>() / n as f64;
        let data = Presorted::new(&columns);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut raw = vec![base_score; n];
        let mut residual = vec![0.0; n];
        let mut trees = Vec::with_capacity(config.num_rounds);
        let params = config.tree_params();
        for _ in 0..config.num_rounds {
            for i in 0..n {
                residual[i] = y[i] - raw[i];
            }
            let in_bag = draw_subsample(&mut rng, n, config.subsample);
            let mut tree = fit_tree(&data, &in_bag, &residual, params);
            for node in &mut tree.nodes {
                if let super::tree::Node::Leaf { value } = node {
                    *value *= config.learning_rate;
                }
            }
            for (i, r) in raw.iter_mut().enumerate() {
                *r += tree.predict(&x.rows[i]);
            }
            trees.push(tree);
        }
        Ok(BoostedEnsemble {
            feature_names: x.names.clone(),
            base_score,
            trees,
            config: config.clone(),
            clamp,
        })
    }

    /// Unclamped ensemble output for one row in training feature order.
    pub fn raw_score(&self, row: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let s = self.raw_score(row);
        if self.clamp {
            s.clamp(0.0, 1.0)
        } else {
            s
        }
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        x.require_names(&self.feature_names)?;
        Ok(x.rows.iter().map(|r| self.predict_row(r)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.base_score.is_finite() {
            return Err(Error::ModelFile("base score is not finite".into()));
        }
        for t in &self.trees {
            t.validate(self.feature_names.len())?;
            if t.depth() > self.config.max_depth {
                return Err(Error::ModelFile("tree deeper than max_depth".into()));
            }
        }
        Ok(())
    }
}
