//! Multiclass boosting with one tree per class per round (softmax loss).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boost::{draw_subsample, training_columns, BoostConfig};
use super::tree::{fit_tree, Node, Presorted, Tree};
use crate::data::argmax;
use crate::error::{Error, Result};
use crate::features::{softmax, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedClassifier {
    pub feature_names: Vec<String>,
    pub num_classes: usize,
    /// Classes seen in training; the others are never predicted.
    pub present: Vec<bool>,
    /// Initial score per class: log of its training frequency, 0 when absent.
    pub base_scores: Vec<f64>,
    /// `rounds[r][k]` is round `r`'s tree for class `k`, `None` for absent classes.
    pub rounds: Vec<Vec<Option<Tree>>>,
    pub config: BoostConfig,
}

impl BoostedClassifier {
    pub fn train(x: &FeatureMatrix, labels: &[usize], num_classes: usize, config: &BoostConfig) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let columns = training_columns(x, &y)?;
        let n = labels.len();
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            counts[l] += 1;
        }
        let present: Vec<bool> = counts.iter().map(|c| *c > 0).collect();
        for (k, p) in present.iter().enumerate() {
            if !p {
                log::warn!("class {k} never occurs in training data and will never be predicted");
            }
        }
        let base_scores: Vec<f64> = counts
            .iter()
            .map(|&c| if c > 0 { (c as f64 / n as f64).ln() } else { 0.0 })
            .collect();

        let data = Presorted::new(&columns);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let initial: Vec<f64> = base_scores
            .iter()
            .zip(&present)
            .map(|(b, p)| if *p { *b } else { f64::NEG_INFINITY })
            .collect();
        let mut scores: Vec<Vec<f64>> = vec![initial; n];
        let mut residual = vec![0.0; n];
        let mut rounds = Vec::with_capacity(config.num_rounds);
        let params = config.tree_params();
        for _ in 0..config.num_rounds {
            let probs: Vec<Vec<f64>> = scores.iter().map(|s| masked_softmax(s)).collect();
            let in_bag = draw_subsample(&mut rng, n, config.subsample);
            let mut round = Vec::with_capacity(num_classes);
            for k in 0..num_classes {
                if !present[k] {
                    round.push(None);
                    continue;
                }
                for i in 0..n {
                    residual[i] = (labels[i] == k) as u8 as f64 - probs[i][k];
                }
                let mut tree = fit_tree(&data, &in_bag, &residual, params);
                for node in &mut tree.nodes {
                    if let Node::Leaf { value } = node {
                        *value *= config.learning_rate;
                    }
                }
                round.push(Some(tree));
            }
            for (i, s) in scores.iter_mut().enumerate() {
                for (k, t) in round.iter().enumerate() {
                    if let Some(t) = t {
                        s[k] += t.predict(&x.rows[i]);
                    }
                }
            }
            rounds.push(round);
        }
        Ok(BoostedClassifier {
            feature_names: x.names.clone(),
            num_classes,
            present,
            base_scores,
            rounds,
            config: config.clone(),
        })
    }

    /// Per-class scores; absent classes score −∞.
    pub fn scores_row(&self, row: &[f64]) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .base_scores
            .iter()
            .zip(&self.present)
            .map(|(b, p)| if *p { *b } else { f64::NEG_INFINITY })
            .collect();
        for round in &self.rounds {
            for (k, t) in round.iter().enumerate() {
                if let Some(t) = t {
                    s[k] += t.predict(row);
                }
            }
        }
        s
    }

    pub fn probabilities_row(&self, row: &[f64]) -> Vec<f64> {
        masked_softmax(&self.scores_row(row))
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict_row(&self, row: &[f64]) -> usize {
        argmax(&self.scores_row(row))
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        x.require_names(&self.feature_names)?;
        Ok(x.rows.iter().map(|r| self.predict_row(r)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ModelFile(m.to_string()));
        if self.present.len() != self.num_classes || self.base_scores.len() != self.num_classes {
            return bad("class vectors do not match num_classes");
        }
        if !self.present.contains(&true) {
            return bad("classifier has no classes");
        }
        if self.base_scores.iter().any(|b| !b.is_finite()) {
            return bad("base scores must be finite");
        }
        for round in &self.rounds {
            if round.len() != self.num_classes {
                return bad("round has the wrong number of trees");
            }
            for (k, t) in round.iter().enumerate() {
                match t {
                    Some(t) if self.present[k] => t.validate(self.feature_names.len())?,
                    None if !self.present[k] => {}
                    _ => return bad("tree presence does not match class presence"),
                }
            }
        }
        Ok(())
    }
}

fn masked_softmax(scores: &[f64]) -> Vec<f64> {
    if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
        return vec![0.0; scores.len()];
    }
    softmax(scores)
}
