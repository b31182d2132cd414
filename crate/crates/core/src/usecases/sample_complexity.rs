//! Estimator quality as a function of training-set size, for the full and
//! essential feature profiles.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::posthoc::{PosthocModel, TrainSpec};
use crate::calibration::{ece, spearman};
use crate::data::{Corpus, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::features::Profile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleComplexityConfig {
    pub sizes: Vec<usize>,
    /// Independent training draws per size, averaged.
    pub repeats: usize,
    pub bins: usize,
    /// Profile is overridden per variant; the seed is offset per repeat.
    pub spec: TrainSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleComplexityRow {
    pub size: usize,
    pub variant: String,
    /// Mean test ECE over the repeats.
    pub ece: f64,
    /// Mean over repeats where it is defined.
    pub spearman: Option<f64>,
    pub repeats: usize,
}

/// Trains on `size` records drawn from `train_posthoc` and evaluates on
/// `test`, for each size, repeat and profile. Both profiles of a repeat see
/// the same draw.
pub fn sample_complexity(
    corpus: &Corpus,
    model_id: &str,
    cfg: &SampleComplexityConfig,
) -> Result<Vec<SampleComplexityRow>> {
    if cfg.repeats == 0 || cfg.sizes.is_empty() {
        return Err(Error::Config("need at least one size and one repeat".into()));
    }
    corpus.require_model(model_id)?;
    let pool = corpus.require_split(Split::TrainPosthoc)?;
    let test = corpus.require_split(Split::Test)?;
    if let Some(s) = cfg.sizes.iter().find(|s| **s < 2 || **s > pool.len()) {
        return Err(Error::Config(format!(
            "training size {s} must be between 2 and the {} train_posthoc records",
            pool.len()
        )));
    }
    let variants = [("full", Profile::Full), ("essential", Profile::Essential)];
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        let mut eces = [0.0; 2];
        let mut rhos: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for rep in 0..cfg.repeats {
            let seed = cfg.seed.wrapping_add(rep as u64);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let train: Vec<&ImageRecord> = order[..size].iter().map(|&i| pool[i]).collect();
            for (v, (_, profile)) in variants.iter().enumerate() {
                let mut spec = cfg.spec.clone();
                spec.pipeline.profile = profile.clone();
                spec.boost.seed = seed;
                spec.mlp.seed = seed;
                let model = PosthocModel::train(&train, corpus.task, model_id, corpus.num_classes, &spec)?;
                let pred = model.predict(&test)?;
                let truth = model.truth(&test)?;
                eces[v] += ece(&pred, &truth, cfg.bins)?.0;
                if let Ok(r) = spearman(&pred, &truth) {
                    rhos[v].push(r);
                }
            }
        }
        for (v, (name, _)) in variants.iter().enumerate() {
            rows.push(SampleComplexityRow {
                size,
                variant: name.to_string(),
                ece: eces[v] / cfg.repeats as f64,
                spearman: (!rhos[v].is_empty()).then(|| rhos[v].iter().sum::<f64>() / rhos[v].len() as f64),
                repeats: cfg.repeats,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split;
    use crate::data::synth::{generate_synthetic, Preset, SyntheticConfig};
    use crate::estimators::EstimatorKind;
    use crate::metrics::Metric;

    fn cfg(sizes: Vec<usize>) -> SampleComplexityConfig {
        let mut spec = TrainSpec::new(Metric::F1, Profile::Full, EstimatorKind::Boost, 0);
        spec.boost.num_rounds = 10;
        SampleComplexityConfig {
            sizes,
            repeats: 2,
            bins: 10,
            spec,
            seed: 9,
        }
    }

    #[test]
    fn one_row_per_size_and_variant() {
        let mut sc = SyntheticConfig::preset(Preset::FeatureLinked);
        sc.num_images = 200;
        let c = split(&generate_synthetic(&sc, 1).unwrap(), (0.0, 0.5, 0.5), 1).unwrap();
        let rows = sample_complexity(&c, "det", &cfg(vec![20, 60])).unwrap();
        let keys: Vec<(usize, &str)> = rows.iter().map(|r| (r.size, r.variant.as_str())).collect();
        assert_eq!(
            keys,
            vec![(20, "full"), (20, "essential"), (60, "full"), (60, "essential")]
        );
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.ece)));
        assert_eq!(rows, sample_complexity(&c, "det", &cfg(vec![20, 60])).unwrap());
        assert!(sample_complexity(&c, "det", &cfg(vec![1000])).is_err());
    }
}
