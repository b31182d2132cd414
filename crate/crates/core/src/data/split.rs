use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Split, Task};
use crate::error::{Error, Result};

/// Number of records that `fraction` of `n` rounds down to.
fn share(fraction: f64, n: usize) -> usize {
    // The epsilon keeps 0.3 * 10 = 2.9999999999999996-style products exact.
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Assigns every record to one of the three splits.
///
/// Records are shuffled with a seeded generator; the first ⌊f₁·n⌋ go to
/// `train_fc`, the next ⌊f₂·n⌋ to `train_posthoc` and the rest to `test`.
pub fn split(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<Corpus> {
    let (f1, f2, f3) = fractions;
    let fs = [f1, f2, f3];
    if fs.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Config(format!("split fractions {fs:?} must be nonnegative")));
    }
    if (f1 + f2 + f3 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fs:?} must sum to 1")));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n1 = share(f1, n).min(n);
    let n2 = share(f2, n).min(n - n1);
    let mut splits = BTreeMap::new();
    for (pos, &i) in order.iter().enumerate() {
        let s = if pos < n1 {
            Split::TrainFc
        } else if pos < n1 + n2 {
            Split::TrainPosthoc
        } else {
            Split::Test
        };
        splits.insert(corpus.records[i].image_id.clone(), s);
    }
    Ok(Corpus {
        splits,
        ..corpus.clone()
    })
}

/// Emulates a class-prior shift on a classification corpus.
///
/// Keeps only records whose true class is in `kept_classes` and subsamples
/// each kept class so the class counts follow `frequencies`. The largest
/// admissible scale is used, so at least one class keeps all its records.
/// Surviving records keep their contents, order and split labels.
pub fn resample_shift(corpus: &Corpus, kept_classes: &[usize], frequencies: &[f64], seed: u64) -> Result<Corpus> {
    if corpus.task != Task::Classification {
        return Err(Error::Config(
            "resampling by class needs a classification corpus".into(),
        ));
    }
    if kept_classes.is_empty() || kept_classes.len() != frequencies.len() {
        return Err(Error::Config(format!(
            "{} kept classes but {} frequencies",
            kept_classes.len(),
            frequencies.len()
        )));
    }
    if frequencies.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(Error::Config("frequencies must be positive".into()));
    }
    let distinct: BTreeSet<_> = kept_classes.iter().collect();
    if distinct.len() != kept_classes.len() {
        return Err(Error::Config("kept classes must be distinct".into()));
    }

    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.records.iter().enumerate() {
        if let Some(c) = r.true_class() {
            if kept_classes.contains(&c) {
                members.entry(c).or_default().push(i);
            }
        }
    }
    for c in kept_classes {
        if !members.contains_key(c) {
            return Err(Error::InvalidInput(format!("class {c} does not occur in the corpus")));
        }
    }

    let scale = kept_classes
        .iter()
        .zip(frequencies)
        .map(|(c, f)| members[c].len() as f64 / f)
        .fold(f64::INFINITY, f64::min);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; corpus.len()];
    for (c, f) in kept_classes.iter().zip(frequencies) {
        let pool = &members[c];
        let target = share(scale * f, 1).min(pool.len());
        let chosen: Vec<usize> = pool.choose_multiple(&mut rng, target).copied().collect();
        for i in chosen {
            keep[i] = true;
        }
    }
    let mut idx = 0;
    Ok(corpus.filtered(|_| {
        let k = keep[idx];
        idx += 1;
        k
    }))
}
