//! Calibration and ranking quality of per-example predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_pred: Option<f64>,
    pub mean_true: Option<f64>,
}

/// Equal-width bins over [0,1]; bin `j` covers `[j/J, (j+1)/J)` and the last
/// bin also holds 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Index of the bin holding `p`, consistent with the `j as f64 / J` edges.
pub fn bin_index(p: f64, num_bins: usize) -> usize {
    let jf = num_bins as f64;
    let mut j = ((p * jf).floor().max(0.0) as usize).min(num_bins - 1);
    while j > 0 && p < j as f64 / jf {
        j -= 1;
    }
    while j + 1 < num_bins && p >= (j + 1) as f64 / jf {
        j += 1;
    }
    j
}

fn check_unit_pairs(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions but {} true values",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("no predictions to evaluate".into()));
    }
    for (what, v) in [("prediction", pred), ("true value", truth)] {
        if let Some(i) = v.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidInput(format!("{what} {i} = {} is outside [0,1]", v[i])));
        }
    }
    Ok(())
}

/// Reliability bins of `(pred, truth)` pairs, binned by prediction.
pub fn reliability_bins(pred: &[f64], truth: &[f64], num_bins: usize) -> Result<ReliabilityBins> {
    check_unit_pairs(pred, truth)?;
    if num_bins == 0 {
        return Err(Error::Config("bin count must be at least 1".into()));
    }
    let mut count = vec![0usize; num_bins];
    let mut sum_pred = vec![0.0; num_bins];
    let mut sum_true = vec![0.0; num_bins];
    for (p, t) in pred.iter().zip(truth) {
        let j = bin_index(*p, num_bins);
        count[j] += 1;
        sum_pred[j] += p;
        sum_true[j] += t;
    }
    let jf = num_bins as f64;
    let bins = (0..num_bins)
        .map(|j| {
            let c = count[j];
            let mean = |s: f64| (c > 0).then(|| s / c as f64);
            Bin {
                lo: j as f64 / jf,
                hi: (j + 1) as f64 / jf,
                count: c,
                mean_pred: mean(sum_pred[j]),
                mean_true: mean(sum_true[j]),
            }
        })
        .collect();
    Ok(ReliabilityBins { bins })
}

/// Expected calibration error with `num_bins` equal-width bins.
pub fn ece(pred: &[f64], truth: &[f64], num_bins: usize) -> Result<(f64, ReliabilityBins)> {
    let bins = reliability_bins(pred, truth, num_bins)?;
    let n = pred.len() as f64;
    let mut total = 0.0;
    for b in &bins.bins {
        if let (Some(mp), Some(mt)) = (b.mean_pred, b.mean_true) {
            total += (b.count as f64 / n) * (mt - mp).abs();
        }
    }
    Ok((total, bins))
}

/// ECE for each bin count in `bin_counts`.
pub fn bin_sensitivity(pred: &[f64], truth: &[f64], bin_counts: &[usize]) -> Result<Vec<(usize, f64)>> {
    bin_counts
        .iter()
        .map(|&j| ece(pred, truth, j).map(|(e, _)| (j, e)))
        .collect()
}

fn check_pairs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 pairs".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("values must be finite".into()));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            ranks[i] = r;
        }
        start = end + 1;
    }
    ranks
}

/// Pearson correlation; undefined when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pairs(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Undefined("correlation with a constant sequence".into()));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pairs(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Coefficient of determination of `pred` against `truth`.
pub fn r2(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pairs(truth, pred)?;
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (t, p) in truth.iter().zip(pred) {
        ss_res += (t - p) * (t - p);
        ss_tot += (t - mean) * (t - mean);
    }
    if ss_tot == 0.0 {
        return Err(Error::Undefined("R² of a constant truth".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub ece: f64,
    /// `None` when undefined (constant input).
    pub spearman: Option<f64>,
    pub r2: Option<f64>,
    pub bins: ReliabilityBins,
}

impl CalibrationReport {
    pub fn compute(pred: &[f64], truth: &[f64], num_bins: usize) -> Result<Self> {
        let (e, bins) = ece(pred, truth, num_bins)?;
        let (spearman, r2) = if pred.len() < 2 {
            (None, None)
        } else {
            (defined(spearman(pred, truth))?, defined(r2(truth, pred))?)
        };
        Ok(CalibrationReport {
            n: pred.len(),
            ece: e,
            spearman,
            r2,
            bins,
        })
    }
}

/// Correct and incorrect counts per confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBin {
    pub lo: f64,
    pub hi: f64,
    pub correct: usize,
    pub incorrect: usize,
}

pub fn outcome_histogram(confidence: &[f64], correct: &[bool], num_bins: usize) -> Result<Vec<OutcomeBin>> {
    let as_f: Vec<f64> = correct.iter().map(|c| *c as u8 as f64).collect();
    let _ = reliability_bins(confidence, &as_f, num_bins)?;
    let jf = num_bins as f64;
    let mut out: Vec<OutcomeBin> = (0..num_bins)
        .map(|j| OutcomeBin {
            lo: j as f64 / jf,
            hi: (j + 1) as f64 / jf,
            correct: 0,
            incorrect: 0,
        })
        .collect();
    for (p, ok) in confidence.iter().zip(correct) {
        let b = &mut out[bin_index(*p, num_bins)];
        if *ok {
            b.correct += 1;
        } else {
            b.incorrect += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let v = [0.1, 0.5, 0.93, 1.0, 0.0];
        assert_eq!(ece(&v, &v, 10).unwrap().0, 0.0);
        assert!((spearman(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r2(&v, &v).unwrap(), 1.0);
    }

    #[test]
    fn single_bin_gap() {
        let truth = [0.6, 0.7, 0.65, 0.65, 0.6, 0.7, 0.65, 0.65, 0.6, 0.7];
        let (e, bins) = ece(&[0.75; 10], &truth, 10).unwrap();
        assert!((e - 0.10).abs() < 1e-12, "{e}");
        assert_eq!(bins.bins[7].count, 10);
    }

    #[test]
    fn weighted_average_of_two_bins() {
        let pred = [0.25, 0.25, 0.85, 0.85];
        let truth = [0.45, 0.45, 0.85, 0.85];
        assert!((ece(&pred, &truth, 10).unwrap().0 - 0.10).abs() < 1e-12);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(0.7, 10), 7);
        assert_eq!(bin_index(0.0999999, 10), 0);
        assert_eq!(bin_index(1.0, 1), 0);
    }

    #[test]
    fn ece_errors() {
        assert!(ece(&[0.1], &[0.1, 0.2], 10).is_err());
        assert!(ece(&[], &[], 10).is_err());
        assert!(ece(&[1.2], &[0.5], 10).is_err());
        assert!(ece(&[0.2], &[0.5], 0).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((s - 0.8).abs() < 1e-12, "{s}");
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn r2_examples() {
        assert_eq!(r2(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.0);
        let t = [0.2, 0.4, 0.9];
        let m = (0.2 + 0.4 + 0.9) / 3.0;
        assert!(r2(&t, &[m; 3]).unwrap().abs() < 1e-12);
        assert!(matches!(r2(&[0.5, 0.5], &[0.1, 0.2]), Err(Error::Undefined(_))));
    }

    #[test]
    fn sensitivity_single_bin_identity() {
        let pred = [0.2, 0.9, 0.5];
        let truth = [0.3, 0.3, 1.0];
        let s = bin_sensitivity(&pred, &truth, &[1, 5]).unwrap();
        let gap = ((0.3 + 0.3 + 1.0) / 3.0 - (0.2 + 0.9 + 0.5) / 3.0f64).abs();
        assert!((s[0].1 - gap).abs() < 1e-12);
        assert_eq!(s[1].0, 5);
        let perfect = bin_sensitivity(&pred, &pred, &[1, 5, 50]).unwrap();
        assert!(perfect.iter().all(|(_, e)| *e == 0.0));
    }

    #[test]
    fn report_with_constant_predictions() {
        let r = CalibrationReport::compute(&[0.5; 4], &[0.1, 0.9, 0.5, 0.5], 10).unwrap();
        assert_eq!(r.spearman, None);
        assert_eq!(r.n, 4);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<CalibrationReport>(&json).unwrap(), r);
    }

    #[test]
    fn outcome_counts() {
        let h = outcome_histogram(&[0.05, 0.95, 0.97, 1.0], &[false, true, false, true], 10).unwrap();
        assert_eq!((h[0].correct, h[0].incorrect), (0, 1));
        assert_eq!((h[9].correct, h[9].incorrect), (2, 1));
    }

    fn unit_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0..=1.0f64, n),
                prop::collection::vec(0.0..=1.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn ece_bounded_and_permutation_invariant((p, t) in unit_pairs(), j in 1usize..30, rot in 0usize..60) {
            let (e, bins) = ece(&p, &t, j).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert_eq!(bins.total(), p.len());
            let k = rot % p.len();
            let (mut p2, mut t2) = (p.clone(), t.clone());
            p2.rotate_left(k);
            t2.rotate_left(k);
            prop_assert!((ece(&p2, &t2, j).unwrap().0 - e).abs() < 1e-12);
        }

        #[test]
        fn ece_zero_when_bin_means_match((p, _) in unit_pairs(), j in 1usize..20) {
            // Truth equal to each bin's mean prediction.
            let bins = reliability_bins(&p, &p, j).unwrap();
            let t: Vec<f64> = p.iter().map(|x| bins.bins[bin_index(*x, j)].mean_pred.unwrap()).collect();
            prop_assert!(ece(&p, &t, j).unwrap().0 < 1e-12);
        }

        #[test]
        fn spearman_invariant_under_monotone_maps((p, t) in unit_pairs()) {
            prop_assume!(p.len() >= 2);
            if let Ok(s) = spearman(&p, &t) {
                let q: Vec<f64> = p.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
                prop_assert!((spearman(&q, &t).unwrap() - s).abs() < 1e-12);
            }
        }
    }
}
