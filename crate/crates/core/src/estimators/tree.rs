//! Regression trees grown by exact greedy variance reduction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    /// Checks that the node graph is a finite tree over `num_features` inputs.
    pub fn validate(&self, num_features: usize) -> Result<()> {
        let bad = |m: String| Err(Error::ModelFile(m));
        if self.nodes.is_empty() {
            return bad("tree has no nodes".into());
        }
        // Children must point forward, so every walk from the root terminates.
        for (i, n) in self.nodes.iter().enumerate() {
            match n {
                Node::Leaf { value } if !value.is_finite() => return bad(format!("leaf {i} is not finite")),
                Node::Leaf { .. } => {}
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if *feature >= num_features {
                        return bad(format!("node {i} splits on feature {feature} of {num_features}"));
                    }
                    if threshold.is_nan() {
                        return bad(format!("node {i} has a NaN threshold"));
                    }
                    if *left <= i || *right <= i || *left >= self.nodes.len() || *right >= self.nodes.len() {
                        return bad(format!("node {i} has invalid children"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

/// Gains at or below this are treated as no improvement.
const MIN_GAIN: f64 = 1e-12;

/// Gains equal up to rounding count as ties, which keep the earlier candidate.
fn improves(gain: f64, best: f64) -> bool {
    gain > best + 1e-10 * best.abs()
}

/// Midpoint between two distinct sorted values that still separates them.
pub fn split_threshold(lo: f64, hi: f64) -> f64 {
    let mid = lo / 2.0 + hi / 2.0;
    if mid > lo && mid <= hi {
        mid
    } else {
        hi
    }
}

/// Variance-reduction gain of splitting a node with target sum `s` over `n`
/// rows into a left part with sum `sl` over `nl` rows.
pub fn split_gain(sl: f64, nl: usize, s: f64, n: usize) -> f64 {
    let sr = s - sl;
    let nr = n - nl;
    sl * sl / nl as f64 + sr * sr / nr as f64 - s * s / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestSplit {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Column-major training data with every column presorted once.
pub struct Presorted<'a> {
    pub columns: &'a [Vec<f64>],
    /// `order[f]` lists row indices by ascending `columns[f]`, ties by index.
    pub order: Vec<Vec<u32>>,
}

impl<'a> Presorted<'a> {
    pub fn new(columns: &'a [Vec<f64>]) -> Self {
        let order = columns
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..col.len() as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Presorted { columns, order }
    }

    pub fn num_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

/// Best split of the rows listed (per feature, in ascending order) in `lists`.
fn best_split(data: &Presorted, lists: &[Vec<u32>], targets: &[f64], min_leaf: usize) -> Option<BestSplit> {
    let n = lists[0].len();
    if n < 2 * min_leaf.max(1) {
        return None;
    }
    let total: f64 = lists[0].iter().map(|&i| targets[i as usize]).sum();
    let mut best: Option<BestSplit> = None;
    for (f, list) in lists.iter().enumerate() {
        let col = &data.columns[f];
        let mut sl = 0.0;
        for k in 0..n - 1 {
            let i = list[k] as usize;
            sl += targets[i];
            let nl = k + 1;
            if nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let (a, b) = (col[i], col[list[k + 1] as usize]);
            if a.partial_cmp(&b) != Some(std::cmp::Ordering::Less) {
                continue;
            }
            let gain = split_gain(sl, nl, total, n);
            if gain > MIN_GAIN && best.is_none_or(|bs| improves(gain, bs.gain)) {
                best = Some(BestSplit {
                    feature: f,
                    threshold: split_threshold(a, b),
                    gain,
                });
            }
        }
    }
    best
}

/// Grows one tree on the rows with `in_bag[i]` set, fitting `targets`.
pub fn fit_tree(data: &Presorted, in_bag: &[bool], targets: &[f64], params: TreeParams) -> Tree {
    let lists: Vec<Vec<u32>> = data
        .order
        .iter()
        .map(|o| o.iter().copied().filter(|&i| in_bag[i as usize]).collect())
        .collect();
    let mut tree = Tree { nodes: Vec::new() };
    let mut goes_left = vec![false; data.num_rows()];
    grow(data, lists, targets, params, 0, &mut tree, &mut goes_left);
    tree
}

fn grow(
    data: &Presorted,
    lists: Vec<Vec<u32>>,
    targets: &[f64],
    params: TreeParams,
    depth: usize,
    tree: &mut Tree,
    goes_left: &mut [bool],
) -> usize {
    let id = tree.nodes.len();
    let rows = &lists[0];
    let mean = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|&i| targets[i as usize]).sum::<f64>() / rows.len() as f64
    };
    tree.nodes.push(Node::Leaf { value: mean });
    if depth >= params.max_depth {
        return id;
    }
    let Some(split) = best_split(data, &lists, targets, params.min_samples_leaf) else {
        return id;
    };
    let col = &data.columns[split.feature];
    for &i in rows {
        goes_left[i as usize] = col[i as usize] < split.threshold;
    }
    let (left_lists, right_lists): (Vec<_>, Vec<_>) = lists
        .into_iter()
        .map(|l| l.into_iter().partition::<Vec<u32>, _>(|&i| goes_left[i as usize]))
        .unzip();
    let left = grow(data, left_lists, targets, params, depth + 1, tree, goes_left);
    let right = grow(data, right_lists, targets, params, depth + 1, tree, goes_left);
    tree.nodes[id] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect()
    }

    /// Every (feature, midpoint) candidate, scored by direct recomputation.
    #[allow(clippy::needless_range_loop)]
    fn exhaustive(rows: &[Vec<f64>], idx: &[usize], y: &[f64], min_leaf: usize) -> Option<(usize, f64, f64)> {
        let mean = |s: &[usize]| s.iter().map(|&i| y[i]).sum::<f64>() / s.len() as f64;
        let sse = |s: &[usize]| {
            let m = mean(s);
            s.iter().map(|&i| (y[i] - m).powi(2)).sum::<f64>()
        };
        let base = sse(idx);
        let mut best: Option<(usize, f64, f64)> = None;
        for f in 0..rows[0].len() {
            let mut vals: Vec<f64> = idx.iter().map(|&i| rows[i][f]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let t = split_threshold(w[0], w[1]);
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][f] < t);
                if l.len() < min_leaf || r.len() < min_leaf {
                    continue;
                }
                let gain = base - sse(&l) - sse(&r);
                if best.is_none_or(|b| gain > b.2 + 1e-9 * b.2.abs()) {
                    best = Some((f, t, gain));
                }
            }
        }
        best.filter(|b| b.2 > 1e-9)
    }

    #[test]
    fn threshold_guards_adjacent_floats() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let t = split_threshold(a, b);
        assert!(a < t && t <= b);
        assert_eq!(split_threshold(0.0, 1.0), 0.5);
        assert_eq!(
            split_threshold(f64::MAX / 2.0 * 1.5, f64::MAX),
            f64::MAX / 2.0 * 1.5 / 2.0 + f64::MAX / 2.0
        );
    }

    #[test]
    fn single_split_separates_step() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| if i < 13 { 0.0 } else { 1.0 }).collect();
        let cols = columns(&rows);
        let data = Presorted::new(&cols);
        let t = fit_tree(
            &data,
            &[true; 20],
            &y,
            TreeParams {
                max_depth: 1,
                min_samples_leaf: 1,
            },
        );
        assert_eq!(
            t.nodes[0],
            Node::Split {
                feature: 0,
                threshold: 12.5,
                left: 1,
                right: 2
            }
        );
        assert_eq!(t.predict(&[3.0]), 0.0);
        assert_eq!(t.predict(&[12.5]), 1.0);
    }

    #[test]
    fn ties_go_to_lowest_feature() {
        // Two identical columns: the split must use feature 0.
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| (i >= 5) as u8 as f64).collect();
        let cols = columns(&rows);
        let t = fit_tree(
            &Presorted::new(&cols),
            &[true; 10],
            &y,
            TreeParams {
                max_depth: 3,
                min_samples_leaf: 1,
            },
        );
        assert!(matches!(t.nodes[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn min_leaf_and_depth_respected() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i * 7 % 30) as f64]).collect();
        let y: Vec<f64> = (0..30).map(|i| ((i * 13) % 7) as f64).collect();
        let cols = columns(&rows);
        let params = TreeParams {
            max_depth: 3,
            min_samples_leaf: 4,
        };
        let t = fit_tree(&Presorted::new(&cols), &[true; 30], &y, params);
        assert!(t.depth() <= 3);
        // Count rows per leaf.
        let mut per_leaf = std::collections::HashMap::new();
        for r in &rows {
            let mut i = 0;
            while let Node::Split {
                feature,
                threshold,
                left,
                right,
            } = &t.nodes[i]
            {
                i = if r[*feature] < *threshold { *left } else { *right };
            }
            *per_leaf.entry(i).or_insert(0) += 1;
        }
        assert!(per_leaf.values().all(|&c| c >= 4), "{per_leaf:?}");
        t.validate(1).unwrap();
    }

    #[test]
    fn constant_targets_give_single_leaf() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let cols = columns(&rows);
        let t = fit_tree(
            &Presorted::new(&cols),
            &[true; 10],
            &[0.3; 10],
            TreeParams {
                max_depth: 5,
                min_samples_leaf: 1,
            },
        );
        assert_eq!(t.nodes.len(), 1);
    }

    #[test]
    fn validate_rejects_cycles_and_bad_features() {
        let cyc = Tree {
            nodes: vec![Node::Split {
                feature: 0,
                threshold: 0.0,
                left: 0,
                right: 0,
            }],
        };
        assert!(cyc.validate(1).is_err());
        let bad_feature = Tree {
            nodes: vec![
                Node::Split {
                    feature: 3,
                    threshold: 0.0,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: 0.0 },
                Node::Leaf { value: 1.0 },
            ],
        };
        assert!(bad_feature.validate(2).is_err());
        assert!(bad_feature.validate(4).is_ok());
    }

    fn small_dataset() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (2usize..=20, 1usize..=2).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec((0..6).prop_map(|v| v as f64 * 0.5), d), n),
                prop::collection::vec(-1.0..1.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn every_split_matches_exhaustive_search((rows, y) in small_dataset(), min_leaf in 1usize..=3) {
            let cols = columns(&rows);
            let data = Presorted::new(&cols);
            let params = TreeParams { max_depth: 3, min_samples_leaf: min_leaf };
            let tree = fit_tree(&data, &vec![true; rows.len()], &y, params);

            // Walk the tree, recomputing the exhaustive optimum at each node.
            let mut stack = vec![(0usize, (0..rows.len()).collect::<Vec<usize>>(), 0usize)];
            while let Some((node, idx, depth)) = stack.pop() {
                let oracle = exhaustive(&rows, &idx, &y, min_leaf);
                match &tree.nodes[node] {
                    Node::Split { feature, threshold, left, right } => {
                        let (f, t, _) = oracle.expect("tree split where oracle finds none");
                        prop_assert_eq!((*feature, *threshold), (f, t));
                        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][*feature] < *threshold);
                        stack.push((*left, l, depth + 1));
                        stack.push((*right, r, depth + 1));
                    }
                    Node::Leaf { value } => {
                        prop_assert!(depth == 3 || oracle.is_none(), "leaf at depth {} but oracle {:?}", depth, oracle);
                        let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
                        prop_assert!((value - mean).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
