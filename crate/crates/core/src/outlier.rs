//! Isolation Forest and a k-nearest-neighbour distance detector, both with a
//! training-quantile decision threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, seeded, SeededRng};

pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_MAX_SUBSAMPLE: usize = 256;
pub const DEFAULT_QUANTILE: f64 = 0.95;
pub const MIN_TRAINING_ROWS: usize = 8;

/// Average path length of an unsuccessful BST search over `n` points,
/// `c(n) = 2H(n−1) − 2(n−1)/n`.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        _ => {
            let h: f64 = (1..n).map(|i| 1.0 / i as f64).sum();
            2.0 * h - 2.0 * (n - 1) as f64 / n as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl IsolationTree {
    fn grow(rows: &[&[f64]], height_limit: usize, rng: &mut SeededRng) -> Self {
        let mut tree = Self { nodes: Vec::new() };
        let idx: Vec<usize> = (0..rows.len()).collect();
        tree.build(rows, idx, 0, height_limit, rng);
        tree
    }

    fn build(&mut self, rows: &[&[f64]], idx: Vec<usize>, depth: usize, limit: usize, rng: &mut SeededRng) -> usize {
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { size: idx.len() });
        if depth >= limit || idx.len() <= 1 {
            return at;
        }
        let dims = rows[0].len();
        let ranges: Vec<(usize, f64, f64)> = (0..dims)
            .filter_map(|f| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(rows[i][f]), hi.max(rows[i][f]))
                });
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return at;
        }
        let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let mut threshold = rng.random_range(lo..hi);
        if threshold <= lo {
            threshold = lo + (hi - lo) * 0.5;
        }
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| rows[i][feature] < threshold);
        let left = self.build(rows, l, depth + 1, limit, rng);
        let right = self.build(rows, r, depth + 1, limit, rng);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }

    /// Depth at which `x` lands plus the `c(size)` correction for its leaf.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        let mut depth = 0usize;
        loop {
            match self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[feature] < threshold { left } else { right };
                    depth += 1;
                }
                Node::Leaf { size } => return depth as f64 + average_path_length(size),
            }
        }
    }

    pub fn height(&self) -> usize {
        fn h(t: &IsolationTree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Split { left, right, .. } => 1 + h(t, left).max(h(t, right)),
                Node::Leaf { .. } => 0,
            }
        }
        h(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` means `min(256, n)`.
    pub subsample: Option<usize>,
    pub quantile: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: DEFAULT_TREES,
            subsample: None,
            quantile: DEFAULT_QUANTILE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    pub n_trees: usize,
    pub subsample: usize,
    pub dims: usize,
    pub train_n: usize,
    pub seed: u64,
    pub quantile: f64,
    /// Flag when `score > threshold`.
    pub threshold: f64,
    pub trees: Vec<IsolationTree>,
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    if rows.len() < MIN_TRAINING_ROWS {
        return Err(Error::arg(format!(
            "detector needs at least {MIN_TRAINING_ROWS} rows, got {}",
            rows.len()
        )));
    }
    let dims = rows[0].len();
    if dims == 0 {
        return Err(Error::arg("feature rows are empty"));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dims {
            return Err(Error::arg(format!("row {i} has {} features, expected {dims}", r.len())));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("row {i} is not finite")));
        }
    }
    Ok(dims)
}

fn check_quantile(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold quantile {q} must lie in (0, 1)")))
    }
}

/// Nearest-rank quantile: the `⌈q·n⌉`-th smallest value.
pub fn quantile_threshold(scores: &[f64], q: f64) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

impl IsolationForest {
    pub fn fit(rows: &[Vec<f64>], params: &ForestParams) -> Result<Self> {
        let dims = check_rows(rows)?;
        check_quantile(params.quantile)?;
        if params.n_trees == 0 {
            return Err(Error::Config("forest needs at least one tree".into()));
        }
        let n = rows.len();
        let subsample = params.subsample.unwrap_or(DEFAULT_MAX_SUBSAMPLE).min(n).max(2);
        let limit = (subsample as f64).log2().ceil() as usize;
        let trees = (0..params.n_trees)
            .map(|k| {
                let mut rng = seeded(derive(params.seed, &[k as u64]));
                let picked = rand::seq::index::sample(&mut rng, n, subsample);
                let sub: Vec<&[f64]> = picked.iter().map(|i| rows[i].as_slice()).collect();
                IsolationTree::grow(&sub, limit, &mut rng)
            })
            .collect();
        let mut forest = Self {
            n_trees: params.n_trees,
            subsample,
            dims,
            train_n: n,
            seed: params.seed,
            quantile: params.quantile,
            threshold: 0.5,
            trees,
        };
        let train_scores: Vec<f64> = rows.iter().map(|r| forest.score_unchecked(r)).collect();
        forest.threshold = quantile_threshold(&train_scores, params.quantile);
        Ok(forest)
    }

    fn score_unchecked(&self, x: &[f64]) -> f64 {
        let mean = self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64;
        2f64.powf(-mean / average_path_length(self.subsample))
    }

    /// `2^(−E[h(x)]/c(ψ))`.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dims {
            return Err(Error::arg(format!(
                "row has {} features, forest expects {}",
                x.len(),
                self.dims
            )));
        }
        Ok(self.score_unchecked(x))
    }

    pub fn is_outlier(&self, x: &[f64]) -> Result<bool> {
        Ok(self.score(x)? > self.threshold)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("forest: {e}")))
    }
}

/// Mean Euclidean distance to the `k` nearest training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnDetector {
    pub k: usize,
    pub rows: Vec<Vec<f64>>,
    pub threshold: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl KnnDetector {
    pub fn fit(rows: &[Vec<f64>], k: usize, quantile: f64) -> Result<Self> {
        check_rows(rows)?;
        check_quantile(quantile)?;
        if k == 0 || k >= rows.len() {
            return Err(Error::Config(format!("k = {k} must lie in [1, {})", rows.len())));
        }
        let mut det = Self {
            k,
            rows: rows.to_vec(),
            threshold: 0.0,
        };
        let scores: Vec<f64> = (0..rows.len()).map(|i| det.mean_knn(&rows[i], Some(i))).collect();
        det.threshold = quantile_threshold(&scores, quantile);
        Ok(det)
    }

    fn mean_knn(&self, x: &[f64], skip: Option<usize>) -> f64 {
        let mut d: Vec<f64> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, r)| dist(x, r))
            .collect();
        d.sort_by(f64::total_cmp);
        d[..self.k].iter().sum::<f64>() / self.k as f64
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.rows[0].len() {
            return Err(Error::arg("row dimensionality differs from training rows"));
        }
        Ok(self.mean_knn(x, None))
    }

    pub fn is_outlier(&self, x: &[f64]) -> Result<bool> {
        Ok(self.score(x)? > self.threshold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    IsolationForest,
    Knn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Detector {
    Forest(IsolationForest),
    Knn(KnnDetector),
}

impl Detector {
    pub fn fit(kind: DetectorKind, rows: &[Vec<f64>], params: &ForestParams) -> Result<Self> {
        Ok(match kind {
            DetectorKind::IsolationForest => Detector::Forest(IsolationForest::fit(rows, params)?),
            DetectorKind::Knn => Detector::Knn(KnnDetector::fit(rows, 5, params.quantile)?),
        })
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        match self {
            Detector::Forest(f) => f.score(x),
            Detector::Knn(k) => k.score(x),
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            Detector::Forest(f) => f.threshold,
            Detector::Knn(k) => k.threshold,
        }
    }

    pub fn is_outlier(&self, x: &[f64]) -> Result<bool> {
        Ok(self.score(x)? > self.threshold())
    }
}

/// Probability that a random positive outscores a random negative (ties
/// count half).
pub fn auc(positive: &[f64], negative: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in positive {
        for n in negative {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (positive.len() * negative.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn blob(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| vec![rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)])
            .collect()
    }

    #[test]
    fn c_of_n_by_formula() {
        assert_eq!(average_path_length(2), 1.0);
        assert_eq!(average_path_length(1), 0.0);
        // 2(1 + 1/2) − 2·2/3
        assert!((average_path_length(3) - (3.0 - 4.0 / 3.0)).abs() < 1e-15);
        let h255: f64 = (1..256).map(|i| 1.0 / i as f64).sum();
        assert!((average_path_length(256) - (2.0 * h255 - 2.0 * 255.0 / 256.0)).abs() < 1e-12);
    }

    #[test]
    fn heights_and_score_bounds() {
        let rows = blob(100, 1);
        let f = IsolationForest::fit(&rows, &ForestParams::default()).unwrap();
        assert_eq!(f.subsample, 100);
        assert!(f.trees.iter().all(|t| t.height() <= 7));
        for r in &rows {
            let s = f.score(r).unwrap();
            assert!(s > 0.0 && s < 1.0);
        }
        assert!(f.threshold > 0.0 && f.threshold < 1.0);
        let flagged = rows.iter().filter(|r| f.is_outlier(r).unwrap()).count();
        assert!(flagged <= 5, "{flagged}");
    }

    #[test]
    fn center_inlier_far_point_outlier() {
        let rows = blob(200, 2);
        let f = IsolationForest::fit(&rows, &ForestParams::default()).unwrap();
        let center = [0.0, 0.0];
        assert!(f.score(&center).unwrap() < 0.5);
        assert!(!f.is_outlier(&center).unwrap());
        let far = [300.0, -300.0];
        let max_in = rows.iter().map(|r| f.score(r).unwrap()).fold(0.0, f64::max);
        assert!(f.score(&far).unwrap() > max_in);
        assert!(f.is_outlier(&far).unwrap());
    }

    #[test]
    fn score_equal_to_threshold_is_not_flagged() {
        let rows = vec![vec![1.0, 1.0]; 10];
        let f = IsolationForest::fit(&rows, &ForestParams::default()).unwrap();
        assert_eq!(f.score(&[1.0, 1.0]).unwrap(), f.threshold);
        assert!(!f.is_outlier(&[1.0, 1.0]).unwrap());
    }

    #[test]
    fn blob_plus_far_outliers_auc() {
        let mut rows = blob(300, 3);
        let mut rng = seeded(4);
        let outliers: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                vec![8.0 * a.cos(), 8.0 * a.sin()]
            })
            .collect();
        rows.extend(outliers.iter().cloned());
        let f = IsolationForest::fit(&rows, &ForestParams::default()).unwrap();
        let pos: Vec<f64> = outliers.iter().map(|r| f.score(r).unwrap()).collect();
        let neg: Vec<f64> = rows[..300].iter().map(|r| f.score(r).unwrap()).collect();
        assert!(auc(&pos, &neg) >= 0.99);
    }

    #[test]
    fn deterministic_and_serializable() {
        let rows = blob(64, 5);
        let p = ForestParams {
            seed: 9,
            ..ForestParams::default()
        };
        let a = IsolationForest::fit(&rows, &p).unwrap();
        assert_eq!(a, IsolationForest::fit(&rows, &p).unwrap());
        let back = IsolationForest::from_json(&a.to_json().unwrap()).unwrap();
        let probes = blob(20, 6);
        for x in &probes {
            assert_eq!(a.score(x).unwrap().to_bits(), back.score(x).unwrap().to_bits());
        }
        assert_eq!(back.threshold.to_bits(), a.threshold.to_bits());
    }

    #[test]
    fn bad_inputs() {
        let rows = blob(7, 1);
        assert!(matches!(IsolationForest::fit(&rows, &ForestParams::default()), Err(Error::Argument(_))));
        let mut rows = blob(10, 1);
        rows[3].push(1.0);
        assert!(matches!(IsolationForest::fit(&rows, &ForestParams::default()), Err(Error::Argument(_))));
        let f = IsolationForest::fit(&blob(10, 1), &ForestParams::default()).unwrap();
        assert!(f.score(&[1.0]).is_err());
    }

    #[test]
    fn knn_detector_flags_far_points() {
        let rows = blob(100, 7);
        let k = KnnDetector::fit(&rows, 5, 0.95).unwrap();
        assert!(!k.is_outlier(&[0.0, 0.0]).unwrap());
        assert!(k.is_outlier(&[20.0, 0.0]).unwrap());
        let flagged = rows.iter().filter(|r| k.score(r).unwrap() > k.threshold).count();
        assert!(flagged <= 5);
    }

    #[test]
    fn higher_quantile_never_flags_more() {
        let rows = blob(60, 4);
        let probes = blob(200, 5).into_iter().map(|r| vec![r[0] * 2.5, r[1] * 2.5]).collect::<Vec<_>>();
        let mut last = usize::MAX;
        for q in [0.8, 0.9, 0.95, 0.99] {
            let f = IsolationForest::fit(&rows, &ForestParams { quantile: q, ..Default::default() }).unwrap();
            let n = probes.iter().filter(|p| f.is_outlier(p).unwrap()).count();
            assert!(n <= last, "q={q}: {n} > {last}");
            last = n;
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn at_most_five_percent_of_training_rows_flagged(n in 8usize..80, seed in 0u64..1000) {
            let rows = blob(n, seed);
            let f = IsolationForest::fit(&rows, &ForestParams { n_trees: 50, seed, ..Default::default() }).unwrap();
            let flagged = rows.iter().filter(|r| f.is_outlier(r).unwrap()).count();
            proptest::prop_assert!(flagged as f64 <= 0.05 * n as f64, "{flagged} of {n}");
            let scores: Vec<f64> = rows.iter().map(|r| f.score(r).unwrap()).collect();
            proptest::prop_assert!(scores.iter().all(|s| *s > 0.0 && *s < 1.0));
        }
    }
}
