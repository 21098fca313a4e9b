//! Multiclass gradient-boosted regression trees with a softmax objective.
//!
//! Each round fits one tree per class to the residuals `y_ik - p_ik` using
//! exact greedy squared-error splits at midpoints of sorted unique values.
//! Leaves hold the second-order step `sum(r) / (sum(p(1-p)) + lambda)`.
//! Raw scores start at the log class priors.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MODEL_FORMAT_VERSION: u32 = 1;
/// Prior floor for classes absent from the training labels.
const MIN_CLASS_PRIOR: f64 = 1e-6;
const MIN_SPLIT_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub max_depth: usize,
    pub l2_leaf_regularization: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    /// The tuned aggregation setting: depth 2, 60 rounds, learning rate 0.3.
    fn default() -> Self {
        Self { learning_rate: 0.3, n_estimators: 60, max_depth: 2, l2_leaf_regularization: 1.0, seed: 0 }
    }
}

impl GbdtConfig {
    pub const LEARNING_RATES: [f64; 2] = [0.1, 0.3];
    pub const N_ESTIMATORS: [usize; 5] = [20, 40, 60, 80, 100];
    pub const MAX_DEPTHS: [usize; 4] = [2, 4, 6, 8];

    /// The 2 x 5 x 4 tuning grid in a fixed order.
    pub fn grid(seed: u64) -> Vec<GbdtConfig> {
        let mut out = Vec::with_capacity(40);
        for learning_rate in Self::LEARNING_RATES {
            for n_estimators in Self::N_ESTIMATORS {
                for max_depth in Self::MAX_DEPTHS {
                    out.push(GbdtConfig { learning_rate, n_estimators, max_depth, l2_leaf_regularization: 1.0, seed });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

/// Flat binary tree; node 0 is the root. Samples with `x[feature] <= threshold`
/// go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// The root split, if the tree split at all.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes.first()? {
            Node::Split { feature, threshold, .. } => Some((*feature, *threshold)),
            Node::Leaf { .. } => None,
        }
    }
}

/// Best split for residuals over the given samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    /// Reduction in the residual sum of squared errors.
    pub gain: f64,
}

/// Exact greedy search. Ties keep the lowest feature, then the lowest threshold.
pub fn best_split(x: &[Vec<f64>], residuals: &[f64], samples: &[usize]) -> Option<SplitChoice> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let total: f64 = samples.iter().map(|&i| residuals[i]).sum();
    let base = total * total / n as f64;
    let d = x[samples[0]].len();
    let mut best: Option<SplitChoice> = None;
    let mut order = samples.to_vec();
    for f in 0..d {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let mut left_sum = 0.0;
        for pos in 0..n - 1 {
            left_sum += residuals[order[pos]];
            let (lo, hi) = (x[order[pos]][f], x[order[pos + 1]][f]);
            if lo == hi {
                continue;
            }
            let nl = (pos + 1) as f64;
            let nr = (n - pos - 1) as f64;
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / nl + right_sum * right_sum / nr - base;
            if best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitChoice { feature: f, threshold: lo + (hi - lo) / 2.0, gain });
            }
        }
    }
    best.filter(|b| b.gain > MIN_SPLIT_GAIN)
}

fn grow(
    x: &[Vec<f64>],
    residuals: &[f64],
    hessians: &[f64],
    samples: &[usize],
    depth: usize,
    config: &GbdtConfig,
    nodes: &mut Vec<Node>,
) -> usize {
    let at = nodes.len();
    nodes.push(Node::Leaf { value: 0.0 });
    let split = if depth < config.max_depth { best_split(x, residuals, samples) } else { None };
    match split {
        Some(s) => {
            let (l, r): (Vec<usize>, Vec<usize>) = samples.iter().partition(|&&i| x[i][s.feature] <= s.threshold);
            let left = grow(x, residuals, hessians, &l, depth + 1, config, nodes);
            let right = grow(x, residuals, hessians, &r, depth + 1, config, nodes);
            nodes[at] = Node::Split { feature: s.feature, threshold: s.threshold, left, right };
        }
        None => {
            let g: f64 = samples.iter().map(|&i| residuals[i]).sum();
            let h: f64 = samples.iter().map(|&i| hessians[i]).sum();
            let denom = h + config.l2_leaf_regularization;
            let value = if denom > 0.0 { g / denom } else { 0.0 };
            nodes[at] = Node::Leaf { value };
        }
    }
    at
}

pub fn fit_tree(x: &[Vec<f64>], residuals: &[f64], hessians: &[f64], config: &GbdtConfig) -> RegressionTree {
    let samples: Vec<usize> = (0..x.len()).collect();
    let mut nodes = Vec::new();
    grow(x, residuals, hessians, &samples, 0, config, &mut nodes);
    RegressionTree { nodes }
}

pub fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub format_version: u32,
    pub n_classes: usize,
    pub n_features: usize,
    pub learning_rate: f64,
    pub base_scores: Vec<f64>,
    /// `rounds[r][k]` is the class-`k` tree of round `r`.
    pub rounds: Vec<Vec<RegressionTree>>,
    pub config: GbdtConfig,
}

fn validate(x: &[Vec<f64>], y: &[usize], n_classes: usize) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::invalid("no training rows"));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension { expected: x.len(), actual: y.len() });
    }
    let d = x[0].len();
    if d == 0 {
        return Err(Error::invalid("zero features"));
    }
    for row in x {
        if row.len() != d {
            return Err(Error::Dimension { expected: d, actual: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
    }
    if n_classes == 0 {
        return Err(Error::invalid("zero classes"));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
    }
    Ok(d)
}

/// Mean softmax cross-entropy of raw scores.
pub fn log_loss(raw: &[Vec<f64>], y: &[usize]) -> f64 {
    let total: f64 = raw
        .iter()
        .zip(y)
        .map(|(r, &c)| {
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - r[c]
        })
        .sum();
    total / y.len() as f64
}

impl GbdtModel {
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, config: &GbdtConfig) -> Result<GbdtModel> {
        let d = validate(x, y, n_classes)?;
        if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(config.l2_leaf_regularization >= 0.0) {
            return Err(Error::invalid("l2 regularization must be non-negative"));
        }
        let n = x.len();
        let mut counts = vec![0usize; n_classes];
        for &c in y {
            counts[c] += 1;
        }
        let base_scores: Vec<f64> =
            counts.iter().map(|&c| (c as f64 / n as f64).max(MIN_CLASS_PRIOR).ln()).collect();
        let mut raw: Vec<Vec<f64>> = vec![base_scores.clone(); n];
        let mut rounds = Vec::with_capacity(config.n_estimators);
        for _ in 0..config.n_estimators {
            let probs: Vec<Vec<f64>> = raw.iter().map(|r| softmax(r)).collect();
            let trees: Vec<RegressionTree> = (0..n_classes)
                .into_par_iter()
                .map(|k| {
                    let residuals: Vec<f64> =
                        (0..n).map(|i| f64::from(u8::from(y[i] == k)) - probs[i][k]).collect();
                    let hessians: Vec<f64> = (0..n).map(|i| probs[i][k] * (1.0 - probs[i][k])).collect();
                    fit_tree(x, &residuals, &hessians, config)
                })
                .collect();
            for (i, row) in raw.iter_mut().enumerate() {
                for (k, tree) in trees.iter().enumerate() {
                    row[k] += config.learning_rate * tree.predict(&x[i]);
                }
            }
            rounds.push(trees);
        }
        Ok(GbdtModel {
            format_version: MODEL_FORMAT_VERSION,
            n_classes,
            n_features: d,
            learning_rate: config.learning_rate,
            base_scores,
            rounds,
            config: *config,
        })
    }

    /// A model with no trees: predicts the given base scores.
    pub fn constant(n_features: usize, base_scores: Vec<f64>) -> GbdtModel {
        GbdtModel {
            format_version: MODEL_FORMAT_VERSION,
            n_classes: base_scores.len(),
            n_features,
            learning_rate: 0.0,
            base_scores,
            rounds: Vec::new(),
            config: GbdtConfig { n_estimators: 0, ..GbdtConfig::default() },
        }
    }

    pub fn n_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Raw scores using the first `rounds` boosting rounds.
    pub fn raw_scores_at(&self, x: &[f64], rounds: usize) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::Dimension { expected: self.n_features, actual: x.len() });
        }
        let mut raw = self.base_scores.clone();
        for trees in self.rounds.iter().take(rounds) {
            for (k, tree) in trees.iter().enumerate() {
                raw[k] += self.learning_rate * tree.predict(x);
            }
        }
        Ok(raw)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.raw_scores_at(x, self.rounds.len())?))
    }

    pub fn predict_proba_at(&self, x: &[f64], rounds: usize) -> Result<Vec<f64>> {
        Ok(softmax(&self.raw_scores_at(x, rounds)?))
    }

    /// Argmax class; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.predict_proba(x)?;
        Ok(argmax(&p))
    }

    /// Training loss after 0, 1, ..., n_rounds rounds.
    pub fn staged_log_loss(&self, x: &[Vec<f64>], y: &[usize]) -> Result<Vec<f64>> {
        let mut raw: Vec<Vec<f64>> = vec![self.base_scores.clone(); x.len()];
        let mut out = vec![log_loss(&raw, y)];
        for trees in &self.rounds {
            for (i, row) in raw.iter_mut().enumerate() {
                if x[i].len() != self.n_features {
                    return Err(Error::Dimension { expected: self.n_features, actual: x[i].len() });
                }
                for (k, tree) in trees.iter().enumerate() {
                    row[k] += self.learning_rate * tree.predict(&x[i]);
                }
            }
            out.push(log_loss(&raw, y));
        }
        Ok(out)
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> Result<f64> {
        let mut correct = 0;
        for (row, &label) in x.iter().zip(y) {
            if self.predict(row)? == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / y.len().max(1) as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<GbdtModel> {
        let model: GbdtModel = serde_json::from_str(s)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", model.format_version)));
        }
        if model.base_scores.len() != model.n_classes || model.rounds.iter().any(|r| r.len() != model.n_classes) {
            return Err(Error::Format("class count mismatch in model".into()));
        }
        for tree in model.rounds.iter().flatten() {
            for node in &tree.nodes {
                match *node {
                    Node::Split { feature, threshold, left, right } => {
                        if feature >= model.n_features
                            || !threshold.is_finite()
                            || left >= tree.nodes.len()
                            || right >= tree.nodes.len()
                        {
                            return Err(Error::Format("invalid split node".into()));
                        }
                    }
                    Node::Leaf { value } if !value.is_finite() => {
                        return Err(Error::Format("non-finite leaf".into()));
                    }
                    Node::Leaf { .. } => {}
                }
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GbdtModel> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Fold index per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: Vec<usize>,
    pub stratified: bool,
}

/// Deal shuffled samples round-robin into folds, per class when every present
/// class has at least `k` members.
pub fn assign_folds(y: &[usize], k: usize, seed: u64) -> FoldAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = y.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in y.iter().enumerate() {
        by_class[c].push(i);
    }
    let stratified = by_class.iter().all(|members| members.is_empty() || members.len() >= k);
    let mut folds = vec![0; y.len()];
    let groups: Vec<Vec<usize>> = if stratified { by_class } else { vec![(0..y.len()).collect()] };
    let mut next = 0;
    for mut members in groups {
        members.shuffle(&mut rng);
        for i in members {
            folds[i] = next % k;
            next += 1;
        }
    }
    FoldAssignment { folds, stratified }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub config: GbdtConfig,
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub best: GbdtConfig,
    pub folds: usize,
    pub stratified: bool,
    pub rows: Vec<CvRow>,
}

impl CvReport {
    pub fn best_row(&self) -> &CvRow {
        self.rows.iter().find(|r| r.config == self.best).expect("best config is in the table")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("learning_rate,n_estimators,max_depth,mean_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6}\n",
                r.config.learning_rate, r.config.n_estimators, r.config.max_depth, r.mean_accuracy
            ));
        }
        out
    }
}

/// K-fold cross-validated grid search; the first config with the highest mean
/// validation accuracy wins.
pub fn grid_search_cv(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    grid: &[GbdtConfig],
    folds: usize,
    seed: u64,
) -> Result<CvReport> {
    validate(x, y, n_classes)?;
    if grid.is_empty() {
        return Err(Error::invalid("empty GBDT grid"));
    }
    if folds < 2 || x.len() < folds {
        return Err(Error::invalid(format!("need at least {folds} samples and 2 folds")));
    }
    let assignment = assign_folds(y, folds, seed);
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..folds).map(move |f| (g, f))).collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..x.len() {
                if assignment.folds[i] == f {
                    vx.push(x[i].clone());
                    vy.push(y[i]);
                } else {
                    tx.push(x[i].clone());
                    ty.push(y[i]);
                }
            }
            let model = GbdtModel::fit(&tx, &ty, n_classes, &grid[g])?;
            model.accuracy(&vx, &vy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows: Vec<CvRow> = grid
        .iter()
        .enumerate()
        .map(|(g, &config)| {
            let fold_accuracy = accs[g * folds..(g + 1) * folds].to_vec();
            let mean_accuracy = fold_accuracy.iter().sum::<f64>() / folds as f64;
            CvRow { config, fold_accuracy, mean_accuracy }
        })
        .collect();
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.mean_accuracy > rows[best].mean_accuracy {
            best = i;
        }
    }
    Ok(CvReport { best: rows[best].config, folds, stratified: assignment.stratified, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable_1d() -> (Vec<Vec<f64>>, Vec<usize>) {
        (vec![vec![0.0], vec![0.2], vec![0.8], vec![1.0]], vec![0, 0, 1, 1])
    }

    #[test]
    fn grid_has_forty_points() {
        let g = GbdtConfig::grid(0);
        assert_eq!(g.len(), 40);
        assert!(g.contains(&GbdtConfig::default()));
    }

    #[test]
    fn first_split_separates() {
        let (x, y) = separable_1d();
        let cfg = GbdtConfig { n_estimators: 1, max_depth: 2, ..Default::default() };
        let m = GbdtModel::fit(&x, &y, 2, &cfg).unwrap();
        for tree in &m.rounds[0] {
            let (f, t) = tree.root_split().unwrap();
            assert_eq!(f, 0);
            assert!(t > 0.2 && t <= 0.8);
        }
        for (row, &label) in x.iter().zip(&y) {
            assert_eq!(m.predict(row).unwrap(), label);
        }
    }

    #[test]
    fn single_class_converges() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y = vec![2; 10];
        let cfg = GbdtConfig { learning_rate: 0.3, n_estimators: 20, ..Default::default() };
        let m = GbdtModel::fit(&x, &y, 3, &cfg).unwrap();
        let mut last = 0.0;
        for r in 0..=20 {
            let p = m.predict_proba_at(&x[3], r).unwrap()[2];
            assert!(p >= last);
            last = p;
        }
        assert!(last >= 0.95);
    }

    #[test]
    fn zero_round_uniform() {
        let m = GbdtModel::constant(2, vec![0.0; 3]);
        let p = m.predict_proba(&[1.0, 2.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(m.predict_proba(&[1.0]), Err(Error::Dimension { expected: 2, actual: 1 })));
    }

    #[test]
    fn fit_errors() {
        let cfg = GbdtConfig::default();
        assert!(GbdtModel::fit(&[], &[], 2, &cfg).is_err());
        assert!(GbdtModel::fit(&[vec![], vec![]], &[0, 1], 2, &cfg).is_err());
        assert!(GbdtModel::fit(&[vec![f64::NAN], vec![1.0]], &[0, 1], 2, &cfg).is_err());
        assert!(GbdtModel::fit(&[vec![0.0], vec![1.0]], &[0, 5], 2, &cfg).is_err());
    }

    #[test]
    fn monotone_feature_flips_argmax() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let m = GbdtModel::fit(&x, &y, 2, &GbdtConfig::default()).unwrap();
        assert_eq!(m.predict(&[2.0, 1.0]).unwrap(), 0);
        assert_eq!(m.predict(&[15.0, 1.0]).unwrap(), 1);
    }

    #[test]
    fn json_round_trip_and_determinism() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i * 7 % 11) as f64, (i % 4) as f64]).collect();
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let cfg = GbdtConfig { n_estimators: 10, max_depth: 3, ..Default::default() };
        let a = GbdtModel::fit(&x, &y, 3, &cfg).unwrap();
        let b = GbdtModel::fit(&x, &y, 3, &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back = GbdtModel::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(a.rounds.iter().flatten().all(|t| t.depth() <= 3));
    }

    #[test]
    fn folds_are_stratified_or_flagged() {
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let a = assign_folds(&y, 4, 1);
        assert!(a.stratified);
        for f in 0..4 {
            let members: Vec<usize> = (0..40).filter(|&i| a.folds[i] == f).collect();
            assert_eq!(members.len(), 10);
            assert_eq!(members.iter().filter(|&&i| y[i] == 1).count(), 5);
        }
        assert_eq!(assign_folds(&y, 4, 1), a);

        let rare = vec![0, 0, 0, 0, 0, 1, 1];
        assert!(!assign_folds(&rare, 4, 1).stratified);
    }

    #[test]
    fn cv_errors() {
        let (x, y) = separable_1d();
        assert!(grid_search_cv(&x, &y, 2, &[], 4, 0).is_err());
        assert!(grid_search_cv(&x[..3], &y[..3], 2, &[GbdtConfig::default()], 4, 0).is_err());
    }
}
