//! Random forests over dense feature rows: bagged axis-aligned decision
//! trees in classification mode (Gini splits, class-histogram leaves) or
//! multi-output regression mode (variance-sum splits, mean-vector leaves).
//!
//! Trees are trained in parallel with per-tree seeded generators and reduced
//! in a fixed order, so a config and seed always produce the same model.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major table of feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    n_rows: usize,
    n_features: usize,
    data: Vec<f32>,
}

impl FeatureTable {
    pub fn new(n_features: usize, data: Vec<f32>) -> Result<Self> {
        if n_features == 0 || data.len() % n_features != 0 {
            return Err(Error::invalid(format!(
                "feature data length {} is not a multiple of the feature count {n_features}",
                data.len()
            )));
        }
        Ok(FeatureTable {
            n_rows: data.len() / n_features,
            n_features,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n_features = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * n_features);
        for r in rows {
            if r.len() != n_features {
                return Err(Error::invalid("ragged feature rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(n_features.max(1), data)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_features..(i + 1) * self.n_features]
    }

    #[inline]
    pub fn value(&self, row: usize, feature: usize) -> f32 {
        self.data[row * self.n_features + feature]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForestMode {
    Classification,
    Regression,
}

/// One tree node; leaves carry a payload (class counts or output means).
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: u16,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        payload: Vec<f32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_payload(&self, row: &[f32]) -> &[f32] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { payload } => return payload,
                Node::Split { feature, threshold, left, right } => {
                    at = if row[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

/// Training settings shared by both modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Candidate features per split; defaults to sqrt of the feature count.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 50,
            max_depth: 18,
            min_samples_split: 2,
            features_per_split: None,
            seed: 0,
        }
    }
}

/// A trained ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub mode: ForestMode,
    pub n_features: usize,
    /// Classes in classification mode, regression outputs otherwise.
    pub output_dim: usize,
    pub seed: u64,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    /// Mean leaf distribution over all trees; in classification mode this is
    /// the per-class probability, in regression the predicted output vector.
    pub fn predict(&self, row: &[f32]) -> Vec<f32> {
        debug_assert_eq!(row.len(), self.n_features);
        let mut acc = vec![0.0f64; self.output_dim];
        for tree in &self.trees {
            let payload = tree.leaf_payload(row);
            match self.mode {
                ForestMode::Classification => {
                    let total: f32 = payload.iter().sum();
                    for (a, &p) in acc.iter_mut().zip(payload) {
                        *a += (p / total) as f64;
                    }
                }
                ForestMode::Regression => {
                    for (a, &p) in acc.iter_mut().zip(payload) {
                        *a += p as f64;
                    }
                }
            }
        }
        let k = self.trees.len() as f64;
        acc.iter().map(|v| (v / k) as f32).collect()
    }

    /// Probability of class 1 from a binary classifier.
    pub fn predict_positive(&self, row: &[f32]) -> f32 {
        debug_assert_eq!(self.mode, ForestMode::Classification);
        self.predict(row)[1]
    }
}

fn tree_seed(base: u64, tree_index: usize) -> u64 {
    base ^ (tree_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

enum Targets<'a> {
    Classes(&'a [u8]),
    Vectors { data: &'a [f32], dim: usize },
}

struct Builder<'a> {
    table: &'a FeatureTable,
    targets: Targets<'a>,
    cfg: &'a ForestConfig,
    mtry: usize,
    output_dim: usize,
}

impl<'a> Builder<'a> {
    fn leaf(&self, samples: &[usize]) -> Node {
        let mut payload = vec![0.0f32; self.output_dim];
        match &self.targets {
            Targets::Classes(labels) => {
                for &s in samples {
                    payload[labels[s] as usize] += 1.0;
                }
            }
            Targets::Vectors { data, dim } => {
                let mut acc = vec![0.0f64; *dim];
                for &s in samples {
                    for d in 0..*dim {
                        acc[d] += data[s * dim + d] as f64;
                    }
                }
                for d in 0..*dim {
                    payload[d] = (acc[d] / samples.len() as f64) as f32;
                }
            }
        }
        Node::Leaf { payload }
    }

    fn is_pure(&self, samples: &[usize]) -> bool {
        match &self.targets {
            Targets::Classes(labels) => {
                let first = labels[samples[0]];
                samples.iter().all(|&s| labels[s] == first)
            }
            Targets::Vectors { data, dim } => {
                let first = &data[samples[0] * dim..samples[0] * dim + dim];
                samples.iter().all(|&s| &data[s * dim..s * dim + dim] == first)
            }
        }
    }

}

/// Train a forest in classification mode on binary (or small integer) labels.
pub fn train_classifier(
    table: &FeatureTable,
    labels: &[u8],
    cfg: &ForestConfig,
) -> Result<(ForestModel, TrainDiagnostics)> {
    if labels.len() != table.n_rows() {
        return Err(Error::invalid("label count does not match row count"));
    }
    if table.n_rows() == 0 {
        return Err(Error::InvalidTrainingSet("no training rows".into()));
    }
    let n_classes = *labels.iter().max().unwrap() as usize + 1;
    if n_classes < 2 || !labels.iter().any(|&l| l != labels[0]) {
        return Err(Error::InvalidTrainingSet(
            "training labels contain a single class".into(),
        ));
    }
    train_impl(table, Targets::Classes(labels), n_classes.max(2), ForestMode::Classification, cfg)
}

/// Train a forest in regression mode on fixed-length target vectors.
pub fn train_regressor(
    table: &FeatureTable,
    targets: &[f32],
    output_dim: usize,
    cfg: &ForestConfig,
) -> Result<(ForestModel, TrainDiagnostics)> {
    if output_dim == 0 || targets.len() != table.n_rows() * output_dim {
        return Err(Error::invalid("target length does not match rows x output_dim"));
    }
    if table.n_rows() == 0 {
        return Err(Error::InvalidTrainingSet("no training rows".into()));
    }
    train_impl(
        table,
        Targets::Vectors { data: targets, dim: output_dim },
        output_dim,
        ForestMode::Regression,
        cfg,
    )
}

/// Out-of-bag accuracy (classification) and bookkeeping from training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub oob_accuracy: Option<f64>,
    pub oob_evaluated: usize,
}

fn train_impl(
    table: &FeatureTable,
    targets: Targets<'_>,
    output_dim: usize,
    mode: ForestMode,
    cfg: &ForestConfig,
) -> Result<(ForestModel, TrainDiagnostics)> {
    if cfg.n_trees == 0 {
        return Err(Error::invalid("forest needs at least one tree"));
    }
    let n = table.n_rows();
    let mtry = cfg
        .features_per_split
        .unwrap_or_else(|| (table.n_features() as f64).sqrt().floor().max(1.0) as usize)
        .clamp(1, table.n_features());

    let builder = Builder {
        table,
        targets,
        cfg,
        mtry,
        output_dim,
    };

    let results: Vec<(Tree, Vec<bool>)> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(cfg.seed, t));
            let mut in_bag = vec![false; n];
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let s = rng.gen_range(0..n);
                in_bag[s] = true;
                samples.push(s);
            }
            let mut nodes = Vec::new();
            build_node(&builder, &mut nodes, samples, 0, &mut rng);
            (Tree { nodes }, in_bag)
        })
        .collect();

    let trees: Vec<Tree> = results.iter().map(|(t, _)| t.clone()).collect();
    let model = ForestModel {
        mode,
        n_features: table.n_features(),
        output_dim,
        seed: cfg.seed,
        trees,
    };

    // out-of-bag vote per distinct row index, classification only
    let diagnostics = if let Targets::Classes(labels) = &builder.targets {
        let mut correct = 0usize;
        let mut evaluated = 0usize;
        for i in 0..n {
            let mut votes = vec![0.0f64; output_dim];
            let mut any = false;
            for (tree, in_bag) in &results {
                if in_bag[i] {
                    continue;
                }
                any = true;
                let payload = tree.leaf_payload(table.row(i));
                let total: f32 = payload.iter().sum();
                for (v, &p) in votes.iter_mut().zip(payload) {
                    *v += (p / total) as f64;
                }
            }
            if any {
                evaluated += 1;
                let arg = votes
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite votes"))
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                correct += usize::from(arg as u8 == labels[i]);
            }
        }
        TrainDiagnostics {
            oob_accuracy: (evaluated > 0).then(|| correct as f64 / evaluated as f64),
            oob_evaluated: evaluated,
        }
    } else {
        TrainDiagnostics {
            oob_accuracy: None,
            oob_evaluated: 0,
        }
    };

    Ok((model, diagnostics))
}

fn build_node(
    b: &Builder<'_>,
    nodes: &mut Vec<Node>,
    samples: Vec<usize>,
    depth: usize,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let index = nodes.len() as u32;
    nodes.push(Node::Leaf { payload: Vec::new() }); // placeholder

    let stop = depth >= b.cfg.max_depth
        || samples.len() < b.cfg.min_samples_split
        || b.is_pure(&samples);
    if !stop {
        if let Some((feature, threshold)) = choose_split(b, &samples, rng) {
            let (left_s, right_s): (Vec<usize>, Vec<usize>) = samples
                .iter()
                .partition(|&&s| b.table.value(s, feature) <= threshold);
            if !left_s.is_empty() && !right_s.is_empty() {
                let left = build_node(b, nodes, left_s, depth + 1, rng);
                let right = build_node(b, nodes, right_s, depth + 1, rng);
                nodes[index as usize] = Node::Split {
                    feature: feature as u16,
                    threshold,
                    left,
                    right,
                };
                return index;
            }
        }
    }
    let leaf = b.leaf(&samples);
    nodes[index as usize] = leaf;
    index
}

/// Pick `mtry` distinct candidate features (sorted for determinism) and the
/// best midpoint threshold by impurity decrease; `None` if nothing splits.
fn choose_split(b: &Builder<'_>, samples: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f32)> {
    let n_feat = b.table.n_features();
    let mut candidates: Vec<usize> = Vec::with_capacity(b.mtry);
    while candidates.len() < b.mtry {
        let f = rng.gen_range(0..n_feat);
        if !candidates.contains(&f) {
            candidates.push(f);
        }
    }
    candidates.sort_unstable();

    let mut best: Option<(usize, f32, f64)> = None;
    let mut order: Vec<(f32, usize)> = Vec::with_capacity(samples.len());
    for &feature in &candidates {
        order.clear();
        order.extend(samples.iter().map(|&s| (b.table.value(s, feature), s)));
        order.sort_by(|x, y| x.0.total_cmp(&y.0));
        let score = match &b.targets {
            Targets::Classes(labels) => best_gini_split(&order, labels, b.output_dim),
            Targets::Vectors { data, dim } => best_variance_split(&order, data, *dim),
        };
        if let Some((threshold, score)) = score {
            let better = match &best {
                None => true,
                Some((_, _, s)) => score < *s,
            };
            if better {
                best = Some((feature, threshold, score));
            }
        }
    }
    best.map(|(f, t, _)| (f, t))
}

/// Weighted Gini impurity of the best split on a pre-sorted feature column.
fn best_gini_split(order: &[(f32, usize)], labels: &[u8], n_classes: usize) -> Option<(f32, f64)> {
    let n = order.len();
    let mut total = vec![0.0f64; n_classes];
    for &(_, s) in order {
        total[labels[s] as usize] += 1.0;
    }
    let mut left = vec![0.0f64; n_classes];
    let mut best: Option<(f32, f64)> = None;
    for i in 0..n - 1 {
        left[labels[order[i].1] as usize] += 1.0;
        if order[i].0 == order[i + 1].0 {
            continue;
        }
        let nl = (i + 1) as f64;
        let nr = (n - i - 1) as f64;
        let mut gini_l = 1.0;
        let mut gini_r = 1.0;
        for c in 0..n_classes {
            let pl = left[c] / nl;
            let pr = (total[c] - left[c]) / nr;
            gini_l -= pl * pl;
            gini_r -= pr * pr;
        }
        let score = (nl * gini_l + nr * gini_r) / n as f64;
        let threshold = midpoint(order[i].0, order[i + 1].0);
        if best.map_or(true, |(_, s)| score < s) {
            best = Some((threshold, score));
        }
    }
    best
}

/// Total within-node sum of squared errors (all outputs) of the best split.
fn best_variance_split(order: &[(f32, usize)], data: &[f32], dim: usize) -> Option<(f32, f64)> {
    let n = order.len();
    let mut sum_r = vec![0.0f64; dim];
    let mut sumsq_r = vec![0.0f64; dim];
    for &(_, s) in order {
        for d in 0..dim {
            let v = data[s * dim + d] as f64;
            sum_r[d] += v;
            sumsq_r[d] += v * v;
        }
    }
    let mut sum_l = vec![0.0f64; dim];
    let mut sumsq_l = vec![0.0f64; dim];
    let mut best: Option<(f32, f64)> = None;
    for i in 0..n - 1 {
        let s = order[i].1;
        for d in 0..dim {
            let v = data[s * dim + d] as f64;
            sum_l[d] += v;
            sumsq_l[d] += v * v;
            sum_r[d] -= v;
            sumsq_r[d] -= v * v;
        }
        if order[i].0 == order[i + 1].0 {
            continue;
        }
        let nl = (i + 1) as f64;
        let nr = (n - i - 1) as f64;
        let mut sse = 0.0;
        for d in 0..dim {
            sse += sumsq_l[d] - sum_l[d] * sum_l[d] / nl;
            sse += sumsq_r[d] - sum_r[d] * sum_r[d] / nr;
        }
        let threshold = midpoint(order[i].0, order[i + 1].0);
        if best.map_or(true, |(_, s)| sse < s) {
            best = Some((threshold, sse));
        }
    }
    best
}

/// Midpoint that is guaranteed to separate two distinct f32 values.
fn midpoint(a: f32, b: f32) -> f32 {
    let m = (a as f64 + b as f64) / 2.0;
    let m = m as f32;
    if m > a {
        m
    } else {
        a // degenerate adjacent floats: split after `a`
    }
}
