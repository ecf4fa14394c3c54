//! Random-forest multi-classifier for preferred-mode inference.
//!
//! The forest learns pre-enrollment mode choices from six trip inputs
//! (departure time, origin, destination, duration, workday status, travel
//! date) and is then applied to post-enrollment trips to infer the mode a
//! participant would have chosen absent the program.
//!
//! Hand-rolled CART trees with Gini splits; bootstrap per tree; a random
//! feature subset per split; majority vote with a fixed tie-break (lowest
//! mode ordinal). Everything is deterministic given the seed: each tree owns
//! one counter-based RNG stream.
//!
//! # References
//!
//! - Breiman (2001), "Random forests." *Machine Learning*.

use std::collections::HashMap;

use chrono::{Datelike, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trips::{TravelMode, TripRecord, ALL_MODES};

/// Numeric encoding of the six trip inputs. Departure time expands into
/// hour-of-day, day-of-week, and day-of-year so the trees can pick up both
/// daily rhythm and seasonality.
pub const FEATURE_NAMES: [&str; 9] = [
    "hour",
    "day_of_week",
    "day_of_year",
    "origin_row",
    "origin_col",
    "dest_row",
    "dest_col",
    "duration_min",
    "is_workday",
];

pub const N_FEATURES: usize = 9;

pub fn encode_trip(t: &TripRecord) -> [f64; N_FEATURES] {
    [
        t.departure.hour() as f64,
        t.departure.weekday().num_days_from_monday() as f64,
        t.departure.ordinal() as f64,
        t.origin_cell.0 as f64,
        t.origin_cell.1 as f64,
        t.dest_cell.0 as f64,
        t.dest_cell.1 as f64,
        t.duration_min,
        if t.is_workday { 1.0 } else { 0.0 },
    ]
}

fn validate_features(idx: usize, t: &TripRecord, f: &[f64; N_FEATURES]) -> Result<()> {
    if f.iter().any(|v| !v.is_finite()) || t.duration_min <= 0.0 {
        return Err(Error::Validation(format!(
            "trip {idx} ({} @ {}) has a feature outside the encoding range",
            t.user_id, t.departure
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Candidate features per split; `None` means floor(sqrt(n_features)).
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 200, max_depth: 16, min_leaf: 5, features_per_split: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    /// Class distribution over the four modes; sums to 1.
    Leaf { dist: [f64; 4] },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn leaf_dist(&self, f: &[f64; N_FEATURES]) -> &[f64; 4] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if f[*feature] <= *threshold { *left } else { *right };
                }
                TreeNode::Leaf { dist } => return dist,
            }
        }
    }

    /// The tree's vote: majority class of the reached leaf, ties to the
    /// lowest mode ordinal.
    pub fn predict_class(&self, f: &[f64; N_FEATURES]) -> TravelMode {
        let dist = self.leaf_dist(f);
        let mut best = 0usize;
        for c in 1..4 {
            if dist[c] > dist[best] {
                best = c;
            }
        }
        ALL_MODES[best]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub trees: Vec<DecisionTree>,
    pub feature_names: Vec<String>,
    pub classes: [TravelMode; 4],
    /// Five-fold cross-validation accuracies on the training split.
    pub cv_scores: Vec<f64>,
}

impl ForestModel {
    pub fn tree_votes(&self, f: &[f64; N_FEATURES]) -> [u32; 4] {
        let mut votes = [0u32; 4];
        for tree in &self.trees {
            votes[tree.predict_class(f).ordinal()] += 1;
        }
        votes
    }

    /// Majority vote across trees; ties go to the lowest mode ordinal.
    pub fn predict(&self, f: &[f64; N_FEATURES]) -> TravelMode {
        let votes = self.tree_votes(f);
        let mut best = 0usize;
        for c in 1..4 {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        ALL_MODES[best]
    }
}

struct TreeBuilder<'a> {
    features: &'a [[f64; N_FEATURES]],
    labels: &'a [u8],
    max_depth: usize,
    min_leaf: usize,
    mtry: usize,
    nodes: Vec<TreeNode>,
}

impl<'a> TreeBuilder<'a> {
    fn leaf(&mut self, counts: [usize; 4], n: usize) -> usize {
        let mut dist = [0.0; 4];
        for c in 0..4 {
            dist[c] = counts[c] as f64 / n as f64;
        }
        self.nodes.push(TreeNode::Leaf { dist });
        self.nodes.len() - 1
    }

    fn class_counts(&self, idx: &[u32]) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for &i in idx {
            counts[self.labels[i as usize] as usize] += 1;
        }
        counts
    }

    fn gini(counts: &[usize; 4], n: f64) -> f64 {
        let mut g = 1.0;
        for &c in counts {
            let p = c as f64 / n;
            g -= p * p;
        }
        g
    }

    fn build(&mut self, idx: &mut Vec<u32>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = idx.len();
        let counts = self.class_counts(idx);
        let n_classes = counts.iter().filter(|&&c| c > 0).count();
        if depth >= self.max_depth || n < 2 * self.min_leaf || n_classes < 2 {
            return self.leaf(counts, n);
        }

        // Sample mtry distinct candidate features (partial Fisher-Yates).
        let mut order: Vec<usize> = (0..N_FEATURES).collect();
        for i in 0..self.mtry {
            let j = rng.random_range(i..N_FEATURES);
            order.swap(i, j);
        }

        let parent_gini = Self::gini(&counts, n as f64);
        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
        let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(n);
        for &feature in order.iter().take(self.mtry) {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| {
                (self.features[i as usize][feature], self.labels[i as usize])
            }));
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

            let mut left = [0usize; 4];
            for split_at in 1..n {
                left[pairs[split_at - 1].1 as usize] += 1;
                if pairs[split_at].0 == pairs[split_at - 1].0 {
                    continue;
                }
                if split_at < self.min_leaf || n - split_at < self.min_leaf {
                    continue;
                }
                let mut right = [0usize; 4];
                for c in 0..4 {
                    right[c] = counts[c] - left[c];
                }
                let nl = split_at as f64;
                let nr = (n - split_at) as f64;
                let gain = parent_gini
                    - nl / n as f64 * Self::gini(&left, nl)
                    - nr / n as f64 * Self::gini(&right, nr);
                if gain > best.map_or(1e-12, |(g, _, _)| g) {
                    let threshold = 0.5 * (pairs[split_at - 1].0 + pairs[split_at].0);
                    best = Some((gain, feature, threshold));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return self.leaf(counts, n);
        };

        let mut left_idx: Vec<u32> = Vec::new();
        let mut right_idx: Vec<u32> = Vec::new();
        for &i in idx.iter() {
            if self.features[i as usize][feature] <= threshold {
                left_idx.push(i);
            } else {
                right_idx.push(i);
            }
        }
        idx.clear();
        idx.shrink_to_fit();

        let at = self.nodes.len();
        self.nodes.push(TreeNode::Split { feature, threshold, left: 0, right: 0 });
        let left = self.build(&mut left_idx, depth + 1, rng);
        let right = self.build(&mut right_idx, depth + 1, rng);
        if let TreeNode::Split { left: l, right: r, .. } = &mut self.nodes[at] {
            *l = left;
            *r = right;
        }
        at
    }
}

fn train_one_tree(
    features: &[[f64; N_FEATURES]],
    labels: &[u8],
    params: &ForestParams,
    tree_index: usize,
) -> DecisionTree {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(0x7265_6573 + tree_index as u64); // per-tree stream

    let n = labels.len();
    let mut idx: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
    idx.sort_unstable(); // canonical bootstrap order

    let mtry = params
        .features_per_split
        .unwrap_or_else(|| (N_FEATURES as f64).sqrt().floor() as usize)
        .clamp(1, N_FEATURES);
    let mut builder = TreeBuilder {
        features,
        labels,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf.max(1),
        mtry,
        nodes: Vec::new(),
    };
    builder.build(&mut idx, 0, &mut rng);
    DecisionTree { nodes: builder.nodes }
}

fn fit_forest(features: &[[f64; N_FEATURES]], labels: &[u8], params: &ForestParams) -> Vec<DecisionTree> {
    (0..params.n_trees)
        .into_par_iter()
        .map(|t| train_one_tree(features, labels, params, t))
        .collect()
}

/// One-vs-rest confusion counts for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Accuracy, recall, precision, F1 for one binarized class. Metrics whose
/// denominator is zero are reported as `None` and excluded from weighted
/// averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

pub fn classifier_metrics(c: &BinaryCounts) -> Result<ClassMetrics> {
    let n = c.total();
    if n == 0 {
        return Err(Error::Validation("classifier metrics need at least one sample".into()));
    }
    let accuracy = (c.tp + c.tn) as f64 / n as f64;
    let recall = if c.tp + c.fn_ > 0 { Some(c.tp as f64 / (c.tp + c.fn_) as f64) } else { None };
    let precision = if c.tp + c.fp > 0 { Some(c.tp as f64 / (c.tp + c.fp) as f64) } else { None };
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(ClassMetrics { accuracy, recall, precision, f1 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassReport {
    pub class: TravelMode,
    pub counts: BinaryCounts,
    pub metrics: ClassMetrics,
}

/// Evaluation of a classifier on a held-out set, plus training-split
/// cross-validation scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub n_train: usize,
    pub n_test: usize,
    /// Multiclass held-out accuracy (confusion-matrix trace over total).
    pub accuracy: f64,
    /// Row = actual class, column = predicted class.
    pub confusion: [[u64; 4]; 4],
    pub per_class: Vec<PerClassReport>,
    pub weighted_recall: Option<f64>,
    pub weighted_precision: Option<f64>,
    pub weighted_f1: Option<f64>,
    /// Classes excluded from a weighted average because a metric was
    /// undefined (zero denominator).
    pub excluded_from_weighted: Vec<String>,
    pub cv_scores: Vec<f64>,
}

fn confusion_matrix(actual: &[u8], predicted: &[u8]) -> [[u64; 4]; 4] {
    let mut m = [[0u64; 4]; 4];
    for (&a, &p) in actual.iter().zip(predicted) {
        m[a as usize][p as usize] += 1;
    }
    m
}

pub fn binary_counts_from_confusion(confusion: &[[u64; 4]; 4], class: usize) -> BinaryCounts {
    let mut c = BinaryCounts::default();
    for a in 0..4 {
        for p in 0..4 {
            let v = confusion[a][p];
            match (a == class, p == class) {
                (true, true) => c.tp += v,
                (true, false) => c.fn_ += v,
                (false, true) => c.fp += v,
                (false, false) => c.tn += v,
            }
        }
    }
    c
}

fn build_report(
    confusion: [[u64; 4]; 4],
    n_train: usize,
    cv_scores: Vec<f64>,
) -> Result<ClassifierReport> {
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..4).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(4);
    let mut wr = 0.0;
    let mut wr_den = 0.0;
    let mut wp = 0.0;
    let mut wp_den = 0.0;
    let mut wf = 0.0;
    let mut wf_den = 0.0;
    let mut excluded = Vec::new();
    for class in 0..4 {
        let counts = binary_counts_from_confusion(&confusion, class);
        let metrics = classifier_metrics(&counts)?;
        let support = (counts.tp + counts.fn_) as f64;
        match metrics.recall {
            Some(r) => {
                wr += support * r;
                wr_den += support;
            }
            None => excluded.push(format!("{}:recall", ALL_MODES[class])),
        }
        match metrics.precision {
            Some(p) => {
                wp += support * p;
                wp_den += support;
            }
            None => {
                if support > 0.0 {
                    excluded.push(format!("{}:precision", ALL_MODES[class]));
                }
            }
        }
        match metrics.f1 {
            Some(f) => {
                wf += support * f;
                wf_den += support;
            }
            None => {
                if support > 0.0 {
                    excluded.push(format!("{}:f1", ALL_MODES[class]));
                }
            }
        }
        per_class.push(PerClassReport { class: ALL_MODES[class], counts, metrics });
    }
    Ok(ClassifierReport {
        n_train,
        n_test: total as usize,
        accuracy: trace as f64 / total as f64,
        confusion,
        per_class,
        weighted_recall: if wr_den > 0.0 { Some(wr / wr_den) } else { None },
        weighted_precision: if wp_den > 0.0 { Some(wp / wp_den) } else { None },
        weighted_f1: if wf_den > 0.0 { Some(wf / wf_den) } else { None },
        excluded_from_weighted: excluded,
        cv_scores,
    })
}

/// Train on a deterministic 80% shuffle-split of the trips, evaluate on the
/// held-out 20%, and record 5-fold cross-validation accuracies on the
/// training split.
pub fn train_forest(trips: &[TripRecord], params: &ForestParams) -> Result<(ForestModel, ClassifierReport)> {
    if trips.len() < 100 {
        return Err(Error::Validation(format!(
            "training needs at least 100 labeled trips, got {}",
            trips.len()
        )));
    }
    let mut features = Vec::with_capacity(trips.len());
    let mut labels = Vec::with_capacity(trips.len());
    for (i, t) in trips.iter().enumerate() {
        let f = encode_trip(t);
        validate_features(i, t, &f)?;
        features.push(f);
        labels.push(t.mode.ordinal() as u8);
    }
    let distinct = {
        let mut seen = [false; 4];
        for &l in &labels {
            seen[l as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Validation("degenerate labels: training data has a single class".into()));
    }

    // Deterministic shuffle for the 80/20 split.
    let mut order: Vec<usize> = (0..trips.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(0x73_706c_6974); // split stream
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_test = (trips.len() as f64 * 0.2).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);

    let train_features: Vec<[f64; N_FEATURES]> = train_idx.iter().map(|&i| features[i]).collect();
    let train_labels: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    {
        let mut seen = [false; 4];
        for &l in &train_labels {
            seen[l as usize] = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(Error::Validation("degenerate labels: training split has a single class".into()));
        }
    }

    // 5-fold CV on the training split (contiguous folds of the shuffle).
    let mut cv_scores = Vec::with_capacity(5);
    let fold_len = train_idx.len() / 5;
    if fold_len >= 10 {
        for fold in 0..5 {
            let lo = fold * fold_len;
            let hi = if fold == 4 { train_idx.len() } else { lo + fold_len };
            let mut fold_feats = Vec::with_capacity(train_idx.len() - (hi - lo));
            let mut fold_labels = Vec::with_capacity(train_idx.len() - (hi - lo));
            for i in 0..train_idx.len() {
                if i < lo || i >= hi {
                    fold_feats.push(train_features[i]);
                    fold_labels.push(train_labels[i]);
                }
            }
            let fold_params = ForestParams { seed: params.seed ^ (fold as u64 + 1), ..*params };
            let trees = fit_forest(&fold_feats, &fold_labels, &fold_params);
            let model = ForestModel {
                params: fold_params,
                trees,
                feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
                classes: ALL_MODES,
                cv_scores: Vec::new(),
            };
            let correct = (lo..hi)
                .filter(|&i| model.predict(&train_features[i]).ordinal() as u8 == train_labels[i])
                .count();
            cv_scores.push(correct as f64 / (hi - lo) as f64);
        }
    }

    let trees = fit_forest(&train_features, &train_labels, params);
    let model = ForestModel {
        params: *params,
        trees,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        classes: ALL_MODES,
        cv_scores: cv_scores.clone(),
    };

    let predicted: Vec<u8> = test_idx
        .par_iter()
        .map(|&i| model.predict(&features[i]).ordinal() as u8)
        .collect();
    let actual: Vec<u8> = test_idx.iter().map(|&i| labels[i]).collect();
    let report = build_report(confusion_matrix(&actual, &predicted), train_idx.len(), cv_scores)?;
    Ok((model, report))
}

/// Predict the preferred mode for each trip. Pure function of
/// (model, trip); errors name the offending trip.
pub fn infer_preferred_modes(model: &ForestModel, trips: &[TripRecord]) -> Result<Vec<TravelMode>> {
    let mut encoded = Vec::with_capacity(trips.len());
    for (i, t) in trips.iter().enumerate() {
        let f = encode_trip(t);
        validate_features(i, t, &f)?;
        encoded.push(f);
    }
    Ok(encoded.par_iter().map(|f| model.predict(f)).collect())
}

/// Counterfactual inference policy: individuals with enough pre-enrollment
/// history get their own forest; everyone else shares the pooled model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferencePolicy {
    /// Minimum pre-enrollment trips for an individualized model.
    pub min_individual_trips: usize,
    pub pooled_params: ForestParams,
    pub individual_params: ForestParams,
}

impl Default for InferencePolicy {
    fn default() -> Self {
        InferencePolicy {
            min_individual_trips: 20,
            pooled_params: ForestParams::default(),
            individual_params: ForestParams {
                n_trees: 50,
                max_depth: 12,
                min_leaf: 2,
                features_per_split: None,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterfactualInference {
    pub preferred: Vec<TravelMode>,
    pub n_individualized: usize,
    pub n_pooled: usize,
    /// Users whose individual model was degenerate (single-class history);
    /// they fall back to the pooled model.
    pub n_individual_fallbacks: usize,
}

/// Infer preferred modes for `post_trips`, individualizing where the
/// pre-enrollment history is rich enough.
pub fn infer_counterfactual(
    pre_trips: &[TripRecord],
    post_trips: &[TripRecord],
    pooled: &ForestModel,
    policy: &InferencePolicy,
) -> Result<CounterfactualInference> {
    let mut pre_by_user: HashMap<&str, Vec<&TripRecord>> = HashMap::new();
    for t in pre_trips {
        pre_by_user.entry(t.user_id.as_str()).or_default().push(t);
    }

    // Train per-user forests where history allows.
    let mut eligible: Vec<&str> = pre_by_user
        .iter()
        .filter(|(_, v)| v.len() >= policy.min_individual_trips)
        .map(|(&u, _)| u)
        .collect();
    eligible.sort_unstable();

    let individual_models: Vec<(&str, Option<ForestModel>)> = eligible
        .par_iter()
        .map(|&user| {
            let trips = &pre_by_user[user];
            let mut features = Vec::with_capacity(trips.len());
            let mut labels = Vec::with_capacity(trips.len());
            for t in trips.iter() {
                features.push(encode_trip(t));
                labels.push(t.mode.ordinal() as u8);
            }
            let distinct = {
                let mut seen = [false; 4];
                for &l in &labels {
                    seen[l as usize] = true;
                }
                seen.iter().filter(|&&s| s).count()
            };
            if distinct < 2 {
                return (user, None);
            }
            // Stable per-user seed: pooled seed xor a hash of the user id.
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in user.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            let params = ForestParams { seed: policy.individual_params.seed ^ h, ..policy.individual_params };
            let trees = fit_forest(&features, &labels, &params);
            (
                user,
                Some(ForestModel {
                    params,
                    trees,
                    feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
                    classes: ALL_MODES,
                    cv_scores: Vec::new(),
                }),
            )
        })
        .collect();

    let mut models: HashMap<&str, &ForestModel> = HashMap::new();
    let mut n_individual_fallbacks = 0usize;
    for (user, model) in &individual_models {
        match model {
            Some(m) => {
                models.insert(user, m);
            }
            None => n_individual_fallbacks += 1,
        }
    }

    let mut n_individualized = 0usize;
    let mut n_pooled = 0usize;
    let mut preferred = Vec::with_capacity(post_trips.len());
    for (i, t) in post_trips.iter().enumerate() {
        let f = encode_trip(t);
        validate_features(i, t, &f)?;
        match models.get(t.user_id.as_str()) {
            Some(m) => {
                n_individualized += 1;
                preferred.push(m.predict(&f));
            }
            None => {
                n_pooled += 1;
                preferred.push(pooled.predict(&f));
            }
        }
    }

    Ok(CounterfactualInference { preferred, n_individualized, n_pooled, n_individual_fallbacks })
}
