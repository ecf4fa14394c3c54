//! Dual-channel graph convolutional network.
//!
//! Two stacked graph-convolution layers (widths 64 and 128, ReLU) per
//! channel — one channel aggregates over the origin-role adjacency, the
//! other over the destination-role adjacency — followed by two dense layers
//! (widths 128 and 5). Channel outputs are concatenated before the dense
//! layers; the penultimate 128-dim activations are the zone embeddings.
//!
//! The forward/backward passes are hand-rolled on dense matrices; a
//! finite-difference gradient check validates the backpropagation.
//!
//! # References
//!
//! - Kipf & Welling (2017), "Semi-supervised classification with graph
//!   convolutional networks." *ICLR*.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::graphs::{ZoneGraph, NODE_TARGETS};

pub const CONV1_WIDTH: usize = 64;
pub const CONV2_WIDTH: usize = 128;
pub const DENSE1_WIDTH: usize = 128;
pub const OUTPUT_WIDTH: usize = NODE_TARGETS;

/// Per-column min-max scaler persisted with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit<'a, I>(rows: I, width: usize) -> MinMaxScaler
    where
        I: Iterator<Item = &'a [f64]>,
    {
        let mut min = vec![f64::INFINITY; width];
        let mut max = vec![f64::NEG_INFINITY; width];
        for row in rows {
            for j in 0..width {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        for j in 0..width {
            if !min[j].is_finite() || !max[j].is_finite() {
                min[j] = 0.0;
                max[j] = 0.0;
            }
        }
        MinMaxScaler { min, max }
    }

    pub fn scale(&self, j: usize, v: f64) -> f64 {
        let span = self.max[j] - self.min[j];
        if span > 0.0 {
            (v - self.min[j]) / span
        } else {
            0.0
        }
    }
}

/// Training hyperparameters. Defaults: learning rate 0.001, at most 500
/// iterations, early stopping after 10 non-improving iterations on the test
/// MSE, dropout 0.35.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnParams {
    pub lr: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Hold out 20% of zones instead of 20% of graph-days.
    pub split_by_zone: bool,
    pub test_fraction: f64,
}

impl Default for GcnParams {
    fn default() -> Self {
        GcnParams {
            lr: 0.001,
            max_iters: 500,
            patience: 10,
            dropout: 0.35,
            seed: 0,
            split_by_zone: false,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcnModel {
    pub input_dim: usize,
    /// Convolution weights per channel (0 = origin role, 1 = destination role).
    pub w1: [DMatrix<f64>; 2],
    pub b1: [DVector<f64>; 2],
    pub w2: [DMatrix<f64>; 2],
    pub b2: [DVector<f64>; 2],
    pub wd1: DMatrix<f64>,
    pub bd1: DVector<f64>,
    pub wd2: DMatrix<f64>,
    pub bd2: DVector<f64>,
    pub feature_scaler: Option<MinMaxScaler>,
    pub target_scaler: Option<MinMaxScaler>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * s)
}

impl GcnModel {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn new(input_dim: usize, seed: u64) -> GcnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x6763_6e77); // weight stream
        let mut mk = |r, c| glorot(&mut rng, r, c);
        GcnModel {
            input_dim,
            w1: [mk(input_dim, CONV1_WIDTH), mk(input_dim, CONV1_WIDTH)],
            b1: [DVector::zeros(CONV1_WIDTH), DVector::zeros(CONV1_WIDTH)],
            w2: [mk(CONV1_WIDTH, CONV2_WIDTH), mk(CONV1_WIDTH, CONV2_WIDTH)],
            b2: [DVector::zeros(CONV2_WIDTH), DVector::zeros(CONV2_WIDTH)],
            wd1: mk(2 * CONV2_WIDTH, DENSE1_WIDTH),
            bd1: DVector::zeros(DENSE1_WIDTH),
            wd2: mk(DENSE1_WIDTH, OUTPUT_WIDTH),
            bd2: DVector::zeros(OUTPUT_WIDTH),
            feature_scaler: None,
            target_scaler: None,
        }
    }

    /// All parameters as one flat vector (fixed traversal order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for c in 0..2 {
            v.extend(self.w1[c].iter());
            v.extend(self.b1[c].iter());
            v.extend(self.w2[c].iter());
            v.extend(self.b2[c].iter());
        }
        v.extend(self.wd1.iter());
        v.extend(self.bd1.iter());
        v.extend(self.wd2.iter());
        v.extend(self.bd2.iter());
        v
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut at = 0usize;
        let mut take = |m: &mut [f64]| {
            m.copy_from_slice(&flat[at..at + m.len()]);
            at += m.len();
        };
        for c in 0..2 {
            take(self.w1[c].as_mut_slice());
            take(self.b1[c].as_mut_slice());
            take(self.w2[c].as_mut_slice());
            take(self.b2[c].as_mut_slice());
        }
        take(self.wd1.as_mut_slice());
        take(self.bd1.as_mut_slice());
        take(self.wd2.as_mut_slice());
        take(self.bd2.as_mut_slice());
        debug_assert_eq!(at, flat.len());
    }

    pub fn n_params(&self) -> usize {
        2 * (self.w1[0].len() + self.b1[0].len() + self.w2[0].len() + self.b2[0].len())
            + self.wd1.len()
            + self.bd1.len()
            + self.wd2.len()
            + self.bd2.len()
    }
}

/// Symmetrically normalized adjacency with self-loops: D^{-1/2}(A+I)D^{-1/2}
/// with row-sum degrees. `transpose` builds the destination-role matrix.
pub fn normalized_adjacency(graph: &ZoneGraph, transpose: bool) -> DMatrix<f64> {
    let n = graph.n_nodes();
    let mut a = DMatrix::zeros(n, n);
    for e in &graph.edges {
        let (from, to) = if transpose { (e.to, e.from) } else { (e.from, e.to) };
        a[(from as usize, to as usize)] += e.total() as f64;
    }
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    let mut deg = vec![0.0f64; n];
    for i in 0..n {
        let mut s: f64 = 0.0;
        for j in 0..n {
            s += a[(i, j)];
        }
        deg[i] = s.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            if a[(i, j)] != 0.0 {
                a[(i, j)] /= deg[i] * deg[j];
            }
        }
    }
    a
}

fn add_row_broadcast(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for j in 0..m.ncols() {
        let bj = b[j];
        for i in 0..m.nrows() {
            m[(i, j)] += bj;
        }
    }
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn relu_mask(pre: &DMatrix<f64>, grad: &mut DMatrix<f64>) {
    for (g, &z) in grad.iter_mut().zip(pre.iter()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

fn col_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), (0..m.ncols()).map(|j| m.column(j).sum()))
}

struct ForwardCache {
    ax: [DMatrix<f64>; 2],
    z1: [DMatrix<f64>; 2],
    ah1: [DMatrix<f64>; 2],
    z2: [DMatrix<f64>; 2],
    zcat: DMatrix<f64>,
    z3: DMatrix<f64>,
    e: DMatrix<f64>,
    y: DMatrix<f64>,
    masks: Option<[DMatrix<f64>; 5]>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> DMatrix<f64> {
    let keep = 1.0 - p;
    DMatrix::from_fn(rows, cols, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

fn forward(
    model: &GcnModel,
    a: &[DMatrix<f64>; 2],
    x: &DMatrix<f64>,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> ForwardCache {
    let n = x.nrows();
    let mut masks: Option<[DMatrix<f64>; 5]> = None;
    if let Some((p, rng)) = dropout {
        masks = Some([
            dropout_mask(rng, n, CONV1_WIDTH, p),
            dropout_mask(rng, n, CONV1_WIDTH, p),
            dropout_mask(rng, n, CONV2_WIDTH, p),
            dropout_mask(rng, n, CONV2_WIDTH, p),
            dropout_mask(rng, n, DENSE1_WIDTH, p),
        ]);
    }

    let mut ax = [DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)];
    let mut z1 = [DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)];
    let mut ah1 = [DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)];
    let mut z2 = [DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)];
    let mut zcat = DMatrix::zeros(n, 2 * CONV2_WIDTH);
    for c in 0..2 {
        ax[c] = &a[c] * x;
        let mut z = &ax[c] * &model.w1[c];
        add_row_broadcast(&mut z, &model.b1[c]);
        z1[c] = z;
        let mut h1 = relu(&z1[c]);
        if let Some(m) = &masks {
            h1.component_mul_assign(&m[c]);
        }
        ah1[c] = &a[c] * &h1;
        let mut z = &ah1[c] * &model.w2[c];
        add_row_broadcast(&mut z, &model.b2[c]);
        z2[c] = z;
        let mut h2 = relu(&z2[c]);
        if let Some(m) = &masks {
            h2.component_mul_assign(&m[2 + c]);
        }
        zcat.columns_mut(c * CONV2_WIDTH, CONV2_WIDTH).copy_from(&h2);
    }

    let mut z3 = &zcat * &model.wd1;
    add_row_broadcast(&mut z3, &model.bd1);
    let mut e = relu(&z3);
    if let Some(m) = &masks {
        e.component_mul_assign(&m[4]);
    }
    let mut y = &e * &model.wd2;
    add_row_broadcast(&mut y, &model.bd2);

    ForwardCache { ax, z1, ah1, z2, zcat, z3, e, y, masks }
}

/// Eval-mode forward pass on explicit channel adjacencies: per-node 5-vector
/// predictions plus the 128-dim penultimate embeddings.
pub fn gcn_forward(
    model: &GcnModel,
    a_origin: &DMatrix<f64>,
    a_dest: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if x.ncols() != model.input_dim {
        return Err(Error::Validation(format!(
            "feature dimension mismatch: expected {}, got {}",
            model.input_dim,
            x.ncols()
        )));
    }
    if a_origin.nrows() != x.nrows() || a_dest.nrows() != x.nrows() {
        return Err(Error::Validation(format!(
            "adjacency/feature shape mismatch: {}x{} adjacency vs {} nodes",
            a_origin.nrows(),
            a_origin.ncols(),
            x.nrows()
        )));
    }
    let cache = forward(model, &[a_origin.clone(), a_dest.clone()], x, None);
    Ok((cache.y, cache.e))
}

/// Eval-mode forward on a graph, using the model's persisted feature scaler.
pub fn gcn_forward_graph(model: &GcnModel, graph: &ZoneGraph) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let a_o = normalized_adjacency(graph, false);
    let a_d = normalized_adjacency(graph, true);
    let x = scaled_features(model, graph)?;
    gcn_forward(model, &a_o, &a_d, &x)
}

fn scaled_features(model: &GcnModel, graph: &ZoneGraph) -> Result<DMatrix<f64>> {
    let n = graph.n_nodes();
    let f = graph.features.first().map(|r| r.len()).unwrap_or(0);
    if f != model.input_dim {
        return Err(Error::Validation(format!(
            "feature dimension mismatch: expected {}, got {f}",
            model.input_dim
        )));
    }
    Ok(DMatrix::from_fn(n, f, |i, j| match &model.feature_scaler {
        Some(s) => s.scale(j, graph.features[i][j]),
        None => graph.features[i][j],
    }))
}

fn scaled_targets(model: &GcnModel, graph: &ZoneGraph) -> DMatrix<f64> {
    DMatrix::from_fn(graph.n_nodes(), OUTPUT_WIDTH, |i, j| match &model.target_scaler {
        Some(s) => s.scale(j, graph.targets[i][j]),
        None => graph.targets[i][j],
    })
}

#[derive(Clone)]
struct Grads {
    w1: [DMatrix<f64>; 2],
    b1: [DVector<f64>; 2],
    w2: [DMatrix<f64>; 2],
    b2: [DVector<f64>; 2],
    wd1: DMatrix<f64>,
    bd1: DVector<f64>,
    wd2: DMatrix<f64>,
    bd2: DVector<f64>,
}

impl Grads {
    fn zeros(input_dim: usize) -> Grads {
        Grads {
            w1: [DMatrix::zeros(input_dim, CONV1_WIDTH), DMatrix::zeros(input_dim, CONV1_WIDTH)],
            b1: [DVector::zeros(CONV1_WIDTH), DVector::zeros(CONV1_WIDTH)],
            w2: [DMatrix::zeros(CONV1_WIDTH, CONV2_WIDTH), DMatrix::zeros(CONV1_WIDTH, CONV2_WIDTH)],
            b2: [DVector::zeros(CONV2_WIDTH), DVector::zeros(CONV2_WIDTH)],
            wd1: DMatrix::zeros(2 * CONV2_WIDTH, DENSE1_WIDTH),
            bd1: DVector::zeros(DENSE1_WIDTH),
            wd2: DMatrix::zeros(DENSE1_WIDTH, OUTPUT_WIDTH),
            bd2: DVector::zeros(OUTPUT_WIDTH),
        }
    }

    fn add(&mut self, other: &Grads) {
        for c in 0..2 {
            self.w1[c] += &other.w1[c];
            self.b1[c] += &other.b1[c];
            self.w2[c] += &other.w2[c];
            self.b2[c] += &other.b2[c];
        }
        self.wd1 += &other.wd1;
        self.bd1 += &other.bd1;
        self.wd2 += &other.wd2;
        self.bd2 += &other.bd2;
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for c in 0..2 {
            v.extend(self.w1[c].iter());
            v.extend(self.b1[c].iter());
            v.extend(self.w2[c].iter());
            v.extend(self.b2[c].iter());
        }
        v.extend(self.wd1.iter());
        v.extend(self.bd1.iter());
        v.extend(self.wd2.iter());
        v.extend(self.bd2.iter());
        v
    }
}

/// Mean squared error over (active nodes × 5 outputs).
fn graph_loss(y: &DMatrix<f64>, t: &DMatrix<f64>, mask: Option<&[bool]>) -> f64 {
    let mut sum = 0.0;
    let mut n_active = 0usize;
    for i in 0..y.nrows() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        n_active += 1;
        for j in 0..y.ncols() {
            let d = y[(i, j)] - t[(i, j)];
            sum += d * d;
        }
    }
    if n_active == 0 {
        0.0
    } else {
        sum / (n_active * y.ncols()) as f64
    }
}

fn backward(
    model: &GcnModel,
    a: &[DMatrix<f64>; 2],
    cache: &ForwardCache,
    t: &DMatrix<f64>,
    mask: Option<&[bool]>,
) -> (f64, Grads) {
    let loss = graph_loss(&cache.y, t, mask);
    let n_active = match mask {
        Some(m) => m.iter().filter(|&&b| b).count(),
        None => cache.y.nrows(),
    };
    let mut g = Grads::zeros(model.input_dim);
    if n_active == 0 {
        return (loss, g);
    }
    let scale = 2.0 / (n_active * OUTPUT_WIDTH) as f64;
    let mut dy = DMatrix::zeros(cache.y.nrows(), cache.y.ncols());
    for i in 0..cache.y.nrows() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        for j in 0..cache.y.ncols() {
            dy[(i, j)] = scale * (cache.y[(i, j)] - t[(i, j)]);
        }
    }

    g.wd2 = cache.e.transpose() * &dy;
    g.bd2 = col_sums(&dy);
    let mut de = &dy * model.wd2.transpose();
    if let Some(masks) = &cache.masks {
        de.component_mul_assign(&masks[4]);
    }
    relu_mask(&cache.z3, &mut de);

    g.wd1 = cache.zcat.transpose() * &de;
    g.bd1 = col_sums(&de);
    let dzcat = &de * model.wd1.transpose();

    for c in 0..2 {
        let mut dh2 = dzcat.columns(c * CONV2_WIDTH, CONV2_WIDTH).into_owned();
        if let Some(masks) = &cache.masks {
            dh2.component_mul_assign(&masks[2 + c]);
        }
        relu_mask(&cache.z2[c], &mut dh2);
        g.w2[c] = cache.ah1[c].transpose() * &dh2;
        g.b2[c] = col_sums(&dh2);
        let dah1 = &dh2 * model.w2[c].transpose();
        let mut dh1 = a[c].transpose() * dah1;
        if let Some(masks) = &cache.masks {
            dh1.component_mul_assign(&masks[c]);
        }
        relu_mask(&cache.z1[c], &mut dh1);
        g.w1[c] = cache.ax[c].transpose() * &dh1;
        g.b1[c] = col_sums(&dh1);
    }

    (loss, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedGcn {
    pub model: GcnModel,
    /// Metrics on the test split in the scaled target space.
    pub metrics: GcnMetrics,
    pub test_mse_trace: Vec<f64>,
    pub best_iter: usize,
    pub iters_run: usize,
    pub params: GcnParams,
}

struct PreparedGraph {
    a: [DMatrix<f64>; 2],
    x: DMatrix<f64>,
    t: DMatrix<f64>,
}

/// Train on MSE with plain gradient descent, early-stopping on the test
/// MSE and returning the best checkpoint.
pub fn gcn_train(graphs: &[ZoneGraph], params: &GcnParams) -> Result<TrainedGcn> {
    if graphs.len() < 2 {
        return Err(Error::Validation("training needs at least 2 graphs".into()));
    }
    if !(params.test_fraction > 0.0 && params.test_fraction < 1.0) {
        return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
    }
    if !(0.0..1.0).contains(&params.dropout) {
        return Err(Error::Config("dropout must lie in [0, 1)".into()));
    }
    for g in graphs {
        for t in &g.targets {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("targets must be finite".into()));
            }
        }
    }
    let input_dim = graphs[0].features.first().map(|r| r.len()).unwrap_or(0);
    let n_nodes = graphs[0].n_nodes();
    if graphs.iter().any(|g| g.n_nodes() != n_nodes) {
        return Err(Error::Validation("all graphs must share the node set".into()));
    }

    // Split: by graph-day (default) or by zone.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(0x73_706c_6974);
    let (train_graphs, test_graphs, train_mask, test_mask): (Vec<usize>, Vec<usize>, Option<Vec<bool>>, Option<Vec<bool>>) =
        if params.split_by_zone {
            let mut order: Vec<usize> = (0..n_nodes).collect();
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let n_test = ((n_nodes as f64 * params.test_fraction).round() as usize).clamp(1, n_nodes - 1);
            let mut train = vec![true; n_nodes];
            for &z in order.iter().take(n_test) {
                train[z] = false;
            }
            let test: Vec<bool> = train.iter().map(|&b| !b).collect();
            ((0..graphs.len()).collect(), (0..graphs.len()).collect(), Some(train), Some(test))
        } else {
            let mut order: Vec<usize> = (0..graphs.len()).collect();
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let n_test = ((graphs.len() as f64 * params.test_fraction).round() as usize)
                .clamp(1, graphs.len() - 1);
            let (test, train) = order.split_at(n_test);
            let mut train = train.to_vec();
            let mut test = test.to_vec();
            train.sort_unstable();
            test.sort_unstable();
            (train, test, None, None)
        };

    let mut model = GcnModel::new(input_dim, params.seed);
    model.feature_scaler = Some(MinMaxScaler::fit(
        train_graphs.iter().flat_map(|&gi| graphs[gi].features.iter().map(|r| r.as_slice())),
        input_dim,
    ));
    model.target_scaler = Some(MinMaxScaler::fit(
        train_graphs.iter().flat_map(|&gi| graphs[gi].targets.iter().map(|r| r.as_slice())),
        OUTPUT_WIDTH,
    ));

    let prepare = |gi: usize| -> Result<PreparedGraph> {
        let g = &graphs[gi];
        Ok(PreparedGraph {
            a: [normalized_adjacency(g, false), normalized_adjacency(g, true)],
            x: scaled_features(&model, g)?,
            t: scaled_targets(&model, g),
        })
    };
    let train_set: Vec<PreparedGraph> = train_graphs.iter().map(|&gi| prepare(gi)).collect::<Result<_>>()?;
    let test_set: Vec<PreparedGraph> = test_graphs.iter().map(|&gi| prepare(gi)).collect::<Result<_>>()?;

    let test_mse = |m: &GcnModel| -> f64 {
        let losses: Vec<f64> = test_set
            .par_iter()
            .map(|p| {
                let cache = forward(m, &p.a, &p.x, None);
                graph_loss(&cache.y, &p.t, test_mask.as_deref())
            })
            .collect();
        losses.iter().sum::<f64>() / losses.len() as f64
    };

    let mut best_model = model.clone();
    let mut best_mse = test_mse(&model);
    let mut best_iter = 0usize;
    let mut trace = vec![best_mse];
    let mut stale = 0usize;
    let mut iters_run = 0usize;

    for iter in 0..params.max_iters {
        iters_run = iter + 1;
        // Accumulate gradients over the training graphs (order-stable sum).
        let results: Vec<(f64, Grads)> = train_set
            .par_iter()
            .enumerate()
            .map(|(gi, p)| {
                if params.dropout > 0.0 {
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0xd50f);
                    drop_rng.set_stream(((iter as u64) << 32) | gi as u64);
                    let cache =
                        forward(&model, &p.a, &p.x, Some((params.dropout, &mut drop_rng)));
                    backward(&model, &p.a, &cache, &p.t, train_mask.as_deref())
                } else {
                    let cache = forward(&model, &p.a, &p.x, None);
                    backward(&model, &p.a, &cache, &p.t, train_mask.as_deref())
                }
            })
            .collect();

        let mut loss_sum = 0.0;
        let mut grads = Grads::zeros(input_dim);
        for (l, g) in &results {
            loss_sum += l;
            grads.add(g);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at iteration {iter}")));
        }

        let step = params.lr / train_set.len() as f64;
        for c in 0..2 {
            model.w1[c] -= &grads.w1[c] * step;
            model.b1[c] -= &grads.b1[c] * step;
            model.w2[c] -= &grads.w2[c] * step;
            model.b2[c] -= &grads.b2[c] * step;
        }
        model.wd1 -= &grads.wd1 * step;
        model.bd1 -= &grads.bd1 * step;
        model.wd2 -= &grads.wd2 * step;
        model.bd2 -= &grads.bd2 * step;

        let mse = test_mse(&model);
        if !mse.is_finite() {
            return Err(Error::Numeric(format!("test loss diverged at iteration {iter}")));
        }
        trace.push(mse);
        if mse < best_mse {
            best_mse = mse;
            best_model = model.clone();
            best_iter = iter + 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= params.patience {
                break;
            }
        }
    }

    // Test metrics of the best checkpoint (scaled space).
    let (mut se_sum, mut ae_sum, mut n_vals) = (0.0, 0.0, 0usize);
    for p in &test_set {
        let cache = forward(&best_model, &p.a, &p.x, None);
        for i in 0..cache.y.nrows() {
            if let Some(m) = &test_mask {
                if !m[i] {
                    continue;
                }
            }
            for j in 0..OUTPUT_WIDTH {
                let d = cache.y[(i, j)] - p.t[(i, j)];
                se_sum += d * d;
                ae_sum += d.abs();
                n_vals += 1;
            }
        }
    }
    let mse = se_sum / n_vals as f64;
    let metrics = GcnMetrics { mse, rmse: mse.sqrt(), mae: ae_sum / n_vals as f64 };

    Ok(TrainedGcn {
        model: best_model,
        metrics,
        test_mse_trace: trace,
        best_iter,
        iters_run,
        params: params.clone(),
    })
}

/// Mean of the per-day 128-dim node embeddings over the given graphs.
pub fn mean_embeddings(model: &GcnModel, graphs: &[ZoneGraph]) -> Result<Vec<Vec<f64>>> {
    if graphs.is_empty() {
        return Err(Error::Validation("no graphs to embed".into()));
    }
    let n = graphs[0].n_nodes();
    let partial: Vec<DMatrix<f64>> = graphs
        .par_iter()
        .map(|g| gcn_forward_graph(model, g).map(|(_, e)| e))
        .collect::<Result<_>>()?;
    let mut sum = DMatrix::zeros(n, DENSE1_WIDTH);
    for e in &partial {
        sum += e;
    }
    sum /= graphs.len() as f64;
    Ok((0..n).map(|i| sum.row(i).iter().copied().collect()).collect())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    pub n_params: usize,
    /// Times the graph features were jittered to move pre-activations off
    /// ReLU kinks before differencing.
    pub nudge_attempts: usize,
}

const GRAD_CHECK_H: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-4;

fn min_abs_preactivation(cache: &ForwardCache) -> f64 {
    let mut m = f64::INFINITY;
    for c in 0..2 {
        for &v in cache.z1[c].iter() {
            m = m.min(v.abs());
        }
        for &v in cache.z2[c].iter() {
            m = m.min(v.abs());
        }
    }
    for &v in cache.z3.iter() {
        m = m.min(v.abs());
    }
    m
}

/// Central finite differences (h = 1e-5) against the analytic gradient for
/// every parameter, dropout disabled. Features are jittered slightly if a
/// pre-activation sits on a ReLU kink, where the loss is not differentiable.
pub fn gradient_check(model: &GcnModel, graph: &ZoneGraph) -> Result<GradCheckResult> {
    if graph.n_nodes() > 6 {
        return Err(Error::Validation("gradient check expects a tiny graph (<= 6 nodes)".into()));
    }
    let a = [normalized_adjacency(graph, false), normalized_adjacency(graph, true)];
    let f = graph.features.first().map(|r| r.len()).unwrap_or(0);
    if f != model.input_dim {
        return Err(Error::Validation(format!(
            "feature dimension mismatch: expected {}, got {f}",
            model.input_dim
        )));
    }
    let t = DMatrix::from_fn(graph.n_nodes(), OUTPUT_WIDTH, |i, j| graph.targets[i][j]);

    // Nudge inputs off ReLU kinks: finite differencing across a kink is
    // meaningless.
    let mut x = DMatrix::from_fn(graph.n_nodes(), f, |i, j| graph.features[i][j]);
    let mut nudge_attempts = 0usize;
    loop {
        let cache = forward(model, &a, &x, None);
        if min_abs_preactivation(&cache) > KINK_MARGIN || nudge_attempts >= 32 {
            break;
        }
        nudge_attempts += 1;
        let jitter = 1.0 + 0.003 * nudge_attempts as f64;
        x = DMatrix::from_fn(graph.n_nodes(), f, |i, j| {
            graph.features[i][j] * jitter + 0.0011 * nudge_attempts as f64
        });
    }

    let cache = forward(model, &a, &x, None);
    let (_, analytic) = backward(model, &a, &cache, &t, None);
    let analytic = analytic.flatten();
    let theta = model.flatten();
    let n_params = theta.len();

    let chunk = 512usize;
    let max_rel_error = (0..n_params)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|idxs| {
            let mut m = model.clone();
            let mut local = theta.clone();
            let mut worst = 0.0f64;
            for &p in idxs {
                let orig = local[p];
                local[p] = orig + GRAD_CHECK_H;
                m.unflatten(&local);
                let up = graph_loss(&forward(&m, &a, &x, None).y, &t, None);
                local[p] = orig - GRAD_CHECK_H;
                m.unflatten(&local);
                let down = graph_loss(&forward(&m, &a, &x, None).y, &t, None);
                local[p] = orig;
                let numeric = (up - down) / (2.0 * GRAD_CHECK_H);
                let denom = (analytic[p].abs() + numeric.abs()).max(1e-8);
                worst = worst.max((analytic[p] - numeric).abs() / denom);
            }
            worst
        })
        .reduce(|| 0.0, f64::max);

    Ok(GradCheckResult { max_rel_error, n_params, nudge_attempts })
}
