//! CART regression trees and the subsampled random forest built from them.
//!
//! Each tree is grown on `n` rows drawn without replacement. At every node
//! `k` of the `p` features are drawn as split candidates; the split that
//! minimizes the children's summed squared error wins. Trees stop at depth
//! `d`, when a node is too small to give both children `min_leaf` rows, or
//! when no split strictly reduces the error.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, DatasetFingerprint};
use crate::exec::{try_map_indexed, Execution};
use crate::seed::{derive_seed, mix64};

const SUBSAMPLE_STREAM: u64 = 0x5AB5;
const TREE_STREAM: u64 = 0x7EE;
const NODE_STREAM: u64 = 0x40DE;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("invalid forest configuration: {0}")]
    InvalidConfig(String),
    #[error("subsample size {n} exceeds the {available} available rows")]
    SubsampleTooLarge { n: usize, available: usize },
    #[error("{rows} rows cannot fill a leaf of at least {min_leaf}")]
    TooFewRows { rows: usize, min_leaf: usize },
    #[error("expected a feature vector of length {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("malformed tree: {0}")]
    MalformedTree(String),
}

/// Statistic of the training responses stored in each leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LeafSummary {
    #[default]
    Mean,
    Median,
}

impl LeafSummary {
    pub fn apply(self, values: &mut [f64]) -> f64 {
        match self {
            LeafSummary::Mean => values.iter().sum::<f64>() / values.len() as f64,
            LeafSummary::Median => {
                values.sort_by(f64::total_cmp);
                let mid = values.len() / 2;
                if values.len() % 2 == 1 {
                    values[mid]
                } else {
                    0.5 * (values[mid - 1] + values[mid])
                }
            }
        }
    }
}

/// Hyper-parameters of a forest: subsample size `n`, split candidates `k`,
/// maximum depth `d` (root is depth 0) and tree count `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestConfig {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub m: usize,
    pub min_leaf: usize,
    pub leaf_summary: LeafSummary,
    pub seed: u64,
}

impl ForestConfig {
    /// Checks the configuration against a dataset of `rows x p`.
    pub fn validate(&self, rows: usize, p: usize) -> Result<(), ForestError> {
        let bad = |msg: String| Err(ForestError::InvalidConfig(msg));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.n > rows {
            return Err(ForestError::SubsampleTooLarge { n: self.n, available: rows });
        }
        if self.k == 0 || self.k > p {
            return bad(format!("k must lie in 1..={p}, got {}", self.k));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be at least 1".into());
        }
        if self.n < self.min_leaf {
            return Err(ForestError::TooFewRows { rows: self.n, min_leaf: self.min_leaf });
        }
        if self.n > u32::MAX as usize || p > u32::MAX as usize {
            return bad("dataset too large for 32-bit leaf counts".into());
        }
        Ok(())
    }

    /// Seed for the feature draws of tree `tree_id`.
    pub fn tree_seed(&self, tree_id: usize) -> u64 {
        derive_seed(self.seed, TREE_STREAM, tree_id as u64)
    }
}

/// Child pointer of a split node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Split(u32),
    Leaf(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitNode {
    pub feature: u32,
    /// Rows with `x[feature] <= threshold` go left.
    pub threshold: f64,
    pub left: NodeRef,
    pub right: NodeRef,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leaf {
    pub value: f64,
    /// Training rows that reached this leaf.
    pub count: u32,
}

/// A fitted regression tree. Split nodes are stored in pre-order with the
/// root at index 0; leaves are numbered `0..K` in left-to-right order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    n_features: usize,
    nodes: Vec<SplitNode>,
    leaves: Vec<Leaf>,
}

impl DecisionTree {
    /// Assembles a tree from raw parts, checking that it is a proper binary
    /// tree in which every node and leaf is reachable exactly once.
    pub fn from_parts(
        n_features: usize,
        nodes: Vec<SplitNode>,
        leaves: Vec<Leaf>,
    ) -> Result<Self, ForestError> {
        let malformed = |m: String| Err(ForestError::MalformedTree(m));
        if leaves.is_empty() {
            return malformed("a tree needs at least one leaf".into());
        }
        if nodes.len() + 1 != leaves.len() {
            return malformed(format!(
                "{} split nodes cannot carry {} leaves",
                nodes.len(),
                leaves.len()
            ));
        }
        let mut node_seen = vec![false; nodes.len()];
        let mut leaf_seen = vec![false; leaves.len()];
        let mut stack = vec![if nodes.is_empty() { NodeRef::Leaf(0) } else { NodeRef::Split(0) }];
        while let Some(r) = stack.pop() {
            let (seen, idx) = match r {
                NodeRef::Split(i) => (&mut node_seen, i as usize),
                NodeRef::Leaf(i) => (&mut leaf_seen, i as usize),
            };
            match seen.get_mut(idx) {
                Some(s) if !*s => *s = true,
                Some(_) => return malformed(format!("{r:?} is referenced twice")),
                None => return malformed(format!("{r:?} is out of range")),
            }
            if let NodeRef::Split(i) = r {
                let node = &nodes[i as usize];
                if node.feature as usize >= n_features {
                    return malformed(format!("split feature {} out of range", node.feature));
                }
                if !node.threshold.is_finite() {
                    return malformed("non-finite threshold".into());
                }
                stack.push(node.right);
                stack.push(node.left);
            }
        }
        if node_seen.iter().chain(&leaf_seen).any(|s| !s) {
            return malformed("unreachable node or leaf".into());
        }
        Ok(Self { n_features, nodes, leaves })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Leaf count `K`.
    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn nodes(&self) -> &[SplitNode] {
        &self.nodes
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn leaf_values(&self) -> Vec<f64> {
        self.leaves.iter().map(|l| l.value).collect()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[SplitNode], r: NodeRef) -> usize {
            match r {
                NodeRef::Leaf(_) => 0,
                NodeRef::Split(i) => {
                    let n = &nodes[i as usize];
                    1 + walk(nodes, n.left).max(walk(nodes, n.right))
                }
            }
        }
        walk(&self.nodes, self.root())
    }

    fn root(&self) -> NodeRef {
        if self.nodes.is_empty() {
            NodeRef::Leaf(0)
        } else {
            NodeRef::Split(0)
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ForestError> {
        if x.len() != self.n_features {
            return Err(ForestError::DimensionMismatch { expected: self.n_features, found: x.len() });
        }
        Ok(())
    }

    /// Index of the leaf `x` lands in; `x[feature] <= threshold` goes left.
    pub fn traverse(&self, x: &[f64]) -> Result<usize, ForestError> {
        self.check_dim(x)?;
        Ok(self.leaf_of(x))
    }

    pub(crate) fn leaf_of(&self, x: &[f64]) -> usize {
        let mut at = self.root();
        loop {
            match at {
                NodeRef::Leaf(i) => return i as usize,
                NodeRef::Split(i) => {
                    let node = &self.nodes[i as usize];
                    at = if x[node.feature as usize] <= node.threshold {
                        node.left
                    } else {
                        node.right
                    };
                }
            }
        }
    }

    /// The leaf summary stored at `traverse(x)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64, ForestError> {
        self.check_dim(x)?;
        Ok(self.leaves[self.leaf_of(x)].value)
    }
}

/// `n` distinct row indices out of `0..n_rows`, ascending, determined by
/// `(seed, tree_id)`.
pub fn subsample(n_rows: usize, n: usize, seed: u64, tree_id: usize) -> Result<Vec<usize>, ForestError> {
    if n > n_rows {
        return Err(ForestError::SubsampleTooLarge { n, available: n_rows });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SUBSAMPLE_STREAM, tree_id as u64));
    let mut rows = sample(&mut rng, n_rows, n).into_vec();
    rows.sort_unstable();
    Ok(rows)
}

struct Grower<'a> {
    dataset: &'a Dataset,
    config: &'a ForestConfig,
    tree_seed: u64,
    nodes: Vec<SplitNode>,
    leaves: Vec<Leaf>,
    // Scratch buffers reused across nodes.
    pairs: Vec<(f64, f64)>,
    values: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    sse: f64,
}

impl Grower<'_> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize, key: u64) -> NodeRef {
        let split = if depth < self.config.d && rows.len() >= 2 * self.config.min_leaf {
            self.best_split(&rows, key)
        } else {
            None
        };
        let Some(split) = split else {
            return self.make_leaf(&rows);
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&r| self.dataset.row(r)[split.feature] <= split.threshold);
        drop(rows);
        let id = self.nodes.len();
        self.nodes.push(SplitNode {
            feature: split.feature as u32,
            threshold: split.threshold,
            left: NodeRef::Leaf(0),
            right: NodeRef::Leaf(0),
        });
        let left = self.grow(left_rows, depth + 1, mix64(key.wrapping_mul(2).wrapping_add(1)));
        let right = self.grow(right_rows, depth + 1, mix64(key.wrapping_mul(2).wrapping_add(2)));
        self.nodes[id].left = left;
        self.nodes[id].right = right;
        NodeRef::Split(id as u32)
    }

    fn make_leaf(&mut self, rows: &[usize]) -> NodeRef {
        self.values.clear();
        self.values.extend(rows.iter().map(|&r| self.dataset.response(r)));
        let value = self.config.leaf_summary.apply(&mut self.values);
        let id = self.leaves.len();
        self.leaves.push(Leaf { value, count: rows.len() as u32 });
        NodeRef::Leaf(id as u32)
    }

    fn best_split(&mut self, rows: &[usize], key: u64) -> Option<BestSplit> {
        let p = self.dataset.n_features();
        let min_leaf = self.config.min_leaf;
        let count = rows.len();
        let mean = rows.iter().map(|&r| self.dataset.response(r)).sum::<f64>() / count as f64;
        let scale = rows.iter().map(|&r| self.dataset.response(r).abs()).fold(0.0, f64::max);
        // Centering keeps the running-sum error formula well conditioned.
        let parent_sse: f64 = rows.iter().map(|&r| (self.dataset.response(r) - mean).powi(2)).sum();
        // Below this the node is constant up to rounding noise.
        let noise_floor = count as f64 * (1e-12 * scale).powi(2);
        if parent_sse <= noise_floor {
            return None;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.tree_seed, NODE_STREAM, key));
        let mut candidates = sample(&mut rng, p, self.config.k).into_vec();
        candidates.sort_unstable();

        let mut best: Option<BestSplit> = None;
        for feature in candidates {
            self.pairs.clear();
            self.pairs.extend(rows.iter().map(|&r| {
                (self.dataset.row(r)[feature], self.dataset.response(r) - mean)
            }));
            self.pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total: f64 = self.pairs.iter().map(|q| q.1).sum();
            let total_sq: f64 = self.pairs.iter().map(|q| q.1 * q.1).sum();
            let (mut sum_l, mut sq_l) = (0.0, 0.0);
            for i in 1..count {
                let (_, y) = self.pairs[i - 1];
                sum_l += y;
                sq_l += y * y;
                if i < min_leaf || count - i < min_leaf {
                    continue;
                }
                let (lo, hi) = (self.pairs[i - 1].0, self.pairs[i].0);
                if lo >= hi {
                    continue;
                }
                let (nl, nr) = (i as f64, (count - i) as f64);
                let sum_r = total - sum_l;
                let sse = (sq_l - sum_l * sum_l / nl) + ((total_sq - sq_l) - sum_r * sum_r / nr);
                if best.as_ref().map_or(true, |b| sse < b.sse) {
                    let mut threshold = 0.5 * (lo + hi);
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(BestSplit { feature, threshold, sse });
                }
            }
        }
        best.filter(|b| parent_sse - b.sse > 1e-10 * parent_sse && b.sse < parent_sse)
    }
}

/// Grows one tree on `rows` of `dataset`.
pub fn fit_tree(
    dataset: &Dataset,
    rows: &[usize],
    config: &ForestConfig,
    tree_seed: u64,
) -> Result<DecisionTree, ForestError> {
    if config.min_leaf == 0 || config.k == 0 || config.k > dataset.n_features() {
        return Err(ForestError::InvalidConfig(format!(
            "need min_leaf >= 1 and 1 <= k <= {}",
            dataset.n_features()
        )));
    }
    if rows.len() < config.min_leaf || rows.is_empty() {
        return Err(ForestError::TooFewRows { rows: rows.len(), min_leaf: config.min_leaf });
    }
    let mut grower = Grower {
        dataset,
        config,
        tree_seed,
        nodes: Vec::new(),
        leaves: Vec::new(),
        pairs: Vec::with_capacity(rows.len()),
        values: Vec::with_capacity(rows.len()),
    };
    grower.grow(rows.to_vec(), 0, mix64(tree_seed));
    Ok(DecisionTree { n_features: dataset.n_features(), nodes: grower.nodes, leaves: grower.leaves })
}

/// The fitted ensemble together with the record of which rows each tree saw.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    config: ForestConfig,
    n_features: usize,
    fingerprint: DatasetFingerprint,
    trees: Vec<DecisionTree>,
    subsample_row_ids: Vec<Vec<usize>>,
}

impl Forest {
    /// Rebuilds a forest from stored parts. Subsample row ids are regenerated
    /// from the configuration and the training-set row count.
    pub fn from_parts(
        config: ForestConfig,
        n_features: usize,
        fingerprint: DatasetFingerprint,
        trees: Vec<DecisionTree>,
    ) -> Result<Self, ForestError> {
        config.validate(fingerprint.rows as usize, n_features)?;
        if trees.len() != config.m {
            return Err(ForestError::MalformedTree(format!(
                "config says {} trees, found {}",
                config.m,
                trees.len()
            )));
        }
        if let Some(t) = trees.iter().find(|t| t.n_features != n_features) {
            return Err(ForestError::DimensionMismatch { expected: n_features, found: t.n_features });
        }
        let subsample_row_ids = (0..config.m)
            .map(|m| subsample(fingerprint.rows as usize, config.n, config.seed, m))
            .collect::<Result<_, _>>()?;
        Ok(Self { config, n_features, fingerprint, trees, subsample_row_ids })
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn fingerprint(&self) -> DatasetFingerprint {
        self.fingerprint
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn subsample_row_ids(&self) -> &[Vec<usize>] {
        &self.subsample_row_ids
    }

    /// Leaf counts `K` per tree.
    pub fn leaf_counts(&self) -> Vec<usize> {
        self.trees.iter().map(DecisionTree::n_leaves).collect()
    }

    /// The first `m` trees as a forest of their own. Tree `i` depends only on
    /// the seed and `i`, so this equals fitting with `m` trees directly.
    pub fn truncated(&self, m: usize) -> Result<Forest, ForestError> {
        if m == 0 || m > self.trees.len() {
            return Err(ForestError::InvalidConfig(format!(
                "cannot keep {m} of {} trees",
                self.trees.len()
            )));
        }
        Ok(Forest {
            config: ForestConfig { m, ..self.config },
            n_features: self.n_features,
            fingerprint: self.fingerprint,
            trees: self.trees[..m].to_vec(),
            subsample_row_ids: self.subsample_row_ids[..m].to_vec(),
        })
    }

    /// Mean of the per-tree predictions.
    pub fn predict(&self, x: &[f64]) -> Result<f64, ForestError> {
        if x.len() != self.n_features {
            return Err(ForestError::DimensionMismatch { expected: self.n_features, found: x.len() });
        }
        let sum: f64 = self.trees.iter().map(|t| t.leaves[t.leaf_of(x)].value).sum();
        Ok(sum / self.trees.len() as f64)
    }
}

/// Fits `config.m` trees on their own subsamples, spreading trees over the
/// rayon pool.
pub fn fit_forest(dataset: &Dataset, config: &ForestConfig) -> Result<Forest, ForestError> {
    fit_forest_with(dataset, config, Execution::default())
}

pub fn fit_forest_with(
    dataset: &Dataset,
    config: &ForestConfig,
    exec: Execution,
) -> Result<Forest, ForestError> {
    config.validate(dataset.n_rows(), dataset.n_features())?;
    let fitted = try_map_indexed(exec, config.m, |m| {
        let rows = subsample(dataset.n_rows(), config.n, config.seed, m)?;
        let tree = fit_tree(dataset, &rows, config, config.tree_seed(m))?;
        Ok::<_, ForestError>((tree, rows))
    })?;
    let (trees, subsample_row_ids) = fitted.into_iter().unzip();
    Ok(Forest {
        config: *config,
        n_features: dataset.n_features(),
        fingerprint: dataset.fingerprint(),
        trees,
        subsample_row_ids,
    })
}
