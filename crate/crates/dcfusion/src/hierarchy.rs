//! Fusion trees and the recursive divide-and-conquer driver.
//!
//! Leaves sample their (possibly tempered) factor; every internal node fuses
//! the weighted outputs of its children with [`gbf`], treating each child's
//! output as a sub-posterior of the product of its own factors. Only the
//! final-time marginal and its weights travel up the tree.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::linalg::Matrix;
use crate::model::{temper, Factor, ProductModel, SubPosteriorModel};
use crate::smc::{gbf, stream_rng, FusionResult, GbfSettings, MeshPolicy, TemporalMesh, WeightedSamples};
use crate::FusionRng;

/// Shape of a fusion tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TreeKind {
    /// A single fusion of all `C` leaves.
    ForkJoin,
    /// Leaves paired level by level, an odd node promoted unchanged.
    BalancedBinary,
    /// Left-deep chain `((f₁ f₂) f₃) …`.
    Progressive,
    /// `inv_beta` groups, each holding every factor raised to `1/inv_beta`;
    /// each group is fused balanced-binary, then the groups likewise.
    Tempered { inv_beta: usize },
}

/// A vertex of a fusion tree.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyNode {
    /// Pre-order index, unique in the tree.
    pub id: usize,
    /// Empty iff the node is a leaf.
    pub children: Vec<HierarchyNode>,
    /// Sorted indices of the factors below this node.
    pub factor_set: Vec<usize>,
    /// Tempering exponent of a leaf (`None` means 1).
    pub temper_beta: Option<f64>,
    /// Overrides the run-wide mesh policy at this node.
    pub mesh_policy: Option<MeshPolicy>,
}

impl HierarchyNode {
    fn leaf(index: usize, beta: Option<f64>) -> Self {
        Self { id: 0, children: Vec::new(), factor_set: vec![index], temper_beta: beta, mesh_policy: None }
    }

    fn join(children: Vec<HierarchyNode>) -> Self {
        let mut factor_set: Vec<usize> = children.iter().flat_map(|c| c.factor_set.iter().copied()).collect();
        factor_set.sort_unstable();
        factor_set.dedup();
        Self { id: 0, children, factor_set, temper_beta: None, mesh_policy: None }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Number of leaves.
    pub fn n_leaves(&self) -> usize {
        if self.is_leaf() {
            1
        } else {
            self.children.iter().map(HierarchyNode::n_leaves).sum()
        }
    }

    /// Number of internal (fusing) nodes.
    pub fn n_internal(&self) -> usize {
        if self.is_leaf() {
            0
        } else {
            1 + self.children.iter().map(HierarchyNode::n_internal).sum::<usize>()
        }
    }

    /// Edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }

    fn number(&mut self, next: &mut usize) {
        self.id = *next;
        *next += 1;
        for c in &mut self.children {
            c.number(next);
        }
    }
}

fn pair_levels(mut level: Vec<HierarchyNode>) -> HierarchyNode {
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(HierarchyNode::join(vec![a, b])),
                None => next.push(a),
            }
        }
        level = next;
    }
    level.pop().expect("non-empty level")
}

/// Builds a tree over `c` factors.
pub fn build_tree(kind: TreeKind, c: usize) -> Result<HierarchyNode> {
    if c == 0 {
        return Err(FusionError::EmptyInput("factors"));
    }
    let leaves = |beta: Option<f64>| (0..c).map(move |i| HierarchyNode::leaf(i, beta));
    let mut root = match kind {
        _ if c == 1 && !matches!(kind, TreeKind::Tempered { inv_beta } if inv_beta > 1) => {
            HierarchyNode::leaf(0, None)
        }
        TreeKind::ForkJoin => HierarchyNode::join(leaves(None).collect()),
        TreeKind::BalancedBinary => pair_levels(leaves(None).collect()),
        TreeKind::Progressive => {
            let mut it = leaves(None);
            let mut acc = it.next().expect("c ≥ 1");
            for l in it {
                acc = HierarchyNode::join(vec![acc, l]);
            }
            acc
        }
        TreeKind::Tempered { inv_beta } => {
            if inv_beta == 0 {
                return Err(FusionError::BadBeta(f64::INFINITY));
            }
            if inv_beta == 1 {
                pair_levels(leaves(None).collect())
            } else {
                let beta = 1.0 / inv_beta as f64;
                let groups = (0..inv_beta).map(|_| pair_levels(leaves(Some(beta)).collect())).collect();
                pair_levels(groups)
            }
        }
    };
    root.number(&mut 0);
    Ok(root)
}

/// Settings of a divide-and-conquer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcSettings {
    /// Settings of every internal fusion and of the leaf samplers.
    pub gbf: GbfSettings,
    /// Mesh policy of nodes without their own.
    pub mesh: MeshPolicy,
}

impl Default for DcSettings {
    fn default() -> Self {
        Self { gbf: GbfSettings::default(), mesh: MeshPolicy::GuidedAdaptive }
    }
}

/// Per-node summary of a divide-and-conquer run.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub id: usize,
    pub factor_set: Vec<usize>,
    pub n_children: usize,
    /// Pooled preconditioner `Λ_v` of the children (internal nodes).
    pub lambda_v: Option<Matrix>,
    pub horizon: f64,
    pub n_intervals: usize,
    /// `CESS₀/N`.
    pub initial_cess_fraction: Option<f64>,
    /// Smallest `CESSⱼ/N` over `j ≥ 1`.
    pub min_cess_fraction: Option<f64>,
    pub runtime_s: f64,
}

/// Output of [`dc_fusion`].
#[derive(Debug, Clone)]
pub struct DcResult {
    /// Output of the root.
    pub root: FusionResult,
    /// Reports of the internal nodes, children before parents.
    pub nodes: Vec<NodeReport>,
}

impl DcResult {
    /// Total number of mesh intervals over all internal nodes.
    pub fn total_intervals(&self) -> usize {
        self.nodes.iter().map(|n| n.n_intervals).sum()
    }
}

/// Runs divide-and-conquer fusion of `models` over `node`.
///
/// Children of a node draw a seed from the node's generator and run on
/// streams `0, 1, …` of it (concurrently); the node's own fusion then
/// continues on its generator. A fork-join tree therefore reproduces
/// [`crate::smc::fuse_models`] exactly.
pub fn dc_fusion(
    node: &HierarchyNode,
    models: &[Arc<dyn SubPosteriorModel>],
    settings: &DcSettings,
    rng: &mut FusionRng,
) -> Result<DcResult> {
    let (model, out, nodes) = run_node(node, models, settings, rng)?;
    drop(model);
    Ok(DcResult { root: out, nodes })
}

type NodeOutput = (Arc<dyn SubPosteriorModel>, FusionResult, Vec<NodeReport>);

fn node_model(node: &HierarchyNode, models: &[Arc<dyn SubPosteriorModel>]) -> Result<Arc<dyn SubPosteriorModel>> {
    let index = node.factor_set[0];
    let base = models.get(index).ok_or(FusionError::CountMismatch(index + 1, models.len()))?;
    match node.temper_beta {
        Some(beta) => temper(base.clone(), beta),
        None => Ok(base.clone()),
    }
}

fn run_node(
    node: &HierarchyNode,
    models: &[Arc<dyn SubPosteriorModel>],
    settings: &DcSettings,
    rng: &mut FusionRng,
) -> Result<NodeOutput> {
    let n = settings.gbf.n_particles;
    if node.is_leaf() {
        let model = node_model(node, models)?;
        let samples = model.sample(n, rng, &settings.gbf.rwm)?;
        let out = FusionResult {
            weights: vec![1.0 / n as f64; n],
            samples,
            diagnostics: Vec::new(),
            mesh: TemporalMesh::trivial(),
        };
        return Ok((model, out, Vec::new()));
    }
    let seed: u64 = rng.random();
    let children: Vec<NodeOutput> = node
        .children
        .par_iter()
        .enumerate()
        .map(|(k, child)| run_node(child, models, settings, &mut stream_rng(seed, k as u64)))
        .collect::<Result<_>>()?;
    let start = Instant::now();
    let mut reports = Vec::new();
    let mut child_models = Vec::with_capacity(children.len());
    let mut leaves = Vec::with_capacity(children.len());
    let mut factors = Vec::with_capacity(children.len());
    for (m, out, rep) in children {
        let ws = WeightedSamples { samples: out.samples, weights: out.weights };
        factors.push(Factor::from_samples(m.clone(), &ws.samples, &ws.weights)?);
        child_models.push(m);
        leaves.push(ws);
        reports.extend(rep);
    }
    let mesh = node.mesh_policy.as_ref().unwrap_or(&settings.mesh);
    let out = gbf(&factors, &leaves, mesh, &settings.gbf, rng)?;
    let lambdas: Vec<Matrix> = factors.iter().map(|f| f.precond.lambda.clone()).collect();
    let lambda_v = crate::linalg::pooled_precision(&lambdas)?.1;
    let nf = n as f64;
    reports.push(NodeReport {
        id: node.id,
        factor_set: node.factor_set.clone(),
        n_children: node.children.len(),
        lambda_v: Some(lambda_v),
        horizon: out.horizon(),
        n_intervals: out.mesh.n_intervals(),
        initial_cess_fraction: out.initial_cess_fraction(),
        min_cess_fraction: out.diagnostics.iter().skip(1).map(|r| r.cess / nf).reduce(f64::min),
        runtime_s: start.elapsed().as_secs_f64(),
    });
    log::info!(
        "node {} over {:?}: T={:.4}, n={}",
        node.id,
        node.factor_set,
        out.horizon(),
        out.mesh.n_intervals()
    );
    let model: Arc<dyn SubPosteriorModel> = Arc::new(ProductModel::new(child_models)?);
    Ok((model, out, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_binary_four() {
        let t = build_tree(TreeKind::BalancedBinary, 4).unwrap();
        assert_eq!((t.n_internal(), t.depth(), t.n_leaves()), (3, 2, 4));
        assert_eq!(t.factor_set, vec![0, 1, 2, 3]);
    }

    #[test]
    fn balanced_binary_odd_promotes() {
        let t = build_tree(TreeKind::BalancedBinary, 5).unwrap();
        assert_eq!((t.n_internal(), t.n_leaves(), t.depth()), (4, 5, 3));
        assert!(t.children[1].is_leaf());
        assert_eq!(t.children[1].factor_set, vec![4]);
    }

    #[test]
    fn progressive_four() {
        let t = build_tree(TreeKind::Progressive, 4).unwrap();
        assert_eq!((t.n_internal(), t.depth()), (3, 3));
        assert!(t.children[1].is_leaf());
    }

    #[test]
    fn fork_join_shape() {
        let t = build_tree(TreeKind::ForkJoin, 6).unwrap();
        assert_eq!((t.n_internal(), t.depth(), t.children.len()), (1, 1, 6));
    }

    #[test]
    fn tempered_two_halves() {
        let t = build_tree(TreeKind::Tempered { inv_beta: 2 }, 2).unwrap();
        assert_eq!(t.n_leaves(), 4);
        assert_eq!(t.children.len(), 2);
        for g in &t.children {
            assert_eq!(g.factor_set, vec![0, 1]);
            assert!(g.children.iter().all(|l| l.is_leaf() && l.temper_beta == Some(0.5)));
        }
        assert!(matches!(build_tree(TreeKind::Tempered { inv_beta: 0 }, 2), Err(FusionError::BadBeta(_))));
    }

    #[test]
    fn ids_unique_and_single_leaf() {
        let t = build_tree(TreeKind::BalancedBinary, 7).unwrap();
        let mut ids = Vec::new();
        fn walk(n: &HierarchyNode, ids: &mut Vec<usize>) {
            ids.push(n.id);
            n.children.iter().for_each(|c| walk(c, ids));
        }
        walk(&t, &mut ids);
        ids.sort_unstable();
        assert_eq!(ids, (0..13).collect::<Vec<_>>());
        assert!(build_tree(TreeKind::ForkJoin, 1).unwrap().is_leaf());
        assert!(build_tree(TreeKind::Progressive, 0).is_err());
    }
}
