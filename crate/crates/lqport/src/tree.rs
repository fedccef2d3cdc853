//! Finite branching market scenarios on which conditional expectations are
//! exact averages over children.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg;
use crate::mgarch::{Dynamics, MarketState};
use crate::{Error, Result, Vector};

pub const DEFAULT_NODE_BUDGET: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Range<usize>,
    /// Unconditional probability of reaching this node.
    pub prob: f64,
    /// Shock that produced this node from its parent (zero at the root).
    pub shock: Vector,
    pub state: MarketState,
}

/// Nodes are stored level by level; the children of a node are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTree {
    pub nodes: Vec<TreeNode>,
    pub levels: Vec<Range<usize>>,
    pub branching: usize,
    pub horizon: usize,
    pub seed: u64,
}

/// Total node count for depth `horizon` and branching `m`, or `None` on overflow.
pub fn node_count(horizon: usize, m: usize) -> Option<usize> {
    let mut total: usize = 0;
    let mut level: usize = 1;
    for t in 0..=horizon {
        total = total.checked_add(level)?;
        if t < horizon {
            level = level.checked_mul(m)?;
        }
    }
    Some(total)
}

/// Draw `m` shocks from N(0, Σ) with an exactly zero branch average.
fn branch_shocks<R: Rng>(state: &MarketState, m: usize, rng: &mut R) -> Result<Vec<Vector>> {
    let n = state.n();
    if m == 1 {
        return Ok(vec![Vector::zeros(n)]);
    }
    let l = linalg::psd_factor(&state.sigma)?;
    let draw = |rng: &mut R| {
        let u = Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &l * u
    };
    if m.is_multiple_of(2) {
        let mut out = Vec::with_capacity(m);
        for _ in 0..m / 2 {
            let z = draw(rng);
            out.push(-&z);
            out.push(z);
        }
        return Ok(out);
    }
    let mut out: Vec<Vector> = (0..m).map(|_| draw(rng)).collect();
    let mean = out.iter().fold(Vector::zeros(n), |acc, z| acc + z) / m as f64;
    for z in &mut out {
        *z -= &mean;
    }
    Ok(out)
}

pub fn build_tree(
    dynamics: &Dynamics,
    horizon: usize,
    branching: usize,
    seed: u64,
    budget: usize,
) -> Result<ScenarioTree> {
    if horizon == 0 || branching == 0 {
        return Err(Error::arg("tree needs horizon >= 1 and branching >= 1"));
    }
    let count = node_count(horizon, branching).filter(|&c| c <= budget).ok_or_else(|| {
        Error::Resource(format!(
            "tree with horizon {horizon} and branching {branching} exceeds the node budget of {budget}"
        ))
    })?;
    let n = dynamics.params.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::with_capacity(count);
    nodes.push(TreeNode {
        depth: 0,
        parent: None,
        children: 0..0,
        prob: 1.0,
        shock: Vector::zeros(n),
        state: dynamics.initial_state()?,
    });
    let mut levels: Vec<Range<usize>> = Vec::with_capacity(horizon + 1);
    levels.push(0..1);
    let p_branch = 1.0 / branching as f64;
    for depth in 0..horizon {
        let start = nodes.len();
        for idx in levels[depth].clone() {
            let shocks = branch_shocks(&nodes[idx].state, branching, &mut rng)?;
            let first = nodes.len();
            for z in shocks {
                let (state, _) = dynamics.advance(&nodes[idx].state, &z)?;
                nodes.push(TreeNode {
                    depth: depth + 1,
                    parent: Some(idx),
                    children: 0..0,
                    prob: nodes[idx].prob * p_branch,
                    shock: z,
                    state,
                });
            }
            nodes[idx].children = first..nodes.len();
        }
        levels.push(start..nodes.len());
    }
    Ok(ScenarioTree {
        nodes,
        levels,
        branching,
        horizon,
        seed,
    })
}

impl ScenarioTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n(&self) -> usize {
        self.nodes[0].state.n()
    }

    pub fn level(&self, depth: usize) -> Range<usize> {
        self.levels[depth].clone()
    }

    /// Average of `values` over the children of `idx`.
    pub fn child_mean(&self, idx: usize, values: &[Vector]) -> Vector {
        let ch = self.nodes[idx].children.clone();
        let k = ch.len() as f64;
        let mut acc = Vector::zeros(values[ch.start].len());
        for c in ch {
            acc += &values[c];
        }
        acc / k
    }

    /// Probability-weighted mean over one level of a per-node scalar.
    pub fn level_mean(&self, depth: usize, f: impl Fn(usize) -> f64) -> f64 {
        self.level(depth).map(|i| self.nodes[i].prob * f(i)).sum()
    }

    /// Node indices from the root to `idx`, inclusive.
    pub fn lineage(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![idx];
        let mut cur = idx;
        while let Some(p) = self.nodes[cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    pub fn states(&self) -> impl Iterator<Item = &MarketState> {
        self.nodes.iter().map(|n| &n.state)
    }
}
