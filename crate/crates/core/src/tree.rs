//! Finite scenario trees.
//!
//! A tree with `T` stages realizes a filtration: the stage-`t` nodes
//! partition the scenarios (the stage-`T` nodes), and the partition refines
//! as `t` grows. Node probabilities are absolute masses, so a conditional
//! expectation given the stage-`t` partition is a single weighted average
//! over the scenarios below a node.
//!
//! Stages are 0-based inside the library; the JSON form uses 1-based stages.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on probability bookkeeping (children masses, root mass).
pub const PROB_TOL: f64 = 1e-12;

/// One node of the serialized tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u64,
    /// 1-based stage index.
    pub stage: usize,
    pub parent: Option<u64>,
    pub prob: f64,
}

/// Serialized tree: `{"stages": T, "nodes": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub stages: usize,
    pub nodes: Vec<NodeSpec>,
}

/// A validated scenario tree with contiguous node indices ordered by
/// `(stage, id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    stages: usize,
    ids: Vec<u64>,
    stage_of: Vec<usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    prob: Vec<f64>,
    stage_nodes: Vec<Vec<usize>>,
    local: Vec<usize>,
    // ancestors[node][s] = ancestor of `node` at stage s, for s <= stage(node)
    ancestors: Vec<Vec<usize>>,
    // scenario indices (positions in the last stage) below each node
    below: Vec<Vec<usize>>,
    index_of: HashMap<u64, usize>,
}

impl ScenarioTree {
    /// Validates a serialized tree and builds the index structure.
    pub fn build(spec: &TreeSpec) -> Result<Self> {
        let stages = spec.stages;
        if stages == 0 {
            return Err(Error::InvalidTree("stage count must be at least 1".into()));
        }
        let mut order: Vec<&NodeSpec> = spec.nodes.iter().collect();
        order.sort_by_key(|n| (n.stage, n.id));

        let mut index_of = HashMap::with_capacity(order.len());
        for (i, node) in order.iter().enumerate() {
            if node.stage == 0 || node.stage > stages {
                return Err(Error::InvalidTree(format!(
                    "node {} has stage {} outside 1..={}",
                    node.id, node.stage, stages
                )));
            }
            if !(node.prob > 0.0) || !node.prob.is_finite() {
                return Err(Error::InvalidTree(format!(
                    "node {} has non-positive probability {}",
                    node.id, node.prob
                )));
            }
            if index_of.insert(node.id, i).is_some() {
                return Err(Error::InvalidTree(format!("duplicate node id {}", node.id)));
            }
        }

        let count = order.len();
        let ids: Vec<u64> = order.iter().map(|n| n.id).collect();
        let stage_of: Vec<usize> = order.iter().map(|n| n.stage - 1).collect();
        let prob: Vec<f64> = order.iter().map(|n| n.prob).collect();
        let mut parent = vec![None; count];
        let mut children = vec![Vec::new(); count];
        let mut stage_nodes = vec![Vec::new(); stages];
        let mut local = vec![0; count];

        for (i, node) in order.iter().enumerate() {
            local[i] = stage_nodes[stage_of[i]].len();
            stage_nodes[stage_of[i]].push(i);
            match node.parent {
                None => {
                    if node.stage != 1 {
                        return Err(Error::InvalidTree(format!(
                            "orphan node {} at stage {}",
                            node.id, node.stage
                        )));
                    }
                }
                Some(pid) => {
                    let &p = index_of.get(&pid).ok_or_else(|| {
                        Error::InvalidTree(format!(
                            "node {} references missing parent {}",
                            node.id, pid
                        ))
                    })?;
                    if stage_of[p] + 1 != stage_of[i] {
                        return Err(Error::InvalidTree(format!(
                            "parent {} of node {} is not at the previous stage",
                            pid, node.id
                        )));
                    }
                    parent[i] = Some(p);
                    children[p].push(i);
                }
            }
        }

        if stage_nodes[0].len() != 1 {
            return Err(Error::InvalidTree(format!(
                "expected exactly one root at stage 1, found {}",
                stage_nodes[0].len()
            )));
        }
        let root = stage_nodes[0][0];
        if parent[root].is_some() {
            return Err(Error::InvalidTree("root node has a parent".into()));
        }
        if (prob[root] - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidTree(format!(
                "root probability {} != 1",
                prob[root]
            )));
        }
        for i in 0..count {
            if stage_of[i] + 1 < stages {
                if children[i].is_empty() {
                    return Err(Error::InvalidTree(format!(
                        "node {} at stage {} has no children",
                        ids[i],
                        stage_of[i] + 1
                    )));
                }
                let mass: f64 = children[i].iter().map(|&c| prob[c]).sum();
                if (mass - prob[i]).abs() > PROB_TOL {
                    return Err(Error::InvalidTree(format!(
                        "children of node {} carry mass {} but the node has {}",
                        ids[i], mass, prob[i]
                    )));
                }
            }
        }

        let mut ancestors = vec![Vec::new(); count];
        for i in 0..count {
            let mut chain = Vec::with_capacity(stage_of[i] + 1);
            let mut cur = Some(i);
            while let Some(c) = cur {
                chain.push(c);
                cur = parent[c];
            }
            chain.reverse();
            ancestors[i] = chain;
        }

        let mut below = vec![Vec::new(); count];
        for (s, &leaf) in stage_nodes[stages - 1].iter().enumerate() {
            for &a in &ancestors[leaf] {
                below[a].push(s);
            }
        }

        Ok(Self {
            stages,
            ids,
            stage_of,
            parent,
            children,
            prob,
            stage_nodes,
            local,
            ancestors,
            below,
            index_of,
        })
    }

    /// Tree where every stage-`t` node has `branching[t]` children with
    /// equal conditional probability. `branching` has `T - 1` entries.
    pub fn uniform(branching: &[usize]) -> Result<Self> {
        let conditional: Vec<Vec<f64>> = branching
            .iter()
            .map(|&b| vec![1.0 / b.max(1) as f64; b])
            .collect();
        Self::from_conditionals(&conditional)
    }

    /// Tree where every stage-`t` node branches with the conditional
    /// probabilities `conditional[t]`.
    pub fn from_conditionals(conditional: &[Vec<f64>]) -> Result<Self> {
        let mut nodes = vec![NodeSpec {
            id: 0,
            stage: 1,
            parent: None,
            prob: 1.0,
        }];
        let mut frontier = vec![(0u64, 1.0f64)];
        let mut next_id = 1u64;
        for (t, probs) in conditional.iter().enumerate() {
            if probs.is_empty() {
                return Err(Error::InvalidTree(format!("stage {} has no branches", t + 1)));
            }
            let mut next = Vec::new();
            for &(pid, pmass) in &frontier {
                for &q in probs {
                    nodes.push(NodeSpec {
                        id: next_id,
                        stage: t + 2,
                        parent: Some(pid),
                        prob: pmass * q,
                    });
                    next.push((next_id, pmass * q));
                    next_id += 1;
                }
            }
            frontier = next;
        }
        Self::build(&TreeSpec {
            stages: conditional.len() + 1,
            nodes,
        })
    }

    pub fn to_spec(&self) -> TreeSpec {
        TreeSpec {
            stages: self.stages,
            nodes: (0..self.num_nodes())
                .map(|i| NodeSpec {
                    id: self.ids[i],
                    stage: self.stage_of[i] + 1,
                    parent: self.parent[i].map(|p| self.ids[p]),
                    prob: self.prob[i],
                })
                .collect(),
        }
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn num_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn num_scenarios(&self) -> usize {
        self.stage_nodes[self.stages - 1].len()
    }

    /// Node indices at stage `t`, ordered by id.
    pub fn stage_nodes(&self, t: usize) -> &[usize] {
        &self.stage_nodes[t]
    }

    pub fn node_id(&self, node: usize) -> u64 {
        self.ids[node]
    }

    pub fn node_index(&self, id: u64) -> Option<usize> {
        self.index_of.get(&id).copied()
    }

    pub fn node_stage(&self, node: usize) -> usize {
        self.stage_of[node]
    }

    pub fn node_prob(&self, node: usize) -> f64 {
        self.prob[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// Position of `node` among the nodes of its stage.
    pub fn local_index(&self, node: usize) -> usize {
        self.local[node]
    }

    /// Ancestor of `node` at stage `t <= stage(node)`.
    pub fn ancestor(&self, node: usize, t: usize) -> usize {
        self.ancestors[node][t]
    }

    /// Node index of scenario `s`.
    pub fn scenario_node(&self, s: usize) -> usize {
        self.stage_nodes[self.stages - 1][s]
    }

    pub fn scenario_prob(&self, s: usize) -> f64 {
        self.prob[self.scenario_node(s)]
    }

    /// Local index (within stage `t`) of the stage-`t` ancestor of scenario `s`.
    pub fn scenario_ancestor_local(&self, s: usize, t: usize) -> usize {
        self.local[self.ancestors[self.scenario_node(s)][t]]
    }

    /// Scenarios below `node`.
    pub fn scenarios_below(&self, node: usize) -> &[usize] {
        &self.below[node]
    }

    pub(crate) fn check_stage(&self, t: usize) -> Result<()> {
        if t >= self.stages {
            Err(Error::StageOutOfRange {
                stage: t,
                stages: self.stages,
            })
        } else {
            Ok(())
        }
    }
}
