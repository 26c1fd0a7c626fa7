//! Tree-structured merging.
//!
//! Leaves are fine-tuned models. Each internal node runs [`supermerge::fit`]
//! over its children using only the validation data of the tasks below it,
//! and the result becomes a child of the next level. Intermediate task
//! vectors are always taken against the same pretrained anchor.
//!
//! Models live in a [`ModelStore`] and are checked out only while a node is
//! being merged, so at most `fan_in + 1` full parameter sets are resident at
//! any time. [`ExecutionTrace`] records every check-out and release.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::TaskExamples;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParameterSet};
use crate::rng;
use crate::supermerge::{self, FitConfig, MergeWeights};
use crate::task_vector::{self, TaskVector};

/// A leaf names a model by index; a group merges its children.
///
/// Serializes as nested lists, e.g. `[[0, 1], [2, 3]]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanNode {
    Leaf(usize),
    Group(Vec<PlanNode>),
}

impl PlanNode {
    fn min_leaf(&self) -> usize {
        match self {
            PlanNode::Leaf(i) => *i,
            PlanNode::Group(children) => children.iter().map(PlanNode::min_leaf).min().unwrap_or(usize::MAX),
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            PlanNode::Leaf(i) => out.push(*i),
            PlanNode::Group(children) => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    fn height(&self) -> usize {
        match self {
            PlanNode::Leaf(_) => 0,
            PlanNode::Group(children) => 1 + children.iter().map(PlanNode::height).max().unwrap_or(0),
        }
    }

    fn canonicalize(&mut self) {
        if let PlanNode::Group(children) = self {
            children.iter_mut().for_each(PlanNode::canonicalize);
            children.sort_by_key(PlanNode::min_leaf);
        }
    }

    fn at(&self, path: &[usize]) -> &PlanNode {
        match (self, path.split_first()) {
            (_, None) => self,
            (PlanNode::Group(children), Some((&head, rest))) => children[head].at(rest),
            (PlanNode::Leaf(_), Some(_)) => unreachable!("paths only address groups"),
        }
    }
}

/// A validated merge tree over `leaf_count` models.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    root: PlanNode,
    fan_in_limit: usize,
    leaf_count: usize,
}

impl MergePlan {
    /// Checks the tree and sorts every group's children by their smallest
    /// leaf index.
    pub fn new(mut root: PlanNode, fan_in_limit: usize, leaf_count: usize) -> Result<Self> {
        if fan_in_limit < 2 {
            return Err(Error::arg("fan_in_limit must be at least 2"));
        }
        if !matches!(root, PlanNode::Group(_)) {
            return Err(Error::arg("plan root must be a group"));
        }
        check_groups(&root, fan_in_limit)?;
        let mut leaves = root.leaves();
        leaves.sort_unstable();
        if leaves != (0..leaf_count).collect::<Vec<_>>() {
            return Err(Error::arg(format!(
                "plan must reference each of the {leaf_count} models exactly once"
            )));
        }
        root.canonicalize();
        Ok(MergePlan {
            root,
            fan_in_limit,
            leaf_count,
        })
    }

    /// Every model directly under the root.
    pub fn flat(leaf_count: usize) -> Result<Self> {
        MergePlan::new(
            PlanNode::Group((0..leaf_count).map(PlanNode::Leaf).collect()),
            leaf_count.max(2),
            leaf_count,
        )
    }

    pub fn root(&self) -> &PlanNode {
        &self.root
    }

    pub fn fan_in_limit(&self) -> usize {
        self.fan_in_limit
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn depth(&self) -> usize {
        self.root.height()
    }

    /// Paths of internal nodes in execution order: by height, then
    /// left-to-right.
    pub fn schedule(&self) -> Vec<Vec<usize>> {
        let mut nodes = Vec::new();
        let mut frontier: Vec<Vec<usize>> = alloc::vec![Vec::new()];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for path in frontier {
                if let PlanNode::Group(children) = self.root.at(&path) {
                    for (idx, child) in children.iter().enumerate() {
                        if matches!(child, PlanNode::Group(_)) {
                            let mut p = path.clone();
                            p.push(idx);
                            next.push(p);
                        }
                    }
                    nodes.push((self.root.at(&path).height(), path));
                }
            }
            frontier = next;
        }
        // stable: keeps breadth-first order within a height
        nodes.sort_by_key(|(h, _)| *h);
        nodes.into_iter().map(|(_, p)| p).collect()
    }
}

fn check_groups(node: &PlanNode, fan_in_limit: usize) -> Result<()> {
    if let PlanNode::Group(children) = node {
        if children.len() < 2 {
            return Err(Error::arg("every group needs at least 2 children"));
        }
        if children.len() > fan_in_limit {
            return Err(Error::arg(format!(
                "group with {} children exceeds fan_in_limit {fan_in_limit}",
                children.len()
            )));
        }
        for child in children {
            check_groups(child, fan_in_limit)?;
        }
    }
    Ok(())
}

struct Cluster {
    node: PlanNode,
    /// Lexicographically smallest member task name.
    key: String,
    direction: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    let denom = libm::sqrt(na) * libm::sqrt(nb);
    if denom > 0.0 {
        dot / denom
    } else {
        0.0
    }
}

/// Greedy agglomerative grouping by cosine similarity of flattened task
/// vectors.
///
/// Each level repeatedly seeds a group with the most similar remaining pair
/// and grows it, up to `fan_in_limit`, with the node of highest mean
/// similarity to the group. A leftover single node moves up unchanged. A
/// merged group is represented by the sum of its members' vectors. Ties go
/// to the lexicographically smaller task names.
pub fn build_plan_by_similarity(task_vectors: &[TaskVector], fan_in_limit: usize) -> Result<MergePlan> {
    let k = task_vectors.len();
    if k < 2 {
        return Err(Error::arg("a merge plan needs at least 2 models"));
    }
    if fan_in_limit < 2 {
        return Err(Error::arg("fan_in_limit must be at least 2"));
    }
    for tv in &task_vectors[1..] {
        task_vector::ensure_congruent(&task_vectors[0], tv)?;
    }

    let mut level: Vec<Cluster> = task_vectors
        .iter()
        .enumerate()
        .map(|(i, tv)| Cluster {
            node: PlanNode::Leaf(i),
            key: tv.source_task().to_string(),
            direction: tv.flat().collect(),
        })
        .collect();

    while level.len() > fan_in_limit {
        let m = level.len();
        let mut sim = alloc::vec![0.0; m * m];
        for a in 0..m {
            for b in a + 1..m {
                let s = cosine(&level[a].direction, &level[b].direction);
                sim[a * m + b] = s;
                sim[b * m + a] = s;
            }
        }
        // ties resolve towards smaller (key_a, key_b)
        let better = |s: f64, ka: (&str, &str), best: Option<(f64, (&str, &str))>| match best {
            None => true,
            Some((bs, bk)) => s > bs || (s == bs && ka < bk),
        };

        let mut remaining: Vec<usize> = (0..m).collect();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        while remaining.len() >= 2 {
            let mut best: Option<(f64, (&str, &str))> = None;
            let mut pair = (0, 0);
            for (x, &a) in remaining.iter().enumerate() {
                for &b in &remaining[x + 1..] {
                    let (ka, kb) = ordered(&level[a].key, &level[b].key);
                    if better(sim[a * m + b], (ka, kb), best) {
                        best = Some((sim[a * m + b], (ka, kb)));
                        pair = (a, b);
                    }
                }
            }
            let mut group = alloc::vec![pair.0, pair.1];
            remaining.retain(|&r| r != pair.0 && r != pair.1);
            while group.len() < fan_in_limit && !remaining.is_empty() {
                let mut best: Option<(f64, (&str, &str))> = None;
                let mut pick = 0;
                for &c in &remaining {
                    let mean = group.iter().map(|&g| sim[c * m + g]).sum::<f64>() / group.len() as f64;
                    if better(mean, (&level[c].key, ""), best) {
                        best = Some((mean, (&level[c].key, "")));
                        pick = c;
                    }
                }
                group.push(pick);
                remaining.retain(|&r| r != pick);
            }
            groups.push(group);
        }

        let mut taken: Vec<Option<Cluster>> = level.into_iter().map(Some).collect();
        let mut next = Vec::with_capacity(groups.len() + 1);
        for group in groups {
            let members: Vec<Cluster> = group.iter().map(|&g| taken[g].take().unwrap()).collect();
            let mut direction = alloc::vec![0.0; members[0].direction.len()];
            for member in &members {
                for (d, v) in direction.iter_mut().zip(&member.direction) {
                    *d += v;
                }
            }
            let key = members.iter().map(|c| c.key.clone()).min().unwrap();
            next.push(Cluster {
                node: PlanNode::Group(members.into_iter().map(|c| c.node).collect()),
                key,
                direction,
            });
        }
        next.extend(taken.into_iter().flatten());
        level = next;
    }

    let root = PlanNode::Group(level.into_iter().map(|c| c.node).collect());
    MergePlan::new(root, fan_in_limit, k)
}

fn ordered<'a>(a: &'a str, b: &'a str) -> (&'a str, &'a str) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Where models wait while they are not being merged.
pub trait ModelStore {
    /// Checks a model out of the store.
    fn load(&mut self, slot: usize) -> Result<ParameterSet>;
    /// Hands a model back to the store.
    fn store(&mut self, slot: usize, params: ParameterSet) -> Result<()>;
}

/// Keeps models in memory, one optional slot each.
#[derive(Clone, Debug, Default)]
pub struct MemoryStore {
    slots: Vec<Option<ParameterSet>>,
}

impl MemoryStore {
    pub fn new(models: Vec<ParameterSet>) -> Self {
        MemoryStore {
            slots: models.into_iter().map(Some).collect(),
        }
    }
}

impl ModelStore for MemoryStore {
    fn load(&mut self, slot: usize) -> Result<ParameterSet> {
        self.slots
            .get_mut(slot)
            .and_then(Option::take)
            .ok_or_else(|| Error::Store(format!("slot {slot} is empty")))
    }

    fn store(&mut self, slot: usize, params: ParameterSet) -> Result<()> {
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        self.slots[slot] = Some(params);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    /// A model was checked out of the store.
    Load { slot: usize },
    /// A node's merged model was materialized.
    Form { slot: usize },
    /// A child model was dropped after its parent formed.
    Release { slot: usize },
    /// An intermediate model was handed back to the store.
    Spill { slot: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    #[serde(flatten)]
    pub event: TraceEvent,
    /// Models resident after the event, excluding the anchor.
    pub resident: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub entries: Vec<TraceEntry>,
    pub peak_concurrent_models: usize,
    /// Largest number of task vectors merged at one node.
    pub max_fan_in: usize,
}

impl ExecutionTrace {
    fn record(&mut self, event: TraceEvent, resident: usize) {
        self.peak_concurrent_models = self.peak_concurrent_models.max(resident);
        self.entries.push(TraceEntry { event, resident });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeReport {
    pub path: Vec<usize>,
    pub covered_tasks: Vec<String>,
    /// Tasks whose validation examples this node's fit read.
    pub tasks_read: Vec<String>,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub weights: MergeWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalOutcome {
    pub merged: ParameterSet,
    pub covered_tasks: Vec<String>,
    pub reports: Vec<NodeReport>,
    pub trace: ExecutionTrace,
}

/// Printable form of a node path: `root`, `root/0`, `root/0/1`, …
pub fn path_label(path: &[usize]) -> String {
    let mut label = String::from("root");
    for idx in path {
        label.push('/');
        label.push_str(&idx.to_string());
    }
    label
}

/// Fit seed for the node at `path`; the root uses `seed` itself.
pub fn node_seed(seed: u64, path: &[usize]) -> u64 {
    if path.is_empty() {
        return seed;
    }
    let bytes: Vec<u8> = path.iter().flat_map(|&i| (i as u64).to_le_bytes()).collect();
    rng::derive_seed(seed, "plan-node", &[&bytes])
}

/// Runs `plan` bottom-up. Model `i` of the plan is slot `i` of `store` and
/// `validation[i]` holds its task's validation set.
pub fn execute(
    spec: &ModelSpec,
    plan: &MergePlan,
    pretrained: &ParameterSet,
    store: &mut dyn ModelStore,
    validation: &[TaskExamples<'_>],
    cfg: &FitConfig,
) -> Result<HierarchicalOutcome> {
    if validation.len() != plan.leaf_count() {
        return Err(Error::arg(format!(
            "plan covers {} models but {} validation sets were supplied",
            plan.leaf_count(),
            validation.len()
        )));
    }
    cfg.validate()?;
    pretrained.ensure_matches(spec)?;

    let schedule = plan.schedule();
    let mut slot_of: Vec<(Vec<usize>, usize)> = Vec::new();
    let mut trace = ExecutionTrace::default();
    let mut reports = Vec::with_capacity(schedule.len());
    let mut resident = 0usize;
    let mut merged_root = None;

    for (order, path) in schedule.iter().enumerate() {
        let node = plan.root().at(path);
        let PlanNode::Group(children) = node else {
            unreachable!("schedule only lists groups")
        };
        let label = path_label(path);
        let wrap = |e: Error| Error::Node {
            path: label.clone(),
            source: alloc::boxed::Box::new(e),
        };

        let mut task_vectors = Vec::with_capacity(children.len());
        let mut child_slots = Vec::with_capacity(children.len());
        for (idx, child) in children.iter().enumerate() {
            let (slot, name) = match child {
                PlanNode::Leaf(i) => (*i, validation[*i].task.to_string()),
                PlanNode::Group(_) => {
                    let mut child_path = path.clone();
                    child_path.push(idx);
                    let slot = slot_of
                        .iter()
                        .find(|(p, _)| *p == child_path)
                        .map(|(_, s)| *s)
                        .expect("children run before parents");
                    (slot, path_label(&child_path))
                }
            };
            let params = store.load(slot).map_err(wrap)?;
            resident += 1;
            trace.record(TraceEvent::Load { slot }, resident);
            task_vectors.push(task_vector::compute_named(&params, pretrained, &name).map_err(wrap)?);
            child_slots.push(slot);
        }
        trace.max_fan_in = trace.max_fan_in.max(children.len());

        let mut leaves = node.leaves();
        leaves.sort_unstable();
        let covered: BTreeSet<&str> = leaves.iter().map(|&i| validation[i].task).collect();
        let mut tasks_read = Vec::new();
        let node_validation: Vec<TaskExamples<'_>> = validation
            .iter()
            .filter(|v| covered.contains(v.task))
            .inspect(|v| tasks_read.push(v.task.to_string()))
            .copied()
            .collect();

        let seed = node_seed(cfg.seed, path);
        let node_cfg = FitConfig { seed, ..*cfg };
        let outcome = supermerge::fit(spec, pretrained, &task_vectors, &node_validation, &node_cfg).map_err(wrap)?;
        drop(task_vectors);

        let slot = plan.leaf_count() + order;
        resident += 1;
        trace.record(TraceEvent::Form { slot }, resident);
        for child in child_slots {
            resident -= 1;
            trace.record(TraceEvent::Release { slot: child }, resident);
        }

        reports.push(NodeReport {
            path: path.clone(),
            covered_tasks: leaves.iter().map(|&i| validation[i].task.to_string()).collect(),
            tasks_read,
            seed,
            epochs: cfg.epochs,
            final_loss: *outcome.loss_trace.last().expect("trace has the initial loss"),
            weights: outcome.weights,
        });

        if path.is_empty() {
            merged_root = Some(outcome.merged);
        } else {
            store.store(slot, outcome.merged).map_err(wrap)?;
            resident -= 1;
            trace.record(TraceEvent::Spill { slot }, resident);
            slot_of.push((path.clone(), slot));
        }
    }

    let merged = merged_root.expect("the root is always scheduled last");
    let covered_tasks = validation.iter().map(|v| v.task.to_string()).collect();
    Ok(HierarchicalOutcome {
        merged,
        covered_tasks,
        reports,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn g(children: Vec<PlanNode>) -> PlanNode {
        PlanNode::Group(children)
    }

    fn l(i: usize) -> PlanNode {
        PlanNode::Leaf(i)
    }

    #[test]
    fn plan_validation() {
        assert!(MergePlan::new(g(vec![l(0), l(1)]), 2, 2).is_ok());
        assert!(MergePlan::new(g(vec![l(0), l(0)]), 2, 2).is_err());
        assert!(MergePlan::new(g(vec![l(0), l(1), l(2)]), 2, 3).is_err());
        assert!(MergePlan::new(g(vec![g(vec![l(0)]), l(1)]), 2, 2).is_err());
        assert!(MergePlan::new(l(0), 2, 1).is_err());
        assert!(MergePlan::new(g(vec![l(0), l(1)]), 1, 2).is_err());
        assert!(MergePlan::new(g(vec![l(0), l(2)]), 2, 2).is_err());
    }

    #[test]
    fn plans_are_canonical() {
        let plan = MergePlan::new(g(vec![g(vec![l(3), l(1)]), g(vec![l(2), l(0)])]), 2, 4).unwrap();
        assert_eq!(plan.root(), &g(vec![g(vec![l(0), l(2)]), g(vec![l(1), l(3)])]));
    }

    #[test]
    fn schedule_runs_children_first() {
        let plan = MergePlan::new(g(vec![g(vec![g(vec![l(0), l(1)]), l(2)]), g(vec![l(3), l(4)])]), 2, 5).unwrap();
        assert_eq!(plan.schedule(), vec![vec![1], vec![0, 0], vec![0], vec![]]);
        assert_eq!(plan.depth(), 3);
    }

    #[test]
    fn memory_store_moves_models() {
        let spec = ModelSpec::mlp(1, &[], 2, crate::Activation::Relu).unwrap();
        let mut store = MemoryStore::new(vec![ParameterSet::zeros(&spec)]);
        assert!(store.load(0).is_ok());
        assert!(store.load(0).is_err());
        store.store(3, ParameterSet::zeros(&spec)).unwrap();
        assert!(store.load(3).is_ok());
    }

    #[test]
    fn path_labels_and_seeds() {
        assert_eq!(path_label(&[]), "root");
        assert_eq!(path_label(&[1, 0]), "root/1/0");
        assert_eq!(node_seed(9, &[]), 9);
        assert_ne!(node_seed(9, &[0]), node_seed(9, &[1]));
    }
}
