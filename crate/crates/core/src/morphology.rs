//! Agent morphologies as rooted trees.
//!
//! A morphology is a tree of limbs: every non-root limb is connected to its
//! parent by a single actuated joint. This module parses and validates
//! morphology spec files, produces deterministic traversal orders, enumerates
//! connected subtree variants, and re-roots trees.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One rigid segment of an agent.
///
/// `joint_low`/`joint_high` bound the angle of the joint connecting the limb
/// to its parent, in radians. `gear` scales normalized torque commands to
/// physical torque. `child_order_index` fixes the order of this limb among
/// its siblings, which in turn fixes message slot assignment; ties are broken
/// by limb name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimbSpec {
    pub name: String,
    pub length: f64,
    pub mass: f64,
    pub is_actuated: bool,
    pub joint_low: f64,
    pub joint_high: f64,
    pub gear: f64,
    pub child_order_index: u32,
}

/// A validated morphology tree.
///
/// Immutable after construction; safe to share read-only across concurrent
/// environment workers.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphologyGraph {
    name: String,
    limbs: Vec<LimbSpec>,
    parent: Vec<Option<usize>>,
    root: usize,
    children: Vec<Vec<usize>>,
}

#[derive(Debug, thiserror::Error)]
pub enum MorphologyError {
    #[error("malformed morphology document: {0}")]
    Parse(String),
    #[error("invalid morphology: {0}")]
    Validation(String),
    #[error("unknown limb `{0}`")]
    UnknownLimb(String),
    #[error("feasibility predicate rejected every variant")]
    EmptyVariantSet,
}

/// On-disk morphology format.
#[derive(Serialize, Deserialize)]
struct MorphologyFile {
    name: String,
    root: String,
    limbs: Vec<LimbFile>,
}

#[derive(Serialize, Deserialize)]
struct LimbFile {
    name: String,
    parent: Option<String>,
    length: f64,
    mass: f64,
    is_actuated: bool,
    joint_low: f64,
    joint_high: f64,
    gear: f64,
    child_order_index: u32,
}

impl MorphologyGraph {
    /// Builds and validates a graph from limb specs and parent names.
    ///
    /// `parents[i]` is the name of limb `i`'s parent, or `None` for the root.
    pub fn new(
        name: impl Into<String>,
        limbs: Vec<LimbSpec>,
        parents: Vec<Option<String>>,
        root: &str,
    ) -> Result<Self, MorphologyError> {
        let name = name.into();
        if limbs.is_empty() {
            return Err(MorphologyError::Validation("no limbs".into()));
        }
        if limbs.len() != parents.len() {
            return Err(MorphologyError::Validation(
                "limb and parent lists differ in length".into(),
            ));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, l) in limbs.iter().enumerate() {
            if index.insert(l.name.as_str(), i).is_some() {
                return Err(MorphologyError::Validation(format!(
                    "duplicate limb name `{}`",
                    l.name
                )));
            }
        }
        let root_ix = *index
            .get(root)
            .ok_or_else(|| MorphologyError::Validation(format!("root `{root}` not found")))?;

        let mut parent = vec![None; limbs.len()];
        for (i, p) in parents.iter().enumerate() {
            match p {
                None => {
                    if i != root_ix {
                        return Err(MorphologyError::Validation(format!(
                            "limb `{}` has no parent but is not the root",
                            limbs[i].name
                        )));
                    }
                }
                Some(pname) => {
                    if i == root_ix {
                        return Err(MorphologyError::Validation(format!(
                            "root `{}` must not have a parent",
                            limbs[i].name
                        )));
                    }
                    let pix = *index.get(pname.as_str()).ok_or_else(|| {
                        MorphologyError::Validation(format!(
                            "limb `{}` references unknown parent `{pname}`",
                            limbs[i].name
                        ))
                    })?;
                    parent[i] = Some(pix);
                }
            }
        }

        let graph = Self::assemble(name, limbs, parent, root_ix)?;
        graph.validate()?;
        Ok(graph)
    }

    fn assemble(
        name: String,
        limbs: Vec<LimbSpec>,
        parent: Vec<Option<usize>>,
        root: usize,
    ) -> Result<Self, MorphologyError> {
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); limbs.len()];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        for ch in &mut children {
            ch.sort_by(|&a, &b| {
                (limbs[a].child_order_index, limbs[a].name.as_str())
                    .cmp(&(limbs[b].child_order_index, limbs[b].name.as_str()))
            });
        }
        Ok(Self {
            name,
            limbs,
            parent,
            root,
            children,
        })
    }

    fn validate(&self) -> Result<(), MorphologyError> {
        // Every limb must reach the root through the parent map; a walk that
        // exceeds the limb count has entered a cycle.
        for i in 0..self.limbs.len() {
            let mut cur = i;
            let mut hops = 0;
            while let Some(p) = self.parent[cur] {
                cur = p;
                hops += 1;
                if hops > self.limbs.len() {
                    return Err(MorphologyError::Validation(
                        "parent map contains a cycle".into(),
                    ));
                }
            }
            if cur != self.root {
                return Err(MorphologyError::Validation(format!(
                    "limb `{}` is not connected to the root",
                    self.limbs[i].name
                )));
            }
        }
        for (i, l) in self.limbs.iter().enumerate() {
            if !(l.length > 0.0) || !(l.mass > 0.0) || !(l.gear > 0.0) {
                return Err(MorphologyError::Validation(format!(
                    "limb `{}` must have positive length, mass and gear",
                    l.name
                )));
            }
            if !(l.joint_low < l.joint_high) {
                return Err(MorphologyError::Validation(format!(
                    "limb `{}` joint range is empty (low {} >= high {})",
                    l.name, l.joint_low, l.joint_high
                )));
            }
            let should_actuate = i != self.root;
            if l.is_actuated != should_actuate {
                return Err(MorphologyError::Validation(format!(
                    "limb `{}` actuation flag: the root and only the root is unactuated",
                    l.name
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn len(&self) -> usize {
        self.limbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.limbs.is_empty()
    }

    pub fn limbs(&self) -> &[LimbSpec] {
        &self.limbs
    }

    pub fn limb(&self, i: usize) -> &LimbSpec {
        &self.limbs[i]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent_of(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    /// Children of `i`, ordered by `(child_order_index, name)`.
    pub fn children_of(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.limbs.iter().position(|l| l.name == name)
    }

    /// Slot of `i` among its siblings (position in the parent's ordered child
    /// list). The root has no slot.
    pub fn sibling_slot(&self, i: usize) -> Option<usize> {
        let p = self.parent[i]?;
        self.children[p].iter().position(|&c| c == i)
    }

    /// Edges from the root.
    pub fn depth_of(&self, i: usize) -> usize {
        let mut d = 0;
        let mut cur = i;
        while let Some(p) = self.parent[cur] {
            cur = p;
            d += 1;
        }
        d
    }

    /// Indices of actuated limbs in topological order.
    pub fn actuated_limbs(&self) -> Vec<usize> {
        topological_ordering(self)
            .into_iter()
            .filter(|&i| self.limbs[i].is_actuated)
            .collect()
    }

    /// Sum of limb lengths along the root path, including limb `i` itself.
    /// With all joints at zero the limbs stack along one line, so this is the
    /// distance from the root reference point to limb `i`'s tip at rest.
    pub fn rest_tip_depth(&self, i: usize) -> f64 {
        let mut d = self.limbs[i].length;
        let mut cur = i;
        while let Some(p) = self.parent[cur] {
            d += self.limbs[p].length;
            cur = p;
        }
        d
    }

    /// Undirected edge set as name pairs, each sorted, for structural checks.
    pub fn undirected_edges(&self) -> BTreeSet<(String, String)> {
        let mut edges = BTreeSet::new();
        for (i, p) in self.parent.iter().enumerate() {
            if let Some(p) = *p {
                let a = self.limbs[i].name.clone();
                let b = self.limbs[p].name.clone();
                edges.insert(if a < b { (a, b) } else { (b, a) });
            }
        }
        edges
    }

    pub fn to_json(&self) -> String {
        let file = MorphologyFile {
            name: self.name.clone(),
            root: self.limbs[self.root].name.clone(),
            limbs: self
                .limbs
                .iter()
                .enumerate()
                .map(|(i, l)| LimbFile {
                    name: l.name.clone(),
                    parent: self.parent[i].map(|p| self.limbs[p].name.clone()),
                    length: l.length,
                    mass: l.mass,
                    is_actuated: l.is_actuated,
                    joint_low: l.joint_low,
                    joint_high: l.joint_high,
                    gear: l.gear,
                    child_order_index: l.child_order_index,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("morphology serialization cannot fail")
    }
}

/// Parses a morphology spec document and validates the resulting tree.
pub fn parse_morphology(text: &str) -> Result<MorphologyGraph, MorphologyError> {
    let file: MorphologyFile =
        serde_json::from_str(text).map_err(|e| MorphologyError::Parse(e.to_string()))?;
    let mut limbs = Vec::with_capacity(file.limbs.len());
    let mut parents = Vec::with_capacity(file.limbs.len());
    for l in file.limbs {
        limbs.push(LimbSpec {
            name: l.name,
            length: l.length,
            mass: l.mass,
            is_actuated: l.is_actuated,
            joint_low: l.joint_low,
            joint_high: l.joint_high,
            gear: l.gear,
            child_order_index: l.child_order_index,
        });
        parents.push(l.parent);
    }
    MorphologyGraph::new(file.name, limbs, parents, &file.root)
}

/// Level-order traversal: root first, every parent before all of its
/// children, siblings in `(child_order_index, name)` order. The reverse is a
/// valid leaf-to-root schedule.
pub fn topological_ordering(g: &MorphologyGraph) -> Vec<usize> {
    let mut order = Vec::with_capacity(g.len());
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(g.root());
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for &c in g.children_of(i) {
            queue.push_back(c);
        }
    }
    order
}

/// Maximum branching factor over all nodes of all graphs.
pub fn max_children<'a>(graphs: impl IntoIterator<Item = &'a MorphologyGraph>) -> usize {
    graphs
        .into_iter()
        .flat_map(|g| (0..g.len()).map(|i| g.children_of(i).len()))
        .max()
        .unwrap_or(0)
}

/// A base morphology together with its enumerated variants and a seeded
/// train/held-out split over the retained variants.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSet {
    pub base: MorphologyGraph,
    pub variants: Vec<MorphologyGraph>,
    pub train_split: Vec<usize>,
    pub heldout_split: Vec<usize>,
}

impl VariantSet {
    pub fn train_variants(&self) -> Vec<&MorphologyGraph> {
        self.train_split.iter().map(|&i| &self.variants[i]).collect()
    }

    pub fn heldout_variants(&self) -> Vec<&MorphologyGraph> {
        self.heldout_split.iter().map(|&i| &self.variants[i]).collect()
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::json!({
            "base": serde_json::from_str::<serde_json::Value>(&self.base.to_json()).unwrap(),
            "variants": self.variants.iter()
                .map(|g| serde_json::from_str::<serde_json::Value>(&g.to_json()).unwrap())
                .collect::<Vec<_>>(),
            "split": { "train": self.train_split, "heldout": self.heldout_split },
        });
        serde_json::to_string_pretty(&v).unwrap()
    }

    pub fn from_json(text: &str) -> Result<Self, MorphologyError> {
        #[derive(Deserialize)]
        struct SplitFile {
            train: Vec<usize>,
            heldout: Vec<usize>,
        }
        #[derive(Deserialize)]
        struct VariantFile {
            base: serde_json::Value,
            variants: Vec<serde_json::Value>,
            split: SplitFile,
        }
        let f: VariantFile =
            serde_json::from_str(text).map_err(|e| MorphologyError::Parse(e.to_string()))?;
        let base = parse_morphology(&f.base.to_string())?;
        let variants = f
            .variants
            .iter()
            .map(|v| parse_morphology(&v.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        let n = variants.len();
        for &i in f.split.train.iter().chain(f.split.heldout.iter()) {
            if i >= n {
                return Err(MorphologyError::Validation(format!(
                    "split index {i} out of range ({n} variants)"
                )));
            }
        }
        Ok(Self {
            base,
            variants,
            train_split: f.split.train,
            heldout_split: f.split.heldout,
        })
    }
}

/// Shipped default feasibility rule: at least two limbs, and at least one
/// actuated limb whose rest-pose tip rests on the ground plane (i.e. its tip
/// depth equals the deepest tip depth of the variant).
pub fn default_locomotion_feasibility(g: &MorphologyGraph) -> bool {
    if g.len() < 2 {
        return false;
    }
    let deepest = (0..g.len())
        .map(|i| g.rest_tip_depth(i))
        .fold(f64::NEG_INFINITY, f64::max);
    (0..g.len()).any(|i| g.limb(i).is_actuated && (deepest - g.rest_tip_depth(i)).abs() < 1e-9)
}

/// Enumerates every connected subtree of `base` that contains the root,
/// filters it through `feasibility`, and splits the retained variants into
/// train and held-out sets with a seeded shuffle over the name-sorted list.
pub fn enumerate_variants(
    base: &MorphologyGraph,
    feasibility: impl Fn(&MorphologyGraph) -> bool,
    heldout_fraction: f64,
    seed: u64,
) -> Result<VariantSet, MorphologyError> {
    assert!(
        (0.0..1.0).contains(&heldout_fraction),
        "heldout_fraction must be in [0, 1)"
    );
    let node_sets = connected_rooted_subsets(base, base.root());
    let mut variants: Vec<MorphologyGraph> = Vec::new();
    for set in &node_sets {
        let g = subgraph(base, set);
        if feasibility(&g) {
            variants.push(g);
        }
    }
    if variants.is_empty() {
        return Err(MorphologyError::EmptyVariantSet);
    }
    // Canonical order: by size, then by sorted member names.
    variants.sort_by_key(|g| {
        let mut names: Vec<String> = g.limbs().iter().map(|l| l.name.clone()).collect();
        names.sort();
        (g.len(), names)
    });
    for (i, v) in variants.iter_mut().enumerate() {
        let name = format!("{}_v{:02}", base.name(), i);
        v.set_name(name);
    }

    let n = variants.len();
    let heldout_count = ((n as f64) * heldout_fraction).round() as usize;
    let heldout_count = heldout_count.min(n.saturating_sub(1));
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut heldout_split: Vec<usize> = indices[..heldout_count].to_vec();
    let mut train_split: Vec<usize> = indices[heldout_count..].to_vec();
    heldout_split.sort_unstable();
    train_split.sort_unstable();

    Ok(VariantSet {
        base: base.clone(),
        variants,
        train_split,
        heldout_split,
    })
}

/// All node subsets that contain `root` and induce a connected subtree.
/// A node may only be present if its parent is, so the options multiply
/// independently across children.
fn connected_rooted_subsets(g: &MorphologyGraph, root: usize) -> Vec<BTreeSet<usize>> {
    fn rooted_at(g: &MorphologyGraph, node: usize) -> Vec<BTreeSet<usize>> {
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::from([node])];
        for &c in g.children_of(node) {
            let child_sets = rooted_at(g, c);
            let mut next = Vec::with_capacity(sets.len() * (1 + child_sets.len()));
            for s in &sets {
                next.push(s.clone());
                for cs in &child_sets {
                    let mut merged = s.clone();
                    merged.extend(cs.iter().copied());
                    next.push(merged);
                }
            }
            sets = next;
        }
        sets
    }
    rooted_at(g, root)
}

fn subgraph(base: &MorphologyGraph, keep: &BTreeSet<usize>) -> MorphologyGraph {
    let mut limbs = Vec::new();
    let mut parents = Vec::new();
    for (i, l) in base.limbs().iter().enumerate() {
        if keep.contains(&i) {
            limbs.push(l.clone());
            parents.push(base.parent_of(i).map(|p| base.limb(p).name.clone()));
        }
    }
    let root_name = base.limb(base.root()).name.clone();
    MorphologyGraph::new(base.name().to_string(), limbs, parents, &root_name)
        .expect("connected rooted subsets are valid trees")
}

/// Reparents the tree at `new_root`, preserving the undirected edge set.
///
/// Each node keeps its original child order; a former parent that becomes a
/// child is appended after the surviving children. Per-limb joint metadata is
/// carried along unchanged; actuation flags are recomputed so that exactly
/// the new root is unactuated.
pub fn reroot(g: &MorphologyGraph, new_root: &str) -> Result<MorphologyGraph, MorphologyError> {
    let new_root_ix = g
        .index_of(new_root)
        .ok_or_else(|| MorphologyError::UnknownLimb(new_root.to_string()))?;
    if new_root_ix == g.root() {
        return Ok(g.clone());
    }

    // Orient every edge away from the new root.
    let mut new_parent: Vec<Option<usize>> = vec![None; g.len()];
    let mut new_children: Vec<Vec<usize>> = vec![Vec::new(); g.len()];
    let mut visited = vec![false; g.len()];
    let mut stack = vec![new_root_ix];
    visited[new_root_ix] = true;
    while let Some(i) = stack.pop() {
        // Neighbors in deterministic order: old children first (old order),
        // then the old parent.
        let mut neighbors: Vec<usize> = g.children_of(i).to_vec();
        if let Some(p) = g.parent_of(i) {
            neighbors.push(p);
        }
        for n in neighbors {
            if !visited[n] {
                visited[n] = true;
                new_parent[n] = Some(i);
                new_children[i].push(n);
                stack.push(n);
            }
        }
    }

    let mut limbs: Vec<LimbSpec> = g.limbs().to_vec();
    for (i, l) in limbs.iter_mut().enumerate() {
        l.is_actuated = i != new_root_ix;
    }
    // Renumber child order indices to match the new deterministic order.
    for ch in &new_children {
        for (slot, &c) in ch.iter().enumerate() {
            limbs[c].child_order_index = slot as u32;
        }
    }

    let graph = MorphologyGraph::assemble(
        g.name().to_string(),
        limbs,
        new_parent,
        new_root_ix,
    )?;
    graph.validate()?;
    Ok(graph)
}
