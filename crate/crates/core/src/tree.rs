//! Dyadic tree algebra: node arithmetic, grow/prune/twig edits, encodings,
//! distances and exhaustive enumeration of small tree spaces.
//!
//! Trees are ancestry-closed sets of internal nodes. The constant node
//! `(-1, 0)` is always internal and has the single child `(0, 0)`; with this
//! convention `|T_ext| = |T_int|` holds for every tree including the null
//! tree. Wavelet nodes `(l, k)` with `l >= 0` are stored in a bit set indexed
//! by the position key `2^l + k`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A node `(l, k)` of the dyadic tree. Level `-1` is the constant node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub level: i32,
    pub index: u32,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { level: -1, index: 0 };

    pub fn new(level: i32, index: u32) -> Result<Self> {
        if level < -1 {
            return Err(Error::Node(format!("level {level} below -1")));
        }
        let bound = if level <= 0 { 1 } else { 1u32 << level };
        if index >= bound {
            return Err(Error::Node(format!(
                "index {index} out of range for level {level}"
            )));
        }
        Ok(NodeId { level, index })
    }

    /// Position key `2^l + k` used for bit storage and column ordering.
    /// Only defined for wavelet nodes (`level >= 0`).
    pub fn position(&self) -> usize {
        debug_assert!(self.level >= 0);
        (1usize << self.level) + self.index as usize
    }

    pub fn from_position(pos: usize) -> Self {
        debug_assert!(pos >= 1);
        let level = usize::BITS - 1 - pos.leading_zeros();
        NodeId {
            level: level as i32,
            index: (pos - (1 << level)) as u32,
        }
    }

    pub fn parent(&self) -> Option<NodeId> {
        match self.level {
            -1 => None,
            0 => Some(NodeId::ROOT),
            l => Some(NodeId {
                level: l - 1,
                index: self.index / 2,
            }),
        }
    }

    /// Children of this node: `(l+1, 2k)` and `(l+1, 2k+1)`, or the single
    /// child `(0, 0)` of the constant node.
    pub fn children(&self, depth: u32) -> Result<Vec<NodeId>> {
        if self.level >= depth as i32 {
            return Err(Error::Node(format!(
                "node ({}, {}) at or below the depth cap {depth}",
                self.level, self.index
            )));
        }
        if self.level == -1 {
            return Ok(vec![NodeId { level: 0, index: 0 }]);
        }
        Ok(vec![
            NodeId {
                level: self.level + 1,
                index: 2 * self.index,
            },
            NodeId {
                level: self.level + 1,
                index: 2 * self.index + 1,
            },
        ])
    }

    pub fn is_ancestor_or_self_of(&self, other: &NodeId) -> bool {
        if self.level > other.level {
            return false;
        }
        if self.level == -1 {
            return true;
        }
        let shift = (other.level - self.level) as u32;
        other.index >> shift == self.index
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.level, self.index)
    }
}

/// A fixed-capacity bit set over wavelet positions `1..2^depth`.
///
/// Used both for tree internals (ancestry-closed) and for free spike-and-slab
/// inclusion vectors. Bit 0 is unused; the constant node is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeSet {
    words: Vec<u64>,
    nbits: usize,
}

impl NodeSet {
    pub fn empty(depth: u32) -> Self {
        let nbits = 1usize << depth;
        NodeSet {
            words: vec![0; nbits.div_ceil(64)],
            nbits,
        }
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn contains(&self, pos: usize) -> bool {
        debug_assert!(pos < self.nbits);
        self.words[pos / 64] >> (pos % 64) & 1 == 1
    }

    pub fn insert(&mut self, pos: usize) {
        debug_assert!(pos < self.nbits && pos >= 1);
        self.words[pos / 64] |= 1 << (pos % 64);
    }

    pub fn remove(&mut self, pos: usize) {
        debug_assert!(pos < self.nbits);
        self.words[pos / 64] &= !(1 << (pos % 64));
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn is_subset_of(&self, other: &NodeSet) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0)
    }

    pub fn hamming(&self, other: &NodeSet) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    pub fn intersection_len(&self, other: &NodeSet) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_len(&self, other: &NodeSet) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// Iterate set positions in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    None
                } else {
                    let b = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    Some(wi * 64 + b)
                }
            })
        })
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.iter().map(NodeId::from_position)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Canonical text encoding: sorted `l:k` pairs joined with commas,
    /// prefixed by the implicit constant node. Empty set encodes as `-1:0`.
    pub fn encode(&self) -> String {
        let mut s = String::from("-1:0");
        for node in self.nodes() {
            s.push(';');
            s.push_str(&node.to_string());
        }
        s
    }

    pub fn decode(text: &str, depth: u32) -> Result<NodeSet> {
        let mut set = NodeSet::empty(depth);
        for part in text.split(';') {
            let (l, k) = part
                .split_once(':')
                .ok_or_else(|| Error::Node(format!("bad node token {part:?}")))?;
            let level: i32 = l
                .parse()
                .map_err(|_| Error::Node(format!("bad level in {part:?}")))?;
            let index: u32 = k
                .parse()
                .map_err(|_| Error::Node(format!("bad index in {part:?}")))?;
            let node = NodeId::new(level, index)?;
            if node.level >= 0 {
                if node.level >= depth as i32 {
                    return Err(Error::Node(format!("node {node} beyond depth {depth}")));
                }
                set.insert(node.position());
            }
        }
        Ok(set)
    }
}

/// A chain of nodes on the unique ancestral path between `top` and `bottom`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Twig {
    pub top: NodeId,
    pub bottom: NodeId,
}

impl Twig {
    pub fn new(top: NodeId, bottom: NodeId) -> Result<Self> {
        if !top.is_ancestor_or_self_of(&bottom) {
            return Err(Error::Edit(format!(
                "{top} is not an ancestor-or-self of {bottom}"
            )));
        }
        Ok(Twig { top, bottom })
    }

    pub fn len(&self) -> usize {
        (self.bottom.level - self.top.level + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Nodes from `top` down to `bottom`.
    pub fn nodes(&self) -> Vec<NodeId> {
        let mut chain = vec![self.bottom];
        let mut cur = self.bottom;
        while cur != self.top {
            cur = cur.parent().expect("twig top reached before root");
            chain.push(cur);
        }
        chain.reverse();
        chain
    }
}

/// An ancestry-closed set of internal wavelet nodes together with a depth cap.
///
/// The Markov chain state for the tree-based kernels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DyadicTree {
    set: NodeSet,
    depth: u32,
}

impl DyadicTree {
    /// The null tree: internal `{(-1,0)}`, external `{(0,0)}`.
    pub fn null(depth: u32) -> Self {
        assert!(depth >= 1, "depth cap must be at least 1");
        DyadicTree {
            set: NodeSet::empty(depth),
            depth,
        }
    }

    /// The full tree containing every wavelet node with level < depth.
    pub fn full(depth: u32) -> Self {
        let mut set = NodeSet::empty(depth);
        for pos in 1..(1usize << depth) {
            set.insert(pos);
        }
        DyadicTree { set, depth }
    }

    /// Wraps an existing bit set without checking ancestry closure.
    pub fn from_set_unchecked(set: NodeSet, depth: u32) -> Self {
        debug_assert_eq!(set.nbits(), 1 << depth);
        DyadicTree { set, depth }
    }

    pub fn from_nodes<I: IntoIterator<Item = NodeId>>(nodes: I, depth: u32) -> Result<Self> {
        let mut set = NodeSet::empty(depth);
        for node in nodes {
            if node.level < 0 {
                continue;
            }
            if node.level >= depth as i32 {
                return Err(Error::Node(format!("node {node} beyond depth cap {depth}")));
            }
            set.insert(node.position());
        }
        let tree = DyadicTree { set, depth };
        tree.validate()?;
        Ok(tree)
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn set(&self) -> &NodeSet {
        &self.set
    }

    pub fn into_set(self) -> NodeSet {
        self.set
    }

    pub fn is_null(&self) -> bool {
        self.set.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.set.len() == (1 << self.depth) - 1
    }

    /// Ancestry closure and index-bound check.
    pub fn validate(&self) -> Result<()> {
        for pos in self.set.iter() {
            let node = NodeId::from_position(pos);
            if node.level >= self.depth as i32 {
                return Err(Error::Node(format!("internal {node} at depth cap")));
            }
            if let Some(parent) = node.parent() {
                if parent.level >= 0 && !self.set.contains(parent.position()) {
                    return Err(Error::Node(format!("missing parent of internal {node}")));
                }
            }
        }
        Ok(())
    }

    pub fn is_internal(&self, node: &NodeId) -> bool {
        if node.level == -1 {
            return node.index == 0;
        }
        node.level < self.depth as i32 && self.set.contains(node.position())
    }

    /// Number of internal nodes including the constant node.
    pub fn n_internal(&self) -> usize {
        1 + self.set.len()
    }

    /// Internal nodes, constant node first, then wavelet nodes by position.
    pub fn internal_nodes(&self) -> Vec<NodeId> {
        let mut out = vec![NodeId::ROOT];
        out.extend(self.set.nodes());
        out
    }

    /// External (leaf) nodes: children of internal nodes that are not
    /// themselves internal, ordered by (level, index).
    pub fn external_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.n_internal());
        if !self.set.contains(NodeId { level: 0, index: 0 }.position()) {
            out.push(NodeId { level: 0, index: 0 });
        }
        for pos in self.set.iter() {
            let node = NodeId::from_position(pos);
            for child in node.children(self.depth).expect("internal below cap") {
                if !self.is_internal(&child) {
                    out.push(child);
                }
            }
        }
        out.sort();
        out
    }

    /// External nodes strictly above the depth cap, i.e. those a GROW can split.
    pub fn growable_external_nodes(&self) -> Vec<NodeId> {
        self.external_nodes()
            .into_iter()
            .filter(|n| n.level < self.depth as i32)
            .collect()
    }

    /// Pre-terminal wavelet nodes: internal nodes with both children external.
    /// The constant node is excluded (it is never prunable).
    pub fn preterminal_nodes(&self) -> Vec<NodeId> {
        self.set
            .nodes()
            .filter(|n| {
                n.children(self.depth)
                    .expect("internal below cap")
                    .iter()
                    .all(|c| !self.is_internal(c))
            })
            .collect()
    }

    /// Ancestors of an internal node inside the tree, including the node
    /// itself and the constant node.
    pub fn ancestors(&self, node: &NodeId) -> Result<Vec<NodeId>> {
        if !self.is_internal(node) {
            return Err(Error::Node(format!("{node} is not internal")));
        }
        let mut out = vec![*node];
        let mut cur = *node;
        while let Some(parent) = cur.parent() {
            out.push(parent);
            cur = parent;
        }
        Ok(out)
    }

    /// Internal descendants of an internal node, including the node itself.
    pub fn descendants(&self, node: &NodeId) -> Result<Vec<NodeId>> {
        if !self.is_internal(node) {
            return Err(Error::Node(format!("{node} is not internal")));
        }
        let mut out = Vec::new();
        let mut stack = vec![*node];
        while let Some(cur) = stack.pop() {
            out.push(cur);
            if cur.level < self.depth as i32 {
                for child in cur.children(self.depth)? {
                    if self.is_internal(&child) {
                        stack.push(child);
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// GROW edit: split the external node, making it internal.
    pub fn grow(&self, node: &NodeId) -> Result<DyadicTree> {
        if node.level < 0 || node.level >= self.depth as i32 {
            return Err(Error::Edit(format!("cannot grow {node} at depth {}", self.depth)));
        }
        if self.is_internal(node) {
            return Err(Error::Edit(format!("{node} is already internal")));
        }
        let parent = node.parent().expect("wavelet node has parent");
        if !self.is_internal(&parent) {
            return Err(Error::Edit(format!("{node} is not external")));
        }
        let mut set = self.set.clone();
        set.insert(node.position());
        Ok(DyadicTree { set, depth: self.depth })
    }

    /// PRUNE edit: collapse a pre-terminal node back into a leaf.
    pub fn prune(&self, node: &NodeId) -> Result<DyadicTree> {
        if node.level < 0 {
            return Err(Error::Edit("the constant node cannot be pruned".into()));
        }
        if !self.is_internal(node) {
            return Err(Error::Edit(format!("{node} is not internal")));
        }
        let has_internal_child = node
            .children(self.depth)?
            .iter()
            .any(|c| self.is_internal(c));
        if has_internal_child {
            return Err(Error::Edit(format!("{node} is not pre-terminal")));
        }
        let mut set = self.set.clone();
        set.remove(node.position());
        Ok(DyadicTree { set, depth: self.depth })
    }

    /// Twiggy GROW: attach the full chain from the nearest external ancestor
    /// of `target` down to `target`. Returns the edited tree and the twig.
    pub fn grow_twig(&self, target: &NodeId) -> Result<(DyadicTree, Twig)> {
        if target.level < 0 || target.level >= self.depth as i32 {
            return Err(Error::Edit(format!(
                "twig target {target} out of range at depth {}",
                self.depth
            )));
        }
        if self.is_internal(target) {
            return Err(Error::Edit(format!("twig target {target} already internal")));
        }
        // Walk up until the first node whose parent is internal: that node is
        // the unique external ancestor-or-self of the target.
        let mut top = *target;
        loop {
            let parent = top.parent().expect("wavelet node has parent");
            if self.is_internal(&parent) {
                break;
            }
            top = parent;
        }
        let twig = Twig::new(top, *target)?;
        let mut set = self.set.clone();
        for node in twig.nodes() {
            set.insert(node.position());
        }
        Ok((DyadicTree { set, depth: self.depth }, twig))
    }

    /// Internal wavelet nodes whose internal descendants (including self)
    /// form a chain; the candidates for the Twiggy PRUNE.
    pub fn twig_prunable(&self) -> Vec<NodeId> {
        self.set
            .nodes()
            .filter(|node| {
                let mut cur = *node;
                loop {
                    if cur.level >= self.depth as i32 {
                        return true;
                    }
                    let internal_children: Vec<NodeId> = cur
                        .children(self.depth)
                        .expect("internal below cap")
                        .into_iter()
                        .filter(|c| self.is_internal(c))
                        .collect();
                    match internal_children.len() {
                        0 => return true,
                        1 => cur = internal_children[0],
                        _ => return false,
                    }
                }
            })
            .collect()
    }

    /// Twiggy PRUNE: remove the chain hanging from `node` (inclusive).
    pub fn prune_twig(&self, node: &NodeId) -> Result<(DyadicTree, Twig)> {
        if node.level < 0 {
            return Err(Error::Edit("the constant node cannot head a twig".into()));
        }
        if !self.twig_prunable().contains(node) {
            return Err(Error::Edit(format!("{node} is not twig-prunable")));
        }
        let chain = self.descendants(node)?;
        let bottom = *chain
            .iter()
            .max_by_key(|n| n.level)
            .expect("chain contains node");
        let twig = Twig::new(*node, bottom)?;
        let mut set = self.set.clone();
        for n in &chain {
            set.remove(n.position());
        }
        Ok((DyadicTree { set, depth: self.depth }, twig))
    }

    /// Hamming distance between the binary internal-indicator encodings.
    pub fn hamming(&self, other: &DyadicTree) -> usize {
        self.set.hamming(&other.set)
    }

    pub fn encode(&self) -> String {
        self.set.encode()
    }
}

/// All ancestry-closed trees with internal levels < `depth`, in a
/// deterministic order (sorted by size, then by bit words).
pub fn enumerate_trees(depth: u32) -> Result<Vec<DyadicTree>> {
    if depth > 5 {
        return Err(Error::SizeGuard(format!(
            "tree enumeration limited to depth 5, got {depth}"
        )));
    }
    // Subtree shapes rooted at `node`: either absent, or present with any
    // combination of shapes for the two children.
    fn subtrees(node: NodeId, depth: u32) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        if node.level >= depth as i32 {
            return out;
        }
        let children = node.children(depth).expect("level below cap");
        let left = subtrees(children[0], depth);
        let right = if children.len() == 2 {
            subtrees(children[1], depth)
        } else {
            vec![vec![]]
        };
        for l in &left {
            for r in &right {
                let mut nodes = vec![node.position()];
                nodes.extend_from_slice(l);
                nodes.extend_from_slice(r);
                out.push(nodes);
            }
        }
        out
    }

    let mut trees: Vec<DyadicTree> = subtrees(NodeId { level: 0, index: 0 }, depth)
        .into_iter()
        .map(|positions| {
            let mut set = NodeSet::empty(depth);
            for pos in positions {
                set.insert(pos);
            }
            DyadicTree { set, depth }
        })
        .collect();
    trees.sort_by(|a, b| (a.set.len(), &a.set).cmp(&(b.set.len(), &b.set)));
    trees.dedup();
    Ok(trees)
}
