//! The five Metropolis-Hastings proposal kernels, the accept/reject step,
//! the lazy-chain option, and the seeded multi-chain driver.
//!
//! Every kernel exposes both `propose` (sample one move) and `enumerate`
//! (the full proposal law of a state). The exact finite-chain oracle builds
//! transition matrices from `enumerate`, so the probabilities the samplers
//! use and the probabilities the oracle verifies come from the same
//! formulas: `propose` and `enumerate` share the per-move outcome builders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::PosteriorEngine;
use crate::tree::{DyadicTree, NodeId, NodeSet, Twig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    GrowPrune,
    Twiggy,
    InformedGrowPrune,
    InformedTwiggy,
    SpikeSlab,
}

impl KernelKind {
    pub const ALL: [KernelKind; 5] = [
        KernelKind::GrowPrune,
        KernelKind::Twiggy,
        KernelKind::InformedGrowPrune,
        KernelKind::InformedTwiggy,
        KernelKind::SpikeSlab,
    ];

    pub fn short_name(&self) -> &'static str {
        match self {
            KernelKind::GrowPrune => "bc",
            KernelKind::Twiggy => "tw",
            KernelKind::InformedGrowPrune => "ibc",
            KernelKind::InformedTwiggy => "itw",
            KernelKind::SpikeSlab => "ss",
        }
    }

    pub fn from_short_name(name: &str) -> Result<Self> {
        match name {
            "bc" => Ok(KernelKind::GrowPrune),
            "tw" => Ok(KernelKind::Twiggy),
            "ibc" => Ok(KernelKind::InformedGrowPrune),
            "itw" => Ok(KernelKind::InformedTwiggy),
            "ss" => Ok(KernelKind::SpikeSlab),
            other => Err(Error::Config(format!("unknown kernel {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Lazy chains stay put with probability 1/2 before proposing.
    pub lazy: bool,
}

impl KernelSpec {
    pub fn new(kind: KernelKind) -> Self {
        KernelSpec { kind, lazy: false }
    }

    pub fn lazy(kind: KernelKind) -> Self {
        KernelSpec { kind, lazy: true }
    }
}

/// The Markov chain state: a dyadic tree, or a free inclusion vector for the
/// spike-and-slab baseline.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum State {
    Tree(DyadicTree),
    Indicator(NodeSet),
}

impl State {
    /// The wavelet inclusion bits of the state, constant node implicit.
    pub fn set(&self) -> &NodeSet {
        match self {
            State::Tree(t) => t.set(),
            State::Indicator(s) => s,
        }
    }

    pub fn encode(&self) -> String {
        self.set().encode()
    }

    pub fn tree(&self) -> Result<&DyadicTree> {
        match self {
            State::Tree(t) => Ok(t),
            State::Indicator(_) => Err(Error::Config("expected a tree-valued state".into())),
        }
    }
}

/// The structural edit a proposal performs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Edit {
    Grow(NodeId),
    Prune(NodeId),
    GrowTwig(Twig),
    PruneTwig(Twig),
    Flip(usize),
}

/// One proposable move: the candidate state, the log posterior ratio
/// candidate/current, and the exact log proposal probabilities of the move
/// and of its inverse.
#[derive(Debug, Clone)]
pub struct ProposalOutcome {
    pub candidate: State,
    pub log_ratio: f64,
    pub log_s_fwd: f64,
    pub log_s_rev: f64,
    pub edit: Edit,
}

impl ProposalOutcome {
    /// Log Metropolis-Hastings acceptance probability.
    pub fn log_accept(&self) -> f64 {
        (self.log_ratio + self.log_s_rev - self.log_s_fwd).min(0.0)
    }
}

/// A proposal kernel bound to a posterior engine.
#[derive(Clone, Copy)]
pub struct Kernel<'a> {
    pub engine: &'a PosteriorEngine,
    pub spec: KernelSpec,
}

impl<'a> Kernel<'a> {
    pub fn new(engine: &'a PosteriorEngine, spec: KernelSpec) -> Self {
        Kernel { engine, spec }
    }

    pub fn depth(&self) -> u32 {
        self.engine.depth()
    }

    /// The canonical starting state: the null tree / empty inclusion vector.
    pub fn initial_state(&self) -> State {
        match self.spec.kind {
            KernelKind::SpikeSlab => State::Indicator(NodeSet::empty(self.depth())),
            _ => State::Tree(DyadicTree::null(self.depth())),
        }
    }

    pub fn log_post(&self, state: &State) -> Result<f64> {
        match state {
            State::Tree(t) => self.engine.log_post_unnorm(t),
            State::Indicator(s) => Ok(self.engine.ss_log_post_unnorm(s)),
        }
    }

    /// Samples one move from the proposal law.
    pub fn propose<R: Rng>(&self, state: &State, rng: &mut R) -> Result<ProposalOutcome> {
        match (self.spec.kind, state) {
            (KernelKind::GrowPrune, State::Tree(t)) => self.propose_grow_prune(t, rng),
            (KernelKind::Twiggy, State::Tree(t)) => self.propose_twiggy(t, rng),
            (KernelKind::InformedGrowPrune, State::Tree(t))
            | (KernelKind::InformedTwiggy, State::Tree(t)) => self.propose_informed(t, rng),
            (KernelKind::SpikeSlab, State::Indicator(s)) => self.propose_spike_slab(s, rng),
            _ => Err(Error::Config("state does not match kernel kind".into())),
        }
    }

    /// The full proposal law: every move with its exact probability. Forward
    /// probabilities sum to one.
    pub fn enumerate(&self, state: &State) -> Result<Vec<ProposalOutcome>> {
        match (self.spec.kind, state) {
            (KernelKind::GrowPrune, State::Tree(t)) => self.enumerate_grow_prune(t),
            (KernelKind::Twiggy, State::Tree(t)) => self.enumerate_twiggy(t),
            (KernelKind::InformedGrowPrune, State::Tree(t))
            | (KernelKind::InformedTwiggy, State::Tree(t)) => self.enumerate_informed(t),
            (KernelKind::SpikeSlab, State::Indicator(s)) => self.enumerate_spike_slab(s),
            _ => Err(Error::Config("state does not match kernel kind".into())),
        }
    }

    // ---- grow/prune kernel -------------------------------------------------

    /// Probability of choosing the GROW branch: forced at the boundary trees.
    fn gamma(tree: &DyadicTree) -> f64 {
        if tree.is_null() {
            1.0
        } else if tree.is_full() {
            0.0
        } else {
            0.5
        }
    }

    fn gp_grow_outcome(&self, tree: &DyadicTree, node: &NodeId, gamma: f64, n_grow: usize) -> Result<ProposalOutcome> {
        let candidate = tree.grow(node)?;
        let log_s_rev =
            (1.0 - Self::gamma(&candidate)).ln() - (candidate.preterminal_nodes().len() as f64).ln();
        Ok(ProposalOutcome {
            log_ratio: self.engine.node_log_ratio(node),
            log_s_fwd: gamma.ln() - (n_grow as f64).ln(),
            log_s_rev,
            candidate: State::Tree(candidate),
            edit: Edit::Grow(*node),
        })
    }

    fn gp_prune_outcome(&self, tree: &DyadicTree, node: &NodeId, gamma: f64, n_prune: usize) -> Result<ProposalOutcome> {
        let candidate = tree.prune(node)?;
        let log_s_rev = Self::gamma(&candidate).ln()
            - (candidate.growable_external_nodes().len() as f64).ln();
        Ok(ProposalOutcome {
            log_ratio: -self.engine.node_log_ratio(node),
            log_s_fwd: (1.0 - gamma).ln() - (n_prune as f64).ln(),
            log_s_rev,
            candidate: State::Tree(candidate),
            edit: Edit::Prune(*node),
        })
    }

    fn propose_grow_prune<R: Rng>(&self, tree: &DyadicTree, rng: &mut R) -> Result<ProposalOutcome> {
        let gamma = Self::gamma(tree);
        if rng.gen::<f64>() < gamma {
            let growable = tree.growable_external_nodes();
            let node = growable[rng.gen_range(0..growable.len())];
            self.gp_grow_outcome(tree, &node, gamma, growable.len())
        } else {
            let pre = tree.preterminal_nodes();
            let node = pre[rng.gen_range(0..pre.len())];
            self.gp_prune_outcome(tree, &node, gamma, pre.len())
        }
    }

    fn enumerate_grow_prune(&self, tree: &DyadicTree) -> Result<Vec<ProposalOutcome>> {
        let gamma = Self::gamma(tree);
        let mut out = Vec::new();
        if gamma > 0.0 {
            let growable = tree.growable_external_nodes();
            for node in &growable {
                out.push(self.gp_grow_outcome(tree, node, gamma, growable.len())?);
            }
        }
        if gamma < 1.0 {
            let pre = tree.preterminal_nodes();
            for node in &pre {
                out.push(self.gp_prune_outcome(tree, node, gamma, pre.len())?);
            }
        }
        Ok(out)
    }

    // ---- twiggy kernel -----------------------------------------------------

    /// Internal-node counts per level 0..depth-1.
    fn level_counts(tree: &DyadicTree) -> Vec<usize> {
        let mut counts = vec![0usize; tree.depth() as usize];
        for node in tree.set().nodes() {
            counts[node.level as usize] += 1;
        }
        counts
    }

    /// Eligible layers with their free-slot counts and normalized sampling
    /// weights `D^-l / Z`.
    fn twig_layer_law(&self, counts: &[usize]) -> Vec<(usize, usize, f64)> {
        let d = self.engine.config().twig_base;
        let mut layers: Vec<(usize, usize, f64)> = counts
            .iter()
            .enumerate()
            .filter_map(|(l, &cnt)| {
                let free = (1usize << l) - cnt;
                (free > 0).then(|| (l, free, d.powi(-(l as i32))))
            })
            .collect();
        let z: f64 = layers.iter().map(|(_, _, w)| w).sum();
        for (_, _, w) in &mut layers {
            *w /= z;
        }
        layers
    }

    fn tw_grow_outcome(&self, tree: &DyadicTree, target: &NodeId, gamma: f64, layer_prob: f64, free: usize) -> Result<ProposalOutcome> {
        let (candidate, twig) = tree.grow_twig(target)?;
        let log_s_rev = (1.0 - Self::gamma(&candidate)).ln()
            - (candidate.twig_prunable().len() as f64).ln();
        Ok(ProposalOutcome {
            log_ratio: self.engine.log_ratio_twig(&twig),
            log_s_fwd: gamma.ln() + layer_prob.ln() - (free as f64).ln(),
            log_s_rev,
            candidate: State::Tree(candidate),
            edit: Edit::GrowTwig(twig),
        })
    }

    fn tw_prune_outcome(&self, tree: &DyadicTree, head: &NodeId, gamma: f64, n_prunable: usize) -> Result<ProposalOutcome> {
        let (candidate, twig) = tree.prune_twig(head)?;
        // The inverse move grows the same twig back by targeting its bottom.
        let counts = Self::level_counts(&candidate);
        let layers = self.twig_layer_law(&counts);
        let bottom_level = twig.bottom.level as usize;
        let (_, free, layer_prob) = layers
            .iter()
            .find(|(l, _, _)| *l == bottom_level)
            .copied()
            .expect("pruned twig frees its own layer");
        let log_s_rev =
            Self::gamma(&candidate).ln() + layer_prob.ln() - (free as f64).ln();
        Ok(ProposalOutcome {
            log_ratio: -self.engine.log_ratio_twig(&twig),
            log_s_fwd: (1.0 - gamma).ln() - (n_prunable as f64).ln(),
            log_s_rev,
            candidate: State::Tree(candidate),
            edit: Edit::PruneTwig(twig),
        })
    }

    fn propose_twiggy<R: Rng>(&self, tree: &DyadicTree, rng: &mut R) -> Result<ProposalOutcome> {
        let gamma = Self::gamma(tree);
        if rng.gen::<f64>() < gamma {
            let counts = Self::level_counts(tree);
            let layers = self.twig_layer_law(&counts);
            let mut u = rng.gen::<f64>();
            let mut chosen = layers[layers.len() - 1];
            for layer in &layers {
                if u < layer.2 {
                    chosen = *layer;
                    break;
                }
                u -= layer.2;
            }
            let (level, free, layer_prob) = chosen;
            // Uniform free position at the layer, by rejection: free > 0 and
            // trees are small relative to 2^level, so this terminates fast.
            let target = loop {
                let k = rng.gen_range(0..(1u32 << level));
                let node = NodeId::new(level as i32, k)?;
                if !tree.is_internal(&node) {
                    break node;
                }
            };
            self.tw_grow_outcome(tree, &target, gamma, layer_prob, free)
        } else {
            let prunable = tree.twig_prunable();
            let head = prunable[rng.gen_range(0..prunable.len())];
            self.tw_prune_outcome(tree, &head, gamma, prunable.len())
        }
    }

    fn enumerate_twiggy(&self, tree: &DyadicTree) -> Result<Vec<ProposalOutcome>> {
        let gamma = Self::gamma(tree);
        let mut out = Vec::new();
        if gamma > 0.0 {
            let counts = Self::level_counts(tree);
            for (level, free, layer_prob) in self.twig_layer_law(&counts) {
                for k in 0..(1u32 << level) {
                    let node = NodeId::new(level as i32, k)?;
                    if !tree.is_internal(&node) {
                        out.push(self.tw_grow_outcome(tree, &node, gamma, layer_prob, free)?);
                    }
                }
            }
        }
        if gamma < 1.0 {
            let prunable = tree.twig_prunable();
            for head in &prunable {
                out.push(self.tw_prune_outcome(tree, head, gamma, prunable.len())?);
            }
        }
        Ok(out)
    }

    // ---- informed kernels --------------------------------------------------

    fn is_twig_family(&self) -> bool {
        self.spec.kind == KernelKind::InformedTwiggy
    }

    /// Log posterior ratio of the twig grow targeting `target` without
    /// materializing the tree.
    fn twig_ratio_to(&self, tree: &DyadicTree, target: &NodeId) -> f64 {
        let mut total = self.engine.node_log_ratio(target);
        let mut cur = *target;
        loop {
            let parent = cur.parent().expect("wavelet node has parent");
            if tree.is_internal(&parent) {
                break total;
            }
            total += self.engine.node_log_ratio(&parent);
            cur = parent;
        }
    }

    /// Grow moves with their raw log posterior ratios.
    fn informed_grow_moves(&self, tree: &DyadicTree) -> Vec<(NodeId, f64)> {
        if self.is_twig_family() {
            (1..(1usize << self.depth()))
                .map(NodeId::from_position)
                .filter(|n| !tree.is_internal(n))
                .map(|n| (n, self.twig_ratio_to(tree, &n)))
                .collect()
        } else {
            tree.growable_external_nodes()
                .into_iter()
                .map(|n| (n, self.engine.node_log_ratio(&n)))
                .collect()
        }
    }

    /// Prune moves (by removed node / twig head) with their ratios.
    fn informed_prune_moves(&self, tree: &DyadicTree) -> Vec<(NodeId, f64)> {
        if self.is_twig_family() {
            tree.twig_prunable()
                .into_iter()
                .map(|head| {
                    let ratio: f64 = tree
                        .descendants(&head)
                        .expect("head is internal")
                        .iter()
                        .map(|n| -self.engine.node_log_ratio(n))
                        .sum();
                    (head, ratio)
                })
                .collect()
        } else {
            tree.preterminal_nodes()
                .into_iter()
                .map(|n| (n, -self.engine.node_log_ratio(&n)))
                .collect()
        }
    }

    /// Thresholded grow weight `min(ratio, upper)` in log space.
    fn log_w_grow(&self, log_ratio: f64) -> f64 {
        log_ratio.min(self.engine.config().informed_upper.ln())
    }

    /// Two-sided prune clamp `clamp(ratio, lower, upper)` in log space.
    fn log_w_prune(&self, log_ratio: f64) -> f64 {
        let cfg = self.engine.config();
        log_ratio.clamp(cfg.informed_lower.ln(), cfg.informed_upper.ln())
    }

    fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
        let vals: Vec<f64> = values.collect();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    /// Branch probabilities (grow, prune) given which neighborhoods exist.
    fn informed_branch_probs(has_grow: bool, has_prune: bool) -> (f64, f64) {
        match (has_grow, has_prune) {
            (true, true) => (0.5, 0.5),
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (false, false) => unreachable!("null and full trees differ for depth >= 1"),
        }
    }

    fn informed_grow_outcome(&self, tree: &DyadicTree, node: &NodeId, log_ratio: f64, log_s_fwd: f64) -> Result<ProposalOutcome> {
        let (candidate, edit) = if self.is_twig_family() {
            let (c, twig) = tree.grow_twig(node)?;
            (c, Edit::GrowTwig(twig))
        } else {
            (tree.grow(node)?, Edit::Grow(*node))
        };
        // Inverse: informed prune from the candidate removing the same nodes.
        let rev_moves = self.informed_prune_moves(&candidate);
        let log_z_rev = Self::log_sum_exp(rev_moves.iter().map(|(_, r)| self.log_w_prune(*r)));
        let grow_back = if self.is_twig_family() {
            !candidate.is_full()
        } else {
            !candidate.growable_external_nodes().is_empty()
        };
        let (_, bp) = Self::informed_branch_probs(grow_back, true);
        let log_s_rev = bp.ln() + self.log_w_prune(-log_ratio) - log_z_rev;
        Ok(ProposalOutcome {
            log_ratio,
            log_s_fwd,
            log_s_rev,
            candidate: State::Tree(candidate),
            edit,
        })
    }

    fn informed_prune_outcome(&self, tree: &DyadicTree, head: &NodeId, log_ratio: f64, log_s_fwd: f64) -> Result<ProposalOutcome> {
        let (candidate, edit) = if self.is_twig_family() {
            let (c, twig) = tree.prune_twig(head)?;
            (c, Edit::PruneTwig(twig))
        } else {
            (tree.prune(head)?, Edit::Prune(*head))
        };
        // Inverse: informed grow from the candidate adding the same nodes.
        let rev_moves = self.informed_grow_moves(&candidate);
        let log_z_rev = Self::log_sum_exp(rev_moves.iter().map(|(_, r)| self.log_w_grow(*r)));
        let (bg, _) = Self::informed_branch_probs(true, !candidate.is_null());
        let log_s_rev = bg.ln() + self.log_w_grow(-log_ratio) - log_z_rev;
        Ok(ProposalOutcome {
            log_ratio,
            log_s_fwd,
            log_s_rev,
            candidate: State::Tree(candidate),
            edit,
        })
    }

    fn propose_informed<R: Rng>(&self, tree: &DyadicTree, rng: &mut R) -> Result<ProposalOutcome> {
        let grows = self.informed_grow_moves(tree);
        let prunes = self.informed_prune_moves(tree);
        let (bg, bp) = Self::informed_branch_probs(!grows.is_empty(), !prunes.is_empty());
        if rng.gen::<f64>() < bg {
            let lws: Vec<f64> = grows.iter().map(|(_, r)| self.log_w_grow(*r)).collect();
            let idx = sample_log_weights(&lws, rng);
            let log_z = Self::log_sum_exp(lws.iter().copied());
            let (node, r) = grows[idx];
            self.informed_grow_outcome(tree, &node, r, bg.ln() + lws[idx] - log_z)
        } else {
            let lws: Vec<f64> = prunes.iter().map(|(_, r)| self.log_w_prune(*r)).collect();
            let idx = sample_log_weights(&lws, rng);
            let log_z = Self::log_sum_exp(lws.iter().copied());
            let (head, r) = prunes[idx];
            self.informed_prune_outcome(tree, &head, r, bp.ln() + lws[idx] - log_z)
        }
    }

    fn enumerate_informed(&self, tree: &DyadicTree) -> Result<Vec<ProposalOutcome>> {
        let grows = self.informed_grow_moves(tree);
        let prunes = self.informed_prune_moves(tree);
        let (bg, bp) = Self::informed_branch_probs(!grows.is_empty(), !prunes.is_empty());
        let mut out = Vec::new();
        if bg > 0.0 {
            let lws: Vec<f64> = grows.iter().map(|(_, r)| self.log_w_grow(*r)).collect();
            let log_z = Self::log_sum_exp(lws.iter().copied());
            for (i, (node, r)) in grows.iter().enumerate() {
                out.push(self.informed_grow_outcome(tree, node, *r, bg.ln() + lws[i] - log_z)?);
            }
        }
        if bp > 0.0 {
            let lws: Vec<f64> = prunes.iter().map(|(_, r)| self.log_w_prune(*r)).collect();
            let log_z = Self::log_sum_exp(lws.iter().copied());
            for (i, (head, r)) in prunes.iter().enumerate() {
                out.push(self.informed_prune_outcome(tree, head, *r, bp.ln() + lws[i] - log_z)?);
            }
        }
        Ok(out)
    }

    // ---- spike-and-slab ----------------------------------------------------

    fn ss_outcome(&self, indicator: &NodeSet, pos: usize) -> ProposalOutcome {
        let mut flipped = indicator.clone();
        if flipped.contains(pos) {
            flipped.remove(pos);
        } else {
            flipped.insert(pos);
        }
        let n_positions = (1usize << self.depth()) - 1;
        let log_s = -(n_positions as f64).ln();
        ProposalOutcome {
            log_ratio: self.engine.ss_log_ratio(indicator, pos),
            log_s_fwd: log_s,
            log_s_rev: log_s,
            candidate: State::Indicator(flipped),
            edit: Edit::Flip(pos),
        }
    }

    fn propose_spike_slab<R: Rng>(&self, indicator: &NodeSet, rng: &mut R) -> Result<ProposalOutcome> {
        let pos = rng.gen_range(1..(1usize << self.depth()));
        Ok(self.ss_outcome(indicator, pos))
    }

    fn enumerate_spike_slab(&self, indicator: &NodeSet) -> Result<Vec<ProposalOutcome>> {
        Ok((1..(1usize << self.depth()))
            .map(|pos| self.ss_outcome(indicator, pos))
            .collect())
    }
}

/// Samples an index with probability proportional to `exp(log_w)`.
fn sample_log_weights<R: Rng>(log_weights: &[f64], rng: &mut R) -> usize {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = log_weights.iter().map(|w| (w - max).exp()).sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in log_weights.iter().enumerate() {
        u -= (w - max).exp();
        if u <= 0.0 {
            return i;
        }
    }
    log_weights.len() - 1
}

/// A single running chain with its own RNG stream and cached log posterior.
pub struct Chain<'a> {
    kernel: Kernel<'a>,
    pub state: State,
    pub log_post: f64,
    rng: ChaCha8Rng,
    pub steps: u64,
    pub accepted: u64,
    pub lazy_stays: u64,
    pub last_accepted: bool,
}

impl<'a> Chain<'a> {
    pub fn new(kernel: Kernel<'a>, state: State, rng: ChaCha8Rng) -> Result<Self> {
        let log_post = kernel.log_post(&state)?;
        Ok(Chain {
            kernel,
            state,
            log_post,
            rng,
            steps: 0,
            accepted: 0,
            lazy_stays: 0,
            last_accepted: false,
        })
    }

    pub fn kernel(&self) -> &Kernel<'a> {
        &self.kernel
    }

    /// One Metropolis-Hastings iteration (with the lazy self-loop first when
    /// enabled). Returns whether the proposal was accepted.
    pub fn step(&mut self) -> Result<bool> {
        self.steps += 1;
        if self.kernel.spec.lazy && self.rng.gen::<bool>() {
            self.lazy_stays += 1;
            self.last_accepted = false;
            return Ok(false);
        }
        let outcome = self.kernel.propose(&self.state, &mut self.rng)?;
        let log_accept = outcome.log_accept();
        let accept = log_accept >= 0.0 || self.rng.gen::<f64>().ln() < log_accept;
        if accept {
            self.state = outcome.candidate;
            self.log_post += outcome.log_ratio;
            self.accepted += 1;
        }
        self.last_accepted = accept;
        if cfg!(debug_assertions) && self.steps % 10_000 == 0 {
            let fresh = self.kernel.log_post(&self.state)?;
            debug_assert!(
                (self.log_post - fresh).abs() < 1e-8,
                "cached log posterior drifted: {} vs {}",
                self.log_post,
                fresh
            );
        }
        Ok(accept)
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }
}

/// Derives a 256-bit per-chain seed from the base seed and chain index.
pub fn chain_seed(base_seed: u64, chain: usize) -> [u8; 32] {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&base_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&(chain as u64).to_le_bytes());
    // Distinct constant block so (base, chain) never collides with a plain
    // `seed_from_u64` stream used elsewhere.
    seed[16..24].copy_from_slice(&0x9e37_79b9_7f4a_7c15u64.to_le_bytes());
    seed
}

/// How each chain picks its starting state.
#[derive(Debug, Clone)]
pub enum InitStrategy {
    /// Start from the null tree / empty inclusion vector.
    Null,
    /// Start from a tree built by `r` uniform grows, `r ~ Uniform{0..=max}`.
    RandomGrows { max: usize },
    Fixed(State),
}

impl InitStrategy {
    fn draw(&self, kernel: &Kernel, rng: &mut ChaCha8Rng) -> Result<State> {
        match self {
            InitStrategy::Null => Ok(kernel.initial_state()),
            InitStrategy::Fixed(state) => Ok(state.clone()),
            InitStrategy::RandomGrows { max } => {
                let r = rng.gen_range(0..=*max);
                match kernel.initial_state() {
                    State::Tree(mut t) => {
                        for _ in 0..r {
                            let growable = t.growable_external_nodes();
                            if growable.is_empty() {
                                break;
                            }
                            t = t.grow(&growable[rng.gen_range(0..growable.len())])?;
                        }
                        Ok(State::Tree(t))
                    }
                    State::Indicator(mut s) => {
                        for _ in 0..r {
                            s.insert(rng.gen_range(1..s.nbits()));
                        }
                        Ok(State::Indicator(s))
                    }
                }
            }
        }
    }
}

/// One recorded point of a chain trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub step: u64,
    /// Whether the iteration that produced this record accepted its proposal.
    pub accepted: bool,
    pub log_post: f64,
    pub set: NodeSet,
}

/// A completed chain trajectory recorded on a fixed cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub chain: usize,
    pub record_every: u64,
    pub samples: Vec<Sample>,
    pub steps: u64,
    pub accepted: u64,
    pub lazy_stays: u64,
}

impl Trace {
    pub fn acceptance_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }

    /// CSV rows `chain,step,accepted,log_post,tree`, deterministic.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("chain,step,accepted,log_post,tree\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{:.12e},{}\n",
                self.chain,
                s.step,
                u8::from(s.accepted),
                s.log_post,
                s.set.encode()
            ));
        }
        out
    }
}

/// Runs independent replica chains in parallel. Output depends only on the
/// arguments (chains are seeded by `(base_seed, index)`), never on worker
/// scheduling.
pub fn run_chains(
    engine: &PosteriorEngine,
    spec: KernelSpec,
    n_chains: usize,
    n_steps: u64,
    record_every: u64,
    base_seed: u64,
    init: &InitStrategy,
) -> Result<Vec<Trace>> {
    if n_chains == 0 || record_every == 0 {
        return Err(Error::Config("need at least one chain and a positive cadence".into()));
    }
    (0..n_chains)
        .into_par_iter()
        .map(|index| {
            let kernel = Kernel::new(engine, spec);
            let mut rng = ChaCha8Rng::from_seed(chain_seed(base_seed, index));
            let state = init.draw(&kernel, &mut rng)?;
            let mut chain = Chain::new(kernel, state, rng)?;
            let mut samples = Vec::with_capacity((n_steps / record_every + 1) as usize);
            samples.push(Sample {
                step: 0,
                accepted: false,
                log_post: chain.log_post,
                set: chain.state.set().clone(),
            });
            for step in 1..=n_steps {
                let accepted = chain.step()?;
                if step % record_every == 0 {
                    samples.push(Sample {
                        step,
                        accepted,
                        log_post: chain.log_post,
                        set: chain.state.set().clone(),
                    });
                }
            }
            Ok(Trace {
                chain: index,
                record_every,
                samples,
                steps: chain.steps,
                accepted: chain.accepted,
                lazy_stays: chain.lazy_stays,
            })
        })
        .collect()
}
