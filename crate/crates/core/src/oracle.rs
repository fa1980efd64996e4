//! Exact finite-chain analysis on enumerated state spaces: transition
//! matrices assembled from the samplers' own proposal enumeration, detailed
//! balance and irreducibility checks, spectral gaps, conductance, total
//! variation mixing times, canonical path ensembles, and drift audits.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Kernel, KernelKind, State};
use crate::posterior::PosteriorEngine;
use crate::tree::{enumerate_trees, DyadicTree, NodeId, NodeSet};

/// Largest state count given the dense eigensolver.
const DENSE_LIMIT: usize = 2000;
/// Largest state count for exhaustive subset conductance.
const EXACT_CONDUCTANCE_LIMIT: usize = 26;

/// Exact row-stochastic transition matrix of a kernel on its enumerated
/// state space, with the exact normalized posterior as stationary law.
pub struct TransitionMatrix {
    pub states: Vec<State>,
    /// Sparse rows sorted by column index; diagonals included.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub pi: Vec<f64>,
    pub lazy: bool,
}

/// All states of a kernel's chain at the given depth cap.
pub fn enumerate_state_space(kind: KernelKind, depth: u32) -> Result<Vec<State>> {
    match kind {
        KernelKind::SpikeSlab => {
            if depth > 4 {
                return Err(Error::SizeGuard(format!(
                    "spike-and-slab enumeration limited to depth 4, got {depth}"
                )));
            }
            let n_pos = (1usize << depth) - 1;
            Ok((0..(1u64 << n_pos))
                .map(|mask| {
                    let mut set = NodeSet::empty(depth);
                    for bit in 0..n_pos {
                        if mask >> bit & 1 == 1 {
                            set.insert(bit + 1);
                        }
                    }
                    State::Indicator(set)
                })
                .collect())
        }
        _ => Ok(enumerate_trees(depth)?.into_iter().map(State::Tree).collect()),
    }
}

/// Builds the exact transition matrix for the kernel by enumerating every
/// proposal from every state and applying the Metropolis-Hastings
/// acceptance probability; rejected mass lands on the diagonal.
pub fn build_transition_matrix(kernel: &Kernel) -> Result<TransitionMatrix> {
    let states = enumerate_state_space(kernel.spec.kind, kernel.depth())?;
    let index: HashMap<&State, usize> = states.iter().zip(0..).collect();
    let log_posts: Vec<f64> = states
        .iter()
        .map(|s| kernel.log_post(s))
        .collect::<Result<_>>()?;
    let max = log_posts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = log_posts.iter().map(|lp| (lp - max).exp()).sum();
    let pi: Vec<f64> = log_posts.iter().map(|lp| (lp - max).exp() / z).collect();

    let mut rows = Vec::with_capacity(states.len());
    for state in &states {
        let mut row: HashMap<usize, f64> = HashMap::new();
        for outcome in kernel.enumerate(state)? {
            let j = *index
                .get(&outcome.candidate)
                .ok_or_else(|| Error::Numerical("proposal left the state space".into()))?;
            let prob = (outcome.log_s_fwd + outcome.log_accept()).exp();
            *row.entry(j).or_insert(0.0) += prob;
        }
        let i = index[state];
        // No proposal targets the current state, so the diagonal is exactly
        // the rejected mass.
        let off: f64 = row.values().sum();
        row.insert(i, 1.0 - off);
        let mut sorted: Vec<(usize, f64)> = row.into_iter().collect();
        sorted.sort_by_key(|&(j, _)| j);
        rows.push(sorted);
    }
    let mut tm = TransitionMatrix {
        states,
        rows,
        pi,
        lazy: false,
    };
    if kernel.spec.lazy {
        tm.make_lazy();
    }
    Ok(tm)
}

impl TransitionMatrix {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map(|k| self.rows[i][k].1)
            .unwrap_or(0.0)
    }

    /// Converts `P` into the lazy chain `(I + P) / 2`.
    pub fn make_lazy(&mut self) {
        if self.lazy {
            return;
        }
        for (i, row) in self.rows.iter_mut().enumerate() {
            for (j, p) in row.iter_mut() {
                *p = if *j == i { 0.5 + *p / 2.0 } else { *p / 2.0 };
            }
        }
        self.lazy = true;
    }

    pub fn row_sum_residual(&self) -> f64 {
        self.rows
            .iter()
            .map(|row| (row.iter().map(|&(_, p)| p).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `max |pi_i P_ij - pi_j P_ji|` over all edges.
    pub fn detailed_balance_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, p) in row {
                if j <= i {
                    continue;
                }
                worst = worst.max((self.pi[i] * p - self.pi[j] * self.entry(j, i)).abs());
            }
        }
        worst
    }

    /// Whether every state reaches every other along positive-probability
    /// transitions.
    pub fn is_irreducible(&self) -> bool {
        let n = self.n_states();
        // Reversibility makes the transition graph symmetric, so one BFS on
        // each orientation suffices; we still check both to be safe.
        let reach = |forward: bool| -> usize {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            let mut count = 1;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    let p = if forward { self.entry(i, j) } else { self.entry(j, i) };
                    if p > 0.0 && !seen[j] {
                        seen[j] = true;
                        count += 1;
                        stack.push(j);
                    }
                }
            }
            count
        };
        reach(true) == n && reach(false) == n
    }

    /// Stationary probability of a state, if it is in the space.
    pub fn stationary_prob(&self, state: &State) -> Option<f64> {
        self.states.iter().position(|s| s == state).map(|i| self.pi[i])
    }

    fn sym_rows(&self) -> Vec<Vec<(usize, f64)>> {
        let sqrt_pi: Vec<f64> = self.pi.iter().map(|p| p.sqrt()).collect();
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .map(|&(j, p)| (j, p * sqrt_pi[i] / sqrt_pi[j]))
                    .collect()
            })
            .collect()
    }
}

/// Spectral gap `1 - lambda_2` of the pi-symmetrized matrix. Requires the
/// lazy chain so the spectrum is nonnegative. Uses a dense eigensolver for
/// small spaces and deflated power iteration for large ones.
pub fn spectral_gap(tm: &TransitionMatrix) -> Result<f64> {
    if !tm.lazy {
        return Err(Error::Config("spectral gap is defined for the lazy chain".into()));
    }
    let n = tm.n_states();
    if n <= DENSE_LIMIT {
        let mut m = DMatrix::<f64>::zeros(n, n);
        for (i, row) in tm.sym_rows().iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] = v;
            }
        }
        // Average out the tiny asymmetry left by floating-point division.
        let m = (&m + m.transpose()) / 2.0;
        let eigen = SymmetricEigen::new(m);
        let mut vals: Vec<f64> = eigen.eigenvalues.iter().cloned().collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if vals[n - 1] < -1e-10 {
            return Err(Error::Numerical(format!(
                "lazy chain produced negative eigenvalue {}",
                vals[n - 1]
            )));
        }
        Ok(1.0 - vals[1])
    } else {
        sparse_gap(tm)
    }
}

/// Deflated power iteration for the second eigenvalue of the symmetrized
/// lazy matrix; the top eigenvector is known to be sqrt(pi).
fn sparse_gap(tm: &TransitionMatrix) -> Result<f64> {
    let n = tm.n_states();
    let rows = tm.sym_rows();
    let v1: Vec<f64> = tm.pi.iter().map(|p| p.sqrt()).collect();
    let deflate = |x: &mut [f64]| {
        let dot: f64 = x.iter().zip(&v1).map(|(a, b)| a * b).sum();
        for (xi, vi) in x.iter_mut().zip(&v1) {
            *xi -= dot * vi;
        }
    };
    let mut x: Vec<f64> = (0..n).map(|i| ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5).collect();
    deflate(&mut x);
    let mut lambda = 0.0f64;
    for iter in 0..200_000 {
        let mut y = vec![0.0; n];
        for (i, row) in rows.iter().enumerate() {
            let xi = x[i];
            if xi != 0.0 {
                for &(j, v) in row {
                    y[j] += v * xi;
                }
            }
        }
        deflate(&mut y);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(1.0);
        }
        for v in &mut y {
            *v /= norm;
        }
        let new_lambda = norm;
        x = y;
        if iter > 10 && (new_lambda - lambda).abs() < 1e-13 {
            return Ok(1.0 - new_lambda);
        }
        lambda = new_lambda;
    }
    Ok(1.0 - lambda)
}

/// Exact conductance by enumerating every subset with stationary mass at
/// most one half, walking subsets in Gray-code order so each step updates
/// the cut flow in O(degree).
pub fn conductance_exact(tm: &TransitionMatrix) -> Result<f64> {
    let n = tm.n_states();
    if n > EXACT_CONDUCTANCE_LIMIT {
        return Err(Error::SizeGuard(format!(
            "exact conductance limited to {EXACT_CONDUCTANCE_LIMIT} states, got {n}"
        )));
    }
    // Symmetric edge flows Q(i, j) = pi_i P(i, j).
    let flows: Vec<Vec<(usize, f64)>> = tm
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .filter(|&&(j, _)| j != i)
                .map(|&(j, p)| (j, tm.pi[i] * p))
                .collect()
        })
        .collect();
    let mut in_set = vec![false; n];
    let mut mass = 0.0f64;
    let mut cut = 0.0f64;
    let mut phi = f64::INFINITY;
    let mut prev_gray = 0u64;
    for counter in 1u64..(1u64 << n) {
        let gray = counter ^ (counter >> 1);
        let bit = (gray ^ prev_gray).trailing_zeros() as usize;
        prev_gray = gray;
        let adding = !in_set[bit];
        for &(j, q) in &flows[bit] {
            let delta = if in_set[j] { -q } else { q };
            cut += if adding { delta } else { -delta };
        }
        in_set[bit] = adding;
        mass += if adding { tm.pi[bit] } else { -tm.pi[bit] };
        if mass > 0.0 && mass <= 0.5 {
            phi = phi.min(cut / mass);
        }
    }
    Ok(phi)
}

/// Bottleneck ratio `Q(A, A^c) / pi(A)` of a supplied set.
pub fn bottleneck_ratio(tm: &TransitionMatrix, in_set: &[bool]) -> Result<f64> {
    if in_set.len() != tm.n_states() {
        return Err(Error::Shape {
            expected: tm.n_states(),
            got: in_set.len(),
        });
    }
    let mut mass = 0.0;
    let mut cut = 0.0;
    for (i, row) in tm.rows.iter().enumerate() {
        if !in_set[i] {
            continue;
        }
        mass += tm.pi[i];
        for &(j, p) in row {
            if !in_set[j] {
                cut += tm.pi[i] * p;
            }
        }
    }
    if mass == 0.0 {
        return Err(Error::Config("bottleneck set has no stationary mass".into()));
    }
    Ok(cut / mass)
}

/// Worst-start epsilon-mixing time by iterated distribution updates; total
/// variation to stationarity is nonincreasing, so the first crossing is the
/// mixing time. Returns `cap` if not mixed within the cap.
pub fn tv_mixing_time(tm: &TransitionMatrix, epsilon: f64, cap: u64) -> u64 {
    let n = tm.n_states();
    let mut worst = 0u64;
    for start in 0..n {
        let mut d = vec![0.0f64; n];
        d[start] = 1.0;
        let mut t = 0u64;
        loop {
            let tv: f64 = d
                .iter()
                .zip(&tm.pi)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            if tv <= epsilon {
                break;
            }
            if t >= cap {
                t = cap;
                break;
            }
            let mut next = vec![0.0f64; n];
            for (i, row) in tm.rows.iter().enumerate() {
                let di = d[i];
                if di != 0.0 {
                    for &(j, p) in row {
                        next[j] += di * p;
                    }
                }
            }
            d = next;
            t += 1;
        }
        worst = worst.max(t);
    }
    worst
}

/// Mixing-time upper bound `[log(1/pi_min) + log(1/eps)] / gap`.
pub fn tv_time_bound(tm: &TransitionMatrix, gap: f64, epsilon: f64) -> f64 {
    let pi_min = tm.pi.iter().cloned().fold(f64::INFINITY, f64::min);
    ((1.0 / pi_min).ln() + (1.0 / epsilon).ln()) / gap
}

/// Which canonical transition family routes paths through the target tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnsembleKind {
    /// Single-node moves: remove the deepest-rightmost redundant node, or
    /// grow the deepest-rightmost external node inside the target.
    Classic,
    /// Twig moves: remove the whole twig under the shallowest-leftmost
    /// twig-prunable redundant node, or grow a twig to the deepest-rightmost
    /// missed node.
    Twiggy,
}

/// One step of the canonical transition toward `t_star`; strictly decreases
/// the Hamming distance.
pub fn canonical_transition(
    tree: &DyadicTree,
    t_star: &DyadicTree,
    kind: EnsembleKind,
) -> Result<DyadicTree> {
    if tree == t_star {
        return Err(Error::Edit("tree already equals the target".into()));
    }
    let redundant: Vec<usize> = tree
        .set()
        .iter()
        .filter(|&p| !t_star.set().contains(p))
        .collect();
    match kind {
        EnsembleKind::Classic => {
            if let Some(&pos) = redundant.last() {
                // Deepest-rightmost redundant node is always pre-terminal.
                tree.prune(&NodeId::from_position(pos))
            } else {
                // Underfitting subset: grow the deepest-rightmost external
                // node that is internal in the target.
                let pos = t_star
                    .set()
                    .iter()
                    .filter(|&p| {
                        let node = NodeId::from_position(p);
                        !tree.is_internal(&node)
                            && node
                                .parent()
                                .map(|par| tree.is_internal(&par))
                                .unwrap_or(false)
                    })
                    .max()
                    .ok_or_else(|| Error::Edit("no growable node toward the target".into()))?;
                tree.grow(&NodeId::from_position(pos))
            }
        }
        EnsembleKind::Twiggy => {
            if redundant.is_empty() {
                // Grow a twig to the deepest-rightmost missed target node.
                let pos = t_star
                    .set()
                    .iter()
                    .filter(|&p| !tree.set().contains(p))
                    .max()
                    .ok_or_else(|| Error::Edit("no missed node toward the target".into()))?;
                Ok(tree.grow_twig(&NodeId::from_position(pos))?.0)
            } else {
                // Shallowest-leftmost twig-prunable redundant node.
                let head = tree
                    .twig_prunable()
                    .into_iter()
                    .filter(|n| !t_star.set().contains(n.position()))
                    .min_by_key(|n| n.position())
                    .ok_or_else(|| Error::Edit("no prunable redundant twig".into()))?;
                Ok(tree.prune_twig(&head)?.0)
            }
        }
    }
}

/// The canonical path from a tree to the target (inclusive of endpoints).
pub fn canonical_path(
    tree: &DyadicTree,
    t_star: &DyadicTree,
    kind: EnsembleKind,
) -> Result<Vec<DyadicTree>> {
    let mut path = vec![tree.clone()];
    let mut cur = tree.clone();
    while &cur != t_star {
        let next = canonical_transition(&cur, t_star, kind)?;
        if next.hamming(t_star) >= cur.hamming(t_star) {
            return Err(Error::Numerical(
                "canonical transition failed to approach the target".into(),
            ));
        }
        path.push(next.clone());
        cur = next;
    }
    Ok(path)
}

/// A complete canonical path ensemble with its length and congestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CanonicalEnsemble {
    pub kind: EnsembleKind,
    /// Maximum path length (in edges) over all ordered state pairs.
    pub ell: usize,
    /// Maximum edge congestion `sum of pi(T) pi(T') over routed pairs / Q(e)`.
    pub rho: f64,
    pub n_pairs: usize,
}

/// Routes one simple path per ordered pair of tree states through `t_star`
/// and computes length and congestion. Fails if any canonical step is not a
/// positive-probability transition of the kernel.
pub fn build_ensemble(
    tm: &TransitionMatrix,
    t_star: &DyadicTree,
    kind: EnsembleKind,
) -> Result<CanonicalEnsemble> {
    let n = tm.n_states();
    let index: HashMap<&State, usize> = tm.states.iter().zip(0..).collect();
    let star_state = State::Tree(t_star.clone());
    if !index.contains_key(&star_state) {
        return Err(Error::Config("target tree not in the state space".into()));
    }
    // Per-state canonical path to the target, as index sequences.
    let mut to_star: Vec<Vec<usize>> = Vec::with_capacity(n);
    for state in &tm.states {
        let tree = state.tree()?;
        let path = canonical_path(tree, t_star, kind)?;
        let idx_path: Vec<usize> = path
            .iter()
            .map(|t| {
                index
                    .get(&State::Tree(t.clone()))
                    .copied()
                    .ok_or_else(|| Error::Numerical("path left the state space".into()))
            })
            .collect::<Result<_>>()?;
        for w in idx_path.windows(2) {
            if tm.entry(w[0], w[1]) <= 0.0 {
                return Err(Error::Numerical(format!(
                    "canonical step {} -> {} is not kernel-adjacent",
                    w[0], w[1]
                )));
            }
        }
        to_star.push(idx_path);
    }

    let mut congestion: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ell = 0usize;
    let mut n_pairs = 0usize;
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let pa = &to_star[a];
            let pb = &to_star[b];
            // Strip the longest common suffix, keeping one junction state.
            let mut s = 0usize;
            while s < pa.len() && s < pb.len() && pa[pa.len() - 1 - s] == pb[pb.len() - 1 - s] {
                s += 1;
            }
            let mut combined: Vec<usize> = pa[..=pa.len() - s].to_vec();
            combined.extend(pb[..pb.len() - s].iter().rev());
            // Simplicity check: canonical determinism makes halves disjoint.
            debug_assert!({
                let mut seen = combined.clone();
                seen.sort_unstable();
                seen.dedup();
                seen.len() == combined.len()
            });
            ell = ell.max(combined.len() - 1);
            n_pairs += 1;
            let weight = tm.pi[a] * tm.pi[b];
            for w in combined.windows(2) {
                *congestion.entry((w[0], w[1])).or_insert(0.0) += weight;
            }
        }
    }
    let mut rho = 0.0f64;
    for (&(i, j), &load) in &congestion {
        let q = tm.pi[i] * tm.entry(i, j);
        if q <= 0.0 {
            return Err(Error::Numerical("congested edge has zero capacity".into()));
        }
        rho = rho.max(load / q);
    }
    Ok(CanonicalEnsemble {
        kind,
        ell,
        rho,
        n_pairs,
    })
}

/// Per-state drift classification and contraction ratios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub underfit_total: usize,
    /// Underfitted states with `(P V1)(T) / V1(T) < 1`.
    pub underfit_contractive: usize,
    pub overfit_total: usize,
    /// Strictly overfitted states with `(P V2)(T) / V2(T) < 1`.
    pub overfit_contractive: usize,
    pub worst_underfit_ratio: f64,
    pub worst_overfit_ratio: f64,
}

/// Log of the first drift function: unexplained data energy, normalized.
pub fn v1_exponent(engine: &PosteriorEngine, tree: &DyadicTree, c_f0: f64) -> f64 {
    let n = engine.n() as f64;
    let cells = (1u64 << engine.depth()) as f64;
    engine.residual(tree) / (cells * (c_f0 + 2.0).powi(2) * (n + 1.0))
}

/// Log of the second drift function: redundant-node count plus, when any
/// signal node is missed, the remaining room above the union. Internal
/// counts include the constant node.
pub fn v2_exponent(tree: &DyadicTree, t_star: &DyadicTree, depth: u32) -> f64 {
    let cells = (1u64 << depth) as f64;
    let common = tree.set().intersection_len(t_star.set());
    let redundant = tree.set().len() - common;
    let missed = t_star.set().len() - common;
    let union = 1 + tree.set().union_len(t_star.set());
    (redundant as f64 + missed.min(1) as f64 * (cells - union as f64)) / cells
}

/// Audits the two drift functions on the enumerated space: `V1` rewards
/// explaining the data (residual sum of squares in the exponent), `V2`
/// counts redundant and missed nodes. `c_f0` is the sup-norm of the
/// noiseless signal.
pub fn drift_report(
    tm: &TransitionMatrix,
    engine: &PosteriorEngine,
    t_star: &DyadicTree,
    c_f0: f64,
) -> Result<DriftReport> {
    let v1_exp: Vec<f64> = tm
        .states
        .iter()
        .map(|s| Ok(v1_exponent(engine, s.tree()?, c_f0)))
        .collect::<Result<_>>()?;
    let v2_exp: Vec<f64> = tm
        .states
        .iter()
        .map(|s| Ok(v2_exponent(s.tree()?, t_star, engine.depth())))
        .collect::<Result<_>>()?;

    let ratio = |exps: &[f64], i: usize| -> f64 {
        tm.rows[i]
            .iter()
            .map(|&(j, p)| p * (exps[j] - exps[i]).exp())
            .sum()
    };

    let mut report = DriftReport {
        underfit_total: 0,
        underfit_contractive: 0,
        overfit_total: 0,
        overfit_contractive: 0,
        worst_underfit_ratio: 0.0,
        worst_overfit_ratio: 0.0,
    };
    for (i, state) in tm.states.iter().enumerate() {
        let t = state.tree()?;
        let superset = t_star.set().is_subset_of(t.set());
        if !superset {
            let r = ratio(&v1_exp, i);
            report.underfit_total += 1;
            if r < 1.0 {
                report.underfit_contractive += 1;
            }
            report.worst_underfit_ratio = report.worst_underfit_ratio.max(r);
        } else if t != t_star {
            let r = ratio(&v2_exp, i);
            report.overfit_total += 1;
            if r < 1.0 {
                report.overfit_contractive += 1;
            }
            report.worst_overfit_ratio = report.worst_overfit_ratio.max(r);
        }
    }
    Ok(report)
}

/// Bundle of chain-level exactness checks plus mixing quantities, with the
/// inequality audits that must hold for any reversible lazy chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub kernel: String,
    pub depth: u32,
    pub n_states: usize,
    pub row_sum_residual: f64,
    pub detailed_balance_residual: f64,
    pub irreducible: bool,
    pub gap: f64,
    pub conductance: Option<f64>,
    pub tau_quarter: u64,
    pub tau_upper_bound: f64,
    pub ensemble: Option<CanonicalEnsemble>,
    pub drift: Option<DriftReport>,
    pub bounds_ok: bool,
}

/// Epsilon used for the reported mixing time.
pub const TV_EPSILON: f64 = 0.25;

/// Runs the full audit battery on one kernel at desk scale.
pub fn full_report(
    engine: &PosteriorEngine,
    kind: KernelKind,
    t_star: Option<&DyadicTree>,
    c_f0: f64,
) -> Result<OracleReport> {
    let kernel = Kernel::new(engine, crate::kernels::KernelSpec::lazy(kind));
    let tm = build_transition_matrix(&kernel)?;
    let gap = spectral_gap(&tm)?;
    let conductance = if tm.n_states() <= EXACT_CONDUCTANCE_LIMIT {
        Some(conductance_exact(&tm)?)
    } else {
        None
    };
    let tau = tv_mixing_time(&tm, TV_EPSILON, 10_000_000);
    let bound = tv_time_bound(&tm, gap, TV_EPSILON);
    let tree_kernel = kind != KernelKind::SpikeSlab;
    let ensemble = match (tree_kernel, t_star, kind) {
        (true, Some(star), KernelKind::GrowPrune | KernelKind::InformedGrowPrune) => {
            Some(build_ensemble(&tm, star, EnsembleKind::Classic)?)
        }
        (true, Some(star), KernelKind::Twiggy | KernelKind::InformedTwiggy) => {
            Some(build_ensemble(&tm, star, EnsembleKind::Twiggy)?)
        }
        _ => None,
    };
    let drift = match (tree_kernel, t_star) {
        (true, Some(star)) => Some(drift_report(&tm, engine, star, c_f0)?),
        _ => None,
    };
    let mut bounds_ok = (tau as f64) <= bound.ceil() && gap > 0.0;
    if let Some(phi) = conductance {
        bounds_ok &= phi * phi / 2.0 <= gap + 1e-12 && gap <= 2.0 * phi + 1e-12;
    }
    if let Some(e) = &ensemble {
        bounds_ok &= gap + 1e-12 >= 1.0 / (e.ell as f64 * e.rho);
        bounds_ok &= e.ell <= 1 << (engine.depth() + 1);
    }
    Ok(OracleReport {
        kernel: kind.short_name().to_string(),
        depth: engine.depth(),
        n_states: tm.n_states(),
        row_sum_residual: tm.row_sum_residual(),
        detailed_balance_residual: tm.detailed_balance_residual(),
        irreducible: tm.is_irreducible(),
        gap,
        conductance,
        tau_quarter: tau,
        tau_upper_bound: bound,
        ensemble,
        drift,
        bounds_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar::{generate_dataset, haar_inner_products, RegularDesign, SignalSpec};
    use crate::kernels::KernelSpec;
    use crate::posterior::ModelConfig;
    use approx::assert_abs_diff_eq;

    fn node(l: i32, k: u32) -> NodeId {
        NodeId::new(l, k).unwrap()
    }

    fn test_engine(n: usize, depth: u32, seed: u64) -> PosteriorEngine {
        let design = RegularDesign::from_n(n).unwrap();
        let spec = SignalSpec::uniform([node(1, 0)], 2.0, 1.0, seed);
        let y = generate_dataset(&spec, &design).unwrap();
        let stats = haar_inner_products(&y, &design).unwrap();
        let config = ModelConfig::with_flat_split_prob(0.1, depth, n).unwrap();
        PosteriorEngine::new(stats, config).unwrap()
    }

    #[test]
    fn two_state_matrix_matches_hand_formula() {
        // Depth 1: the null tree and the one-split tree. Both branch choices
        // are forced, both single-candidate, so S = 1 each way and the entry
        // is the plain acceptance probability.
        let engine = test_engine(16, 1, 1);
        let kernel = Kernel::new(&engine, KernelSpec::new(KernelKind::GrowPrune));
        let tm = build_transition_matrix(&kernel).unwrap();
        assert_eq!(tm.n_states(), 2);
        let r = engine.node_log_ratio(&node(0, 0));
        assert_abs_diff_eq!(tm.entry(0, 1), r.exp().min(1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(tm.entry(1, 0), (-r).exp().min(1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(tm.row_sum_residual(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn all_kernels_balance_and_communicate() {
        let engine = test_engine(16, 2, 2);
        for kind in KernelKind::ALL {
            let kernel = Kernel::new(&engine, KernelSpec::new(kind));
            let tm = build_transition_matrix(&kernel).unwrap();
            assert!(tm.row_sum_residual() < 1e-12, "{kind:?} rows");
            assert!(
                tm.detailed_balance_residual() < 1e-10,
                "{kind:?} balance {}",
                tm.detailed_balance_residual()
            );
            assert!(tm.is_irreducible(), "{kind:?} reducible");
            assert_abs_diff_eq!(tm.pi.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(tm.pi.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn corrupted_reverse_probability_breaks_balance() {
        let engine = test_engine(16, 2, 3);
        let kernel = Kernel::new(&engine, KernelSpec::new(KernelKind::GrowPrune));
        let mut tm = build_transition_matrix(&kernel).unwrap();
        assert!(tm.detailed_balance_residual() < 1e-10);
        // Inflate the off-diagonal entry carrying the most stationary flow,
        // as a wrong reverse probability would, absorbing the excess on the
        // diagonal so the rows still sum to one.
        let (row_i, col, bump) = tm
            .rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, p)| (i, j, p)))
            .filter(|&(i, j, _)| i != j)
            .max_by(|a, b| (tm.pi[a.0] * a.2).total_cmp(&(tm.pi[b.0] * b.2)))
            .unwrap();
        for (j, p) in &mut tm.rows[row_i] {
            if *j == col {
                *p += bump * 0.5;
            } else if *j == row_i {
                *p -= bump * 0.5;
            }
        }
        assert!(tm.detailed_balance_residual() > 1e-3);
    }

    /// Hand-built two-state chain with arbitrary off-diagonals.
    fn two_state(p: f64, q: f64) -> TransitionMatrix {
        let states = enumerate_state_space(KernelKind::GrowPrune, 1).unwrap();
        TransitionMatrix {
            states,
            rows: vec![vec![(0, 1.0 - p), (1, p)], vec![(0, q), (1, 1.0 - q)]],
            pi: vec![q / (p + q), p / (p + q)],
            lazy: false,
        }
    }

    #[test]
    fn two_state_gap_is_sum_of_rates() {
        let mut tm = two_state(0.3, 0.2);
        tm.make_lazy();
        assert_abs_diff_eq!(spectral_gap(&tm).unwrap(), 0.25, epsilon = 1e-12);
        // Identity chain has zero gap.
        let mut id = two_state(0.5, 0.5);
        id.rows = vec![vec![(0, 1.0)], vec![(1, 1.0)]];
        id.pi = vec![0.5, 0.5];
        id.lazy = true;
        assert_abs_diff_eq!(spectral_gap(&id).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sparse_and_dense_gap_agree() {
        let engine = test_engine(16, 3, 4);
        let kernel = Kernel::new(&engine, KernelSpec::lazy(KernelKind::Twiggy));
        let tm = build_transition_matrix(&kernel).unwrap();
        let dense = spectral_gap(&tm).unwrap();
        let sparse = sparse_gap(&tm).unwrap();
        assert_abs_diff_eq!(dense, sparse, epsilon = 1e-8);
    }

    #[test]
    fn two_state_mixing_matches_closed_form() {
        let (p, q) = (0.3, 0.2);
        let tm = two_state(p, q);
        let lambda: f64 = 1.0 - p - q;
        let eps = 0.1;
        // TV from the worse start decays as max(pi) * lambda^t.
        let c = tm.pi[1].max(tm.pi[0]);
        let expected = (0..).find(|&t| c * lambda.powi(t) <= eps).unwrap() as u64;
        assert_eq!(tv_mixing_time(&tm, eps, 1000), expected);
        // Starting at stationarity mixes immediately.
        let uniform_start = two_state(0.5, 0.5);
        assert_eq!(tv_mixing_time(&uniform_start, 0.5, 1000), 0);
    }

    #[test]
    fn two_state_conductance_is_escape_probability() {
        let tm = two_state(0.3, 0.3);
        // pi uniform; the singleton splits are the only candidates.
        assert_abs_diff_eq!(conductance_exact(&tm).unwrap(), 0.3, epsilon = 1e-12);
        let in_set = [true, false];
        assert_abs_diff_eq!(bottleneck_ratio(&tm, &in_set).unwrap(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn cheeger_and_canonical_bounds_hold_on_small_space() {
        let engine = test_engine(16, 2, 5);
        let t_star = DyadicTree::from_nodes(vec![node(0, 0), node(1, 0)], 2).unwrap();
        for kind in [KernelKind::GrowPrune, KernelKind::Twiggy] {
            let kernel = Kernel::new(&engine, KernelSpec::lazy(kind));
            let tm = build_transition_matrix(&kernel).unwrap();
            let gap = spectral_gap(&tm).unwrap();
            let phi = conductance_exact(&tm).unwrap();
            assert!(phi * phi / 2.0 <= gap + 1e-12 && gap <= 2.0 * phi + 1e-12);
            let ensemble_kind = if kind == KernelKind::Twiggy {
                EnsembleKind::Twiggy
            } else {
                EnsembleKind::Classic
            };
            let ens = build_ensemble(&tm, &t_star, ensemble_kind).unwrap();
            assert!(ens.ell <= 8, "path length {}", ens.ell);
            assert!(gap + 1e-12 >= 1.0 / (ens.ell as f64 * ens.rho));
            let tau = tv_mixing_time(&tm, TV_EPSILON, 1_000_000);
            assert!((tau as f64) <= tv_time_bound(&tm, gap, TV_EPSILON).ceil());
        }
    }

    #[test]
    fn classic_transition_removes_single_extra_node() {
        let t_star = DyadicTree::from_nodes(vec![node(0, 0)], 2).unwrap();
        let over = t_star.grow(&node(1, 1)).unwrap();
        let back = canonical_transition(&over, &t_star, EnsembleKind::Classic).unwrap();
        assert_eq!(back, t_star);
    }

    #[test]
    fn classic_path_from_null_to_full_depth_two() {
        let t_star = DyadicTree::full(2);
        let path = canonical_path(&DyadicTree::null(2), &t_star, EnsembleKind::Classic).unwrap();
        let grown: Vec<String> = path.iter().map(|t| t.encode()).collect();
        assert_eq!(
            grown,
            vec![
                "-1:0",
                "-1:0;0:0",
                "-1:0;0:0;1:1",
                "-1:0;0:0;1:0;1:1",
            ]
        );
    }

    #[test]
    fn twiggy_transition_reaches_chain_target_in_one_step() {
        let t_star =
            DyadicTree::from_nodes(vec![node(0, 0), node(1, 1), node(2, 3)], 3).unwrap();
        let step =
            canonical_transition(&DyadicTree::null(3), &t_star, EnsembleKind::Twiggy).unwrap();
        assert_eq!(step, t_star);
    }

    #[test]
    fn twiggy_transition_mixed_removes_redundant_twig_first() {
        let t_star = DyadicTree::from_nodes(vec![node(0, 0), node(1, 0)], 2).unwrap();
        let mixed = DyadicTree::from_nodes(vec![node(0, 0), node(1, 1)], 2).unwrap();
        let step = canonical_transition(&mixed, &t_star, EnsembleKind::Twiggy).unwrap();
        assert_eq!(step, DyadicTree::from_nodes(vec![node(0, 0)], 2).unwrap());
    }

    #[test]
    fn v2_orders_overfitted_below_non_overfitted() {
        let depth = 3;
        let t_star = DyadicTree::from_nodes(vec![node(0, 0), node(1, 0)], depth).unwrap();
        let trees = enumerate_trees(depth).unwrap();
        let overfit: Vec<f64> = trees
            .iter()
            .filter(|t| t_star.set().is_subset_of(t.set()) && **t != t_star)
            .map(|t| v2_exponent(t, &t_star, depth))
            .collect();
        let non_overfit: Vec<f64> = trees
            .iter()
            .filter(|t| !t_star.set().is_subset_of(t.set()))
            .map(|t| v2_exponent(t, &t_star, depth))
            .collect();
        // Non-overfitting trees share a constant value exceeding every
        // overfitted one; the target itself sits at zero.
        let expect = 1.0 - (1.0 + t_star.set().len() as f64) / 8.0;
        for v in &non_overfit {
            assert_abs_diff_eq!(*v, expect, epsilon = 1e-12);
        }
        for v in &overfit {
            assert!(*v <= expect + 1e-12);
        }
        assert_abs_diff_eq!(v2_exponent(&t_star, &t_star, depth), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn drift_report_partitions_the_space() {
        let engine = test_engine(16, 2, 6);
        let t_star = DyadicTree::from_nodes(vec![node(0, 0), node(1, 0)], 2).unwrap();
        let kernel = Kernel::new(&engine, KernelSpec::lazy(KernelKind::InformedGrowPrune));
        let tm = build_transition_matrix(&kernel).unwrap();
        let report = drift_report(&tm, &engine, &t_star, 4.0).unwrap();
        assert_eq!(report.underfit_total + report.overfit_total + 1, tm.n_states());
    }
}
