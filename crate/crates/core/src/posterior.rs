//! Tree prior, closed-form marginal likelihood, and O(1) incremental
//! log-posterior ratios.
//!
//! The coefficient prior is the unit-information g-prior (g = n) on the
//! active wavelet coefficients; with the orthogonal regular-grid design the
//! marginal likelihood of a tree reduces to
//!
//! `log N_Y(T) = -(n/2) log 2pi - yty/2 - (|T_int|/2) log(1+n) + sum s_lk`
//!
//! with per-node score `s_lk = w_lk^2 / (2(n+1))`. The tree prior is a
//! Galton-Watson product over split/stop probabilities `p_l`, with the
//! constant node's forced split dropped as a shared constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haar::SufficientStats;
use crate::tree::{DyadicTree, NodeId, NodeSet, Twig};

/// Prior and proposal hyperparameters shared by all kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Split-probability exponent: `p_l = min(alpha * n^-c, 0.499)`.
    pub c: f64,
    pub alpha: f64,
    /// Depth cap L: internal levels < L.
    pub depth: u32,
    /// Layer-penalty base D > 1 for the twiggy grow proposal.
    pub twig_base: f64,
    /// Lower clamp for informed prune weights (default 1).
    pub informed_lower: f64,
    /// Upper clamp for informed grow/prune weights (default e^10).
    pub informed_upper: f64,
    /// Per-level inclusion probabilities for the spike-and-slab baseline
    /// (levels 0..depth-1).
    pub ss_level_probs: Vec<f64>,
}

impl ModelConfig {
    pub fn new(c: f64, alpha: f64, depth: u32, n: usize) -> Result<Self> {
        let cfg = ModelConfig {
            c,
            alpha,
            depth,
            twig_base: 2.0,
            informed_lower: 1.0,
            informed_upper: (10f64).exp(),
            ss_level_probs: ss_schedule_powers_of_six(n, depth),
        };
        cfg.validate(n)?;
        Ok(cfg)
    }

    /// Directly fixes one split probability for every level, bypassing the
    /// `alpha * n^-c` parameterization (used by the worked examples).
    pub fn with_flat_split_prob(p: f64, depth: u32, n: usize) -> Result<Self> {
        if !(0.0..0.5).contains(&p) || p == 0.0 {
            return Err(Error::Config(format!("split probability {p} outside (0, 1/2)")));
        }
        // alpha * n^0 = p
        let mut cfg = ModelConfig::new(0.0, p, depth, n)?;
        cfg.c = 0.0;
        Ok(cfg)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth cap must be >= 1".into()));
        }
        if self.twig_base <= 1.0 {
            return Err(Error::Config(format!(
                "twig layer base must exceed 1, got {}",
                self.twig_base
            )));
        }
        if !(1.0 <= self.informed_lower && self.informed_lower <= self.informed_upper) {
            return Err(Error::Config(format!(
                "informed clamps must satisfy 1 <= lower <= upper, got [{}, {}]",
                self.informed_lower, self.informed_upper
            )));
        }
        if self.ss_level_probs.len() != self.depth as usize {
            return Err(Error::Config(format!(
                "need {} spike-and-slab level probabilities, got {}",
                self.depth,
                self.ss_level_probs.len()
            )));
        }
        for (l, &p) in self.ss_level_probs.iter().enumerate() {
            if !(0.0 < p && p < 1.0) {
                return Err(Error::Config(format!(
                    "spike-and-slab probability {p} at level {l} outside (0,1)"
                )));
            }
        }
        if self.c <= 2.5 {
            log::warn!("prior exponent c = {} is at or below 5/2; the theory behind the classic kernels assumes c > 5/2", self.c);
        }
        if self.split_prob(0, n) >= 0.499 {
            log::warn!(
                "split probability alpha * n^-c = {} clipped at 0.499",
                self.alpha * (n as f64).powf(-self.c)
            );
        }
        Ok(())
    }

    /// Split probability at a level: `min(alpha n^-c, 0.499)` below the cap,
    /// exactly 0 at or beyond it.
    pub fn split_prob(&self, level: i32, n: usize) -> f64 {
        if level >= self.depth as i32 {
            return 0.0;
        }
        (self.alpha * (n as f64).powf(-self.c)).min(0.499)
    }
}

/// Schedule `0.01 n^{1/4} 6^{-l}` clipped into (0,1).
pub fn ss_schedule_powers_of_six(n: usize, depth: u32) -> Vec<f64> {
    (0..depth)
        .map(|l| (0.01 * (n as f64).powf(0.25) * 6f64.powi(-(l as i32))).clamp(1e-12, 0.499))
        .collect()
}

/// Schedule `0.01 n^{1/4} 6^{-l/2}` clipped into (0,1).
pub fn ss_schedule_sqrt_six(n: usize, depth: u32) -> Vec<f64> {
    (0..depth)
        .map(|l| (0.01 * (n as f64).powf(0.25) * 6f64.powf(-(l as f64) / 2.0)).clamp(1e-12, 0.499))
        .collect()
}

/// Immutable evaluator of log priors, log marginals, and incremental ratios.
#[derive(Debug, Clone)]
pub struct PosteriorEngine {
    stats: SufficientStats,
    config: ModelConfig,
    /// `log p_l` and `log(1 - p_l)` for levels 0..depth-1.
    log_p: Vec<f64>,
    log_1mp: Vec<f64>,
    /// Per-position score `w^2 / (2(n+1))`; index 0 is the constant node.
    s: Vec<f64>,
    half_log_1pn: f64,
    /// `log p^ss_l` and `log(1 - p^ss_l)` per level.
    ss_log_p: Vec<f64>,
    ss_log_1mp: Vec<f64>,
}

impl PosteriorEngine {
    pub fn new(stats: SufficientStats, config: ModelConfig) -> Result<Self> {
        let n = stats.n();
        config.validate(n)?;
        if (1usize << config.depth) > n {
            return Err(Error::Config(format!(
                "depth cap {} exceeds design resolution for n = {n}",
                config.depth
            )));
        }
        let log_p: Vec<f64> = (0..config.depth)
            .map(|l| config.split_prob(l as i32, n).ln())
            .collect();
        let log_1mp: Vec<f64> = (0..config.depth)
            .map(|l| (1.0 - config.split_prob(l as i32, n)).ln())
            .collect();
        let s: Vec<f64> = (0..n)
            .map(|pos| {
                let w = stats.w_at(pos);
                w * w / (2.0 * (n as f64 + 1.0))
            })
            .collect();
        let ss_log_p: Vec<f64> = config.ss_level_probs.iter().map(|p| p.ln()).collect();
        let ss_log_1mp: Vec<f64> = config.ss_level_probs.iter().map(|p| (1.0 - p).ln()).collect();
        Ok(PosteriorEngine {
            half_log_1pn: 0.5 * (1.0 + n as f64).ln(),
            stats,
            config,
            log_p,
            log_1mp,
            s,
            ss_log_p,
            ss_log_1mp,
        })
    }

    pub fn stats(&self) -> &SufficientStats {
        &self.stats
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.stats.n()
    }

    pub fn depth(&self) -> u32 {
        self.config.depth
    }

    fn log_1mp_at(&self, level: i32) -> f64 {
        if level >= self.config.depth as i32 {
            0.0
        } else {
            self.log_1mp[level as usize]
        }
    }

    /// Galton-Watson log prior up to the dropped constant-node factor.
    pub fn log_prior(&self, tree: &DyadicTree) -> Result<f64> {
        tree.validate()?;
        let mut total = 0.0;
        for node in tree.set().nodes() {
            total += self.log_p[node.level as usize];
        }
        for node in tree.external_nodes() {
            total += self.log_1mp_at(node.level);
        }
        Ok(total)
    }

    /// Closed-form log marginal likelihood of the tree.
    pub fn log_marginal(&self, tree: &DyadicTree) -> Result<f64> {
        tree.validate()?;
        let n = self.n() as f64;
        let mut total = -(n / 2.0) * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * self.stats.yty()
            - tree.n_internal() as f64 * self.half_log_1pn
            + self.s[0];
        for pos in tree.set().iter() {
            total += self.s[pos];
        }
        Ok(total)
    }

    pub fn log_post_unnorm(&self, tree: &DyadicTree) -> Result<f64> {
        Ok(self.log_prior(tree)? + self.log_marginal(tree)?)
    }

    /// Log posterior ratio for growing one node; depends only on the node.
    pub fn node_log_ratio(&self, node: &NodeId) -> f64 {
        let l = node.level as usize;
        self.log_p[l] - self.log_1mp[l] + 2.0 * self.log_1mp_at(node.level + 1)
            - self.half_log_1pn
            + self.s[node.position()]
    }

    /// `log [post(grow(T, node)) / post(T)]` without rebuilding the tree.
    pub fn log_ratio_grow(&self, tree: &DyadicTree, node: &NodeId) -> Result<f64> {
        if node.level < 0 || tree.is_internal(node) || node.level >= self.depth() as i32 {
            return Err(Error::Edit(format!("cannot grow {node}")));
        }
        Ok(self.node_log_ratio(node))
    }

    /// `log [post(prune(T, node)) / post(T)]`.
    pub fn log_ratio_prune(&self, tree: &DyadicTree, node: &NodeId) -> Result<f64> {
        if node.level < 0 || !tree.is_internal(node) {
            return Err(Error::Edit(format!("cannot prune {node}")));
        }
        Ok(-self.node_log_ratio(node))
    }

    /// Ratio for adding a whole twig: additive over its nodes.
    pub fn log_ratio_twig(&self, twig: &Twig) -> f64 {
        twig.nodes().iter().map(|n| self.node_log_ratio(n)).sum()
    }

    /// Residual sum of squares `Y'(I - P_T/n)Y` of the tree's projection,
    /// computed from sufficient statistics.
    pub fn residual(&self, tree: &DyadicTree) -> f64 {
        self.stats
            .residual_after(std::iter::once(0).chain(tree.set().iter()))
    }

    /// Spike-and-slab flip ratio for toggling wavelet position `pos` in the
    /// free inclusion vector (constant coefficient always active).
    pub fn ss_log_ratio(&self, indicator: &NodeSet, pos: usize) -> f64 {
        let level = NodeId::from_position(pos).level as usize;
        let add = self.ss_log_p[level] - self.ss_log_1mp[level] - self.half_log_1pn + self.s[pos];
        if indicator.contains(pos) {
            -add
        } else {
            add
        }
    }

    /// Unnormalized log posterior of a free inclusion vector.
    pub fn ss_log_post_unnorm(&self, indicator: &NodeSet) -> f64 {
        let n = self.n() as f64;
        let mut total = -(n / 2.0) * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * self.stats.yty()
            - self.half_log_1pn
            + self.s[0];
        for l in 0..self.depth() {
            // All 2^l positions at the level contribute either way.
            total += (1i64 << l) as f64 * self.ss_log_1mp[l as usize];
        }
        for pos in indicator.iter() {
            let level = NodeId::from_position(pos).level as usize;
            total += self.ss_log_p[level] - self.ss_log_1mp[level] - self.half_log_1pn + self.s[pos];
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar::{haar_inner_products, generate_dataset, RegularDesign, SignalSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn node(l: i32, k: u32) -> NodeId {
        NodeId::new(l, k).unwrap()
    }

    fn engine(n: usize, depth: u32, y: &[f64]) -> PosteriorEngine {
        let design = RegularDesign::from_n(n).unwrap();
        let stats = haar_inner_products(y, &design).unwrap();
        let config = ModelConfig::with_flat_split_prob(0.1, depth, n).unwrap();
        PosteriorEngine::new(stats, config).unwrap()
    }

    fn random_y(n: usize, seed: u64) -> Vec<f64> {
        let design = RegularDesign::from_n(n).unwrap();
        let spec = SignalSpec::uniform([node(1, 0)], 2.0, 1.0, seed);
        generate_dataset(&spec, &design).unwrap()
    }

    #[test]
    fn null_tree_prior_is_single_stop_factor() {
        let eng = engine(16, 2, &vec![0.0; 16]);
        let expect = (1.0 - 0.1f64).ln();
        assert_abs_diff_eq!(eng.log_prior(&DyadicTree::null(2)).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn full_tree_prior_is_pure_split_product() {
        // Externals of the full tree all sit at the cap, contributing nothing.
        let depth = 3;
        let eng = engine(16, depth, &vec![0.0; 16]);
        let expect: f64 = (0..depth).map(|l| (1 << l) as f64 * 0.1f64.ln()).sum();
        assert_abs_diff_eq!(
            eng.log_prior(&DyadicTree::full(depth)).unwrap(),
            expect,
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_data_marginal_is_pure_dimension_penalty() {
        let n = 16usize;
        let eng = engine(n, 2, &vec![0.0; n]);
        let base = -(n as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln();
        let t = DyadicTree::null(2).grow(&node(0, 0)).unwrap();
        let expect = base - (t.n_internal() as f64 / 2.0) * (1.0 + n as f64).ln();
        assert_abs_diff_eq!(eng.log_marginal(&t).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn growing_a_silent_node_costs_exactly_the_dimension_penalty() {
        // Signal on (1,0) only: (1,1) has w = 0.
        let design = RegularDesign::from_n(16).unwrap();
        let spec = SignalSpec::uniform([node(1, 0)], 2.0, 0.0, 0);
        let y = generate_dataset(&spec, &design).unwrap();
        let eng = engine(16, 2, &y);
        let t = DyadicTree::null(2).grow(&node(0, 0)).unwrap();
        let silent = node(1, 1);
        let penalty = -0.5 * (17f64).ln();
        let got = eng.log_marginal(&t.grow(&silent).unwrap()).unwrap()
            - eng.log_marginal(&t).unwrap();
        assert_abs_diff_eq!(got, penalty, epsilon = 1e-12);
    }

    /// Dense-algebra marginal: density of Y under N(0, I + X_T X_T'), the
    /// unit-information prior marginal, evaluated with explicit matrices.
    fn dense_log_marginal(y: &[f64], tree: &DyadicTree, design: &RegularDesign) -> f64 {
        let n = design.n();
        let cols: Vec<Vec<f64>> = tree
            .internal_nodes()
            .iter()
            .map(|node| design.column(node).unwrap())
            .collect();
        let mut cov = DMatrix::<f64>::identity(n, n);
        for col in &cols {
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] += col[i] * col[j];
                }
            }
        }
        let chol = cov.cholesky().unwrap();
        let yv = DVector::from_column_slice(y);
        let solved = chol.solve(&yv);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        -(n as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * log_det
            - 0.5 * yv.dot(&solved)
    }

    #[test]
    fn marginal_matches_dense_algebra_on_all_small_trees() {
        let n = 16usize;
        let design = RegularDesign::from_n(n).unwrap();
        let y = random_y(n, 3);
        let eng = engine(n, 3, &y);
        let trees = crate::tree::enumerate_trees(3).unwrap();
        assert_eq!(trees.len(), 26);
        for t in &trees {
            let fast = eng.log_marginal(t).unwrap();
            let dense = dense_log_marginal(&y, t, &design);
            assert_abs_diff_eq!(fast, dense, epsilon = 1e-9);
        }
    }

    #[test]
    fn incremental_ratios_match_full_recomputation() {
        let n = 512usize;
        let y = random_y(n, 11);
        let eng = engine(n, 6, &y);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tree = DyadicTree::null(6);
        let mut checked = 0usize;
        while checked < 10_000 {
            let grow_targets: Vec<NodeId> = (1..(1usize << 6))
                .map(NodeId::from_position)
                .filter(|nd| !tree.is_internal(nd))
                .collect();
            let choice = rng.gen_range(0..3);
            if choice == 0 && !tree.is_null() {
                let pre = tree.preterminal_nodes();
                let nd = pre[rng.gen_range(0..pre.len())];
                let next = tree.prune(&nd).unwrap();
                let fast = eng.log_ratio_prune(&tree, &nd).unwrap();
                let slow = eng.log_post_unnorm(&next).unwrap() - eng.log_post_unnorm(&tree).unwrap();
                assert_abs_diff_eq!(fast, slow, epsilon = 1e-9);
                tree = next;
            } else if choice == 1 && !grow_targets.is_empty() {
                let nd = grow_targets[rng.gen_range(0..grow_targets.len())];
                let (next, twig) = tree.grow_twig(&nd).unwrap();
                let fast = eng.log_ratio_twig(&twig);
                let slow = eng.log_post_unnorm(&next).unwrap() - eng.log_post_unnorm(&tree).unwrap();
                assert_abs_diff_eq!(fast, slow, epsilon = 1e-9);
                tree = next;
            } else {
                let growable = tree.growable_external_nodes();
                if growable.is_empty() {
                    continue;
                }
                let nd = growable[rng.gen_range(0..growable.len())];
                let next = tree.grow(&nd).unwrap();
                let fast = eng.log_ratio_grow(&tree, &nd).unwrap();
                let slow = eng.log_post_unnorm(&next).unwrap() - eng.log_post_unnorm(&tree).unwrap();
                assert_abs_diff_eq!(fast, slow, epsilon = 1e-9);
                tree = next;
            }
            checked += 1;
            if tree.set().len() > 40 {
                tree = DyadicTree::null(6);
            }
        }
    }

    #[test]
    fn grow_order_does_not_change_total_ratio() {
        let y = random_y(64, 21);
        let eng = engine(64, 4, &y);
        let nodes = [node(0, 0), node(1, 1), node(2, 2), node(1, 0)];
        let forward: f64 = nodes.iter().map(|n| eng.node_log_ratio(n)).sum();
        let backward: f64 = nodes.iter().rev().map(|n| eng.node_log_ratio(n)).sum();
        assert_abs_diff_eq!(forward, backward, epsilon = 1e-12);
    }

    #[test]
    fn zero_data_posterior_shrinks_under_growth() {
        let eng = engine(64, 4, &vec![0.0; 64]);
        let mut tree = DyadicTree::null(4);
        let mut last = eng.log_post_unnorm(&tree).unwrap();
        for nd in [node(0, 0), node(1, 0), node(2, 1), node(1, 1)] {
            tree = tree.grow(&nd).unwrap();
            let cur = eng.log_post_unnorm(&tree).unwrap();
            assert!(cur < last, "growth should cost posterior mass with Y = 0");
            last = cur;
        }
    }

    #[test]
    fn ss_double_flip_cancels_and_matches_recompute() {
        let y = random_y(16, 31);
        let eng = engine(16, 3, &y);
        let mut ind = NodeSet::empty(3);
        ind.insert(node(1, 0).position());
        for pos in 1..8usize {
            let fwd = eng.ss_log_ratio(&ind, pos);
            let mut flipped = ind.clone();
            if flipped.contains(pos) {
                flipped.remove(pos);
            } else {
                flipped.insert(pos);
            }
            let slow = eng.ss_log_post_unnorm(&flipped) - eng.ss_log_post_unnorm(&ind);
            assert_abs_diff_eq!(fwd, slow, epsilon = 1e-10);
            let back = eng.ss_log_ratio(&flipped, pos);
            assert_abs_diff_eq!(fwd + back, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ss_schedule_value_at_level_zero() {
        let n = 512usize;
        let probs = ss_schedule_powers_of_six(n, 3);
        assert_abs_diff_eq!(probs[0], 0.01 * (n as f64).powf(0.25), epsilon = 1e-12);
        assert_abs_diff_eq!(probs[1], probs[0] / 6.0, epsilon = 1e-12);
        let sqrt6 = ss_schedule_sqrt_six(n, 3);
        assert_abs_diff_eq!(sqrt6[2], probs[0] / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn prior_ratio_matches_level_formula() {
        let y = random_y(16, 41);
        let eng = engine(16, 3, &y);
        let nd = node(1, 0);
        let p = 0.1f64;
        let prior_part = p.ln() - (1.0 - p).ln() + 2.0 * (1.0 - p).ln();
        let s = eng.stats().w(&nd).powi(2) / (2.0 * 17.0);
        let expect = prior_part - 0.5 * 17f64.ln() + s;
        assert_abs_diff_eq!(eng.node_log_ratio(&nd), expect, epsilon = 1e-12);
    }
}
