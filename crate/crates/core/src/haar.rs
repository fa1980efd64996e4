//! Regular-grid Haar wavelet machinery: the fast pyramid transform of inner
//! products, step-function signal synthesis, synthetic data generation and
//! count-data ingestion.
//!
//! The design lives on the implicit grid `x_i = i/n` with `n = 2^(Lmax+1)`.
//! The column for wavelet node `(l, k)` takes the value `+2^(l/2)` on the
//! first half of its dyadic block and `-2^(l/2)` on the second half, so every
//! column has squared norm exactly `n` and distinct columns are orthogonal.

use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::NodeId;

/// The regular dyadic design with `n = 2^(lmax+1)` grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegularDesign {
    n: usize,
    lmax: u32,
}

impl RegularDesign {
    pub fn new(lmax: u32) -> Result<Self> {
        if lmax < 1 {
            return Err(Error::Design(format!("lmax must be >= 1, got {lmax}")));
        }
        Ok(RegularDesign {
            n: 1usize << (lmax + 1),
            lmax,
        })
    }

    pub fn from_n(n: usize) -> Result<Self> {
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::Design(format!(
                "sample size must be a power of two >= 4, got {n}"
            )));
        }
        Ok(RegularDesign {
            n,
            lmax: n.trailing_zeros() - 1,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lmax(&self) -> u32 {
        self.lmax
    }

    /// The evaluated design column for a node, squared norm `n`.
    pub fn column(&self, node: &NodeId) -> Result<Vec<f64>> {
        if node.level == -1 {
            return Ok(vec![1.0; self.n]);
        }
        if node.level > self.lmax as i32 {
            return Err(Error::Design(format!(
                "node {node} beyond resolution lmax={}",
                self.lmax
            )));
        }
        let mut col = vec![0.0; self.n];
        let block = self.n >> node.level;
        let start = node.index as usize * block;
        let amp = (2f64).powf(node.level as f64 / 2.0);
        for x in &mut col[start..start + block / 2] {
            *x = amp;
        }
        for x in &mut col[start + block / 2..start + block] {
            *x = -amp;
        }
        Ok(col)
    }
}

/// Precomputed inner products `w_lk = X_lk' Y` over the full Haar system,
/// plus `Y'Y`. These determine the marginal likelihood of every tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    /// `w[0]` is the constant node's product; `w[2^l + k]` is node `(l, k)`.
    w: Vec<f64>,
    yty: f64,
    n: usize,
}

impl SufficientStats {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn yty(&self) -> f64 {
        self.yty
    }

    /// Inner product for a node; positions follow `NodeId::position`, the
    /// constant node sits at index 0.
    pub fn w(&self, node: &NodeId) -> f64 {
        if node.level == -1 {
            self.w[0]
        } else {
            self.w[node.position()]
        }
    }

    pub fn w_at(&self, pos: usize) -> f64 {
        self.w[pos]
    }

    /// `yty - (1/n) * sum of w^2` — zero for the full system (Parseval).
    pub fn residual_after(&self, positions: impl Iterator<Item = usize>) -> f64 {
        let explained: f64 = positions.map(|p| self.w[p] * self.w[p]).sum::<f64>() / self.n as f64;
        self.yty - explained
    }
}

/// Computes all wavelet inner products in O(n) by pairwise block sums.
pub fn haar_inner_products(y: &[f64], design: &RegularDesign) -> Result<SufficientStats> {
    let n = design.n();
    if y.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: y.len(),
        });
    }
    let yty: f64 = y.iter().map(|v| v * v).sum();
    let mut w = vec![0.0; n];
    let mut sums = y.to_vec();
    for level in (0..=design.lmax() as i32).rev() {
        let blocks = 1usize << level;
        let amp = (2f64).powf(level as f64 / 2.0);
        for k in 0..blocks {
            w[blocks + k] = amp * (sums[2 * k] - sums[2 * k + 1]);
            sums[k] = sums[2 * k] + sums[2 * k + 1];
        }
        sums.truncate(blocks);
    }
    w[0] = sums[0];
    let stats = SufficientStats { w, yty, n };
    // The full system is an orthogonal basis, so the residual must vanish.
    let residual = stats.residual_after(0..n);
    if residual.abs() > 1e-10 * stats.yty.max(1.0) {
        return Err(Error::Numerical(format!(
            "energy identity violated: residual {residual:e}"
        )));
    }
    Ok(stats)
}

/// A sparse wavelet signal plus noise level and RNG seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    /// Signal support with coefficient values; levels must stay below lmax.
    pub betas: Vec<(NodeId, f64)>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SignalSpec {
    /// Equal-coefficient support, the common experiment shape.
    pub fn uniform(nodes: impl IntoIterator<Item = NodeId>, beta: f64, noise_sd: f64, seed: u64) -> Self {
        SignalSpec {
            betas: nodes.into_iter().map(|n| (n, beta)).collect(),
            noise_sd,
            seed,
        }
    }
}

/// Evaluates `f0(x_i) = sum beta_lk psi_lk(x_i)` on the grid.
pub fn synthesize_signal(spec: &SignalSpec, design: &RegularDesign) -> Result<Vec<f64>> {
    let mut f0 = vec![0.0; design.n()];
    for (node, beta) in &spec.betas {
        if node.level >= design.lmax() as i32 {
            return Err(Error::SignalSpec(format!(
                "signal node {node} at or above resolution lmax={}",
                design.lmax()
            )));
        }
        if !beta.is_finite() {
            return Err(Error::SignalSpec(format!("non-finite coefficient at {node}")));
        }
        let col = design.column(node)?;
        for (f, c) in f0.iter_mut().zip(col) {
            *f += beta * c;
        }
    }
    Ok(f0)
}

/// Draws `Y = f0 + noise_sd * eps` with a deterministic per-seed stream.
pub fn generate_dataset(spec: &SignalSpec, design: &RegularDesign) -> Result<Vec<f64>> {
    if spec.noise_sd < 0.0 {
        return Err(Error::SignalSpec(format!(
            "noise sd must be nonnegative, got {}",
            spec.noise_sd
        )));
    }
    let mut y = synthesize_signal(spec, design)?;
    if spec.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in &mut y {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_sd * eps;
        }
    }
    Ok(y)
}

/// Expected line count of a call-arrival count file (`n = 2^11`).
pub const COUNTS_LEN: usize = 2048;

/// A variance-stabilized count dataset: `y_i = sqrt(count_i + 1/4)` with the
/// accompanying noise model `sd = 1/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountData {
    pub y: Vec<f64>,
    pub noise_sd: f64,
}

/// Reads exactly 2048 nonnegative integer counts (one per line, or
/// comma-separated within lines) and applies the root transform.
pub fn ingest_counts<R: BufRead>(source: R) -> Result<CountData> {
    let mut y = Vec::with_capacity(COUNTS_LEN);
    for (line_no, line) in source.lines().enumerate() {
        let line = line?;
        for token in line.split(',') {
            let token = token.trim();
            if token.is_empty() {
                continue;
            }
            let count: i64 = token.parse().map_err(|_| Error::Ingest {
                line: line_no + 1,
                msg: format!("unparseable count {token:?}"),
            })?;
            if count < 0 {
                return Err(Error::Ingest {
                    line: line_no + 1,
                    msg: format!("negative count {count}"),
                });
            }
            if y.len() == COUNTS_LEN {
                return Err(Error::Ingest {
                    line: line_no + 1,
                    msg: format!("expected {COUNTS_LEN} counts, got more"),
                });
            }
            y.push((count as f64 + 0.25).sqrt());
        }
    }
    if y.len() != COUNTS_LEN {
        return Err(Error::Ingest {
            line: 0,
            msg: format!("expected {COUNTS_LEN} counts, got {}", y.len()),
        });
    }
    Ok(CountData { y, noise_sd: 0.5 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn naive_stats(y: &[f64], design: &RegularDesign) -> SufficientStats {
        let n = design.n();
        let mut w = vec![0.0; n];
        w[0] = y.iter().sum();
        for pos in 1..n {
            let node = NodeId::from_position(pos);
            let col = design.column(&node).unwrap();
            w[pos] = col.iter().zip(y).map(|(c, v)| c * v).sum();
        }
        SufficientStats {
            w,
            yty: y.iter().map(|v| v * v).sum(),
            n,
        }
    }

    #[test]
    fn constant_signal_hits_only_constant_column() {
        let design = RegularDesign::from_n(4).unwrap();
        let stats = haar_inner_products(&[1.0, 1.0, 1.0, 1.0], &design).unwrap();
        assert_abs_diff_eq!(stats.w(&NodeId::ROOT), 4.0);
        for pos in 1..4 {
            assert_abs_diff_eq!(stats.w_at(pos), 0.0);
        }
        assert_abs_diff_eq!(stats.yty(), 4.0);
    }

    #[test]
    fn unit_impulse_transform() {
        let design = RegularDesign::from_n(4).unwrap();
        let stats = haar_inner_products(&[1.0, 0.0, 0.0, 0.0], &design).unwrap();
        assert_abs_diff_eq!(stats.w(&NodeId::ROOT), 1.0);
        assert_abs_diff_eq!(stats.w(&NodeId::new(0, 0).unwrap()), 1.0);
        assert_abs_diff_eq!(stats.w(&NodeId::new(1, 0).unwrap()), 2f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(stats.w(&NodeId::new(1, 1).unwrap()), 0.0);
    }

    #[test]
    fn fast_transform_matches_naive_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &n in &[8usize, 64, 256] {
            let design = RegularDesign::from_n(n).unwrap();
            for _ in 0..20 {
                let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let fast = haar_inner_products(&y, &design).unwrap();
                let naive = naive_stats(&y, &design);
                for pos in 0..n {
                    assert_abs_diff_eq!(fast.w_at(pos), naive.w_at(pos), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn columns_are_orthogonal_with_norm_n() {
        for &n in &[4usize, 16, 64] {
            let design = RegularDesign::from_n(n).unwrap();
            let cols: Vec<Vec<f64>> = std::iter::once(NodeId::ROOT)
                .chain((1..n).map(NodeId::from_position))
                .map(|node| design.column(&node).unwrap())
                .collect();
            for (i, a) in cols.iter().enumerate() {
                for (j, b) in cols.iter().enumerate() {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let expect = if i == j { n as f64 } else { 0.0 };
                    assert_abs_diff_eq!(dot, expect, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn synthesis_round_trips_through_transform() {
        let design = RegularDesign::from_n(512).unwrap();
        let nodes = [NodeId::new(2, 0).unwrap(), NodeId::new(3, 5).unwrap()];
        let spec = SignalSpec::uniform(nodes, 2.0, 0.0, 1);
        let f0 = synthesize_signal(&spec, &design).unwrap();
        let stats = haar_inner_products(&f0, &design).unwrap();
        for pos in 1..design.n() {
            let node = NodeId::from_position(pos);
            let expect = if nodes.contains(&node) { 2.0 } else { 0.0 };
            assert_abs_diff_eq!(stats.w_at(pos) / design.n() as f64, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_support_is_zero_signal() {
        let design = RegularDesign::from_n(8).unwrap();
        let spec = SignalSpec::uniform([], 2.0, 0.0, 0);
        assert_eq!(synthesize_signal(&spec, &design).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn out_of_range_signal_node_rejected() {
        let design = RegularDesign::from_n(8).unwrap(); // lmax = 2
        let spec = SignalSpec::uniform([NodeId::new(2, 0).unwrap()], 1.0, 0.0, 0);
        assert!(synthesize_signal(&spec, &design).is_err());
    }

    #[test]
    fn noiseless_dataset_equals_signal_and_seeds_are_deterministic() {
        let design = RegularDesign::from_n(128).unwrap();
        let mut spec = SignalSpec::uniform([NodeId::new(4, 0).unwrap()], 2.0, 0.0, 9);
        let f0 = synthesize_signal(&spec, &design).unwrap();
        assert_eq!(generate_dataset(&spec, &design).unwrap(), f0);
        spec.noise_sd = 1.0;
        let a = generate_dataset(&spec, &design).unwrap();
        let b = generate_dataset(&spec, &design).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, f0);
    }

    #[test]
    fn ingest_zero_counts() {
        let text = "0\n".repeat(COUNTS_LEN);
        let data = ingest_counts(text.as_bytes()).unwrap();
        assert!(data.y.iter().all(|&v| v == 0.5));
        assert_eq!(data.noise_sd, 0.5);
    }

    #[test]
    fn ingest_applies_root_transform() {
        let mut text = String::from("4\n");
        text.push_str(&"0\n".repeat(COUNTS_LEN - 1));
        let data = ingest_counts(text.as_bytes()).unwrap();
        assert_abs_diff_eq!(data.y[0], 4.25f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn ingest_rejects_short_negative_and_garbled_input() {
        let short = "0\n".repeat(COUNTS_LEN - 1);
        let err = ingest_counts(short.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("expected 2048 counts"));

        let mut neg = String::from("-1\n");
        neg.push_str(&"0\n".repeat(COUNTS_LEN - 1));
        assert!(ingest_counts(neg.as_bytes()).is_err());

        let mut garbled = String::from("3\nx\n");
        garbled.push_str(&"0\n".repeat(COUNTS_LEN - 2));
        let err = ingest_counts(garbled.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn ingest_accepts_comma_separated_lines() {
        let line = format!("{}\n", vec!["1"; 512].join(","));
        let text = line.repeat(4);
        let data = ingest_counts(text.as_bytes()).unwrap();
        assert_eq!(data.y.len(), COUNTS_LEN);
        assert_abs_diff_eq!(data.y[100], 1.25f64.sqrt(), epsilon = 1e-12);
    }
}
