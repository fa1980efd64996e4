//! Convergence and quality measures over completed chain traces: windowed
//! Gelman-Rubin statistics on inclusion indicators, the first time the worst
//! monitored statistic drops below a threshold, hitting times, F1 scores,
//! acceptance rates and mean-squared-error series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haar::{RegularDesign, SufficientStats};
use crate::kernels::{Sample, Trace};
use crate::posterior::PosteriorEngine;
use crate::tree::{NodeId, NodeSet};

/// Default sliding-window length (in recorded samples).
pub const DEFAULT_WINDOW: usize = 100;
/// Default iteration cap used as the "never" sentinel.
pub const TIME_CAP: u64 = 1_000_000;

/// Per-chain inclusion indicators of every monitored wavelet position,
/// stored as prefix counts so any window statistic costs O(1).
pub struct IndicatorPanel {
    /// `prefix[chain][pos][i]` = number of inclusions of `pos` among the
    /// first `i` recorded samples of `chain`.
    prefix: Vec<Vec<Vec<u32>>>,
    pub n_samples: usize,
    pub record_every: u64,
    pub window: usize,
    pub depth: u32,
}

impl IndicatorPanel {
    pub fn from_traces(traces: &[Trace], depth: u32, window: usize) -> Result<Self> {
        if traces.is_empty() || window < 2 {
            return Err(Error::Config("need chains and a window of at least 2".into()));
        }
        let n_samples = traces[0].samples.len();
        let record_every = traces[0].record_every;
        if traces
            .iter()
            .any(|t| t.samples.len() != n_samples || t.record_every != record_every)
        {
            return Err(Error::Config("chains must share cadence and length".into()));
        }
        let n_pos = 1usize << depth;
        let prefix = traces
            .iter()
            .map(|t| {
                let mut per_pos = vec![Vec::with_capacity(n_samples + 1); n_pos];
                for (pos, col) in per_pos.iter_mut().enumerate() {
                    col.push(0u32);
                    for s in &t.samples {
                        let inc = u32::from(pos >= 1 && s.set.contains(pos));
                        col.push(col.last().unwrap() + inc);
                    }
                }
                per_pos
            })
            .collect();
        Ok(IndicatorPanel {
            prefix,
            n_samples,
            record_every,
            window,
            depth,
        })
    }

    pub fn n_chains(&self) -> usize {
        self.prefix.len()
    }

    /// Inclusion count of `pos` in chain `c` over samples `[t - window, t)`.
    fn window_count(&self, c: usize, pos: usize, t: usize) -> u32 {
        self.prefix[c][pos][t] - self.prefix[c][pos][t - self.window]
    }

    /// Windowed Gelman-Rubin statistic of one inclusion indicator using the
    /// last `window` samples ending at sample count `t`.
    ///
    /// Degenerate conventions: zero within- and between-chain variance gives
    /// 1 (perfect agreement); zero within- with positive between-chain
    /// variance gives +inf (frozen disagreement).
    pub fn local_bgr(&self, pos: usize, t: usize) -> Result<f64> {
        if t < self.window || t > self.n_samples {
            return Err(Error::Config(format!(
                "window end {t} outside [{}, {}]",
                self.window, self.n_samples
            )));
        }
        let k = self.n_chains() as f64;
        let l = self.window as f64;
        // Binary observations: the windowed sum determines mean and variance.
        let means: Vec<f64> = (0..self.n_chains())
            .map(|c| self.window_count(c, pos, t) as f64 / l)
            .collect();
        let w: f64 = means
            .iter()
            .map(|m| (l * m - l * m * m) / (l - 1.0))
            .sum::<f64>()
            / k;
        let grand = means.iter().sum::<f64>() / k;
        let b: f64 = l / (k - 1.0) * means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
        if w == 0.0 {
            return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
        }
        Ok(((l - 1.0) / l * w + b / l) / w)
    }

    /// The series `(iteration, worst monitored BGR)` over all computable
    /// window ends.
    pub fn worst_bgr_series(&self, monitored: &[usize]) -> Result<Vec<(u64, f64)>> {
        (self.window..=self.n_samples)
            .map(|t| {
                let worst = monitored
                    .iter()
                    .map(|&pos| self.local_bgr(pos, t))
                    .try_fold(f64::NEG_INFINITY, |acc, r| r.map(|v| acc.max(v)))?;
                Ok(((t - 1) as u64 * self.record_every, worst))
            })
            .collect()
    }

    /// First iteration (on the recording cadence) at which every monitored
    /// indicator's BGR is at most `alpha`; `cap` if that never happens.
    pub fn bgr_alpha_time(&self, monitored: &[usize], alpha: f64, cap: u64) -> Result<u64> {
        if monitored.is_empty() {
            return Err(Error::Config("need at least one monitored position".into()));
        }
        for t in self.window..=self.n_samples {
            let step = (t - 1) as u64 * self.record_every;
            if step > cap {
                break;
            }
            let ok = monitored
                .iter()
                .try_fold(true, |acc, &pos| self.local_bgr(pos, t).map(|v| acc && v <= alpha))?;
            if ok {
                return Ok(step);
            }
        }
        Ok(cap)
    }
}

/// Which event a hitting time waits for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HitMode {
    /// First time the state contains every target node.
    Contains,
    /// First time the state's wavelet nodes equal the target set exactly.
    Equals,
}

fn hits(set: &NodeSet, target: &NodeSet, mode: HitMode) -> bool {
    match mode {
        HitMode::Contains => target.is_subset_of(set),
        HitMode::Equals => set == target,
    }
}

/// First recorded iteration whose state hits the target, if any.
pub fn hitting_time_recorded(samples: &[Sample], target: &NodeSet, mode: HitMode) -> Option<u64> {
    samples
        .iter()
        .find(|s| hits(&s.set, target, mode))
        .map(|s| s.step)
}

/// Averaged precision/recall over a tail of states, and their harmonic mean.
/// The constant node is excluded; an empty state scores zero precision
/// against a nonempty truth.
pub fn f1_score<'a>(
    tail: impl IntoIterator<Item = &'a NodeSet>,
    truth: &NodeSet,
) -> Result<(f64, f64, f64)> {
    if truth.is_empty() {
        return Err(Error::Config("truth set must be nonempty".into()));
    }
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut count = 0usize;
    for set in tail {
        let tp = set.intersection_len(truth) as f64;
        let selected = set.len() as f64;
        precision_sum += if selected == 0.0 { 0.0 } else { tp / selected };
        recall_sum += tp / truth.len() as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("empty trace tail".into()));
    }
    let precision = precision_sum / count as f64;
    let recall = recall_sum / count as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((f1, precision, recall))
}

/// Fitted step function of a state: inverse fast transform of the shrunken
/// coefficients `w_lk / n` over the active nodes (constant always active).
pub fn fitted_values(stats: &SufficientStats, set: &NodeSet, design: &RegularDesign) -> Vec<f64> {
    let n = design.n();
    let mut values = vec![stats.w_at(0) / n as f64];
    let mut level: i32 = 0;
    while values.len() < n {
        let blocks = values.len();
        let amp = (2f64).powi(level) .sqrt();
        let mut next = Vec::with_capacity(2 * blocks);
        for (k, &v) in values.iter().enumerate() {
            let pos = blocks + k;
            let detail = if pos < set.nbits() && set.contains(pos) {
                amp * stats.w_at(pos) / n as f64
            } else {
                0.0
            };
            next.push(v + detail);
            next.push(v - detail);
        }
        values = next;
        level += 1;
    }
    values
}

/// Mean squared distance from the data to each recorded state's fitted
/// function, computed from sufficient statistics.
pub fn mse_trace(engine: &PosteriorEngine, samples: &[Sample]) -> Vec<f64> {
    let n = engine.n() as f64;
    samples
        .iter()
        .map(|s| {
            engine
                .stats()
                .residual_after(std::iter::once(0).chain(s.set.iter()))
                / n
        })
        .collect()
}

/// Summary bundle for one kernel's multi-chain run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub tau_bgr: u64,
    /// Median over chains; the cap stands in for "never".
    pub hit_contains: f64,
    pub hit_equals: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accept_rate: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// Builds the standard report: BGR time over the monitored positions,
/// median hitting times against the truth, F1 over the last `tail` recorded
/// states of every chain, and the mean acceptance rate.
pub fn build_report(
    traces: &[Trace],
    depth: u32,
    truth: &NodeSet,
    monitored: &[usize],
    window: usize,
    tail: usize,
    alpha: f64,
    cap: u64,
) -> Result<DiagnosticsReport> {
    let panel = IndicatorPanel::from_traces(traces, depth, window)?;
    let tau_bgr = panel.bgr_alpha_time(monitored, alpha, cap)?;
    let mut hc: Vec<f64> = traces
        .iter()
        .map(|t| {
            hitting_time_recorded(&t.samples, truth, HitMode::Contains)
                .map_or(cap as f64, |v| v as f64)
        })
        .collect();
    let mut he: Vec<f64> = traces
        .iter()
        .map(|t| {
            hitting_time_recorded(&t.samples, truth, HitMode::Equals)
                .map_or(cap as f64, |v| v as f64)
        })
        .collect();
    let tails: Vec<&NodeSet> = traces
        .iter()
        .flat_map(|t| t.samples.iter().rev().take(tail).map(|s| &s.set))
        .collect();
    let (f1, precision, recall) = f1_score(tails, truth)?;
    let accept_rate =
        traces.iter().map(Trace::acceptance_rate).sum::<f64>() / traces.len() as f64;
    Ok(DiagnosticsReport {
        tau_bgr,
        hit_contains: median(&mut hc),
        hit_equals: median(&mut he),
        f1,
        precision,
        recall,
        accept_rate,
    })
}

/// Positions monitored by default: every wavelet node below the cap.
pub fn all_wavelet_positions(depth: u32) -> Vec<usize> {
    (1..(1usize << depth)).collect()
}

/// The smallest valid tree's node set containing the given signal nodes.
pub fn spanning_set(signal: &[NodeId], depth: u32) -> Result<NodeSet> {
    let mut set = NodeSet::empty(depth);
    for node in signal {
        if node.level < 0 {
            continue;
        }
        if node.level >= depth as i32 {
            return Err(Error::Node(format!("signal node {node} beyond depth {depth}")));
        }
        let mut cur = *node;
        loop {
            set.insert(cur.position());
            match cur.parent() {
                Some(p) if p.level >= 0 => cur = p,
                _ => break,
            }
        }
    }
    Ok(set)
}
