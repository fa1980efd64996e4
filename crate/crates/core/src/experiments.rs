//! Canned experiment harness: hitting-time sweeps over signal depth,
//! sample-size sweeps over simulated signal cases, and the call-center
//! count analysis, with deterministic seeding and CSV/JSON artifacts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    all_wavelet_positions, build_report, mse_trace, spanning_set, DiagnosticsReport,
    HitMode, hitting_time_recorded, IndicatorPanel, DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::haar::{haar_inner_products, RegularDesign, SignalSpec};
use crate::kernels::{run_chains, InitStrategy, KernelKind, KernelSpec, Trace};
use crate::posterior::{ModelConfig, PosteriorEngine};
use crate::tree::NodeId;

/// Identifier of a canned study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseId {
    /// Single deep signal node (j, 0), sweeping j in 1..=4.
    Example1,
    /// Connected full-tree signal of internal depth j, sweeping j in 1..=4.
    Example2,
    /// Full-tree signal of internal depth 3, sweeping sample size.
    Case1,
    /// Lone signal node (4, 0), sweeping sample size.
    Case2,
    /// Scattered seven-node signal, sweeping sample size.
    Case3,
    /// Square-root-transformed arrival counts; no ground truth.
    CallCenter,
}

impl CaseId {
    pub const ALL: [CaseId; 6] = [
        CaseId::Example1,
        CaseId::Example2,
        CaseId::Case1,
        CaseId::Case2,
        CaseId::Case3,
        CaseId::CallCenter,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CaseId::Example1 => "example1",
            CaseId::Example2 => "example2",
            CaseId::Case1 => "case1",
            CaseId::Case2 => "case2",
            CaseId::Case3 => "case3",
            CaseId::CallCenter => "call_center",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        CaseId::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown case '{name}'")))
    }
}

/// How split probabilities are parameterized for a plan point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitProb {
    /// One probability shared by every level below the cap.
    Flat(f64),
    /// The `alpha * n^-c` schedule.
    PowerLaw { c: f64, alpha: f64 },
}

impl SplitProb {
    pub fn config(&self, depth: u32, n: usize) -> Result<ModelConfig> {
        match *self {
            SplitProb::Flat(p) => ModelConfig::with_flat_split_prob(p, depth, n),
            SplitProb::PowerLaw { c, alpha } => ModelConfig::new(c, alpha, depth, n),
        }
    }
}

/// One fully resolved dataset-and-model configuration inside a plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanPoint {
    /// Short token naming the point, e.g. `n512_j3`; used in filenames.
    pub label: String,
    pub n: usize,
    /// Depth cap L of the tree space.
    pub depth: u32,
    pub split: SplitProb,
    /// Signal nodes; empty for real data with no known truth.
    pub signal: Vec<NodeId>,
    pub beta: f64,
    pub noise_sd: f64,
    /// Seed for data generation at this point.
    pub data_seed: u64,
}

/// A resolved experiment: the cross product of plan points and kernels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub case: CaseId,
    pub points: Vec<PlanPoint>,
    pub kernels: Vec<KernelKind>,
    pub chains: usize,
    pub steps: u64,
    pub record_every: u64,
    pub seed: u64,
    /// Maximum grow count for random-tree initialization; 0 starts every
    /// chain at the null tree.
    pub init_grows: usize,
}

/// Optional overrides applied on top of a case's defaults.
#[derive(Debug, Clone, Default)]
pub struct PlanOverrides {
    pub ns: Option<Vec<usize>>,
    pub kernels: Option<Vec<KernelKind>>,
    pub chains: Option<usize>,
    pub steps: Option<u64>,
    pub record_every: Option<u64>,
    pub seed: Option<u64>,
    /// Scales chains and steps down for a quick qualitative pass.
    pub fast: bool,
}

/// Signal nodes of the full dyadic tree with internal wavelet levels `0..j`.
pub fn full_tree_signal(j: u32) -> Vec<NodeId> {
    (0..j as i32)
        .flat_map(|l| (0..1u32 << l).map(move |k| NodeId::new(l, k).unwrap()))
        .collect()
}

fn node(l: i32, k: u32) -> NodeId {
    NodeId::new(l, k).unwrap()
}

/// Default sample-size sweep for the simulated signal cases.
const CASE_NS: [usize; 5] = [128, 256, 512, 1024, 2048];

/// Depth cap for the simulated signal cases: deep enough to hold every
/// level-4 signal node as an internal node.
const CASE_DEPTH: u32 = 6;

/// Builds the fully resolved plan for a case, applying overrides last.
pub fn plan_case(case: CaseId, overrides: &PlanOverrides) -> Result<ExperimentPlan> {
    let seed = overrides.seed.unwrap_or(20_240_601);
    let mut plan = match case {
        CaseId::Example1 | CaseId::Example2 => {
            let n = 512;
            let points = (1..=4u32)
                .map(|j| {
                    let signal = match case {
                        CaseId::Example1 => vec![node(j as i32, 0)],
                        _ => full_tree_signal(j),
                    };
                    PlanPoint {
                        label: format!("j{j}"),
                        n,
                        depth: 5,
                        split: SplitProb::Flat(0.1),
                        signal,
                        beta: 2.0,
                        noise_sd: 1.0,
                        data_seed: seed.wrapping_add(j as u64),
                    }
                })
                .collect();
            ExperimentPlan {
                case,
                points,
                kernels: vec![KernelKind::GrowPrune, KernelKind::Twiggy],
                chains: 50,
                steps: 1_000_000,
                record_every: 100,
                seed,
                init_grows: 0,
            }
        }
        CaseId::Case1 | CaseId::Case2 | CaseId::Case3 => {
            let signal = match case {
                CaseId::Case1 => full_tree_signal(3),
                CaseId::Case2 => vec![node(4, 0)],
                _ => vec![
                    node(2, 0),
                    node(2, 3),
                    node(3, 2),
                    node(3, 3),
                    node(3, 4),
                    node(3, 5),
                    node(4, 15),
                ],
            };
            let ns = overrides.ns.clone().unwrap_or_else(|| CASE_NS.to_vec());
            let points = ns
                .iter()
                .map(|&n| {
                    let design = RegularDesign::from_n(n)?;
                    // Flat split probability shrinking with resolution,
                    // capped at its coarse-grid value for small samples.
                    let p = (0.25 / 2f64.powi(design.lmax() as i32 - 6)).min(0.25);
                    Ok(PlanPoint {
                        label: format!("n{n}"),
                        n,
                        depth: CASE_DEPTH.min(design.lmax()),
                        split: SplitProb::Flat(p),
                        signal: signal.clone(),
                        beta: 2.0,
                        noise_sd: 1.0,
                        data_seed: seed.wrapping_add(n as u64),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ExperimentPlan {
                case,
                points,
                kernels: vec![
                    KernelKind::GrowPrune,
                    KernelKind::Twiggy,
                    KernelKind::InformedGrowPrune,
                    KernelKind::InformedTwiggy,
                    KernelKind::SpikeSlab,
                ],
                chains: 10,
                steps: 100_000,
                record_every: 100,
                seed,
                init_grows: (1usize << CASE_DEPTH) / 4,
            }
        }
        CaseId::CallCenter => {
            let n = crate::haar::COUNTS_LEN;
            let design = RegularDesign::from_n(n)?;
            let p = 0.25 / 2f64.powi(design.lmax() as i32 - 6);
            ExperimentPlan {
                case,
                points: vec![PlanPoint {
                    label: format!("n{n}"),
                    n,
                    depth: design.lmax(),
                    split: SplitProb::Flat(p),
                    signal: Vec::new(),
                    beta: 0.0,
                    noise_sd: 0.5,
                    data_seed: seed,
                }],
                kernels: vec![
                    KernelKind::GrowPrune,
                    KernelKind::Twiggy,
                    KernelKind::InformedGrowPrune,
                    KernelKind::InformedTwiggy,
                ],
                chains: 10,
                steps: 100_000,
                record_every: 100,
                seed,
                init_grows: 16,
            }
        }
    };
    if case != CaseId::Case1 && case != CaseId::Case2 && case != CaseId::Case3 {
        if let Some(ns) = &overrides.ns {
            if ns.len() != 1 || ns[0] != plan.points[0].n {
                return Err(Error::Config(format!(
                    "case {} has a fixed sample size {}",
                    case.name(),
                    plan.points[0].n
                )));
            }
        }
    }
    if let Some(kernels) = &overrides.kernels {
        plan.kernels = kernels.clone();
    }
    if let Some(chains) = overrides.chains {
        plan.chains = chains;
    }
    if let Some(steps) = overrides.steps {
        plan.steps = steps;
    }
    if let Some(record_every) = overrides.record_every {
        plan.record_every = record_every;
    }
    if overrides.fast {
        plan.chains = plan.chains.min(5);
        plan.steps = (plan.steps / 20).max(10 * plan.record_every);
    }
    if plan.kernels.is_empty() {
        return Err(Error::Config("plan has no kernels".into()));
    }
    Ok(plan)
}

/// Outcome of one (point, kernel) cell of a plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub case: String,
    pub label: String,
    pub kernel: String,
    pub n: usize,
    pub seed: u64,
    /// Contains-mode hitting time per chain, recorded cadence; absent when
    /// the chain never hit or there is no known truth.
    pub hit_contains: Vec<Option<u64>>,
    /// Standard diagnostics; absent when there is no known truth.
    pub report: Option<DiagnosticsReport>,
    /// Worst sliding-window potential-scale-reduction over time.
    pub bgr_series: Vec<(u64, f64)>,
    /// Final recorded in-sample mean squared residual per chain.
    pub mse_final: Vec<f64>,
    pub accept_rate: f64,
}

/// A completed experiment: resolved plan plus one record per cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bundle {
    pub plan: ExperimentPlan,
    pub records: Vec<RunRecord>,
}

/// Runs every (point, kernel) cell of the plan. `data` supplies observed
/// responses for cases without a generative truth and must match the single
/// point's length; simulated cases must pass `None`. When `out_dir` is
/// given, traces are streamed to
/// `<out_dir>/<case>/<kernel>/trace[_<label>]_<chain>.csv` as cells finish.
pub fn run_plan(
    plan: &ExperimentPlan,
    data: Option<&[f64]>,
    out_dir: Option<&Path>,
) -> Result<Bundle> {
    if data.is_some() != matches!(plan.case, CaseId::CallCenter) {
        return Err(Error::Config(
            "observed data is required for call_center and rejected elsewhere".into(),
        ));
    }
    let multi_point = plan.points.len() > 1;
    let mut records = Vec::new();
    for point in &plan.points {
        let design = RegularDesign::from_n(point.n)?;
        let y = match data {
            Some(values) => {
                if values.len() != point.n {
                    return Err(Error::Shape {
                        expected: point.n,
                        got: values.len(),
                    });
                }
                values.to_vec()
            }
            None => {
                let spec = SignalSpec::uniform(
                    point.signal.iter().copied(),
                    point.beta,
                    point.noise_sd,
                    point.data_seed,
                );
                crate::haar::generate_dataset(&spec, &design)?
            }
        };
        let stats = haar_inner_products(&y, &design)?;
        let config = point.split.config(point.depth, point.n)?;
        let engine = PosteriorEngine::new(stats, config)?;
        let init = if plan.init_grows == 0 {
            InitStrategy::Null
        } else {
            InitStrategy::RandomGrows {
                max: plan.init_grows,
            }
        };
        for &kind in &plan.kernels {
            let base_seed = cell_seed(plan.seed, &point.label, kind);
            let traces = run_chains(
                &engine,
                KernelSpec::new(kind),
                plan.chains,
                plan.steps,
                plan.record_every,
                base_seed,
                &init,
            )?;
            if let Some(dir) = out_dir {
                let kernel_dir = dir.join(plan.case.name()).join(kind.short_name());
                fs::create_dir_all(&kernel_dir)?;
                for trace in &traces {
                    let name = if multi_point {
                        format!("trace_{}_{}.csv", point.label, trace.chain)
                    } else {
                        format!("trace_{}.csv", trace.chain)
                    };
                    fs::write(kernel_dir.join(name), trace.to_csv())?;
                }
            }
            records.push(summarize_cell(plan, point, kind, &engine, &traces)?);
        }
    }
    let bundle = Bundle {
        plan: plan.clone(),
        records,
    };
    if let Some(dir) = out_dir {
        write_bundle(&bundle, dir)?;
    }
    Ok(bundle)
}

/// Seed for a cell, mixing the point label and kernel into the plan seed so
/// no two cells share chain seeds.
fn cell_seed(base: u64, label: &str, kind: KernelKind) -> u64 {
    let mut h = base ^ 0xcbf2_9ce4_8422_2325;
    for b in label.bytes().chain(kind.short_name().bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn summarize_cell(
    plan: &ExperimentPlan,
    point: &PlanPoint,
    kind: KernelKind,
    engine: &PosteriorEngine,
    traces: &[Trace],
) -> Result<RunRecord> {
    let monitored = all_wavelet_positions(point.depth);
    let panel = IndicatorPanel::from_traces(traces, point.depth, DEFAULT_WINDOW)?;
    let bgr_series = panel.worst_bgr_series(&monitored)?;
    let mse_final: Vec<f64> = traces
        .iter()
        .map(|t| *mse_trace(engine, &t.samples).last().unwrap())
        .collect();
    let accept_rate =
        traces.iter().map(Trace::acceptance_rate).sum::<f64>() / traces.len() as f64;
    let (report, hit_contains) = if point.signal.is_empty() {
        (None, Vec::new())
    } else {
        let truth = spanning_set(&point.signal, point.depth)?;
        let hits: Vec<Option<u64>> = traces
            .iter()
            .map(|t| hitting_time_recorded(&t.samples, &truth, HitMode::Contains))
            .collect();
        let report = build_report(
            traces,
            point.depth,
            &truth,
            &monitored,
            DEFAULT_WINDOW,
            (traces[0].samples.len() / 2).max(1),
            1.1,
            plan.steps,
        )?;
        (Some(report), hits)
    };
    Ok(RunRecord {
        case: plan.case.name().to_string(),
        label: point.label.clone(),
        kernel: kind.short_name().to_string(),
        n: point.n,
        seed: plan.seed,
        hit_contains,
        report,
        bgr_series,
        mse_final,
        accept_rate,
    })
}

/// Long-format summary table, one row per cell, plot-ready.
pub fn summarize(bundle: &Bundle) -> String {
    let mut out = String::from(
        "case,label,kernel,n,seed,tau_bgr,hit_contains_median,hit_equals_median,\
         f1,precision,recall,accept_rate,mse_final_median\n",
    );
    for r in &bundle.records {
        let mut mse = r.mse_final.clone();
        let mse_med = if mse.is_empty() {
            f64::NAN
        } else {
            crate::diagnostics::median(&mut mse)
        };
        let (tau, hc, he, f1, pr, rc) = match &r.report {
            Some(rep) => (
                rep.tau_bgr.to_string(),
                rep.hit_contains.to_string(),
                rep.hit_equals.to_string(),
                format!("{:.6}", rep.f1),
                format!("{:.6}", rep.precision),
                format!("{:.6}", rep.recall),
            ),
            None => Default::default(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6}\n",
            r.case, r.label, r.kernel, r.n, r.seed, tau, hc, he, f1, pr, rc,
            r.accept_rate, mse_med
        ));
    }
    out
}

/// Writes `report.json` and `summary.csv` under `<out_dir>/<case>/`.
pub fn write_bundle(bundle: &Bundle, out_dir: &Path) -> Result<()> {
    let case_dir = out_dir.join(bundle.plan.case.name());
    fs::create_dir_all(&case_dir)?;
    let json = serde_json::to_string_pretty(bundle)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    fs::write(case_dir.join("report.json"), json)?;
    fs::write(case_dir.join("summary.csv"), summarize(bundle))?;
    Ok(())
}
