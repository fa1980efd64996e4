//! Command-line front end: data generation, sampling runs, exact-chain
//! audits, and canned experiment reproduction. Every subcommand is
//! deterministic given its full flag set.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::diagnostics::{all_wavelet_positions, IndicatorPanel, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::experiments::{
    full_tree_signal, plan_case, run_plan, CaseId, PlanOverrides, SplitProb,
};
use crate::haar::{generate_dataset, ingest_counts, RegularDesign, SignalSpec};
use crate::kernels::{run_chains, InitStrategy, KernelKind, KernelSpec, Trace};
use crate::oracle;
use crate::posterior::PosteriorEngine;
use crate::tree::DyadicTree;

/// Exit code for usage errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for validation and size-guard errors.
pub const EXIT_VALIDATION: i32 = 3;
/// Exit code for I/O errors.
pub const EXIT_IO: i32 = 4;

#[derive(Parser)]
#[command(
    name = "cartmix",
    about = "Dyadic-tree regression samplers with exact mixing audits",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset CSV, either simulated from a case's signal or by
    /// the variance-stabilizing sqrt(N + 1/4) transform of counts.
    GenData(GenDataArgs),
    /// Run replica chains of one kernel on a dataset and write traces.
    Run(RunArgs),
    /// Exact-chain audit at small depth: balance, gap, conductance, paths,
    /// drift.
    Oracle(OracleArgs),
    /// Reproduce a canned experiment end to end.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Simulated case whose signal to draw from (conflicts with --counts).
    #[arg(long)]
    case: Option<String>,
    /// Sample size, a power of two.
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise standard deviation for simulated data.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Raw count file; each count N becomes sqrt(N + 1/4).
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Output CSV path, one response value per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Dataset CSV produced by gen-data (one value per line).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Flat key=value config file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Kernel: bc, tw, ibc, itw, or ss.
    #[arg(long)]
    kernel: Option<String>,
    /// Split-prior exponent in p = alpha * n^-c.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Flat split probability, overriding the power-law form.
    #[arg(long)]
    p: Option<f64>,
    /// Tree depth cap L.
    #[arg(long)]
    depth: Option<u32>,
    /// Layer-penalty base for the twiggy grow proposal.
    #[arg(long = "D")]
    d: Option<f64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    record_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the lazy chain (stay put with probability 1/2).
    #[arg(long)]
    lazy: bool,
    /// Output directory for trace_<chain>.csv and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Tree depth cap L of the audited space (at most 5).
    #[arg(long = "L")]
    l: u32,
    #[arg(long, default_value = "bc")]
    kernel: String,
    /// One of balance, gap, conductance, paths, drift, all.
    #[arg(long, default_value = "all")]
    check: String,
    /// Sample size of the generated audit dataset.
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// One of example1, example2, case1, case2, case3, call_center.
    #[arg(long)]
    case: String,
    /// Scale chains and steps down for a quick pass.
    #[arg(long)]
    fast: bool,
    /// Comma-separated kernel list, e.g. bc,itw.
    #[arg(long)]
    kernels: Option<String>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    record_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Raw count file, required for call_center.
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Output directory for the bundle.
    #[arg(long)]
    out: PathBuf,
}

/// Parses argv, dispatches, and maps failures onto the exit-code contract.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests print and succeed.
            let _ = err.print();
            return if err.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Oracle(args) => cmd_oracle(&args),
        Command::Reproduce(args) => cmd_reproduce(&args),
    };
    match outcome {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Io(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            }
        }
    }
}

/// Signal catalog entry for a simulated case.
fn case_signal(case: CaseId) -> Result<Vec<crate::tree::NodeId>> {
    let plan = plan_case(case, &PlanOverrides::default())?;
    let point = plan
        .points
        .into_iter()
        .next_back()
        .ok_or_else(|| Error::Config("case has no plan points".into()))?;
    if point.signal.is_empty() {
        return Err(Error::Config(format!(
            "case {} has no generative signal; use --counts",
            case.name()
        )));
    }
    Ok(point.signal)
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let y = match (&args.case, &args.counts) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--case and --counts are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Config("one of --case or --counts is required".into()))
        }
        (Some(case), None) => {
            let case = CaseId::from_name(case)?;
            let design = RegularDesign::from_n(args.n)?;
            let spec = SignalSpec::uniform(case_signal(case)?, 2.0, args.sigma, args.seed);
            generate_dataset(&spec, &design)?
        }
        (None, Some(path)) => {
            let file = fs::File::open(path)?;
            ingest_counts(BufReader::new(file))?.y
        }
    };
    write_values(&args.out, &y)
}

fn write_values(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 24);
    for v in values {
        out.push_str(&format!("{v:.17e}\n"));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_values(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            line.trim().parse::<f64>().map_err(|e| Error::Ingest {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Applies a flat `key = value` config file underneath explicit flags.
fn apply_config_file(args: &RunArgs) -> Result<RunArgs> {
    let Some(path) = &args.config else {
        return Ok(args.clone());
    };
    let mut merged = args.clone();
    let text = fs::read_to_string(path)?;
    let mut saw_version = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Ingest {
            line: i + 1,
            msg: "expected key = value".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |msg: String| Error::Ingest { line: i + 1, msg };
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|e| bad(e.to_string()));
        let parse_int = |v: &str| v.parse::<u64>().map_err(|e| bad(e.to_string()));
        if !saw_version && key != "version" {
            return Err(bad("config must start with a version line".into()));
        }
        match key {
            "version" => {
                if value != "1" {
                    return Err(bad(format!("unsupported config version {value}")));
                }
                saw_version = true;
            }
            "kernel" => {
                merged.kernel.get_or_insert_with(|| value.to_string());
            }
            "data" => {
                merged.data.get_or_insert_with(|| PathBuf::from(value));
            }
            "out" => {
                merged.out.get_or_insert_with(|| PathBuf::from(value));
            }
            "c" => {
                merged.c.get_or_insert(parse_f64(value)?);
            }
            "alpha" => {
                merged.alpha.get_or_insert(parse_f64(value)?);
            }
            "p" => {
                merged.p.get_or_insert(parse_f64(value)?);
            }
            "D" => {
                merged.d.get_or_insert(parse_f64(value)?);
            }
            "depth" => {
                merged.depth.get_or_insert(parse_int(value)? as u32);
            }
            "chains" => {
                merged.chains.get_or_insert(parse_int(value)? as usize);
            }
            "steps" => {
                merged.steps.get_or_insert(parse_int(value)?);
            }
            "record_every" => {
                merged.record_every.get_or_insert(parse_int(value)?);
            }
            "seed" => {
                merged.seed.get_or_insert(parse_int(value)?);
            }
            "lazy" => {
                merged.lazy |= value.parse::<bool>().map_err(|e| bad(e.to_string()))?;
            }
            other => return Err(bad(format!("unknown config key '{other}'"))),
        }
    }
    Ok(merged)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let args = apply_config_file(args)?;
    let data = args
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("--data (or a config file entry) is required".into()))?;
    let out = args
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("--out (or a config file entry) is required".into()))?;
    let y = read_values(data)?;
    let design = RegularDesign::from_n(y.len())?;
    let depth = args.depth.unwrap_or_else(|| design.lmax().min(6));
    let split = match (args.p, args.c, args.alpha) {
        (Some(p), _, _) => SplitProb::Flat(p),
        (None, Some(c), alpha) => SplitProb::PowerLaw {
            c,
            alpha: alpha.unwrap_or(1.0),
        },
        (None, None, Some(alpha)) => SplitProb::PowerLaw { c: 3.0, alpha },
        (None, None, None) => SplitProb::Flat(0.1),
    };
    let mut config = split.config(depth, y.len())?;
    if let Some(d) = args.d {
        config.twig_base = d;
        config.validate(y.len())?;
    }
    let stats = crate::haar::haar_inner_products(&y, &design)?;
    let engine = PosteriorEngine::new(stats, config)?;
    let kind = KernelKind::from_short_name(args.kernel.as_deref().unwrap_or("bc"))?;
    let spec = if args.lazy {
        KernelSpec::lazy(kind)
    } else {
        KernelSpec::new(kind)
    };
    let chains = args.chains.unwrap_or(4);
    let steps = args.steps.unwrap_or(10_000);
    let record_every = args.record_every.unwrap_or(100);
    let traces = run_chains(
        &engine,
        spec,
        chains,
        steps,
        record_every,
        args.seed.unwrap_or(0),
        &InitStrategy::Null,
    )?;
    fs::create_dir_all(out)?;
    for trace in &traces {
        fs::write(out.join(format!("trace_{}.csv", trace.chain)), trace.to_csv())?;
    }
    let report = run_report(&traces, depth, steps)?;
    fs::write(out.join("report.json"), report)?;
    Ok(())
}

/// Small truth-free report: acceptance rates and the worst sliding-window
/// potential-scale-reduction trajectory.
fn run_report(traces: &[Trace], depth: u32, steps: u64) -> Result<String> {
    let accept: Vec<f64> = traces.iter().map(Trace::acceptance_rate).collect();
    let bgr = if traces.len() >= 2 {
        let panel = IndicatorPanel::from_traces(traces, depth, DEFAULT_WINDOW)?;
        let monitored = all_wavelet_positions(depth);
        Some((
            panel.worst_bgr_series(&monitored)?,
            panel.bgr_alpha_time(&monitored, 1.1, steps)?,
        ))
    } else {
        None
    };
    let value = serde_json::json!({
        "chains": traces.len(),
        "steps": steps,
        "accept_rate": accept,
        "bgr_series": bgr.as_ref().map(|(s, _)| s),
        "tau_bgr": bgr.as_ref().map(|(_, t)| t),
    });
    serde_json::to_string_pretty(&value)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let kind = KernelKind::from_short_name(&args.kernel)?;
    let design = RegularDesign::from_n(args.n)?;
    // Connected full-tree audit signal, as deep as the space allows.
    let signal = full_tree_signal(args.l.min(3));
    let t_star = DyadicTree::from_nodes(signal.clone(), args.l)?;
    let spec = SignalSpec::uniform(signal, 2.0, 1.0, args.seed);
    let y = generate_dataset(&spec, &design)?;
    let stats = crate::haar::haar_inner_products(&y, &design)?;
    let config = crate::posterior::ModelConfig::with_flat_split_prob(0.1, args.l, args.n)?;
    let engine = PosteriorEngine::new(stats, config)?;
    // Sup-norm bound of the noiseless signal for the drift audit.
    let c_f0 = 2.0 * (1 << args.l) as f64 / (args.n as f64).sqrt();

    let value = match args.check.as_str() {
        "all" => {
            let star = (kind != KernelKind::SpikeSlab).then_some(&t_star);
            let report = oracle::full_report(&engine, kind, star, c_f0)?;
            serde_json::to_value(&report)
        }
        check => {
            let kernel = crate::kernels::Kernel::new(&engine, KernelSpec::lazy(kind));
            let tm = oracle::build_transition_matrix(&kernel)?;
            match check {
                "balance" => Ok(serde_json::json!({
                    "kernel": kind.short_name(),
                    "n_states": tm.n_states(),
                    "row_sum_residual": tm.row_sum_residual(),
                    "detailed_balance_residual": tm.detailed_balance_residual(),
                    "irreducible": tm.is_irreducible(),
                })),
                "gap" => Ok(serde_json::json!({
                    "kernel": kind.short_name(),
                    "n_states": tm.n_states(),
                    "gap": oracle::spectral_gap(&tm)?,
                })),
                "conductance" => Ok(serde_json::json!({
                    "kernel": kind.short_name(),
                    "n_states": tm.n_states(),
                    "conductance": oracle::conductance_exact(&tm)?,
                })),
                "paths" => {
                    let ensemble_kind = match kind {
                        KernelKind::Twiggy | KernelKind::InformedTwiggy => {
                            oracle::EnsembleKind::Twiggy
                        }
                        KernelKind::SpikeSlab => {
                            return Err(Error::Config(
                                "canonical paths are defined for tree kernels".into(),
                            ))
                        }
                        _ => oracle::EnsembleKind::Classic,
                    };
                    let ensemble = oracle::build_ensemble(&tm, &t_star, ensemble_kind)?;
                    serde_json::to_value(&ensemble)
                }
                "drift" => {
                    if kind == KernelKind::SpikeSlab {
                        return Err(Error::Config(
                            "the drift audit is defined for tree kernels".into(),
                        ));
                    }
                    let report = oracle::drift_report(&tm, &engine, &t_star, c_f0)?;
                    serde_json::to_value(&report)
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown check '{other}'; expected balance, gap, conductance, paths, drift, or all"
                    )))
                }
            }
        }
    }
    .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_reproduce(args: &ReproduceArgs) -> Result<()> {
    let case = CaseId::from_name(&args.case)?;
    let kernels = args
        .kernels
        .as_ref()
        .map(|list| {
            list.split(',')
                .map(|s| KernelKind::from_short_name(s.trim()))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let overrides = PlanOverrides {
        ns: None,
        kernels,
        chains: args.chains,
        steps: args.steps,
        record_every: args.record_every,
        seed: args.seed,
        fast: args.fast,
    };
    let plan = plan_case(case, &overrides)?;
    let data = match (case, &args.counts) {
        (CaseId::CallCenter, Some(path)) => {
            let file = fs::File::open(path)?;
            Some(ingest_counts(BufReader::new(file))?.y)
        }
        (CaseId::CallCenter, None) => {
            return Err(Error::Config("call_center requires --counts".into()))
        }
        (_, Some(_)) => {
            return Err(Error::Config(
                "--counts only applies to call_center".into(),
            ))
        }
        _ => None,
    };
    run_plan(&plan, data.as_deref(), Some(&args.out))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_cli(args: &[&str]) -> i32 {
        run(std::iter::once("cartmix").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_cli(&["gen-data"]), EXIT_USAGE);
        assert_eq!(run_cli(&["no-such-command"]), EXIT_USAGE);
        assert_eq!(run_cli(&["--help"]), 0);
    }

    #[test]
    fn gen_data_is_deterministic_and_validates_sources() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let base = [
            "gen-data", "--case", "case2", "--n", "128", "--seed", "7", "--out",
        ];
        let mut args_a: Vec<&str> = base.to_vec();
        let path_a = a.to_str().unwrap().to_string();
        args_a.push(&path_a);
        assert_eq!(run_cli(&args_a), 0);
        let mut args_b: Vec<&str> = base.to_vec();
        let path_b = b.to_str().unwrap().to_string();
        args_b.push(&path_b);
        assert_eq!(run_cli(&args_b), 0);
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(read_values(&a).unwrap().len(), 128);
        // Conflicting and missing sources are validation errors.
        let out = dir.path().join("c.csv");
        let out = out.to_str().unwrap();
        assert_eq!(
            run_cli(&[
                "gen-data", "--case", "case2", "--counts", "x", "--out", out
            ]),
            EXIT_VALIDATION
        );
        assert_eq!(run_cli(&["gen-data", "--out", out]), EXIT_VALIDATION);
    }

    #[test]
    fn run_round_trip_with_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("y.csv");
        write_values(&data, &vec![0.25; 64]).unwrap();
        let config = dir.path().join("run.cfg");
        fs::write(
            &config,
            format!(
                "version = 1\nkernel = itw\ndepth = 3\nchains = 3\nsteps = 500\n\
                 record_every = 50\nseed = 4\ndata = {}\n",
                data.display()
            ),
        )
        .unwrap();
        let out = dir.path().join("out");
        let code = run_cli(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--kernel",
            "tw",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        for chain in 0..3 {
            assert!(out.join(format!("trace_{chain}.csv")).is_file());
        }
        let report = fs::read_to_string(out.join("report.json")).unwrap();
        assert!(report.contains("\"chains\": 3"));
        // Unknown config keys are rejected.
        fs::write(&config, "version = 1\nfrobnicate = 9\n").unwrap();
        let code = run_cli(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_VALIDATION);
    }

    #[test]
    fn oracle_guard_and_check_dispatch() {
        assert_eq!(
            run_cli(&["oracle", "--L", "6", "--check", "gap", "--n", "64"]),
            EXIT_VALIDATION
        );
        assert_eq!(
            run_cli(&["oracle", "--L", "2", "--check", "nonsense", "--n", "64"]),
            EXIT_VALIDATION
        );
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("oracle.json");
        assert_eq!(
            run_cli(&[
                "oracle",
                "--L",
                "2",
                "--kernel",
                "tw",
                "--check",
                "all",
                "--n",
                "64",
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(report["bounds_ok"], serde_json::json!(true));
        assert_eq!(report["n_states"], serde_json::json!(5));
    }

    #[test]
    fn reproduce_writes_the_bundle_layout() {
        let dir = tempfile::tempdir().unwrap();
        let code = run_cli(&[
            "reproduce",
            "--case",
            "example1",
            "--fast",
            "--kernels",
            "tw",
            "--chains",
            "2",
            "--steps",
            "1000",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(dir.path().join("example1/report.json").is_file());
        assert!(dir.path().join("example1/summary.csv").is_file());
        assert!(dir.path().join("example1/tw/trace_j1_0.csv").is_file());
        // call_center without counts is a validation error.
        assert_eq!(
            run_cli(&[
                "reproduce",
                "--case",
                "call_center",
                "--out",
                dir.path().to_str().unwrap()
            ]),
            EXIT_VALIDATION
        );
    }
}
