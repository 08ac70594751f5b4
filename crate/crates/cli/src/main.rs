mod svg;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use depthlaw_core::ammup::{
    bisect_eta_star_literal, eta_star_from_report, predict_curve, TransferRule, DEFAULT_EXPONENT,
};
use depthlaw_core::arch::config_pairs;
use depthlaw_core::graphdepth::ComputationGraph;
use depthlaw_core::oracles::run_suite;
use depthlaw_core::sensitivity::{layer_energy, EnergyConfig, LossSpec, ProbeMode};
use depthlaw_core::sweep::{optimum_per_depth, parse_csv, run_sweep, wls_fit, SweepPlan};
use depthlaw_core::ArchSpec;

/// Depth scaling of maximal-update learning rates.
#[derive(Parser, Debug)]
#[command(name = "depthlaw", version)]
struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Worker threads for parallel jobs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Architecture config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; beats the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum LossArg {
    Mse,
    Ce,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ProbeArg {
    Independent,
    InBatch,
}

#[derive(Args, Debug, Clone)]
struct EnergyArgs {
    #[arg(long, default_value_t = 64)]
    n_init: usize,
    #[arg(long, default_value_t = 8)]
    n_data: usize,
    /// Minibatch size B.
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    n_probe: usize,
    #[arg(long, value_enum, default_value_t = ProbeArg::Independent)]
    probe: ProbeArg,
    #[arg(long, value_enum, default_value_t = LossArg::Mse)]
    loss: LossArg,
    /// Label standard deviation for MSE.
    #[arg(long, default_value_t = 1.0)]
    sigma_y: f64,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Print the effective depth of an architecture or graph file.
    Depth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Computation graph file instead of an architecture config.
        #[arg(long, conflicts_with = "config")]
        graph: Option<PathBuf>,
    },
    /// Layerwise one-step energies as JSON.
    Measure {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        energy: EnergyArgs,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Maximal-update learning rate as JSON.
    Solve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        energy: EnergyArgs,
        /// Also bisect the literal one-step energy.
        #[arg(long)]
        literal: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Learning-rate sweep; writes CSV (resumes an existing file).
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Power-law fit of per-depth optima from a sweep CSV.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Transfer a learning rate across depths.
    Transfer {
        #[arg(long)]
        eta0: f64,
        #[arg(long = "L0")]
        l0: usize,
        #[arg(
            long = "L",
            conflicts_with = "depths",
            required_unless_present = "depths"
        )]
        l: Option<usize>,
        /// Comma-separated target depths.
        #[arg(long, value_delimiter = ',')]
        depths: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_EXPONENT, allow_hyphen_values = true)]
        exponent: f64,
    },
    /// Run the oracle suite.
    Verify {
        /// Run only oracles with this name or name prefix (repeatable).
        #[arg(long)]
        only: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DEPTHLAW_SEED") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| {
            format!("DEPTHLAW_SEED `{v}` is not an integer")
        })?)),
        Err(_) => Ok(None),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn split_set(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .with_context(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Defaults, then file, then DEPTHLAW_SEED, then `--set`.
fn load_arch(c: &ConfigArgs) -> Result<ArchSpec> {
    let mut pairs = match &c.config {
        Some(p) => config_pairs(&read(p)?)?,
        None => Vec::new(),
    };
    if let Some(s) = env_seed()? {
        pairs.push((0, "seed".into(), s.to_string()));
    }
    for s in &c.set {
        let (k, v) = split_set(s)?;
        pairs.push((0, k, v));
    }
    let mut spec = ArchSpec::default();
    spec.apply(&pairs)?;
    spec.fix_kernel_dims();
    spec.validate()?;
    Ok(spec)
}

fn load_plan(c: &ConfigArgs) -> Result<SweepPlan> {
    let mut text = match &c.config {
        Some(p) => read(p)?,
        None => String::new(),
    };
    if let Some(s) = env_seed()? {
        text.push_str(&format!("\ndata_seed = {s}\n"));
    }
    for s in &c.set {
        let (k, v) = split_set(s)?;
        text.push_str(&format!("\n{k} = {v}\n"));
    }
    Ok(SweepPlan::parse_config(&text)?)
}

fn energy_config(e: &EnergyArgs, seed: u64) -> EnergyConfig {
    EnergyConfig {
        n_init: e.n_init,
        n_data: e.n_data,
        batch: e.batch,
        n_probe: e.n_probe,
        probe: match e.probe {
            ProbeArg::Independent => ProbeMode::Independent,
            ProbeArg::InBatch => ProbeMode::InBatch,
        },
        seed,
    }
}

fn loss_spec(e: &EnergyArgs, spec: &ArchSpec) -> LossSpec {
    match e.loss {
        LossArg::Mse => LossSpec::mse(spec.outputs, e.sigma_y),
        LossArg::Ce => LossSpec::cross_entropy(spec.outputs),
    }
}

fn emit(text: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

/// Returns `Ok(false)` when an oracle failed.
fn dispatch(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Depth { cfg, graph } => {
            let l = match graph {
                Some(g) => ComputationGraph::parse(&read(&g)?)?.effective_depth()?,
                None => load_arch(&cfg)?.effective_depth(),
            };
            println!("{l}");
        }
        Cmd::Measure {
            cfg,
            energy,
            eta,
            output,
        } => {
            let spec = load_arch(&cfg)?;
            let r = layer_energy::<f64>(
                &spec,
                &loss_spec(&energy, &spec),
                eta,
                &energy_config(&energy, spec.seed),
            )?;
            emit(
                &(serde_json::to_string_pretty(&r)? + "\n"),
                output.as_deref(),
            )?;
        }
        Cmd::Solve {
            cfg,
            energy,
            literal,
            output,
        } => {
            let spec = load_arch(&cfg)?;
            let loss = loss_spec(&energy, &spec);
            let ec = energy_config(&energy, spec.seed);
            let report = layer_energy::<f64>(&spec, &loss, 1.0, &ec)?;
            let star = eta_star_from_report(&report, &spec)?;
            let mut v = serde_json::to_value(&star)?;
            if literal {
                v["literal_value"] =
                    serde_json::json!(bisect_eta_star_literal(&spec, &loss, &ec, 1e-3)?);
            }
            emit(
                &(serde_json::to_string_pretty(&v)? + "\n"),
                output.as_deref(),
            )?;
        }
        Cmd::Sweep { cfg, output } => {
            let plan = load_plan(&cfg)?;
            match output {
                Some(p) => {
                    let recs = run_sweep(&plan, Some(&p))?;
                    log::info!("{} records written to {}", recs.len(), p.display());
                }
                None => {
                    let recs = run_sweep(&plan, None)?;
                    let mut s = String::from(depthlaw_core::sweep::CSV_HEADER);
                    s.push('\n');
                    for r in recs {
                        s.push_str(&r.to_csv());
                        s.push('\n');
                    }
                    emit(&s, None)?;
                }
            }
        }
        Cmd::Fit { input, output, svg } => {
            let recs = parse_csv(&read(&input)?)?;
            let mut by_arch: BTreeMap<String, Vec<_>> = BTreeMap::new();
            for r in recs {
                by_arch.entry(r.arch.clone()).or_default().push(r);
            }
            if by_arch.is_empty() {
                bail!("{} has no records", input.display());
            }
            let mut fits = Vec::new();
            let mut text = String::new();
            for (arch, rs) in by_arch {
                let fit =
                    wls_fit(&optimum_per_depth(&rs)).with_context(|| format!("fitting {arch}"))?;
                let mut v = serde_json::to_value(&fit)?;
                v["arch"] = serde_json::json!(arch);
                text.push_str(&serde_json::to_string(&v)?);
                text.push('\n');
                fits.push((arch, fit));
            }
            emit(&text, output.as_deref())?;
            if let Some(p) = svg {
                std::fs::write(&p, svg::emit_svg_plot(&fits)?)
                    .with_context(|| format!("cannot write {}", p.display()))?;
            }
        }
        Cmd::Transfer {
            eta0,
            l0,
            l,
            depths,
            exponent,
        } => {
            let rule = TransferRule::with_exponent(eta0, l0, exponent)?;
            let targets = match l {
                Some(l) => vec![l],
                None => depths,
            };
            let mut s = String::new();
            for (l, eta) in predict_curve(&rule, &targets)? {
                s.push_str(&format!("{l} {eta}\n"));
            }
            emit(&s, None)?;
        }
        Cmd::Verify { only, seed, output } => {
            let seed = env_seed()?.unwrap_or(seed);
            let reports = run_suite(&only, seed)?;
            let mut s = String::new();
            for r in &reports {
                s.push_str(&serde_json::to_string(r)?);
                s.push('\n');
            }
            s.push_str(&format!(
                "# {:<30} {:<5} {:>14} {:>14} {:>12}\n",
                "name", "pass", "observed", "reference", "tolerance"
            ));
            for r in &reports {
                let first = |v: &[f64]| {
                    v.first()
                        .map(|x| format!("{x:.6e}"))
                        .unwrap_or_else(|| "-".into())
                };
                s.push_str(&format!(
                    "# {:<30} {:<5} {:>14} {:>14} {:>12.3e}\n",
                    r.name,
                    r.pass,
                    first(&r.observed),
                    first(&r.reference),
                    r.tolerance
                ));
            }
            emit(&s, None)?;
            if let Some(p) = output {
                std::fs::write(&p, serde_json::to_string_pretty(&reports)?)
                    .with_context(|| format!("cannot write {}", p.display()))?;
            }
            return Ok(reports.iter().all(|r| r.pass));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("depthlaw: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("depthlaw: {e:#}");
            ExitCode::from(2)
        }
    }
}
