use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use smpc_core::config::{ExperimentConfig, VariantSelection};
use smpc_core::prs::PrsShape;
use smpc_core::sim::{monte_carlo_with, MonteCarloOptions, MonteCarloStats, RngSpec, RolloutRecord};
use smpc_core::smpc::ControllerVariant;

pub const PER_STEP_HEADER: &str = "k,p_hat,p_stderr,mean_cost,mean_u,mean_x,mean_lambda";

#[derive(Debug, Parser)]
#[command(
    name = "smpc",
    version,
    about = "Stochastic MPC experiments with interpolated initial states"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a Monte Carlo experiment and write summary.json and per_step.csv.
    Run(RunArgs),
    /// Print a preset configuration as JSON.
    Preset { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrsArg {
    Symmetric,
    OneSided,
    Ellipsoidal,
}

impl From<PrsArg> for PrsShape {
    fn from(p: PrsArg) -> Self {
        match p {
            PrsArg::Symmetric => PrsShape::SymmetricPerRow,
            PrsArg::OneSided => PrsShape::OneSidedPerRow,
            PrsArg::Ellipsoidal => PrsShape::Ellipsoidal,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON experiment file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in experiment: table1 or appendixB.
    #[arg(long)]
    pub preset: Option<String>,
    /// Controller name or `all`.
    #[arg(long)]
    pub controller: Option<String>,
    #[arg(long, value_enum)]
    pub prs: Option<PrsArg>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the first R rollouts to rollouts.csv.
    #[arg(long, default_value_t = 0, value_name = "R")]
    pub save_rollouts: usize,
}

/// Loads the experiment and applies command-line overrides.
pub fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        _ => bail!("pass exactly one of --config and --preset"),
    };
    if let Some(c) = &args.controller {
        cfg.controller.variant = c.parse::<VariantSelection>()?;
    }
    if let Some(p) = args.prs {
        cfg.prs.shape = p.into();
    }
    if let Some(n) = args.rollouts {
        cfg.simulation.rollouts = n;
    }
    if let Some(s) = args.seed {
        cfg.simulation.seed = s;
    }
    if let Some(out) = &args.out {
        cfg.output.directory = out.display().to_string();
    }
    Ok(cfg)
}

/// Formats a float with nine significant digits.
pub fn fmt9(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("float round trip");
    let mag = rounded.abs();
    if mag != 0.0 && !(1e-4..1e15).contains(&mag) {
        format!("{rounded:e}")
    } else {
        format!("{rounded}")
    }
}

fn num(x: f64) -> Value {
    if x.is_finite() {
        serde_json::from_str(&fmt9(x)).expect("finite float")
    } else {
        Value::Null
    }
}

fn opt_num(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

pub fn per_step_csv(stats: &MonteCarloStats) -> String {
    let mut out = String::from(PER_STEP_HEADER);
    out.push('\n');
    for s in &stats.per_step {
        let row = [s.p_hat, s.p_stderr, s.mean_cost, s.mean_u, s.mean_x, s.mean_lambda].map(fmt9);
        writeln!(out, "{},{}", s.k, row.join(",")).expect("string write");
    }
    out
}

pub fn rollouts_csv(records: &[RolloutRecord]) -> String {
    let Some(first) = records.first().and_then(|r| r.steps.first()) else {
        return String::new();
    };
    let (n, m) = (first.x.len(), first.u.len());
    let cols = |name: &str, len: usize| (0..len).map(|i| format!("{name}_{i}")).collect::<Vec<_>>().join(",");
    let mut out = format!(
        "rollout,k,{},{},lambda,{},{},stage_cost,satisfied,{}\n",
        cols("x", n),
        cols("u", m),
        cols("z0", n),
        cols("e", n),
        cols("w", n)
    );
    let join = |v: &[f64]| v.iter().map(|x| fmt9(*x)).collect::<Vec<_>>().join(",");
    for (i, rec) in records.iter().enumerate() {
        for s in &rec.steps {
            writeln!(
                out,
                "{i},{},{},{},{},{},{},{},{},{}",
                s.k,
                join(s.x.as_slice()),
                join(s.u.as_slice()),
                fmt9(s.lambda),
                join(s.z0.as_slice()),
                join(s.e.as_slice()),
                fmt9(s.stage_cost),
                u8::from(s.satisfied),
                join(s.w.as_slice()),
            )
            .expect("string write");
        }
    }
    out
}

#[derive(Debug)]
pub struct ControllerRun {
    pub variant: ControllerVariant,
    pub stats: MonteCarloStats,
    pub records: Vec<RolloutRecord>,
}

#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub summary: Value,
    pub runs: Vec<ControllerRun>,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Runs every selected controller and writes the output files.
pub fn run(args: &RunArgs) -> Result<RunReport> {
    let cfg = load_config(args)?;
    let sim = &cfg.simulation;
    let setup = cfg.controller_setup()?;
    let x0 = cfg.x0();
    let rng = RngSpec::new(sim.seed);
    let opts = MonteCarloOptions {
        threads: args.threads,
        keep_records: args.save_rollouts,
    };

    let mut variants = cfg.variants();
    let baseline_included = variants.contains(&ControllerVariant::FixedGain);
    if !baseline_included {
        variants.push(ControllerVariant::FixedGain);
    }
    let mut runs = Vec::new();
    let mut performance_bound = f64::NAN;
    let mut stationary_baseline = None;
    for &variant in &variants {
        let smpc = smpc_core::smpc::SmpcConfig::new(&setup, variant)
            .with_context(|| format!("building the {variant} controller"))?;
        if variant == ControllerVariant::FixedGain {
            performance_bound = smpc.performance_bound();
            stationary_baseline = smpc.stationary_feedback_cost();
        }
        log::info!("running {variant}: {} rollouts of {} steps", sim.rollouts, sim.t);
        let (stats, records) = monte_carlo_with(&smpc, &x0, sim.t, sim.rollouts, &rng, &opts)
            .with_context(|| format!("simulating the {variant} controller"))?;
        runs.push(ControllerRun {
            variant,
            stats,
            records,
        });
    }
    let baseline = runs
        .iter()
        .find(|r| r.variant == ControllerVariant::FixedGain)
        .map(|r| r.stats.mean_cost)
        .expect("baseline was added");
    if !baseline_included {
        runs.pop();
    }

    let out_dir = PathBuf::from(&cfg.output.directory);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let multiple = runs.len() > 1;
    let mut rows = Vec::new();
    for run in &runs {
        let dir = if multiple {
            out_dir.join(run.variant.name())
        } else {
            out_dir.clone()
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir, "per_step.csv", &per_step_csv(&run.stats))?;
        if !run.records.is_empty() {
            write(&dir, "rollouts.csv", &rollouts_csv(&run.records))?;
        }
        let s = &run.stats;
        let ratio = |base: f64| (base > 0.0).then(|| 100.0 * s.mean_cost / base);
        rows.push(json!({
            "controller": run.variant.name(),
            "cost_ratio_percent": opt_num(ratio(baseline)),
            "cost_ratio_stationary_percent": opt_num(stationary_baseline.and_then(ratio)),
            "mean_cost": num(s.mean_cost),
            "mean_cost_stderr": num(s.mean_cost_stderr),
            "satisfaction_percent": num(100.0 * s.satisfaction_mean),
            "satisfaction_min_percent": num(100.0 * s.satisfaction_min),
            "satisfaction_min_step": s.satisfaction_min_step,
            "lambda": {
                "mean": opt_num(s.lambda_mean),
                "fraction_zero": opt_num(s.lambda_fraction_zero),
                "fraction_one": opt_num(s.lambda_fraction_one),
            },
        }));
    }
    if multiple {
        let main = runs
            .iter()
            .find(|r| r.variant == ControllerVariant::Proposed)
            .unwrap_or(&runs[0]);
        write(&out_dir, "per_step.csv", &per_step_csv(&main.stats))?;
    }

    let summary = json!({
        "source": match (&args.preset, &args.config) {
            (Some(p), _) => format!("preset:{p}"),
            (_, Some(c)) => c.display().to_string(),
            _ => String::new(),
        },
        "seed": sim.seed,
        "rollouts": sim.rollouts,
        "steps": sim.t,
        "prs": cfg.prs,
        "baseline": ControllerVariant::FixedGain.name(),
        "baseline_mean_cost": num(baseline),
        "stationary_baseline_cost": opt_num(stationary_baseline),
        "performance_bound": num(performance_bound),
        "controllers": rows,
    });
    write(&out_dir, "summary.json", &serde_json::to_string_pretty(&summary)?)?;
    Ok(RunReport { out_dir, summary, runs })
}

/// Human-readable summary table.
pub fn render_table(summary: &Value) -> String {
    let mut out = format!(
        "{:<12} {:>10} {:>10} {:>10}\n",
        "controller", "cost %", "sat %", "min sat %"
    );
    let show = |v: &Value| v.as_f64().map_or("-".to_string(), |x| format!("{x:.1}"));
    for row in summary["controllers"].as_array().into_iter().flatten() {
        writeln!(
            out,
            "{:<12} {:>10} {:>10} {:>10}",
            row["controller"].as_str().unwrap_or("?"),
            show(&row["cost_ratio_percent"]),
            show(&row["satisfaction_percent"]),
            show(&row["satisfaction_min_percent"]),
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt9(0.123456789123), "0.123456789");
        assert_eq!(fmt9(-1624.0), "-1624");
        assert_eq!(fmt9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt9(f64::NAN), "NaN");
        assert_eq!(fmt9(2.5e-12), "2.5e-12");
        assert_eq!(fmt9(0.0), "0");
    }
}
