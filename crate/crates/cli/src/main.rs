//! `otc` — train, evaluate, diagnose, sweep, and report on open-team-size
//! cooperative RL runs.
//!
//! Every subcommand works against a runs root directory (`--runs`, or the
//! `OTC_RUNS_DIR` environment variable, defaulting to `./runs`). Exit codes
//! separate configuration mistakes (2) from runtime failures (1).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use otc_core::config::{self, Ablation, Method, RunConfig};
use otc_core::exec::ExecMode;
use otc_core::harness::{
    self, report, HarnessError, RunDir, SweepSpec, TrainOutcome, TrainRecord,
};

#[derive(Parser)]
#[command(
    name = "otc",
    about = "Cooperative multi-agent RL with open team sizes",
    version
)]
struct Cli {
    /// Runs root directory (falls back to $OTC_RUNS_DIR, then ./runs).
    #[arg(long, global = true)]
    runs: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the commands that name one run configuration.
#[derive(Args)]
struct RunSelector {
    /// Configuration file (TOML) describing the run.
    #[arg(long, conflicts_with_all = ["preset", "method"])]
    config: Option<PathBuf>,
    /// Preset name (spread-paper, lbf-paper, rware-paper, spread-desk).
    #[arg(long, requires = "method")]
    preset: Option<String>,
    /// Method: ippo, mappo, pic, pc3d, hyper-pc3d.
    #[arg(long, requires = "preset")]
    method: Option<String>,
    /// Ablation switch: gate_off, gate_on, no_distill.
    #[arg(long)]
    ablation: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the training episode budget.
    #[arg(long)]
    episodes: Option<usize>,
    /// Run single-threaded instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
}

impl RunSelector {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match (&self.config, &self.preset, &self.method) {
            (Some(path), None, None) => config::load(path)?,
            (None, Some(preset), Some(method)) => {
                let method = Method::from_name(method).ok_or_else(|| {
                    config::ConfigError::Invalid(format!(
                        "unknown method `{method}` (expected ippo, mappo, pic, pc3d, hyper-pc3d)"
                    ))
                })?;
                config::preset(preset, method)?
            }
            _ => {
                return Err(config::ConfigError::Invalid(
                    "pass either --config FILE or --preset NAME --method NAME".into(),
                )
                .into())
            }
        };
        if let Some(a) = &self.ablation {
            cfg.ablation = Ablation::from_name(a).ok_or_else(|| {
                config::ConfigError::Invalid(format!(
                    "unknown ablation `{a}` (expected gate_off, gate_on, no_distill)"
                ))
            })?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        if self.sequential {
            cfg.exec = ExecMode::Sequential;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run (resumes if its directory already exists), then
    /// evaluate its final checkpoint on every non-empty split.
    Train {
        #[command(flatten)]
        selector: RunSelector,
        /// Skip the evaluation pass after training.
        #[arg(long)]
        no_eval: bool,
        /// Print one line per optimizer update.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate the final checkpoint of an existing run.
    Eval {
        /// Run directory (as printed by train), e.g. runs/pc3d-seed0.
        run_dir: PathBuf,
    },
    /// Measure context alignment between actors and the live teacher.
    Diagnose {
        /// Run directory of a distilled (pc3d / hyper-pc3d) run.
        run_dir: PathBuf,
    },
    /// Aggregate every run under the runs root into report.md/report.json.
    Report,
    /// Train and evaluate a cartesian family of runs.
    Sweep {
        /// Preset name shared by all runs.
        #[arg(long)]
        preset: String,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', default_value = "ippo,mappo,pic,pc3d")]
        methods: Vec<String>,
        /// Comma-separated ablations (`none` is always included).
        #[arg(long, value_delimiter = ',')]
        ablations: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Override the per-run episode budget.
        #[arg(long)]
        episodes: Option<usize>,
        /// Override evaluation rollouts per roster count.
        #[arg(long)]
        eval_rollouts: Option<usize>,
        /// Run single-threaded instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
}

fn runs_root(cli_flag: Option<PathBuf>) -> PathBuf {
    cli_flag
        .or_else(|| std::env::var_os("OTC_RUNS_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn print_outcome(out: &TrainOutcome) {
    let status = if out.complete { "complete" } else { "stopped" };
    let resumed = match out.resumed_at {
        Some(u) => format!(" (resumed at update {u})"),
        None => String::new(),
    };
    println!(
        "{status}: {} episodes, {} updates{resumed} -> {}",
        out.episodes,
        out.updates,
        out.run_dir.display()
    );
}

fn print_update(r: &TrainRecord) {
    let gate = r
        .metrics
        .mean_gate
        .map_or(String::new(), |g| format!(" gate {g:.3}"));
    println!(
        "update {:>5}  ep {:>6}  stage {}  return {:>9.3}  loss {:>9.4}  kl {:.4}{gate}",
        r.metrics.update, r.episode, r.stage, r.mean_return, r.metrics.total_loss, r.metrics.approx_kl
    );
}

fn train(
    root: &Path,
    selector: &RunSelector,
    no_eval: bool,
    verbose: bool,
) -> Result<(), HarnessError> {
    let cfg = selector.resolve()?;
    let mut printer = print_update;
    let on_update: Option<&mut dyn FnMut(&TrainRecord)> =
        if verbose { Some(&mut printer) } else { None };
    let out = harness::run_training(&cfg, root, None, on_update)?;
    print_outcome(&out);
    if !no_eval {
        for report in harness::evaluate_run(&cfg, &out.run_dir)? {
            println!(
                "eval {:>10}: mean {:8.3} over {} counts x {} rollouts",
                report.split.name(),
                report.mean,
                report.counts.len(),
                report.rollouts_per_count
            );
        }
    }
    Ok(())
}

fn eval(run_dir: &Path) -> Result<(), HarnessError> {
    let cfg = harness::load_run_config(run_dir)?;
    for report in harness::evaluate_run(&cfg, run_dir)? {
        println!(
            "eval {:>10}: mean {:8.3} over {} counts x {} rollouts",
            report.split.name(),
            report.mean,
            report.counts.len(),
            report.rollouts_per_count
        );
        for c in &report.counts {
            let std = c.std.map_or(String::new(), |s| format!(" ± {s:.3}"));
            println!("    n={:<2} return {:8.3}{std}", c.roster, c.mean);
        }
    }
    println!("wrote {}", RunDir::open(run_dir).eval_dir().display());
    Ok(())
}

fn diagnose(run_dir: &Path) -> Result<(), HarnessError> {
    let cfg = harness::load_run_config(run_dir)?;
    let report = harness::diagnose_run(&cfg, run_dir)?;
    println!(
        "context alignment against the live teacher ({} rollouts per count):",
        report.rollouts_per_count
    );
    for c in &report.counts {
        let cos_std = c.cosine_std.map_or(String::new(), |s| format!(" ± {s:.3}"));
        let gate_std = c.gate_std.map_or(String::new(), |s| format!(" ± {s:.3}"));
        println!(
            "    n={:<2} cosine {:6.3}{cos_std}  gate {:5.3}{gate_std}  reliance {:6.3}",
            c.roster, c.cosine_mean, c.gate_mean, c.reliance_mean
        );
    }
    println!(
        "wrote {}",
        RunDir::open(run_dir).diagnostics_dir().join("alignment.json").display()
    );
    Ok(())
}

fn run_report(root: &Path) -> Result<(), HarnessError> {
    let report = report::emit_report(root)?;
    println!("{}", report::render_markdown(&report));
    println!(
        "wrote {} and {}",
        root.join("report.md").display(),
        root.join("report.json").display()
    );
    Ok(())
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, HarnessError> {
    names
        .iter()
        .map(|n| {
            Method::from_name(n).ok_or_else(|| {
                config::ConfigError::Invalid(format!("unknown method `{n}`")).into()
            })
        })
        .collect()
}

fn parse_ablations(names: &[String]) -> Result<Vec<Ablation>, HarnessError> {
    let mut out = vec![Ablation::None];
    for n in names {
        let a = Ablation::from_name(n).ok_or_else(|| {
            HarnessError::from(config::ConfigError::Invalid(format!("unknown ablation `{n}`")))
        })?;
        if !out.contains(&a) {
            out.push(a);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    root: &Path,
    preset: String,
    methods: &[String],
    ablations: &[String],
    seeds: Vec<u64>,
    episodes: Option<usize>,
    eval_rollouts: Option<usize>,
    sequential: bool,
) -> Result<(), HarnessError> {
    let spec = SweepSpec {
        preset,
        methods: parse_methods(methods)?,
        ablations: parse_ablations(ablations)?,
        seeds,
        episodes,
        eval_rollouts,
        exec: sequential.then_some(ExecMode::Sequential),
    };
    let total = harness::sweep_configs(&spec)?.len();
    let mut done = 0usize;
    let outcomes = harness::run_sweep(
        &spec,
        root,
        Some(&mut |cfg: &RunConfig, out: &TrainOutcome| {
            done += 1;
            println!(
                "[{done}/{total}] {} -> {}",
                cfg.run_label(),
                out.run_dir.display()
            );
        }),
    )?;
    println!("sweep finished: {} runs under {}", outcomes.len(), root.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let root = runs_root(cli.runs);
    match cli.command {
        Command::Train { selector, no_eval, verbose } => train(&root, &selector, no_eval, verbose),
        Command::Eval { run_dir } => eval(&run_dir),
        Command::Diagnose { run_dir } => diagnose(&run_dir),
        Command::Report => run_report(&root),
        Command::Sweep {
            preset,
            methods,
            ablations,
            seeds,
            episodes,
            eval_rollouts,
            sequential,
        } => sweep(
            &root,
            preset,
            &methods,
            &ablations,
            seeds,
            episodes,
            eval_rollouts,
            sequential,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            // Configuration mistakes and runtime failures exit differently.
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
