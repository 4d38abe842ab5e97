//! Command-line entry point.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::ProblemSpec;
use crate::error::{config_err, Result};
use crate::harness::config::{ExperimentConfig, GridPoint, Overrides, OUT_DIR_ENV};
use crate::harness::experiments::{
    base_federation, compare_paradigms, losses_of, scaling_sweep, stability_experiment, user_level_sweep, Exec,
};
use crate::harness::output::{replay, ResultsWriter};
use crate::harness::run::RunReport;
use crate::harness::stats::{mean_se, sign_test};
use crate::optim::Paradigm;
use crate::privacy::{budget_report, NoisePlan, NoisedBlocks, PrivacyLevel, PrivacySpec};

#[derive(Debug, Parser)]
#[command(name = "jointdp", version, about = "Joint-DP personalized learning experiments on synthetic convex tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for all repetitions.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: config, then $JOINTDP_OUT_DIR, then ".").
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    /// Seeds per configuration.
    #[arg(long, global = true)]
    pub repetitions: Option<usize>,
    /// Monte-Carlo samples per owner for population losses.
    #[arg(long, global = true)]
    pub eval_samples: Option<usize>,
    /// Record wall time in the CSV (rows are then no longer reproducible).
    #[arg(long, global = true)]
    pub timing: bool,
    /// Run independent jobs on all cores.
    #[arg(long, global = true)]
    pub parallel: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run all four paradigms with paired seeds.
    Compare,
    /// Sweep the configured grid and fit log-log slopes.
    Sweep,
    /// Vary users per owner at fixed n, m and epsilon.
    UserSweep {
        /// Comma-separated r values (default: sweep.user_r).
        #[arg(long, value_delimiter = ',')]
        r: Option<Vec<usize>>,
    },
    /// Output distance of rSGD on record-level neighbors.
    Stability {
        /// Number of neighbor pairs (default: sweep.pairs or 200).
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Print the privacy budget report.
    Calibrate(CalibrateArgs),
    /// Write a federation in the text format.
    Gen {
        /// Repetition whose data seed is used.
        #[arg(long, default_value_t = 0)]
        rep: usize,
        /// Destination file (default: <out>/federation.txt).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Regenerate every row of a results table and compare byte for byte.
    Replay {
        /// CSV written by compare, sweep or user-sweep.
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Lipschitz constant L.
    #[arg(long)]
    pub lipschitz: Option<f64>,
    /// Iteration count T.
    #[arg(long = "iterations", short = 'T')]
    pub t: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Records per owner.
    #[arg(long)]
    pub m: Option<usize>,
    /// Owners.
    #[arg(long)]
    pub n: Option<usize>,
    /// Users per owner (default m).
    #[arg(long)]
    pub r: Option<usize>,
    /// none, record or user.
    #[arg(long, default_value = "record")]
    pub level: String,
    /// Noise also on personalized blocks (full-DP).
    #[arg(long)]
    pub all_blocks: bool,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| config_err("this command needs --config <FILE>"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
        repetitions: common.repetitions,
        eval_samples: common.eval_samples,
        timing: common.timing,
    })?;
    if common.parallel {
        cfg.output.parallel = true;
    }
    Ok(cfg)
}

fn write_reports(cfg: &ExperimentConfig, reports: &[RunReport]) -> Result<(PathBuf, PathBuf)> {
    let dir = cfg.out_dir();
    let csv = dir.join(&cfg.output.csv);
    let log = dir.join(&cfg.output.log);
    let mut w = ResultsWriter::create(&csv, &log, cfg.output.timing)?;
    for r in reports {
        w.write(r)?;
    }
    w.finish()?;
    Ok((csv, log))
}

fn run_command(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Compare => {
            let cfg = load(&cli.common)?;
            let reports = compare_paradigms(&cfg, Exec::from_flag(cfg.output.parallel))?;
            let (csv, _) = write_reports(&cfg, &reports)?;
            writeln!(out, "{:<14} {:>14} {:>12}", "paradigm", "mean_excess", "stderr")?;
            for p in Paradigm::COMPARED {
                let (m, se) = mean_se(&losses_of(&reports, p));
                writeln!(out, "{:<14} {:>14.6e} {:>12.3e}", p.as_str(), m, se)?;
            }
            for (a, b) in [
                (Paradigm::CollabNoDp, Paradigm::JointDp),
                (Paradigm::JointDp, Paradigm::FullDp),
                (Paradigm::JointDp, Paradigm::PerSilo),
            ] {
                let t = sign_test(&losses_of(&reports, a), &losses_of(&reports, b))?;
                writeln!(
                    out,
                    "{} < {}: {} of {} paired seeds, sign-test p = {:.4}",
                    a.as_str(),
                    b.as_str(),
                    t.wins,
                    t.wins + t.losses + t.ties,
                    t.p_value
                )?;
            }
            writeln!(out, "wrote {}", csv.display())?;
        }
        Command::Sweep => {
            let cfg = load(&cli.common)?;
            let outcome = scaling_sweep(&cfg, Exec::from_flag(cfg.output.parallel))?;
            let (csv, _) = write_reports(&cfg, &outcome.reports)?;
            for p in &outcome.points {
                writeln!(out, "{:?}  mean = {:.6e} ± {:.2e}", p.point, p.mean, p.stderr)?;
            }
            for s in &outcome.slopes {
                writeln!(out, "slope vs {}: {:.4} [{:.4}, {:.4}]", s.axis, s.slope, s.ci_low, s.ci_high)?;
            }
            writeln!(out, "wrote {}", csv.display())?;
        }
        Command::UserSweep { r } => {
            let cfg = load(&cli.common)?;
            let grid = r
                .clone()
                .or_else(|| cfg.sweep.user_r.clone())
                .ok_or_else(|| config_err("user-sweep needs --r or sweep.user_r"))?;
            let outcome = user_level_sweep(&cfg, &grid, Exec::from_flag(cfg.output.parallel))?;
            let (csv, _) = write_reports(&cfg, &outcome.reports)?;
            for p in &outcome.points {
                writeln!(out, "r = {:<6} sigma = {:<12.6e} mean = {:.6e} ± {:.2e}", p.r, p.sigma, p.mean, p.stderr)?;
            }
            writeln!(out, "wrote {}", csv.display())?;
        }
        Command::Stability { pairs } => {
            let cfg = load(&cli.common)?;
            let pairs = pairs.or(cfg.sweep.pairs).unwrap_or(200);
            let rep = stability_experiment(&cfg, pairs, Exec::from_flag(cfg.output.parallel))?;
            let dir = cfg.out_dir();
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("stability.json");
            std::fs::write(&path, serde_json::to_string_pretty(&rep)?)?;
            writeln!(out, "pairs = {}", rep.pairs)?;
            writeln!(out, "mean_output_distance = {}", rep.mean_output_distance)?;
            writeln!(out, "max_output_distance = {}", rep.max_output_distance)?;
            writeln!(out, "bound = {}", rep.bound)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Calibrate(a) => {
            let report = if cli.common.config.is_some() {
                let cfg = load(&cli.common)?;
                let rc = cfg.resolve(&GridPoint::default(), cfg.optimizer.paradigm)?;
                let plan = NoisePlan {
                    sigma: rc.sigma()?,
                    noised_blocks: rc.paradigm.noised_blocks(),
                    t: rc.t,
                };
                budget_report(&rc.privacy(), &plan, &rc.problem(0))?
            } else {
                let need = |v: Option<f64>, name: &str| v.ok_or_else(|| config_err(format!("calibrate needs --{name} or --config")));
                let l = need(a.lipschitz, "lipschitz")?;
                let eps = need(a.epsilon, "epsilon")?;
                let delta = need(a.delta, "delta")?;
                let t = a.t.ok_or_else(|| config_err("calibrate needs --iterations or --config"))?;
                let m = a.m.ok_or_else(|| config_err("calibrate needs --m or --config"))?;
                let n = a.n.ok_or_else(|| config_err("calibrate needs --n or --config"))?;
                let level: PrivacyLevel = a.level.parse()?;
                let privacy = PrivacySpec { epsilon: eps, delta, level };
                let problem = ProblemSpec {
                    n,
                    m,
                    r: a.r.unwrap_or(m),
                    record_dim: 1,
                    seed: 0,
                };
                let blocks = if a.all_blocks { NoisedBlocks::AllBlocks } else { NoisedBlocks::SharedOnly };
                let plan = NoisePlan::calibrate(&privacy, blocks, l, t, &problem)?;
                budget_report(&privacy, &plan, &problem)?
            };
            write!(out, "{}", report.to_kv())?;
        }
        Command::Gen { rep, file } => {
            let cfg = load(&cli.common)?;
            let fed = base_federation(&cfg, *rep)?;
            let path = file.clone().unwrap_or_else(|| cfg.out_dir().join("federation.txt"));
            if let Some(dir) = path.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            fed.write_text(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Replay { csv } => {
            let cfg = load(&cli.common)?;
            let text = read(csv)?;
            let outcome = replay(&cfg, &text)?;
            writeln!(out, "rows = {}", outcome.rows)?;
            if !outcome.mismatches.is_empty() {
                return Err(config_err(format!("replay: rows {:?} differ", outcome.mismatches)));
            }
            writeln!(out, "all rows reproduced")?;
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))
}

/// Parse `args`, run, and return the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run_command(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
