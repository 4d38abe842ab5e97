//! Experiment orchestration. Every experiment expands into a list of
//! independent runs, executes them serially or on the rayon pool, and keeps
//! results in job order.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate, replace_record};
use crate::error::{config_err, Result};
use crate::harness::config::{ExperimentConfig, GridPoint, RunConfig};
use crate::harness::run::{execute_on, execute_run, RunInputs, RunReport};
use crate::harness::stats::{mean_se, ols, LinearFit};
use crate::optim::{self, Paradigm};
use crate::privacy::PrivacyLevel;
use crate::rng::{self, SeedTuple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Serial,
    Parallel,
}

impl Exec {
    pub fn from_flag(parallel: bool) -> Self {
        if parallel {
            Self::Parallel
        } else {
            Self::Serial
        }
    }
}

fn map_jobs<J: Sync, T: Send, F: Fn(&J) -> Result<T> + Sync + Send>(jobs: &[J], exec: Exec, f: F) -> Result<Vec<T>> {
    match exec {
        Exec::Serial => jobs.iter().map(f).collect(),
        Exec::Parallel => jobs.par_iter().map(f).collect(),
    }
}

/// Seeds of repetition `rep` under the experiment's base seed.
pub fn repetition_seeds(cfg: &ExperimentConfig, rep: usize) -> SeedTuple {
    SeedTuple::for_repetition(cfg.seed, rep as u64)
}

/// Run every compared paradigm on the same federations with paired seeds.
/// Reports are ordered repetition-major, paradigms in [`Paradigm::COMPARED`]
/// order.
pub fn compare_paradigms(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<RunReport>> {
    let configs: Vec<RunConfig> = Paradigm::COMPARED
        .iter()
        .map(|&p| cfg.resolve(&GridPoint::default(), p))
        .collect::<Result<_>>()?;
    let reps: Vec<usize> = (0..cfg.repetitions).collect();
    let nested = map_jobs(&reps, exec, |&rep| {
        let seeds = repetition_seeds(cfg, rep);
        // all paradigms share the data model, so one federation serves them all
        let inputs = RunInputs::build(&configs[0], seeds.data)?;
        configs.iter().map(|rc| execute_on(rc, &inputs, &seeds)).collect::<Result<Vec<_>>>()
    })?;
    Ok(nested.into_iter().flatten().collect())
}

/// Excess losses of one paradigm in repetition order.
pub fn losses_of(reports: &[RunReport], paradigm: Paradigm) -> Vec<f64> {
    reports
        .iter()
        .filter(|r| r.config.paradigm == paradigm)
        .map(|r| r.excess_loss)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub point: GridPoint,
    pub config_hash: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSlope {
    pub axis: String,
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    pub slopes: Vec<AxisSlope>,
    pub fit: Option<LinearFit>,
    pub reports: Vec<RunReport>,
}

fn grid_jobs(cfg: &ExperimentConfig, grid: &[GridPoint], paradigm: Paradigm) -> Result<Vec<(RunConfig, SeedTuple)>> {
    let mut jobs = Vec::with_capacity(grid.len() * cfg.repetitions);
    for p in grid {
        let rc = cfg.resolve(p, paradigm)?;
        for rep in 0..cfg.repetitions {
            jobs.push((rc.clone(), repetition_seeds(cfg, rep)));
        }
    }
    Ok(jobs)
}

fn summarize(grid: &[GridPoint], reports: &[RunReport], reps: usize) -> Vec<SweepPoint> {
    grid.iter()
        .zip(reports.chunks(reps))
        .map(|(p, chunk)| {
            let losses: Vec<f64> = chunk.iter().map(|r| r.excess_loss).collect();
            let (mean, stderr) = mean_se(&losses);
            SweepPoint {
                point: *p,
                config_hash: chunk[0].config_hash.clone(),
                mean,
                stderr,
            }
        })
        .collect()
}

/// Log-log least-squares slopes of mean excess loss against each swept axis.
pub fn fit_slopes(points: &[SweepPoint], axes: &[&str], level: f64) -> Result<(Vec<AxisSlope>, LinearFit)> {
    let fitted: Vec<&str> = axes
        .iter()
        .copied()
        .filter(|a| {
            let mut vals: Vec<f64> = points.iter().filter_map(|p| p.point.axis_value(a)).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            vals.len() > 1
        })
        .collect();
    if fitted.is_empty() {
        return Err(config_err("sweep: no axis takes two distinct values"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in points {
        if !(p.mean > 0.0) {
            return Err(config_err(format!(
                "sweep: mean excess loss {} at {:?} is not positive; cannot fit on a log scale",
                p.mean, p.point
            )));
        }
        xs.push(fitted.iter().map(|a| p.point.axis_value(a).unwrap().ln()).collect());
        ys.push(p.mean.ln());
    }
    let fit = ols(&xs, &ys, level)?;
    let slopes = fitted
        .iter()
        .enumerate()
        .map(|(i, a)| AxisSlope {
            axis: a.to_string(),
            slope: fit.slopes[i],
            ci_low: fit.slopes[i] - fit.half_width[i],
            ci_high: fit.slopes[i] + fit.half_width[i],
        })
        .collect();
    Ok((slopes, fit))
}

/// Mean excess loss over the grid for the configured paradigm, with fitted
/// log-log slopes.
pub fn scaling_sweep(cfg: &ExperimentConfig, exec: Exec) -> Result<SweepOutcome> {
    let grid = cfg.sweep.grid();
    if grid.len() < 2 {
        return Err(config_err("sweep: the grid needs at least 2 points"));
    }
    let axes = cfg.sweep.axes();
    for a in &axes {
        let mut vals: Vec<f64> = grid.iter().filter_map(|p| p.axis_value(a)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        if vals.len() < 4 {
            log::warn!("sweep axis {a} has only {} values; slopes will be loose", vals.len());
        }
    }
    let jobs = grid_jobs(cfg, &grid, cfg.optimizer.paradigm)?;
    let reports = map_jobs(&jobs, exec, |(rc, s)| execute_run(rc, s))?;
    let points = summarize(&grid, &reports, cfg.repetitions);
    let (slopes, fit) = match fit_slopes(&points, &axes, cfg.sweep.level.unwrap_or(0.95)) {
        Ok((s, f)) => (s, Some(f)),
        Err(e) => {
            log::warn!("{e}");
            (Vec::new(), None)
        }
    };
    Ok(SweepOutcome {
        points,
        slopes,
        fit,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSweepPoint {
    pub r: usize,
    pub sigma: f64,
    pub config_hash: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSweepOutcome {
    pub points: Vec<UserSweepPoint>,
    pub reports: Vec<RunReport>,
}

fn user_level(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.optimizer.level = PrivacyLevel::User;
    c
}

/// Fixed `(n, m, ε)` with user-level privacy at each `r`.
pub fn user_level_sweep(cfg: &ExperimentConfig, r_grid: &[usize], exec: Exec) -> Result<UserSweepOutcome> {
    if r_grid.is_empty() {
        return Err(config_err("user sweep: r grid is empty"));
    }
    let c = user_level(cfg);
    let paradigm = c.optimizer.paradigm;
    if !paradigm.is_private() {
        return Err(config_err("user sweep: the paradigm must be private"));
    }
    let grid: Vec<GridPoint> = r_grid
        .iter()
        .map(|&r| GridPoint {
            r: Some(r),
            ..GridPoint::default()
        })
        .collect();
    let jobs = grid_jobs(&c, &grid, paradigm)?;
    let reports = map_jobs(&jobs, exec, |(rc, s)| execute_run(rc, s))?;
    let points = summarize(&grid, &reports, c.repetitions)
        .into_iter()
        .zip(reports.chunks(c.repetitions))
        .map(|(p, chunk)| UserSweepPoint {
            r: p.point.r.unwrap(),
            sigma: chunk[0].sigma,
            config_hash: p.config_hash,
            mean: p.mean,
            stderr: p.stderr,
        })
        .collect();
    Ok(UserSweepOutcome { points, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub pairs: usize,
    pub mean_output_distance: f64,
    pub max_output_distance: f64,
    /// `min(R, 4Lη(√T + T/(mn)))`
    pub bound: f64,
    pub t: usize,
    pub eta: f64,
    pub distances: Vec<f64>,
}

/// Stability bound for rSGD at the run's parameters.
pub fn stability_bound(rc: &RunConfig) -> Result<f64> {
    let r = rc.domain()?.radius();
    let l = rc.model()?.lipschitz;
    let t = rc.t as f64;
    let mn = (rc.m * rc.n) as f64;
    Ok(r.min(4.0 * l * rc.eta * (t.sqrt() + t / mn)))
}

/// Output distance of rSGD on a federation and its record-level neighbor.
/// With `replace_with_self` the chosen record is replaced by itself.
pub fn stability_pair(rc: &RunConfig, seeds: &SeedTuple, replace_with_self: bool) -> Result<f64> {
    let inputs = RunInputs::build(rc, seeds.data)?;
    let mut pick = rng::stream(rng::derive(seeds.data, 0x57AB));
    let j = pick.random_range(0..rc.n);
    let i = pick.random_range(0..rc.m);
    let fresh = if replace_with_self {
        inputs.fed.record(j, i).to_vec()
    } else {
        inputs.task.sample_record(j, &mut pick)
    };
    let neighbor = replace_record(&inputs.fed, j, i, fresh)?;
    let cfg = rc.optimizer(seeds.sampling, seeds.noise);
    let a = optim::run_rsgd(&inputs.fed, &inputs.model, &inputs.domain, &cfg)?;
    let b = optim::run_rsgd(&neighbor, &inputs.model, &inputs.domain, &cfg)?;
    Ok(a.final_params.distance(&b.final_params))
}

/// Record-level neighbor pairs run through rSGD with identical sampling.
pub fn stability_experiment(cfg: &ExperimentConfig, pairs: usize, exec: Exec) -> Result<StabilityReport> {
    if pairs == 0 {
        return Err(config_err("stability: pair count must be at least 1"));
    }
    let rc = cfg.resolve(&GridPoint::default(), Paradigm::CollabNoDp)?;
    let idx: Vec<usize> = (0..pairs).collect();
    let distances = map_jobs(&idx, exec, |&p| stability_pair(&rc, &repetition_seeds(cfg, p), false))?;
    let mean = distances.iter().sum::<f64>() / pairs as f64;
    let max = distances.iter().copied().fold(0.0, f64::max);
    Ok(StabilityReport {
        pairs,
        mean_output_distance: mean,
        max_output_distance: max,
        bound: stability_bound(&rc)?,
        t: rc.t,
        eta: rc.eta,
        distances,
    })
}

/// All run configurations an experiment file can produce: the compared
/// paradigms and the configured paradigm at the base point, every sweep grid
/// point, and every user-sweep point.
pub fn candidate_runs(cfg: &ExperimentConfig) -> Result<Vec<RunConfig>> {
    let base = GridPoint::default();
    let mut out: Vec<RunConfig> = Paradigm::COMPARED.iter().map(|&p| cfg.resolve(&base, p)).collect::<Result<_>>()?;
    out.push(cfg.resolve(&base, cfg.optimizer.paradigm)?);
    for p in cfg.sweep.grid() {
        out.push(cfg.resolve(&p, cfg.optimizer.paradigm)?);
    }
    if let Some(rs) = &cfg.sweep.user_r {
        let c = user_level(cfg);
        if c.optimizer.paradigm.is_private() {
            for &r in rs {
                let p = GridPoint {
                    r: Some(r),
                    ..GridPoint::default()
                };
                out.push(c.resolve(&p, c.optimizer.paradigm)?);
            }
        }
    }
    Ok(out)
}

/// Generate the federation of repetition `rep` at the base point.
pub fn base_federation(cfg: &ExperimentConfig, rep: usize) -> Result<crate::data::Federation> {
    let rc = cfg.resolve(&GridPoint::default(), cfg.optimizer.paradigm)?;
    generate(&rc.task()?, &rc.problem(repetition_seeds(cfg, rep).data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
repetitions = 3
eval_samples = 500
seed = 9
[task]
noise_scale = 0.2
[problem]
n = 2
m = 8
[domain]
k = 1
ell = 4
[optimizer]
paradigm = "joint_dp"
iterations = 400
{extra}
"#
        ))
        .unwrap()
    }

    #[test]
    fn compare_emits_four_reports_per_repetition() {
        let c = cfg("");
        let reps = compare_paradigms(&c, Exec::Serial).unwrap();
        assert_eq!(reps.len(), 12);
        assert_eq!(reps[0].config.paradigm, Paradigm::PerSilo);
        assert_eq!(reps[3].config.paradigm, Paradigm::FullDp);
        assert_eq!(reps[0].seeds, reps[3].seeds);
        assert_eq!(losses_of(&reps, Paradigm::JointDp).len(), 3);
    }

    #[test]
    fn parallel_matches_serial() {
        let mut c = cfg("");
        c.sweep.m = Some(vec![4, 8]);
        let a = scaling_sweep(&c, Exec::Serial).unwrap();
        let b = scaling_sweep(&c, Exec::Parallel).unwrap();
        let strip = |o: &SweepOutcome| o.reports.iter().map(|r| (r.config_hash.clone(), r.excess_loss)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn single_point_grid_is_rejected() {
        let mut c = cfg("");
        c.sweep.m = Some(vec![8]);
        assert!(scaling_sweep(&c, Exec::Serial).is_err());
    }

    #[test]
    fn user_sweep_checks_divisibility() {
        let c = cfg("");
        assert!(user_level_sweep(&c, &[3], Exec::Serial).is_err());
        let out = user_level_sweep(&c, &[2, 8], Exec::Serial).unwrap();
        assert_eq!(out.points.len(), 2);
        assert!(out.points[0].sigma > out.points[1].sigma);
    }

    #[test]
    fn self_replacement_is_stable() {
        let c = cfg("");
        let rc = c.resolve(&GridPoint::default(), Paradigm::CollabNoDp).unwrap();
        assert_eq!(stability_pair(&rc, &SeedTuple::for_repetition(1, 1), true).unwrap(), 0.0);
        let rep = stability_experiment(&c, 5, Exec::Serial).unwrap();
        assert!(rep.mean_output_distance <= rep.max_output_distance);
        assert!(rep.max_output_distance <= rc.domain().unwrap().radius());
    }
}
