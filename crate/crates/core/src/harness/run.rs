//! A single deterministic run and its report.


use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate, Federation, SyntheticTask, TaskKind};
use crate::domain::{DomainSpec, PartitionedParams};
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::loss::{self, LossModel, OwnerParams};
use crate::optim::{self, TrainResult};
use crate::rng::{self, SeedTuple};

/// What excess losses are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// The known population minimizer of a shared-mean task.
    Analytic,
    /// A long population SGD run (approximate).
    PopulationOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub empirical_loss: f64,
    /// Empirical loss at the long-run empirical oracle.
    pub oracle_empirical_loss: f64,
    pub population_loss: f64,
    pub population_stderr: f64,
    /// `f_S(result) − f_S(oracle)`; the oracle is approximate from above.
    pub phi_opt: f64,
    /// `f(result) − f_S(result)` (population estimate).
    pub phi_gen: f64,
    /// `excess − phi_opt − phi_gen`, the part attributed to approximation.
    pub phi_approx_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: SeedTuple,
    pub excess_loss: f64,
    pub stderr: f64,
    pub reference: ReferenceKind,
    pub empirical_loss: f64,
    pub risk: Option<RiskReport>,
    pub bound_value: f64,
    pub sigma: f64,
    pub wall_ms: f64,
}

/// Everything a run needs, built from its configuration and data seed.
pub struct RunInputs {
    pub domain: DomainSpec,
    pub task: SyntheticTask,
    pub model: LossModel,
    pub fed: Federation,
}

impl RunInputs {
    pub fn build(rc: &RunConfig, data_seed: u64) -> Result<Self> {
        let domain = rc.domain()?;
        let task = rc.task()?;
        let model = rc.model()?;
        let fed = generate(&task, &rc.problem(data_seed))?;
        Ok(Self { domain, task, model, fed })
    }
}

/// Train with the run's paradigm and seeds.
pub fn train(rc: &RunConfig, inputs: &RunInputs, seeds: &SeedTuple) -> Result<TrainResult> {
    let cfg = rc.optimizer(seeds.sampling, seeds.noise);
    optim::run(&inputs.fed, &inputs.model, &inputs.domain, &cfg, None)
}

/// Population minimizer: analytic for shared-mean tasks, otherwise a long
/// run of projected SGD on fresh samples with decaying steps.
pub fn reference_params(task: &SyntheticTask, model: &LossModel, domain: &DomainSpec) -> (PartitionedParams, ReferenceKind) {
    if let Some(p) = loss::analytic_minimizer(task) {
        return (p, ReferenceKind::Analytic);
    }
    let steps = (200_000 * domain.n).min(2_000_000);
    let seed = task
        .personalized_centers
        .iter()
        .flatten()
        .chain(&task.shared_center)
        .fold(0x0_AC1E, |h, c| rng::mix64(h ^ c.to_bits()));
    let mut rng = rng::stream(seed);
    let mut sample = move |j: usize| task.sample_record(j, &mut rng);
    let p = decayed_sgd(model, domain, steps, seed, |j, _| sample(j), domain.n);
    (p, ReferenceKind::PopulationOracle)
}

/// Empirical minimizer proxy: decaying-step rSGD for `10·t` steps
/// (between 10⁵ and 2·10⁶).
pub fn empirical_oracle(fed: &Federation, model: &LossModel, domain: &DomainSpec, t: usize) -> PartitionedParams {
    let steps = (10 * t).clamp(100_000, 2_000_000);
    let m = fed.m;
    let mut pick = rng::stream(rng::derive(0x0E_4ACE, steps as u64));
    decayed_sgd(
        model,
        domain,
        steps,
        0,
        |j, _| {
            let i = pick.random_range(0..m);
            fed.shards[j][i].clone()
        },
        fed.n(),
    )
}

/// Projected SGD with `η_t = R/(L·sqrt(t+1))`, averaging the second half of
/// the iterates.
fn decayed_sgd<F: FnMut(usize, usize) -> Vec<f64>>(
    model: &LossModel,
    domain: &DomainSpec,
    steps: usize,
    seed: u64,
    mut draw: F,
    n: usize,
) -> PartitionedParams {
    let mut owner_rng = rng::stream(rng::derive(seed, 0x0_0217));
    let mut params = PartitionedParams::zeros(domain);
    let mut avg = PartitionedParams::zeros(domain);
    let mut counts = vec![0usize; n];
    let mut u_count = 0usize;
    let mut gx = vec![0.0; domain.k];
    let mut gu = vec![0.0; domain.ell];
    let r = domain.radius();
    for t in 0..steps {
        let j = owner_rng.random_range(0..n);
        let z = draw(j, t);
        model.grad_into(&params.personalized[j], &params.shared, &z, &mut gx, &mut gu);
        let eta = r / (model.lipschitz * ((t + 1) as f64).sqrt());
        params.step_owner(j, &gx, &gu, eta, domain);
        if 2 * t >= steps {
            counts[j] += 1;
            let c = counts[j] as f64;
            for (a, x) in avg.personalized[j].iter_mut().zip(&params.personalized[j]) {
                *a += (x - *a) / c;
            }
            u_count += 1;
            let c = u_count as f64;
            for (a, u) in avg.shared.iter_mut().zip(&params.shared) {
                *a += (u - *a) / c;
            }
        }
    }
    for j in 0..n {
        if counts[j] == 0 {
            avg.personalized[j] = params.personalized[j].clone();
        }
    }
    avg
}

/// Split the excess loss of a finished run into optimization and
/// generalization proxies.
pub fn risk_decomposition<P: OwnerParams + ?Sized>(
    rc: &RunConfig,
    inputs: &RunInputs,
    result: &P,
    excess: f64,
    eval_seed: u64,
) -> Result<RiskReport> {
    let oracle = empirical_oracle(&inputs.fed, &inputs.model, &inputs.domain, rc.t);
    risk_against(inputs, result, &oracle, excess, rc.eval_samples, eval_seed)
}

/// As [`risk_decomposition`] with a given empirical oracle point.
pub fn risk_against<P: OwnerParams + ?Sized>(
    inputs: &RunInputs,
    result: &P,
    oracle: &PartitionedParams,
    excess: f64,
    eval_samples: usize,
    eval_seed: u64,
) -> Result<RiskReport> {
    let emp = loss::empirical_loss(&inputs.model, result, &inputs.fed)?.value;
    let emp_oracle = loss::empirical_loss(&inputs.model, oracle, &inputs.fed)?.value;
    let pop = loss::population_loss_estimate(&inputs.model, result, &inputs.task, eval_samples, eval_seed)?;
    let phi_opt = emp - emp_oracle;
    let phi_gen = pop.value - emp;
    Ok(RiskReport {
        empirical_loss: emp,
        oracle_empirical_loss: emp_oracle,
        population_loss: pop.value,
        population_stderr: pop.stderr,
        phi_opt,
        phi_gen,
        phi_approx_residual: excess - phi_opt - phi_gen,
    })
}

/// Wall clock for reports. `std::time::Instant` panics on wasm32 without a
/// host clock, so the browser build reports zero.
struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64() * 1e3;
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

/// Run one configuration with one seed tuple.
pub fn execute_run(rc: &RunConfig, seeds: &SeedTuple) -> Result<RunReport> {
    let inputs = RunInputs::build(rc, seeds.data)?;
    execute_on(rc, &inputs, seeds)
}

/// Run on prebuilt inputs (which must come from `rc` and `seeds.data`).
pub fn execute_on(rc: &RunConfig, inputs: &RunInputs, seeds: &SeedTuple) -> Result<RunReport> {
    let start = Stopwatch::start();
    let result = train(rc, inputs, seeds)?;
    let (reference, kind) = reference_params(&inputs.task, &inputs.model, &inputs.domain);
    let stationary = kind == ReferenceKind::Analytic && inputs.task.kind == TaskKind::SharedMean;
    let excess = loss::excess_population_loss(
        &inputs.model,
        &result,
        &reference,
        &inputs.task,
        rc.eval_samples,
        seeds.eval,
        stationary,
    )?;
    if excess.value < -3.0 * excess.stderr {
        log::warn!(
            "run {}: excess loss {} is below -3 stderr ({})",
            rc.hash(),
            excess.value,
            excess.stderr
        );
    }
    let empirical_loss = loss::empirical_loss(&inputs.model, &result, &inputs.fed)?.value;
    let risk = if rc.decompose {
        Some(risk_decomposition(rc, inputs, &result, excess.value, seeds.eval)?)
    } else {
        None
    };
    Ok(RunReport {
        config_hash: rc.hash(),
        config: rc.clone(),
        seeds: *seeds,
        excess_loss: excess.value,
        stderr: excess.stderr,
        reference: kind,
        empirical_loss,
        risk,
        bound_value: rc.bound_value()?,
        sigma: result.sigma,
        wall_ms: start.ms(),
    })
}
