//! Training paradigms. Every run is a deterministic function of the
//! federation, the configuration and its seeds, and returns the average of
//! the pre-update iterates `t = 0..T−1`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Federation, ProblemSpec};
use crate::domain::{norm, DomainSpec, PartitionedParams};
use crate::error::{check_dim, config_err, Result};
use crate::loss::{LossModel, OwnerParams};
use crate::privacy::{concentration_radius, NoisePlan, NoisedBlocks, PrivacyLevel, PrivacySpec, PrivateMean};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    PerSilo,
    CollabNoDp,
    JointDp,
    FullDp,
    SmoothJointDp,
}

impl Paradigm {
    pub const COMPARED: [Paradigm; 4] = [Paradigm::PerSilo, Paradigm::CollabNoDp, Paradigm::JointDp, Paradigm::FullDp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PerSilo => "per_silo",
            Self::CollabNoDp => "collab_no_dp",
            Self::JointDp => "joint_dp",
            Self::FullDp => "full_dp",
            Self::SmoothJointDp => "smooth_joint_dp",
        }
    }

    pub fn is_private(&self) -> bool {
        matches!(self, Self::JointDp | Self::FullDp | Self::SmoothJointDp)
    }

    /// Which gradient blocks receive privacy noise.
    pub fn noised_blocks(&self) -> NoisedBlocks {
        match self {
            Self::PerSilo | Self::CollabNoDp => NoisedBlocks::None,
            Self::JointDp => NoisedBlocks::SharedOnly,
            Self::FullDp | Self::SmoothJointDp => NoisedBlocks::AllBlocks,
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_silo" => Ok(Self::PerSilo),
            "collab_no_dp" => Ok(Self::CollabNoDp),
            "joint_dp" => Ok(Self::JointDp),
            "full_dp" => Ok(Self::FullDp),
            "smooth_joint_dp" => Ok(Self::SmoothJointDp),
            other => Err(config_err(format!("unknown paradigm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    #[default]
    Origin,
    RandomInDomain,
}

/// Options for the smooth-loss variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothOptions {
    /// Failure probability used for the concentration radius.
    pub gamma: f64,
    /// Privatize only the shared block of the per-owner gradient.
    pub privatize_shared_only: bool,
    /// Scale on the private-mean noise; 0 turns it off.
    pub noise_multiplier: f64,
}

impl Default for SmoothOptions {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            privatize_shared_only: false,
            noise_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Iteration count (per owner for `PerSilo`).
    pub t: usize,
    /// Constant step size.
    pub eta: f64,
    pub paradigm: Paradigm,
    pub privacy: PrivacySpec,
    pub seed_sampling: u64,
    pub seed_noise: u64,
    #[serde(default)]
    pub init: InitPolicy,
    /// Replaces the calibrated noise scale (e.g. 0 for noise-off checks).
    #[serde(default)]
    pub sigma_override: Option<f64>,
    #[serde(default)]
    pub smooth: SmoothOptions,
    /// Keep every iterate (memory grows with `T`).
    #[serde(default)]
    pub record_iterates: bool,
    /// Record a loss sample every this many iterations.
    #[serde(default)]
    pub trace_every: Option<usize>,
}

impl OptimizerConfig {
    pub fn new(paradigm: Paradigm, t: usize, eta: f64, privacy: PrivacySpec) -> Self {
        Self {
            t,
            eta,
            paradigm,
            privacy,
            seed_sampling: 0,
            seed_noise: 1,
            init: InitPolicy::Origin,
            sigma_override: None,
            smooth: SmoothOptions::default(),
            record_iterates: false,
            trace_every: None,
        }
    }

    pub fn with_seeds(mut self, sampling: u64, noise: u64) -> Self {
        self.seed_sampling = sampling;
        self.seed_noise = noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(config_err("optimizer: T must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(config_err(format!("optimizer: eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.paradigm.is_private() {
            if self.privacy.level == PrivacyLevel::None {
                return Err(config_err(format!(
                    "optimizer: paradigm {} requires a privacy level other than none",
                    self.paradigm.as_str()
                )));
            }
            self.privacy.validate()?;
        }
        if let Some(s) = self.sigma_override {
            if !(s.is_finite() && s >= 0.0) {
                return Err(config_err("optimizer: sigma override must be >= 0"));
            }
        }
        if self.trace_every == Some(0) {
            return Err(config_err("optimizer: trace_every must be positive"));
        }
        Ok(())
    }

    fn expect(&self, paradigm: Paradigm) -> Result<()> {
        self.validate()?;
        if self.paradigm != paradigm {
            return Err(config_err(format!(
                "configuration is for {}, not {}",
                self.paradigm.as_str(),
                paradigm.as_str()
            )));
        }
        Ok(())
    }
}

/// Iteration count defaults: `m²n²` for the collaborative paradigms, `m²`
/// per owner for per-silo training and `⌈n²/ln(1/δ)⌉` for the smooth
/// variant. The result is capped at `cap`.
pub fn default_iterations(paradigm: Paradigm, n: usize, m: usize, delta: f64, cap: usize) -> usize {
    let t = match paradigm {
        Paradigm::PerSilo => (m as u128).pow(2),
        Paradigm::SmoothJointDp => {
            let l = (1.0 / delta).ln().max(1.0);
            ((n * n) as f64 / l).ceil() as u128
        }
        _ => ((m * n) as u128).pow(2),
    };
    let capped = t.min(cap as u128) as usize;
    if (capped as u128) < t {
        log::warn!("default T = {t} for {} exceeds the cap; using {capped}", paradigm.as_str());
    }
    capped.max(1)
}

/// Constant step size `R / (L·sqrt(T·(1 + d·σ²/L²)))` balancing the
/// distance and gradient-second-moment terms, where `d` is the number of
/// noised coordinates per step.
pub fn default_step_size(radius: f64, lipschitz: f64, t: usize, noise_dim: usize, sigma: f64) -> f64 {
    let ratio = noise_dim as f64 * sigma * sigma / (lipschitz * lipschitz);
    radius / (lipschitz * (t as f64 * (1.0 + ratio)).sqrt())
}

/// Noise scale a paradigm would use, honoring `sigma_override`.
pub fn planned_sigma(cfg: &OptimizerConfig, model: &LossModel, problem: &ProblemSpec) -> Result<f64> {
    if let Some(s) = cfg.sigma_override {
        return Ok(s);
    }
    match cfg.paradigm {
        Paradigm::JointDp | Paradigm::FullDp => {
            Ok(NoisePlan::calibrate(&cfg.privacy, cfg.paradigm.noised_blocks(), model.lipschitz, cfg.t, problem)?.sigma)
        }
        _ => Ok(0.0),
    }
}

/// Number of noised coordinates per step for a paradigm.
pub fn noise_dim(paradigm: Paradigm, spec: &DomainSpec, privatize_shared_only: bool) -> usize {
    match paradigm {
        Paradigm::JointDp => spec.ell,
        Paradigm::FullDp => spec.k + spec.ell,
        Paradigm::SmoothJointDp if privatize_shared_only => spec.ell,
        Paradigm::SmoothJointDp => spec.k + spec.ell,
        _ => 0,
    }
}

/// Starting point inside the domain.
pub fn initial_params(spec: &DomainSpec, policy: InitPolicy, seed: u64) -> PartitionedParams {
    match policy {
        InitPolicy::Origin => PartitionedParams::zeros(spec),
        InitPolicy::RandomInDomain => {
            let mut rng = rng::stream(seed);
            let mut ball = |dim: usize, radius: f64| -> Vec<f64> {
                if dim == 0 {
                    return Vec::new();
                }
                let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let nrm = norm(&v).max(f64::MIN_POSITIVE);
                let rad = radius * rng.random::<f64>().powf(1.0 / dim as f64);
                v.into_iter().map(|c| c * rad / nrm).collect()
            };
            PartitionedParams {
                personalized: (0..spec.n).map(|_| ball(spec.k, spec.x_radius())).collect(),
                shared: ball(spec.ell, spec.u_radius()),
            }
        }
    }
}

fn init_seed(cfg: &OptimizerConfig) -> u64 {
    rng::derive(cfg.seed_sampling, 0x1417)
}

/// Receives loss samples at trace checkpoints while a run progresses.
pub trait TraceObserver {
    fn checkpoint(&mut self, iteration: usize, loss_sample: f64);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    /// Averaged iterate `(x̄, ū)`. For per-silo runs `shared` holds the mean
    /// of the owners' private copies.
    pub final_params: PartitionedParams,
    /// Per-owner shared blocks of a per-silo run.
    pub owner_shared: Option<Vec<Vec<f64>>>,
    /// `(iteration, loss on the sampled record)` at trace checkpoints.
    pub trace: Vec<(usize, f64)>,
    /// Every iterate `x^0..x^T` when requested.
    pub iterates: Option<Vec<PartitionedParams>>,
    pub seed_sampling: u64,
    pub seed_noise: u64,
    pub sigma: f64,
    pub t: usize,
    pub eta: f64,
}

impl OwnerParams for TrainResult {
    fn owners(&self) -> usize {
        self.final_params.personalized.len()
    }

    fn owner(&self, j: usize) -> (&[f64], &[f64]) {
        let u = match &self.owner_shared {
            Some(us) => &us[j],
            None => &self.final_params.shared,
        };
        (&self.final_params.personalized[j], u)
    }
}

struct EngineOut {
    avg: PartitionedParams,
    trace: Vec<(usize, f64)>,
    iterates: Option<Vec<PartitionedParams>>,
}

/// Projected single-sample SGD over `shards`, adding `N(0, σ²)` noise to the
/// blocks selected by `blocks`. The noise stream draws `k + ell` normals per
/// iteration whenever noise is enabled, even if some are discarded or `σ = 0`.
#[allow(clippy::too_many_arguments)]
fn sgd_engine(
    shards: &[Vec<Vec<f64>>],
    model: &LossModel,
    spec: &DomainSpec,
    start: PartitionedParams,
    t_max: usize,
    eta: f64,
    sigma: f64,
    blocks: NoisedBlocks,
    seed_sampling: u64,
    seed_noise: u64,
    record_iterates: bool,
    trace_every: Option<usize>,
    mut observer: Option<&mut dyn TraceObserver>,
) -> EngineOut {
    let n = shards.len();
    let m = shards[0].len();
    let (k, ell) = (spec.k, spec.ell);
    let mut params = start;
    let mut sampler = rng::stream(seed_sampling);
    let mut noise_rng = rng::stream(seed_noise);
    let noisy = blocks != NoisedBlocks::None;

    let mut acc_x = vec![vec![0.0; k]; n];
    let mut last_t = vec![0usize; n];
    let mut acc_u = vec![0.0; ell];
    let mut gx = vec![0.0; k];
    let mut gu = vec![0.0; ell];
    let mut trace = Vec::new();
    let mut iterates = record_iterates.then(|| {
        let mut v = Vec::with_capacity(t_max + 1);
        v.push(params.clone());
        v
    });

    for t in 0..t_max {
        for (a, u) in acc_u.iter_mut().zip(&params.shared) {
            *a += u;
        }
        let j = sampler.random_range(0..n);
        let i = sampler.random_range(0..m);
        let z = &shards[j][i];

        let span = (t + 1 - last_t[j]) as f64;
        for (a, x) in acc_x[j].iter_mut().zip(&params.personalized[j]) {
            *a += x * span;
        }
        last_t[j] = t + 1;

        if let Some(every) = trace_every {
            if t % every == 0 {
                let v = model.value(&params.personalized[j], &params.shared, z);
                trace.push((t, v));
                if let Some(obs) = observer.as_deref_mut() {
                    obs.checkpoint(t, v);
                }
            }
        }

        model.grad_into(&params.personalized[j], &params.shared, z, &mut gx, &mut gu);
        if noisy {
            for g in gx.iter_mut() {
                let b: f64 = noise_rng.sample(StandardNormal);
                if blocks == NoisedBlocks::AllBlocks {
                    *g += sigma * b;
                }
            }
            for g in gu.iter_mut() {
                let b: f64 = noise_rng.sample(StandardNormal);
                *g += sigma * b;
            }
        }
        params.step_owner(j, &gx, &gu, eta, spec);

        if cfg!(debug_assertions) || t & 0xFFF == 0 {
            assert!(params.in_domain(spec, 1e-9), "iterate left the domain at t = {t}");
        }
        if let Some(its) = iterates.as_mut() {
            its.push(params.clone());
        }
    }

    let tf = t_max as f64;
    for j in 0..n {
        let span = (t_max - last_t[j]) as f64;
        for (a, x) in acc_x[j].iter_mut().zip(&params.personalized[j]) {
            *a = (*a + x * span) / tf;
        }
    }
    acc_u.iter_mut().for_each(|a| *a /= tf);
    EngineOut {
        avg: PartitionedParams {
            personalized: acc_x,
            shared: acc_u,
        },
        trace,
        iterates,
    }
}

fn check_inputs(fed: &Federation, model: &LossModel, spec: &DomainSpec) -> Result<()> {
    spec.validate()?;
    fed.validate()?;
    check_dim("owners", spec.n, fed.n())?;
    check_dim("record", model.record_dim(spec.k, spec.ell), fed.dim)
}

fn problem_of(fed: &Federation) -> ProblemSpec {
    ProblemSpec {
        n: fed.n(),
        m: fed.m,
        r: fed.r,
        record_dim: fed.dim,
        seed: 0,
    }
}

fn run_collaborative(
    fed: &Federation,
    model: &LossModel,
    spec: &DomainSpec,
    cfg: &OptimizerConfig,
    paradigm: Paradigm,
    observer: Option<&mut dyn TraceObserver>,
) -> Result<TrainResult> {
    cfg.expect(paradigm)?;
    check_inputs(fed, model, spec)?;
    let sigma = planned_sigma(cfg, model, &problem_of(fed))?;
    let start = initial_params(spec, cfg.init, init_seed(cfg));
    let out = sgd_engine(
        &fed.shards,
        model,
        spec,
        start,
        cfg.t,
        cfg.eta,
        sigma,
        paradigm.noised_blocks(),
        cfg.seed_sampling,
        cfg.seed_noise,
        cfg.record_iterates,
        cfg.trace_every,
        observer,
    );
    Ok(TrainResult {
        final_params: out.avg,
        owner_shared: None,
        trace: out.trace,
        iterates: out.iterates,
        seed_sampling: cfg.seed_sampling,
        seed_noise: cfg.seed_noise,
        sigma,
        t: cfg.t,
        eta: cfg.eta,
    })
}

/// Collaboration without privacy: uniform `(i_t, j_t)`, projected step on
/// `(x_{j_t}, u)`.
pub fn run_rsgd(fed: &Federation, model: &LossModel, spec: &DomainSpec, cfg: &OptimizerConfig) -> Result<TrainResult> {
    run_collaborative(fed, model, spec, cfg, Paradigm::CollabNoDp, None)
}

/// Joint-DP noisy SGD: Gaussian noise on the shared block only.
pub fn run_nsgd(fed: &Federation, model: &LossModel, spec: &DomainSpec, cfg: &OptimizerConfig) -> Result<TrainResult> {
    run_collaborative(fed, model, spec, cfg, Paradigm::JointDp, None)
}

/// Full-DP noisy SGD: the same noise scale on the touched personalized
/// block as well as the shared block. Noise on untouched blocks would be
/// discarded by the block update, so it is never drawn.
pub fn run_full_dp(fed: &Federation, model: &LossModel, spec: &DomainSpec, cfg: &OptimizerConfig) -> Result<TrainResult> {
    run_collaborative(fed, model, spec, cfg, Paradigm::FullDp, None)
}

/// Dispatch on `cfg.paradigm`, optionally streaming trace checkpoints.
pub fn run(
    fed: &Federation,
    model: &LossModel,
    spec: &DomainSpec,
    cfg: &OptimizerConfig,
    observer: Option<&mut dyn TraceObserver>,
) -> Result<TrainResult> {
    match cfg.paradigm {
        Paradigm::PerSilo => run_per_silo(fed, model, spec, cfg),
        Paradigm::SmoothJointDp => run_smooth_nsgd(fed, model, spec, cfg),
        p => run_collaborative(fed, model, spec, cfg, p, observer),
    }
}

/// Sampling seed of owner `j` in a per-silo run.
pub fn silo_seed(seed_sampling: u64, owner: usize) -> u64 {
    rng::derive(seed_sampling, 0x5110_0000 + owner as u64)
}

/// SGD of one owner on its own records with its own copy of `u`.
/// Returns the averaged `(x_j, u_j)`.
pub fn run_single_silo(
    fed: &Federation,
    owner: usize,
    model: &LossModel,
    spec: &DomainSpec,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_inputs(fed, model, spec)?;
    if owner >= fed.n() {
        return Err(crate::error::Error::Index {
            what: "owner",
            index: owner,
            limit: fed.n(),
        });
    }
    let single = spec.single_owner();
    let full_start = initial_params(spec, cfg.init, init_seed(cfg));
    let start = PartitionedParams {
        personalized: vec![full_start.personalized[owner].clone()],
        shared: full_start.shared,
    };
    let out = sgd_engine(
        &fed.shards[owner..owner + 1],
        model,
        &single,
        start,
        cfg.t,
        cfg.eta,
        0.0,
        NoisedBlocks::None,
        seed,
        0,
        false,
        None,
        None,
    );
    let PartitionedParams {
        mut personalized,
        shared,
    } = out.avg;
    Ok((personalized.pop().unwrap_or_default(), shared))
}

/// Owners learn individually; `cfg.t` is the per-owner iteration count.
pub fn run_per_silo(fed: &Federation, model: &LossModel, spec: &DomainSpec, cfg: &OptimizerConfig) -> Result<TrainResult> {
    cfg.expect(Paradigm::PerSilo)?;
    check_inputs(fed, model, spec)?;
    let mut xs = Vec::with_capacity(fed.n());
    let mut us = Vec::with_capacity(fed.n());
    for j in 0..fed.n() {
        let (x, u) = run_single_silo(fed, j, model, spec, cfg, silo_seed(cfg.seed_sampling, j))?;
        xs.push(x);
        us.push(u);
    }
    let mut mean_u = vec![0.0; spec.ell];
    for u in &us {
        mean_u.iter_mut().zip(u).for_each(|(a, b)| *a += b / us.len() as f64);
    }
    Ok(TrainResult {
        final_params: PartitionedParams {
            personalized: xs,
            shared: mean_u,
        },
        owner_shared: Some(us),
        trace: Vec::new(),
        iterates: None,
        seed_sampling: cfg.seed_sampling,
        seed_noise: cfg.seed_noise,
        sigma: 0.0,
        t: cfg.t,
        eta: cfg.eta,
    })
}

/// Private mean estimator used by the smooth variant for a given problem.
pub fn smooth_estimator(model: &LossModel, spec: &DomainSpec, fed_m: usize, fed_r: usize, cfg: &OptimizerConfig) -> Result<PrivateMean> {
    let h = model
        .smoothness
        .ok_or_else(|| config_err("smooth variant needs a smooth loss"))?;
    let tau = concentration_radius(model.lipschitz, fed_r, fed_m, cfg.smooth.gamma, spec.ell, spec.radius(), h)?;
    let mut est = PrivateMean::new(cfg.privacy.epsilon, cfg.privacy.delta, tau, model.lipschitz)?;
    est.noise_multiplier = cfg.smooth.noise_multiplier;
    Ok(est)
}

/// Noisy SGD for smooth losses: each step samples an owner, forms one
/// average gradient per user shard and privatizes their mean.
pub fn run_smooth_nsgd(fed: &Federation, model: &LossModel, spec: &DomainSpec, cfg: &OptimizerConfig) -> Result<TrainResult> {
    cfg.expect(Paradigm::SmoothJointDp)?;
    check_inputs(fed, model, spec)?;
    if fed.r < 2 {
        return Err(config_err("smooth variant needs at least two users per owner"));
    }
    let est = smooth_estimator(model, spec, fed.m, fed.r, cfg)?;
    let (n, k, ell, r) = (fed.n(), spec.k, spec.ell, fed.r);
    let shared_only = cfg.smooth.privatize_shared_only;
    let offset = if shared_only { k } else { 0 };

    let mut params = initial_params(spec, cfg.init, init_seed(cfg));
    let mut sampler = rng::stream(cfg.seed_sampling);
    let mut noise_rng: StreamRng = rng::stream(cfg.seed_noise);
    let mut acc_x = vec![vec![0.0; k]; n];
    let mut last_t = vec![0usize; n];
    let mut acc_u = vec![0.0; ell];
    let mut gx = vec![0.0; k];
    let mut gu = vec![0.0; ell];
    let mut user_grads = vec![vec![0.0; k + ell - offset]; r];
    let mut owner_x = vec![0.0; k];
    let scale = 1.0 / fed.shard_size() as f64;
    let mut iterates = cfg.record_iterates.then(|| vec![params.clone()]);

    for t in 0..cfg.t {
        for (a, u) in acc_u.iter_mut().zip(&params.shared) {
            *a += u;
        }
        let j = sampler.random_range(0..n);
        let span = (t + 1 - last_t[j]) as f64;
        for (a, x) in acc_x[j].iter_mut().zip(&params.personalized[j]) {
            *a += x * span;
        }
        last_t[j] = t + 1;

        owner_x.iter_mut().for_each(|v| *v = 0.0);
        for (w, xg) in user_grads.iter_mut().enumerate() {
            xg.iter_mut().for_each(|v| *v = 0.0);
            for z in fed.user_records(j, w) {
                model.grad_into(&params.personalized[j], &params.shared, z, &mut gx, &mut gu);
                for (o, g) in owner_x.iter_mut().zip(&gx) {
                    *o += g * scale / r as f64;
                }
                let (xpart, upart) = xg.split_at_mut(k - offset);
                if !shared_only {
                    xpart.iter_mut().zip(&gx).for_each(|(a, g)| *a += g * scale);
                }
                upart.iter_mut().zip(&gu).for_each(|(a, g)| *a += g * scale);
            }
        }
        let g = est.estimate(&user_grads, &mut noise_rng)?;
        if shared_only {
            gx.copy_from_slice(&owner_x);
            gu.copy_from_slice(&g);
        } else {
            gx.copy_from_slice(&g[..k]);
            gu.copy_from_slice(&g[k..]);
        }
        params.step_owner(j, &gx, &gu, cfg.eta, spec);
        if let Some(its) = iterates.as_mut() {
            its.push(params.clone());
        }
    }

    let tf = cfg.t as f64;
    for j in 0..n {
        let span = (cfg.t - last_t[j]) as f64;
        for (a, x) in acc_x[j].iter_mut().zip(&params.personalized[j]) {
            *a = (*a + x * span) / tf;
        }
    }
    acc_u.iter_mut().for_each(|a| *a /= tf);
    Ok(TrainResult {
        final_params: PartitionedParams {
            personalized: acc_x,
            shared: acc_u,
        },
        owner_shared: None,
        trace: Vec::new(),
        iterates,
        seed_sampling: cfg.seed_sampling,
        seed_noise: cfg.seed_noise,
        sigma: est.phase2_sigma(r),
        t: cfg.t,
        eta: cfg.eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticTask};

    fn setup(n: usize, k: usize, ell: usize, m: usize, r: usize, noise: f64) -> (DomainSpec, SyntheticTask, Federation) {
        let spec = DomainSpec::new(n, k, ell, 1.0, 2.0).unwrap();
        let task = SyntheticTask::shared_mean(&spec, noise, 0.5, 0.6, 3).unwrap();
        let fed = generate(
            &task,
            &ProblemSpec {
                n,
                m,
                r,
                record_dim: k + ell,
                seed: 5,
            },
        )
        .unwrap();
        (spec, task, fed)
    }

    fn cfg(paradigm: Paradigm, t: usize, eta: f64) -> OptimizerConfig {
        let privacy = if paradigm.is_private() {
            PrivacySpec::record(1.0, 1e-5)
        } else {
            PrivacySpec::none()
        };
        OptimizerConfig::new(paradigm, t, eta, privacy).with_seeds(11, 12)
    }

    #[test]
    fn single_iteration_returns_start() {
        let (spec, _, fed) = setup(3, 2, 3, 4, 2, 0.2);
        let mut c = cfg(Paradigm::CollabNoDp, 1, 0.5);
        c.init = InitPolicy::RandomInDomain;
        let res = run_rsgd(&fed, &LossModel::shared_mean_norm(), &spec, &c).unwrap();
        assert_eq!(res.final_params, initial_params(&spec, InitPolicy::RandomInDomain, init_seed(&c)));
    }

    #[test]
    fn zero_step_returns_start() {
        let (spec, _, fed) = setup(3, 2, 3, 4, 2, 0.2);
        let res = run_rsgd(&fed, &LossModel::shared_mean_norm(), &spec, &cfg(Paradigm::CollabNoDp, 50, 0.0)).unwrap();
        assert_eq!(res.final_params, PartitionedParams::zeros(&spec));
    }

    #[test]
    fn average_matches_explicit_iterates() {
        let (spec, _, fed) = setup(4, 2, 3, 5, 5, 0.3);
        let mut c = cfg(Paradigm::JointDp, 200, 0.05);
        c.record_iterates = true;
        let res = run_nsgd(&fed, &LossModel::shared_mean_norm(), &spec, &c).unwrap();
        let its = res.iterates.as_ref().unwrap();
        assert_eq!(its.len(), 201);
        let mut expect = PartitionedParams::zeros(&spec);
        for it in &its[..200] {
            for (e, x) in expect.personalized.iter_mut().zip(&it.personalized) {
                e.iter_mut().zip(x).for_each(|(a, b)| *a += b / 200.0);
            }
            expect.shared.iter_mut().zip(&it.shared).for_each(|(a, b)| *a += b / 200.0);
        }
        assert!(res.final_params.distance(&expect) < 1e-12);
    }

    #[test]
    fn one_personalized_block_changes_per_step() {
        let (spec, _, fed) = setup(4, 2, 3, 5, 5, 0.3);
        let mut c = cfg(Paradigm::FullDp, 300, 0.05);
        c.record_iterates = true;
        let res = run_full_dp(&fed, &LossModel::shared_mean_norm(), &spec, &c).unwrap();
        for w in res.iterates.unwrap().windows(2) {
            let changed = w[0]
                .personalized
                .iter()
                .zip(&w[1].personalized)
                .filter(|(a, b)| a != b)
                .count();
            assert!(changed <= 1);
            assert!(w[1].in_domain(&spec, 1e-12));
        }
    }

    #[test]
    fn unsampled_owner_keeps_initial_block() {
        // with two steps and many owners some owner is never touched
        let (spec, _, fed) = setup(50, 2, 3, 2, 1, 0.3);
        let mut c = cfg(Paradigm::JointDp, 2, 0.1);
        c.init = InitPolicy::RandomInDomain;
        c.record_iterates = true;
        let res = run_nsgd(&fed, &LossModel::shared_mean_norm(), &spec, &c).unwrap();
        let its = res.iterates.unwrap();
        let untouched = (0..50).filter(|&j| its[2].personalized[j] == its[0].personalized[j]).count();
        assert!(untouched >= 48);
        for j in 0..50 {
            if its[2].personalized[j] == its[0].personalized[j] {
                assert_eq!(res.final_params.personalized[j], its[0].personalized[j]);
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (spec, _, fed) = setup(3, 2, 3, 4, 2, 0.3);
        let model = LossModel::shared_mean_norm();
        for p in [Paradigm::CollabNoDp, Paradigm::JointDp, Paradigm::FullDp, Paradigm::PerSilo] {
            let c = cfg(p, 300, 0.05);
            let a = run(&fed, &model, &spec, &c, None).unwrap();
            let b = run(&fed, &model, &spec, &c, None).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn private_paradigms_need_privacy() {
        let (spec, _, fed) = setup(2, 1, 2, 4, 2, 0.3);
        let mut c = cfg(Paradigm::JointDp, 10, 0.1);
        c.privacy = PrivacySpec::none();
        assert!(run_nsgd(&fed, &LossModel::shared_mean_norm(), &spec, &c).is_err());
        let c = cfg(Paradigm::CollabNoDp, 10, 0.1);
        assert!(run_nsgd(&fed, &LossModel::shared_mean_norm(), &spec, &c).is_err());
        let c = cfg(Paradigm::CollabNoDp, 0, 0.1);
        assert!(run_rsgd(&fed, &LossModel::shared_mean_norm(), &spec, &c).is_err());
    }

    #[test]
    fn zero_k_full_dp_matches_joint_dp() {
        let (spec, _, fed) = setup(3, 0, 4, 6, 3, 0.3);
        let model = LossModel::shared_mean_norm();
        let a = run_nsgd(&fed, &model, &spec, &cfg(Paradigm::JointDp, 400, 0.05)).unwrap();
        let b = run_full_dp(&fed, &model, &spec, &cfg(Paradigm::FullDp, 400, 0.05)).unwrap();
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn per_silo_single_owner_is_rsgd() {
        let (spec, _, fed) = setup(1, 2, 3, 8, 4, 0.3);
        let model = LossModel::shared_mean_norm();
        let silo = run_per_silo(&fed, &model, &spec, &cfg(Paradigm::PerSilo, 64, 0.1)).unwrap();
        let c = cfg(Paradigm::CollabNoDp, 64, 0.1).with_seeds(silo_seed(11, 0), 12);
        let mut collab = run_rsgd(&fed, &model, &spec, &c).unwrap();
        // init seed follows the configured sampling seed
        let mut c2 = c;
        c2.seed_sampling = 11;
        let start = initial_params(&spec, c2.init, init_seed(&c2));
        assert_eq!(start, PartitionedParams::zeros(&spec));
        collab.owner_shared = silo.owner_shared.clone();
        assert_eq!(silo.final_params.personalized, collab.final_params.personalized);
        assert_eq!(silo.owner_shared.unwrap()[0], collab.final_params.shared);
    }

    #[test]
    fn identical_silos_agree() {
        let (spec, _, fed) = setup(2, 2, 3, 6, 3, 0.3);
        let mut shards = fed.shards.clone();
        shards[1] = shards[0].clone();
        let twin = Federation::new(3, shards).unwrap();
        let model = LossModel::shared_mean_norm();
        let c = cfg(Paradigm::PerSilo, 36, 0.1);
        let a = run_single_silo(&twin, 0, &model, &spec, &c, 99).unwrap();
        let b = run_single_silo(&twin, 1, &model, &spec, &c, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn smooth_variant_requires_smooth_loss_and_users() {
        let (spec, _, fed) = setup(3, 1, 2, 6, 3, 0.3);
        let c = cfg(Paradigm::SmoothJointDp, 5, 0.1);
        assert!(run_smooth_nsgd(&fed, &LossModel::shared_mean_norm(), &spec, &c).is_err());
        let (spec1, _, fed1) = setup(3, 1, 2, 6, 1, 0.3);
        assert!(run_smooth_nsgd(&fed1, &LossModel::shared_mean_huber(0.5).unwrap(), &spec1, &c).is_err());
        let ok = run_smooth_nsgd(&fed, &LossModel::shared_mean_huber(0.5).unwrap(), &spec, &c).unwrap();
        assert!(ok.final_params.in_domain(&spec, 1e-12));
    }

    #[test]
    fn smooth_singleton_shards_use_record_gradients() {
        // r = m with zero noise: each step moves by the exact owner-average gradient
        let (spec, _, fed) = setup(2, 1, 2, 4, 4, 0.3);
        let model = LossModel::shared_mean_huber(0.5).unwrap();
        let mut c = cfg(Paradigm::SmoothJointDp, 1, 0.0);
        c.smooth.noise_multiplier = 0.0;
        c.record_iterates = true;
        let res = run_smooth_nsgd(&fed, &model, &spec, &c).unwrap();
        assert_eq!(res.iterates.unwrap().len(), 2);
        let est = smooth_estimator(&model, &spec, 4, 4, &c).unwrap();
        let mut grads = Vec::new();
        for z in &fed.shards[0] {
            let g = crate::loss::grad(&model, 0, &[0.0], &[0.0, 0.0], z).unwrap();
            grads.push(g.grad_x.iter().chain(&g.grad_u).copied().collect::<Vec<_>>());
        }
        let mut rng = rng::stream(0);
        let mean = est.estimate(&grads, &mut rng).unwrap();
        let direct: Vec<f64> = (0..3).map(|c| grads.iter().map(|g| g[c]).sum::<f64>() / 4.0).collect();
        for (a, b) in mean.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn smooth_zero_gradient_update_is_identity() {
        // noise-free records at the start point give zero gradients
        let spec = DomainSpec::new(2, 1, 2, 1.0, 2.0).unwrap();
        let fed = Federation::new(2, vec![vec![vec![0.0; 3]; 4]; 2]).unwrap();
        let mut c = cfg(Paradigm::SmoothJointDp, 20, 0.3);
        c.smooth.noise_multiplier = 0.0;
        let res = run_smooth_nsgd(&fed, &LossModel::shared_mean_huber(0.5).unwrap(), &spec, &c).unwrap();
        assert_eq!(res.final_params, PartitionedParams::zeros(&spec));
    }

    #[test]
    fn defaults() {
        assert_eq!(default_iterations(Paradigm::JointDp, 4, 16, 1e-5, 1_000_000), 4096);
        assert_eq!(default_iterations(Paradigm::PerSilo, 4, 16, 1e-5, 1_000_000), 256);
        assert_eq!(default_iterations(Paradigm::CollabNoDp, 64, 256, 1e-5, 1_000_000), 1_000_000);
        let e = std::f64::consts::E;
        assert_eq!(default_iterations(Paradigm::SmoothJointDp, 10, 16, (-2.0f64).exp(), 1_000_000), 50);
        let eta = default_step_size(2.0, 1.0, 100, 0, 5.0);
        assert!((eta - 0.2).abs() < 1e-15);
        let eta = default_step_size(2.0, 1.0, 100, 3, 1.0);
        assert!((eta - 0.1).abs() < 1e-15);
        let _ = e;
    }

    #[test]
    fn initial_params_policies() {
        let spec = DomainSpec::new(5, 3, 4, 1.0, 2.0).unwrap();
        assert_eq!(initial_params(&spec, InitPolicy::Origin, 1), PartitionedParams::zeros(&spec));
        let a = initial_params(&spec, InitPolicy::RandomInDomain, 9);
        assert_eq!(a, initial_params(&spec, InitPolicy::RandomInDomain, 9));
        for seed in 0..200 {
            assert!(initial_params(&spec, InitPolicy::RandomInDomain, seed).in_domain(&spec, 1e-12));
        }
    }
}
