//! Experiment configuration: the TOML file schema and the fully resolved
//! per-run configuration that is hashed into every output row.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ProblemSpec, SyntheticTask, TaskKind};
use crate::domain::DomainSpec;
use crate::error::{config_err, Result};
use crate::loss::{LossKind, LossModel};
use crate::optim::{self, InitPolicy, OptimizerConfig, Paradigm, SmoothOptions};
use crate::privacy::{self, PrivacyLevel, PrivacySpec, PrivateMean};

pub const OUT_DIR_ENV: &str = "JOINTDP_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default)]
    pub kind: TaskKind,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
    #[serde(default = "default_center_frac")]
    pub center_frac: f64,
    #[serde(default = "one_f")]
    pub feature_bound: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub n: usize,
    pub m: usize,
    /// Users per owner; defaults to `m` (record level).
    #[serde(default)]
    pub r: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub k: usize,
    pub ell: usize,
    #[serde(default = "one_f")]
    pub d_x: f64,
    #[serde(default = "two_f")]
    pub d_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "default_loss")]
    pub kind: LossKind,
    /// Huber width.
    #[serde(default)]
    pub mu: Option<f64>,
}

/// `"auto"` (theory default), `"single_pass"` (T = mn, or m per silo) or a
/// fixed count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Iterations {
    Fixed(usize),
    Rule(IterationRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationRule {
    Auto,
    SinglePass,
}

/// `"auto"` or a fixed step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Fixed(f64),
    Rule(StepRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_paradigm")]
    pub paradigm: Paradigm,
    #[serde(default = "auto_iterations")]
    pub iterations: Iterations,
    #[serde(default = "auto_step")]
    pub eta: StepSize,
    #[serde(default = "default_t_cap")]
    pub t_cap: usize,
    #[serde(default = "default_level")]
    pub level: PrivacyLevel,
    #[serde(default = "one_f")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub init: InitPolicy,
    #[serde(default)]
    pub sigma_override: Option<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub privatize_shared_only: bool,
    #[serde(default = "one_f")]
    pub noise_multiplier: f64,
}

/// Grid axes; each present axis is crossed with the others.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub n: Option<Vec<usize>>,
    pub m: Option<Vec<usize>>,
    pub r: Option<Vec<usize>>,
    pub ell: Option<Vec<usize>>,
    pub epsilon: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    #[serde(rename = "T")]
    pub t: Option<Vec<usize>>,
    /// Users per owner for `user-sweep`.
    pub user_r: Option<Vec<usize>>,
    /// Neighbor pairs for `stability`.
    pub pairs: Option<usize>,
    /// Confidence level of fitted slopes.
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    #[serde(default = "default_csv")]
    pub csv: String,
    #[serde(default = "default_log")]
    pub log: String,
    /// Compute the optimization/generalization split for every run.
    #[serde(default)]
    pub decompose: bool,
    /// Record measured wall time in the CSV (makes it non-reproducible).
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub parallel: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            csv: default_csv(),
            log: default_log(),
            decompose: false,
            timing: false,
            parallel: false,
        }
    }
}

/// Parsed configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "one_u")]
    pub repetitions: usize,
    #[serde(default = "default_eval")]
    pub eval_samples: usize,
    /// Base seed; repetition seeds are derived from it.
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSection,
    pub problem: ProblemSection,
    pub domain: DomainSection,
    #[serde(default = "default_loss_section")]
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_noise_scale() -> f64 {
    0.3
}
fn default_heterogeneity() -> f64 {
    0.5
}
fn default_center_frac() -> f64 {
    0.6
}
fn one_f() -> f64 {
    1.0
}
fn two_f() -> f64 {
    2.0
}
fn one_u() -> usize {
    1
}
fn default_eval() -> usize {
    10_000
}
fn default_loss() -> LossKind {
    LossKind::SharedMeanNorm
}
fn default_loss_section() -> LossSection {
    LossSection {
        kind: default_loss(),
        mu: None,
    }
}
fn default_paradigm() -> Paradigm {
    Paradigm::JointDp
}
fn auto_iterations() -> Iterations {
    Iterations::Rule(IterationRule::Auto)
}
fn auto_step() -> StepSize {
    StepSize::Rule(StepRule::Auto)
}
fn default_t_cap() -> usize {
    1_000_000
}
fn default_level() -> PrivacyLevel {
    PrivacyLevel::Record
}
fn default_delta() -> f64 {
    1e-5
}
fn default_gamma() -> f64 {
    0.01
}
fn default_csv() -> String {
    "results.csv".into()
}
fn default_log() -> String {
    "runs.jsonl".into()
}

/// Overrides applied on top of a configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub repetitions: Option<usize>,
    pub eval_samples: Option<usize>,
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = Some(d.clone());
        }
        if let Some(r) = o.repetitions {
            self.repetitions = r;
        }
        if let Some(e) = o.eval_samples {
            self.eval_samples = e;
        }
        self.output.timing |= o.timing;
        self.validate()
    }

    /// Output directory: config, then the environment, then `.`.
    pub fn out_dir(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(config_err("repetitions must be at least 1"));
        }
        if self.eval_samples == 0 {
            return Err(config_err("eval_samples must be at least 1"));
        }
        let s = &self.sweep;
        let empty = [
            ("n", s.n.as_ref().map(Vec::len)),
            ("m", s.m.as_ref().map(Vec::len)),
            ("r", s.r.as_ref().map(Vec::len)),
            ("ell", s.ell.as_ref().map(Vec::len)),
            ("epsilon", s.epsilon.as_ref().map(Vec::len)),
            ("eta", s.eta.as_ref().map(Vec::len)),
            ("T", s.t.as_ref().map(Vec::len)),
            ("user_r", s.user_r.as_ref().map(Vec::len)),
        ];
        for (name, len) in empty {
            if len == Some(0) {
                return Err(config_err(format!("sweep axis {name} is empty")));
            }
        }
        if s.pairs == Some(0) {
            return Err(config_err("sweep.pairs must be at least 1"));
        }
        if let Some(l) = s.level {
            if !(l > 0.0 && l < 1.0) {
                return Err(config_err("sweep.level must be in (0, 1)"));
            }
        }
        self.resolve(&GridPoint::default(), self.optimizer.paradigm).map(|_| ())
    }

    /// Resolve the run at a grid point for a paradigm.
    pub fn resolve(&self, point: &GridPoint, paradigm: Paradigm) -> Result<RunConfig> {
        let n = point.n.unwrap_or(self.problem.n);
        let m = point.m.unwrap_or(self.problem.m);
        let r = point.r.or(self.problem.r).unwrap_or(m);
        let ell = point.ell.unwrap_or(self.domain.ell);
        let epsilon = point.epsilon.unwrap_or(self.optimizer.epsilon);
        let o = &self.optimizer;
        let level = if paradigm.is_private() { o.level } else { PrivacyLevel::None };
        if paradigm.is_private() && level == PrivacyLevel::None {
            return Err(config_err(format!("paradigm {} needs optimizer.level record or user", paradigm.as_str())));
        }
        let mut rc = RunConfig {
            task: self.task.clone(),
            n,
            m,
            r,
            k: self.domain.k,
            ell,
            d_x: self.domain.d_x,
            d_u: self.domain.d_u,
            loss: self.loss.clone(),
            paradigm,
            t: 0,
            eta: 0.0,
            level,
            epsilon,
            delta: o.delta,
            init: o.init,
            sigma_override: o.sigma_override,
            smooth: SmoothOptions {
                gamma: o.gamma,
                privatize_shared_only: o.privatize_shared_only,
                noise_multiplier: o.noise_multiplier,
            },
            eval_samples: self.eval_samples,
            decompose: self.output.decompose,
        };
        rc.t = match point.t.map(Iterations::Fixed).unwrap_or(o.iterations) {
            Iterations::Fixed(t) if paradigm == Paradigm::PerSilo => t.div_ceil(n),
            Iterations::Fixed(t) => t,
            Iterations::Rule(IterationRule::Auto) => optim::default_iterations(paradigm, n, m, o.delta, o.t_cap),
            Iterations::Rule(IterationRule::SinglePass) if paradigm == Paradigm::PerSilo => m,
            Iterations::Rule(IterationRule::SinglePass) => n * m,
        };
        rc.eta = match point.eta.map(StepSize::Fixed).unwrap_or(o.eta) {
            StepSize::Fixed(e) => e,
            StepSize::Rule(StepRule::Auto) => rc.default_eta()?,
        };
        rc.validate()?;
        Ok(rc)
    }
}

/// Values of the swept axes at one grid point; `None` keeps the base value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub r: Option<usize>,
    pub ell: Option<usize>,
    pub epsilon: Option<f64>,
    pub eta: Option<f64>,
    pub t: Option<usize>,
}

impl SweepSection {
    /// Names of the axes that are present.
    pub fn axes(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        macro_rules! push {
            ($f:ident, $name:expr) => {
                if self.$f.is_some() {
                    v.push($name);
                }
            };
        }
        push!(n, "n");
        push!(m, "m");
        push!(r, "r");
        push!(ell, "ell");
        push!(epsilon, "epsilon");
        push!(eta, "eta");
        push!(t, "T");
        v
    }

    /// Cartesian product of the present axes, first axis slowest.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut pts = vec![GridPoint::default()];
        macro_rules! cross {
            ($f:ident) => {
                if let Some(vals) = &self.$f {
                    pts = pts
                        .iter()
                        .flat_map(|p| {
                            vals.iter().map(move |v| GridPoint {
                                $f: Some(*v),
                                ..*p
                            })
                        })
                        .collect();
                }
            };
        }
        cross!(n);
        cross!(m);
        cross!(r);
        cross!(ell);
        cross!(epsilon);
        cross!(eta);
        cross!(t);
        pts
    }
}

impl GridPoint {
    pub fn axis_value(&self, axis: &str) -> Option<f64> {
        match axis {
            "n" => self.n.map(|v| v as f64),
            "m" => self.m.map(|v| v as f64),
            "r" => self.r.map(|v| v as f64),
            "ell" => self.ell.map(|v| v as f64),
            "epsilon" => self.epsilon,
            "eta" => self.eta,
            "T" => self.t.map(|v| v as f64),
            _ => None,
        }
    }
}

/// Everything that determines one run apart from its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSection,
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub k: usize,
    pub ell: usize,
    pub d_x: f64,
    pub d_u: f64,
    pub loss: LossSection,
    pub paradigm: Paradigm,
    #[serde(rename = "T")]
    pub t: usize,
    pub eta: f64,
    pub level: PrivacyLevel,
    pub epsilon: f64,
    pub delta: f64,
    pub init: InitPolicy,
    pub sigma_override: Option<f64>,
    pub smooth: SmoothOptions,
    pub eval_samples: usize,
    pub decompose: bool,
}

impl RunConfig {
    pub fn domain(&self) -> Result<DomainSpec> {
        DomainSpec::new(self.n, self.k, self.ell, self.d_x, self.d_u)
    }

    pub fn problem(&self, data_seed: u64) -> ProblemSpec {
        ProblemSpec {
            n: self.n,
            m: self.m,
            r: self.r,
            record_dim: self.record_dim(),
            seed: data_seed,
        }
    }

    pub fn record_dim(&self) -> usize {
        match self.task.kind {
            TaskKind::SharedMean => self.k + self.ell,
            TaskKind::Logistic => self.k + self.ell + 1,
        }
    }

    pub fn privacy(&self) -> PrivacySpec {
        PrivacySpec {
            epsilon: self.epsilon,
            delta: self.delta,
            level: self.level,
        }
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        let d = self.domain()?;
        let t = &self.task;
        match t.kind {
            TaskKind::SharedMean => SyntheticTask::shared_mean(&d, t.noise_scale, t.heterogeneity, t.center_frac, t.seed),
            TaskKind::Logistic => SyntheticTask::logistic(&d, t.heterogeneity, t.center_frac, t.feature_bound, t.seed),
        }
    }

    pub fn model(&self) -> Result<LossModel> {
        match self.loss.kind {
            LossKind::SharedMeanNorm => Ok(LossModel::shared_mean_norm()),
            LossKind::SharedMeanHuber => LossModel::shared_mean_huber(self.loss.mu.unwrap_or(0.5)),
            LossKind::Logistic => LossModel::logistic(self.task.feature_bound),
        }
    }

    pub fn optimizer(&self, seed_sampling: u64, seed_noise: u64) -> OptimizerConfig {
        OptimizerConfig {
            t: self.t,
            eta: self.eta,
            paradigm: self.paradigm,
            privacy: self.privacy(),
            seed_sampling,
            seed_noise,
            init: self.init,
            sigma_override: self.sigma_override,
            smooth: self.smooth,
            record_iterates: false,
            trace_every: None,
        }
    }

    /// Noise scale the run will use.
    pub fn sigma(&self) -> Result<f64> {
        let model = self.model()?;
        if self.paradigm == Paradigm::SmoothJointDp {
            if let Some(s) = self.sigma_override {
                return Ok(s);
            }
            let est = self.smooth_estimator()?;
            return Ok(est.phase2_sigma(self.r) * est.noise_multiplier);
        }
        optim::planned_sigma(&self.optimizer(0, 0), &model, &self.problem(0))
    }

    fn smooth_estimator(&self) -> Result<PrivateMean> {
        optim::smooth_estimator(&self.model()?, &self.domain()?, self.m, self.r, &self.optimizer(0, 0))
    }

    fn default_eta(&self) -> Result<f64> {
        let model = self.model()?;
        let domain = self.domain()?;
        if self.paradigm == Paradigm::PerSilo {
            let r_silo = self.d_x.hypot(self.d_u);
            return Ok(optim::default_step_size(r_silo, model.lipschitz, self.t, 0, 0.0));
        }
        let dim = optim::noise_dim(self.paradigm, &domain, self.smooth.privatize_shared_only);
        let sigma = if dim == 0 { 0.0 } else { self.sigma()? };
        Ok(optim::default_step_size(domain.radius(), model.lipschitz, self.t, dim, sigma))
    }

    /// Leading-order excess-loss bound of the paradigm with unit constant.
    pub fn bound_value(&self) -> Result<f64> {
        let model = self.model()?;
        let domain = self.domain()?;
        let l = model.lipschitz;
        let rl = domain.radius() * l;
        let mn = (self.m * self.n) as f64;
        let (eps, delta) = (self.epsilon, self.delta);
        let noise_term = |dim: f64| -> f64 {
            if self.level == PrivacyLevel::User {
                (dim * (self.m as f64 / (self.r as f64 * delta)).ln()).sqrt() / (eps * (self.n * self.r) as f64)
            } else {
                (dim * (1.0 / delta).ln()).sqrt() / (eps * mn)
            }
        };
        Ok(match self.paradigm {
            Paradigm::PerSilo => l * (self.d_x + self.d_u) / (self.m as f64).sqrt(),
            Paradigm::CollabNoDp => rl / mn.sqrt(),
            Paradigm::JointDp | Paradigm::SmoothJointDp => rl * (1.0 / mn.sqrt() + noise_term(self.ell as f64)),
            Paradigm::FullDp => rl * (1.0 / mn.sqrt() + noise_term((self.n * self.k + self.ell) as f64)),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let domain = self.domain()?;
        self.problem(0).validate()?;
        let model = self.model()?;
        let task = self.task()?;
        if !model.compatible_with(&task) {
            return Err(config_err(format!("loss {:?} does not fit task {:?}", model.kind, task.kind)));
        }
        if self.paradigm == Paradigm::SmoothJointDp && model.smoothness.is_none() {
            return Err(config_err("smooth_joint_dp needs a smooth loss (huber or logistic)"));
        }
        if self.level == PrivacyLevel::User {
            privacy::user_level_reduction(self.epsilon, self.delta, self.m, self.r)?;
        }
        let _ = domain;
        self.optimizer(0, 0).validate()
    }

    /// Canonical serialization used for hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("run configuration serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
