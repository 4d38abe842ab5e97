//! Noise calibration, group privacy, the user-to-record budget reduction,
//! a two-phase private mean estimator and budget reports.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ProblemSpec;
use crate::domain::{norm, project_ball};
use crate::error::{config_err, Error, Result};

/// Largest epsilon accepted for a private run.
pub const MAX_EPSILON: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyLevel {
    None,
    Record,
    User,
}

impl PrivacyLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Record => "record",
            Self::User => "user",
        }
    }
}

impl std::str::FromStr for PrivacyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "record" => Ok(Self::Record),
            "user" => Ok(Self::User),
            other => Err(config_err(format!("unknown privacy level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub level: PrivacyLevel,
}

impl PrivacySpec {
    pub fn none() -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta: 0.0,
            level: PrivacyLevel::None,
        }
    }

    pub fn record(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            level: PrivacyLevel::Record,
        }
    }

    pub fn user(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            level: PrivacyLevel::User,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level == PrivacyLevel::None {
            return Ok(());
        }
        check_epsilon(self.epsilon)?;
        check_delta(self.delta)
    }

    /// Record-level `(ε′, δ′)` that the per-step noise must be calibrated to.
    pub fn record_budget(&self, m: usize, r: usize) -> Result<(f64, f64)> {
        match self.level {
            PrivacyLevel::None => Err(config_err("no budget for a non-private run")),
            PrivacyLevel::Record => Ok((self.epsilon, self.delta)),
            PrivacyLevel::User => user_level_reduction(self.epsilon, self.delta, m, r),
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon <= MAX_EPSILON {
        Ok(())
    } else {
        Err(config_err(format!("epsilon must lie in (0, {MAX_EPSILON}], got {epsilon}")))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(config_err(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// Per-coordinate noise for the noisy-SGD update:
/// `σ = L·sqrt(T·ln(1/δ)) / (ε·m·n)`.
pub fn calibrate_sigma(lipschitz: f64, t: usize, epsilon: f64, delta: f64, m: usize, n: usize) -> Result<f64> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(config_err(format!("Lipschitz constant must be > 0, got {lipschitz}")));
    }
    if t == 0 || m == 0 || n == 0 {
        return Err(config_err("T, m and n must be positive"));
    }
    check_epsilon(epsilon)?;
    check_delta(delta)?;
    Ok(lipschitz * (t as f64 * (1.0 / delta).ln()).sqrt() / (epsilon * m as f64 * n as f64))
}

/// Indistinguishability of datasets differing in `group` records:
/// `(k·ε, k·e^{k·ε}·δ)`. A group of one is the guarantee itself.
pub fn group_privacy_lift(epsilon: f64, delta: f64, group: usize) -> Result<(f64, f64)> {
    if group == 0 {
        return Err(config_err("group size must be at least 1"));
    }
    if group == 1 {
        return Ok((epsilon, delta));
    }
    let k = group as f64;
    let eps = k * epsilon;
    Ok((eps, k * eps.exp() * delta))
}

/// Record-level budget that yields user-level `(ε, δ)` after group privacy
/// over the `m / r` records of one user: `ε′ = ε·r/m`, `δ′ = δ·r/(m·e^ε)`.
/// With `r = m` the budget is returned unchanged.
pub fn user_level_reduction(epsilon: f64, delta: f64, m: usize, r: usize) -> Result<(f64, f64)> {
    if r == 0 || m == 0 || !m.is_multiple_of(r) {
        return Err(config_err(format!("r = {r} must divide m = {m}")));
    }
    check_epsilon(epsilon)?;
    check_delta(delta)?;
    let g = m / r;
    if g == 1 {
        return Ok((epsilon, delta));
    }
    let group = g as f64;
    // Round toward the conservative side so that lifting back never exceeds
    // (ε, δ) in floating point.
    let mut eps_rec = epsilon / group;
    while group * eps_rec > epsilon {
        eps_rec = eps_rec.next_down();
    }
    let mut delta_rec = delta / (group * epsilon.exp());
    while group_privacy_lift(eps_rec, delta_rec, g)?.1 > delta {
        delta_rec = delta_rec.next_down();
    }
    Ok((eps_rec, delta_rec))
}

/// Concentration radius of per-user average gradients:
/// `τ = (L·sqrt(r/m))·(sqrt(ln(1/γ)) + sqrt(ell·ln(R·H·m/(ell·L))))`.
/// A log argument at or below 1 is replaced by `e`.
pub fn concentration_radius(lipschitz: f64, r: usize, m: usize, gamma: f64, ell: usize, radius: f64, smoothness: f64) -> Result<f64> {
    if !(lipschitz > 0.0 && radius > 0.0 && smoothness > 0.0) || r == 0 || m == 0 || ell == 0 {
        return Err(config_err("concentration radius arguments must be positive"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(config_err(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let ellf = ell as f64;
    let mut arg = radius * smoothness * m as f64 / (ellf * lipschitz);
    if arg <= 1.0 {
        arg = std::f64::consts::E;
    }
    let scale = lipschitz * (r as f64 / m as f64).sqrt();
    Ok(scale * ((1.0 / gamma).ln().sqrt() + (ellf * arg.ln()).sqrt()))
}

/// Gaussian-mechanism noise for a query of the given L2 sensitivity:
/// `σ = Δ·sqrt(2·ln(2.5/δ))/ε`.
pub fn gaussian_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> f64 {
    sensitivity * (2.0 * (2.5 / delta).ln()).sqrt() / epsilon
}

/// Two-phase clip-and-noise mean estimator for concentrated samples.
///
/// Phase 1 averages samples clipped to `bound` and adds noise for
/// sensitivity `2·bound/count`; phase 2 clips samples to the ball of radius
/// `2τ` around that center and adds noise for sensitivity `4τ/count`. Each
/// phase spends half of `(ε, δ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivateMean {
    pub epsilon: f64,
    pub delta: f64,
    pub tau: f64,
    /// Declared bound on every sample norm.
    pub bound: f64,
    /// Scale applied to both noise draws; 0 disables noise.
    pub noise_multiplier: f64,
}

impl PrivateMean {
    pub fn new(epsilon: f64, delta: f64, tau: f64, bound: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(config_err(format!("epsilon must be > 0, got {epsilon}")));
        }
        check_delta(delta)?;
        if !(tau > 0.0 && bound > 0.0) {
            return Err(config_err("tau and bound must be positive"));
        }
        Ok(Self {
            epsilon,
            delta,
            tau,
            bound,
            noise_multiplier: 1.0,
        })
    }

    pub fn without_noise(mut self) -> Self {
        self.noise_multiplier = 0.0;
        self
    }

    pub fn phase1_sigma(&self, count: usize) -> f64 {
        self.noise_multiplier * gaussian_sigma(2.0 * self.bound / count as f64, self.epsilon / 2.0, self.delta / 2.0)
    }

    pub fn phase2_sigma(&self, count: usize) -> f64 {
        self.noise_multiplier * gaussian_sigma(4.0 * self.tau / count as f64, self.epsilon / 2.0, self.delta / 2.0)
    }

    pub fn estimate<R: Rng + ?Sized>(&self, samples: &[Vec<f64>], rng: &mut R) -> Result<Vec<f64>> {
        let count = samples.len();
        if count < 2 {
            return Err(config_err("private mean needs at least two samples"));
        }
        let dim = samples[0].len();
        for s in samples {
            if s.len() != dim {
                return Err(Error::Dimension {
                    what: "private mean sample",
                    expected: dim,
                    actual: s.len(),
                });
            }
            if norm(s) > self.bound * (1.0 + 1e-12) {
                return Err(config_err(format!(
                    "sample norm {} exceeds declared bound {}",
                    norm(s),
                    self.bound
                )));
            }
        }
        let inv = 1.0 / count as f64;

        let mut center = vec![0.0; dim];
        let mut buf = vec![0.0; dim];
        for s in samples {
            buf.copy_from_slice(s);
            project_ball(&mut buf, self.bound);
            center.iter_mut().zip(&buf).for_each(|(c, v)| *c += v * inv);
        }
        let s1 = self.phase1_sigma(count);
        for c in center.iter_mut() {
            *c += s1 * rng.sample::<f64, _>(StandardNormal);
        }

        let mut out = vec![0.0; dim];
        for s in samples {
            buf.iter_mut().zip(s).zip(&center).for_each(|((b, v), c)| *b = v - c);
            project_ball(&mut buf, 2.0 * self.tau);
            out.iter_mut().zip(&buf).zip(&center).for_each(|((o, b), c)| *o += (c + b) * inv);
        }
        let s2 = self.phase2_sigma(count);
        for o in out.iter_mut() {
            *o += s2 * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(out)
    }
}

/// Convenience wrapper around [`PrivateMean::estimate`].
pub fn private_mean<R: Rng + ?Sized>(samples: &[Vec<f64>], epsilon: f64, delta: f64, tau: f64, bound: f64, rng: &mut R) -> Result<Vec<f64>> {
    PrivateMean::new(epsilon, delta, tau, bound)?.estimate(samples, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisedBlocks {
    None,
    SharedOnly,
    AllBlocks,
}

impl NoisedBlocks {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::SharedOnly => "shared_only",
            Self::AllBlocks => "all_blocks",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub sigma: f64,
    pub noised_blocks: NoisedBlocks,
    /// Iteration count assumed by the calibration.
    pub t: usize,
}

impl NoisePlan {
    pub fn none(t: usize) -> Self {
        Self {
            sigma: 0.0,
            noised_blocks: NoisedBlocks::None,
            t,
        }
    }

    /// Calibrate noise for `T` iterations on a problem with `n` owners,
    /// `m` records and `r` users per owner.
    pub fn calibrate(privacy: &PrivacySpec, blocks: NoisedBlocks, lipschitz: f64, t: usize, problem: &ProblemSpec) -> Result<Self> {
        privacy.validate()?;
        if privacy.level == PrivacyLevel::None || blocks == NoisedBlocks::None {
            return Ok(Self::none(t));
        }
        let (eps, delta) = privacy.record_budget(problem.m, problem.r)?;
        Ok(Self {
            sigma: calibrate_sigma(lipschitz, t, eps, delta, problem.m, problem.n)?,
            noised_blocks: blocks,
            t,
        })
    }
}

/// Summary of a run's privacy parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub level: PrivacyLevel,
    pub epsilon: f64,
    pub delta: f64,
    pub epsilon_record: f64,
    pub delta_record: f64,
    pub sigma: f64,
    pub t: usize,
    pub noised_blocks: NoisedBlocks,
}

pub fn budget_report(spec: &PrivacySpec, plan: &NoisePlan, problem: &ProblemSpec) -> Result<BudgetReport> {
    let (epsilon_record, delta_record) = match spec.level {
        PrivacyLevel::None => (spec.epsilon, spec.delta),
        _ => spec.record_budget(problem.m, problem.r)?,
    };
    let none = spec.level == PrivacyLevel::None;
    Ok(BudgetReport {
        level: spec.level,
        epsilon: spec.epsilon,
        delta: spec.delta,
        epsilon_record,
        delta_record,
        sigma: if none { 0.0 } else { plan.sigma },
        t: plan.t,
        noised_blocks: if none { NoisedBlocks::None } else { plan.noised_blocks },
    })
}

impl BudgetReport {
    pub const KEYS: [&'static str; 8] = [
        "level",
        "epsilon",
        "delta",
        "epsilon_record",
        "delta_record",
        "sigma",
        "T",
        "noised_blocks",
    ];

    /// Flat `key=value` lines in the order of [`Self::KEYS`].
    pub fn to_kv(&self) -> String {
        format!(
            "level={}\nepsilon={}\ndelta={}\nepsilon_record={}\ndelta_record={}\nsigma={}\nT={}\nnoised_blocks={}\n",
            self.level.as_str(),
            self.epsilon,
            self.delta,
            self.epsilon_record,
            self.delta_record,
            self.sigma,
            self.t,
            self.noised_blocks.as_str()
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k).ok_or(Error::Parse {
                line: 0,
                msg: format!("missing key {k}"),
            })
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse::<f64>().map_err(|e| Error::Parse {
                line: 0,
                msg: format!("{k}: {e}"),
            })
        };
        let noised_blocks = match get("noised_blocks")?.as_str() {
            "none" => NoisedBlocks::None,
            "shared_only" => NoisedBlocks::SharedOnly,
            "all_blocks" => NoisedBlocks::AllBlocks,
            other => {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("unknown noised_blocks {other:?}"),
                })
            }
        };
        Ok(Self {
            level: get("level")?.parse()?,
            epsilon: num("epsilon")?,
            delta: num("delta")?,
            epsilon_record: num("epsilon_record")?,
            delta_record: num("delta_record")?,
            sigma: num("sigma")?,
            t: get("T")?.parse().map_err(|e| Error::Parse {
                line: 0,
                msg: format!("T: {e}"),
            })?,
            noised_blocks,
        })
    }
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "privacy level      {}", self.level.as_str())?;
        writeln!(f, "budget             epsilon = {}, delta = {}", self.epsilon, self.delta)?;
        if self.level == PrivacyLevel::User {
            writeln!(
                f,
                "record-level       epsilon = {}, delta = {}",
                self.epsilon_record, self.delta_record
            )?;
        }
        writeln!(f, "iterations         {}", self.t)?;
        writeln!(f, "noise sigma        {}", self.sigma)?;
        write!(f, "noised blocks      {}", self.noised_blocks.as_str())
    }
}
