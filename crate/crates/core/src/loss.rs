//! Convex Lipschitz per-record losses `h(x_j, u, z)` and the empirical and
//! population objectives built from them.

use serde::{Deserialize, Serialize};

use crate::data::{Federation, SyntheticTask, TaskKind};
use crate::domain::{dot, BlockGradient, PartitionedParams};
use crate::error::{check_dim, config_err, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `‖x_j − z_x‖ + ‖u − z_u‖`
    SharedMeanNorm,
    /// Huber-smoothed version of the above.
    SharedMeanHuber,
    /// `log(1 + exp(−y(⟨x_j, a⟩ + ⟨u, b⟩)))`
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub lipschitz: f64,
    /// Gradient Lipschitz constant, when the loss is smooth.
    pub smoothness: Option<f64>,
    /// Huber threshold.
    pub mu: Option<f64>,
}

impl LossModel {
    pub fn shared_mean_norm() -> Self {
        Self {
            kind: LossKind::SharedMeanNorm,
            lipschitz: std::f64::consts::SQRT_2,
            smoothness: None,
            mu: None,
        }
    }

    pub fn shared_mean_huber(mu: f64) -> Result<Self> {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(config_err(format!("huber threshold must be > 0, got {mu}")));
        }
        Ok(Self {
            kind: LossKind::SharedMeanHuber,
            lipschitz: std::f64::consts::SQRT_2,
            smoothness: Some(1.0 / mu),
            mu: Some(mu),
        })
    }

    /// Logistic loss on features of norm at most `feature_bound`.
    pub fn logistic(feature_bound: f64) -> Result<Self> {
        if !(feature_bound.is_finite() && feature_bound > 0.0) {
            return Err(config_err("logistic feature bound must be > 0"));
        }
        Ok(Self {
            kind: LossKind::Logistic,
            lipschitz: feature_bound,
            smoothness: Some(feature_bound * feature_bound / 4.0),
            mu: None,
        })
    }

    /// Record dimension expected for personalized dim `k` and shared dim `ell`.
    pub fn record_dim(&self, k: usize, ell: usize) -> usize {
        match self.kind {
            LossKind::Logistic => k + ell + 1,
            _ => k + ell,
        }
    }

    /// Whether the loss matches a task's record layout.
    pub fn compatible_with(&self, task: &SyntheticTask) -> bool {
        matches!(
            (self.kind, task.kind),
            (LossKind::SharedMeanNorm | LossKind::SharedMeanHuber, TaskKind::SharedMean) | (LossKind::Logistic, TaskKind::Logistic)
        )
    }

    /// Loss value without dimension checks.
    #[inline]
    pub fn value(&self, x: &[f64], u: &[f64], z: &[f64]) -> f64 {
        let k = x.len();
        match self.kind {
            LossKind::SharedMeanNorm => diff_norm(x, &z[..k]) + diff_norm(u, &z[k..k + u.len()]),
            LossKind::SharedMeanHuber => {
                let mu = self.mu.unwrap_or(1.0);
                huber(diff_norm(x, &z[..k]), mu) + huber(diff_norm(u, &z[k..k + u.len()]), mu)
            }
            LossKind::Logistic => {
                let ell = u.len();
                let y = z[k + ell];
                let s = y * (dot(x, &z[..k]) + dot(u, &z[k..k + ell]));
                softplus(-s)
            }
        }
    }

    /// Gradient into caller-provided buffers, without dimension checks.
    /// At a norm kink the minimum-norm subgradient (zero) is used.
    #[inline]
    pub fn grad_into(&self, x: &[f64], u: &[f64], z: &[f64], gx: &mut [f64], gu: &mut [f64]) {
        let k = x.len();
        let ell = u.len();
        match self.kind {
            LossKind::SharedMeanNorm => {
                unit_diff(x, &z[..k], 0.0, gx);
                unit_diff(u, &z[k..k + ell], 0.0, gu);
            }
            LossKind::SharedMeanHuber => {
                let mu = self.mu.unwrap_or(1.0);
                unit_diff(x, &z[..k], mu, gx);
                unit_diff(u, &z[k..k + ell], mu, gu);
            }
            LossKind::Logistic => {
                let y = z[k + ell];
                let s = y * (dot(x, &z[..k]) + dot(u, &z[k..k + ell]));
                let c = -y * sigmoid(-s);
                for (g, a) in gx.iter_mut().zip(&z[..k]) {
                    *g = c * a;
                }
                for (g, b) in gu.iter_mut().zip(&z[k..k + ell]) {
                    *g = c * b;
                }
            }
        }
    }

    fn check(&self, x: &[f64], u: &[f64], z: &[f64]) -> Result<()> {
        check_dim("record", self.record_dim(x.len(), u.len()), z.len())
    }
}

#[inline]
fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// `(a − b) / max(‖a − b‖, floor)`, zero when `a = b`.
#[inline]
fn unit_diff(a: &[f64], b: &[f64], floor: f64, out: &mut [f64]) {
    let nrm = diff_norm(a, b);
    let denom = nrm.max(floor);
    if denom == 0.0 {
        out.iter_mut().for_each(|g| *g = 0.0);
    } else {
        for ((g, p), q) in out.iter_mut().zip(a).zip(b) {
            *g = (p - q) / denom;
        }
    }
}

#[inline]
fn huber(r: f64, mu: f64) -> f64 {
    if r <= mu {
        r * r / (2.0 * mu)
    } else {
        r - mu / 2.0
    }
}

#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Checked loss evaluation.
pub fn loss(model: &LossModel, x: &[f64], u: &[f64], z: &[f64]) -> Result<f64> {
    model.check(x, u, z)?;
    Ok(model.value(x, u, z))
}

/// Checked gradient with respect to `(x_j, u)` for owner `owner`.
pub fn grad(model: &LossModel, owner: usize, x: &[f64], u: &[f64], z: &[f64]) -> Result<BlockGradient> {
    model.check(x, u, z)?;
    let mut gx = vec![0.0; x.len()];
    let mut gu = vec![0.0; u.len()];
    model.grad_into(x, u, z, &mut gx, &mut gu);
    Ok(BlockGradient::single(owner, gx, gu))
}

/// Read access to each owner's `(x_j, u_j)`. Joint training shares one `u`;
/// per-silo training keeps a copy per owner.
pub trait OwnerParams {
    fn owners(&self) -> usize;
    fn owner(&self, j: usize) -> (&[f64], &[f64]);
}

impl OwnerParams for PartitionedParams {
    fn owners(&self) -> usize {
        self.personalized.len()
    }

    fn owner(&self, j: usize) -> (&[f64], &[f64]) {
        (&self.personalized[j], &self.shared)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveContext {
    PopulationEstimate,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Monte-Carlo standard error; zero for exact empirical averages.
    pub stderr: f64,
    pub context: ObjectiveContext,
}

/// Exact average of `h` over all `n·m` records.
pub fn empirical_loss<P: OwnerParams + ?Sized>(model: &LossModel, params: &P, fed: &Federation) -> Result<ObjectiveValue> {
    check_dim("owners", fed.n(), params.owners())?;
    let mut total = 0.0;
    for (j, shard) in fed.shards.iter().enumerate() {
        let (x, u) = params.owner(j);
        if let Some(z) = shard.first() {
            model.check(x, u, z)?;
        }
        total += shard.iter().map(|z| model.value(x, u, z)).sum::<f64>();
    }
    Ok(ObjectiveValue {
        value: total / (fed.n() * fed.m) as f64,
        stderr: 0.0,
        context: ObjectiveContext::Empirical,
    })
}

/// Stream seed for owner `j`'s evaluation samples. Shared by every estimator
/// so that evaluations with equal seeds use common random numbers.
fn eval_stream(seed: u64, owner: usize) -> rng::StreamRng {
    rng::stream(rng::derive(seed, 0xE7A1_0000 + owner as u64))
}

/// Monte-Carlo estimate of `f = (1/n) Σ_j E_{z∼P_j} h(x_j, u, z)` from
/// `n_samples` fresh draws per owner.
pub fn population_loss_estimate<P: OwnerParams + ?Sized>(
    model: &LossModel,
    params: &P,
    task: &SyntheticTask,
    n_samples: usize,
    seed: u64,
) -> Result<ObjectiveValue> {
    check_estimate_args(model, params, task, n_samples)?;
    let n = params.owners();
    let mut value = 0.0;
    let mut var = 0.0;
    for j in 0..n {
        let (x, u) = params.owner(j);
        let mut rng = eval_stream(seed, j);
        let mut acc = MeanVar::default();
        for _ in 0..n_samples {
            let z = task.sample_record(j, &mut rng);
            acc.push(model.value(x, u, &z));
        }
        value += acc.mean();
        var += acc.var_of_mean();
    }
    Ok(ObjectiveValue {
        value: value / n as f64,
        stderr: var.sqrt() / n as f64,
        context: ObjectiveContext::PopulationEstimate,
    })
}

/// Monte-Carlo estimate of `f(params) − f(reference)` from paired draws.
///
/// With `reference_is_stationary`, the control variate
/// `⟨∇h(reference, z), params − reference⟩` is subtracted from every draw.
/// It has mean zero whenever the expected gradient vanishes at the reference,
/// which holds at the center of a symmetric shared-mean task.
pub fn excess_population_loss<P: OwnerParams + ?Sized, Q: OwnerParams + ?Sized>(
    model: &LossModel,
    params: &P,
    reference: &Q,
    task: &SyntheticTask,
    n_samples: usize,
    seed: u64,
    reference_is_stationary: bool,
) -> Result<ObjectiveValue> {
    check_estimate_args(model, params, task, n_samples)?;
    check_dim("reference owners", params.owners(), reference.owners())?;
    let n = params.owners();
    let mut value = 0.0;
    let mut var = 0.0;
    for j in 0..n {
        let (x, u) = params.owner(j);
        let (rx, ru) = reference.owner(j);
        check_dim("reference x block", x.len(), rx.len())?;
        check_dim("reference u block", u.len(), ru.len())?;
        let dx: Vec<f64> = x.iter().zip(rx).map(|(a, b)| a - b).collect();
        let du: Vec<f64> = u.iter().zip(ru).map(|(a, b)| a - b).collect();
        let mut gx = vec![0.0; x.len()];
        let mut gu = vec![0.0; u.len()];
        let mut rng = eval_stream(seed, j);
        let mut acc = MeanVar::default();
        for _ in 0..n_samples {
            let z = task.sample_record(j, &mut rng);
            let mut d = model.value(x, u, &z) - model.value(rx, ru, &z);
            if reference_is_stationary {
                model.grad_into(rx, ru, &z, &mut gx, &mut gu);
                d -= dot(&gx, &dx) + dot(&gu, &du);
            }
            acc.push(d);
        }
        value += acc.mean();
        var += acc.var_of_mean();
    }
    Ok(ObjectiveValue {
        value: value / n as f64,
        stderr: var.sqrt() / n as f64,
        context: ObjectiveContext::PopulationEstimate,
    })
}

fn check_estimate_args<P: OwnerParams + ?Sized>(model: &LossModel, params: &P, task: &SyntheticTask, n_samples: usize) -> Result<()> {
    if n_samples == 0 {
        return Err(config_err("n_samples must be at least 1"));
    }
    if !model.compatible_with(task) {
        return Err(config_err(format!("loss {:?} does not fit task {:?}", model.kind, task.kind)));
    }
    check_dim("owners", task.n(), params.owners())?;
    for j in 0..params.owners() {
        let (x, u) = params.owner(j);
        check_dim("x block", task.k(), x.len())?;
        check_dim("u block", task.ell(), u.len())?;
    }
    Ok(())
}

/// The known population minimizer `(p_j, q)` of a shared-mean task.
pub fn analytic_minimizer(task: &SyntheticTask) -> Option<PartitionedParams> {
    match task.kind {
        TaskKind::SharedMean => Some(PartitionedParams {
            personalized: task.personalized_centers.clone(),
            shared: task.shared_center.clone(),
        }),
        TaskKind::Logistic => None,
    }
}

/// Welford accumulator.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct MeanVar {
    count: usize,
    mean: f64,
    m2: f64,
}

impl MeanVar {
    pub(crate) fn push(&mut self, v: f64) {
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
    }

    pub(crate) fn mean(&self) -> f64 {
        self.mean
    }

    pub(crate) fn var(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub(crate) fn var_of_mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.var() / self.count as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, ProblemSpec};
    use crate::domain::DomainSpec;
    use rand::Rng;

    fn rand_vec(rng: &mut rng::StreamRng, len: usize, s: f64) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-s..s)).collect()
    }

    fn models() -> Vec<LossModel> {
        vec![
            LossModel::shared_mean_norm(),
            LossModel::shared_mean_huber(0.3).unwrap(),
            LossModel::logistic(1.0).unwrap(),
        ]
    }

    fn rand_record(rng: &mut rng::StreamRng, model: &LossModel, k: usize, ell: usize) -> Vec<f64> {
        match model.kind {
            LossKind::Logistic => {
                let mut z = rand_vec(rng, k + ell, 1.0);
                crate::domain::project_ball(&mut z, 1.0);
                z.push(if rng.random::<bool>() { 1.0 } else { -1.0 });
                z
            }
            _ => rand_vec(rng, k + ell, 1.0),
        }
    }

    #[test]
    fn norm_loss_vanishes_at_record() {
        let m = LossModel::shared_mean_norm();
        let z = vec![0.1, 0.2, 0.3];
        assert_eq!(loss(&m, &z[..1], &z[1..], &z).unwrap(), 0.0);
    }

    #[test]
    fn logistic_at_zero_margin() {
        let m = LossModel::logistic(1.0).unwrap();
        let z = vec![0.5, -0.5, 1.0];
        let v = loss(&m, &[0.0], &[0.0], &z).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let g = grad(&m, 0, &[0.0], &[0.0], &z).unwrap();
        assert!((g.grad_x[0] + 0.25).abs() < 1e-15);
        assert!((g.grad_u[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn huber_quadratic_regime_matches_formula() {
        let mu = 0.5;
        let m = LossModel::shared_mean_huber(mu).unwrap();
        let mut rng = rng::stream(3);
        for _ in 0..50 {
            let z = rand_vec(&mut rng, 5, 1.0);
            let mut dx = rand_vec(&mut rng, 2, 1.0);
            let mut du = rand_vec(&mut rng, 3, 1.0);
            crate::domain::project_ball(&mut dx, 0.49);
            crate::domain::project_ball(&mut du, 0.49);
            let x: Vec<f64> = z[..2].iter().zip(&dx).map(|(a, b)| a + b).collect();
            let u: Vec<f64> = z[2..].iter().zip(&du).map(|(a, b)| a + b).collect();
            let expect = (dx[0] * dx[0] + dx[1] * dx[1]) / (2.0 * mu) + (du[0] * du[0] + du[1] * du[1] + du[2] * du[2]) / (2.0 * mu);
            assert!((loss(&m, &x, &u, &z).unwrap() - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn norm_gradient_is_unit_away_from_kink() {
        let m = LossModel::shared_mean_norm();
        let z = vec![0.0, 0.0, 1.0];
        let g = grad(&m, 2, &[3.0, 4.0], &[1.0], &z).unwrap();
        assert_eq!(g.grad_x, vec![0.6, 0.8]);
        assert_eq!(g.grad_u, vec![0.0]);
        assert_eq!(g.owner, crate::domain::OwnerIndex::Single(2));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = rng::stream(17);
        let (k, ell) = (3, 4);
        for model in models() {
            for _ in 0..100 {
                let x = rand_vec(&mut rng, k, 1.5);
                let u = rand_vec(&mut rng, ell, 1.5);
                let z = rand_record(&mut rng, &model, k, ell);
                let g = grad(&model, 0, &x, &u, &z).unwrap();
                let mut p: Vec<f64> = x.iter().chain(&u).copied().collect();
                let h = 1e-6 * (1.0 + crate::domain::norm(&p));
                let analytic: Vec<f64> = g.grad_x.iter().chain(&g.grad_u).copied().collect();
                for c in 0..p.len() {
                    let orig = p[c];
                    p[c] = orig + h;
                    let fp = model.value(&p[..k], &p[k..], &z);
                    p[c] = orig - h;
                    let fm = model.value(&p[..k], &p[k..], &z);
                    p[c] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let scale = analytic[c].abs().max(1.0);
                    assert!((fd - analytic[c]).abs() / scale <= 1e-5, "{:?} coord {c}: {fd} vs {}", model.kind, analytic[c]);
                }
            }
        }
    }

    #[test]
    fn convexity_and_lipschitz_probes() {
        let mut rng = rng::stream(23);
        let (k, ell) = (2, 3);
        for model in models() {
            for _ in 0..1000 {
                let z = rand_record(&mut rng, &model, k, ell);
                let p = rand_vec(&mut rng, k + ell, 2.0);
                let q = rand_vec(&mut rng, k + ell, 2.0);
                let lam: f64 = rng.random();
                let mix: Vec<f64> = p.iter().zip(&q).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
                let hp = model.value(&p[..k], &p[k..], &z);
                let hq = model.value(&q[..k], &q[k..], &z);
                let hm = model.value(&mix[..k], &mix[k..], &z);
                assert!(hm <= lam * hp + (1.0 - lam) * hq + 1e-10);
                let dist = crate::domain::sq_dist(&p, &q).sqrt();
                assert!((hp - hq).abs() <= model.lipschitz * dist + 1e-10);
            }
        }
    }

    #[test]
    fn gradient_norm_bounded_by_lipschitz() {
        let mut rng = rng::stream(29);
        for model in models() {
            for _ in 0..1000 {
                let x = rand_vec(&mut rng, 2, 2.0);
                let u = rand_vec(&mut rng, 3, 2.0);
                let z = rand_record(&mut rng, &model, 2, 3);
                let g = grad(&model, 0, &x, &u, &z).unwrap();
                assert!(g.norm() <= model.lipschitz + 1e-12);
            }
        }
    }

    #[test]
    fn huber_gradient_is_smooth() {
        let model = LossModel::shared_mean_huber(0.2).unwrap();
        let h = model.smoothness.unwrap();
        let mut rng = rng::stream(31);
        for _ in 0..1000 {
            let z = rand_vec(&mut rng, 5, 1.0);
            let p = rand_vec(&mut rng, 5, 1.0);
            let q = rand_vec(&mut rng, 5, 1.0);
            let gp = grad(&model, 0, &p[..2], &p[2..], &z).unwrap();
            let gq = grad(&model, 0, &q[..2], &q[2..], &z).unwrap();
            let diff: f64 = gp
                .grad_x
                .iter()
                .chain(&gp.grad_u)
                .zip(gq.grad_x.iter().chain(&gq.grad_u))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= h * crate::domain::sq_dist(&p, &q).sqrt() + 1e-10);
        }
    }

    #[test]
    fn huber_approaches_norm() {
        let norm_model = LossModel::shared_mean_norm();
        let mut rng = rng::stream(37);
        for _ in 0..20 {
            let z = rand_vec(&mut rng, 4, 1.0);
            let p = rand_vec(&mut rng, 4, 1.0);
            let exact = norm_model.value(&p[..2], &p[2..], &z);
            let gaps: Vec<f64> = [1e-1, 1e-2, 1e-3]
                .iter()
                .map(|&mu| exact - LossModel::shared_mean_huber(mu).unwrap().value(&p[..2], &p[2..], &z))
                .collect();
            assert!(gaps[0] >= gaps[1] && gaps[1] >= gaps[2] && gaps[2] >= 0.0);
            // each of the two blocks contributes at most mu/2
            assert!(gaps[2] <= 1e-3 + 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = LossModel::shared_mean_norm();
        assert!(loss(&m, &[0.0], &[0.0], &[0.0]).is_err());
        assert!(grad(&m, 0, &[0.0], &[0.0], &[0.0, 0.0, 0.0]).is_err());
    }

    fn small_setup(noise: f64) -> (DomainSpec, SyntheticTask, Federation) {
        let d = DomainSpec::new(3, 2, 3, 1.0, 2.0).unwrap();
        let task = SyntheticTask::shared_mean(&d, noise, 0.5, 0.5, 7).unwrap();
        let fed = generate(
            &task,
            &ProblemSpec {
                n: 3,
                m: 4,
                r: 2,
                record_dim: 5,
                seed: 1,
            },
        )
        .unwrap();
        (d, task, fed)
    }

    #[test]
    fn empirical_loss_matches_double_loop() {
        let (d, _, fed) = small_setup(0.3);
        let model = LossModel::shared_mean_norm();
        let mut rng = rng::stream(2);
        let params = PartitionedParams {
            personalized: (0..3).map(|_| rand_vec(&mut rng, 2, 0.5)).collect(),
            shared: rand_vec(&mut rng, 3, 0.5),
        };
        let mut naive = 0.0;
        for j in 0..3 {
            for i in 0..4 {
                let z = &fed.shards[j][i];
                let mut a = 0.0;
                for c in 0..2 {
                    a += (params.personalized[j][c] - z[c]).powi(2);
                }
                let mut b = 0.0;
                for c in 0..3 {
                    b += (params.shared[c] - z[2 + c]).powi(2);
                }
                naive += a.sqrt() + b.sqrt();
            }
        }
        naive /= 12.0;
        let v = empirical_loss(&model, &params, &fed).unwrap();
        assert!((v.value - naive).abs() < 1e-14);
        assert_eq!(v.context, ObjectiveContext::Empirical);

        let doubled = Federation::new(2, fed.shards.iter().map(|s| s.iter().chain(s).cloned().collect()).collect()).unwrap();
        let v2 = empirical_loss(&model, &params, &doubled).unwrap();
        assert!((v.value - v2.value).abs() < 1e-14);
        let _ = d;
    }

    #[test]
    fn empirical_loss_single_record() {
        let fed = Federation::new(1, vec![vec![vec![0.3, -0.2, 0.1]]]).unwrap();
        let params = PartitionedParams {
            personalized: vec![vec![0.3]],
            shared: vec![-0.2, 0.1],
        };
        assert_eq!(empirical_loss(&LossModel::shared_mean_norm(), &params, &fed).unwrap().value, 0.0);
    }

    #[test]
    fn noiseless_population_at_centers_is_zero() {
        let (_, task, _) = small_setup(0.0);
        let opt = analytic_minimizer(&task).unwrap();
        let v = population_loss_estimate(&LossModel::shared_mean_norm(), &opt, &task, 100, 3).unwrap();
        assert_eq!(v.value, 0.0);
        assert_eq!(v.stderr, 0.0);
    }

    #[test]
    fn stderr_shrinks_with_samples() {
        let (_, task, _) = small_setup(0.4);
        let opt = analytic_minimizer(&task).unwrap();
        let m = LossModel::shared_mean_norm();
        let a = population_loss_estimate(&m, &opt, &task, 4000, 3).unwrap();
        let b = population_loss_estimate(&m, &opt, &task, 8000, 3).unwrap();
        let ratio = b.stderr / a.stderr;
        assert!((ratio - 1.0 / 2f64.sqrt()).abs() < 0.2 / 2f64.sqrt(), "ratio {ratio}");
    }

    #[test]
    fn control_variate_keeps_mean() {
        let (_, task, _) = small_setup(0.4);
        let opt = analytic_minimizer(&task).unwrap();
        let m = LossModel::shared_mean_norm();
        let mut p = opt.clone();
        p.shared[0] += 0.2;
        p.personalized[1][0] -= 0.1;
        let plain = excess_population_loss(&m, &p, &opt, &task, 20000, 5, false).unwrap();
        let cv = excess_population_loss(&m, &p, &opt, &task, 20000, 5, true).unwrap();
        assert!(cv.stderr < plain.stderr);
        assert!((cv.value - plain.value).abs() < 3.0 * (plain.stderr + cv.stderr));
        assert!(cv.value > 0.0);
    }

    #[test]
    fn mismatched_loss_and_task_rejected() {
        let (_, task, _) = small_setup(0.1);
        let opt = analytic_minimizer(&task).unwrap();
        let m = LossModel::logistic(1.0).unwrap();
        assert!(population_loss_estimate(&m, &opt, &task, 10, 1).is_err());
        assert!(population_loss_estimate(&LossModel::shared_mean_norm(), &opt, &task, 0, 1).is_err());
    }
}
