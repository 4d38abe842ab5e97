//! Browser bindings for three small experiments: the privacy budget of a
//! noisy-SGD run, a paired comparison of the four training paradigms, and the
//! excess loss of the private paradigms across a range of ε.
//!
//! Every export returns a JSON string. The `*_json` functions hold the logic
//! and are what the native tests call.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use jointdp::data::ProblemSpec;
use jointdp::harness::config::ExperimentConfig;
use jointdp::harness::experiments::{compare_paradigms, losses_of, Exec};
use jointdp::harness::stats::{mean_se, sign_test};
use jointdp::optim::Paradigm;
use jointdp::privacy::{budget_report, NoisePlan, NoisedBlocks, PrivacyLevel, PrivacySpec};

/// Iteration cap that keeps a page interaction under a second or two.
const DEMO_T_CAP: usize = 20_000;

/// Problem shape shared by the comparison and the ε curve.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub ell: usize,
    pub d_x: f64,
    pub d_u: f64,
    pub heterogeneity: f64,
    pub repetitions: usize,
    pub seed: u64,
}

fn experiment(shape: &Shape, epsilon: f64) -> Result<ExperimentConfig, String> {
    let text = format!(
        r#"
repetitions = {reps}
eval_samples = 1000
seed = {seed}
[task]
kind = "shared_mean"
heterogeneity = {het:?}
[problem]
n = {n}
m = {m}
[domain]
k = {k}
ell = {ell}
d_x = {dx:?}
d_u = {du:?}
[optimizer]
epsilon = {eps:?}
t_cap = {cap}
"#,
        reps = shape.repetitions,
        seed = shape.seed,
        het = shape.heterogeneity,
        n = shape.n,
        m = shape.m,
        k = shape.k,
        ell = shape.ell,
        dx = shape.d_x,
        du = shape.d_u,
        eps = epsilon,
        cap = DEMO_T_CAP,
    );
    ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())
}

#[allow(clippy::too_many_arguments)]
pub fn budget_json(
    lipschitz: f64,
    t: usize,
    epsilon: f64,
    delta: f64,
    m: usize,
    n: usize,
    r: usize,
    level: &str,
    all_blocks: bool,
) -> Result<String, String> {
    let level: PrivacyLevel = level.parse().map_err(|e: jointdp::Error| e.to_string())?;
    let privacy = PrivacySpec { epsilon, delta, level };
    let problem = ProblemSpec {
        n,
        m,
        r,
        record_dim: 1,
        seed: 0,
    };
    let blocks = if all_blocks { NoisedBlocks::AllBlocks } else { NoisedBlocks::SharedOnly };
    let plan = NoisePlan::calibrate(&privacy, blocks, lipschitz, t, &problem).map_err(|e| e.to_string())?;
    let report = budget_report(&privacy, &plan, &problem).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct ParadigmRow {
    paradigm: &'static str,
    mean: f64,
    stderr: f64,
    bound: f64,
    sigma: f64,
}

#[derive(Debug, Serialize)]
struct PairedTest {
    first: &'static str,
    second: &'static str,
    wins: usize,
    pairs: usize,
    p_value: f64,
}

#[derive(Debug, Serialize)]
struct Comparison {
    epsilon: f64,
    iterations: usize,
    rows: Vec<ParadigmRow>,
    tests: Vec<PairedTest>,
}

fn comparison(shape: &Shape, epsilon: f64) -> Result<Comparison, String> {
    let cfg = experiment(shape, epsilon)?;
    let reports = compare_paradigms(&cfg, Exec::Serial).map_err(|e| e.to_string())?;
    let rows = Paradigm::COMPARED
        .iter()
        .map(|&p| {
            let first = reports.iter().find(|r| r.config.paradigm == p).expect("every paradigm ran");
            let (mean, stderr) = mean_se(&losses_of(&reports, p));
            ParadigmRow {
                paradigm: p.as_str(),
                mean,
                stderr,
                bound: first.bound_value,
                sigma: first.sigma,
            }
        })
        .collect();
    let mut tests = Vec::new();
    for (a, b) in [
        (Paradigm::CollabNoDp, Paradigm::JointDp),
        (Paradigm::JointDp, Paradigm::FullDp),
        (Paradigm::JointDp, Paradigm::PerSilo),
    ] {
        let t = sign_test(&losses_of(&reports, a), &losses_of(&reports, b)).map_err(|e| e.to_string())?;
        tests.push(PairedTest {
            first: a.as_str(),
            second: b.as_str(),
            wins: t.wins,
            pairs: t.wins + t.losses + t.ties,
            p_value: t.p_value,
        });
    }
    let iterations = reports.iter().find(|r| r.config.paradigm == Paradigm::JointDp).map_or(0, |r| r.config.t);
    Ok(Comparison {
        epsilon,
        iterations,
        rows,
        tests,
    })
}

pub fn compare_json(shape: &Shape, epsilon: f64) -> Result<String, String> {
    serde_json::to_string(&comparison(shape, epsilon)?).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct CurvePoint {
    epsilon: f64,
    collab_no_dp: f64,
    joint_dp: f64,
    full_dp: f64,
}

/// Mean excess loss of the non-private, joint-DP and full-DP paradigms for
/// each ε in `epsilons`.
pub fn epsilon_curve_json(shape: &Shape, epsilons: &[f64]) -> Result<String, String> {
    if epsilons.is_empty() {
        return Err("no epsilon values given".into());
    }
    let mut points = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let c = comparison(shape, eps)?;
        let mean = |name: &str| c.rows.iter().find(|r| r.paradigm == name).map_or(f64::NAN, |r| r.mean);
        points.push(CurvePoint {
            epsilon: eps,
            collab_no_dp: mean("collab_no_dp"),
            joint_dp: mean("joint_dp"),
            full_dp: mean("full_dp"),
        });
    }
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Privacy report for one noisy-SGD run as JSON.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn budget(
    lipschitz: f64,
    iterations: usize,
    epsilon: f64,
    delta: f64,
    m: usize,
    n: usize,
    r: usize,
    level: &str,
    all_blocks: bool,
) -> Result<String, JsError> {
    js(budget_json(lipschitz, iterations, epsilon, delta, m, n, r, level, all_blocks))
}

/// Paired comparison of the four paradigms on a shared-mean task.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn compare(
    n: usize,
    m: usize,
    k: usize,
    ell: usize,
    d_x: f64,
    d_u: f64,
    heterogeneity: f64,
    epsilon: f64,
    repetitions: usize,
    seed: u32,
) -> Result<String, JsError> {
    let shape = Shape {
        n,
        m,
        k,
        ell,
        d_x,
        d_u,
        heterogeneity,
        repetitions,
        seed: seed.into(),
    };
    js(compare_json(&shape, epsilon))
}

/// Excess loss against ε for the collaborative paradigms.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn epsilon_curve(
    n: usize,
    m: usize,
    k: usize,
    ell: usize,
    d_x: f64,
    d_u: f64,
    heterogeneity: f64,
    epsilons: Vec<f64>,
    repetitions: usize,
    seed: u32,
) -> Result<String, JsError> {
    let shape = Shape {
        n,
        m,
        k,
        ell,
        d_x,
        d_u,
        heterogeneity,
        repetitions,
        seed: seed.into(),
    };
    js(epsilon_curve_json(&shape, &epsilons))
}
