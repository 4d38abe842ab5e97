use proptest::prelude::*;

use jointdp::data::{generate, Federation, ProblemSpec, SyntheticTask};
use jointdp::domain::{DomainSpec, PartitionedParams};
use jointdp::loss::{population_loss_estimate, LossModel};
use jointdp::optim::{self, OptimizerConfig, Paradigm};
use jointdp::privacy::PrivacySpec;

fn federation(n: usize, k: usize, ell: usize, m: usize, r: usize, noise: f64, seed: u64) -> (DomainSpec, SyntheticTask, Federation) {
    let spec = DomainSpec::new(n, k, ell, 1.0, 2.0).unwrap();
    let task = SyntheticTask::shared_mean(&spec, noise, 0.7, 0.8, seed).unwrap();
    let fed = generate(
        &task,
        &ProblemSpec {
            n,
            m,
            r,
            record_dim: k + ell,
            seed: seed ^ 0xDA7A,
        },
    )
    .unwrap();
    (spec, task, fed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_iterate_of_every_paradigm_is_in_domain(
        n in 1usize..4, k in 0usize..4, ell in 1usize..4, users in 1usize..4, shard in 1usize..3,
        eta in 0.0f64..3.0, t in 1usize..120, seed in 0u64..1000,
    ) {
        let m = users * shard;
        let (spec, _, fed) = federation(n, k, ell, m, users, 0.4, seed);
        for p in [Paradigm::PerSilo, Paradigm::CollabNoDp, Paradigm::JointDp, Paradigm::FullDp, Paradigm::SmoothJointDp] {
            if p == Paradigm::SmoothJointDp && users < 2 {
                continue;
            }
            let (model, privacy) = match p {
                Paradigm::SmoothJointDp => (LossModel::shared_mean_huber(0.5).unwrap(), PrivacySpec::record(0.5, 1e-5)),
                _ if p.is_private() => (LossModel::shared_mean_norm(), PrivacySpec::record(0.5, 1e-5)),
                _ => (LossModel::shared_mean_norm(), PrivacySpec::none()),
            };
            let mut cfg = OptimizerConfig::new(p, t, eta, privacy).with_seeds(seed, seed + 1);
            cfg.record_iterates = true;
            let res = optim::run(&fed, &model, &spec, &cfg, None).unwrap();
            prop_assert!(res.final_params.in_domain(&spec, 1e-12), "{:?} average left the domain", p);
            for it in res.iterates.iter().flatten() {
                prop_assert!(it.in_domain(&spec, 1e-12), "{:?} iterate left the domain", p);
            }
            if let Some(us) = &res.owner_shared {
                let single = spec.single_owner();
                for u in us {
                    let probe = PartitionedParams { personalized: vec![vec![0.0; k]], shared: u.clone() };
                    prop_assert!(probe.in_domain(&single, 1e-12));
                }
            }
        }
    }

    #[test]
    fn generated_federations_respect_their_invariants(
        n in 1usize..5, k in 0usize..4, ell in 1usize..4, users in 1usize..5, shard in 1usize..4,
        noise in 0.0f64..1.0, seed in 0u64..1000,
    ) {
        let m = users * shard;
        let (_, task, fed) = federation(n, k, ell, m, users, noise, seed);
        prop_assert_eq!(fed.n(), n);
        prop_assert_eq!(fed.shard_size(), shard);
        for j in 0..n {
            let mut seen = 0;
            for w in 0..users {
                let recs = fed.user_records(j, w);
                prop_assert_eq!(recs.len(), shard);
                for (o, z) in recs.iter().enumerate() {
                    prop_assert_eq!(fed.user_of(seen + o), w);
                    prop_assert_eq!(z.as_slice(), fed.record(j, seen + o));
                }
                seen += shard;
            }
            prop_assert_eq!(seen, m);
        }
        let bound = task.record_bound();
        prop_assert!(fed.records().all(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt() <= bound * (1.0 + 1e-12)));
        let back = Federation::read_text(fed.to_text().as_bytes()).unwrap();
        prop_assert_eq!(back, fed);
    }

    #[test]
    fn training_is_deterministic(seed in 0u64..1000, t in 1usize..200) {
        let (spec, _, fed) = federation(3, 2, 2, 4, 4, 0.3, seed);
        for p in Paradigm::COMPARED {
            let privacy = if p.is_private() { PrivacySpec::record(1.0, 1e-5) } else { PrivacySpec::none() };
            let cfg = OptimizerConfig::new(p, t, 0.1, privacy).with_seeds(seed, seed * 7 + 1);
            let a = optim::run(&fed, &LossModel::shared_mean_norm(), &spec, &cfg, None).unwrap();
            let b = optim::run(&fed, &LossModel::shared_mean_norm(), &spec, &cfg, None).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

/// The population minimizer of the shared-mean task is its centers: a grid
/// search over the Monte-Carlo population loss lands on the nearest grid
/// point to the center in both blocks.
#[test]
fn population_minimizer_is_the_center() {
    let spec = DomainSpec::new(1, 1, 1, 2.0, 2.0).unwrap();
    let task = SyntheticTask::shared_mean(&spec, 0.4, 1.0, 0.5, 17).unwrap();
    let model = LossModel::shared_mean_norm();
    let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.05).collect();
    let value = |x: f64, u: f64| {
        let p = PartitionedParams {
            personalized: vec![vec![x]],
            shared: vec![u],
        };
        population_loss_estimate(&model, &p, &task, 20_000, 99).unwrap().value
    };
    // the blocks separate, so each is searched with the other at its center
    let (px, qu) = (task.personalized_centers[0][0], task.shared_center[0]);
    let best_x = grid.iter().copied().min_by(|a, b| value(*a, qu).total_cmp(&value(*b, qu))).unwrap();
    let best_u = grid.iter().copied().min_by(|a, b| value(px, *a).total_cmp(&value(px, *b))).unwrap();
    assert!((best_x - px).abs() <= 0.05, "x: grid {best_x} vs center {px}");
    assert!((best_u - qu).abs() <= 0.05, "u: grid {best_u} vs center {qu}");
}
