//! Randomized invariants across modules.

use diffmath::{Activation, Mlp, Tensor};
use pcil_core::envs::make_env;
use pcil_core::harness::metrics::{parse_metrics, spearman, MetricsRow, MetricsWriter};
use pcil_core::harness::ExperimentConfig;
use pcil_core::pcil::{mean_reference, similarity_rewards, Encoder, UNIT_TOL};
use pcil_core::replay::{ReplayBuffer, Transition};
use pcil_core::theory::{constructive_witness, d_cont_estimate, tv_distance, DiscreteDistribution, CHECK_TOL};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn weights(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    n.prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(0.0f64..1.0, n),
        )
    })
    .prop_filter("non-zero mass", |(a, b)| a.iter().sum::<f64>() > 1e-3 && b.iter().sum::<f64>() > 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sandwich_holds((a, b) in weights(2..7), seed in any::<u64>()) {
        let p = DiscreteDistribution::from_weights(&a).unwrap();
        let q = DiscreteDistribution::from_weights(&b).unwrap();
        let tv = tv_distance(&p, &q).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&tv));
        prop_assert!((tv - tv_distance(&q, &p).unwrap()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = d_cont_estimate(&p, &q, 4, &mut rng).unwrap();
        prop_assert!(est >= 0.25 * tv - CHECK_TOL);
        prop_assert!(est <= 2.0 * tv + CHECK_TOL);
        let w = constructive_witness(&p, &q, 0.5).unwrap();
        prop_assert!(w.value >= 0.25 * tv - CHECK_TOL);
        prop_assert!(w.g.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_distributions_have_zero_divergence((a, _) in weights(2..7), seed in any::<u64>()) {
        let p = DiscreteDistribution::from_weights(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        prop_assert!(d_cont_estimate(&p, &p, 2, &mut rng).unwrap().abs() <= CHECK_TOL);
    }

    #[test]
    fn embeddings_are_unit_and_rewards_bounded(seed in any::<u64>(), rows in 1usize..12, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[3, 16, 5], Activation::Relu, Activation::Identity, &mut rng);
        let enc = Encoder::from_net(net, 0.1).unwrap();
        let x = Tensor::matrix(rows, 3, (0..rows * 3).map(|i| scale * ((i as f64 * 0.37).sin())).collect()).unwrap();
        let z = enc.embed_batch(&x).unwrap();
        for i in 0..rows {
            let n: f64 = z.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(n > 0.0);
            prop_assert!((n - 1.0).abs() <= UNIT_TOL);
        }
        let reference = mean_reference(&z).unwrap();
        for r in similarity_rewards(&z, &reference).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn spearman_is_bounded_and_rank_invariant(v in prop::collection::vec(-10.0f64..10.0, 3..30), w in prop::collection::vec(-10.0f64..10.0, 3..30)) {
        let n = v.len().min(w.len());
        let (a, b) = (&v[..n], &w[..n]);
        if let Some(s) = spearman(a, b) {
            prop_assert!((-1.0..=1.0).contains(&s));
            let mono: Vec<f64> = a.iter().map(|x| x.powi(3) + 5.0 * x).collect();
            let s2 = spearman(&mono, b).unwrap();
            prop_assert!((s - s2).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_never_exceeds_capacity(cap in 1usize..20, pushes in 0usize..60) {
        let mut buf = ReplayBuffer::new(cap, 1, 1);
        for i in 0..pushes {
            buf.push(Transition {
                state: vec![i as f64],
                action: vec![0.0],
                next_state: vec![i as f64 + 1.0],
                reward_env: 0.0,
                done: i % 7 == 6,
            }).unwrap();
        }
        prop_assert_eq!(buf.len(), pushes.min(cap));
        if pushes > 0 {
            prop_assert_eq!(buf.get(buf.len() - 1).state[0], (pushes - 1) as f64);
        }
    }

    #[test]
    fn envs_clip_actions_and_stay_finite(seed in any::<u64>(), actions in prop::collection::vec(-50.0f64..50.0, 2..40)) {
        for name in ["point_mass", "pendulum"] {
            let env = make_env(name, &Default::default()).unwrap();
            let d = env.spec().action_dim;
            let mut s = env.reset(seed);
            for chunk in actions.chunks(d).filter(|c| c.len() == d) {
                let clipped: Vec<f64> = chunk.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
                let out = env.step(&s, chunk).unwrap();
                let same = env.step(&s, &clipped).unwrap();
                prop_assert_eq!(&out, &same);
                prop_assert!(env.observe(&out.state).iter().all(|v| v.is_finite()));
                if out.done { break; }
                s = out.state;
            }
        }
    }

    #[test]
    fn metrics_rows_round_trip(step in 0u64..1_000_000, m in -1e3f64..1e3, sd in 0.0f64..1e3, sp in prop::option::of(-1.0f64..1.0)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = MetricsRow {
            step,
            eval_return_mean: m,
            eval_return_std: sd,
            learned_reward_spearman: sp,
            encoder_or_disc_loss: None,
            critic_loss: Some(m * 0.5),
            actor_loss: None,
            al_gap: sp,
        };
        let mut w = MetricsWriter::create(&path, &[]).unwrap();
        w.push(&row).unwrap();
        w.complete().unwrap();
        let f = parse_metrics(&std::fs::read_to_string(&path).unwrap()).unwrap();
        prop_assert_eq!(f.rows, vec![row]);
    }

    #[test]
    fn config_text_round_trips(lr in 1e-5f64..1e-2, seeds in prop::collection::vec(0u64..100, 1..4), hidden in 1usize..300, gp in 0.0f64..20.0) {
        let mut cfg = ExperimentConfig::default();
        cfg.lr = lr;
        cfg.seeds = seeds;
        cfg.hidden = hidden;
        cfg.gp_weight = gp;
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), cfg.to_text());
    }
}
