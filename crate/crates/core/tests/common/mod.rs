//! Shared helpers for the integration and acceptance targets.
#![allow(dead_code)]

use diffmath::gradcheck::{max_relative_error, numeric_grad, numeric_grad5, FD_H, REL_FLOOR};
use diffmath::{Activation, Mlp, Tape, Tensor};
use pcil_core::pcil::{gradient_penalty_on_tape, infonce_from_embeddings, Aggregation, Encoder, FeatureMap, UnitEmbedding};
use pcil_core::rl::{Agent, AgentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STATE_DIM: usize = 3;
pub const ACTION_DIM: usize = 2;

pub fn rand_t<R: Rng>(rng: &mut R, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn with_params(net: &Mlp, p: &[Tensor]) -> Mlp {
    let mut n = net.clone();
    n.params_mut().tensors_mut().clone_from_slice(p);
    n
}

/// InfoNCE plus weighted gradient penalty, as a function of encoder parameters.
fn encoder_objective(
    net: &Mlp,
    tau: f64,
    agg: Aggregation,
    expert: &Tensor,
    agent: &Tensor,
    interp: &Tensor,
    reference: &UnitEmbedding,
) -> (f64, Vec<Tensor>) {
    let enc = Encoder::from_net(net.clone(), tau).unwrap();
    let fmap = FeatureMap::raw(STATE_DIM, false);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true).unwrap();
    let ev = tape.constant(expert.clone()).unwrap();
    let av = tape.constant(agent.clone()).unwrap();
    let e = enc.forward(&mut tape, &bound, ev).unwrap();
    let a = enc.forward(&mut tape, &bound, av).unwrap();
    let nce = infonce_from_embeddings(&mut tape, e, a, tau, agg).unwrap();
    let gp = gradient_penalty_on_tape(&mut tape, &enc, &bound, &fmap, interp, reference, false).unwrap();
    let gp = tape.scale(gp, 10.0).unwrap();
    let total = tape.add(nce, gp).unwrap();
    let g = tape.backward(total).unwrap();
    (tape.value(total).item().unwrap(), net.params().collect_grads(&g, &bound))
}

/// Worst relative error of the encoder loss gradient over random instances.
/// The penalty term is itself a difference quotient with step 1e-4, so the
/// reference uses a fourth-order stencil at a coarser step.
pub fn encoder_loss_worst(instances: usize, seed: u64) -> f64 {
    encoder_loss_worst_h(instances, seed, ENCODER_FD_H)
}

pub const ENCODER_FD_H: f64 = 1e-3;

pub fn encoder_loss_worst_h(instances: usize, seed: u64, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let agg = if i % 2 == 0 { Aggregation::Outside } else { Aggregation::Inside };
        let tau = [0.07, 0.5, 1.0][i % 3];
        let net = Mlp::new(&[STATE_DIM, 8, 8, 4], Activation::Tanh, Activation::Identity, &mut rng);
        let expert = rand_t(&mut rng, 4, STATE_DIM, -1.0, 1.0);
        let agent = rand_t(&mut rng, 3, STATE_DIM, -1.0, 1.0);
        let interp = rand_t(&mut rng, 3, STATE_DIM, -1.0, 1.0);
        let r: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let reference = UnitEmbedding::normalized(&r).unwrap();
        let p = net.params().tensors().to_vec();
        let eval = |q: &[Tensor]| encoder_objective(&with_params(&net, q), tau, agg, &expert, &agent, &interp, &reference);
        let (_, analytic) = eval(&p);
        let numeric = numeric_grad5(|q| eval(q).0, &p, h);
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    worst
}

fn small_agent(rng: &mut ChaCha8Rng, shared_trunk: bool) -> Agent {
    let cfg = AgentConfig {
        hidden: 6,
        shared_trunk,
        ..AgentConfig::default()
    };
    Agent::new(STATE_DIM, ACTION_DIM, cfg, rng).unwrap()
}

/// Worst relative error of the actor loss gradient.
pub fn actor_loss_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let agent = small_agent(&mut rng, i % 2 == 0);
        let states = rand_t(&mut rng, 5, STATE_DIM, -1.0, 1.0);
        let (_, analytic) = agent.actor_loss_and_grads(&states).unwrap();
        let p = agent.actor.params().tensors().to_vec();
        let numeric = numeric_grad(
            |q| {
                let mut a = agent.clone();
                a.actor = with_params(&agent.actor, q);
                a.actor_loss_and_grads(&states).unwrap().0
            },
            &p,
            FD_H,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    worst
}

/// Worst relative error of the twin-critic loss gradient, covering both
/// critics and, when present, the shared trunk.
pub fn critic_loss_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let agent = small_agent(&mut rng, i % 2 == 0);
        let states = rand_t(&mut rng, 5, STATE_DIM, -1.0, 1.0);
        let actions = rand_t(&mut rng, 5, ACTION_DIM, -1.0, 1.0);
        let y: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cg = agent.critic_loss_and_grads(&states, &actions, &y).unwrap();
        let n0 = agent.critics[0].params().len();
        let n1 = agent.critics[1].params().len();
        let mut p = agent.critics[0].params().tensors().to_vec();
        p.extend_from_slice(agent.critics[1].params().tensors());
        let mut analytic = cg.critics[0].clone();
        analytic.extend(cg.critics[1].iter().cloned());
        if let (Some(t), Some(g)) = (&agent.trunk, &cg.trunk) {
            p.extend_from_slice(t.params().tensors());
            analytic.extend(g.iter().cloned());
        }
        let numeric = numeric_grad(
            |q| {
                let mut a = agent.clone();
                a.critics[0] = with_params(&agent.critics[0], &q[..n0]);
                a.critics[1] = with_params(&agent.critics[1], &q[n0..n0 + n1]);
                if let Some(t) = &agent.trunk {
                    a.trunk = Some(with_params(t, &q[n0 + n1..]));
                }
                a.critic_loss_and_grads(&states, &actions, &y).unwrap().loss
            },
            &p,
            FD_H,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    worst
}
