//! Comparison methods: behavioral cloning, an adversarial discriminator,
//! time-contrastive representation loss and a linear probe on embeddings.

use diffmath::{Activation, AdamConfig, AdamState, Mlp, StepOutcome, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::pcil::{stack_rows, Encoder};
use crate::penalty;
use crate::replay::Transition;

/// Binary cross-entropy on logits with expert rows labeled 1 and agent
/// rows labeled 0 (`swap` flips the labels), recorded on the tape.
fn bce_on_tape(tape: &mut Tape, z_expert: Var, z_agent: Var, swap: bool) -> Result<Var> {
    let n = tape.value(z_expert).rows() + tape.value(z_agent).rows();
    let (pos, neg) = if swap { (z_agent, z_expert) } else { (z_expert, z_agent) };
    let neg_pos = tape.neg(pos)?;
    let lp = tape.softplus(neg_pos)?;
    let ln = tape.softplus(neg)?;
    let sp = tape.sum(lp)?;
    let sn = tape.sum(ln)?;
    let total = tape.add(sp, sn)?;
    Ok(tape.scale(total, 1.0 / n as f64)?)
}

/// Feed-forward classifier returning a logit; `D = sigmoid(logit)`.
#[derive(Debug, Clone)]
pub struct Discriminator {
    net: Mlp,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("hidden", "discriminator input must be non-empty"));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng),
        })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::Invalid("discriminator must have one output".into()));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.net.input_dim() || !x.is_finite() {
            return Err(Error::Invalid("discriminator input must be finite and correctly sized".into()));
        }
        Ok(self.net.predict(x)?.into_data())
    }

    /// `D(x)` in (0, 1).
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    /// Cross-entropy without an update.
    pub fn bce(&self, expert: &Tensor, agent: &Tensor, swap: bool) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false)?;
        let xe = tape.constant(expert.clone())?;
        let xa = tape.constant(agent.clone())?;
        let ze = self.net.forward(&mut tape, &bound, xe)?;
        let za = self.net.forward(&mut tape, &bound, xa)?;
        let l = bce_on_tape(&mut tape, ze, za, swap)?;
        Ok(tape.value(l).item()?)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log D − log(1 − D)` given the logit of `D`.
pub fn dac_reward(logit: f64) -> f64 {
    logit
}

/// `log D − log(1 − D)` from a probability.
pub fn dac_reward_from_prob(d: f64) -> Result<f64> {
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::Invalid(format!("discriminator output {d} outside (0, 1)")));
    }
    Ok(d.ln() - (-d).ln_1p())
}

/// One Adam step on cross-entropy plus `gp_weight` times the interpolated
/// gradient penalty on the logit. Returns the cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_update<R: Rng + ?Sized>(
    d: &mut Discriminator,
    opt: &mut AdamState,
    expert: &Tensor,
    agent: &Tensor,
    gp_weight: f64,
    center_zero: bool,
    rng: &mut R,
) -> Result<f64> {
    if expert.rows() == 0 || agent.rows() == 0 {
        return Err(Error::InsufficientData("discriminator needs non-empty batches".into()));
    }
    let ne = expert.rows();
    let x = penalty::interpolate(expert, agent, rng)?;
    let mut tape = Tape::new();
    let bound = d.net.bind(&mut tape, true)?;
    let stacked = tape.constant(stack_rows(&[expert, agent])?)?;
    let z = d.net.forward(&mut tape, &bound, stacked)?;
    let ze = tape.slice_rows(z, 0, ne)?;
    let za = tape.slice_rows(z, ne, ne + agent.rows())?;
    let bce = bce_on_tape(&mut tape, ze, za, false)?;
    let total = if gp_weight > 0.0 {
        let net = &d.net;
        let gp = penalty::fd_gradient_penalty(&mut tape, &x, center_zero, |t, xs| {
            let xv = t.constant(xs.clone())?;
            Ok(net.forward(t, &bound, xv)?)
        })?;
        let w = tape.scale(gp, gp_weight)?;
        tape.add(bce, w)?
    } else {
        bce
    };
    let loss = tape.value(bce).item()?;
    let grads = tape.backward(total)?;
    let g = d.net.params().collect_grads(&grads, &bound);
    if opt.step(d.net.params_mut(), &g)? == StepOutcome::Skipped {
        log::warn!("discriminator step skipped on non-finite gradient");
    }
    Ok(loss)
}

/// Logistic classifier over detached embeddings.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    net: Mlp,
}

impl LinearProbe {
    pub fn new(dim: usize) -> Self {
        Self {
            net: Mlp::zeroed(&[dim, 1], Activation::Identity, Activation::Identity),
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn logits(&self, embeddings: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.predict(embeddings)?.into_data())
    }

    /// Records the probe cross-entropy on `tape` for embedding vars. The
    /// caller decides whether those vars carry encoder gradients.
    pub fn loss_on_tape(&self, tape: &mut Tape, bound: &[Var], expert: Var, agent: Var) -> Result<Var> {
        let ze = self.net.forward(tape, bound, expert)?;
        let za = self.net.forward(tape, bound, agent)?;
        bce_on_tape(tape, ze, za, false)
    }

    /// One Adam step on cross-entropy over embedding values.
    pub fn update(&mut self, opt: &mut AdamState, expert: &Tensor, agent: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, true)?;
        let e = tape.constant(expert.clone())?;
        let a = tape.constant(agent.clone())?;
        let l = self.loss_on_tape(&mut tape, &bound, e, a)?;
        let loss = tape.value(l).item()?;
        let grads = tape.backward(l)?;
        let g = self.net.params().collect_grads(&grads, &bound);
        opt.step(self.net.params_mut(), &g)?;
        Ok(loss)
    }
}

/// `log D − log(1 − D)` of the probe, i.e. its logit.
pub fn probe_reward(probe: &LinearProbe, embedding: &[f64]) -> Result<f64> {
    Ok(probe.logits(&Tensor::row(embedding))?[0])
}

/// Positive and negative time indices for anchor `t` in a trajectory of
/// length `len`: the positive lies within `window` (one-sided at the
/// edges), negatives farther than `4·window`, or farther than `window`
/// when the trajectory has no such steps.
pub fn tcn_indices<R: Rng + ?Sized>(
    t: usize,
    len: usize,
    window: usize,
    negatives: usize,
    rng: &mut R,
) -> Result<(usize, Vec<usize>)> {
    if window == 0 {
        return Err(Error::config("tcn_window", "must be at least 1"));
    }
    if len <= 2 * window {
        return Err(Error::InsufficientData(format!(
            "trajectory of length {len} too short for window {window}"
        )));
    }
    if t >= len {
        return Err(Error::Invalid(format!("anchor {t} outside trajectory of length {len}")));
    }
    let lo = t.saturating_sub(window);
    let hi = (t + window).min(len - 1);
    let pos: Vec<usize> = (lo..=hi).filter(|&k| k != t).collect();
    let far = |gap: usize| -> Vec<usize> { (0..len).filter(|&k| k.abs_diff(t) > gap).collect() };
    let mut neg_pool = far(4 * window);
    if neg_pool.is_empty() {
        neg_pool = far(window);
    }
    if neg_pool.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no negatives for anchor {t} in trajectory of length {len}"
        )));
    }
    let p = *pos.choose(rng).expect("len > 2·window leaves a neighbour");
    let n = (0..negatives).map(|_| *neg_pool.choose(rng).expect("non-empty")).collect();
    Ok((p, n))
}

/// Anchor, positive and per-slot negative feature rows.
#[derive(Debug, Clone)]
pub struct TcnBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub negatives: Vec<Tensor>,
}

impl TcnBatch {
    /// Samples `anchors` anchors uniformly over trajectories (rows of
    /// features) and their time steps.
    pub fn sample<R: Rng + ?Sized>(
        trajectories: &[Tensor],
        window: usize,
        anchors: usize,
        negatives: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if trajectories.is_empty() || anchors == 0 || negatives == 0 {
            return Err(Error::InsufficientData("time-contrastive batch needs trajectories".into()));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut pos_rows = Vec::new();
        let mut neg_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); negatives];
        for _ in 0..anchors {
            let traj = &trajectories[rng.gen_range(0..trajectories.len())];
            let t = rng.gen_range(0..traj.rows());
            let (p, ns) = tcn_indices(t, traj.rows(), window, negatives, rng)?;
            rows.push(traj.row_slice(t).to_vec());
            pos_rows.push(traj.row_slice(p).to_vec());
            for (slot, n) in ns.into_iter().enumerate() {
                neg_rows[slot].push(traj.row_slice(n).to_vec());
            }
        }
        Ok(Self {
            anchors: Tensor::from_rows(&rows)?,
            positives: Tensor::from_rows(&pos_rows)?,
            negatives: neg_rows.iter().map(|r| Tensor::from_rows(r)).collect::<diffmath::Result<_>>()?,
        })
    }
}

/// Records the time-contrastive InfoNCE for a batch on the tape.
pub fn tcn_loss_on_tape(tape: &mut Tape, encoder: &Encoder, bound: &[Var], batch: &TcnBatch) -> Result<Var> {
    let b = batch.anchors.rows();
    let mut parts = vec![&batch.anchors, &batch.positives];
    parts.extend(batch.negatives.iter());
    let x = tape.constant(stack_rows(&parts)?)?;
    let z = encoder.forward(tape, bound, x)?;
    tcn_loss_from_embeddings(tape, z, b, batch.negatives.len(), encoder.temperature())
}

/// Loss from stacked embeddings `[anchors; positives; negatives_1; …]`.
pub fn tcn_loss_from_embeddings(tape: &mut Tape, z: Var, b: usize, negatives: usize, tau: f64) -> Result<Var> {
    let a = tape.slice_rows(z, 0, b)?;
    let p = tape.slice_rows(z, b, 2 * b)?;
    let sp = tape.row_dot(a, p)?;
    let mut cols = vec![tape.scale(sp, 1.0 / tau)?];
    for k in 0..negatives {
        let n = tape.slice_rows(z, (2 + k) * b, (3 + k) * b)?;
        let sn = tape.row_dot(a, n)?;
        cols.push(tape.scale(sn, 1.0 / tau)?);
    }
    let logits = tape.concat_cols(&cols)?;
    let lse = tape.log_sum_exp_rows(logits, None)?;
    let per = tape.sub(lse, cols[0])?;
    Ok(tape.mean(per)?)
}

/// Time-contrastive loss value over feature trajectories.
pub fn tcn_loss<R: Rng + ?Sized>(
    encoder: &Encoder,
    trajectories: &[Tensor],
    window: usize,
    anchors: usize,
    rng: &mut R,
) -> Result<f64> {
    let batch = TcnBatch::sample(trajectories, window, anchors, 1, rng)?;
    let mut tape = Tape::new();
    let bound = encoder.net().bind(&mut tape, false)?;
    let l = tcn_loss_on_tape(&mut tape, encoder, &bound, &batch)?;
    Ok(tape.value(l).item()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
        }
    }
}

/// Mean squared action error of `actor` on demos.
pub fn bc_error(actor: &Mlp, demos: &[Transition]) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::InsufficientData("no demonstrations".into()));
    }
    let s: Vec<&[f64]> = demos.iter().map(|t| t.state.as_slice()).collect();
    let a: Vec<&[f64]> = demos.iter().map(|t| t.action.as_slice()).collect();
    let pred = actor.predict(&Tensor::from_rows(&s)?)?;
    let target = Tensor::from_rows(&a)?;
    let d = pred.zip_map(&target, |x, y| (x - y) * (x - y))?;
    Ok(d.sum() / demos.len() as f64)
}

/// Regresses demo actions from demo states; returns the actor and the
/// mean training loss of each epoch.
pub fn bc_train<R: Rng + ?Sized>(demos: &[Transition], cfg: &BcConfig, rng: &mut R) -> Result<(Mlp, Vec<f64>)> {
    let first = demos
        .first()
        .ok_or_else(|| Error::InsufficientData("behavioral cloning needs demonstrations".into()))?;
    let (sd, ad) = (first.state.len(), first.action.len());
    if ad == 0 {
        return Err(Error::InsufficientData("demonstrations carry no actions".into()));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::config("bc_batch_size", "sizes must be positive"));
    }
    let h = cfg.hidden;
    let mut actor = Mlp::new(&[sd, h, h, ad], Activation::Relu, Activation::Tanh, rng);
    let mut opt = AdamState::new(
        actor.params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let s: Vec<&[f64]> = chunk.iter().map(|&i| demos[i].state.as_slice()).collect();
            let a: Vec<&[f64]> = chunk.iter().map(|&i| demos[i].action.as_slice()).collect();
            let mut tape = Tape::new();
            let bound = actor.bind(&mut tape, true)?;
            let sv = tape.constant(Tensor::from_rows(&s)?)?;
            let av = tape.constant(Tensor::from_rows(&a)?)?;
            let pred = actor.forward(&mut tape, &bound, sv)?;
            let d = tape.sub(pred, av)?;
            let sq = tape.square(d)?;
            let l = tape.mean(sq)?;
            sum += tape.value(l).item()? * chunk.len() as f64;
            count += chunk.len();
            let grads = tape.backward(l)?;
            let g = actor.params().collect_grads(&grads, &bound);
            opt.step(actor.params_mut(), &g)?;
        }
        history.push(sum / count as f64);
    }
    Ok((actor, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcil::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reward_arithmetic() {
        assert_eq!(dac_reward_from_prob(0.5).unwrap(), 0.0);
        assert!((dac_reward_from_prob(0.9).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!(dac_reward_from_prob(1.0).is_err());
        let mut prev = f64::NEG_INFINITY;
        for i in 1..100 {
            let r = dac_reward_from_prob(i as f64 / 100.0).unwrap();
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn constant_half_discriminator_bce_is_ln2() {
        let d = Discriminator::from_net(Mlp::zeroed(&[2, 1], Activation::Identity, Activation::Identity)).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        assert!((d.bce(&x, &x, false).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d.probabilities(&x).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn tcn_edges_are_one_sided() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (p, n) = tcn_indices(0, 20, 2, 3, &mut rng).unwrap();
            assert!((1..=2).contains(&p));
            assert!(n.iter().all(|&k| k > 8 && k < 20));
            let (p, _) = tcn_indices(19, 20, 2, 1, &mut rng).unwrap();
            assert!((17..=18).contains(&p));
        }
        assert!(tcn_indices(0, 4, 2, 1, &mut rng).is_err());
        assert!(tcn_indices(2, 5, 2, 1, &mut rng).is_err());
        let (_, n) = tcn_indices(3, 7, 2, 4, &mut rng).unwrap();
        assert!(n.iter().all(|&k| k == 0 || k == 6));
    }

    #[test]
    fn probe_loss_leaves_encoder_without_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(2, &EncoderConfig { hidden: vec![4], out_dim: 3, temperature: 0.07 }, &mut rng).unwrap();
        let probe = LinearProbe::new(3);
        let mut tape = Tape::new();
        let ev = enc.net().bind(&mut tape, true).unwrap();
        let x = tape.constant(Tensor::from_rows(&[[0.1, 0.2], [0.4, -0.3]]).unwrap()).unwrap();
        let z = enc.forward(&mut tape, &ev, x).unwrap();
        let detached = tape.constant(tape.value(z).clone()).unwrap();
        let pv = probe.net().bind(&mut tape, true).unwrap();
        let l = probe.loss_on_tape(&mut tape, &pv, detached, detached).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(ev.iter().all(|&v| grads.get(v).is_none()));
        assert!(grads.get(pv[0]).is_some());
    }

    #[test]
    fn bc_rejects_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(bc_train(&[], &BcConfig::default(), &mut rng).is_err());
    }
}
