//! Sphere-projected contrastive encoder, multi-positive InfoNCE over
//! expert/agent batches, cosine-similarity reward and its gradient penalty.

use std::rc::Rc;

use diffmath::{sphere_normalize_rows, Activation, AdamState, Mlp, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalty;
use crate::replay::{ReplayBuffer, Transition};

/// Weight of the gradient penalty in the encoder objective.
pub const GP_WEIGHT: f64 = 10.0;
/// Tolerance on unit norms and reward bounds.
pub const UNIT_TOL: f64 = 1e-9;

/// How per-positive terms combine for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Mean of per-positive log-losses.
    Outside,
    /// Log of the mean positive probability.
    Inside,
}

impl Aggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "out" => Ok(Self::Outside),
            "in" => Ok(Self::Inside),
            _ => Err(Error::config("infonce_aggregation", format!("expected out|in, got {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Outside => "out",
            Self::Inside => "in",
        }
    }
}

/// How the expert reference embedding is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefMode {
    Sample,
    Mean,
}

impl RefMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::config("reward_ref_mode", format!("expected sample|mean, got {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sample => "sample",
            Self::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            out_dim: 64,
            temperature: 0.07,
        }
    }
}

/// A unit-norm vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    /// Normalizes `v`; rejects zero or non-finite vectors.
    pub fn normalized(v: &[f64]) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::Invalid("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self(v.iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Maps raw encoder inputs (state, optionally followed by action) to the
/// features seen by an encoder head, through a frozen trunk when shared.
#[derive(Clone, Copy)]
pub struct FeatureMap<'a> {
    pub trunk: Option<&'a Mlp>,
    pub state_dim: usize,
    pub encode_action: bool,
}

impl<'a> FeatureMap<'a> {
    pub fn raw(state_dim: usize, encode_action: bool) -> Self {
        Self {
            trunk: None,
            state_dim,
            encode_action,
        }
    }

    pub fn with_trunk(trunk: Option<&'a Mlp>, state_dim: usize, encode_action: bool) -> Self {
        Self {
            trunk,
            state_dim,
            encode_action,
        }
    }

    /// Raw input rows for a set of transitions.
    pub fn raw_inputs<'t>(&self, ts: impl IntoIterator<Item = &'t Transition>) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut width = None;
        for t in ts {
            let before = data.len();
            data.extend_from_slice(&t.state);
            if self.encode_action {
                data.extend_from_slice(&t.action);
            }
            let w = data.len() - before;
            if *width.get_or_insert(w) != w {
                return Err(Error::Invalid("transitions of mixed dimensions".into()));
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::InsufficientData("no transitions to encode".into()));
        }
        Ok(Tensor::matrix(rows, width.unwrap_or(0), data)?)
    }

    /// Width of raw input rows given the action dimension.
    pub fn raw_width(&self, action_dim: usize) -> usize {
        self.state_dim + if self.encode_action { action_dim } else { 0 }
    }

    /// Width of the features handed to the head.
    pub fn feature_width(&self, action_dim: usize) -> usize {
        let s = self.trunk.map_or(self.state_dim, Mlp::output_dim);
        s + if self.encode_action { action_dim } else { 0 }
    }

    /// Features for raw rows, without recording on a tape.
    pub fn features(&self, raw: &Tensor) -> Result<Tensor> {
        let Some(trunk) = self.trunk else {
            return Ok(raw.clone());
        };
        if raw.cols() < self.state_dim {
            return Err(Error::Invalid("raw input narrower than the state".into()));
        }
        let (states, actions) = split_cols(raw, self.state_dim)?;
        let h = trunk.predict(&states)?;
        if actions.cols() == 0 {
            Ok(h)
        } else {
            Ok(Tensor::concat_cols(&[&h, &actions])?)
        }
    }

    /// Features for a raw input already on the tape; trunk weights are
    /// constants so no gradient reaches them.
    pub fn features_on_tape(&self, tape: &mut Tape, states: Var, actions: Option<Var>) -> Result<Var> {
        let s = match self.trunk {
            Some(trunk) => {
                let bound = trunk.bind(tape, false)?;
                trunk.forward(tape, &bound, states)?
            }
            None => states,
        };
        match actions {
            Some(a) => Ok(tape.concat_cols(&[s, a])?),
            None => Ok(s),
        }
    }
}

pub(crate) fn split_cols(x: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    let (r, c) = x.dims2()?;
    let mut left = Vec::with_capacity(r * at);
    let mut right = Vec::with_capacity(r * (c - at));
    for i in 0..r {
        let row = x.row_slice(i);
        left.extend_from_slice(&row[..at]);
        right.extend_from_slice(&row[at..]);
    }
    Ok((Tensor::matrix(r, at, left)?, Tensor::matrix(r, c - at, right)?))
}

/// Feed-forward head followed by projection onto the unit sphere.
#[derive(Debug, Clone)]
pub struct Encoder {
    net: Mlp,
    temperature: f64,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        if !(cfg.temperature > 0.0) || !cfg.temperature.is_finite() {
            return Err(Error::config("temperature", "must be positive"));
        }
        if cfg.out_dim == 0 || input_dim == 0 {
            return Err(Error::config("embedding_dim", "dimensions must be positive"));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(cfg.out_dim);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng),
            temperature: cfg.temperature,
        })
    }

    pub fn from_net(net: Mlp, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        Ok(Self { net, temperature })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Unit-norm embeddings of feature rows.
    pub fn embed_batch(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.input_dim() {
            return Err(Error::Invalid(format!(
                "encoder expects {} inputs, got {}",
                self.input_dim(),
                features.cols()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Invalid("non-finite encoder input".into()));
        }
        Ok(sphere_normalize_rows(&self.net.predict(features)?)?)
    }

    /// Embedding of a single feature vector.
    pub fn embed(&self, input: &[f64]) -> Result<UnitEmbedding> {
        let e = self.embed_batch(&Tensor::row(input))?;
        Ok(UnitEmbedding(e.into_data()))
    }

    /// Records the embedding of `x` on `tape` with already bound parameters.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let h = self.net.forward(tape, bound, x)?;
        Ok(tape.sphere_normalize(h)?)
    }
}

/// Multi-positive InfoNCE over expert embeddings `e` (anchors and
/// positives) and agent embeddings `a` (negatives), both on the tape.
pub fn infonce_from_embeddings(tape: &mut Tape, e: Var, a: Var, tau: f64, agg: Aggregation) -> Result<Var> {
    let ne = tape.value(e).rows();
    let na = tape.value(a).rows();
    if ne < 2 {
        return Err(Error::InsufficientData(format!(
            "contrastive loss needs at least 2 expert items, got {ne}"
        )));
    }
    if na < 1 {
        return Err(Error::InsufficientData("contrastive loss needs at least 1 agent item".into()));
    }
    let ee = tape.matmul_t(e, e)?;
    let ee = tape.scale(ee, 1.0 / tau)?;
    let ea = tape.matmul_t(e, a)?;
    let ea = tape.scale(ea, 1.0 / tau)?;
    let logits = tape.concat_cols(&[ee, ea])?;
    let width = ne + na;
    let mut all_mask = vec![true; ne * width];
    for i in 0..ne {
        all_mask[i * width + i] = false;
    }
    let lse_all = tape.log_sum_exp_rows(logits, Some(Rc::new(all_mask)))?;
    let npos = (ne - 1) as f64;
    let per_anchor = match agg {
        Aggregation::Outside => {
            let mut w = vec![1.0 / npos; ne * ne];
            for i in 0..ne {
                w[i * ne + i] = 0.0;
            }
            let w = tape.constant(Tensor::matrix(ne, ne, w)?)?;
            let weighted = tape.mul(ee, w)?;
            let mean_pos = tape.sum_cols(weighted)?;
            tape.sub(lse_all, mean_pos)?
        }
        Aggregation::Inside => {
            let mut pos_mask = vec![true; ne * ne];
            for i in 0..ne {
                pos_mask[i * ne + i] = false;
            }
            let lse_pos = tape.log_sum_exp_rows(ee, Some(Rc::new(pos_mask)))?;
            let d = tape.sub(lse_all, lse_pos)?;
            tape.add_scalar(d, npos.ln())?
        }
    };
    Ok(tape.mean(per_anchor)?)
}

/// Embeds expert rows then agent rows in one pass and splits the result.
pub(crate) fn embed_pair(
    tape: &mut Tape,
    encoder: &Encoder,
    bound: &[Var],
    expert: &Tensor,
    agent: &Tensor,
) -> Result<(Var, Var)> {
    let ne = expert.rows();
    let stacked = stack_rows(&[expert, agent])?;
    let x = tape.constant(stacked)?;
    let z = encoder.forward(tape, bound, x)?;
    let e = tape.slice_rows(z, 0, ne)?;
    let a = tape.slice_rows(z, ne, ne + agent.rows())?;
    Ok((e, a))
}

pub(crate) fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |t| t.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(Error::Invalid("stacking tensors of different widths".into()));
        }
        data.extend_from_slice(p.data());
        rows += p.rows();
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}

/// InfoNCE value for feature batches.
pub fn infonce_loss(encoder: &Encoder, expert: &Tensor, agent: &Tensor, agg: Aggregation) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = encoder.net().bind(&mut tape, false)?;
    let (e, a) = embed_pair(&mut tape, encoder, &bound, expert, agent)?;
    let l = infonce_from_embeddings(&mut tape, e, a, encoder.temperature(), agg)?;
    Ok(tape.value(l).item()?)
}

/// Cosine-similarity reward of one embedding against a reference.
pub fn similarity_reward(embedding: &UnitEmbedding, reference: &UnitEmbedding) -> Result<f64> {
    if embedding.dim() != reference.dim() {
        return Err(Error::Invalid("embedding and reference differ in dimension".into()));
    }
    Ok(embedding.dot(reference.as_slice()).clamp(-1.0, 1.0))
}

/// Rewards of embedding rows against a reference.
pub fn similarity_rewards(embeddings: &Tensor, reference: &UnitEmbedding) -> Result<Vec<f64>> {
    if embeddings.cols() != reference.dim() {
        return Err(Error::Invalid("embedding and reference differ in dimension".into()));
    }
    Ok((0..embeddings.rows())
        .map(|i| reference.dot(embeddings.row_slice(i)).clamp(-1.0, 1.0))
        .collect())
}

/// Mean-then-renormalized reference from embedding rows.
pub fn mean_reference(embeddings: &Tensor) -> Result<UnitEmbedding> {
    if embeddings.rows() == 0 {
        return Err(Error::InsufficientData("empty expert set for the reward reference".into()));
    }
    let mean = embeddings.sum_rows_to_row()?.map(|v| v / embeddings.rows() as f64);
    UnitEmbedding::normalized(mean.data())
}

/// Reference embedding in the requested mode from expert feature rows.
pub fn expert_reference<R: Rng + ?Sized>(
    encoder: &Encoder,
    expert_features: &Tensor,
    mode: RefMode,
    rng: &mut R,
) -> Result<UnitEmbedding> {
    if expert_features.rows() == 0 {
        return Err(Error::InsufficientData("empty expert set for the reward reference".into()));
    }
    match mode {
        RefMode::Sample => {
            let i = rng.gen_range(0..expert_features.rows());
            encoder.embed(expert_features.row_slice(i))
        }
        RefMode::Mean => mean_reference(&encoder.embed_batch(expert_features)?),
    }
}

/// Scalar reward map on raw state inputs, recorded on the tape.
fn reward_on_tape(
    tape: &mut Tape,
    encoder: &Encoder,
    bound: &[Var],
    fmap: &FeatureMap<'_>,
    raw: Var,
    reference: &UnitEmbedding,
) -> Result<Var> {
    let feats = fmap.features_on_tape(tape, raw, None)?;
    let z = encoder.forward(tape, bound, feats)?;
    let r = tape.constant(Tensor::column(reference.as_slice()))?;
    Ok(tape.matmul(z, r)?)
}

/// Exact penalty value: mean over interpolants of `(‖∇ r‖ − 1)²`
/// (or `‖∇ r‖²` when `center_zero`), unweighted.
pub fn gradient_penalty<R: Rng + ?Sized>(
    encoder: &Encoder,
    fmap: &FeatureMap<'_>,
    expert_raw: &Tensor,
    agent_raw: &Tensor,
    reference: &UnitEmbedding,
    center_zero: bool,
    rng: &mut R,
) -> Result<f64> {
    let x = penalty::interpolate(expert_raw, agent_raw, rng)?;
    gradient_penalty_at(encoder, fmap, &x, reference, center_zero)
}

/// Exact penalty at given interpolants.
pub fn gradient_penalty_at(
    encoder: &Encoder,
    fmap: &FeatureMap<'_>,
    x: &Tensor,
    reference: &UnitEmbedding,
    center_zero: bool,
) -> Result<f64> {
    if fmap.trunk.is_some() && fmap.encode_action {
        return Err(Error::Invalid(
            "exact penalty with a shared trunk and action inputs is not supported".into(),
        ));
    }
    let norms = penalty::analytic_input_grad_norms(x, |tape, xv| {
        let bound = encoder.net().bind(tape, false)?;
        reward_on_tape(tape, encoder, &bound, fmap, xv, reference)
    })?;
    Ok(penalty::penalty_from_norms(&norms, center_zero))
}

/// Penalty at given interpolants recorded on `tape` through central
/// differences, differentiable in the encoder parameters `bound`.
pub fn gradient_penalty_on_tape(
    tape: &mut Tape,
    encoder: &Encoder,
    bound: &[Var],
    fmap: &FeatureMap<'_>,
    x: &Tensor,
    reference: &UnitEmbedding,
    center_zero: bool,
) -> Result<Var> {
    penalty::fd_gradient_penalty(tape, x, center_zero, |t, xs| {
        let feats = t.constant(fmap.features(xs)?)?;
        let z = encoder.forward(t, bound, feats)?;
        let r = t.constant(Tensor::column(reference.as_slice()))?;
        Ok(t.matmul(z, r)?)
    })
}

/// Settings shared by contrastive encoder updates.
#[derive(Debug, Clone, Copy)]
pub struct UpdateSettings {
    pub aggregation: Aggregation,
    pub ref_mode: RefMode,
    pub gp_weight: f64,
    pub gp_center_zero: bool,
    /// Cap on penalty interpolants per step; `None` uses every pair.
    pub gp_samples: Option<usize>,
}

impl Default for UpdateSettings {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Outside,
            ref_mode: RefMode::Sample,
            gp_weight: GP_WEIGHT,
            gp_center_zero: false,
            gp_samples: None,
        }
    }
}

/// Result of one encoder step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderStep {
    pub loss: f64,
    pub penalty: f64,
    pub applied: bool,
}

/// Expert and agent raw inputs for one encoder update.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub expert: Tensor,
    pub agent: Tensor,
}

impl ContrastiveBatch {
    /// Samples `total` items split by `expert_ratio` from the two buffers.
    pub fn sample<R: Rng + ?Sized>(
        fmap: &FeatureMap<'_>,
        expert: &ReplayBuffer,
        agent: &ReplayBuffer,
        total: usize,
        expert_ratio: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let ne = ((total as f64) * expert_ratio).round() as usize;
        let na = total - ne;
        let es = expert.sample(ne, rng)?;
        let as_ = agent.sample(na, rng)?;
        Ok(Self {
            expert: fmap.raw_inputs(es.iter())?,
            agent: fmap.raw_inputs(as_.iter())?,
        })
    }
}

/// One Adam step on a representation loss plus the weighted penalty.
/// `repr_loss` records the representation loss given bound encoder
/// parameters.
pub fn encoder_step<R: Rng + ?Sized>(
    encoder: &mut Encoder,
    opt: &mut AdamState,
    fmap: &FeatureMap<'_>,
    batch: &ContrastiveBatch,
    settings: &UpdateSettings,
    rng: &mut R,
    repr_loss: impl FnOnce(&mut Tape, &Encoder, &[Var]) -> Result<Var>,
) -> Result<EncoderStep> {
    let ef = fmap.features(&batch.expert)?;
    let reference = expert_reference(encoder, &ef, settings.ref_mode, rng)?;
    let mut x = penalty::interpolate(&batch.expert, &batch.agent, rng)?;
    if let Some(cap) = settings.gp_samples {
        if cap == 0 {
            return Err(Error::config("gp_samples", "must be positive"));
        }
        if cap < x.rows() {
            x = x.slice_rows(0, cap)?;
        }
    }
    let mut tape = Tape::new();
    let bound = encoder.net().bind(&mut tape, true)?;
    let loss = repr_loss(&mut tape, encoder, &bound)?;
    let loss_v = tape.value(loss).item()?;
    let (total, gp_v) = if settings.gp_weight == 0.0 {
        (loss, 0.0)
    } else {
        let gp = gradient_penalty_on_tape(&mut tape, encoder, &bound, fmap, &x, &reference, settings.gp_center_zero)?;
        let weighted = tape.scale(gp, settings.gp_weight)?;
        let gp_v = tape.value(gp).item()?;
        (tape.add(loss, weighted)?, gp_v)
    };
    let grads = tape.backward(total)?;
    let g = encoder.net().params().collect_grads(&grads, &bound);
    let applied = opt.step(encoder.net_mut().params_mut(), &g)? == diffmath::StepOutcome::Applied;
    Ok(EncoderStep {
        loss: loss_v,
        penalty: gp_v,
        applied,
    })
}

/// One Adam step on InfoNCE + weighted gradient penalty.
pub fn encoder_update<R: Rng + ?Sized>(
    encoder: &mut Encoder,
    opt: &mut AdamState,
    fmap: &FeatureMap<'_>,
    batch: &ContrastiveBatch,
    settings: &UpdateSettings,
    rng: &mut R,
) -> Result<EncoderStep> {
    let ef = fmap.features(&batch.expert)?;
    let af = fmap.features(&batch.agent)?;
    let agg = settings.aggregation;
    encoder_step(encoder, opt, fmap, batch, settings, rng, |tape, enc, bound| {
        let (e, a) = embed_pair(tape, enc, bound, &ef, &af)?;
        infonce_from_embeddings(tape, e, a, enc.temperature(), agg)
    })
}

/// Mean reward on expert features minus mean reward on agent features,
/// both against the mean-mode reference of the expert batch.
pub fn al_gap(encoder: &Encoder, expert: &Tensor, agent: &Tensor) -> Result<f64> {
    if expert.rows() == 0 || agent.rows() == 0 {
        return Err(Error::InsufficientData("gap needs non-empty batches".into()));
    }
    let ee = encoder.embed_batch(expert)?;
    let ae = encoder.embed_batch(agent)?;
    al_gap_from_embeddings(&ee, &ae)
}

pub fn al_gap_from_embeddings(expert: &Tensor, agent: &Tensor) -> Result<f64> {
    let reference = mean_reference(expert)?;
    let re = similarity_rewards(expert, &reference)?;
    let ra = similarity_rewards(agent, &reference)?;
    Ok(mean(&re) - mean(&ra))
}

/// Gap under the unnormalized mean reference `ē`, i.e. rewards `Φ(x)·ē`
/// scaled by `‖ē‖` relative to the cosine reward.
pub fn scaled_al_gap_from_embeddings(expert: &Tensor, agent: &Tensor) -> Result<f64> {
    if expert.rows() == 0 || agent.rows() == 0 {
        return Err(Error::InsufficientData("gap needs non-empty batches".into()));
    }
    let reference = expert.sum_rows_to_row()?.map(|v| v / expert.rows() as f64);
    let r = |z: &Tensor| -> Result<f64> {
        let col = z.matmul_t(&reference)?;
        Ok(mean(col.data()))
    };
    Ok(r(expert)? - r(agent)?)
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Counts of invariant violations observed while training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantCounters {
    pub embeddings_checked: u64,
    pub norm_violations: u64,
    pub rewards_checked: u64,
    pub bound_violations: u64,
}

impl InvariantCounters {
    pub fn check_embeddings(&mut self, z: &Tensor) {
        for i in 0..z.rows() {
            let n = z.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            self.embeddings_checked += 1;
            if !((n - 1.0).abs() <= UNIT_TOL) {
                self.norm_violations += 1;
            }
        }
    }

    pub fn check_rewards(&mut self, rewards: &[f64]) {
        for r in rewards {
            self.rewards_checked += 1;
            if !(r.abs() <= 1.0 + UNIT_TOL) {
                self.bound_violations += 1;
            }
        }
    }

    pub fn clean(&self) -> bool {
        self.norm_violations == 0 && self.bound_violations == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffmath::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_of(e: &[Vec<f64>], a: &[Vec<f64>], tau: f64, agg: Aggregation) -> f64 {
        let mut tape = Tape::new();
        let ev = tape.constant(Tensor::from_rows(e).unwrap()).unwrap();
        let av = tape.constant(Tensor::from_rows(a).unwrap()).unwrap();
        let l = infonce_from_embeddings(&mut tape, ev, av, tau, agg).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn identical_embeddings_give_ln2() {
        let v = vec![0.6, 0.8];
        for agg in [Aggregation::Outside, Aggregation::Inside] {
            let l = loss_of(&[v.clone(), v.clone()], &[v.clone()], 0.07, agg);
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_negative_closed_form() {
        let l = loss_of(
            &[vec![1.0, 0.0], vec![1.0, 0.0]],
            &[vec![0.0, 1.0]],
            0.07,
            Aggregation::Outside,
        );
        let expect = (-1.0f64 / 0.07).exp().ln_1p();
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 6.2e-7).abs() < 1e-7);
    }

    #[test]
    fn single_positive_aggregations_agree() {
        let e = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let a = vec![vec![0.0, 1.0], vec![-0.6, 0.8]];
        let o = loss_of(&e, &a, 0.5, Aggregation::Outside);
        let i = loss_of(&e, &a, 0.5, Aggregation::Inside);
        assert!((o - i).abs() < 1e-12);
    }

    #[test]
    fn too_few_expert_items_rejected() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::row(&[1.0, 0.0])).unwrap();
        let a = tape.constant(Tensor::row(&[0.0, 1.0])).unwrap();
        assert!(infonce_from_embeddings(&mut tape, e, a, 0.07, Aggregation::Outside).is_err());
    }

    #[test]
    fn reward_extremes() {
        let r = UnitEmbedding::normalized(&[1.0, 0.0]).unwrap();
        let same = UnitEmbedding::normalized(&[2.0, 0.0]).unwrap();
        let orth = UnitEmbedding::normalized(&[0.0, 3.0]).unwrap();
        let anti = UnitEmbedding::normalized(&[-1.0, 0.0]).unwrap();
        assert_eq!(similarity_reward(&same, &r).unwrap(), 1.0);
        assert_eq!(similarity_reward(&orth, &r).unwrap(), 0.0);
        assert_eq!(similarity_reward(&anti, &r).unwrap(), -1.0);
        assert!(mean_reference(&Tensor::zeros(0, 2)).is_err());
    }

    #[test]
    fn embed_is_unit_and_rejects_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(3, &EncoderConfig { hidden: vec![8, 8], out_dim: 4, temperature: 0.07 }, &mut rng).unwrap();
        let z = enc.embed(&[0.1, -2.0, 5.0]).unwrap();
        assert!((z.norm() - 1.0).abs() < 1e-12);
        assert_eq!(z, enc.embed(&[0.1, -2.0, 5.0]).unwrap());
        assert!(enc.embed(&[f64::NAN, 0.0, 0.0]).is_err());
        assert!(enc.embed(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn gap_is_zero_for_identical_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new(2, &EncoderConfig { hidden: vec![8], out_dim: 4, temperature: 0.07 }, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2], [0.5, -0.3], [1.0, 1.0]]).unwrap();
        assert!(al_gap(&enc, &x, &x).unwrap().abs() < 1e-15);
    }

    #[test]
    fn fd_penalty_matches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(3, &EncoderConfig { hidden: vec![16, 16], out_dim: 8, temperature: 0.07 }, &mut rng).unwrap();
        let fmap = FeatureMap::raw(3, false);
        let x = Tensor::matrix(10, 3, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let reference = enc.embed(&[0.3, 0.3, -0.2]).unwrap();
        let exact = gradient_penalty_at(&enc, &fmap, &x, &reference, false).unwrap();
        let mut tape = Tape::new();
        let bound = enc.net().bind(&mut tape, true).unwrap();
        let fd = gradient_penalty_on_tape(&mut tape, &enc, &bound, &fmap, &x, &reference, false).unwrap();
        assert!((tape.value(fd).item().unwrap() - exact).abs() < 1e-3);
    }

    #[test]
    fn training_separates_expert_from_agent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = EncoderConfig { hidden: vec![32, 32], out_dim: 8, temperature: 0.07 };
        let mut enc = Encoder::new(2, &cfg, &mut rng).unwrap();
        let mut opt = AdamState::new(enc.net().params(), AdamConfig::default());
        let expert = Tensor::matrix(16, 2, (0..32).map(|_| 0.3 + rng.gen_range(-0.05..0.05)).collect()).unwrap();
        let agent = Tensor::matrix(16, 2, (0..32).map(|_| -0.3 + rng.gen_range(-0.05..0.05)).collect()).unwrap();
        let batch = ContrastiveBatch { expert: expert.clone(), agent: agent.clone() };
        let fmap = FeatureMap::raw(2, false);
        let l0 = infonce_loss(&enc, &expert, &agent, Aggregation::Outside).unwrap();
        let g0 = al_gap(&enc, &expert, &agent).unwrap();
        let mut counters = InvariantCounters::default();
        for _ in 0..200 {
            encoder_update(&mut enc, &mut opt, &fmap, &batch, &UpdateSettings::default(), &mut rng).unwrap();
            counters.check_embeddings(&enc.embed_batch(&expert).unwrap());
        }
        assert!(counters.clean());
        let l1 = infonce_loss(&enc, &expert, &agent, Aggregation::Outside).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
        assert!(al_gap(&enc, &expert, &agent).unwrap() > g0);
        let ee = enc.embed_batch(&expert).unwrap();
        let ae = enc.embed_batch(&agent).unwrap();
        let s_ee = mean(ee.matmul_t(&ee).unwrap().data());
        let s_ea = mean(ee.matmul_t(&ae).unwrap().data());
        assert!(s_ee > s_ea);
    }
}
