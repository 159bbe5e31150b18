//! Reward-model strategies selected by name: contrastive imitation composed
//! from a representation objective and a reward head, the adversarial
//! discriminator, and the ground-truth reward.

use diffmath::{AdamConfig, AdamState, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{discriminator_update, tcn_indices, tcn_loss_on_tape, Discriminator, LinearProbe, TcnBatch};
use crate::error::{Error, Result};
use crate::pcil::{
    self, embed_pair, encoder_step, expert_reference, infonce_from_embeddings, Aggregation, ContrastiveBatch,
    Encoder, EncoderConfig, FeatureMap, InvariantCounters, RefMode, UnitEmbedding, UpdateSettings,
};
use crate::registry::Registry;
use crate::replay::{ReplayBuffer, Transition};
use crate::rl::{EnvReward, LearnerView, RewardDiagnostics, RewardModel, RewardTag};

/// Knobs shared by the reward-model strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSettings {
    pub hidden: usize,
    pub embedding_dim: usize,
    pub temperature: f64,
    pub lr: f64,
    pub contrastive_batch: usize,
    pub expert_ratio: f64,
    pub encode_action: bool,
    pub aggregation: Aggregation,
    pub ref_mode: RefMode,
    pub gp_weight: f64,
    pub gp_center_zero: bool,
    pub gp_samples: Option<usize>,
    pub tcn_window: usize,
    pub tcn_negatives: usize,
    pub disc_batch: usize,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            hidden: 256,
            embedding_dim: 64,
            temperature: 0.07,
            lr: 1e-4,
            contrastive_batch: 256,
            expert_ratio: 0.5,
            encode_action: false,
            aggregation: Aggregation::Outside,
            ref_mode: RefMode::Sample,
            gp_weight: pcil::GP_WEIGHT,
            gp_center_zero: false,
            gp_samples: None,
            tcn_window: 2,
            tcn_negatives: 1,
            disc_batch: 256,
        }
    }
}

impl MethodSettings {
    fn update_settings(&self) -> UpdateSettings {
        UpdateSettings {
            aggregation: self.aggregation,
            ref_mode: self.ref_mode,
            gp_weight: self.gp_weight,
            gp_center_zero: self.gp_center_zero,
            gp_samples: self.gp_samples,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Dimensions a reward model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Output width of the shared trunk, when one feeds the encoder.
    pub trunk_width: Option<usize>,
}

/// Objective that shapes the encoder.
pub trait Representation: Send {
    fn name(&self) -> &'static str;

    /// Feature tensors the loss consumes, drawn for one update.
    fn prepare(
        &self,
        fmap: &FeatureMap<'_>,
        batch: &ContrastiveBatch,
        view: &LearnerView<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>>;

    /// Records the loss on `tape` given bound encoder parameters.
    fn loss(&self, tape: &mut Tape, encoder: &Encoder, bound: &[Var], inputs: &[Tensor]) -> Result<Var>;
}

/// Multi-positive InfoNCE with expert positives and agent negatives.
pub struct PolicyContrastive {
    pub aggregation: Aggregation,
}

impl Representation for PolicyContrastive {
    fn name(&self) -> &'static str {
        "pcl"
    }

    fn prepare(
        &self,
        fmap: &FeatureMap<'_>,
        batch: &ContrastiveBatch,
        _: &LearnerView<'_>,
        _: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        Ok(vec![fmap.features(&batch.expert)?, fmap.features(&batch.agent)?])
    }

    fn loss(&self, tape: &mut Tape, encoder: &Encoder, bound: &[Var], inputs: &[Tensor]) -> Result<Var> {
        let (e, a) = embed_pair(tape, encoder, bound, &inputs[0], &inputs[1])?;
        infonce_from_embeddings(tape, e, a, encoder.temperature(), self.aggregation)
    }
}

/// Temporal neighbours as positives, distant steps as negatives.
pub struct TimeContrastive {
    pub window: usize,
    pub negatives: usize,
    pub anchors: usize,
    pub expert_ratio: f64,
}

impl TimeContrastive {
    fn draw<'b, R: Rng + ?Sized>(
        &self,
        buf: &'b ReplayBuffer,
        count: usize,
        rng: &mut R,
        out: &mut [Vec<&'b Transition>],
    ) -> Result<()> {
        const ATTEMPTS: usize = 64;
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..ATTEMPTS {
                let k = rng.gen_range(0..buf.len());
                let (lo, hi) = buf.episode_bounds(k);
                let len = hi - lo + 1;
                if len <= 2 * self.window {
                    continue;
                }
                let (p, ns) = tcn_indices(k - lo, len, self.window, self.negatives, rng)?;
                out[0].push(buf.get(k));
                out[1].push(buf.get(lo + p));
                for (slot, n) in ns.into_iter().enumerate() {
                    out[2 + slot].push(buf.get(lo + n));
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::InsufficientData(format!(
                    "no stored trajectory longer than {} steps",
                    2 * self.window
                )));
            }
        }
        Ok(())
    }
}

impl Representation for TimeContrastive {
    fn name(&self) -> &'static str {
        "tcn"
    }

    fn prepare(
        &self,
        fmap: &FeatureMap<'_>,
        _: &ContrastiveBatch,
        view: &LearnerView<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        let from_expert = ((self.anchors as f64) * self.expert_ratio).round() as usize;
        let mut slots: Vec<Vec<&Transition>> = vec![Vec::new(); 2 + self.negatives];
        self.draw(view.expert, from_expert, rng, &mut slots)?;
        self.draw(view.agent, self.anchors - from_expert, rng, &mut slots)?;
        slots
            .into_iter()
            .map(|ts| fmap.features(&fmap.raw_inputs(ts)?))
            .collect()
    }

    fn loss(&self, tape: &mut Tape, encoder: &Encoder, bound: &[Var], inputs: &[Tensor]) -> Result<Var> {
        let batch = TcnBatch {
            anchors: inputs[0].clone(),
            positives: inputs[1].clone(),
            negatives: inputs[2..].to_vec(),
        };
        tcn_loss_on_tape(tape, encoder, bound, &batch)
    }
}

/// Maps embeddings to rewards.
pub trait RewardHead: Send {
    fn name(&self) -> &'static str;

    /// Refits on detached embeddings after an encoder step; returns a
    /// head loss when the head is trained.
    fn fit(&mut self, expert: &Tensor, agent: &Tensor) -> Result<Option<f64>>;

    /// Prepares the reward for one critic batch.
    fn begin_batch(&mut self, encoder: &Encoder, expert_features: &Tensor, rng: &mut ChaCha8Rng) -> Result<()>;

    fn rewards(&self, embeddings: &Tensor) -> Result<Vec<f64>>;

    /// Deterministic rewards given the embeddings of the full expert set.
    fn analysis_rewards(&self, embeddings: &Tensor, expert_embeddings: &Tensor) -> Result<Vec<f64>>;

    /// Whether rewards are bounded cosine similarities.
    fn bounded(&self) -> bool;

    fn params(&self) -> ParamSet;

    fn load_params(&mut self, params: &ParamSet) -> Result<()>;
}

/// Cosine similarity to an expert reference embedding.
pub struct SimilarityHead {
    mode: RefMode,
    reference: Option<UnitEmbedding>,
}

impl SimilarityHead {
    pub fn new(mode: RefMode) -> Self {
        Self { mode, reference: None }
    }
}

impl RewardHead for SimilarityHead {
    fn name(&self) -> &'static str {
        "sim"
    }

    fn fit(&mut self, expert: &Tensor, _: &Tensor) -> Result<Option<f64>> {
        if self.mode == RefMode::Mean {
            self.reference = Some(pcil::mean_reference(expert)?);
        }
        Ok(None)
    }

    fn begin_batch(&mut self, encoder: &Encoder, expert_features: &Tensor, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.mode == RefMode::Sample || self.reference.is_none() {
            self.reference = Some(expert_reference(encoder, expert_features, self.mode, rng)?);
        }
        Ok(())
    }

    fn rewards(&self, embeddings: &Tensor) -> Result<Vec<f64>> {
        let r = self
            .reference
            .as_ref()
            .ok_or_else(|| Error::Invalid("similarity reward used before a reference was drawn".into()))?;
        pcil::similarity_rewards(embeddings, r)
    }

    fn analysis_rewards(&self, embeddings: &Tensor, expert_embeddings: &Tensor) -> Result<Vec<f64>> {
        pcil::similarity_rewards(embeddings, &pcil::mean_reference(expert_embeddings)?)
    }

    fn bounded(&self) -> bool {
        true
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        if let Some(r) = &self.reference {
            p.push("reference", Tensor::row(r.as_slice()));
        }
        p
    }

    fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        if let Some(r) = params.get("reference") {
            self.reference = Some(UnitEmbedding::normalized(r.data())?);
        }
        Ok(())
    }
}

/// Logit of a linear classifier trained on detached embeddings.
pub struct ProbeHead {
    probe: LinearProbe,
    opt: AdamState,
}

impl ProbeHead {
    pub fn new(dim: usize, adam: AdamConfig) -> Self {
        let probe = LinearProbe::new(dim);
        let opt = AdamState::new(probe.net().params(), adam);
        Self { probe, opt }
    }
}

impl RewardHead for ProbeHead {
    fn name(&self) -> &'static str {
        "gail"
    }

    fn fit(&mut self, expert: &Tensor, agent: &Tensor) -> Result<Option<f64>> {
        self.probe.update(&mut self.opt, expert, agent).map(Some)
    }

    fn begin_batch(&mut self, _: &Encoder, _: &Tensor, _: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    fn rewards(&self, embeddings: &Tensor) -> Result<Vec<f64>> {
        self.probe.logits(embeddings)
    }

    fn analysis_rewards(&self, embeddings: &Tensor, _: &Tensor) -> Result<Vec<f64>> {
        self.probe.logits(embeddings)
    }

    fn bounded(&self) -> bool {
        false
    }

    fn params(&self) -> ParamSet {
        self.probe.net().params().clone()
    }

    fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        self.probe.net_mut().params_mut().load_from(params)?;
        Ok(())
    }
}

/// Reward from a contrastively trained encoder and a reward head.
pub struct ContrastiveImitation {
    tag: RewardTag,
    encoder: Encoder,
    opt: AdamState,
    representation: Box<dyn Representation>,
    head: Box<dyn RewardHead>,
    settings: MethodSettings,
    dims: ModelDims,
    counters: InvariantCounters,
    diag: RewardDiagnostics,
}

impl ContrastiveImitation {
    pub fn new(
        representation: Box<dyn Representation>,
        head: Box<dyn RewardHead>,
        settings: &MethodSettings,
        dims: ModelDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let tag = match (representation.name(), head.name()) {
            ("pcl", "sim") => RewardTag::Pcil,
            ("tcn", "sim") => RewardTag::TcnSim,
            ("pcl", "gail") => RewardTag::PclGail,
            ("tcn", "gail") => RewardTag::TcnGail,
            (r, h) => return Err(Error::Invalid(format!("no reward tag for ({r}, {h})"))),
        };
        let fmap_width = dims.trunk_width.unwrap_or(dims.state_dim)
            + if settings.encode_action { dims.action_dim } else { 0 };
        let cfg = EncoderConfig {
            hidden: vec![settings.hidden; 3],
            out_dim: settings.embedding_dim,
            temperature: settings.temperature,
        };
        let encoder = Encoder::new(fmap_width, &cfg, rng)?;
        let opt = AdamState::new(encoder.net().params(), settings.adam());
        Ok(Self {
            tag,
            encoder,
            opt,
            representation,
            head,
            settings: settings.clone(),
            dims,
            counters: InvariantCounters::default(),
            diag: RewardDiagnostics::default(),
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn invariants(&self) -> InvariantCounters {
        self.counters
    }

    fn fmap<'a>(&self, view: &LearnerView<'a>) -> FeatureMap<'a> {
        FeatureMap::with_trunk(view.trunk, self.dims.state_dim, self.settings.encode_action)
    }

    fn embed(&self, fmap: &FeatureMap<'_>, ts: &[&Transition]) -> Result<Tensor> {
        let raw = fmap.raw_inputs(ts.iter().copied())?;
        self.encoder.embed_batch(&fmap.features(&raw)?)
    }

    fn expert_embeddings(&self, view: &LearnerView<'_>) -> Result<Tensor> {
        let fmap = self.fmap(view);
        let all: Vec<&Transition> = view.expert.iter().collect();
        self.embed(&fmap, &all)
    }
}

impl RewardModel for ContrastiveImitation {
    fn tag(&self) -> RewardTag {
        self.tag
    }

    fn update(&mut self, view: &LearnerView<'_>, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
        let fmap = self.fmap(view);
        let batch = ContrastiveBatch::sample(
            &fmap,
            view.expert,
            view.agent,
            self.settings.contrastive_batch,
            self.settings.expert_ratio,
            rng,
        )?;
        let inputs = self.representation.prepare(&fmap, &batch, view, rng)?;
        let repr = &self.representation;
        let step = encoder_step(
            &mut self.encoder,
            &mut self.opt,
            &fmap,
            &batch,
            &self.settings.update_settings(),
            rng,
            |tape, enc, bound| repr.loss(tape, enc, bound, &inputs),
        )?;
        let ee = self.encoder.embed_batch(&fmap.features(&batch.expert)?)?;
        let ae = self.encoder.embed_batch(&fmap.features(&batch.agent)?)?;
        self.counters.check_embeddings(&ee);
        self.counters.check_embeddings(&ae);
        self.head.fit(&ee, &ae)?;
        Ok(Some(step.loss))
    }

    fn begin_batch(&mut self, view: &LearnerView<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
        let fmap = self.fmap(view);
        let n = self.settings.contrastive_batch / 2;
        let sample = view.expert.sample(n.max(1), rng)?;
        let feats = fmap.features(&fmap.raw_inputs(sample.iter())?)?;
        self.head.begin_batch(&self.encoder, &feats, rng)
    }

    fn rewards(&mut self, view: &LearnerView<'_>, ts: &[&Transition]) -> Result<Vec<f64>> {
        let z = self.embed(&self.fmap(view), ts)?;
        self.counters.check_embeddings(&z);
        let r = self.head.rewards(&z)?;
        if self.head.bounded() {
            self.counters.check_rewards(&r);
        }
        self.diag.observe_rewards(&r);
        Ok(r)
    }

    fn analysis_rewards(&self, view: &LearnerView<'_>, ts: &[&Transition]) -> Result<Vec<f64>> {
        let z = self.embed(&self.fmap(view), ts)?;
        self.head.analysis_rewards(&z, &self.expert_embeddings(view)?)
    }

    fn al_gap(&self, view: &LearnerView<'_>, expert: &[&Transition], agent: &[&Transition]) -> Result<Option<f64>> {
        let fmap = self.fmap(view);
        let ee = self.embed(&fmap, expert)?;
        let ae = self.embed(&fmap, agent)?;
        pcil::al_gap_from_embeddings(&ee, &ae).map(Some)
    }

    fn embeddings(&self, view: &LearnerView<'_>, ts: &[&Transition]) -> Result<Option<Tensor>> {
        self.embed(&self.fmap(view), ts).map(Some)
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("encoder", self.encoder.net().params());
        p.extend_prefixed("head", &self.head.params());
        p
    }

    fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        self.encoder.net_mut().params_mut().load_from(&params.sub_set("encoder"))?;
        self.head.load_params(&params.sub_set("head"))
    }

    fn diagnostics(&self) -> RewardDiagnostics {
        RewardDiagnostics {
            norm_violations: self.counters.norm_violations,
            bound_violations: self.counters.bound_violations,
            embeddings_checked: self.counters.embeddings_checked,
            rewards_checked: self.counters.rewards_checked,
            ..self.diag.clone()
        }
    }
}

/// Discriminator logit reward.
pub struct AdversarialImitation {
    disc: Discriminator,
    opt: AdamState,
    settings: MethodSettings,
    dims: ModelDims,
    diag: RewardDiagnostics,
}

impl AdversarialImitation {
    pub fn new(settings: &MethodSettings, dims: ModelDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let width = dims.state_dim + if settings.encode_action { dims.action_dim } else { 0 };
        let disc = Discriminator::new(width, &vec![settings.hidden; 3], rng)?;
        let opt = AdamState::new(disc.net().params(), settings.adam());
        Ok(Self {
            disc,
            opt,
            settings: settings.clone(),
            dims,
            diag: RewardDiagnostics::default(),
        })
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    fn fmap(&self) -> FeatureMap<'static> {
        FeatureMap::raw(self.dims.state_dim, self.settings.encode_action)
    }
}

impl RewardModel for AdversarialImitation {
    fn tag(&self) -> RewardTag {
        RewardTag::Dac
    }

    fn update(&mut self, view: &LearnerView<'_>, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
        let fmap = self.fmap();
        let batch = ContrastiveBatch::sample(
            &fmap,
            view.expert,
            view.agent,
            self.settings.disc_batch,
            self.settings.expert_ratio,
            rng,
        )?;
        discriminator_update(
            &mut self.disc,
            &mut self.opt,
            &batch.expert,
            &batch.agent,
            self.settings.gp_weight,
            self.settings.gp_center_zero,
            rng,
        )
        .map(Some)
    }

    fn rewards(&mut self, view: &LearnerView<'_>, ts: &[&Transition]) -> Result<Vec<f64>> {
        let r = self.analysis_rewards(view, ts)?;
        self.diag.observe_rewards(&r);
        Ok(r)
    }

    fn analysis_rewards(&self, _: &LearnerView<'_>, ts: &[&Transition]) -> Result<Vec<f64>> {
        let raw = self.fmap().raw_inputs(ts.iter().copied())?;
        self.disc.logits(&raw)
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("discriminator", self.disc.net().params());
        p
    }

    fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        self.disc.net_mut().params_mut().load_from(&params.sub_set("discriminator"))?;
        Ok(())
    }

    fn diagnostics(&self) -> RewardDiagnostics {
        self.diag.clone()
    }
}

pub type RepresentationFactory = fn(&MethodSettings) -> Box<dyn Representation>;
pub type HeadFactory = fn(&MethodSettings) -> Box<dyn RewardHead>;
pub type MethodFactory = fn(&MethodSettings, &Selection, ModelDims, &mut ChaCha8Rng) -> Result<Box<dyn RewardModel>>;

/// Method name together with the ablation switches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub method: String,
    pub representation: String,
    pub reward: String,
}

pub fn representation_registry() -> Registry<RepresentationFactory> {
    fn pcl(s: &MethodSettings) -> Box<dyn Representation> {
        Box::new(PolicyContrastive {
            aggregation: s.aggregation,
        })
    }
    fn tcn(s: &MethodSettings) -> Box<dyn Representation> {
        Box::new(TimeContrastive {
            window: s.tcn_window,
            negatives: s.tcn_negatives,
            anchors: s.contrastive_batch,
            expert_ratio: s.expert_ratio,
        })
    }
    let mut r: Registry<RepresentationFactory> = Registry::new("representation");
    r.register("pcl", pcl as RepresentationFactory)
        .register("tcn", tcn as RepresentationFactory);
    r
}

pub fn reward_head_registry() -> Registry<HeadFactory> {
    fn sim(s: &MethodSettings) -> Box<dyn RewardHead> {
        Box::new(SimilarityHead::new(s.ref_mode))
    }
    fn gail(s: &MethodSettings) -> Box<dyn RewardHead> {
        Box::new(ProbeHead::new(s.embedding_dim, s.adam()))
    }
    let mut r: Registry<HeadFactory> = Registry::new("reward");
    r.register("sim", sim as HeadFactory).register("gail", gail as HeadFactory);
    r
}

/// Online reward-model methods. Behavioral cloning trains offline and is
/// handled by the harness.
pub fn method_registry() -> Registry<MethodFactory> {
    fn contrastive(
        s: &MethodSettings,
        sel: &Selection,
        dims: ModelDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn RewardModel>> {
        let repr = representation_registry().get(&sel.representation)?(s);
        let head = reward_head_registry().get(&sel.reward)?(s);
        Ok(Box::new(ContrastiveImitation::new(repr, head, s, dims, rng)?))
    }
    fn adversarial(
        s: &MethodSettings,
        _: &Selection,
        dims: ModelDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn RewardModel>> {
        Ok(Box::new(AdversarialImitation::new(s, dims, rng)?))
    }
    fn ground_truth(
        _: &MethodSettings,
        _: &Selection,
        _: ModelDims,
        _: &mut ChaCha8Rng,
    ) -> Result<Box<dyn RewardModel>> {
        Ok(Box::new(EnvReward::default()))
    }
    let mut r: Registry<MethodFactory> = Registry::new("method");
    r.register("pcil", contrastive as MethodFactory)
        .register("dac", adversarial as MethodFactory)
        .register("env_reward", ground_truth as MethodFactory);
    r
}

pub fn build_reward_model(
    settings: &MethodSettings,
    selection: &Selection,
    dims: ModelDims,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn RewardModel>> {
    method_registry().get(&selection.method)?(settings, selection, dims, rng)
}
