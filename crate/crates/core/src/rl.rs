//! Off-policy deterministic actor-critic with n-step returns, clipped double
//! Q, target smoothing and an optional critic-trained shared trunk.

use diffmath::{Activation, AdamConfig, AdamState, Mlp, ParamSet, StepOutcome, Tape, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::replay::{NStepWindow, ReplayBuffer, Transition};

/// Source of a reward function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardTag {
    Pcil,
    Dac,
    Env,
    TcnSim,
    PclGail,
    TcnGail,
}

impl RewardTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pcil => "pcil",
            Self::Dac => "dac",
            Self::Env => "env",
            Self::TcnSim => "tcn_sim",
            Self::PclGail => "pcl_gail",
            Self::TcnGail => "tcn_gail",
        }
    }

    /// Closed range the rewards of this source must lie in, if bounded.
    pub fn bounds(self) -> Option<(f64, f64)> {
        match self {
            Self::Pcil | Self::TcnSim => Some((-1.0, 1.0)),
            Self::Env => Some((0.0, 1.0)),
            Self::Dac | Self::PclGail | Self::TcnGail => None,
        }
    }
}

/// Read-only learner state a reward model may consult.
#[derive(Clone, Copy)]
pub struct LearnerView<'a> {
    pub trunk: Option<&'a Mlp>,
    pub expert: &'a ReplayBuffer,
    pub agent: &'a ReplayBuffer,
}

/// Diagnostics kept by a reward model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardDiagnostics {
    pub norm_violations: u64,
    pub bound_violations: u64,
    pub embeddings_checked: u64,
    pub rewards_checked: u64,
    pub reward_min: Option<f64>,
    pub reward_max: Option<f64>,
}

impl RewardDiagnostics {
    pub fn observe_rewards(&mut self, rs: &[f64]) {
        for &r in rs {
            self.reward_min = Some(self.reward_min.map_or(r, |m| m.min(r)));
            self.reward_max = Some(self.reward_max.map_or(r, |m| m.max(r)));
        }
    }
}

/// A learned or given reward function together with its training step.
pub trait RewardModel: Send {
    fn tag(&self) -> RewardTag;

    /// One representation/discriminator step at learner cadence. Returns
    /// its loss when something was trained.
    fn update(&mut self, view: &LearnerView<'_>, rng: &mut ChaCha8Rng) -> Result<Option<f64>>;

    /// Called once before each critic batch is relabeled.
    fn begin_batch(&mut self, _view: &LearnerView<'_>, _rng: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    /// Rewards used for critic targets.
    fn rewards(&mut self, view: &LearnerView<'_>, ts: &[&Transition]) -> Result<Vec<f64>>;

    /// Deterministic rewards for analysis; no randomness is consumed.
    fn analysis_rewards(&self, view: &LearnerView<'_>, ts: &[&Transition]) -> Result<Vec<f64>>;

    /// Expert-minus-agent mean reward gap, where defined.
    fn al_gap(&self, _view: &LearnerView<'_>, _expert: &[&Transition], _agent: &[&Transition]) -> Result<Option<f64>> {
        Ok(None)
    }

    /// Embeddings of transitions, for representation-based models.
    fn embeddings(&self, _view: &LearnerView<'_>, _ts: &[&Transition]) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn params(&self) -> ParamSet;

    /// Restores parameters saved by [`RewardModel::params`].
    fn load_params(&mut self, params: &ParamSet) -> Result<()>;

    fn diagnostics(&self) -> RewardDiagnostics;
}

/// Ground-truth environment reward.
#[derive(Debug, Default)]
pub struct EnvReward {
    diag: RewardDiagnostics,
}

impl RewardModel for EnvReward {
    fn tag(&self) -> RewardTag {
        RewardTag::Env
    }

    fn update(&mut self, _: &LearnerView<'_>, _: &mut ChaCha8Rng) -> Result<Option<f64>> {
        Ok(None)
    }

    fn rewards(&mut self, view: &LearnerView<'_>, ts: &[&Transition]) -> Result<Vec<f64>> {
        let r = self.analysis_rewards(view, ts)?;
        self.diag.observe_rewards(&r);
        Ok(r)
    }

    fn analysis_rewards(&self, _: &LearnerView<'_>, ts: &[&Transition]) -> Result<Vec<f64>> {
        Ok(ts.iter().map(|t| t.reward_env).collect())
    }

    fn params(&self) -> ParamSet {
        ParamSet::new()
    }

    fn load_params(&mut self, _: &ParamSet) -> Result<()> {
        Ok(())
    }

    fn diagnostics(&self) -> RewardDiagnostics {
        self.diag.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub hidden: usize,
    pub lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub n_step: usize,
    pub batch_size: usize,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub shared_trunk: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            lr: 1e-4,
            gamma: 0.99,
            tau: 0.01,
            n_step: 3,
            batch_size: 128,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            shared_trunk: true,
        }
    }
}

/// Counters of learner incidents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentCounters {
    pub critic_updates: u64,
    pub actor_updates: u64,
    pub skipped_targets: u64,
    pub skipped_steps: u64,
}

/// Critic loss with per-network gradients.
#[derive(Debug, Clone)]
pub struct CriticGrads {
    pub loss: f64,
    pub critics: [Vec<Tensor>; 2],
    pub trunk: Option<Vec<Tensor>>,
}

/// Actor, twin critics, their targets, and the optional shared trunk.
#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    state_dim: usize,
    action_dim: usize,
    pub trunk: Option<Mlp>,
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub targets: [Mlp; 2],
    trunk_opt: Option<AdamState>,
    actor_opt: AdamState,
    critic_opts: [AdamState; 2],
    pub counters: AgentCounters,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, cfg: AgentConfig, rng: &mut R) -> Result<Self> {
        if cfg.hidden == 0 || state_dim == 0 || action_dim == 0 {
            return Err(Error::config("hidden", "network sizes must be positive"));
        }
        let h = cfg.hidden;
        let trunk = cfg
            .shared_trunk
            .then(|| Mlp::new(&[state_dim, h, h], Activation::Relu, Activation::Tanh, rng));
        let feat = if cfg.shared_trunk { h } else { state_dim };
        let actor = Mlp::new(&[feat, h, h, action_dim], Activation::Relu, Activation::Tanh, rng);
        let critic = |rng: &mut R| Mlp::new(&[feat + action_dim, h, h, 1], Activation::Relu, Activation::Identity, rng);
        let c1 = critic(rng);
        let c2 = critic(rng);
        Self::from_parts(cfg, state_dim, action_dim, trunk, actor, [c1, c2])
    }

    /// Assembles an agent from given networks; targets start as copies.
    pub fn from_parts(
        cfg: AgentConfig,
        state_dim: usize,
        action_dim: usize,
        trunk: Option<Mlp>,
        actor: Mlp,
        critics: [Mlp; 2],
    ) -> Result<Self> {
        let feat = trunk.as_ref().map_or(state_dim, Mlp::output_dim);
        if actor.input_dim() != feat || actor.output_dim() != action_dim {
            return Err(Error::Invalid("actor shape does not match features/actions".into()));
        }
        for c in &critics {
            if c.input_dim() != feat + action_dim || c.output_dim() != 1 {
                return Err(Error::Invalid("critic shape does not match features/actions".into()));
            }
        }
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            trunk_opt: trunk.as_ref().map(|t| AdamState::new(t.params(), adam)),
            actor_opt: AdamState::new(actor.params(), adam),
            critic_opts: [
                AdamState::new(critics[0].params(), adam),
                AdamState::new(critics[1].params(), adam),
            ],
            targets: critics.clone(),
            critics,
            trunk,
            actor,
            cfg,
            state_dim,
            action_dim,
            counters: AgentCounters::default(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Trunk features of observation rows (the rows themselves without a trunk).
    pub fn features(&self, obs: &Tensor) -> Result<Tensor> {
        match &self.trunk {
            Some(t) => Ok(t.predict(obs)?),
            None => Ok(obs.clone()),
        }
    }

    /// Deterministic actions for observation rows.
    pub fn policy(&self, obs: &Tensor) -> Result<Tensor> {
        Ok(self.actor.predict(&self.features(obs)?)?)
    }

    /// Action for one observation with Gaussian exploration noise of
    /// standard deviation `noise_std`, each component clipped to ±1, and
    /// the result clipped to the action box.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], noise_std: f64, rng: &mut R) -> Result<Vec<f64>> {
        if obs.len() != self.state_dim || obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("observation must be finite and match the state dimension".into()));
        }
        let mut a = self.policy(&Tensor::row(obs))?.into_data();
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Invalid(e.to_string()))?;
            for v in &mut a {
                *v += normal.sample(rng).clamp(-1.0, 1.0);
            }
        }
        for v in &mut a {
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(a)
    }

    fn critic_input(features: &Tensor, actions: &Tensor) -> Result<Tensor> {
        Ok(Tensor::concat_cols(&[features, actions])?)
    }

    /// Bootstrap targets `R + discount·min(Q'_1, Q'_2)(s', π(s')+ε)`.
    pub fn targets_for<R: Rng + ?Sized>(&self, windows: &[NStepWindow], returns: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let next: Vec<&[f64]> = windows.iter().map(|w| w.last().next_state.as_slice()).collect();
        let next = Tensor::from_rows(&next)?;
        let f = self.features(&next)?;
        let mut a = self.actor.predict(&f)?;
        if self.cfg.target_noise > 0.0 {
            let normal = Normal::new(0.0, self.cfg.target_noise).map_err(|e| Error::Invalid(e.to_string()))?;
            let c = self.cfg.target_noise_clip;
            for v in a.data_mut() {
                *v = (*v + normal.sample(rng).clamp(-c, c)).clamp(-1.0, 1.0);
            }
        }
        let x = Self::critic_input(&f, &a)?;
        let q1 = self.targets[0].predict(&x)?;
        let q2 = self.targets[1].predict(&x)?;
        Ok(windows
            .iter()
            .enumerate()
            .map(|(i, w)| returns[i] + w.discount * q1.data()[i].min(q2.data()[i]))
            .collect())
    }

    /// Regresses both critics onto n-step targets built from per-step
    /// `rewards` (one vector per window). Returns the summed squared-error
    /// loss, or `None` when the update was skipped.
    pub fn critic_update<R: Rng + ?Sized>(
        &mut self,
        windows: &[NStepWindow],
        rewards: &[Vec<f64>],
        rng: &mut R,
    ) -> Result<Option<f64>> {
        if windows.is_empty() || windows.len() != rewards.len() {
            return Err(Error::Invalid("critic batch and rewards must be non-empty and aligned".into()));
        }
        let gamma = self.cfg.gamma;
        let mut returns = Vec::with_capacity(windows.len());
        for (w, r) in windows.iter().zip(rewards) {
            if r.len() != w.transitions.len() {
                return Err(Error::Invalid("reward count differs from window length".into()));
            }
            returns.push(r.iter().rev().fold(0.0, |acc, x| x + gamma * acc));
        }
        let y = self.targets_for(windows, &returns, rng)?;
        if y.iter().any(|v| !v.is_finite()) {
            self.counters.skipped_targets += 1;
            log::warn!("non-finite critic target, update skipped");
            return Ok(None);
        }
        let states: Vec<&[f64]> = windows.iter().map(|w| w.first().state.as_slice()).collect();
        let actions: Vec<&[f64]> = windows.iter().map(|w| w.first().action.as_slice()).collect();
        let cg = self.critic_loss_and_grads(&Tensor::from_rows(&states)?, &Tensor::from_rows(&actions)?, &y)?;
        for (i, g) in cg.critics.iter().enumerate() {
            if self.critic_opts[i].step(self.critics[i].params_mut(), g)? == StepOutcome::Skipped {
                self.counters.skipped_steps += 1;
            }
        }
        if let (Some(t), Some(opt), Some(g)) = (self.trunk.as_mut(), self.trunk_opt.as_mut(), cg.trunk.as_ref()) {
            if opt.step(t.params_mut(), g)? == StepOutcome::Skipped {
                self.counters.skipped_steps += 1;
            }
        }
        self.counters.critic_updates += 1;
        Ok(Some(cg.loss))
    }

    /// Summed mean-squared error of both critics against fixed targets `y`,
    /// with gradients for each critic and the trunk.
    pub fn critic_loss_and_grads(&self, states: &Tensor, actions: &Tensor, y: &[f64]) -> Result<CriticGrads> {
        if states.rows() != y.len() || actions.rows() != y.len() {
            return Err(Error::Invalid("critic states, actions and targets must align".into()));
        }
        let mut tape = Tape::new();
        let s = tape.constant(states.clone())?;
        let a = tape.constant(actions.clone())?;
        let (f, trunk_vars) = match &self.trunk {
            Some(t) => {
                let bound = t.bind(&mut tape, true)?;
                (t.forward(&mut tape, &bound, s)?, bound)
            }
            None => (s, Vec::new()),
        };
        let x = tape.concat_cols(&[f, a])?;
        let yv = tape.constant(Tensor::column(y))?;
        let mut bound_critics = Vec::with_capacity(2);
        let mut total: Option<Var> = None;
        for c in &self.critics {
            let bound = c.bind(&mut tape, true)?;
            let q = c.forward(&mut tape, &bound, x)?;
            let d = tape.sub(q, yv)?;
            let sq = tape.square(d)?;
            let l = tape.mean(sq)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
            bound_critics.push(bound);
        }
        let total = total.expect("two critics");
        let loss = tape.value(total).item()?;
        let grads = tape.backward(total)?;
        Ok(CriticGrads {
            loss,
            critics: [
                self.critics[0].params().collect_grads(&grads, &bound_critics[0]),
                self.critics[1].params().collect_grads(&grads, &bound_critics[1]),
            ],
            trunk: self.trunk.as_ref().map(|t| t.params().collect_grads(&grads, &trunk_vars)),
        })
    }

    /// Builds `−mean Q₁(f, π(f))` on a tape with trunk features as
    /// constants. Returns the tape, the loss and the bound actor params.
    fn actor_objective(&self, states: &Tensor) -> Result<(Tape, Var, Vec<Var>)> {
        let f = self.features(states)?;
        let mut tape = Tape::new();
        let fv = tape.constant(f)?;
        let actor_vars = self.actor.bind(&mut tape, true)?;
        let a = self.actor.forward(&mut tape, &actor_vars, fv)?;
        let x = tape.concat_cols(&[fv, a])?;
        let cvars = self.critics[0].bind(&mut tape, false)?;
        let q = self.critics[0].forward(&mut tape, &cvars, x)?;
        let m = tape.mean(q)?;
        let loss = tape.neg(m)?;
        Ok((tape, loss, actor_vars))
    }

    /// Actor loss value and its gradient without stepping.
    pub fn actor_loss_and_grads(&self, states: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let (tape, loss, vars) = self.actor_objective(states)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item()?, self.actor.params().collect_grads(&grads, &vars)))
    }

    /// One Adam step ascending `Q₁(s, π(s))`; returns `−mean Q₁`.
    pub fn actor_update(&mut self, states: &Tensor) -> Result<f64> {
        let (loss, g) = self.actor_loss_and_grads(states)?;
        if self.actor_opt.step(self.actor.params_mut(), &g)? == StepOutcome::Skipped {
            self.counters.skipped_steps += 1;
        }
        self.counters.actor_updates += 1;
        Ok(loss)
    }

    /// Moves both target critics toward the online critics by `tau`.
    pub fn soft_update(&mut self) -> Result<()> {
        let tau = self.cfg.tau;
        for i in 0..2 {
            soft_update(&mut self.targets[i], &self.critics[i], tau)?;
        }
        Ok(())
    }

    /// All parameters under stable prefixed names.
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        if let Some(t) = &self.trunk {
            p.extend_prefixed("trunk", t.params());
        }
        p.extend_prefixed("actor", self.actor.params());
        p.extend_prefixed("critic1", self.critics[0].params());
        p.extend_prefixed("critic2", self.critics[1].params());
        p.extend_prefixed("target1", self.targets[0].params());
        p.extend_prefixed("target2", self.targets[1].params());
        p
    }

    /// Restores parameters saved by [`Agent::params`].
    pub fn load_params(&mut self, p: &ParamSet) -> Result<()> {
        if let Some(t) = &mut self.trunk {
            t.params_mut().load_from(&p.sub_set("trunk"))?;
        }
        self.actor.params_mut().load_from(&p.sub_set("actor"))?;
        self.critics[0].params_mut().load_from(&p.sub_set("critic1"))?;
        self.critics[1].params_mut().load_from(&p.sub_set("critic2"))?;
        self.targets[0].params_mut().load_from(&p.sub_set("target1"))?;
        self.targets[1].params_mut().load_from(&p.sub_set("target2"))?;
        Ok(())
    }
}

/// `target ← (1−τ)·target + τ·online`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config("tau", "must lie in [0, 1]"));
    }
    Ok(target.params_mut().soft_update_from(online.params(), tau)?)
}

/// Linear decay from `start` to `end` over the first `fraction` of `total`.
pub fn exploration_std(step: u64, total: u64, start: f64, end: f64, fraction: f64) -> f64 {
    let horizon = (total as f64 * fraction).max(1.0);
    let t = (step as f64 / horizon).min(1.0);
    start + (end - start) * t
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub total_steps: u64,
    pub eval_interval: u64,
    pub update_every: u64,
    pub learning_starts: u64,
    pub buffer_capacity: usize,
    pub explore_start: f64,
    pub explore_end: f64,
    pub explore_decay_fraction: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            eval_interval: 5_000,
            update_every: 2,
            learning_starts: 1_000,
            buffer_capacity: 100_000,
            explore_start: 1.0,
            explore_end: 0.1,
            explore_decay_fraction: 0.5,
        }
    }
}

/// Independent random streams derived from one seed.
pub struct SeedStreams {
    pub env: ChaCha8Rng,
    pub explore: ChaCha8Rng,
    pub learner: ChaCha8Rng,
    pub agent_init: ChaCha8Rng,
    pub reward_init: ChaCha8Rng,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            env: stream(1),
            explore: stream(2),
            learner: stream(3),
            agent_init: stream(4),
            reward_init: stream(5),
        }
    }
}

/// Mean losses accumulated between evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSummary {
    pub reward_model: Option<f64>,
    pub critic: Option<f64>,
    pub actor: Option<f64>,
}

#[derive(Default)]
struct Running {
    sum: f64,
    n: u64,
}

impl Running {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Self::default();
        out
    }
}

/// Reward bound incidents seen in critic batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopCounters {
    pub env_steps: u64,
    pub learner_updates: u64,
    pub rewards_observed: u64,
    pub reward_bound_violations: u64,
}

/// State handed to the evaluation callback.
pub struct EvalContext<'a> {
    pub step: u64,
    pub agent: &'a Agent,
    pub reward: &'a dyn RewardModel,
    pub view: LearnerView<'a>,
    pub losses: LossSummary,
    pub counters: LoopCounters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Result of a finished loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub counters: LoopCounters,
    pub stopped_early: bool,
}

/// Alternates environment steps with learner updates, one update per
/// `update_every` steps, and calls `on_eval` every `eval_interval` steps.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    cfg: &LoopConfig,
    env: &dyn Environment,
    agent: &mut Agent,
    reward: &mut dyn RewardModel,
    expert: &ReplayBuffer,
    streams: &mut SeedStreams,
    on_eval: &mut dyn FnMut(&EvalContext<'_>) -> Result<Control>,
) -> Result<LoopOutcome> {
    if cfg.eval_interval == 0 || cfg.update_every == 0 {
        return Err(Error::config("eval_interval", "intervals must be positive"));
    }
    let spec = env.spec();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, spec.state_dim, spec.action_dim);
    let mut counters = LoopCounters::default();
    let (mut rm_loss, mut c_loss, mut a_loss) = (Running::default(), Running::default(), Running::default());
    let n_step = agent.config().n_step;
    let gamma = agent.config().gamma;
    let batch = agent.config().batch_size;
    let bounds = reward.tag().bounds();

    let mut state = env.reset(streams.env.next_u64());
    for step in 1..=cfg.total_steps {
        let obs = env.observe(&state);
        let action = if step <= cfg.learning_starts {
            (0..spec.action_dim).map(|_| streams.explore.gen_range(-1.0..=1.0)).collect()
        } else {
            let sigma = exploration_std(
                step,
                cfg.total_steps,
                cfg.explore_start,
                cfg.explore_end,
                cfg.explore_decay_fraction,
            );
            agent.act(&obs, sigma, &mut streams.explore)?
        };
        let out = env.step(&state, &action)?;
        buffer.push(Transition {
            state: obs,
            action,
            next_state: env.observe(&out.state),
            reward_env: out.reward,
            done: out.done,
        })?;
        counters.env_steps = step;
        state = if out.done {
            env.reset(streams.env.next_u64())
        } else {
            out.state
        };

        if step % cfg.update_every == 0 && step > cfg.learning_starts.min(cfg.total_steps) && buffer.len() >= n_step {
            let view = LearnerView {
                trunk: agent.trunk.as_ref(),
                expert,
                agent: &buffer,
            };
            if let Some(l) = reward.update(&view, &mut streams.learner)? {
                rm_loss.add(l);
            }
            let windows = buffer.sample_nstep(batch, n_step, gamma, &mut streams.learner)?;
            reward.begin_batch(&view, &mut streams.learner)?;
            let flat: Vec<&Transition> = windows.iter().flat_map(|w| w.transitions.iter()).collect();
            let r = reward.rewards(&view, &flat)?;
            if r.len() != flat.len() {
                return Err(Error::Invalid("reward model returned the wrong number of rewards".into()));
            }
            for &v in &r {
                counters.rewards_observed += 1;
                if let Some((lo, hi)) = bounds {
                    if !(v >= lo - 1e-9 && v <= hi + 1e-9) {
                        counters.reward_bound_violations += 1;
                    }
                }
            }
            let mut it = r.into_iter();
            let per_window: Vec<Vec<f64>> = windows
                .iter()
                .map(|w| it.by_ref().take(w.transitions.len()).collect())
                .collect();
            if let Some(l) = agent.critic_update(&windows, &per_window, &mut streams.learner)? {
                c_loss.add(l);
            }
            let states: Vec<&[f64]> = windows.iter().map(|w| w.first().state.as_slice()).collect();
            a_loss.add(agent.actor_update(&Tensor::from_rows(&states)?)?);
            agent.soft_update()?;
            counters.learner_updates += 1;
        }

        if step % cfg.eval_interval == 0 {
            let ctx = EvalContext {
                step,
                agent: &*agent,
                reward: &*reward,
                view: LearnerView {
                    trunk: agent.trunk.as_ref(),
                    expert,
                    agent: &buffer,
                },
                losses: LossSummary {
                    reward_model: rm_loss.take(),
                    critic: c_loss.take(),
                    actor: a_loss.take(),
                },
                counters,
            };
            if on_eval(&ctx)? == Control::Stop {
                return Ok(LoopOutcome {
                    counters,
                    stopped_early: step < cfg.total_steps,
                });
            }
        }
    }
    Ok(LoopOutcome {
        counters,
        stopped_early: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_agent(shared: bool) -> Agent {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AgentConfig {
            hidden: 8,
            shared_trunk: shared,
            ..AgentConfig::default()
        };
        Agent::new(3, 2, cfg, &mut rng).unwrap()
    }

    #[test]
    fn deterministic_action_and_box() {
        let agent = tiny_agent(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = agent.act(&[0.1, 0.2, 0.3], 0.0, &mut rng).unwrap();
        assert_eq!(a, agent.act(&[0.1, 0.2, 0.3], 0.0, &mut rng).unwrap());
        for _ in 0..50 {
            let a = agent.act(&[0.1, 0.2, 0.3], 10.0, &mut rng).unwrap();
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let z = agent.act(&[0.0; 3], 0.0, &mut rng).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
        assert!(agent.act(&[f64::NAN, 0.0, 0.0], 0.0, &mut rng).is_err());
    }

    #[test]
    fn targets_start_equal_and_soft_update() {
        let mut agent = tiny_agent(false);
        assert_eq!(agent.targets[0].params().tensors(), agent.critics[0].params().tensors());
        let mut t = Mlp::zeroed(&[1, 1], Activation::Identity, Activation::Identity);
        let mut online = t.clone();
        for p in online.params_mut().tensors_mut() {
            p.data_mut().fill(1.0);
        }
        soft_update(&mut t, &online, 0.01).unwrap();
        assert!((t.params().tensors()[0].data()[0] - 0.01).abs() < 1e-15);
        agent.soft_update().unwrap();
    }

    #[test]
    fn exploration_schedule() {
        assert_eq!(exploration_std(0, 100, 1.0, 0.1, 0.5), 1.0);
        assert!((exploration_std(25, 100, 1.0, 0.1, 0.5) - 0.55).abs() < 1e-12);
        assert!((exploration_std(50, 100, 1.0, 0.1, 0.5) - 0.1).abs() < 1e-12);
        assert!((exploration_std(90, 100, 1.0, 0.1, 0.5) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn streams_are_independent() {
        let mut a = SeedStreams::new(7);
        let mut b = SeedStreams::new(7);
        let _ = b.learner.next_u64();
        assert_eq!(a.env.next_u64(), b.env.next_u64());
        assert_ne!(SeedStreams::new(7).env.next_u64(), SeedStreams::new(7).explore.next_u64());
    }

    #[test]
    fn reward_tag_bounds() {
        assert_eq!(RewardTag::Pcil.bounds(), Some((-1.0, 1.0)));
        assert_eq!(RewardTag::Env.bounds(), Some((0.0, 1.0)));
        assert_eq!(RewardTag::Dac.bounds(), None);
    }
}
