//! Experiment orchestration: demo collection, deterministic evaluation,
//! seeded training runs with metrics CSVs and checkpoints, the
//! representation x reward ablation grid, embedding dumps and plots.

pub mod config;
pub mod metrics;
pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use diffmath::{checkpoint, Activation, Mlp, ParamSet, Tensor};
use rand::rngs::mock::StepRng;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{bc_train, BcConfig};
use crate::envs::{make_env, EnvState, Environment};
use crate::error::{Error, Result};
use crate::method::{build_reward_model, ModelDims};
use crate::replay::{load_demos, save_demos, ReplayBuffer, Transition};
use crate::rl::{train_loop, Agent, Control, LearnerView, LoopCounters, RewardDiagnostics, RewardModel, SeedStreams};

pub use config::ExperimentConfig;
pub use metrics::{mean_std, spearman, MetricsRow};

/// Transitions per side used for the gap column and embedding dumps.
pub const GAP_EXPERT_SAMPLES: usize = 128;
pub const GAP_AGENT_SAMPLES: usize = 256;
/// Stream of the seed RNG reserved for analysis sampling.
const ANALYSIS_STREAM: u64 = 6;

/// Deterministic action selection.
pub trait Policy: Sync {
    fn act(&self, state: &EnvState, obs: &[f64]) -> Result<Vec<f64>>;
}

/// The environment's scripted controller.
pub struct ScriptedExpert<'a>(pub &'a dyn Environment);

impl Policy for ScriptedExpert<'_> {
    fn act(&self, state: &EnvState, _: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.expert_action(state))
    }
}

/// An actor-critic agent acting without exploration noise.
pub struct AgentPolicy<'a>(pub &'a Agent);

impl Policy for AgentPolicy<'_> {
    fn act(&self, _: &EnvState, obs: &[f64]) -> Result<Vec<f64>> {
        self.0.act(obs, 0.0, &mut StepRng::new(0, 0))
    }
}

/// A bare actor network, as produced by behavioral cloning.
pub struct ActorPolicy<'a>(pub &'a Mlp);

impl Policy for ActorPolicy<'_> {
    fn act(&self, _: &EnvState, obs: &[f64]) -> Result<Vec<f64>> {
        let a = self.0.predict(&Tensor::row(obs))?.into_data();
        Ok(a.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }
}

/// Episode returns and the visited transitions of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub transitions: Vec<Transition>,
}

/// Runs one full episode from `seed`.
pub fn rollout(policy: &dyn Policy, env: &dyn Environment, seed: u64) -> Result<(f64, Vec<Transition>)> {
    let mut s = env.reset(seed);
    let mut total = 0.0;
    let mut ts = Vec::with_capacity(env.spec().episode_length);
    loop {
        let obs = env.observe(&s);
        let action = policy.act(&s, &obs)?;
        let out = env.step(&s, &action)?;
        total += out.reward;
        ts.push(Transition {
            state: obs,
            action,
            next_state: env.observe(&out.state),
            reward_env: out.reward,
            done: out.done,
        });
        s = out.state;
        if out.done {
            return Ok((total, ts));
        }
    }
}

/// Episodes from seeds `seed, seed+1, ...`; mean and sample std of returns
/// (std 0 for a single episode).
pub fn evaluate(policy: &dyn Policy, env: &dyn Environment, episodes: usize, seed: u64) -> Result<Evaluation> {
    if episodes == 0 {
        return Err(Error::config("eval_episodes", "must be positive"));
    }
    let mut returns = Vec::with_capacity(episodes);
    let mut transitions = Vec::new();
    for i in 0..episodes as u64 {
        let (r, ts) = rollout(policy, env, seed.wrapping_add(i))?;
        returns.push(r);
        transitions.extend(ts);
    }
    let (mean, std) = mean_std(&returns);
    Ok(Evaluation {
        returns,
        mean,
        std,
        transitions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSummary {
    pub transitions: Vec<Transition>,
    pub returns: Vec<f64>,
    pub mean_return: f64,
}

/// Expert episodes from seeds `seed, seed+1, ...`.
pub fn demo_episodes(policy: &dyn Policy, env: &dyn Environment, episodes: usize, seed: u64) -> Result<DemoSummary> {
    let ev = evaluate(policy, env, episodes, seed)?;
    Ok(DemoSummary {
        mean_return: ev.mean,
        returns: ev.returns,
        transitions: ev.transitions,
    })
}

/// Collects demos and writes them with a `mean_return=` header comment. A
/// mean return below `return_floor` is logged as a warning.
pub fn collect_demos(
    policy: &dyn Policy,
    env: &dyn Environment,
    env_name: &str,
    episodes: usize,
    seed: u64,
    return_floor: f64,
    path: impl AsRef<Path>,
) -> Result<DemoSummary> {
    let d = demo_episodes(policy, env, episodes, seed)?;
    if d.mean_return < return_floor {
        log::warn!(
            "expert mean return {} is below the floor {}",
            d.mean_return,
            return_floor
        );
    }
    let header = format!(
        "env={env_name} episodes={episodes} seed={seed} mean_return={}",
        d.mean_return
    );
    save_demos(path, &d.transitions, Some(&header))?;
    Ok(d)
}

/// `mean_return` from a demo file's header comment.
pub fn demo_header_mean_return(path: impl AsRef<Path>) -> Result<Option<f64>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    Ok(first
        .strip_prefix('#')
        .and_then(|h| h.split_whitespace().find_map(|kv| kv.strip_prefix("mean_return=")))
        .and_then(|v| v.parse().ok()))
}

pub fn build_env(cfg: &ExperimentConfig) -> Result<Box<dyn Environment>> {
    make_env(&cfg.env, &cfg.env_overrides)
}

/// Demos from `cfg.demos`, or freshly collected from the scripted expert
/// when no file is configured.
pub fn load_or_collect_demos(cfg: &ExperimentConfig, env: &dyn Environment) -> Result<Vec<Transition>> {
    if cfg.demos.is_empty() {
        Ok(demo_episodes(&ScriptedExpert(env), env, cfg.demo_episodes, cfg.demo_seed)?.transitions)
    } else {
        load_demos(&cfg.demos)
    }
}

/// Scripted-expert return on the evaluation seeds.
pub fn expert_reference(cfg: &ExperimentConfig, env: &dyn Environment) -> Result<f64> {
    Ok(evaluate(&ScriptedExpert(env), env, cfg.eval_episodes, cfg.eval_seed)?.mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedReport {
    pub seed: u64,
    pub failure: Option<String>,
    pub rows: Vec<MetricsRow>,
    pub final_spearman: Option<f64>,
    pub untrained_spearman: Option<f64>,
    pub diagnostics: RewardDiagnostics,
    pub counters: LoopCounters,
    pub metrics_path: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
}

impl SeedReport {
    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.eval_return_mean)
    }

    pub fn best_return(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.eval_return_mean).reduce(f64::max)
    }

    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub dir: PathBuf,
    pub expert_reference: f64,
    pub seeds: Vec<SeedReport>,
}

impl RunReport {
    pub fn all_ok(&self) -> bool {
        self.seeds.iter().all(SeedReport::ok)
    }

    /// Mean and std of final returns over completed seeds.
    pub fn final_return_stats(&self) -> (f64, f64) {
        let v: Vec<f64> = self
            .seeds
            .iter()
            .filter(|s| s.ok())
            .filter_map(SeedReport::final_return)
            .collect();
        mean_std(&v)
    }
}

fn evenly_spaced(len: usize, k: usize) -> Vec<usize> {
    let k = k.min(len);
    (0..k).map(|i| i * len / k.max(1)).collect()
}

/// Expert items spread evenly over the demos and the newest agent items.
fn gap_samples<'a>(view: &LearnerView<'a>) -> (Vec<&'a Transition>, Vec<&'a Transition>) {
    let ex = evenly_spaced(view.expert.len(), GAP_EXPERT_SAMPLES)
        .into_iter()
        .map(|i| view.expert.get(i))
        .collect();
    let n = view.agent.len();
    let ag = (n.saturating_sub(GAP_AGENT_SAMPLES)..n).map(|i| view.agent.get(i)).collect();
    (ex, ag)
}

fn model_dims(env: &dyn Environment, agent: &Agent) -> ModelDims {
    ModelDims {
        state_dim: env.spec().state_dim,
        action_dim: env.spec().action_dim,
        trunk_width: agent.trunk.as_ref().map(Mlp::output_dim),
    }
}

fn new_reward_model(cfg: &ExperimentConfig, dims: ModelDims, seed: u64) -> Result<Box<dyn RewardModel>> {
    let mut streams = SeedStreams::new(seed);
    build_reward_model(&cfg.method_settings(), &cfg.selection(), dims, &mut streams.reward_init)
}

struct SeedOutcome {
    final_spearman: Option<f64>,
    untrained_spearman: Option<f64>,
    diagnostics: RewardDiagnostics,
    counters: LoopCounters,
    checkpoint: ParamSet,
}

fn train_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    demos: &[Transition],
    expert_ref: f64,
    writer: &mut metrics::MetricsWriter,
    rows: &mut Vec<MetricsRow>,
) -> Result<SeedOutcome> {
    let env = build_env(cfg)?;
    let env = env.as_ref();
    let spec = env.spec().clone();
    if cfg.method == "bc" {
        let mut streams = SeedStreams::new(seed);
        let bc = BcConfig {
            hidden: cfg.hidden,
            epochs: cfg.bc_epochs,
            batch_size: cfg.bc_batch,
            lr: cfg.bc_lr,
        };
        let (actor, history) = bc_train(demos, &bc, &mut streams.learner)?;
        let ev = evaluate(&ActorPolicy(&actor), env, cfg.eval_episodes, cfg.eval_seed)?;
        let row = MetricsRow {
            step: 0,
            eval_return_mean: ev.mean,
            eval_return_std: ev.std,
            learned_reward_spearman: None,
            encoder_or_disc_loss: None,
            critic_loss: None,
            actor_loss: history.last().copied(),
            al_gap: None,
        };
        writer.push(&row)?;
        rows.push(row);
        let mut ck = ParamSet::new();
        ck.extend_prefixed("bc_actor", actor.params());
        return Ok(SeedOutcome {
            final_spearman: None,
            untrained_spearman: None,
            diagnostics: RewardDiagnostics::default(),
            counters: LoopCounters::default(),
            checkpoint: ck,
        });
    }

    let mut streams = SeedStreams::new(seed);
    let mut agent = Agent::new(spec.state_dim, spec.action_dim, cfg.agent_config(), &mut streams.agent_init)?;
    let dims = model_dims(env, &agent);
    let mut model = build_reward_model(&cfg.method_settings(), &cfg.selection(), dims, &mut streams.reward_init)?;
    let expert = ReplayBuffer::from_transitions(demos.to_vec())?;
    let mut final_spearman = None;
    let mut untrained_spearman = None;
    let mut diagnostics = RewardDiagnostics::default();
    let mut counters = LoopCounters::default();
    let loop_cfg = cfg.loop_config();
    train_loop(
        &loop_cfg,
        env,
        &mut agent,
        model.as_mut(),
        &expert,
        &mut streams,
        &mut |ctx| {
            let ev = evaluate(&AgentPolicy(ctx.agent), env, cfg.eval_episodes, cfg.eval_seed)?;
            let refs: Vec<&Transition> = ev.transitions.iter().collect();
            let truth: Vec<f64> = refs.iter().map(|t| t.reward_env).collect();
            let learned = ctx.reward.analysis_rewards(&ctx.view, &refs)?;
            let rho = spearman(&learned, &truth);
            let (ex, ag) = gap_samples(&ctx.view);
            let gap = ctx.reward.al_gap(&ctx.view, &ex, &ag)?;
            let row = MetricsRow {
                step: ctx.step,
                eval_return_mean: ev.mean,
                eval_return_std: ev.std,
                learned_reward_spearman: rho,
                encoder_or_disc_loss: ctx.losses.reward_model,
                critic_loss: ctx.losses.critic,
                actor_loss: ctx.losses.actor,
                al_gap: gap,
            };
            writer.push(&row)?;
            rows.push(row);
            let stop = cfg.stop_at_fraction > 0.0 && ev.mean >= cfg.stop_at_fraction * expert_ref;
            let last = stop || ctx.step + loop_cfg.eval_interval > loop_cfg.total_steps;
            if last {
                final_spearman = rho;
                let fresh = new_reward_model(cfg, model_dims(env, ctx.agent), seed)?;
                untrained_spearman = spearman(&fresh.analysis_rewards(&ctx.view, &refs)?, &truth);
                diagnostics = ctx.reward.diagnostics();
                counters = ctx.counters;
            }
            Ok(if stop { Control::Stop } else { Control::Continue })
        },
    )?;
    let mut ck = ParamSet::new();
    ck.extend_prefixed("agent", &agent.params());
    ck.extend_prefixed("reward", &model.params());
    Ok(SeedOutcome {
        final_spearman,
        untrained_spearman,
        diagnostics,
        counters,
        checkpoint: ck,
    })
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, demos: &[Transition], expert_ref: f64, dir: &Path) -> SeedReport {
    let metrics_path = dir.join(format!("seed_{seed}.csv"));
    let mut report = SeedReport {
        seed,
        failure: None,
        rows: Vec::new(),
        final_spearman: None,
        untrained_spearman: None,
        diagnostics: RewardDiagnostics::default(),
        counters: LoopCounters::default(),
        metrics_path: metrics_path.clone(),
        checkpoint_path: None,
    };
    let meta = [
        ("label", cfg.run_name()),
        ("seed", seed.to_string()),
        ("expert_reference", expert_ref.to_string()),
    ];
    let mut writer = match metrics::MetricsWriter::create(&metrics_path, &meta) {
        Ok(w) => w,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };
    let outcome = train_seed(cfg, seed, demos, expert_ref, &mut writer, &mut report.rows).and_then(|o| {
        let path = dir.join(format!("seed_{seed}.ckpt"));
        checkpoint::save(&path, &o.checkpoint)?;
        Ok((o, path))
    });
    match outcome {
        Ok((o, path)) => {
            report.final_spearman = o.final_spearman;
            report.untrained_spearman = o.untrained_spearman;
            report.diagnostics = o.diagnostics;
            report.counters = o.counters;
            report.checkpoint_path = Some(path);
            if let Err(e) = writer.complete() {
                report.failure = Some(e.to_string());
            }
        }
        Err(e) => {
            log::error!("seed {seed} failed: {e}");
            report.failure = Some(e.to_string());
            let _ = writer.fail(&e.to_string());
        }
    }
    report
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub const SUMMARY_HEADER: &str = "seed,status,steps,final_return_mean,final_return_std,best_return_mean,final_spearman,untrained_spearman,final_al_gap,expert_reference,norm_violations,bound_violations,message";

fn summary_csv(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{SUMMARY_HEADER}");
    for r in &report.seeds {
        let last = r.rows.last();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            if r.ok() { "ok" } else { "failed" },
            last.map_or(0, |l| l.step),
            fmt_opt(last.map(|l| l.eval_return_mean)),
            fmt_opt(last.map(|l| l.eval_return_std)),
            fmt_opt(r.best_return()),
            fmt_opt(r.final_spearman),
            fmt_opt(r.untrained_spearman),
            fmt_opt(last.and_then(|l| l.al_gap)),
            report.expert_reference,
            r.diagnostics.norm_violations,
            r.diagnostics.bound_violations + r.counters.reward_bound_violations,
            r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        );
    }
    s
}

/// Trains every configured seed, writing `seed_<s>.csv`, `seed_<s>.ckpt`,
/// `summary.csv` and `config.txt` under `out_dir/<run name>/`. A failing
/// seed records a failure row and the others proceed.
pub fn run(cfg: &ExperimentConfig, parallel_seeds: bool) -> Result<RunReport> {
    cfg.validate()?;
    let env = build_env(cfg)?;
    let dir = Path::new(&cfg.out_dir).join(cfg.run_name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg_path = dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let demos = load_or_collect_demos(cfg, env.as_ref())?;
    let expert_ref = expert_reference(cfg, env.as_ref())?;
    let seeds: Vec<SeedReport> = if parallel_seeds {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    let (demos, dir) = (&demos, &dir);
                    s.spawn(move || run_seed(cfg, seed, demos, expert_ref, dir))
                })
                .collect();
            handles
                .into_iter()
                .zip(&cfg.seeds)
                .map(|(h, &seed)| {
                    h.join().unwrap_or_else(|_| SeedReport {
                        seed,
                        failure: Some("seed thread panicked".into()),
                        rows: Vec::new(),
                        final_spearman: None,
                        untrained_spearman: None,
                        diagnostics: RewardDiagnostics::default(),
                        counters: LoopCounters::default(),
                        metrics_path: dir.join(format!("seed_{seed}.csv")),
                        checkpoint_path: None,
                    })
                })
                .collect()
        })
    } else {
        cfg.seeds
            .iter()
            .map(|&seed| run_seed(cfg, seed, &demos, expert_ref, &dir))
            .collect()
    };
    let report = RunReport {
        dir: dir.clone(),
        expert_reference: expert_ref,
        seeds,
    };
    let summary = dir.join("summary.csv");
    fs::write(&summary, summary_csv(&report)).map_err(|e| Error::io(&summary, e))?;
    Ok(report)
}

pub const ABLATION_CELLS: [(&str, &str); 4] = [("pcl", "sim"), ("pcl", "gail"), ("tcn", "sim"), ("tcn", "gail")];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub representation: String,
    pub reward: String,
    pub final_return_mean: f64,
    pub final_return_std: f64,
    pub seeds_completed: usize,
    pub seeds_total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub runs: Vec<RunReport>,
    pub table_path: PathBuf,
}

impl AblationReport {
    pub fn cell(&self, representation: &str, reward: &str) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.representation == representation && c.reward == reward)
    }

    pub fn all_ok(&self) -> bool {
        self.runs.iter().all(RunReport::all_ok)
    }

    /// Text table: rows are representations, columns reward functions.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>22}{:>22}", "representation", "sim", "gail");
        for repr in ["pcl", "tcn"] {
            let _ = write!(s, "{repr:<16}");
            for reward in ["sim", "gail"] {
                let cell = self
                    .cell(repr, reward)
                    .map(|c| format!("{:.1} ± {:.1}", c.final_return_mean, c.final_return_std))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(s, "{cell:>22}");
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Runs the four (representation, reward) cells with otherwise identical
/// configs and writes `ablation_<env>.csv` under `out_dir`.
pub fn ablate(base: &ExperimentConfig, parallel_seeds: bool) -> Result<AblationReport> {
    let mut cells = Vec::new();
    let mut runs = Vec::new();
    for (repr, reward) in ABLATION_CELLS {
        let mut cfg = base.clone();
        cfg.method = "pcil".into();
        cfg.representation = repr.into();
        cfg.reward = reward.into();
        let report = run(&cfg, parallel_seeds)?;
        let (m, sd) = report.final_return_stats();
        cells.push(AblationCell {
            representation: repr.into(),
            reward: reward.into(),
            final_return_mean: m,
            final_return_std: sd,
            seeds_completed: report.seeds.iter().filter(|s| s.ok()).count(),
            seeds_total: report.seeds.len(),
        });
        runs.push(report);
    }
    let mut csv = String::from("representation,reward,final_return_mean,final_return_std,seeds_completed,seeds_total\n");
    for c in &cells {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            c.representation, c.reward, c.final_return_mean, c.final_return_std, c.seeds_completed, c.seeds_total
        );
    }
    let table_path = Path::new(&base.out_dir).join(format!("ablation_{}.csv", base.env));
    fs::write(&table_path, csv).map_err(|e| Error::io(&table_path, e))?;
    Ok(AblationReport {
        cells,
        runs,
        table_path,
    })
}

/// Builds an agent and reward model for `cfg` and `seed`, restoring
/// parameters from `checkpoint` when given.
pub fn restore(
    cfg: &ExperimentConfig,
    env: &dyn Environment,
    seed: u64,
    checkpoint_path: Option<&Path>,
) -> Result<(Agent, Box<dyn RewardModel>)> {
    let spec = env.spec();
    let mut streams = SeedStreams::new(seed);
    let mut agent = Agent::new(spec.state_dim, spec.action_dim, cfg.agent_config(), &mut streams.agent_init)?;
    let mut model = build_reward_model(
        &cfg.method_settings(),
        &cfg.selection(),
        model_dims(env, &agent),
        &mut streams.reward_init,
    )?;
    if let Some(p) = checkpoint_path {
        let params = checkpoint::load(p)?;
        agent.load_params(&params.sub_set("agent"))?;
        model.load_params(&params.sub_set("reward"))?;
    }
    Ok((agent, model))
}

/// Evaluates a checkpoint (agent or behavioral-cloning actor) or, with no
/// checkpoint, the scripted expert.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    episodes: usize,
    seed: u64,
) -> Result<Evaluation> {
    let env = build_env(cfg)?;
    let env = env.as_ref();
    let Some(path) = checkpoint_path else {
        return evaluate(&ScriptedExpert(env), env, episodes, seed);
    };
    let params = checkpoint::load(path)?;
    let bc = params.sub_set("bc_actor");
    if !bc.is_empty() {
        let spec = env.spec();
        let h = cfg.hidden;
        let mut actor = Mlp::zeroed(&[spec.state_dim, h, h, spec.action_dim], Activation::Relu, Activation::Tanh);
        actor.params_mut().load_from(&bc)?;
        return evaluate(&ActorPolicy(&actor), env, episodes, seed);
    }
    let (agent, _) = restore(cfg, env, 0, Some(path))?;
    evaluate(&AgentPolicy(&agent), env, episodes, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub rows: usize,
    pub dim: usize,
}

/// Writes `src,true_reward,learned_reward,e_0..` for 128 demo transitions
/// and 256 transitions of the agent's noise-free evaluation rollouts.
pub fn dump_embeddings(
    cfg: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    seed: u64,
    out_csv: impl AsRef<Path>,
) -> Result<EmbeddingDump> {
    let env = build_env(cfg)?;
    let env = env.as_ref();
    let demos = load_or_collect_demos(cfg, env)?;
    let (agent, model) = restore(cfg, env, seed, checkpoint_path)?;
    let ev = evaluate(&AgentPolicy(&agent), env, cfg.eval_episodes, cfg.eval_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ANALYSIS_STREAM);
    let pick = |ts: &[Transition], k: usize, rng: &mut ChaCha8Rng| -> Vec<Transition> {
        let mut idx = sample_indices(rng, ts.len(), k.min(ts.len())).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| ts[i].clone()).collect()
    };
    let ex = pick(&demos, GAP_EXPERT_SAMPLES, &mut rng);
    let ag = pick(&ev.transitions, GAP_AGENT_SAMPLES, &mut rng);
    let expert_buf = ReplayBuffer::from_transitions(demos)?;
    let agent_buf = ReplayBuffer::from_transitions(ev.transitions.clone())?;
    let view = LearnerView {
        trunk: agent.trunk.as_ref(),
        expert: &expert_buf,
        agent: &agent_buf,
    };
    let all: Vec<&Transition> = ex.iter().chain(&ag).collect();
    let emb = model
        .embeddings(&view, &all)?
        .ok_or_else(|| Error::Invalid(format!("method {} has no embeddings", cfg.method)))?;
    let learned = model.analysis_rewards(&view, &all)?;
    let dim = emb.cols();
    let mut s = String::from("src,true_reward,learned_reward");
    for k in 0..dim {
        let _ = write!(s, ",e_{k}");
    }
    s.push('\n');
    for (i, t) in all.iter().enumerate() {
        let src = if i < ex.len() { "expert" } else { "agent" };
        let _ = write!(s, "{src},{},{}", t.reward_env, learned[i]);
        for v in emb.row_slice(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    let out = out_csv.as_ref();
    fs::write(out, s).map_err(|e| Error::io(out, e))?;
    Ok(EmbeddingDump { rows: all.len(), dim })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path, method: &str) -> ExperimentConfig {
        ExperimentConfig {
            method: method.into(),
            seeds: vec![3],
            total_steps: 400,
            eval_interval: 200,
            eval_episodes: 1,
            learning_starts: 100,
            hidden: 8,
            embedding_dim: 4,
            contrastive_batch: 16,
            disc_batch: 16,
            batch_size: 8,
            demo_episodes: 2,
            gp_samples: 4,
            bc_epochs: 2,
            out_dir: dir.to_string_lossy().into_owned(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn evaluate_single_episode_has_zero_std() {
        let env = build_env(&ExperimentConfig::default()).unwrap();
        let ev = evaluate(&ScriptedExpert(env.as_ref()), env.as_ref(), 1, 7).unwrap();
        assert_eq!(ev.std, 0.0);
        assert_eq!(ev.transitions.len(), env.spec().episode_length);
    }

    #[test]
    fn every_method_runs_and_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        for m in config::METHODS {
            let cfg = tiny(dir.path(), m);
            let report = run(&cfg, false).unwrap();
            assert!(report.all_ok(), "{m}: {:?}", report.seeds[0].failure);
            let f = metrics::read_metrics(&report.seeds[0].metrics_path).unwrap();
            assert!(f.completed);
            assert!(report.seeds[0].checkpoint_path.as_ref().unwrap().exists());
            let ev = evaluate_checkpoint(&cfg, report.seeds[0].checkpoint_path.as_deref(), 1, 5).unwrap();
            assert!(ev.mean.is_finite());
        }
    }

    #[test]
    fn failing_seed_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), "pcil");
        let bad: Vec<Transition> = (0..50)
            .map(|i| Transition {
                state: vec![0.0; 3],
                action: vec![0.0; 2],
                next_state: vec![0.0; 3],
                reward_env: 0.0,
                done: i % 25 == 24,
            })
            .collect();
        let r = run_seed(&cfg, 3, &bad, 1.0, dir.path());
        assert!(!r.ok());
        let f = metrics::read_metrics(&r.metrics_path).unwrap();
        assert!(!f.completed && f.failure.is_some());
    }

    #[test]
    fn unknown_strategy_rejected_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path(), "pcil");
        cfg.reward = "wasserstein".into();
        assert!(run(&cfg, false).is_err());
        let mut cfg = tiny(dir.path(), "pcil");
        cfg.demos = dir.path().join("missing.jsonl").to_string_lossy().into_owned();
        assert!(run(&cfg, false).is_err());
    }
}
