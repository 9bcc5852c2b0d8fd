//! Actor-critic training through differentiable rollouts.
//!
//! Each update builds one tape: an `H`-step rollout from a batch of start
//! states, lambda-returns over it, then a critic regression step followed by
//! an actor step that maximizes the summed lambda-returns by backpropagating
//! through the mode samples, actions, dynamics, rewards and critic.

mod adam;
mod eval;
mod returns;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use serde::Serialize;
use thiserror::Error;

pub use adam::{clip_global_norm, Adam};
pub use eval::{evaluate, EvalOptions, EvalReport};
pub use returns::{lambda_returns, lambda_returns_graph};

use crate::distributions::{DistError, GumbelConfig};
use crate::envs::{Env, EnvError, EnvKind};
use crate::gradcore::{Backend, GradError, Matrix, Tape, Var};
use crate::policy::{
    ActionSample, BoundMlp, BoundPolicy, Mlp, ModeMethod, NoiseSource, NoiseStreams, Policy, PolicyDims, PolicyError,
};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at rollout step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
    #[error("lambda returns need H >= 1 rewards and H + 1 values, got {rewards} and {values}")]
    ReturnLengths { rewards: usize, values: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ste,
    Gumbel,
    Unimodal,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ste, Method::Gumbel, Method::Unimodal];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ste => "ste",
            Method::Gumbel => "gumbel",
            Method::Unimodal => "unimodal",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub method: Method,
    pub n_factors: usize,
    pub n_classes: usize,
    pub hidden: usize,
    /// Gumbel-softmax temperature.
    pub temperature: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub batch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub updates: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Wall-clock timings make metrics non-reproducible, so they are opt-in.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::TwoGoal,
            method: Method::Ste,
            n_factors: 4,
            n_classes: 4,
            hidden: crate::policy::DEFAULT_HIDDEN,
            temperature: 2.0,
            gamma: 0.99,
            lambda: 0.95,
            horizon: 16,
            batch: 32,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            updates: 1000,
            eval_every: 100,
            eval_episodes: 10,
            grad_clip: 100.0,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        for (name, v) in [
            ("horizon", self.horizon),
            ("batch", self.batch),
            ("hidden", self.hidden),
            ("n_factors", self.n_factors),
            ("n_classes", self.n_classes),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("temperature", self.temperature),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if u32::try_from(self.n_factors)
            .ok()
            .and_then(|n| self.n_classes.checked_pow(n))
            .is_none()
        {
            return fail(format!("{}^{} modes overflow", self.n_classes, self.n_factors));
        }
        Ok(())
    }

    pub fn policy_dims(&self) -> PolicyDims {
        let spec = Env::new(self.env).spec();
        PolicyDims {
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            hidden: self.hidden,
            n_factors: self.n_factors,
            n_classes: self.n_classes,
        }
    }

    /// Freshly initialized policy and critic from the run's init stream.
    pub fn init_models(&self) -> Result<(Policy, ValueNet)> {
        self.validate()?;
        let mut init = rng::stream(self.seed, rng::INIT);
        let dims = self.policy_dims();
        let policy = match self.method {
            Method::Unimodal => Policy::unimodal(dims.state_dim, dims.action_dim, dims.hidden, &mut init),
            m => {
                let method = if m == Method::Ste {
                    ModeMethod::Ste
                } else {
                    ModeMethod::Gumbel
                };
                Policy::multimodal(dims, method, GumbelConfig::new(self.temperature, true)?, &mut init)
            }
        };
        let value = ValueNet::new(dims.state_dim, dims.hidden, &mut init);
        Ok((policy, value))
    }
}

/// State-value critic, state -> h -> h -> 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub mlp: Mlp,
}

impl ValueNet {
    /// Random hidden layers and a zero output layer, so the critic starts
    /// flat and the first actor gradients come from rewards alone.
    pub fn new(state_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut mlp = Mlp::new(&[state_dim, hidden, hidden, 1], rng);
        mlp.zero_output_layer();
        Self { mlp }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.output_dim() != 1 {
            return Err(TrainError::Config(format!("critic output width {}", mlp.output_dim())));
        }
        Ok(Self { mlp })
    }
}

/// Nodes of one differentiable rollout, all on the same tape.
#[derive(Debug, Clone)]
pub struct RolloutBatch<V> {
    /// `H + 1` states, each `B x state_dim`.
    pub states: Vec<V>,
    pub actions: Vec<ActionSample<V>>,
    /// `H` reward columns.
    pub rewards: Vec<V>,
    /// `H + 1` critic columns on the live states; the last is the bootstrap.
    pub values: Vec<V>,
    /// `H` lambda-return columns.
    pub returns: Vec<V>,
}

impl<V> RolloutBatch<V> {
    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn rollout<B: Backend>(
    b: &mut B,
    policy: &Policy,
    bound_policy: &BoundPolicy<B::Value>,
    bound_value: &BoundMlp<B::Value>,
    env: &Env,
    starts: Matrix,
    cfg: &TrainConfig,
    noise: &mut impl NoiseSource,
) -> Result<RolloutBatch<B::Value>> {
    let h = cfg.horizon;
    let mut state = b.constant(starts);
    let mut batch = RolloutBatch {
        states: Vec::with_capacity(h + 1),
        actions: Vec::with_capacity(h),
        rewards: Vec::with_capacity(h),
        values: Vec::with_capacity(h + 1),
        returns: Vec::new(),
    };
    for step in 0..h {
        let sample = policy.act(b, bound_policy, &state, noise)?;
        let (next, reward) = env.step_diff(b, &state, &sample.action).map_err(|e| match e {
            EnvError::NonFinite { what, .. } => TrainError::NonFinite { what, step },
            other => other.into(),
        })?;
        if !b.value(&reward).is_finite() {
            return Err(TrainError::NonFinite { what: "reward", step });
        }
        batch.values.push(bound_value.forward(b, &state)?);
        batch.states.push(state);
        batch.actions.push(sample);
        batch.rewards.push(reward);
        state = next;
    }
    batch.values.push(bound_value.forward(b, &state)?);
    batch.states.push(state);
    if let Some(step) = batch.values.iter().position(|v| !b.value(v).is_finite()) {
        return Err(TrainError::NonFinite { what: "value", step });
    }
    batch.returns = lambda_returns_graph(b, &batch.rewards, &batch.values, cfg.gamma, cfg.lambda)?;
    Ok(batch)
}

fn scalar(tape: &Tape, v: Var, what: &'static str) -> Result<f64> {
    let x = tape.value(&v).item()?;
    if !x.is_finite() {
        return Err(TrainError::NonFiniteLoss(what));
    }
    Ok(x)
}

/// `mean(0.5 * (v(s_t) - stop_gradient(V_t))^2)` over steps `0..H` and the
/// batch. The critic sees detached states, so this loss only reaches the
/// critic's parameters.
pub fn critic_loss(tape: &mut Tape, bound_value: &BoundMlp<Var>, batch: &RolloutBatch<Var>) -> Result<Var> {
    let h = batch.horizon();
    let rows = tape.value(&batch.returns[0]).rows();
    let mut terms = Vec::with_capacity(h);
    for t in 0..h {
        let s = tape.stop_gradient(&batch.states[t]);
        let v = bound_value.forward(tape, &s)?;
        let target = tape.stop_gradient(&batch.returns[t]);
        let diff = tape.sub(&v, &target)?;
        let sq = tape.square(&diff);
        terms.push(tape.sum(&sq));
    }
    let total = sum_all(tape, &terms)?;
    Ok(tape.scale(&total, 0.5 / (h * rows) as f64))
}

/// `-(1/B) * sum_t sum_b V_t`.
pub fn actor_loss(tape: &mut Tape, batch: &RolloutBatch<Var>) -> Result<Var> {
    let rows = tape.value(&batch.returns[0]).rows();
    let terms: Vec<Var> = batch.returns.iter().map(|r| tape.sum(r)).collect();
    let total = sum_all(tape, &terms)?;
    Ok(tape.scale(&total, -1.0 / rows as f64))
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms
        .first()
        .ok_or(TrainError::ReturnLengths { rewards: 0, values: 0 })?;
    for t in &terms[1..] {
        acc = tape.add(&acc, t)?;
    }
    Ok(acc)
}

fn step_on(tape: &mut Tape, loss: Var, what: &'static str, vars: &[Var], clip: f64) -> Result<(f64, Vec<Matrix>)> {
    let value = scalar(tape, loss, what)?;
    tape.zero_grads();
    tape.backward(loss)?;
    let mut grads: Vec<Matrix> = vars.iter().map(|v| tape.grad(*v)).collect();
    clip_global_norm(&mut grads, clip);
    Ok((value, grads))
}

/// Critic regression step on the critic's parameters only. Returns the loss.
pub fn critic_update(
    tape: &mut Tape,
    value: &mut ValueNet,
    bound_value: &BoundMlp<Var>,
    batch: &RolloutBatch<Var>,
    cfg: &TrainConfig,
    opt: &mut Adam,
) -> Result<f64> {
    let loss = critic_loss(tape, bound_value, batch)?;
    let (loss, grads) = step_on(tape, loss, "critic", &bound_value.vars(), cfg.grad_clip)?;
    opt.step(&mut value.mlp.params_mut(), &grads);
    Ok(loss)
}

/// Actor step on the policy's parameters only. The critic is part of the
/// graph but left untouched. Returns the loss.
pub fn actor_update(
    tape: &mut Tape,
    policy: &mut Policy,
    bound_policy: &BoundPolicy<Var>,
    batch: &RolloutBatch<Var>,
    cfg: &TrainConfig,
    opt: &mut Adam,
) -> Result<f64> {
    let loss = actor_loss(tape, batch)?;
    let (loss, grads) = step_on(tape, loss, "actor", &bound_policy.vars(), cfg.grad_clip)?;
    opt.step(&mut policy.params_mut(), &grads);
    Ok(loss)
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub update_step: usize,
    /// `update_step * batch * horizon`.
    pub env_steps: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    /// Mean over updates since the previous row; 0 on the first row.
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Distinct greedy modes over the evaluation states; 0 for the unimodal
    /// policy.
    pub distinct_modes_used: usize,
    /// Elapsed training time, or 0 unless wall times are recorded.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingRecord {
    pub rows: Vec<MetricsRow>,
}

impl TrainingRecord {
    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.eval_return_mean)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: TrainingRecord,
    pub policy: Policy,
    pub value: ValueNet,
    /// State of the evaluation stream every evaluation starts from.
    pub eval_rng: [u8; 32],
    pub final_eval: EvalReport,
}

/// Learner state carried between updates.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: Policy,
    pub value: ValueNet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl Learner {
    pub fn new(policy: Policy, value: ValueNet, cfg: &TrainConfig) -> Self {
        let actor_opt = Adam::new(cfg.actor_lr, &policy.params());
        let critic_opt = Adam::new(cfg.critic_lr, &value.mlp.params());
        Self {
            policy,
            value,
            actor_opt,
            critic_opt,
        }
    }

    /// One critic step then one actor step on a fresh rollout from
    /// `starts`. Returns `(actor_loss, critic_loss, visited states)`, the
    /// visited states being rows of steps `1..=H`.
    pub fn update(
        &mut self,
        env: &Env,
        starts: Matrix,
        cfg: &TrainConfig,
        streams: &mut NoiseStreams,
    ) -> Result<(f64, f64, Matrix)> {
        let mut tape = Tape::new();
        let bound_policy = self.policy.bind(&mut tape);
        let bound_value = self.value.mlp.bind(&mut tape);
        let batch = rollout(
            &mut tape,
            &self.policy,
            &bound_policy,
            &bound_value,
            env,
            starts,
            cfg,
            streams,
        )?;
        let critic = critic_update(
            &mut tape,
            &mut self.value,
            &bound_value,
            &batch,
            cfg,
            &mut self.critic_opt,
        )?;
        let actor = actor_update(
            &mut tape,
            &mut self.policy,
            &bound_policy,
            &batch,
            cfg,
            &mut self.actor_opt,
        )?;
        let visited: Vec<&Matrix> = batch.states[1..].iter().map(|s| tape.value(s)).collect();
        let d = visited[0].cols();
        let data: Vec<f64> = visited.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        let rows = data.len() / d;
        Ok((actor, critic, Matrix::new(rows, d, data)?))
    }
}

/// Start states: half fresh resets, the rest drawn from states visited by
/// the previous rollout (all fresh when there is none).
pub fn start_states(env: &Env, batch: usize, pool: Option<&Matrix>, env_rng: &mut Rng, replay_rng: &mut Rng) -> Matrix {
    let fresh = match pool {
        Some(p) if p.rows() > 0 => batch / 2,
        _ => batch,
    };
    let mut out = env.reset_batch(fresh, env_rng).into_vec();
    if let Some(p) = pool {
        for _ in fresh..batch {
            let r = replay_rng.random_range(0..p.rows());
            out.extend_from_slice(p.row(r));
        }
    }
    Matrix::new(batch, env.spec().state_dim, out).expect("state widths agree")
}

/// Full training run: evaluation at update 0, every `eval_every` updates
/// and after the last update. Deterministic given the config.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (policy, value) = cfg.init_models()?;
    train_from(cfg, policy, value)
}

pub fn train_from(cfg: &TrainConfig, policy: Policy, value: ValueNet) -> Result<TrainOutcome> {
    cfg.validate()?;
    let env = Env::new(cfg.env);
    let mut learner = Learner::new(policy, value, cfg);
    let mut env_rng = rng::stream(cfg.seed, rng::ENV);
    let mut replay_rng = rng::stream(cfg.seed, rng::REPLAY);
    let mut streams = NoiseStreams::from_seed(cfg.seed);
    let eval_rng = rng::stream(cfg.seed, rng::EVAL);
    let started = Instant::now();
    let mut record = TrainingRecord::default();
    let mut pool: Option<Matrix> = None;
    let (mut actor_sum, mut critic_sum, mut since) = (0.0, 0.0, 0usize);

    let mut evaluate_now = |learner: &Learner, step: usize, actor: f64, critic: f64| -> Result<EvalReport> {
        let report = evaluate(
            &learner.policy,
            &env,
            cfg.eval_episodes,
            &mut eval_rng.clone(),
            EvalOptions::default(),
        )?;
        record.rows.push(MetricsRow {
            update_step: step,
            env_steps: (step * cfg.batch * cfg.horizon) as u64,
            eval_return_mean: report.mean,
            eval_return_std: report.std,
            actor_loss: actor,
            critic_loss: critic,
            distinct_modes_used: report.mode_usage.as_ref().map_or(0, |u| u.distinct()),
            wall_ms: if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        Ok(report)
    };

    let mut last = evaluate_now(&learner, 0, 0.0, 0.0)?;
    for step in 1..=cfg.updates {
        let starts = start_states(&env, cfg.batch, pool.as_ref(), &mut env_rng, &mut replay_rng);
        let (actor, critic, visited) = learner.update(&env, starts, cfg, &mut streams)?;
        pool = Some(visited);
        actor_sum += actor;
        critic_sum += critic;
        since += 1;
        if step % cfg.eval_every == 0 || step == cfg.updates {
            let n = since as f64;
            last = evaluate_now(&learner, step, actor_sum / n, critic_sum / n)?;
            (actor_sum, critic_sum, since) = (0.0, 0.0, 0);
        }
    }
    Ok(TrainOutcome {
        record,
        policy: learner.policy,
        value: learner.value,
        eval_rng: rng::state_bytes(&eval_rng),
        final_eval: last,
    })
}

/// Noise streams seeded from one draw each of `rng`.
pub(crate) fn child_streams(rng: &mut Rng) -> NoiseStreams {
    NoiseStreams {
        mode: Rng::seed_from_u64(rng.random()),
        action: Rng::seed_from_u64(rng.random()),
    }
}
