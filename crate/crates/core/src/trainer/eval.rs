use crate::envs::{Env, EnvKind};
use crate::gradcore::{Eager, Matrix};
use crate::policy::{ModeUsage, Policy};
use crate::rng::Rng;
use crate::stats::mean_std;

use super::{child_streams, Result, TrainError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Sample modes and actions instead of acting greedily.
    pub stochastic: bool,
    /// Keep each episode's first mode for the whole episode.
    pub freeze_mode: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the episode returns.
    pub std: f64,
    /// Modes used at every visited state; `None` for the unimodal policy.
    pub mode_usage: Option<ModeUsage>,
    /// Episodes ending within reach of each two-goal target.
    pub goal_counts: Option<[usize; 2]>,
    pub final_states: Matrix,
}

impl EvalReport {
    pub fn goal_fractions(&self) -> Option<[f64; 2]> {
        let n = self.returns.len() as f64;
        self.goal_counts.map(|c| [c[0] as f64 / n, c[1] as f64 / n])
    }
}

/// Runs `episodes` full-horizon episodes side by side. Resets come from
/// `rng`, followed by the noise seeds of stochastic evaluation.
pub fn evaluate(policy: &Policy, env: &Env, episodes: usize, rng: &mut Rng, opts: EvalOptions) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(TrainError::Config("evaluation needs at least one episode".into()));
    }
    let spec = env.spec();
    let mut state = env.reset_batch(episodes, rng);
    let mut streams = child_streams(rng);
    let mut returns = vec![0.0; episodes];
    let mut usage = policy.is_multimodal().then(ModeUsage::default);
    let mut frozen: Option<Vec<usize>> = None;
    let mut e = Eager;
    let bound = policy.bind(&mut e);
    for _ in 0..spec.horizon {
        let (action, modes) = match (&frozen, opts.stochastic) {
            (Some(modes), stochastic) => {
                let eps = stochastic.then(|| policy.draw_noise(episodes, &mut streams).action);
                (policy.act_for_modes(modes, eps.as_ref())?, modes.clone())
            }
            (None, true) => {
                let s = policy.act(&mut e, &bound, &state, &mut streams)?;
                (s.action, s.mode_index)
            }
            (None, false) => {
                let g = policy.act_deterministic(&state)?;
                (g.action, g.mode_index)
            }
        };
        if let Some(u) = usage.as_mut() {
            u.extend(&modes);
            if opts.freeze_mode && frozen.is_none() {
                frozen = Some(modes);
            }
        }
        let (next, reward) = env.step_diff(&mut e, &state, &action)?;
        for (acc, r) in returns.iter_mut().zip(reward.as_slice()) {
            *acc += r;
        }
        state = next;
    }
    let (mean, std) = mean_std(&returns);
    let goal_counts = (env.kind() == EnvKind::TwoGoal).then(|| {
        let mut c = [0; 2];
        for r in 0..state.rows() {
            if let Some(g) = env.reached_goal(state.row(r)) {
                c[g] += 1;
            }
        }
        c
    });
    Ok(EvalReport {
        returns,
        mean,
        std,
        mode_usage: usage,
        goal_counts,
        final_states: state,
    })
}
