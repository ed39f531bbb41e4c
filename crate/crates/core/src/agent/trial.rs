//! The perception/action loop for one trial.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{action_step, apply_action, perception_step, AgentConfig, TraceRecord, TrialTrace};
use crate::causal::CausalTracker;
use crate::env::{fk_jacobian, stimulation_schedule, Actuation, ArmEnv, Condition, EnvConfig, StimMode};
use crate::error::{Error, Result};
use crate::generative::VisualModel;

/// Everything that determines a trial besides the visual model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSetup {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub condition: Condition,
    pub mode: StimMode,
    pub seed: u64,
}

/// Runs one clamped-arm trial. Per iteration: observe, update γ (event or
/// decay), update the belief, update the action, step the environment,
/// record. A non-finite update stops the trial; the partial trace is
/// returned with `aborted` set.
pub fn run_trial(setup: &TrialSetup, model: &VisualModel) -> Result<TrialTrace> {
    setup.agent.validate()?;
    let agent = &setup.agent;
    if model.resolution() != setup.env.resolution() {
        return Err(Error::Config(format!(
            "model resolution {} differs from environment resolution {}",
            model.resolution(),
            setup.env.resolution()
        )));
    }
    let dt = agent.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let schedule = stimulation_schedule(setup.mode, agent.duration_s, &setup.env.stimulation, &mut rng)?;
    let mut tracker = CausalTracker::new(agent.gamma0, schedule, agent.causal)?;
    let mut env = ArmEnv::for_condition(setup.env.clone(), setup.condition, Actuation::Clamped)?;
    let mut session = model.session()?;
    let bounds = setup.env.limits.widened(agent.mu_margin);

    let mut mu = setup.env.rest;
    let mut a = [0.0; 2];
    let mut trace = TrialTrace {
        initial_mu: mu.to_array(),
        records: Vec::with_capacity(agent.iterations),
        events: tracker.events().iter().map(|e| (*e, None)).collect(),
        aborted: None,
    };
    for k in 0..agent.iterations {
        let t = (k + 1) as f64 * dt;
        let mut obs = env.observe(&mut rng)?;
        obs.event = tracker.advance(t)?;
        if obs.event.is_some() {
            // all events completing by t fired now
            for (ev, fired) in trace.events.iter_mut() {
                if fired.is_none() && ev.completion() <= t {
                    *fired = Some(k);
                }
            }
        }
        let gamma = tracker.belief().gamma;
        let step = match perception_step(&mut session, mu, &obs, gamma, &agent.precisions, agent.lr, &bounds) {
            Ok(s) => s,
            Err(Error::NonFinite(what)) => {
                trace.aborted = Some(format!("iteration {k}: non-finite {what}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let inc = action_step(step.mu, obs.s_p, &agent.precisions, dt)?;
        a = apply_action(a, inc, agent.lr_a, agent.action_clamp);
        env.step(a, dt)?;
        mu = step.mu;

        let q = env.true_angles();
        let jac = fk_jacobian(q, &setup.env.geometry);
        let hand = setup.env.hand(mu);
        trace.records.push(TraceRecord {
            iter: k,
            t,
            mu: mu.to_array(),
            s_p: obs.s_p.to_array(),
            action: a,
            gamma,
            free_energy: step.free_energy,
            ee_mu: [hand.x, hand.y],
            ee_accel_x: jac[0][0] * a[0] + jac[0][1] * a[1],
            oob: step.out_of_bounds,
        });
    }
    Ok(trace)
}
