//! Posterior probability that visual and tactile events share a cause.
//!
//! Under a common cause the visuo-tactile delay is zero-mean Gaussian with
//! standard deviation `sigma_c`; under separate causes it is uniform with
//! density `uniform_density`. Each completed event applies one Bayes step
//! to γ; between events γ decays with the squared time since the last event.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::config::{fmt_f64, KvConfig};
use crate::env::{stimulation_schedule, StimMode, StimulationConfig, StimulationEvent};
use crate::error::{Error, Result};

/// Lower bound on γ; keeps visual evidence from becoming permanently inert.
pub const GAMMA_FLOOR: f64 = 1e-6;

/// How the iteration period enters the decay exponent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayTimeScale {
    /// `exp(−elapsed² · dt · r_decay)`
    MultiplyDt,
    /// `exp(−elapsed² / dt · r_decay)`
    DivideDt,
}

impl FromStr for DecayTimeScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "multiply_dt" => Ok(DecayTimeScale::MultiplyDt),
            "divide_dt" => Ok(DecayTimeScale::DivideDt),
            other => Err(Error::Config(format!("unknown decay time scale `{other}`"))),
        }
    }
}

impl fmt::Display for DecayTimeScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecayTimeScale::MultiplyDt => "multiply_dt",
            DecayTimeScale::DivideDt => "divide_dt",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CausalParams {
    /// Standard deviation of the delay under a common cause, seconds.
    pub sigma_c: f64,
    /// Flat delay likelihood under separate causes, 1/seconds.
    pub uniform_density: f64,
    pub r_decay: f64,
    /// Seconds per iteration.
    pub dt: f64,
    pub decay_scale: DecayTimeScale,
}

impl Default for CausalParams {
    fn default() -> Self {
        CausalParams {
            sigma_c: 0.15,
            uniform_density: 0.5,
            r_decay: 0.1,
            dt: 0.02,
            decay_scale: DecayTimeScale::MultiplyDt,
        }
    }
}

impl CausalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_c > 0.0 && self.uniform_density > 0.0 && self.r_decay >= 0.0 && self.dt > 0.0) {
            return Err(Error::Config(format!("invalid causal parameters {self:?}")));
        }
        if ![self.sigma_c, self.uniform_density, self.r_decay, self.dt].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("causal parameters must be finite".into()));
        }
        Ok(())
    }

    /// Reads `sigma_c`, `uniform_density`, `r_decay` and `decay_time_scale`;
    /// `dt` is left to the caller.
    pub fn read_kv(&mut self, kv: &KvConfig) -> Result<()> {
        kv.read_into("sigma_c", &mut self.sigma_c)?;
        kv.read_into("uniform_density", &mut self.uniform_density)?;
        kv.read_into("r_decay", &mut self.r_decay)?;
        kv.read_into("decay_time_scale", &mut self.decay_scale)?;
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("sigma_c", fmt_f64(self.sigma_c));
        kv.set("uniform_density", fmt_f64(self.uniform_density));
        kv.set("r_decay", fmt_f64(self.r_decay));
        kv.set("decay_time_scale", self.decay_scale);
    }

    /// Delay likelihood under a common cause.
    pub fn common_cause_likelihood(&self, delay: f64) -> f64 {
        let z = delay / self.sigma_c;
        (-0.5 * z * z).exp() / (self.sigma_c * (2.0 * std::f64::consts::PI).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CausalBelief {
    pub gamma: f64,
    /// Completion time of the most recent processed event.
    pub last_event_time: Option<f64>,
}

impl CausalBelief {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Invalid(format!("γ must lie in (0, 1], got {gamma}")));
        }
        Ok(CausalBelief {
            gamma,
            last_event_time: None,
        })
    }
}

/// One Bayes step with prior γ for a completed visuo-tactile event.
pub fn event_update(belief: CausalBelief, ev: &StimulationEvent, params: &CausalParams) -> Result<CausalBelief> {
    if ev.t_t < ev.t_v {
        return Err(Error::Invalid("tactile event precedes its visual event".into()));
    }
    let l1 = params.common_cause_likelihood(ev.t_v - ev.t_t);
    let l2 = params.uniform_density;
    let g = belief.gamma;
    let posterior = l1 * g / (l1 * g + l2 * (1.0 - g));
    Ok(CausalBelief {
        gamma: posterior.clamp(GAMMA_FLOOR, 1.0),
        last_event_time: Some(ev.completion()),
    })
}

/// Decay of γ at time `t` since the last event. A no-op before the first event.
pub fn decay_update(belief: CausalBelief, t: f64, params: &CausalParams) -> Result<CausalBelief> {
    let Some(last) = belief.last_event_time else {
        return Ok(belief);
    };
    if t < last {
        return Err(Error::Invalid(format!("decay at t = {t} precedes last event at {last}")));
    }
    let elapsed = t - last;
    let scale = match params.decay_scale {
        DecayTimeScale::MultiplyDt => params.dt,
        DecayTimeScale::DivideDt => 1.0 / params.dt,
    };
    let gamma = belief.gamma * (-(elapsed * elapsed) * scale * params.r_decay).exp();
    Ok(CausalBelief {
        gamma: gamma.max(GAMMA_FLOOR),
        ..belief
    })
}

/// Steps γ along a fixed event schedule, one call per iteration.
#[derive(Clone, Debug)]
pub struct CausalTracker {
    params: CausalParams,
    belief: CausalBelief,
    events: Vec<StimulationEvent>,
    next: usize,
}

impl CausalTracker {
    pub fn new(gamma0: f64, mut events: Vec<StimulationEvent>, params: CausalParams) -> Result<Self> {
        params.validate()?;
        events.sort_by(|a, b| a.completion().total_cmp(&b.completion()));
        Ok(CausalTracker {
            params,
            belief: CausalBelief::new(gamma0)?,
            events,
            next: 0,
        })
    }

    pub fn belief(&self) -> CausalBelief {
        self.belief
    }

    pub fn events(&self) -> &[StimulationEvent] {
        &self.events
    }

    /// Advances to time `t`. If an event completes in `(t − dt, t]` it is
    /// applied and returned; otherwise γ decays.
    pub fn advance(&mut self, t: f64) -> Result<Option<StimulationEvent>> {
        let mut fired = None;
        while let Some(ev) = self.events.get(self.next) {
            if ev.completion() > t {
                break;
            }
            self.belief = event_update(self.belief, ev, &self.params)?;
            fired = Some(*ev);
            self.next += 1;
        }
        if fired.is_none() {
            self.belief = decay_update(self.belief, t, &self.params)?;
        }
        Ok(fired)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaStats {
    /// Mean of γ over the second half of the trajectory.
    pub tail_mean: f64,
    pub tail_min: f64,
    pub tail_max: f64,
    pub trajectory: Vec<f64>,
    pub events: Vec<StimulationEvent>,
}

/// Simulates a schedule of `n_events` events (one per stimulation interval,
/// trial ending one interval after the last) and summarises γ.
pub fn steady_state_gamma(
    mode: StimMode,
    params: &CausalParams,
    stim: &StimulationConfig,
    n_events: usize,
    gamma0: f64,
    rng: &mut impl Rng,
) -> Result<GammaStats> {
    if n_events == 0 {
        return Err(Error::Invalid("at least one stimulation event is required".into()));
    }
    let duration = (n_events + 1) as f64 * stim.interval;
    let events = stimulation_schedule(mode, duration, stim, rng)?;
    let iterations = (duration / params.dt).round() as usize;
    let mut tracker = CausalTracker::new(gamma0, events, *params)?;
    let trajectory: Vec<f64> = (1..=iterations)
        .map(|k| tracker.advance(k as f64 * params.dt).map(|_| tracker.belief().gamma))
        .collect::<Result<_>>()?;
    let tail = &trajectory[trajectory.len() / 2..];
    Ok(GammaStats {
        tail_mean: tail.iter().sum::<f64>() / tail.len() as f64,
        tail_min: tail.iter().copied().fold(f64::INFINITY, f64::min),
        tail_max: tail.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        events: tracker.events().to_vec(),
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(t_v: f64, t_t: f64) -> StimulationEvent {
        StimulationEvent::new(t_v, t_t).unwrap()
    }

    #[test]
    fn crossover_delay_leaves_gamma_unchanged() {
        let p = CausalParams::default();
        // L1(d) = L2  ⇔  d² = 2σ² ln(1 / (σ√(2π)·L2))
        let s = p.sigma_c;
        let d = (2.0 * s * s * (1.0 / (s * (2.0 * std::f64::consts::PI).sqrt() * p.uniform_density)).ln()).sqrt();
        let b = CausalBelief::new(0.3).unwrap();
        let out = event_update(b, &ev(2.0, 2.0 + d), &p).unwrap();
        assert!((out.gamma - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_delay_hand_value() {
        let p = CausalParams::default();
        let l1 = 1.0 / (0.15 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((l1 - 2.6596).abs() < 1e-4);
        let out = event_update(CausalBelief::new(0.01).unwrap(), &ev(4.0, 4.0), &p).unwrap();
        assert!((out.gamma - 0.0510).abs() < 1e-4, "{}", out.gamma);
        assert_eq!(out.last_event_time, Some(4.0));
    }

    #[test]
    fn long_delay_lowers_gamma() {
        let p = CausalParams::default();
        let b = CausalBelief::new(0.5).unwrap();
        assert!(event_update(b, &ev(2.0, 2.9), &p).unwrap().gamma < 0.5);
    }

    #[test]
    fn decay_cases() {
        let p = CausalParams::default();
        let fresh = CausalBelief::new(0.5).unwrap();
        assert_eq!(decay_update(fresh, 10.0, &p).unwrap(), fresh);

        let b = CausalBelief {
            gamma: 0.5,
            last_event_time: Some(3.0),
        };
        assert_eq!(decay_update(b, 3.0, &p).unwrap().gamma, 0.5);
        let out = decay_update(b, 4.0, &CausalParams { r_decay: 1.0, ..p }).unwrap();
        assert!((out.gamma - 0.5 * (-0.02f64).exp()).abs() < 1e-15);
        assert!((out.gamma - 0.4901).abs() < 1e-4);
        let none = CausalParams { r_decay: 0.0, ..p };
        assert_eq!(decay_update(b, 100.0, &none).unwrap().gamma, 0.5);
        assert!(decay_update(b, 2.0, &p).is_err());
        let divide = CausalParams {
            decay_scale: DecayTimeScale::DivideDt,
            ..p
        };
        assert!(decay_update(b, 4.0, &divide).unwrap().gamma < out.gamma);
    }

    #[test]
    fn floor_and_ceiling_hold() {
        let p = CausalParams::default();
        let mut b = CausalBelief::new(1e-6).unwrap();
        for _ in 0..50 {
            b = event_update(b, &ev(1.0, 1.99), &p).unwrap();
            assert!(b.gamma >= GAMMA_FLOOR);
        }
        let mut b = CausalBelief::new(1.0).unwrap();
        b = event_update(b, &ev(1.0, 1.0), &p).unwrap();
        assert_eq!(b.gamma, 1.0);
        assert!(CausalBelief::new(0.0).is_err());
        assert!(CausalBelief::new(1.5).is_err());
    }

    #[test]
    fn single_event_trajectory_matches_formula() {
        let p = CausalParams::default();
        let stim = StimulationConfig {
            sync_max_delay: 0.0,
            ..Default::default()
        };
        let stats = steady_state_gamma(StimMode::Sync, &p, &stim, 1, 0.01, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let direct = event_update(CausalBelief::new(0.01).unwrap(), &ev(2.0, 2.0), &p).unwrap().gamma;
        // the event completes at t = 2.0, i.e. iteration 100
        assert_eq!(stats.trajectory[99], direct);
        assert_eq!(stats.trajectory[98], 0.01);
    }

    #[test]
    fn tracker_fires_each_event_once() {
        let p = CausalParams::default();
        let events = vec![ev(2.0, 2.05), ev(4.0, 4.51)];
        let mut tr = CausalTracker::new(0.01, events, p).unwrap();
        let fired: Vec<usize> = (1..=300)
            .filter_map(|k| tr.advance(k as f64 * 0.02).unwrap().map(|_| k))
            .collect();
        assert_eq!(fired, vec![103, 226]);
    }
}
