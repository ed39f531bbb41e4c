use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Visuo-tactile stimulation timing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StimMode {
    Sync,
    Async,
}

impl StimMode {
    pub const ALL: [StimMode; 2] = [StimMode::Sync, StimMode::Async];

    pub fn as_str(self) -> &'static str {
        match self {
            StimMode::Sync => "sync",
            StimMode::Async => "async",
        }
    }
}

impl fmt::Display for StimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sync" => Ok(StimMode::Sync),
            "async" => Ok(StimMode::Async),
            other => Err(Error::Config(format!("unknown stimulation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StimulationEvent {
    /// Visual touch, seconds from trial start.
    pub t_v: f64,
    /// Tactile touch, seconds from trial start; never before `t_v`.
    pub t_t: f64,
}

impl StimulationEvent {
    pub fn new(t_v: f64, t_t: f64) -> Result<Self> {
        if !(t_v.is_finite() && t_t.is_finite()) || t_t < t_v {
            return Err(Error::Invalid(format!("tactile time {t_t} precedes visual time {t_v}")));
        }
        Ok(StimulationEvent { t_v, t_t })
    }

    pub fn delay(&self) -> f64 {
        self.t_t - self.t_v
    }

    /// Time at which both halves of the event have been observed.
    pub fn completion(&self) -> f64 {
        self.t_v.max(self.t_t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StimulationConfig {
    /// Seconds between consecutive visual events.
    pub interval: f64,
    /// Tactile delay is drawn from `[0, sync_max_delay)` in synchronous mode.
    pub sync_max_delay: f64,
    /// Tactile delay is drawn from `[0, async_max_delay)` in asynchronous mode.
    pub async_max_delay: f64,
}

impl Default for StimulationConfig {
    fn default() -> Self {
        StimulationConfig {
            interval: 2.0,
            sync_max_delay: 0.1,
            async_max_delay: 1.0,
        }
    }
}

/// Visual events at `interval, 2·interval, …` strictly before `duration`,
/// each followed by a tactile event after a uniform random delay.
pub fn stimulation_schedule(
    mode: StimMode,
    duration: f64,
    cfg: &StimulationConfig,
    rng: &mut impl Rng,
) -> Result<Vec<StimulationEvent>> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Invalid(format!("trial duration must be positive, got {duration}")));
    }
    if !(cfg.interval > 0.0) {
        return Err(Error::Config("stimulation interval must be positive".into()));
    }
    let max_delay = match mode {
        StimMode::Sync => cfg.sync_max_delay,
        StimMode::Async => cfg.async_max_delay,
    };
    let mut events = Vec::new();
    let mut k = 1u32;
    loop {
        let t_v = k as f64 * cfg.interval;
        if t_v >= duration {
            break;
        }
        let delay = rng.random::<f64>() * max_delay;
        events.push(StimulationEvent::new(t_v, t_v + delay)?);
        k += 1;
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn thirty_seconds_gives_fourteen_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ev = stimulation_schedule(StimMode::Sync, 30.0, &StimulationConfig::default(), &mut rng).unwrap();
        assert_eq!(ev.len(), 14);
        for (i, e) in ev.iter().enumerate() {
            assert_eq!(e.t_v, 2.0 * (i + 1) as f64);
            assert!(e.delay() >= 0.0 && e.delay() < 0.1);
        }
    }

    #[test]
    fn same_seed_same_schedule() {
        let cfg = StimulationConfig::default();
        let a = stimulation_schedule(StimMode::Async, 30.0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = stimulation_schedule(StimMode::Async, 30.0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|e| e.delay() < 1.0));
    }

    #[test]
    fn invalid_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(stimulation_schedule(StimMode::Sync, 0.0, &StimulationConfig::default(), &mut rng).is_err());
        assert!(StimulationEvent::new(2.0, 1.9).is_err());
        assert_eq!("ASYNC".parse::<StimMode>().unwrap(), StimMode::Async);
        assert!("both".parse::<StimMode>().is_err());
    }
}
