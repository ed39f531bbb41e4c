//! The active-inference agent: belief and action updates driven by
//! precision-weighted prediction errors, and the trial loop.
//!
//! With no internal dynamics (`f(μ) = 0`) and identity proprioceptive
//! mapping (`g_p(μ) = μ`), free energy reduces to
//!
//! ```text
//! F = ½ Σp⁻¹ |s_p − μ|² + ½ γ Σv⁻¹ |s_v − g_v(μ)|²
//! ```
//!
//! and the belief follows `μ̇ = −∂F/∂μ`. Action is a joint velocity whose
//! rate of change descends the proprioceptive error only.

mod trace;
mod trial;

pub use trace::{TraceRecord, TrialTrace, TRACE_COLUMNS};
pub use trial::{run_trial, TrialSetup};

use crate::causal::CausalParams;
use crate::config::{fmt_f64, KvConfig};
use crate::env::{JointAngles, JointLimits, Observation};
use crate::error::{Error, Result};
use crate::generative::DecoderSession;

/// Inverse variances weighting each error stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precisions {
    /// Per joint, 1/rad².
    pub sigma_p_inv: f64,
    /// Per normalized pixel; divided by the pixel count when applied so the
    /// visual term does not scale with resolution.
    pub sigma_v_inv: f64,
    /// Dynamics precision. Multiplies a zero error since the belief has no
    /// internal dynamics; kept for completeness of the configuration.
    pub sigma_mu_inv: f64,
}

impl Default for Precisions {
    fn default() -> Self {
        Precisions {
            sigma_p_inv: 1.0,
            sigma_v_inv: 1.0,
            sigma_mu_inv: 0.0,
        }
    }
}

impl Precisions {
    pub fn validate(&self) -> Result<()> {
        let v = [self.sigma_p_inv, self.sigma_v_inv, self.sigma_mu_inv];
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("precisions must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Visual precision per pixel for an image of `pixels` pixels.
    pub fn visual_weight(&self, pixels: usize) -> f64 {
        self.sigma_v_inv / pixels as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub precisions: Precisions,
    /// Belief step size.
    pub lr: f64,
    /// Action step size.
    pub lr_a: f64,
    /// Maximum joint-velocity magnitude, rad/s, per joint.
    pub action_clamp: f64,
    /// Beliefs are kept within the joint limits widened by this, radians.
    pub mu_margin: f64,
    pub gamma0: f64,
    pub duration_s: f64,
    pub iterations: usize,
    pub causal: CausalParams,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            precisions: Precisions::default(),
            lr: 0.1,
            lr_a: 1.0,
            action_clamp: 1.0,
            mu_margin: 0.1,
            gamma0: 0.01,
            duration_s: 30.0,
            iterations: 1500,
            causal: CausalParams::default(),
        }
    }
}

impl AgentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "sigma_p_inv",
        "sigma_v_inv",
        "sigma_mu_inv",
        "lr",
        "lr_a",
        "action_clamp",
        "mu_margin",
        "gamma0",
        "duration_s",
        "iterations",
        "sigma_c",
        "uniform_density",
        "r_decay",
        "decay_time_scale",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = AgentConfig::default();
        kv.read_into("sigma_p_inv", &mut c.precisions.sigma_p_inv)?;
        kv.read_into("sigma_v_inv", &mut c.precisions.sigma_v_inv)?;
        kv.read_into("sigma_mu_inv", &mut c.precisions.sigma_mu_inv)?;
        kv.read_into("lr", &mut c.lr)?;
        kv.read_into("lr_a", &mut c.lr_a)?;
        kv.read_into("action_clamp", &mut c.action_clamp)?;
        kv.read_into("mu_margin", &mut c.mu_margin)?;
        kv.read_into("gamma0", &mut c.gamma0)?;
        kv.read_into("duration_s", &mut c.duration_s)?;
        kv.read_into("iterations", &mut c.iterations)?;
        c.causal.read_kv(kv)?;
        c.causal.dt = c.dt();
        c.validate()?;
        Ok(c)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        let p = &self.precisions;
        for (k, v) in [
            ("sigma_p_inv", p.sigma_p_inv),
            ("sigma_v_inv", p.sigma_v_inv),
            ("sigma_mu_inv", p.sigma_mu_inv),
            ("lr", self.lr),
            ("lr_a", self.lr_a),
            ("action_clamp", self.action_clamp),
            ("mu_margin", self.mu_margin),
            ("gamma0", self.gamma0),
            ("duration_s", self.duration_s),
        ] {
            kv.set(k, fmt_f64(v));
        }
        kv.set("iterations", self.iterations);
        self.causal.write_kv(kv);
    }

    /// Seconds per iteration.
    pub fn dt(&self) -> f64 {
        self.duration_s / self.iterations as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.precisions.validate()?;
        if self.iterations == 0 || !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config("iterations must be ≥ 1 and duration positive".into()));
        }
        let steps = [self.lr, self.lr_a, self.action_clamp, self.mu_margin];
        if steps.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("step sizes, action clamp and margin must be non-negative".into()));
        }
        if !(self.gamma0 > 0.0 && self.gamma0 <= 1.0) {
            return Err(Error::Config("gamma0 must lie in (0, 1]".into()));
        }
        if (self.causal.dt - self.dt()).abs() > 1e-12 * self.dt() {
            return Err(Error::Config("causal time step must equal duration / iterations".into()));
        }
        self.causal.validate()
    }
}

/// The believed body state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrainState {
    pub mu: JointAngles,
}

/// Result of one belief update.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionStep {
    pub mu: JointAngles,
    /// `μ̇` before scaling by the step size.
    pub mu_dot: [f64; 2],
    /// Visual part of `μ̇`.
    pub visual: [f64; 2],
    /// Free energy at the belief before the update.
    pub free_energy: f64,
    /// Belief left the decoder's input range or was clamped to the widened
    /// joint limits.
    pub out_of_bounds: bool,
}

/// One Euler step of `μ̇ = Σp⁻¹(s_p − μ) + ∂g_v/∂μᵀ γ Σv⁻¹ (s_v − g_v(μ))`.
/// The result is clamped to `bounds`.
pub fn perception_step(
    session: &mut DecoderSession,
    mu: JointAngles,
    obs: &Observation,
    gamma: f64,
    prec: &Precisions,
    lr: f64,
    bounds: &JointLimits,
) -> Result<PerceptionStep> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let pred = session.predict(mu)?;
    let sv = obs.s_v.pixels();
    if sv.len() != session.pixels() {
        return Err(Error::shape("visual observation", &[session.pixels()], &[sv.len()]));
    }
    let w = gamma * prec.visual_weight(sv.len());
    let err: Vec<f64> = sv.iter().zip(pred.image.pixels()).map(|(s, g)| s - g).collect();
    let weighted: Vec<f64> = err.iter().map(|e| w * e).collect();
    let visual = session.adjoint(&weighted)?;
    let ep = [obs.s_p.shoulder - mu.shoulder, obs.s_p.elbow - mu.elbow];
    let mu_dot = [0, 1].map(|i| prec.sigma_p_inv * ep[i] + visual[i]);
    let free_energy = 0.5 * prec.sigma_p_inv * (ep[0] * ep[0] + ep[1] * ep[1])
        + 0.5 * w * err.iter().map(|e| e * e).sum::<f64>();

    let next = JointAngles::new(mu.shoulder + lr * mu_dot[0], mu.elbow + lr * mu_dot[1]);
    if !next.is_finite() || !free_energy.is_finite() {
        return Err(Error::NonFinite("belief update".into()));
    }
    let clamped = bounds.clamp(next);
    Ok(PerceptionStep {
        out_of_bounds: pred.clamped || clamped != next,
        mu: clamped,
        mu_dot,
        visual,
        free_energy,
    })
}

/// `ȧ = −dt · Σp⁻¹ (s_p − μ)`: the action changes proprioception by `a·dt`,
/// so `∂s_p/∂a = dt`.
pub fn action_step(mu: JointAngles, s_p: JointAngles, prec: &Precisions, dt: f64) -> Result<[f64; 2]> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
    }
    Ok([
        -dt * prec.sigma_p_inv * (s_p.shoulder - mu.shoulder),
        -dt * prec.sigma_p_inv * (s_p.elbow - mu.elbow),
    ])
}

/// `a + lr_a · ȧ`, each component clamped to `±clamp`.
pub fn apply_action(a: [f64; 2], increment: [f64; 2], lr_a: f64, clamp: f64) -> [f64; 2] {
    [0, 1].map(|i| (a[i] + lr_a * increment[i]).clamp(-clamp, clamp))
}

/// `½ Σp⁻¹ |s_p − μ|² + ½ γ Σv⁻¹ |s_v − g_v(μ)|²` (visual precision per pixel).
pub fn free_energy(
    session: &mut DecoderSession,
    mu: JointAngles,
    obs: &Observation,
    prec: &Precisions,
    gamma: f64,
) -> Result<f64> {
    let pred = session.predict(mu)?;
    let sv = obs.s_v.pixels();
    if sv.len() != session.pixels() {
        return Err(Error::shape("visual observation", &[session.pixels()], &[sv.len()]));
    }
    let ev: f64 = sv.iter().zip(pred.image.pixels()).map(|(s, g)| (s - g) * (s - g)).sum();
    let ep = [obs.s_p.shoulder - mu.shoulder, obs.s_p.elbow - mu.elbow];
    Ok(0.5 * prec.sigma_p_inv * (ep[0] * ep[0] + ep[1] * ep[1]) + 0.5 * gamma * prec.visual_weight(sv.len()) * ev)
}
