//! Native two-joint arm environment: kinematics, rendering, noisy
//! proprioception, stimulation schedules and clamped actuation.

mod image;
mod kinematics;
mod render;
mod stimulation;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use image::Image;
pub use kinematics::{
    elbow_position, fk_jacobian, forward_kinematics, inverse_kinematics, ArmGeometry, JointAngles, JointLimits, Point2,
};
pub use render::{render, RenderConfig, ViewWindow};
pub use stimulation::{stimulation_schedule, StimMode, StimulationConfig, StimulationEvent};

use crate::config::{fmt_f64, KvConfig};
use crate::error::{Error, Result};

/// Placement of the virtual arm relative to the real one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Left,
    Center,
    Right,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Left, Condition::Center, Condition::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Left => "left",
            Condition::Center => "center",
            Condition::Right => "right",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" => Ok(Condition::Left),
            "center" => Ok(Condition::Center),
            "right" => Ok(Condition::Right),
            other => Err(Error::Config(format!("unknown condition `{other}`"))),
        }
    }
}

/// Everything needed to build an [`ArmEnv`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub geometry: ArmGeometry,
    pub limits: JointLimits,
    /// Physical posture during the trials.
    pub rest: JointAngles,
    /// Proprioceptive noise standard deviation, radians.
    pub sigma_p: f64,
    pub offset_left: f64,
    pub offset_center: f64,
    pub offset_right: f64,
    pub render: RenderConfig,
    pub stimulation: StimulationConfig,
}

impl Default for EnvConfig {
    /// Resting hand at (−0.30, 0.50) m, 30 cm left of the midline; the rest
    /// angles below are `inverse_kinematics` of that point with the elbow
    /// bent clockwise, and the joint limits span ±0.6 rad around them.
    fn default() -> Self {
        let rest = JointAngles::new(0.8371727623189913, -0.9133327704132529);
        EnvConfig {
            geometry: ArmGeometry {
                upper_arm_length: 0.30,
                forearm_length: 0.30,
                shoulder_position: Point2::new(-0.10, 0.0),
            },
            limits: JointLimits {
                shoulder: (rest.shoulder - 0.6, rest.shoulder + 0.6),
                elbow: (rest.elbow - 0.6, rest.elbow + 0.6),
            },
            rest,
            sigma_p: 0.01,
            offset_left: -0.15,
            offset_center: 0.0,
            offset_right: 0.15,
            render: RenderConfig {
                resolution: 64,
                view: ViewWindow {
                    x_min: -0.6,
                    x_max: 0.6,
                    y_min: 0.0,
                    y_max: 0.8,
                },
                upper_arm_width: 0.10,
                forearm_width: 0.08,
                edge_softness: 0.04,
            },
            stimulation: StimulationConfig::default(),
        }
    }
}

impl EnvConfig {
    pub const KEYS: &'static [&'static str] = &[
        "resolution",
        "L1",
        "L2",
        "shoulder_x",
        "shoulder_y",
        "shoulder_min",
        "shoulder_max",
        "elbow_min",
        "elbow_max",
        "rest_shoulder",
        "rest_elbow",
        "sigma_p",
        "offset_left",
        "offset_center",
        "offset_right",
        "view_x_min",
        "view_x_max",
        "view_y_min",
        "view_y_max",
        "upper_arm_width",
        "forearm_width",
        "edge_softness",
        "stim_interval",
        "sync_max_delay",
        "async_max_delay",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = EnvConfig::default();
        kv.read_into("resolution", &mut c.render.resolution)?;
        kv.read_into("L1", &mut c.geometry.upper_arm_length)?;
        kv.read_into("L2", &mut c.geometry.forearm_length)?;
        kv.read_into("shoulder_x", &mut c.geometry.shoulder_position.x)?;
        kv.read_into("shoulder_y", &mut c.geometry.shoulder_position.y)?;
        kv.read_into("shoulder_min", &mut c.limits.shoulder.0)?;
        kv.read_into("shoulder_max", &mut c.limits.shoulder.1)?;
        kv.read_into("elbow_min", &mut c.limits.elbow.0)?;
        kv.read_into("elbow_max", &mut c.limits.elbow.1)?;
        kv.read_into("rest_shoulder", &mut c.rest.shoulder)?;
        kv.read_into("rest_elbow", &mut c.rest.elbow)?;
        kv.read_into("sigma_p", &mut c.sigma_p)?;
        kv.read_into("offset_left", &mut c.offset_left)?;
        kv.read_into("offset_center", &mut c.offset_center)?;
        kv.read_into("offset_right", &mut c.offset_right)?;
        kv.read_into("view_x_min", &mut c.render.view.x_min)?;
        kv.read_into("view_x_max", &mut c.render.view.x_max)?;
        kv.read_into("view_y_min", &mut c.render.view.y_min)?;
        kv.read_into("view_y_max", &mut c.render.view.y_max)?;
        kv.read_into("upper_arm_width", &mut c.render.upper_arm_width)?;
        kv.read_into("forearm_width", &mut c.render.forearm_width)?;
        kv.read_into("edge_softness", &mut c.render.edge_softness)?;
        kv.read_into("stim_interval", &mut c.stimulation.interval)?;
        kv.read_into("sync_max_delay", &mut c.stimulation.sync_max_delay)?;
        kv.read_into("async_max_delay", &mut c.stimulation.async_max_delay)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("resolution", self.render.resolution);
        let f = [
            ("L1", self.geometry.upper_arm_length),
            ("L2", self.geometry.forearm_length),
            ("shoulder_x", self.geometry.shoulder_position.x),
            ("shoulder_y", self.geometry.shoulder_position.y),
            ("shoulder_min", self.limits.shoulder.0),
            ("shoulder_max", self.limits.shoulder.1),
            ("elbow_min", self.limits.elbow.0),
            ("elbow_max", self.limits.elbow.1),
            ("rest_shoulder", self.rest.shoulder),
            ("rest_elbow", self.rest.elbow),
            ("sigma_p", self.sigma_p),
            ("offset_left", self.offset_left),
            ("offset_center", self.offset_center),
            ("offset_right", self.offset_right),
            ("view_x_min", self.render.view.x_min),
            ("view_x_max", self.render.view.x_max),
            ("view_y_min", self.render.view.y_min),
            ("view_y_max", self.render.view.y_max),
            ("upper_arm_width", self.render.upper_arm_width),
            ("forearm_width", self.render.forearm_width),
            ("edge_softness", self.render.edge_softness),
            ("stim_interval", self.stimulation.interval),
            ("sync_max_delay", self.stimulation.sync_max_delay),
            ("async_max_delay", self.stimulation.async_max_delay),
        ];
        for (k, v) in f {
            kv.set(k, fmt_f64(v));
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.limits.validate()?;
        self.render.validate()?;
        if !self.limits.contains(self.rest) {
            return Err(Error::Config("rest posture lies outside the joint limits".into()));
        }
        if !(self.sigma_p >= 0.0 && self.sigma_p.is_finite()) {
            return Err(Error::Config("sigma_p must be a non-negative number".into()));
        }
        if ![self.offset_left, self.offset_center, self.offset_right].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("virtual offsets must be finite".into()));
        }
        let s = &self.stimulation;
        if !(s.interval > 0.0 && s.sync_max_delay >= 0.0 && s.async_max_delay >= 0.0) {
            return Err(Error::Config("stimulation timing must be positive".into()));
        }
        Ok(())
    }

    pub fn offset(&self, condition: Condition) -> f64 {
        match condition {
            Condition::Left => self.offset_left,
            Condition::Center => self.offset_center,
            Condition::Right => self.offset_right,
        }
    }

    pub fn resolution(&self) -> usize {
        self.render.resolution
    }

    pub fn render(&self, q: JointAngles, offset_dx: f64) -> Result<Image> {
        if !self.limits.contains(q) {
            return Err(Error::Invalid(format!("posture {q:?} outside joint limits")));
        }
        render::render(q, offset_dx, &self.geometry, &self.render)
    }

    pub fn hand(&self, q: JointAngles) -> Point2 {
        forward_kinematics(q, &self.geometry)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Noisy joint-angle reading.
    pub s_p: JointAngles,
    /// Rendered view of the (virtual) arm.
    pub s_v: Image,
    /// Stimulation event completing at this step, if any.
    pub event: Option<StimulationEvent>,
}

/// Whether commanded velocities move the physical arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Actuation {
    /// The arm is held in place; actions are only recorded.
    Clamped,
    /// `q ← clamp(q + a·dt)`; used for testing.
    Free,
}

/// One arm instance. Single-threaded; use one per trial.
#[derive(Clone, Debug)]
pub struct ArmEnv {
    cfg: EnvConfig,
    q: JointAngles,
    offset_dx: f64,
    actuation: Actuation,
    last_action: [f64; 2],
    noise: Option<Normal<f64>>,
    view: Option<(JointAngles, Image)>,
}

impl ArmEnv {
    pub fn new(cfg: EnvConfig, offset_dx: f64, actuation: Actuation) -> Result<Self> {
        cfg.validate()?;
        let noise = if cfg.sigma_p > 0.0 {
            Some(Normal::new(0.0, cfg.sigma_p).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        Ok(ArmEnv {
            q: cfg.rest,
            cfg,
            offset_dx,
            actuation,
            last_action: [0.0; 2],
            noise,
            view: None,
        })
    }

    pub fn for_condition(cfg: EnvConfig, condition: Condition, actuation: Actuation) -> Result<Self> {
        let dx = cfg.offset(condition);
        Self::new(cfg, dx, actuation)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn true_angles(&self) -> JointAngles {
        self.q
    }

    pub fn last_action(&self) -> [f64; 2] {
        self.last_action
    }

    pub fn set_angles(&mut self, q: JointAngles) -> Result<()> {
        if !self.cfg.limits.contains(q) {
            return Err(Error::Invalid(format!("posture {q:?} outside joint limits")));
        }
        self.q = q;
        Ok(())
    }

    /// Noisy proprioception plus the rendered (offset) arm. The rendering is
    /// cached while the posture is unchanged.
    pub fn observe(&mut self, rng: &mut impl Rng) -> Result<Observation> {
        let (ns, ne) = match &self.noise {
            Some(n) => (n.sample(rng), n.sample(rng)),
            None => (0.0, 0.0),
        };
        let s_p = JointAngles::new(self.q.shoulder + ns, self.q.elbow + ne);
        let s_v = match &self.view {
            Some((q, img)) if *q == self.q => img.clone(),
            _ => {
                let img = self.cfg.render(self.q, self.offset_dx)?;
                self.view = Some((self.q, img.clone()));
                img
            }
        };
        Ok(Observation { s_p, s_v, event: None })
    }

    /// Applies joint velocities `action` (rad/s) for `dt` seconds.
    pub fn step(&mut self, action: [f64; 2], dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
        }
        self.last_action = action;
        if self.actuation == Actuation::Free {
            let q = JointAngles::new(self.q.shoulder + action[0] * dt, self.q.elbow + action[1] * dt);
            self.q = self.cfg.limits.clamp(q);
        }
        Ok(())
    }
}
