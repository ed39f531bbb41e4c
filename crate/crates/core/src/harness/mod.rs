//! Experiment protocol, trial metrics, aggregation and output files.

mod plots;

pub use plots::{emit_plots, PlotFiles};

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::agent::{run_trial, AgentConfig, TrialSetup, TrialTrace};
use crate::config::{fmt_f64, KvConfig};
use crate::env::{fk_jacobian, Condition, EnvConfig, JointAngles, StimMode};
use crate::error::{Error, Result};
use crate::generative::{TrainConfig, VisualModel};

pub const SUMMARY_COLUMNS: [&str; 7] = [
    "condition",
    "mode",
    "trial",
    "drift_cm",
    "mean_abs_force_proxy",
    "gamma_tail_mean",
    "aborted_flag",
];

/// How drift reads the belief trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriftMeasure {
    /// Belief at the last iteration.
    Final,
    /// Belief averaged over all iterations.
    TimeAveraged,
}

impl FromStr for DriftMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(DriftMeasure::Final),
            "time_averaged" => Ok(DriftMeasure::TimeAveraged),
            other => Err(Error::Config(format!("unknown drift measure `{other}` (expected final or time_averaged)"))),
        }
    }
}

impl fmt::Display for DriftMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriftMeasure::Final => "final",
            DriftMeasure::TimeAveraged => "time_averaged",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub conditions: Vec<Condition>,
    pub modes: Vec<StimMode>,
    pub trials_per_cell: usize,
    pub master_seed: u64,
    pub model_path: PathBuf,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub drift_measure: DriftMeasure,
    /// Centered moving-average window for the force proxy, in iterations.
    pub force_window: usize,
    pub threads: usize,
    pub env: EnvConfig,
    pub agent: AgentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            conditions: Condition::ALL.to_vec(),
            modes: StimMode::ALL.to_vec(),
            trials_per_cell: 5,
            master_seed: 1,
            model_path: PathBuf::from("models/vae.rhim"),
            out_dir: PathBuf::from("out"),
            run_id: "default".into(),
            drift_measure: DriftMeasure::Final,
            force_window: 1,
            threads: 1,
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
        }
    }
}

fn parse_list<T: FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    let v = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<T>>>()?;
    if v.is_empty() {
        return Err(Error::Config(format!("empty list `{s}`")));
    }
    Ok(v)
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "conditions",
        "modes",
        "trials_per_cell",
        "master_seed",
        "model_path",
        "out_dir",
        "run_id",
        "drift_measure",
        "force_window",
        "threads",
        "env_config",
        "agent_config",
    ];

    /// Reads experiment keys plus every environment and agent key from one
    /// flat namespace.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        check_keys(kv)?;
        let mut c = ExperimentConfig::default();
        if let Some(s) = kv.get_str("conditions") {
            c.conditions = parse_list(s)?;
        }
        if let Some(s) = kv.get_str("modes") {
            c.modes = parse_list(s)?;
        }
        kv.read_into("trials_per_cell", &mut c.trials_per_cell)?;
        kv.read_into("master_seed", &mut c.master_seed)?;
        kv.read_into("model_path", &mut c.model_path)?;
        kv.read_into("out_dir", &mut c.out_dir)?;
        kv.read_into("run_id", &mut c.run_id)?;
        kv.read_into("drift_measure", &mut c.drift_measure)?;
        kv.read_into("force_window", &mut c.force_window)?;
        kv.read_into("threads", &mut c.threads)?;
        c.env = EnvConfig::from_kv(kv)?;
        c.agent = AgentConfig::from_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.env.to_kv();
        self.agent.write_kv(&mut kv);
        let join = |v: Vec<String>| v.join(",");
        kv.set("conditions", join(self.conditions.iter().map(|c| c.to_string()).collect()));
        kv.set("modes", join(self.modes.iter().map(|m| m.to_string()).collect()));
        kv.set("trials_per_cell", self.trials_per_cell);
        kv.set("master_seed", self.master_seed);
        kv.set("model_path", self.model_path.display());
        kv.set("out_dir", self.out_dir.display());
        kv.set("run_id", &self.run_id);
        kv.set("drift_measure", self.drift_measure);
        kv.set("force_window", self.force_window);
        kv.set("threads", self.threads);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials_per_cell == 0 || self.force_window == 0 || self.threads == 0 {
            return Err(Error::Config("trials_per_cell, force_window and threads must be ≥ 1".into()));
        }
        if self.conditions.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("at least one condition and one mode are required".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id == ".." {
            return Err(Error::Config(format!("invalid run id `{}`", self.run_id)));
        }
        self.env.validate()?;
        self.agent.validate()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }
}

/// Keys read by [`GenerationConfig`], beyond environment and training keys.
pub const DATASET_KEYS: &[&str] = &["grid_shoulder", "grid_elbow", "dataset_path"];

/// Rejects keys that no part of the configuration reads, so typos fail loudly.
pub fn check_keys(kv: &KvConfig) -> Result<()> {
    let known = |k: &str| {
        [
            ExperimentConfig::KEYS,
            EnvConfig::KEYS,
            AgentConfig::KEYS,
            TrainConfig::KEYS,
            DATASET_KEYS,
        ]
        .iter()
        .any(|keys| keys.contains(&k))
    };
    match kv.keys().find(|k| !known(k)) {
        Some(k) => Err(Error::Config(format!("unknown config key `{k}`"))),
        None => Ok(()),
    }
}

/// Dataset grid settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub grid: [usize; 2],
    pub dataset_path: PathBuf,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            grid: [50, 50],
            dataset_path: PathBuf::from("data/arm50.rhid"),
        }
    }
}

impl GenerationConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = GenerationConfig::default();
        kv.read_into("grid_shoulder", &mut c.grid[0])?;
        kv.read_into("grid_elbow", &mut c.grid[1])?;
        kv.read_into("dataset_path", &mut c.dataset_path)?;
        if c.grid.iter().any(|&n| n < 2) {
            return Err(Error::Config("grid needs at least 2 samples per joint".into()));
        }
        Ok(c)
    }
}

/// Seed for one trial: the first 8 bytes of SHA-256 over the master seed,
/// condition, mode and trial index.
pub fn child_seed(master: u64, condition: Condition, mode: StimMode, trial: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(condition.as_str().as_bytes());
    h.update([0]);
    h.update(mode.as_str().as_bytes());
    h.update([0]);
    h.update((trial as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Horizontal hand displacement of the belief, in centimetres, positive
/// rightward.
pub fn compute_drift(trace: &TrialTrace, env: &EnvConfig, measure: DriftMeasure) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::Invalid("drift of an empty trace".into()));
    }
    let x = |m: [f64; 2]| env.hand(JointAngles::from_array(m)).x;
    let x0 = x(trace.initial_mu);
    let xe = match measure {
        DriftMeasure::Final => x(trace.records.last().expect("non-empty").mu),
        DriftMeasure::TimeAveraged => {
            trace.records.iter().map(|r| x(r.mu)).sum::<f64>() / trace.len() as f64
        }
    };
    Ok(100.0 * (xe - x0))
}

/// Horizontal component of `J(q_true)·a` per iteration, smoothed by a
/// centered moving average of `window` samples (shrunk at the ends).
pub fn compute_force_proxy(trace: &TrialTrace, env: &EnvConfig, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Config("force smoothing window must be ≥ 1".into()));
    }
    // the arm is clamped at rest throughout a trial
    let j = fk_jacobian(env.rest, &env.geometry);
    let raw: Vec<f64> = trace.records.iter().map(|r| j[0][0] * r.action[0] + j[0][1] * r.action[1]).collect();
    Ok(moving_average(&raw, window))
}

pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return x.to_vec();
    }
    let before = (window - 1) / 2;
    let after = window - 1 - before;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Scalars of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSummary {
    pub condition: Condition,
    pub mode: StimMode,
    pub trial: usize,
    pub seed: u64,
    pub drift_cm: f64,
    pub mean_abs_force: f64,
    /// Signed time-average of the force proxy.
    pub mean_force: f64,
    pub gamma_tail_mean: f64,
    pub aborted: bool,
}

pub fn summarize_trial(
    trace: &TrialTrace,
    cfg: &ExperimentConfig,
    condition: Condition,
    mode: StimMode,
    trial: usize,
    seed: u64,
) -> Result<(TrialSummary, Vec<f64>)> {
    let force = compute_force_proxy(trace, &cfg.env, cfg.force_window)?;
    let n = force.len().max(1) as f64;
    let tail = &trace.records[trace.len() / 2..];
    let summary = TrialSummary {
        condition,
        mode,
        trial,
        seed,
        drift_cm: if trace.is_empty() { f64::NAN } else { compute_drift(trace, &cfg.env, cfg.drift_measure)? },
        mean_abs_force: force.iter().map(|f| f.abs()).sum::<f64>() / n,
        mean_force: force.iter().sum::<f64>() / n,
        gamma_tail_mean: tail.iter().map(|r| r.gamma).sum::<f64>() / tail.len().max(1) as f64,
        aborted: trace.aborted.is_some() || trace.len() < cfg.agent.iterations,
    };
    Ok((summary, force))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Aggregate of one condition × mode cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub condition: Condition,
    pub mode: StimMode,
    pub trials: Vec<TrialSummary>,
    pub drift_mean: f64,
    /// Sample standard deviation (n − 1); zero for a single trial.
    pub drift_std: f64,
    pub mean_abs_force: f64,
    pub mean_force: f64,
    pub gamma_tail_mean: f64,
    /// Per-iteration force proxy averaged over trials.
    pub force_mean_series: Vec<f64>,
    pub force_min_series: Vec<f64>,
    pub force_max_series: Vec<f64>,
    pub complete: bool,
}

impl CellSummary {
    pub fn new(trials: Vec<TrialSummary>, forces: &[Vec<f64>]) -> Result<Self> {
        let first = trials.first().ok_or_else(|| Error::Invalid("cell without trials".into()))?;
        let (condition, mode) = (first.condition, first.mode);
        let col = |f: fn(&TrialSummary) -> f64| trials.iter().map(f).collect::<Vec<_>>();
        let (drift_mean, drift_std) = mean_std(&col(|t| t.drift_cm));
        let len = forces.iter().map(Vec::len).min().unwrap_or(0);
        let at = |i: usize| forces.iter().map(move |f| f[i]);
        Ok(CellSummary {
            condition,
            mode,
            drift_mean,
            drift_std,
            mean_abs_force: mean_std(&col(|t| t.mean_abs_force)).0,
            mean_force: mean_std(&col(|t| t.mean_force)).0,
            gamma_tail_mean: mean_std(&col(|t| t.gamma_tail_mean)).0,
            force_mean_series: (0..len).map(|i| at(i).sum::<f64>() / forces.len() as f64).collect(),
            force_min_series: (0..len).map(|i| at(i).fold(f64::INFINITY, f64::min)).collect(),
            force_max_series: (0..len).map(|i| at(i).fold(f64::NEG_INFINITY, f64::max)).collect(),
            complete: trials.iter().all(|t| !t.aborted),
            trials,
        })
    }
}

pub struct ExperimentResult {
    pub cells: Vec<CellSummary>,
    pub traces: Vec<((Condition, StimMode, usize), TrialTrace)>,
}

impl ExperimentResult {
    pub fn any_aborted(&self) -> bool {
        self.cells.iter().any(|c| !c.complete)
    }
}

/// Runs every (condition, mode, trial) of `cfg` with `model`, spreading
/// trials over `cfg.threads` workers. Results are ordered by condition,
/// mode and trial regardless of scheduling.
pub fn run_trials(cfg: &ExperimentConfig, model: &VisualModel) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &c in &cfg.conditions {
        for &m in &cfg.modes {
            for t in 0..cfg.trials_per_cell {
                jobs.push((c, m, t));
            }
        }
    }
    let run = |&(condition, mode, trial): &(Condition, StimMode, usize)| -> Result<TrialTrace> {
        let setup = TrialSetup {
            env: cfg.env.clone(),
            agent: cfg.agent.clone(),
            condition,
            mode,
            seed: child_seed(cfg.master_seed, condition, mode, trial),
        };
        let trace = run_trial(&setup, model)?;
        log::info!("{condition}/{mode} trial {trial}: {} iterations", trace.len());
        Ok(trace)
    };
    let workers = cfg.threads.min(jobs.len()).max(1);
    let mut results: Vec<Option<Result<TrialTrace>>> = (0..jobs.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, job) in results.iter_mut().zip(&jobs) {
            *slot = Some(run(job));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = run(&jobs[i]);
                    done.lock().expect("result lock")[i] = Some(r);
                });
            }
        });
    }

    let mut traces = Vec::with_capacity(jobs.len());
    for (job, r) in jobs.iter().zip(results) {
        traces.push((*job, r.expect("every job ran")?));
    }
    let mut cells = Vec::new();
    for &c in &cfg.conditions {
        for &m in &cfg.modes {
            let mut sums = Vec::new();
            let mut forces = Vec::new();
            for ((jc, jm, t), tr) in &traces {
                if (*jc, *jm) == (c, m) {
                    let (s, f) = summarize_trial(tr, cfg, c, m, *t, child_seed(cfg.master_seed, c, m, *t))?;
                    sums.push(s);
                    forces.push(f);
                }
            }
            cells.push(CellSummary::new(sums, &forces)?);
        }
    }
    Ok(ExperimentResult { cells, traces })
}

pub fn trace_file_stem(condition: Condition, mode: StimMode, trial: usize) -> String {
    format!("{condition}_{mode}_trial{trial}")
}

/// Summary CSV: one row per trial, then per cell a `mean` and a `std` row
/// (sample standard deviation) over the trials.
pub fn summary_csv(cells: &[CellSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| Error::format("summary csv", e.to_string());
    w.write_record(SUMMARY_COLUMNS).map_err(e)?;
    for cell in cells {
        for t in &cell.trials {
            w.write_record([
                t.condition.to_string(),
                t.mode.to_string(),
                t.trial.to_string(),
                fmt_f64(t.drift_cm),
                fmt_f64(t.mean_abs_force),
                fmt_f64(t.gamma_tail_mean),
                (t.aborted as u8).to_string(),
            ])
            .map_err(e)?;
        }
    }
    for cell in cells {
        let col = |f: fn(&TrialSummary) -> f64| cell.trials.iter().map(f).collect::<Vec<_>>();
        let (d, f, g) = (
            mean_std(&col(|t| t.drift_cm)),
            mean_std(&col(|t| t.mean_abs_force)),
            mean_std(&col(|t| t.gamma_tail_mean)),
        );
        let aborted = cell.trials.iter().filter(|t| t.aborted).count();
        for (label, v) in [("mean", (d.0, f.0, g.0)), ("std", (d.1, f.1, g.1))] {
            w.write_record([
                cell.condition.to_string(),
                cell.mode.to_string(),
                label.to_string(),
                fmt_f64(v.0),
                fmt_f64(v.1),
                fmt_f64(v.2),
                aborted.to_string(),
            ])
            .map_err(e)?;
        }
    }
    w.into_inner().map_err(|e| Error::format("summary csv", e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Writes `out/<run-id>/{traces/, summary.csv, plots/, resolved-config.txt}`.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    let traces_dir = dir.join("traces");
    std::fs::create_dir_all(&traces_dir)?;
    write_file(&dir.join("resolved-config.txt"), cfg.to_kv().to_text().as_bytes())?;
    for ((c, m, t), tr) in &result.traces {
        let stem = trace_file_stem(*c, *m, *t);
        let mut buf = Vec::new();
        tr.write_csv(&mut buf)?;
        write_file(&traces_dir.join(format!("{stem}.csv")), &buf)?;
        let mut ev = Vec::new();
        tr.write_events_csv(&mut ev)?;
        write_file(&traces_dir.join(format!("{stem}_events.csv")), &ev)?;
        if let Some(reason) = &tr.aborted {
            write_file(&traces_dir.join(format!("{stem}_aborted.txt")), reason.as_bytes())?;
        }
    }
    write_file(&dir.join("summary.csv"), &summary_csv(&result.cells)?)?;
    emit_plots(&result.cells, &dir.join("plots"))?;
    Ok(dir)
}

/// Loads the model, runs the experiment and writes all outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentResult, PathBuf)> {
    let model = VisualModel::load(&cfg.model_path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("cannot read model {}: {io}", cfg.model_path.display()),
        )),
        other => other,
    })?;
    let result = run_trials(cfg, &model)?;
    let dir = write_outputs(cfg, &result)?;
    Ok((result, dir))
}

/// Recomputes trial and cell summaries from the trace files of a run
/// directory written by [`write_outputs`].
pub fn summarize_run_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<CellSummary>> {
    let mut cells = Vec::new();
    for &c in &cfg.conditions {
        for &m in &cfg.modes {
            let mut sums = Vec::new();
            let mut forces = Vec::new();
            for t in 0..cfg.trials_per_cell {
                let stem = trace_file_stem(c, m, t);
                let path = dir.join("traces").join(format!("{stem}.csv"));
                let records = TrialTrace::read_csv(std::fs::File::open(&path)?)?;
                let aborted_path = dir.join("traces").join(format!("{stem}_aborted.txt"));
                let trace = TrialTrace {
                    initial_mu: cfg.env.rest.to_array(),
                    records,
                    events: Vec::new(),
                    aborted: aborted_path.exists().then(|| "aborted".to_string()),
                };
                let (s, f) = summarize_trial(&trace, cfg, c, m, t, child_seed(cfg.master_seed, c, m, t))?;
                sums.push(s);
                forces.push(f);
            }
            cells.push(CellSummary::new(sums, &forces)?);
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::TraceRecord;

    fn rec(mu: [f64; 2], action: [f64; 2]) -> TraceRecord {
        TraceRecord {
            iter: 0,
            t: 0.02,
            mu,
            s_p: mu,
            action,
            gamma: 0.5,
            free_energy: 0.0,
            ee_mu: [0.0, 0.0],
            ee_accel_x: 0.0,
            oob: false,
        }
    }

    fn trace(mus: &[[f64; 2]], action: [f64; 2]) -> TrialTrace {
        let env = EnvConfig::default();
        TrialTrace {
            initial_mu: env.rest.to_array(),
            records: mus.iter().map(|m| rec(*m, action)).collect(),
            events: vec![],
            aborted: None,
        }
    }

    #[test]
    fn drift_zero_when_belief_returns() {
        let env = EnvConfig::default();
        let r = env.rest.to_array();
        let t = trace(&[r, [r[0] + 0.1, r[1]], r], [0.0; 2]);
        assert_eq!(compute_drift(&t, &env, DriftMeasure::Final).unwrap(), 0.0);
    }

    #[test]
    fn drift_of_constructed_five_cm_shift() {
        let env = EnvConfig::default();
        let h = env.hand(env.rest);
        let target = crate::env::Point2::new(h.x - 0.05, h.y);
        let q = crate::env::inverse_kinematics(target, &env.geometry, -1.0).unwrap();
        let t = trace(&[env.rest.to_array(), q.to_array()], [0.0; 2]);
        let d = compute_drift(&t, &env, DriftMeasure::Final).unwrap();
        assert!((d + 5.0).abs() < 1e-9, "{d}");
        // drift ignores the action columns
        let t2 = trace(&[env.rest.to_array(), q.to_array()], [0.7, -0.2]);
        assert_eq!(compute_drift(&t2, &env, DriftMeasure::Final).unwrap(), d);
        // averaging over [rest, q] halves it
        let avg = compute_drift(&t, &env, DriftMeasure::TimeAveraged).unwrap();
        assert!((avg + 2.5).abs() < 1e-9);
        assert!(compute_drift(&trace(&[], [0.0; 2]), &env, DriftMeasure::Final).is_err());
    }

    #[test]
    fn force_proxy_cases() {
        let env = EnvConfig::default();
        let r = env.rest.to_array();
        let zero = compute_force_proxy(&trace(&[r; 4], [0.0; 2]), &env, 1).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        // x-row of the Jacobian at rest, first column: −(y_hand − y_shoulder)
        let c = 0.3;
        let f = compute_force_proxy(&trace(&[r; 4], [c, 0.0]), &env, 1).unwrap();
        let h = env.hand(env.rest);
        let expected = -(h.y - env.geometry.shoulder_position.y) * c;
        assert!(f.iter().all(|v| (v - expected).abs() < 1e-12), "{f:?} vs {expected}");
    }

    #[test]
    fn moving_average_cases() {
        let x = [1.0, 2.0, 6.0, 3.0];
        assert_eq!(moving_average(&x, 1), x.to_vec());
        assert_eq!(moving_average(&x, 3), vec![1.5, 3.0, 11.0 / 3.0, 4.5]);
        assert_eq!(moving_average(&x, 2), vec![1.5, 4.0, 4.5, 3.0]);
    }

    #[test]
    fn child_seeds_are_pure_and_distinct() {
        let a = child_seed(1, Condition::Left, StimMode::Sync, 0);
        assert_eq!(a, child_seed(1, Condition::Left, StimMode::Sync, 0));
        let mut all = std::collections::HashSet::new();
        for c in Condition::ALL {
            for m in StimMode::ALL {
                for t in 0..5 {
                    all.insert(child_seed(1, c, m, t));
                }
            }
        }
        assert_eq!(all.len(), 30);
        assert_ne!(a, child_seed(2, Condition::Left, StimMode::Sync, 0));
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let mut kv = c.to_kv();
        kv.set("trials_per_cell", 0);
        assert!(matches!(ExperimentConfig::from_kv(&kv), Err(Error::Config(_))));
        let mut kv = c.to_kv();
        kv.set("no_such_key", 1);
        assert!(matches!(ExperimentConfig::from_kv(&kv), Err(Error::Config(_))));
        let mut kv = c.to_kv();
        kv.set("conditions", "left,up");
        assert!(ExperimentConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn summary_has_trial_and_aggregate_rows() {
        let s = |trial, drift| TrialSummary {
            condition: Condition::Left,
            mode: StimMode::Sync,
            trial,
            seed: 0,
            drift_cm: drift,
            mean_abs_force: 1.0,
            mean_force: -1.0,
            gamma_tail_mean: 0.5,
            aborted: false,
        };
        let cell = CellSummary::new(vec![s(0, -1.0), s(1, -3.0)], &[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(cell.drift_mean, -2.0);
        assert!((cell.drift_std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(cell.force_mean_series, vec![1.0, 2.0]);
        let text = String::from_utf8(summary_csv(&[cell]).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "condition,mode,trial,drift_cm,mean_abs_force_proxy,gamma_tail_mean,aborted_flag");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("left,sync,mean,-2.0,"));
        assert!(lines[4].starts_with("left,sync,std,"));
    }
}
