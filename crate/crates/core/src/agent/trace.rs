//! Per-iteration trial records and their CSV form.

use std::io::{Read, Write};

use crate::env::StimulationEvent;
use crate::error::{Error, Result};

pub const TRACE_COLUMNS: [&str; 14] = [
    "iter",
    "t_s",
    "mu_shoulder_rad",
    "mu_elbow_rad",
    "sp_shoulder_rad",
    "sp_elbow_rad",
    "a_shoulder_rads",
    "a_elbow_rads",
    "gamma",
    "free_energy",
    "ee_mu_x_m",
    "ee_mu_y_m",
    "ee_accel_x_ms2",
    "oob_flag",
];

const EVENT_COLUMNS: [&str; 4] = ["t_v_s", "t_t_s", "delay_s", "fired_iter"];

/// State after iteration `iter` (belief and action already updated).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub t: f64,
    pub mu: [f64; 2],
    pub s_p: [f64; 2],
    pub action: [f64; 2],
    pub gamma: f64,
    /// Free energy at the belief the iteration started from.
    pub free_energy: f64,
    /// Hand position implied by the belief.
    pub ee_mu: [f64; 2],
    /// Horizontal hand acceleration implied by the action at the true posture.
    pub ee_accel_x: f64,
    pub oob: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialTrace {
    /// Belief before the first iteration.
    pub initial_mu: [f64; 2],
    pub records: Vec<TraceRecord>,
    /// Scheduled stimulation events with the iteration each completed at.
    pub events: Vec<(StimulationEvent, Option<usize>)>,
    /// Set when the trial stopped early.
    pub aborted: Option<String>,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format("trace csv", format!("{other:?}")),
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("trace csv", format!("bad field {i} in row {:?}", rec)))
}

impl TrialTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_mu(&self) -> Option<[f64; 2]> {
        self.records.last().map(|r| r.mu)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_COLUMNS).map_err(csv_err)?;
        for r in &self.records {
            let row = [
                r.iter.to_string(),
                fmt(r.t),
                fmt(r.mu[0]),
                fmt(r.mu[1]),
                fmt(r.s_p[0]),
                fmt(r.s_p[1]),
                fmt(r.action[0]),
                fmt(r.action[1]),
                fmt(r.gamma),
                fmt(r.free_energy),
                fmt(r.ee_mu[0]),
                fmt(r.ee_mu[1]),
                fmt(r.ee_accel_x),
                (r.oob as u8).to_string(),
            ];
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses trace rows. The initial belief is not part of the CSV and is
    /// left at zero; events and abort status live in separate files.
    pub fn read_csv(r: impl Read) -> Result<Vec<TraceRecord>> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.iter().ne(TRACE_COLUMNS.iter().copied()) {
            return Err(Error::format("trace csv", format!("unexpected header {header:?}")));
        }
        let mut out = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(csv_err)?;
            let f = |i| field::<f64>(&row, i);
            out.push(TraceRecord {
                iter: field(&row, 0)?,
                t: f(1)?,
                mu: [f(2)?, f(3)?],
                s_p: [f(4)?, f(5)?],
                action: [f(6)?, f(7)?],
                gamma: f(8)?,
                free_energy: f(9)?,
                ee_mu: [f(10)?, f(11)?],
                ee_accel_x: f(12)?,
                oob: field::<u8>(&row, 13)? != 0,
            });
        }
        Ok(out)
    }

    pub fn write_events_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(EVENT_COLUMNS).map_err(csv_err)?;
        for (ev, fired) in &self.events {
            let it = fired.map_or_else(String::new, |i| i.to_string());
            out.write_record([fmt(ev.t_v), fmt(ev.t_t), fmt(ev.delay()), it]).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_events_csv(r: impl Read) -> Result<Vec<(StimulationEvent, Option<usize>)>> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.iter().ne(EVENT_COLUMNS.iter().copied()) {
            return Err(Error::format("event csv", format!("unexpected header {header:?}")));
        }
        let mut out = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(csv_err)?;
            let ev = StimulationEvent::new(field(&row, 0)?, field(&row, 1)?)?;
            let fired = match row.get(3) {
                Some("") | None => None,
                Some(_) => Some(field(&row, 3)?),
            };
            out.push((ev, fired));
        }
        Ok(out)
    }
}

fn fmt(v: f64) -> String {
    crate::config::fmt_f64(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrialTrace {
        let rec = |i: usize| TraceRecord {
            iter: i,
            t: 0.02 * (i + 1) as f64,
            mu: [0.1 * i as f64, -0.3],
            s_p: [0.1, -0.3000000000000001],
            action: [1e-7, -0.25],
            gamma: 0.01,
            free_energy: 1.0 / 3.0,
            ee_mu: [-0.3, 0.5],
            ee_accel_x: -2.5e-3,
            oob: i == 1,
        };
        TrialTrace {
            initial_mu: [0.0, 0.0],
            records: vec![rec(0), rec(1)],
            events: vec![
                (StimulationEvent::new(2.0, 2.05).unwrap(), Some(102)),
                (StimulationEvent::new(4.0, 4.5).unwrap(), None),
            ],
            aborted: None,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = sample();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,t_s,mu_shoulder_rad,mu_elbow_rad,sp_shoulder_rad,sp_elbow_rad,a_shoulder_rads,a_elbow_rads,gamma,free_energy,ee_mu_x_m,ee_mu_y_m,ee_accel_x_ms2,oob_flag\n"));
        assert_eq!(TrialTrace::read_csv(buf.as_slice()).unwrap(), t.records);

        let mut ev = Vec::new();
        t.write_events_csv(&mut ev).unwrap();
        assert_eq!(TrialTrace::read_events_csv(ev.as_slice()).unwrap(), t.events);
    }

    #[test]
    fn rejects_wrong_header() {
        assert!(TrialTrace::read_csv(&b"iter,t\n0,0\n"[..]).is_err());
    }
}
