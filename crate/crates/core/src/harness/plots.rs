//! Deterministic raster plots (PGM) with their source data as CSV.

use std::path::{Path, PathBuf};

use super::CellSummary;
use crate::config::fmt_f64;
use crate::env::Image;
use crate::error::{Error, Result};

const BG: f64 = 1.0;
const INK: f64 = 0.0;
const SYNC_FILL: f64 = 0.25;
const ASYNC_FILL: f64 = 0.65;
const BAND: f64 = 0.8;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas { w, h, px: vec![BG; w * h] }
    }

    fn set(&mut self, x: i64, y: i64, v: f64) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = v;
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, v: f64) {
        let (xa, xb) = (x0.min(x1), x0.max(x1));
        let (ya, yb) = (y0.min(y1), y0.max(y1));
        for y in ya..=yb {
            for x in xa..=xb {
                self.set(x, y, v);
            }
        }
    }

    fn hline(&mut self, x0: i64, x1: i64, y: i64, v: f64) {
        self.rect(x0, y, x1, y, v);
    }

    fn vline(&mut self, x: i64, y0: i64, y1: i64, v: f64) {
        self.rect(x, y0, x, y1, v);
    }

    fn into_image(self) -> Result<Image> {
        Image::new(self.w, self.h, self.px)
    }
}

/// Files written by [`emit_plots`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotFiles {
    pub images: Vec<PathBuf>,
    pub data: Vec<PathBuf>,
}

/// Maps `v ∈ [−range, range]` to a pixel row inside `[top, bottom]`.
fn row(v: f64, range: f64, top: i64, bottom: i64) -> i64 {
    let mid = (top + bottom) as f64 / 2.0;
    let half = (bottom - top) as f64 / 2.0;
    (mid - v / range * half).round() as i64
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let e = |e: csv::Error| Error::format("plot csv", e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(e)?;
    for r in rows {
        w.write_record(&r).map_err(e)?;
    }
    w.into_inner().map_err(|e| Error::format("plot csv", e.to_string()))
}

/// Grouped drift bars (one group per condition, dark = sync, light = async,
/// whiskers ± one standard deviation) and one force time-series plot per
/// cell (trial min–max band, mean line). Cells without data are skipped
/// with a warning.
pub fn emit_plots(cells: &[CellSummary], dir: &Path) -> Result<PlotFiles> {
    std::fs::create_dir_all(dir)?;
    let mut files = PlotFiles::default();

    let usable: Vec<&CellSummary> = cells
        .iter()
        .filter(|c| {
            let ok = !c.trials.is_empty() && c.drift_mean.is_finite();
            if !ok {
                log::warn!("no drift data for {}/{}; bar omitted", c.condition, c.mode);
            }
            ok
        })
        .collect();
    let data = csv_bytes(
        &["condition", "mode", "drift_mean_cm", "drift_std_cm"],
        usable.iter().map(|c| {
            vec![c.condition.to_string(), c.mode.to_string(), fmt_f64(c.drift_mean), fmt_f64(c.drift_std)]
        }),
    )?;
    let path = dir.join("drift_bars.csv");
    std::fs::write(&path, data)?;
    files.data.push(path);
    if !usable.is_empty() {
        let (w, h) = (60 + 80 * usable.len() as i64, 240i64);
        let mut cv = Canvas::new(w as usize, h as usize);
        let range = usable
            .iter()
            .map(|c| c.drift_mean.abs() + c.drift_std)
            .fold(0.0, f64::max)
            .max(1e-9)
            * 1.1;
        let (top, bottom) = (10, h - 10);
        let zero = row(0.0, range, top, bottom);
        cv.vline(20, top, bottom, INK);
        cv.hline(20, w - 10, zero, INK);
        for (i, c) in usable.iter().enumerate() {
            let x0 = 40 + 80 * i as i64;
            let fill = if c.mode == crate::env::StimMode::Sync { SYNC_FILL } else { ASYNC_FILL };
            let y = row(c.drift_mean, range, top, bottom);
            cv.rect(x0, zero, x0 + 40, y, fill);
            let (ya, yb) = (row(c.drift_mean + c.drift_std, range, top, bottom), row(c.drift_mean - c.drift_std, range, top, bottom));
            cv.vline(x0 + 20, ya, yb, INK);
            cv.hline(x0 + 14, x0 + 26, ya, INK);
            cv.hline(x0 + 14, x0 + 26, yb, INK);
        }
        let path = dir.join("drift_bars.pgm");
        cv.into_image()?.write_pgm(&path)?;
        files.images.push(path);
    }

    for c in cells {
        let n = c.force_mean_series.len();
        if n == 0 {
            log::warn!("no force data for {}/{}; plot omitted", c.condition, c.mode);
            continue;
        }
        let stem = format!("force_{}_{}", c.condition, c.mode);
        let data = csv_bytes(
            &["iter", "force_mean", "force_min", "force_max"],
            (0..n).map(|i| {
                vec![
                    i.to_string(),
                    fmt_f64(c.force_mean_series[i]),
                    fmt_f64(c.force_min_series[i]),
                    fmt_f64(c.force_max_series[i]),
                ]
            }),
        )?;
        let path = dir.join(format!("{stem}.csv"));
        std::fs::write(&path, data)?;
        files.data.push(path);

        let (w, h) = (400i64, 160i64);
        let mut cv = Canvas::new(w as usize, h as usize);
        let range = c
            .force_min_series
            .iter()
            .chain(&c.force_max_series)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-9)
            * 1.1;
        let (top, bottom) = (5, h - 5);
        let col = |i: usize| 10 + ((i as f64 / n.max(2) as f64) * (w - 20) as f64) as i64;
        for i in 0..n {
            let x = col(i);
            cv.vline(x, row(c.force_max_series[i], range, top, bottom), row(c.force_min_series[i], range, top, bottom), BAND);
        }
        cv.hline(10, w - 10, row(0.0, range, top, bottom), 0.5);
        let mut prev = None;
        for i in 0..n {
            let (x, y) = (col(i), row(c.force_mean_series[i], range, top, bottom));
            match prev {
                Some((px, py)) if px == x || px + 1 == x => cv.vline(x, py, y, INK),
                _ => cv.set(x, y, INK),
            }
            prev = Some((x, y));
        }
        let path = dir.join(format!("{stem}.pgm"));
        cv.into_image()?.write_pgm(&path)?;
        files.images.push(path);
    }
    Ok(files)
}
