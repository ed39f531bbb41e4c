//! Deterministic top-down rasterization of the arm.
//!
//! Each segment is a capsule (a thick line with round caps). A pixel's
//! intensity is the capsule coverage estimated from the distance `d` between
//! the pixel center and the segment: 1 inside `radius − softness/2`, 0 beyond
//! `radius + softness/2`, linear in between. The two capsules are combined by
//! taking the maximum.

use super::image::Image;
use super::kinematics::{elbow_position, forward_kinematics, ArmGeometry, JointAngles, Point2};
use crate::error::{Error, Result};

/// Metric rectangle seen by the camera; `y_max` is the top image row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewWindow {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    /// Square image side in pixels.
    pub resolution: usize,
    pub view: ViewWindow,
    pub upper_arm_width: f64,
    pub forearm_width: f64,
    /// Width of the anti-aliasing ramp across the capsule boundary, meters.
    pub edge_softness: f64,
}

impl RenderConfig {
    pub fn meters_per_pixel(&self) -> (f64, f64) {
        let r = self.resolution as f64;
        ((self.view.x_max - self.view.x_min) / r, (self.view.y_max - self.view.y_min) / r)
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.view;
        if self.resolution < 8 || self.resolution % 8 != 0 {
            return Err(Error::Config(format!("resolution must be a positive multiple of 8, got {}", self.resolution)));
        }
        if !(v.x_min < v.x_max && v.y_min < v.y_max) {
            return Err(Error::Config("view window must have min < max".into()));
        }
        if !(self.upper_arm_width > 0.0 && self.forearm_width > 0.0 && self.edge_softness > 0.0) {
            return Err(Error::Config("capsule widths and edge softness must be positive".into()));
        }
        Ok(())
    }

    /// Metric position of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> Point2 {
        let (mx, my) = self.meters_per_pixel();
        Point2::new(
            self.view.x_min + (col as f64 + 0.5) * mx,
            self.view.y_max - (row as f64 + 0.5) * my,
        )
    }
}

struct Capsule {
    a: Point2,
    b: Point2,
    radius: f64,
}

impl Capsule {
    fn distance(&self, p: Point2) -> f64 {
        let (abx, aby) = (self.b.x - self.a.x, self.b.y - self.a.y);
        let len2 = abx * abx + aby * aby;
        let t = if len2 > 0.0 {
            (((p.x - self.a.x) * abx + (p.y - self.a.y) * aby) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        p.dist(Point2::new(self.a.x + t * abx, self.a.y + t * aby))
    }
}

/// Renders the arm at `q` translated laterally by `offset_dx` meters.
///
/// Fails when no pixel is lit, i.e. the arm lies completely outside the view.
pub fn render(q: JointAngles, offset_dx: f64, geom: &ArmGeometry, cfg: &RenderConfig) -> Result<Image> {
    let shift = |p: Point2| Point2::new(p.x + offset_dx, p.y);
    let shoulder = shift(geom.shoulder_position);
    let elbow = shift(elbow_position(q, geom));
    let hand = shift(forward_kinematics(q, geom));
    let capsules = [
        Capsule {
            a: shoulder,
            b: elbow,
            radius: 0.5 * cfg.upper_arm_width,
        },
        Capsule {
            a: elbow,
            b: hand,
            radius: 0.5 * cfg.forearm_width,
        },
    ];
    let n = cfg.resolution;
    let mut img = Image::black(n, n);
    let soft = cfg.edge_softness;
    {
        let px = img.pixels_mut();
        for row in 0..n {
            for col in 0..n {
                let p = cfg.pixel_center(row, col);
                let v = capsules
                    .iter()
                    .map(|c| ((c.radius + 0.5 * soft - c.distance(p)) / soft).clamp(0.0, 1.0))
                    .fold(0.0_f64, f64::max);
                px[row * n + col] = v;
            }
        }
    }
    if img.lit_count() == 0 {
        return Err(Error::Config("arm is entirely outside the view window".into()));
    }
    Ok(img)
}
