//! Planar two-link arm kinematics.
//!
//! Angles are measured from the forward (+y) axis, positive counter-clockwise
//! (toward −x). A segment of length `L` at absolute angle `θ` spans
//! `(−L·sin θ, L·cos θ)`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointAngles {
    pub shoulder: f64,
    pub elbow: f64,
}

impl JointAngles {
    pub const fn new(shoulder: f64, elbow: f64) -> Self {
        JointAngles { shoulder, elbow }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.shoulder, self.elbow]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        JointAngles::new(a[0], a[1])
    }

    pub fn is_finite(&self) -> bool {
        self.shoulder.is_finite() && self.elbow.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmGeometry {
    pub upper_arm_length: f64,
    pub forearm_length: f64,
    pub shoulder_position: Point2,
}

impl ArmGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.upper_arm_length > 0.0 && self.forearm_length > 0.0) {
            return Err(Error::Config("arm segment lengths must be positive".into()));
        }
        if !(self.shoulder_position.x.is_finite() && self.shoulder_position.y.is_finite()) {
            return Err(Error::Config("shoulder position must be finite".into()));
        }
        Ok(())
    }
}

/// Inclusive per-joint angle bounds in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLimits {
    pub shoulder: (f64, f64),
    pub elbow: (f64, f64),
}

impl JointLimits {
    pub fn contains(&self, q: JointAngles) -> bool {
        (self.shoulder.0..=self.shoulder.1).contains(&q.shoulder) && (self.elbow.0..=self.elbow.1).contains(&q.elbow)
    }

    pub fn clamp(&self, q: JointAngles) -> JointAngles {
        JointAngles::new(
            q.shoulder.clamp(self.shoulder.0, self.shoulder.1),
            q.elbow.clamp(self.elbow.0, self.elbow.1),
        )
    }

    /// Limits widened by `margin` on every side.
    pub fn widened(&self, margin: f64) -> JointLimits {
        JointLimits {
            shoulder: (self.shoulder.0 - margin, self.shoulder.1 + margin),
            elbow: (self.elbow.0 - margin, self.elbow.1 + margin),
        }
    }

    pub fn center(&self) -> JointAngles {
        JointAngles::new(
            0.5 * (self.shoulder.0 + self.shoulder.1),
            0.5 * (self.elbow.0 + self.elbow.1),
        )
    }

    pub fn half_range(&self) -> [f64; 2] {
        [
            0.5 * (self.shoulder.1 - self.shoulder.0),
            0.5 * (self.elbow.1 - self.elbow.0),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if ok(self.shoulder) && ok(self.elbow) {
            Ok(())
        } else {
            Err(Error::Config(format!("joint limits must satisfy min < max: {self:?}")))
        }
    }
}

fn seg(length: f64, angle: f64) -> (f64, f64) {
    (-length * angle.sin(), length * angle.cos())
}

pub fn elbow_position(q: JointAngles, geom: &ArmGeometry) -> Point2 {
    let (dx, dy) = seg(geom.upper_arm_length, q.shoulder);
    Point2::new(geom.shoulder_position.x + dx, geom.shoulder_position.y + dy)
}

/// Hand (end-effector) position in meters.
pub fn forward_kinematics(q: JointAngles, geom: &ArmGeometry) -> Point2 {
    let e = elbow_position(q, geom);
    let (dx, dy) = seg(geom.forearm_length, q.shoulder + q.elbow);
    Point2::new(e.x + dx, e.y + dy)
}

/// `∂(hand x, hand y) / ∂(shoulder, elbow)`, row-major `[[dx/ds, dx/de], [dy/ds, dy/de]]`.
pub fn fk_jacobian(q: JointAngles, geom: &ArmGeometry) -> [[f64; 2]; 2] {
    let (l1, l2) = (geom.upper_arm_length, geom.forearm_length);
    let a1 = q.shoulder;
    let a12 = q.shoulder + q.elbow;
    [
        [-l1 * a1.cos() - l2 * a12.cos(), -l2 * a12.cos()],
        [-l1 * a1.sin() - l2 * a12.sin(), -l2 * a12.sin()],
    ]
}

/// Joint angles that place the hand at `target`, with the elbow bent in the
/// direction of `elbow_sign` (negative: clockwise forearm).
pub fn inverse_kinematics(target: Point2, geom: &ArmGeometry, elbow_sign: f64) -> Result<JointAngles> {
    let (l1, l2) = (geom.upper_arm_length, geom.forearm_length);
    let dx = target.x - geom.shoulder_position.x;
    let dy = target.y - geom.shoulder_position.y;
    let c = (dx * dx + dy * dy - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(-1.0..=1.0).contains(&c) {
        return Err(Error::Invalid(format!("target {target:?} is outside the reachable annulus")));
    }
    let elbow = elbow_sign.signum() * c.acos();
    let heading = (-dx).atan2(dy);
    let shoulder = heading - (l2 * elbow.sin()).atan2(l1 + l2 * elbow.cos());
    Ok(JointAngles::new(shoulder, elbow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_jacobian, Tensor};
    use std::f64::consts::FRAC_PI_2;

    fn geom(sx: f64) -> ArmGeometry {
        ArmGeometry {
            upper_arm_length: 0.3,
            forearm_length: 0.3,
            shoulder_position: Point2::new(sx, 0.0),
        }
    }

    #[test]
    fn straight_arm_points_forward() {
        let h = forward_kinematics(JointAngles::new(0.0, 0.0), &geom(-0.3));
        assert!((h.x + 0.3).abs() < 1e-15 && (h.y - 0.6).abs() < 1e-15);
    }

    #[test]
    fn quarter_turn_points_left() {
        let h = forward_kinematics(JointAngles::new(FRAC_PI_2, 0.0), &geom(-0.3));
        assert!((h.x + 0.9).abs() < 1e-12 && h.y.abs() < 1e-12);
    }

    #[test]
    fn reach_stays_in_annulus() {
        let g = ArmGeometry {
            upper_arm_length: 0.3,
            forearm_length: 0.2,
            shoulder_position: Point2::new(0.1, 0.2),
        };
        for i in 0..50 {
            for j in 0..50 {
                let q = JointAngles::new(-3.0 + 0.12 * i as f64, -3.0 + 0.12 * j as f64);
                let r = forward_kinematics(q, &g).dist(g.shoulder_position);
                assert!(r >= 0.1 - 1e-12 && r <= 0.5 + 1e-12);
            }
        }
    }

    fn fd_jac(q: JointAngles, g: &ArmGeometry) -> Tensor {
        finite_diff_jacobian(
            |t| {
                let h = forward_kinematics(JointAngles::new(t.data()[0], t.data()[1]), g);
                Tensor::vector(vec![h.x, h.y])
            },
            &Tensor::vector(q.to_array().to_vec()).unwrap(),
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn jacobian_matches_finite_differences_on_grid() {
        let g = geom(-0.1);
        let limits = JointLimits {
            shoulder: (0.2, 1.4),
            elbow: (-1.5, -0.3),
        };
        for i in 0..20 {
            for j in 0..20 {
                let q = JointAngles::new(
                    limits.shoulder.0 + (limits.shoulder.1 - limits.shoulder.0) * i as f64 / 19.0,
                    limits.elbow.0 + (limits.elbow.1 - limits.elbow.0) * j as f64 / 19.0,
                );
                let fd = fd_jac(q, &g);
                let an = fk_jacobian(q, &g);
                for r in 0..2 {
                    for c in 0..2 {
                        let (a, b) = (an[r][c], fd.data()[r * 2 + c]);
                        assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_column_norms_at_zero() {
        let j = fk_jacobian(JointAngles::new(0.0, 0.0), &geom(0.0));
        assert!((j[0][0].hypot(j[1][0]) - 0.6).abs() < 1e-15);
        assert!((j[0][1].hypot(j[1][1]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn jacobian_ignores_shoulder_position() {
        let q = JointAngles::new(0.7, -0.4);
        assert_eq!(fk_jacobian(q, &geom(-0.1)), fk_jacobian(q, &geom(0.4)));
    }

    #[test]
    fn inverse_round_trips() {
        let g = geom(-0.1);
        let target = Point2::new(-0.3, 0.5);
        for sign in [-1.0, 1.0] {
            let q = inverse_kinematics(target, &g, sign).unwrap();
            let h = forward_kinematics(q, &g);
            assert!(h.dist(target) < 1e-12);
            assert_eq!(q.elbow.signum(), sign);
        }
        assert!(inverse_kinematics(Point2::new(2.0, 0.0), &g, 1.0).is_err());
    }
}
