use crate::se3::{Pose, Rotation, Twist};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetMotion {
    Stationary,
    /// Constant speed; the direction is redrawn uniformly on the sphere every
    /// `resample_period` seconds.
    RandomWalk { speed: f64, resample_period: f64 },
}

/// Spherical capture point.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel {
    pub pose: Pose,
    /// Inertial-frame twist `[v; ω]`.
    pub twist: Twist,
    pub radius: f64,
    pub motion: TargetMotion,
    elapsed_in_leg: f64,
}

impl TargetModel {
    pub fn new(position: Vector3<f64>, radius: f64, motion: TargetMotion) -> Self {
        Self {
            pose: Pose::from_translation(position),
            twist: Twist::zero(),
            radius,
            motion,
            elapsed_in_leg: 0.0,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.position
    }

    /// Draws the first walking direction. Stationary targets ignore the rng.
    pub fn start<R: Rng>(&mut self, rng: &mut R) {
        self.elapsed_in_leg = 0.0;
        if let TargetMotion::RandomWalk { speed, .. } = self.motion {
            self.twist = Twist::new(random_direction(rng) * speed, Vector3::zeros());
        } else {
            self.twist = Twist::zero();
        }
    }

    pub fn advance<R: Rng>(&mut self, dt: f64, rng: &mut R) {
        let TargetMotion::RandomWalk {
            speed,
            resample_period,
        } = self.motion
        else {
            return;
        };
        self.pose.position += self.twist.linear() * dt;
        self.elapsed_in_leg += dt;
        // small tolerance so that an integer number of substeps closes a leg
        if self.elapsed_in_leg >= resample_period - 1e-9 {
            self.elapsed_in_leg = 0.0;
            self.twist = Twist::new(random_direction(rng) * speed, Vector3::zeros());
        }
    }
}

fn random_direction<R: Rng>(rng: &mut R) -> Vector3<f64> {
    let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
    Vector3::new(x, y, z)
}

/// Rectangular base the capture point is attached to.
#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleModel {
    pub pose: Pose,
    pub half_extents: Vector3<f64>,
    /// Body-frame surface samples `b_k`.
    pub surface_points: Vec<Vector3<f64>>,
}

impl ObstacleModel {
    pub fn new(pose: Pose, half_extents: Vector3<f64>) -> Self {
        Self {
            pose,
            half_extents,
            surface_points: box_surface_points(&half_extents),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.position
    }
}

/// 8 corners, 12 edge midpoints and 6 face centers, in that order.
pub fn box_surface_points(h: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let mut pts = Vec::with_capacity(26);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                pts.push(Vector3::new(sx * h.x, sy * h.y, sz * h.z));
            }
        }
    }
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        for sa in [-1.0, 1.0] {
            for sb in [-1.0, 1.0] {
                let mut p = Vector3::zeros();
                p[a] = sa * h[a];
                p[b] = sb * h[b];
                pts.push(p);
            }
        }
    }
    for axis in 0..3 {
        for s in [-1.0, 1.0] {
            let mut p = Vector3::zeros();
            p[axis] = s * h[axis];
            pts.push(p);
        }
    }
    pts
}

/// World positions `T_k = g_o b_k`.
pub fn obstacle_surface_points(obstacle: &ObstacleModel) -> Vec<Vector3<f64>> {
    obstacle
        .surface_points
        .iter()
        .map(|b| obstacle.pose.transform_point(b))
        .collect()
}

/// Rotation by a uniform angle in `[0, max_angle]` about a uniform axis.
pub fn random_tilt<R: Rng>(rng: &mut R, max_angle: f64) -> Rotation {
    let axis = random_direction(rng);
    let angle = if max_angle > 0.0 {
        rng.random_range(0.0..=max_angle)
    } else {
        0.0
    };
    Rotation::from_axis_angle(&axis, angle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn surface_points_lie_on_box() {
        let h = Vector3::new(0.1, 0.2, 0.05);
        let pts = box_surface_points(&h);
        assert_eq!(pts.len(), 26);
        for p in &pts {
            let on_face = (0..3).any(|i| (p[i].abs() - h[i]).abs() < 1e-15);
            let inside = (0..3).all(|i| p[i].abs() <= h[i] + 1e-15);
            assert!(on_face && inside, "{p:?}");
        }
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                assert!((a - b).norm() > 1e-9);
            }
        }
    }

    #[test]
    fn identity_and_translation() {
        let h = Vector3::new(0.1, 0.1, 0.02);
        let ob = ObstacleModel::new(Pose::identity(), h);
        assert_eq!(obstacle_surface_points(&ob), ob.surface_points);
        let d = Vector3::new(1.0, -2.0, 0.5);
        let moved = ObstacleModel::new(Pose::from_translation(d), h);
        for (t, b) in obstacle_surface_points(&moved).iter().zip(&moved.surface_points) {
            assert_eq!(*t, b + d);
        }
    }

    #[test]
    fn walk_keeps_speed_and_resamples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = TargetModel::new(
            Vector3::zeros(),
            0.05,
            TargetMotion::RandomWalk {
                speed: 0.02,
                resample_period: 1.0,
            },
        );
        t.start(&mut rng);
        let first = t.twist;
        for _ in 0..99 {
            t.advance(0.01, &mut rng);
        }
        assert_eq!(t.twist, first);
        t.advance(0.01, &mut rng);
        assert_ne!(t.twist, first);
        assert!((t.twist.linear().norm() - 0.02).abs() < 1e-15);
        assert!((t.position().norm() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn tilt_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let r = random_tilt(&mut rng, std::f64::consts::FRAC_PI_4);
            let cos = ((r.matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            assert!(cos.acos() <= std::f64::consts::FRAC_PI_4 + 1e-12);
        }
    }
}
