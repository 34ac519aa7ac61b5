use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Observation split into the capture part and the (optional) obstacle part.
///
/// Capture layout, all inertial:
/// `[φ, φ̇, P_ee, v_ee, θ_ee, ω_ee, P_tar, v_tar, θ_tar, ω_tar]` with
/// `θ = (roll, pitch, yaw)` of the intrinsic Z-Y-X convention
/// (`R = Rz(yaw) Ry(pitch) Rx(roll)`).
///
/// Obstacle layout: `[P_o, L_11 .. L_{n n_L}, T_1 .. T_{n_o}]`, link-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub s_c: Vec<f64>,
    pub s_o: Vec<f64>,
}

impl StateVector {
    /// `[s_c, s_o]`.
    pub fn full(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.s_c.len() + self.s_o.len());
        v.extend_from_slice(&self.s_c);
        v.extend_from_slice(&self.s_o);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.s_c.iter().chain(&self.s_o).all(|x| x.is_finite())
    }

    /// SHA-256 over the little-endian bytes of `s_c` then `s_o`.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for x in self.s_c.iter().chain(&self.s_o) {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn capture_state_len(dof: usize) -> usize {
    2 * dof + 24
}

pub fn obstacle_state_len(dof: usize, link_samples: usize, surface_points: usize) -> usize {
    3 + 3 * dof * link_samples + 3 * surface_points
}

/// Kinematic quantities of one frame in the inertial frame.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct FrameState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub euler: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureFields {
    pub phi: DVector<f64>,
    pub phi_dot: DVector<f64>,
    pub ee: FrameState,
    pub target: FrameState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleFields {
    pub center: Vector3<f64>,
    pub link_points: Vec<Vector3<f64>>,
    pub surface_points: Vec<Vector3<f64>>,
}

fn push3(out: &mut Vec<f64>, v: &Vector3<f64>) {
    out.extend_from_slice(v.as_slice());
}

fn push_frame(out: &mut Vec<f64>, f: &FrameState) {
    push3(out, &f.position);
    push3(out, &f.velocity);
    push3(out, &f.euler);
    push3(out, &f.angular_velocity);
}

pub fn assemble_state(capture: &CaptureFields, obstacle: Option<&ObstacleFields>) -> StateVector {
    let n = capture.phi.len();
    let mut s_c = Vec::with_capacity(capture_state_len(n));
    s_c.extend_from_slice(capture.phi.as_slice());
    s_c.extend_from_slice(capture.phi_dot.as_slice());
    push_frame(&mut s_c, &capture.ee);
    push_frame(&mut s_c, &capture.target);

    let s_o = match obstacle {
        None => Vec::new(),
        Some(o) => {
            let mut s = Vec::with_capacity(3 * (1 + o.link_points.len() + o.surface_points.len()));
            push3(&mut s, &o.center);
            for p in o.link_points.iter().chain(&o.surface_points) {
                push3(&mut s, p);
            }
            s
        }
    };
    StateVector { s_c, s_o }
}

fn read3(s: &[f64], at: usize) -> Vector3<f64> {
    Vector3::new(s[at], s[at + 1], s[at + 2])
}

fn read_frame(s: &[f64], at: usize) -> FrameState {
    FrameState {
        position: read3(s, at),
        velocity: read3(s, at + 3),
        euler: read3(s, at + 6),
        angular_velocity: read3(s, at + 9),
    }
}

/// Inverse of the capture half of [`assemble_state`].
pub fn unpack_capture(s_c: &[f64], dof: usize) -> Option<CaptureFields> {
    if s_c.len() != capture_state_len(dof) {
        return None;
    }
    Some(CaptureFields {
        phi: DVector::from_column_slice(&s_c[..dof]),
        phi_dot: DVector::from_column_slice(&s_c[dof..2 * dof]),
        ee: read_frame(s_c, 2 * dof),
        target: read_frame(s_c, 2 * dof + 12),
    })
}

/// Inverse of the obstacle half of [`assemble_state`].
pub fn unpack_obstacle(s_o: &[f64], link_points: usize, surface_points: usize) -> Option<ObstacleFields> {
    if s_o.len() != 3 * (1 + link_points + surface_points) {
        return None;
    }
    let pts = |first: usize, count: usize| (0..count).map(|k| read3(s_o, 3 * (first + k))).collect();
    Some(ObstacleFields {
        center: read3(s_o, 0),
        link_points: pts(1, link_points),
        surface_points: pts(1 + link_points, surface_points),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seed: f64) -> FrameState {
        FrameState {
            position: Vector3::new(seed, seed + 1.0, seed + 2.0),
            velocity: Vector3::new(seed + 3.0, seed + 4.0, seed + 5.0),
            euler: Vector3::new(seed + 6.0, seed + 7.0, seed + 8.0),
            angular_velocity: Vector3::new(seed + 9.0, seed + 10.0, seed + 11.0),
        }
    }

    #[test]
    fn round_trip_and_lengths() {
        let capture = CaptureFields {
            phi: DVector::from_fn(7, |i, _| i as f64),
            phi_dot: DVector::from_fn(7, |i, _| -(i as f64)),
            ee: frame(100.0),
            target: frame(200.0),
        };
        let obstacle = ObstacleFields {
            center: Vector3::new(-1.0, -2.0, -3.0),
            link_points: (0..28).map(|k| Vector3::from_element(k as f64)).collect(),
            surface_points: (0..26).map(|k| Vector3::from_element(0.5 * k as f64)).collect(),
        };
        let s = assemble_state(&capture, Some(&obstacle));
        assert_eq!(s.s_c.len(), capture_state_len(7));
        assert_eq!(s.s_c.len(), 38);
        assert_eq!(s.s_o.len(), obstacle_state_len(7, 4, 26));
        assert_eq!(s.s_o.len(), 165);
        assert_eq!(s.s_c[14], 100.0);
        assert_eq!(s.s_c[26], 200.0);
        assert_eq!(unpack_capture(&s.s_c, 7).unwrap(), capture);
        assert_eq!(unpack_obstacle(&s.s_o, 28, 26).unwrap(), obstacle);
        assert!(unpack_capture(&s.s_c[1..], 7).is_none());

        let task1 = assemble_state(&capture, None);
        assert!(task1.s_o.is_empty());
        assert_eq!(task1.full(), task1.s_c);
    }

    #[test]
    fn hash_tracks_bits() {
        let a = StateVector {
            s_c: vec![0.0, 1.0],
            s_o: vec![],
        };
        let mut b = a.clone();
        assert_eq!(a.hash_hex(), b.hash_hex());
        b.s_c[0] = -0.0;
        assert_ne!(a.hash_hex(), b.hash_hex());
    }
}
