use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Reward constants. The defaults are tuning choices for this simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub k_c1: f64,
    pub k_c2: f64,
    pub k_c3: f64,
    /// Manipulability threshold of the singularity penalty.
    pub k_c4: f64,
    pub k_o1: f64,
    /// Distance at which the danger term peaks (m).
    pub k_o2: f64,
    /// Width of the danger term (m²).
    pub k_o3: f64,
    pub k_o4: f64,
    /// Collision distance (m).
    pub k_o5: f64,
}

impl RewardConfig {
    pub fn with_lambda_lim(lambda_lim: f64) -> Self {
        Self {
            k_c1: 1.0,
            k_c2: 50.0,
            k_c3: 10.0,
            k_c4: 0.5 * lambda_lim,
            k_o1: 5.0,
            k_o2: 0.1,
            k_o3: 0.005,
            k_o4: 100.0,
            k_o5: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let named = [
            ("k_c1", self.k_c1),
            ("k_c2", self.k_c2),
            ("k_c3", self.k_c3),
            ("k_c4", self.k_c4),
            ("k_o1", self.k_o1),
            ("k_o2", self.k_o2),
            ("k_o3", self.k_o3),
            ("k_o4", self.k_o4),
            ("k_o5", self.k_o5),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("reward constant {name} must be positive, got {v}"));
            }
        }
        if self.k_o5 >= self.k_o2 {
            return Err(format!(
                "collision distance k_o5 = {} must be below k_o2 = {}",
                self.k_o5, self.k_o2
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CaptureReward {
    pub distance: f64,
    pub total: f64,
    pub captured: bool,
    pub singular_penalty: bool,
}

/// `r_c = −k_c1 d + k_c2 [d ≤ ζ] − k_c3 [λ ≤ k_c4]`.
pub fn reward_capture(
    p_ee: &Vector3<f64>,
    p_tar: &Vector3<f64>,
    zeta: f64,
    lambda: f64,
    cfg: &RewardConfig,
) -> CaptureReward {
    let distance = (p_ee - p_tar).norm();
    let captured = distance <= zeta;
    let singular_penalty = lambda <= cfg.k_c4;
    let mut total = -cfg.k_c1 * distance;
    if captured {
        total += cfg.k_c2;
    }
    if singular_penalty {
        total -= cfg.k_c3;
    }
    CaptureReward {
        distance,
        total,
        captured,
        singular_penalty,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObstacleReward {
    pub min_distance: f64,
    pub total: f64,
    pub collided: bool,
}

/// `r_o = −k_o1 max exp(−(d − k_o2)²/k_o3) − k_o4 [min d ≤ k_o5]` over all
/// link/surface pairs.
///
/// The Gaussian peaks at `d = k_o2`, so the maximum is attained at the pair
/// whose distance is closest to `k_o2`, not necessarily the closest pair.
pub fn reward_obstacle(
    link_points: &[Vector3<f64>],
    surface_points: &[Vector3<f64>],
    cfg: &RewardConfig,
) -> ObstacleReward {
    assert!(!link_points.is_empty() && !surface_points.is_empty());
    let mut min_distance = f64::INFINITY;
    let mut closest_to_peak = f64::INFINITY;
    for l in link_points {
        for t in surface_points {
            let d = (l - t).norm();
            min_distance = min_distance.min(d);
            closest_to_peak = closest_to_peak.min((d - cfg.k_o2).abs());
        }
    }
    let danger = (-(closest_to_peak * closest_to_peak) / cfg.k_o3).exp();
    let collided = min_distance <= cfg.k_o5;
    let mut total = -cfg.k_o1 * danger;
    if collided {
        total -= cfg.k_o4;
    }
    ObstacleReward {
        min_distance,
        total,
        collided,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RewardConfig {
        RewardConfig::with_lambda_lim(0.004)
    }

    #[test]
    fn capture_cases() {
        let c = cfg();
        let p = Vector3::new(1.0, 2.0, 3.0);
        let r = reward_capture(&p, &p, 0.05, 1.0, &c);
        assert_eq!(r.total, c.k_c2);
        assert!(r.captured);

        let q = p + Vector3::new(0.0, 0.05, 0.0);
        let r = reward_capture(&p, &q, (q - p).norm(), 1.0, &c);
        assert!(r.captured);

        let r = reward_capture(&p, &(p + Vector3::x()), 0.05, c.k_c4, &c);
        assert!(r.singular_penalty && !r.captured);
        assert_eq!(r.total, -c.k_c1 - c.k_c3);
    }

    #[test]
    fn obstacle_peak_tail_and_collision() {
        let c = cfg();
        let links = [Vector3::zeros()];
        let r = reward_obstacle(&links, &[Vector3::new(c.k_o2, 0.0, 0.0)], &c);
        assert_eq!(r.total, -c.k_o1);
        assert!(!r.collided);

        let far = c.k_o2 + 10.0 * c.k_o3.sqrt();
        let r = reward_obstacle(&links, &[Vector3::new(0.0, far, 0.0)], &c);
        assert!(r.total.abs() < 1e-6 * c.k_o1);

        let r = reward_obstacle(&links, &[Vector3::new(0.0, 0.0, c.k_o5)], &c);
        assert!(r.collided);
        let danger = (-(c.k_o5 - c.k_o2).powi(2) / c.k_o3).exp();
        assert_eq!(r.total, -c.k_o1 * danger - c.k_o4);
    }

    #[test]
    fn validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.k_o5 = c.k_o2;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.k_c3 = 0.0;
        assert!(c.validate().is_err());
    }
}
