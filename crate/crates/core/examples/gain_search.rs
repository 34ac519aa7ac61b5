//! Grid search for diagonal PID gains that pass `validate_gains`.
//!
//! Each axis of the relative-twist loop behaves like
//! `s³ + k_d s² + (k_p + k_i k_d) s + k_i k_p`. Among gain sets that pass
//! both inequalities we keep the one whose slowest pole decays fastest, with
//! all gains capped so the joint-rate commands stay moderate.
//!
//! Run with `cargo run --release --example gain_search`.

use capture_core::control::{validate_gains, ControllerGains};
use nalgebra::Matrix3;

fn slowest_decay(kp: f64, kd: f64, ki: f64) -> f64 {
    let companion = Matrix3::new(
        -kd, -(kp + ki * kd), -ki * kp, //
        1.0, 0.0, 0.0, //
        0.0, 1.0, 0.0,
    );
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| -z.re)
        .fold(f64::INFINITY, f64::min)
}

fn main() {
    let grid: Vec<f64> = (1..=20).map(|k| k as f64 * 0.5).collect();
    let mut best: Option<(f64, [f64; 4])> = None;
    for &kp in &grid {
        for &ki in &grid {
            for &kd_lin in &grid {
                for &kd_ang in &grid {
                    let gains = ControllerGains::from_diagonals(
                        &[kp; 6],
                        &[kd_lin, kd_lin, kd_lin, kd_ang, kd_ang, kd_ang],
                        &[ki; 6],
                    );
                    let Ok(report) = validate_gains(&gains) else {
                        continue;
                    };
                    if !report.is_ok() {
                        continue;
                    }
                    let rate = slowest_decay(kp, kd_lin, ki).min(slowest_decay(kp, kd_ang, ki));
                    if best.is_none_or(|(r, _)| rate > r + 1e-12) {
                        best = Some((rate, [kp, kd_lin, kd_ang, ki]));
                    }
                }
            }
        }
    }
    let (rate, [kp, kd_lin, kd_ang, ki]) = best.expect("no gain set passes");
    println!("k_p = {kp}, k_d = ({kd_lin} linear, {kd_ang} angular), k_i = {ki}");
    println!("slowest pole decay rate {rate:.4} 1/s");
}
