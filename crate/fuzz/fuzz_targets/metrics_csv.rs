#![no_main]

use capture_core::harness::metrics::{read_episode_rows, reward_curve, success_curve};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_episode_rows(data) {
        let _ = reward_curve(&rows, 20);
        let _ = success_curve(&rows, 20);
    }
});
