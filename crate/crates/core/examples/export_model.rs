//! Writes the default arm definition as TOML to stdout.
use capture_core::robot::ManipulatorModel;

fn main() {
    println!(
        "# 7-DOF LBR iiwa-like arm on a 1 m cubic base. Link lengths, masses and\n\
         # inertias are approximations, not vendor data.\n{}",
        ManipulatorModel::kuka_iiwa_like().to_toml_string()
    );
}
