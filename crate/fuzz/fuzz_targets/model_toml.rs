#![no_main]

use capture_core::robot::ManipulatorModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = ManipulatorModel::from_toml_str(text) {
        // whatever parses must survive validation and re-serialization
        let _ = model.validate();
        let again = ManipulatorModel::from_toml_str(&model.to_toml_string()).expect("round trip");
        assert_eq!(again.dof(), model.dof());
    }
});
