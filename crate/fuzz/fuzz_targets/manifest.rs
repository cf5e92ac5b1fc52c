#![no_main]

use libfuzzer_sys::fuzz_target;
use popflow_cli::manifest::RunManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = RunManifest::parse(text) {
        let again = RunManifest::parse(&serde_json::to_string(&m).unwrap()).expect("round trip");
        assert_eq!(again.outputs, m.outputs);
    }
});
