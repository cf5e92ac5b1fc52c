#![no_main]

use libfuzzer_sys::fuzz_target;
use popflow::simulate::SimConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = SimConfig::from_json(text) {
        // a validated config round-trips and resolves its layout
        let back = SimConfig::from_json(&cfg.to_json()).expect("round trip");
        assert_eq!(back, cfg);
        if cfg.n <= 10_000 {
            assert_eq!(cfg.resolve_positions().len(), cfg.n);
        }
    }
});
