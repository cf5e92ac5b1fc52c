#![no_main]

use libfuzzer_sys::fuzz_target;
use popflow::ingest::{read_municipalities, read_populations, to_relative, Geometry};

const MUNICIPALITIES: &str = "id,name,x_km,y_km\na,A,0,0\nb,B,3,4\nc,C,10,0\n";

fuzz_target!(|data: &[u8]| {
    let m = read_municipalities(MUNICIPALITIES.as_bytes(), Geometry::Planar).unwrap();
    if let Ok(panel) = read_populations(data, m) {
        let rel = to_relative(&panel);
        assert_eq!(rel.n_cities(), 3);
        assert!(rel.x.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
});
