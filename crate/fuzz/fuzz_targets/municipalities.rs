#![no_main]

use libfuzzer_sys::fuzz_target;
use popflow::ingest::{distance_matrix, read_municipalities, Geometry};

fuzz_target!(|data: &[u8]| {
    for geometry in [Geometry::Spherical, Geometry::Planar] {
        if let Ok(m) = read_municipalities(data, geometry) {
            // accepted tables must always yield a distance matrix
            let d = distance_matrix(&m, geometry).expect("validated positions");
            assert_eq!(d.len(), m.len());
        }
    }
});
