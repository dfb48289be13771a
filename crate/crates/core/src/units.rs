//! Unit conversions. Everything inside the crate is SI: metres, seconds,
//! vehicles; speeds in m/s and wave slopes `c` in veh/s.

/// Metres per second in one km/h.
pub const KMH: f64 = 1.0 / 3.6;

/// Vehicles per second in one veh/h.
pub const VEH_PER_HOUR: f64 = 1.0 / 3600.0;

pub fn kmh_to_mps(v: f64) -> f64 {
    v * KMH
}

pub fn mps_to_kmh(v: f64) -> f64 {
    v / KMH
}

pub fn vph_to_vps(c: f64) -> f64 {
    c * VEH_PER_HOUR
}

pub fn vps_to_vph(c: f64) -> f64 {
    c / VEH_PER_HOUR
}

/// Density in veh/km from a spacing in m/veh.
pub fn spacing_to_density_vpkm(s: f64) -> f64 {
    1000.0 / s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert!((mps_to_kmh(kmh_to_mps(60.0)) - 60.0).abs() < 1e-12);
        assert!((vps_to_vph(vph_to_vps(3600.0)) - 3600.0).abs() < 1e-9);
        assert!((vph_to_vps(3600.0) - 1.0).abs() < 1e-15);
        assert!((spacing_to_density_vpkm(36.0) - 27.777_777_777_777_78).abs() < 1e-9);
    }
}
