//! Small scenes shared by unit tests.

use crate::beampattern::CovarianceSet;
use crate::fim::{crb_matrices, FimBlocks, FimOptions, PowerProfile};
use crate::scenario::Scenario;

/// One target at the first reference location, two receivers.
pub fn reference_scene() -> Scenario {
    Scenario {
        bs_position: [0.0, 0.0],
        receiver_positions: vec![[50.0, 0.0], [0.0, 50.0]],
        target_positions: vec![[289.8, 77.6]],
        target_velocities: vec![[20.0, 0.0]],
        user_positions: vec![[24.8, 283.2]],
        carrier_hz: 3e9,
        subcarrier_spacing_hz: 15e3,
        num_subcarriers: 8,
        num_tx_antennas: 8,
        num_symbols: 4,
        cp_duration_s: 4.7e-6,
        symbol_duration_s: None,
        total_power_w: 5.0,
        radar_noise_var: 1.5e-18,
        comm_noise_var: 1.5e-14,
        rcs_per_receiver: vec![0.1, 0.1],
        detection_subarea_angles: vec![[0.0, 30.0]],
    }
}

/// Reference scene with `k` subcarriers and isotropic covariances, plus
/// bounds at `factor` times the CRB of a uniform all-detection split.
pub fn toy_instance(k: usize, factor: f64) -> (Scenario, FimBlocks, f64, f64) {
    let mut sc = reference_scene();
    sc.num_subcarriers = k;
    let cov = CovarianceSet::isotropic(k, 1, sc.num_tx_antennas);
    let blocks = FimBlocks::build(&sc, &cov, FimOptions::default()).unwrap();
    let mut profile = PowerProfile::zeros(k, 1, sc.num_users());
    profile.radar.fill(sc.total_power_w / k as f64);
    let c = crb_matrices(&blocks, &profile, &[true, true]).unwrap();
    (sc, blocks, factor * c[0].max_location(), factor * c[0].max_velocity())
}
