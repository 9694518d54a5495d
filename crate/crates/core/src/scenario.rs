//! Geometry and RF constants of the distributed radar/communication scene.
//!
//! Indices are zero based throughout: subcarrier `k` in `0..K` has wavelength
//! `c / (f_c + k·Δf)`, targets `n`, receivers `r` and users `m` index the
//! corresponding position lists.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// A point or vector in the plane, meters (or m/s for velocities).
pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub bs_position: Point,
    pub receiver_positions: Vec<Point>,
    pub target_positions: Vec<Point>,
    pub target_velocities: Vec<Point>,
    pub user_positions: Vec<Point>,
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub num_subcarriers: usize,
    pub num_tx_antennas: usize,
    pub num_symbols: usize,
    pub cp_duration_s: f64,
    /// Optional; when present it must equal `1 / subcarrier_spacing_hz`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbol_duration_s: Option<f64>,
    pub total_power_w: f64,
    /// Noise variance of the demodulated radar samples.
    pub radar_noise_var: f64,
    pub comm_noise_var: f64,
    /// Left empty in configuration files to draw the values from the run seed.
    #[serde(default)]
    pub rcs_per_receiver: Vec<f64>,
    /// Detection subarea `[lo, hi]` intervals in degrees, one per target.
    pub detection_subarea_angles: Vec<[f64; 2]>,
}

/// Bistatic delay/Doppler of one target-receiver path and their partial
/// derivatives with respect to the target position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGeometry {
    pub delay_s: f64,
    pub doppler_hz: f64,
    pub aod_rad: f64,
    /// d tau / d(d^x, d^y), s/m.
    pub delay_grad: [f64; 2],
    /// d f / d(d^x, d^y), Hz/m.
    pub doppler_grad_pos: [f64; 2],
    /// d f / d(v^x, v^y), Hz per m/s.
    pub doppler_grad_vel: [f64; 2],
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

impl Scenario {
    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn num_targets(&self) -> usize {
        self.target_positions.len()
    }

    pub fn num_receivers(&self) -> usize {
        self.receiver_positions.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_positions.len()
    }

    /// Useful OFDM symbol period `T = 1/Δf`.
    pub fn symbol_period(&self) -> f64 {
        1.0 / self.subcarrier_spacing_hz
    }

    /// Total symbol duration including the cyclic prefix, `T_s = T + T_cp`.
    pub fn symbol_total(&self) -> f64 {
        self.symbol_period() + self.cp_duration_s
    }

    /// Carrier wavelength, used for Doppler and path loss.
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn subcarrier_wavelength(&self, k: usize) -> f64 {
        SPEED_OF_LIGHT / (self.carrier_hz + k as f64 * self.subcarrier_spacing_hz)
    }

    /// Noise variance of the continuous-time radar noise `w(t)` within the
    /// signal band (`σ_w² = K σ_w̄²`).
    pub fn radar_noise_var_continuous(&self) -> f64 {
        self.radar_noise_var * self.num_subcarriers as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScenario(msg));
        if self.num_subcarriers < 1 {
            return bad("num_subcarriers must be >= 1".into());
        }
        if self.num_tx_antennas < 2 {
            return bad("num_tx_antennas must be >= 2".into());
        }
        if self.num_symbols < 1 {
            return bad("num_symbols must be >= 1".into());
        }
        for (name, v) in [
            ("carrier_hz", self.carrier_hz),
            ("subcarrier_spacing_hz", self.subcarrier_spacing_hz),
            ("total_power_w", self.total_power_w),
            ("radar_noise_var", self.radar_noise_var),
            ("comm_noise_var", self.comm_noise_var),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.cp_duration_s.is_finite() && self.cp_duration_s >= 0.0) {
            return bad("cp_duration_s must be non-negative".into());
        }
        if let Some(t) = self.symbol_duration_s {
            let expected = self.symbol_period();
            if (t - expected).abs() > 1e-9 * expected {
                return bad(format!("symbol_duration_s = {t:e} but 1/subcarrier_spacing_hz = {expected:e}"));
            }
        }
        if self.target_velocities.len() != self.target_positions.len() {
            return bad(format!(
                "target_velocities has {} entries for {} targets",
                self.target_velocities.len(),
                self.target_positions.len()
            ));
        }
        if self.rcs_per_receiver.len() != self.receiver_positions.len() {
            return bad(format!(
                "rcs_per_receiver has {} entries for {} receivers",
                self.rcs_per_receiver.len(),
                self.receiver_positions.len()
            ));
        }
        if self.rcs_per_receiver.iter().any(|&x| !(x > 0.0)) {
            return bad("rcs_per_receiver entries must be positive".into());
        }
        if self.detection_subarea_angles.len() != self.target_positions.len() {
            return bad(format!(
                "detection_subarea_angles has {} intervals for {} targets",
                self.detection_subarea_angles.len(),
                self.target_positions.len()
            ));
        }
        let mut areas = self.detection_subarea_angles.clone();
        for &[lo, hi] in &areas {
            if !(lo < hi && lo >= -90.0 && hi <= 90.0) {
                return bad(format!("subarea [{lo}, {hi}] must satisfy -90 <= lo < hi <= 90"));
            }
        }
        areas.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for w in areas.windows(2) {
            if w[1][0] < w[0][1] {
                return bad(format!("subareas {:?} and {:?} overlap", w[0], w[1]));
            }
        }
        for n in 0..self.num_targets() {
            let aod = self.aod(n).to_degrees();
            let [lo, hi] = self.detection_subarea_angles[n];
            if aod < lo - 1e-9 || aod > hi + 1e-9 {
                return bad(format!("target {n} departs at {aod:.3} deg, outside its subarea [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    /// Angle of departure from the BS to target `n`.
    pub fn aod(&self, n: usize) -> f64 {
        angle_from(self.bs_position, self.target_positions[n])
    }

    /// Angle from the BS to communication user `m`.
    pub fn user_angle(&self, m: usize) -> f64 {
        angle_from(self.bs_position, self.user_positions[m])
    }

    pub fn steering_vector(&self, k: usize, angle: f64) -> DVector<Complex64> {
        steering_vector(self.carrier_hz, self.subcarrier_spacing_hz, k, angle, self.num_tx_antennas)
    }
}

/// Full-quadrant bearing of `to` as seen from `from`.
pub fn angle_from(from: Point, to: Point) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

/// Bistatic delay BS → target `n` → receiver `r`.
pub fn bistatic_delay(scenario: &Scenario, n: usize, r: usize) -> f64 {
    delay_at(scenario.bs_position, scenario.target_positions[n], scenario.receiver_positions[r])
}

pub(crate) fn delay_at(bs: Point, target: Point, receiver: Point) -> f64 {
    (norm(sub(bs, target)) + norm(sub(target, receiver))) / SPEED_OF_LIGHT
}

/// Bistatic Doppler shift of target `n` seen at receiver `r`.
pub fn bistatic_doppler(scenario: &Scenario, n: usize, r: usize) -> Result<f64> {
    doppler_at(
        scenario.bs_position,
        scenario.target_positions[n],
        scenario.target_velocities[n],
        scenario.receiver_positions[r],
        scenario.wavelength(),
    )
}

pub(crate) fn doppler_at(bs: Point, target: Point, velocity: Point, receiver: Point, wavelength: f64) -> Result<f64> {
    let to_bs = sub(bs, target);
    let to_rx = sub(receiver, target);
    let (d0, dr) = (norm(to_bs), norm(to_rx));
    if d0 == 0.0 || dr == 0.0 {
        return Err(Error::DegenerateGeometry("target coincides with the BS or a receiver".into()));
    }
    Ok((dot(velocity, to_bs) / d0 + dot(velocity, to_rx) / dr) / wavelength)
}

/// Uniform linear array steering vector with half-carrier-wavelength
/// spacing, evaluated at the wavelength of subcarrier `k`.
pub fn steering_vector(
    carrier_hz: f64,
    spacing_hz: f64,
    k: usize,
    angle: f64,
    num_antennas: usize,
) -> DVector<Complex64> {
    let element_spacing = SPEED_OF_LIGHT / (2.0 * carrier_hz);
    let lambda_k = SPEED_OF_LIGHT / (carrier_hz + k as f64 * spacing_hz);
    let step = -2.0 * PI * element_spacing * angle.sin() / lambda_k;
    DVector::from_fn(num_antennas, |t, _| Complex64::from_polar(1.0, step * t as f64))
}

/// Amplitude attenuation `c_{n,r}` of the BS → target → receiver path.
pub fn radar_pathloss(scenario: &Scenario, n: usize, r: usize) -> Result<f64> {
    pathloss_at(
        scenario.bs_position,
        scenario.target_positions[n],
        scenario.receiver_positions[r],
        scenario.wavelength(),
        scenario.rcs_per_receiver[r],
    )
}

pub(crate) fn pathloss_at(bs: Point, target: Point, receiver: Point, wavelength: f64, rcs: f64) -> Result<f64> {
    let d0 = norm(sub(bs, target));
    let dr = norm(sub(target, receiver));
    if d0 == 0.0 || dr == 0.0 {
        return Err(Error::DegenerateGeometry("zero path length in radar path loss".into()));
    }
    let four_pi = 4.0 * PI;
    Ok((wavelength * wavelength * rcs / (four_pi.powi(3) * d0 * d0 * dr * dr)).sqrt())
}

/// Free-space channel `h_{k,m} = a_m · a_k(γ_m)` from the BS to user `m`.
pub fn comm_channel(scenario: &Scenario, k: usize, m: usize) -> Result<DVector<Complex64>> {
    let d = norm(sub(scenario.user_positions[m], scenario.bs_position));
    if d == 0.0 {
        return Err(Error::DegenerateGeometry(format!("user {m} is collocated with the BS")));
    }
    let lambda = scenario.wavelength();
    let amplitude = lambda / (4.0 * PI * d);
    Ok(scenario.steering_vector(k, scenario.user_angle(m)) * Complex64::new(amplitude, 0.0))
}

/// Delay, Doppler and their analytic partials for target `n`, receiver `r`.
pub fn geometry_partials(scenario: &Scenario, n: usize, r: usize) -> Result<PathGeometry> {
    partials_at(
        scenario.bs_position,
        scenario.target_positions[n],
        scenario.target_velocities[n],
        scenario.receiver_positions[r],
        scenario.wavelength(),
    )
}

pub(crate) fn partials_at(
    bs: Point,
    target: Point,
    velocity: Point,
    receiver: Point,
    wavelength: f64,
) -> Result<PathGeometry> {
    let to_bs = sub(bs, target);
    let to_rx = sub(receiver, target);
    let (d0, dr) = (norm(to_bs), norm(to_rx));
    if d0 == 0.0 || dr == 0.0 {
        return Err(Error::DegenerateGeometry("target coincides with the BS or a receiver".into()));
    }
    let u0 = [to_bs[0] / d0, to_bs[1] / d0];
    let ur = [to_rx[0] / dr, to_rx[1] / dr];

    // d/dd of (p - d)/|p - d| is -(I - u u^T)/|p - d|.
    let project = |u: Point, dist: f64| -> Point {
        let vu = dot(velocity, u);
        [-(velocity[0] - u[0] * vu) / dist, -(velocity[1] - u[1] * vu) / dist]
    };
    let g0 = project(u0, d0);
    let gr = project(ur, dr);

    Ok(PathGeometry {
        delay_s: (d0 + dr) / SPEED_OF_LIGHT,
        doppler_hz: (dot(velocity, u0) + dot(velocity, ur)) / wavelength,
        aod_rad: angle_from(bs, target),
        delay_grad: [-(u0[0] + ur[0]) / SPEED_OF_LIGHT, -(u0[1] + ur[1]) / SPEED_OF_LIGHT],
        doppler_grad_pos: [(g0[0] + gr[0]) / wavelength, (g0[1] + gr[1]) / wavelength],
        doppler_grad_vel: [(u0[0] + ur[0]) / wavelength, (u0[1] + ur[1]) / wavelength],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use crate::test_scenes::reference_scene;

    #[test]
    fn delay_matches_hand_evaluation() {
        let s = reference_scene();
        // (300.00967 + 252.04325) / 299792458, evaluated by hand.
        assert_relative_eq!(bistatic_delay(&s, 0, 0), 1.841_450_3e-6, max_relative = 1e-7);
    }

    #[test]
    fn delay_degenerate_legs() {
        let mut s = reference_scene();
        s.receiver_positions[0] = s.target_positions[0];
        let d = norm(s.target_positions[0]);
        assert_relative_eq!(bistatic_delay(&s, 0, 0), d / SPEED_OF_LIGHT);

        s.target_positions[0] = [0.0, 0.0];
        s.receiver_positions[0] = [0.0, 0.0];
        assert_eq!(bistatic_delay(&s, 0, 0), 0.0);
    }

    #[test]
    fn doppler_examples() {
        let mut s = reference_scene();
        // carrier chosen so that lambda = 0.1 m exactly
        s.carrier_hz = SPEED_OF_LIGHT / 0.1;
        assert_relative_eq!(bistatic_doppler(&s, 0, 0).unwrap(), -383.478_577, max_relative = 1e-8);

        s.target_velocities[0] = [0.0, 0.0];
        assert_eq!(bistatic_doppler(&s, 0, 0).unwrap(), 0.0);

        // target on the x axis between BS and receiver, moving along y
        s.target_positions[0] = [25.0, 0.0];
        s.target_velocities[0] = [0.0, 7.0];
        assert!(bistatic_doppler(&s, 0, 0).unwrap().abs() < 1e-12);

        s.target_positions[0] = s.receiver_positions[0];
        assert!(matches!(bistatic_doppler(&s, 0, 0), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn steering_vector_examples() {
        let a = steering_vector(3e9, 15e3, 0, 0.0, 5);
        assert!(a.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-15));

        let a = steering_vector(3e9, 15e3, 0, 30f64.to_radians(), 4);
        let expected = [0.0, -PI / 2.0, -PI, -3.0 * PI / 2.0];
        for (z, phase) in a.iter().zip(expected) {
            assert!((z - Complex64::from_polar(1.0, phase)).norm() < 1e-12);
        }
    }

    #[test]
    fn pathloss_examples() {
        let mut s = reference_scene();
        s.carrier_hz = SPEED_OF_LIGHT / 0.1;
        s.target_positions[0] = [300.0, 0.0];
        s.receiver_positions[0] = [600.0, 0.0];
        // sqrt(0.01 * 0.1 / ((4 pi)^3 300^2 300^2)), evaluated by hand
        assert_relative_eq!(radar_pathloss(&s, 0, 0).unwrap(), 7.887_560_338e-9, max_relative = 1e-9);

        let base = radar_pathloss(&s, 0, 0).unwrap();
        s.receiver_positions[0] = [900.0, 0.0];
        assert_relative_eq!(radar_pathloss(&s, 0, 0).unwrap(), base / 2.0, max_relative = 1e-12);
        s.receiver_positions[0] = [600.0, 0.0];
        s.rcs_per_receiver[0] *= 4.0;
        assert_relative_eq!(radar_pathloss(&s, 0, 0).unwrap(), base * 2.0, max_relative = 1e-12);

        s.receiver_positions[0] = s.target_positions[0];
        assert!(radar_pathloss(&s, 0, 0).is_err());
    }

    #[test]
    fn comm_channel_examples() {
        let mut s = reference_scene();
        s.user_positions[0] = [200.0, 0.0];
        let h = comm_channel(&s, 3, 0).unwrap();
        let a = s.wavelength() / (4.0 * PI * 200.0);
        assert_relative_eq!(h.norm(), a * (s.num_tx_antennas as f64).sqrt(), max_relative = 1e-12);
        assert!(h.iter().all(|z| (z - Complex64::new(a, 0.0)).norm() < 1e-15 * a.max(1.0)));

        s.user_positions[0] = [400.0, 0.0];
        assert_relative_eq!(comm_channel(&s, 3, 0).unwrap().norm(), h.norm() / 2.0, max_relative = 1e-12);

        s.user_positions[0] = s.bs_position;
        assert!(comm_channel(&s, 0, 0).is_err());
    }

    #[test]
    fn stationary_target_has_zero_position_doppler_gradient() {
        let mut s = reference_scene();
        s.target_velocities[0] = [0.0, 0.0];
        let g = geometry_partials(&s, 0, 0).unwrap();
        assert_eq!(g.doppler_grad_pos, [0.0, 0.0]);
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut s = reference_scene();
        assert!(s.validate().is_ok());
        s.detection_subarea_angles[0] = [20.0, 30.0];
        assert!(s.validate().is_err());
        let mut s = reference_scene();
        s.num_tx_antennas = 1;
        assert!(s.validate().is_err());
        let mut s = reference_scene();
        s.symbol_duration_s = Some(71.7e-6);
        assert!(s.validate().is_err());
    }

    fn fd_partials(bs: Point, d: Point, v: Point, p: Point, lambda: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let (hp, hv) = (1e-3, 1e-3);
        let mut dtau = [0.0; 2];
        let mut dfd = [0.0; 2];
        let mut dfv = [0.0; 2];
        for i in 0..2 {
            let mut plus = d;
            let mut minus = d;
            plus[i] += hp;
            minus[i] -= hp;
            dtau[i] = (delay_at(bs, plus, p) - delay_at(bs, minus, p)) / (2.0 * hp);
            dfd[i] = (doppler_at(bs, plus, v, p, lambda).unwrap() - doppler_at(bs, minus, v, p, lambda).unwrap())
                / (2.0 * hp);
            let mut vp = v;
            let mut vm = v;
            vp[i] += hv;
            vm[i] -= hv;
            dfv[i] =
                (doppler_at(bs, d, vp, p, lambda).unwrap() - doppler_at(bs, d, vm, p, lambda).unwrap()) / (2.0 * hv);
        }
        (dtau, dfd, dfv)
    }

    fn close(a: f64, b: f64, scale: f64) -> bool {
        (a - b).abs() <= 1e-6 * scale
    }

    #[test]
    fn partials_match_finite_differences_reference_scene() {
        let s = reference_scene();
        let g = geometry_partials(&s, 0, 0).unwrap();
        let (dtau, dfd, dfv) = fd_partials(
            s.bs_position,
            s.target_positions[0],
            s.target_velocities[0],
            s.receiver_positions[0],
            s.wavelength(),
        );
        for i in 0..2 {
            assert_relative_eq!(g.delay_grad[i], dtau[i], max_relative = 1e-6);
            assert_relative_eq!(g.doppler_grad_pos[i], dfd[i], max_relative = 1e-6);
            assert_relative_eq!(g.doppler_grad_vel[i], dfv[i], max_relative = 1e-6);
        }
    }

    fn coord() -> impl Strategy<Value = f64> {
        -500.0..500.0f64
    }

    proptest! {
        #[test]
        fn partials_agree_with_central_differences(
            tx in coord(), ty in coord(), rx in coord(), ry in coord(),
            vx in -40.0..40.0f64, vy in -40.0..40.0f64,
        ) {
            let bs = [0.0, 0.0];
            let d = [tx, ty];
            let p = [rx, ry];
            prop_assume!(norm(d) > 20.0 && norm(sub(d, p)) > 20.0);
            let lambda = 0.1;
            let g = partials_at(bs, d, [vx, vy], p, lambda).unwrap();
            let (dtau, dfd, dfv) = fd_partials(bs, d, [vx, vy], p, lambda);
            let tau_scale = dtau[0].abs().max(dtau[1].abs());
            let fd_scale = dfd[0].abs().max(dfd[1].abs()).max(1e-9);
            let fv_scale = dfv[0].abs().max(dfv[1].abs());
            for i in 0..2 {
                prop_assert!(close(g.delay_grad[i], dtau[i], tau_scale));
                prop_assert!(close(g.doppler_grad_pos[i], dfd[i], fd_scale));
                prop_assert!(close(g.doppler_grad_vel[i], dfv[i], fv_scale));
            }
            prop_assert!(norm(g.doppler_grad_vel) <= 2.0 / lambda + 1e-12);
        }

        #[test]
        fn delay_respects_triangle_inequality(
            tx in coord(), ty in coord(), rx in coord(), ry in coord(),
        ) {
            let tau = delay_at([0.0, 0.0], [tx, ty], [rx, ry]);
            prop_assert!(tau * SPEED_OF_LIGHT >= norm([rx, ry]) * (1.0 - 1e-12));
        }

        #[test]
        fn translation_invariance(
            tx in coord(), ty in coord(), rx in coord(), ry in coord(),
            ox in coord(), oy in coord(),
        ) {
            let d = [tx, ty];
            let p = [rx, ry];
            prop_assume!(norm(d) > 1.0 && norm(sub(d, p)) > 1.0);
            let v = [12.0, -5.0];
            let a = partials_at([0.0, 0.0], d, v, p, 0.1).unwrap();
            let shift = |q: Point| [q[0] + ox, q[1] + oy];
            let b = partials_at(shift([0.0, 0.0]), shift(d), v, shift(p), 0.1).unwrap();
            let rel = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-12);
            prop_assert!(rel(a.delay_s, b.delay_s));
            prop_assert!((a.doppler_hz - b.doppler_hz).abs() <= 1e-9 * a.doppler_hz.abs().max(1.0));
            for i in 0..2 {
                prop_assert!((a.delay_grad[i] - b.delay_grad[i]).abs() <= 1e-6 / SPEED_OF_LIGHT);
                prop_assert!((a.doppler_grad_vel[i] - b.doppler_grad_vel[i]).abs() <= 1e-6);
                prop_assert!((a.doppler_grad_pos[i] - b.doppler_grad_pos[i]).abs() <= 1e-6);
            }
        }

        #[test]
        fn steering_entries_unit_modulus_and_conjugate_symmetric(
            k in 0usize..64, theta in -1.5..1.5f64,
        ) {
            let a = steering_vector(3e9, 15e3, k, theta, 16);
            let b = steering_vector(3e9, 15e3, k, -theta, 16);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x.norm() - 1.0).abs() < 1e-12);
                prop_assert!((x.conj() - y).norm() < 1e-12);
            }
        }
    }
}
