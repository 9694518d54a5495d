//! Fisher information blocks, CRB matrices of location and velocity, and a
//! finite-difference FIM used as an oracle.
//!
//! Each per-(target, receiver, subcarrier, beam) block factors into a beam
//! gain `β^H R β` times a geometric 2×2 matrix, so [`FimBlocks`] stores the
//! two parts separately.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beampattern::{pattern_gain, CovarianceSet};
use crate::error::{Error, Result};
use crate::scenario::{self, PathGeometry, Scenario};
use crate::waveform::{mrt_beamformer, Owner};

/// Whether the subcarrier and symbol indices in the information sums run
/// from 1 (`Literal`) or from 0 (`ZeroBased`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexConvention {
    #[default]
    Literal,
    ZeroBased,
}

impl IndexConvention {
    fn offset(self) -> f64 {
        match self {
            IndexConvention::Literal => 1.0,
            IndexConvention::ZeroBased => 0.0,
        }
    }

    /// `(Σ 1, Σ l, Σ l²)` over the `L` symbol indices.
    pub fn symbol_sums(self, num_symbols: usize) -> (f64, f64, f64) {
        let l = num_symbols as f64;
        match self {
            IndexConvention::Literal => (l, l * (l + 1.0) / 2.0, l * (l + 1.0) * (2.0 * l + 1.0) / 6.0),
            IndexConvention::ZeroBased => (l, (l - 1.0) * l / 2.0, (l - 1.0) * l * (2.0 * l - 1.0) / 6.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FimOptions {
    pub convention: IndexConvention,
    /// Count the echo of communication beams as detection energy.
    pub comm_illumination: bool,
}

/// Information blocks for every (n, r, k, n′), stored factored.
#[derive(Debug, Clone)]
pub struct FimBlocks {
    num_targets: usize,
    num_receivers: usize,
    num_subcarriers: usize,
    num_beams: usize,
    num_users: usize,
    options: FimOptions,
    // Indexed (n, r, k): prefactor times the geometric location matrix.
    geo_d: Vec<Matrix2<f64>>,
    // Indexed (n, r).
    geo_v: Vec<Matrix2<f64>>,
    // Indexed (n, k, n′): β_{k,n}^H R_{k,n′} β_{k,n}.
    radar_gain: Vec<f64>,
    // Indexed (n, k, m): |β_{k,n}^H ω_{k,m}|², empty unless comm illumination.
    comm_gain: Vec<f64>,
}

/// Geometric parts of D and V for one path, including the prefactor
/// `8π²|c|²/σ_w̄²` but not the beam gain.
fn geometric_blocks(
    scenario: &Scenario,
    geom: &PathGeometry,
    pathloss: f64,
    k: usize,
    convention: IndexConvention,
) -> (Matrix2<f64>, Matrix2<f64>) {
    let pre = 8.0 * PI * PI * pathloss * pathloss / scenario.radar_noise_var;
    let (s0, s1, s2) = convention.symbol_sums(scenario.num_symbols);
    let kk = k as f64 + convention.offset();
    let df = scenario.subcarrier_spacing_hz;
    let t = scenario.symbol_period();
    let tau = nalgebra::Vector2::from(geom.delay_grad);
    let fp = nalgebra::Vector2::from(geom.doppler_grad_pos);
    let fv = nalgebra::Vector2::from(geom.doppler_grad_vel);
    let cross = fp * tau.transpose();
    let d = tau * tau.transpose() * (s0 * kk * kk * df * df) - (cross + cross.transpose()) * (kk * df * t * s1)
        + fp * fp.transpose() * (t * t * s2);
    let v = fv * fv.transpose() * (t * t * s2);
    (d * pre, v * pre)
}

/// `(D, V)` for target `n`, receiver `r`, subcarrier `k` and beam `n′`.
pub fn info_blocks(
    scenario: &Scenario,
    covariances: &CovarianceSet,
    n: usize,
    r: usize,
    k: usize,
    beam: usize,
    convention: IndexConvention,
) -> Result<(Matrix2<f64>, Matrix2<f64>)> {
    let geom = scenario::geometry_partials(scenario, n, r)?;
    let c = scenario::radar_pathloss(scenario, n, r)?;
    let (d, v) = geometric_blocks(scenario, &geom, c, k, convention);
    let beta = scenario.steering_vector(k, geom.aod_rad);
    let gain = pattern_gain(&covariances.get(k, beam).r, &beta);
    Ok((d * gain, v * gain))
}

impl FimBlocks {
    pub fn build(scenario: &Scenario, covariances: &CovarianceSet, options: FimOptions) -> Result<Self> {
        let (nt, nr, nk) = (scenario.num_targets(), scenario.num_receivers(), scenario.num_subcarriers);
        let nb = covariances.num_beams();
        let nm = scenario.num_users();
        if covariances.num_subcarriers() != nk {
            return Err(Error::InvalidScenario(format!(
                "covariance set has {} subcarriers, scenario has {nk}",
                covariances.num_subcarriers()
            )));
        }
        let mut geo_d = Vec::with_capacity(nt * nr * nk);
        let mut geo_v = Vec::with_capacity(nt * nr);
        for n in 0..nt {
            for r in 0..nr {
                let geom = scenario::geometry_partials(scenario, n, r)?;
                let c = scenario::radar_pathloss(scenario, n, r)?;
                for k in 0..nk {
                    let (d, v) = geometric_blocks(scenario, &geom, c, k, options.convention);
                    geo_d.push(d);
                    if k == 0 {
                        geo_v.push(v);
                    }
                }
            }
        }
        let mut radar_gain = Vec::with_capacity(nt * nk * nb);
        let mut comm_gain = Vec::new();
        for n in 0..nt {
            let aod = scenario.aod(n);
            for k in 0..nk {
                let beta = scenario.steering_vector(k, aod);
                for b in 0..nb {
                    radar_gain.push(pattern_gain(&covariances.get(k, b).r, &beta));
                }
                if options.comm_illumination {
                    for m in 0..nm {
                        let w = mrt_beamformer(&scenario::comm_channel(scenario, k, m)?)?;
                        comm_gain.push(beta.dotc(&w).norm_sqr());
                    }
                }
            }
        }
        Ok(Self {
            num_targets: nt,
            num_receivers: nr,
            num_subcarriers: nk,
            num_beams: nb,
            num_users: nm,
            options,
            geo_d,
            geo_v,
            radar_gain,
            comm_gain,
        })
    }

    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn num_receivers(&self) -> usize {
        self.num_receivers
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn num_beams(&self) -> usize {
        self.num_beams
    }

    pub fn options(&self) -> FimOptions {
        self.options
    }

    pub fn beam_gain(&self, n: usize, k: usize, beam: usize) -> f64 {
        self.radar_gain[(n * self.num_subcarriers + k) * self.num_beams + beam]
    }

    pub fn d(&self, n: usize, r: usize, k: usize, beam: usize) -> Matrix2<f64> {
        self.geo_d[(n * self.num_receivers + r) * self.num_subcarriers + k] * self.beam_gain(n, k, beam)
    }

    pub fn v(&self, n: usize, r: usize, k: usize, beam: usize) -> Matrix2<f64> {
        self.geo_v[n * self.num_receivers + r] * self.beam_gain(n, k, beam)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    /// Information about target `n` per watt placed on subcarrier `k` for
    /// `owner`, summed over the active receivers. Zero for users unless
    /// communication illumination is enabled.
    pub fn unit_information(&self, mask: &[bool], n: usize, k: usize, owner: Owner) -> (Matrix2<f64>, Matrix2<f64>) {
        let w = match owner {
            Owner::Subarea(b) => self.beam_gain(n, k, b),
            Owner::User(m) if self.options.comm_illumination => {
                self.comm_gain[(n * self.num_subcarriers + k) * self.num_users + m]
            }
            Owner::User(_) => 0.0,
        };
        let mut d = Matrix2::zeros();
        let mut v = Matrix2::zeros();
        for (r, _) in mask.iter().enumerate().filter(|(_, on)| **on) {
            let base = n * self.num_receivers + r;
            d += self.geo_d[base * self.num_subcarriers + k] * w;
            v += self.geo_v[base] * w;
        }
        (d, v)
    }

    /// Location and velocity information of receiver `r` about target `n`
    /// under the given power profile (no receiver mask applied).
    pub fn receiver_information(&self, profile: &PowerProfile, n: usize, r: usize) -> (Matrix2<f64>, Matrix2<f64>) {
        let mut d = Matrix2::zeros();
        let mut weight_v = 0.0;
        let geo_base = (n * self.num_receivers + r) * self.num_subcarriers;
        for k in 0..self.num_subcarriers {
            let mut w = 0.0;
            for b in 0..self.num_beams {
                w += profile.radar[(k, b)] * self.beam_gain(n, k, b);
            }
            if self.options.comm_illumination {
                for m in 0..self.num_users {
                    w += profile.comm[(k, m)] * self.comm_gain[(n * self.num_subcarriers + k) * self.num_users + m];
                }
            }
            d += self.geo_d[geo_base + k] * w;
            weight_v += w;
        }
        (d, self.geo_v[n * self.num_receivers + r] * weight_v)
    }

    /// Weighted information sums for target `n` over the active receivers.
    pub fn information(&self, profile: &PowerProfile, mask: &[bool], n: usize) -> (Matrix2<f64>, Matrix2<f64>) {
        let mut d = Matrix2::zeros();
        let mut v = Matrix2::zeros();
        for (r, _) in mask.iter().enumerate().filter(|(_, on)| **on) {
            let (dr, vr) = self.receiver_information(profile, n, r);
            d += dr;
            v += vr;
        }
        (d, v)
    }
}

/// Per-subcarrier powers split across owners: `radar[(k, n′)] = p_k σ^R_{k,n′}`
/// and `comm[(k, m)] = p_k σ^C_{k,m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerProfile {
    pub radar: DMatrix<f64>,
    pub comm: DMatrix<f64>,
}

impl PowerProfile {
    pub fn zeros(num_subcarriers: usize, num_beams: usize, num_users: usize) -> Self {
        Self { radar: DMatrix::zeros(num_subcarriers, num_beams), comm: DMatrix::zeros(num_subcarriers, num_users) }
    }

    /// Binary assignment with per-subcarrier powers.
    pub fn from_assignment(assignment: &[Owner], powers: &[f64], num_beams: usize, num_users: usize) -> Self {
        let mut out = Self::zeros(assignment.len(), num_beams, num_users);
        for (k, (owner, &p)) in assignment.iter().zip(powers).enumerate() {
            match *owner {
                Owner::User(m) => out.comm[(k, m)] = p,
                Owner::Subarea(b) => out.radar[(k, b)] = p,
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { radar: &self.radar * factor, comm: &self.comm * factor }
    }

    pub fn total_radar(&self) -> f64 {
        self.radar.sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrbPair {
    pub location: Matrix2<f64>,
    pub velocity: Matrix2<f64>,
}

impl CrbPair {
    pub fn max_location(&self) -> f64 {
        self.location[(0, 0)].max(self.location[(1, 1)])
    }

    pub fn max_velocity(&self) -> f64 {
        self.velocity[(0, 0)].max(self.velocity[(1, 1)])
    }
}

/// Inverse of a 2×2 symmetric information matrix, refusing singular input.
pub fn invert_information(m: &Matrix2<f64>, target: usize, what: &str) -> Result<Matrix2<f64>> {
    let eig = SymmetricEigen::new(*m).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= hi * 1e-13 {
        return Err(Error::SingularInformation {
            target,
            diagnostic: format!("{what} information eigenvalues [{lo:e}, {hi:e}], condition {:e}", hi / lo.abs()),
        });
    }
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    Ok(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

/// Location and velocity CRB matrices per target.
pub fn crb_matrices(blocks: &FimBlocks, profile: &PowerProfile, mask: &[bool]) -> Result<Vec<CrbPair>> {
    if mask.len() != blocks.num_receivers {
        return Err(Error::InvalidScenario(format!(
            "mask has {} entries for {} receivers",
            mask.len(),
            blocks.num_receivers
        )));
    }
    if !mask.iter().any(|&s| s) {
        return Err(Error::SingularInformation { target: 0, diagnostic: "no active receiver".into() });
    }
    let illum = profile.total_radar() + if blocks.options.comm_illumination { profile.comm.sum() } else { 0.0 };
    if !(illum > 0.0) {
        return Err(Error::SingularInformation { target: 0, diagnostic: "no detection power".into() });
    }
    (0..blocks.num_targets)
        .map(|n| {
            let (d, v) = blocks.information(profile, mask, n);
            Ok(CrbPair {
                location: invert_information(&d, n, "location")?,
                velocity: invert_information(&v, n, "velocity")?,
            })
        })
        .collect()
}

/// Finite-difference steps for [`fim_numerical`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FimSteps {
    pub delay_s: f64,
    pub doppler_hz: f64,
    pub position_m: f64,
    pub velocity_mps: f64,
}

impl Default for FimSteps {
    fn default() -> Self {
        Self { delay_s: 1e-11, doppler_hz: 1e-3, position_m: 1e-3, velocity_mps: 1e-3 }
    }
}

fn central_step(x: f64, h: f64) -> Result<(f64, f64)> {
    let (hi, lo) = (x + h, x - h);
    if hi == x || lo == x || !(h > 0.0) {
        return Err(Error::StepUnderflow { step: h, scale: x.abs() });
    }
    Ok((hi, lo))
}

/// Numerical FIM over `θ = (d_1, v_1, …, d_N, v_N)`: central differences of
/// the demodulated mean with respect to every delay and Doppler, mapped
/// through a finite-difference Jacobian. The detection symbols run over the
/// `T_x` columns of the DFT matrix, whose ensemble has identity covariance,
/// and the information is averaged over that ensemble.
pub fn fim_numerical(
    scenario: &Scenario,
    covariances: &CovarianceSet,
    assignment: &[Owner],
    powers: &[f64],
    mask: &[bool],
    steps: FimSteps,
    convention: IndexConvention,
) -> Result<DMatrix<f64>> {
    let (nt, nr, nk, nl) =
        (scenario.num_targets(), scenario.num_receivers(), scenario.num_subcarriers, scenario.num_symbols);
    let tx = scenario.num_tx_antennas;
    if assignment.len() != nk || powers.len() != nk || mask.len() != nr {
        return Err(Error::InvalidScenario("assignment, powers or mask size mismatch".into()));
    }
    let df = scenario.subcarrier_spacing_hz;
    let t = scenario.symbol_period();
    let off = convention.offset();

    let mut paths = Vec::with_capacity(nt * nr);
    for n in 0..nt {
        for r in 0..nr {
            paths.push((scenario::geometry_partials(scenario, n, r)?, scenario::radar_pathloss(scenario, n, r)?));
        }
    }
    // Steering-projected transmit vectors β_{k,n}^H √p_k Ω_{k,owner}, per (n, k).
    let mut projected = Vec::with_capacity(nt * nk);
    for n in 0..nt {
        let aod = scenario.aod(n);
        for k in 0..nk {
            projected.push(match assignment[k] {
                Owner::Subarea(b) => {
                    let beta = scenario.steering_vector(k, aod);
                    Some(covariances.get(k, b).omega.adjoint() * beta * Complex64::new(powers[k].sqrt(), 0.0))
                }
                Owner::User(_) => None,
            });
        }
    }

    let np = 2 * nr;
    let mut f_phi = DMatrix::<f64>::zeros(nt * np, nt * np);
    let mean = |k: usize, l: usize, r: usize, sym: &nalgebra::DVector<Complex64>, taus: &[f64], fs: &[f64]| {
        let mut mu = Complex64::new(0.0, 0.0);
        for n in 0..nt {
            if let Some(a) = &projected[n * nk + k] {
                let (_, c) = paths[n * nr + r];
                let phase = 2.0 * PI * ((l as f64 + off) * t * fs[n] - (k as f64 + off) * df * taus[n]);
                // a holds Ω^H β, so β^H Ω b = a^H b.
                mu += a.dotc(sym) * Complex64::from_polar(c, phase);
            }
        }
        mu
    };
    let mut grad = vec![Complex64::new(0.0, 0.0); nt * np];
    for (r, _) in mask.iter().enumerate().filter(|(_, on)| **on) {
        let taus: Vec<f64> = (0..nt).map(|n| paths[n * nr + r].0.delay_s).collect();
        let fs: Vec<f64> = (0..nt).map(|n| paths[n * nr + r].0.doppler_hz).collect();
        for e in 0..tx {
            let sym = nalgebra::DVector::from_fn(tx, |i, _| {
                Complex64::from_polar(1.0, -2.0 * PI * (i * e) as f64 / tx as f64)
            });
            for k in 0..nk {
                for l in 0..nl {
                    grad.iter_mut().for_each(|g| *g = Complex64::new(0.0, 0.0));
                    for n in 0..nt {
                        let (hi, lo) = central_step(taus[n], steps.delay_s)?;
                        let mut tp = taus.clone();
                        tp[n] = hi;
                        let up = mean(k, l, r, &sym, &tp, &fs);
                        tp[n] = lo;
                        let down = mean(k, l, r, &sym, &tp, &fs);
                        grad[n * np + r] = (up - down) / (hi - lo);

                        let (hi, lo) = central_step(fs[n], steps.doppler_hz)?;
                        let mut fp = fs.clone();
                        fp[n] = hi;
                        let up = mean(k, l, r, &sym, &taus, &fp);
                        fp[n] = lo;
                        let down = mean(k, l, r, &sym, &taus, &fp);
                        grad[n * np + nr + r] = (up - down) / (hi - lo);
                    }
                    for i in 0..nt * np {
                        if grad[i] == Complex64::new(0.0, 0.0) {
                            continue;
                        }
                        for j in 0..nt * np {
                            f_phi[(i, j)] += (grad[i].conj() * grad[j]).re;
                        }
                    }
                }
            }
        }
    }
    f_phi *= 2.0 / (scenario.radar_noise_var * tx as f64);

    let jac = numerical_jacobian(scenario, steps)?;
    Ok(&jac * f_phi * jac.transpose())
}

/// Block-diagonal `∂φ/∂θ`, 4N × 2N·R_x, by central differences.
pub fn numerical_jacobian(scenario: &Scenario, steps: FimSteps) -> Result<DMatrix<f64>> {
    let (nt, nr) = (scenario.num_targets(), scenario.num_receivers());
    let lambda = scenario.wavelength();
    let bs = scenario.bs_position;
    let mut jac = DMatrix::<f64>::zeros(4 * nt, 2 * nr * nt);
    for n in 0..nt {
        let d = scenario.target_positions[n];
        let v = scenario.target_velocities[n];
        for r in 0..nr {
            let rx = scenario.receiver_positions[r];
            let col_tau = n * 2 * nr + r;
            let col_f = col_tau + nr;
            for axis in 0..2 {
                let (hi, lo) = central_step(d[axis], steps.position_m)?;
                let (mut dp, mut dm) = (d, d);
                dp[axis] = hi;
                dm[axis] = lo;
                let h = hi - lo;
                jac[(4 * n + axis, col_tau)] = (scenario::delay_at(bs, dp, rx) - scenario::delay_at(bs, dm, rx)) / h;
                jac[(4 * n + axis, col_f)] =
                    (scenario::doppler_at(bs, dp, v, rx, lambda)? - scenario::doppler_at(bs, dm, v, rx, lambda)?) / h;

                let (hi, lo) = central_step(v[axis], steps.velocity_mps)?;
                let (mut vp, mut vm) = (v, v);
                vp[axis] = hi;
                vm[axis] = lo;
                jac[(4 * n + 2 + axis, col_f)] = (scenario::doppler_at(bs, d, vp, rx, lambda)?
                    - scenario::doppler_at(bs, d, vm, rx, lambda)?)
                    / (hi - lo);
            }
        }
    }
    Ok(jac)
}

/// Write per-target CRB diagonals as CSV: `n,crb_x,crb_y,crb_vx,crb_vy`.
pub fn write_crb_csv<W: Write>(out: W, crbs: &[CrbPair]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "crb_x", "crb_y", "crb_vx", "crb_vy"])?;
    for (n, c) in crbs.iter().enumerate() {
        w.write_record([
            n.to_string(),
            format!("{:e}", c.location[(0, 0)]),
            format!("{:e}", c.location[(1, 1)]),
            format!("{:e}", c.velocity[(0, 0)]),
            format!("{:e}", c.velocity[(1, 1)]),
        ])?;
    }
    w.flush()?;
    Ok(())
}
