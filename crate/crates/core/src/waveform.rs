//! OFDM symbol synthesis, radar echo simulation and per-subcarrier
//! demodulation.
//!
//! Time is measured from the start of the useful part of the first data
//! symbol. Data symbol `l` (zero based) spans `[l·T_s - T_cp, l·T_s + T)`,
//! and its demodulation window is `[l·T_s, l·T_s + T]`. One extra preamble
//! symbol carrying the detection seeds precedes the data, so that delays
//! beyond the cyclic prefix see a well defined previous symbol.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::beampattern::CovarianceSet;
use crate::error::{Error, Result};
use crate::scenario::{comm_channel, Scenario};

/// Owner of one subcarrier: a communication user or a detection subarea.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    User(usize),
    Subarea(usize),
}

/// Detection symbol vectors `b_{k,n,l}` for `l` in `0..L`, plus the seeds
/// sent in the preamble.
#[derive(Debug, Clone)]
pub struct DetectionSequences {
    num_beams: usize,
    num_symbols: usize,
    // Per (k, n): seed followed by the L data symbols.
    data: Vec<DVector<Complex64>>,
}

impl DetectionSequences {
    fn slot(&self, k: usize, n: usize, j: usize) -> usize {
        (k * self.num_beams + n) * (self.num_symbols + 1) + j
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    pub fn seed(&self, k: usize, n: usize) -> &DVector<Complex64> {
        &self.data[self.slot(k, n, 0)]
    }

    pub fn get(&self, k: usize, n: usize, l: usize) -> &DVector<Complex64> {
        &self.data[self.slot(k, n, l + 1)]
    }
}

/// Unit-modulus random seeds, one `T_x` vector per (subcarrier, subarea),
/// laid out as `k·N + n`.
pub fn random_seeds<R: Rng + ?Sized>(
    num_subcarriers: usize,
    num_beams: usize,
    num_antennas: usize,
    rng: &mut R,
) -> Vec<DVector<Complex64>> {
    (0..num_subcarriers * num_beams)
        .map(|_| DVector::from_fn(num_antennas, |_, _| Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI))))
        .collect()
}

/// Cyclic-prefix extension sequences: every symbol is the previous one
/// rotated by `e^{j2π k Δf T_s}`, starting from the seeds.
pub fn make_detection_sequences(
    seeds: &[DVector<Complex64>],
    num_subcarriers: usize,
    num_beams: usize,
    num_symbols: usize,
    spacing_hz: f64,
    symbol_total_s: f64,
) -> DetectionSequences {
    assert_eq!(seeds.len(), num_subcarriers * num_beams);
    let mut data = Vec::with_capacity(seeds.len() * (num_symbols + 1));
    for k in 0..num_subcarriers {
        let rot = Complex64::from_polar(1.0, 2.0 * PI * k as f64 * spacing_hz * symbol_total_s);
        for n in 0..num_beams {
            let mut b = seeds[k * num_beams + n].clone();
            data.push(b.clone());
            for _ in 0..num_symbols {
                b *= rot;
                data.push(b.clone());
            }
        }
    }
    DetectionSequences { num_beams, num_symbols, data }
}

/// Independent unit-modulus symbols for every (k, n, l), seeds included.
pub fn independent_sequences<R: Rng + ?Sized>(
    num_subcarriers: usize,
    num_beams: usize,
    num_symbols: usize,
    num_antennas: usize,
    rng: &mut R,
) -> DetectionSequences {
    let data = random_seeds(num_subcarriers * (num_symbols + 1), num_beams, num_antennas, rng);
    // random_seeds lays vectors out contiguously; regroup per (k, n).
    let mut grouped = Vec::with_capacity(data.len());
    for k in 0..num_subcarriers {
        for n in 0..num_beams {
            for j in 0..=num_symbols {
                grouped.push(data[(k * (num_symbols + 1) + j) * num_beams + n].clone());
            }
        }
    }
    DetectionSequences { num_beams, num_symbols, data: grouped }
}

/// Unit-modulus QPSK symbols, `K × (L+1)` (preamble column first).
pub fn qpsk_symbols<R: Rng + ?Sized>(num_subcarriers: usize, num_symbols: usize, rng: &mut R) -> Vec<Vec<Complex64>> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0..num_subcarriers)
        .map(|_| {
            (0..=num_symbols)
                .map(|_| {
                    let re = if rng.random::<bool>() { s } else { -s };
                    let im = if rng.random::<bool>() { s } else { -s };
                    Complex64::new(re, im)
                })
                .collect()
        })
        .collect()
}

/// Everything transmitted on the subcarrier grid.
#[derive(Debug, Clone)]
pub struct SymbolGrid {
    /// Per subcarrier, preamble first then the L data symbols.
    pub comm_symbols: Vec<Vec<Complex64>>,
    pub detect_symbols: DetectionSequences,
    pub assignment: Vec<Owner>,
    /// Per-subcarrier power `p_k`, watts.
    pub powers: Vec<f64>,
}

impl SymbolGrid {
    pub fn num_subcarriers(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_symbols(&self) -> usize {
        self.detect_symbols.num_symbols()
    }

    fn check(&self, scenario: &Scenario) -> Result<()> {
        let k = scenario.num_subcarriers;
        if self.assignment.len() != k || self.powers.len() != k || self.comm_symbols.len() != k {
            return Err(Error::InvalidScenario(format!(
                "symbol grid covers {} subcarriers, scenario has {k}",
                self.assignment.len()
            )));
        }
        for owner in &self.assignment {
            let ok = match *owner {
                Owner::User(m) => m < scenario.num_users(),
                Owner::Subarea(n) => n < scenario.detection_subarea_angles.len(),
            };
            if !ok {
                return Err(Error::InvalidScenario(format!("unknown subcarrier owner {owner:?}")));
            }
        }
        if self.powers.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidScenario("subcarrier powers must be >= 0".into()));
        }
        Ok(())
    }
}

/// Grid with cyclic-prefix extension detection sequences and QPSK data.
pub fn cp_extension_grid<R: Rng + ?Sized>(
    scenario: &Scenario,
    assignment: Vec<Owner>,
    powers: Vec<f64>,
    rng: &mut R,
) -> SymbolGrid {
    let k = scenario.num_subcarriers;
    let beams = scenario.detection_subarea_angles.len();
    let seeds = random_seeds(k, beams, scenario.num_tx_antennas, rng);
    let detect_symbols = make_detection_sequences(
        &seeds,
        k,
        beams,
        scenario.num_symbols,
        scenario.subcarrier_spacing_hz,
        scenario.symbol_total(),
    );
    SymbolGrid { comm_symbols: qpsk_symbols(k, scenario.num_symbols, rng), detect_symbols, assignment, powers }
}

/// Maximum ratio transmission beamformer `h / |h|`.
pub fn mrt_beamformer(h: &DVector<Complex64>) -> Result<DVector<Complex64>> {
    let nrm = h.norm();
    if nrm == 0.0 {
        return Err(Error::DegenerateGeometry("zero channel has no MRT beamformer".into()));
    }
    Ok(h / Complex64::new(nrm, 0.0))
}

/// Achievable rate `log2(1 + |h|² p / σ_z²)` in bits/s/Hz.
pub fn comm_rate(h: &DVector<Complex64>, power: f64, noise_var: f64) -> f64 {
    (h.norm_squared() * power / noise_var).ln_1p() / std::f64::consts::LN_2
}

/// Transmitted vectors `s_{k,j}` for symbol slot `j` (0 is the preamble).
fn transmit_vectors(
    scenario: &Scenario,
    grid: &SymbolGrid,
    covariances: &CovarianceSet,
    radar_only: bool,
) -> Result<Vec<Vec<DVector<Complex64>>>> {
    let tx = scenario.num_tx_antennas;
    let l_count = grid.num_symbols();
    let mut out = Vec::with_capacity(grid.num_subcarriers());
    for k in 0..grid.num_subcarriers() {
        let amp = Complex64::new(grid.powers[k].sqrt(), 0.0);
        let row = match grid.assignment[k] {
            Owner::User(m) => {
                if radar_only {
                    vec![DVector::zeros(tx); l_count + 1]
                } else {
                    let w = mrt_beamformer(&comm_channel(scenario, k, m)?)? * amp;
                    grid.comm_symbols[k].iter().map(|b| &w * *b).collect()
                }
            }
            Owner::Subarea(n) => {
                let omega = &covariances.get(k, n).omega;
                let mut row = vec![omega * grid.detect_symbols.seed(k, n) * amp];
                for l in 0..l_count {
                    row.push(omega * grid.detect_symbols.get(k, n, l) * amp);
                }
                row
            }
        };
        out.push(row);
    }
    Ok(out)
}

/// Baseband transmit waveform (`T_x × len(t)`), evaluated at the given
/// sample times. Times outside every symbol are zero.
pub fn synthesize_baseband(
    scenario: &Scenario,
    grid: &SymbolGrid,
    covariances: &CovarianceSet,
    t_samples: &[f64],
) -> Result<nalgebra::DMatrix<Complex64>> {
    grid.check(scenario)?;
    let nyquist = 1.0 / (scenario.num_subcarriers as f64 * scenario.subcarrier_spacing_hz);
    for w in t_samples.windows(2) {
        let spacing = w[1] - w[0];
        if spacing > nyquist * (1.0 + 1e-12) {
            return Err(Error::Undersampled { spacing_s: spacing, nyquist_s: nyquist });
        }
    }
    let vectors = transmit_vectors(scenario, grid, covariances, false)?;
    let ts = scenario.symbol_total();
    let t_period = scenario.symbol_period();
    let tcp = scenario.cp_duration_s;
    let df = scenario.subcarrier_spacing_hz;
    let mut out = nalgebra::DMatrix::<Complex64>::zeros(scenario.num_tx_antennas, t_samples.len());
    for (i, &t) in t_samples.iter().enumerate() {
        // Symbol slot j covers [(j-1)T_s - T_cp, (j-1)T_s + T).
        let j = ((t + ts + tcp) / ts).floor();
        if j < 0.0 || j as usize > grid.num_symbols() {
            continue;
        }
        let j = j as usize;
        let local = t - (j as f64 - 1.0) * ts;
        if local >= t_period {
            continue;
        }
        let mut col = out.column_mut(i);
        for (k, row) in vectors.iter().enumerate() {
            let phase = Complex64::from_polar(1.0, 2.0 * PI * k as f64 * df * local);
            col.axpy(phase, &row[j], Complex64::new(1.0, 0.0));
        }
    }
    Ok(out)
}

/// Sampled echo at one receiver, stored per demodulation window.
#[derive(Debug, Clone)]
pub struct EchoSignal {
    /// Sample spacing inside a window, `T / N_s`.
    pub dt: f64,
    pub symbol_total_s: f64,
    /// Window `l` holds `N_s + 1` samples of `y(l·T_s + i·dt)`.
    pub windows: Vec<Vec<Complex64>>,
}

impl EchoSignal {
    pub fn samples_per_window(&self) -> usize {
        self.windows.first().map_or(0, |w| w.len() - 1)
    }
}

/// Noise options for [`simulate_echo`].
pub struct EchoNoise<'a, R: Rng + ?Sized> {
    pub rng: &'a mut R,
}

/// Simulate the baseband echo at receiver `r`: delayed, Doppler-rotated,
/// beamformed detection subcarriers of every target, plus white noise with
/// in-band variance `K σ_w̄²` when `noise` is given. `active = false` closes
/// the receiver gate and leaves noise only.
pub fn simulate_echo<R: Rng + ?Sized>(
    scenario: &Scenario,
    grid: &SymbolGrid,
    covariances: &CovarianceSet,
    r: usize,
    active: bool,
    oversample: usize,
    noise: Option<EchoNoise<'_, R>>,
) -> Result<EchoSignal> {
    grid.check(scenario)?;
    if oversample == 0 {
        return Err(Error::InvalidScenario("oversampling factor must be >= 1".into()));
    }
    let k_count = scenario.num_subcarriers;
    let ns = oversample * k_count;
    let t_period = scenario.symbol_period();
    let ts = scenario.symbol_total();
    let tcp = scenario.cp_duration_s;
    let df = scenario.subcarrier_spacing_hz;
    let dt = t_period / ns as f64;
    let l_count = grid.num_symbols();

    struct Path {
        delay: f64,
        doppler: f64,
        // beta^H s_{k,j} times the path loss, per (k, slot j).
        amps: Vec<Vec<Complex64>>,
    }
    let mut paths = Vec::new();
    if active {
        let vectors = transmit_vectors(scenario, grid, covariances, true)?;
        let limit = ts + tcp;
        for n in 0..scenario.num_targets() {
            let geom = crate::scenario::geometry_partials(scenario, n, r)?;
            if geom.delay_s > limit {
                return Err(Error::DelayExceedsWindow { delay_s: geom.delay_s, limit_s: limit });
            }
            let loss = crate::scenario::radar_pathloss(scenario, n, r)?;
            let aod = scenario.aod(n);
            let amps = (0..k_count)
                .map(|k| {
                    let beta = scenario.steering_vector(k, aod);
                    vectors[k].iter().map(|s| beta.dotc(s) * loss).collect()
                })
                .collect();
            paths.push(Path { delay: geom.delay_s, doppler: geom.doppler_hz, amps });
        }
    }

    let sigma2 = scenario.radar_noise_var_continuous() * oversample as f64;
    let mut rng = noise.map(|n| n.rng);
    let mut windows = Vec::with_capacity(l_count);
    for l in 0..l_count {
        let mut w = Vec::with_capacity(ns + 1);
        for i in 0..=ns {
            let t = l as f64 * ts + i as f64 * dt;
            let mut y = Complex64::new(0.0, 0.0);
            for p in &paths {
                let te = t - p.delay;
                let j = ((te + ts + tcp) / ts).floor();
                if j < 0.0 || j as usize > l_count {
                    continue;
                }
                let j = j as usize;
                let local = te - (j as f64 - 1.0) * ts;
                if local >= t_period {
                    continue;
                }
                let doppler = Complex64::from_polar(1.0, 2.0 * PI * p.doppler * t);
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, amps) in p.amps.iter().enumerate() {
                    acc += amps[j] * Complex64::from_polar(1.0, 2.0 * PI * k as f64 * df * local);
                }
                y += doppler * acc;
            }
            if let Some(rng) = rng.as_deref_mut() {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                y += Complex64::new(re, im) * (sigma2 / 2.0).sqrt();
            }
            w.push(y);
        }
        windows.push(w);
    }
    Ok(EchoSignal { dt, symbol_total_s: ts, windows })
}

/// `(1/T) ∫_0^T y(t + l·T_s) e^{-j2π k Δf t} dt` by the trapezoid rule on
/// the window samples. The rule is exact for tones periodic in `T`.
pub fn demodulate(echo: &EchoSignal, k: usize, l: usize, spacing_hz: f64) -> Result<Complex64> {
    let w = echo.windows.get(l).ok_or(Error::WindowOutOfRange { symbol: l, available: echo.windows.len() })?;
    let ns = w.len() - 1;
    let step = -2.0 * PI * k as f64 * spacing_hz * echo.dt;
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, y) in w.iter().enumerate() {
        let weight = if i == 0 || i == ns { 0.5 } else { 1.0 };
        acc += y * Complex64::from_polar(weight, step * i as f64);
    }
    Ok(acc / ns as f64)
}

/// Closed-form demodulated value without interference: per target,
/// `c e^{j2π f l T_s} e^{-j2π k Δf τ} β^H s_{k,l}`. Doppler is treated as a
/// constant phase within each symbol.
pub fn expected_demod(
    scenario: &Scenario,
    grid: &SymbolGrid,
    covariances: &CovarianceSet,
    r: usize,
    k: usize,
    l: usize,
) -> Result<Complex64> {
    let Owner::Subarea(owner) = grid.assignment[k] else {
        return Ok(Complex64::new(0.0, 0.0));
    };
    let s = covariances.get(k, owner).omega.clone()
        * grid.detect_symbols.get(k, owner, l)
        * Complex64::new(grid.powers[k].sqrt(), 0.0);
    let ts = scenario.symbol_total();
    let df = scenario.subcarrier_spacing_hz;
    let mut total = Complex64::new(0.0, 0.0);
    for n in 0..scenario.num_targets() {
        let geom = crate::scenario::geometry_partials(scenario, n, r)?;
        let loss = crate::scenario::radar_pathloss(scenario, n, r)?;
        let beta = scenario.steering_vector(k, scenario.aod(n));
        let phase = 2.0 * PI * (geom.doppler_hz * l as f64 * ts - k as f64 * df * geom.delay_s);
        total += beta.dotc(&s) * Complex64::from_polar(loss, phase);
    }
    Ok(total)
}

/// Demodulated grid minus the closed form, per (k, l).
#[derive(Debug, Clone)]
pub struct IciReport {
    /// `|demodulated - closed form|`, indexed `[k][l]`.
    pub residual: Vec<Vec<f64>>,
    /// Largest closed-form magnitude, used to normalize.
    pub reference: f64,
}

impl IciReport {
    pub fn max_relative(&self) -> f64 {
        let worst = self.residual.iter().flatten().cloned().fold(0.0, f64::max);
        worst / self.reference
    }
}

/// Noise-free interference check at receiver `r`.
pub fn ici_residual(
    scenario: &Scenario,
    grid: &SymbolGrid,
    covariances: &CovarianceSet,
    r: usize,
    oversample: usize,
) -> Result<IciReport> {
    let echo = simulate_echo::<rand::rngs::ThreadRng>(scenario, grid, covariances, r, true, oversample, None)?;
    let mut residual = vec![vec![0.0; grid.num_symbols()]; scenario.num_subcarriers];
    let mut reference: f64 = 0.0;
    for (k, row) in residual.iter_mut().enumerate() {
        for (l, cell) in row.iter_mut().enumerate() {
            let got = demodulate(&echo, k, l, scenario.subcarrier_spacing_hz)?;
            let want = expected_demod(scenario, grid, covariances, r, k, l)?;
            *cell = (got - want).norm();
            reference = reference.max(want.norm());
        }
    }
    Ok(IciReport { residual, reference })
}

/// Write demodulated values as CSV rows `r,k,l,re,im`.
pub fn write_demod_csv<W: Write>(
    out: W,
    rows: impl IntoIterator<Item = (usize, usize, usize, Complex64)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["r", "k", "l", "re", "im"])?;
    for (r, k, l, z) in rows {
        w.write_record([r.to_string(), k.to_string(), l.to_string(), format!("{:e}", z.re), format!("{:e}", z.im)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_scenes::reference_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sequences_rotate_by_the_cp_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seeds = random_seeds(4, 1, 2, &mut rng);
        let ts = 76.4e-6;
        let seq = make_detection_sequences(&seeds, 4, 1, 3, 15e3, ts);
        // Hand-evaluated phase increment per symbol, 2π k Δf T_s mod 2π.
        let table = [0.0, 7.2005, 14.4011, 21.6016];
        for (k, want) in table.into_iter().enumerate() {
            let inc = 2.0 * PI * k as f64 * 15e3 * ts;
            assert!((inc - want).abs() < 1e-3);
            let mut prev = seq.seed(k, 0).clone();
            for l in 0..3 {
                let cur = seq.get(k, 0, l);
                let expect = &prev * Complex64::from_polar(1.0, inc);
                assert!((cur - &expect).norm() < 1e-12);
                prev = cur.clone();
            }
        }
        // k = 0 never rotates.
        assert!((seq.get(0, 0, 2) - seq.seed(0, 0)).norm() < 1e-15);
    }

    #[test]
    fn integer_turns_give_constant_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seeds = random_seeds(3, 1, 2, &mut rng);
        // Δf T_s = 1 makes every increment a whole number of turns.
        let seq = make_detection_sequences(&seeds, 3, 1, 4, 15e3, 1.0 / 15e3);
        for k in 0..3 {
            assert!((seq.get(k, 0, 3) - seq.seed(k, 0)).norm() < 1e-9);
        }
    }

    fn one_target_scene(delay_target: [f64; 2], cp: f64) -> Scenario {
        let mut s = reference_scene();
        s.num_subcarriers = 16;
        s.num_symbols = 8;
        s.cp_duration_s = cp;
        s.target_positions = vec![delay_target];
        s.target_velocities = vec![[0.0, 0.0]];
        s
    }

    fn radar_grid(s: &Scenario, seed: u64, cp_extension: bool) -> SymbolGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = s.num_subcarriers;
        let mut grid = cp_extension_grid(s, vec![Owner::Subarea(0); k], vec![1.0; k], &mut rng);
        if !cp_extension {
            grid.detect_symbols = independent_sequences(k, 1, s.num_symbols, s.num_tx_antennas, &mut rng);
        }
        grid
    }

    #[test]
    fn tones_are_orthogonal_after_demodulation() {
        let echo_for = |kp: usize| {
            let ns = 8 * 16;
            let dt = (1.0 / 15e3) / ns as f64;
            let w: Vec<Complex64> =
                (0..=ns).map(|i| Complex64::from_polar(1.0, 2.0 * PI * kp as f64 * 15e3 * i as f64 * dt)).collect();
            EchoSignal { dt, symbol_total_s: 1.0 / 15e3, windows: vec![w] }
        };
        for kp in 0..16 {
            let echo = echo_for(kp);
            for k in 0..16 {
                let v = demodulate(&echo, k, 0, 15e3).unwrap();
                if k == kp {
                    assert!((v - 1.0).norm() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-8);
                }
            }
        }
        assert!(matches!(demodulate(&echo_for(0), 0, 1, 15e3), Err(Error::WindowOutOfRange { .. })));
    }

    #[test]
    fn short_delay_reproduces_closed_form() {
        let s = one_target_scene([289.8, 77.6], 4.7e-6);
        let covs = CovarianceSet::isotropic(16, 1, 8);
        for cp_ext in [true, false] {
            let report = ici_residual(&s, &radar_grid(&s, 5, cp_ext), &covs, 0, 8).unwrap();
            assert!(report.max_relative() < 1e-9, "{}", report.max_relative());
        }
    }

    #[test]
    fn long_delay_needs_cp_extension() {
        // tau about 3.7 us against a 1 us prefix.
        let s = one_target_scene([550.0, 147.0], 1e-6);
        let covs = CovarianceSet::isotropic(16, 1, 8);
        let tau = crate::scenario::bistatic_delay(&s, 0, 0);
        assert!(tau > s.cp_duration_s && tau < s.cp_duration_s + s.symbol_period());
        let ext = ici_residual(&s, &radar_grid(&s, 6, true), &covs, 0, 8).unwrap();
        assert!(ext.max_relative() < 1e-9);
        let rnd = ici_residual(&s, &radar_grid(&s, 6, false), &covs, 0, 8).unwrap();
        assert!(rnd.max_relative() > 1e-2);
    }

    #[test]
    fn closed_gate_and_empty_scene_give_noise_only() {
        let s = one_target_scene([289.8, 77.6], 4.7e-6);
        let covs = CovarianceSet::isotropic(16, 1, 8);
        let grid = radar_grid(&s, 7, true);
        let silent = simulate_echo::<ChaCha8Rng>(&s, &grid, &covs, 0, false, 4, None).unwrap();
        assert!(silent.windows.iter().flatten().all(|z| z.norm() == 0.0));
        let mut empty = s.clone();
        empty.target_positions.clear();
        empty.target_velocities.clear();
        let e = simulate_echo::<ChaCha8Rng>(&empty, &grid, &covs, 0, true, 4, None).unwrap();
        assert!(e.windows.iter().flatten().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn delay_beyond_preamble_is_rejected() {
        let s = one_target_scene([30_000.0, 8_000.0], 1e-6);
        let covs = CovarianceSet::isotropic(16, 1, 8);
        let grid = radar_grid(&s, 8, true);
        let err = simulate_echo::<ChaCha8Rng>(&s, &grid, &covs, 0, true, 2, None).unwrap_err();
        assert!(matches!(err, Error::DelayExceedsWindow { .. }));
    }

    #[test]
    fn doppler_residual_stays_near_the_constant_phase_floor() {
        let mut s = one_target_scene([550.0, 147.0], 1e-6);
        s.target_velocities = vec![[20.0, 0.0]];
        let covs = CovarianceSet::isotropic(16, 1, 8);
        let report = ici_residual(&s, &radar_grid(&s, 9, true), &covs, 0, 8).unwrap();
        let fd = crate::scenario::bistatic_doppler(&s, 0, 0).unwrap().abs();
        // The within-symbol phase drift is at most 2π f_D T.
        assert!(report.max_relative() < 2.0 * PI * fd * s.symbol_period() * 4.0);
    }

    #[test]
    fn noise_variance_after_demodulation() {
        let s = one_target_scene([289.8, 77.6], 4.7e-6);
        let covs = CovarianceSet::isotropic(16, 1, 8);
        let grid = radar_grid(&s, 10, true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut acc = 0.0;
        let trials = 10_000;
        let mut done = 0;
        while done < trials {
            let echo = simulate_echo(&s, &grid, &covs, 0, false, 8, Some(EchoNoise { rng: &mut rng })).unwrap();
            for l in 0..echo.windows.len() {
                acc += demodulate(&echo, 3, l, s.subcarrier_spacing_hz).unwrap().norm_sqr();
                done += 1;
            }
        }
        let var = acc / done as f64;
        assert!((var / s.radar_noise_var - 1.0).abs() < 0.05, "{var:e}");
    }

    #[test]
    fn synthesis_energy_and_power_scaling() {
        let mut s = one_target_scene([289.8, 77.6], 4.7e-6);
        s.num_subcarriers = 4;
        let covs = CovarianceSet::isotropic(4, 1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let assign = vec![Owner::User(0), Owner::Subarea(0), Owner::User(0), Owner::Subarea(0)];
        let powers = vec![0.5, 1.0, 2.0, 0.25];
        let grid = cp_extension_grid(&s, assign.clone(), powers.clone(), &mut rng);
        let ns = 64;
        let t_sym = s.symbol_period();
        let l = 2;
        let times: Vec<f64> = (0..ns).map(|i| l as f64 * s.symbol_total() + i as f64 * t_sym / ns as f64).collect();
        let x = synthesize_baseband(&s, &grid, &covs, &times).unwrap();
        let discrete: f64 = x.iter().map(|z| z.norm_sqr()).sum::<f64>() / ns as f64;
        let vectors = transmit_vectors(&s, &grid, &covs, false).unwrap();
        let expected: f64 = vectors.iter().map(|row| row[l + 1].norm_squared()).sum();
        assert!((discrete - expected).abs() <= 1e-9 * expected);

        let mut louder = grid.clone();
        louder.powers[1] *= 4.0;
        let only_k1 = |g: &SymbolGrid| {
            let mut g = g.clone();
            for k in [0, 2, 3] {
                g.powers[k] = 0.0;
            }
            synthesize_baseband(&s, &g, &covs, &times[..4]).unwrap()
        };
        let a = only_k1(&grid);
        let b = only_k1(&louder);
        assert!((&b - &a * Complex64::new(2.0, 0.0)).norm() < 1e-12);

        let coarse: Vec<f64> = (0..4).map(|i| i as f64 * t_sym / 2.0).collect();
        assert!(matches!(synthesize_baseband(&s, &grid, &covs, &coarse), Err(Error::Undersampled { .. })));
    }

    #[test]
    fn single_tone_on_first_antenna() {
        let mut s = one_target_scene([289.8, 77.6], 4.7e-6);
        s.num_subcarriers = 1;
        let mut covs_r = nalgebra::DMatrix::<Complex64>::zeros(8, 8);
        covs_r[(0, 0)] = Complex64::new(1.0, 0.0);
        let entry = crate::beampattern::CovarianceEntry {
            omega: covs_r.clone(),
            r: covs_r,
            scale: 1.0,
            objective_value: 0.0,
            objective_history: vec![],
            iterations: 0,
            converged: true,
        };
        let covs = CovarianceSet::from_entries(1, 1, vec![entry]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = cp_extension_grid(&s, vec![Owner::Subarea(0)], vec![1.0], &mut rng);
        let times: Vec<f64> = (0..16).map(|i| i as f64 * 1e-6).collect();
        let x = synthesize_baseband(&s, &grid, &covs, &times).unwrap();
        for i in 0..16 {
            assert!((x[(0, i)].norm() - 1.0).abs() < 1e-12);
            for t in 1..8 {
                assert_eq!(x[(t, i)].norm(), 0.0);
            }
        }
    }

    #[test]
    fn mrt_and_rate() {
        let e1 = DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
        assert_eq!(mrt_beamformer(&e1).unwrap(), e1);
        assert!(mrt_beamformer(&DVector::zeros(2)).is_err());
        let h = DVector::from_vec(vec![Complex64::new(0.3, -1.2), Complex64::new(2.0, 0.5)]);
        let w = mrt_beamformer(&h).unwrap();
        assert!((w.norm() - 1.0).abs() < 1e-15);
        assert!((h.dotc(&w) - Complex64::new(h.norm(), 0.0)).norm() < 1e-12);

        let unit = DVector::from_vec(vec![Complex64::new(1.0, 0.0)]);
        assert_eq!(comm_rate(&unit, 0.0, 1.0), 0.0);
        assert!((comm_rate(&unit, 1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((comm_rate(&unit, 3.0, 1.0) - 2.0).abs() < 1e-15);
        let rates: Vec<f64> = (0..50).map(|i| comm_rate(&h, i as f64 * 0.1, 0.7)).collect();
        for w in rates.windows(3) {
            assert!(w[1] >= w[0]);
            assert!(w[2] - 2.0 * w[1] + w[0] <= 1e-12);
        }
    }

    #[test]
    fn demod_csv_round_trip() {
        let mut buf = Vec::new();
        write_demod_csv(&mut buf, [(0, 1, 2, Complex64::new(0.5, -0.25))]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "r,k,l,re,im\n0,1,2,5e-1,-2.5e-1\n");
    }
}
