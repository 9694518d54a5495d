//! Run configuration, the allocation/selection alternation and the
//! experiment drivers (tradeoff sweeps and CRB maps) with their CSV outputs.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{worst_diagonals, Allocation, AllocationInstance, PenaltySchedule};
use crate::beampattern::{design_covariance_set, CovarianceSet, DesignSettings};
use crate::conic::SolverSettings;
use crate::error::{Error, Result};
use crate::fim::{crb_matrices, CrbPair, FimBlocks, FimOptions, IndexConvention};
use crate::scenario::{Point, Scenario};
use crate::selection::{Quantity, ReceiverMask, SelectionInstance};

/// Range of the uniformly drawn radar cross sections, m².
pub const RCS_RANGE: (f64, f64) = (0.09, 0.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Fitted wide beams over each detection subarea.
    #[default]
    Designed,
    /// `I / T_x` on every detection subcarrier.
    Isotropic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub fim_convention: IndexConvention,
    pub comm_illumination: bool,
    pub covariance: CovarianceMode,
    pub beampattern_samples: usize,
    pub beampattern_tol: f64,
    pub beampattern_max_iter: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let d = DesignSettings::default();
        Self {
            fim_convention: IndexConvention::default(),
            comm_illumination: false,
            covariance: CovarianceMode::default(),
            beampattern_samples: d.num_samples,
            beampattern_tol: d.tol,
            beampattern_max_iter: d.max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub schedule: PenaltySchedule,
    /// Absolute bracket width at which receiver-selection bisection stops.
    pub bisection_eps: f64,
    pub max_alternations: usize,
    /// Relative rate gain below which the alternation stops.
    pub rate_rel_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            tol: s.tol,
            max_iter: s.max_iter,
            schedule: PenaltySchedule::default(),
            bisection_eps: 1e-3,
            max_alternations: 10,
            rate_rel_tol: 1e-4,
        }
    }
}

impl SolverConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings { tol: self.tol, max_iter: self.max_iter, ..SolverSettings::default() }
    }
}

/// Which CRB the receiver selection minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    MinimizeD,
    MinimizeV,
}

impl Objective {
    pub fn quantity(self) -> Quantity {
        match self {
            Objective::MinimizeD => Quantity::Location,
            Objective::MinimizeV => Quantity::Velocity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    /// Half side of the square sampled around each target, m.
    pub half_width_m: f64,
    /// Samples per side; odd counts include the true position.
    pub points: usize,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self { half_width_m: 20.0, points: 41 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub objective: Objective,
    /// Location CRB bound, m².
    pub eta_d: f64,
    /// Velocity CRB bound, (m/s)².
    pub eta_v: f64,
    pub num_selected: usize,
    /// Values taken by the bound named in `sweep_bound`.
    pub sweep: Vec<f64>,
    pub sweep_bound: Quantity,
    /// Skip receiver selection in sweeps.
    pub allocation_only: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub heatmap: HeatmapConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            objective: Objective::default(),
            eta_d: 1.0,
            eta_v: 1.0,
            num_selected: 1,
            sweep: Vec::new(),
            sweep_bound: Quantity::Location,
            allocation_only: false,
            seed: 0,
            output_dir: PathBuf::from("out"),
            heatmap: HeatmapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// `builtin:<name>` selects a shipped configuration, anything else is a
    /// file path.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec.strip_prefix("builtin:") {
            Some(name) => builtin(name),
            None => Self::load(Path::new(spec)),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario().and_then(|s| s.validate()).map_err(|e| match e {
            Error::InvalidScenario(msg) => config_err("scenario", msg),
            other => other,
        })?;
        let rx = self.scenario.receiver_positions.len();
        let ex = &self.experiment;
        if ex.num_selected == 0 || ex.num_selected > rx {
            return Err(config_err(
                "experiment.num_selected",
                format!("N_r = {} must lie in 1..={rx} (R_x)", ex.num_selected),
            ));
        }
        for (field, v) in [("experiment.eta_d", ex.eta_d), ("experiment.eta_v", ex.eta_v)] {
            if !(v > 0.0) {
                return Err(config_err(field, format!("must be positive, got {v}")));
            }
        }
        if ex.sweep.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(config_err("experiment.sweep", "values must be positive and finite"));
        }
        if ex.sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("experiment.sweep", "values must be strictly increasing"));
        }
        if !(ex.heatmap.half_width_m > 0.0) || ex.heatmap.points < 2 {
            return Err(config_err("experiment.heatmap", "needs half_width_m > 0 and points >= 2"));
        }
        let so = &self.solver;
        if !(so.tol > 0.0) || so.max_iter == 0 {
            return Err(config_err("solver", "tol must be positive and max_iter >= 1"));
        }
        if !(so.bisection_eps > 0.0) || so.max_alternations == 0 || !(so.rate_rel_tol >= 0.0) {
            return Err(config_err(
                "solver",
                "bisection_eps must be positive, max_alternations >= 1, rate_rel_tol >= 0",
            ));
        }
        so.schedule.validate().map_err(|e| config_err("solver.schedule", e))?;
        let sy = &self.system;
        if sy.beampattern_samples < 2 || !(sy.beampattern_tol > 0.0) || sy.beampattern_max_iter == 0 {
            return Err(config_err("system", "beampattern settings must be positive"));
        }
        Ok(())
    }

    /// The scenario with radar cross sections drawn from the seed when the
    /// configuration leaves them empty.
    pub fn scenario(&self) -> Result<Scenario> {
        let mut sc = self.scenario.clone();
        if sc.rcs_per_receiver.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.experiment.seed);
            sc.rcs_per_receiver =
                (0..sc.receiver_positions.len()).map(|_| rng.random_range(RCS_RANGE.0..=RCS_RANGE.1)).collect();
        }
        Ok(sc)
    }

    pub fn design_settings(&self) -> DesignSettings {
        DesignSettings {
            tol: self.system.beampattern_tol,
            max_iter: self.system.beampattern_max_iter,
            num_samples: self.system.beampattern_samples,
            ..DesignSettings::default()
        }
    }

    pub fn fim_options(&self) -> FimOptions {
        FimOptions { convention: self.system.fim_convention, comm_illumination: self.system.comm_illumination }
    }
}

/// Receivers on a circle around `center` at the given angles (degrees).
pub fn circle_receivers(center: Point, radius: f64, angles_deg: &[f64]) -> Vec<Point> {
    angles_deg
        .iter()
        .map(|a| {
            let t = a.to_radians();
            [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
        })
        .collect()
}

/// Shipped configurations: `paper_default` (full size) and `desk_default`
/// (small enough for tests).
pub fn builtin(name: &str) -> Result<RunConfig> {
    let full = Scenario {
        bs_position: [0.0, 0.0],
        receiver_positions: circle_receivers([0.0, 0.0], 50.0, &[0.0, 60.0, 180.0, 240.0]),
        target_positions: vec![[289.8, 77.6], [212.1, 212.1]],
        target_velocities: vec![[20.0, 0.0], [20.0, 0.0]],
        user_positions: vec![[24.8, 283.2], [109.5, 300.8]],
        carrier_hz: 3e9,
        subcarrier_spacing_hz: 15e3,
        num_subcarriers: 64,
        num_tx_antennas: 32,
        num_symbols: 32,
        cp_duration_s: 4.7e-6,
        symbol_duration_s: None,
        total_power_w: 5.0,
        radar_noise_var: 1.5e-18,
        comm_noise_var: 1.5e-14,
        rcs_per_receiver: Vec::new(),
        detection_subarea_angles: vec![[0.0, 30.0], [30.0, 60.0]],
    };
    let config = match name {
        "paper_default" => RunConfig {
            scenario: full,
            system: SystemConfig::default(),
            solver: SolverConfig::default(),
            experiment: ExperimentConfig {
                eta_d: 5.0,
                eta_v: 0.5,
                num_selected: 4,
                sweep: vec![3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 15.0],
                seed: 1,
                ..ExperimentConfig::default()
            },
        },
        "desk_default" => RunConfig {
            scenario: Scenario {
                receiver_positions: circle_receivers([0.0, 0.0], 50.0, &[0.0, 72.0, 144.0, 216.0, 288.0]),
                num_subcarriers: 16,
                num_tx_antennas: 8,
                num_symbols: 8,
                ..full
            },
            system: SystemConfig { beampattern_samples: 91, ..SystemConfig::default() },
            solver: SolverConfig::default(),
            experiment: ExperimentConfig {
                eta_d: 500.0,
                eta_v: 30.0,
                num_selected: 3,
                sweep: vec![300.0, 400.0, 600.0, 1000.0, 2000.0],
                seed: 1,
                heatmap: HeatmapConfig { half_width_m: 40.0, points: 21 },
                ..ExperimentConfig::default()
            },
        },
        other => return Err(Error::Config(format!("unknown builtin configuration {other:?}"))),
    };
    config.validate()?;
    Ok(config)
}

/// Scenario, covariances and information blocks shared by every solve of a
/// run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub covariances: CovarianceSet,
    pub blocks: FimBlocks,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let scenario = config.scenario()?;
    let beams = scenario.detection_subarea_angles.len();
    let covariances = match config.system.covariance {
        CovarianceMode::Designed => design_covariance_set(&scenario, &config.design_settings())?,
        CovarianceMode::Isotropic => {
            CovarianceSet::isotropic(scenario.num_subcarriers, beams, scenario.num_tx_antennas)
        }
    };
    let blocks = FimBlocks::build(&scenario, &covariances, config.fim_options())?;
    Ok(Prepared { scenario, covariances, blocks })
}

/// One solved point of a tradeoff curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffPoint {
    pub eta_in: f64,
    pub eta_d: f64,
    pub eta_v: f64,
    /// `ok`, `infeasible` or `failed`.
    pub status: String,
    pub rate_bits_s: f64,
    pub crb_x: f64,
    pub crb_y: f64,
    pub crb_vx: f64,
    pub crb_vy: f64,
    pub mask_bits: String,
    pub subcarriers_comm: usize,
    pub subcarriers_radar: usize,
    pub power_comm_frac: f64,
    pub power_radar_frac: f64,
    /// Whether the penalty loop reached a binary point before rounding.
    pub penalty_converged: bool,
    pub alternations: usize,
    /// Sweep value whose solve produced this allocation. Differs from
    /// `eta_in` when a tighter point's allocation had the higher rate.
    pub source_eta: f64,
}

impl TradeoffPoint {
    fn solved(eta_in: f64, eta_d: f64, eta_v: f64, scenario: &Scenario, result: &Alternation) -> Self {
        let [crb_x, crb_y, crb_vx, crb_vy] = worst_diagonals(&result.crbs);
        let (power_comm_frac, power_radar_frac) = result.allocation.power_fractions();
        Self {
            eta_in,
            eta_d,
            eta_v,
            status: "ok".into(),
            rate_bits_s: result.allocation.rate * scenario.subcarrier_spacing_hz,
            crb_x,
            crb_y,
            crb_vx,
            crb_vy,
            mask_bits: result.mask.bits(),
            subcarriers_comm: result.allocation.comm_subcarriers(),
            subcarriers_radar: result.allocation.radar_subcarriers(),
            power_comm_frac,
            power_radar_frac,
            penalty_converged: result.penalty_converged,
            alternations: result.rates.len(),
            source_eta: eta_in,
        }
    }

    fn unsolved(eta_in: f64, eta_d: f64, eta_v: f64, status: &str) -> Self {
        Self {
            eta_in,
            eta_d,
            eta_v,
            status: status.into(),
            rate_bits_s: f64::NAN,
            crb_x: f64::NAN,
            crb_y: f64::NAN,
            crb_vx: f64::NAN,
            crb_vy: f64::NAN,
            mask_bits: String::new(),
            subcarriers_comm: 0,
            subcarriers_radar: 0,
            power_comm_frac: f64::NAN,
            power_radar_frac: f64::NAN,
            penalty_converged: false,
            alternations: 0,
            source_eta: eta_in,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn max_location(&self) -> f64 {
        self.crb_x.max(self.crb_y)
    }

    pub fn max_velocity(&self) -> f64 {
        self.crb_vx.max(self.crb_vy)
    }
}

/// Outcome of the allocation/selection alternation.
#[derive(Debug, Clone)]
pub struct Alternation {
    pub allocation: Allocation,
    pub mask: ReceiverMask,
    pub crbs: Vec<CrbPair>,
    /// Rate (bits/s/Hz) of every accepted allocation.
    pub rates: Vec<f64>,
    pub penalty_converged: bool,
}

/// First `num_selected` receivers.
pub fn initial_mask(num_receivers: usize, num_selected: usize) -> Vec<bool> {
    (0..num_receivers).map(|r| r < num_selected).collect()
}

fn finish(
    prepared: &Prepared,
    allocation: Allocation,
    s: Vec<bool>,
    rates: Vec<f64>,
    converged: bool,
) -> Result<Alternation> {
    let crbs = crb_matrices(&prepared.blocks, &allocation.profile(), &s)?;
    let achieved_eta_d = crbs.iter().map(CrbPair::max_location).fold(0.0, f64::max);
    let achieved_eta_v = crbs.iter().map(CrbPair::max_velocity).fold(0.0, f64::max);
    Ok(Alternation {
        allocation,
        mask: ReceiverMask { s, achieved_eta_d, achieved_eta_v },
        crbs,
        rates,
        penalty_converged: converged,
    })
}

/// Allocation for a fixed receiver mask.
pub fn allocate(config: &RunConfig, prepared: &Prepared, mask: &[bool], eta_d: f64, eta_v: f64) -> Result<Alternation> {
    let inst = AllocationInstance::new(&prepared.scenario, &prepared.blocks, mask, eta_d, eta_v)?
        .with_settings(config.solver.settings());
    let out = inst.algorithm1(&config.solver.schedule, None)?;
    finish(prepared, out.allocation.clone(), mask.to_vec(), vec![out.allocation.rate], out.converged)
}

/// Alternate subcarrier/power allocation and receiver selection, starting
/// from the first `N_r` receivers.
pub fn alternate(config: &RunConfig, prepared: &Prepared) -> Result<Alternation> {
    alternate_at(config, prepared, config.experiment.eta_d, config.experiment.eta_v)
}

pub fn alternate_at(config: &RunConfig, prepared: &Prepared, eta_d: f64, eta_v: f64) -> Result<Alternation> {
    let sc = &prepared.scenario;
    let nr = config.experiment.num_selected;
    let (bound_on, fixed) = match config.experiment.objective {
        Objective::MinimizeD => (Quantity::Location, eta_v),
        Objective::MinimizeV => (Quantity::Velocity, eta_d),
    };
    let mut mask = initial_mask(sc.num_receivers(), nr);
    let mut accepted: Option<(Allocation, Vec<bool>, bool)> = None;
    let mut rates = Vec::new();
    for _ in 0..config.solver.max_alternations {
        let inst =
            AllocationInstance::new(sc, &prepared.blocks, &mask, eta_d, eta_v)?.with_settings(config.solver.settings());
        let warm = accepted.as_ref().map(|(a, _, _)| a);
        let out = match inst.algorithm1(&config.solver.schedule, warm) {
            Ok(out) => out,
            Err(e) if accepted.is_none() => return Err(e),
            // The new mask is feasible by construction; a failed solve keeps
            // the previous allocation.
            Err(_) => break,
        };
        let rate = out.allocation.rate;
        let gain = match rates.last() {
            Some(&prev) if rate < prev => break,
            Some(&prev) => (rate - prev) / f64::max(prev.abs(), 1e-12),
            None => f64::INFINITY,
        };
        rates.push(rate);
        let allocation = out.allocation;
        let profile = allocation.profile();
        accepted = Some((allocation, mask.clone(), out.converged));
        if gain < config.solver.rate_rel_tol {
            break;
        }
        let sel = SelectionInstance::from_allocation(&prepared.blocks, &profile, nr)?;
        let next = sel.select(bound_on, fixed, config.solver.bisection_eps)?.mask.s;
        if next == mask {
            break;
        }
        mask = next;
    }
    let (allocation, mask, converged) = accepted.expect("first iteration either accepts or returns");
    finish(prepared, allocation, mask, rates, converged)
}

/// One alternation (or fixed-mask allocation) per sweep value; points run
/// concurrently and are returned in sweep order. Failures are recorded in
/// the point's status and do not stop the sweep.
pub fn tradeoff_sweep(config: &RunConfig, prepared: &Prepared) -> Vec<TradeoffPoint> {
    let sweep = &config.experiment.sweep;
    let results: Mutex<Vec<Option<TradeoffPoint>>> = Mutex::new(vec![None; sweep.len()]);
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(sweep.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&eta) = sweep.get(i) else { break };
                let point = sweep_point(config, prepared, eta);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(point);
            });
        }
    });
    let mut points: Vec<TradeoffPoint> =
        results.into_inner().expect("workers joined").into_iter().map(|p| p.expect("every index visited")).collect();
    carry_dominant(&mut points);
    points
}

/// The sweep is sorted, so an allocation meeting a tighter bound also meets
/// every later one. Each point reports the best rate among the verified
/// allocations found at or before it.
fn carry_dominant(points: &mut [TradeoffPoint]) {
    let slack = 1.0 + 1e-6;
    let mut best: Option<TradeoffPoint> = None;
    for p in points.iter_mut() {
        if let Some(b) = &best {
            let fits = b.max_location() <= p.eta_d * slack && b.max_velocity() <= p.eta_v * slack;
            if fits && (!p.is_ok() || b.rate_bits_s > p.rate_bits_s) {
                *p = TradeoffPoint { eta_in: p.eta_in, eta_d: p.eta_d, eta_v: p.eta_v, ..b.clone() };
            }
        }
        if p.is_ok() && best.as_ref().is_none_or(|b| p.rate_bits_s >= b.rate_bits_s) {
            best = Some(p.clone());
        }
    }
}

fn sweep_point(config: &RunConfig, prepared: &Prepared, eta: f64) -> TradeoffPoint {
    let ex = &config.experiment;
    let (eta_d, eta_v) = match ex.sweep_bound {
        Quantity::Location => (eta, ex.eta_v),
        Quantity::Velocity => (ex.eta_d, eta),
    };
    let result = if ex.allocation_only {
        let mask = initial_mask(prepared.scenario.num_receivers(), ex.num_selected);
        allocate(config, prepared, &mask, eta_d, eta_v)
    } else {
        alternate_at(config, prepared, eta_d, eta_v)
    };
    match result {
        Ok(r) => TradeoffPoint::solved(eta, eta_d, eta_v, &prepared.scenario, &r),
        Err(Error::Infeasible(_)) => TradeoffPoint::unsolved(eta, eta_d, eta_v, "infeasible"),
        Err(_) => TradeoffPoint::unsolved(eta, eta_d, eta_v, "failed"),
    }
}

pub fn write_tradeoff_csv<W: Write>(out: W, points: &[TradeoffPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// CRB of one target re-evaluated at a hypothetical position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeatmapCell {
    pub target: usize,
    pub x: f64,
    pub y: f64,
    /// Largest location CRB diagonal, m²; NaN where the information is
    /// singular.
    pub crb_loc: f64,
    /// Largest velocity CRB diagonal, (m/s)².
    pub crb_vel: f64,
}

/// Location/velocity CRB of each target moved over a square grid around its
/// true position, with the allocation and mask held fixed.
pub fn crb_heatmap(
    config: &RunConfig,
    prepared: &Prepared,
    allocation: &Allocation,
    mask: &[bool],
) -> Vec<HeatmapCell> {
    let grid = config.experiment.heatmap;
    let profile = allocation.profile();
    let offsets: Vec<f64> =
        (0..grid.points).map(|i| grid.half_width_m * (2.0 * i as f64 / (grid.points - 1) as f64 - 1.0)).collect();
    let mut cells = Vec::with_capacity(prepared.scenario.num_targets() * grid.points * grid.points);
    for n in 0..prepared.scenario.num_targets() {
        let [x0, y0] = prepared.scenario.target_positions[n];
        for &dy in &offsets {
            for &dx in &offsets {
                let (x, y) = (x0 + dx, y0 + dy);
                let mut sc = prepared.scenario.clone();
                sc.target_positions[n] = [x, y];
                let crb = FimBlocks::build(&sc, &prepared.covariances, config.fim_options())
                    .and_then(|b| crb_matrices(&b, &profile, mask));
                let (crb_loc, crb_vel) = match crb {
                    Ok(c) => (c[n].max_location(), c[n].max_velocity()),
                    Err(_) => (f64::NAN, f64::NAN),
                };
                cells.push(HeatmapCell { target: n, x, y, crb_loc, crb_vel });
            }
        }
    }
    cells
}

pub fn write_heatmap_csv<W: Write>(out: W, cells: &[HeatmapCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = builtin("desk_default").unwrap();
        c.system.covariance = CovarianceMode::Isotropic;
        c.scenario.num_subcarriers = 8;
        c.scenario.num_tx_antennas = 4;
        c.scenario.num_symbols = 4;
        c
    }

    /// Bounds at `factor` times the CRBs of a uniform all-detection split on
    /// the initial mask.
    fn bounds(prepared: &Prepared, num_selected: usize, factor: f64) -> (f64, f64) {
        let sc = &prepared.scenario;
        let mut profile = crate::fim::PowerProfile::zeros(sc.num_subcarriers, 2, sc.num_users());
        profile.radar.fill(sc.total_power_w / (2 * sc.num_subcarriers) as f64);
        let crbs = crb_matrices(&prepared.blocks, &profile, &initial_mask(sc.num_receivers(), num_selected)).unwrap();
        let d = crbs.iter().map(CrbPair::max_location).fold(0.0, f64::max);
        let v = crbs.iter().map(CrbPair::max_velocity).fold(0.0, f64::max);
        (factor * d, factor * v)
    }

    #[test]
    fn builtins_round_trip_through_toml() {
        for name in ["paper_default", "desk_default"] {
            let c = builtin(name).unwrap();
            let text = c.to_toml_string().unwrap();
            assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        }
        assert!(matches!(builtin("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn rcs_draws_follow_the_seed() {
        let mut c = builtin("desk_default").unwrap();
        let a = c.scenario().unwrap().rcs_per_receiver;
        assert_eq!(a, c.scenario().unwrap().rcs_per_receiver);
        assert!(a.iter().all(|&x| (RCS_RANGE.0..=RCS_RANGE.1).contains(&x)));
        c.experiment.seed += 1;
        assert_ne!(a, c.scenario().unwrap().rcs_per_receiver);
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = builtin("desk_default").unwrap();
        c.experiment.num_selected = 9;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("experiment.num_selected"), "{msg}");
        let mut c = builtin("desk_default").unwrap();
        c.experiment.sweep = vec![2.0, 1.0];
        assert!(c.validate().unwrap_err().to_string().contains("experiment.sweep"));
        let text =
            builtin("desk_default").unwrap().to_toml_string().unwrap().replace("[solver]", "[solver]\nbogus = 1");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn full_selection_reduces_to_one_allocation() {
        let mut c = small();
        c.experiment.num_selected = 5;
        let p = prepare(&c).unwrap();
        (c.experiment.eta_d, c.experiment.eta_v) = bounds(&p, 5, 3.0);
        let alt = alternate(&c, &p).unwrap();
        assert_eq!(alt.rates.len(), 1);
        assert_eq!(alt.mask.bits(), "11111");
        let single = allocate(&c, &p, &[true; 5], c.experiment.eta_d, c.experiment.eta_v).unwrap();
        assert_eq!(single.allocation.rate, alt.allocation.rate);
    }

    #[test]
    fn alternation_never_loses_rate_and_meets_bounds() {
        let c0 = small();
        let p = prepare(&c0).unwrap();
        let mut c = c0.clone();
        (c.experiment.eta_d, c.experiment.eta_v) = bounds(&p, 3, 3.0);
        let alt = alternate(&c, &p).unwrap();
        assert!(alt.rates.windows(2).all(|w| w[1] >= w[0]), "{:?}", alt.rates);
        assert_eq!(alt.mask.s.iter().filter(|&&s| s).count(), 3);
        assert!(alt.mask.achieved_eta_d <= c.experiment.eta_d + 1e-6);
        assert!(alt.mask.achieved_eta_v <= c.experiment.eta_v + 1e-6);
        // Re-evaluating the CRBs from the outputs reproduces them exactly.
        let again = crb_matrices(&p.blocks, &alt.allocation.profile(), &alt.mask.s).unwrap();
        assert_eq!(again, alt.crbs);
    }

    #[test]
    fn sweep_records_infeasible_points_and_keeps_order() {
        let c0 = small();
        let p = prepare(&c0).unwrap();
        let (d, v) = bounds(&p, 3, 1.0);
        let mut c = c0.clone();
        c.experiment.eta_v = 3.0 * v;
        c.experiment.sweep = vec![1e-3 * d, 2.0 * d, 4.0 * d];
        c.experiment.allocation_only = true;
        let pts = tradeoff_sweep(&c, &p);
        assert_eq!(pts.iter().map(|p| p.eta_in).collect::<Vec<_>>(), c.experiment.sweep);
        assert_eq!(pts[0].status, "infeasible");
        assert!(pts[1].is_ok() && pts[2].is_ok());
        assert!(pts[2].rate_bits_s >= pts[1].rate_bits_s * (1.0 - 1e-6));
        let mut buf = Vec::new();
        write_tradeoff_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("eta_in,eta_d,eta_v,status,rate_bits_s,crb_x,crb_y,crb_vx,crb_vy,mask_bits,"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn looser_points_inherit_better_allocations() {
        let point = |eta: f64, rate: f64, crb: f64| TradeoffPoint {
            rate_bits_s: rate,
            crb_x: crb,
            crb_y: crb,
            crb_vx: 1.0,
            crb_vy: 1.0,
            status: "ok".into(),
            ..TradeoffPoint::unsolved(eta, eta, 2.0, "ok")
        };
        let mut pts = vec![
            point(10.0, 5.0, 9.0),
            point(20.0, 3.0, 19.0),
            TradeoffPoint::unsolved(30.0, 30.0, 2.0, "failed"),
            point(40.0, 8.0, 35.0),
        ];
        carry_dominant(&mut pts);
        let rates: Vec<f64> = pts.iter().map(|p| p.rate_bits_s).collect();
        assert_eq!(rates, [5.0, 5.0, 5.0, 8.0]);
        assert_eq!(pts[1].source_eta, 10.0);
        assert_eq!(pts[1].eta_in, 20.0);
        assert!(pts[2].is_ok());
        assert_eq!(pts[3].source_eta, 40.0);
    }

    #[test]
    fn heatmap_center_matches_the_solve() {
        let mut c = small();
        c.experiment.heatmap = HeatmapConfig { half_width_m: 10.0, points: 3 };
        let p = prepare(&c).unwrap();
        (c.experiment.eta_d, c.experiment.eta_v) = bounds(&p, 3, 3.0);
        let alt = alternate(&c, &p).unwrap();
        let cells = crb_heatmap(&c, &p, &alt.allocation, &alt.mask.s);
        assert_eq!(cells.len(), 2 * 9);
        for n in 0..2 {
            let center = cells[n * 9 + 4];
            assert_eq!(center.x, p.scenario.target_positions[n][0]);
            assert_eq!(center.crb_loc, alt.crbs[n].max_location());
            assert_eq!(center.crb_vel, alt.crbs[n].max_velocity());
        }
        let mut buf = Vec::new();
        write_heatmap_csv(&mut buf, &cells).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("target,x,y,crb_loc,crb_vel\n"));
    }
}
