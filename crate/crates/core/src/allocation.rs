//! Subcarrier and power allocation for a fixed receiver set.
//!
//! The binary subcarrier indicators are relaxed to `[1e-9, 1]` and the
//! powers are carried as `p̄ = p σ`. CRB bounds become 2×2 LMIs (reduced to
//! rotated cones), binarity is pushed by a linearized DC penalty whose weight
//! grows between outer iterations, and the final indicators are rounded and
//! the powers re-solved with the assignment fixed.

use std::io::Write;

use nalgebra::{DMatrix, Matrix2};

use crate::conic::{self, ConicProblem, ConicSolution, LinExpr, PerspectiveTerm, SolveStatus, SolverSettings};
use crate::error::{Error, Result};
use crate::fim::{crb_matrices, CrbPair, FimBlocks, PowerProfile};
use crate::scenario::{self, Scenario};
use crate::waveform::Owner;

/// Lower bound on every relaxed indicator.
pub const SIGMA_FLOOR: f64 = 1e-9;

/// Binarity violation below which the penalty loop may stop.
pub const BINARY_TOL: f64 = 1e-4;

/// Penalty weight schedule and stopping rule of the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySchedule {
    pub beta0: f64,
    pub gamma: f64,
    pub beta_max: f64,
    /// Rate change (bits/s/Hz) below which the loop stops.
    pub epsilon: f64,
    pub max_outer: usize,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self { beta0: 1e-3, gamma: 3.0, beta_max: 1e3, epsilon: 1e-4, max_outer: 30 }
    }
}

impl PenaltySchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta0 > 0.0
            && self.gamma > 1.0
            && self.beta_max >= self.beta0
            && self.epsilon > 0.0
            && self.max_outer >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid penalty schedule {self:?}")))
        }
    }
}

/// Relaxed or binary allocation. Matrices are indexed `(k, m)` for users and
/// `(k, n′)` for detection subareas.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub sigma_c: DMatrix<f64>,
    pub sigma_r: DMatrix<f64>,
    pub pbar_c: DMatrix<f64>,
    pub pbar_r: DMatrix<f64>,
    /// Sum rate in bits/s/Hz.
    pub rate: f64,
    /// `Σα + Σδ` of the penalized solve that produced this allocation.
    pub violation: f64,
    pub binary: bool,
}

impl Allocation {
    pub fn num_subcarriers(&self) -> usize {
        self.sigma_c.nrows()
    }

    pub fn profile(&self) -> PowerProfile {
        PowerProfile { radar: self.pbar_r.clone(), comm: self.pbar_c.clone() }
    }

    /// Largest indicator per subcarrier; users win ties.
    pub fn owners(&self) -> Vec<Owner> {
        (0..self.num_subcarriers())
            .map(|k| {
                let mut best = (f64::NEG_INFINITY, Owner::User(0));
                for m in 0..self.sigma_c.ncols() {
                    if self.sigma_c[(k, m)] > best.0 {
                        best = (self.sigma_c[(k, m)], Owner::User(m));
                    }
                }
                for b in 0..self.sigma_r.ncols() {
                    if self.sigma_r[(k, b)] > best.0 {
                        best = (self.sigma_r[(k, b)], Owner::Subarea(b));
                    }
                }
                best.1
            })
            .collect()
    }

    /// Total power per subcarrier.
    pub fn powers(&self) -> Vec<f64> {
        (0..self.num_subcarriers()).map(|k| self.pbar_c.row(k).sum() + self.pbar_r.row(k).sum()).collect()
    }

    pub fn comm_subcarriers(&self) -> usize {
        self.owners().iter().filter(|o| matches!(o, Owner::User(_))).count()
    }

    pub fn radar_subcarriers(&self) -> usize {
        self.num_subcarriers() - self.comm_subcarriers()
    }

    /// Fractions of the spent power that go to users and to detection.
    pub fn power_fractions(&self) -> (f64, f64) {
        let (c, r) = (self.pbar_c.sum(), self.pbar_r.sum());
        let total = c + r;
        if total > 0.0 {
            (c / total, r / total)
        } else {
            (0.0, 0.0)
        }
    }

    /// `Σ σ(1 − σ)` over all indicators.
    pub fn binarity_gap(&self) -> f64 {
        self.sigma_c.iter().chain(self.sigma_r.iter()).map(|s| s * (1.0 - s)).sum()
    }
}

/// One outer iteration of the penalty loop.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterStep {
    pub iteration: usize,
    pub beta: f64,
    pub rate: f64,
    pub violation: f64,
    pub newton_steps: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone)]
pub struct Algorithm1Outcome {
    /// Rounded allocation with re-solved powers.
    pub allocation: Allocation,
    /// Last relaxed iterate.
    pub relaxed: Allocation,
    pub trace: Vec<OuterStep>,
    /// False when the loop hit `max_outer` before the violation fell below
    /// [`BINARY_TOL`].
    pub converged: bool,
    /// Whether a stalled first loop was restarted from its rounding.
    pub restarted: bool,
}

/// Constraint counts of one penalized subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubproblemCounts {
    pub lmis: usize,
    pub row_sums: usize,
    pub power_rows: usize,
    pub cuts: usize,
    pub links: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    k: usize,
    m: usize,
    nb: usize,
    penalized: bool,
}

impl Layout {
    fn per_k(&self) -> usize {
        let base = 2 * (self.m + self.nb);
        if self.penalized {
            base + self.m + self.nb
        } else {
            base
        }
    }

    fn sigma_c(&self, k: usize, m: usize) -> usize {
        k * self.per_k() + m
    }

    fn sigma_r(&self, k: usize, b: usize) -> usize {
        k * self.per_k() + self.m + b
    }

    fn p_c(&self, k: usize, m: usize) -> usize {
        k * self.per_k() + self.m + self.nb + m
    }

    fn p_r(&self, k: usize, b: usize) -> usize {
        k * self.per_k() + 2 * self.m + self.nb + b
    }

    fn delta(&self, k: usize, m: usize) -> usize {
        k * self.per_k() + 2 * (self.m + self.nb) + m
    }

    fn alpha(&self, k: usize, b: usize) -> usize {
        k * self.per_k() + 2 * (self.m + self.nb) + self.m + b
    }
}

/// A penalized relaxed subproblem and the map back to an [`Allocation`].
#[derive(Debug, Clone)]
pub struct Subproblem {
    pub problem: ConicProblem,
    pub counts: SubproblemCounts,
    layout: Layout,
    gains: DMatrix<f64>,
    lin_c: DMatrix<f64>,
    lin_r: DMatrix<f64>,
}

// Cuts never exceed 1 on [0, 1]; the cap keeps phase I bounded.
const SLACK_CAP: f64 = 2.0;

fn cut_value(lin: f64, sigma: f64) -> f64 {
    lin * lin + sigma * (1.0 - 2.0 * lin)
}

impl Subproblem {
    pub fn allocation(&self, x: &[f64]) -> Allocation {
        let l = self.layout;
        let sigma_c = DMatrix::from_fn(l.k, l.m, |k, m| x[l.sigma_c(k, m)]);
        let sigma_r = DMatrix::from_fn(l.k, l.nb, |k, b| x[l.sigma_r(k, b)]);
        let pbar_c = DMatrix::from_fn(l.k, l.m, |k, m| x[l.p_c(k, m)]);
        let pbar_r = DMatrix::from_fn(l.k, l.nb, |k, b| x[l.p_r(k, b)]);
        let rate = (0..l.k)
            .flat_map(|k| (0..l.m).map(move |m| (k, m)))
            .map(|(k, m)| conic::perspective_rate(sigma_c[(k, m)], pbar_c[(k, m)], self.gains[(k, m)]))
            .sum();
        let violation = if l.penalized {
            (0..l.k)
                .map(|k| {
                    (0..l.m).map(|m| x[l.delta(k, m)]).sum::<f64>() + (0..l.nb).map(|b| x[l.alpha(k, b)]).sum::<f64>()
                })
                .sum()
        } else {
            0.0
        };
        Allocation { sigma_c, sigma_r, pbar_c, pbar_r, rate, violation, binary: false }
    }

    /// Interior start built from an allocation: slacks sit just above their
    /// cuts at the current linearization point.
    pub fn start_point(&self, alloc: &Allocation) -> Vec<f64> {
        let l = self.layout;
        let mut x = vec![0.0; self.problem.num_vars()];
        for k in 0..l.k {
            for m in 0..l.m {
                let s = alloc.sigma_c[(k, m)];
                x[l.sigma_c(k, m)] = s;
                x[l.p_c(k, m)] = alloc.pbar_c[(k, m)];
                if l.penalized {
                    x[l.delta(k, m)] = cut_value(self.lin_c[(k, m)], s) + 1e-3;
                }
            }
            for b in 0..l.nb {
                let s = alloc.sigma_r[(k, b)];
                x[l.sigma_r(k, b)] = s;
                x[l.p_r(k, b)] = alloc.pbar_r[(k, b)];
                if l.penalized {
                    x[l.alpha(k, b)] = cut_value(self.lin_r[(k, b)], s) + 1e-3;
                }
            }
        }
        x
    }
}

/// Allocation problem for one receiver mask and one pair of CRB bounds.
#[derive(Debug, Clone)]
pub struct AllocationInstance<'a> {
    scenario: &'a Scenario,
    blocks: &'a FimBlocks,
    mask: Vec<bool>,
    eta_d: f64,
    eta_v: f64,
    gains: DMatrix<f64>,
    pub settings: SolverSettings,
}

impl<'a> AllocationInstance<'a> {
    /// `eta_d` (m²) and `eta_v` ((m/s)²) may be infinite to drop a bound.
    pub fn new(scenario: &'a Scenario, blocks: &'a FimBlocks, mask: &[bool], eta_d: f64, eta_v: f64) -> Result<Self> {
        if mask.len() != scenario.num_receivers() {
            return Err(Error::InvalidScenario(format!(
                "mask has {} entries for {} receivers",
                mask.len(),
                scenario.num_receivers()
            )));
        }
        if !(eta_d > 0.0 && eta_v > 0.0) {
            return Err(Error::Config(format!("CRB bounds must be positive, got eta_d={eta_d}, eta_v={eta_v}")));
        }
        let k_count = scenario.num_subcarriers;
        let mut gains = DMatrix::zeros(k_count, scenario.num_users());
        for k in 0..k_count {
            for m in 0..scenario.num_users() {
                gains[(k, m)] = scenario::comm_channel(scenario, k, m)?.norm_squared() / scenario.comm_noise_var;
            }
        }
        Ok(Self { scenario, blocks, mask: mask.to_vec(), eta_d, eta_v, gains, settings: SolverSettings::default() })
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.eta_d, self.eta_v)
    }

    /// `‖h_{k,m}‖² / σ_z²`.
    pub fn gains(&self) -> &DMatrix<f64> {
        &self.gains
    }

    fn num_users(&self) -> usize {
        self.scenario.num_users()
    }

    fn num_beams(&self) -> usize {
        self.blocks.num_beams()
    }

    fn has_crb_constraints(&self) -> bool {
        self.blocks.num_targets() > 0 && (self.eta_d.is_finite() || self.eta_v.is_finite())
    }

    /// Adds the CRB constraints. `var_of` maps a power slot to its variable.
    /// `[C]_{11} ≤ η` is `[[F22, √η F12], [√η F12, η F11 − 1]] ⪰ 0`; the
    /// congruence by `diag(√η, 1)` used here keeps the rows balanced.
    fn add_crb_lmis(&self, prob: &mut ConicProblem, var_of: &dyn Fn(usize, Owner) -> Option<usize>) -> usize {
        let mut count = 0;
        if !self.has_crb_constraints() {
            return 0;
        }
        let owners: Vec<Owner> =
            (0..self.num_users()).map(Owner::User).chain((0..self.num_beams()).map(Owner::Subarea)).collect();
        for n in 0..self.blocks.num_targets() {
            let mut fd = [LinExpr::default(), LinExpr::default(), LinExpr::default()];
            let mut fv = fd.clone();
            for k in 0..self.scenario.num_subcarriers {
                for &owner in &owners {
                    let Some(i) = var_of(k, owner) else { continue };
                    let (d, v) = self.blocks.unit_information(&self.mask, n, k, owner);
                    for (f, m) in [(&mut fd, d), (&mut fv, v)] {
                        if m == Matrix2::zeros() {
                            continue;
                        }
                        f[0] = std::mem::take(&mut f[0]).term(i, m[(0, 0)]);
                        f[1] = std::mem::take(&mut f[1]).term(i, m[(0, 1)]);
                        f[2] = std::mem::take(&mut f[2]).term(i, m[(1, 1)]);
                    }
                }
            }
            for (f, eta) in [(&fd, self.eta_d), (&fv, self.eta_v)] {
                if !eta.is_finite() {
                    continue;
                }
                let [f11, f12, f22] = f.clone().map(|e| e.scale(eta));
                prob.add_psd2(f22.clone(), f12.clone(), f11.clone().plus(-1.0));
                prob.add_psd2(f11, f12, f22.plus(-1.0));
                count += 2;
            }
        }
        count
    }

    /// Penalized relaxed subproblem linearized at `(lin_c, lin_r)`. With
    /// `beta = 0` the slacks and cuts are omitted.
    pub fn build_subproblem(&self, lin_c: &DMatrix<f64>, lin_r: &DMatrix<f64>, beta: f64) -> Subproblem {
        let layout = Layout {
            k: self.scenario.num_subcarriers,
            m: self.num_users(),
            nb: self.num_beams(),
            penalized: beta > 0.0,
        };
        let pmax = self.scenario.total_power_w;
        let mut prob = ConicProblem::new();
        let mut counts = SubproblemCounts { lmis: 0, row_sums: 0, power_rows: 0, cuts: 0, links: 0 };
        for k in 0..layout.k {
            for m in 0..layout.m {
                prob.add_var(format!("sigma_c[{k},{m}]"), SIGMA_FLOOR);
            }
            for b in 0..layout.nb {
                prob.add_var(format!("sigma_r[{k},{b}]"), SIGMA_FLOOR);
            }
            for m in 0..layout.m {
                prob.add_var(format!("pbar_c[{k},{m}]"), 0.0);
            }
            for b in 0..layout.nb {
                prob.add_var(format!("pbar_r[{k},{b}]"), 0.0);
            }
            if layout.penalized {
                for m in 0..layout.m {
                    prob.add_free_var(format!("delta[{k},{m}]"));
                }
                for b in 0..layout.nb {
                    prob.add_free_var(format!("alpha[{k},{b}]"));
                }
            }
        }
        debug_assert_eq!(prob.num_vars(), layout.k * layout.per_k());

        let mut power = LinExpr::constant(-pmax);
        for k in 0..layout.k {
            let mut row = LinExpr::constant(-1.0);
            for m in 0..layout.m {
                let (s, p) = (layout.sigma_c(k, m), layout.p_c(k, m));
                row = row.term(s, 1.0);
                power = power.term(p, 1.0);
                prob.add_le(LinExpr::var(p).term(s, -pmax));
                counts.links += 1;
                prob.add_perspective(PerspectiveTerm {
                    weight: 1.0,
                    gain: self.gains[(k, m)],
                    numerator: p,
                    denominator: Some(s),
                });
                if layout.penalized {
                    let lin = lin_c[(k, m)];
                    prob.add_le(LinExpr::constant(lin * lin).term(s, 1.0 - 2.0 * lin).term(layout.delta(k, m), -1.0));
                    prob.add_le(LinExpr::var(layout.delta(k, m)).plus(-SLACK_CAP));
                    prob.add_linear_objective(layout.delta(k, m), -beta);
                    counts.cuts += 1;
                }
            }
            for b in 0..layout.nb {
                let (s, p) = (layout.sigma_r(k, b), layout.p_r(k, b));
                row = row.term(s, 1.0);
                power = power.term(p, 1.0);
                prob.add_le(LinExpr::var(p).term(s, -pmax));
                counts.links += 1;
                if layout.penalized {
                    let lin = lin_r[(k, b)];
                    prob.add_le(LinExpr::constant(lin * lin).term(s, 1.0 - 2.0 * lin).term(layout.alpha(k, b), -1.0));
                    prob.add_le(LinExpr::var(layout.alpha(k, b)).plus(-SLACK_CAP));
                    prob.add_linear_objective(layout.alpha(k, b), -beta);
                    counts.cuts += 1;
                }
            }
            prob.add_eq(row);
            counts.row_sums += 1;
        }
        prob.add_le(power);
        counts.power_rows = 1;
        counts.lmis = self.add_crb_lmis(&mut prob, &|k, owner| match owner {
            Owner::User(m) => Some(layout.p_c(k, m)),
            Owner::Subarea(b) => Some(layout.p_r(k, b)),
        });
        Subproblem {
            problem: prob,
            counts,
            layout,
            gains: self.gains.clone(),
            lin_c: lin_c.clone(),
            lin_r: lin_r.clone(),
        }
    }

    /// Uniform indicators and a uniform half-budget power split.
    pub fn uniform_allocation(&self) -> Allocation {
        let (kc, m, nb) = (self.scenario.num_subcarriers, self.num_users(), self.num_beams());
        let share = 1.0 / (m + nb) as f64;
        let p = 0.5 * self.scenario.total_power_w / (kc * (m + nb)) as f64;
        Allocation {
            sigma_c: DMatrix::from_element(kc, m, share),
            sigma_r: DMatrix::from_element(kc, nb, share),
            pbar_c: DMatrix::from_element(kc, m, p),
            pbar_r: DMatrix::from_element(kc, nb, p),
            rate: 0.0,
            violation: 0.0,
            binary: false,
        }
    }

    fn check(&self, sol: ConicSolution, what: &str) -> Result<ConicSolution> {
        match sol.status {
            SolveStatus::Optimal => Ok(sol),
            SolveStatus::Infeasible => Err(Error::Infeasible(format!(
                "{what}: CRB bounds eta_d={:e}, eta_v={:e} cannot be met",
                self.eta_d, self.eta_v
            ))),
            SolveStatus::MaxIter => Err(Error::MaxIterations(format!(
                "{what}: stopped after {} Newton steps with KKT residual {:e}",
                sol.iterations, sol.kkt_residual
            ))),
        }
    }

    /// Solve one relaxed subproblem.
    pub fn relaxed_solve(
        &self,
        lin_c: &DMatrix<f64>,
        lin_r: &DMatrix<f64>,
        beta: f64,
        start: Option<&Allocation>,
    ) -> Result<(Allocation, ConicSolution)> {
        let sub = self.build_subproblem(lin_c, lin_r, beta);
        let x0 = start.map(|a| sub.start_point(a));
        let sol = conic::solve(&sub.problem, &self.settings, x0.as_deref());
        let sol = self.check(sol, "relaxed allocation")?;
        Ok((sub.allocation(&sol.values), sol))
    }

    /// Checks that the CRB bounds are reachable with the whole budget on
    /// detection.
    pub fn feasibility_probe(&self) -> Result<()> {
        if !self.has_crb_constraints() {
            return Ok(());
        }
        if !self.mask.iter().any(|&s| s) {
            return Err(Error::Infeasible("no radar receiver is selected".into()));
        }
        if self.num_beams() == 0 && !self.blocks.options().comm_illumination {
            return Err(Error::Infeasible("targets present but no detection subarea".into()));
        }
        let nb = self.num_beams();
        let mut prob = ConicProblem::new();
        for k in 0..self.scenario.num_subcarriers {
            for b in 0..nb {
                prob.add_var(format!("p[{k},{b}]"), 0.0);
            }
        }
        let mut power = LinExpr::constant(-self.scenario.total_power_w);
        for i in 0..prob.num_vars() {
            power = power.term(i, 1.0);
        }
        prob.add_le(power);
        self.add_crb_lmis(&mut prob, &|k, owner| match owner {
            Owner::Subarea(b) => Some(k * nb + b),
            Owner::User(_) => None,
        });
        let sol = conic::solve(&prob, &self.settings, None);
        if sol.status == SolveStatus::Infeasible {
            return Err(Error::Infeasible(format!(
                "CRB bounds eta_d={:e}, eta_v={:e} are out of reach even with all {} W on detection",
                self.eta_d, self.eta_v, self.scenario.total_power_w
            )));
        }
        Ok(())
    }

    /// Penalty loop followed by rounding and power restoration. `warm` seeds
    /// both the linearization point and the first solve.
    ///
    /// A loop that settles on a fractional point is restarted once from its
    /// rounded allocation with the penalty weight it had reached.
    pub fn algorithm1(&self, schedule: &PenaltySchedule, warm: Option<&Allocation>) -> Result<Algorithm1Outcome> {
        schedule.validate()?;
        self.feasibility_probe()?;
        let lin = match warm {
            Some(w) => self.pull_inside(w),
            None => self.uniform_allocation(),
        };
        let mut trace = Vec::new();
        let (mut relaxed, mut converged, beta) = self.penalty_loop(schedule, lin, schedule.beta0, &mut trace)?;
        let mut restarted = false;
        if !converged {
            let rounded = self.round_and_restore(&relaxed)?;
            let (again, ok, _) = self.penalty_loop(schedule, self.pull_inside(&rounded), beta, &mut trace)?;
            restarted = true;
            if ok || again.violation < relaxed.violation {
                relaxed = again;
                converged = ok;
            }
        }
        let allocation = self.round_and_restore(&relaxed)?;
        Ok(Algorithm1Outcome { allocation, relaxed, trace, converged, restarted })
    }

    /// Rounded allocations sit on the indicator floor; pull them inside so
    /// the start is interior.
    fn pull_inside(&self, alloc: &Allocation) -> Allocation {
        let mut lin = alloc.clone();
        let share = 1.0 / (self.num_users() + self.num_beams()) as f64;
        lin.sigma_c = lin.sigma_c.map(|s| 0.9 * s + 0.1 * share);
        lin.sigma_r = lin.sigma_r.map(|s| 0.9 * s + 0.1 * share);
        let pmax = self.scenario.total_power_w;
        lin.pbar_c = lin.pbar_c.zip_map(&lin.sigma_c, |p, s| (0.9 * p).min(0.9 * pmax * s));
        lin.pbar_r = lin.pbar_r.zip_map(&lin.sigma_r, |p, s| (0.9 * p).min(0.9 * pmax * s));
        lin
    }

    /// Outer iterations from `lin`. Returns the last relaxed iterate, whether
    /// it settled with violation below [`BINARY_TOL`], and the next weight.
    fn penalty_loop(
        &self,
        schedule: &PenaltySchedule,
        mut lin: Allocation,
        mut beta: f64,
        trace: &mut Vec<OuterStep>,
    ) -> Result<(Allocation, bool, f64)> {
        let mut start = lin.clone();
        let mut prev_rate: Option<f64> = None;
        let offset = trace.len();
        for j in 0..schedule.max_outer {
            let (alloc, sol) = self.relaxed_solve(&lin.sigma_c, &lin.sigma_r, beta, Some(&start))?;
            trace.push(OuterStep {
                iteration: offset + j,
                beta,
                rate: alloc.rate,
                violation: alloc.violation,
                newton_steps: sol.iterations,
                kkt_residual: sol.kkt_residual,
            });
            let settled = prev_rate.is_some_and(|r| (alloc.rate - r).abs() <= schedule.epsilon);
            let capped = beta >= schedule.beta_max;
            prev_rate = Some(alloc.rate);
            lin = alloc.clone();
            start = alloc;
            beta = (schedule.gamma * beta).min(schedule.beta_max);
            if settled && lin.violation <= BINARY_TOL {
                return Ok((lin, true, beta));
            }
            // Nothing left to raise: the iterates have frozen.
            if settled && capped {
                break;
            }
        }
        Ok((lin, false, beta))
    }

    /// Argmax rounding and a power-only re-solve with the assignment fixed.
    ///
    /// When the argmax assignment cannot meet the CRB bounds, user-owned
    /// subcarriers are handed to their strongest detection subarea one at a
    /// time, largest relaxed detection share first, until it can.
    pub fn round_and_restore(&self, relaxed: &Allocation) -> Result<Allocation> {
        if relaxed.binary {
            return Ok(relaxed.clone());
        }
        let mut owners = relaxed.owners();
        let first = match self.power_only(&owners) {
            Err(Error::Infeasible(msg)) if self.num_beams() > 0 => msg,
            other => return other,
        };
        let mut order: Vec<(usize, usize, f64)> = owners
            .iter()
            .enumerate()
            .filter(|(_, o)| matches!(o, Owner::User(_)))
            .map(|(k, _)| {
                let row = relaxed.sigma_r.row(k);
                let b = row.transpose().argmax().0;
                (k, b, row[b])
            })
            .collect();
        order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        for (k, b, _) in order {
            owners[k] = Owner::Subarea(b);
            match self.power_only(&owners) {
                Err(Error::Infeasible(_)) => continue,
                other => return other,
            }
        }
        Err(Error::Infeasible(first))
    }

    /// Best powers for a fixed binary assignment.
    pub fn power_only(&self, owners: &[Owner]) -> Result<Allocation> {
        let kc = self.scenario.num_subcarriers;
        if owners.len() != kc {
            return Err(Error::InvalidScenario(format!("{} owners for {kc} subcarriers", owners.len())));
        }
        let mut prob = ConicProblem::new();
        let mut power = LinExpr::constant(-self.scenario.total_power_w);
        for (k, owner) in owners.iter().enumerate() {
            let i = prob.add_var(format!("p[{k}]"), 0.0);
            power = power.term(i, 1.0);
            if let Owner::User(m) = *owner {
                prob.add_perspective(PerspectiveTerm {
                    weight: 1.0,
                    gain: self.gains[(k, m)],
                    numerator: i,
                    denominator: None,
                });
            }
        }
        prob.add_le(power);
        self.add_crb_lmis(&mut prob, &|k, owner| (owners[k] == owner).then_some(k));
        let sol = conic::solve(&prob, &self.settings, None);
        let sol = match self.check(sol, "power restoration") {
            Err(Error::Infeasible(msg)) => {
                let radar = owners.iter().filter(|o| matches!(o, Owner::Subarea(_))).count();
                return Err(Error::Infeasible(format!(
                    "{msg} with the rounded assignment ({radar} detection subcarriers)"
                )));
            }
            other => other?,
        };
        let (m, nb) = (self.num_users(), self.num_beams());
        let mut out = Allocation {
            sigma_c: DMatrix::zeros(kc, m),
            sigma_r: DMatrix::zeros(kc, nb),
            pbar_c: DMatrix::zeros(kc, m),
            pbar_r: DMatrix::zeros(kc, nb),
            rate: 0.0,
            violation: 0.0,
            binary: true,
        };
        for (k, owner) in owners.iter().enumerate() {
            let p = sol.values[k].max(0.0);
            match *owner {
                Owner::User(u) => {
                    out.sigma_c[(k, u)] = 1.0;
                    out.pbar_c[(k, u)] = p;
                    out.rate += (self.gains[(k, u)] * p).ln_1p() / std::f64::consts::LN_2;
                }
                Owner::Subarea(b) => {
                    out.sigma_r[(k, b)] = 1.0;
                    out.pbar_r[(k, b)] = p;
                }
            }
        }
        Ok(out)
    }

    /// CRB matrices of an allocation under this instance's mask.
    pub fn crbs(&self, alloc: &Allocation) -> Result<Vec<CrbPair>> {
        crb_matrices(self.blocks, &alloc.profile(), &self.mask)
    }

    /// Largest excess of any CRB diagonal over its bound (≤ 0 when met).
    pub fn bound_excess(&self, alloc: &Allocation) -> Result<f64> {
        if !self.has_crb_constraints() {
            return Ok(f64::NEG_INFINITY);
        }
        let crbs = self.crbs(alloc)?;
        let mut worst = f64::NEG_INFINITY;
        for c in &crbs {
            if self.eta_d.is_finite() {
                worst = worst.max(c.max_location() - self.eta_d);
            }
            if self.eta_v.is_finite() {
                worst = worst.max(c.max_velocity() - self.eta_v);
            }
        }
        Ok(worst)
    }
}

/// One row of the allocation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationRecord {
    pub eta_d: f64,
    pub eta_v: f64,
    pub rate_bits_s: f64,
    /// Largest value over targets of each CRB diagonal entry.
    pub crb: [f64; 4],
    pub subcarriers_comm: usize,
    pub subcarriers_radar: usize,
    pub power_comm_frac: f64,
    pub power_radar_frac: f64,
}

impl AllocationRecord {
    pub fn new(eta_d: f64, eta_v: f64, subcarrier_spacing_hz: f64, alloc: &Allocation, crbs: &[CrbPair]) -> Self {
        let (pc, pr) = alloc.power_fractions();
        Self {
            eta_d,
            eta_v,
            rate_bits_s: alloc.rate * subcarrier_spacing_hz,
            crb: worst_diagonals(crbs),
            subcarriers_comm: alloc.comm_subcarriers(),
            subcarriers_radar: alloc.radar_subcarriers(),
            power_comm_frac: pc,
            power_radar_frac: pr,
        }
    }
}

/// `[crb_x, crb_y, crb_vx, crb_vy]`, each maximized over targets.
pub fn worst_diagonals(crbs: &[CrbPair]) -> [f64; 4] {
    let mut out = [f64::NAN; 4];
    for (i, c) in crbs.iter().enumerate() {
        let vals = [c.location[(0, 0)], c.location[(1, 1)], c.velocity[(0, 0)], c.velocity[(1, 1)]];
        for (o, v) in out.iter_mut().zip(vals) {
            *o = if i == 0 { v } else { o.max(v) };
        }
    }
    out
}

pub fn write_allocation_csv<W: Write>(out: W, rows: &[AllocationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "eta_d",
        "eta_v",
        "rate_bits_s",
        "crb_x",
        "crb_y",
        "crb_vx",
        "crb_vy",
        "subcarriers_comm",
        "subcarriers_radar",
        "power_comm_frac",
        "power_radar_frac",
    ])?;
    for r in rows {
        let mut rec = vec![format!("{:e}", r.eta_d), format!("{:e}", r.eta_v), format!("{:e}", r.rate_bits_s)];
        rec.extend(r.crb.iter().map(|v| format!("{v:e}")));
        rec.extend([
            r.subcarriers_comm.to_string(),
            r.subcarriers_radar.to_string(),
            format!("{:.6}", r.power_comm_frac),
            format!("{:.6}", r.power_radar_frac),
        ]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}
