//! Radar receiver selection for a fixed power allocation.
//!
//! With the allocation fixed, the information about target `n` collected by
//! a receiver subset `s` is `Σ_r s_r B_{n,r}`. For 2×2 blocks each CRB
//! diagonal is a ratio of a linear and a quadratic form in `s`,
//! `sᵀp / sᵀQs`, which is what makes exhaustive and bisection searches cheap.

use std::io::Write;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fim::{FimBlocks, PowerProfile};

/// Largest receiver count accepted by the exhaustive search.
pub const MAX_ENUMERATED_RECEIVERS: usize = 20;

/// Which CRB a bound applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Location,
    Velocity,
}

impl Quantity {
    pub fn other(self) -> Self {
        match self {
            Quantity::Location => Quantity::Velocity,
            Quantity::Velocity => Quantity::Location,
        }
    }
}

/// Diagonal entry of a 2×2 CRB: first (x or v_x) or second (y or v_y).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entry {
    First,
    Second,
}

/// `sᵀp / sᵀQs` for one target, quantity and entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalForm {
    pub q: DMatrix<f64>,
    pub p: DVector<f64>,
}

impl RationalForm {
    /// Ratio at weights `a`, refusing a vanishing denominator.
    pub fn eval(&self, a: &[f64]) -> Result<f64> {
        let a = DVector::from_column_slice(a);
        let den = a.dot(&(&self.q * &a));
        let scale = a.abs().dot(&(self.q.abs() * a.abs()));
        if !(den.abs() > 1e-15 * scale) {
            return Err(Error::SingularInformation {
                target: 0,
                diagnostic: format!("quadratic form {den:e} against scale {scale:e}"),
            });
        }
        Ok(a.dot(&self.p) / den)
    }
}

/// Receiver information matrices for a fixed allocation.
#[derive(Debug, Clone)]
pub struct SelectionInstance {
    // Indexed [n][r].
    b_d: Vec<Vec<Matrix2<f64>>>,
    b_v: Vec<Vec<Matrix2<f64>>>,
    num_selected: usize,
}

impl SelectionInstance {
    pub fn from_matrices(
        b_d: Vec<Vec<Matrix2<f64>>>,
        b_v: Vec<Vec<Matrix2<f64>>>,
        num_selected: usize,
    ) -> Result<Self> {
        let rx = b_d.first().map_or(0, Vec::len);
        if b_d.is_empty() || b_d.len() != b_v.len() || b_d.iter().chain(&b_v).any(|row| row.len() != rx) {
            return Err(Error::InvalidScenario(
                "information blocks must be targets × receivers for both quantities".into(),
            ));
        }
        if num_selected == 0 || num_selected > rx {
            return Err(Error::Config(format!("num_selected = {num_selected} must lie in 1..={rx} (receiver count)")));
        }
        if rx > MAX_ENUMERATED_RECEIVERS {
            return Err(Error::Config(format!(
                "{rx} receivers exceed the exhaustive search limit of {MAX_ENUMERATED_RECEIVERS}"
            )));
        }
        Ok(Self { b_d, b_v, num_selected })
    }

    /// Per-receiver information under a power profile.
    pub fn from_allocation(blocks: &FimBlocks, profile: &PowerProfile, num_selected: usize) -> Result<Self> {
        let (nt, nr) = (blocks.num_targets(), blocks.num_receivers());
        let mut b_d = vec![Vec::with_capacity(nr); nt];
        let mut b_v = vec![Vec::with_capacity(nr); nt];
        for n in 0..nt {
            for r in 0..nr {
                let (d, v) = blocks.receiver_information(profile, n, r);
                b_d[n].push(d);
                b_v[n].push(v);
            }
        }
        Self::from_matrices(b_d, b_v, num_selected)
    }

    pub fn num_targets(&self) -> usize {
        self.b_d.len()
    }

    pub fn num_receivers(&self) -> usize {
        self.b_d[0].len()
    }

    pub fn num_selected(&self) -> usize {
        self.num_selected
    }

    pub fn with_num_selected(&self, num_selected: usize) -> Result<Self> {
        Self::from_matrices(self.b_d.clone(), self.b_v.clone(), num_selected)
    }

    pub fn block(&self, which: Quantity, n: usize, r: usize) -> &Matrix2<f64> {
        match which {
            Quantity::Location => &self.b_d[n][r],
            Quantity::Velocity => &self.b_v[n][r],
        }
    }

    /// `Σ_r a_r B_{n,r}`.
    pub fn weighted_information(&self, which: Quantity, n: usize, a: &[f64]) -> Matrix2<f64> {
        (0..self.num_receivers()).map(|r| self.block(which, n, r) * a[r]).sum()
    }

    /// `[Q]_{r,r′} = [B_r]₁₁[B_r′]₂₂ − [B_r]₁₂[B_r′]₂₁`, so that `aᵀQa` is the
    /// determinant of the weighted information.
    pub fn q_matrix(&self, which: Quantity, n: usize) -> DMatrix<f64> {
        let rx = self.num_receivers();
        DMatrix::from_fn(rx, rx, |r, rp| {
            let (b, bp) = (self.block(which, n, r), self.block(which, n, rp));
            b[(0, 0)] * bp[(1, 1)] - b[(0, 1)] * bp[(1, 0)]
        })
    }

    /// Numerator weights: the opposite diagonal of each receiver block.
    pub fn p_vector(&self, which: Quantity, n: usize, entry: Entry) -> DVector<f64> {
        let i = match entry {
            Entry::First => 1,
            Entry::Second => 0,
        };
        DVector::from_fn(self.num_receivers(), |r, _| self.block(which, n, r)[(i, i)])
    }

    pub fn rational_form(&self, which: Quantity, n: usize, entry: Entry) -> RationalForm {
        RationalForm { q: self.q_matrix(which, n), p: self.p_vector(which, n, entry) }
    }

    pub fn rational_crb(&self, a: &[f64], which: Quantity, n: usize, entry: Entry) -> Result<f64> {
        self.rational_form(which, n, entry).eval(a).map_err(|e| match e {
            Error::SingularInformation { diagnostic, .. } => Error::SingularInformation { target: n, diagnostic },
            other => other,
        })
    }

    /// Largest CRB diagonal of `which` over targets; infinite when singular.
    pub fn worst_crb(&self, s: &[bool], which: Quantity) -> f64 {
        let a = weights(s);
        let mut worst: f64 = 0.0;
        for n in 0..self.num_targets() {
            for entry in [Entry::First, Entry::Second] {
                match self.rational_crb(&a, which, n, entry) {
                    Ok(v) if v > 0.0 => worst = worst.max(v),
                    _ => return f64::INFINITY,
                }
            }
        }
        worst
    }

    fn mask(&self, s: Vec<bool>) -> ReceiverMask {
        ReceiverMask {
            achieved_eta_d: self.worst_crb(&s, Quantity::Location),
            achieved_eta_v: self.worst_crb(&s, Quantity::Velocity),
            s,
        }
    }

    /// Every mask with `num_selected` receivers, lexicographic in the
    /// selected indices.
    pub fn subsets(&self) -> impl Iterator<Item = Vec<bool>> + '_ {
        let rx = self.num_receivers();
        (0..rx).combinations(self.num_selected).map(move |idx| {
            let mut s = vec![false; rx];
            for i in idx {
                s[i] = true;
            }
            s
        })
    }

    /// Whether `s` meets `bound_on` ≤ `eta` and the other quantity ≤ `fixed`.
    pub fn satisfies(&self, s: &[bool], bound_on: Quantity, eta: f64, fixed: f64) -> bool {
        self.worst_crb(s, bound_on) <= eta && self.worst_crb(s, bound_on.other()) <= fixed
    }

    /// First mask (lexicographically) meeting both bounds.
    pub fn feasibility(&self, bound_on: Quantity, eta: f64, fixed: f64) -> Option<ReceiverMask> {
        self.subsets().find(|s| self.satisfies(s, bound_on, eta, fixed)).map(|s| self.mask(s))
    }

    /// Verdict of the eigenvalue-shifted quadratic constraints for `s`.
    pub fn convexified_verdict(&self, s: &[bool], bound_on: Quantity, eta: f64, fixed: f64) -> bool {
        let a = weights(s);
        [(bound_on, eta), (bound_on.other(), fixed)].into_iter().all(|(which, bound)| {
            bound.is_infinite()
                || (0..self.num_targets()).all(|n| {
                    [Entry::First, Entry::Second].into_iter().all(|entry| {
                        let form = self.rational_form(which, n, entry);
                        convexify(&form.q, &form.p, bound, self.num_selected).eval(&a) <= 0.0
                    })
                })
        })
    }

    /// Bracket for bisection on `bound_on`: half the bound of the full
    /// receiver set below, twice the worst finite subset bound above, each
    /// widened geometrically until valid.
    pub fn initial_bracket(&self, bound_on: Quantity, fixed: f64) -> Result<(f64, f64)> {
        let all = vec![true; self.num_receivers()];
        let floor = self.worst_crb(&all, bound_on);
        if !floor.is_finite() {
            return Err(Error::Infeasible(format!("{bound_on:?} information is singular even with every receiver")));
        }
        let worst = self
            .subsets()
            .filter(|s| self.worst_crb(s, bound_on.other()) <= fixed)
            .map(|s| self.worst_crb(&s, bound_on))
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if worst == f64::NEG_INFINITY {
            return Err(Error::Infeasible(format!(
                "no subset of {} receivers meets the fixed {:?} bound {fixed:e}",
                self.num_selected,
                bound_on.other()
            )));
        }
        let mut lo = 0.5 * floor;
        let mut hi = 2.0 * worst;
        for _ in 0..60 {
            if self.feasibility(bound_on, lo, fixed).is_none() {
                break;
            }
            lo *= 0.5;
        }
        for _ in 0..60 {
            if self.feasibility(bound_on, hi, fixed).is_some() {
                break;
            }
            hi *= 2.0;
        }
        Ok((lo, hi))
    }

    /// Bisection on the bound of `bound_on` with the other quantity held at
    /// `fixed`. Requires infeasibility at `lo` and feasibility at `hi`.
    pub fn bisect(&self, bound_on: Quantity, bracket: (f64, f64), epsilon: f64, fixed: f64) -> Result<Bisection> {
        let (mut lo, mut hi) = bracket;
        if !(epsilon > 0.0) || !(lo < hi) {
            return Err(Error::BadBracket(format!("need lo < hi and epsilon > 0, got [{lo:e}, {hi:e}], {epsilon:e}")));
        }
        if self.feasibility(bound_on, lo, fixed).is_some() {
            return Err(Error::BadBracket(format!("lower end {lo:e} is already feasible")));
        }
        let mut witness = self
            .feasibility(bound_on, hi, fixed)
            .ok_or_else(|| Error::BadBracket(format!("upper end {hi:e} is infeasible")))?;
        let mut iterations = 0;
        while hi - lo > epsilon {
            let mid = 0.5 * (lo + hi);
            match self.feasibility(bound_on, mid, fixed) {
                Some(mask) => {
                    hi = mid;
                    witness = mask;
                }
                None => lo = mid,
            }
            iterations += 1;
        }
        Ok(Bisection { eta_star: hi, mask: witness, iterations })
    }

    /// Smallest location bound over receiver subsets meeting the velocity
    /// bound `eta_v`.
    pub fn algorithm2(&self, eta_l: f64, eta_h: f64, epsilon: f64, eta_v: f64) -> Result<Bisection> {
        self.bisect(Quantity::Location, (eta_l, eta_h), epsilon, eta_v)
    }

    /// The same search with the roles of location and velocity swapped.
    pub fn select_velocity_variant(&self, eta_d: f64, bracket: (f64, f64), epsilon: f64) -> Result<Bisection> {
        self.bisect(Quantity::Velocity, bracket, epsilon, eta_d)
    }

    /// Bracket and bisect in one call.
    pub fn select(&self, bound_on: Quantity, fixed: f64, epsilon: f64) -> Result<Bisection> {
        let bracket = self.initial_bracket(bound_on, fixed)?;
        self.bisect(bound_on, bracket, epsilon, fixed)
    }
}

fn weights(s: &[bool]) -> Vec<f64> {
    s.iter().map(|&on| if on { 1.0 } else { 0.0 }).collect()
}

/// `sᵀ(Z − λ_Z I)s + linearᵀs + constant ≤ 0` with `Z = −(Q + Qᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConstraint {
    pub shifted: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub lambda_z: f64,
}

impl QuadraticConstraint {
    pub fn eval(&self, a: &[f64]) -> f64 {
        let a = DVector::from_column_slice(a);
        a.dot(&(&self.shifted * &a)) + self.linear.dot(&a) + self.constant
    }
}

/// Convex quadratic constraint equivalent to `sᵀp / sᵀQs ≤ eta` on binary
/// `s` with `Σs = num_selected`. Uses `sᵀs = num_selected` to move the
/// smallest eigenvalue of `Z` into the constant.
pub fn convexify(q: &DMatrix<f64>, p: &DVector<f64>, eta: f64, num_selected: usize) -> QuadraticConstraint {
    let z = -(q + q.transpose());
    let lambda_z = SymmetricEigen::new(z.clone()).eigenvalues.min();
    let shifted = z - DMatrix::identity(q.nrows(), q.ncols()) * lambda_z;
    QuadraticConstraint { shifted, linear: p * (2.0 / eta), constant: lambda_z * num_selected as f64, lambda_z }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverMask {
    pub s: Vec<bool>,
    pub achieved_eta_d: f64,
    pub achieved_eta_v: f64,
}

impl ReceiverMask {
    /// `"1010"` style rendering, receiver 0 first.
    pub fn bits(&self) -> String {
        self.s.iter().map(|&on| if on { '1' } else { '0' }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bisection {
    pub eta_star: f64,
    pub mask: ReceiverMask,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRecord {
    #[serde(rename = "N_r")]
    pub num_selected: usize,
    #[serde(rename = "R_x")]
    pub num_receivers: usize,
    pub eta_star: f64,
    pub mask_bits: String,
}

impl SelectionRecord {
    pub fn new(instance: &SelectionInstance, result: &Bisection) -> Self {
        Self {
            num_selected: instance.num_selected(),
            num_receivers: instance.num_receivers(),
            eta_star: result.eta_star,
            mask_bits: result.mask.bits(),
        }
    }
}

pub fn write_selection_csv<W: Write>(out: W, rows: &[SelectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
