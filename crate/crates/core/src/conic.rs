//! Barrier interior-point solver for concave maximization over linear
//! equalities, linear inequalities and rotated second-order cones.
//!
//! The objective is a weighted sum of perspective log terms
//! `w σ log2(1 + c p / σ)` plus a linear part. Every 2×2 linear matrix
//! inequality is reduced to one rotated cone and two linear rows by
//! [`lmi_to_rsoc`].
//!
//! Newton systems are solved with a structured factorization: terms with
//! small support form independent dense blocks, terms touching many
//! variables enter as a low-rank update, and the equality multipliers (plus
//! the phase-I slack) are eliminated through a small Schur complement.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2, Vector3};

use crate::error::{Error, Result};

/// Affine form `Σ a_i x_i + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn term(mut self, i: usize, coef: f64) -> Self {
        self.terms.push((i, coef));
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn scale(mut self, s: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= s;
        }
        self.constant *= s;
        self
    }

    pub fn add_expr(mut self, other: &LinExpr, s: f64) -> Self {
        self.terms.extend(other.terms.iter().map(|&(i, a)| (i, a * s)));
        self.constant += other.constant * s;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>() + self.constant
    }

    /// Merge duplicate indices and drop zero coefficients.
    fn compact(&self) -> (Vec<usize>, Vec<f64>) {
        let mut t = self.terms.clone();
        t.sort_by_key(|p| p.0);
        let mut idx: Vec<usize> = Vec::with_capacity(t.len());
        let mut val: Vec<f64> = Vec::with_capacity(t.len());
        for (i, a) in t {
            if idx.last() == Some(&i) {
                *val.last_mut().unwrap() += a;
            } else {
                idx.push(i);
                val.push(a);
            }
        }
        let keep: Vec<bool> = val.iter().map(|&a| a != 0.0).collect();
        let mut k = keep.iter();
        idx.retain(|_| *k.next().unwrap());
        val.retain(|&a| a != 0.0);
        (idx, val)
    }
}

/// `u·v ≥ w²` with `u, v ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rsoc {
    pub u: LinExpr,
    pub v: LinExpr,
    pub w: LinExpr,
}

/// Objective term `weight · σ log2(1 + gain · p / σ)`, or
/// `weight · log2(1 + gain · p)` when there is no denominator variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerspectiveTerm {
    pub weight: f64,
    pub gain: f64,
    pub numerator: usize,
    pub denominator: Option<usize>,
}

/// `σ log2(1 + c p̄ / σ)`, extended by 0 for `σ ≤ 1e-12`.
pub fn perspective_rate(sigma: f64, pbar: f64, gain: f64) -> f64 {
    if sigma <= 1e-12 {
        return 0.0;
    }
    sigma * (gain * pbar / sigma).ln_1p() / std::f64::consts::LN_2
}

/// Reduction of the 2×2 condition `[[m11, m12], [m12, m22]] ⪰ 0` to one
/// rotated cone and the two diagonal sign rows (`expr ≥ 0`).
pub fn lmi_to_rsoc(m11: LinExpr, m12: LinExpr, m22: LinExpr) -> (Rsoc, [LinExpr; 2]) {
    let signs = [m11.clone(), m22.clone()];
    (Rsoc { u: m11, v: m22, w: m12 }, signs)
}

/// Evaluate the reduced conditions on a numeric symmetric matrix.
pub fn psd2_by_reduction(m: &Matrix2<f64>) -> bool {
    m[(0, 0)] >= 0.0 && m[(1, 1)] >= 0.0 && m[(0, 0)] * m[(1, 1)] >= m[(0, 1)] * m[(0, 1)]
}

/// Optimization problem in builder form. Inequalities read `expr ≥ 0`.
#[derive(Debug, Clone, Default)]
pub struct ConicProblem {
    names: Vec<String>,
    pub perspective: Vec<PerspectiveTerm>,
    pub linear_objective: Vec<(usize, f64)>,
    pub equalities: Vec<LinExpr>,
    pub inequalities: Vec<LinExpr>,
    pub cones: Vec<Rsoc>,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    /// New variable with `x ≥ lower`.
    pub fn add_var(&mut self, name: impl Into<String>, lower: f64) -> usize {
        let i = self.names.len();
        self.names.push(name.into());
        self.inequalities.push(LinExpr::var(i).plus(-lower));
        i
    }

    /// New variable without a lower bound.
    pub fn add_free_var(&mut self, name: impl Into<String>) -> usize {
        self.names.push(name.into());
        self.names.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn add_eq(&mut self, e: LinExpr) {
        self.equalities.push(e);
    }

    pub fn add_ge(&mut self, e: LinExpr) {
        self.inequalities.push(e);
    }

    pub fn add_le(&mut self, e: LinExpr) {
        self.inequalities.push(e.scale(-1.0));
    }

    pub fn add_rsoc(&mut self, cone: Rsoc) {
        self.cones.push(cone);
    }

    /// Add `[[m11, m12], [m12, m22]] ⪰ 0`.
    pub fn add_psd2(&mut self, m11: LinExpr, m12: LinExpr, m22: LinExpr) {
        let (cone, signs) = lmi_to_rsoc(m11, m12, m22);
        self.cones.push(cone);
        self.inequalities.extend(signs);
    }

    pub fn add_perspective(&mut self, term: PerspectiveTerm) {
        self.perspective.push(term);
    }

    pub fn add_linear_objective(&mut self, i: usize, coef: f64) {
        self.linear_objective.push((i, coef));
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut f: f64 = self.linear_objective.iter().map(|&(i, c)| c * x[i]).sum();
        for p in &self.perspective {
            f += p.weight
                * match p.denominator {
                    Some(s) => perspective_rate(x[s], x[p.numerator], p.gain),
                    None => (p.gain * x[p.numerator]).ln_1p() / std::f64::consts::LN_2,
                };
        }
        f
    }

    /// Largest violation over all constraints (cones by `w² - uv` and the
    /// signs of `u`, `v`).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for e in &self.equalities {
            worst = worst.max(e.eval(x).abs());
        }
        for e in &self.inequalities {
            worst = worst.max(-e.eval(x));
        }
        for c in &self.cones {
            let (u, v, w) = (c.u.eval(x), c.v.eval(x), c.w.eval(x));
            worst = worst.max(-u).max(-v).max(w * w - u * v);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Relative duality measure and KKT tolerance.
    pub tol: f64,
    /// Newton step budget across both phases.
    pub max_iter: usize,
    /// Solve every Newton system with a dense factorization.
    pub dense: bool,
    pub record_trace: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 500, dense: false, record_trace: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub phase: u8,
    pub iteration: usize,
    pub t: f64,
    pub objective: f64,
    pub decrement: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub values: Vec<f64>,
    pub objective_value: f64,
    pub kkt_residual: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

impl ConicSolution {
    /// Turn non-optimal outcomes into errors.
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            SolveStatus::Optimal => Ok(self),
            SolveStatus::Infeasible => Err(Error::Infeasible(format!(
                "phase I found no strictly feasible point (after {} Newton steps)",
                self.iterations
            ))),
            SolveStatus::MaxIter => Err(Error::MaxIterations(format!(
                "conic solve stopped after {} Newton steps, KKT residual {:e}",
                self.iterations, self.kkt_residual
            ))),
        }
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phase", "iteration", "t", "objective", "decrement", "step"])?;
        for r in &self.trace {
            w.write_record([
                r.phase.to_string(),
                r.iteration.to_string(),
                format!("{:e}", r.t),
                format!("{:e}", r.objective),
                format!("{:e}", r.decrement),
                format!("{:e}", r.step),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Internal model.

#[derive(Debug, Clone)]
struct Row {
    idx: Vec<usize>,
    val: Vec<f64>,
    c: f64,
}

impl Row {
    fn from_expr(e: &LinExpr) -> Self {
        let (idx, val) = e.compact();
        Row { idx, val, c: e.constant }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &a)| a * x[i]).sum::<f64>() + self.c
    }

    fn dot(&self, d: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &a)| a * d[i]).sum()
    }

    fn scale(&mut self, s: f64) {
        self.val.iter_mut().for_each(|a| *a *= s);
        self.c *= s;
    }

    fn inf_norm(&self) -> f64 {
        self.val.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    fn push(&mut self, i: usize, a: f64) {
        self.idx.push(i);
        self.val.push(a);
    }
}

#[derive(Debug, Clone)]
struct Model {
    n: usize,
    ineq: Vec<Row>,
    cones: Vec<[Row; 3]>,
    persp: Vec<PerspectiveTerm>,
    lin: Vec<(usize, f64)>,
    eq: Vec<Row>,
    border: Vec<usize>,
}

impl Model {
    fn theta(&self) -> f64 {
        self.ineq.len() as f64 + 2.0 * self.cones.len() as f64
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let mut f: f64 = self.lin.iter().map(|&(i, c)| c * x[i]).sum();
        for p in &self.persp {
            f += p.weight
                * match p.denominator {
                    Some(s) => perspective_rate(x[s], x[p.numerator], p.gain),
                    None => (p.gain * x[p.numerator]).ln_1p() / std::f64::consts::LN_2,
                };
        }
        f
    }

    fn in_domain(&self, x: &[f64]) -> bool {
        for r in &self.ineq {
            if !(r.eval(x) > 0.0) {
                return false;
            }
        }
        for c in &self.cones {
            let (u, v, w) = (c[0].eval(x), c[1].eval(x), c[2].eval(x));
            if !(u > 0.0 && v > 0.0 && u * v - w * w > 0.0) {
                return false;
            }
        }
        for p in &self.persp {
            let arg = match p.denominator {
                Some(s) => {
                    if !(x[s] > 0.0) {
                        return false;
                    }
                    1.0 + p.gain * x[p.numerator] / x[s]
                }
                None => 1.0 + p.gain * x[p.numerator],
            };
            if !(arg > 0.0) {
                return false;
            }
        }
        true
    }

    /// Barrier objective `-t f(x) + φ(x)`; `+∞` outside the domain.
    fn merit(&self, x: &[f64], t: f64) -> f64 {
        if !self.in_domain(x) {
            return f64::INFINITY;
        }
        let mut phi = -t * self.objective(x);
        for r in &self.ineq {
            phi -= r.eval(x).ln();
        }
        for c in &self.cones {
            let (u, v, w) = (c[0].eval(x), c[1].eval(x), c[2].eval(x));
            phi -= (u * v - w * w).ln();
        }
        phi
    }

    fn eq_residual(&self, x: &[f64]) -> f64 {
        self.eq.iter().fold(0.0, |m, r| m.max(r.eval(x).abs()))
    }
}

fn build_model(p: &ConicProblem) -> std::result::Result<Model, SolveStatus> {
    let mut ineq = Vec::new();
    for e in &p.inequalities {
        let mut r = Row::from_expr(e);
        let s = r.inf_norm();
        if s == 0.0 {
            if r.c > 0.0 {
                continue;
            }
            return Err(SolveStatus::Infeasible);
        }
        r.scale(1.0 / s);
        ineq.push(r);
    }
    let mut cones = Vec::new();
    for c in &p.cones {
        let mut rows = [Row::from_expr(&c.u), Row::from_expr(&c.v), Row::from_expr(&c.w)];
        let s = rows.iter().fold(0.0f64, |m, r| m.max(r.inf_norm()));
        if s == 0.0 {
            let (u, v, w) = (rows[0].c, rows[1].c, rows[2].c);
            if u > 0.0 && v > 0.0 && u * v > w * w {
                continue;
            }
            return Err(SolveStatus::Infeasible);
        }
        rows.iter_mut().for_each(|r| r.scale(1.0 / s));
        cones.push(rows);
    }
    let mut eq = Vec::new();
    for e in &p.equalities {
        let mut r = Row::from_expr(e);
        let s = r.inf_norm();
        if s == 0.0 {
            if r.c.abs() <= 1e-12 {
                continue;
            }
            return Err(SolveStatus::Infeasible);
        }
        r.scale(1.0 / s);
        eq.push(r);
    }
    Ok(Model {
        n: p.num_vars(),
        ineq,
        cones,
        persp: p.perspective.clone(),
        lin: p.linear_objective.clone(),
        eq,
        border: Vec::new(),
    })
}

/// Phase-I model: every inequality and both cone diagonals are relaxed by
/// a shared slack `s` (the last variable), minimized subject to `s > -1`.
fn phase_one_model(m: &Model) -> Model {
    let s = m.n;
    let mut ineq: Vec<Row> = m
        .ineq
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.push(s, 1.0);
            r
        })
        .collect();
    ineq.push(Row { idx: vec![s], val: vec![1.0], c: 1.0 });
    let cones = m
        .cones
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c[0].push(s, 1.0);
            c[1].push(s, 1.0);
            c
        })
        .collect();
    Model { n: m.n + 1, ineq, cones, persp: Vec::new(), lin: vec![(s, -1.0)], eq: m.eq.clone(), border: vec![s] }
}

// ---------------------------------------------------------------------------
// Newton system.

struct FactorRow {
    idx: Vec<usize>,
    val: Vec<f64>,
}

/// Gradient of the barrier merit and its Hessian as a sum of outer
/// products of factor rows, grouped per term.
fn derivatives(m: &Model, x: &[f64], t: f64) -> (Vec<f64>, Vec<Vec<FactorRow>>) {
    let ln2 = std::f64::consts::LN_2;
    let mut g = vec![0.0; m.n];
    let mut terms: Vec<Vec<FactorRow>> = Vec::with_capacity(m.ineq.len() + m.cones.len() + m.persp.len());
    for &(i, c) in &m.lin {
        g[i] -= t * c;
    }
    for r in &m.ineq {
        let s = r.eval(x);
        for (&i, &a) in r.idx.iter().zip(&r.val) {
            g[i] -= a / s;
        }
        terms.push(vec![FactorRow { idx: r.idx.clone(), val: r.val.iter().map(|a| a / s).collect() }]);
    }
    for c in &m.cones {
        let (u, v, w) = (c[0].eval(x), c[1].eval(x), c[2].eval(x));
        let h = u * v - w * w;
        let gr = Vector3::new(v, u, -2.0 * w);
        for (k, row) in c.iter().enumerate() {
            for (&i, &a) in row.idx.iter().zip(&row.val) {
                g[i] -= gr[k] * a / h;
            }
        }
        // Hessian of -log det [[u, w], [w, v]] as |C⁻¹ dX C⁻ᵀ|²_F with
        // X = C Cᵀ; forming g gᵀ/h² - M/h directly cancels near the boundary.
        let a = w / u;
        let r2 = (2.0 / h).sqrt();
        let factors = [
            Vector3::new(1.0 / u, 0.0, 0.0),
            Vector3::new(-a * r2, 0.0, r2),
            Vector3::new(a * a * u / h, u / h, -2.0 * a * u / h),
        ];
        let mut rows = Vec::with_capacity(3);
        for q in &factors {
            let mut acc: Vec<(usize, f64)> = Vec::new();
            for (k, row) in c.iter().enumerate() {
                if q[k] == 0.0 {
                    continue;
                }
                for (&i, &a) in row.idx.iter().zip(&row.val) {
                    acc.push((i, q[k] * a));
                }
            }
            let (idx, val) = LinExpr { terms: acc, constant: 0.0 }.compact();
            rows.push(FactorRow { idx, val });
        }
        terms.push(rows);
    }
    for p in &m.persp {
        let pv = x[p.numerator];
        match p.denominator {
            Some(si) => {
                let sg = x[si];
                let z = p.gain * pv / sg;
                let dp = p.gain / ((1.0 + z) * ln2);
                let ds = (z.ln_1p() - z / (1.0 + z)) / ln2;
                g[p.numerator] -= t * p.weight * dp;
                g[si] -= t * p.weight * ds;
                let k = t * p.weight / (sg * (1.0 + z) * (1.0 + z) * ln2);
                let sk = k.max(0.0).sqrt();
                let (idx, val) = if p.numerator < si {
                    (vec![p.numerator, si], vec![sk * p.gain, -sk * z])
                } else {
                    (vec![si, p.numerator], vec![-sk * z, sk * p.gain])
                };
                terms.push(vec![FactorRow { idx, val }]);
            }
            None => {
                let d = 1.0 + p.gain * pv;
                g[p.numerator] -= t * p.weight * p.gain / (d * ln2);
                let k = t * p.weight * p.gain * p.gain / (d * d * ln2);
                terms.push(vec![FactorRow { idx: vec![p.numerator], val: vec![k.max(0.0).sqrt()] }]);
            }
        }
    }
    (g, terms)
}

const LOCAL_SUPPORT: usize = 32;

/// The duality measure `θ/t` is compared against `tol · max(|f|, GAP_FLOOR)`,
/// relative to the objective with an absolute floor near zero.
const GAP_FLOOR: f64 = 1e-3;

/// Variable grouping reused across Newton steps of one model.
struct Structure {
    is_border: Vec<bool>,
    border_pos: Vec<usize>,
    block_of: Vec<usize>,
    pos_in_block: Vec<usize>,
    blocks: Vec<Vec<usize>>,
    // Per term (ineq, cones, persp in derivative order): dense or local.
    dense_term: Vec<bool>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn analyze(m: &Model) -> Structure {
    let mut is_border = vec![false; m.n];
    let mut border_pos = vec![usize::MAX; m.n];
    for (k, &b) in m.border.iter().enumerate() {
        is_border[b] = true;
        border_pos[b] = k;
    }
    let mut supports: Vec<Vec<usize>> = Vec::new();
    for r in &m.ineq {
        supports.push(r.idx.clone());
    }
    for c in &m.cones {
        let mut s: Vec<usize> = c.iter().flat_map(|r| r.idx.iter().cloned()).collect();
        s.sort_unstable();
        s.dedup();
        supports.push(s);
    }
    for p in &m.persp {
        let mut s = vec![p.numerator];
        s.extend(p.denominator);
        supports.push(s);
    }
    let mut parent: Vec<usize> = (0..m.n).collect();
    let mut dense_term = Vec::with_capacity(supports.len());
    for s in &supports {
        let local: Vec<usize> = s.iter().cloned().filter(|&i| !is_border[i]).collect();
        let dense = local.len() > LOCAL_SUPPORT;
        dense_term.push(dense);
        if !dense {
            for w in local.windows(2) {
                let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut block_of = vec![usize::MAX; m.n];
    let mut pos_in_block = vec![usize::MAX; m.n];
    let mut root_block = vec![usize::MAX; m.n];
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in 0..m.n {
        if is_border[i] {
            continue;
        }
        let r = find(&mut parent, i);
        if root_block[r] == usize::MAX {
            root_block[r] = blocks.len();
            blocks.push(Vec::new());
        }
        let b = root_block[r];
        block_of[i] = b;
        pos_in_block[i] = blocks[b].len();
        blocks[b].push(i);
    }
    Structure { is_border, border_pos, block_of, pos_in_block, blocks, dense_term }
}

/// `y ← H v` from the factor rows.
fn hess_apply(terms: &[Vec<FactorRow>], v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for rows in terms {
        for r in rows {
            let s: f64 = r.idx.iter().zip(&r.val).map(|(&i, &a)| a * v[i]).sum();
            for (&i, &a) in r.idx.iter().zip(&r.val) {
                out[i] += a * s;
            }
        }
    }
}

/// Residual of the KKT system `[H Aᵀ; A 0][dx; ν] = [rx; rn]`.
fn kkt_residual_vec(
    m: &Model,
    terms: &[Vec<FactorRow>],
    reg: &[f64],
    dx: &[f64],
    nu: &[f64],
    rx: &[f64],
    rn: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut hx = vec![0.0; m.n];
    hess_apply(terms, dx, &mut hx);
    let mut res_x: Vec<f64> = (0..m.n).map(|i| rx[i] - hx[i] - reg[i] * dx[i]).collect();
    for (j, r) in m.eq.iter().enumerate() {
        for (&i, &a) in r.idx.iter().zip(&r.val) {
            res_x[i] -= a * nu[j];
        }
    }
    let res_n: Vec<f64> = m.eq.iter().enumerate().map(|(j, r)| rn[j] - r.dot(dx)).collect();
    (res_x, res_n)
}

struct Factorization {
    chol: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    // B^{-1} U, stored as n × r with zero rows on border variables.
    z: DMatrix<f64>,
    w_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    // Border/multiplier Schur complement, symmetrically scaled to unit
    // diagonal magnitude by `schur_scale`.
    schur: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    schur_scale: Vec<f64>,
    // H_LL^{-1} [H_LB | A_Lᵀ], n × q.
    g: DMatrix<f64>,
    // [H_BL; A_L] as q × n rows (zero on border).
    c: DMatrix<f64>,
    hbb: DMatrix<f64>,
}

fn block_solve(st: &Structure, chol: &[nalgebra::Cholesky<f64, nalgebra::Dyn>], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for (b, vars) in st.blocks.iter().enumerate() {
        let mut v = DVector::from_iterator(vars.len(), vars.iter().map(|&i| y[i]));
        chol[b].solve_mut(&mut v);
        for (k, &i) in vars.iter().enumerate() {
            out[i] = v[k];
        }
    }
    out
}

fn hll_solve(st: &Structure, f: &Factorization, y: &[f64]) -> Vec<f64> {
    let mut x = block_solve(st, &f.chol, y);
    if let Some(w) = &f.w_chol {
        let zt_y = f.z.tr_mul(&DVector::from_column_slice(y));
        let corr = &f.z * w.solve(&zt_y);
        for i in 0..x.len() {
            x[i] -= corr[i];
        }
    }
    x
}

fn factor(m: &Model, st: &Structure, terms: &[Vec<FactorRow>], reg: &[f64]) -> Option<Factorization> {
    let nb = m.border.len();
    let mut bmats: Vec<DMatrix<f64>> = st.blocks.iter().map(|v| DMatrix::zeros(v.len(), v.len())).collect();
    let mut ucols: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut hlb = DMatrix::<f64>::zeros(m.n, nb);
    let mut hbb = DMatrix::<f64>::zeros(nb, nb);
    for (t, rows) in terms.iter().enumerate() {
        let dense = st.dense_term[t];
        for r in rows {
            let mut local: Vec<(usize, f64)> = Vec::with_capacity(r.idx.len());
            let mut bord: Vec<(usize, f64)> = Vec::new();
            for (&i, &a) in r.idx.iter().zip(&r.val) {
                if st.is_border[i] {
                    bord.push((st.border_pos[i], a));
                } else {
                    local.push((i, a));
                }
            }
            for &(i, a) in &local {
                for &(b, c) in &bord {
                    hlb[(i, b)] += a * c;
                }
            }
            for &(b, a) in &bord {
                for &(b2, c) in &bord {
                    hbb[(b, b2)] += a * c;
                }
            }
            if local.is_empty() {
                continue;
            }
            if dense {
                ucols.push(local);
            } else {
                let blk = st.block_of[local[0].0];
                let bm = &mut bmats[blk];
                for &(i, a) in &local {
                    for &(j, c) in &local {
                        bm[(st.pos_in_block[i], st.pos_in_block[j])] += a * c;
                    }
                }
            }
        }
    }
    let mut chol = Vec::with_capacity(bmats.len());
    for (b, mut bm) in bmats.into_iter().enumerate() {
        for (k, &i) in st.blocks[b].iter().enumerate() {
            bm[(k, k)] += reg[i];
        }
        chol.push(regularized_cholesky(bm)?);
    }
    let r = ucols.len();
    let mut z = DMatrix::<f64>::zeros(m.n, r);
    let mut w_chol = None;
    if r > 0 {
        let mut u = DMatrix::<f64>::zeros(m.n, r);
        for (k, col) in ucols.iter().enumerate() {
            for &(i, a) in col {
                u[(i, k)] += a;
            }
        }
        for k in 0..r {
            let col: Vec<f64> = u.column(k).iter().cloned().collect();
            let s = block_solve(st, &chol, &col);
            z.set_column(k, &DVector::from_vec(s));
        }
        let mut w = u.tr_mul(&z);
        for k in 0..r {
            w[(k, k)] += 1.0;
        }
        w_chol = Some(nalgebra::Cholesky::new(w)?);
    }
    let mut f = Factorization {
        chol,
        z,
        w_chol,
        schur: None,
        schur_scale: Vec::new(),
        g: DMatrix::zeros(m.n, 0),
        c: DMatrix::zeros(0, m.n),
        hbb,
    };
    let me = m.eq.len();
    let q = nb + me;
    if q > 0 {
        let mut c = DMatrix::<f64>::zeros(q, m.n);
        for b in 0..nb {
            for i in 0..m.n {
                if !st.is_border[i] {
                    c[(b, i)] = hlb[(i, b)];
                }
            }
        }
        let mut ab = DMatrix::<f64>::zeros(me, nb);
        for (j, row) in m.eq.iter().enumerate() {
            for (&i, &a) in row.idx.iter().zip(&row.val) {
                if st.is_border[i] {
                    ab[(j, st.border_pos[i])] += a;
                } else {
                    c[(nb + j, i)] += a;
                }
            }
        }
        let mut g = DMatrix::<f64>::zeros(m.n, q);
        for k in 0..q {
            let col: Vec<f64> = c.row(k).iter().cloned().collect();
            g.set_column(k, &DVector::from_vec(hll_solve(st, &f, &col)));
        }
        let mut s = &c * &g * -1.0;
        for b in 0..nb {
            for b2 in 0..nb {
                s[(b, b2)] += f.hbb[(b, b2)] + if b == b2 { reg[m.border[b]] } else { 0.0 };
            }
            for j in 0..me {
                s[(b, nb + j)] += ab[(j, b)];
                s[(nb + j, b)] += ab[(j, b)];
            }
        }
        let d: Vec<f64> = (0..q)
            .map(|i| {
                let v = s[(i, i)].abs();
                if v > 0.0 {
                    1.0 / v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        for i in 0..q {
            for j in 0..q {
                s[(i, j)] *= d[i] * d[j];
            }
        }
        f.schur = Some(s.lu());
        f.schur_scale = d;
        f.g = g;
        f.c = c;
    }
    Some(f)
}

fn structured_solve(
    m: &Model,
    st: &Structure,
    f: &Factorization,
    rx: &[f64],
    rn: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let nb = m.border.len();
    let q = nb + m.eq.len();
    let rl: Vec<f64> = (0..m.n).map(|i| if st.is_border[i] { 0.0 } else { rx[i] }).collect();
    let y = hll_solve(st, f, &rl);
    let mut dx = y.clone();
    let mut nu = vec![0.0; m.eq.len()];
    if q > 0 {
        let mut rhs = DVector::<f64>::zeros(q);
        for b in 0..nb {
            rhs[b] = rx[m.border[b]];
        }
        for j in 0..m.eq.len() {
            rhs[nb + j] = rn[j];
        }
        rhs -= &f.c * DVector::from_column_slice(&y);
        let d = &f.schur_scale;
        rhs.iter_mut().zip(d).for_each(|(v, s)| *v *= s);
        let mut sol = f.schur.as_ref()?.solve(&rhs)?;
        sol.iter_mut().zip(d).for_each(|(v, s)| *v *= s);
        let corr = &f.g * &sol;
        for i in 0..m.n {
            if !st.is_border[i] {
                dx[i] -= corr[i];
            }
        }
        for b in 0..nb {
            dx[m.border[b]] = sol[b];
        }
        for j in 0..m.eq.len() {
            nu[j] = sol[nb + j];
        }
    }
    Some((dx, nu))
}

/// Cholesky factor of `h` after a diagonal shift relative to each entry,
/// with a much smaller floor tied to the largest: barrier curvatures can
/// span twenty orders of magnitude.
fn regularized_cholesky(mut h: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let maxd = (0..h.nrows()).fold(0.0f64, |a, i| a.max(h[(i, i)]));
    for k in 0..h.nrows() {
        h[(k, k)] += 1e-12 * h[(k, k)] + 1e-20 * maxd.max(1e-280);
    }
    nalgebra::Cholesky::new(h)
}

/// Dense factorization of the symmetrically equilibrated KKT matrix: unit
/// diagonal on the Hessian block, unit row norms on the scaled equality rows.
struct DenseKkt {
    d: Vec<f64>,
    n: usize,
    kind: DenseFactor,
}

enum DenseFactor {
    // Hessian Cholesky with a Schur complement over the equalities.
    Schur {
        h: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        a: DMatrix<f64>,
        y: DMatrix<f64>,
        s: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    },
    Full(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl DenseKkt {
    fn new(m: &Model, terms: &[Vec<FactorRow>], reg: &[f64]) -> Self {
        let me = m.eq.len();
        let n = m.n;
        let mut h = DMatrix::<f64>::zeros(n, n);
        for rows in terms {
            for r in rows {
                for (&i, &a) in r.idx.iter().zip(&r.val) {
                    for (&j, &c) in r.idx.iter().zip(&r.val) {
                        h[(i, j)] += a * c;
                    }
                }
            }
        }
        for i in 0..n {
            h[(i, i)] += reg[i];
        }
        let mut d = vec![1.0; n + me];
        for i in 0..n {
            d[i] = 1.0 / h[(i, i)].sqrt().max(1e-150);
        }
        let mut a = DMatrix::<f64>::zeros(me, n);
        for (j, r) in m.eq.iter().enumerate() {
            let nrm = r.idx.iter().zip(&r.val).fold(0.0f64, |w, (&i, &v)| w.max((v * d[i]).abs()));
            d[n + j] = if nrm > 0.0 { 1.0 / nrm } else { 1.0 };
            for (&i, &v) in r.idx.iter().zip(&r.val) {
                a[(j, i)] += v * d[i] * d[n + j];
            }
        }
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] *= d[i] * d[j];
            }
        }
        let kind = match regularized_cholesky(h.clone()) {
            Some(h) => {
                let y = h.solve(&a.transpose());
                let s = (me > 0).then(|| (&a * &y).lu());
                DenseFactor::Schur { h, a, y, s }
            }
            None => {
                let mut k = DMatrix::<f64>::zeros(n + me, n + me);
                k.view_mut((0, 0), (n, n)).copy_from(&h);
                k.view_mut((n, 0), (me, n)).copy_from(&a);
                k.view_mut((0, n), (n, me)).copy_from(&a.transpose());
                DenseFactor::Full(k.lu())
            }
        };
        DenseKkt { d, n, kind }
    }

    fn solve(&self, bx: &[f64], bn: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let (n, d) = (self.n, &self.d);
        let me = bn.len();
        let bx = DVector::from_iterator(n, bx.iter().zip(d).map(|(v, s)| v * s));
        let bn = DVector::from_iterator(me, bn.iter().zip(&d[n..]).map(|(v, s)| v * s));
        let (x, nu) = match &self.kind {
            DenseFactor::Schur { h, a, y, s } => {
                let x0 = h.solve(&bx);
                match s {
                    Some(s) => {
                        let nu = s.solve(&(a * &x0 - bn))?;
                        (x0 - y * &nu, nu)
                    }
                    None => (x0, DVector::zeros(0)),
                }
            }
            DenseFactor::Full(lu) => {
                let mut rhs = DVector::zeros(n + me);
                rhs.rows_mut(0, n).copy_from(&bx);
                rhs.rows_mut(n, me).copy_from(&bn);
                let sol = lu.solve(&rhs)?;
                (sol.rows(0, n).into_owned(), sol.rows(n, me).into_owned())
            }
        };
        Some(((0..n).map(|i| x[i] * d[i]).collect(), (0..me).map(|j| nu[j] * d[n + j]).collect()))
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

/// Solve the Newton KKT system, refining the structured solution and
/// falling back to a dense factorization when it is not accurate.
fn newton_direction(
    m: &Model,
    st: &Structure,
    terms: &[Vec<FactorRow>],
    grad: &[f64],
    dense: bool,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let reg = vec![0.0; m.n];
    let mut solver = KktSolver {
        m,
        st,
        terms,
        reg: &reg,
        structured: if dense { None } else { factor(m, st, terms, &reg) },
        dense: None,
    };
    let rx: Vec<f64> = grad.iter().map(|g| -g).collect();
    if m.eq.is_empty() {
        return solver.solve(&rx, 1e-8);
    }
    // Only the multipliers of this pass are kept, as the shift below.
    let (_, nu) = solver.solve(&rx, 1e-6)?;
    // Late in the path the objective gradient is nearly cancelled by Aᵀν, so
    // a second pass solves for the correction against the reduced gradient.
    let mut rx2 = rx;
    for (j, row) in m.eq.iter().enumerate() {
        for (&i, &a) in row.idx.iter().zip(&row.val) {
            rx2[i] -= a * nu[j];
        }
    }
    let (dx2, dnu) = solver.solve(&rx2, 1e-8)?;
    let nu = nu.iter().zip(&dnu).map(|(a, b)| a + b).collect();
    Some((dx2, nu))
}

struct KktSolver<'a> {
    m: &'a Model,
    st: &'a Structure,
    terms: &'a [Vec<FactorRow>],
    reg: &'a [f64],
    structured: Option<Factorization>,
    dense: Option<DenseKkt>,
}

impl KktSolver<'_> {
    /// Structured solve accepted once the residual is within `accept` of
    /// the right-hand side; otherwise the dense factorization.
    fn solve(&mut self, rx: &[f64], accept: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let (m, terms, reg) = (self.m, self.terms, self.reg);
        let rn = vec![0.0; m.eq.len()];
        let scale = norm_inf(rx).max(1e-300);
        if let Some(f) = &self.structured {
            if let Some((mut dx, mut nu)) = structured_solve(m, self.st, f, rx, &rn) {
                // Refinement reuses the factorization; ill-conditioned barrier
                // Hessians late in the path can need several rounds.
                let mut last = f64::INFINITY;
                for _ in 0..10 {
                    let (res_x, res_n) = kkt_residual_vec(m, terms, reg, &dx, &nu, rx, &rn);
                    let err = norm_inf(&res_x).max(norm_inf(&res_n));
                    if !(err < last) {
                        break;
                    }
                    if err <= 1e-12 * scale {
                        return Some((dx, nu));
                    }
                    last = err;
                    let (cx, cn) = structured_solve(m, self.st, f, &res_x, &res_n)?;
                    dx.iter_mut().zip(&cx).for_each(|(a, b)| *a += b);
                    nu.iter_mut().zip(&cn).for_each(|(a, b)| *a += b);
                }
                let (res_x, res_n) = kkt_residual_vec(m, terms, reg, &dx, &nu, rx, &rn);
                let err = norm_inf(&res_x).max(norm_inf(&res_n));
                if err <= accept * scale {
                    return Some((dx, nu));
                }
            }
            // Heavy dense terms make the low-rank update cancel; later passes
            // on this matrix go straight to the dense factorization.
            self.structured = None;
        }
        let dense = self.dense.get_or_insert_with(|| DenseKkt::new(m, terms, reg));
        let (mut dx, mut nu) = dense.solve(rx, &rn)?;
        for _ in 0..3 {
            let (res_x, res_n) = kkt_residual_vec(m, terms, reg, &dx, &nu, rx, &rn);
            if !res_x.iter().chain(&res_n).all(|v| v.is_finite()) {
                break;
            }
            let (cx, cn) = dense.solve(&res_x, &res_n)?;
            dx.iter_mut().zip(&cx).for_each(|(a, b)| *a += b);
            nu.iter_mut().zip(&cn).for_each(|(a, b)| *a += b);
        }
        dx.iter().chain(&nu).all(|v| v.is_finite()).then_some((dx, nu))
    }
}

// ---------------------------------------------------------------------------
// Barrier method.

struct Run<'a> {
    settings: &'a SolverSettings,
    iterations: usize,
    trace: Vec<TraceRow>,
}

enum Centering {
    Done,
    Budget,
    /// Phase I reached a negative slack.
    Feasible,
    Failed,
}

impl Run<'_> {
    /// Newton centering at fixed `t`. Returns the last multipliers.
    #[allow(clippy::too_many_arguments)]
    fn center(
        &mut self,
        m: &Model,
        st: &Structure,
        x: &mut Vec<f64>,
        nu: &mut Vec<f64>,
        t: f64,
        phase: u8,
        threshold: f64,
        max_steps: usize,
    ) -> Centering {
        let mut best = f64::INFINITY;
        let mut stalled = 0;
        let mut full_step = false;
        for _ in 0..max_steps {
            if self.iterations >= self.settings.max_iter {
                return Centering::Budget;
            }
            let (g, terms) = derivatives(m, x, t);
            let Some((dx, newnu)) = newton_direction(m, st, &terms, &g, self.settings.dense) else {
                return Centering::Failed;
            };
            *nu = newnu;
            // dxᵀ H dx rather than -gᵀdx: the latter loses the sign to
            // cancellation once the gradient is large and dx is tiny.
            let mut hdx = vec![0.0; m.n];
            hess_apply(&terms, &dx, &mut hdx);
            let decrement: f64 = hdx.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let slope = -decrement;
            if !(decrement.is_finite()) {
                return Centering::Failed;
            }
            if decrement / 2.0 <= threshold {
                return Centering::Done;
            }
            // Inside the quadratic region the decrement should collapse after
            // each step. One that keeps bouncing, or a step the line search
            // has to damp, is sitting on the roundoff floor, which grows
            // with t.
            if decrement < 0.5 * best {
                best = decrement;
                stalled = 0;
            } else if full_step || best < 1e-4 {
                stalled += 1;
            }
            if best < 1e-4 && stalled >= 4 {
                return Centering::Done;
            }
            // Largest step keeping the linear slacks positive.
            let mut alpha: f64 = 1.0;
            for r in &m.ineq {
                let d = r.dot(&dx);
                if d < 0.0 {
                    alpha = alpha.min(-0.99 * r.eval(x) / d);
                }
            }
            let f0 = m.merit(x, t);
            let tol = 1e-13 * f0.abs().max(1.0);
            let mut xn = vec![0.0; m.n];
            let mut accepted = false;
            for _ in 0..80 {
                for i in 0..m.n {
                    xn[i] = x[i] + alpha * dx[i];
                }
                let f1 = m.merit(&xn, t);
                if f1.is_finite() && f1 <= f0 + 0.25 * alpha * slope + tol {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            self.iterations += 1;
            if self.settings.record_trace {
                self.trace.push(TraceRow {
                    phase,
                    iteration: self.iterations,
                    t,
                    objective: m.objective(x),
                    decrement,
                    step: if accepted { alpha } else { 0.0 },
                });
            }
            if !accepted {
                // No progress possible at this precision.
                return Centering::Done;
            }
            full_step = alpha == 1.0;
            std::mem::swap(x, &mut xn);
            if phase == 1 && x[m.n - 1] < -1e-2 {
                return Centering::Feasible;
            }
        }
        Centering::Done
    }
}

fn project_onto_equalities(m: &Model, x: &mut [f64]) {
    if m.eq.is_empty() {
        return;
    }
    let me = m.eq.len();
    let mut a = DMatrix::<f64>::zeros(me, m.n);
    for (j, r) in m.eq.iter().enumerate() {
        for (&i, &v) in r.idx.iter().zip(&r.val) {
            a[(j, i)] += v;
        }
    }
    let res = DVector::from_iterator(me, m.eq.iter().map(|r| r.eval(x)));
    let aat = &a * a.transpose();
    let svd = aat.svd(true, true);
    let Ok(y) = svd.solve(&res, 1e-12 * svd.singular_values.max()) else { return };
    let corr = a.transpose() * y;
    for i in 0..m.n {
        x[i] -= corr[i];
    }
}

fn strictly_feasible(m: &Model, x: &[f64]) -> bool {
    m.in_domain(x)
}

/// Solve with an optional starting point (projected onto the equalities).
pub fn solve(problem: &ConicProblem, settings: &SolverSettings, start: Option<&[f64]>) -> ConicSolution {
    let n = problem.num_vars();
    let mut run = Run { settings, iterations: 0, trace: Vec::new() };
    let fail = |status, x: Vec<f64>, run: Run| ConicSolution {
        objective_value: problem.objective(&x),
        values: x,
        kkt_residual: f64::INFINITY,
        status,
        iterations: run.iterations,
        trace: run.trace,
    };
    let model = match build_model(problem) {
        Ok(m) => m,
        Err(status) => return fail(status, vec![0.0; n], run),
    };
    let mut x: Vec<f64> = match start {
        Some(s) if s.len() == n => s.to_vec(),
        _ => vec![0.0; n],
    };
    project_onto_equalities(&model, &mut x);

    if !strictly_feasible(&model, &x) {
        let p1 = phase_one_model(&model);
        let st1 = analyze(&p1);
        let mut s0: f64 = 0.0;
        for r in &model.ineq {
            s0 = s0.max(-r.eval(&x));
        }
        for c in &model.cones {
            let (u, v, w) = (c[0].eval(&x), c[1].eval(&x), c[2].eval(&x));
            s0 = s0.max(-u).max(-v).max(w.abs() - u.min(v));
        }
        let mut x1 = x.clone();
        x1.push(s0 + 1.0);
        let mut nu = vec![0.0; p1.eq.len()];
        let theta = p1.theta();
        let mut t = 1.0;
        let found = loop {
            match run.center(&p1, &st1, &mut x1, &mut nu, t, 1, 1e-10, usize::MAX) {
                Centering::Feasible => break true,
                Centering::Budget => return fail(SolveStatus::MaxIter, x1[..n].to_vec(), run),
                Centering::Failed => break false,
                Centering::Done => {}
            }
            let s = x1[n];
            if s < 0.0 {
                break true;
            }
            if s - theta / t > 0.0 || theta / t < settings.tol * 1e-3 {
                break false;
            }
            t *= 10.0;
        };
        x1.truncate(n);
        if !found || !strictly_feasible(&model, &x1) {
            return fail(SolveStatus::Infeasible, x1, run);
        }
        x = x1;
    }

    let st = analyze(&model);
    let theta = model.theta();
    let mut nu = vec![0.0; model.eq.len()];
    let f0 = model.objective(&x);
    let mut t = if theta > 0.0 { (theta / f0.abs().max(1.0)).clamp(1e-2, 1e4) } else { 1.0 };
    loop {
        match run.center(&model, &st, &mut x, &mut nu, t, 2, 1e-10, usize::MAX) {
            Centering::Budget => break,
            Centering::Failed => {
                return ConicSolution {
                    objective_value: problem.objective(&x),
                    values: x,
                    kkt_residual: f64::INFINITY,
                    status: SolveStatus::MaxIter,
                    iterations: run.iterations,
                    trace: run.trace,
                }
            }
            Centering::Done | Centering::Feasible => {}
        }
        let gap = theta / t / model.objective(&x).abs().max(GAP_FLOOR);
        if theta == 0.0 || gap <= settings.tol {
            break;
        }
        t *= 10.0;
    }
    let mut kkt = kkt_measure(&model, &st, &x, t, settings.dense);
    if kkt > settings.tol && kkt.is_finite() {
        // Polish the last centering; the stationarity part scales with the
        // Newton decrement.
        run.center(&model, &st, &mut x, &mut nu, t, 2, 1e-24, 6);
        kkt = kkt_measure(&model, &st, &x, t, settings.dense);
    }
    let gap = if theta > 0.0 { theta / t / model.objective(&x).abs().max(GAP_FLOOR) } else { 0.0 };
    let status = if run.iterations < settings.max_iter && gap <= settings.tol && kkt <= settings.tol {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIter
    };
    ConicSolution {
        objective_value: problem.objective(&x),
        values: x,
        kkt_residual: kkt,
        status,
        iterations: run.iterations,
        trace: run.trace,
    }
}

/// `max(equality residual, inequality violation, relative duality measure,
/// scaled stationarity residual)` at the final iterate.
fn kkt_measure(m: &Model, st: &Structure, x: &[f64], t: f64, dense: bool) -> f64 {
    let fscale = m.objective(x).abs().max(GAP_FLOOR);
    let mut worst = m.eq_residual(x);
    for r in &m.ineq {
        worst = worst.max(-r.eval(x));
    }
    let theta = m.theta();
    if theta > 0.0 {
        worst = worst.max(theta / t / fscale);
    }
    let (g, terms) = derivatives(m, x, t);
    let Some((dx, nu)) = newton_direction(m, st, &terms, &g, dense) else {
        return f64::INFINITY;
    };
    // Stationarity with the primal-dual multiplier estimates of the last
    // Newton system, i.e. the barrier gradient linearized at x. Evaluating
    // 1/s directly at an active row is limited by the roundoff in s itself.
    let mut r = g;
    let mut hdx = vec![0.0; m.n];
    hess_apply(&terms, &dx, &mut hdx);
    let mut mag = gradient_magnitudes(m, x, t);
    for i in 0..m.n {
        r[i] += hdx[i];
        mag[i] += hdx[i].abs();
    }
    for (j, row) in m.eq.iter().enumerate() {
        for (&i, &a) in row.idx.iter().zip(&row.val) {
            r[i] += a * nu[j];
            mag[i] += (a * nu[j]).abs();
        }
    }
    let stat = r.iter().zip(&mag).fold(0.0f64, |w, (ri, mi)| w.max(ri.abs() / mi.max(t)));
    // The corrected multiplier of row i is (1 - a·dx/s) / (t s).
    let dual_infeas = m.ineq.iter().fold(0.0f64, |w, row| w.max(row.dot(&dx) / row.eval(x) - 1.0));
    worst.max(stat).max(dual_infeas)
}

/// Componentwise sum of absolute contributions to the merit gradient.
fn gradient_magnitudes(m: &Model, x: &[f64], t: f64) -> Vec<f64> {
    let ln2 = std::f64::consts::LN_2;
    let mut g = vec![0.0; m.n];
    for &(i, c) in &m.lin {
        g[i] += (t * c).abs();
    }
    for r in &m.ineq {
        let s = r.eval(x);
        for (&i, &a) in r.idx.iter().zip(&r.val) {
            g[i] += (a / s).abs();
        }
    }
    for c in &m.cones {
        let (u, v, w) = (c[0].eval(x), c[1].eval(x), c[2].eval(x));
        let h = u * v - w * w;
        let gr = [v, u, -2.0 * w];
        for (k, row) in c.iter().enumerate() {
            for (&i, &a) in row.idx.iter().zip(&row.val) {
                g[i] += (gr[k] * a / h).abs();
            }
        }
    }
    for p in &m.persp {
        let pv = x[p.numerator];
        match p.denominator {
            Some(si) => {
                let z = p.gain * pv / x[si];
                g[p.numerator] += (t * p.weight * p.gain / ((1.0 + z) * ln2)).abs();
                g[si] += (t * p.weight * (z.ln_1p() - z / (1.0 + z)) / ln2).abs();
            }
            None => {
                g[p.numerator] += (t * p.weight * p.gain / ((1.0 + p.gain * pv) * ln2)).abs();
            }
        }
    }
    g
}
