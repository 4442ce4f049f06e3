//! R-positivity criterion and the diffusion conditioned to survive.
//!
//! The conditioned process solves `dY = dB − φ(Y) dt` with
//! `φ = q − η₁'/η₁`, where `η₁` is the eigenfunction at `λ_c`. Its scale
//! density is `e^{Q^Y}` with `Q^Y(y) = Q(y) − Q(c) − 2 log(η₁(y)/η₁(c))`
//! and its speed measure is `m(dy) = 2 e^{−Q^Y(y)} dy`.
//!
//! `η₁` is evaluated at the certified lower end of the `λ_c` bracket. Past
//! some point the solution is dominated by numerical contamination from the
//! other fundamental solution. The model therefore carries a *reliable
//! range*: the points where the drifts computed at both ends of the
//! bracket agree.

use crate::drift_expr::DriftSpec;
use crate::eigen::{EigenSolution, EigenSolver, LambdaC, Node};
use crate::error::{QsdError, Result};
use crate::measures::{ClassificationReport, Diffusion, Estimate, Verdict};
use crate::numeric::{gauss_legendre8, hermite, hermite_integral, LogGridFunction, SignedLog};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionOptions {
    /// Product below this fraction of its peak counts as tending to zero.
    pub vanish_ratio: f64,
    /// Relative change counted as flat.
    pub plateau_rel: f64,
    /// Consecutive flat doublings needed for a plateau.
    pub plateau_run: usize,
    pub ladder_start: f64,
    pub ladder_cap: f64,
}

impl Default for CriterionOptions {
    fn default() -> Self {
        CriterionOptions { vanish_ratio: 1e-6, plateau_rel: 1e-3, plateau_run: 3, ladder_start: 1.0, ladder_cap: 65536.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriterionVerdict {
    /// The product tends to zero: the killed process is R-positive.
    Satisfied,
    /// The product settles at a positive value. The theorem is silent here.
    NotSatisfied,
    Undecided,
}

impl std::fmt::Display for CriterionVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CriterionVerdict::Satisfied => "R-positive (criterion satisfied)",
            CriterionVerdict::NotSatisfied => "criterion not satisfied",
            CriterionVerdict::Undecided => "undecided",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RPositivity {
    pub verdict: CriterionVerdict,
    /// `(x, μ([x,∞))·Λ(x))` on the doubling ladder.
    pub ladder: Vec<(f64, f64)>,
    /// Last product value; the plateau level when not satisfied.
    pub limit: f64,
    pub peak: f64,
    pub options: CriterionOptions,
}

/// Evaluates `μ([x,∞))·Λ(x)` on a doubling ladder.
pub fn rpositivity_with(diff: &Diffusion, report: &ClassificationReport, opts: &CriterionOptions) -> Result<RPositivity> {
    if report.natural_at_infinity() != Verdict::Holds {
        return Err(QsdError::InvalidArgument(format!(
            "the criterion needs (H); H1 {}, H2 {}",
            report.h1, report.h2
        )));
    }
    let mut ladder = Vec::new();
    let mut peak = 0.0f64;
    let mut flat = 0usize;
    let mut x = opts.ladder_start;
    let mut verdict = CriterionVerdict::Undecided;
    while x <= opts.ladder_cap {
        let p = diff.log_criterion_product(x)?.exp();
        peak = peak.max(p);
        if let Some(&(_, prev)) = ladder.last() {
            let prev: f64 = prev;
            if (p - prev).abs() <= opts.plateau_rel * p {
                flat += 1;
            } else {
                flat = 0;
            }
        }
        ladder.push((x, p));
        if p < opts.vanish_ratio * peak {
            verdict = CriterionVerdict::Satisfied;
            break;
        }
        if flat >= opts.plateau_run {
            verdict = CriterionVerdict::NotSatisfied;
            break;
        }
        x *= 2.0;
    }
    let limit = ladder.last().map(|l| l.1).unwrap_or(f64::NAN);
    Ok(RPositivity { verdict, ladder, limit, peak, options: *opts })
}

pub fn rpositivity_criterion(spec: &DriftSpec) -> Result<RPositivity> {
    let diff = Diffusion::new(spec.clone());
    let report = diff.classify_boundaries()?;
    rpositivity_with(&diff, &report, &CriterionOptions::default())
}

/// Relative agreement required between the drifts at the two bracket ends.
pub const RELIABLE_TOL: f64 = 1e-3;
/// Bracket width used for the principal eigenfunction; contamination by
/// the growing solution scales with it.
pub const PRINCIPAL_RTOL: f64 = 1e-13;
/// Step of the fast drift table.
const TABLE_STEP: f64 = 1.0 / 128.0;
/// Largest tabulated abscissa.
const TABLE_CAP: f64 = 256.0;
/// Relative tail below which the mass of `m` counts as converged.
pub const MASS_TAIL_TOL: f64 = 1e-6;

/// Total mass of the speed measure of `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedMass {
    pub value: Estimate,
    pub reference_point: f64,
    /// `(x, partial mass)` at the doubling ladder.
    pub evidence: Vec<(f64, f64)>,
    /// Where the mass computation stopped.
    pub truncation: f64,
}

/// `log φ(x)` plus `Q(x)`, i.e. `log η(x)`.
fn log_eta(n: &Node) -> f64 {
    n.log_phi() + n.big_q
}

/// `m(0, X]` for `m(dx) = 2 e^{Q(c)}/η₁²(c) · η₁²(x) e^{−Q(x)} dx`, from
/// the nodes of `principal` up to `limit`.
pub fn y_speed_mass(principal: &EigenSolution, diff: &Diffusion, c: f64, limit: f64) -> Result<SpeedMass> {
    if !(c > 0.0 && c < limit) {
        return Err(QsdError::InvalidArgument(format!("reference point {c} outside (0, {limit})")));
    }
    let nc = principal.node_at(c, diff)?;
    let log_pref = std::f64::consts::LN_2 + nc.big_q - 2.0 * log_eta(&nc);
    let spec = principal.spec();
    // density and slope of m
    let dens = |n: &Node| -> (f64, f64) {
        if n.x == 0.0 {
            return (0.0, 0.0);
        }
        let g = (log_pref + 2.0 * log_eta(n) - n.big_q).exp();
        (g, g * (2.0 * n.u() - 2.0 * spec.value(n.x)))
    };
    let nodes: Vec<&Node> = principal.nodes().iter().take_while(|n| n.x <= limit).collect();
    let mut total = 0.0;
    let mut evidence = Vec::new();
    let mut next_rung = 1.0;
    let mut increments: Vec<f64> = Vec::new();
    let mut rung_start = 0.0;
    for w in nodes.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (ga, da) = dens(a);
        let (gb, db) = dens(b);
        total += hermite_integral(b.x - a.x, ga, gb, da, db);
        while b.x >= next_rung {
            evidence.push((b.x, total));
            increments.push(total - rung_start);
            rung_start = total;
            next_rung *= 2.0;
        }
        // local power-law tail of the density
        let s = b.x * (2.0 * b.u() - 2.0 * spec.value(b.x));
        if b.x > c && s < -1.0 && gb * b.x / (-s - 1.0) < MASS_TAIL_TOL * total {
            evidence.push((b.x, total));
            return Ok(SpeedMass { value: Estimate::Finite(total), reference_point: c, evidence, truncation: b.x });
        }
        let n = increments.len();
        if n >= 5 && increments[n - 5..].windows(2).all(|p| p[1] >= p[0]) && b.x > c {
            return Ok(SpeedMass { value: Estimate::Infinite, reference_point: c, evidence, truncation: b.x });
        }
    }
    let truncation = nodes.last().map(|n| n.x).unwrap_or(0.0);
    Ok(SpeedMass { value: Estimate::Undecided, reference_point: c, evidence, truncation })
}

/// The conditioned diffusion built from the principal eigenfunction.
#[derive(Debug, Clone)]
pub struct ConditionedModel {
    pub lambda: f64,
    pub principal: EigenSolution,
    pub reference_point: f64,
    /// Upper end of the range where `η₁` is trusted.
    pub reliable_limit: f64,
    /// `Q^Y` on the nodes inside the reliable range.
    pub qy: LogGridFunction,
    /// `Λ^Y(y) = ∫_c^y e^{Q^Y}` on the same nodes.
    pub lambda_y: LogGridFunction,
    pub mass: SpeedMass,
    q0: f64,
    table: DriftTable,
}

/// Uniform table of `ψ(y) = φ(y) + 1/y` with slopes, for fast drift
/// evaluation in simulation.
#[derive(Debug, Clone)]
struct DriftTable {
    step: f64,
    psi: Vec<f64>,
    dpsi: Vec<f64>,
}

impl ConditionedModel {
    /// Builds the model from the `λ_c` bracket. `reference_point` defaults
    /// to the caller's choice (usually the median of the minimal QSD).
    pub fn new(solver: &EigenSolver, lambda_c: &LambdaC, reference_point: f64) -> Result<Self> {
        let diff = solver.diffusion();
        let cap = solver.options().horizon_cap;
        let mut lc = lambda_c.clone();
        solver.refine_lambda_c(&mut lc, PRINCIPAL_RTOL)?;
        let lambda_c = &lc;
        // the lower end may sit above λ_c by less than the horizon
        // resolution, so a sign change far out is tolerated below
        let lo = solver.solve(lambda_c.lo, cap)?;
        let hi = solver.solve_until(lambda_c.hi, |_| false)?;
        let spec = diff.spec().clone();
        let mut reliable = 0.0;
        let hi_end = hi.horizon.min(hi.first_sign_change.unwrap_or(f64::INFINITY));
        let lo_end = lo.first_sign_change.unwrap_or(lo.horizon);
        for n in lo.nodes().iter().skip(1) {
            if n.x >= hi_end || n.x >= lo_end {
                break;
            }
            let m = hi.node_at(n.x, diff)?;
            let q = spec.value(n.x);
            let (ul, uh) = (n.u(), m.u());
            if (ul - uh).abs() > RELIABLE_TOL * (q.abs() + ul.abs()) || m.sign_eta() <= 0 || n.sign_eta() <= 0 {
                break;
            }
            reliable = n.x;
        }
        if !(reference_point > 0.0 && reference_point < reliable) {
            return Err(QsdError::InvalidArgument(format!(
                "reference point {reference_point} outside the reliable range (0, {reliable})"
            )));
        }
        let nc = lo.node_at(reference_point, diff)?;
        // c is inserted as a node so the anchor Λ^Y(c) = 0 is exact
        let mut nodes: Vec<Node> = lo.nodes().iter().copied().take_while(|n| n.x <= reliable).collect();
        let ic = nodes.partition_point(|n| n.x < reference_point);
        if nodes[ic].x != reference_point {
            nodes.insert(ic, nc);
        }
        // Q^Y = −(Q(y) − Q(c)) − 2(log φ(y) − log φ(c))
        let qy_of = |n: &Node| -(n.big_q - nc.big_q) - 2.0 * (n.log_phi() - nc.log_phi());
        let grid: Vec<f64> = nodes.iter().map(|n| n.x).collect();
        let qy_vals: Vec<f64> = nodes.iter().map(|n| if n.x == 0.0 { f64::INFINITY } else { qy_of(n) }).collect();
        let qy = LogGridFunction::new(
            grid.clone(),
            qy_vals.iter().map(|&v| if v == f64::INFINITY { SignedLog::new(1, f64::INFINITY) } else { SignedLog::from_f64(v) }).collect(),
        )?;
        // Λ^Y by Gauss–Legendre on re-integrated η; e^{Q^Y} ~ 1/y² near 0
        // is too steep for the node values alone
        let w = |y: f64| lo.node_at(y, diff).map(|n| qy_of(&n).exp()).unwrap_or(f64::NAN);
        let mut cum = vec![0.0; nodes.len()];
        for i in 2..nodes.len() {
            cum[i] = cum[i - 1] + gauss_legendre8(w, grid[i - 1], grid[i]);
        }
        let at_c = cum[ic];
        if !at_c.is_finite() || cum.iter().any(|v| !v.is_finite()) {
            return Err(QsdError::Inconsistent("Λ^Y is not finite on the reliable range".into()));
        }
        let lambda_y_vals: Vec<SignedLog> = (0..nodes.len())
            .map(|i| if i == 0 { SignedLog::new(-1, f64::INFINITY) } else { SignedLog::from_f64(cum[i] - at_c) })
            .collect();
        let lambda_y = LogGridFunction::new(grid, lambda_y_vals)?;
        let mass = y_speed_mass(&lo, diff, reference_point, reliable)?;
        let table = DriftTable::build(&lo, diff, reliable.min(TABLE_CAP), lambda_c.lo)?;
        Ok(ConditionedModel {
            lambda: lambda_c.lo,
            reference_point,
            reliable_limit: reliable,
            qy,
            lambda_y,
            mass,
            q0: spec.value(0.0),
            table,
            principal: lo,
        })
    }

    /// Exact drift `φ(y) = q(y) − η₁'(y)/η₁(y)` by re-integration; below the
    /// first interior node the asymptote `−1/y + q(0)` is used.
    pub fn drift(&self, y: f64, diff: &Diffusion) -> Result<f64> {
        conditioned_drift(&self.principal, diff, y, self.reliable_limit)
    }

    /// Interpolated drift for simulation. `None` beyond the tabulated range.
    #[inline]
    pub fn drift_fast(&self, y: f64) -> Option<f64> {
        let t = &self.table;
        if y <= t.step {
            return Some(-1.0 / y + self.q0);
        }
        let k = (y / t.step) as usize;
        if k + 1 >= t.psi.len() {
            return None;
        }
        let x0 = k as f64 * t.step;
        let psi = hermite(x0, x0 + t.step, t.psi[k], t.psi[k + 1], t.dpsi[k], t.dpsi[k + 1], y);
        Some(psi - 1.0 / y)
    }

    /// Upper end of the fast drift table.
    pub fn table_limit(&self) -> f64 {
        (self.table.psi.len() - 1) as f64 * self.table.step
    }

    /// First interior node: smallest `y` at which the drift is interpolated.
    pub fn first_node(&self) -> f64 {
        self.principal.nodes().get(1).map(|n| n.x).unwrap_or(f64::NAN)
    }
}

impl DriftTable {
    fn build(sol: &EigenSolution, diff: &Diffusion, limit: f64, lambda: f64) -> Result<Self> {
        let spec = sol.spec();
        let n = (limit / TABLE_STEP).floor() as usize;
        let mut psi = Vec::with_capacity(n + 1);
        let mut dpsi = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let y = (k as f64 * TABLE_STEP).max(TABLE_STEP * 0.5);
            let node = sol.node_at(y, diff)?;
            let q = spec.value(y);
            let u = node.u();
            let e = 1e-6 * (1.0 + y);
            let dq = (spec.value(y + e) - spec.value((y - e).max(0.0))) / (y + e - (y - e).max(0.0));
            let du = -u * u + 2.0 * q * u - 2.0 * lambda;
            psi.push(q - u + 1.0 / y);
            dpsi.push(dq - du - 1.0 / (y * y));
        }
        // the k = 0 entry is evaluated at half a step; use it only as a
        // value and drop the slope
        if let Some(d) = dpsi.first_mut() {
            *d = if psi.len() > 1 { (psi[1] - psi[0]) / (TABLE_STEP * 0.5) } else { 0.0 };
        }
        Ok(DriftTable { step: TABLE_STEP, psi, dpsi })
    }
}

/// `φ(y) = q(y) − η₁'(y)/η₁(y)`.
pub fn conditioned_drift(principal: &EigenSolution, diff: &Diffusion, y: f64, limit: f64) -> Result<f64> {
    if !(y > 0.0) || y > limit {
        return Err(QsdError::OutOfGrid { x: y, lo: 0.0, hi: limit });
    }
    let first = principal.nodes().get(1).map(|n| n.x).unwrap_or(f64::INFINITY);
    let spec = principal.spec();
    if y < first {
        return Ok(-1.0 / y + spec.value(0.0));
    }
    let n = principal.node_at(y, diff)?;
    Ok(spec.value(y) - n.u())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(spec: DriftSpec, c: f64) -> (Diffusion, ConditionedModel) {
        let diff = Diffusion::new(spec);
        let rep = diff.classify_boundaries().unwrap();
        let m = {
            let solver = EigenSolver::new(&diff);
            let lc = solver.lambda_c(&rep).unwrap();
            ConditionedModel::new(&solver, &lc, c).unwrap()
        };
        (diff, m)
    }

    #[test]
    fn criterion_verdicts() {
        let r = rpositivity_criterion(&DriftSpec::linear(1.0)).unwrap();
        assert_eq!(r.verdict, CriterionVerdict::Satisfied);
        assert!(r.limit < 1e-6);
        let r = rpositivity_criterion(&DriftSpec::constant(1.0)).unwrap();
        assert_eq!(r.verdict, CriterionVerdict::NotSatisfied);
        assert!((r.limit - 0.25).abs() < 1e-3);
        let r = rpositivity_criterion(&DriftSpec::linear(2.0)).unwrap();
        assert_eq!(r.verdict, CriterionVerdict::Satisfied);
    }

    #[test]
    fn criterion_requires_h() {
        assert!(rpositivity_criterion(&DriftSpec::constant(-1.0)).is_err());
    }

    #[test]
    fn drift_closed_form_constant() {
        let (diff, m) = model(DriftSpec::constant(1.0), 1.5);
        assert!(m.reliable_limit > 10.0, "{}", m.reliable_limit);
        for k in 0..=99 {
            let y = 0.1 + 0.1 * k as f64;
            let phi = m.drift(y, &diff).unwrap();
            assert!((phi + 1.0 / y).abs() < 1e-5, "y={y}: {phi}");
            let fast = m.drift_fast(y).unwrap();
            assert!((fast + 1.0 / y).abs() < 1e-5, "y={y}: fast {fast}");
        }
        assert!((m.drift(2.0, &diff).unwrap() + 0.5).abs() < 1e-6);
        let y = 1e-4;
        assert!((y * m.drift(y, &diff).unwrap() + 1.0).abs() < 1e-3);
    }

    #[test]
    fn speed_mass_verdicts() {
        let (_, m) = model(DriftSpec::linear(1.0), 0.8);
        assert!(matches!(m.mass.value, Estimate::Finite(_)), "{:?}", m.mass);
        let (_, m) = model(DriftSpec::constant(1.0), 1.5);
        assert!(m.mass.value.is_infinite(), "{:?}", m.mass);
    }

    #[test]
    fn speed_mass_reference_scaling() {
        let (diff, m) = model(DriftSpec::linear(1.0), 0.8);
        let lim = m.reliable_limit;
        let m1 = y_speed_mass(&m.principal, &diff, 0.5, lim).unwrap().value.finite().unwrap();
        let m2 = y_speed_mass(&m.principal, &diff, 1.2, lim).unwrap().value.finite().unwrap();
        let n1 = m.principal.node_at(0.5, &diff).unwrap();
        let n2 = m.principal.node_at(1.2, &diff).unwrap();
        let expect = (n1.big_q - n2.big_q + 2.0 * (log_eta(&n2) - log_eta(&n1))).exp();
        assert!((m1 / m2 - expect).abs() < 1e-8 * expect);
    }

    #[test]
    fn qy_identity_and_anchor() {
        let (diff, m) = model(DriftSpec::linear(1.0), 0.8);
        let c = m.principal.node_at(0.8, &diff).unwrap();
        for (i, &x) in m.qy.grid().iter().enumerate().skip(1) {
            let n = &m.principal.node_at(x, &diff).unwrap();
            let qy = m.qy.values()[i].value();
            let prod = qy.exp() * (2.0 * (log_eta(n) - log_eta(&c))).exp() * (c.big_q - n.big_q).exp();
            assert!((prod - 1.0).abs() < 1e-9);
        }
        let ly = m.lambda_y.interpolate(0.8).unwrap().value();
        assert_eq!(ly, 0.0);
        // Λ^Y increasing
        let v = m.lambda_y.values();
        assert!(v.windows(2).skip(1).all(|p| p[1].value() > p[0].value()));
    }

    #[test]
    fn drift_rejects_outside_range() {
        let (diff, m) = model(DriftSpec::linear(1.0), 0.8);
        assert!(m.drift(0.0, &diff).is_err());
        assert!(m.drift(m.reliable_limit * 2.0, &diff).is_err());
    }
}
