//! Existence test and construction of the family `ν_λ(dy) = 2λ η_λ(y) e^{-Q(y)} dy`.
//!
//! The density lives on the dense eigen grid. The CDF is accumulated with
//! the slope-corrected trapezoid rule and is never renormalized: the
//! deficit from one is reported as the normalization defect. When `φ_λ`
//! has a power-law tail (as for Ornstein–Uhlenbeck below `λ_c`), the grid
//! stops at the horizon cap and the remaining mass is carried by a Pareto
//! tail fitted to the local log-slope at the last node.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::drift_expr::DriftSpec;
use crate::eigen::{pareto_tail, phi_slope, EigenSolution, EigenSolver, LambdaC};
use crate::error::{QsdError, Result};
use crate::measures::{ClassificationReport, Diffusion, Verdict};
use crate::numeric::{hermite, LogGridFunction, SignedLog};

/// Residual tail mass at which the dense grid may stop.
pub const SUPPORT_TAIL_BOUND: f64 = 1e-9;

/// Existence verdict with its evidence.
#[derive(Debug, Clone)]
pub struct Existence {
    pub verdict: Verdict,
    /// Both halves of (H) hold, so every `λ ∈ (0, λ_c]` gives a QSD.
    pub family_valid: bool,
    pub report: ClassificationReport,
}

impl Existence {
    pub fn exists(&self) -> bool {
        self.verdict == Verdict::Holds
    }
}

/// QSD exists iff H1 holds and `δ < ∞`.
pub fn existence_from_report(report: ClassificationReport) -> Existence {
    let verdict = match (report.h1, report.delta.value) {
        (Verdict::Fails, _) => Verdict::Fails,
        (_, crate::measures::Estimate::Infinite) => Verdict::Fails,
        (Verdict::Holds, crate::measures::Estimate::Finite(_)) => Verdict::Holds,
        _ => Verdict::Undecided,
    };
    let family_valid = verdict == Verdict::Holds && report.h2 == Verdict::Holds;
    Existence { verdict, family_valid, report }
}

pub fn qsd_exists(spec: &DriftSpec) -> Result<Existence> {
    Ok(existence_from_report(Diffusion::new(spec.clone()).classify_boundaries()?))
}

/// One member of the QSD family.
#[derive(Debug, Clone)]
pub struct QsdDistribution {
    pub lambda: f64,
    pub density: LogGridFunction,
    /// CDF at the grid nodes.
    pub cdf: Vec<f64>,
    /// `|total mass − 1|`, tail model included.
    pub normalization_defect: f64,
    /// Last grid node.
    pub support_truncation: f64,
    /// Mass assigned beyond the last node.
    pub tail_mass: f64,
    /// Pareto index of the tail model.
    pub tail_index: f64,
    /// Largest gap between the CDF and `1 − η' e^{-Q}`.
    pub identity_gap: f64,
    density_values: Vec<f64>,
    density_slopes: Vec<f64>,
    inverse: MonotoneInverse,
}

/// Monotone cubic Hermite interpolant of `y` as a function of `s = √p`,
/// `p` the CDF. The density vanishes linearly at a regular origin, so `y`
/// behaves like `√p` there and is smooth in `s`.
#[derive(Debug, Clone)]
struct MonotoneInverse {
    s: Vec<f64>,
    y: Vec<f64>,
    slope: Vec<f64>,
}

impl MonotoneInverse {
    /// `dy/ds = 2s/f` at the nodes, clamped to three times the neighbouring
    /// secants so the interpolant is monotone.
    fn new(p: &[f64], y: &[f64], density: &[f64]) -> Self {
        let mut ss = vec![p[0].max(0.0).sqrt()];
        let mut yy = vec![y[0]];
        let mut ff = vec![density[0]];
        for i in 1..p.len() {
            let si = p[i].max(0.0).sqrt();
            if si > *ss.last().unwrap() {
                ss.push(si);
                yy.push(y[i]);
                ff.push(density[i]);
            }
        }
        let n = ss.len();
        let secant: Vec<f64> = (0..n.saturating_sub(1)).map(|k| (yy[k + 1] - yy[k]) / (ss[k + 1] - ss[k])).collect();
        let slope = (0..n)
            .map(|i| {
                let mut limit = f64::INFINITY;
                if i > 0 {
                    limit = limit.min(3.0 * secant[i - 1]);
                }
                if i < n - 1 {
                    limit = limit.min(3.0 * secant[i]);
                }
                let exact = if ff[i] > 0.0 && ss[i] > 0.0 {
                    2.0 * ss[i] / ff[i]
                } else if i < n - 1 {
                    secant[i]
                } else {
                    limit
                };
                exact.min(limit)
            })
            .collect();
        MonotoneInverse { s: ss, y: yy, slope }
    }

    fn eval(&self, p: f64) -> f64 {
        let n = self.s.len();
        let s = p.max(0.0).sqrt();
        if n == 1 || s <= self.s[0] {
            return self.y[0];
        }
        let k = (self.s.partition_point(|&v| v <= s)).clamp(1, n - 1) - 1;
        hermite(self.s[k], self.s[k + 1], self.y[k], self.y[k + 1], self.slope[k], self.slope[k + 1], s)
    }

    fn last_p(&self) -> f64 {
        let s = *self.s.last().unwrap();
        s * s
    }
}

/// `∫_0^t` of the cubic Hermite basis on a unit interval, scaled by `h`.
fn hermite_partial(h: f64, f0: f64, f1: f64, d0: f64, d1: f64, t: f64) -> f64 {
    let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
    h * (f0 * (t - t3 + 0.5 * t4)
        + h * d0 * (0.5 * t2 - 2.0 * t3 / 3.0 + 0.25 * t4)
        + f1 * (t3 - 0.5 * t4)
        + h * d1 * (0.25 * t4 - t3 / 3.0))
}

impl QsdDistribution {
    /// Builds `ν_λ` from a dense solution without a sign change.
    pub fn from_solution(sol: &EigenSolution) -> Result<Self> {
        if let Some(z) = sol.first_sign_change {
            return Err(QsdError::Inconsistent(format!(
                "η_λ changes sign at x = {z} for λ = {}; λ exceeds λ_c",
                sol.lambda
            )));
        }
        let lambda = sol.lambda;
        let nodes = sol.nodes();
        let spec = sol.spec();
        let grid: Vec<f64> = nodes.iter().map(|n| n.x).collect();
        let values: Vec<f64> = nodes.iter().map(|n| 2.0 * lambda * n.phi()).collect();
        let slopes: Vec<f64> = nodes.iter().map(|n| 2.0 * lambda * phi_slope(n, spec)).collect();
        if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(QsdError::Inconsistent(format!("negative or non-finite density for λ = {lambda}")));
        }
        let mut cdf = vec![0.0; grid.len()];
        for i in 1..grid.len() {
            let h = grid[i] - grid[i - 1];
            cdf[i] = cdf[i - 1] + crate::numeric::hermite_integral(h, values[i - 1], values[i], slopes[i - 1], slopes[i]);
        }
        let identity_gap = nodes
            .iter()
            .zip(&cdf)
            .map(|(n, c)| (c - (1.0 - n.eta_prime_scaled())).abs())
            .fold(0.0, f64::max);
        let last = nodes.last().unwrap();
        let x_last = last.x;
        let tail_phi = pareto_tail(x_last, last.log_phi(), last.u(), spec.value(x_last)).ok_or_else(|| {
            QsdError::Undecided(format!("density tail not integrable at x = {x_last} for λ = {lambda}"))
        })?;
        let tail_mass = 2.0 * lambda * tail_phi;
        let tail_index = -(x_last * (last.u() - 2.0 * spec.value(x_last))) - 1.0;
        let mass = cdf.last().unwrap() + tail_mass;
        let density = LogGridFunction::new(
            grid.clone(),
            nodes.iter().map(|n| SignedLog::new(n.sign_eta(), n.log_phi() + (2.0 * lambda).ln())).collect(),
        )?;
        let inverse = MonotoneInverse::new(&cdf, &grid, &values);
        Ok(QsdDistribution {
            lambda,
            density,
            normalization_defect: (mass - 1.0).abs(),
            support_truncation: x_last,
            tail_mass,
            tail_index,
            identity_gap,
            cdf,
            density_values: values,
            density_slopes: slopes,
            inverse,
        })
    }

    pub fn grid(&self) -> &[f64] {
        self.density.grid()
    }

    pub fn density_values(&self) -> &[f64] {
        &self.density_values
    }

    /// Total mass including the tail model.
    pub fn total_mass(&self) -> f64 {
        self.cdf.last().unwrap() + self.tail_mass
    }

    fn locate(&self, y: f64) -> (usize, f64) {
        let g = self.grid();
        let i = g.partition_point(|&v| v <= y).clamp(1, g.len() - 1) - 1;
        (i, (y - g[i]) / (g[i + 1] - g[i]))
    }

    /// Density at any `y ≥ 0`: cubic Hermite on the grid, Pareto beyond it.
    pub fn density_at(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(QsdError::InvalidArgument(format!("y must be >= 0, got {y}")));
        }
        let g = self.grid();
        let x_last = self.support_truncation;
        if y >= x_last {
            let f_last = *self.density_values.last().unwrap();
            return Ok(f_last * (y / x_last).powf(-1.0 - self.tail_index));
        }
        let (i, _) = self.locate(y);
        let v = &self.density_values;
        let d = &self.density_slopes;
        Ok(hermite(g[i], g[i + 1], v[i], v[i + 1], d[i], d[i + 1], y).max(0.0))
    }

    /// CDF at any `y`, consistent with [`QsdDistribution::density_at`].
    pub fn cdf_at(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let g = self.grid();
        let x_last = self.support_truncation;
        let c_last = *self.cdf.last().unwrap();
        if y >= x_last {
            return c_last + self.tail_mass * (1.0 - (x_last / y).powf(self.tail_index));
        }
        let (i, t) = self.locate(y);
        let h = g[i + 1] - g[i];
        let v = &self.density_values;
        let d = &self.density_slopes;
        (self.cdf[i] + hermite_partial(h, v[i], v[i + 1], d[i], d[i + 1], t)).min(c_last)
    }

    /// Inverse CDF. Returns `+inf` at and beyond the total mass.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(QsdError::InvalidArgument(format!("p must lie in [0, 1], got {p}")));
        }
        if p == 0.0 {
            return Ok(0.0);
        }
        let c_last = self.inverse.last_p();
        if p <= c_last {
            return Ok(self.inverse.eval(p));
        }
        let c_grid = *self.cdf.last().unwrap();
        let rem = (p - c_grid) / self.tail_mass;
        if rem >= 1.0 {
            return Ok(f64::INFINITY);
        }
        Ok(self.support_truncation * (1.0 - rem.max(0.0)).powf(-1.0 / self.tail_index))
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5).unwrap_or(f64::NAN)
    }

    /// Mean, tail model included (infinite when the tail index is at most 1).
    pub fn mean(&self) -> f64 {
        let g = self.grid();
        let v = &self.density_values;
        let d = &self.density_slopes;
        let mut m = 0.0;
        for i in 1..g.len() {
            // y·f has slope f + y·f'
            let (a, b) = (g[i - 1], g[i]);
            m += crate::numeric::hermite_integral(b - a, a * v[i - 1], b * v[i], v[i - 1] + a * d[i - 1], v[i] + b * d[i]);
        }
        if self.tail_index <= 1.0 {
            return f64::INFINITY;
        }
        m + self.tail_mass * self.support_truncation * self.tail_index / (self.tail_index - 1.0)
    }

    /// Inversion sampling of `n` points; the uniform draws are scaled by the
    /// total mass so the tail model is never clipped.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mass = self.total_mass().min(1.0);
        (0..n)
            .map(|_| {
                let u: f64 = rng.sample(rand::distr::Open01);
                self.quantile(u * mass).unwrap_or(f64::INFINITY)
            })
            .collect()
    }

    /// CSV with columns `y,density,cdf`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "y,density,cdf")?;
        for ((y, f), c) in self.grid().iter().zip(&self.density_values).zip(&self.cdf) {
            writeln!(w, "{y:.16e},{f:.16e},{c:.16e}")?;
        }
        Ok(())
    }
}

/// Builds QSDs for one drift once `λ_c` is known.
pub struct QsdBuilder<'a> {
    solver: &'a EigenSolver<'a>,
    lambda_c: &'a LambdaC,
}

impl<'a> QsdBuilder<'a> {
    pub fn new(solver: &'a EigenSolver<'a>, lambda_c: &'a LambdaC) -> Self {
        QsdBuilder { solver, lambda_c }
    }

    /// Family member at `λ`; `λ` must lie in `(0, λ_lo]`, where `λ_lo` is
    /// the certified side of the `λ_c` bracket.
    pub fn build(&self, lambda: f64) -> Result<QsdDistribution> {
        if !(lambda > 0.0 && lambda <= self.lambda_c.lo) {
            return Err(QsdError::InvalidArgument(format!(
                "λ = {lambda} outside (0, λ_c] with λ_c ∈ [{}, {}]",
                self.lambda_c.lo, self.lambda_c.hi
            )));
        }
        let sol = self.solver.solve_for_measure(lambda, SUPPORT_TAIL_BOUND)?;
        QsdDistribution::from_solution(&sol)
    }

    /// The member at `λ_c`, evaluated at the certified side of the bracket.
    pub fn minimal(&self) -> Result<QsdDistribution> {
        self.build(self.lambda_c.lo)
    }
}

/// Full pipeline for a single member: classification, `λ_c`, construction.
pub fn build_qsd(spec: &DriftSpec, lambda: f64) -> Result<QsdDistribution> {
    let diff = Diffusion::new(spec.clone());
    let ex = existence_from_report(diff.classify_boundaries()?);
    if !ex.exists() {
        return Err(QsdError::InvalidArgument(format!("no QSD exists for {spec} (verdict {})", ex.verdict)));
    }
    let solver = EigenSolver::new(&diff);
    let lc = solver.lambda_c(&ex.report)?;
    let lambda = if lambda > lc.lo && lambda <= lc.hi { lc.lo } else { lambda };
    QsdBuilder::new(&solver, &lc).build(lambda)
}

pub fn qsd_quantile(dist: &QsdDistribution, p: f64) -> Result<f64> {
    dist.quantile(p)
}

pub fn sample_qsd(dist: &QsdDistribution, n: usize, seed: u64) -> Vec<f64> {
    dist.sample(n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_constant(a: f64) -> QsdDistribution {
        build_qsd(&DriftSpec::constant(a), a * a / 2.0).unwrap()
    }

    #[test]
    fn existence_examples() {
        assert!(qsd_exists(&DriftSpec::constant(1.0)).unwrap().exists());
        assert!(qsd_exists(&DriftSpec::linear(1.0)).unwrap().exists());
        let neg = qsd_exists(&DriftSpec::constant(-1.0)).unwrap();
        assert_eq!(neg.verdict, Verdict::Fails);
        assert_eq!(qsd_exists(&DriftSpec::zero()).unwrap().verdict, Verdict::Fails);
    }

    #[test]
    fn minimal_constant_density() {
        let d = minimal_constant(1.0);
        assert!(d.normalization_defect < 1e-6, "{}", d.normalization_defect);
        assert_eq!(d.density_at(0.0).unwrap(), 0.0);
        assert!((d.density_at(1.0).unwrap() - (-1f64).exp()).abs() < 1e-6);
        let mut worst = 0.0f64;
        for k in 0..=1000 {
            let y = 0.01 + (10.0 - 0.01) * k as f64 / 1000.0;
            worst = worst.max((d.density_at(y).unwrap() - y * (-y).exp()).abs());
        }
        assert!(worst < 1e-5, "{worst}");
        assert!(d.identity_gap < 1e-6);
    }

    #[test]
    fn cdf_properties() {
        let d = minimal_constant(1.0);
        assert_eq!(d.cdf[0], 0.0);
        assert!(d.cdf.windows(2).all(|w| w[1] >= w[0]));
        assert!(*d.cdf.last().unwrap() >= 1.0 - 1e-6);
        for &y in &[0.3f64, 1.0, 2.5, 7.0] {
            let exact = 1.0 - (1.0 + y) * (-y).exp();
            assert!((d.cdf_at(y) - exact).abs() < 1e-7, "{y}");
        }
    }

    #[test]
    fn quantile_closed_form() {
        let d = minimal_constant(1.0);
        let p = 1.0 - 2.0 * (-1f64).exp();
        assert!((d.quantile(p).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(d.quantile(0.0).unwrap(), 0.0);
        assert!(d.quantile(1.5).is_err());
        assert!(d.quantile(-0.1).is_err());
        let m = d.median();
        assert!((d.cdf_at(m) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = minimal_constant(1.0);
        assert_eq!(d.sample(100, 7), d.sample(100, 7));
        assert_ne!(d.sample(100, 7), d.sample(100, 8));
    }

    #[test]
    fn rejects_lambda_above_critical() {
        assert!(build_qsd(&DriftSpec::constant(1.0), 0.6).is_err());
        assert!(build_qsd(&DriftSpec::constant(1.0), 0.0).is_err());
        assert!(build_qsd(&DriftSpec::constant(-1.0), 0.1).is_err());
    }

    #[test]
    fn ou_family_members_normalized() {
        for &f in &[0.2, 0.5, 1.0] {
            let d = build_qsd(&DriftSpec::linear(1.0), f).unwrap();
            assert!(d.normalization_defect < 1e-6, "λ={f}: {}", d.normalization_defect);
            assert!(d.total_mass() > 0.0);
        }
    }

    #[test]
    fn heavy_tail_quantiles_beyond_grid() {
        let d = build_qsd(&DriftSpec::linear(1.0), 0.2).unwrap();
        assert!(d.tail_mass > 1e-3);
        assert!((d.tail_index - 0.2).abs() < 1e-3);
        let p = *d.cdf.last().unwrap() + 0.5 * d.tail_mass;
        let y = d.quantile(p).unwrap();
        assert!(y > d.support_truncation);
        assert!((d.cdf_at(y) - p).abs() < 1e-12);
    }

    #[test]
    fn csv_format() {
        let d = minimal_constant(1.0);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "y,density,cdf");
        assert_eq!(lines.count(), d.grid().len());
    }
}
