//! Scale function, speed measure and boundary classification.
//!
//! With `Q(y) = ∫_0^y 2q`, the scale function is `Λ(x) = ∫_0^x e^{Q}` and
//! the speed measure is `μ(dy) = e^{-Q(y)} dy`. Every integral of `e^{±Q}`
//! is evaluated in log form.
//!
//! Improper integrals are truncated at doubling points. A truncation
//! sequence is *convergent* once the last increment falls below
//! `converge_rel` of the running total, *divergent* once the increments
//! have been nondecreasing for `divergence_run` consecutive doublings past
//! `divergence_start`, and *undecided* if the cap is reached first.

use std::sync::RwLock;

use crate::drift_expr::DriftSpec;
use crate::error::{QsdError, Result};
use crate::numeric::{gauss_legendre8, log_add_exp, log_integrate, LogIntegral, QuadTol};

/// Width of the cumulative segments backing `Q`.
const Q_SEGMENT: f64 = 0.125;

/// Loosening of the outer tolerance for nested integrals.
const NESTED_REL_FACTOR: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureOptions {
    pub quad: QuadTol,
    pub converge_rel: f64,
    pub divergence_start: f64,
    pub divergence_run: usize,
    /// Largest truncation width tried before giving up.
    pub truncation_cap: f64,
    /// Hard upper bound on `x` for `Q` evaluation.
    pub x_limit: f64,
    /// Points on the coarse `δ` grid.
    pub delta_grid: usize,
    /// Initial truncation for the `δ` search.
    pub delta_start: f64,
    /// Relative slack when comparing successive increments.
    pub monotone_slack: f64,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        MeasureOptions {
            quad: QuadTol::default(),
            converge_rel: 1e-10,
            divergence_start: 1024.0,
            divergence_run: 4,
            truncation_cap: 65536.0,
            x_limit: 262144.0,
            delta_grid: 256,
            delta_start: 16.0,
            monotone_slack: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Convergent,
    Divergent,
    Undecided,
}

/// Outcome of a doubling-truncation improper integral.
#[derive(Debug, Clone, PartialEq)]
pub struct ImproperIntegral {
    pub status: Convergence,
    /// `log` of the partial integral at the last truncation point.
    pub log_partial: f64,
    /// Relative error bound of the partial value: quadrature error plus the
    /// last increment.
    pub rel_error: f64,
    /// `(truncation point, log partial integral)` pairs.
    pub evidence: Vec<(f64, f64)>,
}

impl ImproperIntegral {
    pub fn is_finite(&self) -> bool {
        self.status == Convergence::Convergent
    }

    pub fn value(&self) -> Option<f64> {
        self.is_finite().then(|| self.log_partial.exp())
    }

    pub fn as_estimate(&self) -> Estimate {
        match self.status {
            Convergence::Convergent => Estimate::Finite(self.log_partial.exp()),
            Convergence::Divergent => Estimate::Infinite,
            Convergence::Undecided => Estimate::Undecided,
        }
    }
}

/// A quantity that may be finite, infinite, or not decidable numerically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    Finite(f64),
    Infinite,
    Undecided,
}

impl Estimate {
    pub fn finite(&self) -> Option<f64> {
        match self {
            Estimate::Finite(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Estimate::Infinite)
    }
}

impl std::fmt::Display for Estimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimate::Finite(v) => write!(f, "{v:.10e}"),
            Estimate::Infinite => write!(f, "inf"),
            Estimate::Undecided => write!(f, "undecided"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Holds,
    Fails,
    Undecided,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Holds => "holds",
            Verdict::Fails => "fails",
            Verdict::Undecided => "undecided",
        })
    }
}

/// Sup of `Λ(x)·2μ([x,∞))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEstimate {
    pub value: Estimate,
    /// Location of the maximum (the last grid point when the sup is
    /// approached at infinity).
    pub argmax: f64,
    /// `(truncation X, sup over (0, X])` for each doubling tried.
    pub evidence: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub h1: Verdict,
    /// Truncation evidence for `Λ(∞)`.
    pub h1_evidence: Vec<(f64, f64)>,
    pub h2: Verdict,
    pub h2_evidence: Vec<(f64, f64)>,
    pub delta: DeltaEstimate,
    pub mu_total: Estimate,
    pub regular_at_zero: bool,
    /// `(∫_0^1 e^{Q}, ∫_0^1 e^{-Q})`.
    pub zero_witnesses: (f64, f64),
    /// `δ < ∞ ⇒ μ(0,∞) < ∞`.
    pub consistent: bool,
}

impl ClassificationReport {
    pub fn delta_finite(&self) -> Option<f64> {
        self.delta.value.finite()
    }

    /// Both halves of hypothesis (H).
    pub fn natural_at_infinity(&self) -> Verdict {
        match (self.h1, self.h2) {
            (Verdict::Holds, Verdict::Holds) => Verdict::Holds,
            (Verdict::Fails, _) | (_, Verdict::Fails) => Verdict::Fails,
            _ => Verdict::Undecided,
        }
    }
}

/// A drift together with its cached potential `Q`.
///
/// `Q` is tabulated lazily on segments of width 1/8 and completed on the
/// partial segment with an 8-point Gauss rule. The table is shared behind a
/// lock, so a `Diffusion` can be used from several threads.
#[derive(Debug)]
pub struct Diffusion {
    spec: DriftSpec,
    opts: MeasureOptions,
    table: RwLock<Vec<f64>>,
}

impl Clone for Diffusion {
    fn clone(&self) -> Self {
        Diffusion {
            spec: self.spec.clone(),
            opts: self.opts,
            table: RwLock::new(self.table.read().unwrap().clone()),
        }
    }
}

impl Diffusion {
    pub fn new(spec: DriftSpec) -> Self {
        Self::with_options(spec, MeasureOptions::default())
    }

    pub fn with_options(spec: DriftSpec, opts: MeasureOptions) -> Self {
        Diffusion { spec, opts, table: RwLock::new(vec![0.0]) }
    }

    pub fn spec(&self) -> &DriftSpec {
        &self.spec
    }

    pub fn options(&self) -> &MeasureOptions {
        &self.opts
    }

    #[inline]
    pub fn q(&self, x: f64) -> f64 {
        self.spec.value(x)
    }

    fn segment_integral(&self, a: f64, b: f64) -> f64 {
        gauss_legendre8(|y| 2.0 * self.spec.value(y), a, b)
    }

    fn ensure_table(&self, k: usize) {
        if self.table.read().unwrap().len() > k {
            return;
        }
        let mut t = self.table.write().unwrap();
        while t.len() <= k {
            let j = t.len() - 1;
            let a = j as f64 * Q_SEGMENT;
            let next = t[j] + self.segment_integral(a, a + Q_SEGMENT);
            t.push(next);
        }
    }

    /// `Q(x)`; returns NaN outside `[0, x_limit]` or where `q` is undefined.
    #[inline]
    pub fn q_potential(&self, x: f64) -> f64 {
        if !(x >= 0.0 && x <= self.opts.x_limit) {
            return f64::NAN;
        }
        if x == 0.0 {
            return 0.0;
        }
        let k = (x / Q_SEGMENT) as usize;
        let base = {
            let t = self.table.read().unwrap();
            t.get(k).copied()
        };
        let base = match base {
            Some(b) => b,
            None => {
                self.ensure_table(k);
                self.table.read().unwrap()[k]
            }
        };
        let a = k as f64 * Q_SEGMENT;
        if x > a {
            base + self.segment_integral(a, x)
        } else {
            base
        }
    }

    /// `Q(b) - Q(a)` for `a <= b`, without the cancellation of two large
    /// table values when the points are close.
    pub fn potential_increment(&self, a: f64, b: f64) -> f64 {
        if !(b <= self.opts.x_limit) {
            return f64::NAN;
        }
        if b - a <= Q_SEGMENT {
            return self.segment_integral(a, b);
        }
        let ka = (a / Q_SEGMENT).ceil();
        let kb = (b / Q_SEGMENT).floor();
        let (xa, xb) = (ka * Q_SEGMENT, kb * Q_SEGMENT);
        self.ensure_table(kb as usize);
        let t = self.table.read().unwrap();
        let mid = t[kb as usize] - t[ka as usize];
        drop(t);
        self.segment_integral(a, xa) + mid + self.segment_integral(xb, b)
    }

    /// Checked `Q(x)`.
    pub fn big_q(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(QsdError::InvalidArgument(format!("x must be >= 0, got {x}")));
        }
        if x > self.opts.x_limit {
            return Err(QsdError::DomainLimit { x, limit: self.opts.x_limit });
        }
        let v = self.q_potential(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(QsdError::DriftUndefined { x })
        }
    }

    /// `log ∫_a^b e^{Q}`.
    pub fn log_scale_between(&self, a: f64, b: f64) -> Result<LogIntegral> {
        log_integrate(|y| self.q_potential(y), a, b, &self.opts.quad)
    }

    /// `log ∫_a^b e^{-Q}`.
    pub fn log_speed_between(&self, a: f64, b: f64) -> Result<LogIntegral> {
        log_integrate(|y| -self.q_potential(y), a, b, &self.opts.quad)
    }

    /// `log Λ(x)`; `-inf` at the origin.
    pub fn log_scale(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(QsdError::InvalidArgument(format!("x must be >= 0, got {x}")));
        }
        Ok(self.log_scale_between(0.0, x)?.log_value)
    }

    /// Doubling-truncation integral of `e^{g}` over `[start, ∞)`.
    pub fn improper<G: Fn(f64) -> f64>(&self, start: f64, g: G) -> Result<ImproperIntegral> {
        self.improper_with(start, g, &self.opts.quad)
    }

    fn improper_with<G: Fn(f64) -> f64>(&self, start: f64, g: G, quad: &QuadTol) -> Result<ImproperIntegral> {
        let o = &self.opts;
        let mut total = f64::NEG_INFINITY;
        let mut quad_err = f64::NEG_INFINITY;
        let mut evidence = Vec::new();
        let mut prev_inc: Option<f64> = None;
        let mut run = 0usize;
        let mut lo = start;
        let mut width = 1.0;
        let mut last_inc = f64::NEG_INFINITY;
        while width <= o.truncation_cap {
            let hi = start + width;
            let piece = log_integrate(&g, lo, hi, quad)?;
            let inc = piece.log_value;
            total = log_add_exp(total, inc);
            quad_err = log_add_exp(quad_err, piece.log_error);
            evidence.push((hi, total));
            last_inc = inc;

            if total > f64::NEG_INFINITY && inc < o.converge_rel.ln() + total {
                return Ok(ImproperIntegral {
                    status: Convergence::Convergent,
                    log_partial: total,
                    rel_error: (log_add_exp(quad_err, inc) - total).exp(),
                    evidence,
                });
            }
            if let Some(p) = prev_inc {
                if width > o.divergence_start && inc >= p - o.monotone_slack {
                    run += 1;
                } else {
                    run = 0;
                }
            }
            if run >= o.divergence_run {
                return Ok(ImproperIntegral {
                    status: Convergence::Divergent,
                    log_partial: total,
                    rel_error: f64::INFINITY,
                    evidence,
                });
            }
            prev_inc = Some(inc);
            lo = hi;
            width *= 2.0;
        }
        Ok(ImproperIntegral {
            status: Convergence::Undecided,
            log_partial: total,
            rel_error: (log_add_exp(quad_err, last_inc) - total).exp(),
            evidence,
        })
    }

    /// `μ([x, ∞)) = ∫_x^∞ e^{-Q}`.
    pub fn mu_tail(&self, x: f64) -> Result<ImproperIntegral> {
        if !(x >= 0.0) {
            return Err(QsdError::InvalidArgument(format!("x must be >= 0, got {x}")));
        }
        let q_x = self.big_q(x)?;
        let mut t = self.mu_tail_scaled(x)?;
        t.log_partial -= q_x;
        for e in &mut t.evidence {
            e.1 -= q_x;
        }
        Ok(t)
    }

    /// `e^{Q(x)} μ([x, ∞)) = ∫_x^∞ e^{-(Q(z) - Q(x))} dz`.
    pub fn mu_tail_scaled(&self, x: f64) -> Result<ImproperIntegral> {
        if !(x >= 0.0) {
            return Err(QsdError::InvalidArgument(format!("x must be >= 0, got {x}")));
        }
        self.improper(x, |z| -self.potential_increment(x, z))
    }

    /// `Λ(∞)` truncation sequence.
    pub fn scale_at_infinity(&self) -> Result<ImproperIntegral> {
        self.improper(0.0, |y| self.q_potential(y))
    }

    fn log_scaled_tail_value(&self, x: f64) -> f64 {
        match self.mu_tail_scaled(x) {
            Ok(t) if t.is_finite() => t.log_partial,
            _ => f64::NAN,
        }
    }

    /// `S = ∫_0^∞ e^{Q(y)} μ([y,∞)) dy`.
    pub fn s_integral(&self) -> Result<ImproperIntegral> {
        let total = self.mu_tail(0.0)?;
        match total.status {
            Convergence::Divergent => {
                return Ok(ImproperIntegral {
                    status: Convergence::Divergent,
                    log_partial: f64::INFINITY,
                    rel_error: f64::INFINITY,
                    evidence: total.evidence,
                })
            }
            Convergence::Undecided => {
                return Ok(ImproperIntegral {
                    status: Convergence::Undecided,
                    log_partial: f64::NAN,
                    rel_error: f64::INFINITY,
                    evidence: total.evidence,
                })
            }
            Convergence::Convergent => {}
        }
        // the integrand is itself a quadrature result
        let outer = QuadTol { rel: NESTED_REL_FACTOR * self.opts.quad.rel, ..self.opts.quad };
        self.improper_with(0.0, |y| self.log_scaled_tail_value(y), &outer)
    }

    /// `log(Λ(x) · 2μ([x,∞)))` for a single point, given the tail.
    fn log_product(&self, x: f64) -> Result<f64> {
        let tail = self.mu_tail(x)?;
        if !tail.is_finite() {
            return Err(QsdError::Undecided(format!("μ-tail at {x} not convergent")));
        }
        Ok(std::f64::consts::LN_2 + self.log_scale(x)? + tail.log_partial)
    }

    /// `δ = sup_x Λ(x)·2μ([x,∞))`.
    pub fn delta_sup(&self) -> Result<DeltaEstimate> {
        let total = self.mu_tail(0.0)?;
        match total.status {
            Convergence::Divergent => {
                return Ok(DeltaEstimate { value: Estimate::Infinite, argmax: f64::NAN, evidence: vec![] })
            }
            Convergence::Undecided => {
                return Ok(DeltaEstimate { value: Estimate::Undecided, argmax: f64::NAN, evidence: vec![] })
            }
            Convergence::Convergent => {}
        }
        let o = self.opts;
        let n = o.delta_grid.max(8);
        let mut evidence: Vec<(f64, f64)> = Vec::new();
        let mut prev_growth: Option<f64> = None;
        let mut run = 0usize;
        let mut big_x = o.delta_start;
        let mut best_x = f64::NAN;
        while big_x <= o.truncation_cap {
            let ratio = 2f64.powf(24.0 / (n - 1) as f64);
            let xs: Vec<f64> = (0..n).map(|i| big_x * ratio.powi(i as i32 - (n as i32 - 1))).collect();
            let mut log_scale = vec![0.0; n];
            log_scale[0] = self.log_scale(xs[0])?;
            for i in 1..n {
                let piece = self.log_scale_between(xs[i - 1], xs[i])?;
                log_scale[i] = log_add_exp(log_scale[i - 1], piece.log_value);
            }
            let mut log_tail = vec![0.0; n];
            let end = self.mu_tail(xs[n - 1])?;
            if !end.is_finite() {
                return Ok(DeltaEstimate { value: Estimate::Undecided, argmax: f64::NAN, evidence });
            }
            log_tail[n - 1] = end.log_partial;
            for i in (0..n - 1).rev() {
                let piece = self.log_speed_between(xs[i], xs[i + 1])?;
                log_tail[i] = log_add_exp(log_tail[i + 1], piece.log_value);
            }
            let prod: Vec<f64> = (0..n).map(|i| std::f64::consts::LN_2 + log_scale[i] + log_tail[i]).collect();
            let (imax, _) = prod
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            let (mut bx, mut bv) = (xs[imax], prod[imax]);
            if imax > 0 && imax + 1 < n {
                let (rx, rv) = self.golden_max(xs[imax - 1], xs[imax + 1], log_scale[imax - 1], xs[imax - 1], log_tail[imax + 1], xs[imax + 1])?;
                if rv > bv {
                    bx = rx;
                    bv = rv;
                }
            }
            let value = bv.exp();
            best_x = bx;
            if let Some(&(_, prev)) = evidence.last() {
                let growth = value - prev;
                if growth.abs() <= o.converge_rel * value {
                    evidence.push((big_x, value));
                    return Ok(DeltaEstimate { value: Estimate::Finite(value), argmax: best_x, evidence });
                }
                if let Some(pg) = prev_growth {
                    if big_x > o.divergence_start && growth > 0.0 && growth >= pg * (1.0 - o.monotone_slack) {
                        run += 1;
                    } else {
                        run = 0;
                    }
                }
                prev_growth = Some(growth);
            }
            evidence.push((big_x, value));
            if run >= o.divergence_run {
                return Ok(DeltaEstimate { value: Estimate::Infinite, argmax: best_x, evidence });
            }
            big_x *= 2.0;
        }
        Ok(DeltaEstimate { value: Estimate::Undecided, argmax: best_x, evidence })
    }

    /// Golden-section maximization of the log product on `[a, b]`, reusing
    /// `Λ(a_ref)` and `μ([b_ref, ∞))`.
    fn golden_max(&self, a: f64, b: f64, log_scale_a: f64, a_ref: f64, log_tail_b: f64, b_ref: f64) -> Result<(f64, f64)> {
        let f = |x: f64| -> Result<f64> {
            let ls = log_add_exp(log_scale_a, self.log_scale_between(a_ref, x)?.log_value);
            let lt = log_add_exp(log_tail_b, self.log_speed_between(x, b_ref)?.log_value);
            Ok(std::f64::consts::LN_2 + ls + lt)
        };
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (a, b);
        let mut c = hi - inv_phi * (hi - lo);
        let mut d = lo + inv_phi * (hi - lo);
        let (mut fc, mut fd) = (f(c)?, f(d)?);
        for _ in 0..80 {
            if (hi - lo) <= 1e-12 * hi {
                break;
            }
            if fc > fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - inv_phi * (hi - lo);
                fc = f(c)?;
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + inv_phi * (hi - lo);
                fd = f(d)?;
            }
        }
        Ok(if fc > fd { (c, fc) } else { (d, fd) })
    }

    /// Assembles the full report.
    pub fn classify_boundaries(&self) -> Result<ClassificationReport> {
        let lam_inf = self.scale_at_infinity()?;
        let h1 = match lam_inf.status {
            Convergence::Divergent => Verdict::Holds,
            Convergence::Convergent => Verdict::Fails,
            Convergence::Undecided => Verdict::Undecided,
        };
        let s = self.s_integral()?;
        let h2 = match s.status {
            Convergence::Divergent => Verdict::Holds,
            Convergence::Convergent => Verdict::Fails,
            Convergence::Undecided => Verdict::Undecided,
        };
        let delta = self.delta_sup()?;
        let mu_total = self.mu_tail(0.0)?.as_estimate();
        let w_plus = self.log_scale_between(0.0, 1.0)?.log_value.exp();
        let w_minus = self.log_speed_between(0.0, 1.0)?.log_value.exp();
        let regular_at_zero = w_plus.is_finite() && w_minus.is_finite();
        let consistent = !(delta.value.finite().is_some() && mu_total.finite().is_none());
        Ok(ClassificationReport {
            h1,
            h1_evidence: lam_inf.evidence,
            h2,
            h2_evidence: s.evidence,
            delta,
            mu_total,
            regular_at_zero,
            zero_witnesses: (w_plus, w_minus),
            consistent,
        })
    }

    /// `log` of the criterion product `μ([x,∞))·Λ(x)`.
    pub fn log_criterion_product(&self, x: f64) -> Result<f64> {
        Ok(self.log_product(x)? - std::f64::consts::LN_2)
    }
}

/// `Q(x)` for a drift.
pub fn big_q(spec: &DriftSpec, x: f64) -> Result<f64> {
    Diffusion::new(spec.clone()).big_q(x)
}

/// `log Λ(x)`.
pub fn scale_function(spec: &DriftSpec, x: f64) -> Result<f64> {
    Diffusion::new(spec.clone()).log_scale(x)
}

pub fn mu_tail(spec: &DriftSpec, x: f64) -> Result<ImproperIntegral> {
    Diffusion::new(spec.clone()).mu_tail(x)
}

pub fn delta_sup(spec: &DriftSpec) -> Result<DeltaEstimate> {
    Diffusion::new(spec.clone()).delta_sup()
}

pub fn s_integral(spec: &DriftSpec) -> Result<ImproperIntegral> {
    Diffusion::new(spec.clone()).s_integral()
}

pub fn classify_boundaries(spec: &DriftSpec) -> Result<ClassificationReport> {
    Diffusion::new(spec.clone()).classify_boundaries()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn potential_closed_forms() {
        assert_eq!(big_q(&DriftSpec::constant(1.0), 1.0).unwrap(), 2.0);
        assert!((big_q(&DriftSpec::linear(1.0), 2.0).unwrap() - 4.0).abs() < 1e-14);
        assert_eq!(big_q(&DriftSpec::linear(3.0), 0.0).unwrap(), 0.0);
        let d = Diffusion::new(DriftSpec::linear(0.7));
        for &x in &[0.01, 0.3, 5.0, 123.456, 4000.0] {
            assert!(rel(d.big_q(x).unwrap(), 0.7 * x * x) < 1e-13, "{x}");
        }
    }

    #[test]
    fn potential_rejects_bad_arguments() {
        let d = Diffusion::new(DriftSpec::constant(1.0));
        assert!(d.big_q(-1.0).is_err());
        assert!(matches!(d.big_q(1e9), Err(QsdError::DomainLimit { .. })));
    }

    #[test]
    fn scale_function_constant_drift() {
        // Λ(x) = (e^{2ax} - 1)/(2a)
        let v = scale_function(&DriftSpec::constant(1.0), 1.0).unwrap();
        let expect = ((2f64.exp() - 1.0) / 2.0).ln();
        assert!((v - expect).abs() < 1e-10);
        assert_eq!(scale_function(&DriftSpec::constant(1.0), 0.0).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn scale_function_gaussian_asymptotics() {
        let d = Diffusion::new(DriftSpec::linear(1.0));
        let mut prev = f64::INFINITY;
        for &x in &[5.0, 10.0, 20.0, 40.0] {
            let v = d.log_scale(x).unwrap();
            let approx = x * x - (2.0 * x).ln();
            let err = (v - approx).abs();
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn mu_tail_constant_drift() {
        let spec = DriftSpec::constant(1.0);
        let t0 = mu_tail(&spec, 0.0).unwrap();
        assert_eq!(t0.status, Convergence::Convergent);
        assert!(rel(t0.value().unwrap(), 0.5) < 1e-10);
        let t1 = mu_tail(&spec, 1.0).unwrap();
        assert!(rel(t1.value().unwrap(), (-2f64).exp() / 2.0) < 1e-10);
        let div = mu_tail(&DriftSpec::constant(-1.0), 0.0).unwrap();
        assert_eq!(div.status, Convergence::Divergent);
    }

    #[test]
    fn mu_tail_negative_argument() {
        assert!(mu_tail(&DriftSpec::constant(1.0), -0.1).is_err());
    }

    #[test]
    fn slowly_convergent_tail_is_undecided() {
        // q = 1/(2(1+x)) gives e^{-Q} = 1/(1+x): log-divergent, with
        // constant increments it is classified divergent. A slightly faster
        // decay (1+x)^{-1.01} can be resolved neither way within the cap.
        let spec = crate::drift_expr::parse_drift("0.505/(1+x)").unwrap();
        let t = mu_tail(&spec, 0.0).unwrap();
        assert_eq!(t.status, Convergence::Undecided, "{t:?}");
        let spec = crate::drift_expr::parse_drift("0.5/(1+x)").unwrap();
        assert_eq!(mu_tail(&spec, 0.0).unwrap().status, Convergence::Divergent);
    }

    #[test]
    fn delta_constant_drift() {
        // product (1 - e^{-2x})/2 increases to 1/(2a^2)
        let d = delta_sup(&DriftSpec::constant(1.0)).unwrap();
        assert!(rel(d.value.finite().unwrap(), 0.5) < 1e-8);
        let d = delta_sup(&DriftSpec::constant(2.0)).unwrap();
        assert!(rel(d.value.finite().unwrap(), 0.125) < 1e-8);
        assert!(delta_sup(&DriftSpec::constant(-1.0)).unwrap().value.is_infinite());
        assert!(delta_sup(&DriftSpec::zero()).unwrap().value.is_infinite());
    }

    #[test]
    fn delta_linear_drift_brackets_lambda_c() {
        let d = delta_sup(&DriftSpec::linear(1.0)).unwrap().value.finite().unwrap();
        assert!(1.0 / (4.0 * d) <= 1.0 && 1.0 <= 1.0 / d, "δ = {d}");
        // interior maximum
        let est = delta_sup(&DriftSpec::linear(1.0)).unwrap();
        assert!(est.argmax > 0.1 && est.argmax < 5.0);
    }

    #[test]
    fn s_integral_verdicts() {
        assert_eq!(s_integral(&DriftSpec::constant(1.0)).unwrap().status, Convergence::Divergent);
        assert_eq!(s_integral(&DriftSpec::linear(1.0)).unwrap().status, Convergence::Divergent);
        assert_eq!(s_integral(&DriftSpec::constant(-1.0)).unwrap().status, Convergence::Divergent);
    }

    #[test]
    fn classification_reports() {
        let r = classify_boundaries(&DriftSpec::constant(1.0)).unwrap();
        assert_eq!(r.h1, Verdict::Holds);
        assert_eq!(r.h2, Verdict::Holds);
        assert!(rel(r.delta_finite().unwrap(), 0.5) < 1e-8);
        assert!(rel(r.mu_total.finite().unwrap(), 0.5) < 1e-10);
        assert!(r.regular_at_zero && r.consistent);

        let r = classify_boundaries(&DriftSpec::linear(1.0)).unwrap();
        assert_eq!(r.h1, Verdict::Holds);
        assert_eq!(r.h2, Verdict::Holds);
        let gauss = std::f64::consts::PI.sqrt() / 2.0;
        assert!(rel(r.mu_total.finite().unwrap(), gauss) < 1e-10);

        // Λ(∞) = 1/(2|a|) for a < 0
        let r = classify_boundaries(&DriftSpec::constant(-1.0)).unwrap();
        assert_eq!(r.h1, Verdict::Fails);
        assert!(rel(r.h1_evidence.last().unwrap().1.exp(), 0.5) < 1e-9);
        assert!(r.delta.value.is_infinite());
        assert!(r.consistent);

        let r = classify_boundaries(&DriftSpec::zero()).unwrap();
        assert_eq!(r.h1, Verdict::Holds);
        assert!(r.delta.value.is_infinite());
    }

    #[test]
    fn criterion_product_constant() {
        let d = Diffusion::new(DriftSpec::constant(1.0));
        // μ([x,∞))Λ(x) = (1 - e^{-2x})/4
        for &x in &[0.5, 2.0, 8.0] {
            let v = d.log_criterion_product(x).unwrap().exp();
            assert!(rel(v, (1.0 - (-2.0 * x).exp()) / 4.0) < 1e-9);
        }
    }
}
