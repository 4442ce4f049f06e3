//! Shooting solver for `½η'' − qη' + λη = 0`, `η(0) = 0`, `η'(0) = 1`, and
//! bisection for the critical eigenvalue `λ_c`.
//!
//! The second-order equation is integrated in Riccati form. Two charts are
//! used with hysteresis:
//!
//! * `U` chart: `u = η'/η`, `u' = −u² + 2qu − 2λ`, tracking
//!   `M = log|η| − Q` with `M' = u − 2q`;
//! * `V` chart: `v = η/η'`, `v' = 1 − 2qv + 2λv²`, tracking
//!   `M = log|η'| − Q` with `M' = −2λv`.
//!
//! Zeros of `η` are regular points of the `V` chart (`v` crosses 0), so sign
//! changes are located without rescaling, and `M` stays moderate even where
//! `η` itself overflows. The stiff `V` dynamics at large `q` are handled by
//! the 3-stage Radau IIA method with step-doubling error control.

use std::sync::LazyLock;

use crate::drift_expr::DriftSpec;
use crate::error::{QsdError, Result};
use crate::measures::{ClassificationReport, Diffusion, Verdict};
use crate::numeric::{hermite_integral, LogGridFunction, SignedLog};

/// Riccati chart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chart {
    U,
    V,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Absolute tolerance on the log accumulator `M`.
    pub atol_log: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub max_steps: usize,
    /// Largest horizon used when classifying a `λ`.
    pub horizon_cap: f64,
    /// First checkpoint of the horizon ladder.
    pub checkpoint_start: f64,
    /// Relative width at which the `λ_c` bisection stops.
    pub lambda_rtol: f64,
    /// Relative margin added to the `δ` bracket.
    pub bracket_margin: f64,
    /// Bracket widenings before giving up.
    pub bracket_widenings: usize,
    /// Dense grids use steps at most `max(dense_min_step, x / dense_ratio)`.
    pub dense_ratio: f64,
    pub dense_min_step: f64,
    /// Relative accuracy of the secant refinement of a sign change.
    pub crossing_tol: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            rtol: 1e-10,
            atol: 1e-12,
            atol_log: 1e-11,
            h_init: 1e-3,
            h_min: 1e-13,
            max_steps: 2_000_000,
            horizon_cap: 4096.0,
            checkpoint_start: 16.0,
            lambda_rtol: 1e-6,
            bracket_margin: 0.1,
            bracket_widenings: 8,
            dense_ratio: 128.0,
            dense_min_step: 1.0 / 32.0,
            crossing_tol: 1e-12,
        }
    }
}

/// One accepted integration node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub x: f64,
    pub chart: Chart,
    /// `u` or `v` depending on the chart.
    pub r: f64,
    /// Log accumulator of the chart.
    pub m: f64,
    /// Sign of `η` in the `U` chart, of `η'` in the `V` chart.
    pub sign: i8,
    /// `Q(x)`.
    pub big_q: f64,
}

impl Node {
    fn sign_of(r: f64) -> i8 {
        if r > 0.0 {
            1
        } else if r < 0.0 {
            -1
        } else {
            0
        }
    }

    /// Sign of `η`.
    pub fn sign_eta(&self) -> i8 {
        match self.chart {
            Chart::U => self.sign,
            Chart::V => self.sign * Self::sign_of(self.r),
        }
    }

    /// Sign of `η'`.
    pub fn sign_eta_prime(&self) -> i8 {
        match self.chart {
            Chart::U => self.sign * Self::sign_of(self.r),
            Chart::V => self.sign,
        }
    }

    /// `log|φ| = log|η| − Q`.
    pub fn log_phi(&self) -> f64 {
        match self.chart {
            Chart::U => self.m,
            Chart::V => self.m + self.r.abs().ln(),
        }
    }

    /// `log|η'| − Q`.
    pub fn log_eta_prime_scaled(&self) -> f64 {
        match self.chart {
            Chart::U => self.m + self.r.abs().ln(),
            Chart::V => self.m,
        }
    }

    /// `η'/η`.
    pub fn u(&self) -> f64 {
        match self.chart {
            Chart::U => self.r,
            Chart::V => 1.0 / self.r,
        }
    }

    /// `φ` as a plain number.
    pub fn phi(&self) -> f64 {
        SignedLog::new(self.sign_eta(), self.log_phi()).value()
    }

    /// `η' e^{-Q}` as a plain number.
    pub fn eta_prime_scaled(&self) -> f64 {
        SignedLog::new(self.sign_eta_prime(), self.log_eta_prime_scaled()).value()
    }
}

/// Log of `|η|` and sign at a checkpoint of the horizon ladder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checkpoint {
    pub x: f64,
    pub log_eta: f64,
    pub increasing: bool,
}

/// Result of one shooting solve.
#[derive(Debug, Clone)]
pub struct EigenSolution {
    pub lambda: f64,
    pub eta: LogGridFunction,
    pub eta_prime: LogGridFunction,
    pub first_sign_change: Option<f64>,
    pub horizon: f64,
    /// No sign change up to the horizon, but `η` was decreasing there or the
    /// drift became undefined before the requested horizon.
    pub provisional: bool,
    pub checkpoints: Vec<Checkpoint>,
    nodes: Vec<Node>,
    spec: DriftSpec,
    opts: EigenOptions,
}

struct Tableau {
    c: [f64; 3],
    a: [[f64; 3]; 3],
}

static RADAU: LazyLock<Tableau> = LazyLock::new(|| {
    let s6 = 6f64.sqrt();
    Tableau {
        c: [(4.0 - s6) / 10.0, (4.0 + s6) / 10.0, 1.0],
        a: [
            [(88.0 - 7.0 * s6) / 360.0, (296.0 - 169.0 * s6) / 1800.0, (-2.0 + 3.0 * s6) / 225.0],
            [(296.0 + 169.0 * s6) / 1800.0, (88.0 + 7.0 * s6) / 360.0, (-2.0 - 3.0 * s6) / 225.0],
            [(16.0 - s6) / 36.0, (16.0 + s6) / 36.0, 1.0 / 9.0],
        ],
    }
});

/// Chart switching thresholds.
const SWITCH_AT: f64 = 2.0;
/// Stage values beyond this reject the step, so a pole is never crossed.
const STAGE_BOUND: f64 = 4.0;

#[derive(Debug, Clone, Copy)]
struct State {
    x: f64,
    chart: Chart,
    r: f64,
    m: f64,
    sign: i8,
}

struct Integrator<'a> {
    spec: &'a DriftSpec,
    lambda: f64,
    opts: &'a EigenOptions,
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col] == 0.0 || !a[piv][col].is_finite() {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

impl<'a> Integrator<'a> {
    #[inline]
    fn f(&self, chart: Chart, q: f64, r: f64) -> (f64, f64) {
        let l = self.lambda;
        match chart {
            Chart::U => (-r * r + 2.0 * q * r - 2.0 * l, -2.0 * r + 2.0 * q),
            Chart::V => (1.0 - 2.0 * q * r + 2.0 * l * r * r, -2.0 * q + 4.0 * l * r),
        }
    }

    #[inline]
    fn g(&self, chart: Chart, q: f64, r: f64) -> f64 {
        match chart {
            Chart::U => r - 2.0 * q,
            Chart::V => -2.0 * self.lambda * r,
        }
    }

    fn q_checked(&self, x: f64) -> Result<f64> {
        let v = self.spec.value(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(QsdError::DriftUndefined { x })
        }
    }

    /// One Radau IIA step; `None` when Newton fails or a stage leaves the
    /// chart.
    fn radau(&self, chart: Chart, x0: f64, r0: f64, h: f64) -> Result<Option<(f64, f64)>> {
        let t = &*RADAU;
        let mut qs = [0.0; 3];
        for i in 0..3 {
            qs[i] = self.q_checked(x0 + t.c[i] * h)?;
        }
        let (f0, _) = self.f(chart, self.q_checked(x0)?, r0);
        let mut z = [t.c[0] * h * f0, t.c[1] * h * f0, t.c[2] * h * f0];
        let scale = self.opts.atol + self.opts.rtol * r0.abs();
        let mut converged = false;
        for _ in 0..12 {
            let mut fv = [0.0; 3];
            let mut dv = [0.0; 3];
            for j in 0..3 {
                let (fj, dj) = self.f(chart, qs[j], r0 + z[j]);
                fv[j] = fj;
                dv[j] = dj;
            }
            let mut jac = [[0.0; 3]; 3];
            let mut res = [0.0; 3];
            for i in 0..3 {
                res[i] = -(z[i] - h * (0..3).map(|j| t.a[i][j] * fv[j]).sum::<f64>());
                for j in 0..3 {
                    jac[i][j] = if i == j { 1.0 } else { 0.0 } - h * t.a[i][j] * dv[j];
                }
            }
            let dz = match solve3(jac, res) {
                Some(d) => d,
                None => return Ok(None),
            };
            let mut norm = 0.0f64;
            for i in 0..3 {
                z[i] += dz[i];
                norm = norm.max(dz[i].abs());
            }
            if !norm.is_finite() {
                return Ok(None);
            }
            if norm <= 1e-3 * scale {
                converged = true;
                break;
            }
        }
        if !converged || z.iter().any(|zi| (r0 + zi).abs() > STAGE_BOUND) {
            return Ok(None);
        }
        let dm = h * (0..3).map(|j| t.a[2][j] * self.g(chart, qs[j], r0 + z[j])).sum::<f64>();
        Ok(Some((r0 + z[2], dm)))
    }

    /// Step with error control. Returns the new state and the factor for the
    /// next step, or `None` with a shrink factor.
    fn attempt(&self, s: &State, h: f64) -> Result<(Option<State>, f64)> {
        let full = self.radau(s.chart, s.x, s.r, h)?;
        let half1 = self.radau(s.chart, s.x, s.r, 0.5 * h)?;
        let (full, half1) = match (full, half1) {
            (Some(a), Some(b)) => (a, b),
            _ => return Ok((None, 0.25)),
        };
        let half2 = match self.radau(s.chart, s.x + 0.5 * h, half1.0, 0.5 * h)? {
            Some(v) => v,
            None => return Ok((None, 0.25)),
        };
        let r1 = half2.0;
        let dm = half1.1 + half2.1;
        let o = self.opts;
        let er = (r1 - full.0).abs() / 31.0 / (o.atol + o.rtol * s.r.abs().max(r1.abs()));
        let em = (dm - full.1).abs() / 31.0 / (o.atol_log + o.rtol * dm.abs());
        let err = er.max(em);
        let factor = if err == 0.0 { 4.0 } else { (0.9 * err.powf(-1.0 / 6.0)).clamp(0.2, 4.0) };
        if !(err <= 1.0) {
            return Ok((None, factor.min(0.9)));
        }
        Ok((Some(State { x: s.x + h, chart: s.chart, r: r1, m: s.m + dm, sign: s.sign }), factor))
    }

    /// Zero of `v` inside an accepted `V`-chart step from `s` of length `h`.
    fn locate_crossing(&self, s: &State, h: f64) -> Result<f64> {
        let g = |len: f64| -> Result<f64> {
            if len == 0.0 {
                return Ok(s.r);
            }
            let mut st = *s;
            let mut rem = len;
            let mut hh = len;
            while rem > 0.0 {
                let step = hh.min(rem);
                match self.radau(Chart::V, st.x, st.r, step)? {
                    Some((r, _)) => {
                        st.r = r;
                        st.x += step;
                        rem -= step;
                    }
                    None => {
                        hh *= 0.5;
                        if hh < self.opts.h_min {
                            return Err(QsdError::StepUnderflow { x: st.x });
                        }
                    }
                }
            }
            Ok(st.r)
        };
        let (mut a, mut b) = (0.0, h);
        let (mut fa, mut fb) = (s.r, g(h)?);
        let mut side = 0i8;
        for _ in 0..200 {
            if (b - a).abs() <= self.opts.crossing_tol * (1.0 + s.x) {
                break;
            }
            let c = (a * fb - b * fa) / (fb - fa);
            let c = if c > a && c < b { c } else { 0.5 * (a + b) };
            let fc = g(c)?;
            if fc == 0.0 {
                return Ok(s.x + c);
            }
            if (fc > 0.0) == (fb > 0.0) {
                b = c;
                fb = fc;
                if side == -1 {
                    fa *= 0.5;
                }
                side = -1;
            } else {
                a = c;
                fa = fc;
                if side == 1 {
                    fb *= 0.5;
                }
                side = 1;
            }
        }
        Ok(s.x + 0.5 * (a + b))
    }

    fn switch_chart(s: &mut State) {
        match s.chart {
            Chart::U if s.r.abs() > SWITCH_AT => {
                s.m += s.r.abs().ln();
                s.sign *= Node::sign_of(s.r);
                s.r = 1.0 / s.r;
                s.chart = Chart::V;
            }
            Chart::V if s.r.abs() > SWITCH_AT => {
                s.m += s.r.abs().ln();
                s.sign *= Node::sign_of(s.r);
                s.r = 1.0 / s.r;
                s.chart = Chart::U;
            }
            _ => {}
        }
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stop {
    Horizon,
    Crossing,
    Custom,
    Domain,
}

struct RunResult {
    nodes: Vec<State>,
    first_crossing: Option<f64>,
    stop: Stop,
}

fn run<H, S>(
    spec: &DriftSpec,
    lambda: f64,
    opts: &EigenOptions,
    start: State,
    horizon: f64,
    stop_at_crossing: bool,
    h_max: H,
    mut stop_when: S,
) -> Result<RunResult>
where
    H: Fn(f64) -> f64,
    S: FnMut(&State) -> bool,
{
    let it = Integrator { spec, lambda, opts };
    let mut s = start;
    let mut nodes = vec![s];
    let mut first_crossing = None;
    let mut h = opts.h_init.min(h_max(s.x));
    let mut steps = 0usize;
    while s.x < horizon {
        steps += 1;
        if steps > opts.max_steps {
            return Err(QsdError::StepUnderflow { x: s.x });
        }
        let mut hh = h.min(h_max(s.x)).min(horizon - s.x);
        if horizon - s.x - hh < 1e-12 * horizon {
            hh = horizon - s.x;
        }
        let (next, factor) = match it.attempt(&s, hh) {
            Ok(v) => v,
            Err(QsdError::DriftUndefined { .. }) => {
                return Ok(RunResult { nodes, first_crossing, stop: Stop::Domain })
            }
            Err(e) => return Err(e),
        };
        let mut next = match next {
            Some(n) => n,
            None => {
                h = hh * factor;
                if h < opts.h_min * (1.0 + s.x) {
                    return Err(QsdError::StepUnderflow { x: s.x });
                }
                continue;
            }
        };
        if next.x > horizon || horizon - next.x < 1e-12 * horizon {
            next.x = horizon;
        }
        let crossed = s.chart == Chart::V && s.r != 0.0 && (s.r > 0.0) != (next.r > 0.0);
        if crossed && first_crossing.is_none() {
            let loc = it.locate_crossing(&s, next.x - s.x)?;
            first_crossing = Some(loc);
            if stop_at_crossing {
                nodes.push(next);
                return Ok(RunResult { nodes, first_crossing, stop: Stop::Crossing });
            }
        }
        Integrator::switch_chart(&mut next);
        s = next;
        nodes.push(s);
        h = hh * factor;
        if stop_when(&s) {
            return Ok(RunResult { nodes, first_crossing, stop: Stop::Custom });
        }
    }
    Ok(RunResult { nodes, first_crossing, stop: Stop::Horizon })
}

fn initial_state() -> State {
    State { x: 0.0, chart: Chart::V, r: 0.0, m: 0.0, sign: 1 }
}

/// Builder for shooting solves.
pub struct EigenSolver<'a> {
    diff: &'a Diffusion,
    opts: EigenOptions,
}

/// Step ceiling for dense grids.
fn dense_h_max(opts: &EigenOptions) -> impl Fn(f64) -> f64 {
    let (ratio, min) = (opts.dense_ratio, opts.dense_min_step);
    move |x: f64| (x / ratio).max(min)
}

/// Step ceiling for classification runs.
fn sparse_h_max(x: f64) -> f64 {
    (x / 16.0).max(1.0)
}

impl<'a> EigenSolver<'a> {
    pub fn new(diff: &'a Diffusion) -> Self {
        Self::with_options(diff, EigenOptions::default())
    }

    pub fn with_options(diff: &'a Diffusion, opts: EigenOptions) -> Self {
        EigenSolver { diff, opts }
    }

    pub fn options(&self) -> &EigenOptions {
        &self.opts
    }

    pub fn diffusion(&self) -> &Diffusion {
        self.diff
    }

    fn check_lambda(lambda: f64) -> Result<()> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(QsdError::InvalidArgument(format!("λ must be > 0, got {lambda}")));
        }
        Ok(())
    }

    fn assemble(&self, lambda: f64, rr: RunResult, requested: f64) -> Result<EigenSolution> {
        let mut nodes = Vec::with_capacity(rr.nodes.len());
        for s in &rr.nodes {
            let big_q = self.diff.big_q(s.x)?;
            nodes.push(Node { x: s.x, chart: s.chart, r: s.r, m: s.m, sign: s.sign, big_q });
        }
        let horizon = nodes.last().unwrap().x;
        let grid: Vec<f64> = nodes.iter().map(|n| n.x).collect();
        let eta: Vec<SignedLog> =
            nodes.iter().map(|n| SignedLog::new(n.sign_eta(), n.log_phi() + n.big_q)).collect();
        let eta_prime: Vec<SignedLog> = nodes
            .iter()
            .map(|n| SignedLog::new(n.sign_eta_prime(), n.log_eta_prime_scaled() + n.big_q))
            .collect();
        let mut checkpoints = Vec::new();
        let mut cp = self.opts.checkpoint_start;
        let mut idx = 0;
        while cp <= horizon {
            while idx + 1 < nodes.len() && nodes[idx].x < cp {
                idx += 1;
            }
            let n = &nodes[idx];
            checkpoints.push(Checkpoint {
                x: n.x,
                log_eta: n.log_phi() + n.big_q,
                increasing: n.sign_eta_prime() == n.sign_eta(),
            });
            cp *= 2.0;
        }
        let last = nodes.last().unwrap();
        let provisional = rr.first_crossing.is_none()
            && (last.sign_eta_prime() != last.sign_eta() || (rr.stop == Stop::Domain && horizon < requested));
        Ok(EigenSolution {
            lambda,
            eta: LogGridFunction::new(grid.clone(), eta)?,
            eta_prime: LogGridFunction::new(grid, eta_prime)?,
            first_sign_change: rr.first_crossing,
            horizon,
            provisional,
            checkpoints,
            nodes,
            spec: self.diff.spec().clone(),
            opts: self.opts,
        })
    }

    /// Dense solve to `horizon`, continuing past sign changes.
    pub fn solve(&self, lambda: f64, horizon: f64) -> Result<EigenSolution> {
        Self::check_lambda(lambda)?;
        if !(horizon > 0.0) {
            return Err(QsdError::InvalidArgument(format!("horizon must be > 0, got {horizon}")));
        }
        let rr = run(
            self.diff.spec(),
            lambda,
            &self.opts,
            initial_state(),
            horizon,
            false,
            dense_h_max(&self.opts),
            |_| false,
        )?;
        self.assemble(lambda, rr, horizon)
    }

    /// Dense solve that stops once `stop(node)` holds, at a sign change, or at
    /// the horizon cap.
    pub fn solve_until<S: FnMut(&Node) -> bool>(&self, lambda: f64, mut stop: S) -> Result<EigenSolution> {
        Self::check_lambda(lambda)?;
        let cap = self.opts.horizon_cap;
        let rr = run(
            self.diff.spec(),
            lambda,
            &self.opts,
            initial_state(),
            cap,
            true,
            dense_h_max(&self.opts),
            |s| {
                let n = Node { x: s.x, chart: s.chart, r: s.r, m: s.m, sign: s.sign, big_q: f64::NAN };
                stop(&n)
            },
        )?;
        self.assemble(lambda, rr, cap)
    }

    /// Classification run up to the horizon cap, stopping at the first sign
    /// change.
    pub fn classify(&self, lambda: f64) -> Result<EigenSolution> {
        Self::check_lambda(lambda)?;
        let cap = self.opts.horizon_cap;
        let rr = run(self.diff.spec(), lambda, &self.opts, initial_state(), cap, true, sparse_h_max, |_| false)?;
        self.assemble(lambda, rr, cap)
    }

    /// Bisection for `λ_c` inside the `δ` sandwich.
    pub fn lambda_c(&self, report: &ClassificationReport) -> Result<LambdaC> {
        if report.h1 != Verdict::Holds {
            return Err(QsdError::InvalidArgument(format!("λ_c requires H1 to hold (H1 {})", report.h1)));
        }
        let delta = report
            .delta_finite()
            .ok_or_else(|| QsdError::InvalidArgument(format!("λ_c requires finite δ (δ = {})", report.delta.value)))?;
        self.lambda_c_from_delta(delta)
    }

    pub fn lambda_c_from_delta(&self, delta: f64) -> Result<LambdaC> {
        let o = &self.opts;
        let mut lo = (1.0 - o.bracket_margin) / (4.0 * delta);
        let mut hi = (1.0 + o.bracket_margin) / delta;
        let mut probes = Vec::new();
        let record = |l: f64, sol: &EigenSolution, probes: &mut Vec<LambdaProbe>| {
            probes.push(LambdaProbe {
                lambda: l,
                sign_change: sol.first_sign_change,
                provisional: sol.provisional,
            });
        };
        let mut widen = 0;
        let (lo_sol, hi_sol) = loop {
            let (a, b) = rayon::join(|| self.classify(lo), || self.classify(hi));
            let (a, b) = (a?, b?);
            record(lo, &a, &mut probes);
            record(hi, &b, &mut probes);
            let lo_ok = a.first_sign_change.is_none();
            let hi_ok = b.first_sign_change.is_some();
            if lo_ok && hi_ok {
                break (a, b);
            }
            widen += 1;
            if widen > o.bracket_widenings {
                return Err(QsdError::Bracket(format!(
                    "no sign-change bracket found in [{lo:e}, {hi:e}] after {} widenings",
                    o.bracket_widenings
                )));
            }
            if !lo_ok {
                lo *= 0.5;
            }
            if !hi_ok {
                hi *= 2.0;
            }
        };
        let mut lc = LambdaC {
            lo,
            hi,
            provisional: lo_sol.provisional,
            crossing_at_hi: hi_sol.first_sign_change,
            probes,
        };
        self.refine_lambda_c(&mut lc, o.lambda_rtol)?;
        Ok(lc)
    }

    /// Continues the bisection until the bracket is narrower than `rtol`
    /// relative, or stops shrinking in floating point.
    pub fn refine_lambda_c(&self, lc: &mut LambdaC, rtol: f64) -> Result<()> {
        while lc.hi - lc.lo > rtol * lc.lo {
            let mid = 0.5 * (lc.lo + lc.hi);
            if !(mid > lc.lo && mid < lc.hi) {
                break;
            }
            let sol = self.classify(mid)?;
            lc.probes.push(LambdaProbe { lambda: mid, sign_change: sol.first_sign_change, provisional: sol.provisional });
            if sol.first_sign_change.is_some() {
                lc.hi = mid;
                lc.crossing_at_hi = sol.first_sign_change;
            } else {
                lc.lo = mid;
                lc.provisional = sol.provisional;
            }
        }
        Ok(())
    }

    /// `EigenSolution` whose dense grid reaches far enough that the tail mass
    /// estimate of `φ` beyond it is below `tail_bound` relative to
    /// `1/(2λ)`, or the horizon cap.
    pub fn solve_for_measure(&self, lambda: f64, tail_bound: f64) -> Result<EigenSolution> {
        let spec = self.diff.spec().clone();
        let target = tail_bound / (2.0 * lambda);
        self.solve_until(lambda, move |n| {
            if n.x < 1.0 || n.sign_eta() <= 0 {
                return false;
            }
            match pareto_tail(n.x, n.log_phi(), n.u(), spec.value(n.x)) {
                Some(t) => t < target,
                None => false,
            }
        })
    }
}

/// Tail of `φ` beyond `x` from its local log-slope
/// `s = x(η'/η − 2q)`: `∫_x^∞ φ ≈ φ(x)·x/(−s−1)`; `None` when `s ≥ −1`.
pub fn pareto_tail(x: f64, log_phi: f64, u: f64, q: f64) -> Option<f64> {
    let s = x * (u - 2.0 * q);
    if s < -1.0 {
        Some((log_phi + x.ln() - (-s - 1.0).ln()).exp())
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaProbe {
    pub lambda: f64,
    pub sign_change: Option<f64>,
    pub provisional: bool,
}

/// Final bisection bracket for `λ_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaC {
    /// Largest `λ` without a detected sign change.
    pub lo: f64,
    /// Smallest `λ` with one.
    pub hi: f64,
    /// The `lo` classification relied on the horizon cap with `η` decreasing.
    pub provisional: bool,
    pub crossing_at_hi: Option<f64>,
    pub probes: Vec<LambdaProbe>,
}

impl LambdaC {
    pub fn value(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

impl EigenSolution {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn spec(&self) -> &DriftSpec {
        &self.spec
    }

    pub fn has_sign_change(&self) -> bool {
        self.first_sign_change.is_some()
    }

    /// `φ = e^{-Q}η` on the solution grid.
    pub fn phi(&self) -> LogGridFunction {
        let grid = self.nodes.iter().map(|n| n.x).collect();
        let vals = self.nodes.iter().map(|n| SignedLog::new(n.sign_eta(), n.log_phi())).collect();
        LogGridFunction::new(grid, vals).expect("solution grid is valid")
    }

    /// State at an arbitrary `y` in `[0, horizon]`, by integrating from the
    /// nearest node to the left.
    pub fn node_at(&self, y: f64, diff: &Diffusion) -> Result<Node> {
        if !(y >= 0.0 && y <= self.horizon) {
            return Err(QsdError::OutOfGrid { x: y, lo: 0.0, hi: self.horizon });
        }
        let i = self.nodes.partition_point(|n| n.x <= y).saturating_sub(1);
        let n = self.nodes[i];
        if n.x == y {
            return Ok(n);
        }
        let start = State { x: n.x, chart: n.chart, r: n.r, m: n.m, sign: n.sign };
        let rr = run(&self.spec, self.lambda, &self.opts, start, y, false, |_| f64::INFINITY, |_| false)?;
        let s = rr.nodes.last().unwrap();
        Ok(Node { x: s.x, chart: s.chart, r: s.r, m: s.m, sign: s.sign, big_q: diff.big_q(s.x)? })
    }

    /// Largest relative residual of the Riccati equation (equivalently of
    /// `½η'' − qη' + λη = 0` divided by `η` or `η'`) at interval midpoints,
    /// from quintic Hermite interpolation of the chart variable.
    pub fn max_residual(&self) -> f64 {
        let it = Integrator { spec: &self.spec, lambda: self.lambda, opts: &self.opts };
        let dq = |x: f64| {
            let e = 1e-5 * (1.0 + x);
            let lo = (x - e).max(0.0);
            (self.spec.value(x + e) - self.spec.value(lo)) / (x + e - lo)
        };
        // r, r', r'' at a node
        let derivs = |chart: Chart, x: f64, r: f64| {
            let q = self.spec.value(x);
            let (f, fr) = it.f(chart, q, r);
            let fx = match chart {
                Chart::U => 2.0 * dq(x) * r,
                Chart::V => -2.0 * dq(x) * r,
            };
            (r, f, fx + fr * f)
        };
        let mut worst = 0.0f64;
        for w in self.nodes.windows(2) {
            let (a, b) = (w[0], w[1]);
            // skip chart switches
            if a.chart != b.chart || a.x == 0.0 {
                continue;
            }
            let h = b.x - a.x;
            let (y0, d0, s0) = derivs(a.chart, a.x, a.r);
            let (y1, d1, s1) = derivs(b.chart, b.x, b.r);
            // quintic Hermite at t = 1/2
            let ym = 0.5 * (y0 + y1) + h * (d0 - d1) * 5.0 / 32.0 + h * h * (s0 + s1) / 64.0;
            let dm = 15.0 / 8.0 * (y1 - y0) / h - 7.0 / 16.0 * (d0 + d1) + h * (s1 - s0) / 32.0;
            let xm = a.x + 0.5 * h;
            let q = self.spec.value(xm);
            let (f, _) = it.f(a.chart, q, ym);
            let scale = match a.chart {
                Chart::U => ym * ym + (2.0 * q * ym).abs() + 2.0 * self.lambda,
                Chart::V => 1.0 + (2.0 * q * ym).abs() + 2.0 * self.lambda * ym * ym,
            };
            worst = worst.max((dm - f).abs() / scale);
        }
        worst
    }

    /// `∫_0^horizon φ` by slope-corrected trapezoid on the nodes.
    pub fn phi_partial_integral(&self) -> f64 {
        let mut total = 0.0;
        for w in self.nodes.windows(2) {
            let (a, b) = (w[0], w[1]);
            total += hermite_integral(b.x - a.x, a.phi(), b.phi(), phi_slope(&a, &self.spec), phi_slope(&b, &self.spec));
        }
        total
    }
}

/// `φ' = e^{-Q}(η' − 2qη)`.
pub fn phi_slope(n: &Node, spec: &DriftSpec) -> f64 {
    n.eta_prime_scaled() - 2.0 * spec.value(n.x) * n.phi()
}

/// Certificate for `∫_0^∞ φ_λ = 1/(2λ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiIntegral {
    pub value: f64,
    /// Quadrature part over the solved range.
    pub partial: f64,
    /// Power-law tail beyond the last node.
    pub tail: f64,
    pub horizon: f64,
    /// `|value·2λ − 1|`.
    pub defect: f64,
}

/// `∫_0^∞ φ_λ`, quadrature over the grid plus a local power-law tail.
pub fn phi_integral(sol: &EigenSolution) -> Result<PhiIntegral> {
    if sol.has_sign_change() {
        return Err(QsdError::InvalidArgument(format!(
            "φ changes sign at {:?}",
            sol.first_sign_change
        )));
    }
    let partial = sol.phi_partial_integral();
    let last = sol.nodes.last().unwrap();
    let tail = pareto_tail(last.x, last.log_phi(), last.u(), sol.spec.value(last.x)).ok_or_else(|| {
        QsdError::Undecided(format!(
            "tail of φ not integrable at x = {} (partial integral {partial})",
            last.x
        ))
    })?;
    let value = partial + tail;
    Ok(PhiIntegral { value, partial, tail, horizon: last.x, defect: (value * 2.0 * sol.lambda - 1.0).abs() })
}

/// Dense shooting solve to a fixed horizon.
pub fn solve_eta(spec: &DriftSpec, lambda: f64, horizon: f64) -> Result<EigenSolution> {
    let d = Diffusion::new(spec.clone());
    EigenSolver::new(&d).solve(lambda, horizon)
}

pub fn has_sign_change(sol: &EigenSolution) -> bool {
    sol.has_sign_change()
}

pub fn phi_from_eta(sol: &EigenSolution) -> LogGridFunction {
    sol.phi()
}

/// `λ_c` for a drift given its classification.
pub fn lambda_c(spec: &DriftSpec, report: &ClassificationReport) -> Result<LambdaC> {
    let d = Diffusion::new(spec.clone());
    EigenSolver::new(&d).lambda_c(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn eta_value(sol: &EigenSolution, d: &Diffusion, x: f64) -> f64 {
        let n = sol.node_at(x, d).unwrap();
        SignedLog::new(n.sign_eta(), n.log_phi() + n.big_q).value()
    }

    #[test]
    fn radau_tableau_row_sums() {
        let t = &*RADAU;
        for i in 0..3 {
            let s: f64 = t.a[i].iter().sum();
            assert!((s - t.c[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn initial_conditions_exact() {
        let sol = solve_eta(&DriftSpec::constant(1.0), 0.375, 2.0).unwrap();
        assert_eq!(sol.eta.values()[0], SignedLog::ZERO);
        assert_eq!(sol.eta_prime.values()[0].value(), 1.0);
        assert_eq!(sol.eta.grid()[0], 0.0);
    }

    #[test]
    fn constant_drift_closed_forms() {
        let d = Diffusion::new(DriftSpec::constant(1.0));
        let s = EigenSolver::new(&d);
        // √(a²−2λ) = 1/2
        let sol = s.solve(0.375, 2.0).unwrap();
        let expect = 1.5f64.exp() - 0.5f64.exp();
        assert!(rel(eta_value(&sol, &d, 1.0), expect) < 1e-9);
        assert!(!sol.has_sign_change());
        let sol = s.solve(0.5, 2.0).unwrap();
        assert!(rel(eta_value(&sol, &d, 1.0), 1f64.exp()) < 1e-9);
        let sol = s.solve(1.0, 5.0).unwrap();
        let z = sol.first_sign_change.unwrap();
        assert!((z - std::f64::consts::PI).abs() < 1e-8, "{z}");
    }

    #[test]
    fn sign_change_absent_below_threshold() {
        let sol = solve_eta(&DriftSpec::constant(1.0), 0.25, 64.0).unwrap();
        assert!(!has_sign_change(&sol));
        assert!(sol.eta.values().iter().skip(1).all(|v| v.sign == 1));
    }

    #[test]
    fn phi_closed_form_constant() {
        let sol = solve_eta(&DriftSpec::constant(1.0), 0.5, 20.0).unwrap();
        let phi = phi_from_eta(&sol);
        for (x, v) in phi.grid().iter().zip(phi.values()).skip(1) {
            let expect = x * (-x).exp();
            assert!(rel(v.value(), expect) < 1e-8, "{x}");
            assert_eq!(v.sign, 1);
        }
        assert_eq!(phi.values()[0], SignedLog::ZERO);
    }

    #[test]
    fn ornstein_uhlenbeck_eta_is_identity_at_criticality() {
        let d = Diffusion::new(DriftSpec::linear(1.0));
        let sol = EigenSolver::new(&d).solve(1.0, 3.0).unwrap();
        for &x in &[0.1, 0.5, 1.0, 2.0] {
            assert!(rel(eta_value(&sol, &d, x), x) < 1e-7, "{x}");
        }
    }

    #[test]
    fn overflow_safe_far_out() {
        // η ~ e^{x²} overflows near x = 27
        let sol = solve_eta(&DriftSpec::linear(1.0), 0.5, 200.0).unwrap();
        let last = sol.eta.values().last().unwrap();
        assert_eq!(last.sign, 1);
        assert!(last.log_mag > 3.9e4);
    }

    #[test]
    fn residual_small() {
        for spec in [DriftSpec::constant(1.0), DriftSpec::linear(1.0)] {
            for &l in &[0.2, 0.5, 0.9] {
                let sol = solve_eta(&spec, l, 50.0).unwrap();
                let r = sol.max_residual();
                assert!(r < 1e-6, "{spec} λ={l}: residual {r}");
            }
        }
    }

    #[test]
    fn phi_integral_constant() {
        let d = Diffusion::new(DriftSpec::constant(1.0));
        let s = EigenSolver::new(&d);
        for &(l, expect) in &[(0.5, 1.0), (0.375, 4.0 / 3.0)] {
            let sol = s.solve_for_measure(l, 1e-9).unwrap();
            let pi = phi_integral(&sol).unwrap();
            assert!(rel(pi.value, expect) < 1e-7, "λ={l}: {pi:?}");
        }
    }

    #[test]
    fn phi_integral_ou_heavy_tail() {
        let d = Diffusion::new(DriftSpec::linear(1.0));
        let s = EigenSolver::new(&d);
        for &l in &[0.5, 0.9, 0.999999] {
            let sol = s.solve_for_measure(l, 1e-9).unwrap();
            let pi = phi_integral(&sol).unwrap();
            assert!(pi.defect < 1e-6, "λ={l}: {pi:?}");
        }
    }

    #[test]
    fn lambda_c_examples() {
        for &(a, expect) in &[(1.0, 0.5), (2.0, 2.0), (0.5, 0.125)] {
            let d = Diffusion::new(DriftSpec::constant(a));
            let r = d.classify_boundaries().unwrap();
            let lc = EigenSolver::new(&d).lambda_c(&r).unwrap();
            assert!(rel(lc.value(), expect) < 1e-4, "a={a}: {lc:?}");
        }
        let d = Diffusion::new(DriftSpec::linear(1.0));
        let r = d.classify_boundaries().unwrap();
        let lc = EigenSolver::new(&d).lambda_c(&r).unwrap();
        assert!(rel(lc.value(), 1.0) < 1e-4, "{lc:?}");
    }

    #[test]
    fn lambda_c_requires_finite_delta() {
        let d = Diffusion::new(DriftSpec::constant(-1.0));
        let r = d.classify_boundaries().unwrap();
        assert!(EigenSolver::new(&d).lambda_c(&r).is_err());
    }

    #[test]
    fn rejects_nonpositive_lambda() {
        assert!(solve_eta(&DriftSpec::constant(1.0), 0.0, 1.0).is_err());
        assert!(solve_eta(&DriftSpec::constant(1.0), -1.0, 1.0).is_err());
    }
}
