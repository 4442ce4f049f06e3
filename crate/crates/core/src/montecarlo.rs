//! Monte Carlo simulation of the killed diffusion and of the conditioned
//! process, with statistical checks of the exponential killing law, QSD
//! invariance and the eigenfunction semigroup identity.
//!
//! Every path owns two independent ChaCha8 streams selected by its index,
//! one for Gaussian increments and one for uniforms (initial point and
//! bridge absorption), so ensembles do not depend on thread count or
//! scheduling, and switching the bridge off leaves the increments unchanged.

use std::io::Write;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::conditioned::ConditionedModel;
use crate::drift_expr::DriftSpec;
use crate::eigen::EigenSolution;
use crate::error::{QsdError, Result};
use crate::measures::Diffusion;
use crate::qsd::QsdDistribution;

/// Minimum survivors required at the end of a regression window.
pub const MIN_SURVIVORS: usize = 100;
/// Bootstrap replicates used for confidence intervals.
pub const BOOTSTRAP_REPLICATES: usize = 400;
/// Replicates for the semigroup intervals, whose Bonferroni-adjusted
/// levels reach further into the tails.
pub const SEMIGROUP_REPLICATES: usize = 2000;
/// Two-sided confidence level of all bootstrap intervals; for a family of
/// semigroup checks it is the simultaneous level.
pub const CONFIDENCE: f64 = 0.99;
/// Relative CI width above which the semigroup estimator is flagged.
pub const HEAVY_TAIL_REL_CI: f64 = 0.2;
/// Largest tolerated fraction of clamped steps for the conditioned process.
pub const MAX_CLAMP_RATE: f64 = 1e-3;
/// Halvings attempted before a conditioned step is clamped.
pub const MAX_HALVINGS: u32 = 8;

const BOOTSTRAP_STREAM: u64 = 1 << 62;

/// Thread pool honouring `QSDLAB_THREADS`.
pub fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("QSDLAB_THREADS").ok().and_then(|s| s.trim().parse::<usize>().ok()) {
            if n > 0 {
                b = b.num_threads(n);
            }
        }
        b.build().expect("thread pool")
    })
}

fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    pool().install(|| (0..n).into_par_iter().map(f).collect())
}

/// Random stream of path `index` under `seed`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Initial law of the killed process.
#[derive(Debug, Clone, Copy)]
pub enum InitialLaw<'a> {
    Point(f64),
    Qsd(&'a QsdDistribution),
}

/// Parameters of a killed-process run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub dt: f64,
    pub t_max: f64,
    pub seed: u64,
    pub snapshot_times: Vec<f64>,
    /// Brownian-bridge absorption between grid times.
    pub bridge: bool,
}

impl SimConfig {
    pub fn new(n: usize, dt: f64, t_max: f64, seed: u64) -> Self {
        SimConfig { n, dt, t_max, seed, snapshot_times: Vec::new(), bridge: true }
    }

    pub fn with_snapshots(mut self, times: &[f64]) -> Self {
        self.snapshot_times = times.to_vec();
        self
    }

    fn steps(&self) -> usize {
        (self.t_max / self.dt).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(QsdError::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_max >= self.dt && self.t_max.is_finite()) {
            return Err(QsdError::InvalidArgument(format!("t_max must be at least dt, got {}", self.t_max)));
        }
        if self.n == 0 {
            return Err(QsdError::InvalidArgument("n must be at least 1".into()));
        }
        if let Some(t) = self.snapshot_times.iter().find(|t| !(**t >= 0.0 && **t <= self.t_max)) {
            return Err(QsdError::InvalidArgument(format!("snapshot time {t} outside [0, {}]", self.t_max)));
        }
        Ok(())
    }
}

/// Surviving positions at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub positions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub dt: f64,
    pub t_max: f64,
    pub seed: u64,
    /// `None` when the path survived to `t_max`.
    pub killing_times: Vec<Option<f64>>,
    /// In increasing time order.
    pub snapshots: Vec<Snapshot>,
    /// Indices of paths stopped by a non-finite drift.
    pub aborted: Vec<usize>,
}

impl PathEnsemble {
    /// Paths with `τ > t`.
    pub fn survivors_at(&self, t: f64) -> usize {
        self.killing_times.iter().filter(|k| k.is_none_or(|s| s > t)).count()
    }

    pub fn survival_fraction(&self, t: f64) -> f64 {
        self.survivors_at(t) as f64 / self.n_paths as f64
    }

    /// Snapshot at the requested time closest to `t`.
    pub fn snapshot(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| (s.t - t).abs() <= 0.5 * self.dt)
    }

    /// `(t, survivors, fraction)` on the grid `k·Δ`, `Δ = max(dt, t_max/1000)`
    /// rounded to a multiple of `dt`.
    pub fn survival_curve(&self) -> Vec<(f64, usize, f64)> {
        let stride = ((self.t_max / 1000.0) / self.dt).round().max(1.0) as usize;
        let steps = (self.t_max / self.dt).round() as usize;
        let mut kills: Vec<f64> = self.killing_times.iter().flatten().copied().collect();
        kills.sort_by(f64::total_cmp);
        let n = self.n_paths;
        (0..=steps)
            .step_by(stride)
            .map(|k| {
                let t = k as f64 * self.dt;
                let dead = kills.partition_point(|&s| s <= t);
                (t, n - dead, (n - dead) as f64 / n as f64)
            })
            .collect()
    }

    /// CSV `t,survivors,fraction`.
    pub fn write_survival_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,survivors,fraction")?;
        for (t, s, f) in self.survival_curve() {
            writeln!(w, "{t:.16e},{s},{f:.16e}")?;
        }
        Ok(())
    }

    /// CSV `t,y` with one row per surviving path and snapshot.
    pub fn write_snapshots_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,y")?;
        for s in &self.snapshots {
            for y in &s.positions {
                writeln!(w, "{:.16e},{y:.16e}", s.t)?;
            }
        }
        Ok(())
    }
}

struct PathOut {
    kill: Option<f64>,
    aborted: bool,
    snaps: Vec<f64>,
}

fn run_path(spec: &DriftSpec, x_init: f64, cfg: &SimConfig, snap_steps: &[usize], rng: &mut ChaCha8Rng, uni: &mut ChaCha8Rng) -> PathOut {
    let dt = cfg.dt;
    let sq = dt.sqrt();
    let steps = cfg.steps();
    let mut snaps = vec![f64::NAN; snap_steps.len()];
    let mut next_snap = 0;
    let mut x = x_init;
    for k in 0..steps {
        while next_snap < snap_steps.len() && snap_steps[next_snap] == k {
            snaps[next_snap] = x;
            next_snap += 1;
        }
        let q = spec.value(x);
        let z: f64 = rng.sample(StandardNormal);
        let y = x - q * dt + sq * z;
        if !y.is_finite() {
            return PathOut { kill: Some((k + 1) as f64 * dt), aborted: true, snaps };
        }
        let t_end = (k + 1) as f64 * dt;
        if y <= 0.0 {
            return PathOut { kill: Some(t_end), aborted: false, snaps };
        }
        if cfg.bridge {
            let e = 2.0 * x * y / dt;
            if e < 745.0 {
                let u: f64 = uni.sample(Open01);
                if u < (-e).exp() {
                    return PathOut { kill: Some(t_end), aborted: false, snaps };
                }
            }
        }
        x = y;
    }
    while next_snap < snap_steps.len() {
        snaps[next_snap] = x;
        next_snap += 1;
    }
    PathOut { kill: None, aborted: false, snaps }
}

/// Euler–Maruyama ensemble of `dX = dB − q(X) dt` killed at 0.
pub fn simulate_killed(spec: &DriftSpec, start: InitialLaw, cfg: &SimConfig) -> Result<PathEnsemble> {
    cfg.validate()?;
    if let InitialLaw::Point(x0) = start {
        if !(x0 > 0.0 && x0.is_finite()) {
            return Err(QsdError::InvalidArgument(format!("x0 must be positive, got {x0}")));
        }
    }
    let mut times = cfg.snapshot_times.clone();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let snap_steps: Vec<usize> = times.iter().map(|t| (t / cfg.dt).round() as usize).collect();
    let mass = match start {
        InitialLaw::Qsd(d) => d.total_mass().min(1.0),
        InitialLaw::Point(_) => 1.0,
    };
    let outs = par_map(cfg.n, |i| {
        let mut rng = path_rng(cfg.seed, 2 * i as u64);
        let mut uni = path_rng(cfg.seed, 2 * i as u64 + 1);
        let x_init = match start {
            InitialLaw::Point(x0) => x0,
            InitialLaw::Qsd(d) => {
                let u: f64 = uni.sample(Open01);
                d.quantile(u * mass).unwrap_or(f64::INFINITY)
            }
        };
        if !(x_init > 0.0 && x_init.is_finite()) {
            return PathOut { kill: Some(cfg.dt), aborted: true, snaps: vec![f64::NAN; snap_steps.len()] };
        }
        run_path(spec, x_init, cfg, &snap_steps, &mut rng, &mut uni)
    });
    let mut snapshots: Vec<Snapshot> = times.iter().map(|&t| Snapshot { t, positions: Vec::new() }).collect();
    let mut killing_times = Vec::with_capacity(cfg.n);
    let mut aborted = Vec::new();
    for (i, o) in outs.into_iter().enumerate() {
        if o.aborted {
            aborted.push(i);
        }
        for (s, &y) in snapshots.iter_mut().zip(&o.snaps) {
            if o.kill.is_none_or(|k| k > s.t) && y.is_finite() {
                s.positions.push(y);
            }
        }
        killing_times.push(o.kill);
    }
    Ok(PathEnsemble { n_paths: cfg.n, dt: cfg.dt, t_max: cfg.t_max, seed: cfg.seed, killing_times, snapshots, aborted })
}

/// Regression model for the log survival curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayModel {
    /// `log S(t) = c − ζt`.
    Slope,
    /// `log S(t) = c − ζt − β log t + γ/t`, absorbing the power-law
    /// prefactor and its first correction.
    Prefactor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayEstimate {
    pub zeta: f64,
    pub ci: (f64, f64),
    pub window: (f64, f64),
    pub model: DecayModel,
    pub survivors_at_end: usize,
    /// Fitted coefficients `(c, ζ, β, γ)`; absent terms are zero.
    pub coefficients: [f64; 4],
}

impl DecayEstimate {
    pub fn contains(&self, z: f64) -> bool {
        self.ci.0 <= z && z <= self.ci.1
    }
}

const FIT_POINTS: usize = 64;

fn basis(model: DecayModel, t: f64) -> Vec<f64> {
    match model {
        DecayModel::Slope => vec![1.0, -t],
        DecayModel::Prefactor => vec![1.0, -t, -t.ln(), 1.0 / t],
    }
}

/// Weighted least squares on `log S`, weights `count/(1 − S)` (inverse
/// delta-method variance).
fn fit_decay(model: DecayModel, times: &[f64], counts: &[usize], n: usize) -> Option<Vec<f64>> {
    let p = basis(model, 1.0).len();
    let rows: Vec<usize> = (0..times.len()).filter(|&j| counts[j] > 0).collect();
    if rows.len() < p + 1 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(rows.len(), p);
    let mut b = DVector::<f64>::zeros(rows.len());
    for (r, &j) in rows.iter().enumerate() {
        let s = counts[j] as f64 / n as f64;
        let w = (counts[j] as f64 / (1.0 - s).max(1.0 / n as f64)).sqrt();
        for (c, v) in basis(model, times[j]).into_iter().enumerate() {
            a[(r, c)] = w * v;
        }
        b[r] = w * s.ln();
    }
    let x = a.svd(true, true).solve(&b, 1e-12).ok()?;
    Some(x.iter().copied().collect())
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

/// Percentile interval at [`CONFIDENCE`].
fn percentile_ci(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    let a = 0.5 * (1.0 - CONFIDENCE);
    (percentile(&v, a), percentile(&v, 1.0 - a))
}

/// Bias-corrected and accelerated interval for the mean of `values` at
/// two-sided level `level`, from bootstrap means `reps`.
pub fn bca_mean_interval(values: &[f64], mut reps: Vec<f64>, level: f64) -> (f64, f64) {
    let nd = Normal::standard();
    reps.sort_by(f64::total_cmp);
    let b = reps.len() as f64;
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let below = reps.iter().filter(|&&x| x < m).count() as f64;
    let z0 = nd.inverse_cdf((below / b).clamp(0.5 / b, 1.0 - 0.5 / b));
    // jackknife acceleration of the mean reduces to the third central moment
    let (s2, s3) = values.iter().fold((0.0, 0.0), |(a, c), x| {
        let d = x - m;
        (a + d * d, c + d * d * d)
    });
    let acc = if s2 > 0.0 { s3 / (6.0 * s2.powf(1.5)) } else { 0.0 };
    let adjust = |p: f64| {
        let z = nd.inverse_cdf(p);
        nd.cdf(z0 + (z0 + z) / (1.0 - acc * (z0 + z)))
    };
    let tail = 0.5 * (1.0 - level);
    (percentile(&reps, adjust(tail)), percentile(&reps, adjust(1.0 - tail)))
}

/// Decay rate `ζ` from the survival curve over `window`, with a path-level
/// bootstrap interval.
pub fn estimate_decay_rate(ens: &PathEnsemble, window: (f64, f64), model: DecayModel) -> Result<DecayEstimate> {
    let (lo, hi) = window;
    if !(lo > 0.0 && hi > lo && hi <= ens.t_max) {
        return Err(QsdError::InvalidArgument(format!("window [{lo}, {hi}] must satisfy 0 < lo < hi <= t_max")));
    }
    let end = ens.survivors_at(hi);
    if end < MIN_SURVIVORS {
        return Err(QsdError::Insufficient(format!("{end} survivors at t = {hi}, need {MIN_SURVIVORS}")));
    }
    let times: Vec<f64> = (0..FIT_POINTS).map(|j| lo + (hi - lo) * j as f64 / (FIT_POINTS - 1) as f64).collect();
    // level of a path: number of fit times it outlives
    let levels: Vec<u8> = ens
        .killing_times
        .iter()
        .map(|k| match k {
            None => FIT_POINTS as u8,
            Some(s) => times.partition_point(|&t| t < *s) as u8,
        })
        .collect();
    let counts_from = |hist: &[usize]| -> Vec<usize> {
        let mut c = vec![0usize; FIT_POINTS];
        let mut acc = 0;
        for j in (0..FIT_POINTS).rev() {
            acc += hist[j + 1];
            c[j] = acc;
        }
        c
    };
    let mut hist = vec![0usize; FIT_POINTS + 1];
    for &l in &levels {
        hist[l as usize] += 1;
    }
    let counts = counts_from(&hist);
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "empirical survival must be nonincreasing");
    let n = ens.n_paths;
    let coef = fit_decay(model, &times, &counts, n)
        .ok_or_else(|| QsdError::Insufficient("decay regression is degenerate".into()))?;
    let reps = par_map(BOOTSTRAP_REPLICATES, |r| {
        let mut rng = path_rng(ens.seed, BOOTSTRAP_STREAM + r as u64);
        let mut h = vec![0usize; FIT_POINTS + 1];
        for _ in 0..n {
            h[levels[rng.random_range(0..n)] as usize] += 1;
        }
        fit_decay(model, &times, &counts_from(&h), n).map(|c| c[1])
    });
    let reps: Vec<f64> = reps.into_iter().flatten().collect();
    if reps.len() < BOOTSTRAP_REPLICATES / 2 {
        return Err(QsdError::Insufficient("too many degenerate bootstrap replicates".into()));
    }
    let mut coefficients = [0.0; 4];
    coefficients[..coef.len()].copy_from_slice(&coef);
    Ok(DecayEstimate { zeta: coef[1], ci: percentile_ci(reps), window, model, survivors_at_end: end, coefficients })
}

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    s.iter().enumerate().fold(0.0f64, |d, (i, &y)| {
        let f = cdf(y);
        d.max(f - i as f64 / m).max((i + 1) as f64 / m - f)
    })
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(m: usize) -> f64 {
    1.63 / (m as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsPoint {
    pub t: f64,
    pub survivors: usize,
    pub distance: f64,
    pub critical: f64,
}

impl KsPoint {
    pub fn pass(&self) -> bool {
        self.distance < self.critical
    }
}

/// Killing times against `Exp(λ)`, censored at `t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct KillingTest {
    pub lambda: f64,
    pub killed: usize,
    /// `sup_{t ≤ t_max} |F_n(t) − (1 − e^{−λt})|` over all paths.
    pub ks_distance: f64,
    pub ks_critical: f64,
    /// Censored maximum-likelihood mean `exposure / killed`.
    pub mean: f64,
    pub mean_sigma: f64,
}

impl KillingTest {
    pub fn ks_pass(&self) -> bool {
        self.ks_distance < self.ks_critical
    }

    pub fn mean_pass(&self) -> bool {
        (self.mean - 1.0 / self.lambda).abs() <= 3.0 * self.mean_sigma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceReport {
    pub initial: KsPoint,
    pub points: Vec<KsPoint>,
    /// Check times with fewer than [`MIN_SURVIVORS`] survivors.
    pub skipped: Vec<f64>,
    pub killing: KillingTest,
    pub ensemble: PathEnsemble,
}

impl InvarianceReport {
    pub fn pass(&self) -> bool {
        self.points.iter().all(KsPoint::pass) && self.killing.ks_pass() && self.killing.mean_pass()
    }
}

fn killing_test(ens: &PathEnsemble, lambda: f64) -> KillingTest {
    let n = ens.n_paths as f64;
    let mut kills: Vec<f64> = ens.killing_times.iter().flatten().copied().collect();
    kills.sort_by(f64::total_cmp);
    let f = |t: f64| 1.0 - (-lambda * t).exp();
    let mut d = f(ens.t_max) - kills.len() as f64 / n;
    for (i, &t) in kills.iter().enumerate() {
        d = d.max(f(t) - i as f64 / n).max((i + 1) as f64 / n - f(t));
    }
    let exposure: f64 = ens.killing_times.iter().map(|k| k.unwrap_or(ens.t_max)).sum();
    let killed = kills.len();
    let mean = exposure / killed.max(1) as f64;
    KillingTest {
        lambda,
        killed,
        ks_distance: d.abs(),
        ks_critical: ks_critical_1pct(ens.n_paths),
        mean,
        mean_sigma: mean / (killed.max(1) as f64).sqrt(),
    }
}

/// Starts `n` paths from `dist` and compares survivors at each `t_checks`
/// time with `dist`, and killing times with `Exp(dist.lambda)`.
pub fn qsd_invariance_check(spec: &DriftSpec, dist: &QsdDistribution, t_checks: &[f64], n: usize, dt: f64, seed: u64) -> Result<InvarianceReport> {
    let t_max = t_checks.iter().copied().fold(dt, f64::max);
    let mut times = vec![0.0];
    times.extend_from_slice(t_checks);
    let cfg = SimConfig::new(n, dt, t_max, seed).with_snapshots(&times);
    let ens = simulate_killed(spec, InitialLaw::Qsd(dist), &cfg)?;
    let ks_at = |s: &Snapshot| KsPoint {
        t: s.t,
        survivors: s.positions.len(),
        distance: ks_statistic(&s.positions, |y| dist.cdf_at(y) / dist.total_mass()),
        critical: ks_critical_1pct(s.positions.len().max(1)),
    };
    let initial = ks_at(ens.snapshot(0.0).expect("t = 0 snapshot"));
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for &t in t_checks {
        let s = ens.snapshot(t).expect("requested snapshot");
        if s.positions.len() < MIN_SURVIVORS {
            skipped.push(t);
        } else {
            points.push(ks_at(s));
        }
    }
    let killing = killing_test(&ens, dist.lambda);
    Ok(InvarianceReport { initial, points, skipped, killing, ensemble: ens })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupPoint {
    pub t: f64,
    pub ratio: f64,
    pub ci: (f64, f64),
    pub predicted: f64,
    pub survivors: usize,
    /// Relative CI width exceeds [`HEAVY_TAIL_REL_CI`].
    pub heavy_tail: bool,
}

impl SemigroupPoint {
    pub fn pass(&self) -> bool {
        self.ci.0 <= self.predicted && self.predicted <= self.ci.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupReport {
    pub lambda: f64,
    pub x0: f64,
    pub points: Vec<SemigroupPoint>,
    /// Least-squares slope of `log ratio` against `t`.
    pub slope: f64,
    /// Per-point level; Bonferroni over the points makes the family
    /// simultaneous at [`CONFIDENCE`].
    pub level: f64,
}

impl SemigroupReport {
    pub fn pass(&self) -> bool {
        self.points.iter().all(SemigroupPoint::pass)
    }
}

/// Monte Carlo estimate of `E_x0[η(X_t); τ > t] / η(x0)` against `e^{−λt}`,
/// with BCa intervals simultaneous over the requested times.
pub fn semigroup_check(diff: &Diffusion, principal: &EigenSolution, x0: f64, times: &[f64], n: usize, dt: f64, seed: u64) -> Result<SemigroupReport> {
    if principal.has_sign_change() {
        return Err(QsdError::InvalidArgument("eigenfunction changes sign".into()));
    }
    let lambda = principal.lambda;
    let log_eta = |y: f64| -> Result<f64> {
        let node = principal.node_at(y.min(principal.horizon), diff)?;
        Ok(node.log_phi() + node.big_q)
    };
    let base = log_eta(x0)?;
    let t_max = times.iter().copied().fold(dt, f64::max);
    let cfg = SimConfig::new(n, dt, t_max, seed).with_snapshots(times);
    let ens = simulate_killed(diff.spec(), InitialLaw::Point(x0), &cfg)?;
    let family = times.iter().filter(|&&t| t > 0.0).count().max(1);
    let level = 1.0 - (1.0 - CONFIDENCE) / family as f64;
    let mut points = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let predicted = (-lambda * t).exp();
        if t == 0.0 {
            points.push(SemigroupPoint { t, ratio: 1.0, ci: (1.0, 1.0), predicted, survivors: n, heavy_tail: false });
            continue;
        }
        let s = ens.snapshot(t).expect("requested snapshot");
        let vals: Vec<f64> = pool().install(|| s.positions.par_iter().map(|&y| log_eta(y).map(|l| (l - base).exp())).collect::<Result<_>>())?;
        let mut all = vals.clone();
        all.resize(n, 0.0);
        let ratio = all.iter().sum::<f64>() / n as f64;
        let reps = par_map(SEMIGROUP_REPLICATES, |r| {
            let mut rng = path_rng(seed ^ (k as u64 + 1), BOOTSTRAP_STREAM + r as u64);
            (0..n).map(|_| all[rng.random_range(0..n)]).sum::<f64>() / n as f64
        });
        let ci = bca_mean_interval(&all, reps, level);
        let heavy_tail = (ci.1 - ci.0) > HEAVY_TAIL_REL_CI * ratio.abs();
        points.push(SemigroupPoint { t, ratio, ci, predicted, survivors: s.positions.len(), heavy_tail });
    }
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.t > 0.0 && p.ratio > 0.0).map(|p| (p.t, p.ratio.ln())).collect();
    let slope = if pts.len() >= 2 {
        let m = pts.len() as f64;
        let (st, sl) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
        let (mt, ml) = (st / m, sl / m);
        let num: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        num / den
    } else {
        f64::NAN
    };
    Ok(SemigroupReport { lambda, x0, points, slope, level })
}

/// Parameters of a conditioned-process run.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationConfig {
    pub n: usize,
    pub dt: f64,
    pub t_max: f64,
    pub seed: u64,
    pub bins: usize,
    /// Time between occupation samples.
    pub sample_every: f64,
}

impl OccupationConfig {
    pub fn new(n: usize, dt: f64, t_max: f64, seed: u64) -> Self {
        OccupationConfig { n, dt, t_max, seed, bins: 40, sample_every: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupationSummary {
    /// Bin edges, `bins + 1` values.
    pub edges: Vec<f64>,
    /// Occupation frequencies over `[t_max/2, 3t_max/4)`.
    pub early: Vec<f64>,
    /// Occupation frequencies over `[3t_max/4, t_max]`.
    pub late: Vec<f64>,
    /// Total variation distance between the two windows.
    pub distance: f64,
    /// Mean TV distance between even and odd paths within each window.
    pub noise_floor: f64,
    pub mean_early: f64,
    pub mean_late: f64,
    pub steps: u64,
    /// Steps clamped after [`MAX_HALVINGS`] halvings, or beyond the drift table.
    pub clamped: u64,
}

impl OccupationSummary {
    pub fn stationary(&self) -> bool {
        self.distance < self.noise_floor
    }

    pub fn clamp_rate(&self) -> f64 {
        self.clamped as f64 / self.steps.max(1) as f64
    }
}

struct Stepper<'a> {
    model: &'a ConditionedModel,
    floor: f64,
    limit: f64,
    clamped: u64,
}

impl Stepper<'_> {
    fn drift(&mut self, y: f64) -> f64 {
        match self.model.drift_fast(y) {
            Some(p) => -p,
            None => {
                self.clamped += 1;
                -self.model.drift_fast(self.limit).unwrap_or(0.0)
            }
        }
    }

    fn advance(&mut self, y: f64, h: f64, depth: u32, rng: &mut ChaCha8Rng) -> f64 {
        let b = self.drift(y);
        let z: f64 = rng.sample(StandardNormal);
        let next = y + b * h + h.sqrt() * z;
        if next > 0.0 && next.is_finite() {
            return next.min(self.limit);
        }
        if depth == MAX_HALVINGS {
            self.clamped += 1;
            return self.floor;
        }
        let mid = self.advance(y, 0.5 * h, depth + 1, rng);
        self.advance(mid, 0.5 * h, depth + 1, rng)
    }
}

/// Simulates `dY = dB − φ(Y) dt` from `y0` and compares the occupation
/// measure over `[t_max/2, 3t_max/4)` and `[3t_max/4, t_max]`.
pub fn simulate_conditioned(model: &ConditionedModel, y0: f64, cfg: &OccupationConfig) -> Result<OccupationSummary> {
    if !(y0 > 0.0 && y0.is_finite()) {
        return Err(QsdError::InvalidArgument(format!("y0 must be positive, got {y0}")));
    }
    if !(cfg.dt > 0.0 && cfg.t_max >= 4.0 * cfg.dt && cfg.n >= 2 && cfg.bins >= 1) {
        return Err(QsdError::InvalidArgument("conditioned run needs dt > 0, t_max >= 4 dt, n >= 2, bins >= 1".into()));
    }
    let steps = (cfg.t_max / cfg.dt).round() as usize;
    let stride = (cfg.sample_every / cfg.dt).round().max(1.0) as usize;
    let (half, three_q) = (steps / 2, 3 * steps / 4);
    let limit = model.table_limit();
    let floor = model.first_node().min(limit);
    let outs = par_map(cfg.n, |i| {
        let mut rng = path_rng(cfg.seed, i as u64);
        let mut st = Stepper { model, floor, limit, clamped: 0 };
        let mut y = y0.min(limit);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for k in 1..=steps {
            y = st.advance(y, cfg.dt, 0, &mut rng);
            if k % stride == 0 && k >= half {
                if k < three_q { a.push(y) } else { b.push(y) }
            }
        }
        (a, b, st.clamped)
    });
    let clamped: u64 = outs.iter().map(|o| o.2).sum();
    let total = (steps * cfg.n) as u64;
    if clamped as f64 > MAX_CLAMP_RATE * total as f64 {
        return Err(QsdError::Inconsistent(format!(
            "clamped {clamped} of {total} steps, above the {MAX_CLAMP_RATE} limit"
        )));
    }
    let top = outs.iter().flat_map(|o| o.0.iter().chain(&o.1)).copied().fold(0.0f64, f64::max) * (1.0 + 1e-12);
    let w = top / cfg.bins as f64;
    let edges: Vec<f64> = (0..=cfg.bins).map(|j| j as f64 * w).collect();
    let histogram = |pick: &dyn Fn(usize) -> bool, early: bool| -> Vec<f64> {
        let mut h = vec![0.0; cfg.bins];
        let mut m = 0.0f64;
        for (_, o) in outs.iter().enumerate().filter(|(i, _)| pick(*i)) {
            for &y in if early { &o.0 } else { &o.1 } {
                h[((y / w) as usize).min(cfg.bins - 1)] += 1.0;
                m += 1.0;
            }
        }
        h.iter_mut().for_each(|v| *v /= m.max(1.0));
        h
    };
    let tv = |p: &[f64], q: &[f64]| 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let all = |_: usize| true;
    let even = |i: usize| i % 2 == 0;
    let odd = |i: usize| i % 2 == 1;
    let early = histogram(&all, true);
    let late = histogram(&all, false);
    let noise_floor = 0.5 * (tv(&histogram(&even, true), &histogram(&odd, true)) + tv(&histogram(&even, false), &histogram(&odd, false)));
    let mean = |h: &[f64]| h.iter().enumerate().map(|(j, p)| p * (j as f64 + 0.5) * w).sum::<f64>();
    Ok(OccupationSummary {
        distance: tv(&early, &late),
        noise_floor,
        mean_early: mean(&early),
        mean_late: mean(&late),
        edges,
        early,
        late,
        steps: total,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse_drift;

    fn spec(s: &str) -> DriftSpec {
        parse_drift(s).unwrap()
    }

    #[test]
    fn same_seed_reproduces_ensemble() {
        let cfg = SimConfig::new(500, 1e-2, 2.0, 7).with_snapshots(&[0.5, 1.0]);
        let a = simulate_killed(&spec("const:1"), InitialLaw::Point(1.0), &cfg).unwrap();
        let b = simulate_killed(&spec("const:1"), InitialLaw::Point(1.0), &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate_killed(&spec("const:1"), InitialLaw::Point(1.0), &SimConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.killing_times, c.killing_times);
    }

    #[test]
    fn snapshots_hold_exactly_the_survivors() {
        let cfg = SimConfig::new(2000, 1e-2, 3.0, 1).with_snapshots(&[0.0, 1.0, 3.0]);
        let e = simulate_killed(&spec("linear:1"), InitialLaw::Point(0.5), &cfg).unwrap();
        for s in &e.snapshots {
            assert_eq!(s.positions.len(), e.survivors_at(s.t));
        }
        assert_eq!(e.snapshot(0.0).unwrap().positions.len(), 2000);
        assert!(e.killing_times.iter().flatten().all(|&k| k > 0.0 && k <= 3.0 + 1e-12));
    }

    #[test]
    fn survival_curve_is_nonincreasing() {
        let e = simulate_killed(&spec("const:0"), InitialLaw::Point(1.0), &SimConfig::new(1000, 1e-2, 2.0, 3)).unwrap();
        let c = e.survival_curve();
        assert_eq!(c[0].1, 1000);
        assert!(c.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn bridge_only_adds_absorptions() {
        let cfg = SimConfig::new(4000, 1e-2, 1.0, 11);
        let with = simulate_killed(&spec("const:0"), InitialLaw::Point(1.0), &cfg).unwrap();
        let without = simulate_killed(&spec("const:0"), InitialLaw::Point(1.0), &SimConfig { bridge: false, ..cfg }).unwrap();
        for (a, b) in with.killing_times.iter().zip(&without.killing_times) {
            match (a, b) {
                (Some(x), Some(y)) => assert!(x <= y),
                (None, Some(_)) => panic!("bridge run outlived its twin"),
                _ => {}
            }
        }
        assert!(with.survivors_at(1.0) < without.survivors_at(1.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = spec("const:0");
        assert!(simulate_killed(&s, InitialLaw::Point(0.0), &SimConfig::new(1, 0.1, 1.0, 0)).is_err());
        assert!(simulate_killed(&s, InitialLaw::Point(1.0), &SimConfig::new(1, 0.1, 0.01, 0)).is_err());
        assert!(simulate_killed(&s, InitialLaw::Point(1.0), &SimConfig::new(0, 0.1, 1.0, 0)).is_err());
        assert!(simulate_killed(&s, InitialLaw::Point(1.0), &SimConfig::new(1, 0.1, 1.0, 0).with_snapshots(&[2.0])).is_err());
    }

    #[test]
    fn decay_needs_survivors() {
        let e = simulate_killed(&spec("const:1"), InitialLaw::Point(1.0), &SimConfig::new(200, 1e-2, 10.0, 5)).unwrap();
        assert!(matches!(estimate_decay_rate(&e, (1.0, 10.0), DecayModel::Slope), Err(QsdError::Insufficient(_))));
    }

    #[test]
    fn decay_fit_recovers_exact_exponential() {
        // survival exactly e^{-0.7 t} on the fit grid, no noise
        let n = 1_000_000;
        let rate: f64 = 0.7;
        let killing_times = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                let t = -u.ln() / rate;
                (t <= 6.0).then_some(t)
            })
            .collect();
        let e = PathEnsemble { n_paths: n, dt: 1e-3, t_max: 6.0, seed: 0, killing_times, snapshots: vec![], aborted: vec![] };
        let d = estimate_decay_rate(&e, (1.0, 5.0), DecayModel::Slope).unwrap();
        assert!((d.zeta - rate).abs() < 1e-3, "{}", d.zeta);
    }

    #[test]
    fn ks_statistic_of_uniform_grid() {
        let s: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_statistic(&s, |y| y) - 0.005).abs() < 1e-12);
    }
}
