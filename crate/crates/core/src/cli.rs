//! Batch front end: configuration, analysis pipeline and artifacts.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::conditioned::{rpositivity_with, ConditionedModel, CriterionOptions, CriterionVerdict, RPositivity};
use crate::drift_expr::{parse_drift, DriftKind, DriftSpec};
use crate::eigen::{EigenOptions, EigenSolver, LambdaC};
use crate::error::{QsdError, Result};
use crate::measures::{ClassificationReport, Diffusion, Estimate, MeasureOptions, Verdict};
use crate::montecarlo::{
    estimate_decay_rate, qsd_invariance_check, semigroup_check, simulate_conditioned, simulate_killed, DecayEstimate, DecayModel, InitialLaw,
    OccupationConfig, PathEnsemble, SimConfig,
};
use crate::plot::{LinePlot, Series};
use crate::qsd::{existence_from_report, Existence, QsdBuilder, QsdDistribution};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for errors and failed checks.
pub const EXIT_ERROR: i32 = 1;
/// Exit status when some verdict is undecided.
pub const EXIT_UNDECIDED: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Classify,
    LambdaC,
    Qsd,
    Rpositive,
    Simulate,
    Validate,
    Report,
}

/// A member of the QSD ladder: absolute, or a multiple of `λ_c` written as
/// `"0.9*lambda_c"`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LambdaValue {
    Absolute(f64),
    Relative(String),
}

impl LambdaValue {
    pub fn resolve(&self, lambda_c: f64) -> Result<f64> {
        match self {
            LambdaValue::Absolute(v) => Ok(*v),
            LambdaValue::Relative(s) => {
                let t = s.trim();
                let head = t
                    .strip_suffix("lambda_c")
                    .ok_or_else(|| QsdError::Config(format!("lambda value `{s}` must be a number or `<factor>*lambda_c`")))?;
                let head = head.trim().trim_end_matches('*').trim();
                let f = if head.is_empty() { 1.0 } else { head.parse::<f64>().map_err(|_| QsdError::Config(format!("bad factor in `{s}`")))? };
                Ok(f * lambda_c)
            }
        }
    }

    /// Factor of `λ_c` when relative.
    fn relative_factor(&self) -> Option<f64> {
        match self {
            LambdaValue::Relative(_) => self.resolve(1.0).ok(),
            LambdaValue::Absolute(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecayModelConfig {
    Slope,
    #[default]
    Prefactor,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    pub seed: Option<u64>,
    #[serde(default = "default_snapshots")]
    pub snapshot_times: Vec<f64>,
    #[serde(default = "default_x0")]
    pub x0: f64,
    /// Regression window for the decay rate; `[t_max/4, 3t_max/4]` if absent.
    pub window: Option<[f64; 2]>,
    #[serde(default)]
    pub decay_model: DecayModelConfig,
    #[serde(default = "default_conditioned_n")]
    pub conditioned_n: usize,
    #[serde(default = "default_conditioned_t_max")]
    pub conditioned_t_max: f64,
}

fn default_n() -> usize {
    100_000
}
fn default_dt() -> f64 {
    1e-3
}
fn default_t_max() -> f64 {
    10.0
}
fn default_snapshots() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_x0() -> f64 {
    1.0
}
fn default_conditioned_n() -> usize {
    4000
}
fn default_conditioned_t_max() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative width of the `λ_c` bracket.
    pub lambda_rtol: f64,
    /// Bound on `|2λ∫φ − 1|`.
    pub normalization: f64,
    /// Sup-distance to a closed-form minimal QSD.
    pub closed_form: f64,
    pub plateau_rel: f64,
    pub vanish_ratio: f64,
    /// Relative slack on the sandwich inequalities.
    pub sandwich_rel: f64,
    /// Relative tolerance of the measure quadratures.
    pub quad_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let c = CriterionOptions::default();
        Tolerances {
            lambda_rtol: EigenOptions::default().lambda_rtol,
            normalization: 1e-4,
            closed_form: 1e-5,
            plateau_rel: c.plateau_rel,
            vanish_ratio: c.vanish_ratio,
            sandwich_rel: 1e-9,
            quad_rel: MeasureOptions::default().quad.rel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub drift: String,
    pub commands: Vec<Command>,
    pub lambda_values: Option<Vec<LambdaValue>>,
    pub mc: Option<McConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("qsdlab-out")
}

impl AnalysisConfig {
    /// Parses and checks a config. A relative `output_dir` is resolved
    /// against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: AnalysisConfig = toml::from_str(text).map_err(|e| QsdError::Config(e.to_string()))?;
        if let Some(b) = base {
            if cfg.output_dir.is_relative() {
                cfg.output_dir = b.join(&cfg.output_dir);
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| QsdError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    fn check(&self) -> Result<()> {
        parse_drift(&self.drift)?;
        if self.commands.is_empty() {
            return Err(QsdError::Config("commands must not be empty".into()));
        }
        let needs_mc = self.commands.iter().any(|c| matches!(c, Command::Simulate | Command::Validate));
        if needs_mc {
            let mc = self.mc.as_ref().ok_or_else(|| QsdError::Config("simulate/validate require an [mc] block".into()))?;
            if mc.seed.is_none() {
                return Err(QsdError::Config("mc.seed is required for simulate/validate".into()));
            }
        }
        if let Some(mc) = &self.mc {
            if !(mc.dt > 0.0 && mc.t_max >= mc.dt && mc.n >= 1 && mc.x0 > 0.0) {
                return Err(QsdError::Config("mc requires dt > 0, t_max >= dt, n >= 1, x0 > 0".into()));
            }
        }
        Ok(())
    }

    /// Requested commands closed under prerequisites.
    pub fn plan(&self) -> BTreeSet<Command> {
        let mut s: BTreeSet<Command> = self.commands.iter().copied().collect();
        if s.contains(&Command::Validate) || s.contains(&Command::Qsd) || s.contains(&Command::Rpositive) {
            s.insert(Command::LambdaC);
        }
        s.insert(Command::Classify);
        s
    }
}

/// One named check of the validation suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: String,
    pub tolerance: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub report: String,
    pub checks: Vec<Check>,
}

struct Session<'c> {
    cfg: &'c AnalysisConfig,
    spec: DriftSpec,
    diff: Diffusion,
    eig: EigenOptions,
    out: PathBuf,
    text: String,
    undecided: bool,
    failed: bool,
    report: Option<ClassificationReport>,
    existence: Option<Existence>,
    lambda_c: Option<LambdaC>,
    ladder: Vec<QsdDistribution>,
    criterion: Option<RPositivity>,
    ensemble: Option<PathEnsemble>,
    decay: Option<DecayEstimate>,
    checks: Vec<Check>,
}

fn g(v: f64) -> String {
    format!("{v:.10e}")
}

macro_rules! line {
    ($s:expr, $($arg:tt)*) => {{
        let _ = writeln!($s.text, $($arg)*);
    }};
}

impl<'c> Session<'c> {
    fn new(cfg: &'c AnalysisConfig) -> Result<Self> {
        let spec = parse_drift(&cfg.drift)?;
        let mut mo = MeasureOptions::default();
        mo.quad.rel = cfg.tolerances.quad_rel;
        let diff = Diffusion::with_options(spec.clone(), mo);
        let eig = EigenOptions { lambda_rtol: cfg.tolerances.lambda_rtol, ..EigenOptions::default() };
        fs::create_dir_all(&cfg.output_dir)?;
        Ok(Session {
            cfg,
            spec,
            diff,
            eig,
            out: cfg.output_dir.clone(),
            text: String::new(),
            undecided: false,
            failed: false,
            report: None,
            existence: None,
            lambda_c: None,
            ladder: Vec::new(),
            criterion: None,
            ensemble: None,
            decay: None,
            checks: Vec::new(),
        })
    }

    fn mc(&self) -> &McConfig {
        self.cfg.mc.as_ref().expect("checked at parse time")
    }

    fn seed(&self) -> u64 {
        self.mc().seed.expect("checked at parse time")
    }

    fn exists(&self) -> bool {
        self.existence.as_ref().is_some_and(Existence::exists)
    }

    fn classify(&mut self) -> Result<()> {
        let r = self.diff.classify_boundaries()?;
        let mo = self.diff.options();
        line!(self, "[classify]");
        line!(self, "drift: {}", self.spec);
        line!(
            self,
            "improper integrals: relative tolerance {:e}; divergent after {} nondecreasing doublings past {}",
            mo.converge_rel, mo.divergence_run, mo.divergence_start
        );
        let last = |e: &[(f64, f64)]| e.last().map(|p| format!(" (last truncation X = {}, log partial = {})", g(p.0), g(p.1))).unwrap_or_default();
        line!(self, "H1 (scale function unbounded): {}{}", r.h1, last(&r.h1_evidence));
        line!(self, "H2 (infinity is natural): {}{}", r.h2, last(&r.h2_evidence));
        match r.delta.value {
            Estimate::Finite(_) => line!(self, "delta = {} (argmax {})", r.delta.value, g(r.delta.argmax)),
            _ => line!(self, "delta = {}", r.delta.value),
        }
        line!(self, "speed measure total mass = {}", r.mu_total);
        line!(self, "regular at 0: {}", if r.regular_at_zero { "yes" } else { "no" });
        if !r.consistent {
            line!(self, "warning: delta finite but speed measure mass not finite");
        }
        let ex = existence_from_report(r.clone());
        let msg = match (ex.verdict, r.h1, &r.delta.value) {
            (Verdict::Holds, _, _) if ex.family_valid => "QSD exists (delta < inf, H1 holds); every lambda in (0, lambda_c] gives a QSD".to_string(),
            (Verdict::Holds, _, _) => "QSD exists (delta < inf, H1 holds)".to_string(),
            (Verdict::Fails, _, d) if d.is_infinite() => "no QSD exists (δ = ∞)".to_string(),
            (Verdict::Fails, _, _) => "no QSD exists (H1 fails)".to_string(),
            _ => "existence undecided".to_string(),
        };
        line!(self, "existence: {msg}");
        if ex.verdict == Verdict::Undecided || r.h1 == Verdict::Undecided || r.h2 == Verdict::Undecided {
            self.undecided = true;
        }
        let mut w = BufWriter::new(File::create(self.out.join("classification.csv"))?);
        use std::io::Write;
        writeln!(w, "quantity,value")?;
        writeln!(w, "drift,{}", self.spec)?;
        writeln!(w, "h1,{}", r.h1)?;
        writeln!(w, "h2,{}", r.h2)?;
        writeln!(w, "delta,{}", est(&r.delta.value))?;
        writeln!(w, "delta_argmax,{:.16e}", r.delta.argmax)?;
        writeln!(w, "mu_total,{}", est(&r.mu_total))?;
        writeln!(w, "regular_at_zero,{}", r.regular_at_zero)?;
        writeln!(w, "existence,{}", ex.verdict)?;
        w.flush()?;
        self.report = Some(r);
        self.existence = Some(ex);
        Ok(())
    }

    fn lambda_c(&mut self) -> Result<()> {
        line!(self, "\n[lambda-c]");
        if !self.exists() {
            line!(self, "skipped: no QSD exists");
            return Ok(());
        }
        let solver = EigenSolver::with_options(&self.diff, self.eig.clone());
        let r = self.report.as_ref().unwrap();
        let lc = solver.lambda_c(r)?;
        let delta = r.delta_finite().unwrap();
        line!(self, "lambda_c in [{}, {}] (bisection relative tolerance {:e})", g(lc.lo), g(lc.hi), self.eig.lambda_rtol);
        line!(self, "λ_c ≈ {:.6}", lc.value());
        if lc.provisional {
            line!(self, "warning: bracket provisional (sign changes beyond the integration horizon)");
            self.undecided = true;
        }
        let (lo_b, hi_b) = (0.25 / delta, 1.0 / delta);
        let slack = self.cfg.tolerances.sandwich_rel;
        let ok = lc.hi >= lo_b * (1.0 - slack) && lc.lo <= hi_b * (1.0 + slack);
        line!(
            self,
            "sandwich 1/(4 delta) = {} <= lambda_c <= 1/delta = {}: {} (relative slack {:e})",
            g(lo_b),
            g(hi_b),
            if ok { "holds" } else { "violated" },
            slack
        );
        self.lambda_c = Some(lc);
        Ok(())
    }

    fn ladder_values(&self, lc: f64) -> Result<Vec<(f64, bool)>> {
        let default = vec![
            LambdaValue::Relative("0.5*lambda_c".into()),
            LambdaValue::Relative("0.9*lambda_c".into()),
            LambdaValue::Relative("lambda_c".into()),
        ];
        let vals = self.cfg.lambda_values.clone().unwrap_or(default);
        vals.iter().map(|v| Ok((v.resolve(lc)?, v.relative_factor() == Some(1.0)))).collect()
    }

    fn qsd(&mut self) -> Result<()> {
        line!(self, "\n[qsd]");
        let Some(lc) = self.lambda_c.clone() else {
            line!(self, "skipped: no QSD exists");
            return Ok(());
        };
        let solver = EigenSolver::with_options(&self.diff, self.eig.clone());
        let builder = QsdBuilder::new(&solver, &lc);
        let tol = self.cfg.tolerances.clone();
        for (lambda, minimal) in self.ladder_values(lc.value())? {
            let minimal = minimal || (lambda > lc.lo && lambda <= lc.hi);
            if !(lambda > 0.0) || lambda > lc.hi {
                line!(self, "lambda = {}: no QSD (outside (0, lambda_c])", g(lambda));
                continue;
            }
            let d = if minimal { builder.minimal()? } else { builder.build(lambda)? };
            let name = format!("qsd_{lambda:.6}.csv");
            d.write_csv(BufWriter::new(File::create(self.out.join(&name))?))?;
            let ok = d.normalization_defect < tol.normalization;
            line!(
                self,
                "lambda = {}{}: {name}; normalization |2 lambda int phi - 1| = {:.3e} ({} tolerance {:e}); identity gap {:.3e}; median {}; tail mass {:.3e}",
                g(d.lambda),
                if minimal { " (minimal)" } else { "" },
                d.normalization_defect,
                if ok { "within" } else { "exceeds" },
                tol.normalization,
                d.identity_gap,
                g(d.median()),
                d.tail_mass
            );
            if minimal {
                if let Some((label, f)) = closed_form(&self.spec) {
                    let err = (0..=999)
                        .map(|k| 0.01 + (10.0 - 0.01) * k as f64 / 999.0)
                        .map(|y| (d.density_at(y).unwrap_or(f64::NAN) - f(y)).abs())
                        .fold(0.0, f64::max);
                    let verb = if err < tol.closed_form { "matches" } else { "deviates from" };
                    line!(self, "minimal QSD {verb} {label} (sup error on [0.01, 10] = {err:.3e}, tolerance {:e})", tol.closed_form);
                }
            }
            self.ladder.push(d);
        }
        Ok(())
    }

    fn rpositive(&mut self) -> Result<()> {
        line!(self, "\n[rpositive]");
        if self.lambda_c.is_none() {
            line!(self, "skipped: no QSD exists");
            return Ok(());
        }
        let t = &self.cfg.tolerances;
        let opts = CriterionOptions { plateau_rel: t.plateau_rel, vanish_ratio: t.vanish_ratio, ..CriterionOptions::default() };
        let rp = rpositivity_with(&self.diff, self.report.as_ref().unwrap(), &opts)?;
        line!(
            self,
            "criterion product at x = {}: {} (peak {}; vanishing below {:e} of peak, plateau at relative change {:e} over {} doublings)",
            g(rp.ladder.last().map(|p| p.0).unwrap_or(f64::NAN)),
            g(rp.limit),
            g(rp.peak),
            opts.vanish_ratio,
            opts.plateau_rel,
            opts.plateau_run
        );
        line!(self, "verdict: {}", rp.verdict);
        if rp.verdict == CriterionVerdict::Undecided {
            self.undecided = true;
        }
        self.criterion = Some(rp);
        Ok(())
    }

    fn simulate(&mut self) -> Result<()> {
        line!(self, "\n[simulate]");
        let mc = self.mc().clone();
        let seed = self.seed();
        let cfg = SimConfig::new(mc.n, mc.dt, mc.t_max, seed).with_snapshots(&mc.snapshot_times);
        let ens = simulate_killed(&self.spec, InitialLaw::Point(mc.x0), &cfg)?;
        ens.write_survival_csv(BufWriter::new(File::create(self.out.join("survival.csv"))?))?;
        ens.write_snapshots_csv(BufWriter::new(File::create(self.out.join("snapshots.csv"))?))?;
        line!(self, "killed process: n = {}, dt = {:e}, t_max = {}, x0 = {}, seed = {seed}", mc.n, mc.dt, mc.t_max, mc.x0);
        line!(self, "survival at t_max: {} ({} paths)", g(ens.survival_fraction(mc.t_max)), ens.survivors_at(mc.t_max));
        if !ens.aborted.is_empty() {
            line!(self, "warning: {} paths aborted on a non-finite drift", ens.aborted.len());
        }
        let window = mc.window.map(|w| (w[0], w[1])).unwrap_or((0.25 * mc.t_max, 0.75 * mc.t_max));
        let model = match mc.decay_model {
            DecayModelConfig::Slope => DecayModel::Slope,
            DecayModelConfig::Prefactor => DecayModel::Prefactor,
        };
        match estimate_decay_rate(&ens, window, model) {
            Ok(d) => {
                line!(self, "decay rate over [{}, {}] ({model:?} model): zeta = {} with 99% bootstrap CI [{}, {}]", window.0, window.1, g(d.zeta), g(d.ci.0), g(d.ci.1));
                if let Some(lc) = &self.lambda_c {
                    let v = lc.value();
                    line!(self, "CI contains lambda_c = {}: {}", g(v), if d.contains(v) { "yes" } else { "no" });
                }
                self.decay = Some(d);
            }
            Err(QsdError::Insufficient(m)) => line!(self, "decay rate not estimated: {m}"),
            Err(e) => return Err(e),
        }
        self.ensemble = Some(ens);
        if let Some(lc) = self.lambda_c.clone() {
            let solver = EigenSolver::with_options(&self.diff, self.eig.clone());
            let c = mc.x0;
            match ConditionedModel::new(&solver, &lc, c) {
                Ok(m) => {
                    let oc = OccupationConfig::new(mc.conditioned_n, mc.dt, mc.conditioned_t_max, seed);
                    let occ = simulate_conditioned(&m, mc.x0, &oc)?;
                    line!(
                        self,
                        "conditioned process: n = {}, t_max = {}; window distance {} vs noise floor {}: {}; mean position {} then {}; clamped steps {} (limit {:e} of steps)",
                        oc.n,
                        oc.t_max,
                        g(occ.distance),
                        g(occ.noise_floor),
                        if occ.stationary() { "occupation stationary" } else { "occupation drifting" },
                        g(occ.mean_early),
                        g(occ.mean_late),
                        occ.clamped,
                        crate::montecarlo::MAX_CLAMP_RATE
                    );
                }
                Err(e) => line!(self, "conditioned process skipped: {e}"),
            }
        }
        Ok(())
    }

    fn check(&mut self, name: &str, measured: String, tolerance: String, pass: bool) {
        line!(self, "{} {name}: {measured} (tolerance {tolerance})", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed = true;
        }
        self.checks.push(Check { name: name.into(), measured, tolerance, pass });
    }

    fn validate(&mut self) -> Result<()> {
        line!(self, "\n[validate]");
        let mc = self.mc().clone();
        let seed = self.seed();
        let ex = self.existence.clone().unwrap();
        if !ex.exists() {
            let undecided = ex.verdict == Verdict::Undecided;
            self.check("existence (negative control)", format!("verdict {}", ex.verdict), "expect no QSD".into(), !undecided);
            if matches!(self.spec.kind(), DriftKind::Constant(a) if *a == 0.0) {
                let t = 1.0f64.min(mc.t_max);
                let cfg = SimConfig::new(mc.n, mc.dt, t, seed);
                let ens = simulate_killed(&self.spec, InitialLaw::Point(mc.x0), &cfg)?;
                let p = ens.survival_fraction(t);
                let exact = 1.0 - 2.0 * Normal::standard().cdf(-mc.x0 / t.sqrt());
                let sigma = (exact * (1.0 - exact) / mc.n as f64).sqrt();
                self.check(
                    "zero-drift survival (reflection principle)",
                    format!("{} vs {}", g(p), g(exact)),
                    format!("3 sigma = {:.3e}", 3.0 * sigma),
                    (p - exact).abs() <= 3.0 * sigma,
                );
            }
            return Ok(());
        }
        let lc = self.lambda_c.clone().unwrap();
        let delta = self.report.as_ref().unwrap().delta_finite().unwrap();
        let tol = self.cfg.tolerances.clone();
        let diff = self.diff.clone();
        let solver = EigenSolver::with_options(&diff, self.eig.clone());
        let builder = QsdBuilder::new(&solver, &lc);
        for f in [0.5, 0.9, 1.0] {
            let d = if f == 1.0 { builder.minimal()? } else { builder.build(f * lc.value())? };
            self.check(
                &format!("normalization at {f} lambda_c"),
                format!("{:.3e}", d.normalization_defect),
                format!("{:e}", tol.normalization),
                d.normalization_defect < tol.normalization,
            );
        }
        let s = tol.sandwich_rel;
        self.check(
            "sandwich 1/(4 delta) <= lambda_c <= 1/delta",
            format!("{} <= [{}, {}] <= {}", g(0.25 / delta), g(lc.lo), g(lc.hi), g(1.0 / delta)),
            format!("relative slack {s:e}"),
            lc.hi >= 0.25 / delta * (1.0 - s) && lc.lo <= (1.0 + s) / delta,
        );
        let minimal = builder.minimal()?;
        let times: Vec<f64> = mc.snapshot_times.iter().copied().filter(|&t| t > 0.0 && t <= mc.t_max).collect();
        let inv = qsd_invariance_check(&self.spec, &minimal, &times, mc.n, mc.dt, seed)?;
        for p in &inv.points {
            self.check(
                &format!("QSD invariance KS at t = {}", p.t),
                format!("{:.4e} ({} survivors)", p.distance, p.survivors),
                format!("1% critical {:.4e}", p.critical),
                p.pass(),
            );
        }
        for t in &inv.skipped {
            line!(self, "skipped QSD invariance at t = {t}: too few survivors");
        }
        let k = &inv.killing;
        self.check(
            "killing time KS against Exp(lambda_c)",
            format!("{:.4e}", k.ks_distance),
            format!("1% critical {:.4e}", k.ks_critical),
            k.ks_pass(),
        );
        self.check(
            "killing time mean against 1/lambda_c",
            format!("{} vs {}", g(k.mean), g(1.0 / k.lambda)),
            format!("3 sigma = {:.3e}", 3.0 * k.mean_sigma),
            k.mean_pass(),
        );
        let principal = solver.solve(lc.lo, 64.0f64.max(4.0 * mc.x0))?;
        let sg = semigroup_check(&diff, &principal, mc.x0, &times, mc.n, mc.dt, seed)?;
        for p in &sg.points {
            self.check(
                &format!("semigroup ratio at t = {}", p.t),
                format!("{} vs exp(-lambda t) = {}", g(p.ratio), g(p.predicted)),
                format!("BCa bootstrap CI [{}, {}], simultaneous 99% over {} times", g(p.ci.0), g(p.ci.1), sg.points.iter().filter(|q| q.t > 0.0).count()),
                p.pass(),
            );
            if p.heavy_tail {
                line!(self, "warning: heavy-tailed semigroup estimator at t = {}", p.t);
            }
        }
        let mut w = BufWriter::new(File::create(self.out.join("validation.csv"))?);
        use std::io::Write;
        writeln!(w, "check,measured,tolerance,pass")?;
        for c in &self.checks {
            writeln!(w, "\"{}\",\"{}\",\"{}\",{}", c.name, c.measured, c.tolerance, c.pass)?;
        }
        w.flush()?;
        Ok(())
    }

    fn plots(&mut self) -> Result<()> {
        let dir = self.out.join("plots");
        fs::create_dir_all(&dir)?;
        let mut written = Vec::new();
        if !self.ladder.is_empty() {
            let mut p = LinePlot::new("QSD densities", "y", "density");
            for d in &self.ladder {
                let top = d.quantile(0.999 * d.total_mass().min(1.0)).unwrap_or(10.0).min(d.support_truncation);
                let pts = d.grid().iter().zip(d.density_values()).filter(|(y, _)| **y <= top).map(|(y, f)| (*y, *f)).collect();
                p = p.with(Series::new(format!("lambda = {:.4}", d.lambda), pts));
            }
            p.write(&dir.join("qsd_densities.svg"))?;
            written.push("qsd_densities.svg");
        }
        if let Some(e) = &self.ensemble {
            let pts: Vec<(f64, f64)> = e.survival_curve().into_iter().map(|(t, _, f)| (t, f)).collect();
            let mut p = LinePlot::new("Survival", "t", "P(tau > t)").log_y().with(Series::new("empirical", pts));
            if let Some(d) = &self.decay {
                let c = d.coefficients;
                let fit = (0..=100)
                    .map(|k| d.window.0 + (d.window.1 - d.window.0) * k as f64 / 100.0)
                    .map(|t| (t, (c[0] - c[1] * t - c[2] * t.ln() + c[3] / t).exp()))
                    .collect();
                p = p.with(Series::new(format!("fit, zeta = {:.4}", d.zeta), fit).dashed());
            }
            p.write(&dir.join("survival.svg"))?;
            written.push("survival.svg");
        }
        if let Some(rp) = &self.criterion {
            let p = LinePlot::new("R-positivity criterion product", "x", "product").log_x().with(Series::new("product", rp.ladder.clone()));
            p.write(&dir.join("criterion.svg"))?;
            written.push("criterion.svg");
        }
        line!(self, "\n[report]");
        line!(self, "plots: {}", if written.is_empty() { "none".to_string() } else { written.join(", ") });
        Ok(())
    }

    fn finish(mut self) -> Result<Outcome> {
        let exit_code = if self.failed {
            EXIT_ERROR
        } else if self.undecided {
            EXIT_UNDECIDED
        } else {
            EXIT_OK
        };
        line!(self, "\nexit status: {exit_code}");
        fs::write(self.out.join("report.txt"), &self.text)?;
        Ok(Outcome { exit_code, report: self.text, checks: self.checks })
    }
}

fn est(e: &Estimate) -> String {
    match e {
        Estimate::Finite(v) => format!("{v:.16e}"),
        other => other.to_string(),
    }
}

type Density = Box<dyn Fn(f64) -> f64>;

/// Closed-form minimal QSD of the builtin families.
fn closed_form(spec: &DriftSpec) -> Option<(String, Density)> {
    match *spec.kind() {
        DriftKind::Constant(a) if a > 0.0 => Some(("a²ye^{−ay}".into(), Box::new(move |y: f64| a * a * y * (-a * y).exp()))),
        DriftKind::Linear(a) if a > 0.0 => Some(("2aye^{−ay²}".into(), Box::new(move |y: f64| 2.0 * a * y * (-a * y * y).exp()))),
        _ => None,
    }
}

/// Executes the planned commands in dependency order.
pub fn run(cfg: &AnalysisConfig) -> Result<Outcome> {
    let plan = cfg.plan();
    let mut s = Session::new(cfg)?;
    s.classify()?;
    if plan.contains(&Command::LambdaC) {
        s.lambda_c()?;
    }
    if plan.contains(&Command::Qsd) {
        s.qsd()?;
    }
    if plan.contains(&Command::Rpositive) {
        s.rpositive()?;
    }
    if plan.contains(&Command::Simulate) {
        s.simulate()?;
    }
    if plan.contains(&Command::Validate) {
        s.validate()?;
    }
    if plan.contains(&Command::Report) {
        s.plots()?;
    }
    s.finish()
}

/// The identity suite alone.
pub fn validate(cfg: &AnalysisConfig) -> Result<Outcome> {
    let mut c = cfg.clone();
    c.commands = vec![Command::Validate];
    c.check()?;
    run(&c)
}

/// Ad-hoc classification printed to a string; the flag is true when some
/// verdict is undecided.
pub fn classify_adhoc(drift: &str) -> Result<(String, bool)> {
    let spec = parse_drift(drift)?;
    let diff = Diffusion::new(spec.clone());
    let r = diff.classify_boundaries()?;
    let ex = existence_from_report(r.clone());
    let mut out = String::new();
    let _ = writeln!(out, "drift: {spec}");
    let _ = writeln!(out, "H1: {}", r.h1);
    let _ = writeln!(out, "H2: {}", r.h2);
    let _ = writeln!(out, "delta: {}", r.delta.value);
    let _ = writeln!(out, "speed measure total mass: {}", r.mu_total);
    let _ = writeln!(out, "QSD exists: {}", ex.verdict);
    let mut undecided = ex.verdict == Verdict::Undecided || r.h1 == Verdict::Undecided || r.h2 == Verdict::Undecided;
    if ex.exists() {
        let lc = EigenSolver::new(&diff).lambda_c(&r)?;
        let _ = writeln!(out, "lambda_c: [{}, {}]", g(lc.lo), g(lc.hi));
        undecided |= lc.provisional;
    }
    Ok((out, undecided))
}

/// Default output directory of a config path.
pub fn output_dir(cfg: &AnalysisConfig) -> &Path {
    &cfg.output_dir
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys() {
        let e = AnalysisConfig::parse("drift = \"const:1\"\ncommands = [\"classify\"]\nbogus = 1\n", None);
        assert!(matches!(e, Err(QsdError::Config(_))));
        let e = AnalysisConfig::parse("drift = \"const:1\"\ncommands = [\"classify\"]\n[mc]\nn = 10\nfoo = 2\n", None);
        assert!(matches!(e, Err(QsdError::Config(_))));
    }

    #[test]
    fn seed_required_for_simulation() {
        let e = AnalysisConfig::parse("drift = \"const:1\"\ncommands = [\"simulate\"]\n[mc]\nn = 10\n", None);
        assert!(matches!(e, Err(QsdError::Config(m)) if m.contains("seed")));
        assert!(AnalysisConfig::parse("drift = \"const:1\"\ncommands = [\"simulate\"]\n", None).is_err());
        assert!(AnalysisConfig::parse("drift = \"const:1\"\ncommands = [\"simulate\"]\nmc.seed = 3\n", None).is_ok());
    }

    #[test]
    fn dotted_keys_and_defaults() {
        let c = AnalysisConfig::parse("drift = \"linear:1\"\ncommands = [\"qsd\"]\nmc.n = 500\nmc.seed = 1\ntolerances.normalization = 1e-3\n", None).unwrap();
        let mc = c.mc.unwrap();
        assert_eq!((mc.n, mc.dt, mc.x0), (500, 1e-3, 1.0));
        assert_eq!(c.tolerances.normalization, 1e-3);
        assert_eq!(c.tolerances.closed_form, 1e-5);
    }

    #[test]
    fn plan_adds_prerequisites() {
        let c = AnalysisConfig::parse("drift = \"const:1\"\ncommands = [\"qsd\"]\n", None).unwrap();
        let p: Vec<Command> = c.plan().into_iter().collect();
        assert_eq!(p, vec![Command::Classify, Command::LambdaC, Command::Qsd]);
    }

    #[test]
    fn lambda_values_resolve() {
        assert_eq!(LambdaValue::Absolute(0.3).resolve(2.0).unwrap(), 0.3);
        assert_eq!(LambdaValue::Relative("0.5*lambda_c".into()).resolve(2.0).unwrap(), 1.0);
        assert_eq!(LambdaValue::Relative(" lambda_c ".into()).resolve(2.0).unwrap(), 2.0);
        assert!(LambdaValue::Relative("half".into()).resolve(2.0).is_err());
    }

    #[test]
    fn bad_drift_is_a_config_error() {
        assert!(AnalysisConfig::parse("drift = \"x +\"\ncommands = [\"classify\"]\n", None).is_err());
    }

    #[test]
    fn classify_run_reports_nonexistence() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("drift = \"const:-1.0\"\ncommands = [\"classify\", \"lambda-c\", \"qsd\", \"rpositive\"]\noutput_dir = {:?}\n", dir.path());
        let c = AnalysisConfig::parse(&text, None).unwrap();
        let o = run(&c).unwrap();
        assert_eq!(o.exit_code, EXIT_OK);
        assert!(o.report.contains("no QSD exists (δ = ∞)"), "{}", o.report);
        assert!(dir.path().join("classification.csv").exists());
    }
}
