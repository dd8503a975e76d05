//! Lyapunov candidates, Dini-derivative estimates, form checks and the
//! κ-based IPSS gain synthesis for dissipation-form Lyapunov functions.

use std::f64::consts::PI;
use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::{compose, invert, ClassTag, ComparisonError, KLBound, MonotoneFn};
use crate::scalar::{log_grid, norm, stream_rng, Scalar};
use crate::simulator::{RadiusMap, SimError, SystemDef};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LyapunovError {
    #[error("candidate error: {0}")]
    Candidate(String),
    #[error("sampling plan error: {0}")]
    Plan(String),
    #[error("quadrature did not converge on [{lo}, {hi}]")]
    Numerics { lo: f64, hi: f64 },
    #[error("argument {value} outside the tabulated range; {needed}")]
    Range { value: f64, needed: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

pub type CandidateFn<S> = Arc<dyn Fn(S, &[S]) -> S + Send + Sync>;

/// A locally Lipschitz `V(t, x)` with sandwich bounds `α₁(|x|) ≤ V ≤ α₂(|x|)`.
#[derive(Clone)]
pub struct LyapunovCandidate<S> {
    eval: CandidateFn<S>,
    pub alpha1: MonotoneFn<S>,
    pub alpha2: MonotoneFn<S>,
    pub lipschitz_hint: Option<RadiusMap<S>>,
}

impl<S: fmt::Debug> fmt::Debug for LyapunovCandidate<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovCandidate")
            .field("alpha1", &self.alpha1)
            .field("alpha2", &self.alpha2)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> LyapunovCandidate<S> {
    pub fn new<F>(alpha1: MonotoneFn<S>, alpha2: MonotoneFn<S>, eval: F) -> Self
    where
        F: Fn(S, &[S]) -> S + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(eval),
            alpha1,
            alpha2,
            lipschitz_hint: None,
        }
    }

    /// `V(t, x) = |x|` with `α₁ = α₂ = id`.
    pub fn norm() -> Self {
        Self::new(MonotoneFn::identity(), MonotoneFn::identity(), |_t, x| norm(x))
    }

    pub fn with_lipschitz_hint<F>(mut self, hint: F) -> Self
    where
        F: Fn(S) -> S + Send + Sync + 'static,
    {
        self.lipschitz_hint = Some(Arc::new(hint));
        self
    }

    pub fn eval(&self, t: S, x: &[S]) -> S {
        (self.eval)(t, x)
    }

    /// Largest violation of `α₁(|x|) ≤ V(t, x) ≤ α₂(|x|)` over the samples (≤ 0 means it holds).
    pub fn sandwich_residual(&self, samples: &[(S, Vec<S>)]) -> S {
        samples
            .iter()
            .map(|(t, x)| {
                let v = self.eval(*t, x);
                let r = norm(x);
                (self.alpha1.eval(r) - v).max(v - self.alpha2.eval(r))
            })
            .fold(S::neg_infinity(), S::max)
    }

    /// Scalar-state candidate tabulated on `ts × xs`.
    pub fn tabulate(&self, ts: &[S], xs: &[S]) -> CandidateTable {
        CandidateTable {
            ts: ts.iter().map(|t| t.as_f64()).collect(),
            xs: xs.iter().map(|x| x.as_f64()).collect(),
            values: ts
                .iter()
                .map(|&t| xs.iter().map(|&x| self.eval(t, &[x]).as_f64()).collect())
                .collect(),
        }
    }

    /// Bilinear interpolant of a table, clamped at the table edges.
    pub fn from_table(table: &CandidateTable, alpha1: MonotoneFn<S>, alpha2: MonotoneFn<S>) -> Result<Self, LyapunovError> {
        let ok = table.ts.len() >= 2
            && table.xs.len() >= 2
            && table.values.len() == table.ts.len()
            && table.values.iter().all(|r| r.len() == table.xs.len())
            && table.ts.windows(2).all(|w| w[1] > w[0])
            && table.xs.windows(2).all(|w| w[1] > w[0]);
        if !ok {
            return Err(LyapunovError::Candidate("malformed candidate table".into()));
        }
        let tab = table.clone();
        Ok(Self::new(alpha1, alpha2, move |t, x| S::lit(tab.eval(t.as_f64(), x[0].as_f64()))))
    }
}

/// Table-form scalar candidate `V(t, x)` on a rectangular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTable {
    pub ts: Vec<f64>,
    pub xs: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl CandidateTable {
    fn bracket(grid: &[f64], v: f64) -> (usize, f64) {
        let v = v.clamp(grid[0], grid[grid.len() - 1]);
        let i = grid.partition_point(|&g| g <= v).clamp(1, grid.len() - 1) - 1;
        (i, (v - grid[i]) / (grid[i + 1] - grid[i]))
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let (i, a) = Self::bracket(&self.ts, t);
        let (j, b) = Self::bracket(&self.xs, x);
        let v = &self.values;
        (1.0 - a) * ((1.0 - b) * v[i][j] + b * v[i][j + 1]) + a * ((1.0 - b) * v[i + 1][j] + b * v[i + 1][j + 1])
    }
}

/// `D⁺V(t, ξ, μ)` estimated from difference quotients along `f(t, ξ, μ)`.
///
/// Quotients are taken at `h_j = h0·2^{−j}`, `j < levels`; one Richardson
/// step `2q(h_{j+1}) − q(h_j)` removes the first-order bias and the result is
/// the maximum over the last `⌈levels/2⌉` extrapolated values.
pub fn dini_derivative<S: Scalar>(
    v: &LyapunovCandidate<S>,
    sys: &SystemDef<S>,
    t: S,
    xi: &[S],
    mu: &[S],
    h0: S,
    levels: usize,
) -> Result<S, LyapunovError> {
    if !(h0 > S::zero()) || levels < 3 {
        return Err(LyapunovError::Parameter(format!("need h0 > 0 and levels ≥ 3 (got {h0}, {levels})")));
    }
    if xi.len() != sys.n() || mu.len() != sys.m() {
        return Err(LyapunovError::Parameter("state or input dimension mismatch".into()));
    }
    let f = sys.rhs(t, xi, mu);
    if f.iter().any(|x| !x.is_finite()) {
        return Err(SimError::Dynamics {
            t: t.as_f64(),
            x: xi.iter().map(|x| x.as_f64()).collect(),
            u: mu.iter().map(|x| x.as_f64()).collect(),
        }
        .into());
    }
    let bad = |tt: S| LyapunovError::Candidate(format!("nonfinite V near t = {tt}"));
    let v0 = v.eval(t, xi);
    if !v0.is_finite() {
        return Err(bad(t));
    }
    let mut x = vec![S::zero(); xi.len()];
    let mut q = Vec::with_capacity(levels);
    let mut h = h0;
    for _ in 0..levels {
        for ((xk, &a), &b) in x.iter_mut().zip(xi).zip(&f) {
            *xk = a + h * b;
        }
        let vh = v.eval(t + h, &x);
        if !vh.is_finite() {
            return Err(bad(t + h));
        }
        q.push((vh - v0) / h);
        h = h / S::lit(2.0);
    }
    let two = S::lit(2.0);
    let extrapolated: Vec<S> = q.windows(2).map(|w| two * w[1] - w[0]).collect();
    let tail = levels.div_ceil(2).min(extrapolated.len());
    Ok(extrapolated[extrapolated.len() - tail..]
        .iter()
        .copied()
        .fold(S::neg_infinity(), S::max))
}
/// One sampled `(t, ξ, μ)` triple.
pub type Sample<S> = (S, Vec<S>, Vec<S>);


/// Deterministic `(t, ξ, μ)` sampling for the form checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPlan {
    pub times: Vec<f64>,
    pub radii: Vec<f64>,
    /// Random state directions; scalar states always use `±1`.
    #[serde(default = "default_directions")]
    pub directions: usize,
    pub input_radii: Vec<f64>,
    #[serde(default = "default_directions")]
    pub input_directions: usize,
    pub seed: u64,
    #[serde(default = "default_h0")]
    pub h0: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Fixed additive margin; `None` uses `1e−3·(1 + |D⁺V|)`.
    #[serde(default)]
    pub margin: Option<f64>,
}

fn default_directions() -> usize {
    4
}

fn default_h0() -> f64 {
    1e-3
}

fn default_levels() -> usize {
    8
}

impl SamplingPlan {
    pub fn new(times: Vec<f64>, radii: Vec<f64>, input_radii: Vec<f64>, seed: u64) -> Self {
        Self {
            times,
            radii,
            directions: default_directions(),
            input_radii,
            input_directions: default_directions(),
            seed,
            h0: default_h0(),
            levels: default_levels(),
            margin: None,
        }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = Some(margin);
        self
    }

    fn directions_for<S: Scalar>(dim: usize, count: usize, seed: u64, stream: u64) -> Vec<Vec<S>> {
        if dim == 1 {
            return vec![vec![S::one()], vec![-S::one()]];
        }
        let mut rng = stream_rng(seed, stream);
        (0..count.max(1))
            .map(|_| loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-3 && n <= 1.0 {
                    break v.into_iter().map(|x| S::lit(x / n)).collect();
                }
            })
            .collect()
    }

    /// Every sampled `(t, ξ, μ)` in a fixed order.
    pub fn samples<S: Scalar>(&self, sys: &SystemDef<S>) -> Result<Vec<Sample<S>>, LyapunovError> {
        if self.times.is_empty() || self.radii.is_empty() || self.input_radii.is_empty() {
            return Err(LyapunovError::Plan("times, radii and input radii must be nonempty".into()));
        }
        if self.radii.iter().chain(&self.input_radii).any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(LyapunovError::Plan("radii must be finite and nonnegative".into()));
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            return Err(LyapunovError::Plan("sample times must be finite".into()));
        }
        for &t in &self.times {
            if sys.discontinuity_times().iter().any(|d| d.as_f64() == t) {
                return Err(LyapunovError::Plan(format!("sample time {t} is a declared discontinuity time")));
            }
        }
        if !(self.h0 > 0.0) || self.levels < 3 {
            return Err(LyapunovError::Plan("need h0 > 0 and levels ≥ 3".into()));
        }
        let dirs = Self::directions_for::<S>(sys.n(), self.directions, self.seed, 0);
        let udirs = Self::directions_for::<S>(sys.m(), self.input_directions, self.seed, 1);
        let mut out = Vec::new();
        for &t in &self.times {
            for &r in &self.radii {
                let rs = S::lit(r);
                let state_dirs: &[Vec<S>] = if r == 0.0 { &dirs[..1] } else { &dirs };
                for d in state_dirs {
                    let xi: Vec<S> = d.iter().map(|&c| c * rs).collect();
                    for &ur in &self.input_radii {
                        let urs = S::lit(ur);
                        let input_dirs: &[Vec<S>] = if ur == 0.0 { &udirs[..1] } else { &udirs };
                        for e in input_dirs {
                            out.push((S::lit(t), xi.clone(), e.iter().map(|&c| c * urs).collect()));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub t: f64,
    pub xi: Vec<f64>,
    pub mu: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
    /// Tuples where the inequality was tested.
    pub checked: usize,
    /// Tuples outside the inequality's domain (implication form only).
    pub skipped: usize,
    /// Largest `lhs − rhs` over checked tuples.
    pub worst_gap: f64,
}

impl ViolationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// `D⁺V ≤ −α₄(|ξ|) + χ₄(|μ|)`.
#[derive(Debug, Clone)]
pub struct DissipationSpec<S> {
    pub alpha4: MonotoneFn<S>,
    pub chi4: MonotoneFn<S>,
}

/// `|ξ| ≥ χ₃(|μ|) ⇒ D⁺V ≤ −α₃(|ξ|)`.
#[derive(Debug, Clone)]
pub struct ImplicationSpec<S> {
    pub alpha3: MonotoneFn<S>,
    pub chi3: MonotoneFn<S>,
}

/// `D⁺V ≤ −α₅(|ξ|) + χ₅(|μ|)` with `α₅` only positive definite.
#[derive(Debug, Clone)]
pub struct IissSpec<S> {
    pub alpha5: MonotoneFn<S>,
    pub chi5: MonotoneFn<S>,
}

impl<S: Scalar> DissipationSpec<S> {
    /// The implication form every dissipation-form function also satisfies:
    /// `χ₃ = α₄⁻¹∘(2χ₄)`, `α₃ = α₄/2`.
    pub fn implication(&self) -> ImplicationSpec<S> {
        ImplicationSpec {
            alpha3: self.alpha4.scaled(S::lit(0.5)),
            chi3: compose(&self.alpha4.inverse(), &self.chi4.scaled(S::lit(2.0))),
        }
    }
}

fn run_check<S, B>(v: &LyapunovCandidate<S>, sys: &SystemDef<S>, plan: &SamplingPlan, bound: B) -> Result<ViolationReport, LyapunovError>
where
    S: Scalar,
    B: Fn(S, S) -> Option<S> + Sync,
{
    let samples = plan.samples(sys)?;
    let h0 = S::lit(plan.h0);
    let results: Vec<Option<(f64, Option<Violation>)>> = samples
        .par_iter()
        .map(|(t, xi, mu)| {
            let Some(rhs) = bound(norm(xi), norm(mu)) else {
                return Ok(None);
            };
            let lhs = dini_derivative(v, sys, *t, xi, mu, h0, plan.levels)?;
            let margin = match plan.margin {
                Some(m) => S::lit(m),
                None => S::lit(1e-3) * (S::one() + lhs.abs()),
            };
            let gap = lhs - rhs;
            let violation = (!(gap <= margin)).then(|| Violation {
                t: t.as_f64(),
                xi: xi.iter().map(|x| x.as_f64()).collect(),
                mu: mu.iter().map(|x| x.as_f64()).collect(),
                lhs: lhs.as_f64(),
                rhs: rhs.as_f64(),
                gap: gap.as_f64(),
            });
            Ok(Some((gap.as_f64(), violation)))
        })
        .collect::<Result<_, LyapunovError>>()?;
    let mut report = ViolationReport {
        violations: Vec::new(),
        checked: 0,
        skipped: 0,
        worst_gap: f64::NEG_INFINITY,
    };
    for r in results {
        match r {
            None => report.skipped += 1,
            Some((gap, viol)) => {
                report.checked += 1;
                report.worst_gap = report.worst_gap.max(gap);
                report.violations.extend(viol);
            }
        }
    }
    Ok(report)
}

pub fn check_dissipation_form<S: Scalar>(
    v: &LyapunovCandidate<S>,
    sys: &SystemDef<S>,
    spec: &DissipationSpec<S>,
    plan: &SamplingPlan,
) -> Result<ViolationReport, LyapunovError> {
    run_check(v, sys, plan, |xn, mn| Some(spec.chi4.eval(mn) - spec.alpha4.eval(xn)))
}

pub fn check_implication_form<S: Scalar>(
    v: &LyapunovCandidate<S>,
    sys: &SystemDef<S>,
    spec: &ImplicationSpec<S>,
    plan: &SamplingPlan,
) -> Result<ViolationReport, LyapunovError> {
    run_check(v, sys, plan, |xn, mn| (xn >= spec.chi3.eval(mn)).then(|| -spec.alpha3.eval(xn)))
}

pub fn check_iiss_form<S: Scalar>(
    v: &LyapunovCandidate<S>,
    sys: &SystemDef<S>,
    spec: &IissSpec<S>,
    plan: &SamplingPlan,
) -> Result<ViolationReport, LyapunovError> {
    run_check(v, sys, plan, |xn, mn| Some(spec.chi5.eval(mn) - spec.alpha5.eval(xn)))
}

const MAX_SIMPSON_DEPTH: usize = 50;

/// Adaptive Simpson with a relative per-panel criterion; on failure returns the worst panel.
pub fn adaptive_simpson<S: Scalar, F: Fn(S) -> S>(f: &F, a: S, b: S, rel_tol: S) -> Result<S, (S, S)> {
    if b <= a {
        return Ok(S::zero());
    }
    let half = S::lit(0.5);
    let m = half * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / S::lit(6.0) * (fa + S::lit(4.0) * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, rel_tol, MAX_SIMPSON_DEPTH)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<S: Scalar, F: Fn(S) -> S>(f: &F, a: S, b: S, fa: S, fm: S, fb: S, whole: S, tol: S, depth: usize) -> Result<S, (S, S)> {
    let half = S::lit(0.5);
    let m = half * (a + b);
    let (lm, rm) = (half * (a + m), half * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let six = S::lit(6.0);
    let four = S::lit(4.0);
    let left = (m - a) / six * (fa + four * flm + fm);
    let right = (b - m) / six * (fm + four * frm + fb);
    let both = left + right;
    let err = both - whole;
    let floor = S::min_positive_value() * S::lit(1e20);
    if !both.is_finite() {
        return Err((a, b));
    }
    if err.abs() <= S::lit(15.0) * (tol * both.abs()).max(floor) || m <= a || b <= m {
        return Ok(both + err / S::lit(15.0));
    }
    if depth == 0 {
        return Err((a, b));
    }
    Ok(simpson_rec(f, a, m, fa, flm, fm, left, tol, depth - 1)? + simpson_rec(f, m, b, fm, frm, fb, right, tol, depth - 1)?)
}

/// Tabulated `a(τ) = (2/π)∫₀^τ min{s, σ(s)}/(1+s²) ds` and `ln κ(q) = 2∫₁^q dτ/a(τ)`.
#[derive(Clone)]
pub struct KappaBundle<S> {
    pub sigma: MonotoneFn<S>,
    qs: Vec<S>,
    a_nodes: Vec<S>,
    log_kappa: Vec<S>,
    slopes: Vec<S>,
    pub q_min: S,
    pub q_max: S,
    pub quadrature_tol: S,
}

impl<S: fmt::Debug> fmt::Debug for KappaBundle<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KappaBundle")
            .field("q_min", &self.q_min)
            .field("q_max", &self.q_max)
            .field("nodes", &self.qs.len())
            .finish_non_exhaustive()
    }
}

/// JSON tables of a [`KappaBundle`]. `kappa` is `null` where it overflows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaTables {
    pub qs: Vec<f64>,
    pub a: Vec<f64>,
    pub kappa: Vec<Option<f64>>,
    pub kappa_prime: Vec<Option<f64>>,
    pub log_kappa: Vec<f64>,
}

/// Invariant checks on the tabulation nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaReport {
    pub kappa_at_one: f64,
    pub strictly_increasing: bool,
    pub derivative_nondecreasing: bool,
    /// `min κ'(q)σ(q) / (2κ(q))` over the nodes.
    pub min_dissipation_ratio: f64,
}

const NODES_PER_DECADE: f64 = 100.0;

fn side_grid<S: Scalar>(lo: S, hi: S) -> Vec<S> {
    let decades = (hi / lo).log10().as_f64();
    let count = ((decades * NODES_PER_DECADE).ceil() as usize).max(2) + 1;
    log_grid(lo, hi, count)
}

pub fn build_kappa<S: Scalar>(sigma: &MonotoneFn<S>, q_min: S, q_max: S, quadrature_tol: S) -> Result<KappaBundle<S>, LyapunovError> {
    if !(q_min > S::zero()) || !(q_min < S::one()) || !(q_max > S::one()) || !q_max.is_finite() {
        return Err(LyapunovError::Parameter(format!("need 0 < q_min < 1 < q_max (got {q_min}, {q_max})")));
    }
    if !(quadrature_tol > S::zero()) {
        return Err(LyapunovError::Parameter("quadrature tolerance must be positive".into()));
    }
    if sigma.class() != ClassTag::Kinf {
        return Err(LyapunovError::Parameter("σ must be class K∞".into()));
    }
    let mut qs = side_grid(q_min, S::one());
    qs.pop();
    qs.extend(side_grid(S::one(), q_max));
    let one_idx = qs.iter().position(|&q| q == S::one()).expect("grid contains 1");

    let integrand = integrand_for(sigma);
    let numerics = |(lo, hi): (S, S)| LyapunovError::Numerics { lo: lo.as_f64(), hi: hi.as_f64() };
    let mut a_nodes = Vec::with_capacity(qs.len());
    a_nodes.push(adaptive_simpson(&integrand, S::zero(), qs[0], quadrature_tol).map_err(numerics)?);
    for w in qs.windows(2) {
        let inc = adaptive_simpson(&integrand, w[0], w[1], quadrature_tol).map_err(numerics)?;
        a_nodes.push(*a_nodes.last().expect("nonempty") + inc);
    }
    if a_nodes.iter().any(|&a| !(a > S::zero())) {
        return Err(LyapunovError::Parameter("a(τ) vanishes on the grid; σ must be positive".into()));
    }

    let mut bundle = KappaBundle {
        sigma: sigma.clone(),
        qs,
        a_nodes,
        log_kappa: Vec::new(),
        slopes: Vec::new(),
        q_min,
        q_max,
        quadrature_tol,
    };
    let n = bundle.qs.len();
    let mut log_kappa = vec![S::zero(); n];
    let two = S::lit(2.0);
    for i in one_idx + 1..n {
        let inc = bundle.inverse_a_integral(i - 1, bundle.qs[i - 1], bundle.qs[i]).map_err(numerics)?;
        log_kappa[i] = log_kappa[i - 1] + two * inc;
    }
    for i in (0..one_idx).rev() {
        let inc = bundle.inverse_a_integral(i, bundle.qs[i], bundle.qs[i + 1]).map_err(numerics)?;
        log_kappa[i] = log_kappa[i + 1] - two * inc;
    }
    bundle.slopes = bundle.qs.iter().zip(&bundle.a_nodes).map(|(&q, &a)| two * q / a).collect();
    bundle.log_kappa = log_kappa;
    Ok(bundle)
}

fn integrand_for<S: Scalar>(sigma: &MonotoneFn<S>) -> impl Fn(S) -> S + '_ {
    let c = S::lit(2.0 / PI);
    move |s: S| c * s.min(sigma.eval(s)) / (S::one() + s * s)
}

impl<S: Scalar> KappaBundle<S> {
    fn node_a(&self, i: usize, tau: S) -> Result<S, (S, S)> {
        let integrand = integrand_for(&self.sigma);
        Ok(self.a_nodes[i] + adaptive_simpson(&integrand, self.qs[i], tau, self.quadrature_tol)?)
    }

    fn inverse_a_integral(&self, i: usize, lo: S, hi: S) -> Result<S, (S, S)> {
        let failed = Cell::new(None);
        let f = |tau: S| match self.node_a(i, tau) {
            Ok(a) => S::one() / a,
            Err(e) => {
                if failed.get().is_none() {
                    failed.set(Some(e));
                }
                S::nan()
            }
        };
        let r = adaptive_simpson(&f, lo, hi, self.quadrature_tol);
        match failed.get() {
            Some(e) => Err(e),
            None => r,
        }
    }

    fn range_error(&self, value: S, needed: String) -> LyapunovError {
        LyapunovError::Range {
            value: value.as_f64(),
            needed,
        }
    }

    /// Lower end of the extrapolated range, one decade below `q_min`.
    pub fn q_floor(&self) -> S {
        self.q_min / S::lit(10.0)
    }

    pub fn a(&self, tau: S) -> Result<S, LyapunovError> {
        if !(tau >= S::zero()) || tau > self.q_max {
            return Err(self.range_error(tau, format!("a(τ) is tabulated on [0, {}]", self.q_max)));
        }
        let numerics = |(lo, hi): (S, S)| LyapunovError::Numerics { lo: lo.as_f64(), hi: hi.as_f64() };
        if tau < self.qs[0] {
            let integrand = integrand_for(&self.sigma);
            return adaptive_simpson(&integrand, S::zero(), tau, self.quadrature_tol).map_err(numerics);
        }
        let i = self.qs.partition_point(|&q| q <= tau) - 1;
        self.node_a(i, tau).map_err(numerics)
    }

    /// `ln κ(q)`; `−∞` at `q = 0`.
    pub fn log_kappa(&self, q: S) -> Result<S, LyapunovError> {
        if q == S::zero() {
            return Ok(S::neg_infinity());
        }
        if !(q > S::zero()) || q > self.q_max {
            return Err(self.range_error(q, format!("extend q_max beyond {q}")));
        }
        if q < self.q_min {
            if q < self.q_floor() {
                return Err(self.range_error(q, format!("extend q_min below {}", q * S::lit(10.0))));
            }
            return Ok(self.log_kappa[0] + self.slopes[0] * (q / self.q_min).ln());
        }
        let i = (self.qs.partition_point(|&p| p <= q).max(1) - 1).min(self.qs.len() - 2);
        Ok(self.hermite(i, q.ln()))
    }

    fn hermite(&self, i: usize, x: S) -> S {
        let (x0, x1) = (self.qs[i].ln(), self.qs[i + 1].ln());
        let h = x1 - x0;
        let s = (x - x0) / h;
        let (s2, s3) = (s * s, s * s * s);
        let two = S::lit(2.0);
        let three = S::lit(3.0);
        let h00 = two * s3 - three * s2 + S::one();
        let h10 = s3 - two * s2 + s;
        let h01 = three * s2 - two * s3;
        let h11 = s3 - s2;
        h00 * self.log_kappa[i] + h10 * h * self.slopes[i] + h01 * self.log_kappa[i + 1] + h11 * h * self.slopes[i + 1]
    }

    pub fn kappa(&self, q: S) -> Result<S, LyapunovError> {
        Ok(self.log_kappa(q)?.exp())
    }

    /// `ln κ'(q) = ln κ(q) + ln 2 − ln a(q)`.
    pub fn log_kappa_prime(&self, q: S) -> Result<S, LyapunovError> {
        let l = self.log_kappa(q)?;
        if q == S::zero() {
            return Ok(S::neg_infinity());
        }
        Ok(l + S::LN_2() - self.a(q)?.ln())
    }

    pub fn kappa_prime(&self, q: S) -> Result<S, LyapunovError> {
        Ok(self.log_kappa_prime(q)?.exp())
    }

    /// Inverse of `ln κ`.
    pub fn log_kappa_inv(&self, y: S) -> Result<S, LyapunovError> {
        if y == S::neg_infinity() {
            return Ok(S::zero());
        }
        let last = *self.log_kappa.last().expect("nonempty");
        if !(y <= last) {
            return Err(self.range_error(y, format!("ln κ exceeds its value {last} at q_max; extend q_max")));
        }
        let first = self.log_kappa[0];
        if y < first {
            let q = self.q_min * ((y - first) / self.slopes[0]).exp();
            if q < self.q_floor() {
                return Err(self.range_error(y, format!("κ⁻¹ falls below {}; extend q_min below {}", self.q_floor(), q)));
            }
            return Ok(q);
        }
        let i = (self.log_kappa.partition_point(|&l| l <= y).max(1) - 1).min(self.qs.len() - 2);
        let (mut lo, mut hi) = (self.qs[i].ln(), self.qs[i + 1].ln());
        for _ in 0..200 {
            let mid = S::lit(0.5) * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.hermite(i, mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((S::lit(0.5) * (lo + hi)).exp())
    }

    pub fn kappa_inv(&self, v: S) -> Result<S, LyapunovError> {
        if !(v >= S::zero()) {
            return Err(self.range_error(v, "κ⁻¹ needs a nonnegative argument".into()));
        }
        self.log_kappa_inv(v.ln())
    }

    pub fn nodes(&self) -> &[S] {
        &self.qs
    }

    pub fn tables(&self) -> KappaTables {
        let finite = |x: S| x.is_finite().then(|| x.as_f64());
        KappaTables {
            qs: self.qs.iter().map(|q| q.as_f64()).collect(),
            a: self.a_nodes.iter().map(|a| a.as_f64()).collect(),
            kappa: self.log_kappa.iter().map(|l| finite(l.exp())).collect(),
            kappa_prime: self
                .log_kappa
                .iter()
                .zip(&self.a_nodes)
                .map(|(l, a)| finite((*l + S::LN_2() - a.ln()).exp()))
                .collect(),
            log_kappa: self.log_kappa.iter().map(|l| l.as_f64()).collect(),
        }
    }

    pub fn report(&self) -> KappaReport {
        let lkp: Vec<S> = self
            .log_kappa
            .iter()
            .zip(&self.a_nodes)
            .map(|(l, a)| *l + S::LN_2() - a.ln())
            .collect();
        let ratio = self
            .qs
            .iter()
            .zip(&self.a_nodes)
            .map(|(&q, &a)| (self.sigma.eval(q) / a).as_f64())
            .fold(f64::INFINITY, f64::min);
        KappaReport {
            kappa_at_one: self.kappa(S::one()).map(|k| k.as_f64()).unwrap_or(f64::NAN),
            strictly_increasing: self.log_kappa.windows(2).all(|w| w[1] > w[0]),
            derivative_nondecreasing: lkp.windows(2).all(|w| w[1] >= w[0]),
            min_dissipation_ratio: ratio,
        }
    }
}

/// `σ = α₄∘α₂⁻¹`.
pub fn sigma_for<S: Scalar>(alpha2: &MonotoneFn<S>, alpha4: &MonotoneFn<S>) -> MonotoneFn<S> {
    compose(alpha4, &alpha2.inverse())
}

/// IPSS gains synthesized from a dissipation-form Lyapunov function.
#[derive(Clone, Debug)]
pub struct IpssGains<S> {
    pub alpha1: MonotoneFn<S>,
    pub alpha2: MonotoneFn<S>,
    pub spec: DissipationSpec<S>,
    pub window: S,
    pub bundle: Arc<KappaBundle<S>>,
    sigma: MonotoneFn<S>,
    gamma_offset: S,
}

const INVERSION_TOL: f64 = 1e-13;

pub fn ipss_gains_from_dissipation<S: Scalar>(
    alpha1: &MonotoneFn<S>,
    alpha2: &MonotoneFn<S>,
    spec: &DissipationSpec<S>,
    window: S,
    bundle: Arc<KappaBundle<S>>,
) -> Result<IpssGains<S>, LyapunovError> {
    if !(window > S::zero()) || !window.is_finite() {
        return Err(LyapunovError::Parameter(format!("window length must be positive (got {window})")));
    }
    let sigma = sigma_for(alpha2, &spec.alpha4);
    for s in [S::lit(0.01), S::lit(0.5), S::one(), S::lit(3.0), S::lit(20.0)] {
        let (want, have) = (sigma.eval(s), bundle.sigma.eval(s));
        if !((want - have).abs() <= S::lit(1e-9) * (S::one() + want.abs())) {
            return Err(LyapunovError::Parameter(format!(
                "bundle σ({s}) = {have} but α₄∘α₂⁻¹({s}) = {want}; rebuild the bundle from σ = α₄∘α₂⁻¹"
            )));
        }
    }
    let e = window.exp();
    let gamma_offset = (S::lit(2.0) * e * window / (S::one() - (-window).exp())).ln();
    Ok(IpssGains {
        alpha1: alpha1.clone(),
        alpha2: alpha2.clone(),
        spec: spec.clone(),
        window,
        bundle,
        sigma,
        gamma_offset,
    })
}

impl<S: Scalar> IpssGains<S> {
    fn alpha1_inv(&self, y: S) -> Result<S, LyapunovError> {
        Ok(invert(&self.alpha1, y, S::lit(INVERSION_TOL))?)
    }

    /// `β(s, t) = α₁⁻¹(κ⁻¹(2e^{−t}κ(α₂(s))))`.
    pub fn beta(&self, s: S, t: S) -> Result<S, LyapunovError> {
        if s == S::zero() {
            return Ok(S::zero());
        }
        let l = self.bundle.log_kappa(self.alpha2.eval(s))?;
        let q = self.bundle.log_kappa_inv(S::LN_2() - t + l)?;
        self.alpha1_inv(q)
    }

    /// `γ(s) = α₁⁻¹(κ⁻¹(2e^T·T·s/(1 − e^{−T})))`.
    pub fn gamma(&self, s: S) -> Result<S, LyapunovError> {
        if s == S::zero() {
            return Ok(S::zero());
        }
        let q = self.bundle.log_kappa_inv(self.gamma_offset + s.ln())?;
        self.alpha1_inv(q)
    }

    /// `ρ(s) = κ'(σ⁻¹(2χ₄(s)))·χ₄(s)`; zero where the value underflows.
    pub fn rho(&self, s: S) -> Result<S, LyapunovError> {
        let c = self.spec.chi4.eval(s);
        if c == S::zero() {
            return Ok(S::zero());
        }
        let q = invert(&self.sigma, S::lit(2.0) * c, S::lit(INVERSION_TOL))?;
        if q < self.bundle.q_floor() && q < self.bundle.q_min {
            // κ' is increasing and κ'(q_floor) already underflows, so does every smaller argument.
            let at_floor = self.bundle.log_kappa_prime(self.bundle.q_floor())? + c.ln();
            if at_floor.exp() == S::zero() {
                return Ok(S::zero());
            }
        }
        Ok((self.bundle.log_kappa_prime(q)? + c.ln()).exp())
    }

    /// β as a `KLBound`; evaluation errors become NaN.
    pub fn beta_bound(&self) -> KLBound<S> {
        let g = self.clone();
        KLBound::general(move |s, t| g.beta(s, t).unwrap_or(S::nan()))
    }

    pub fn gamma_fn(&self) -> MonotoneFn<S> {
        let g = self.clone();
        MonotoneFn::from_closure(ClassTag::Kinf, move |s| g.gamma(s).unwrap_or(S::nan()))
    }

    pub fn rho_fn(&self) -> MonotoneFn<S> {
        let g = self.clone();
        MonotoneFn::from_closure(ClassTag::Kinf, move |s| g.rho(s).unwrap_or(S::nan()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparison::make_power_fn;
    use crate::simulator::linear_test_system;
    use approx::assert_abs_diff_eq;

    fn decay() -> SystemDef<f64> {
        SystemDef::new("decay", 1, 1, |_t, x: &[f64], _u: &[f64], o: &mut [f64]| o[0] = -x[0]).unwrap()
    }

    fn square() -> LyapunovCandidate<f64> {
        let sq = make_power_fn(1.0, 2.0).unwrap();
        LyapunovCandidate::new(sq.clone(), sq, |_t, x: &[f64]| x[0] * x[0])
    }

    #[test]
    fn dini_examples() {
        let sys = linear_test_system(1.0).unwrap();
        let d = dini_derivative(&square(), &sys, 0.0, &[1.0], &[0.0], 1e-3, 8).unwrap();
        assert_abs_diff_eq!(d, -2.0, epsilon = 1e-4);
        let d = dini_derivative(&LyapunovCandidate::norm(), &sys, 0.0, &[0.0], &[0.0], 1e-3, 8).unwrap();
        assert_eq!(d, 0.0);
        let tv = LyapunovCandidate::new(MonotoneFn::identity(), MonotoneFn::identity(), |t: f64, x: &[f64]| (-t).exp() * x[0] * x[0]);
        let d = dini_derivative(&tv, &decay(), 0.0, &[1.0], &[0.0], 1e-3, 8).unwrap();
        assert_abs_diff_eq!(d, -3.0, epsilon = 1e-4);
        assert!(dini_derivative(&square(), &sys, 0.0, &[1.0], &[0.0], 1e-3, 2).is_err());
        let nan = LyapunovCandidate::new(MonotoneFn::identity(), MonotoneFn::identity(), |t: f64, _x: &[f64]| if t > 0.0 { f64::NAN } else { 0.0 });
        assert!(matches!(
            dini_derivative(&nan, &sys, 0.0, &[1.0], &[0.0], 1e-3, 8),
            Err(LyapunovError::Candidate(_))
        ));
    }

    #[test]
    fn dini_of_norm_at_origin_with_input() {
        let sys = linear_test_system(1.0).unwrap();
        let d = dini_derivative(&LyapunovCandidate::norm(), &sys, 0.0, &[0.0], &[-2.0], 1e-3, 8).unwrap();
        assert_abs_diff_eq!(d, 2.0, epsilon = 1e-12);
    }

    fn plan() -> SamplingPlan {
        let radii: Vec<f64> = log_grid(1e-6, 10.0, 15);
        let mut input_radii = vec![0.0];
        input_radii.extend(log_grid(1e-3, 10.0, 9));
        SamplingPlan::new(vec![0.0, 1.0, 7.5], radii, input_radii, 11)
    }

    #[test]
    fn dissipation_examples() {
        let sys = linear_test_system(1.0).unwrap();
        let v = LyapunovCandidate::norm();
        let good = DissipationSpec {
            alpha4: MonotoneFn::identity(),
            chi4: MonotoneFn::identity(),
        };
        let rep = check_dissipation_form(&v, &sys, &good, &plan().with_margin(1e-3)).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations.first());
        assert!(rep.checked > 0 && rep.skipped == 0);
        let bad = DissipationSpec {
            alpha4: MonotoneFn::linear(2.0),
            chi4: MonotoneFn::identity(),
        };
        let rep = check_dissipation_form(&v, &sys, &bad, &plan()).unwrap();
        assert!(!rep.passed());
        assert!(rep.violations.iter().any(|w| w.mu[0] == 0.0 && w.xi[0] != 0.0));

        let imp = good.implication();
        let rep = check_implication_form(&v, &sys, &imp, &plan()).unwrap();
        assert!(rep.passed());
        assert!(rep.skipped > 0);
        let iiss = IissSpec {
            alpha5: MonotoneFn::from_closure(ClassTag::P, |s: f64| s / (1.0 + s)),
            chi5: MonotoneFn::identity(),
        };
        assert!(check_iiss_form(&v, &sys, &iiss, &plan()).unwrap().passed());
    }

    #[test]
    fn counterexample_has_no_dissipation_form() {
        let sys = crate::simulator::counterexample_system::<f64>();
        let spec = DissipationSpec {
            alpha4: MonotoneFn::identity(),
            chi4: MonotoneFn::linear(10.0),
        };
        let p = SamplingPlan::new(vec![0.0, 100.0, 1000.0], log_grid(1e-3, 2.0, 8), log_grid(1e-3, 2.0, 8), 1);
        let rep = check_dissipation_form(&LyapunovCandidate::norm(), &sys, &spec, &p).unwrap();
        assert!(!rep.passed());
        assert!(rep.violations.iter().all(|v| v.t >= 100.0));
    }

    #[test]
    fn plan_rejects_discontinuity_times() {
        let sys = linear_test_system(1.0).unwrap().with_discontinuities(vec![1.0]).unwrap();
        let spec = DissipationSpec {
            alpha4: MonotoneFn::identity(),
            chi4: MonotoneFn::identity(),
        };
        let err = check_dissipation_form(&LyapunovCandidate::norm(), &sys, &spec, &plan()).unwrap_err();
        assert!(matches!(err, LyapunovError::Plan(_)));
    }

    #[test]
    fn plan_directions_are_unit_vectors() {
        let sys = SystemDef::new("planar", 3, 2, |_t, x: &[f64], _u: &[f64], o: &mut [f64]| o.copy_from_slice(x)).unwrap();
        let p = SamplingPlan::new(vec![0.0], vec![2.0], vec![1.0], 5);
        let s = p.samples(&sys).unwrap();
        assert_eq!(s.len(), 4 * 4);
        for (_, xi, mu) in &s {
            assert_abs_diff_eq!(norm(xi), 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(norm(mu), 1.0, epsilon = 1e-12);
        }
        assert_eq!(s, p.samples(&sys).unwrap());
    }

    #[test]
    fn simpson_accuracy() {
        let v = adaptive_simpson(&|x: f64| x.sin(), 0.0, PI, 1e-12).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-11);
        let k = adaptive_simpson(&|x: f64| x.abs(), -1.0, 2.0, 1e-12).unwrap();
        assert_abs_diff_eq!(k, 2.5, epsilon = 1e-11);
    }

    #[test]
    fn kappa_with_identity_sigma() {
        let b = build_kappa(&MonotoneFn::<f64>::identity(), 1e-3, 1e3, 1e-11).unwrap();
        assert_eq!(b.kappa(1.0).unwrap(), 1.0);
        for &q in log_grid(1e-3_f64, 1e3, 37).iter() {
            let exact = (1.0 + q * q).ln() / PI;
            let a = b.a(q).unwrap();
            assert!(((a - exact) / exact).abs() <= 1e-8, "a({q}) = {a}, want {exact}");
        }
        let r = b.report();
        assert_eq!(r.kappa_at_one, 1.0);
        assert!(r.strictly_increasing && r.derivative_nondecreasing);
        assert!(r.min_dissipation_ratio >= 1.0 - 1e-6);
        for &q in log_grid(1e-3_f64, 1e3, 41).iter() {
            let k = b.kappa(q).unwrap();
            if k > 0.0 && k.is_finite() {
                let back = b.kappa_inv(k).unwrap();
                assert!(((back - q) / q).abs() <= 1e-6, "{q} -> {back}");
            }
            let lb = b.log_kappa_inv(b.log_kappa(q).unwrap()).unwrap();
            assert!(((lb - q) / q).abs() <= 1e-9);
        }
    }

    #[test]
    fn kappa_extrapolation_and_range() {
        let b = build_kappa(&MonotoneFn::identity(), 1e-2, 1e2, 1e-10).unwrap();
        assert_eq!(b.kappa(0.0).unwrap(), 0.0);
        let inside = b.log_kappa(1e-2).unwrap();
        let below = b.log_kappa(5e-3).unwrap();
        assert!(below < inside);
        assert!(matches!(b.log_kappa(1e-4), Err(LyapunovError::Range { .. })));
        assert!(matches!(b.log_kappa(1e3), Err(LyapunovError::Range { .. })));
        assert!(build_kappa(&MonotoneFn::identity(), 2.0, 1e2, 1e-10).is_err());
        let tables = b.tables();
        assert_eq!(tables.qs.len(), tables.log_kappa.len());
        let json = serde_json::to_string(&tables).unwrap();
        assert!(json.contains("kappa_prime"));
    }

    #[test]
    fn kappa_derivative_matches_finite_differences() {
        let b = build_kappa(&MonotoneFn::<f64>::linear(0.5), 1e-2, 1e2, 1e-11).unwrap();
        for q in [0.05_f64, 0.3, 1.0, 4.0, 30.0] {
            let h = q * 1e-5;
            let fd = (b.log_kappa(q + h).unwrap() - b.log_kappa(q - h).unwrap()) / (2.0 * h);
            let an = b.kappa_prime(q).unwrap() / b.kappa(q).unwrap();
            assert!(((fd - an) / an).abs() < 1e-4, "q = {q}: {fd} vs {an}");
        }
    }

    fn testbed_gains() -> IpssGains<f64> {
        let id = MonotoneFn::identity();
        let spec = DissipationSpec {
            alpha4: id.clone(),
            chi4: id.clone(),
        };
        let bundle = Arc::new(build_kappa(&sigma_for(&id, &id), 1e-3, 1e3, 1e-10).unwrap());
        ipss_gains_from_dissipation(&id, &id, &spec, 1.0, bundle).unwrap()
    }

    #[test]
    fn synthesized_gains_basic_properties() {
        let g = testbed_gains();
        for s in log_grid(1e-2, 1e2, 20) {
            assert!(g.beta(s, 0.0).unwrap() >= s);
        }
        assert_eq!(g.gamma(0.0).unwrap(), 0.0);
        assert_eq!(g.rho(0.0).unwrap(), 0.0);
        let mut prev = f64::INFINITY;
        for t in [0.0, 1.0, 5.0, 20.0, 50.0, 200.0] {
            let b = g.beta(1.0, t).unwrap();
            assert!(b < prev);
            prev = b;
        }
        // ln κ(q) ≈ −2π/q near zero, so β(1, t) ≈ 2π/t for large t.
        let b50 = g.beta(1.0, 50.0).unwrap();
        assert!((b50 * 50.0 / (2.0 * PI) - 1.0).abs() < 0.1, "{b50}");
        assert!(g.rho(1e-6).unwrap() == 0.0);
        assert!(g.rho(1.0).unwrap() > 0.0);
    }

    #[test]
    fn gains_reject_mismatched_bundle() {
        let id = MonotoneFn::identity();
        let spec = DissipationSpec {
            alpha4: MonotoneFn::linear(3.0),
            chi4: id.clone(),
        };
        let bundle = Arc::new(build_kappa(&id, 1e-2, 1e2, 1e-9).unwrap());
        assert!(ipss_gains_from_dissipation(&id, &id, &spec, 1.0, bundle).is_err());
    }

    #[test]
    fn candidate_table_round_trip() {
        let v = square();
        let ts = [0.0, 1.0, 2.0];
        let xs: Vec<f64> = (0..=40).map(|i| -2.0 + 0.1 * i as f64).collect();
        let table = v.tabulate(&ts, &xs);
        let back = LyapunovCandidate::from_table(&table, v.alpha1.clone(), v.alpha2.clone()).unwrap();
        assert_abs_diff_eq!(back.eval(0.5, &[1.0]), 1.0, epsilon = 1e-12);
        let json = serde_json::to_string(&table).unwrap();
        let again: CandidateTable = serde_json::from_str(&json).unwrap();
        assert_eq!(again, table);
    }
}
