//! Fixed-step RK4 simulation of `ẋ = f(t, x, u)` for piecewise-constant inputs.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::MonotoneFn;
use crate::scalar::{distance, norm, stream_rng, Scalar};
use crate::signals::Signal;

/// States with norm above this are treated as finite escape.
pub const DIVERGENCE_THRESHOLD: f64 = 1e9;

/// Right-hand side writing `f(t, x, u)` into the output slice.
pub type Rhs<S> = Arc<dyn Fn(S, &[S], &[S], &mut [S]) + Send + Sync>;
/// Radius-indexed bound such as a local Lipschitz constant `L(R)`.
pub type RadiusMap<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    Parameter(String),
    #[error("nonfinite right-hand side at t = {t}, x = {x:?}, u = {u:?}")]
    Dynamics { t: f64, x: Vec<f64>, u: Vec<f64> },
}

#[derive(Clone)]
pub struct SystemDef<S> {
    name: String,
    n: usize,
    m: usize,
    rhs: Rhs<S>,
    discontinuity_times: Vec<S>,
    lipschitz_hint: Option<RadiusMap<S>>,
}

impl<S: Scalar> fmt::Debug for SystemDef<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemDef")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("discontinuity_times", &self.discontinuity_times)
            .field("lipschitz_hint", &self.lipschitz_hint.is_some())
            .finish()
    }
}

impl<S: Scalar> SystemDef<S> {
    pub fn new<F>(name: impl Into<String>, n: usize, m: usize, rhs: F) -> Result<Self, SimError>
    where
        F: Fn(S, &[S], &[S], &mut [S]) + Send + Sync + 'static,
    {
        if n == 0 || m == 0 {
            return Err(SimError::Parameter("state and input dimensions must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            n,
            m,
            rhs: Arc::new(rhs),
            discontinuity_times: Vec::new(),
            lipschitz_hint: None,
        })
    }

    pub fn with_discontinuities(mut self, mut times: Vec<S>) -> Result<Self, SimError> {
        if times.iter().any(|t| !t.is_finite()) {
            return Err(SimError::Parameter("discontinuity times must be finite".into()));
        }
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        times.dedup();
        self.discontinuity_times = times;
        Ok(self)
    }

    pub fn with_lipschitz_hint<F>(mut self, hint: F) -> Self
    where
        F: Fn(S) -> S + Send + Sync + 'static,
    {
        self.lipschitz_hint = Some(Arc::new(hint));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn discontinuity_times(&self) -> &[S] {
        &self.discontinuity_times
    }

    pub fn lipschitz_hint(&self) -> Option<&RadiusMap<S>> {
        self.lipschitz_hint.as_ref()
    }

    /// Uniqueness of solutions is only claimed when a Lipschitz hint is declared.
    pub fn uniqueness_assumed(&self) -> bool {
        self.lipschitz_hint.is_some()
    }

    pub fn rhs_into(&self, t: S, x: &[S], u: &[S], out: &mut [S]) {
        (self.rhs)(t, x, u, out)
    }

    pub fn rhs(&self, t: S, x: &[S], u: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.n];
        (self.rhs)(t, x, u, &mut out);
        out
    }

    /// Largest `|f(t, 0, 0)|` over the given times.
    pub fn origin_residual(&self, times: &[S]) -> S {
        let x = vec![S::zero(); self.n];
        let u = vec![S::zero(); self.m];
        times
            .iter()
            .map(|&t| norm(&self.rhs(t, &x, &u)))
            .fold(S::zero(), S::max)
    }
}

/// `ẋ = −λx + u`.
pub fn linear_test_system<S: Scalar>(lambda: S) -> Result<SystemDef<S>, SimError> {
    if !(lambda > S::zero()) || !lambda.is_finite() {
        return Err(SimError::Parameter(format!("decay rate must be positive (got {lambda})")));
    }
    Ok(SystemDef::new("linear", 1, 1, move |_t, x: &[S], u: &[S], out: &mut [S]| {
        out[0] = -lambda * x[0] + u[0];
    })?
    .with_lipschitz_hint(move |_| lambda))
}

/// `ẋ = −x + (1 + t)·max(u − |x|, 0)`: ISS but not IPSS.
pub fn counterexample_system<S: Scalar>() -> SystemDef<S> {
    SystemDef::new("counterexample", 1, 1, |t: S, x: &[S], u: &[S], out: &mut [S]| {
        out[0] = -x[0] + (S::one() + t) * (u[0] - x[0].abs()).max(S::zero());
    })
    .expect("valid dimensions")
}

/// `ẋ = −x(1 + d/2)` with disturbance `|d| ≤ 1`.
pub fn perturbed_decay_system<S: Scalar>() -> SystemDef<S> {
    let half = S::lit(0.5);
    SystemDef::new("perturbed_decay", 1, 1, move |_t, x: &[S], d: &[S], out: &mut [S]| {
        out[0] = -x[0] * (S::one() + half * d[0]);
    })
    .expect("valid dimensions")
    .with_lipschitz_hint(|_| S::lit(1.5))
}

/// Substitutes the input: `g(t, x, d) = f(t, x, map(x, d))` with `d ∈ ℝ^{m_d}`.
pub fn disturbed<S, F>(sys: &SystemDef<S>, m_d: usize, name: impl Into<String>, map: F) -> Result<SystemDef<S>, SimError>
where
    S: Scalar,
    F: Fn(&[S], &[S], &mut [S]) + Send + Sync + 'static,
{
    let inner = sys.clone();
    let m = sys.m;
    let g = SystemDef::new(name, sys.n, m_d, move |t, x: &[S], d: &[S], out: &mut [S]| {
        let mut u = vec![S::zero(); m];
        map(x, d, &mut u);
        inner.rhs_into(t, x, &u, out);
    })?
    .with_discontinuities(sys.discontinuity_times.clone())?;
    Ok(g)
}

/// `g(t, x, ν) = f(t, x, ν·φ(|x|))`, the closed loop with a scaled input feedback.
pub fn input_feedback<S: Scalar>(sys: &SystemDef<S>, phi: MonotoneFn<S>) -> Result<SystemDef<S>, SimError> {
    let name = format!("{}_feedback", sys.name);
    disturbed(sys, sys.m, name, move |x, d, u| {
        let scale = phi.eval(norm(x));
        for (ui, &di) in u.iter_mut().zip(d) {
            *ui = di * scale;
        }
    })
}

/// Registry selector for the built-in systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Linear {
        #[serde(default = "one")]
        lambda: f64,
    },
    Counterexample,
    PerturbedDecay,
}

fn one() -> f64 {
    1.0
}

impl SystemSpec {
    pub fn build<S: Scalar>(&self) -> Result<SystemDef<S>, SimError> {
        match *self {
            SystemSpec::Linear { lambda } => linear_test_system(S::lit(lambda)),
            SystemSpec::Counterexample => Ok(counterexample_system()),
            SystemSpec::PerturbedDecay => Ok(perturbed_decay_system()),
        }
    }
}

/// `(name, description)` for every registered system.
pub fn list_systems() -> Vec<(&'static str, &'static str)> {
    vec![
        ("linear", "x' = -lambda*x + u (parameter: lambda > 0, default 1)"),
        ("counterexample", "x' = -x + (1+t)*max(u - |x|, 0), ISS but not IPSS"),
        ("perturbed_decay", "x' = -x*(1 + 0.5*d), disturbance |d| <= 1"),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub times: Vec<S>,
    pub states: Vec<Vec<S>>,
    pub blown_up: bool,
    pub blowup_time: Option<S>,
    /// False when the system declares no Lipschitz hint.
    pub uniqueness_assumed: bool,
}

impl<S: Scalar> Trajectory<S> {
    pub fn t0(&self) -> S {
        self.times[0]
    }

    pub fn t_end(&self) -> S {
        *self.times.last().expect("nonempty trajectory")
    }

    pub fn final_state(&self) -> &[S] {
        self.states.last().expect("nonempty trajectory")
    }

    /// State at a grid time, if `t` is on the grid.
    pub fn state_at(&self, t: S) -> Option<&[S]> {
        let i = self.times.partition_point(|&s| s < t);
        (i < self.times.len() && self.times[i] == t).then(|| self.states[i].as_slice())
    }

    pub fn norms(&self) -> Vec<S> {
        self.states.iter().map(|x| norm(x)).collect()
    }

    pub fn peak_norm(&self) -> S {
        self.norms().into_iter().fold(S::zero(), S::max)
    }

    /// Prefix up to and including time `t1`.
    pub fn truncated(&self, t1: S) -> Trajectory<S> {
        let k = self.times.partition_point(|&s| s <= t1);
        Trajectory {
            times: self.times[..k].to_vec(),
            states: self.states[..k].to_vec(),
            blown_up: self.blown_up && self.blowup_time.is_some_and(|b| b <= t1),
            blowup_time: self.blowup_time.filter(|&b| b <= t1),
            uniqueness_assumed: self.uniqueness_assumed,
        }
    }
}

struct Workspace<S> {
    k1: Vec<S>,
    k2: Vec<S>,
    k3: Vec<S>,
    k4: Vec<S>,
    tmp: Vec<S>,
}

fn eval_checked<S: Scalar>(sys: &SystemDef<S>, t: S, x: &[S], u: &[S], out: &mut [S]) -> Result<bool, SimError> {
    sys.rhs_into(t, x, u, out);
    if out.iter().all(|v| v.is_finite()) {
        return Ok(true);
    }
    let threshold = S::lit(DIVERGENCE_THRESHOLD);
    if x.iter().all(|v| v.is_finite()) && norm(x) <= threshold {
        return Err(SimError::Dynamics {
            t: t.as_f64(),
            x: x.iter().map(|v| v.as_f64()).collect(),
            u: u.iter().map(|v| v.as_f64()).collect(),
        });
    }
    Ok(false)
}

/// One RK4 step; `Ok(false)` when a stage escaped to a nonfinite value.
fn rk4_step<S: Scalar>(sys: &SystemDef<S>, t: S, h: S, x: &mut [S], u: &[S], w: &mut Workspace<S>) -> Result<bool, SimError> {
    let half = S::lit(0.5);
    let n = x.len();
    if !eval_checked(sys, t, x, u, &mut w.k1)? {
        return Ok(false);
    }
    for ((t, &xi), &k) in w.tmp.iter_mut().zip(x.iter()).zip(&w.k1) {
        *t = xi + half * h * k;
    }
    if !eval_checked(sys, t + half * h, &w.tmp, u, &mut w.k2)? {
        return Ok(false);
    }
    for ((t, &xi), &k) in w.tmp.iter_mut().zip(x.iter()).zip(&w.k2) {
        *t = xi + half * h * k;
    }
    if !eval_checked(sys, t + half * h, &w.tmp, u, &mut w.k3)? {
        return Ok(false);
    }
    for ((t, &xi), &k) in w.tmp.iter_mut().zip(x.iter()).zip(&w.k3) {
        *t = xi + h * k;
    }
    if !eval_checked(sys, t + h, &w.tmp, u, &mut w.k4)? {
        return Ok(false);
    }
    let sixth = h / S::lit(6.0);
    let two = S::lit(2.0);
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        x[i] = x[i] + sixth * (w.k1[i] + two * w.k2[i] + two * w.k3[i] + w.k4[i]);
    }
    Ok(true)
}

pub fn simulate<S: Scalar>(sys: &SystemDef<S>, t0: S, xi: &[S], u: &Signal<S>, t_end: S, step: S) -> Result<Trajectory<S>, SimError> {
    simulate_with_stops(sys, t0, xi, u, t_end, step, &[])
}

/// [`simulate`] with additional times that must appear on the grid exactly.
///
/// The grid restarts at every stop: between stops `a < b` it is
/// `a, a + step, a + 2·step, …, b`, the last step shortened to land on `b`.
pub fn simulate_with_stops<S: Scalar>(
    sys: &SystemDef<S>,
    t0: S,
    xi: &[S],
    u: &Signal<S>,
    t_end: S,
    step: S,
    extra_stops: &[S],
) -> Result<Trajectory<S>, SimError> {
    if !(step > S::zero()) || !step.is_finite() {
        return Err(SimError::Parameter(format!("step must be positive (got {step})")));
    }
    if !(t0 >= S::zero()) || !t0.is_finite() {
        return Err(SimError::Parameter(format!("initial time must be finite and nonnegative (got {t0})")));
    }
    if !(t_end > t0) || !t_end.is_finite() {
        return Err(SimError::Parameter(format!("final time {t_end} must exceed initial time {t0}")));
    }
    if xi.len() != sys.n {
        return Err(SimError::Parameter(format!("initial state has dimension {}, system expects {}", xi.len(), sys.n)));
    }
    if u.dim() != sys.m {
        return Err(SimError::Parameter(format!("input has dimension {}, system expects {}", u.dim(), sys.m)));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(SimError::Parameter("initial state must be finite".into()));
    }

    let mut stops: Vec<S> = u
        .switch_times()
        .into_iter()
        .chain(sys.discontinuity_times.iter().copied())
        .chain(extra_stops.iter().copied())
        .filter(|&s| s > t0 && s < t_end)
        .collect();
    stops.push(t_end);
    stops.sort_by(|a, b| a.partial_cmp(b).expect("finite stops"));
    stops.dedup();

    let n = sys.n;
    let mut w = Workspace {
        k1: vec![S::zero(); n],
        k2: vec![S::zero(); n],
        k3: vec![S::zero(); n],
        k4: vec![S::zero(); n],
        tmp: vec![S::zero(); n],
    };
    let threshold = S::lit(DIVERGENCE_THRESHOLD);
    let snap = S::lit(1e-9) * step;
    let mut times = vec![t0];
    let mut states = vec![xi.to_vec()];
    let mut x = xi.to_vec();
    let mut t = t0;
    let mut blowup_time = None;

    'outer: for &stop in &stops {
        let anchor = t;
        let mut k = 1usize;
        while t < stop {
            let mut next = anchor + step * S::from_usize_lossy(k);
            if next >= stop - snap {
                next = stop;
            }
            k += 1;
            if next <= t {
                continue;
            }
            let ok = rk4_step(sys, t, next - t, &mut x, u.value_at(t), &mut w)?;
            t = next;
            if !ok || x.iter().any(|v| !v.is_finite()) {
                blowup_time = Some(t);
                break 'outer;
            }
            times.push(t);
            states.push(x.clone());
            if norm(&x) > threshold {
                blowup_time = Some(t);
                break 'outer;
            }
        }
    }

    Ok(Trajectory {
        times,
        states,
        blown_up: blowup_time.is_some(),
        blowup_time,
        uniqueness_assumed: sys.uniqueness_assumed(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub step: f64,
    /// Disturbance pieces per unit time.
    pub pieces_per_unit: usize,
    /// Checkpoints per trajectory at which ratios are evaluated.
    pub checkpoints: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            step: 1e-2,
            pieces_per_unit: 4,
            checkpoints: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport<S> {
    /// `max |x̄(t; ξ₁) − x̄(t; ξ₂)| / |ξ₁ − ξ₂|`.
    pub state_ratio: S,
    /// `max |x̄(t + h; t0 + h) − x̄(t; t0)| / h`.
    pub shift_ratio: S,
    /// False when any probe blew up; the ratios are then not meaningful.
    pub valid: bool,
    pub blowups: usize,
    pub samples: usize,
}

fn random_in_ball<S: Scalar, R: Rng>(rng: &mut R, dim: usize, radius: S) -> Vec<S> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r: f64 = rng.gen_range(0.0..=1.0_f64).powf(1.0 / dim as f64);
    let scale = if nv > 0.0 { r / nv } else { 0.0 };
    v.into_iter().map(|x| radius * S::lit(x * scale)).collect()
}

/// Piecewise-constant disturbance with values in the closed unit ball.
pub fn random_unit_disturbance<S: Scalar, R: Rng>(rng: &mut R, dim: usize, horizon: S, piece_len: S) -> Signal<S> {
    let pieces = (horizon / piece_len).ceil().to_usize().unwrap_or(1).max(1);
    let b: Vec<S> = (0..pieces).map(|i| piece_len * S::from_usize_lossy(i)).collect();
    let v: Vec<Vec<S>> = (0..pieces)
        .map(|_| {
            let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let nr = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
            raw.into_iter().map(|x| S::lit(x / nr)).collect()
        })
        .collect();
    let end = piece_len * S::from_usize_lossy(pieces);
    Signal::new(b, v, end).expect("well-formed disturbance")
}

struct ProbeOutcome<S> {
    state: S,
    shift: S,
    blown: bool,
}

fn probe_once<S: Scalar>(sys: &SystemDef<S>, radius: S, horizon: S, seed: u64, index: u64, opts: &ProbeOptions) -> Result<ProbeOutcome<S>, SimError> {
    let mut rng = stream_rng(seed, index);
    let t0 = horizon * S::lit(rng.gen_range(0.0..=1.0));
    let h = S::lit(rng.gen_range(0.0..=1.0_f64).max(1e-3));
    let xi1 = random_in_ball(&mut rng, sys.n, radius);
    let xi2 = random_in_ball(&mut rng, sys.n, radius);
    let piece = S::one() / S::from_usize_lossy(opts.pieces_per_unit.max(1));
    let d = random_unit_disturbance(&mut rng, sys.m, horizon + horizon + S::lit(2.0), piece);
    let step = S::lit(opts.step);
    let count = opts.checkpoints.max(1);
    let checks: Vec<S> = (0..=count)
        .map(|j| t0 + horizon * S::from_usize_lossy(j) / S::from_usize_lossy(count))
        .collect();
    let shifted: Vec<S> = checks.iter().map(|&c| c + h).collect();
    let t_end = t0 + horizon;

    let a = simulate_with_stops(sys, t0, &xi1, &d, t_end, step, &checks)?;
    let b = simulate_with_stops(sys, t0, &xi2, &d, t_end, step, &checks)?;
    let c = simulate_with_stops(sys, t0 + h, &xi1, &d, t_end + h, step, &shifted)?;
    if a.blown_up || b.blown_up || c.blown_up {
        return Ok(ProbeOutcome {
            state: S::zero(),
            shift: S::zero(),
            blown: true,
        });
    }
    let gap = distance(&xi1, &xi2);
    let mut state = S::zero();
    let mut shift = S::zero();
    for (&tc, &ts) in checks.iter().zip(&shifted) {
        let xa = a.state_at(tc).expect("checkpoint on grid");
        if gap > S::zero() {
            let xb = b.state_at(tc).expect("checkpoint on grid");
            state = state.max(distance(xa, xb) / gap);
        }
        let xc = c.state_at(ts).expect("checkpoint on grid");
        shift = shift.max(distance(xc, xa) / h);
    }
    Ok(ProbeOutcome { state, shift, blown: false })
}

/// Empirical sensitivities of solutions with respect to the initial state and
/// to a common shift of initial and current time, under random disturbances.
pub fn lipschitz_probe<S: Scalar>(
    sys: &SystemDef<S>,
    radius: S,
    horizon: S,
    samples: usize,
    seed: u64,
    opts: &ProbeOptions,
) -> Result<LipschitzReport<S>, SimError> {
    if !(radius > S::zero()) || !(horizon > S::zero()) || samples == 0 {
        return Err(SimError::Parameter("probe radius, horizon and sample count must be positive".into()));
    }
    if !(opts.step > 0.0) {
        return Err(SimError::Parameter("probe step must be positive".into()));
    }
    let outcomes: Vec<ProbeOutcome<S>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| probe_once(sys, radius, horizon, seed, i, opts))
        .collect::<Result<_, _>>()?;
    let blowups = outcomes.iter().filter(|o| o.blown).count();
    Ok(LipschitzReport {
        state_ratio: outcomes.iter().map(|o| o.state).fold(S::zero(), S::max),
        shift_ratio: outcomes.iter().map(|o| o.shift).fold(S::zero(), S::max),
        valid: blowups == 0,
        blowups,
        samples,
    })
}
