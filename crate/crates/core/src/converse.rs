//! Sampled converse Lyapunov construction for systems `ẋ = g(t, x, d)` that are
//! uniformly globally asymptotically stable over disturbances `|d(t)| ≤ 1`.
//!
//! With a factorization `θ₂⁻¹(β(s, t)) ≤ θ₁(s)·e^{−t}` of the stability bound,
//!
//! ```text
//! ρ(s)      = inf_r { θ₂⁻¹(r) + |r − s| }
//! G_k(r)    = max(r − 1/k, 0)
//! W_k(t, ξ) = sup_d sup_{s ≥ t} e^{(s−t)/2}·G_k(ρ(|x̄(s; t, ξ, d)|))
//! V(t, ξ)   = Σ_k 2^{−k}/(1 + M_{k,k})·W_k(t, ξ)
//! ```
//!
//! The supremum over disturbances is replaced by a maximum over seeded
//! piecewise-constant samples, so every `W_k` here is a lower estimate. The
//! inner supremum only needs `s ∈ [t, t + T_{R,k}]` with
//! `T_{R,k} = ln(1 + k·θ₁(R))` for `|ξ| ≤ R`.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::{ClassTag, ComparisonError, KLBound, MonotoneFn, MonotoneTable};
use crate::lyapunov::LyapunovCandidate;
use crate::scalar::{distance, lin_grid, norm, stream_rng, Scalar};
use crate::signals::Signal;
use crate::simulator::{input_feedback, lipschitz_probe, simulate_with_stops, ProbeOptions, SimError, SystemDef};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConverseError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// A sampled trajectory contradicts the declared stability assumption.
    #[error("model assumption violated: {0}")]
    Model(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
}

/// `ẋ = g(t, x, d)` with `d` in the closed unit ball of `ℝᵐ`, together with the
/// stability bound it is assumed to satisfy.
#[derive(Clone)]
pub struct DisturbedSystem<S> {
    pub sys: SystemDef<S>,
    pub urgas_beta: KLBound<S>,
    pub urls_epsilon: Option<MonotoneFn<S>>,
}

impl<S: Scalar> fmt::Debug for DisturbedSystem<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DisturbedSystem")
            .field("sys", &self.sys.name())
            .field("n", &self.sys.n())
            .field("m", &self.sys.m())
            .finish()
    }
}

impl<S: Scalar> DisturbedSystem<S> {
    pub fn new(sys: SystemDef<S>, urgas_beta: KLBound<S>) -> Self {
        Self {
            sys,
            urgas_beta,
            urls_epsilon: None,
        }
    }

    pub fn with_urls_epsilon(mut self, eps: MonotoneFn<S>) -> Self {
        self.urls_epsilon = Some(eps);
        self
    }

    pub fn n(&self) -> usize {
        self.sys.n()
    }

    pub fn m(&self) -> usize {
        self.sys.m()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConverseConfig {
    /// Number of series terms kept.
    pub k_max: usize,
    pub disturbance_samples: usize,
    /// Pieces of a random disturbance per `T_{1,k_max}`.
    pub pieces_per_horizon: usize,
    /// Overrides the piece duration derived from `pieces_per_horizon`.
    pub piece_duration: Option<f64>,
    pub step: f64,
    pub seed: u64,
    /// Radius `R` used for the horizons; defaults to `|ξ|`.
    pub radius: Option<f64>,
    /// Absolute slack on the declared stability bound, scaled by `1 + β`.
    pub urgas_tolerance: f64,
    /// Extent and resolution of the grid on which `ρ` is tabulated.
    pub rho_max: f64,
    pub rho_points: usize,
    /// Probes per `(R, k)` entry of the `M_{R,k}` table.
    pub mrk_samples: usize,
    /// Radii at which a new candidate is checked against the stability bound.
    pub validation_radii: Vec<f64>,
}

impl Default for ConverseConfig {
    fn default() -> Self {
        Self {
            k_max: 6,
            disturbance_samples: 64,
            pieces_per_horizon: 8,
            piece_duration: None,
            step: 1e-2,
            seed: 0,
            radius: None,
            urgas_tolerance: 1e-3,
            rho_max: 10.0,
            rho_points: 2001,
            mrk_samples: 8,
            validation_radii: vec![0.5, 1.0, 3.0],
        }
    }
}

impl ConverseConfig {
    pub fn validate(&self) -> Result<(), ConverseError> {
        let bad = |m: String| Err(ConverseError::Parameter(m));
        if self.k_max == 0 {
            return bad("k_max must be at least 1".into());
        }
        if self.disturbance_samples == 0 {
            return bad("disturbance_samples must be at least 1".into());
        }
        if self.pieces_per_horizon == 0 {
            return bad("pieces_per_horizon must be at least 1".into());
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return bad(format!("step must be positive (got {})", self.step));
        }
        if let Some(p) = self.piece_duration {
            if !(p > 0.0) || !p.is_finite() {
                return bad(format!("piece_duration must be positive (got {p})"));
            }
        }
        if let Some(r) = self.radius {
            if !(r >= 0.0) || !r.is_finite() {
                return bad(format!("radius must be finite and nonnegative (got {r})"));
            }
        }
        if !(self.urgas_tolerance >= 0.0) {
            return bad("urgas_tolerance must be nonnegative".into());
        }
        if !(self.rho_max > 0.0) || self.rho_points < 2 {
            return bad("rho grid needs a positive extent and at least two points".into());
        }
        if self.mrk_samples == 0 {
            return bad("mrk_samples must be at least 1".into());
        }
        Ok(())
    }

    fn rho_grid<S: Scalar>(&self) -> Vec<S> {
        lin_grid(S::zero(), S::lit(self.rho_max), self.rho_points)
    }
}

/// `T_{R,k} = ln(1 + k·θ₁(R))`.
pub fn horizon_rk<S: Scalar>(theta1: &MonotoneFn<S>, radius: S, k: usize) -> S {
    (S::from_usize_lossy(k) * theta1.eval(radius)).ln_1p()
}

/// `G_k(r) = max(r − 1/k, 0)`.
pub fn g_k<S: Scalar>(r: S, k: usize) -> S {
    (r - S::one() / S::from_usize_lossy(k)).max(S::zero())
}

fn golden_min<S: Scalar, F: Fn(S) -> S>(f: &F, mut a: S, mut b: S, tol: S) -> (S, S) {
    let inv_phi = (S::lit(5.0).sqrt() - S::one()) / S::lit(2.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// `ρ(s) = inf_{r ≥ 0} {θ₂⁻¹(r) + |r − s|}` on `grid`, as a piecewise-linear
/// table. For `r > s` the objective exceeds its value at `r = s`, so the search
/// is over `[0, s]`: a coarse scan followed by golden-section refinement.
pub fn regularized_rho<S: Scalar>(theta2: &MonotoneFn<S>, grid: &[S]) -> Result<MonotoneFn<S>, ConverseError> {
    if theta2.class() != ClassTag::Kinf {
        return Err(ConverseError::Parameter("θ₂ must be of class K∞".into()));
    }
    let mut xs: Vec<S> = grid.iter().copied().filter(|s| s.is_finite() && *s >= S::zero()).collect();
    xs.push(S::zero());
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    xs.dedup();
    if xs.len() < 2 {
        return Err(ConverseError::Parameter("grid needs a positive point".into()));
    }
    let inv = theta2.inverse();
    let tol = S::lit(1e-10);
    let scan = 64usize;
    let ys: Vec<S> = xs
        .par_iter()
        .map(|&s| {
            if s == S::zero() {
                return S::zero();
            }
            let f = |r: S| inv.eval(r) + (s - r).abs();
            let (f0, fs) = (f(S::zero()), f(s));
            let (mut best, mut best_i) = if f0 < fs { (f0, 0) } else { (fs, scan) };
            for i in 1..scan {
                let r = s * S::from_usize_lossy(i) / S::from_usize_lossy(scan);
                let v = f(r);
                if v < best {
                    best = v;
                    best_i = i;
                }
            }
            let width = s / S::from_usize_lossy(scan);
            let lo = (s * S::from_usize_lossy(best_i) / S::from_usize_lossy(scan) - width).max(S::zero());
            let hi = (s * S::from_usize_lossy(best_i) / S::from_usize_lossy(scan) + width).min(s);
            let (_, v) = golden_min(&f, lo, hi, tol);
            best.min(v)
        })
        .collect();
    let mut mono = ys;
    for i in 1..mono.len() {
        if mono[i] < mono[i - 1] {
            mono[i] = mono[i - 1];
        }
    }
    Ok(MonotoneFn::from_table(MonotoneTable::new(xs, mono)?, ClassTag::Kinf))
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of leading deterministic samples: `±eᵢ` and, for `m > 1`, the
/// corners `±(1, …, 1)/√m`.
pub fn extreme_sample_count(m: usize) -> usize {
    if m > 1 {
        2 * m + 2
    } else {
        2 * m
    }
}

fn extreme_value<S: Scalar>(m: usize, j: usize) -> Vec<S> {
    let mut v = vec![S::zero(); m];
    if j < 2 * m {
        v[j / 2] = if j.is_multiple_of(2) { S::one() } else { -S::one() };
    } else {
        let c = S::one() / S::from_usize_lossy(m).sqrt();
        let c = if j.is_multiple_of(2) { c } else { -c };
        v.iter_mut().for_each(|x| *x = c);
    }
    v
}

fn random_piece_value<S: Scalar>(seed: u64, sample: usize, piece: u64, m: usize) -> Vec<S> {
    let mut rng = stream_rng(mix64(seed ^ mix64(piece)), sample as u64);
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let nr = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = if rng.gen_bool(0.5) && nr > 0.0 { 1.0 / nr } else { 1.0 / nr.max(1.0) };
    raw.into_iter().map(|x| S::lit((x * scale).clamp(-1.0, 1.0))).collect()
}

/// Disturbance sample `j` on `[t0, t_end]`. Random samples are piecewise
/// constant on the absolute grid `i·τ` and depend only on `(seed, j, i)`, so
/// the sample family is nested in `j` and independent of `t0` and `ξ`.
fn disturbance_sample<S: Scalar>(m: usize, j: usize, seed: u64, tau: S, t0: S, t_end: S) -> (Signal<S>, Vec<S>) {
    let ext = extreme_sample_count(m);
    if j < ext {
        let sig = Signal::constant(extreme_value(m, j), t_end + S::one()).expect("constant disturbance");
        return (sig, Vec::new());
    }
    let i0 = (t0 / tau).floor().to_u64().unwrap_or(0);
    let i1 = (t_end / tau).ceil().to_u64().unwrap_or(i0) + 1;
    let mut b = Vec::new();
    let mut v = Vec::new();
    if i0 > 0 {
        b.push(S::zero());
        v.push(vec![S::zero(); m]);
    }
    let mut stops = Vec::new();
    for i in i0..i1 {
        let start = tau * S::lit(i as f64);
        if b.last().is_none_or(|&l| start > l) {
            b.push(start);
            v.push(random_piece_value(seed, j, i, m));
            if start > t0 && start < t_end {
                stops.push(start);
            }
        }
    }
    let horizon = tau * S::lit(i1 as f64);
    (Signal::new(b, v, horizon).expect("well-formed disturbance"), stops)
}

/// Estimate of one `W_k` together with the sample and time attaining it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WkEstimate<S> {
    pub value: S,
    pub sample: usize,
    pub time: S,
}

fn piece_duration<S: Scalar>(theta1: &MonotoneFn<S>, cfg: &ConverseConfig) -> S {
    match cfg.piece_duration {
        Some(p) => S::lit(p),
        None => {
            let t = horizon_rk(theta1, S::one(), cfg.k_max);
            let t = if t > S::zero() { t } else { S::one() };
            t / S::from_usize_lossy(cfg.pieces_per_horizon)
        }
    }
}

/// Estimates `W_1, …, W_K` from one batch of simulations, where
/// `K = max(k_max, k_top)`.
pub fn wk_series<S: Scalar>(
    dsys: &DisturbedSystem<S>,
    t0: S,
    xi: &[S],
    theta1: &MonotoneFn<S>,
    rho: &MonotoneFn<S>,
    cfg: &ConverseConfig,
    k_top: usize,
) -> Result<Vec<WkEstimate<S>>, ConverseError> {
    cfg.validate()?;
    if xi.len() != dsys.n() {
        return Err(ConverseError::Parameter(format!("state has length {}, system expects {}", xi.len(), dsys.n())));
    }
    if !(t0 >= S::zero()) || !t0.is_finite() {
        return Err(ConverseError::Parameter(format!("initial time must be finite and nonnegative (got {t0})")));
    }
    let kk = k_top.max(cfg.k_max);
    let nx = norm(xi);
    let radius = match cfg.radius {
        Some(r) => {
            let r = S::lit(r);
            if nx > r * (S::one() + S::lit(1e-12)) {
                return Err(ConverseError::Parameter(format!("|ξ| = {nx} exceeds the radius {r}")));
            }
            r
        }
        None => nx,
    };
    let zero = WkEstimate {
        value: S::zero(),
        sample: 0,
        time: t0,
    };
    if nx == S::zero() {
        return Ok(vec![zero; kk]);
    }
    let horizons: Vec<S> = (1..=kk).map(|k| horizon_rk(theta1, radius, k)).collect();
    let t_end = t0 + horizons[kk - 1];
    if !(t_end > t0) {
        return Ok(vec![zero; kk]);
    }
    let tau = piece_duration(theta1, cfg);
    let step = S::lit(cfg.step);
    let tol = S::lit(cfg.urgas_tolerance);
    let half = S::lit(0.5);
    let m = dsys.m();

    let per_sample: Vec<Vec<(S, S)>> = (0..cfg.disturbance_samples)
        .into_par_iter()
        .map(|j| {
            let (d, mut stops) = disturbance_sample(m, j, cfg.seed, tau, t0, t_end);
            stops.extend(horizons.iter().map(|&h| t0 + h).filter(|&s| s < t_end));
            let traj = simulate_with_stops(&dsys.sys, t0, xi, &d, t_end, step, &stops)?;
            if traj.blown_up {
                return Err(ConverseError::Model(format!(
                    "trajectory from |ξ| = {nx} at t0 = {t0} diverged under disturbance sample {j}"
                )));
            }
            let mut best = vec![(S::zero(), t0); kk];
            for (&s, x) in traj.times.iter().zip(&traj.states) {
                let r = norm(x);
                let b = dsys.urgas_beta.eval(nx, s - t0);
                if r > b + tol * (S::one() + b) {
                    return Err(ConverseError::Model(format!(
                        "|x({s})| = {r} exceeds the declared bound {b} from |ξ| = {nx} at t0 = {t0} (disturbance sample {j})"
                    )));
                }
                let rr = rho.eval(r);
                let w = ((s - t0) * half).exp();
                for (k, slot) in best.iter_mut().enumerate() {
                    if s <= t0 + horizons[k] {
                        let val = w * g_k(rr, k + 1);
                        if val > slot.0 {
                            *slot = (val, s);
                        }
                    }
                }
            }
            Ok(best)
        })
        .collect::<Result<_, ConverseError>>()?;

    let mut out = vec![zero; kk];
    for (j, best) in per_sample.iter().enumerate() {
        for (slot, &(v, s)) in out.iter_mut().zip(best) {
            if v > slot.value {
                *slot = WkEstimate {
                    value: v,
                    sample: j,
                    time: s,
                };
            }
        }
    }
    Ok(out)
}

/// Sampled lower estimate of `W_k(t0, ξ)`.
pub fn wk_estimate<S: Scalar>(
    dsys: &DisturbedSystem<S>,
    k: usize,
    t0: S,
    xi: &[S],
    theta1: &MonotoneFn<S>,
    rho: &MonotoneFn<S>,
    cfg: &ConverseConfig,
) -> Result<WkEstimate<S>, ConverseError> {
    if k == 0 {
        return Err(ConverseError::Parameter("k must be at least 1".into()));
    }
    Ok(wk_series(dsys, t0, xi, theta1, rho, cfg, k)?[k - 1])
}

/// Tabulated `M_{R,k} = e^{T_{R,k}/2}·L̄(R, T_{R,k})`, made nondecreasing in
/// both arguments by running maxima. Lookups at `R` use the smallest tabulated
/// radius `≥ R`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MrkTable<S> {
    radii: Vec<S>,
    /// `values[i][k − 1]` for radius `radii[i]`.
    values: Vec<Vec<S>>,
}

impl<S: Scalar> MrkTable<S> {
    pub fn new(radii: Vec<S>, values: Vec<Vec<S>>) -> Result<Self, ConverseError> {
        if radii.is_empty() || radii.len() != values.len() {
            return Err(ConverseError::Parameter("M table needs one row per radius".into()));
        }
        if radii.windows(2).any(|w| w[1] <= w[0]) || radii[0] < S::zero() {
            return Err(ConverseError::Parameter("M table radii must be nonnegative and strictly increasing".into()));
        }
        let kk = values[0].len();
        if kk == 0 || values.iter().any(|r| r.len() != kk) {
            return Err(ConverseError::Parameter("M table rows must share a positive length".into()));
        }
        if values.iter().flatten().any(|v| !(v.is_finite() && *v >= S::zero())) {
            return Err(ConverseError::Parameter("M table entries must be finite and nonnegative".into()));
        }
        let mut values = values;
        for i in 0..values.len() {
            for k in 0..kk {
                let mut v = values[i][k];
                if k > 0 {
                    v = v.max(values[i][k - 1]);
                }
                if i > 0 {
                    v = v.max(values[i - 1][k]);
                }
                values[i][k] = v;
            }
        }
        Ok(Self { radii, values })
    }

    /// Probes `L̄(R, T_{R,k})` with [`lipschitz_probe`] for every radius and
    /// `k = 1..=k_max`.
    pub fn probe(
        dsys: &DisturbedSystem<S>,
        theta1: &MonotoneFn<S>,
        radii: &[S],
        k_max: usize,
        samples: usize,
        seed: u64,
        opts: &ProbeOptions,
    ) -> Result<Self, ConverseError> {
        let mut radii: Vec<S> = radii.to_vec();
        radii.sort_by(|a, b| a.partial_cmp(b).expect("finite radii"));
        radii.dedup();
        let half = S::lit(0.5);
        let mut values = Vec::with_capacity(radii.len());
        for (i, &r) in radii.iter().enumerate() {
            let mut row = Vec::with_capacity(k_max);
            for k in 1..=k_max {
                let t = horizon_rk(theta1, r, k);
                if !(t > S::zero()) || !(r > S::zero()) {
                    row.push(S::zero());
                    continue;
                }
                let stream = seed ^ mix64(((i as u64) << 32) | k as u64);
                let rep = lipschitz_probe(&dsys.sys, r, t, samples, stream, opts)?;
                if !rep.valid {
                    return Err(ConverseError::Model(format!(
                        "{} of {} Lipschitz probes diverged at R = {r}",
                        rep.blowups, rep.samples
                    )));
                }
                let lbar = rep.state_ratio.max(rep.shift_ratio);
                row.push((t * half).exp() * lbar);
            }
            values.push(row);
        }
        Self::new(radii, values)
    }

    pub fn k_max(&self) -> usize {
        self.values[0].len()
    }

    pub fn radii(&self) -> &[S] {
        &self.radii
    }

    pub fn rows(&self) -> &[Vec<S>] {
        &self.values
    }

    pub fn get(&self, radius: S, k: usize) -> Result<S, ConverseError> {
        if k == 0 || k > self.k_max() {
            return Err(ConverseError::Parameter(format!("k = {k} outside the M table (1..={})", self.k_max())));
        }
        let i = self.radii.partition_point(|&r| r < radius);
        if i == self.radii.len() {
            return Err(ConverseError::Parameter(format!(
                "radius {radius} beyond the M table (max {})",
                self.radii[self.radii.len() - 1]
            )));
        }
        Ok(self.values[i][k - 1])
    }

    /// Series weights `2^{−k}/(1 + M_{k,k})` for `k = 1..=k_max`.
    pub fn weights(&self, k_max: usize) -> Result<Vec<S>, ConverseError> {
        (1..=k_max)
            .map(|k| {
                let m = self.get(S::from_usize_lossy(k), k)?;
                Ok(S::lit(0.5).powi(k as i32) / (S::one() + m))
            })
            .collect()
    }

    /// `L(R) = 1 + Σ_{k ≤ ⌊R⌋+1} 2^{−k}·M_{R,k}/(1 + M_{k,k})`, the Lipschitz
    /// constant of `V` on `[0, ∞) × 𝔹_R`.
    pub fn lipschitz_bound(&self, radius: S) -> Result<S, ConverseError> {
        let top = (radius.floor().to_usize().unwrap_or(0) + 1).min(self.k_max());
        let mut l = S::one();
        for k in 1..=top {
            let w = S::lit(0.5).powi(k as i32) / (S::one() + self.get(S::from_usize_lossy(k), k)?);
            l = l + w * self.get(radius, k)?;
        }
        Ok(l)
    }
}

/// Truncated series value with the tail bound `2^{−k_max}·θ₁(|ξ|)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConverseValue<S> {
    pub value: S,
    pub truncation_bound: S,
    pub wk: Vec<S>,
}

fn combine<S: Scalar>(wk: &[S], weights: &[S], theta1: &MonotoneFn<S>, xi: &[S]) -> ConverseValue<S> {
    let value = wk.iter().zip(weights).map(|(&w, &c)| w * c).sum();
    let truncation_bound = S::lit(0.5).powi(weights.len() as i32) * theta1.eval(norm(xi));
    ConverseValue {
        value,
        truncation_bound,
        wk: wk.to_vec(),
    }
}

/// `V(t0, ξ) = Σ_{k ≤ k_max} 2^{−k}/(1 + M_{k,k})·W_k(t0, ξ)`.
pub fn converse_v<S: Scalar>(
    dsys: &DisturbedSystem<S>,
    t0: S,
    xi: &[S],
    theta1: &MonotoneFn<S>,
    rho: &MonotoneFn<S>,
    cfg: &ConverseConfig,
    mrk: &MrkTable<S>,
) -> Result<ConverseValue<S>, ConverseError> {
    let weights = mrk.weights(cfg.k_max)?;
    let wk: Vec<S> = wk_series(dsys, t0, xi, theta1, rho, cfg, cfg.k_max)?
        .into_iter()
        .take(cfg.k_max)
        .map(|e| e.value)
        .collect();
    Ok(combine(&wk, &weights, theta1, xi))
}

/// `α₁(r) = Σ_{k ≤ k_max} 2^{−k}/(1 + M_{k,k})·G_k(ρ(r))`. The truncated series
/// vanishes for `ρ(r) ≤ 1/k_max`.
pub fn alpha1_series<S: Scalar>(rho: &MonotoneFn<S>, mrk: &MrkTable<S>, k_max: usize) -> Result<MonotoneFn<S>, ConverseError> {
    let weights = mrk.weights(k_max)?;
    let rho = rho.clone();
    Ok(MonotoneFn::from_closure(ClassTag::K, move |r| {
        let rr = rho.eval(r);
        weights.iter().enumerate().map(|(i, &w)| w * g_k(rr, i + 1)).sum()
    }))
}

type CacheKey = (u64, Vec<u64>);

/// Caching evaluator of the truncated `V`.
pub struct ConverseEvaluator<S> {
    pub dsys: DisturbedSystem<S>,
    pub theta1: MonotoneFn<S>,
    pub rho: MonotoneFn<S>,
    pub cfg: ConverseConfig,
    pub mrk: MrkTable<S>,
    weights: Vec<S>,
    cache: RwLock<HashMap<CacheKey, Arc<Vec<S>>>>,
}

const CACHE_LIMIT: usize = 1 << 18;

impl<S: Scalar> fmt::Debug for ConverseEvaluator<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConverseEvaluator")
            .field("dsys", &self.dsys)
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl<S: Scalar> ConverseEvaluator<S> {
    pub fn new(
        dsys: DisturbedSystem<S>,
        theta1: MonotoneFn<S>,
        rho: MonotoneFn<S>,
        cfg: ConverseConfig,
        mrk: MrkTable<S>,
    ) -> Result<Self, ConverseError> {
        cfg.validate()?;
        let weights = mrk.weights(cfg.k_max)?;
        Ok(Self {
            dsys,
            theta1,
            rho,
            cfg,
            mrk,
            weights,
            cache: RwLock::new(HashMap::new()),
        })
    }

    fn key(t: S, xi: &[S]) -> CacheKey {
        (t.as_f64().to_bits(), xi.iter().map(|x| x.as_f64().to_bits()).collect())
    }

    /// `W_1, …, W_{k_max}` at `(t, ξ)`, cached.
    pub fn wk(&self, t: S, xi: &[S]) -> Result<Arc<Vec<S>>, ConverseError> {
        let key = Self::key(t, xi);
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let wk: Vec<S> = wk_series(&self.dsys, t, xi, &self.theta1, &self.rho, &self.cfg, self.cfg.k_max)?
            .into_iter()
            .take(self.cfg.k_max)
            .map(|e| e.value)
            .collect();
        let wk = Arc::new(wk);
        let mut cache = self.cache.write().expect("cache lock");
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, wk.clone());
        Ok(wk)
    }

    pub fn value(&self, t: S, xi: &[S]) -> Result<ConverseValue<S>, ConverseError> {
        let wk = self.wk(t, xi)?;
        Ok(combine(&wk, &self.weights, &self.theta1, xi))
    }

    pub fn alpha1(&self) -> MonotoneFn<S> {
        let weights = self.weights.clone();
        let rho = self.rho.clone();
        MonotoneFn::from_closure(ClassTag::K, move |r| {
            let rr = rho.eval(r);
            weights.iter().enumerate().map(|(i, &w)| w * g_k(rr, i + 1)).sum()
        })
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }
}

/// Probe locations for [`check_converse_properties`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConverseProbePlan {
    /// Radii along the first axis for the sandwich check.
    pub sandwich_radii: Vec<f64>,
    pub t0s: Vec<f64>,
    /// Relative slack on the sandwich bounds.
    pub sandwich_slack: f64,
    pub lipschitz_radius: f64,
    pub lipschitz_pairs: usize,
    /// Pairs are drawn at most this far apart in `t` and in each coordinate.
    pub lipschitz_delta: f64,
    pub lipschitz_t_max: f64,
    /// Initial radii along the first axis for the decay check.
    pub decay_states: Vec<f64>,
    /// Constant disturbance values along the first axis.
    pub decay_disturbances: Vec<f64>,
    pub decay_t0: f64,
    pub decay_horizon: f64,
    pub decay_points: usize,
    pub decay_slack: f64,
    pub seed: u64,
}

impl Default for ConverseProbePlan {
    fn default() -> Self {
        Self {
            sandwich_radii: vec![0.5, 1.0, 3.0],
            t0s: vec![0.0, 2.5],
            sandwich_slack: 0.05,
            lipschitz_radius: 3.0,
            lipschitz_pairs: 24,
            lipschitz_delta: 0.1,
            lipschitz_t_max: 5.0,
            decay_states: vec![1.0, 3.0],
            decay_disturbances: vec![-1.0, 0.0, 1.0],
            decay_t0: 0.0,
            decay_horizon: 4.0,
            decay_points: 9,
            decay_slack: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichRow {
    pub t0: f64,
    pub radius: f64,
    pub v: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub truncation_bound: f64,
    /// `max_k W_k / θ₁(|ξ|)`.
    pub wk_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichItem {
    pub passed: bool,
    pub rows: Vec<SandwichRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzRow {
    pub t: f64,
    pub xi: Vec<f64>,
    pub t2: f64,
    pub xi2: Vec<f64>,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzItem {
    pub passed: bool,
    pub radius: f64,
    pub bound: f64,
    pub max_ratio: f64,
    pub rows: Vec<LipschitzRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRow {
    pub xi0: f64,
    pub d: f64,
    pub t: f64,
    pub v: f64,
    /// `e^{−(t−t0)/2}·V(t0, ξ)`.
    pub envelope: f64,
    /// `v / envelope`, or 0 when both vanish.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayItem {
    pub passed: bool,
    pub slack: f64,
    pub worst_ratio: f64,
    pub rows: Vec<DecayRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConverseReport {
    pub sandwich: SandwichItem,
    /// `W_k ≤ θ₁(|ξ|)` at every sandwich probe.
    pub wk_bounded: bool,
    pub lipschitz: LipschitzItem,
    pub decay: DecayItem,
    pub mrk_radii: Vec<f64>,
    pub mrk: Vec<Vec<f64>>,
}

impl ConverseReport {
    pub fn passed(&self) -> bool {
        self.sandwich.passed && self.wk_bounded && self.lipschitz.passed && self.decay.passed
    }
}

fn axis_state<S: Scalar>(n: usize, r: f64) -> Vec<S> {
    let mut v = vec![S::zero(); n];
    v[0] = S::lit(r);
    v
}

fn mrk_radii<S: Scalar>(k_max: usize, extra: f64) -> Vec<S> {
    let mut r: Vec<f64> = (1..=k_max).map(|k| k as f64).collect();
    if extra > 0.0 {
        r.push(extra);
    }
    r.sort_by(|a, b| a.partial_cmp(b).expect("finite radii"));
    r.dedup();
    r.into_iter().map(S::lit).collect()
}

/// Builds `ρ`, probes `M_{R,k}` and returns a ready evaluator.
pub fn converse_evaluator<S: Scalar>(
    dsys: &DisturbedSystem<S>,
    theta1: &MonotoneFn<S>,
    theta2: &MonotoneFn<S>,
    cfg: &ConverseConfig,
    extra_radius: f64,
) -> Result<ConverseEvaluator<S>, ConverseError> {
    cfg.validate()?;
    let rho = regularized_rho(theta2, &cfg.rho_grid::<S>())?;
    let opts = ProbeOptions {
        step: cfg.step,
        ..ProbeOptions::default()
    };
    let mrk = MrkTable::probe(
        dsys,
        theta1,
        &mrk_radii::<S>(cfg.k_max, extra_radius),
        cfg.k_max,
        cfg.mrk_samples,
        cfg.seed,
        &opts,
    )?;
    ConverseEvaluator::new(dsys.clone(), theta1.clone(), rho, cfg.clone(), mrk)
}

/// Sandwich bounds, Lipschitz ratios and decay along constant-disturbance
/// trajectories for the sampled construction.
pub fn check_converse_properties<S: Scalar>(
    dsys: &DisturbedSystem<S>,
    theta1: &MonotoneFn<S>,
    theta2: &MonotoneFn<S>,
    cfg: &ConverseConfig,
    plan: &ConverseProbePlan,
) -> Result<ConverseReport, ConverseError> {
    if !(plan.lipschitz_radius > 0.0) || !(plan.lipschitz_delta > 0.0) || plan.decay_points < 2 || !(plan.decay_horizon > 0.0) {
        return Err(ConverseError::Parameter("probe plan needs positive radius, delta, horizon and ≥ 2 decay points".into()));
    }
    if plan.decay_disturbances.iter().any(|d| d.abs() > 1.0) {
        return Err(ConverseError::Parameter("decay disturbances must lie in [−1, 1]".into()));
    }
    let ev = converse_evaluator(dsys, theta1, theta2, cfg, plan.lipschitz_radius)?;
    let n = dsys.n();
    let alpha1 = ev.alpha1();
    let tiny = 1e-12;

    let mut rows = Vec::new();
    let mut wk_bounded = true;
    for &t0 in &plan.t0s {
        for &r in &plan.sandwich_radii {
            let xi = axis_state::<S>(n, r);
            let val = ev.value(S::lit(t0), &xi)?;
            let a2 = theta1.eval(S::lit(r)).as_f64();
            let wmax = val.wk.iter().fold(0.0_f64, |m, w| m.max(w.as_f64()));
            if wmax > a2 * (1.0 + 1e-9) + tiny {
                wk_bounded = false;
            }
            rows.push(SandwichRow {
                t0,
                radius: r,
                v: val.value.as_f64(),
                alpha1: alpha1.eval(S::lit(r)).as_f64(),
                alpha2: a2,
                truncation_bound: val.truncation_bound.as_f64(),
                wk_ratio: if a2 > 0.0 { wmax / a2 } else { 0.0 },
            });
        }
    }
    let sl = plan.sandwich_slack;
    let sandwich = SandwichItem {
        passed: rows
            .iter()
            .all(|row| row.v >= row.alpha1 * (1.0 - sl) - tiny && row.v <= row.alpha2 * (1.0 + sl) + tiny),
        rows,
    };

    let radius = plan.lipschitz_radius;
    let bound = ev.mrk.lipschitz_bound(S::lit(radius))?.as_f64();
    let mut rng = stream_rng(plan.seed, 0x4C49_5053);
    let mut pairs = Vec::with_capacity(plan.lipschitz_pairs);
    for _ in 0..plan.lipschitz_pairs {
        let t: f64 = rng.gen_range(0.0..=plan.lipschitz_t_max);
        let dt: f64 = rng.gen_range(0.0..=plan.lipschitz_delta);
        let mut xi: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..=radius)).collect();
        let mut xi2: Vec<f64> = xi.iter().map(|x| x + rng.gen_range(-plan.lipschitz_delta..=plan.lipschitz_delta)).collect();
        for v in [&mut xi, &mut xi2] {
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nv > radius {
                v.iter_mut().for_each(|x| *x *= radius / nv);
            }
        }
        pairs.push((t, xi, t + dt, xi2));
    }
    let lip_rows: Vec<LipschitzRow> = pairs
        .into_iter()
        .map(|(t, xi, t2, xi2)| {
            let a: Vec<S> = xi.iter().map(|&x| S::lit(x)).collect();
            let b: Vec<S> = xi2.iter().map(|&x| S::lit(x)).collect();
            let va = ev.value(S::lit(t), &a)?.value.as_f64();
            let vb = ev.value(S::lit(t2), &b)?.value.as_f64();
            let gap = (t2 - t).abs() + distance(&a, &b).as_f64();
            let ratio = if gap > 0.0 { (va - vb).abs() / gap } else { 0.0 };
            Ok(LipschitzRow { t, xi, t2, xi2, ratio })
        })
        .collect::<Result<_, ConverseError>>()?;
    let max_ratio = lip_rows.iter().fold(0.0_f64, |m, r| m.max(r.ratio));
    let lipschitz = LipschitzItem {
        passed: max_ratio <= bound * (1.0 + plan.decay_slack),
        radius,
        bound,
        max_ratio,
        rows: lip_rows,
    };

    let t0 = S::lit(plan.decay_t0);
    let t_end = t0 + S::lit(plan.decay_horizon);
    let checks: Vec<S> = lin_grid(t0, t_end, plan.decay_points);
    let mut decay_rows = Vec::new();
    for &r in &plan.decay_states {
        for &c in &plan.decay_disturbances {
            let xi = axis_state::<S>(n, r);
            let d = Signal::constant(axis_state::<S>(dsys.m(), c), t_end + S::one()).expect("constant disturbance");
            let traj = simulate_with_stops(&dsys.sys, t0, &xi, &d, t_end, S::lit(cfg.step), &checks)?;
            if traj.blown_up {
                return Err(ConverseError::Model(format!("decay probe from |ξ| = {r} diverged")));
            }
            let v0 = ev.value(t0, &xi)?.value.as_f64();
            for &tc in &checks {
                let x = traj.state_at(tc).expect("check time on grid").to_vec();
                let v = ev.value(tc, &x)?.value.as_f64();
                let envelope = (-(tc - t0).as_f64() / 2.0).exp() * v0;
                let ratio = if envelope > 0.0 {
                    v / envelope
                } else if v > tiny {
                    f64::INFINITY
                } else {
                    0.0
                };
                decay_rows.push(DecayRow {
                    xi0: r,
                    d: c,
                    t: tc.as_f64(),
                    v,
                    envelope,
                    ratio,
                });
            }
        }
    }
    let worst_ratio = decay_rows.iter().fold(0.0_f64, |m, r| m.max(r.ratio));
    let decay = DecayItem {
        passed: decay_rows
            .iter()
            .all(|row| row.v <= row.envelope * (1.0 + plan.decay_slack) + tiny),
        slack: plan.decay_slack,
        worst_ratio,
        rows: decay_rows,
    };

    Ok(ConverseReport {
        sandwich,
        wk_bounded,
        lipschitz,
        decay,
        mrk_radii: ev.mrk.radii().iter().map(|r| r.as_f64()).collect(),
        mrk: ev
            .mrk
            .rows()
            .iter()
            .map(|row| row.iter().map(|v| v.as_f64()).collect())
            .collect(),
    })
}

/// Candidate for the closed loop `g(t, ξ, ν) = f(t, ξ, ν·φ(|ξ|))`, `|ν| ≤ 1`,
/// assumed to satisfy `urgas_beta`.
pub struct ConverseCandidate<S> {
    pub candidate: LyapunovCandidate<S>,
    pub evaluator: Arc<ConverseEvaluator<S>>,
}

impl<S: Scalar> fmt::Debug for ConverseCandidate<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConverseCandidate").field("evaluator", &self.evaluator).finish()
    }
}

/// Builds the feedback system, validates the declared bound at
/// `cfg.validation_radii` (both signs along every axis) and wraps the cached
/// converse `V` as a [`LyapunovCandidate`]. Evaluation failures surface as NaN.
pub fn iss_to_dissipation_candidate<S: Scalar>(
    sys: &SystemDef<S>,
    phi: MonotoneFn<S>,
    urgas_beta: KLBound<S>,
    theta1: &MonotoneFn<S>,
    theta2: &MonotoneFn<S>,
    cfg: &ConverseConfig,
) -> Result<ConverseCandidate<S>, ConverseError> {
    let g = input_feedback(sys, phi)?;
    let dsys = DisturbedSystem::new(g, urgas_beta);
    let extra = cfg.validation_radii.iter().fold(0.0_f64, |m, &r| m.max(r));
    let ev = Arc::new(converse_evaluator(&dsys, theta1, theta2, cfg, extra)?);
    for &r in &cfg.validation_radii {
        for axis in 0..dsys.n() {
            for sign in [1.0, -1.0] {
                let mut xi = vec![S::zero(); dsys.n()];
                xi[axis] = S::lit(sign * r);
                ev.wk(S::zero(), &xi).map_err(|e| match e {
                    ConverseError::Model(m) => ConverseError::Model(format!("input feedback φ is inadequate: {m}")),
                    other => other,
                })?;
            }
        }
    }
    let alpha1 = ev.alpha1();
    let inner = ev.clone();
    let candidate = LyapunovCandidate::new(alpha1, theta1.clone(), move |t, x: &[S]| match inner.value(t, x) {
        Ok(v) => v.value,
        Err(_) => S::nan(),
    });
    Ok(ConverseCandidate { candidate, evaluator: ev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparison::{make_power_fn, sontag_factorize_exponential};
    use crate::simulator::perturbed_decay_system;

    fn scalar_example() -> (DisturbedSystem<f64>, MonotoneFn<f64>, MonotoneFn<f64>) {
        let beta = KLBound::exponential(1.0, 0.5).unwrap();
        let (theta1, theta2) = sontag_factorize_exponential(1.0, 0.5).unwrap();
        (DisturbedSystem::new(perturbed_decay_system(), beta), theta1, theta2)
    }

    fn rho_sqrt() -> MonotoneFn<f64> {
        regularized_rho(&make_power_fn(1.0, 0.5).unwrap(), &lin_grid(0.0, 10.0, 2001)).unwrap()
    }

    #[test]
    fn regularized_rho_closed_forms() {
        let rho = rho_sqrt();
        for &s in &[0.0, 0.1, 0.25, 0.5, 0.75, 1.0, 3.0, 7.3] {
            let want = if s <= 0.5 { s * s } else { s - 0.25 };
            assert!((rho.eval(s) - want).abs() < 1e-5, "s = {s}: {} vs {want}", rho.eval(s));
        }
        assert!((rho.eval(0.5) - 0.25).abs() < 1e-12);
        let id = regularized_rho(&make_power_fn(1.0_f64, 1.0).unwrap(), &lin_grid(0.0, 5.0, 51)).unwrap();
        for &s in &[0.0, 0.3, 2.0, 5.0] {
            assert!((id.eval(s) - s).abs() < 1e-9);
        }
    }

    #[test]
    fn regularized_rho_is_unit_lipschitz_and_below_inverse() {
        let theta2 = make_power_fn(2.0_f64, 0.3).unwrap();
        let grid = lin_grid(0.0, 6.0, 301);
        let rho = regularized_rho(&theta2, &grid).unwrap();
        let inv = theta2.inverse();
        for w in grid.windows(2) {
            assert!((rho.eval(w[1]) - rho.eval(w[0])).abs() <= (w[1] - w[0]) * (1.0 + 1e-9));
        }
        for &s in &grid {
            assert!(rho.eval(s) <= inv.eval(s) + 1e-12);
        }
    }

    #[test]
    fn w1_examples() {
        let (dsys, theta1, _) = scalar_example();
        let rho = rho_sqrt();
        let cfg = ConverseConfig::default();
        assert_eq!(wk_estimate(&dsys, 1, 0.0, &[1.0], &theta1, &rho, &cfg).unwrap().value, 0.0);
        let w = wk_estimate(&dsys, 1, 0.0, &[3.0], &theta1, &rho, &cfg).unwrap();
        assert!((w.value - 1.75).abs() < 0.02 * 1.75, "W1(3) = {}", w.value);
        assert_eq!(w.time, 0.0);
        for k in 1..4 {
            assert_eq!(wk_estimate(&dsys, k, 2.0, &[0.0], &theta1, &rho, &cfg).unwrap().value, 0.0);
        }
    }

    #[test]
    fn wk_monotone_in_k_and_bounded() {
        let (dsys, theta1, _) = scalar_example();
        let rho = rho_sqrt();
        let cfg = ConverseConfig {
            disturbance_samples: 16,
            ..ConverseConfig::default()
        };
        let ws = wk_series(&dsys, 0.7, &[-2.2], &theta1, &rho, &cfg, 8).unwrap();
        for w in ws.windows(2) {
            assert!(w[1].value >= w[0].value);
        }
        assert!(ws.iter().all(|w| w.value <= theta1.eval(2.2)));
    }

    #[test]
    fn converse_v_examples() {
        let (dsys, theta1, _) = scalar_example();
        let rho = rho_sqrt();
        let cfg = ConverseConfig::default();
        let radii: Vec<f64> = (1..=cfg.k_max).map(|k| k as f64).collect();
        let values = vec![vec![1.0; cfg.k_max]; cfg.k_max];
        let mrk = MrkTable::new(radii, values).unwrap();
        let v0 = converse_v(&dsys, 0.0, &[0.0], &theta1, &rho, &cfg, &mrk).unwrap();
        assert_eq!(v0.value, 0.0);
        let v1 = converse_v(&dsys, 0.0, &[1.0], &theta1, &rho, &cfg, &mrk).unwrap();
        assert_eq!(v1.wk[0], 0.0);
        assert!(v1.value <= 0.25);
        assert!((v1.truncation_bound - 0.5f64.powi(6)).abs() < 1e-15);
    }

    #[test]
    fn mrk_table_monotonizes() {
        let t = MrkTable::new(vec![1.0, 2.0], vec![vec![3.0, 1.0], vec![2.0, 5.0]]).unwrap();
        assert_eq!(t.rows(), &[vec![3.0, 3.0], vec![3.0, 5.0]]);
        assert_eq!(t.get(0.5, 2).unwrap(), 3.0);
        assert_eq!(t.get(1.5, 2).unwrap(), 5.0);
        assert!(t.get(2.5, 1).is_err());
        assert!(t.get(1.0, 3).is_err());
    }

    #[test]
    fn overstated_decay_rate_is_a_model_error() {
        let (mut dsys, theta1, _) = scalar_example();
        dsys.urgas_beta = KLBound::exponential(1.0, 5.0).unwrap();
        let rho = rho_sqrt();
        let err = wk_estimate(&dsys, 1, 0.0, &[3.0], &theta1, &rho, &ConverseConfig::default()).unwrap_err();
        assert!(matches!(err, ConverseError::Model(_)), "{err}");
    }

    #[test]
    fn disturbance_samples_are_nested_and_bounded() {
        let tau = 0.3;
        for j in 0..12 {
            let (a, _) = disturbance_sample::<f64>(2, j, 7, tau, 0.0, 3.0);
            let (b, _) = disturbance_sample::<f64>(2, j, 7, tau, 1.0, 3.0);
            for &t in &[1.05, 1.5, 2.9] {
                assert_eq!(a.value_at(t), b.value_at(t));
                assert!(norm(a.value_at(t)) <= 1.0 + 1e-12);
            }
        }
        let (c, _) = disturbance_sample::<f64>(2, 5, 7, tau, 0.0, 3.0);
        let c0 = c.value_at(0.0);
        assert!((norm(c0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decay_example_and_candidate() {
        let (dsys, theta1, theta2) = scalar_example();
        let cfg = ConverseConfig::default();
        let plan = ConverseProbePlan {
            decay_states: vec![3.0],
            decay_disturbances: vec![-1.0],
            lipschitz_pairs: 6,
            t0s: vec![0.0],
            ..ConverseProbePlan::default()
        };
        let rep = check_converse_properties(&dsys, &theta1, &theta2, &cfg, &plan).unwrap();
        assert!(rep.passed(), "{rep:#?}");
        let last = rep.decay.rows.last().unwrap();
        assert!(last.v / (last.envelope / (-2.0f64).exp()) <= (-2.0f64).exp() * 1.1);
    }
}
