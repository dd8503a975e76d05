//! Stability certificates, envelope checks, certificate transformers, a
//! brute-force oracle for the exponential window bound, and falsification.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::{ClassTag, ComparisonError, FnSpec, KLBound, KlSpec, MonotoneFn};
use crate::lyapunov::IpssGains;
use crate::scalar::{norm, stream_rng, Scalar};
use crate::signals::{avg_power_norm, pulse_train, rho_energy, sup_norm, Cumulative, Signal, SignalError};
use crate::simulator::{simulate, SimError, SystemDef, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("certificate fields do not match kind {kind:?}: {detail}")]
    Kind { kind: CertKind, detail: String },
    #[error("bound is not finite at t = {t}")]
    Bound { t: f64 },
    #[error("fixed point iteration did not converge within {0} passes")]
    Convergence(usize),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CertKind {
    #[serde(rename = "ISS")]
    Iss,
    #[serde(rename = "iISS")]
    Iiss,
    #[serde(rename = "IPSS")]
    Ipss,
    #[serde(rename = "URGAS")]
    Urgas,
    #[serde(rename = "URLS")]
    Urls,
}

/// A stability bound. For ISS the gain is applied to the sup norm, for iISS
/// to the ρ-energy and for IPSS to the moving-average power norm.
#[derive(Debug, Clone)]
pub struct Certificate<S> {
    pub kind: CertKind,
    pub beta: Option<KLBound<S>>,
    pub gamma: Option<MonotoneFn<S>>,
    pub rho: Option<MonotoneFn<S>>,
    pub window: Option<S>,
    pub urls_epsilon: Option<MonotoneFn<S>>,
}

impl<S: Scalar> Certificate<S> {
    fn empty(kind: CertKind) -> Self {
        Self {
            kind,
            beta: None,
            gamma: None,
            rho: None,
            window: None,
            urls_epsilon: None,
        }
    }

    pub fn iss(beta: KLBound<S>, gamma: MonotoneFn<S>) -> Self {
        Self {
            beta: Some(beta),
            gamma: Some(gamma),
            ..Self::empty(CertKind::Iss)
        }
    }

    pub fn iiss(beta: KLBound<S>, gamma: MonotoneFn<S>, rho: MonotoneFn<S>) -> Self {
        Self {
            beta: Some(beta),
            gamma: Some(gamma),
            rho: Some(rho),
            ..Self::empty(CertKind::Iiss)
        }
    }

    pub fn ipss(beta: KLBound<S>, gamma: MonotoneFn<S>, rho: MonotoneFn<S>, window: S) -> Result<Self, CertError> {
        if !(window > S::zero()) || !window.is_finite() {
            return Err(CertError::Parameter(format!("window length must be positive (got {window})")));
        }
        Ok(Self {
            beta: Some(beta),
            gamma: Some(gamma),
            rho: Some(rho),
            window: Some(window),
            ..Self::empty(CertKind::Ipss)
        })
    }

    pub fn urgas(beta: KLBound<S>) -> Self {
        Self {
            beta: Some(beta),
            ..Self::empty(CertKind::Urgas)
        }
    }

    pub fn urls(epsilon: MonotoneFn<S>) -> Self {
        Self {
            urls_epsilon: Some(epsilon),
            ..Self::empty(CertKind::Urls)
        }
    }

    /// The IPSS certificate carried by synthesized gains.
    pub fn from_gains(gains: &IpssGains<S>) -> Self {
        Self::ipss(gains.beta_bound(), gains.gamma_fn(), gains.rho_fn(), gains.window).expect("gains carry a positive window")
    }

    pub fn validate(&self) -> Result<(), CertError> {
        let want = match self.kind {
            CertKind::Iss => [true, true, false, false, false],
            CertKind::Iiss => [true, true, true, false, false],
            CertKind::Ipss => [true, true, true, true, false],
            CertKind::Urgas => [true, false, false, false, false],
            CertKind::Urls => [false, false, false, false, true],
        };
        let have = [
            self.beta.is_some(),
            self.gamma.is_some(),
            self.rho.is_some(),
            self.window.is_some(),
            self.urls_epsilon.is_some(),
        ];
        let names = ["beta", "gamma", "rho", "T", "urls_epsilon"];
        for ((w, h), name) in want.iter().zip(have).zip(names) {
            if *w != h {
                let detail = if *w { format!("missing {name}") } else { format!("unexpected {name}") };
                return Err(CertError::Kind { kind: self.kind, detail });
            }
        }
        for f in [&self.gamma, &self.rho].into_iter().flatten() {
            if f.class() != ClassTag::Kinf {
                return Err(CertError::Kind {
                    kind: self.kind,
                    detail: "γ and ρ must be class K∞".into(),
                });
            }
        }
        if let Some(w) = self.window {
            if !(w > S::zero()) {
                return Err(CertError::Kind {
                    kind: self.kind,
                    detail: "T must be positive".into(),
                });
            }
        }
        Ok(())
    }

    /// Serializable form; closures are tabulated on `grid` (and `times` for β).
    pub fn to_spec(&self, grid: &[S], times: &[S]) -> Result<CertificateSpec, CertError> {
        let fspec = |f: &Option<MonotoneFn<S>>| -> Result<Option<FnSpec>, CertError> {
            f.as_ref().map(|f| f.to_spec_or_table(grid)).transpose().map_err(Into::into)
        };
        Ok(CertificateSpec {
            kind: self.kind,
            beta: self.beta.as_ref().map(|b| b.to_spec(grid, times)),
            gamma: fspec(&self.gamma)?,
            rho: fspec(&self.rho)?,
            window: self.window.map(|w| w.as_f64()),
            urls_epsilon: fspec(&self.urls_epsilon)?,
        })
    }

    pub fn from_spec(spec: &CertificateSpec) -> Result<Self, CertError> {
        let f = |s: &Option<FnSpec>| -> Result<Option<MonotoneFn<S>>, CertError> {
            s.as_ref().map(MonotoneFn::from_spec).transpose().map_err(Into::into)
        };
        let cert = Certificate {
            kind: spec.kind,
            beta: spec.beta.as_ref().map(KLBound::from_spec).transpose()?,
            gamma: f(&spec.gamma)?,
            rho: f(&spec.rho)?,
            window: spec.window.map(S::lit),
            urls_epsilon: f(&spec.urls_epsilon)?,
        };
        cert.validate()?;
        Ok(cert)
    }

    /// The certificate with its gain replaced by `k·γ`.
    pub fn with_gamma_scaled(&self, k: S) -> Self {
        let mut c = self.clone();
        c.gamma = c.gamma.map(|g| g.scaled(k));
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    pub kind: CertKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<KlSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<FnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<FnSpec>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub window: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub urls_epsilon: Option<FnSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub t: f64,
    pub norm: f64,
    pub bound: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    /// `min (bound − |x|)` over the grid; `−∞` for blown-up or diverged cases.
    pub margin: f64,
    pub worst_time: f64,
    pub satisfied: bool,
    /// Tolerance applied at the worst point.
    pub tolerance: f64,
    pub input_measure: Option<f64>,
    pub note: Option<String>,
    #[serde(skip)]
    pub rows: Vec<EnvelopeRow>,
}

/// Measure of `u` on `[t0, t_end]` matching the certificate kind.
pub fn input_measure<S: Scalar>(cert: &Certificate<S>, u: &Signal<S>, t0: S, t_end: S) -> Result<Option<(S, bool)>, CertError> {
    let nv = match cert.kind {
        CertKind::Iss => sup_norm(u, t0, t_end)?,
        CertKind::Iiss => rho_energy(u, cert.rho.as_ref().expect("validated"), t0, t_end)?,
        CertKind::Ipss => avg_power_norm(&u.restrict(t0, t_end), cert.rho.as_ref().expect("validated"), cert.window.expect("validated"))?,
        CertKind::Urgas | CertKind::Urls => return Ok(None),
    };
    Ok(Some((nv.value(), nv.diverged())))
}

/// Checks `|x(t)| ≤ β(|ξ|, t − t0) + γ(measure(u))` at every grid time.
///
/// `tolerance = None` uses `1e−6·(1 + bound)` pointwise.
pub fn check_envelope<S: Scalar>(
    traj: &Trajectory<S>,
    cert: &Certificate<S>,
    u: &Signal<S>,
    xi_norm: S,
    t0: S,
    tolerance: Option<f64>,
) -> Result<EnvelopeReport, CertError> {
    cert.validate()?;
    let fail = |note: &str, measure: Option<f64>| EnvelopeReport {
        margin: f64::NEG_INFINITY,
        worst_time: traj.blowup_time.unwrap_or_else(|| traj.t_end()).as_f64(),
        satisfied: false,
        tolerance: tolerance.unwrap_or(0.0),
        input_measure: measure,
        note: Some(note.to_string()),
        rows: Vec::new(),
    };
    if traj.blown_up {
        return Ok(fail("trajectory blew up", None));
    }
    let measure = input_measure(cert, u, t0, traj.t_end())?;
    let gain = match (measure, &cert.gamma) {
        (Some((_, true)), Some(_)) => return Ok(fail("input measure diverged", None)),
        (Some((m, false)), Some(g)) => g.eval(m),
        _ => S::zero(),
    };
    let mut report = EnvelopeReport {
        margin: f64::INFINITY,
        worst_time: t0.as_f64(),
        satisfied: true,
        tolerance: 0.0,
        input_measure: measure.map(|(m, _)| m.as_f64()),
        note: None,
        rows: Vec::with_capacity(traj.times.len()),
    };
    for (&t, x) in traj.times.iter().zip(&traj.states) {
        let transient = match (&cert.beta, &cert.urls_epsilon) {
            (Some(b), _) => b.eval(xi_norm, t - t0),
            (None, Some(e)) => e.eval(xi_norm),
            (None, None) => unreachable!("validated certificate"),
        };
        let bound = transient + gain;
        if !bound.is_finite() {
            return Err(CertError::Bound { t: t.as_f64() });
        }
        let nx = norm(x);
        let margin = (bound - nx).as_f64();
        let tol = tolerance.unwrap_or(1e-6 * (1.0 + bound.as_f64().abs()));
        if margin < report.margin {
            report.margin = margin;
            report.worst_time = t.as_f64();
            report.tolerance = tol;
        }
        if margin < -tol {
            report.satisfied = false;
        }
        report.rows.push(EnvelopeRow {
            t: t.as_f64(),
            norm: nx.as_f64(),
            bound: bound.as_f64(),
            margin,
        });
    }
    Ok(report)
}

/// ISS and iISS certificates implied by an IPSS certificate:
/// `η = γ∘ρ` (since `‖u‖ρ,T ≤ ρ(‖u‖∞)`) and `γ_iISS(s) = γ(s/T)`.
pub fn ipss_to_iss_iiss<S: Scalar>(cert: &Certificate<S>) -> Result<(Certificate<S>, Certificate<S>), CertError> {
    if cert.kind != CertKind::Ipss {
        return Err(CertError::Kind {
            kind: cert.kind,
            detail: "expected an IPSS certificate".into(),
        });
    }
    cert.validate()?;
    let beta = cert.beta.clone().expect("validated");
    let gamma = cert.gamma.as_ref().expect("validated");
    let rho = cert.rho.clone().expect("validated");
    let window = cert.window.expect("validated");
    let eta = crate::comparison::compose(gamma, &rho);
    let gamma_iiss = gamma.rescaled_argument(S::one() / window);
    Ok((Certificate::iss(beta.clone(), eta), Certificate::iiss(beta, gamma_iiss, rho)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowConstants<S> {
    pub lambda_tilde: S,
    pub amplification: S,
}

/// `λ̃ = λ − ln(max{1, K})/T` and `(1 + K(1 − e^{−λT}))/(1 − Ke^{−λT})`.
pub fn exponential_window_bound<S: Scalar>(k: S, lambda: S, window: S) -> Result<WindowConstants<S>, CertError> {
    let ok = |x: S| x > S::zero() && x.is_finite();
    if !ok(k) || !ok(lambda) || !ok(window) {
        return Err(CertError::Parameter(format!("K, λ and T must be positive (got {k}, {lambda}, {window})")));
    }
    let threshold = k.max(S::one()).ln() / lambda;
    if !(window > threshold) {
        return Err(CertError::Parameter(format!(
            "the window T = {window} must exceed ln(max{{1, K}})/λ = {threshold} so that K·e^(−λT) < 1"
        )));
    }
    let c = k * (-lambda * window).exp();
    Ok(WindowConstants {
        lambda_tilde: lambda - k.max(S::one()).ln() / window,
        amplification: (S::one() + k - c) / (S::one() - c),
    })
}

/// IPSS certificate from an exponential iISS bound `K·r·e^{−λt}`:
/// `β(r, t) = K·r·e^{−λ̃t}` and `γ_IPSS(s) = amplification·γ_iISS(T·s)`.
pub fn exp_iiss_to_ipss<S: Scalar>(k: S, lambda: S, gamma_iiss: &MonotoneFn<S>, rho: &MonotoneFn<S>, window: S) -> Result<Certificate<S>, CertError> {
    if !(k >= S::one()) {
        return Err(CertError::Parameter(format!("an exponential iISS bound needs K ≥ 1 (got {k})")));
    }
    let c = exponential_window_bound(k, lambda, window)?;
    let beta = KLBound::exponential(k, c.lambda_tilde)?;
    let gamma = gamma_iiss.rescaled_argument(window).scaled(c.amplification);
    Certificate::ipss(beta, gamma, rho.clone(), window)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub grid_step: f64,
    pub horizon: f64,
    /// Initial value `g(0)`.
    pub g0: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            grid_step: 0.01,
            horizon: 20.0,
            g0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub min_slack: f64,
    pub worst_t0: f64,
    pub worst_t: f64,
    pub lambda_tilde: f64,
    pub amplification: f64,
    pub grid_points: usize,
    pub passes: usize,
    /// The worst-case sequence `g` on the grid.
    #[serde(skip)]
    pub g: Vec<f64>,
}

const ETA_CACHE_MAX_POINTS: usize = 4001;

/// Brute-force check of the exponential window bound.
///
/// Builds the pointwise-largest `g` on the grid with
/// `g(t) ≤ K·g(t0)·e^{−λ(t−t0)} + η(∫_{t0}^t h)` for all grid pairs, then
/// returns the minimal slack of the windowed bound over all grid pairs.
pub fn lemma3_oracle<S: Scalar>(
    k: S,
    lambda: S,
    window: S,
    eta: &MonotoneFn<S>,
    h_profile: &Signal<S>,
    opts: &OracleOptions,
) -> Result<OracleReport, CertError> {
    let consts = exponential_window_bound(k, lambda, window)?;
    if !(opts.grid_step > 0.0) || !(opts.horizon > 0.0) || !(opts.g0 >= 0.0) {
        return Err(CertError::Parameter("grid step and horizon must be positive, g0 nonnegative".into()));
    }
    if h_profile.values().iter().flatten().any(|v| *v < S::zero()) || h_profile.dim() != 1 {
        return Err(CertError::Parameter("h must be a nonnegative scalar signal".into()));
    }
    let step = S::lit(opts.grid_step);
    let n = (opts.horizon / opts.grid_step).round() as usize + 1;
    let ts: Vec<S> = (0..n).map(|i| step * S::from_usize_lossy(i)).collect();
    let cum = Cumulative::new(h_profile, &MonotoneFn::identity());
    let hs: Vec<S> = ts.iter().map(|&t| cum.at(t)).collect();
    let decay: Vec<S> = (0..n).map(|d| (-lambda * ts[d]).exp()).collect();

    // K < 1 forces g(t0) ≤ K·g(t0), i.e. g ≡ 0.
    let g0 = if k >= S::one() { S::lit(opts.g0) } else { S::zero() };
    // η(∫_{t_i}^{t_j} h) for i < j, row j starting at offset j(j−1)/2; only for moderate grids.
    let hs_ref = &hs;
    let eta_rows: Option<Vec<S>> = (n <= ETA_CACHE_MAX_POINTS).then(|| {
        (1..n)
            .into_par_iter()
            .flat_map_iter(|j| (0..j).map(move |i| eta.eval(hs_ref[j] - hs_ref[i])))
            .collect()
    });
    let eta_at = |j: usize, i: usize| match &eta_rows {
        Some(rows) => rows[j * (j - 1) / 2 + i],
        None => eta.eval(hs[j] - hs[i]),
    };
    let sweep = |prev: &[S]| -> Vec<S> {
        let mut g = prev.to_vec();
        g[0] = g[0].min(g0);
        for j in 1..n {
            let mut best = g[j];
            for i in 0..j {
                let cand = k * g[i] * decay[j - i] + eta_at(j, i);
                if cand < best {
                    best = cand;
                }
            }
            g[j] = best;
        }
        g
    };
    let mut g = sweep(&vec![S::infinity(); n]);
    let mut passes = 1;
    loop {
        let next = sweep(&g);
        passes += 1;
        if next == g {
            break;
        }
        if passes >= 1000 {
            return Err(CertError::Convergence(passes));
        }
        g = next;
    }

    // Window-integral candidates for φ: breakpoints of h and their shifts by T.
    let mut cands: Vec<S> = cum.starts().iter().flat_map(|&b| [b, b + window]).collect();
    cands.retain(|&c| c > S::zero());
    cands.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    cands.dedup();

    let lt = consts.lambda_tilde;
    let amp = consts.amplification;
    // C is nondecreasing, so C(max(s − T, t_a)) = max(C(s − T), C(t_a)).
    let lag: Vec<S> = ts.iter().map(|&t| cum.at(t - window)).collect();
    let cand_vals: Vec<(S, S, S)> = cands.iter().map(|&c| (c, cum.at(c), cum.at(c - window))).collect();
    let decay_tilde: Vec<S> = (0..n).map(|d| (-lt * ts[d]).exp()).collect();
    let rows: Vec<(S, usize, usize)> = (0..n)
        .into_par_iter()
        .map(|a| {
            let ta = ts[a];
            let ca = hs[a];
            let mut extra: Vec<(S, S)> = cand_vals
                .iter()
                .filter(|c| c.0 > ta)
                .map(|&(c, at, back)| (c, at - back.max(ca)))
                .collect();
            extra.push((ta + window, cum.at(ta + window) - ca));
            extra.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite"));
            let mut ci = 0;
            let mut phi = S::zero();
            let mut eta_phi = eta.eval(phi);
            let mut worst = (S::infinity(), a, a);
            let base = k * g[a];
            for b in a..n {
                let tb = ts[b];
                let mut next = phi;
                while ci < extra.len() && extra[ci].0 <= tb {
                    next = next.max(extra[ci].1);
                    ci += 1;
                }
                next = next.max(hs[b] - lag[b].max(ca));
                if next > phi {
                    phi = next;
                    eta_phi = eta.eval(phi);
                }
                let bound = base * decay_tilde[b - a] + amp * eta_phi;
                let slack = bound - g[b];
                if slack < worst.0 {
                    worst = (slack, a, b);
                }
            }
            worst
        })
        .collect();
    let worst = rows
        .into_iter()
        .fold((S::infinity(), 0, 0), |acc, r| if r.0 < acc.0 { r } else { acc });
    Ok(OracleReport {
        min_slack: worst.0.as_f64(),
        worst_t0: ts[worst.1].as_f64(),
        worst_t: ts[worst.2].as_f64(),
        lambda_tilde: lt.as_f64(),
        amplification: amp.as_f64(),
        grid_points: n,
        passes,
        g: g.iter().map(|v| v.as_f64()).collect(),
    })
}

/// How the late-pulse duration depends on the pulse start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationRule {
    /// `1/(1 + t0)`.
    Inverse,
    Fixed(f64),
}

impl DurationRule {
    pub fn duration(&self, t0: f64) -> f64 {
        match *self {
            DurationRule::Inverse => 1.0 / (1.0 + t0),
            DurationRule::Fixed(d) => d,
        }
    }
}

/// Structured input families searched by [`falsify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputFamily {
    /// Constant inputs of norm `c` on `[t0, t0 + horizon)`.
    Constants {
        values: Vec<f64>,
        t0s: Vec<f64>,
        #[serde(default = "zero_list")]
        xis: Vec<f64>,
        horizon: f64,
        step: f64,
    },
    /// Unit-width pulse trains with heights `k²`, shifted to start at `t0`.
    PulseTrains {
        taus: Vec<f64>,
        counts: Vec<usize>,
        #[serde(default = "zero_list")]
        t0s: Vec<f64>,
        step: f64,
    },
    /// One pulse of `amplitude` on `[t0, t0 + d)`; step `d/200`, end time `t0 + 4d`.
    LatePulses {
        t0s: Vec<f64>,
        amplitude: f64,
        duration: DurationRule,
    },
    /// Random switching between `±amplitude` with dwell times in `dwell`.
    BangBang {
        amplitude: f64,
        dwell: [f64; 2],
        t0_range: [f64; 2],
        xi_range: [f64; 2],
        horizon: f64,
        step: f64,
    },
}

fn zero_list() -> Vec<f64> {
    vec![0.0]
}

/// One simulated scenario.
#[derive(Debug, Clone)]
pub struct Candidate<S> {
    pub t0: S,
    pub xi: Vec<S>,
    pub u: Signal<S>,
    pub t_end: S,
    pub step: S,
    pub input_ref: String,
}

fn spread<S: Scalar>(c: S, dim: usize) -> Vec<S> {
    let comp = c / S::from_usize_lossy(dim).sqrt();
    vec![comp; dim]
}

fn delayed<S: Scalar>(u: &Signal<S>, t0: S) -> Result<Signal<S>, SignalError> {
    if t0 == S::zero() {
        return Ok(u.clone());
    }
    let mut b = vec![S::zero()];
    let mut v = vec![vec![S::zero(); u.dim()]];
    for (s, _, x) in u.pieces() {
        b.push(s + t0);
        v.push(x.to_vec());
    }
    let pts: Vec<(S, Vec<S>)> = b.into_iter().zip(v).collect();
    let mut bb = Vec::new();
    let mut vv: Vec<Vec<S>> = Vec::new();
    for (t, x) in pts {
        if bb.last() == Some(&t) {
            *vv.last_mut().expect("paired") = x;
        } else {
            bb.push(t);
            vv.push(x);
        }
    }
    Signal::new(bb, vv, u.horizon() + t0)
}

impl InputFamily {
    /// First `budget` candidates for a system with `n` states and `m` inputs.
    pub fn candidates<S: Scalar>(&self, n: usize, m: usize, budget: usize, seed: u64) -> Result<Vec<Candidate<S>>, CertError> {
        let positive = |x: f64, what: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(CertError::Parameter(format!("{what} must be positive (got {x})")))
            }
        };
        let mut out = Vec::new();
        match self {
            InputFamily::Constants { values, t0s, xis, horizon, step } => {
                positive(*horizon, "horizon")?;
                positive(*step, "step")?;
                for &t0 in t0s {
                    for &c in values {
                        for &xi in xis {
                            let t0s = S::lit(t0);
                            let u = Signal::constant(spread(S::lit(c), m), t0s + S::lit(*horizon))?;
                            out.push(Candidate {
                                t0: t0s,
                                xi: spread(S::lit(xi), n),
                                u,
                                t_end: t0s + S::lit(*horizon),
                                step: S::lit(*step),
                                input_ref: format!("constant(c={c}, t0={t0}, xi={xi})"),
                            });
                        }
                    }
                }
            }
            InputFamily::PulseTrains { taus, counts, t0s, step } => {
                positive(*step, "step")?;
                if m != 1 {
                    return Err(CertError::Parameter("pulse trains are scalar inputs".into()));
                }
                for &t0 in t0s {
                    for &tau in taus {
                        for &count in counts {
                            let base = pulse_train(S::lit(tau), count)?;
                            let t0s = S::lit(t0);
                            let u = delayed(&base, t0s)?;
                            out.push(Candidate {
                                t0: t0s,
                                xi: vec![S::zero(); n],
                                t_end: u.horizon() + S::one(),
                                u,
                                step: S::lit(*step),
                                input_ref: format!("pulse_train(tau={tau}, count={count}, t0={t0})"),
                            });
                        }
                    }
                }
            }
            InputFamily::LatePulses { t0s, amplitude, duration } => {
                for &t0 in t0s {
                    let d = duration.duration(t0);
                    positive(d, "pulse duration")?;
                    let t0s = S::lit(t0);
                    let ds = S::lit(d);
                    let mut b = vec![S::zero()];
                    let mut v = vec![vec![S::zero(); m]];
                    if t0s > S::zero() {
                        b.push(t0s);
                        v.push(spread(S::lit(*amplitude), m));
                    } else {
                        v[0] = spread(S::lit(*amplitude), m);
                    }
                    let u = Signal::new(b, v, t0s + ds)?;
                    out.push(Candidate {
                        t0: t0s,
                        xi: vec![S::zero(); n],
                        u,
                        t_end: t0s + S::lit(4.0) * ds,
                        step: ds / S::lit(200.0),
                        input_ref: format!("late_pulse(t0={t0}, amplitude={amplitude}, duration={d})"),
                    });
                }
            }
            InputFamily::BangBang {
                amplitude,
                dwell,
                t0_range,
                xi_range,
                horizon,
                step,
            } => {
                positive(*horizon, "horizon")?;
                positive(*step, "step")?;
                positive(dwell[0], "minimum dwell time")?;
                if dwell[1] < dwell[0] || t0_range[1] < t0_range[0] || xi_range[1] < xi_range[0] || t0_range[0] < 0.0 {
                    return Err(CertError::Parameter("ranges must be ordered and t0 nonnegative".into()));
                }
                for idx in 0..budget {
                    let mut rng = stream_rng(seed, idx as u64);
                    let t0 = rng.gen_range(t0_range[0]..=t0_range[1]);
                    let xi = rng.gen_range(xi_range[0]..=xi_range[1]);
                    let mut b = vec![S::zero()];
                    let mut v = vec![vec![S::zero(); m]];
                    let mut t = t0;
                    let end = t0 + horizon;
                    while t < end {
                        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        let val: Vec<S> = (0..m).map(|_| S::lit(sign * amplitude / (m as f64).sqrt())).collect();
                        if t == 0.0 {
                            v[0] = val;
                        } else {
                            b.push(S::lit(t));
                            v.push(val);
                        }
                        t += rng.gen_range(dwell[0]..=dwell[1]);
                    }
                    let u = Signal::new(b, v, S::lit(end))?;
                    out.push(Candidate {
                        t0: S::lit(t0),
                        xi: spread(S::lit(xi), n),
                        u,
                        t_end: S::lit(end),
                        step: S::lit(*step),
                        input_ref: format!("bang_bang(seed={seed}, index={idx})"),
                    });
                }
            }
        }
        out.truncate(budget);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub index: usize,
    pub t0: f64,
    pub xi: Vec<f64>,
    pub input_ref: String,
    pub margin: f64,
    pub worst_time: f64,
    pub peak: f64,
    pub input_measure: Option<f64>,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsificationReport {
    pub worst: Option<CandidateOutcome>,
    pub violations: Vec<CandidateOutcome>,
    pub evaluated: usize,
}

impl FalsificationReport {
    pub fn violated(&self) -> bool {
        !self.violations.is_empty()
    }
}

pub fn evaluate_candidate<S: Scalar>(
    sys: &SystemDef<S>,
    cert: &Certificate<S>,
    c: &Candidate<S>,
    index: usize,
    tolerance: Option<f64>,
) -> Result<(CandidateOutcome, Trajectory<S>, EnvelopeReport), CertError> {
    let traj = simulate(sys, c.t0, &c.xi, &c.u, c.t_end, c.step)?;
    let rep = check_envelope(&traj, cert, &c.u, norm(&c.xi), c.t0, tolerance)?;
    let outcome = CandidateOutcome {
        index,
        t0: c.t0.as_f64(),
        xi: c.xi.iter().map(|x| x.as_f64()).collect(),
        input_ref: c.input_ref.clone(),
        margin: rep.margin,
        worst_time: rep.worst_time,
        peak: traj.peak_norm().as_f64(),
        input_measure: rep.input_measure,
        satisfied: rep.satisfied,
    };
    Ok((outcome, traj, rep))
}

/// Simulates up to `budget` candidates from `family` and reports the worst
/// envelope margin and every violation, ordered by candidate index.
pub fn falsify<S: Scalar>(
    sys: &SystemDef<S>,
    cert: &Certificate<S>,
    family: &InputFamily,
    budget: usize,
    seed: u64,
    tolerance: Option<f64>,
) -> Result<FalsificationReport, CertError> {
    if budget == 0 {
        return Err(CertError::Parameter("budget must be at least 1".into()));
    }
    cert.validate()?;
    let cands = family.candidates::<S>(sys.n(), sys.m(), budget, seed)?;
    let outcomes: Vec<CandidateOutcome> = cands
        .par_iter()
        .enumerate()
        .map(|(i, c)| evaluate_candidate(sys, cert, c, i, tolerance).map(|r| r.0))
        .collect::<Result<_, _>>()?;
    let worst = outcomes
        .iter()
        .min_by(|a, b| a.margin.total_cmp(&b.margin).then(a.index.cmp(&b.index)))
        .cloned();
    Ok(FalsificationReport {
        worst,
        violations: outcomes.iter().filter(|o| !o.satisfied).cloned().collect(),
        evaluated: outcomes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparison::make_power_fn;
    use crate::simulator::{counterexample_system, linear_test_system};
    use approx::assert_abs_diff_eq;

    fn decay_iss() -> Certificate<f64> {
        Certificate::iss(KLBound::exponential(1.0, 1.0).unwrap(), MonotoneFn::identity())
    }

    #[test]
    fn envelope_on_exact_solution() {
        let sys = linear_test_system(1.0).unwrap();
        let traj = simulate(&sys, 0.0, &[1.0], &Signal::zero(1), 5.0, 1e-3).unwrap();
        let rep = check_envelope(&traj, &decay_iss(), &Signal::zero(1), 1.0, 0.0, None).unwrap();
        assert!(rep.satisfied);
        assert!(rep.margin >= -1e-12);
        assert_eq!(rep.rows.len(), traj.times.len());
    }

    #[test]
    fn envelope_monotone_in_gain() {
        let sys = linear_test_system(1.0).unwrap();
        let u = Signal::scalar(&[(0.0, 1.0), (1.0, -0.5)], 3.0).unwrap();
        let traj = simulate(&sys, 0.0, &[0.5], &u, 4.0, 1e-2).unwrap();
        let base = check_envelope(&traj, &decay_iss(), &u, 0.5, 0.0, None).unwrap();
        let big = check_envelope(&traj, &decay_iss().with_gamma_scaled(10.0), &u, 0.5, 0.0, None).unwrap();
        assert!(big.margin >= base.margin);
    }

    #[test]
    fn blown_up_trajectory_fails() {
        let sys = SystemDef::new("square", 1, 1, |_t, x: &[f64], _u: &[f64], o: &mut [f64]| o[0] = x[0] * x[0]).unwrap();
        let traj = simulate(&sys, 0.0, &[2.0], &Signal::zero(1), 2.0, 1e-3).unwrap();
        let rep = check_envelope(&traj, &decay_iss(), &Signal::zero(1), 2.0, 0.0, None).unwrap();
        assert!(!rep.satisfied);
        assert_eq!(rep.margin, f64::NEG_INFINITY);
    }

    #[test]
    fn certificate_validation() {
        let mut c = decay_iss();
        c.rho = Some(MonotoneFn::identity());
        assert!(c.validate().is_err());
        assert!(Certificate::<f64>::urls(MonotoneFn::identity()).validate().is_ok());
        let p = MonotoneFn::from_closure(ClassTag::P, |s: f64| s / (1.0 + s));
        assert!(Certificate::iss(KLBound::exponential(1.0, 1.0).unwrap(), p).validate().is_err());
    }

    #[test]
    fn certificate_json_round_trip() {
        let c = Certificate::ipss(KLBound::exponential(2.0, 0.5).unwrap(), make_power_fn(3.0, 1.0).unwrap(), MonotoneFn::identity(), 2.0).unwrap();
        let spec = c.to_spec(&[0.0, 1.0, 2.0], &[0.0, 1.0]).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains(r#""kind":"IPSS""#) && json.contains(r#""T":2.0"#));
        let back: Certificate<f64> = Certificate::from_spec(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.gamma.unwrap().eval(1.5), 4.5);
        assert_eq!(back.beta.unwrap().eval(1.0, 0.0), 2.0);
    }

    #[test]
    fn lemma1_transformer_examples() {
        let beta = KLBound::exponential(1.0, 1.0).unwrap();
        let c = Certificate::ipss(beta.clone(), MonotoneFn::identity(), MonotoneFn::identity(), 2.0).unwrap();
        let (iss, iiss) = ipss_to_iss_iiss(&c).unwrap();
        assert_eq!(iss.kind, CertKind::Iss);
        assert_abs_diff_eq!(iiss.gamma.as_ref().unwrap().eval(3.0), 1.5, epsilon = 1e-15);
        let sq = make_power_fn(1.0, 2.0).unwrap();
        let c2 = Certificate::ipss(beta.clone(), MonotoneFn::identity(), sq, 1.0).unwrap();
        let (iss2, iiss2) = ipss_to_iss_iiss(&c2).unwrap();
        assert_abs_diff_eq!(iss2.gamma.unwrap().eval(3.0), 9.0, epsilon = 1e-12);
        assert_eq!(iiss2.gamma.unwrap().eval(0.7), 0.7);
        assert!(ipss_to_iss_iiss(&decay_iss()).is_err());
    }

    #[test]
    fn window_constants() {
        let c = exponential_window_bound(2.0, 1.0, 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert_abs_diff_eq!(c.lambda_tilde, 1.0 - 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.amplification, (1.0 + 2.0 * (1.0 - e)) / (1.0 - 2.0 * e), epsilon = 1e-12);
        assert_abs_diff_eq!(c.amplification, 8.56884, epsilon = 1e-4);
        let c1 = exponential_window_bound(1.0, 1.0, 1.0).unwrap();
        assert_eq!(c1.lambda_tilde, 1.0);
        assert_abs_diff_eq!(c1.amplification, 2.58198, epsilon = 1e-4);
        let c20 = exponential_window_bound(1.0, 1.0, 20.0).unwrap();
        assert_abs_diff_eq!(c20.amplification, 2.0, epsilon = 1e-8);
        assert!(exponential_window_bound(2.0, 1.0, 0.5).is_err());
        assert!(exponential_window_bound(2.0, 1.0, 2f64.ln()).is_err());
    }

    #[test]
    fn exponential_iiss_to_ipss_examples() {
        let id = MonotoneFn::identity();
        let c = exp_iiss_to_ipss(1.0, 1.0, &id, &id, 1.0).unwrap();
        assert_abs_diff_eq!(c.gamma.as_ref().unwrap().eval(1.0), 2.58198, epsilon = 1e-4);
        assert_eq!(c.beta.as_ref().unwrap().eval(3.0, 0.0), 3.0);
        let c2 = exp_iiss_to_ipss(2.0, 1.0, &id, &id, 1.0).unwrap();
        assert_abs_diff_eq!(c2.gamma.as_ref().unwrap().eval(2.0), 2.0 * 8.56884, epsilon = 1e-3);
        match c2.beta.unwrap() {
            KLBound::Exponential { k, lambda } => {
                assert_eq!(k, 2.0);
                assert_abs_diff_eq!(lambda, 0.306853, epsilon = 1e-6);
            }
            other => panic!("{other:?}"),
        }
        assert!(exp_iiss_to_ipss(0.5, 1.0, &id, &id, 1.0).is_err());
        let c3 = exp_iiss_to_ipss(1.0, 1.0, &id, &id, 3.0).unwrap();
        let amp = exponential_window_bound(1.0, 1.0, 3.0).unwrap().amplification;
        assert_abs_diff_eq!(c3.gamma.unwrap().eval(0.5), amp * 1.5, epsilon = 1e-12);
    }

    #[test]
    fn oracle_with_zero_input() {
        let eta = make_power_fn(1.0, 1.0).unwrap();
        let opts = OracleOptions {
            grid_step: 0.05,
            horizon: 5.0,
            g0: 1.0,
        };
        let r = lemma3_oracle(2.0, 1.0, 1.0, &eta, &Signal::zero(1), &opts).unwrap();
        assert!(r.min_slack >= 0.0);
        for (i, g) in r.g.iter().enumerate().skip(1) {
            assert_abs_diff_eq!(*g, 2.0 * (-(i as f64) * 0.05).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn oracle_with_unit_pulses() {
        let eta = make_power_fn(1.0, 1.0).unwrap();
        let h = pulse_train(2.0, 9).unwrap();
        let r = lemma3_oracle(2.0, 1.0, 1.0, &eta, &h, &OracleOptions::default()).unwrap();
        assert!(r.min_slack >= -1e-9, "{r:?}");
        let k1 = lemma3_oracle(1.0, 0.7, 1.0, &eta, &h, &OracleOptions { horizon: 8.0, ..Default::default() }).unwrap();
        assert_eq!(k1.lambda_tilde, 0.7);
        assert!(k1.min_slack >= -1e-12);
    }

    #[test]
    fn late_pulses_falsify_counterexample() {
        let sys = counterexample_system::<f64>();
        let cert = Certificate::iiss(KLBound::exponential(1.0, 1.0).unwrap(), MonotoneFn::linear(8.0), MonotoneFn::identity());
        let fam = InputFamily::LatePulses {
            t0s: vec![10.0, 100.0, 1000.0],
            amplitude: 0.5,
            duration: DurationRule::Inverse,
        };
        let rep = falsify(&sys, &cert, &fam, 10, 0, None).unwrap();
        assert_eq!(rep.evaluated, 3);
        let t0s: Vec<f64> = rep.violations.iter().map(|v| v.t0).collect();
        assert_eq!(t0s, vec![100.0, 1000.0]);
        assert_eq!(rep.worst.as_ref().unwrap().t0, 1000.0);
        let bigger = falsify(&sys, &cert.with_gamma_scaled(1e6), &fam, 10, 0, None).unwrap();
        assert!(bigger.worst.as_ref().unwrap().margin > rep.worst.as_ref().unwrap().margin);
        assert!(!bigger.violated());
    }

    #[test]
    fn bang_bang_is_deterministic() {
        let fam = InputFamily::BangBang {
            amplitude: 1.0,
            dwell: [0.1, 1.0],
            t0_range: [0.0, 5.0],
            xi_range: [-2.0, 2.0],
            horizon: 5.0,
            step: 0.01,
        };
        let sys = linear_test_system(1.0).unwrap();
        let a = falsify(&sys, &decay_iss(), &fam, 8, 42, None).unwrap();
        let b = falsify(&sys, &decay_iss(), &fam, 8, 42, None).unwrap();
        assert_eq!(a, b);
        assert!(!a.violated());
    }

    #[test]
    fn delayed_pulse_trains() {
        let fam = InputFamily::PulseTrains {
            taus: vec![1.0],
            counts: vec![3],
            t0s: vec![0.0, 2.5],
            step: 0.01,
        };
        let c = fam.candidates::<f64>(1, 1, 10, 0).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].u.eval(3.5), vec![1.0]);
        assert_eq!(c[1].u.eval(3.0), vec![0.0]);
        assert_eq!(c[1].t_end, c[1].u.horizon() + 1.0);
    }
}
