//! Piecewise-constant input signals and the three input measures: the sup
//! norm, the ρ-energy and the moving-average power norm.
//!
//! A [`Signal`] holds right-open pieces `[b_i, b_{i+1})` on `[0, horizon)` and
//! is identically zero from `horizon` on. All measures are exact for this
//! representation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::MonotoneFn;
use crate::scalar::{norm, Scalar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignalError {
    #[error("invalid signal: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Signal<S> {
    breakpoints: Vec<S>,
    values: Vec<Vec<S>>,
    horizon: S,
    dim: usize,
    zero: Vec<S>,
}

/// Window `[start, end]` where a running value was attained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Window<S> {
    pub start: S,
    pub end: S,
}

/// Value of an input measure. `diverged` is set instead of storing an overflowed float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormValue<S> {
    value: S,
    diverged: bool,
    pub witness: Option<Window<S>>,
}

impl<S: Scalar> NormValue<S> {
    fn new(value: S, witness: Option<Window<S>>) -> Self {
        if value.is_finite() {
            Self {
                value,
                diverged: false,
                witness,
            }
        } else {
            Self {
                value: S::infinity(),
                diverged: true,
                witness,
            }
        }
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    /// Finite value, or `None` when diverged.
    pub fn finite(&self) -> Option<S> {
        (!self.diverged).then_some(self.value)
    }

    /// Raw value; `+∞` when diverged.
    pub fn value(&self) -> S {
        self.value
    }
}

impl<S: Scalar> Signal<S> {
    pub fn new(breakpoints: Vec<S>, values: Vec<Vec<S>>, horizon: S) -> Result<Self, SignalError> {
        let err = |m: &str| Err(SignalError::Parameter(m.to_string()));
        if breakpoints.is_empty() {
            return err("a signal needs at least one piece");
        }
        if breakpoints.len() != values.len() {
            return err("breakpoints and values must have equal length");
        }
        if breakpoints[0] != S::zero() {
            return err("the first breakpoint must be 0");
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return err("breakpoints must be strictly increasing");
        }
        if !horizon.is_finite() || *breakpoints.last().expect("nonempty") > horizon {
            return err("the last breakpoint must not exceed a finite horizon");
        }
        let dim = values[0].len();
        if dim == 0 || values.iter().any(|v| v.len() != dim) {
            return err("all values must share a positive dimension");
        }
        if values.iter().flatten().chain(&breakpoints).any(|x| !x.is_finite()) {
            return err("signal entries must be finite");
        }
        Ok(Self {
            breakpoints,
            values,
            horizon,
            dim,
            zero: vec![S::zero(); dim],
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(vec![S::zero()], vec![vec![S::zero(); dim.max(1)]], S::zero()).expect("zero signal is valid")
    }

    /// `value` on `[0, horizon)`.
    pub fn constant(value: Vec<S>, horizon: S) -> Result<Self, SignalError> {
        Self::new(vec![S::zero()], vec![value], horizon)
    }

    /// Scalar signal from `(start, value)` pairs.
    pub fn scalar(pieces: &[(S, S)], horizon: S) -> Result<Self, SignalError> {
        let (b, v) = pieces.iter().map(|&(t, x)| (t, vec![x])).unzip();
        Self::new(b, v, horizon)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn breakpoints(&self) -> &[S] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[Vec<S>] {
        &self.values
    }

    /// Positive-length pieces `(start, end, value)` on `[0, horizon)`.
    pub fn pieces(&self) -> impl Iterator<Item = (S, S, &[S])> + '_ {
        let n = self.breakpoints.len();
        (0..n).filter_map(move |i| {
            let start = self.breakpoints[i];
            let end = if i + 1 < n {
                self.breakpoints[i + 1].min(self.horizon)
            } else {
                self.horizon
            };
            (end > start).then(|| (start, end, self.values[i].as_slice()))
        })
    }

    /// Value at `t`; the zero vector for `t ≥ horizon` and for `t < 0`.
    pub fn value_at(&self, t: S) -> &[S] {
        if !(t >= S::zero()) || t >= self.horizon {
            return &self.zero;
        }
        let i = self.breakpoints.partition_point(|&b| b <= t);
        &self.values[i - 1]
    }

    pub fn eval(&self, t: S) -> Vec<S> {
        self.value_at(t).to_vec()
    }

    /// Internal breakpoints and the horizon: every time where the value can jump.
    pub fn switch_times(&self) -> Vec<S> {
        let mut out: Vec<S> = self.breakpoints[1..]
            .iter()
            .copied()
            .filter(|&b| b < self.horizon)
            .collect();
        if self.horizon > S::zero() {
            out.push(self.horizon);
        }
        out
    }

    /// `u` restricted to `[a, b)`, zero elsewhere.
    pub fn restrict(&self, a: S, b: S) -> Signal<S> {
        let z = Signal::zero(self.dim);
        let head = concat(self, &z, b).expect("same dimension");
        concat(&z, &head, a).expect("same dimension")
    }

    /// The full support interval `[0, horizon]`.
    pub fn full_interval(&self) -> (S, S) {
        (S::zero(), self.horizon)
    }

    /// Rows `(t, value)` sampled every `step` on `[0, horizon]`, plus every breakpoint.
    pub fn sampled(&self, step: S) -> Vec<(S, Vec<S>)> {
        let mut ts: Vec<S> = Vec::new();
        if step > S::zero() {
            let mut k = 0usize;
            loop {
                let t = step * S::from_usize_lossy(k);
                if t > self.horizon {
                    break;
                }
                ts.push(t);
                k += 1;
            }
        }
        ts.extend(self.breakpoints.iter().copied());
        ts.push(self.horizon);
        ts.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        ts.dedup();
        ts.into_iter().map(|t| (t, self.eval(t))).collect()
    }

    pub fn to_spec(&self) -> SignalSpec {
        SignalSpec {
            dim: self.dim,
            horizon: self.horizon.as_f64(),
            pieces: self
                .breakpoints
                .iter()
                .zip(&self.values)
                .map(|(t, v)| PieceSpec {
                    t: t.as_f64(),
                    v: v.iter().map(|x| x.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_spec(spec: &SignalSpec) -> Result<Self, SignalError> {
        let s = Self::new(
            spec.pieces.iter().map(|p| S::lit(p.t)).collect(),
            spec.pieces.iter().map(|p| p.v.iter().map(|&x| S::lit(x)).collect()).collect(),
            S::lit(spec.horizon),
        )?;
        if s.dim != spec.dim {
            return Err(SignalError::Parameter(format!(
                "declared dim {} does not match piece values of dim {}",
                spec.dim, s.dim
            )));
        }
        Ok(s)
    }

    /// Builds a signal from possibly redundant `(start, value)` pieces: later
    /// entries win on equal start times, equal neighbours are merged.
    fn from_raw(dim: usize, mut pts: Vec<(S, Vec<S>)>, horizon: S) -> Signal<S> {
        pts.retain(|(t, _)| *t < horizon);
        let mut b: Vec<S> = Vec::with_capacity(pts.len());
        let mut v: Vec<Vec<S>> = Vec::with_capacity(pts.len());
        for (t, val) in pts {
            if let Some(&last) = b.last() {
                if t <= last {
                    *v.last_mut().expect("paired") = val;
                    continue;
                }
            }
            b.push(t);
            v.push(val);
        }
        let mut mb = Vec::with_capacity(b.len());
        let mut mv: Vec<Vec<S>> = Vec::with_capacity(v.len());
        for (t, val) in b.into_iter().zip(v) {
            if mv.last() == Some(&val) {
                continue;
            }
            mb.push(t);
            mv.push(val);
        }
        if mb.is_empty() || mb[0] != S::zero() {
            return Signal::zero(dim);
        }
        Signal::new(mb, mv, horizon).expect("raw pieces are normalized")
    }
}

/// Seeded random piecewise-constant signal: `pieces` pieces of length
/// `piece_len`, components uniform in `[−amplitude, amplitude]`.
pub fn random_piecewise_constant<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    pieces: usize,
    piece_len: S,
    amplitude: S,
) -> Signal<S> {
    let mut b = Vec::with_capacity(pieces);
    let mut v = Vec::with_capacity(pieces);
    for i in 0..pieces.max(1) {
        b.push(piece_len * S::from_usize_lossy(i));
        v.push(
            (0..dim)
                .map(|_| amplitude * S::lit(rng.gen_range(-1.0..=1.0)))
                .collect(),
        );
    }
    Signal::new(b, v, piece_len * S::from_usize_lossy(pieces.max(1))).expect("random signal is well formed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceSpec {
    pub t: f64,
    pub v: Vec<f64>,
}

/// JSON signal format `{"dim":m,"horizon":h,"pieces":[{"t":…,"v":[…]},…]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub dim: usize,
    pub horizon: f64,
    pub pieces: Vec<PieceSpec>,
}

/// `u ◊_τ v`: equals `u` on `[0, τ)` and `v` on `[τ, ∞)`.
pub fn concat<S: Scalar>(u: &Signal<S>, v: &Signal<S>, tau: S) -> Result<Signal<S>, SignalError> {
    if u.dim != v.dim {
        return Err(SignalError::Parameter(format!(
            "cannot concatenate signals of dimension {} and {}",
            u.dim, v.dim
        )));
    }
    if !(tau >= S::zero()) || !tau.is_finite() {
        return Err(SignalError::Parameter(format!("concatenation time must be finite and nonnegative (got {tau})")));
    }
    let mut pts: Vec<(S, Vec<S>)> = u.pieces().filter(|(s, _, _)| *s < tau).map(|(s, _, x)| (s, x.to_vec())).collect();
    let horizon = if v.horizon > tau {
        if u.horizon < tau {
            pts.push((u.horizon, vec![S::zero(); u.dim]));
        }
        pts.push((tau, v.value_at(tau).to_vec()));
        pts.extend(v.pieces().filter(|(s, _, _)| *s > tau).map(|(s, _, x)| (s, x.to_vec())));
        v.horizon
    } else {
        u.horizon.min(tau)
    };
    Ok(Signal::from_raw(u.dim, pts, horizon))
}

fn check_interval<S: Scalar>(a: S, b: S) -> Result<(), SignalError> {
    if !(a >= S::zero()) || !(a <= b) {
        return Err(SignalError::Parameter(format!("need 0 ≤ a ≤ b (got [{a}, {b}])")));
    }
    Ok(())
}

/// Essential supremum of `|u|` over `[a, b]`.
pub fn sup_norm<S: Scalar>(u: &Signal<S>, a: S, b: S) -> Result<NormValue<S>, SignalError> {
    check_interval(a, b)?;
    let mut best = S::zero();
    let mut witness = None;
    for (s, e, x) in u.pieces() {
        let hit = if a == b { s <= a && a < e } else { s.max(a) < e.min(b) };
        if !hit {
            continue;
        }
        let n = norm(x);
        if n > best || n.is_nan() {
            best = n;
            witness = Some(Window {
                start: s.max(a),
                end: e.min(b),
            });
        }
    }
    Ok(NormValue::new(best, witness))
}

/// `∫_a^b ρ(|u(s)|) ds`.
pub fn rho_energy<S: Scalar>(u: &Signal<S>, rho: &MonotoneFn<S>, a: S, b: S) -> Result<NormValue<S>, SignalError> {
    check_interval(a, b)?;
    let mut total = S::zero();
    for (s, e, x) in u.pieces() {
        let len = e.min(b) - s.max(a);
        if len > S::zero() {
            total = total + rho.eval(norm(x)) * len;
        }
    }
    let tail = b - a.max(u.horizon);
    if tail > S::zero() {
        total = total + rho.eval(S::zero()) * tail;
    }
    Ok(NormValue::new(total, Some(Window { start: a, end: b })))
}

/// Cumulative `C(t) = ∫_0^t ρ(|u|)` as a piecewise-linear function.
pub(crate) struct Cumulative<S> {
    starts: Vec<S>,
    cum: Vec<S>,
    rates: Vec<S>,
}

impl<S: Scalar> Cumulative<S> {
    pub(crate) fn new(u: &Signal<S>, rho: &MonotoneFn<S>) -> Self {
        let mut starts = Vec::new();
        let mut cum = Vec::new();
        let mut rates = Vec::new();
        let mut acc = S::zero();
        for (s, e, x) in u.pieces() {
            let r = rho.eval(norm(x));
            starts.push(s);
            cum.push(acc);
            rates.push(r);
            acc = acc + r * (e - s);
        }
        starts.push(u.horizon);
        cum.push(acc);
        rates.push(rho.eval(S::zero()));
        if starts[0] > S::zero() {
            // only when the signal has no positive-length piece and a positive
            // horizon, which `Signal::new` rules out
            starts.insert(0, S::zero());
            cum.insert(0, S::zero());
            rates.insert(0, S::zero());
        }
        Self { starts, cum, rates }
    }

    pub(crate) fn starts(&self) -> &[S] {
        &self.starts
    }

    pub(crate) fn at(&self, t: S) -> S {
        let j = self.starts.partition_point(|&s| s <= t).max(1) - 1;
        self.cum[j] + self.rates[j] * (t - self.starts[j])
    }
}

/// Moving-average power norm `(1/T)·sup_{t≥0} ∫_{max(t−T,0)}^t ρ(|u|)`.
///
/// The windowed integral is piecewise affine in `t` with kinks at
/// breakpoints and breakpoints shifted by `T`; the supremum is the maximum
/// over those candidates.
pub fn avg_power_norm<S: Scalar>(u: &Signal<S>, rho: &MonotoneFn<S>, window: S) -> Result<NormValue<S>, SignalError> {
    if !(window > S::zero()) || !window.is_finite() {
        return Err(SignalError::Parameter(format!("window length must be positive (got {window})")));
    }
    let c = Cumulative::new(u, rho);
    let mut best = S::zero();
    let mut witness = Window {
        start: S::zero(),
        end: S::zero(),
    };
    for &b in &c.starts {
        for t in [b, b + window] {
            let lo = (t - window).max(S::zero());
            let val = c.at(t) - c.at(lo);
            if val > best || val.is_nan() {
                best = val;
                witness = Window { start: lo, end: t };
            }
        }
    }
    Ok(NormValue::new(best / window, Some(witness)))
}

/// Example input with pulses of height exactly `k²` on `[kτ, kτ + 1/k)`,
/// `k = 1..=count`; horizon `count·τ + 1`.
pub fn pulse_train<S: Scalar>(tau: S, count: usize) -> Result<Signal<S>, SignalError> {
    if !(tau >= S::one()) || !tau.is_finite() {
        return Err(SignalError::Parameter(format!("pulse spacing must be at least 1 (got {tau})")));
    }
    if count == 0 {
        return Err(SignalError::Parameter("pulse count must be positive".into()));
    }
    let mut pts = vec![(S::zero(), vec![S::zero()])];
    for k in 1..=count {
        let kf = S::from_usize_lossy(k);
        let start = kf * tau;
        pts.push((start, vec![kf * kf]));
        pts.push((start + S::one() / kf, vec![S::zero()]));
    }
    let horizon = S::from_usize_lossy(count) * tau + S::one();
    let mut b = Vec::new();
    let mut v: Vec<Vec<S>> = Vec::new();
    for (t, val) in pts {
        if b.last() == Some(&t) {
            *v.last_mut().expect("paired") = val;
        } else {
            b.push(t);
            v.push(val);
        }
    }
    Signal::new(b, v, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparison::make_power_fn;
    use approx::assert_relative_eq;

    fn id() -> MonotoneFn<f64> {
        MonotoneFn::identity()
    }

    fn sqrt() -> MonotoneFn<f64> {
        make_power_fn(1.0, 0.5).unwrap()
    }

    #[test]
    fn eval_examples() {
        let c = Signal::constant(vec![1.0], 10.0).unwrap();
        assert_eq!(c.eval(5.0), vec![1.0]);
        assert_eq!(c.eval(10.0), vec![0.0]);
        let two = Signal::scalar(&[(0.0, 1.0), (2.0, 3.0)], 4.0).unwrap();
        assert_eq!(two.eval(2.0), vec![3.0]);
        assert_eq!(two.eval(1.999), vec![1.0]);
    }

    #[test]
    fn constructor_rejects_malformed_input() {
        assert!(Signal::<f64>::new(vec![], vec![], 1.0).is_err());
        assert!(Signal::new(vec![0.5], vec![vec![1.0]], 1.0).is_err());
        assert!(Signal::new(vec![0.0, 0.0], vec![vec![1.0], vec![2.0]], 1.0).is_err());
        assert!(Signal::new(vec![0.0, 2.0], vec![vec![1.0], vec![2.0]], 1.0).is_err());
        assert!(Signal::new(vec![0.0, 0.5], vec![vec![1.0], vec![2.0, 3.0]], 1.0).is_err());
        assert!(Signal::new(vec![0.0], vec![vec![f64::NAN]], 1.0).is_err());
    }

    #[test]
    fn concat_examples() {
        let u = Signal::constant(vec![1.0], 4.0).unwrap();
        let v = Signal::constant(vec![2.0], 4.0).unwrap();
        let w = concat(&u, &v, 2.0).unwrap();
        assert_eq!(w.eval(1.0), vec![1.0]);
        assert_eq!(w.eval(3.0), vec![2.0]);
        assert_eq!(w.eval(4.0), vec![0.0]);

        let z = Signal::zero(1);
        assert_eq!(concat(&z, &v, 0.0).unwrap(), v);
        let two = Signal::scalar(&[(0.0, 1.0), (2.0, 3.0)], 4.0).unwrap();
        for tau in [0.0, 1.0, 2.0, 3.5, 4.0, 7.0] {
            assert_eq!(concat(&two, &two, tau).unwrap(), two, "tau = {tau}");
        }
        let wide = Signal::constant(vec![1.0, 2.0], 1.0).unwrap();
        assert!(concat(&u, &wide, 1.0).is_err());
    }

    #[test]
    fn concat_fills_gap_with_zero() {
        let u = Signal::constant(vec![1.0], 1.0).unwrap();
        let v = Signal::constant(vec![2.0], 5.0).unwrap();
        let w = concat(&u, &v, 3.0).unwrap();
        assert_eq!(w.eval(0.5), vec![1.0]);
        assert_eq!(w.eval(2.0), vec![0.0]);
        assert_eq!(w.eval(4.0), vec![2.0]);
        assert_eq!(w.horizon(), 5.0);
    }

    #[test]
    fn restrict_zeroes_outside() {
        let u = Signal::constant(vec![3.0], 10.0).unwrap();
        let r = u.restrict(2.0, 5.0);
        assert_eq!(r.eval(1.0), vec![0.0]);
        assert_eq!(r.eval(2.0), vec![3.0]);
        assert_eq!(r.eval(5.0), vec![0.0]);
    }

    #[test]
    fn sup_norm_examples() {
        let c = Signal::constant(vec![2.5], 10.0).unwrap();
        assert_eq!(sup_norm(&c, 0.0, 10.0).unwrap().finite(), Some(2.5));
        assert_eq!(sup_norm(&c, 11.0, 20.0).unwrap().finite(), Some(0.0));
        let p = pulse_train(1.0, 5).unwrap();
        assert_eq!(sup_norm(&p, 0.0, 6.0).unwrap().finite(), Some(25.0));
        assert!(sup_norm(&c, 3.0, 1.0).is_err());
        let v = Signal::constant(vec![3.0, 4.0], 1.0).unwrap();
        assert_eq!(sup_norm(&v, 0.0, 1.0).unwrap().value(), 5.0);
    }

    #[test]
    fn rho_energy_examples() {
        let c = Signal::constant(vec![1.0], 3.0).unwrap();
        assert_eq!(rho_energy(&c, &id(), 0.0, 3.0).unwrap().value(), 3.0);
        let p = pulse_train(1.0, 7).unwrap();
        assert_relative_eq!(rho_energy(&p, &sqrt(), 0.0, 8.0).unwrap().value(), 7.0, epsilon = 1e-12);
        assert_eq!(rho_energy(&Signal::zero(2), &id(), 0.0, 5.0).unwrap().value(), 0.0);
    }

    #[test]
    fn avg_power_norm_examples() {
        let c = Signal::constant(vec![0.7], 20.0).unwrap();
        for t in [0.5, 1.0, 3.0, 19.0] {
            assert_relative_eq!(avg_power_norm(&c, &id(), t).unwrap().value(), 0.7, epsilon = 1e-12);
        }
        let p = pulse_train(1.0, 50).unwrap();
        let n = avg_power_norm(&p, &id(), 2.0).unwrap();
        assert!(n.value() >= 25.0);
        assert!(avg_power_norm(&c, &id(), 0.0).is_err());
    }

    #[test]
    fn avg_power_norm_of_pulses_with_sqrt_gain() {
        // best window: tail of pulse 1, pulse 2 and all of pulse 3, [4/3, 10/3]
        let p = pulse_train(1.0, 50).unwrap();
        let n = avg_power_norm(&p, &sqrt(), 2.0).unwrap();
        assert_relative_eq!(n.value(), 4.0 / 3.0, epsilon = 1e-12);
        let w = n.witness.unwrap();
        assert_relative_eq!(w.end, 10.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn pulse_train_examples() {
        let one = pulse_train(1.0, 1).unwrap();
        assert_eq!(one.eval(1.0), vec![1.0]);
        assert_eq!(one.eval(1.999), vec![1.0]);
        assert_eq!(one.eval(2.0), vec![0.0]);
        assert_eq!(one.horizon(), 2.0);
        assert_eq!(sup_norm(&pulse_train(1.0, 3).unwrap(), 0.0, 4.0).unwrap().value(), 9.0);
        let p = pulse_train(2.0, 2).unwrap();
        let support: Vec<(f64, f64)> = p.pieces().filter(|(_, _, v)| v[0] != 0.0).map(|(s, e, _)| (s, e)).collect();
        assert_eq!(support, vec![(2.0, 3.0), (4.0, 4.5)]);
        assert!(pulse_train(0.5, 3).is_err());
        assert!(pulse_train(1.0, 0).is_err());
        // consecutive pulses touching at t = 2 when τ = 1
        let t = pulse_train(1.0, 2).unwrap();
        assert_eq!(t.breakpoints(), &[0.0, 1.0, 2.0, 2.5]);
    }

    #[test]
    fn spec_round_trip() {
        let p = pulse_train(1.5, 3).unwrap();
        let json = serde_json::to_string(&p.to_spec()).unwrap();
        let back: Signal<f64> = Signal::from_spec(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, p);
        let bad = SignalSpec {
            dim: 2,
            horizon: 1.0,
            pieces: vec![PieceSpec { t: 0.0, v: vec![1.0] }],
        };
        assert!(Signal::<f64>::from_spec(&bad).is_err());
    }

    #[test]
    fn sampled_rows_include_breakpoints() {
        let s = Signal::scalar(&[(0.0, 1.0), (0.25, 2.0)], 1.0).unwrap();
        let rows = s.sampled(0.4);
        let ts: Vec<f64> = rows.iter().map(|r| r.0).collect();
        assert_eq!(ts, vec![0.0, 0.25, 0.4, 0.8, 1.0]);
        assert_eq!(rows[1].1, vec![2.0]);
        assert_eq!(rows[4].1, vec![0.0]);
    }
}
