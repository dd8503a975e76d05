//! Comparison functions: class P / K / K∞ scalar maps and KL bounds.
//!
//! A [`MonotoneFn`] is an immutable, cheaply clonable handle. Power laws and
//! tables keep a closed form (and a JSON spec); everything else is an opaque
//! closure. Class membership is only ever checked on finite grids.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Maximum number of bracket doublings in [`invert`].
pub const MAX_DOUBLINGS: usize = 200;

const MAX_BISECTIONS: usize = 4000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComparisonError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("value {y} is outside the reachable range of a bounded class-K function (f({x}) = {fx})")]
    Range { y: f64, x: f64, fx: f64 },
    #[error("no bracket for value {y} found within {MAX_DOUBLINGS} doublings")]
    Divergence { y: f64 },
    #[error("inversion requires a class K or K∞ function, got {0:?}")]
    Class(ClassTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassTag {
    P,
    K,
    Kinf,
}

impl ClassTag {
    fn meet(self, other: ClassTag) -> ClassTag {
        use ClassTag::*;
        match (self, other) {
            (Kinf, Kinf) => Kinf,
            (P, _) | (_, P) => P,
            _ => K,
        }
    }
}

/// Serializable description of a monotone function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FnSpec {
    Power { c: f64, p: f64 },
    Table { xs: Vec<f64>, ys: Vec<f64> },
}

type ScalarMap<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneTable<S> {
    xs: Vec<S>,
    ys: Vec<S>,
}

impl<S: Scalar> MonotoneTable<S> {
    pub fn new(xs: Vec<S>, ys: Vec<S>) -> Result<Self, ComparisonError> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(ComparisonError::Parameter(format!(
                "table needs at least two points and equal lengths (got {} xs, {} ys)",
                xs.len(),
                ys.len()
            )));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(ComparisonError::Parameter("table entries must be finite".into()));
        }
        if xs[0] < S::zero() {
            return Err(ComparisonError::Parameter("table abscissae must be nonnegative".into()));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ComparisonError::Parameter("table abscissae must be strictly increasing".into()));
        }
        if ys.windows(2).any(|w| w[1] < w[0]) {
            return Err(ComparisonError::Parameter("table ordinates must be nondecreasing".into()));
        }
        Ok(Self { xs, ys })
    }

    pub fn xs(&self) -> &[S] {
        &self.xs
    }

    pub fn ys(&self) -> &[S] {
        &self.ys
    }

    fn segment(&self, x: S) -> usize {
        let n = self.xs.len();
        let i = self.xs.partition_point(|&v| v <= x);
        i.clamp(1, n - 1) - 1
    }

    /// Piecewise-linear interpolation; end segments are extended linearly,
    /// clamped at zero on the left.
    pub fn eval(&self, x: S) -> S {
        let i = self.segment(x);
        let (x0, x1, y0, y1) = (self.xs[i], self.xs[i + 1], self.ys[i], self.ys[i + 1]);
        let y = y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        y.max(S::zero())
    }

    pub fn slope(&self, x: S) -> S {
        let i = self.segment(x);
        (self.ys[i + 1] - self.ys[i]) / (self.xs[i + 1] - self.xs[i])
    }

    fn strictly_increasing(&self) -> bool {
        self.ys.windows(2).all(|w| w[1] > w[0])
    }
}

#[derive(Clone)]
enum Repr<S> {
    Power { c: S, p: S },
    Table(Arc<MonotoneTable<S>>),
    Closure {
        eval: ScalarMap<S>,
        derivative: Option<ScalarMap<S>>,
    },
}

/// Scalar comparison function on `[0, ∞)`.
#[derive(Clone)]
pub struct MonotoneFn<S> {
    repr: Repr<S>,
    class: ClassTag,
    domain_hint: S,
}

impl<S: fmt::Debug> fmt::Debug for MonotoneFn<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            Repr::Power { c, p } => write!(f, "MonotoneFn::Power({c:?}·s^{p:?}, {:?})", self.class),
            Repr::Table(t) => write!(f, "MonotoneFn::Table({} pts, {:?})", t.xs.len(), self.class),
            Repr::Closure { .. } => write!(f, "MonotoneFn::Closure({:?})", self.class),
        }
    }
}

/// `c·s^p`, class K∞ with analytic derivative.
pub fn make_power_fn<S: Scalar>(c: S, p: S) -> Result<MonotoneFn<S>, ComparisonError> {
    if !(c > S::zero() && c.is_finite()) || !(p > S::zero() && p.is_finite()) {
        return Err(ComparisonError::Parameter(format!(
            "power function needs c > 0 and p > 0 (got c = {c}, p = {p})"
        )));
    }
    Ok(MonotoneFn {
        repr: Repr::Power { c, p },
        class: ClassTag::Kinf,
        domain_hint: S::lit(1e3),
    })
}

impl<S: Scalar> MonotoneFn<S> {
    pub fn identity() -> Self {
        Self::linear(S::one())
    }

    /// `s ↦ k·s` for `k > 0`.
    ///
    /// Panics if `k` is not positive and finite.
    pub fn linear(k: S) -> Self {
        make_power_fn(k, S::one()).expect("linear gain must be positive and finite")
    }

    pub fn from_closure<F>(class: ClassTag, eval: F) -> Self
    where
        F: Fn(S) -> S + Send + Sync + 'static,
    {
        Self {
            repr: Repr::Closure {
                eval: Arc::new(eval),
                derivative: None,
            },
            class,
            domain_hint: S::lit(1e3),
        }
    }

    pub fn from_closure_with_derivative<F, D>(class: ClassTag, eval: F, derivative: D) -> Self
    where
        F: Fn(S) -> S + Send + Sync + 'static,
        D: Fn(S) -> S + Send + Sync + 'static,
    {
        Self {
            repr: Repr::Closure {
                eval: Arc::new(eval),
                derivative: Some(Arc::new(derivative)),
            },
            class,
            domain_hint: S::lit(1e3),
        }
    }

    pub fn from_table(table: MonotoneTable<S>, class: ClassTag) -> Self {
        let hint = *table.xs.last().expect("table is nonempty");
        Self {
            repr: Repr::Table(Arc::new(table)),
            class,
            domain_hint: hint,
        }
    }

    pub fn from_spec(spec: &FnSpec) -> Result<Self, ComparisonError> {
        match spec {
            FnSpec::Power { c, p } => make_power_fn(S::lit(*c), S::lit(*p)),
            FnSpec::Table { xs, ys } => {
                let table = MonotoneTable::new(
                    xs.iter().map(|&x| S::lit(x)).collect(),
                    ys.iter().map(|&y| S::lit(y)).collect(),
                )?;
                let class = if table.strictly_increasing() && table.xs[0] == S::zero() && table.ys[0] == S::zero() {
                    ClassTag::Kinf
                } else {
                    ClassTag::P
                };
                Ok(Self::from_table(table, class))
            }
        }
    }

    /// JSON spec when the function has a closed form (power or table).
    pub fn to_spec(&self) -> Option<FnSpec> {
        match &self.repr {
            Repr::Power { c, p } => Some(FnSpec::Power {
                c: c.as_f64(),
                p: p.as_f64(),
            }),
            Repr::Table(t) => Some(FnSpec::Table {
                xs: t.xs.iter().map(|x| x.as_f64()).collect(),
                ys: t.ys.iter().map(|y| y.as_f64()).collect(),
            }),
            Repr::Closure { .. } => None,
        }
    }

    /// Spec of the function itself, or of its tabulation on `grid` when it is opaque.
    pub fn to_spec_or_table(&self, grid: &[S]) -> Result<FnSpec, ComparisonError> {
        match self.to_spec() {
            Some(spec) => Ok(spec),
            None => self
                .tabulate(grid)?
                .to_spec()
                .ok_or_else(|| ComparisonError::Parameter("tabulation failed".into())),
        }
    }

    pub fn tabulate(&self, grid: &[S]) -> Result<MonotoneFn<S>, ComparisonError> {
        let ys = grid.iter().map(|&x| self.eval(x)).collect();
        let table = MonotoneTable::new(grid.to_vec(), ys)?;
        Ok(Self::from_table(table, self.class).with_domain_hint(self.domain_hint))
    }

    pub fn with_domain_hint(mut self, hint: S) -> Self {
        self.domain_hint = hint;
        self
    }

    pub fn with_class(mut self, class: ClassTag) -> Self {
        self.class = class;
        self
    }

    pub fn class(&self) -> ClassTag {
        self.class
    }

    pub fn domain_hint(&self) -> S {
        self.domain_hint
    }

    pub fn power_params(&self) -> Option<(S, S)> {
        match self.repr {
            Repr::Power { c, p } => Some((c, p)),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(&self, s: S) -> S {
        match &self.repr {
            Repr::Power { c, p } => {
                if s <= S::zero() {
                    S::zero()
                } else if *p == S::one() {
                    *c * s
                } else {
                    *c * s.powf(*p)
                }
            }
            Repr::Table(t) => t.eval(s),
            Repr::Closure { eval, .. } => eval(s),
        }
    }

    pub fn has_derivative(&self) -> bool {
        !matches!(&self.repr, Repr::Closure { derivative: None, .. })
    }

    /// Analytic derivative where available (one-sided slope for tables).
    pub fn derivative(&self, s: S) -> Option<S> {
        match &self.repr {
            Repr::Power { c, p } => Some(if *p == S::one() {
                *c
            } else {
                *c * *p * s.powf(*p - S::one())
            }),
            Repr::Table(t) => Some(t.slope(s)),
            Repr::Closure { derivative, .. } => derivative.as_ref().map(|d| d(s)),
        }
    }

    /// `s ↦ k·f(s)`.
    pub fn scaled(&self, k: S) -> MonotoneFn<S> {
        compose(&MonotoneFn::linear(k), self)
    }

    /// `s ↦ f(k·s)`.
    pub fn rescaled_argument(&self, k: S) -> MonotoneFn<S> {
        compose(self, &MonotoneFn::linear(k))
    }

    /// Inverse function. Closed form for power laws and strictly increasing
    /// tables; otherwise a bisection closure that yields NaN where [`invert`] fails.
    pub fn inverse(&self) -> MonotoneFn<S> {
        match &self.repr {
            Repr::Power { c, p } => {
                let ip = S::one() / *p;
                make_power_fn(c.powf(-ip), ip).expect("inverse of a valid power law")
            }
            Repr::Table(t) if t.strictly_increasing() => {
                let table = MonotoneTable::new(t.ys.clone(), t.xs.clone()).expect("swapped strictly increasing table");
                MonotoneFn::from_table(table, self.class)
            }
            _ => {
                let f = self.clone();
                let tol = S::epsilon() * S::lit(16.0);
                MonotoneFn::from_closure(self.class, move |y| invert(&f, y, tol).unwrap_or_else(|_| S::nan()))
            }
        }
    }
}

/// `outer ∘ inner`. The result is K∞ iff both are K∞.
pub fn compose<S: Scalar>(outer: &MonotoneFn<S>, inner: &MonotoneFn<S>) -> MonotoneFn<S> {
    let class = outer.class.meet(inner.class);
    let hint = inner.domain_hint;
    if let (Repr::Power { c: c1, p: p1 }, Repr::Power { c: c2, p: p2 }) = (&outer.repr, &inner.repr) {
        return MonotoneFn {
            repr: Repr::Power {
                c: *c1 * c2.powf(*p1),
                p: *p1 * *p2,
            },
            class,
            domain_hint: hint,
        };
    }
    let (o, i) = (outer.clone(), inner.clone());
    let eval = move |s: S| o.eval(i.eval(s));
    let composed = if outer.has_derivative() && inner.has_derivative() {
        let (o, i) = (outer.clone(), inner.clone());
        MonotoneFn::from_closure_with_derivative(class, eval, move |s: S| {
            let inner_val = i.eval(s);
            o.derivative(inner_val).unwrap_or_else(S::nan) * i.derivative(s).unwrap_or_else(S::nan)
        })
    } else {
        MonotoneFn::from_closure(class, eval)
    };
    composed.with_domain_hint(hint)
}

/// Solves `f(x) = y` by doubling the bracket `[0, 1]` and bisecting.
///
/// The returned `x` satisfies `|f(x) − y| ≤ tol·y`, which implies
/// `|f(x) − y| ≤ tol·max(1, y)`; bisection also stops once the bracket can
/// no longer be split in the working precision.
pub fn invert<S: Scalar>(f: &MonotoneFn<S>, y: S, tol: S) -> Result<S, ComparisonError> {
    if f.class == ClassTag::P {
        return Err(ComparisonError::Class(f.class));
    }
    if !(tol > S::zero()) {
        return Err(ComparisonError::Parameter(format!("tolerance must be positive (got {tol})")));
    }
    if !(y >= S::zero()) || !y.is_finite() {
        return Err(ComparisonError::Parameter(format!(
            "inversion target must be finite and nonnegative (got {y})"
        )));
    }
    if y == S::zero() {
        return Ok(S::zero());
    }
    let unreachable = |x: S, fx: S| match f.class {
        ClassTag::K => ComparisonError::Range {
            y: y.as_f64(),
            x: x.as_f64(),
            fx: fx.as_f64(),
        },
        _ => ComparisonError::Divergence { y: y.as_f64() },
    };
    let two = S::lit(2.0);
    let (mut lo, mut hi) = (S::zero(), S::one());
    let mut f_hi = f.eval(hi);
    let mut doublings = 0;
    while !(f_hi >= y) {
        if f_hi.is_nan() || !hi.is_finite() || doublings >= MAX_DOUBLINGS {
            return Err(unreachable(hi, f_hi));
        }
        lo = hi;
        hi = hi * two;
        f_hi = f.eval(hi);
        doublings += 1;
    }
    let target = tol * y;
    if (f_hi - y).abs() <= target {
        return Ok(hi);
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = lo + (hi - lo) / two;
        if mid <= lo || mid >= hi {
            return Ok(mid);
        }
        let fm = f.eval(mid);
        if fm.is_nan() {
            return Err(ComparisonError::Divergence { y: y.as_f64() });
        }
        if (fm - y).abs() <= target {
            return Ok(mid);
        }
        if fm < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo + (hi - lo) / two)
}

/// Outcome of sampled class checks on a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub zero_at_zero: bool,
    pub nondecreasing_on_grid: bool,
    pub strictly_increasing_on_grid: bool,
    pub unbounded_heuristic: bool,
    /// First consecutive grid pair that breaks monotonicity.
    pub first_violation: Option<(f64, f64)>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_len: usize,
}

impl ClassReport {
    pub fn is_k(&self) -> bool {
        self.zero_at_zero && self.strictly_increasing_on_grid
    }

    pub fn is_kinf(&self) -> bool {
        self.is_k() && self.unbounded_heuristic
    }
}

pub fn verify_class<S: Scalar>(f: &MonotoneFn<S>, grid: &[S]) -> Result<ClassReport, ComparisonError> {
    if grid.len() < 2 {
        return Err(ComparisonError::Parameter("class check needs a grid with at least two points".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(ComparisonError::Parameter("class check grid must be sorted".into()));
    }
    let spacing = S::lit(1e-9);
    let zero_at_zero = f.eval(S::zero()).abs() <= S::lit(1e-12);
    let mut nondecreasing = true;
    let mut strictly = true;
    let mut first_violation = None;
    let mut prev = f.eval(grid[0]);
    for w in grid.windows(2) {
        let next = f.eval(w[1]);
        let bad_order = next < prev || next.is_nan() || prev.is_nan();
        let bad_strict = w[1] - w[0] >= spacing && !(next > prev);
        if bad_order {
            nondecreasing = false;
        }
        if bad_order || bad_strict {
            strictly = false;
            if first_violation.is_none() {
                first_violation = Some((w[0].as_f64(), w[1].as_f64()));
            }
        }
        prev = next;
    }
    let top = *grid.last().expect("grid has at least two points");
    let unbounded_heuristic = f.eval(top) > S::lit(1e6) * f.eval(S::one());
    Ok(ClassReport {
        zero_at_zero,
        nondecreasing_on_grid: nondecreasing,
        strictly_increasing_on_grid: strictly,
        unbounded_heuristic,
        first_violation,
        grid_min: grid[0].as_f64(),
        grid_max: top.as_f64(),
        grid_len: grid.len(),
    })
}

type KlMap<S> = Arc<dyn Fn(S, S) -> S + Send + Sync>;

/// Class KL bound β(s, t).
#[derive(Clone)]
pub enum KLBound<S> {
    /// `K·s·e^{−λt}`.
    Exponential { k: S, lambda: S },
    General(KlMap<S>),
}

impl<S: fmt::Debug> fmt::Debug for KLBound<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KLBound::Exponential { k, lambda } => write!(f, "KLBound::Exponential(K = {k:?}, λ = {lambda:?})"),
            KLBound::General(_) => write!(f, "KLBound::General"),
        }
    }
}

/// Serializable KL bound: exponential closed form or a bilinear (s, t) table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KlSpec {
    Exponential {
        #[serde(rename = "K")]
        k: f64,
        lambda: f64,
    },
    Table {
        ss: Vec<f64>,
        ts: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl<S: Scalar> KLBound<S> {
    pub fn exponential(k: S, lambda: S) -> Result<Self, ComparisonError> {
        if !(k >= S::one()) || !(lambda > S::zero()) || !k.is_finite() || !lambda.is_finite() {
            return Err(ComparisonError::Parameter(format!(
                "exponential KL bound needs K ≥ 1 and λ > 0 (got K = {k}, λ = {lambda})"
            )));
        }
        Ok(KLBound::Exponential { k, lambda })
    }

    pub fn general<F>(f: F) -> Self
    where
        F: Fn(S, S) -> S + Send + Sync + 'static,
    {
        KLBound::General(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, s: S, t: S) -> S {
        match self {
            KLBound::Exponential { k, lambda } => *k * s * (-*lambda * t).exp(),
            KLBound::General(f) => f(s, t),
        }
    }

    pub fn from_spec(spec: &KlSpec) -> Result<Self, ComparisonError> {
        match spec {
            KlSpec::Exponential { k, lambda } => KLBound::exponential(S::lit(*k), S::lit(*lambda)),
            KlSpec::Table { ss, ts, values } => {
                let table = KlTable::new(ss, ts, values)?;
                Ok(KLBound::general(move |s, t| table.eval(s, t)))
            }
        }
    }

    /// Closed form spec, or a tabulation on `(ss × ts)` for general bounds.
    pub fn to_spec(&self, ss: &[S], ts: &[S]) -> KlSpec {
        match self {
            KLBound::Exponential { k, lambda } => KlSpec::Exponential {
                k: k.as_f64(),
                lambda: lambda.as_f64(),
            },
            KLBound::General(f) => KlSpec::Table {
                ss: ss.iter().map(|s| s.as_f64()).collect(),
                ts: ts.iter().map(|t| t.as_f64()).collect(),
                values: ss
                    .iter()
                    .map(|&s| ts.iter().map(|&t| f(s, t).as_f64()).collect())
                    .collect(),
            },
        }
    }

    /// Sampled KL checks: class K in `s` per fixed `t`, nonincreasing in `t` per fixed `s`.
    pub fn verify(&self, ss: &[S], ts: &[S]) -> bool {
        let k_ok = ts.iter().all(|&t| {
            let f = {
                let b = self.clone();
                MonotoneFn::from_closure(ClassTag::K, move |s| b.eval(s, t))
            };
            verify_class(&f, ss).map(|r| r.is_k()).unwrap_or(false)
        });
        let l_ok = ss.iter().all(|&s| ts.windows(2).all(|w| self.eval(s, w[1]) <= self.eval(s, w[0])));
        k_ok && l_ok
    }
}

struct KlTable<S> {
    ss: Vec<S>,
    ts: Vec<S>,
    values: Vec<Vec<S>>,
}

impl<S: Scalar> KlTable<S> {
    fn new(ss: &[f64], ts: &[f64], values: &[Vec<f64>]) -> Result<Self, ComparisonError> {
        let sorted = |v: &[f64]| v.len() >= 2 && v.windows(2).all(|w| w[1] > w[0]);
        if !sorted(ss) || !sorted(ts) || values.len() != ss.len() || values.iter().any(|r| r.len() != ts.len()) {
            return Err(ComparisonError::Parameter("malformed KL table".into()));
        }
        Ok(Self {
            ss: ss.iter().map(|&x| S::lit(x)).collect(),
            ts: ts.iter().map(|&x| S::lit(x)).collect(),
            values: values.iter().map(|r| r.iter().map(|&x| S::lit(x)).collect()).collect(),
        })
    }

    fn locate(grid: &[S], x: S) -> (usize, S) {
        let n = grid.len();
        let i = grid.partition_point(|&v| v <= x).clamp(1, n - 1) - 1;
        let w = (x - grid[i]) / (grid[i + 1] - grid[i]);
        (i, w)
    }

    /// Bilinear inside; linear extrapolation in `s`, clamped in `t`.
    fn eval(&self, s: S, t: S) -> S {
        let (i, ws) = Self::locate(&self.ss, s);
        let t_clamped = t.max(self.ts[0]).min(*self.ts.last().expect("nonempty"));
        let (j, wt) = Self::locate(&self.ts, t_clamped);
        let one = S::one();
        let row = |r: usize| self.values[r][j] * (one - wt) + self.values[r][j + 1] * wt;
        let v = row(i) * (one - ws) + row(i + 1) * ws;
        v.max(S::zero())
    }
}

/// Exponential Sontag factorization: θ₁(s) = s^{1/λ}, θ₂(r) = K·r^{λ}, so that
/// θ₂⁻¹(K·s·e^{−λt}) = θ₁(s)·e^{−t}.
pub fn sontag_factorize_exponential<S: Scalar>(
    k: S,
    lambda: S,
) -> Result<(MonotoneFn<S>, MonotoneFn<S>), ComparisonError> {
    if !(k >= S::one()) {
        return Err(ComparisonError::Parameter(format!("exponential KL bound requires K ≥ 1 (got {k})")));
    }
    if !(lambda > S::zero()) {
        return Err(ComparisonError::Parameter(format!("decay rate must be positive (got {lambda})")));
    }
    let theta1 = make_power_fn(S::one(), S::one() / lambda)?;
    let theta2 = make_power_fn(k, lambda)?;
    Ok((theta1, theta2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pw(c: f64, p: f64) -> MonotoneFn<f64> {
        make_power_fn(c, p).unwrap()
    }

    #[test]
    fn power_fn_examples() {
        assert_eq!(pw(1.0, 1.0).eval(3.0), 3.0);
        assert_eq!(pw(1.0, 2.0).eval(2.0), 4.0);
        assert_relative_eq!(pw(2.0, 0.5).eval(9.0), 6.0, epsilon = 1e-15);
        assert_eq!(pw(2.0, 0.5).class(), ClassTag::Kinf);
        assert!(make_power_fn(0.0, 1.0).is_err());
        assert!(make_power_fn(1.0, -1.0).is_err());
    }

    #[test]
    fn power_derivative_matches_central_differences() {
        for f in [pw(1.0, 2.0), pw(2.0, 0.5), pw(0.3, 3.1)] {
            for &s in &[1e-3, 0.1, 1.0, 7.0, 1e3] {
                let h = s * 1e-5;
                let fd = (f.eval(s + h) - f.eval(s - h)) / (2.0 * h);
                let d = f.derivative(s).unwrap();
                assert!(((fd - d) / d).abs() < 1e-4, "s = {s}: {fd} vs {d}");
            }
        }
    }

    #[test]
    fn compose_examples() {
        let id = compose(&pw(1.0, 2.0), &pw(1.0, 0.5));
        for &s in &[0.0, 0.5, 1.0, 3.0, 1e4] {
            assert!((id.eval(s) - s).abs() <= 1e-12 * s.max(1.0));
        }
        assert_eq!(compose(&pw(2.0, 1.0), &pw(3.0, 1.0)).eval(1.0), 6.0);
        assert_eq!(compose(&pw(1.0, 2.0), &pw(2.0, 1.0)).eval(3.0), 36.0);
    }

    #[test]
    fn compose_class_tags() {
        let bounded = MonotoneFn::from_closure(ClassTag::K, |s: f64| s / (1.0 + s));
        assert_eq!(compose(&pw(1.0, 1.0), &bounded).class(), ClassTag::K);
        assert_eq!(compose(&pw(1.0, 1.0), &pw(2.0, 2.0)).class(), ClassTag::Kinf);
        let p = MonotoneFn::from_closure(ClassTag::P, |s: f64| s * (-s).exp());
        assert_eq!(compose(&p, &bounded).class(), ClassTag::P);
    }

    #[test]
    fn invert_examples() {
        let tol = 1e-12;
        assert!((invert(&pw(1.0, 2.0), 4.0, tol).unwrap() - 2.0).abs() < 1e-10);
        assert_eq!(invert(&pw(1.0, 1.0), 7.5, tol).unwrap(), 7.5);
        // 2√x = 6 ⇒ x = 9
        assert!((invert(&pw(2.0, 0.5), 6.0, tol).unwrap() - 9.0).abs() < 1e-9);
        assert_eq!(invert(&pw(3.0, 0.7), 0.0, tol).unwrap(), 0.0);
    }

    #[test]
    fn invert_errors() {
        let bounded = MonotoneFn::from_closure(ClassTag::K, |s: f64| s / (1.0 + s));
        assert!(matches!(invert(&bounded, 2.0, 1e-10), Err(ComparisonError::Range { .. })));
        assert!((invert(&bounded, 0.5, 1e-12).unwrap() - 1.0).abs() < 1e-9);
        let log_growth = MonotoneFn::from_closure(ClassTag::Kinf, |s: f64| (1.0 + s).ln().ln_1p() * 1e-3);
        assert!(matches!(
            invert(&log_growth, 10.0, 1e-10),
            Err(ComparisonError::Divergence { .. })
        ));
        let p = MonotoneFn::from_closure(ClassTag::P, |s: f64| s);
        assert!(matches!(invert(&p, 1.0, 1e-10), Err(ComparisonError::Class(ClassTag::P))));
        assert!(invert(&pw(1.0, 1.0), 1.0, 0.0).is_err());
        assert!(invert(&pw(1.0, 1.0), -1.0, 1e-10).is_err());
    }

    #[test]
    fn verify_class_examples() {
        let grid = [0.0, 1.0, 10.0, 1e7];
        let r = verify_class(&pw(1.0, 1.0), &grid).unwrap();
        assert!(r.zero_at_zero && r.strictly_increasing_on_grid && r.unbounded_heuristic);
        let sat = MonotoneFn::from_closure(ClassTag::K, |s: f64| s / (1.0 + s));
        let r = verify_class(&sat, &grid).unwrap();
        assert!(r.is_k() && !r.unbounded_heuristic);
        let shifted = MonotoneFn::from_closure(ClassTag::P, |s: f64| (s - 1.0).abs());
        let r = verify_class(&shifted, &grid).unwrap();
        assert!(!r.zero_at_zero);
        assert_eq!(r.first_violation, Some((0.0, 1.0)));
        assert!(verify_class(&sat, &[]).is_err());
        assert!(verify_class(&sat, &[1.0]).is_err());
    }

    #[test]
    fn table_interpolates_and_inverts() {
        let f = MonotoneFn::<f64>::from_spec(&FnSpec::Table {
            xs: vec![0.0, 1.0, 2.0],
            ys: vec![0.0, 2.0, 3.0],
        })
        .unwrap();
        assert_eq!(f.class(), ClassTag::Kinf);
        assert_eq!(f.eval(0.5), 1.0);
        assert_eq!(f.eval(3.0), 4.0);
        let g = f.inverse();
        assert_eq!(g.eval(2.5), 1.5);
        assert!(MonotoneTable::new(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(MonotoneTable::new(vec![1.0, 1.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn spec_json_shapes() {
        let json = serde_json::to_string(&FnSpec::Power { c: 2.0, p: 0.5 }).unwrap();
        assert_eq!(json, r#"{"kind":"power","c":2.0,"p":0.5}"#);
        let t: FnSpec = serde_json::from_str(r#"{"kind":"table","xs":[0,1],"ys":[0,3]}"#).unwrap();
        assert_eq!(MonotoneFn::<f64>::from_spec(&t).unwrap().eval(0.5), 1.5);
    }

    #[test]
    fn closure_inverse_uses_bisection() {
        let f = MonotoneFn::from_closure(ClassTag::Kinf, |s: f64| s + s.powi(3));
        let g = f.inverse();
        assert!((f.eval(g.eval(10.0)) - 10.0).abs() < 1e-12);
        assert!(MonotoneFn::from_closure(ClassTag::K, |s: f64| s / (1.0 + s)).inverse().eval(3.0).is_nan());
    }

    #[test]
    fn sontag_examples() {
        let (t1, t2) = sontag_factorize_exponential(1.0, 0.5).unwrap();
        assert_relative_eq!(t1.eval(3.0), 9.0, epsilon = 1e-12);
        assert_relative_eq!(t2.eval(4.0), 2.0, epsilon = 1e-12);
        let lhs = t2.inverse().eval(3.0 * (-0.5f64).exp());
        assert_relative_eq!(lhs, 9.0 * (-1.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(lhs, t1.eval(3.0) * (-1.0f64).exp(), max_relative = 1e-12);

        let (t1, t2) = sontag_factorize_exponential(1.0, 1.0).unwrap();
        assert_eq!((t1.eval(2.5), t2.eval(2.5)), (2.5, 2.5));

        let (t1, t2) = sontag_factorize_exponential(2.0, 1.0).unwrap();
        assert_eq!(t1.eval(1.7), 1.7);
        assert_eq!(t2.eval(1.7), 3.4);
        let s = 1.3;
        let t: f64 = 0.8;
        assert_relative_eq!(t2.inverse().eval(2.0 * s * (-t).exp()), s * (-t).exp(), max_relative = 1e-14);

        assert!(sontag_factorize_exponential(0.5, 1.0).is_err());
        assert!(sontag_factorize_exponential(1.0, 0.0).is_err());
    }

    #[test]
    fn exponential_kl_passes_sampled_checks() {
        let b = KLBound::exponential(2.0, 0.7).unwrap();
        assert!(b.verify(&[0.0, 0.5, 1.0, 5.0], &[0.0, 0.1, 1.0, 10.0]));
        assert_eq!(b.eval(1.0, 0.0), 2.0);
        assert!(KLBound::<f64>::exponential(0.9, 1.0).is_err());
        let grows = KLBound::general(|s: f64, t: f64| s * (1.0 + t));
        assert!(!grows.verify(&[0.0, 1.0], &[0.0, 1.0]));
    }

    #[test]
    fn kl_table_round_trip() {
        let b = KLBound::general(|s: f64, t: f64| s * (-t).exp());
        let spec = b.to_spec(&[0.0, 1.0, 2.0], &[0.0, 1.0]);
        let back = KLBound::<f64>::from_spec(&spec).unwrap();
        assert_relative_eq!(back.eval(2.0, 1.0), 2.0 * (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(back.eval(1.5, 0.0), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn works_in_single_precision() {
        let f = make_power_fn(1.0_f32, 2.0).unwrap();
        let x = invert(&f, 2.0, 1e-6).unwrap();
        assert!((x - 2.0_f32.sqrt()).abs() < 1e-5);
    }
}
