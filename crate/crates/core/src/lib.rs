//! Numerical toolkit for input-power-to-state stability: comparison
//! functions, piecewise-constant inputs, a fixed-step integrator, Lyapunov
//! checks, gain synthesis, certificate transformers and a converse
//! Lyapunov construction.
//!
//! Every routine is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the common `f64` case.

pub mod certificates;
pub mod comparison;
pub mod converse;
pub mod lyapunov;
pub mod scalar;
pub mod signals;
pub mod simulator;

pub use certificates::{
    check_envelope, exp_iiss_to_ipss, exponential_window_bound, falsify, ipss_to_iss_iiss, lemma3_oracle, CertError, CertKind,
    Certificate, CertificateSpec, EnvelopeReport, FalsificationReport, InputFamily, OracleReport,
};
pub use comparison::{
    compose, invert, make_power_fn, sontag_factorize_exponential, verify_class, ClassReport, ClassTag,
    ComparisonError, FnSpec, KLBound, KlSpec, MonotoneFn, MonotoneTable,
};
pub use converse::{
    check_converse_properties, converse_v, iss_to_dissipation_candidate, regularized_rho, wk_estimate, ConverseConfig,
    ConverseError, ConverseProbePlan, ConverseReport, DisturbedSystem, MrkTable,
};
pub use lyapunov::{
    build_kappa, check_dissipation_form, check_iiss_form, check_implication_form, dini_derivative,
    ipss_gains_from_dissipation, DissipationSpec, IissSpec, ImplicationSpec, IpssGains, KappaBundle, LyapunovCandidate,
    LyapunovError, SamplingPlan, ViolationReport,
};
pub use scalar::Scalar;
pub use signals::{avg_power_norm, concat, pulse_train, rho_energy, sup_norm, NormValue, Signal, SignalError, SignalSpec};

pub use simulator::{
    counterexample_system, linear_test_system, lipschitz_probe, perturbed_decay_system, simulate, SimError, SystemDef,
    SystemSpec, Trajectory,
};

pub type MonotoneFn64 = MonotoneFn<f64>;
pub type MonotoneFn32 = MonotoneFn<f32>;
pub type KLBound64 = KLBound<f64>;
pub type Signal64 = Signal<f64>;
pub type Signal32 = Signal<f32>;
pub type SystemDef64 = SystemDef<f64>;
pub type Trajectory64 = Trajectory<f64>;
pub type Certificate64 = Certificate<f64>;
