//! Experiment configuration schema and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use ipss_core::certificates::DurationRule;
use ipss_core::converse::{ConverseConfig, ConverseProbePlan};
use ipss_core::lyapunov::CandidateTable;
use ipss_core::simulator::ProbeOptions;
use ipss_core::{CertificateSpec, FnSpec, InputFamily, SignalSpec, SystemSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperationKind {
    Simulate,
    Norms,
    CheckLyap,
    SynthGains,
    Transform,
    Falsify,
    Lemma3,
    Converse,
}

impl OperationKind {
    pub fn section(self) -> &'static str {
        match self {
            OperationKind::Simulate => "simulate",
            OperationKind::Norms => "norms",
            OperationKind::CheckLyap => "check_lyap",
            OperationKind::SynthGains => "synth_gains",
            OperationKind::Transform => "transform",
            OperationKind::Falsify => "falsify",
            OperationKind::Lemma3 => "lemma3",
            OperationKind::Converse => "converse",
        }
    }

    fn needs_system(self) -> bool {
        !matches!(self, OperationKind::Norms | OperationKind::Lemma3)
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OperationKind::Simulate => "simulate",
            OperationKind::Norms => "norms",
            OperationKind::CheckLyap => "check-lyap",
            OperationKind::SynthGains => "synth-gains",
            OperationKind::Transform => "transform",
            OperationKind::Falsify => "falsify",
            OperationKind::Lemma3 => "lemma3",
            OperationKind::Converse => "converse",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub operation: OperationKind,
    #[serde(default)]
    pub system: Option<SystemSpec>,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub simulate: Option<SimulateOp>,
    #[serde(default)]
    pub norms: Option<NormsOp>,
    #[serde(default)]
    pub check_lyap: Option<CheckLyapOp>,
    #[serde(default)]
    pub synth_gains: Option<SynthGainsOp>,
    #[serde(default)]
    pub transform: Option<TransformOp>,
    #[serde(default)]
    pub falsify: Option<FalsifyOp>,
    #[serde(default)]
    pub lemma3: Option<Lemma3Op>,
    #[serde(default)]
    pub converse: Option<ConverseOp>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Artifact directory, relative to the working directory.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// Input signal description.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    Zero { dim: usize },
    Constant { value: Vec<f64>, horizon: f64 },
    /// Heights `k²` on `[kτ, kτ + 1/k)`.
    PulseTrain { tau: f64, count: usize },
    Signal { signal: SignalSpec },
    /// Piecewise constant with uniform values in `[-amplitude, amplitude]`, drawn from the run seed.
    Random {
        dim: usize,
        pieces: usize,
        piece_len: f64,
        amplitude: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateOp {
    #[serde(default)]
    pub t0: f64,
    pub xi: Vec<f64>,
    pub input: InputSpec,
    pub t_end: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Checked along the trajectory when present.
    #[serde(default)]
    pub certificate: Option<CertificateSpec>,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    pub rho: FnSpec,
    #[serde(default)]
    pub window: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BruteForceSpec {
    /// Spacing of the dense grid of window starts.
    pub step: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormsOp {
    pub input: InputSpec,
    pub measures: Vec<MeasureSpec>,
    #[serde(default)]
    pub brute_force: Option<BruteForceSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CandidateSpec {
    /// `V = |x|`.
    Norm,
    /// `V = c·|x|^p` with `α₁ = α₂ = c·s^p`.
    Power { c: f64, p: f64 },
    Table {
        table: CandidateTable,
        alpha1: FnSpec,
        alpha2: FnSpec,
    },
    /// A candidate file exported by the converse operation, relative to the config file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateFile {
    pub table: CandidateTable,
    pub alpha1: FnSpec,
    pub alpha2: FnSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum FormSpec {
    Dissipation { alpha4: FnSpec, chi4: FnSpec },
    Implication { alpha3: FnSpec, chi3: FnSpec },
    Iiss { alpha5: FnSpec, chi5: FnSpec },
}

/// Sampling plan; its seed is the run seed.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub times: Vec<f64>,
    pub radii: Vec<f64>,
    #[serde(default = "default_directions")]
    pub directions: usize,
    pub input_radii: Vec<f64>,
    #[serde(default = "default_directions")]
    pub input_directions: usize,
    #[serde(default = "default_h0")]
    pub h0: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default)]
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckLyapOp {
    pub candidate: CandidateSpec,
    pub form: FormSpec,
    pub plan: PlanSpec,
    /// For the dissipation form, also check the implied implication form.
    #[serde(default)]
    pub check_implied: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KappaSpec {
    #[serde(default = "default_q_min")]
    pub q_min: f64,
    #[serde(default = "default_q_max")]
    pub q_max: f64,
    #[serde(default = "default_quadrature_tol")]
    pub quadrature_tol: f64,
}

impl Default for KappaSpec {
    fn default() -> Self {
        Self {
            q_min: default_q_min(),
            q_max: default_q_max(),
            quadrature_tol: default_quadrature_tol(),
        }
    }
}

/// Seeded random initial states and piecewise-constant inputs for envelope checks.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeSuite {
    pub count: usize,
    pub xi_range: [f64; 2],
    pub amplitude: f64,
    pub pieces: [usize; 2],
    pub piece_len: [f64; 2],
    /// Simulated time after the input horizon.
    #[serde(default = "default_tail")]
    pub tail: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_envelope_tolerance")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGainsOp {
    pub alpha1: FnSpec,
    pub alpha2: FnSpec,
    pub alpha4: FnSpec,
    pub chi4: FnSpec,
    pub window: f64,
    #[serde(default)]
    pub kappa: KappaSpec,
    /// Grid on which the synthesized gains are tabulated.
    #[serde(default = "default_export_grid")]
    pub export_grid: Vec<f64>,
    #[serde(default = "default_export_times")]
    pub export_times: Vec<f64>,
    #[serde(default)]
    pub envelopes: Option<EnvelopeSuite>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransformSpec {
    ExpIissToIpss {
        #[serde(rename = "K")]
        k: f64,
        lambda: f64,
        gamma_iiss: FnSpec,
        rho: FnSpec,
        window: f64,
    },
    IpssToIssIiss { certificate: CertificateSpec },
    /// Identity: reloads a stored certificate, re-exports it and runs the checks.
    Check { certificate: CertificateSpec },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformOp {
    pub transform: TransformSpec,
    #[serde(default = "default_export_grid")]
    pub export_grid: Vec<f64>,
    #[serde(default = "default_export_times")]
    pub export_times: Vec<f64>,
    /// Checked on every certificate produced.
    #[serde(default)]
    pub envelopes: Option<EnvelopeSuite>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FalsifyOp {
    pub certificate: CertificateSpec,
    pub family: InputFamily,
    pub budget: usize,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lemma3Op {
    pub cases: usize,
    #[serde(rename = "K_range")]
    pub k_range: [f64; 2],
    pub lambda_range: [f64; 2],
    /// `η(s) = c·s^p`.
    pub eta_c_range: [f64; 2],
    pub eta_p_range: [f64; 2],
    /// `T` is the first grid multiple above `ln K/λ` plus up to this many grid steps.
    pub window_extra_steps: usize,
    pub h_pieces: [usize; 2],
    pub h_amplitude: f64,
    pub g0_range: [f64; 2],
    #[serde(default = "default_oracle_step")]
    pub grid_step: f64,
    #[serde(default = "default_oracle_horizon")]
    pub horizon: f64,
    #[serde(default = "default_min_slack")]
    pub min_slack: f64,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExpBound {
    #[serde(rename = "K")]
    pub k: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WkProbe {
    #[serde(default)]
    pub t0: f64,
    pub xi: Vec<f64>,
    pub k: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzProbeSpec {
    pub radius: f64,
    pub horizon: f64,
    pub samples: usize,
    #[serde(default)]
    pub options: Option<ProbeOptions>,
    /// Violation when the state ratio exceeds this.
    #[serde(default)]
    pub max_state_ratio: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateExport {
    /// Input system closed with `u = ν·φ(|x|)`.
    pub system: SystemSpec,
    pub phi: FnSpec,
    pub urgas: ExpBound,
    pub ts: Vec<f64>,
    pub xs: Vec<f64>,
    /// Abscissae on which `α₁` is tabulated.
    pub alpha_grid: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConverseOp {
    /// Declared uniform bound `β(s, t) = K·s·e^{−λt}` of the disturbed system.
    pub urgas: ExpBound,
    #[serde(default)]
    pub config: ConverseConfig,
    #[serde(default)]
    pub plan: ConverseProbePlan,
    #[serde(default)]
    pub wk_probes: Vec<WkProbe>,
    #[serde(default)]
    pub lipschitz_probe: Option<LipschitzProbeSpec>,
    #[serde(default)]
    pub export_candidate: Option<CandidateExport>,
}

fn default_step() -> f64 {
    1e-2
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
fn default_q_min() -> f64 {
    1e-3
}
fn default_q_max() -> f64 {
    1e3
}
fn default_quadrature_tol() -> f64 {
    1e-10
}
fn default_tail() -> f64 {
    3.0
}
fn default_envelope_tolerance() -> f64 {
    1e-6
}
fn default_export_grid() -> Vec<f64> {
    vec![0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0]
}
fn default_export_times() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 5.0, 10.0]
}
fn default_oracle_step() -> f64 {
    0.01
}
fn default_oracle_horizon() -> f64 {
    20.0
}
fn default_min_slack() -> f64 {
    -1e-6
}

/// Schema problem at a JSON path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    pub source: String,
    pub issues: Vec<SchemaIssue>,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "schema error in {}:", self.source)?;
        for issue in &self.issues {
            writeln!(f, "  {issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for SchemaError {}

/// A parsed and validated config together with its file location.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

pub fn parse(text: &str, source: &str) -> Result<ExperimentConfig, SchemaError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        SchemaError {
            source: source.to_string(),
            issues: vec![SchemaIssue {
                path: if path == "." { "$".into() } else { format!("$.{path}") },
                message: e.into_inner().to_string(),
            }],
        }
    })?;
    let issues = check(&config);
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(SchemaError {
            source: source.to_string(),
            issues,
        })
    }
}

pub fn load(path: &Path) -> anyhow::Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    let config = parse(&text, &path.display().to_string())?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { config, base_dir })
}

struct Checker {
    issues: Vec<SchemaIssue>,
}

impl Checker {
    fn fail(&mut self, path: &str, message: impl Into<String>) {
        self.issues.push(SchemaIssue {
            path: format!("$.{path}"),
            message: message.into(),
        });
    }

    fn positive(&mut self, path: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.fail(path, format!("must be positive and finite (got {v})"));
        }
    }

    fn range(&mut self, path: &str, r: [f64; 2]) {
        if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
            self.fail(path, format!("must be an ordered finite pair (got [{}, {}])", r[0], r[1]));
        }
    }

    fn count_range(&mut self, path: &str, r: [usize; 2]) {
        if r[0] == 0 || r[0] > r[1] {
            self.fail(path, format!("must be an ordered pair of positive counts (got [{}, {}])", r[0], r[1]));
        }
    }

    fn input(&mut self, path: &str, input: &InputSpec) {
        match input {
            InputSpec::Zero { dim } | InputSpec::Random { dim, .. } if *dim == 0 => self.fail(&format!("{path}.dim"), "must be at least 1"),
            InputSpec::Constant { value, horizon } => {
                if value.is_empty() {
                    self.fail(&format!("{path}.value"), "must be nonempty");
                }
                self.positive(&format!("{path}.horizon"), *horizon);
            }
            InputSpec::PulseTrain { tau, count } => {
                self.positive(&format!("{path}.tau"), *tau);
                if *count == 0 {
                    self.fail(&format!("{path}.count"), "must be at least 1");
                }
            }
            InputSpec::Random {
                pieces, piece_len, amplitude, ..
            } => {
                if *pieces == 0 {
                    self.fail(&format!("{path}.pieces"), "must be at least 1");
                }
                self.positive(&format!("{path}.piece_len"), *piece_len);
                if !(*amplitude >= 0.0) {
                    self.fail(&format!("{path}.amplitude"), "must be nonnegative");
                }
            }
            _ => {}
        }
    }

    fn suite(&mut self, path: &str, s: &EnvelopeSuite) {
        if s.count == 0 {
            self.fail(&format!("{path}.count"), "must be at least 1");
        }
        self.range(&format!("{path}.xi_range"), s.xi_range);
        self.count_range(&format!("{path}.pieces"), s.pieces);
        self.range(&format!("{path}.piece_len"), s.piece_len);
        if !(s.piece_len[0] > 0.0) {
            self.fail(&format!("{path}.piece_len"), "lengths must be positive");
        }
        if !(s.amplitude >= 0.0) {
            self.fail(&format!("{path}.amplitude"), "must be nonnegative");
        }
        self.positive(&format!("{path}.step"), s.step);
        if !(s.tail >= 0.0) {
            self.fail(&format!("{path}.tail"), "must be nonnegative");
        }
    }
}

/// Selector-specific checks that the type system does not express.
pub fn check(cfg: &ExperimentConfig) -> Vec<SchemaIssue> {
    let mut c = Checker { issues: Vec::new() };
    if cfg.name.is_empty() || cfg.name.contains(['/', '\\']) {
        c.fail("name", "must be a nonempty file-name-safe string");
    }
    let op = cfg.operation;
    if op.needs_system() && cfg.system.is_none() {
        c.fail("system", format!("required for operation {op}"));
    }
    let sections = [
        (OperationKind::Simulate, cfg.simulate.is_some()),
        (OperationKind::Norms, cfg.norms.is_some()),
        (OperationKind::CheckLyap, cfg.check_lyap.is_some()),
        (OperationKind::SynthGains, cfg.synth_gains.is_some()),
        (OperationKind::Transform, cfg.transform.is_some()),
        (OperationKind::Falsify, cfg.falsify.is_some()),
        (OperationKind::Lemma3, cfg.lemma3.is_some()),
        (OperationKind::Converse, cfg.converse.is_some()),
    ];
    for (kind, present) in sections {
        if kind == op && !present {
            c.fail(kind.section(), format!("required for operation {op}"));
        } else if kind != op && present {
            c.fail(kind.section(), format!("not used by operation {op}"));
        }
    }
    if let Some(s) = &cfg.simulate {
        c.input("simulate.input", &s.input);
        c.positive("simulate.step", s.step);
        if !(s.t_end > s.t0) {
            c.fail("simulate.t_end", format!("must exceed t0 = {}", s.t0));
        }
        if s.xi.is_empty() {
            c.fail("simulate.xi", "must be nonempty");
        }
    }
    if let Some(n) = &cfg.norms {
        c.input("norms.input", &n.input);
        if n.measures.is_empty() {
            c.fail("norms.measures", "must be nonempty");
        }
        for (i, m) in n.measures.iter().enumerate() {
            if let Some(w) = m.window {
                c.positive(&format!("norms.measures[{i}].window"), w);
            }
        }
        if let Some(b) = &n.brute_force {
            c.positive("norms.brute_force.step", b.step);
            c.positive("norms.brute_force.tolerance", b.tolerance);
        }
    }
    if let Some(l) = &cfg.check_lyap {
        if l.check_implied && !matches!(l.form, FormSpec::Dissipation { .. }) {
            c.fail("check_lyap.check_implied", "only meaningful for the dissipation form");
        }
    }
    if let Some(g) = &cfg.synth_gains {
        c.positive("synth_gains.window", g.window);
        if !(g.kappa.q_min > 0.0 && g.kappa.q_min < 1.0 && g.kappa.q_max > 1.0) {
            c.fail("synth_gains.kappa", "need 0 < q_min < 1 < q_max");
        }
        if let Some(s) = &g.envelopes {
            c.suite("synth_gains.envelopes", s);
        }
    }
    if let Some(t) = &cfg.transform {
        if let Some(s) = &t.envelopes {
            c.suite("transform.envelopes", s);
        }
    }
    if let Some(f) = &cfg.falsify {
        if f.budget == 0 {
            c.fail("falsify.budget", "must be at least 1");
        }
        if let InputFamily::LatePulses {
            duration: DurationRule::Fixed(d), ..
        } = f.family
        {
            c.positive("falsify.family.duration", d);
        }
    }
    if let Some(l) = &cfg.lemma3 {
        if l.cases == 0 {
            c.fail("lemma3.cases", "must be at least 1");
        }
        c.range("lemma3.K_range", l.k_range);
        if !(l.k_range[0] >= 1.0) {
            c.fail("lemma3.K_range", "K must be at least 1");
        }
        c.range("lemma3.lambda_range", l.lambda_range);
        if !(l.lambda_range[0] > 0.0) {
            c.fail("lemma3.lambda_range", "λ must be positive");
        }
        c.range("lemma3.eta_c_range", l.eta_c_range);
        c.range("lemma3.eta_p_range", l.eta_p_range);
        if !(l.eta_c_range[0] > 0.0 && l.eta_p_range[0] > 0.0) {
            c.fail("lemma3", "η coefficients and exponents must be positive");
        }
        c.count_range("lemma3.h_pieces", l.h_pieces);
        c.range("lemma3.g0_range", l.g0_range);
        c.positive("lemma3.grid_step", l.grid_step);
        c.positive("lemma3.horizon", l.horizon);
    }
    if let Some(v) = &cfg.converse {
        c.positive("converse.urgas.K", v.urgas.k);
        c.positive("converse.urgas.lambda", v.urgas.lambda);
        if let Err(e) = v.config.validate() {
            c.fail("converse.config", e.to_string());
        }
        for (i, p) in v.wk_probes.iter().enumerate() {
            if p.k == 0 {
                c.fail(&format!("converse.wk_probes[{i}].k"), "must be at least 1");
            }
        }
        if let Some(p) = &v.lipschitz_probe {
            c.positive("converse.lipschitz_probe.radius", p.radius);
            c.positive("converse.lipschitz_probe.horizon", p.horizon);
            if p.samples == 0 {
                c.fail("converse.lipschitz_probe.samples", "must be at least 1");
            }
        }
        if let Some(e) = &v.export_candidate {
            c.positive("converse.export_candidate.urgas.K", e.urgas.k);
            c.positive("converse.export_candidate.urgas.lambda", e.urgas.lambda);
            if e.ts.len() < 2 || e.xs.len() < 2 || e.alpha_grid.len() < 2 {
                c.fail("converse.export_candidate", "ts, xs and alpha_grid need at least two points each");
            }
        }
    }
    c.issues
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "demo",
        "seed": 3,
        "operation": "lemma3",
        "lemma3": {
            "cases": 2, "K_range": [1, 2], "lambda_range": [0.5, 1],
            "eta_c_range": [1, 1], "eta_p_range": [1, 1], "window_extra_steps": 10,
            "h_pieces": [2, 4], "h_amplitude": 1, "g0_range": [0, 1]
        }
    }"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = parse(MINIMAL, "inline").unwrap();
        assert_eq!(cfg.operation, OperationKind::Lemma3);
        assert_eq!(cfg.lemma3.unwrap().grid_step, 0.01);
    }

    #[test]
    fn missing_seed_is_reported() {
        let text = MINIMAL.replace("\"seed\": 3,", "");
        let err = parse(&text, "inline").unwrap_err();
        assert!(err.issues[0].message.contains("missing field `seed`"), "{err}");
    }

    #[test]
    fn nested_type_error_has_path() {
        let text = MINIMAL.replace("\"cases\": 2", "\"cases\": \"two\"");
        let err = parse(&text, "inline").unwrap_err();
        assert_eq!(err.issues[0].path, "$.lemma3.cases");
    }

    #[test]
    fn semantic_issues_are_collected() {
        let text = MINIMAL.replace("\"K_range\": [1, 2]", "\"K_range\": [3, 2]").replace("\"cases\": 2", "\"cases\": 0");
        let err = parse(&text, "inline").unwrap_err();
        let paths: Vec<&str> = err.issues.iter().map(|i| i.path.as_str()).collect();
        assert!(paths.contains(&"$.lemma3.cases") && paths.contains(&"$.lemma3.K_range"), "{paths:?}");
    }

    #[test]
    fn section_must_match_operation() {
        let text = MINIMAL.replace("\"operation\": \"lemma3\"", "\"operation\": \"falsify\"");
        let err = parse(&text, "inline").unwrap_err();
        let paths: Vec<&str> = err.issues.iter().map(|i| i.path.as_str()).collect();
        assert_eq!(paths, vec!["$.system", "$.falsify", "$.lemma3"]);
    }
}
