//! Operation dispatch.

use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use ipss_core::certificates::{evaluate_candidate, EnvelopeRow, OracleOptions};
use ipss_core::converse::{wk_estimate, ConverseReport};
use ipss_core::lyapunov::{sigma_for, KappaReport, KappaTables};
use ipss_core::scalar::{lin_grid, norm, stream_rng};
use ipss_core::signals::random_piecewise_constant;
use ipss_core::simulator::LipschitzReport;
use ipss_core::*;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::*;
use crate::output::{fmt_f64, ArtifactSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Violation,
}

impl Status {
    fn from_pass(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Violation
        }
    }

    fn and(self, other: Status) -> Status {
        Status::from_pass(self == Status::Pass && other == Status::Pass)
    }
}

pub struct Outcome {
    pub status: Status,
    pub summary: String,
}

pub struct RunContext<'a> {
    pub config: &'a ExperimentConfig,
    pub base_dir: &'a Path,
    pub seed: u64,
}

fn func(spec: &FnSpec) -> Result<MonotoneFn<f64>> {
    Ok(MonotoneFn::from_spec(spec)?)
}

fn system(ctx: &RunContext<'_>) -> Result<SystemDef<f64>> {
    let spec = ctx.config.system.as_ref().ok_or_else(|| anyhow!("system is required"))?;
    Ok(spec.build()?)
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref().ok_or_else(|| anyhow!("missing section {name}"))
}

pub fn run(ctx: &RunContext<'_>, out: &mut ArtifactSet) -> Result<Outcome> {
    let cfg = ctx.config;
    let op = cfg.operation;
    let result = match op {
        OperationKind::Simulate => simulate_op(ctx, section(&cfg.simulate, "simulate")?, out),
        OperationKind::Norms => norms_op(ctx, section(&cfg.norms, "norms")?, out),
        OperationKind::CheckLyap => check_lyap_op(ctx, section(&cfg.check_lyap, "check_lyap")?, out),
        OperationKind::SynthGains => synth_gains_op(ctx, section(&cfg.synth_gains, "synth_gains")?, out),
        OperationKind::Transform => transform_op(ctx, section(&cfg.transform, "transform")?, out),
        OperationKind::Falsify => falsify_op(ctx, section(&cfg.falsify, "falsify")?, out),
        OperationKind::Lemma3 => lemma3_op(ctx, section(&cfg.lemma3, "lemma3")?, out),
        OperationKind::Converse => converse_op(ctx, section(&cfg.converse, "converse")?, out),
    };
    result.with_context(|| format!("operation {op} failed"))
}

pub fn build_input(spec: &InputSpec, seed: u64) -> Result<Signal<f64>> {
    Ok(match spec {
        InputSpec::Zero { dim } => Signal::zero(*dim),
        InputSpec::Constant { value, horizon } => Signal::constant(value.clone(), *horizon)?,
        InputSpec::PulseTrain { tau, count } => pulse_train(*tau, *count)?,
        InputSpec::Signal { signal } => Signal::from_spec(signal)?,
        InputSpec::Random {
            dim,
            pieces,
            piece_len,
            amplitude,
        } => random_piecewise_constant(&mut stream_rng(seed, 0), *dim, *pieces, *piece_len, *amplitude),
    })
}

fn envelope_rows(rows: &[EnvelopeRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| vec![fmt_f64(r.t), fmt_f64(r.norm), fmt_f64(r.bound), fmt_f64(r.margin)])
        .collect()
}

const ENVELOPE_HEADER: [&str; 4] = ["t", "|x|", "bound", "margin"];

fn simulate_op(ctx: &RunContext<'_>, op: &SimulateOp, out: &mut ArtifactSet) -> Result<Outcome> {
    let sys = system(ctx)?;
    let u = build_input(&op.input, ctx.seed)?;
    let traj = simulate(&sys, op.t0, &op.xi, &u, op.t_end, op.step)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=sys.n()).map(|i| format!("x{i}")));
    header.push("|x|".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = traj.times.iter().zip(&traj.states).map(|(&t, x)| {
        let mut row = vec![fmt_f64(t)];
        row.extend(x.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(norm(x)));
        row
    });
    out.csv("trajectory.csv", &header_refs, rows)?;

    #[derive(Serialize)]
    struct Report {
        t0: f64,
        t_end: f64,
        points: usize,
        peak_norm: f64,
        final_state: Vec<f64>,
        blown_up: bool,
        blowup_time: Option<f64>,
        envelope: Option<EnvelopeReport>,
    }
    let envelope = match &op.certificate {
        Some(spec) => {
            let cert = Certificate::from_spec(spec)?;
            let rep = check_envelope(&traj, &cert, &u, norm(&op.xi), op.t0, op.tolerance)?;
            out.csv("envelope.csv", &ENVELOPE_HEADER, envelope_rows(&rep.rows))?;
            Some(rep)
        }
        None => None,
    };
    let status = match &envelope {
        Some(e) => Status::from_pass(e.satisfied),
        None => Status::from_pass(!traj.blown_up),
    };
    let summary = match &envelope {
        Some(e) => format!("{} points, envelope margin {}", traj.times.len(), fmt_f64(e.margin)),
        None => format!("{} points, peak |x| {}", traj.times.len(), fmt_f64(traj.peak_norm())),
    };
    out.json(
        "simulation.json",
        &Report {
            t0: traj.t0(),
            t_end: traj.t_end(),
            points: traj.times.len(),
            peak_norm: traj.peak_norm(),
            final_state: traj.final_state().to_vec(),
            blown_up: traj.blown_up,
            blowup_time: traj.blowup_time,
            envelope,
        },
    )?;
    Ok(Outcome { status, summary })
}

#[derive(Serialize)]
struct MeasureRow {
    rho: FnSpec,
    window: Option<f64>,
    energy: Option<f64>,
    energy_diverged: bool,
    power_norm: Option<f64>,
    power_norm_diverged: bool,
    witness: Option<[f64; 2]>,
    brute_force: Option<f64>,
}

/// Largest window average over a dense grid of starts plus every start at
/// which a window edge meets a breakpoint.
fn brute_force_power(u: &Signal<f64>, rho: &MonotoneFn<f64>, window: f64, step: f64) -> Result<f64> {
    let h = u.horizon();
    let count = ((h + window) / step).ceil() as usize;
    let mut starts: Vec<f64> = (0..=count).map(|i| i as f64 * step - window).collect();
    for &b in u.breakpoints().iter().chain(std::iter::once(&h)) {
        starts.push(b);
        starts.push(b - window);
    }
    let mut best = 0.0_f64;
    for s in starts {
        let (a, b) = (s.max(0.0), (s + window).min(h));
        if b > a {
            best = best.max(rho_energy(u, rho, a, b)?.value() / window);
        }
    }
    Ok(best)
}

fn norms_op(ctx: &RunContext<'_>, op: &NormsOp, out: &mut ArtifactSet) -> Result<Outcome> {
    let u = build_input(&op.input, ctx.seed)?;
    let (a, b) = u.full_interval();
    let sup = sup_norm(&u, a, b)?;
    let mut rows = Vec::new();
    let mut ok = true;
    for m in &op.measures {
        let rho = func(&m.rho)?;
        let energy = rho_energy(&u, &rho, a, b)?;
        let (power, brute) = match m.window {
            Some(w) => {
                let p = avg_power_norm(&u, &rho, w)?;
                let brute = match &op.brute_force {
                    Some(bf) => {
                        let v = brute_force_power(&u, &rho, w, bf.step)?;
                        ok &= p.finite().is_some_and(|pv| (pv - v).abs() <= bf.tolerance);
                        Some(v)
                    }
                    None => None,
                };
                (Some(p), brute)
            }
            None => (None, None),
        };
        rows.push(MeasureRow {
            rho: m.rho.clone(),
            window: m.window,
            energy: energy.finite(),
            energy_diverged: energy.diverged(),
            power_norm: power.and_then(|p| p.finite()),
            power_norm_diverged: power.is_some_and(|p| p.diverged()),
            witness: power.and_then(|p| p.witness).map(|w| [w.start, w.end]),
            brute_force: brute,
        });
    }
    #[derive(Serialize)]
    struct Report {
        interval: [f64; 2],
        sup: Option<f64>,
        measures: Vec<MeasureRow>,
    }
    let summary = format!("sup {} over {} measure(s)", sup.finite().map_or("diverged".into(), fmt_f64), rows.len());
    out.json(
        "norms.json",
        &Report {
            interval: [a, b],
            sup: sup.finite(),
            measures: rows,
        },
    )?;
    Ok(Outcome {
        status: Status::from_pass(ok),
        summary,
    })
}

pub fn build_candidate(spec: &CandidateSpec, base_dir: &Path) -> Result<LyapunovCandidate<f64>> {
    Ok(match spec {
        CandidateSpec::Norm => LyapunovCandidate::norm(),
        CandidateSpec::Power { c, p } => {
            let (c, p) = (*c, *p);
            let a = make_power_fn(c, p)?;
            LyapunovCandidate::new(a.clone(), a, move |_t, x: &[f64]| c * norm(x).powf(p))
        }
        CandidateSpec::Table { table, alpha1, alpha2 } => LyapunovCandidate::from_table(table, func(alpha1)?, func(alpha2)?)?,
        CandidateSpec::File { path } => {
            let full = base_dir.join(path);
            let text = std::fs::read_to_string(&full).with_context(|| format!("cannot read candidate file {}", full.display()))?;
            let file: CandidateFile = serde_json::from_str(&text).with_context(|| format!("malformed candidate file {}", full.display()))?;
            LyapunovCandidate::from_table(&file.table, func(&file.alpha1)?, func(&file.alpha2)?)?
        }
    })
}

fn plan_for(spec: &PlanSpec, seed: u64) -> SamplingPlan {
    SamplingPlan {
        times: spec.times.clone(),
        radii: spec.radii.clone(),
        directions: spec.directions,
        input_radii: spec.input_radii.clone(),
        input_directions: spec.input_directions,
        seed,
        h0: spec.h0,
        levels: spec.levels,
        margin: spec.margin,
    }
}

fn check_lyap_op(ctx: &RunContext<'_>, op: &CheckLyapOp, out: &mut ArtifactSet) -> Result<Outcome> {
    let sys = system(ctx)?;
    let v = build_candidate(&op.candidate, ctx.base_dir)?;
    let plan = plan_for(&op.plan, ctx.seed);
    let (form, report, implied) = match &op.form {
        FormSpec::Dissipation { alpha4, chi4 } => {
            let spec = DissipationSpec {
                alpha4: func(alpha4)?,
                chi4: func(chi4)?,
            };
            let rep = check_dissipation_form(&v, &sys, &spec, &plan)?;
            let implied = if op.check_implied && rep.passed() {
                Some(check_implication_form(&v, &sys, &spec.implication(), &plan)?)
            } else {
                None
            };
            ("dissipation", rep, implied)
        }
        FormSpec::Implication { alpha3, chi3 } => {
            let spec = ImplicationSpec {
                alpha3: func(alpha3)?,
                chi3: func(chi3)?,
            };
            ("implication", check_implication_form(&v, &sys, &spec, &plan)?, None)
        }
        FormSpec::Iiss { alpha5, chi5 } => {
            let spec = IissSpec {
                alpha5: func(alpha5)?,
                chi5: func(chi5)?,
            };
            ("iiss", check_iiss_form(&v, &sys, &spec, &plan)?, None)
        }
    };
    let status = Status::from_pass(report.passed() && implied.as_ref().is_none_or(|r| r.passed()));
    let mut summary = format!(
        "{form} form: {} of {} samples violate, worst gap {}",
        report.violations.len(),
        report.checked,
        fmt_f64(report.worst_gap)
    );
    if let Some(r) = &implied {
        summary.push_str(&format!("; implied implication form: {} violations", r.violations.len()));
    }
    #[derive(Serialize)]
    struct Report<'a> {
        form: &'a str,
        report: &'a ViolationReport,
        implied_implication: Option<&'a ViolationReport>,
    }
    out.json(
        "violations.json",
        &Report {
            form,
            report: &report,
            implied_implication: implied.as_ref(),
        },
    )?;
    Ok(Outcome { status, summary })
}

#[derive(Debug, Clone, Serialize)]
struct SuiteRow {
    case: usize,
    xi_norm: f64,
    pieces: usize,
    horizon: f64,
    margin: f64,
    worst_time: f64,
    satisfied: bool,
}

struct SuiteResult {
    rows: Vec<SuiteRow>,
    worst: EnvelopeReport,
}

impl SuiteResult {
    fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.satisfied)
    }

    fn worst_margin(&self) -> f64 {
        self.worst.margin
    }
}

fn run_suite(sys: &SystemDef<f64>, cert: &Certificate<f64>, suite: &EnvelopeSuite, seed: u64, stream: u64) -> Result<SuiteResult> {
    let cases: Vec<(SuiteRow, EnvelopeReport)> = (0..suite.count)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut rng = stream_rng(seed, stream + i as u64);
            let xi: Vec<f64> = (0..sys.n()).map(|_| rng.gen_range(suite.xi_range[0]..=suite.xi_range[1])).collect();
            let pieces = rng.gen_range(suite.pieces[0]..=suite.pieces[1]);
            let piece_len = rng.gen_range(suite.piece_len[0]..=suite.piece_len[1]);
            let u = random_piecewise_constant(&mut rng, sys.m(), pieces, piece_len, suite.amplitude);
            let t_end = u.horizon() + suite.tail;
            let traj = simulate(sys, 0.0, &xi, &u, t_end, suite.step)?;
            let rep = check_envelope(&traj, cert, &u, norm(&xi), 0.0, Some(suite.tolerance)).with_context(|| format!("envelope case {i}"))?;
            let row = SuiteRow {
                case: i,
                xi_norm: norm(&xi),
                pieces,
                horizon: u.horizon(),
                margin: rep.margin,
                worst_time: rep.worst_time,
                satisfied: rep.satisfied,
            };
            Ok((row, rep))
        })
        .collect::<Result<_>>()?;
    let worst_idx = cases
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.margin.total_cmp(&b.1 .0.margin).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| anyhow!("empty envelope suite"))?;
    let worst = cases[worst_idx].1.clone();
    Ok(SuiteResult {
        rows: cases.into_iter().map(|c| c.0).collect(),
        worst,
    })
}

fn write_suite(out: &mut ArtifactSet, prefix: &str, res: &SuiteResult) -> Result<()> {
    let rows = res.rows.iter().map(|r| {
        vec![
            r.case.to_string(),
            fmt_f64(r.xi_norm),
            r.pieces.to_string(),
            fmt_f64(r.horizon),
            fmt_f64(r.margin),
            fmt_f64(r.worst_time),
            r.satisfied.to_string(),
        ]
    });
    out.csv(
        &format!("{prefix}envelopes.csv"),
        &["case", "|xi|", "pieces", "horizon", "margin", "worst_time", "satisfied"],
        rows,
    )?;
    out.csv(&format!("{prefix}envelope.csv"), &ENVELOPE_HEADER, envelope_rows(&res.worst.rows))
}

fn synth_gains_op(ctx: &RunContext<'_>, op: &SynthGainsOp, out: &mut ArtifactSet) -> Result<Outcome> {
    let sys = system(ctx)?;
    let (alpha1, alpha2) = (func(&op.alpha1)?, func(&op.alpha2)?);
    let spec = DissipationSpec {
        alpha4: func(&op.alpha4)?,
        chi4: func(&op.chi4)?,
    };
    let sigma = sigma_for(&alpha2, &spec.alpha4);
    let bundle = Arc::new(build_kappa(&sigma, op.kappa.q_min, op.kappa.q_max, op.kappa.quadrature_tol)?);
    #[derive(Serialize)]
    struct KappaOut {
        report: KappaReport,
        tables: KappaTables,
    }
    let kreport = bundle.report();
    out.json(
        "kappa.json",
        &KappaOut {
            report: kreport.clone(),
            tables: bundle.tables(),
        },
    )?;
    let gains = ipss_gains_from_dissipation(&alpha1, &alpha2, &spec, op.window, bundle)?;
    let cert = Certificate::from_gains(&gains);
    let cspec = cert.to_spec(&op.export_grid, &op.export_times).context("tabulating the synthesized gains")?;
    out.json("certificate.json", &cspec)?;
    let mut summary = format!("κ(1) = {}, min κ'σ/(2κ) = {}", fmt_f64(kreport.kappa_at_one), fmt_f64(kreport.min_dissipation_ratio));
    let mut status = Status::Pass;
    if let Some(suite) = &op.envelopes {
        let res = run_suite(&sys, &cert, suite, ctx.seed, 0)?;
        write_suite(out, "", &res)?;
        status = Status::from_pass(res.passed());
        summary.push_str(&format!("; {} envelopes, worst margin {}", res.rows.len(), fmt_f64(res.worst_margin())));
    }
    Ok(Outcome { status, summary })
}

fn transform_op(ctx: &RunContext<'_>, op: &TransformOp, out: &mut ArtifactSet) -> Result<Outcome> {
    #[derive(Serialize)]
    struct Constants {
        lambda_tilde: f64,
        amplification: f64,
    }
    #[derive(Serialize)]
    struct Produced {
        label: &'static str,
        certificate: CertificateSpec,
    }
    #[derive(Serialize)]
    struct Report {
        constants: Option<Constants>,
        certificates: Vec<Produced>,
    }
    let (constants, certs) = match &op.transform {
        TransformSpec::ExpIissToIpss {
            k,
            lambda,
            gamma_iiss,
            rho,
            window,
        } => {
            let c = exponential_window_bound(*k, *lambda, *window)?;
            let cert = exp_iiss_to_ipss(*k, *lambda, &func(gamma_iiss)?, &func(rho)?, *window)?;
            let constants = Constants {
                lambda_tilde: c.lambda_tilde,
                amplification: c.amplification,
            };
            (Some(constants), vec![("ipss", cert)])
        }
        TransformSpec::IpssToIssIiss { certificate } => {
            let (iss, iiss) = ipss_to_iss_iiss(&Certificate::from_spec(certificate)?)?;
            (None, vec![("iss", iss), ("iiss", iiss)])
        }
        TransformSpec::Check { certificate } => (None, vec![("checked", Certificate::from_spec(certificate)?)]),
    };
    let mut summary = match &constants {
        Some(c) => format!("λ̃ = {}, amplification {}", fmt_f64(c.lambda_tilde), fmt_f64(c.amplification)),
        None => format!("{} certificate(s)", certs.len()),
    };
    let mut status = Status::Pass;
    if let Some(suite) = &op.envelopes {
        let sys = system(ctx)?;
        for (label, cert) in &certs {
            let res = run_suite(&sys, cert, suite, ctx.seed, 0)?;
            write_suite(out, &format!("{label}_"), &res)?;
            status = status.and(Status::from_pass(res.passed()));
            summary.push_str(&format!("; {label}: {} envelopes, worst margin {}", res.rows.len(), fmt_f64(res.worst_margin())));
        }
    }
    let certificates = certs
        .iter()
        .map(|(label, c)| Ok(Produced {
            label,
            certificate: c.to_spec(&op.export_grid, &op.export_times)?,
        }))
        .collect::<Result<Vec<_>>>()?;
    out.json("certificates.json", &Report { constants, certificates })?;
    Ok(Outcome { status, summary })
}

fn falsify_op(ctx: &RunContext<'_>, op: &FalsifyOp, out: &mut ArtifactSet) -> Result<Outcome> {
    let sys = system(ctx)?;
    let cert = Certificate::from_spec(&op.certificate)?;
    let report = falsify(&sys, &cert, &op.family, op.budget, ctx.seed, op.tolerance)?;
    out.json("violations.json", &report)?;
    if let Some(worst) = &report.worst {
        let cands = op.family.candidates::<f64>(sys.n(), sys.m(), op.budget, ctx.seed)?;
        let (_, _, env) = evaluate_candidate(&sys, &cert, &cands[worst.index], worst.index, op.tolerance)?;
        out.csv("envelope.csv", &ENVELOPE_HEADER, envelope_rows(&env.rows))?;
    }
    let t0s: Vec<String> = report.violations.iter().map(|v| fmt_f64(v.t0)).collect();
    let summary = format!(
        "{} candidates, {} violations{}",
        report.evaluated,
        report.violations.len(),
        if t0s.is_empty() { String::new() } else { format!(" at t0 = {}", t0s.join(", ")) }
    );
    Ok(Outcome {
        status: Status::from_pass(!report.violated()),
        summary,
    })
}

#[derive(Serialize)]
struct OracleRow {
    case: usize,
    #[serde(rename = "K")]
    k: f64,
    lambda: f64,
    window: f64,
    eta_c: f64,
    eta_p: f64,
    g0: f64,
    min_slack: f64,
    worst_t0: f64,
    worst_t: f64,
    lambda_tilde: f64,
    amplification: f64,
}

fn oracle_case(op: &Lemma3Op, seed: u64, case: usize) -> Result<OracleRow> {
    let mut r = stream_rng(seed, case as u64);
    let k = r.gen_range(op.k_range[0]..=op.k_range[1]);
    let lambda = r.gen_range(op.lambda_range[0]..=op.lambda_range[1]);
    let step = op.grid_step;
    let threshold = k.ln() / lambda;
    let window = step * ((threshold / step).floor() + 1.0 + r.gen_range(0..=op.window_extra_steps) as f64);
    let (c, p) = (r.gen_range(op.eta_c_range[0]..=op.eta_c_range[1]), r.gen_range(op.eta_p_range[0]..=op.eta_p_range[1]));
    let eta = make_power_fn(c, p)?;
    let pieces = r.gen_range(op.h_pieces[0]..=op.h_pieces[1]);
    let raw = random_piecewise_constant(&mut r, 1, pieces, op.horizon / pieces as f64, op.h_amplitude);
    let values = raw.values().iter().map(|x| vec![x[0].abs()]).collect();
    let h = Signal::new(raw.breakpoints().to_vec(), values, raw.horizon())?;
    let g0 = r.gen_range(op.g0_range[0]..=op.g0_range[1]);
    let opts = OracleOptions {
        grid_step: step,
        horizon: op.horizon,
        g0,
    };
    let rep = lemma3_oracle(k, lambda, window, &eta, &h, &opts).with_context(|| format!("oracle case {case}"))?;
    Ok(OracleRow {
        case,
        k,
        lambda,
        window,
        eta_c: c,
        eta_p: p,
        g0,
        min_slack: rep.min_slack,
        worst_t0: rep.worst_t0,
        worst_t: rep.worst_t,
        lambda_tilde: rep.lambda_tilde,
        amplification: rep.amplification,
    })
}

fn lemma3_op(ctx: &RunContext<'_>, op: &Lemma3Op, out: &mut ArtifactSet) -> Result<Outcome> {
    let rows: Vec<OracleRow> = (0..op.cases).map(|i| oracle_case(op, ctx.seed, i)).collect::<Result<_>>()?;
    let csv_rows = rows.iter().map(|r| {
        vec![
            r.case.to_string(),
            fmt_f64(r.k),
            fmt_f64(r.lambda),
            fmt_f64(r.window),
            fmt_f64(r.eta_c),
            fmt_f64(r.eta_p),
            fmt_f64(r.g0),
            fmt_f64(r.min_slack),
            fmt_f64(r.worst_t0),
            fmt_f64(r.worst_t),
        ]
    });
    out.csv(
        "oracle.csv",
        &["case", "K", "lambda", "T", "eta_c", "eta_p", "g0", "min_slack", "worst_t0", "worst_t"],
        csv_rows,
    )?;
    let worst = rows
        .iter()
        .min_by(|a, b| a.min_slack.total_cmp(&b.min_slack))
        .ok_or_else(|| anyhow!("no oracle cases"))?;
    let failing: Vec<usize> = rows.iter().filter(|r| r.min_slack < op.min_slack).map(|r| r.case).collect();
    #[derive(Serialize)]
    struct Report<'a> {
        cases: usize,
        threshold: f64,
        min_slack: f64,
        worst_case: usize,
        failing_cases: &'a [usize],
        rows: &'a [OracleRow],
    }
    out.json(
        "oracle.json",
        &Report {
            cases: rows.len(),
            threshold: op.min_slack,
            min_slack: worst.min_slack,
            worst_case: worst.case,
            failing_cases: &failing,
            rows: &rows,
        },
    )?;
    Ok(Outcome {
        status: Status::from_pass(failing.is_empty()),
        summary: format!("{} oracle cases, minimal slack {}", rows.len(), fmt_f64(worst.min_slack)),
    })
}

#[derive(Serialize)]
struct WkRow {
    t0: f64,
    xi: Vec<f64>,
    k: usize,
    value: f64,
    theta1: f64,
    sample: usize,
    time: f64,
}

#[derive(Serialize)]
struct LipschitzOut {
    report: LipschitzReport<f64>,
    max_state_ratio: Option<f64>,
    passed: bool,
}

fn converse_op(ctx: &RunContext<'_>, op: &ConverseOp, out: &mut ArtifactSet) -> Result<Outcome> {
    let sys = system(ctx)?;
    let mut cfg = op.config.clone();
    cfg.seed = ctx.seed;
    let mut plan = op.plan.clone();
    plan.seed = ctx.seed;
    let beta = KLBound::exponential(op.urgas.k, op.urgas.lambda)?;
    let (theta1, theta2) = sontag_factorize_exponential(op.urgas.k, op.urgas.lambda)?;
    let dsys = DisturbedSystem::new(sys.clone(), beta);

    let rho = regularized_rho(&theta2, &lin_grid(0.0, cfg.rho_max, cfg.rho_points))?;
    let wk_rows = op
        .wk_probes
        .iter()
        .map(|p| -> Result<WkRow> {
            let w = wk_estimate(&dsys, p.k, p.t0, &p.xi, &theta1, &rho, &cfg)?;
            Ok(WkRow {
                t0: p.t0,
                xi: p.xi.clone(),
                k: p.k,
                value: w.value,
                theta1: theta1.eval(norm(&p.xi)),
                sample: w.sample,
                time: w.time,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let report: ConverseReport = check_converse_properties(&dsys, &theta1, &theta2, &cfg, &plan)?;
    let sandwich = report.sandwich.rows.iter().map(|r| {
        vec![
            fmt_f64(r.t0),
            fmt_f64(r.radius),
            fmt_f64(r.v),
            fmt_f64(r.alpha1),
            fmt_f64(r.alpha2),
            fmt_f64(r.truncation_bound),
            fmt_f64(r.wk_ratio),
        ]
    });
    out.csv("sandwich.csv", &["t0", "radius", "V", "alpha1", "alpha2", "truncation_bound", "wk_ratio"], sandwich)?;
    let decay = report.decay.rows.iter().map(|r| {
        vec![
            fmt_f64(r.xi0),
            fmt_f64(r.d),
            fmt_f64(r.t),
            fmt_f64(r.v),
            fmt_f64(r.envelope),
            fmt_f64(r.ratio),
        ]
    });
    out.csv("decay.csv", &["xi0", "d", "t", "V", "envelope", "ratio"], decay)?;

    let lipschitz = match &op.lipschitz_probe {
        Some(p) => {
            let rep = lipschitz_probe(&sys, p.radius, p.horizon, p.samples, ctx.seed, &p.options.unwrap_or_default())?;
            let passed = rep.valid && p.max_state_ratio.is_none_or(|m| rep.state_ratio <= m);
            Some(LipschitzOut {
                report: rep,
                max_state_ratio: p.max_state_ratio,
                passed,
            })
        }
        None => None,
    };

    if let Some(e) = &op.export_candidate {
        let isys = e.system.build::<f64>()?;
        let ebeta = KLBound::exponential(e.urgas.k, e.urgas.lambda)?;
        let (et1, et2) = sontag_factorize_exponential(e.urgas.k, e.urgas.lambda)?;
        let cand = iss_to_dissipation_candidate(&isys, func(&e.phi)?, ebeta, &et1, &et2, &cfg)?;
        let file = CandidateFile {
            table: cand.candidate.tabulate(&e.ts, &e.xs),
            alpha1: cand.candidate.alpha1.to_spec_or_table(&e.alpha_grid)?,
            alpha2: cand.candidate.alpha2.to_spec_or_table(&e.alpha_grid)?,
        };
        if file.table.values.iter().flatten().any(|v| !v.is_finite()) {
            bail!("candidate evaluation failed on the export grid");
        }
        out.json("candidate.json", &file)?;
    }

    let wk_ok = wk_rows.iter().all(|w| w.value <= w.theta1);
    let lip_ok = lipschitz.as_ref().is_none_or(|l| l.passed);
    let status = Status::from_pass(report.passed() && wk_ok && lip_ok);
    let mut summary = format!(
        "sandwich {}, decay worst ratio {}, Lipschitz ratio {} (bound {})",
        if report.sandwich.passed { "ok" } else { "failed" },
        fmt_f64(report.decay.worst_ratio),
        fmt_f64(report.lipschitz.max_ratio),
        fmt_f64(report.lipschitz.bound)
    );
    for w in &wk_rows {
        summary.push_str(&format!("; W_{}({}, {:?}) = {}", w.k, fmt_f64(w.t0), w.xi, fmt_f64(w.value)));
    }
    if let Some(l) = &lipschitz {
        summary.push_str(&format!("; probe state ratio {}", fmt_f64(l.report.state_ratio)));
    }
    #[derive(Serialize)]
    struct Report<'a> {
        report: &'a ConverseReport,
        wk_probes: &'a [WkRow],
        lipschitz_probe: Option<&'a LipschitzOut>,
    }
    out.json(
        "converse.json",
        &Report {
            report: &report,
            wk_probes: &wk_rows,
            lipschitz_probe: lipschitz.as_ref(),
        },
    )?;
    Ok(Outcome { status, summary })
}

/// Builds every system, function, signal, certificate and candidate named by
/// the config without running the operation.
pub fn preflight(cfg: &ExperimentConfig, base_dir: &Path) -> Result<()> {
    if let Some(spec) = &cfg.system {
        spec.build::<f64>()?;
    }
    if let Some(s) = &cfg.simulate {
        build_input(&s.input, cfg.seed)?;
        if let Some(c) = &s.certificate {
            Certificate::<f64>::from_spec(c)?;
        }
    }
    if let Some(n) = &cfg.norms {
        build_input(&n.input, cfg.seed)?;
        for m in &n.measures {
            func(&m.rho)?;
        }
    }
    if let Some(l) = &cfg.check_lyap {
        build_candidate(&l.candidate, base_dir)?;
        let specs = match &l.form {
            FormSpec::Dissipation { alpha4, chi4 } => [alpha4, chi4],
            FormSpec::Implication { alpha3, chi3 } => [alpha3, chi3],
            FormSpec::Iiss { alpha5, chi5 } => [alpha5, chi5],
        };
        for s in specs {
            func(s)?;
        }
    }
    if let Some(g) = &cfg.synth_gains {
        for s in [&g.alpha1, &g.alpha2, &g.alpha4, &g.chi4] {
            func(s)?;
        }
    }
    if let Some(t) = &cfg.transform {
        match &t.transform {
            TransformSpec::ExpIissToIpss { gamma_iiss, rho, .. } => {
                func(gamma_iiss)?;
                func(rho)?;
            }
            TransformSpec::IpssToIssIiss { certificate } | TransformSpec::Check { certificate } => {
                Certificate::<f64>::from_spec(certificate)?;
            }
        }
    }
    if let Some(f) = &cfg.falsify {
        Certificate::<f64>::from_spec(&f.certificate)?;
    }
    if let Some(c) = &cfg.converse {
        if let Some(e) = &c.export_candidate {
            e.system.build::<f64>()?;
            func(&e.phi)?;
        }
    }
    Ok(())
}
