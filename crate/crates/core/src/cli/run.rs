//! One run of the front end: build the system, certify and shadow, write the artifacts.

use std::path::Path;

use nalgebra::DVector;
use serde_json::{json, Map, Value};

use super::config::{
    ConstantsSpec, GenerateSpec, InlineSystem, Mode, ProjectionSpec, PseudoOrbitSource, RunConfig, SystemSource,
};
use super::generate::{
    continuous_grid, continuous_pseudo_orbit, discrete_pseudo_orbit, pseudo_orbit_csv, read_pseudo_orbit,
};
use super::output::{fmt_f64, to_json, write_atomic};
use crate::adapted_norms::{verify_norm_lemma, AdaptedNorm};
use crate::certificate::{Certificate, Check};
use crate::error::{Error, Result};
use crate::examples::{by_name, NamedSystem, SystemKind};
use crate::higher_order::verify_second_order;
use crate::linalg::{from_row_major, Projections};
use crate::linear_discrete::{fit_min_d, DichotomyConstants, DiscreteCocycle, DiscreteDichotomy, ProjectionField};
use crate::nonlinearity::{Nonlinearity, Profile};
use crate::oracle::{bvp_solve, compare, BvpInstance};
use crate::rates::{make_rate, sample_rate};
use crate::shadow_continuous::{
    grid_residual, solve_shadow_continuous, verify_shadow_continuous, ContinuousPseudoOrbit,
};
use crate::shadow_discrete::{residuals, solve_shadow, verify_shadow, DiscreteSystem, PseudoOrbit, ShadowResult};
use crate::TimeMode;

pub const NORM_LEMMA_SAMPLES: usize = 1000;
pub const ORACLE_TOL: f64 = 1e-8;

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub overall: bool,
    pub exit_code: i32,
    pub report: Value,
    pub summary: Value,
    /// `(certificate, check)` names of every failed check.
    pub failures: Vec<(String, String)>,
}

pub fn build_system(cfg: &RunConfig) -> Result<NamedSystem> {
    match &cfg.system {
        SystemSource::Catalog { name, params } => {
            let mut params = params.clone();
            if let Some(n) = &cfg.nonlinearity {
                if params.c.is_some_and(|c| c != n.c) {
                    return Err(Error::Config("nonlinearity.c and system params.c disagree".into()));
                }
                params.c = Some(n.c);
            }
            let named = by_name(name, &params)?;
            if let Some(p) = cfg.nonlinearity.and_then(|n| n.profile) {
                if p != named.profile {
                    return Err(Error::Config(format!("catalog entry {name} uses the {:?} profile", named.profile)));
                }
            }
            Ok(named)
        }
        SystemSource::Inline(s) => inline_system(s, cfg),
    }
}

fn matrix(dim: usize, data: &[f64], what: &str) -> Result<nalgebra::DMatrix<f64>> {
    from_row_major(dim, data)
        .ok_or_else(|| Error::Config(format!("{what} needs {} entries, got {}", dim * dim, data.len())))
}

fn inline_system(s: &InlineSystem, cfg: &RunConfig) -> Result<NamedSystem> {
    let (dim, horizon) = (s.dim, s.horizon);
    if dim == 0 || horizon == 0 {
        return Err(Error::Config("inline system needs dim >= 1 and horizon >= 1".into()));
    }
    let cocycle = match (&s.matrix, &s.matrices) {
        (Some(m), None) => {
            let a = matrix(dim, m, "matrix")?;
            DiscreteCocycle::from_generator(horizon, move |_| a.clone())?
        }
        (None, Some(ms)) => {
            if ms.len() != horizon {
                return Err(Error::Config(format!("{} matrices given for horizon {horizon}", ms.len())));
            }
            DiscreteCocycle::from_matrices(ms.iter().map(|m| matrix(dim, m, "matrices[]")).collect::<Result<_>>()?)?
        }
        _ => return Err(Error::Config("inline system needs exactly one of `matrix` and `matrices`".into())),
    }
    .with_norm(s.norm);
    let p = match &s.projections {
        ProjectionSpec::Coordinate { stable, unstable } => {
            if stable + unstable > dim {
                return Err(Error::Config(format!("{stable} + {unstable} coordinates exceed dimension {dim}")));
            }
            Projections::coordinate(dim, *stable, *unstable)
        }
        ProjectionSpec::Explicit { p1, p2, p3 } => {
            let p = Projections::new(matrix(dim, p1, "p1")?, matrix(dim, p2, "p2")?, matrix(dim, p3, "p3")?);
            if p.algebra_defect() > 1e-10 {
                return Err(Error::Config(format!(
                    "projections are not complementary (defect {:e})",
                    p.algebra_defect()
                )));
            }
            p
        }
    };
    let projections = ProjectionField::constant(p, horizon);
    let rates = sample_rate(&make_rate(s.rate.kind, &s.rate.params)?, horizon)?;
    let constants = match s.constants {
        ConstantsSpec::Given { big_d, lambda, d } => DichotomyConstants::new(big_d, lambda, d)?,
        ConstantsSpec::Fit { lambda, d } => {
            let big_d = fit_min_d(&cocycle, &projections, &rates, lambda, d)?;
            DichotomyConstants::new(big_d.max(1.0), lambda, d)?
        }
    };
    let linear = DiscreteDichotomy::new(cocycle, projections, rates, constants)?;
    let (profile, c) = cfg.nonlinearity.map_or((Profile::Zero, 0.0), |n| (n.profile.unwrap_or(Profile::Zero), n.c));
    let f = Nonlinearity::weighted(profile, c, &linear.rates, constants.lambda, constants.d, s.norm);
    Ok(NamedSystem {
        name: "inline".into(),
        system: SystemKind::Discrete(DiscreteSystem::new(linear, f)),
        profile,
        grid: None,
        second_order: None,
        note: "inline discrete system",
    })
}

fn generate_spec(cfg: &RunConfig) -> Option<GenerateSpec> {
    match &cfg.pseudo_orbit {
        None => Some(GenerateSpec::default()),
        Some(PseudoOrbitSource::Generate(g)) => Some(g.clone()),
        Some(PseudoOrbitSource::File(_)) => None,
    }
}

fn discrete_orbit(cfg: &RunConfig, sys: &DiscreteSystem) -> Result<PseudoOrbit> {
    match (&cfg.pseudo_orbit, generate_spec(cfg)) {
        (Some(PseudoOrbitSource::File(path)), _) => {
            let file = read_pseudo_orbit(Path::new(path))?;
            if !file.discrete {
                return Err(Error::Config("discrete system needs an `n` column".into()));
            }
            PseudoOrbit::new(file.y, sys).map_err(as_config)
        }
        (_, Some(spec)) => discrete_pseudo_orbit(sys, &spec),
        _ => unreachable!(),
    }
}

fn continuous_orbit(cfg: &RunConfig, named: &NamedSystem) -> Result<ContinuousPseudoOrbit> {
    let sys = named.continuous().expect("continuous entry");
    match (&cfg.pseudo_orbit, generate_spec(cfg)) {
        (Some(PseudoOrbitSource::File(path)), _) => {
            let file = read_pseudo_orbit(Path::new(path))?;
            if file.discrete {
                return Err(Error::Config("continuous system needs a `t` column".into()));
            }
            ContinuousPseudoOrbit::new(file.times, file.y, file.y_prime, sys).map_err(as_config)
        }
        (_, Some(spec)) => {
            let grid = continuous_grid(&spec, named.grid, sys.linear.t_max)?;
            continuous_pseudo_orbit(sys, grid, &spec)
        }
        _ => unreachable!(),
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::ShapeMismatch(m) | Error::InvalidInput(m) => Error::Config(format!("pseudo-orbit: {m}")),
        other => other,
    }
}

fn shadow_json(r: &ShadowResult, y: &[DVector<f64>], norm: crate::linalg::Norm) -> Value {
    let bound = r.delta * r.d_bar / (1.0 - r.q);
    json!({
        "delta": r.delta,
        "bound_c_delta": bound,
        "sup_distance": r.sup_distance(y, norm),
        "iterations": r.iterations,
        "fp_residual": r.fp_residual,
        "t0_norm": r.t0_norm,
        "tail_bound": r.tail_bound,
        "certified_window": r.certified_window,
        "truncation_flag": r.truncation_flag,
        "approximate_norms": r.approximate_norms,
        "quadrature_estimate": r.quadrature_estimate,
        "contraction_ratios": r.contraction_ratios,
        "tol": r.tol,
    })
}

/// Rows `n|t, y*, x*, dist, residual, center_residual`.
fn trajectory_csv(
    r: &ShadowResult,
    y: &[DVector<f64>],
    residual: &[Option<DVector<f64>>],
    center: impl Fn(usize) -> Projections,
    norm: crate::linalg::Norm,
) -> String {
    let dim = y[0].len();
    let discrete = r.mode == TimeMode::Discrete;
    let mut header = vec![if discrete { "n".to_string() } else { "t".to_string() }];
    header.extend((0..dim).map(|i| format!("y{i}")));
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.extend(["dist", "residual", "center_residual"].map(String::from));
    let mut out = header.join(",") + "\n";
    for k in 0..y.len() {
        let mut row = vec![if discrete { k.to_string() } else { fmt_f64(r.times[k]) }];
        row.extend(y[k].iter().map(|v| fmt_f64(*v)));
        row.extend(r.x[k].iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(norm.vector(&(&r.x[k] - &y[k]))));
        match &residual[k] {
            Some(res) => {
                row.push(fmt_f64(norm.vector(res)));
                row.push(fmt_f64(norm.vector(&(&center(k).p3 * res))));
            }
            None => row.extend([String::new(), String::new()]),
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn certify(named: &NamedSystem, seed: u64) -> Result<(Certificate, Certificate)> {
    match &named.system {
        SystemKind::Discrete(s) => {
            let dich = s.certify(seed)?;
            let lemma = verify_norm_lemma(&AdaptedNorm::discrete(&s.linear)?, NORM_LEMMA_SAMPLES, seed);
            Ok((dich, lemma))
        }
        SystemKind::Continuous(s) => {
            let dich = s.certify(&s.linear.default_grid(), seed);
            let grid = named.solve_grid().unwrap_or_else(|| s.linear.default_grid());
            let lemma = verify_norm_lemma(&AdaptedNorm::continuous(&s.linear, &grid)?, NORM_LEMMA_SAMPLES, seed);
            Ok((dich, lemma))
        }
    }
}

/// Runs `cfg` and writes `report.json`, `summary.json` and, when a shadow is computed,
/// `trajectory.csv` and `pseudo_orbit.csv` into `out_dir`.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let named = build_system(cfg)?;
    let mode = cfg.mode;
    let want_oracle = mode == Mode::OracleCheck || cfg.oracle_check;
    if want_oracle && named.discrete().is_none() {
        return Err(Error::Config("the oracle check needs a discrete system (use params.sampled)".into()));
    }
    let k = named.constants();
    let theory = match &named.system {
        SystemKind::Discrete(s) => s.constants(),
        SystemKind::Continuous(s) => s.constants(),
    };
    let mut certs: Vec<(String, Certificate)> = Vec::new();
    let mut report = Map::new();
    report.insert("mode".into(), serde_json::to_value(mode).expect("mode serializes"));
    report.insert(
        "system".into(),
        json!({
            "name": named.name,
            "note": named.note,
            "dim": named.dim(),
            "time": if named.discrete().is_some() { "discrete" } else { "continuous" },
        }),
    );
    report
        .insert("constants".into(), json!({"big_d": k.big_d, "lambda": k.lambda, "d": k.d, "c": named.lipschitz_c()}));
    report.insert("theoretical".into(), serde_json::to_value(theory).expect("constants serialize"));

    if matches!(mode, Mode::Certify | Mode::Verify) {
        let (dich, lemma) = certify(&named, cfg.certify_seed)?;
        certs.push(("dichotomy".into(), dich));
        certs.push(("norm_lemma".into(), lemma));
    }

    let mut files: Vec<(&str, String)> = Vec::new();
    if mode != Mode::Certify {
        match &named.system {
            SystemKind::Discrete(sys) => {
                let y = discrete_orbit(cfg, sys)?;
                let r = solve_shadow(&y, sys, &cfg.solver.solve)?;
                certs.push(("shadow".into(), verify_shadow(&r, &y, sys)));
                let res = residuals(&r.x, sys);
                let mut per_node: Vec<Option<DVector<f64>>> = res.into_iter().map(Some).collect();
                per_node.push(None);
                let norm = sys.linear.norm();
                files.push((
                    "trajectory.csv",
                    trajectory_csv(&r, &y.y, &per_node, |n| sys.projections((n + 1).min(sys.horizon())).clone(), norm),
                ));
                files.push(("pseudo_orbit.csv", pseudo_orbit_csv(&r.times, &y.y, None, y.delta, true)));
                report.insert("shadow".into(), shadow_json(&r, &y.y, norm));
                if want_oracle {
                    let sol = bvp_solve(&BvpInstance { sys, y: &y })?;
                    let diff = compare(&sol.z, &r.z)?;
                    let res_tol = if sys.f.lipschitz_c == 0.0 { 1e-10 } else { ORACLE_TOL };
                    let mut c = Certificate::new(format!("n in [0, {}]", sys.horizon()));
                    c.push(
                        Check::new("solver vs oracle sup difference", diff, diff <= ORACLE_TOL)
                            .with_detail("max_n |z_n - z_oracle_n|"),
                    );
                    c.push(
                        Check::new("oracle fixed-point residual", sol.residual, sol.residual <= res_tol)
                            .with_detail("||z - T z||"),
                    );
                    certs.push(("oracle".into(), c));
                    report.insert(
                        "oracle".into(),
                        json!({"sup_difference": diff, "residual": sol.residual, "newton_iterations": sol.newton_iterations}),
                    );
                }
            }
            SystemKind::Continuous(sys) => {
                let y = continuous_orbit(cfg, &named)?;
                let r = solve_shadow_continuous(&y, sys, &cfg.solver)?;
                certs.push(("shadow".into(), verify_shadow_continuous(&r, &y, sys)));
                if named.second_order.is_some() {
                    certs.push(("second_order".into(), verify_second_order(&r, &y, sys)?));
                }
                let gr = grid_residual(&r, &y, sys)?;
                let per_node: Vec<Option<DVector<f64>>> = gr.r.into_iter().map(Some).collect();
                let norm = sys.linear.norm();
                let proj = &sys.linear.projections;
                files.push(("trajectory.csv", trajectory_csv(&r, &y.y, &per_node, |k| proj.at(y.grid[k]), norm)));
                let yp = (!y.differentiated).then_some(y.y_prime.as_slice());
                files.push(("pseudo_orbit.csv", pseudo_orbit_csv(&y.grid, &y.y, yp, y.delta, false)));
                report.insert("shadow".into(), shadow_json(&r, &y.y, norm));
            }
        }
    }

    let overall = certs.iter().all(|(_, c)| c.overall);
    let failures: Vec<(String, String)> = certs
        .iter()
        .flat_map(|(name, c)| c.inequalities.iter().filter(|i| !i.pass).map(move |i| (name.clone(), i.name.clone())))
        .collect();
    let exit_code = if overall { 0 } else { 1 };
    let cert_map: Map<String, Value> =
        certs.iter().map(|(n, c)| (n.clone(), serde_json::to_value(c).expect("certificates serialize"))).collect();
    report.insert("certificates".into(), Value::Object(cert_map));
    report.insert("overall".into(), json!(overall));
    let report = Value::Object(report);

    let summary = json!({
        "overall": overall,
        "exit_code": exit_code,
        "mode": mode,
        "system": named.name,
        "q": theory.q,
        "d_bar": theory.d_bar,
        "big_c": theory.c,
        "delta": report.pointer("/shadow/delta"),
        "sup_distance": report.pointer("/shadow/sup_distance"),
        "iterations": report.pointer("/shadow/iterations"),
        "oracle_sup_difference": report.pointer("/oracle/sup_difference"),
        "certificates": certs.iter().map(|(n, c)| (n.clone(), json!(c.overall))).collect::<Map<String, Value>>(),
        "failed": failures.iter().map(|(c, i)| format!("{c}: {i}")).collect::<Vec<_>>(),
    });

    write_atomic(&out_dir.join("report.json"), &to_json(&report))?;
    write_atomic(&out_dir.join("summary.json"), &to_json(&summary))?;
    for (name, text) in &files {
        write_atomic(&out_dir.join(name), text)?;
    }
    Ok(RunOutcome { overall, exit_code, report, summary, failures })
}

/// Summary written when the run stops with an error.
pub fn write_error_summary(out_dir: &Path, err: &Error) -> Result<()> {
    let summary = json!({"overall": false, "exit_code": err.exit_code(), "error": err.to_string()});
    write_atomic(&out_dir.join("summary.json"), &to_json(&summary))
}
