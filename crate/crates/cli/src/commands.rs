//! Subcommand implementations. Each returns a [`Status`]; any `Err` is an
//! input or I/O problem and maps to exit code 1.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hstar_core::domains::{
    flow_entry_check, gauge_ball_probe, starshapedness_report_with, AnnulusProblem, ImplicitDomain, SamplingOptions,
};
use hstar_core::exact::{model_potential, BallSide, ModelPotentialSpec, PExponent};
use hstar_core::heis::Point;
use hstar_core::io::{load_checkpoint, save_checkpoint, save_ply, CheckpointMeta};
use hstar_core::solver::{solve, Grid, ScalarField, SolveReport};
use hstar_core::verify::{
    dilation_comparison_check, extract_level_surface_with_margin, level_starshape, sign_certificate,
};
use hstar_core::Error as CoreError;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

/// Outcome of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    NotConverged,
    CertificateFailed,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::NotConverged => 2,
            Status::CertificateFailed => 3,
        }
    }

    /// Non-convergence outranks a failed certificate.
    fn worst(self, other: Status) -> Status {
        use Status::*;
        match (self, other) {
            (NotConverged, _) | (_, NotConverged) => NotConverged,
            (CertificateFailed, _) | (_, CertificateFailed) => CertificateFailed,
            _ => Success,
        }
    }
}

pub const CSV_HEADER: &str = "resolution,h,sup_error,l2_error,empirical_M,runtime_s";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let v = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok(cfg.output_dir.clone())
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("field.bin")
}

/// Solves, keeping the partial field on non-convergence.
fn solve_keep(problem: &AnnulusProblem, grid: &Grid, cfg: &RunConfig) -> Result<(ScalarField, SolveReport)> {
    match solve(problem, grid, &cfg.solver) {
        Ok(r) => Ok(r),
        Err(CoreError::NotConverged(partial)) => {
            log::warn!("solver stopped after {} iterations", partial.report.iterations);
            Ok((partial.field, partial.report))
        }
        Err(e) => Err(e.into()),
    }
}

fn converged_status(report: &SolveReport) -> Status {
    if report.converged {
        Status::Success
    } else {
        Status::NotConverged
    }
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<Status> {
    let dir = out_dir(cfg)?;
    let grid = cfg.grid()?;
    log::info!("solving on {:?} nodes, p = {}", grid.resolution(), cfg.problem.p().value());
    let (field, report) = solve_keep(&cfg.problem, &grid, cfg)?;
    let hash = cfg.hash();
    let mut meta = CheckpointMeta::for_field(&field);
    meta.config_hash = Some(hash.clone());
    meta.problem = Some(cfg.problem.clone());
    meta.options = Some(cfg.solver.clone());
    meta.report = Some(report.clone());
    save_checkpoint(&default_checkpoint(cfg), &field, &meta)?;
    write_json(
        &dir.join("solve_report.json"),
        &json!({ "config_hash": hash, "converged": report.converged, "report": report }),
    )?;
    Ok(converged_status(&report))
}

#[derive(Serialize)]
struct LevelEntry {
    level: f64,
    pass: bool,
    starshapedness: Option<hstar_core::domains::StarshapednessReport>,
    vertex_count: usize,
    triangle_count: usize,
    boundary_edge_count: usize,
    ply: Option<String>,
    error: Option<String>,
}

fn level_file(t: f64) -> String {
    format!("level_{t}.ply")
}

/// Certificates of a solved field; returns the report and whether all pass.
fn certify(cfg: &RunConfig, field: &ScalarField, dir: Option<&Path>) -> Result<(Value, bool)> {
    let m = cfg.verify.margin;
    let hash = cfg.hash();
    let (cert, mut pass) = match sign_certificate(field, m) {
        Ok(c) => {
            let ok = c.pass;
            (serde_json::to_value(c)?, ok)
        }
        Err(e) => (json!({ "error": e.to_string() }), false),
    };
    let mut levels = Vec::new();
    for &t in &cfg.verify.levels {
        let entry = match extract_level_surface_with_margin(field, t, cfg.verify.level_margin) {
            Ok(surface) => {
                let rep = level_starshape(&surface)?;
                let ply = match dir {
                    Some(d) => {
                        let name = level_file(t);
                        save_ply(&d.join(&name), &surface, &[format!("config_hash {hash}")])?;
                        Some(name)
                    }
                    None => None,
                };
                LevelEntry {
                    level: t,
                    pass: rep.pass(),
                    starshapedness: Some(rep),
                    vertex_count: surface.vertices.len(),
                    triangle_count: surface.triangles.len(),
                    boundary_edge_count: surface.boundary_edge_count,
                    ply,
                    error: None,
                }
            }
            Err(e @ CoreError::EmptySurface(_)) => LevelEntry {
                level: t,
                pass: false,
                starshapedness: None,
                vertex_count: 0,
                triangle_count: 0,
                boundary_edge_count: 0,
                ply: None,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e.into()),
        };
        pass &= entry.pass;
        levels.push(entry);
    }
    let mut dilation = Vec::new();
    for &l in &cfg.verify.lambdas {
        let rep = dilation_comparison_check(field, l, m, 0.0)?;
        pass &= rep.pass;
        dilation.push(rep);
    }
    Ok((
        json!({ "sign_certificate": cert, "levels": levels, "dilation": dilation, "pass": pass }),
        pass,
    ))
}

pub fn cmd_verify(cfg: &RunConfig, checkpoint: &Path) -> Result<Status> {
    let (field, meta) =
        load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let grid = cfg.grid()?;
    if meta.grid != grid {
        bail!("checkpoint grid {:?} does not match the config grid {:?}", meta.grid, grid);
    }
    match &meta.problem {
        Some(p) if *p == cfg.problem => {}
        Some(_) => bail!("checkpoint was solved for a different problem"),
        None => bail!("checkpoint sidecar carries no problem"),
    }
    let dir = out_dir(cfg)?;
    let (mut report, pass) = certify(cfg, &field, Some(&dir))?;
    report["config_hash"] = json!(cfg.hash());
    report["checkpoint_config_hash"] = json!(meta.config_hash);
    write_json(&dir.join("verify_report.json"), &report)?;
    Ok(if pass { Status::Success } else { Status::CertificateFailed })
}

/// Sup and volume-weighted l2 error over free nodes.
fn oracle_errors(field: &ScalarField, spec: &ModelPotentialSpec) -> Result<(f64, f64)> {
    let g = field.grid();
    let mut sup = 0.0f64;
    let mut sq = 0.0;
    for &n in field.mask().free_nodes() {
        let e = field.value(n) - model_potential(spec, &g.point(n))?;
        sup = sup.max(e.abs());
        sq += e * e;
    }
    Ok((sup, (sq * g.cell_volume()).sqrt()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn cmd_oracle(cfg: &RunConfig) -> Result<Status> {
    let Some(spec) = cfg.problem.model_spec() else {
        bail!("oracle needs concentric gauge balls centered at the origin");
    };
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();
    let mut csv = format!("# config_hash {hash}\n{CSV_HEADER}\n");
    let mut rows = Vec::new();
    let mut status = Status::Success;
    for &n in &cfg.oracle.resolutions {
        let grid = cfg.grid_at(n)?;
        let (field, report) = solve_keep(&cfg.problem, &grid, cfg)?;
        status = status.worst(converged_status(&report));
        let (sup, l2) = oracle_errors(&field, &spec)?;
        let m = sign_certificate(&field, cfg.verify.margin).ok().map(|c| c.empirical_m);
        csv.push_str(&format!(
            "{n},{},{sup},{l2},{},{:.3}\n",
            grid.h(),
            fmt_opt(m),
            report.wall_time_s
        ));
        rows.push(json!({
            "resolution": n, "h": grid.h(), "sup_error": sup, "l2_error": l2,
            "empirical_M": m, "converged": report.converged, "iterations": report.iterations,
        }));
    }
    fs::write(dir.join("oracle.csv"), csv)?;
    write_json(
        &dir.join("oracle_report.json"),
        &json!({
            "config_hash": hash,
            "p": cfg.problem.p().value(),
            "critical": cfg.problem.p().is_critical(cfg.problem.params()),
            "continuum_pairing_bound": spec.pairing_bound(),
            "rows": rows,
        }),
    )?;
    Ok(status)
}

fn check_one(cfg: &RunConfig, d: &ImplicitDomain) -> Result<(Value, bool)> {
    let opts = SamplingOptions { anchor: Point::origin(d.n()), seed: Some(cfg.seed) };
    let dc = &cfg.domain_check;
    let star = starshapedness_report_with(d, dc.samples, &opts)?;
    let mut probes = Vec::new();
    let mut flow = Vec::new();
    for side in [BallSide::Interior, BallSide::Exterior] {
        let probe = gauge_ball_probe(d, side, dc.probe_radius, dc.probe_samples)?;
        probes.push(json!({
            "side": side, "radius": probe.radius, "pass": probe.pass, "worst_violation": probe.worst_violation,
        }));
        flow.push(match flow_entry_check(d, side, dc.probe_radius, dc.probe_samples) {
            Ok(rep) => serde_json::to_value(rep)?,
            Err(e @ CoreError::ProbeNotPassed(_)) => json!({ "side": side, "error": e.to_string() }),
            Err(e) => return Err(e.into()),
        });
    }
    let pass = star.pass();
    Ok((json!({ "domain": d, "starshapedness": star, "probes": probes, "flow_entry": flow }), pass))
}

pub fn cmd_check_domain(cfg: &RunConfig) -> Result<Status> {
    let dir = out_dir(cfg)?;
    let (inner, inner_pass) = check_one(cfg, cfg.problem.inner())?;
    let (outer, outer_pass) = check_one(cfg, cfg.problem.outer())?;
    let pass = inner_pass && outer_pass;
    write_json(
        &dir.join("domain_report.json"),
        &json!({ "config_hash": cfg.hash(), "inner": inner, "outer": outer, "pass": pass }),
    )?;
    Ok(if pass { Status::Success } else { Status::CertificateFailed })
}

pub fn cmd_sweep_p(cfg: &RunConfig) -> Result<Status> {
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();
    let grid = cfg.grid()?;
    let mut csv = format!("# config_hash {hash}\np,{CSV_HEADER},converged,certified\n");
    let mut entries = Vec::new();
    let mut status = Status::Success;
    for &p in &cfg.sweep.p_values {
        let problem = cfg.problem.with_p(PExponent::new(p)?);
        log::info!("sweep p = {p}");
        let (field, report) = solve_keep(&problem, &grid, cfg)?;
        status = status.worst(converged_status(&report));
        let errors = problem.model_spec().map(|spec| oracle_errors(&field, &spec)).transpose()?;
        let sub = RunConfig { problem, ..cfg.clone() };
        let (cert, pass) = certify(&sub, &field, None)?;
        if !pass {
            status = status.worst(Status::CertificateFailed);
        }
        let m = cert["sign_certificate"]["empirical_m"].as_f64();
        csv.push_str(&format!(
            "{p},{},{},{},{},{},{:.3},{},{pass}\n",
            cfg.resolution,
            grid.h(),
            fmt_opt(errors.map(|e| e.0)),
            fmt_opt(errors.map(|e| e.1)),
            fmt_opt(m),
            report.wall_time_s,
            report.converged
        ));
        entries.push(json!({
            "p": p, "converged": report.converged, "iterations": report.iterations,
            "sup_error": errors.map(|e| e.0), "l2_error": errors.map(|e| e.1), "certificates": cert,
        }));
    }
    fs::write(dir.join("sweep.csv"), csv)?;
    write_json(&dir.join("sweep_report.json"), &json!({ "config_hash": hash, "runs": entries }))?;
    Ok(status)
}
