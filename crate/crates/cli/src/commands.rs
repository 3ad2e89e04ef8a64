//! The six commands. Each writes `report.json`, `timings.json`, its data files and a
//! manifest into the output directory.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use curvedflat::conservation::QSequence;
use curvedflat::eds::ProbeOptions;
use curvedflat::linalg::Mat;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, OUT_ENV};
use crate::output::OutputDir;
use crate::report::{Check, RunReport, Timings};
use crate::suite::{self, FlowSetup, Level, Setup};

pub const DEFAULT_OUT: &str = "curvedflat-out";
/// Closed-form agreement of the vacuum frame, curved flat and flat abelian map.
pub const VACUUM_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    PairCheck,
    Dress,
    Verify,
    Flows,
    EdsReport,
    Export,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::PairCheck => "pair-check",
            Command::Dress => "dress",
            Command::Verify => "verify",
            Command::Flows => "flows",
            Command::EdsReport => "eds-report",
            Command::Export => "export",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("factorization is singular at {holes} node(s); first at {location:?} with condition {cond:.3e}")]
    Singular { holes: usize, location: Vec<f64>, cond: f64 },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Singular { .. } => 3,
            CliError::Other(_) => 1,
        }
    }
}

/// Exit code of a finished run.
pub fn exit_code(result: &Result<RunReport, CliError>) -> i32 {
    match result {
        Ok(r) if r.passed => 0,
        Ok(_) => 1,
        Err(e) => e.exit_code(),
    }
}

/// `--out` wins over the environment, which wins over the config file.
pub fn resolve_out_dir(flag: Option<&Path>, env: Option<String>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(e) = env.filter(|e| !e.is_empty()) {
        return PathBuf::from(e);
    }
    PathBuf::from(cfg.output_dir.as_deref().unwrap_or(DEFAULT_OUT))
}

pub fn env_out_dir() -> Option<String> {
    std::env::var(OUT_ENV).ok()
}

#[derive(Serialize)]
struct HoleRecord {
    node: usize,
    point: Vec<f64>,
    cond: f64,
}

#[derive(Serialize)]
struct FactorizationSummary {
    nodes: usize,
    holes: Vec<HoleRecord>,
    max_condition: f64,
    max_solver_gap: f64,
}

fn factorization_summary(level: &Level) -> FactorizationSummary {
    let d = &level.dressed;
    let present = d.points.iter().flatten();
    FactorizationSummary {
        nodes: d.grid.len(),
        holes: d.holes.iter().map(|&k| HoleRecord { node: k, point: d.grid.point(k), cond: d.conds[k] }).collect(),
        max_condition: present.clone().map(|p| p.cond).fold(0.0, f64::max),
        max_solver_gap: present.map(|p| p.solver_gap).fold(0.0, f64::max),
    }
}

struct Run {
    out: OutputDir,
    report: RunReport,
    timings: Timings,
}

impl Run {
    fn new(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Self, CliError> {
        let pair = cfg.pair()?;
        Ok(Self {
            out: OutputDir::create(out)?,
            report: RunReport::new(cmd.name(), pair.name(), cfg.seed),
            timings: Timings::default(),
        })
    }

    fn finish(mut self) -> Result<RunReport, CliError> {
        self.out.write_json("report.json", &self.report)?;
        self.out.write_json("timings.json", &self.timings)?;
        self.out.finish()?;
        Ok(self.report)
    }

    /// Records the factorization of `level` and stops a strict run on holes.
    fn factorization(&mut self, setup: &Setup, level: &Level, strict: bool) -> Result<(), CliError> {
        self.report.extend(suite::factorization_checks(setup, level));
        self.out.write_json("factorization.json", &factorization_summary(level))?;
        if strict && !level.complete() {
            let d = &level.dressed;
            let first = d.holes[0];
            let err = CliError::Singular { holes: d.holes.len(), location: d.grid.point(first), cond: d.conds[first] };
            self.report.passed = false;
            self.out.write_json("report.json", &self.report)?;
            self.out.write_json("timings.json", &self.timings)?;
            self.out.finish()?;
            return Err(err);
        }
        Ok(())
    }

    fn write_fields(&mut self, level: &Level, fields: &[(&str, Vec<Mat>)]) -> Result<(), CliError> {
        for (name, vals) in fields {
            self.out.write_field_csv(&format!("{name}.csv"), &level.dressed.grid, &[vals], None)?;
        }
        Ok(())
    }
}

/// Runs `cmd`; `strict` is the effective policy (config or `--strict`).
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path, strict: bool) -> Result<RunReport, CliError> {
    let mut run = Run::new(cmd, cfg, out)?;
    match cmd {
        Command::PairCheck => pair_check(&mut run, cfg)?,
        Command::Dress => dress(&mut run, cfg, strict)?,
        Command::Verify => verify(&mut run, cfg, strict)?,
        Command::Flows => flows(&mut run, cfg)?,
        Command::EdsReport => eds_report(&mut run, cfg)?,
        Command::Export => export(&mut run, cfg, strict)?,
    }
    run.finish()
}

fn pair_check(run: &mut Run, cfg: &RunConfig) -> Result<(), CliError> {
    let pair = cfg.pair()?;
    let checks = run.timings.time("algebra", || suite::algebra_checks(&pair, cfg.seed));
    run.report.extend(checks);
    Ok(())
}

fn dress(run: &mut Run, cfg: &RunConfig, strict: bool) -> Result<(), CliError> {
    let setup = Setup::new(cfg)?;
    let grid = cfg.grid()?;
    let level = run.timings.time("dress", || Level::build(&setup, &grid, &[], None))?;
    run.factorization(&setup, &level, strict)?;
    if !level.complete() {
        return Ok(());
    }
    run.report.extend(suite::solution_checks(&setup, &level));
    let geo = run.timings.time("geometry", || suite::geometry(&setup, &level, cfg.verification.delta))?;
    run.report.push(Check::at_most("geometry.curved_flat_sigma", geo.psi.sigma_residual, setup.tol.sigma));
    run.report.push(Check::at_most("geometry.curved_flat_base", geo.psi.base_residual, setup.tol.exact));
    if setup.is_vacuum() {
        run.report.extend(suite::vacuum_checks(&setup, &level, &geo, VACUUM_TOL)?);
    }
    let fields: Vec<_> = suite::level_fields(&level, &geo).into_iter().filter(|(n, _)| *n != "g").collect();
    run.write_fields(&level, &fields)
}

fn verify(run: &mut Run, cfg: &RunConfig, strict: bool) -> Result<(), CliError> {
    let setup = Setup::new(cfg)?;
    let grid = cfg.grid()?;
    let tamper = cfg.verification.tamper.as_ref();
    let algebra = run.timings.time("algebra", || suite::algebra_checks(&setup.pair, cfg.seed));
    run.report.extend(algebra);
    let coarse = run.timings.time("dress", || Level::build(&setup, &grid, &[], tamper))?;
    run.factorization(&setup, &coarse, strict)?;
    if !coarse.complete() {
        return Ok(());
    }
    run.report.extend(suite::solution_checks(&setup, &coarse));
    let fine = if setup.convergence {
        let fine = run.timings.time("dress_refined", || Level::build(&setup, &grid.refined(), &[], tamper))?;
        if !fine.complete() {
            run.report.push(Check::flag("factorization.refined_complete", false, "refined grid has holes"));
            if strict {
                run.factorization(&setup, &fine, true)?;
            }
            return Ok(());
        }
        Some(fine)
    } else {
        None
    };
    let depth = cfg.verification.depth;
    let delta = cfg.verification.delta;
    let stages = run.timings.time("lax", || suite::uu0_checks(&setup, &coarse, fine.as_ref()));
    push_stage(&mut run.report, "lax", stages);
    let geo = run.timings.time("geometry", || -> anyhow::Result<Vec<Check>> {
        let cg = suite::geometry(&setup, &coarse, delta)?;
        let fg = fine.as_ref().map(|f| suite::geometry(&setup, f, delta)).transpose()?;
        let mut checks = suite::geometry_checks(&setup, &cg, fg.as_ref(), delta);
        if setup.is_vacuum() {
            checks.extend(suite::vacuum_checks(&setup, &coarse, &cg, VACUUM_TOL)?);
        }
        Ok(checks)
    });
    push_stage(&mut run.report, "geometry", geo);
    let q = run.timings.time("conservation", || {
        suite::q_checks(&setup, &coarse, fine.as_ref(), depth, cfg.verification.coefficient_depth)
    });
    push_stage(&mut run.report, "q", q);
    drop(fine);
    if let Some(fs) = FlowSetup::from_config(cfg, &setup.pair) {
        let grid = cfg.flow_grid()?;
        let flows = run.timings.time("flows", || suite::flow_checks(&setup, &fs, &grid));
        push_stage(&mut run.report, "flows", flows.map(|o| o.checks));
    }
    let eds = run.timings.time("eds", || suite::eds_checks(&setup.pair, &probe_options(cfg)));
    push_stage(&mut run.report, "eds", eds.map(|(c, _)| c));
    Ok(())
}

/// A stage that fails to compute is itself a failed check.
fn push_stage(report: &mut RunReport, stage: &str, result: anyhow::Result<Vec<Check>>) {
    match result {
        Ok(checks) => report.extend(checks),
        Err(e) => report.push(Check::flag(format!("{stage}.evaluated"), false, format!("{e:#}"))),
    }
}

fn probe_options(cfg: &RunConfig) -> ProbeOptions {
    ProbeOptions { samples: cfg.verification.eds_samples, seed: cfg.seed, ..ProbeOptions::default() }
}

fn flows(run: &mut Run, cfg: &RunConfig) -> Result<(), CliError> {
    let setup = Setup::new(cfg)?;
    let fs = FlowSetup::from_config(cfg, &setup.pair).ok_or_else(|| ConfigError::Invalid {
        field: "flow".into(),
        message: "the flows command needs a flow block".into(),
    })?;
    let grid = cfg.flow_grid()?;
    let outcome = run.timings.time("flows", || suite::flow_checks(&setup, &fs, &grid))?;
    run.report.extend(outcome.checks);
    let fam = &outcome.finest;
    let slices: Vec<&[Mat]> = fam.v.iter().map(|v| v.values.as_slice()).collect();
    run.out.write_field_csv("flow_v.csv", fam.grid(), &slices, Some(&fam.times))?;
    let rows: Vec<Vec<f64>> = outcome.conserved.times.iter().zip(&outcome.conserved.values).map(|(t, v)| vec![*t, *v]).collect();
    run.out.write_rows_csv("conserved.csv", &["t", "integral"], &rows)?;
    run.out.write_json("conserved.json", &outcome.conserved)?;
    Ok(())
}

fn eds_report(run: &mut Run, cfg: &RunConfig) -> Result<(), CliError> {
    let pair = cfg.pair()?;
    let (checks, summary) = run.timings.time("eds", || suite::eds_checks(&pair, &probe_options(cfg)))?;
    run.report.extend(checks);
    run.out.write_json("eds.json", &summary.report)?;
    Ok(())
}

fn export(run: &mut Run, cfg: &RunConfig, strict: bool) -> Result<(), CliError> {
    let setup = Setup::new(cfg)?;
    let grid = cfg.grid()?;
    let level = run.timings.time("dress", || Level::build(&setup, &grid, &[], None))?;
    run.factorization(&setup, &level, strict)?;
    if !level.complete() {
        return Ok(());
    }
    run.report.extend(suite::solution_checks(&setup, &level));
    let geo = run.timings.time("geometry", || suite::geometry(&setup, &level, cfg.verification.delta))?;
    run.write_fields(&level, &suite::level_fields(&level, &geo))?;
    let c = setup.pair.a()[0].clone();
    let q = QSequence::expand(&level.dressed, &c, cfg.verification.depth).map_err(|e| anyhow!(e))?;
    for (n, lvl) in q.levels.iter().enumerate() {
        run.out.write_field_csv(&format!("q_a1_{n}.csv"), &grid, &[lvl], None)?;
    }
    if let Some(fs) = FlowSetup::from_config(cfg, &setup.pair) {
        let fgrid = cfg.flow_grid()?;
        let fam = run.timings.time("flows", || fs.family(&setup, &fgrid, fs.samples))?;
        let slices: Vec<&[Mat]> = fam.v.iter().map(|v| v.values.as_slice()).collect();
        run.out.write_field_csv("flow_v.csv", fam.grid(), &slices, Some(&fam.times))?;
    }
    Ok(())
}
