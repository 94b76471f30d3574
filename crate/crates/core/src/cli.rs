//! Command-line front end: one subcommand per pipeline stage, artifacts in an
//! output directory, exit codes 0 (ok), 1 (bad input) and 2 (numerical failure).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::adjoint::adjoint_certificate;
use crate::config::{load_config, RunConfig};
use crate::drift::ControlPath;
use crate::error::{Error, Result};
use crate::forward::{energy_certificate, StateTrajectory};
use crate::grid::{make_grid, moments};
use crate::optimizer::{multi_start, optimize, zero_node_count};
use crate::oracles::{fd_directional_derivative, l1_error_against_oracle, moment_ode_affine};
use crate::reduced::{frechet_probe, gradient_from, kkt_residual, loglog_slope, smallness_certificate, vi_residual, KktResidual, Problem};

/// Pairwise distance under which multistart minimisers count as one.
const UNIQUENESS_TOL: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "ensemble-control", version, about = "Optimal control of Liouville ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the state equation for the configured control.
    Forward(RunArgs),
    /// Solve the adjoint equation for the configured control.
    Adjoint(RunArgs),
    /// Evaluate the reduced cost.
    Cost(RunArgs),
    /// Assemble the reduced gradient.
    Grad(RunArgs),
    /// Frechet remainder probe and finite-difference check of the gradient.
    GradCheck(RunArgs),
    /// Run the proximal gradient method from the configured control.
    Optimize(RunArgs),
    /// Optimise from one random start per seed and compare the minimisers.
    Multistart(RunArgs),
    /// Refinement study against the exact affine flow and the moment ODE.
    OracleCompare(RunArgs),
    /// Energy, adjoint and smallness certificates.
    Certify(RunArgs),
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    base: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        File::create(&p).map(BufWriter::new).map_err(|e| io_err(&p, e))
    }

    fn write_json(&self, name: &str, v: &Value) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, v).map_err(|e| io_err(&self.path(name), e))?;
        writeln!(w).map_err(|e| io_err(&self.path(name), e))
    }

    fn write_control(&self, name: &str, u: &ControlPath<f64>) -> Result<()> {
        let mut w = self.create(name)?;
        u.write_csv(&mut w).map_err(|e| io_err(&self.path(name), e))
    }

    fn problem(&self) -> Result<Problem<f64>> {
        self.cfg.problem()
    }

    fn control(&self) -> Result<ControlPath<f64>> {
        self.cfg.control(&self.base)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (name, args) = match &cli.command {
        Command::Forward(a) => ("forward", a),
        Command::Adjoint(a) => ("adjoint", a),
        Command::Cost(a) => ("cost", a),
        Command::Grad(a) => ("grad", a),
        Command::GradCheck(a) => ("grad-check", a),
        Command::Optimize(a) => ("optimize", a),
        Command::Multistart(a) => ("multistart", a),
        Command::OracleCompare(a) => ("oracle-compare", a),
        Command::Certify(a) => ("certify", a),
    };
    let ctx = match setup(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let result = match &cli.command {
        Command::Forward(_) => cmd_forward(&ctx),
        Command::Adjoint(_) => cmd_adjoint(&ctx),
        Command::Cost(_) => cmd_cost(&ctx),
        Command::Grad(_) => cmd_grad(&ctx),
        Command::GradCheck(_) => cmd_grad_check(&ctx),
        Command::Optimize(_) => cmd_optimize(&ctx),
        Command::Multistart(_) => cmd_multistart(&ctx),
        Command::OracleCompare(_) => cmd_oracle_compare(&ctx),
        Command::Certify(_) => cmd_certify(&ctx),
    };
    match result.and_then(|mut report| {
        report["command"] = json!(name);
        report["status"] = json!("ok");
        ctx.write_json("report.json", &report)
    }) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                return 1;
            }
            let kind = format!("{e:?}");
            let kind = kind.split(['(', ' ', '{']).next().unwrap_or("").to_string();
            let diag = json!({ "command": name, "status": "error", "kind": kind, "message": e.to_string() });
            let _ = ctx.write_json("report.json", &diag);
            2
        }
    }
}

fn setup(args: &RunArgs) -> Result<Ctx> {
    let cfg = load_config(&args.config)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let ctx = Ctx { cfg, out, base };
    let mut w = ctx.create("resolved_config.json")?;
    writeln!(w, "{}", ctx.cfg.to_json()).map_err(|e| io_err(&ctx.path("resolved_config.json"), e))?;
    Ok(ctx)
}

fn write_trajectory(ctx: &Ctx, traj: &StateTrajectory<f64>, prefix: &str) -> Result<()> {
    let mut w = ctx.create("trajectory_summary.csv")?;
    let p = ctx.path("trajectory_summary.csv");
    writeln!(w, "t,mass,min,l2,h0_2,outflow,injected").map_err(|e| io_err(&p, e))?;
    for d in traj.diagnostics() {
        writeln!(w, "{},{},{},{},{},{},{}", f(d.t), f(d.mass), f(d.min), f(d.l2), f(d.h0k2), f(d.outflow), f(d.injected))
            .map_err(|e| io_err(&p, e))?;
    }
    let dir = ctx.path("snapshots");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let nt = traj.time().nt();
    for n in (0..=nt).filter(|n| n % ctx.cfg.output.stride == 0 || *n == nt) {
        let name = dir.join(format!("{prefix}_{n:05}.csv"));
        let file = File::create(&name).map_err(|e| io_err(&name, e))?;
        traj.state(n)?.write_csv(BufWriter::new(file)).map_err(|e| io_err(&name, e))?;
    }
    Ok(())
}

fn f(v: f64) -> String {
    crate::grid::fmt17(v)
}

fn kkt_json(k: &KktResidual<f64>) -> Value {
    json!({
        "stationarity": k.stationarity,
        "complement_upper": k.complement_upper,
        "complement_lower": k.complement_lower,
        "sign_consistency": k.sign_consistency,
        "vi_residual": k.vi_residual,
        "max": k.max(),
    })
}

fn trajectory_json(traj: &StateTrajectory<f64>) -> Value {
    let d = traj.diagnostics();
    let mass0 = d[0].mass;
    let mut budget = mass0;
    let mut defect: f64 = 0.0;
    for s in &d[1..] {
        budget += s.injected - s.outflow;
        defect = defect.max((s.mass - budget).abs());
    }
    json!({
        "scheme": traj.scheme().name(),
        "mass_initial": mass0,
        "mass_final": d[d.len() - 1].mass,
        "mass_balance_defect": defect,
        "min_density": d.iter().fold(f64::INFINITY, |m, s| m.min(s.min)),
        "total_outflow": traj.total_outflow(),
        "boundary_leak": traj.boundary_leak(),
        "substeps": traj.schedule().iter().sum::<usize>(),
    })
}

fn cmd_forward(ctx: &Ctx) -> Result<Value> {
    let p = ctx.problem()?;
    let u = ctx.control()?;
    let traj = p.state(&u, &p.forward)?;
    write_trajectory(ctx, &traj, "rho")?;
    Ok(json!({ "trajectory": trajectory_json(&traj) }))
}

fn cmd_adjoint(ctx: &Ctx) -> Result<Value> {
    let p = ctx.problem()?;
    let u = ctx.control()?;
    let adj = crate::adjoint::solve_adjoint(&p.cost, &p.drift(&u), &p.time, &p.grid, &p.adjoint)?;
    let path = ctx.path("adjoint_summary.csv");
    let mut w = ctx.create("adjoint_summary.csv")?;
    writeln!(w, "t,l2,h0_negk,traced").map_err(|e| io_err(&path, e))?;
    for d in adj.diagnostics() {
        let h = d.h0_negk.map(f).unwrap_or_default();
        writeln!(w, "{},{},{},{}", f(d.t), f(d.l2), h, d.traced).map_err(|e| io_err(&path, e))?;
    }
    let dir = ctx.path("snapshots");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let nt = p.time.nt();
    for n in (0..=nt).filter(|n| n % ctx.cfg.output.stride == 0 || *n == nt) {
        let name = dir.join(format!("q_{n:05}.csv"));
        let file = File::create(&name).map_err(|e| io_err(&name, e))?;
        adj.state(n)?.write_csv(BufWriter::new(file)).map_err(|e| io_err(&name, e))?;
    }
    let traced: usize = adj.diagnostics().iter().map(|d| d.traced).sum();
    Ok(json!({ "adjoint": { "l2_initial": adj.diagnostics()[0].l2, "traced_cells": traced } }))
}

fn cmd_cost(ctx: &Ctx) -> Result<Value> {
    let p = ctx.problem()?;
    let e = p.evaluate(&ctx.control()?)?;
    let c = e.cost;
    Ok(json!({
        "cost": {
            "running": c.running,
            "terminal": c.terminal,
            "l2sq": c.controls.l2sq,
            "l1": c.controls.l1,
            "l1_lumped": c.controls.l1_lumped,
            "h1sq": c.controls.h1sq,
            "smooth": c.smooth,
            "total": c.total,
            "objective": c.objective,
        },
        "trajectory": trajectory_json(&e.state),
    }))
}

fn cmd_grad(ctx: &Ctx) -> Result<Value> {
    let p = ctx.problem()?;
    let u = ctx.control()?;
    let e = p.evaluate(&u)?;
    let g = gradient_from(&p, &e)?;
    ctx.write_control("control_gradient.csv", &g.l2)?;
    ctx.write_control("control_active_gradient.csv", &g.active)?;
    let pinned = p.cost.nu > 0.0;
    let kkt = kkt_residual(&u, &g.l2, p.cost.delta, &p.bounds, None, pinned);
    Ok(json!({
        "gradient": {
            "metric": format!("{:?}", g.metric),
            "l2_norm": g.l2.norm(),
            "active_norm": g.active.norm(),
            "ibp_discrepancy": g.discrepancy,
            "vi_residual": vi_residual(&u, &g.l2, p.cost.delta, &p.bounds, pinned),
        },
        "kkt": kkt_json(&kkt),
        "cost": e.cost.total,
    }))
}

/// Smooth direction `sin(pi t / T)` in every component.
fn probe_direction(p: &Problem<f64>) -> ControlPath<f64> {
    let d = p.dim();
    let t_final = p.time.t_final();
    ControlPath::from_fn(&p.time, d, |t| {
        let s = (std::f64::consts::PI * t / t_final).sin();
        (vec![s; d], vec![0.5 * s; d])
    })
}

fn cmd_grad_check(ctx: &Ctx) -> Result<Value> {
    let p = ctx.problem()?;
    let u = ctx.control()?;
    let dir = probe_direction(&p);
    let eps: Vec<f64> = (0..6).map(|i| 0.1 * 0.5f64.powi(i)).collect();
    let probe = frechet_probe(&u, &dir, &eps, &p)?;
    let g = gradient_from(&p, &p.evaluate(&u)?)?;
    let adjoint = g.l2.dot(&dir);
    let fd = fd_directional_derivative(&p, &u, &dir, 1e-4)?;
    let rel = (adjoint - fd).abs() / fd.abs().max(f64::MIN_POSITIVE);
    Ok(json!({
        "slope": probe.slope,
        "eps": probe.eps,
        "remainders": probe.remainders,
        "lipschitz_ratio": probe.lipschitz_ratio,
        "interior": probe.interior,
        "directional_derivative": { "gradient": adjoint, "finite_difference": fd, "relative_error": rel },
        "ibp_discrepancy": g.discrepancy,
    }))
}

fn cmd_optimize(ctx: &Ctx) -> Result<Value> {
    let p = ctx.problem()?;
    let u0 = ctx.control()?;
    let cfg = ctx.cfg.optim_config()?;
    let r = optimize(&p, &u0, &cfg)?;
    ctx.write_control("control_initial.csv", &u0)?;
    ctx.write_control("control_opt.csv", &r.control)?;
    let mut w = ctx.create("iterations.csv")?;
    r.write_iterations(&mut w).map_err(|e| io_err(&ctx.path("iterations.csv"), e))?;
    let e = p.evaluate(&r.control)?;
    write_trajectory(ctx, &e.state, "rho")?;
    let costs = r.costs();
    let mom = moments(&e.state.terminal()).ok();
    Ok(json!({
        "termination": r.termination.name(),
        "iterations": r.iterations,
        "cost_initial": costs[0],
        "cost_final": r.final_cost(),
        "cost_monotone": costs.windows(2).all(|c| c[1] <= c[0]),
        "feasible": r.feasible,
        "kkt": kkt_json(&r.kkt),
        "zero_nodes": zero_node_count(&r.control),
        "terminal_mean": mom.map(|m| m.mean[..p.dim()].to_vec()),
        "trajectory": trajectory_json(&e.state),
    }))
}

fn cmd_multistart(ctx: &Ctx) -> Result<Value> {
    let p = ctx.problem()?;
    let cfg = ctx.cfg.optim_config()?;
    let rep = multi_start(&p, &cfg, UNIQUENESS_TOL)?;
    for (s, r) in rep.seeds.iter().zip(&rep.runs) {
        ctx.write_control(&format!("control_seed_{s}.csv"), &r.control)?;
    }
    let small = smallness_certificate(&p, ctx.cfg.constants.c_universal)?;
    let runs: Vec<Value> = rep
        .seeds
        .iter()
        .zip(&rep.runs)
        .map(|(s, r)| {
            json!({
                "seed": s,
                "termination": r.termination.name(),
                "iterations": r.iterations,
                "cost_final": r.final_cost(),
                "kkt_max": r.kkt.max(),
                "norm": r.control.norm(),
            })
        })
        .collect();
    Ok(json!({
        "runs": runs,
        "distances": rep.distances,
        "max_distance": rep.max_distance,
        "max_norm": rep.max_norm,
        "uniqueness_tol": rep.uniqueness_tol,
        "agree": rep.agree,
        "smallness": {
            "k_tilde": small.k_tilde,
            "ratio": small.ratio,
            "pass": small.pass,
            "degenerate": small.degenerate,
            "c_universal": small.c_universal,
        },
    }))
}

fn cmd_oracle_compare(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    if !cfg.source()?.is_zero() {
        return Err(Error::InvalidArgument("oracle comparison needs a zero source".into()));
    }
    let p = ctx.problem()?;
    let u = ctx.control()?;
    let drift = p.drift(&u);
    let preset = cfg.rho0_preset()?;
    let scheme = p.forward.scheme;
    let finest = cfg.grid.n.clone();
    let mut levels = Vec::new();
    for div in [4usize, 2, 1] {
        let n: Vec<usize> = finest.iter().map(|n| n / div).collect();
        if n.iter().all(|n| *n >= 8) {
            levels.push(n);
        }
    }
    let mut errors = Vec::new();
    for n in &levels {
        let grid = make_grid(cfg.grid.dim, &cfg.grid.lo, &cfg.grid.hi, n)?;
        errors.push(l1_error_against_oracle(&grid, &preset, &drift, &p.time, scheme)?);
    }
    let ns: Vec<f64> = levels.iter().map(|n| n[0] as f64).collect();
    let pairwise: Vec<f64> = errors.windows(2).zip(ns.windows(2)).map(|(e, n)| (e[0] / e[1]).ln() / (n[1] / n[0]).ln()).collect();
    let order = if errors.len() >= 2 { Some(-loglog_slope(&ns, &errors)) } else { None };

    let traj = p.state(&u, &p.forward)?;
    let m0 = moments(&p.rho0)?;
    let ode = moment_ode_affine(&p.a0, &u, m0.mean, m0.variance, &p.time)?;
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    traj.for_each_state(|n, rho| {
        let m = moments(&crate::grid::ScalarField { grid: p.grid, values: rho.to_vec() })?;
        for r in 0..p.dim() {
            mean_err = mean_err.max((m.mean[r] - ode.mean[n][r]).abs());
            var_err = var_err.max((m.variance[r] - ode.variance[n][r]).abs());
        }
        Ok(())
    })?;
    Ok(json!({
        "scheme": scheme.name(),
        "n": levels,
        "l1_error": errors,
        "pairwise_order": pairwise,
        "order": order,
        "moments": { "max_mean_error": mean_err, "max_variance_error": var_err },
    }))
}

fn cmd_certify(ctx: &Ctx) -> Result<Value> {
    let p = ctx.problem()?;
    let u = ctx.control()?;
    let c_cert = ctx.cfg.constants.c_cert;
    let traj = p.state(&u, &p.forward)?;
    let mut energy = Vec::new();
    let mut all = true;
    for m in [0usize, 1] {
        for k in [0i32, 2] {
            let c = energy_certificate(&traj, &p.source, m, k, c_cert)?;
            all &= c.pass;
            energy.push(json!({ "m": m, "k": k, "pass": c.pass, "fitted_c": c.fitted_c, "c_cert": c.c_cert }));
        }
    }
    let adj = crate::adjoint::solve_adjoint(&p.cost, &p.drift(&u), &p.time, &p.grid, &p.adjoint)?;
    let ac = adjoint_certificate(&adj, c_cert)?;
    let small = smallness_certificate(&p, ctx.cfg.constants.c_universal)?;
    Ok(json!({
        "energy": energy,
        "energy_pass": all,
        "adjoint": { "k": ac.k, "pass": ac.pass, "fitted_c": ac.fitted_c },
        "smallness": {
            "k_tilde": small.k_tilde,
            "ratio": small.ratio,
            "pass": small.pass,
            "degenerate": small.degenerate,
            "c_universal": small.c_universal,
        },
        "trajectory": trajectory_json(&traj),
    }))
}
