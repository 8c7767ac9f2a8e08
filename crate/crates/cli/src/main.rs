//! Command-line front end: parse a JSON run configuration, dispatch the
//! solvers/simulations/experiments, and emit deterministic reports.
//!
//! Exit codes: 0 success, 1 validation failure, 2 numerical failure
//! (blow-up), 3 check failure in `check`.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use meanfield_core::error::Error as CoreError;
use meanfield_core::field::{
    eval_adjustment, eval_control, eval_instrumental, eval_measure_derivative,
    eval_minimizer_functional, eval_value, EmpiricalMeasure,
};
use meanfield_core::model::LqModel;
use meanfield_core::ode::TimeGrid;
use meanfield_core::pbp;
use meanfield_core::rng::{CounterRng, Domain};
use meanfield_core::sim::{
    self, moment_audit, simulate, simulate_traced, Deviation, LqClosedLoop, SimConfig, MOMENT_WARN,
};
use meanfield_core::systemic_risk as sr;
use meanfield_core::value::{
    assemble_instrumental, check_identities, solve_adjustment, solve_value,
    InstrumentalCoefficients, ValueCoefficients,
};
use nalgebra::DVector;
use serde_json::{json, Value};

use config::{apply_override, RunConfig};
use report::{config_hash, float_cell, matrix_labels, vector_labels, write_csv, write_json};

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_CHECK: u8 = 3;

const LQ_DEFAULT: &str = include_str!("../../../configs/lq_fixture.json");
const SR_DEFAULT: &str = include_str!("../../../configs/systemic_risk.json");

const USAGE: &str = "\
meanfield — linear-quadratic mean-field social optimization harness

USAGE:
  meanfield <COMMAND> [FLAGS] [--<path.to.key>=<value>...]

COMMANDS:
  solve          Solve the value/adjustment/instrumental coefficient systems
                 (LQ model) and export them as CSV.
  check          Solve the bundled (or configured) LQ model and verify the
                 identity, residual, terminal, normalization, representation
                 and minimizer checks. Exit 3 if any check fails.
  simulate       Simulate the N-agent closed loop under the cooperative law
                 and report Monte Carlo costs.
  pbp            Paired deviation-gap experiment for agent 1 over the
                 configured menu (plus benchmark consistency for LQ models,
                 and the exact-optimum gap for the systemic-risk model).
  scaling        Population sweep of the optimality gap with a log-log fit
                 (systemic-risk: against the exact finite-N law; LQ: over
                 the deviation menu).
  systemic-risk  Solve the inter-bank model (exact finite-N + limit), export
                 coefficient curves, and optionally the finite-N convergence
                 table.

FLAGS:
  --config PATH        JSON run configuration (also accepts a manifest.json
                       from a previous run). Defaults to the bundled LQ
                       fixture, or the bundled systemic-risk configuration
                       for `systemic-risk` and `scaling`.
  --output-dir DIR     Output directory (default: runs/<command>).
  --convergence        For `systemic-risk`: also run the finite-N
                       convergence sweep.
  --help               Show this help.

Any other flag of the form --a.b.c=value overrides the configuration key
`a.b.c` (value parsed as JSON, e.g. --simulation.n_agents=64). Unknown bare
flags are errors.

ENVIRONMENT:
  MEANFIELD_THREADS    Cap the worker count (affects speed only, never
                       results).

OUTPUT:
  Each run writes its reports plus a manifest.json (resolved configuration,
  configuration hash, seed, version, wall time) into the output directory.
  Reports are byte-deterministic given the configuration.
";

struct Failure {
    code: u8,
    message: String,
}

impl From<CoreError> for Failure {
    fn from(err: CoreError) -> Self {
        let code = match err {
            CoreError::BlowUp { .. } => EXIT_NUMERICAL,
            _ => EXIT_VALIDATION,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            message: format!("io error: {err}"),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

struct Cli {
    command: String,
    config_path: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    convergence: bool,
}

fn parse_args(args: &[String]) -> Result<Cli, Failure> {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" {
        println!("{USAGE}");
        std::process::exit(0);
    }
    let command = args[0].clone();
    let known = ["solve", "check", "simulate", "pbp", "scaling", "systemic-risk"];
    if !known.contains(&command.as_str()) {
        return Err(fail(
            EXIT_VALIDATION,
            format!("unknown command `{command}`; expected one of {known:?}"),
        ));
    }
    let mut cli = Cli {
        command,
        config_path: None,
        output_dir: None,
        overrides: Vec::new(),
        convergence: false,
    };
    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--help" | "-h" => {
                println!("{USAGE}");
                std::process::exit(0);
            }
            "--convergence" => cli.convergence = true,
            "--config" => {
                let v = it
                    .next()
                    .ok_or_else(|| fail(EXIT_VALIDATION, "missing value for --config"))?;
                cli.config_path = Some(PathBuf::from(v));
            }
            "--output-dir" => {
                let v = it
                    .next()
                    .ok_or_else(|| fail(EXIT_VALIDATION, "missing value for --output-dir"))?;
                cli.output_dir = Some(PathBuf::from(v));
            }
            other if other.starts_with("--config=") => {
                cli.config_path = Some(PathBuf::from(&other["--config=".len()..]));
            }
            other if other.starts_with("--output-dir=") => {
                cli.output_dir = Some(PathBuf::from(&other["--output-dir=".len()..]));
            }
            other if other.starts_with("--") && other.contains('=') => {
                let body = &other[2..];
                let (path, value) = body.split_once('=').expect("checked contains '='");
                cli.overrides.push((path.to_string(), value.to_string()));
            }
            other => {
                return Err(fail(
                    EXIT_VALIDATION,
                    format!("unknown argument `{other}` (see --help)"),
                ));
            }
        }
    }
    Ok(cli)
}

fn load_config(cli: &Cli) -> Result<(Value, RunConfig), Failure> {
    let raw = match &cli.config_path {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| fail(EXIT_VALIDATION, format!("cannot read {}: {e}", path.display())))?,
        None => match cli.command.as_str() {
            "systemic-risk" | "scaling" => SR_DEFAULT.to_string(),
            _ => LQ_DEFAULT.to_string(),
        },
    };
    let mut doc: Value = serde_json::from_str(&raw)
        .map_err(|e| fail(EXIT_VALIDATION, format!("configuration is not valid JSON: {e}")))?;
    // Accept a manifest from a previous run: unwrap its embedded config.
    if doc.get("command").is_some() && doc.get("config").is_some() {
        doc = doc["config"].clone();
    }
    for (path, value) in &cli.overrides {
        apply_override(&mut doc, path, value)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc.clone())
        .map_err(|e| fail(EXIT_VALIDATION, format!("invalid configuration: {e}")))?;
    Ok((doc, cfg))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    doc: &Value,
    cfg: &RunConfig,
    started: Instant,
) -> Result<(), Failure> {
    let manifest = json!({
        "command": command,
        "config": doc,
        "config_hash": config_hash(doc),
        "seed": cfg.seed(),
        "version": env!("CARGO_PKG_VERSION"),
        "threads": sim::thread_cap(),
        "wall_time_secs": started.elapsed().as_secs_f64(),
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn run(args: &[String]) -> Result<(), Failure> {
    let cli = parse_args(args)?;
    let started = Instant::now();
    let (doc, cfg) = load_config(&cli)?;
    let out_dir = cli
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cli.command));
    std::fs::create_dir_all(&out_dir)?;

    match cli.command.as_str() {
        "solve" => cmd_solve(&cfg, &out_dir)?,
        "check" => cmd_check(&cfg, &out_dir)?,
        "simulate" => cmd_simulate(&cfg, &out_dir)?,
        "pbp" => cmd_pbp(&cfg, &out_dir)?,
        "scaling" => cmd_scaling(&cfg, &out_dir)?,
        "systemic-risk" => cmd_systemic_risk(&cfg, &out_dir, cli.convergence)?,
        _ => unreachable!("command validated in parse_args"),
    }
    write_manifest(&out_dir, &cli.command, &doc, &cfg, started)?;
    Ok(())
}

struct LqSurfaces {
    model: LqModel,
    grid: TimeGrid,
    v: ValueCoefficients,
    m: meanfield_core::value::AdjustmentCoefficients,
    u: InstrumentalCoefficients,
}

fn solve_lq(cfg: &RunConfig) -> Result<LqSurfaces, Failure> {
    let model = cfg.model.to_lq()?.validated()?;
    let grid = cfg.time_grid()?;
    let v = solve_value(&model, grid)?;
    let m = solve_adjustment(&model, &v)?;
    let u = assemble_instrumental(&v, &m)?;
    Ok(LqSurfaces {
        model,
        grid,
        v,
        m,
        u,
    })
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let s = solve_lq(cfg)?;
    let n = s.model.dim_state();
    let grid = s.grid;

    let mut header = vec!["t".to_string()];
    header.extend(matrix_labels("P", n, n));
    header.extend(matrix_labels("Lambda", n, n));
    header.extend(matrix_labels("H", n, n));
    header.extend(vector_labels("S", n));
    header.extend(vector_labels("theta", n));
    header.push("r".to_string());
    let mut rows = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let mut row = vec![grid.time(k)];
        row.extend(s.v.p[k].transpose().iter());
        row.extend(s.v.lambda[k].transpose().iter());
        row.extend(s.v.h[k].transpose().iter());
        row.extend(s.v.s[k].iter());
        row.extend(s.v.theta[k].iter());
        row.push(s.v.r[k]);
        rows.push(row);
    }
    write_csv(&out.join("v_coefficients.csv"), &header, &rows)?;

    let mut header = vec!["t".to_string()];
    header.extend(matrix_labels("Pi1o", n, n));
    header.extend(matrix_labels("Pi2o", n, n));
    header.extend(vector_labels("thetao", n));
    header.push("ro".to_string());
    let mut rows = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let mut row = vec![grid.time(k)];
        row.extend(s.m.pi1[k].transpose().iter());
        row.extend(s.m.pi2[k].transpose().iter());
        row.extend(s.m.theta[k].iter());
        row.push(s.m.r[k]);
        rows.push(row);
    }
    write_csv(&out.join("m_coefficients.csv"), &header, &rows)?;

    let mut header = vec!["t".to_string()];
    header.extend(matrix_labels("Pi1d", n, n));
    header.extend(matrix_labels("Pi2d", n, n));
    header.extend(matrix_labels("Pi3d", n, n));
    header.extend(matrix_labels("Pi4d", n, n));
    header.extend(vector_labels("Sd", n));
    header.extend(vector_labels("thetad", n));
    header.push("rd".to_string());
    let mut rows = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let mut row = vec![grid.time(k)];
        row.extend(s.u.pi1[k].transpose().iter());
        row.extend(s.u.pi2[k].transpose().iter());
        row.extend(s.u.pi3[k].transpose().iter());
        row.extend(s.u.pi4[k].transpose().iter());
        row.extend(s.u.s[k].iter());
        row.extend(s.u.theta[k].iter());
        row.push(s.u.r[k]);
        rows.push(row);
    }
    write_csv(&out.join("u_coefficients.csv"), &header, &rows)?;
    println!(
        "solved LQ coefficient systems (n = {n}) on {} grid points -> {}",
        grid.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

struct Check {
    name: &'static str,
    value: f64,
    threshold: f64,
    /// true: pass if value <= threshold; false: pass if value >= threshold.
    upper: bool,
}

impl Check {
    fn pass(&self) -> bool {
        if self.upper {
            self.value <= self.threshold
        } else {
            self.value >= self.threshold
        }
    }
}

fn cmd_check(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let s = solve_lq(cfg)?;
    let rep = check_identities(&s.model, &s.v, &s.m, &s.u)?;
    let n = s.model.dim_state();
    let horizon = s.model.horizon;

    let mut checks = vec![
        Check {
            name: "z_identity",
            value: rep.z_identity,
            threshold: 1e-6,
            upper: true,
        },
        Check {
            name: "z_ode_residual",
            value: rep.z_ode_residual,
            threshold: 1e-6,
            upper: true,
        },
        Check {
            name: "max_ode_residual",
            value: rep.max_ode_residual(),
            threshold: 1e-6,
            upper: true,
        },
        Check {
            name: "symmetry_defect",
            value: rep.symmetry_defect,
            threshold: 1e-12,
            upper: true,
        },
        Check {
            name: "terminal_defect",
            value: rep.terminal_defect,
            threshold: 1e-12,
            upper: true,
        },
        Check {
            name: "assembly_defect",
            value: rep.assembly_defect,
            threshold: 1e-12,
            upper: true,
        },
        Check {
            name: "min_p_eigenvalue",
            value: rep.min_p_eigenvalue,
            threshold: -1e-9,
            upper: false,
        },
    ];

    // Field-level spot checks on pinned pseudo-random points.
    let mut rng = CounterRng::new(424242, Domain::Initial, 0, 0, 1);
    let mut normalization: f64 = 0.0;
    let mut representation: f64 = 0.0;
    let mut min_gap = f64::INFINITY;
    let mut grad_excess = f64::NEG_INFINITY;
    for trial in 0..200 {
        let t = horizon * (trial as f64 / 199.0);
        let x = rng.normal_vector(n, 1.0);
        let k = 2 + (trial % 6);
        let mu = EmpiricalMeasure::new((0..k).map(|_| rng.normal_vector(n, 1.0)).collect())?;

        let avg: f64 = mu
            .particles()
            .iter()
            .map(|y| eval_measure_derivative(&s.v, t, &x, &mu, y).unwrap())
            .sum::<f64>()
            / mu.len() as f64;
        normalization = normalization.max(avg.abs());

        let lhs = eval_instrumental(&s.u, t, &x, &mu)?;
        let mut shift = 0.0;
        for y in mu.particles() {
            shift += eval_measure_derivative(&s.v, t, y, &mu, &x)?
                - eval_measure_derivative(&s.v, t, y, &mu, y)?;
        }
        shift /= mu.len() as f64;
        let rhs = eval_value(&s.v, t, &x, &mu)? + eval_adjustment(&s.m, t, &mu)? + shift;
        representation = representation.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));

        if trial < 20 {
            let phi = eval_control(&s.v, &s.model, t, &x, &mu)?;
            let phi_value = eval_minimizer_functional(&s.v, &s.model, t, &x, &phi, &mu)?;
            for _ in 0..100 {
                let u_rand = rng.normal_vector(s.model.dim_control(), 10.0);
                let val = eval_minimizer_functional(&s.v, &s.model, t, &x, &u_rand, &mu)?;
                min_gap = min_gap.min(val - phi_value);
            }
            let eps = 1e-6;
            let mut grad = DVector::zeros(s.model.dim_control());
            for i in 0..s.model.dim_control() {
                let mut up = phi.clone();
                let mut dn = phi.clone();
                up[i] += eps;
                dn[i] -= eps;
                grad[i] = (eval_minimizer_functional(&s.v, &s.model, t, &x, &up, &mu)?
                    - eval_minimizer_functional(&s.v, &s.model, t, &x, &dn, &mu)?)
                    / (2.0 * eps);
            }
            grad_excess = grad_excess.max(grad.norm() - 1e-6 * (1.0 + phi.norm()));
        }
    }
    checks.push(Check {
        name: "normalization_defect",
        value: normalization,
        threshold: 1e-12,
        upper: true,
    });
    checks.push(Check {
        name: "representation_defect",
        value: representation,
        threshold: 1e-10,
        upper: true,
    });
    checks.push(Check {
        name: "minimizer_gap",
        value: min_gap,
        threshold: -1e-9,
        upper: false,
    });
    checks.push(Check {
        name: "minimizer_gradient_excess",
        value: grad_excess,
        threshold: 0.0,
        upper: true,
    });

    let all_pass = checks.iter().all(Check::pass);
    let entries: Vec<Value> = checks
        .iter()
        .map(|c| {
            json!({
                "name": c.name,
                "value": c.value,
                "threshold": c.threshold,
                "bound": if c.upper { "upper" } else { "lower" },
                "pass": c.pass(),
            })
        })
        .collect();
    let ode_residuals: Vec<Value> = rep
        .ode_residuals
        .iter()
        .map(|(name, r)| json!({"trajectory": name, "residual": r}))
        .collect();
    write_json(
        &out.join("residual_report.json"),
        &json!({
            "experiment": "check",
            "grid_steps": s.grid.steps(),
            "checks": entries,
            "ode_residuals": ode_residuals,
            "pass": all_pass,
        }),
    )?;
    for c in &checks {
        println!(
            "{} {:<28} value={} threshold={}",
            if c.pass() { "PASS" } else { "FAIL" },
            c.name,
            float_cell(c.value),
            float_cell(c.threshold)
        );
    }
    if all_pass {
        Ok(())
    } else {
        Err(fail(EXIT_CHECK, "one or more checks failed (see residual_report.json)"))
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

enum Loop {
    Lq(LqClosedLoop),
    Sr(sr::SrClosedLoop),
}

impl Loop {
    fn as_population(&self) -> &dyn sim::PopulationModel {
        match self {
            Loop::Lq(l) => l,
            Loop::Sr(l) => l,
        }
    }
}

fn build_loop(cfg: &RunConfig, sim_cfg: &SimConfig) -> Result<Loop, Failure> {
    let steps = sim_cfg.steps(cfg.model.horizon())?;
    match cfg.model.kind() {
        "lq" => {
            let s = solve_lq(cfg)?;
            Ok(Loop::Lq(LqClosedLoop::new(&s.model, &s.v, steps)?))
        }
        _ => {
            let params = cfg.model.to_sr()?;
            params.validate()?;
            let master = sr::solve_master(&params, cfg.time_grid()?)?;
            Ok(Loop::Sr(sr::SrClosedLoop::new(&params, &master, steps)?))
        }
    }
}

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let sim_cfg = cfg.sim_config()?;
    let population = build_loop(cfg, &sim_cfg)?;
    let dev = Deviation::None;

    let rep = if cfg.experiment.trace {
        let (rep, trace) = simulate_traced(population.as_population(), &sim_cfg, &dev)?;
        let n = population.as_population().dim_state();
        let n1 = population.as_population().dim_control();
        let mut header = vec!["path".to_string(), "t".to_string(), "agent".to_string()];
        header.extend(vector_labels("state", n));
        header.extend(vector_labels("control", n1));
        let rows: Vec<Vec<f64>> = trace
            .iter()
            .map(|row| {
                let mut r = vec![row.path as f64, row.t, row.agent as f64];
                r.extend(&row.state);
                r.extend(&row.control);
                r
            })
            .collect();
        write_csv(&out.join("paths.csv"), &header, &rows)?;
        rep
    } else {
        simulate(population.as_population(), &sim_cfg, &dev)?
    };

    if moment_audit(&rep) > MOMENT_WARN {
        eprintln!(
            "warning: max second moment {} exceeds {MOMENT_WARN}; the run looks divergent",
            rep.max_second_moment
        );
    }
    write_json(
        &out.join("simulation_report.json"),
        &json!({
            "experiment": "simulate",
            "seed": sim_cfg.seed,
            "N": sim_cfg.n_agents,
            "paths": sim_cfg.paths,
            "dt": sim_cfg.dt,
            "deviation": dev.label(),
            "mean": rep.mean,
            "stderr": rep.stderr,
            "per_agent_mean": rep.per_agent_mean,
            "max_second_moment": rep.max_second_moment,
            "moment_warning": moment_audit(&rep) > MOMENT_WARN,
            "j_soc": rep.j_soc,
        }),
    )?;
    println!(
        "J_soc = {} +- {} over {} paths (N = {})",
        float_cell(rep.mean),
        float_cell(rep.stderr),
        sim_cfg.paths,
        sim_cfg.n_agents
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pbp
// ---------------------------------------------------------------------------

fn gaps_json(report: &pbp::GapReport) -> Vec<Value> {
    report
        .entries
        .iter()
        .map(|e| json!({"deviation": e.deviation, "mean": e.mean, "stderr": e.stderr}))
        .collect()
}

fn cmd_pbp(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let sim_cfg = cfg.sim_config()?;
    let steps = sim_cfg.steps(cfg.model.horizon())?;
    let grid = cfg.time_grid()?;

    let report_value = match cfg.model.kind() {
        "lq" => {
            let s = solve_lq(cfg)?;
            let (menu, wants_exact) = cfg.menu(s.model.dim_control());
            if wants_exact {
                return Err(CoreError::Validation(
                    "the exact-oracle deviation is only available for the systemic-risk model"
                        .into(),
                )
                .into());
            }
            let pm = LqClosedLoop::new(&s.model, &s.v, steps)?;
            let gaps = pbp::run_gap(&pm, &sim_cfg, &menu)?;
            let consistency = pbp::run_benchmark_consistency(
                &s.model,
                &s.v,
                &s.u,
                &sim_cfg,
                &cfg.n_list(&[sim_cfg.n_agents]),
            )?;
            let entries: Vec<Value> = consistency
                .entries
                .iter()
                .map(|e| {
                    json!({
                        "N": e.n_agents,
                        "mc_mean": e.mc_mean,
                        "benchmark_mean": e.benchmark_mean,
                        "discrepancy": e.discrepancy,
                        "stderr": e.stderr,
                        "scaled": e.scaled,
                    })
                })
                .collect();
            json!({
                "experiment": "pbp",
                "seed": sim_cfg.seed,
                "N": sim_cfg.n_agents,
                "paths": sim_cfg.paths,
                "gaps": gaps_json(&gaps),
                "eps_hat": gaps.eps_hat(),
                "slope": Value::Null,
                "slope_ci": Value::Null,
                "consistency": {
                    "entries": entries,
                    "kendall_tau": consistency.kendall_tau,
                    "kendall_p_increasing": consistency.kendall_p_increasing,
                },
            })
        }
        _ => {
            let params = cfg.model.to_sr()?;
            params.validate()?;
            let master = sr::solve_master(&params, grid)?;
            let pm = sr::SrClosedLoop::new(&params, &master, steps)?;
            let (mut menu, wants_exact) = cfg.menu(1);
            let direct = sr::solve_direct(&params, sim_cfg.n_agents, grid)?;
            if wants_exact || cfg.experiment.menu.is_none() {
                menu.push(sr::exact_oracle_deviation(&direct));
            }
            let gaps = pbp::run_gap(&pm, &sim_cfg, &menu)?;
            let direct_loop = sr::SrDirectLoop::new(&params, &direct, steps)?;
            let optimum = sim::paired_population_diff(&pm, &direct_loop, &sim_cfg)?;
            json!({
                "experiment": "pbp",
                "seed": sim_cfg.seed,
                "N": sim_cfg.n_agents,
                "paths": sim_cfg.paths,
                "gaps": gaps_json(&gaps),
                "eps_hat": gaps.eps_hat(),
                "slope": Value::Null,
                "slope_ci": Value::Null,
                "optimum_gap": {
                    "mean": -optimum.diff_mean,
                    "stderr": optimum.diff_stderr,
                },
            })
        }
    };
    write_json(&out.join("pbp_report.json"), &report_value)?;
    println!("pbp report -> {}", out.join("pbp_report.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// scaling
// ---------------------------------------------------------------------------

fn scaling_json(report: &pbp::ScalingReport) -> (Value, Vec<Vec<f64>>) {
    let ci = 1.96 * report.fit.slope_stderr;
    let gaps: Vec<Value> = report
        .gap_reports
        .iter()
        .flat_map(|g| {
            let n = g.n_agents;
            g.entries.iter().map(move |e| {
                json!({"N": n, "deviation": e.deviation, "mean": e.mean, "stderr": e.stderr})
            })
        })
        .collect();
    let rows: Vec<Vec<f64>> = report
        .n_list
        .iter()
        .zip(report.eps_hat.iter().zip(&report.stderr))
        .map(|(&n, (&eps, &se))| vec![n as f64, eps, se])
        .collect();
    (
        json!({
            "experiment": "scaling",
            "seed": report.seed,
            "N": report.n_list,
            "paths": report.paths,
            "eps_hat": report.eps_hat,
            "stderr": report.stderr,
            "gaps": gaps,
            "slope": report.fit.slope,
            "slope_ci": [report.fit.slope - ci, report.fit.slope + ci],
            "intercept": report.fit.intercept,
        }),
        rows,
    )
}

fn cmd_scaling(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let sim_cfg = cfg.sim_config()?;
    let n_list = cfg.n_list(&[8, 16, 32, 64]);
    let grid = cfg.time_grid()?;

    let outcome = match cfg.model.kind() {
        "lq" => {
            let s = solve_lq(cfg)?;
            let (menu, wants_exact) = cfg.menu(s.model.dim_control());
            if wants_exact {
                return Err(CoreError::Validation(
                    "the exact-oracle deviation is only available for the systemic-risk model"
                        .into(),
                )
                .into());
            }
            let model = s.model.clone();
            let v = s.v.clone();
            pbp::run_scaling(&n_list, &sim_cfg, move |_, c| {
                let steps = c.steps(model.horizon)?;
                let pm = LqClosedLoop::new(&model, &v, steps)?;
                Ok((Box::new(pm) as Box<dyn sim::PopulationModel>, menu.clone()))
            })
        }
        _ => {
            let params = cfg.model.to_sr()?;
            params.validate()?;
            pbp::run_sr_optimum_scaling(&params, &sim_cfg, &n_list, grid)
        }
    };

    match outcome {
        Ok(report) => {
            let (value, rows) = scaling_json(&report);
            write_json(&out.join("scaling_report.json"), &value)?;
            write_csv(
                &out.join("scaling.csv"),
                &["N".to_string(), "eps_hat".to_string(), "stderr".to_string()],
                &rows,
            )?;
            println!(
                "scaling slope = {} (eps_hat over N = {:?})",
                float_cell(report.fit.slope),
                report.n_list
            );
            Ok(())
        }
        Err(CoreError::InsufficientSignal(msg)) => {
            write_json(
                &out.join("scaling_report.json"),
                &json!({
                    "experiment": "scaling",
                    "seed": sim_cfg.seed,
                    "N": n_list,
                    "paths": sim_cfg.paths,
                    "gaps": [],
                    "slope": Value::Null,
                    "slope_ci": Value::Null,
                    "insufficient_signal": msg,
                }),
            )?;
            println!("scaling: insufficient signal (gaps below Monte Carlo resolution)");
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// systemic-risk
// ---------------------------------------------------------------------------

fn cmd_systemic_risk(cfg: &RunConfig, out: &Path, convergence_flag: bool) -> Result<(), Failure> {
    let params = cfg.model.to_sr()?;
    params.validate()?;
    let grid = cfg.time_grid()?;
    let n_agents = cfg
        .simulation
        .as_ref()
        .map(|s| s.n_agents)
        .unwrap_or(8)
        .max(2);

    let master = sr::solve_master(&params, grid)?;
    let coupled = sr::solve_master_coupled(&params, grid)?;
    let direct = sr::solve_direct(&params, n_agents, grid)?;

    let header: Vec<String> = ["t", "pi1", "pi2", "Pd", "P", "Lambda", "H", "r"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .map(|k| {
            vec![
                grid.time(k),
                direct.pi1[k],
                direct.pi2[k],
                master.pd[k],
                master.p[k],
                master.lambda[k],
                master.h[k],
                master.r[k],
            ]
        })
        .collect();
    write_csv(&out.join("sr_coefficients.csv"), &header, &rows)?;

    let mut identity: f64 = 0.0;
    let mut p_vs_pd: f64 = 0.0;
    for k in 0..grid.len() {
        identity = identity.max((coupled.lambda[k] + 2.0 * coupled.h[k] + coupled.p[k]).abs());
        p_vs_pd = p_vs_pd.max((master.p[k] - master.pd[k]).abs());
    }
    let mut control_forms: f64 = 0.0;
    for trial in 0..100 {
        let t = params.horizon * (trial as f64 / 99.0);
        let x = -1.5 + 0.031 * trial as f64;
        let xbar = 1.0 - 0.017 * trial as f64;
        let a = sr::control_limit(&master, t, x, xbar)?;
        let b = sr::control_limit_master_form(&master, t, x, xbar)?;
        control_forms = control_forms.max((a - b).abs());
    }
    let mut report = json!({
        "experiment": "systemic-risk",
        "seed": cfg.seed(),
        "N": n_agents,
        "paths": cfg.simulation.as_ref().map(|s| s.paths),
        "identity_lambda_2h_plus_p": identity,
        "p_vs_pd": p_vs_pd,
        "control_form_agreement": control_forms,
    });

    if convergence_flag || cfg.experiment.convergence {
        let n_list = cfg.n_list(&[4, 8, 16, 32, 64, 128, 256]);
        let conv = sr::convergence_report(&params, &n_list, grid)?;
        let rows: Vec<Vec<f64>> = conv
            .entries
            .iter()
            .map(|e| vec![e.n_agents as f64, e.e1, e.e2])
            .collect();
        write_csv(
            &out.join("convergence.csv"),
            &["N".to_string(), "e1".to_string(), "e2".to_string()],
            &rows,
        )?;
        let slope_json = |fit: &Option<meanfield_core::stats::LinearFit>| match fit {
            Some(f) => json!({
                "slope": f.slope,
                "slope_ci": [f.slope - 1.96 * f.slope_stderr, f.slope + 1.96 * f.slope_stderr],
                "intercept": f.intercept,
            }),
            None => Value::Null,
        };
        report["convergence"] = json!({
            "n_list": n_list,
            "e1_fit": slope_json(&conv.slope1),
            "e2_fit": slope_json(&conv.slope2),
        });
    }
    write_json(&out.join("sr_report.json"), &report)?;
    println!(
        "identity max|Lambda+2H+P| = {}, max|P-Pd| = {}",
        float_cell(identity),
        float_cell(p_vs_pd)
    );
    Ok(())
}
