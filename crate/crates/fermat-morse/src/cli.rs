//! Command-line front end: scenario loading, dispatch, report emission.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use crate::chart::ChartPoint;
use crate::error::{Error, Result};
use crate::geodesic::{integrate_geodesic, Geodesic};
use crate::hessian::{discrete_index, H1Basis, LocalizedLagrangian, KERNEL_TOL};
use crate::ode::OdeOptions;
use crate::report::{self, ReportWriter};
use crate::scenario::StationaryScenario;
use crate::{bridge, jacobi, morse, shooting};

#[derive(Parser)]
#[command(name = "fermat-morse", version, about = "Fermat geodesics, Morse indices and stationary-spacetime lifts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Scenario description file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory for reports and dumps.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write two-column plot-data series.
    #[arg(long)]
    pub plot_data: bool,
    /// Seed for the deterministic shooting grids.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Integrator relative tolerance (absolute tolerance is tol * 1e-2).
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

#[derive(Args)]
pub struct ConnectArgs {
    /// Start point coordinates, comma separated (chart 0).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub p0: Vec<f64>,
    /// End point coordinates, comma separated (chart 0).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub q0: Vec<f64>,
    /// Length budget for the enumeration.
    #[arg(long, default_value_t = 10.0)]
    pub l_max: f64,
    /// Number of shooting seeds.
    #[arg(long, default_value_t = 256)]
    pub seed_budget: usize,
}

#[derive(Subcommand)]
pub enum Command {
    /// Integrate one geodesic from an initial point and velocity.
    Shoot {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        p0: Vec<f64>,
        /// Initial velocity components, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        v0: Vec<f64>,
    },
    /// Enumerate geodesics connecting two points.
    Connect {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        connect: ConnectArgs,
    },
    /// Conjugate instants and Morse index of each connecting geodesic.
    Index {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        connect: ConnectArgs,
    },
    /// Lightlike lifts with the Fermat/spacetime index comparison.
    Bridge {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        connect: ConnectArgs,
        /// Emission time of the lift.
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
    },
    /// Timelike geodesics with prescribed proper-time span.
    Timelike {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        connect: ConnectArgs,
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        /// Proper-time span between emission and arrival.
        #[arg(long)]
        s_bar: f64,
    },
    /// Discretized index form: index and kernel per connecting geodesic.
    Hessian {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        connect: ConnectArgs,
        /// Number of mesh elements.
        #[arg(long, default_value_t = 400)]
        elements: usize,
    },
    /// Morse series of the connecting geodesics and the Morse relations.
    Morse {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        connect: ConnectArgs,
    },
    /// Image count and arrival times for a lensing configuration.
    Lens {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        connect: ConnectArgs,
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
    },
}

fn ode_options(tol: f64) -> OdeOptions {
    OdeOptions { rtol: tol, atol: tol * 1e-2, ..OdeOptions::default() }
}

fn chart_point(coords: &[f64], scn: &StationaryScenario, name: &str) -> Result<ChartPoint> {
    if coords.len() != scn.dim() {
        return Err(Error::Config(format!(
            "{name} has {} coordinates, scenario dimension is {}",
            coords.len(),
            scn.dim()
        )));
    }
    Ok(ChartPoint::new(0, DVector::from_column_slice(coords)))
}

fn load(common: &CommonArgs) -> Result<(Arc<StationaryScenario>, String)> {
    let scn = StationaryScenario::from_file(&common.scenario)?;
    let name = common
        .scenario
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((Arc::new(scn), name))
}

fn geodesic_record(label: usize, g: &Geodesic) -> serde_json::Value {
    json!({
        "kind": "geodesic",
        "id": label,
        "length": g.f_length,
        "initial_velocity": g.initial_velocity().as_slice(),
        "chart_switches": g.chart_switches,
        "speed_drift": g.speed_drift,
    })
}

fn dump_geodesic(
    w: &ReportWriter,
    common: &CommonArgs,
    stem: &str,
    g: &Geodesic,
) -> Result<()> {
    report::write_trajectory(w.out_dir(), stem, g, 200)?;
    if common.plot_data {
        report::write_plot_series(w.out_dir(), stem, &report::trace_series(g, 200))?;
    }
    Ok(())
}

fn connect_geodesics(
    scn: &Arc<StationaryScenario>,
    common: &CommonArgs,
    c: &ConnectArgs,
    opts: &OdeOptions,
) -> Result<(ChartPoint, ChartPoint, Vec<Geodesic>, shooting::ConnectDiagnostics)> {
    let p0 = chart_point(&c.p0, scn, "--p0")?;
    let q0 = chart_point(&c.q0, scn, "--q0")?;
    let (geods, diag) =
        shooting::connect_with_budget(scn, &p0, &q0, c.l_max, c.seed_budget, common.seed, opts)?;
    if geods.is_empty() {
        return Err(Error::NoConnection);
    }
    Ok((p0, q0, geods, diag))
}

/// Runs one parsed command; the error-to-exit-code mapping lives in `run`.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Shoot { common, p0, v0 } => {
            let (scn, name) = load(&common)?;
            let opts = ode_options(common.tol);
            let p0 = chart_point(&p0, &scn, "--p0")?;
            if v0.len() != scn.dim() {
                return Err(Error::Config("--v0 dimension mismatch".into()));
            }
            let g = integrate_geodesic(&scn, &p0, &DVector::from_column_slice(&v0), &opts)?;
            let mut w = ReportWriter::new(&common.out, "shoot", &name, common.seed)?;
            w.record_value(geodesic_record(0, &g))?;
            dump_geodesic(&w, &common, "shoot-0", &g)?;
            w.finish()?;
        }
        Command::Connect { common, connect } => {
            let (scn, name) = load(&common)?;
            let opts = ode_options(common.tol);
            let (_, _, geods, diag) = connect_geodesics(&scn, &common, &connect, &opts)?;
            let mut w = ReportWriter::new(&common.out, "connect", &name, common.seed)?;
            for (i, g) in geods.iter().enumerate() {
                w.record_value(geodesic_record(i, g))?;
                dump_geodesic(&w, &common, &format!("connect-{i}"), g)?;
            }
            w.record_value(json!({
                "kind": "summary",
                "found": geods.len(),
                "seeds_tried": diag.seeds_tried,
                "converged": diag.converged,
            }))?;
            w.finish()?;
        }
        Command::Index { common, connect } => {
            let (scn, name) = load(&common)?;
            let opts = ode_options(common.tol);
            let (_, _, geods, _) = connect_geodesics(&scn, &common, &connect, &opts)?;
            let mut w = ReportWriter::new(&common.out, "index", &name, common.seed)?;
            let mut degenerate = false;
            for (i, g) in geods.iter().enumerate() {
                let rep = jacobi::conjugate_instants(g, jacobi::RANK_TOL, &opts)?;
                degenerate |= rep.endpoint_conjugate;
                w.record_value(json!({
                    "kind": "index",
                    "id": i,
                    "length": g.f_length,
                    "mu": rep.mu,
                    "instants": rep.instants,
                    "endpoint_conjugate": rep.endpoint_conjugate,
                }))?;
            }
            w.finish()?;
            if degenerate {
                return Err(Error::Degenerate("conjugate endpoint".into()));
            }
        }
        Command::Bridge { common, connect, t0 } => {
            let (scn, name) = load(&common)?;
            let opts = ode_options(common.tol);
            let (_, _, geods, _) = connect_geodesics(&scn, &common, &connect, &opts)?;
            let mut w = ReportWriter::new(&common.out, "bridge", &name, common.seed)?;
            let mut all_equal = true;
            for (i, g) in geods.iter().enumerate() {
                let lift = bridge::lift_lightlike(g, t0)?;
                let check = bridge::index_equality_check(g, &opts)?;
                all_equal &= check.equal;
                w.record_value(json!({
                    "kind": "bridge",
                    "id": i,
                    "length": g.f_length,
                    "mu_x": check.mu_x,
                    "mu_z": check.mu_z,
                    "equal": check.equal,
                    "instant_mismatch": check.instant_mismatch,
                    "arrival_time": lift.arrival_time(),
                    "causal_residual": lift.causal_residual,
                    "killing_drift": lift.killing_drift,
                }))?;
            }
            w.record_value(json!({"kind": "summary", "all_equal": all_equal}))?;
            w.finish()?;
        }
        Command::Timelike { common, connect, t0, s_bar } => {
            let (scn, name) = load(&common)?;
            let opts = ode_options(common.tol);
            let p0 = chart_point(&connect.p0, &scn, "--p0")?;
            let q0 = chart_point(&connect.q0, &scn, "--q0")?;
            let curves = bridge::lift_timelike(
                &scn,
                &p0,
                &q0,
                t0,
                s_bar,
                connect.l_max,
                connect.seed_budget,
                common.seed,
                &opts,
            )?;
            if curves.is_empty() {
                return Err(Error::NoConnection);
            }
            let mut w = ReportWriter::new(&common.out, "timelike", &name, common.seed)?;
            for (i, c) in curves.iter().enumerate() {
                w.record_value(json!({
                    "kind": "timelike",
                    "id": i,
                    "length": c.geod.f_length,
                    "s_bar": c.s_bar,
                    "mu": c.mu,
                    "u_affinity": c.u_affinity,
                    "causal_residual": c.causal_residual,
                }))?;
            }
            w.finish()?;
        }
        Command::Hessian { common, connect, elements } => {
            let (scn, name) = load(&common)?;
            let opts = ode_options(common.tol);
            let (_, _, geods, _) = connect_geodesics(&scn, &common, &connect, &opts)?;
            let mut w = ReportWriter::new(&common.out, "hessian", &name, common.seed)?;
            for (i, g) in geods.iter().enumerate() {
                let rep = jacobi::conjugate_instants(g, jacobi::RANK_TOL, &opts)?;
                let lagr = LocalizedLagrangian::build(g, &opts)?;
                let basis = H1Basis::new(elements, scn.dim());
                let di = discrete_index(&lagr, &basis, KERNEL_TOL)?;
                if common.plot_data {
                    let (b, gm) = crate::hessian::assemble(&lagr, &basis)?;
                    let spec = crate::hessian::pencil_spectrum(&b, &gm)?;
                    let series: Vec<(f64, f64)> =
                        spec.iter().enumerate().map(|(k, l)| (k as f64, *l)).collect();
                    report::write_plot_series(w.out_dir(), &format!("hessian-{i}-spectrum"), &series)?;
                }
                w.record_value(json!({
                    "kind": "hessian",
                    "id": i,
                    "length": g.f_length,
                    "elements": elements,
                    "index": di.index,
                    "kernel_dim": di.kernel_dim,
                    "jacobi_mu": rep.mu,
                    "agree": di.index == rep.mu,
                }))?;
            }
            w.finish()?;
        }
        Command::Morse { common, connect } => {
            let (scn, name) = load(&common)?;
            let opts = ode_options(common.tol);
            let p0 = chart_point(&connect.p0, &scn, "--p0")?;
            let q0 = chart_point(&connect.q0, &scn, "--q0")?;
            let enumeration = morse::enumerate_geodesics(
                &scn,
                &p0,
                &q0,
                connect.l_max,
                connect.seed_budget,
                common.seed,
                &opts,
            )?;
            let series = morse::morse_series(&scn, &enumeration, connect.l_max);
            let mut w = ReportWriter::new(&common.out, "morse", &name, common.seed)?;
            for (i, (g, rep)) in enumeration.entries.iter().enumerate() {
                w.record_value(json!({
                    "kind": "geodesic",
                    "id": i,
                    "length": g.f_length,
                    "mu": rep.mu,
                }))?;
            }
            let relations = morse::PoincareProfile::for_scenario(&scn)
                .map(|p| morse::check_morse_relations(&series, p))
                .transpose()
                .unwrap_or(None);
            w.record_value(json!({
                "kind": "series",
                "counts": series.counts.iter().map(|(k, v)| (*k, *v)).collect::<Vec<_>>(),
                "reliable_degree": series.reliable_degree,
                "budget_complete": enumeration.budget_complete,
                "relations_valid": relations.as_ref().map(|c| c.valid),
                "q_coeffs": relations.as_ref().map(|c| c.q_coeffs.clone()),
            }))?;
            w.finish()?;
        }
        Command::Lens { common, connect, t0 } => {
            let (scn, name) = load(&common)?;
            let opts = ode_options(common.tol);
            let p0 = chart_point(&connect.p0, &scn, "--p0")?;
            let q0 = chart_point(&connect.q0, &scn, "--q0")?;
            let rep = morse::lensing_count(
                &scn,
                &p0,
                &q0,
                t0,
                connect.l_max,
                connect.seed_budget,
                common.seed,
                &opts,
            )?;
            let mut w = ReportWriter::new(&common.out, "lens", &name, common.seed)?;
            w.record_value(json!({
                "kind": "lens",
                "count": rep.count,
                "parity_odd": rep.parity_odd,
                "arrival_times": rep.arrival_times,
                "budget_complete": rep.budget_complete,
            }))?;
            w.finish()?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidScenario(_)
        | Error::OutsideChart(_)
        | Error::NotInOverlap
        | Error::ZeroVelocity
        | Error::Io(_) => 2,
        Error::Degenerate(_) => 4,
        Error::StepUnderflow { .. } | Error::NoConnection | Error::Numerical(_) => 3,
    }
}

/// Entry point behind the binary: parses arguments, caps the worker pool
/// from FERMAT_MORSE_WORKERS, runs the command and maps errors to exit
/// codes (0 ok, 2 config, 3 numerical, 4 degenerate hypothesis).
pub fn run() -> i32 {
    if let Ok(v) = std::env::var("FERMAT_MORSE_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
