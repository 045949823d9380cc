//! Command-line front end.
//!
//! Every subcommand reads a network either from a document path or by
//! benchmark name, prints a short report on stdout and writes CSV or JSON
//! artifacts when asked. Exit codes: 0 on success, 1 when an optimization is
//! infeasible or a solver fails, 2 on input errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench;
use crate::bounds::{
    check_hypothesis, empirical_gap, expm_norm_profile_auto, first_crossing, sinusoidal_gamma,
    time_varying_bound_curve, BoundParams,
};
use crate::control::{
    compressor_flux, initial_state, optimal_steady_state, run_mpc, run_oc, stage_cost, ControlGrid,
    ControlOptions, CostSettings, Mode, OptimizationResult, Status,
};
use crate::error::{Error, Result};
use crate::incidence::assemble;
use crate::linearize::{build_model, LinearModel, NominalPoint};
use crate::network::{
    parse_network, parse_scenario, refine, scenario_document, to_document, BoundaryScenario,
    NetworkSpec, RefinedNetwork,
};
use crate::simulate::{LumpedModel, Policy, Trajectory};
use crate::sparse::{dense_coordinate_text, RowMatrix};
use crate::spectral::{
    center_of_gravity, eigenvalues, frequency_response, network_poles, ImpedanceSign,
    PipeFrequencyParams,
};

const DEFAULT_SEGMENT_KM: f64 = 10.0;

#[derive(Parser, Debug)]
#[command(
    name = "gasnet",
    version,
    about = "Transient gas network simulation and compressor scheduling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse and validate a network and its scenario.
    Validate(NetworkArgs),
    /// Refine a network and optionally dump its incidence matrices.
    Refine {
        #[command(flatten)]
        net: NetworkArgs,
        /// Directory receiving the matrices as coordinate text.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Steady state at one time instant.
    Steady {
        #[command(flatten)]
        net: NetworkArgs,
        #[command(flatten)]
        point: PointArgs,
        /// Choose the ratios that minimize compressor work within the bounds.
        #[arg(long)]
        optimal: bool,
        /// CSV receiving the state.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the nonlinear (or linearized) model over the scenario horizon.
    Simulate {
        #[command(flatten)]
        net: NetworkArgs,
        /// Ratio schedule as written by `mpc`/`oc`; overrides --mu.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Constant ratios, comma separated.
        #[arg(long, value_delimiter = ',')]
        mu: Option<Vec<f64>>,
        #[arg(long, default_value_t = 60.0)]
        dt_seconds: f64,
        /// Integrate the model linearized at the initial steady state.
        #[arg(long)]
        linear: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linearize about a steady state and report spectral invariants.
    Linearize {
        #[command(flatten)]
        net: NetworkArgs,
        #[command(flatten)]
        point: PointArgs,
        /// File receiving the state matrix as coordinate text.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Eigenvalues of the state matrix and per-edge pole formulas.
    Spectrum {
        #[command(flatten)]
        net: NetworkArgs,
        #[command(flatten)]
        point: PointArgs,
        /// Poles per edge are listed for m = 0..=poles.
        #[arg(long, default_value_t = 10)]
        poles: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frequency response of one pipe under model variants.
    Bode {
        #[command(flatten)]
        net: NetworkArgs,
        /// Pipe label; defaults to the first pipe.
        #[arg(long)]
        pipe: Option<u32>,
        #[arg(long, value_enum, default_value = "all")]
        variants: VariantChoice,
        #[arg(long)]
        rho_bar: Option<f64>,
        #[arg(long)]
        phi_bar: Option<f64>,
        /// Frequency range in cycles per hour.
        #[arg(long, default_value_t = 0.01)]
        f_min: f64,
        #[arg(long, default_value_t = 100.0)]
        f_max: f64,
        #[arg(long, default_value_t = 200)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linearization error bounds against the simulated gap.
    Bound {
        #[command(flatten)]
        net: NetworkArgs,
        #[arg(long, default_value_t = 0.2)]
        kappa: f64,
        #[arg(long, default_value_t = 1.0)]
        horizon_hours: f64,
        /// Period of the sinusoidal variation profile in hours.
        #[arg(long, default_value_t = 1.0)]
        period_hours: f64,
        /// Multiplies every withdrawal profile of the simulated run.
        #[arg(long, default_value_t = 1.0)]
        load_scale: f64,
        #[arg(long, default_value_t = 10.0)]
        dt_seconds: f64,
        /// Relative level whose first crossing by E_T is reported.
        #[arg(long, default_value_t = 0.01)]
        level: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Receding-horizon compressor scheduling.
    Mpc(ControlArgs),
    /// Whole-horizon compressor scheduling.
    Oc(ControlArgs),
    /// Benchmark networks and scenarios.
    Bench {
        #[arg(long)]
        name: String,
        /// Directory receiving `<name>.network.toml` and `<name>.scenario.toml`.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct NetworkArgs {
    /// Network document path, or a benchmark name (cyclic5, tree25, pipe5km, pipe50km).
    #[arg(long)]
    pub network: String,
    /// Scenario document; defaults to the profiles of the network document or the benchmark.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Segment length bound in km; defaults to the benchmark value or 10 km.
    #[arg(long)]
    pub max_segment_km: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct PointArgs {
    /// Time at which the boundary data are sampled, in seconds.
    #[arg(long, default_value_t = 0.0)]
    pub time: f64,
    /// Compressor ratios, comma separated; defaults to the scenario's or 1.
    #[arg(long, value_delimiter = ',')]
    pub mu: Option<Vec<f64>>,
}

#[derive(Args, Debug, Clone)]
pub struct ControlArgs {
    #[command(flatten)]
    pub net: NetworkArgs,
    #[arg(long, default_value_t = 60.0)]
    pub dt_minutes: f64,
    #[arg(long, value_enum, default_value = "linear")]
    pub mode: ModeChoice,
    /// Keep the model linearized at the initial steady state.
    #[arg(long)]
    pub no_relinearize: bool,
    /// Weight the work by mass flow χφ instead of flux φ.
    #[arg(long)]
    pub mass_flow_cost: bool,
    /// Heat capacity ratio γ; sets the work exponent (γ−1)/γ.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Output prefix for `.trajectory.csv`, `.policy.csv` and `.summary.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Prefix of an earlier run to compare against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeChoice {
    Linear,
    Nonlinear,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantChoice {
    All,
    Full,
    NoAlpha,
    NoInertia,
    Friction,
}

/// The four model variants of a pipe: (name, keep α, keep inertia).
pub const VARIANTS: [(&str, bool, bool); 4] = [
    ("full", true, true),
    ("no_alpha", false, true),
    ("no_inertia", true, false),
    ("friction", false, false),
];

/// Comparison of a run with a reference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub objective: f64,
    /// `(J − J_ref)/J_ref` in percent.
    pub energy_gap_percent: f64,
    pub e_rho: f64,
    pub e_phi: f64,
    pub e_mu: f64,
}

/// Summary of an `mpc` or `oc` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    /// SHA-256 of the canonical network document.
    pub network_hash: String,
    pub dt_s: f64,
    pub mode: String,
    pub relinearize: bool,
    pub objective: f64,
    pub surrogate_objective: f64,
    pub wall_time_s: f64,
    pub status: String,
    pub message: Option<String>,
    pub lp_iterations: u64,
    pub outer_iterations: usize,
    pub audit_passed: Option<bool>,
    pub reference: Option<ReferenceComparison>,
}

/// Hex SHA-256 of the canonical document of `net`.
pub fn network_hash(net: &NetworkSpec) -> String {
    let digest = Sha256::digest(to_document(net, None).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct Loaded {
    spec: NetworkSpec,
    scenario: Option<BoundaryScenario>,
    max_segment: f64,
}

impl Loaded {
    fn scenario(&self) -> Result<&BoundaryScenario> {
        self.scenario
            .as_ref()
            .ok_or_else(|| Error::domain("this command needs a scenario (--scenario)"))
    }

    fn refined(&self) -> Result<RefinedNetwork> {
        refine(&self.spec, self.max_segment)
    }

    fn model(&self) -> Result<LumpedModel> {
        LumpedModel::new(self.refined()?)
    }
}

fn load(args: &NetworkArgs) -> Result<Loaded> {
    let path = Path::new(&args.network);
    let (spec, mut scenario, default_segment) = if path.exists() {
        let text = fs::read_to_string(path)?;
        let spec = parse_network(&text)?;
        let scenario = if text.contains("horizon_s") {
            Some(parse_scenario(&text, &spec)?)
        } else {
            None
        };
        (spec, scenario, DEFAULT_SEGMENT_KM * 1000.0)
    } else if bench::NAMES.contains(&args.network.as_str()) {
        let b = bench::by_name(&args.network)?;
        (b.network, Some(b.scenario), b.max_segment)
    } else {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "{} is neither a file nor a benchmark name ({})",
                args.network,
                bench::NAMES.join(", ")
            ),
        )));
    };
    if let Some(p) = &args.scenario {
        scenario = Some(parse_scenario(&fs::read_to_string(p)?, &spec)?);
    }
    let max_segment = match args.max_segment_km {
        Some(km) if km > 0.0 => km * 1000.0,
        Some(km) => {
            return Err(Error::domain(format!(
                "segment bound {km} km must be positive"
            )))
        }
        None => default_segment,
    };
    Ok(Loaded {
        spec,
        scenario,
        max_segment,
    })
}

fn ratios(model: &LumpedModel, scenario: &BoundaryScenario, given: Option<&[f64]>) -> Vec<f64> {
    match given {
        Some(mu) => mu.to_vec(),
        None => model
            .net
            .compressors
            .iter()
            .map(|c| {
                scenario
                    .initial_ratios
                    .as_ref()
                    .and_then(|m| m.get(&c.spec.edge_id).copied())
                    .unwrap_or(1.0)
            })
            .collect(),
    }
}

fn steady_point(
    model: &LumpedModel,
    scenario: &BoundaryScenario,
    point: &PointArgs,
) -> Result<NominalPoint> {
    let mu = ratios(model, scenario, point.mu.as_deref());
    let u = model.inputs_at(scenario, &mu, point.time)?;
    let x = model.steady_state(&u)?;
    Ok(NominalPoint::new(&x, &u))
}

fn write_trajectory(path: &Path, traj: &Trajectory, net: &RefinedNetwork) -> Result<()> {
    traj.write_csv(net, fs::File::create(path)?)
}

/// Writes `t,comp:<id>.mu...`, one row per sample.
pub fn write_policy(path: &Path, r: &OptimizationResult, net: &RefinedNetwork) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(
        net.compressors
            .iter()
            .map(|c| format!("comp:{}.mu", c.spec.edge_id)),
    );
    wtr.write_record(&header)?;
    for (t, mu) in r.times.iter().zip(&r.policy) {
        wtr.write_record(std::iter::once(t).chain(mu).map(|v| format!("{v:e}")))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a policy written by [`write_policy`].
pub fn read_policy(path: &Path) -> Result<Policy> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let vals = rec?
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Syntax {
                line: Some(i + 2),
                field: None,
                message: e.to_string(),
            })?;
        times.push(vals[0]);
        values.push(vals[1..].to_vec());
    }
    if times.is_empty() {
        return Err(Error::domain("policy file has no rows"));
    }
    Ok(Policy::Piecewise { times, values })
}

fn read_summary(path: &Path) -> Result<RunSummary> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Syntax {
        line: Some(e.line()),
        field: None,
        message: e.to_string(),
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let i = times.partition_point(|&x| x < t);
    if i == 0 {
        return values[0];
    }
    if i == times.len() {
        return values[i - 1];
    }
    let w = (t - times[i - 1]) / (times[i] - times[i - 1]);
    values[i - 1] + w * (values[i] - values[i - 1])
}

fn validate(args: &NetworkArgs) -> Result<ExitCode> {
    let l = load(args)?;
    let r = l.refined()?;
    println!(
        "network ok: {} nodes, {} pipes, {} compressors, {:.3} km",
        l.spec.nodes.len(),
        l.spec.pipes.len(),
        l.spec.compressors.len(),
        l.spec.total_length() / 1000.0
    );
    println!(
        "refined at {:.3} km: {} edges, state dimension {}",
        l.max_segment / 1000.0,
        r.n_edges(),
        r.state_dim()
    );
    match &l.scenario {
        Some(s) => println!(
            "scenario ok: horizon {} s, {} supply and {} withdrawal profiles",
            s.horizon,
            s.supply.len(),
            s.withdrawal.len()
        ),
        None => println!("no scenario"),
    }
    println!("hash {}", network_hash(&l.spec));
    Ok(ExitCode::SUCCESS)
}

fn refine_cmd(args: &NetworkArgs, dump: Option<&Path>) -> Result<ExitCode> {
    let l = load(args)?;
    let r = l.refined()?;
    println!(
        "{} nodes, {} edges, {} compressors, state dimension {}",
        r.n_nodes(),
        r.n_edges(),
        r.n_compressors(),
        r.state_dim()
    );
    if let Some(dir) = dump {
        fs::create_dir_all(dir)?;
        let inc = assemble(&r, &vec![1.0; r.n_compressors()])?;
        let diag = |v: &DVector<f64>| {
            let mut m = RowMatrix::zeros(v.len(), v.len());
            for (i, &x) in v.iter().enumerate() {
                m.push(i, i, x);
            }
            m
        };
        let mats = [
            ("xi", inc.xi.clone()),
            ("m", inc.m.clone()),
            ("n", inc.n.clone()),
            ("q", inc.q.clone()),
            ("lambda", diag(&inc.lambda)),
            ("length", diag(&inc.length)),
            ("area", diag(&inc.area)),
        ];
        for (name, m) in mats {
            fs::write(dir.join(format!("{name}.txt")), m.to_coordinate_text())?;
        }
        println!("matrices written to {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn steady_cmd(
    args: &NetworkArgs,
    point: &PointArgs,
    optimal: bool,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let l = load(args)?;
    let model = l.model()?;
    let scenario = l.scenario()?;
    let (x, mu, status) = if optimal {
        let opts = ControlOptions::new(Mode::Nonlinear);
        optimal_steady_state(&model, scenario, point.time, &opts)?
    } else {
        let nom = steady_point(&model, scenario, point)?;
        (nom.state(), nom.mu_bar, Status::Optimal)
    };
    let work = stage_cost(
        &compressor_flux(&model.net, &x.phi),
        &mu,
        CostSettings::default().exponent,
        &vec![1.0; mu.len()],
    );
    println!("status {status}");
    println!("ratios {mu:?}");
    println!(
        "density [{:.6}, {:.6}], flux [{:.6}, {:.6}], work {work:.6}",
        x.rho.min(),
        x.rho.max(),
        x.phi.min(),
        x.phi.max()
    );
    if let Some(p) = out {
        let traj = Trajectory {
            times: vec![point.time],
            states: vec![x],
            controls: vec![mu],
        };
        write_trajectory(p, &traj, &model.net)?;
    }
    Ok(if status == Status::Optimal {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn simulate_cmd(
    args: &NetworkArgs,
    policy: Option<&Path>,
    mu: Option<&[f64]>,
    dt: f64,
    linear: bool,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let l = load(args)?;
    let model = l.model()?;
    let scenario = l.scenario()?;
    let policy = match policy {
        Some(p) => read_policy(p)?,
        None => Policy::Constant(ratios(&model, scenario, mu)),
    };
    let u0 = model.inputs_at(scenario, policy.at(0.0), 0.0)?;
    let x0 = model.steady_state(&u0)?;
    let start = Instant::now();
    let traj = if linear {
        let lin = build_model(&model, &NominalPoint::new(&x0, &u0))?;
        lin.simulate(&model, x0, scenario, &policy, dt)?
    } else {
        model.simulate_from(x0, scenario, &policy, dt)?
    };
    let last = traj.states.last().unwrap();
    println!(
        "{} samples in {:.3} s; final density [{:.6}, {:.6}]",
        traj.len(),
        start.elapsed().as_secs_f64(),
        last.rho.min(),
        last.rho.max()
    );
    if let Some(p) = out {
        write_trajectory(p, &traj, &model.net)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn linearize_cmd(args: &NetworkArgs, point: &PointArgs, dump: Option<&Path>) -> Result<ExitCode> {
    let l = load(args)?;
    let model = l.model()?;
    let nom = steady_point(&model, l.scenario()?, point)?;
    let lin = build_model(&model, &nom)?;
    let cog = center_of_gravity(&model, &lin)?;
    println!("state matrix {0}×{0}", lin.dim());
    println!(
        "trace {:.9e}, eigenvalue sum {:.9e}, −Σβ̄ {:.9e}",
        lin.a_bar.trace(),
        cog.eigen_sum,
        cog.predicted_sum
    );
    println!("center of gravity {:.9e}", cog.center);
    if let Some(p) = dump {
        fs::write(p, dense_coordinate_text(&lin.a_bar))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn spectrum_cmd(
    args: &NetworkArgs,
    point: &PointArgs,
    poles: usize,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let l = load(args)?;
    let model = l.model()?;
    let nom = steady_point(&model, l.scenario()?, point)?;
    let lin = build_model(&model, &nom)?;
    let eig = eigenvalues(&lin.a_bar)?;
    let lengths: Vec<f64> = model.net.edges.iter().map(|e| e.length).collect();
    let edge_poles = network_poles(
        lin.beta_bar.as_slice(),
        model.sound_speed(),
        &lengths,
        poles,
    )?;
    let slowest = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{} eigenvalues, rightmost real part {slowest:.6e}",
        eig.len()
    );
    if let Some(p) = out {
        let mut wtr = csv::Writer::from_path(p)?;
        wtr.write_record(["re", "im", "source"])?;
        let rows = eig.iter().map(|z| (z, "eig")).chain(
            edge_poles
                .iter()
                .flat_map(|e| e.poles.iter().map(|z| (z, "pole"))),
        );
        for (z, src) in rows {
            wtr.write_record([
                format!("{:e}", z.re),
                format!("{:e}", z.im),
                src.to_string(),
            ])?;
        }
        wtr.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Frequency-domain parameters of pipe `id` at the steady state at `t = 0`.
fn pipe_params(
    l: &Loaded,
    id: Option<u32>,
    rho_bar: Option<f64>,
    phi_bar: Option<f64>,
) -> Result<PipeFrequencyParams> {
    let pipe = match id {
        Some(id) => l
            .spec
            .pipe(id)
            .ok_or_else(|| Error::domain(format!("no pipe {id}")))?,
        None => l
            .spec
            .pipes
            .first()
            .ok_or_else(|| Error::domain("network has no pipes"))?,
    };
    let (rho, phi) = match (rho_bar, phi_bar) {
        (Some(r), Some(p)) => (r, p),
        _ => {
            let longest = l.spec.pipes.iter().map(|p| p.length).fold(0.0, f64::max);
            let model = LumpedModel::new(refine(&l.spec, longest)?)?;
            let scenario = l.scenario()?;
            let nom = steady_point(
                &model,
                scenario,
                &PointArgs {
                    time: 0.0,
                    mu: None,
                },
            )?;
            let k = model.net.segments_of(pipe.id)[0];
            let tail = model.inc.tail[k];
            let inlet = if tail < model.inc.n_supply {
                nom.s_bar[tail]
            } else {
                nom.rho_bar[tail - model.inc.n_supply]
            };
            (rho_bar.unwrap_or(inlet), phi_bar.unwrap_or(nom.phi_bar[k]))
        }
    };
    Ok(PipeFrequencyParams {
        length: pipe.length,
        diameter: pipe.diameter,
        friction: pipe.friction,
        sound_speed: l.spec.sound_speed,
        rho_bar: rho,
        phi_bar: phi,
        alpha_on: true,
        inertia: true,
        sign: ImpedanceSign::Physical,
    })
}

/// Log-spaced grid of `n` frequencies on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn bode_cmd(
    args: &NetworkArgs,
    pipe: Option<u32>,
    variants: VariantChoice,
    rho_bar: Option<f64>,
    phi_bar: Option<f64>,
    grid: (f64, f64, usize),
    out: Option<&Path>,
) -> Result<ExitCode> {
    let l = load(args)?;
    let base = pipe_params(&l, pipe, rho_bar, phi_bar)?;
    if !(grid.0 > 0.0 && grid.1 > grid.0) {
        return Err(Error::domain(
            "frequency range must satisfy 0 < f_min < f_max",
        ));
    }
    let freqs = log_grid(grid.0, grid.1, grid.2);
    let chosen: Vec<_> = VARIANTS
        .iter()
        .filter(|(name, ..)| match variants {
            VariantChoice::All => true,
            VariantChoice::Full => *name == "full",
            VariantChoice::NoAlpha => *name == "no_alpha",
            VariantChoice::NoInertia => *name == "no_inertia",
            VariantChoice::Friction => *name == "friction",
        })
        .collect();
    println!(
        "pipe {:.3} km, D {} m, λ {}, ρ̄ {:.4}, φ̄ {:.4}, β {:.6e}",
        base.length / 1000.0,
        base.diameter,
        base.friction,
        base.rho_bar,
        base.phi_bar,
        base.beta()
    );
    let mut wtr = match out {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    if let Some(w) = wtr.as_mut() {
        let mut header = vec!["variant".to_string(), "f_cyc_per_hr".to_string()];
        for (m, n) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            header.push(format!("|G{m}{n}|"));
            header.push(format!("∠G{m}{n}"));
        }
        w.write_record(&header)?;
    }
    for &&(name, alpha_on, inertia) in &chosen {
        let resp = frequency_response(&base.with_flags(alpha_on, inertia), &freqs)?;
        let mags: Vec<Vec<f64>> = (0..4).map(|i| resp.magnitude(i / 2, i % 2)).collect();
        let phases: Vec<Vec<f64>> = (0..4).map(|i| resp.phase(i / 2, i % 2)).collect();
        println!(
            "{name:10} |G21| from {:.4e} to {:.4e}",
            mags[2][0],
            mags[2][freqs.len() - 1]
        );
        if let Some(w) = wtr.as_mut() {
            for (i, f) in freqs.iter().enumerate() {
                let mut row = vec![name.to_string(), format!("{f:e}")];
                for c in 0..4 {
                    row.push(format!("{:e}", mags[c][i]));
                    row.push(format!("{:e}", phases[c][i]));
                }
                w.write_record(&row)?;
            }
        }
    }
    if let Some(w) = wtr.as_mut() {
        w.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Outcome of a bound check over one horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub times: Vec<f64>,
    /// Relative uniform bound at each sample.
    pub uniform: Vec<f64>,
    /// Relative time-varying bound at each sample.
    pub time_varying: Vec<f64>,
    /// Relative gap ‖x_nonlinear − x_linear‖∞/‖x̄‖ at each sample.
    pub gap: Vec<f64>,
    pub observed_kappa: f64,
    pub hypothesis_holds: bool,
}

impl BoundReport {
    /// True when the measured gap stays below the uniform bound.
    pub fn dominated(&self) -> bool {
        self.gap.iter().zip(&self.uniform).all(|(g, b)| g <= b)
    }
}

/// Simulates the nonlinear and linear models from the steady state at `t = 0`
/// of `nominal_scenario` with ratios `mu` under `scenario`, and compares
/// their gap with the bounds at `kappa`.
pub fn bound_report(
    model: &LumpedModel,
    nominal_scenario: &BoundaryScenario,
    scenario: &BoundaryScenario,
    mu: Vec<f64>,
    kappa: f64,
    period: f64,
    dt: f64,
) -> Result<BoundReport> {
    let u = model.inputs_at(nominal_scenario, &mu, 0.0)?;
    let x0 = model.steady_state(&u)?;
    let nominal = NominalPoint::new(&x0, &u);
    let lin: LinearModel = build_model(model, &nominal)?;
    let policy = Policy::Constant(mu);
    let nl = model.simulate_from(x0.clone(), scenario, &policy, dt)?;
    let li = lin.simulate(model, x0, scenario, &policy, dt)?;
    let params = BoundParams::from_model(&lin)?;
    let prof = expm_norm_profile_auto(&lin.a_bar, scenario.horizon)?;
    let factor = params.uniform_factor(kappa)? / params.state_norm;
    let (tv_t, tv_v) = time_varying_bound_curve(
        &lin,
        sinusoidal_gamma(kappa, period),
        kappa,
        scenario.horizon,
    )?;
    let gap = nl
        .states
        .iter()
        .zip(&li.states)
        .map(|(a, b)| (a.to_vector() - b.to_vector()).amax() / params.state_norm)
        .collect();
    let hyp = check_hypothesis(&nl, &nominal, kappa);
    Ok(BoundReport {
        uniform: nl
            .times
            .iter()
            .map(|&t| factor * prof.integral_at(t))
            .collect(),
        time_varying: nl
            .times
            .iter()
            .map(|&t| interpolate(&tv_t, &tv_v, t))
            .collect(),
        times: nl.times,
        gap,
        observed_kappa: hyp.observed_kappa,
        hypothesis_holds: hyp.holds,
    })
}

#[allow(clippy::too_many_arguments)]
fn bound_cmd(
    args: &NetworkArgs,
    kappa: f64,
    horizon_hours: f64,
    period_hours: f64,
    load_scale: f64,
    dt: f64,
    level: f64,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let l = load(args)?;
    let model = l.model()?;
    let mut base = l.scenario()?.clone();
    base.horizon = base.horizon.min(horizon_hours * 3600.0);
    let scenario = bench::scale_loads(&base, load_scale);
    let (_, mu) = initial_state(&model, &base, &ControlOptions::new(Mode::Nonlinear))?;
    let rep = bound_report(
        &model,
        &base,
        &scenario,
        mu,
        kappa,
        period_hours * 3600.0,
        dt,
    )?;
    let worst_gap = rep.gap.iter().copied().fold(0.0, f64::max);
    println!(
        "observed κ {:.4} (hypothesis at κ = {kappa}: {})",
        rep.observed_kappa,
        if rep.hypothesis_holds {
            "holds"
        } else {
            "fails"
        }
    );
    println!(
        "max relative gap {worst_gap:.4e}, final E_U {:.4e}, final E_T {:.4e}",
        rep.uniform.last().unwrap(),
        rep.time_varying.last().unwrap()
    );
    println!("gap below E_U at every sample: {}", rep.dominated());
    match first_crossing(&rep.times, &rep.time_varying, level) {
        Some(t) => println!("E_T reaches {level} at t = {:.1} min", t / 60.0),
        None => println!("E_T stays below {level}"),
    }
    if let Some(p) = out {
        let mut wtr = csv::Writer::from_path(p)?;
        wtr.write_record(["t", "E_U", "E_T", "empirical_gap"])?;
        for i in 0..rep.times.len() {
            wtr.write_record(
                [
                    rep.times[i],
                    rep.uniform[i],
                    rep.time_varying[i],
                    rep.gap[i],
                ]
                .map(|v| format!("{v:e}")),
            )?;
        }
        wtr.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn control_cmd(name: &str, args: &ControlArgs) -> Result<ExitCode> {
    let l = load(&args.net)?;
    let model = l.model()?;
    let scenario = l.scenario()?;
    let grid = ControlGrid::from_minutes(scenario.horizon, args.dt_minutes)?;
    let mut opts = ControlOptions::new(match args.mode {
        ModeChoice::Linear => Mode::Linear,
        ModeChoice::Nonlinear => Mode::Nonlinear,
    });
    opts.relinearize = !args.no_relinearize;
    if let Some(g) = args.gamma {
        opts.cost = CostSettings::from_gamma(g)?;
    }
    opts.cost.mass_flow = args.mass_flow_cost;
    let r = if name == "mpc" {
        run_mpc(&model, scenario, &grid, &opts)?
    } else {
        run_oc(&model, scenario, &grid, &opts)?
    };
    let reference = match &args.reference {
        Some(prefix) => {
            let s = read_summary(&with_suffix(prefix, ".summary.json"))?;
            let t = Trajectory::read_csv(fs::File::open(with_suffix(prefix, ".trajectory.csv"))?)?;
            let g = empirical_gap(&r.trajectory(), &t)?;
            Some(ReferenceComparison {
                objective: s.objective,
                energy_gap_percent: (r.objective - s.objective) / s.objective * 100.0,
                e_rho: g.rho,
                e_phi: g.phi,
                e_mu: g.mu,
            })
        }
        None => None,
    };
    let summary = RunSummary {
        command: name.to_string(),
        network_hash: network_hash(&l.spec),
        dt_s: grid.dt(),
        mode: opts.mode.to_string(),
        relinearize: opts.relinearize,
        objective: r.objective,
        surrogate_objective: r.surrogate_objective,
        wall_time_s: r.wall_time,
        status: r.status.to_string(),
        message: r.message.clone(),
        lp_iterations: r.lp_iterations,
        outer_iterations: r.outer_iterations,
        audit_passed: r.audit.as_ref().map(|a| a.passed),
        reference,
    };
    println!(
        "{name} {}: status {}, J = {:.6}, wall {:.3} s",
        summary.mode, summary.status, summary.objective, summary.wall_time_s
    );
    if let Some(m) = &summary.message {
        println!("{m}");
    }
    if let Some(c) = &summary.reference {
        println!(
            "vs reference J = {:.6}: energy gap {:.3}%, E_rho {:.3}%, E_phi {:.3}%, E_mu {:.3}%",
            c.objective, c.energy_gap_percent, c.e_rho, c.e_phi, c.e_mu
        );
    }
    if let Some(prefix) = &args.out {
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_trajectory(
            &with_suffix(prefix, ".trajectory.csv"),
            &r.trajectory(),
            &model.net,
        )?;
        write_policy(&with_suffix(prefix, ".policy.csv"), &r, &model.net)?;
        let json = serde_json::to_string_pretty(&summary).expect("summaries serialize");
        fs::write(with_suffix(prefix, ".summary.json"), json + "\n")?;
    }
    Ok(if r.status == Status::Optimal {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn bench_cmd(name: &str, emit: Option<&Path>) -> Result<ExitCode> {
    let b = bench::by_name(name)?;
    let net_doc = to_document(&b.network, None);
    let scen_doc = scenario_document(&b.scenario);
    match emit {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let np = dir.join(format!("{name}.network.toml"));
            let sp = dir.join(format!("{name}.scenario.toml"));
            fs::write(&np, &net_doc)?;
            fs::write(&sp, &scen_doc)?;
            println!("wrote {} and {}", np.display(), sp.display());
        }
        None => print!("{}", to_document(&b.network, Some(&b.scenario))),
    }
    Ok(ExitCode::SUCCESS)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GASNET_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::domain(format!("GASNET_THREADS={v} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::domain(e.to_string()))?;
    }
    Ok(())
}

/// Runs one parsed command.
pub fn execute(cli: &Cli) -> Result<ExitCode> {
    configure_threads()?;
    match &cli.command {
        Command::Validate(net) => validate(net),
        Command::Refine { net, dump_dir } => refine_cmd(net, dump_dir.as_deref()),
        Command::Steady {
            net,
            point,
            optimal,
            out,
        } => steady_cmd(net, point, *optimal, out.as_deref()),
        Command::Simulate {
            net,
            policy,
            mu,
            dt_seconds,
            linear,
            out,
        } => simulate_cmd(
            net,
            policy.as_deref(),
            mu.as_deref(),
            *dt_seconds,
            *linear,
            out.as_deref(),
        ),
        Command::Linearize { net, point, dump } => linearize_cmd(net, point, dump.as_deref()),
        Command::Spectrum {
            net,
            point,
            poles,
            out,
        } => spectrum_cmd(net, point, *poles, out.as_deref()),
        Command::Bode {
            net,
            pipe,
            variants,
            rho_bar,
            phi_bar,
            f_min,
            f_max,
            points,
            out,
        } => bode_cmd(
            net,
            *pipe,
            *variants,
            *rho_bar,
            *phi_bar,
            (*f_min, *f_max, *points),
            out.as_deref(),
        ),
        Command::Bound {
            net,
            kappa,
            horizon_hours,
            period_hours,
            load_scale,
            dt_seconds,
            level,
            out,
        } => bound_cmd(
            net,
            *kappa,
            *horizon_hours,
            *period_hours,
            *load_scale,
            *dt_seconds,
            *level,
            out.as_deref(),
        ),
        Command::Mpc(a) => control_cmd("mpc", a),
        Command::Oc(a) => control_cmd("oc", a),
        Command::Bench { name, emit } => bench_cmd(name, emit.as_deref()),
    }
}

/// Entry point of the binary: parses arguments, runs and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arguments_parse() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from([
            "gasnet",
            "mpc",
            "--network",
            "cyclic5",
            "--dt-minutes",
            "30",
            "--mode",
            "nonlinear",
            "--no-relinearize",
        ])
        .unwrap();
        match cli.command {
            Command::Mpc(a) => {
                assert_eq!(a.dt_minutes, 30.0);
                assert_eq!(a.mode, ModeChoice::Nonlinear);
                assert!(a.no_relinearize);
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["gasnet", "mpc", "--mode", "nonlinear"]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = bench::cyclic5().network;
        let mut b = a.clone();
        assert_eq!(network_hash(&a), network_hash(&b));
        assert_eq!(network_hash(&a).len(), 64);
        b.pipes[0].friction *= 1.01;
        assert_ne!(network_hash(&a), network_hash(&b));
    }

    #[test]
    fn interpolation_and_grid() {
        let t = [0.0, 1.0, 3.0];
        let v = [0.0, 2.0, 4.0];
        assert_eq!(interpolate(&t, &v, 2.0), 3.0);
        assert_eq!(interpolate(&t, &v, -1.0), 0.0);
        assert_eq!(interpolate(&t, &v, 5.0), 4.0);
        let g = log_grid(0.01, 100.0, 5);
        assert!((g[2] - 1.0).abs() < 1e-12 && (g[4] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn pipe_parameters_of_reference_pipe() {
        let l = load(&NetworkArgs {
            network: "pipe5km".into(),
            scenario: None,
            max_segment_km: None,
        })
        .unwrap();
        let p = pipe_params(&l, None, None, None).unwrap();
        assert_eq!(
            (p.length, p.diameter, p.friction, p.sound_speed),
            (5_000.0, 0.5, 0.011, 377.0)
        );
        assert_eq!(p.rho_bar, 35.0);
        assert!((p.phi_bar - 300.0).abs() < 1e-9);
    }
}
