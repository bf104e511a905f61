use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asep::couplings::{stationary_second_class, track_second_class};
use asep::engine::{auto_half_width, padded_window, Harris, RateModel};
use asep::expctl::{
    any_failed, render, run_experiment, Experiment, ExperimentSpec, Format, ResultRow,
};
use asep::lattice::{sample_config, Configuration};
use asep::observables::current_by_count;
use asep::oracle::{exact_distribution, exact_second_class, InitialLaw};
use asep::{DensityProfile, Rates, RngStream, Topology};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "asep",
    version,
    about = "Exact ASEP simulation and verification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Master seed; overrides the spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Replicas per estimate; overrides the spec.
    #[arg(long)]
    replicas: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Output file; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<Format>,
    /// Window half-width, overriding auto-sizing.
    #[arg(long)]
    window: Option<i64>,
}

#[derive(Subcommand)]
enum Command {
    /// One stationary trajectory: the current across a bond and Q(t).
    Simulate {
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        z: i64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        window: Option<i64>,
    },
    /// Run one experiment spec file.
    Check {
        spec: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run every spec file in a directory, in name order.
    Suite {
        dir: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Exact small-system computations.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Ψ(t) at several times and the fitted exponent.
    Scaling {
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        /// Comma-separated times.
        #[arg(long, value_delimiter = ',', required = true)]
        t: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        m: u32,
        #[command(flatten)]
        flags: RunFlags,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Law of the configuration on a ring started from a packed block.
    Distribution {
        #[arg(long)]
        sites: usize,
        #[arg(long)]
        particles: usize,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long)]
        t: f64,
    },
    /// Both sides of the two-point identity on a closed segment.
    SecondClass {
        #[arg(long, allow_negative_numbers = true)]
        lo: i64,
        #[arg(long)]
        hi: i64,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long)]
        t: f64,
    },
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse().map_err(|e: asep::Error| e.to_string())
}

enum Failure {
    Usage(String),
    Failed,
}

impl From<asep::Error> for Failure {
    fn from(e: asep::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn apply(spec: &mut ExperimentSpec, flags: &RunFlags) {
    if let Some(s) = flags.seed {
        spec.seed = Some(s);
    }
    if let Some(r) = flags.replicas {
        spec.replicas = Some(r);
    }
    if let Some(w) = flags.workers {
        spec.workers = w;
    }
    if let Some(w) = flags.window {
        spec.window = Some(w);
    }
}

fn write(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn finish(rows: &[ResultRow], format: Format, out: Option<&Path>) -> Result<(), Failure> {
    write(&render(rows, format)?, out)?;
    if any_failed(rows) {
        Err(Failure::Failed)
    } else {
        Ok(())
    }
}

fn run_specs(mut specs: Vec<ExperimentSpec>, flags: &RunFlags) -> Result<(), Failure> {
    for s in &mut specs {
        apply(s, flags);
        s.validate()?;
    }
    let format = flags
        .format
        .or(specs.first().map(|s| s.format))
        .unwrap_or_default();
    let out = flags.out.clone().or_else(|| {
        if specs.len() == 1 {
            specs[0].out.clone()
        } else {
            None
        }
    });
    let mut rows = Vec::new();
    for s in &specs {
        rows.extend(run_experiment(s)?);
    }
    finish(&rows, format, out.as_deref())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            rho,
            p,
            t,
            z,
            seed,
            window,
        } => {
            let rates = Rates::with_p(p)?;
            asep::lattice::check_density(rho)?;
            let half = window.unwrap_or_else(|| auto_half_width(rho, rates, t));
            let topo = padded_window(z.min(0), z.max(0) + 1, half);
            let rng = RngStream::new(seed, 0);
            let c0 = sample_config(topo, &DensityProfile::constant(topo, rho)?, &rng)?;
            let traj = Harris::nearest(rates).prune(true).run(&c0, t, &rng)?;
            let mut text = format!(
                "window={}..{}\nattempts={}\nmoves={}\n",
                topo.first_site(),
                topo.last_site(),
                traj.attempts,
                traj.moves
            );
            if traj.fronts.covers(topo, z, z + 1) {
                text += &format!("current={}\n", current_by_count(&c0, &traj.final_config, z));
            } else {
                text += "current=contaminated\n";
            }
            if rho < 1.0 {
                let q = track_second_class(
                    stationary_second_class(topo, rho, &RngStream::new(seed, 1))?,
                    rates,
                    t,
                    &RngStream::new(seed, 1),
                )?;
                if q.q_clean() {
                    text += &format!("q={}\n", q.q_site());
                } else {
                    text += "q=contaminated\n";
                }
            }
            write(&text, None)
        }
        Command::Check { spec, flags } => {
            run_specs(vec![ExperimentSpec::from_file(&spec)?], &flags)
        }
        Command::Suite { dir, flags } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Failure::Usage(format!(
                    "no spec files in {}",
                    dir.display()
                )));
            }
            let specs = paths
                .iter()
                .map(|p| ExperimentSpec::from_file(p))
                .collect::<asep::Result<Vec<_>>>()?;
            run_specs(specs, &flags)
        }
        Command::Scaling {
            rho,
            p,
            t,
            m,
            flags,
        } => {
            let mut spec = ExperimentSpec::new(Experiment::ScalingPsi);
            spec.rho = Some(rho);
            spec.p = p;
            spec.t = t;
            spec.m = m;
            run_specs(vec![spec], &flags)
        }
        Command::Oracle(OracleCommand::Distribution {
            sites,
            particles,
            p,
            t,
        }) => {
            let topo = Topology::ring(sites)?;
            if particles > sites {
                return Err(Failure::Usage(format!(
                    "{particles} particles do not fit on {sites} sites"
                )));
            }
            let c0 = Configuration::from_sites(topo, &(0..particles as i64).collect::<Vec<_>>())?;
            let model = RateModel::NearestNeighbor(Rates::with_p(p)?);
            let d = exact_distribution(&InitialLaw::Point(c0), &model, topo, t, 1e-12)?;
            let mut text = String::from("configuration,probability\n");
            for (mask, &pr) in d.probs().iter().enumerate() {
                if pr > 0.0 {
                    text += &format!("{},{pr}\n", Configuration::from_mask(topo, mask as u64));
                }
            }
            write(&text, None)
        }
        Command::Oracle(OracleCommand::SecondClass { lo, hi, rho, p, t }) => {
            let e =
                exact_second_class(Topology::segment(lo, hi)?, rho, Rates::with_p(p)?, t, 1e-13)?;
            let mut text = String::from("j,p_q,covariance,weighted_p_q\n");
            for (k, j) in e.sites.iter().enumerate() {
                text += &format!(
                    "{j},{},{},{}\n",
                    e.q_law[k],
                    e.covariance[k],
                    rho * (1.0 - rho) * e.q_law[k]
                );
            }
            write(&text, None)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Failed) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
