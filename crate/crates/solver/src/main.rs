use clap::Parser;
use solver::cases::{run_case, CaseError};
use solver::config::{Case, FileConfig, Overrides, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Incompressible finite-strain elastodynamics benchmarks on smooth mixed
/// spline spaces.
#[derive(Parser, Debug)]
#[command(name = "solver", version, about)]
struct Cli {
    /// converge | infsup | compress | beam | disk | tension | custom
    case: String,
    /// JSON run configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pressure degree.
    #[arg(long)]
    p: Option<usize>,
    /// Velocity degree excess.
    #[arg(long)]
    a: Option<usize>,
    /// Velocity smoothness raise.
    #[arg(long)]
    b: Option<usize>,
    /// Elements per direction: one value for all three or d1,d2,d3.
    #[arg(long, value_delimiter = ',')]
    nel: Option<Vec<usize>>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    rho_inf: Option<f64>,
    #[arg(long)]
    tol_r: Option<f64>,
    #[arg(long)]
    tol_a: Option<f64>,
    /// Output directory for diag.csv, summary.json, state.chk, ...
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue a previous run from its state.chk.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn parse_nel(raw: &[usize]) -> Result<[usize; 3], String> {
    match raw {
        [n] => Ok([*n; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(format!(
            "--nel takes one value or three comma-separated values, got {}",
            raw.len()
        )),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let case: Case = match cli.case.parse() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let file: Option<FileConfig> = match &cli.config {
        Some(path) => {
            let text = match std::fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("config file {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            };
            match serde_json::from_str(&text) {
                Ok(f) => Some(f),
                Err(e) => {
                    eprintln!("config file {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
        }
        None => None,
    };
    let nel = match cli.nel.as_deref().map(parse_nel).transpose() {
        Ok(n) => n,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let ov = Overrides {
        p: cli.p,
        a: cli.a,
        b: cli.b,
        nel,
        dt: cli.dt,
        t_final: cli.t_final,
        rho_inf: cli.rho_inf,
        tol_r: cli.tol_r,
        tol_a: cli.tol_a,
        out: cli.out,
    };
    let cfg = match RunConfig::resolve(case, file, &ov) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };

    match run_case(&cfg, cli.resume.as_deref()) {
        Ok(outcome) => {
            println!(
                "{case} finished; summary at {}",
                outcome.out_dir.join("summary.json").display()
            );
            ExitCode::SUCCESS
        }
        Err(CaseError::Config(m)) => {
            eprintln!("configuration: {m}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
