use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gliomesh::commands;
use gliomesh::io::RunConfig;
use gliomesh::optimize::TERM_NAMES;
use gliomesh::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "gliomesh", version, about = "Soft-physics tumor growth inverse solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic cohort and write one archive per case.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["1", "3"]))]
        focal: Option<String>,
    },
    /// Fit one case archive.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recovery and coverage metrics of fitted cases.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients with central differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        term: Option<String>,
    },
    /// Export plot-ready tables of a fitted archive.
    PlotData {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Numeric => 3,
        ErrorKind::Io => 1,
    }
}

fn run(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Generate {
            config: c,
            out,
            cases,
            seed,
            focal,
        } => {
            let cfg = config(c.as_deref())?;
            let focal = focal.map(|f| f.parse().expect("validated by clap"));
            let dirs = commands::generate(&cfg, &out, cases, seed, focal)?;
            eprintln!("wrote {} cases to {}", dirs.len(), out.display());
            Ok(0)
        }
        Command::Fit { config: c, case, out } => {
            let cfg = config(c.as_deref())?;
            let mut progress = |r: &gliomesh::optimize::LossReport| {
                let terms: Vec<String> = TERM_NAMES
                    .iter()
                    .zip(r.raw)
                    .map(|(n, v)| format!("\"{n}\":{v:.6e}"))
                    .collect();
                eprintln!(
                    "{{\"level\":{},\"iter\":{},\"total\":{:.6e},\"wall_seconds\":{:.3},{}}}",
                    r.level,
                    r.iter,
                    r.total,
                    r.wall_seconds,
                    terms.join(",")
                );
            };
            commands::fit_case(&cfg, &case, &out, &mut progress)?;
            Ok(0)
        }
        Command::Eval {
            truth,
            fit,
            out,
            config: c,
        } => {
            let cfg = config(c.as_deref())?;
            let s = commands::eval(&truth, &fit, &out, cfg.margin())?;
            eprintln!(
                "cases {}  rmse {:.3} ± {:.3}  coverage model {:.2} ± {:.2}  standard {:.2} ± {:.2}  greater/equal/less {}/{}/{}",
                s.cases,
                s.rmse.mean,
                s.rmse.sem,
                s.coverage_model.mean,
                s.coverage_model.sem,
                s.coverage_standard.mean,
                s.coverage_standard.sem,
                s.greater,
                s.equal,
                s.less
            );
            Ok(0)
        }
        Command::GradCheck { config: c, term } => {
            let cfg = config(c.as_deref())?;
            let checks = commands::grad_check_command(&cfg, term.as_deref())?;
            let mut worst: f64 = 0.0;
            for r in &checks {
                println!(
                    "{:<10} max_rel_error {:.3e} over {} learnables",
                    r.term, r.max_rel_error, r.checked
                );
                worst = worst.max(r.max_rel_error);
            }
            let ok = worst < cfg.grad_check.tolerance;
            println!(
                "max relative gradient error {worst:.3e} ({})",
                if ok { "ok" } else { "FAILED" }
            );
            Ok(if ok { 0 } else { 3 })
        }
        Command::PlotData { fit, out } => {
            for p in commands::plot_data(&fit, &out)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
