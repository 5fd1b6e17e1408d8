use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gain_est::harness::{csv_string, run_and_write, Experiment, ExperimentConfig};
use gain_est::Error;

#[derive(Parser)]
#[command(name = "gain-est", version, about = "Gain estimation experiments for DC-DM watermarked hosts")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// MSE versus t0.
    SweepT0(Common),
    /// MSE versus α at fixed t0.
    SweepAlpha(Common),
    /// Frequency with which the search interval misses t0.
    Coverage(Common),
    /// Non-differentiable points versus n.
    Nondiff(Common),
    /// Closed-form bound, CRB and bias versus t0.
    Theory(Common),
}

#[derive(Args)]
struct Common {
    /// key=value file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    dwr: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    wnr: Option<String>,
    #[arg(long)]
    n: Option<String>,
    /// scalar | conv
    #[arg(long)]
    lattice: Option<String>,
    /// costa | opt | a number
    #[arg(long)]
    alpha: Option<String>,
    /// a:step:b or a comma list
    #[arg(long)]
    t0_grid: Option<String>,
    #[arg(long)]
    alpha_grid: Option<String>,
    #[arg(long)]
    n_grid: Option<String>,
    #[arg(long)]
    t0: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// var | l1
    #[arg(long)]
    t1: Option<String>,
    /// det | partprob | var
    #[arg(long)]
    bounds: Option<String>,
    #[arg(long)]
    pe1: Option<String>,
    #[arg(long)]
    pe2: Option<String>,
    #[arg(long)]
    pe3: Option<String>,
    /// lowdim | highdim | hybrid | highdim_jump
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    k1: Option<String>,
    /// da | derivative
    #[arg(long)]
    refiner: Option<String>,
    /// Use progressively widened DA as the primary estimator.
    #[arg(long)]
    pwda: bool,
    /// Extra series: comma list of var, l1, pwda, ml-da, ml-derivative, or none.
    #[arg(long)]
    compare: Option<String>,
    /// Record per-trial wall-clock time (output is then not reproducible).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn build(experiment: Experiment, c: Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.experiment = experiment;
    let pairs = [
        ("dwr", c.dwr),
        ("wnr", c.wnr),
        ("n", c.n),
        ("lattice", c.lattice),
        ("alpha", c.alpha),
        ("t0_grid", c.t0_grid),
        ("alpha_grid", c.alpha_grid),
        ("n_grid", c.n_grid),
        ("t0", c.t0),
        ("trials", c.trials),
        ("seed", c.seed),
        ("t1", c.t1),
        ("bounds", c.bounds),
        ("pe1", c.pe1),
        ("pe2", c.pe2),
        ("pe3", c.pe3),
        ("rule", c.rule),
        ("k1", c.k1),
        ("refiner", c.refiner),
        ("compare", c.compare),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.pwda |= c.pwda;
    cfg.timing |= c.timing;
    if let Some(p) = c.out {
        cfg.out = Some(p);
    }
    if let Some(p) = c.svg {
        cfg.svg = Some(p);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, common) = match cli.cmd {
        Cmd::SweepT0(c) => (Experiment::SweepT0, c),
        Cmd::SweepAlpha(c) => (Experiment::SweepAlpha, c),
        Cmd::Coverage(c) => (Experiment::IntervalCoverage, c),
        Cmd::Nondiff(c) => (Experiment::NondiffScaling, c),
        Cmd::Theory(c) => (Experiment::TheoryTable, c),
    };
    let result = build(experiment, common).and_then(|cfg| {
        let series = run_and_write(&cfg)?;
        if cfg.out.is_none() {
            for s in &series {
                println!("# {}", s.label);
                print!("{}", csv_string(&s.rows));
            }
        }
        for s in &series {
            let fb: usize = s.fallbacks.iter().sum();
            if fb > 0 {
                eprintln!("{}: {fb} trial(s) fell back to deterministic bounds", s.label);
            }
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gain-est: {e}");
            match e {
                Error::Io { .. } => ExitCode::from(3),
                Error::Config(_) | Error::Parameter(_) | Error::Domain(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
