use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bdsde_core::harness::{
    convergence_study, property_suite, registry, run, suite_names, ExperimentConfig, RunRecord,
};
use bdsde_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bdsde", version, about = "Run BDSDE experiments, convergence studies and property suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the W seed; the B seed becomes N + 1.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// CSV output path.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Directory for CSV files when neither --out nor outputs.csv is set.
    #[arg(long, env = "BDSDE_OUT_DIR", default_value = ".", hide_env_values = true)]
    out_dir: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and compare against its oracle.
    Run(Common),
    /// Halve dt repeatedly and fit the convergence order.
    Study {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        halvings: usize,
    },
    /// Run randomized property suites.
    Props {
        /// Suite name, or "all".
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        /// Write the smallest failing instance here.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// List registered problems, their backends and oracles.
    ListProblems,
}

fn load(common: &Common, suffix: &str) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seeds.w_seed = s;
        cfg.seeds.b_seed = s.wrapping_add(1);
    }
    let out = match (&common.out, &cfg.outputs.csv) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.clone(),
        (None, None) => common
            .out_dir
            .join(format!("{}_{}{suffix}.csv", cfg.problem.name, cfg.problem.backend)),
    };
    Ok((cfg, out))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_else(|| "-".into())
}

fn print_record(r: &RunRecord) {
    println!("{} / {}  n_steps = {}  dt = {:e}", r.problem, r.backend, r.n_steps, r.dt);
    println!("{:<20} {:>16} {:>16} {:>14}  status", "quantity", "value", "oracle", "abs_error");
    for q in &r.results {
        let status = match q.within_tolerance() {
            Some(true) => "ok",
            Some(false) => "FAIL",
            None => "-",
        };
        println!(
            "{:<20} {:>16.9e} {:>16} {:>14}  {status}",
            q.quantity,
            q.value,
            opt(q.oracle),
            opt(q.abs_error)
        );
    }
}

fn cmd_run(common: &Common) -> Result<i32, Error> {
    let (mut cfg, out) = load(common, "")?;
    cfg.outputs.csv = Some(out.clone());
    let record = run(&cfg)?;
    if !common.quiet {
        print_record(&record);
        println!(
            "config {}  wall {:.3}s  version {}  csv {}",
            &record.config_hash[..16],
            record.wall_time,
            record.version,
            out.display()
        );
    }
    Ok(record.exit_code())
}

fn cmd_study(common: &Common, halvings: usize) -> Result<i32, Error> {
    let (mut cfg, out) = load(common, "_study")?;
    cfg.outputs.csv = Some(out.clone());
    let table = convergence_study(&cfg, halvings)?;
    if !common.quiet {
        println!("{} / {}  quantity {}", table.problem, table.backend, table.quantity);
        println!("{:>9} {:>14} {:>18} {:>14}", "n_steps", "dt", "value", "abs_error");
        for r in &table.rows {
            println!("{:>9} {:>14.6e} {:>18.10e} {:>14}", r.n_steps, r.dt, r.value, opt(r.abs_error));
        }
        match table.fitted_order {
            Some(p) => println!("fitted order {p:.3}"),
            None => println!("fitted order: undefined (errors at rounding level)"),
        }
        println!("csv {}", out.display());
    }
    Ok(0)
}

fn cmd_props(suite: &str, seed: u64, out: Option<&Path>, quiet: bool) -> Result<i32, Error> {
    let names: Vec<&str> = if suite == "all" { suite_names().to_vec() } else { vec![suite] };
    let mut code = 0;
    for name in names {
        let r = property_suite(name, seed)?;
        if !quiet {
            println!(
                "{:<16} {:>4} instances  {:>3} violations  max violation {:.3e}  {}",
                r.suite,
                r.instances,
                r.violations,
                r.max_violation,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
        if let Some(inst) = &r.failing_instance {
            code = 2;
            eprintln!("smallest failing {} instance:\n{inst}", r.suite);
            if let Some(e) = &r.failing_error {
                eprintln!("error: {e}");
            }
            if let Some(path) = out {
                std::fs::write(path, inst).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            }
        }
    }
    Ok(code)
}

fn cmd_list() -> i32 {
    for p in registry() {
        let backends: Vec<&str> = p.backends.iter().map(|b| b.name()).collect();
        println!("{:<24} [{}]", p.name, backends.join(", "));
        println!("    {}", p.summary);
        println!("    oracle: {}", p.oracle);
    }
    0
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Study { common, halvings } => cmd_study(common, *halvings),
        Command::Props { suite, seed, out, quiet } => cmd_props(suite, *seed, out.as_deref(), *quiet),
        Command::ListProblems => Ok(cmd_list()),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
