//! Configuration-driven experiment runner.

mod config;
mod props;
mod registry;

use std::path::Path;
use std::time::Instant;

pub use config::{
    BackendKind, ExecutionSection, ExperimentConfig, GridSection, McSection, OutputSection, ProblemSection,
    SeedSection, SpatialSection, VolgridSection,
};
pub use props::{property_suite, suite_names, SuiteReport};
pub use registry::{lookup, registry, ProblemInfo};

use crate::error::{Error, Result};
use registry::{evaluate, Ctx, Measured};

pub const CSV_HEADER: [&str; 7] = ["quantity", "dt", "value", "oracle", "abs_error", "seed_w", "seed_b"];

#[derive(Clone, Debug, PartialEq)]
pub struct QuantityResult {
    pub quantity: String,
    pub dt: f64,
    pub value: f64,
    pub oracle: Option<f64>,
    /// `|value − oracle|`; the root mean square over `W` samples when
    /// there are several.
    pub abs_error: Option<f64>,
    pub tolerance: Option<f64>,
}

impl QuantityResult {
    pub fn within_tolerance(&self) -> Option<bool> {
        match (self.abs_error, self.tolerance) {
            (Some(e), Some(t)) => Some(e <= t),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub problem: String,
    pub backend: BackendKind,
    pub n_steps: usize,
    pub dt: f64,
    pub seed_w: u64,
    pub seed_b: u64,
    pub w_samples: usize,
    pub results: Vec<QuantityResult>,
    /// Seconds; not part of the CSV.
    pub wall_time: f64,
    pub version: &'static str,
}

impl RunRecord {
    pub fn result(&self, quantity: &str) -> Option<&QuantityResult> {
        self.results.iter().find(|r| r.quantity == quantity)
    }

    pub fn failures(&self) -> Vec<&QuantityResult> {
        self.results
            .iter()
            .filter(|r| r.within_tolerance() == Some(false))
            .collect()
    }

    /// No quantity with an oracle is out of tolerance.
    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// Process exit code for a finished run: 0 or 2 (tolerance failure).
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            2
        }
    }

    pub fn csv_rows(&self, precision: usize) -> Vec<[String; 7]> {
        let num = |v: f64| format!("{:.*e}", precision, v);
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        self.results
            .iter()
            .map(|r| {
                [
                    r.quantity.clone(),
                    num(r.dt),
                    num(r.value),
                    opt(r.oracle),
                    opt(r.abs_error),
                    self.seed_w.to_string(),
                    self.seed_b.to_string(),
                ]
            })
            .collect()
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("execution.workers: {e}")))
}

fn aggregate(samples: Vec<Vec<Measured>>, dt: f64) -> Result<Vec<QuantityResult>> {
    let first = &samples[0];
    let s = samples.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for (k, q) in first.iter().enumerate() {
        let col: Vec<&Measured> = samples
            .iter()
            .map(|m| m.get(k).filter(|x| x.quantity == q.quantity))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Consistency(format!("quantity {} missing in a W sample", q.quantity)))?;
        let value = col.iter().map(|c| c.value).sum::<f64>() / s;
        let oracles: Option<Vec<f64>> = col.iter().map(|c| c.oracle).collect();
        let (oracle, abs_error) = match oracles {
            Some(o) => {
                let mse = col.iter().zip(&o).map(|(c, o)| (c.value - o).powi(2)).sum::<f64>() / s;
                (Some(o.iter().sum::<f64>() / s), Some(mse.sqrt()))
            }
            None => (None, None),
        };
        let tolerance = col
            .iter()
            .map(|c| c.tolerance)
            .collect::<Option<Vec<f64>>>()
            .map(|t| t.iter().sum::<f64>() / s);
        out.push(QuantityResult {
            quantity: q.quantity.to_string(),
            dt,
            value,
            oracle,
            abs_error,
            tolerance,
        });
    }
    Ok(out)
}

fn execute(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let info = lookup(&config.problem.name)?;
    let start = Instant::now();
    let samples = pool(config.execution.workers)?.install(|| {
        (0..config.execution.w_samples as u64)
            .map(|s| {
                let ctx = Ctx::new(config, info, s)?;
                evaluate(info, &ctx)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let dt = config.grid.horizon / config.grid.n_steps as f64;
    Ok(RunRecord {
        config_hash: config.hash()?,
        problem: info.name.to_string(),
        backend: config.problem.backend,
        n_steps: config.grid.n_steps,
        dt,
        seed_w: config.seeds.w_seed,
        seed_b: config.seeds.b_seed,
        w_samples: config.execution.w_samples,
        results: aggregate(samples, dt)?,
        wall_time: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION"),
    })
}

pub fn write_csv(path: &Path, records: &[RunRecord], precision: usize) -> Result<()> {
    let io = |e: csv::Error| Error::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in records {
        for row in r.csv_rows(precision) {
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Run the configured pipeline and write the CSV if `outputs.csv` is set.
pub fn run(config: &ExperimentConfig) -> Result<RunRecord> {
    let record = execute(config)?;
    if let Some(path) = &config.outputs.csv {
        write_csv(path, std::slice::from_ref(&record), config.outputs.precision)?;
    }
    Ok(record)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub n_steps: usize,
    pub dt: f64,
    pub value: f64,
    pub oracle: Option<f64>,
    pub abs_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyTable {
    pub problem: String,
    pub backend: BackendKind,
    /// The quantity whose errors are fitted (the first one of the problem).
    pub quantity: String,
    pub rows: Vec<StudyRow>,
    /// Least-squares slope of `log error` against `log dt`, over levels with
    /// an error above rounding.
    pub fitted_order: Option<f64>,
    pub records: Vec<RunRecord>,
}

fn fit_order(rows: &[StudyRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| {
            let e = r.abs_error?;
            let floor = 1e-13 * r.oracle.unwrap_or(0.0).abs().max(1.0);
            (e > floor).then(|| (r.dt.ln(), e.ln()))
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Repeat the run with `dt` halved `halvings` times (paths quadrupled in
/// Monte Carlo mode). Every level refines the same `W` trajectory.
pub fn convergence_study(config: &ExperimentConfig, halvings: usize) -> Result<StudyTable> {
    if halvings < 2 {
        return Err(Error::Config(format!("study needs at least 2 halvings, got {halvings}")));
    }
    config.validate()?;
    let base = config.grid.w_base_steps.unwrap_or(config.grid.n_steps);
    let mut records = Vec::with_capacity(halvings + 1);
    for k in 0..=halvings {
        let mut c = config.clone();
        c.grid.n_steps = config.grid.n_steps << k;
        c.grid.w_base_steps = Some(base);
        if c.problem.backend == BackendKind::Mc {
            c.mc.n_paths = config.mc.n_paths * 4usize.pow(k as u32);
        }
        c.outputs.csv = None;
        records.push(execute(&c)?);
    }
    let quantity = records[0]
        .results
        .first()
        .map(|r| r.quantity.clone())
        .ok_or_else(|| Error::Consistency("run produced no quantities".into()))?;
    let rows: Vec<StudyRow> = records
        .iter()
        .map(|r| {
            let q = r.result(&quantity).expect("every level reports the same quantities");
            StudyRow {
                n_steps: r.n_steps,
                dt: r.dt,
                value: q.value,
                oracle: q.oracle,
                abs_error: q.abs_error,
            }
        })
        .collect();
    if let Some(path) = &config.outputs.csv {
        write_csv(path, &records, config.outputs.precision)?;
    }
    Ok(StudyTable {
        problem: config.problem.name.clone(),
        backend: config.problem.backend,
        quantity,
        fitted_order: fit_order(&rows),
        rows,
        records,
    })
}
