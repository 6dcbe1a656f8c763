use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Tree,
    Mc,
    Dp,
    Reflected,
    Fd,
    Flow,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Tree => "tree",
            BackendKind::Mc => "mc",
            BackendKind::Dp => "dp",
            BackendKind::Reflected => "reflected",
            BackendKind::Fd => "fd",
            BackendKind::Flow => "flow",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    pub backend: BackendKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub n_steps: usize,
    /// Sample `W` on this many steps and refine it by Brownian bridges, so
    /// that runs at different `n_steps` share one trajectory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_base_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    pub x_steps: usize,
    pub lattice_factor: f64,
    pub lattice_width: f64,
    pub flow_points: usize,
}

impl Default for SpatialSection {
    fn default() -> Self {
        Self {
            x0: None,
            x_steps: 60,
            lattice_factor: 2.0,
            lattice_width: 6.0,
            flow_points: 801,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub n_paths: usize,
    pub basis_degree: usize,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            n_paths: 20_000,
            basis_degree: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolgridSection {
    pub a_low: f64,
    pub a_high: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub w_seed: u64,
    pub b_seed: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self { w_seed: 1, b_seed: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Significant digits after the point in CSV values.
    pub precision: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            csv: None,
            precision: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutionSection {
    /// Worker threads; 0 picks the number of cores.
    pub workers: usize,
    /// Number of `W` trajectories in the outer loop.
    pub w_samples: usize,
}

impl Default for ExecutionSection {
    fn default() -> Self {
        Self {
            workers: 0,
            w_samples: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub grid: GridSection,
    #[serde(default)]
    pub spatial: SpatialSection,
    #[serde(default)]
    pub mc: McSection,
    /// Overrides the problem's own volatility grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volgrid: Option<VolgridSection>,
    #[serde(default)]
    pub seeds: SeedSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub execution: ExecutionSection,
}

fn bad<T>(field: &str, msg: impl fmt::Display) -> Result<T> {
    Err(Error::Config(format!("{field}: {msg}")))
}

impl ExperimentConfig {
    pub fn new(problem: &str, backend: BackendKind, n_steps: usize) -> Self {
        Self {
            problem: ProblemSection {
                name: problem.to_string(),
                backend,
            },
            grid: GridSection {
                horizon: 1.0,
                n_steps,
                w_base_steps: None,
            },
            spatial: SpatialSection::default(),
            mc: McSection::default(),
            volgrid: None,
            seeds: SeedSection::default(),
            outputs: OutputSection::default(),
            execution: ExecutionSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Range checks; registry membership is checked by the runner.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(g.horizon > 0.0 && g.horizon <= 100.0) {
            return bad("grid.horizon", format!("{} not in (0, 100]", g.horizon));
        }
        if !(1..=1_000_000).contains(&g.n_steps) {
            return bad("grid.n_steps", format!("{} not in [1, 1000000]", g.n_steps));
        }
        if let Some(b) = g.w_base_steps {
            if b == 0 || g.n_steps % b != 0 || !(g.n_steps / b).is_power_of_two() {
                return bad(
                    "grid.w_base_steps",
                    format!("{} must divide n_steps = {} by a power of two", b, g.n_steps),
                );
            }
        }
        let s = &self.spatial;
        if let Some(x0) = s.x0 {
            if !x0.is_finite() {
                return bad("spatial.x0", "not finite");
            }
        }
        if !(4..=100_000).contains(&s.x_steps) {
            return bad("spatial.x_steps", format!("{} not in [4, 100000]", s.x_steps));
        }
        if !(s.lattice_factor > 0.0 && s.lattice_factor <= 100.0) {
            return bad("spatial.lattice_factor", format!("{} not in (0, 100]", s.lattice_factor));
        }
        if !(s.lattice_width >= 1.0 && s.lattice_width <= 20.0) {
            return bad("spatial.lattice_width", format!("{} not in [1, 20]", s.lattice_width));
        }
        if !(8..=100_000).contains(&s.flow_points) {
            return bad("spatial.flow_points", format!("{} not in [8, 100000]", s.flow_points));
        }
        if !(2..=100_000_000).contains(&self.mc.n_paths) {
            return bad("mc.n_paths", format!("{} not in [2, 1e8]", self.mc.n_paths));
        }
        if self.mc.basis_degree > 10 {
            return bad("mc.basis_degree", format!("{} exceeds 10", self.mc.basis_degree));
        }
        if let Some(v) = &self.volgrid {
            if !(v.a_low > 0.0 && v.a_low.is_finite() && v.a_high.is_finite() && v.a_low <= v.a_high) {
                return bad("volgrid", format!("need 0 < a_low <= a_high, got [{}, {}]", v.a_low, v.a_high));
            }
            if !(1..=10_000).contains(&v.n_points) {
                return bad("volgrid.n_points", format!("{} not in [1, 10000]", v.n_points));
            }
        }
        if !(1..=17).contains(&self.outputs.precision) {
            return bad("outputs.precision", format!("{} not in [1, 17]", self.outputs.precision));
        }
        if self.execution.workers > 1024 {
            return bad("execution.workers", format!("{} exceeds 1024", self.execution.workers));
        }
        if !(1..=100_000).contains(&self.execution.w_samples) {
            return bad("execution.w_samples", format!("{} not in [1, 100000]", self.execution.w_samples));
        }
        Ok(())
    }

    /// SHA-256 of the canonical form, ignoring fields that cannot change
    /// the numbers (output path, worker count).
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.outputs.csv = None;
        c.execution.workers = 0;
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }
}
