//! JSON run configuration: top-level keys `model`, `grid`, `simulation`,
//! `experiment`, with dotted-path command-line overrides applied to the raw
//! document before deserialization.

use meanfield_core::error::{Error, Result};
use meanfield_core::model::{InitialDistribution, LqModel};
use meanfield_core::ode::TimeGrid;
use meanfield_core::sim::{Deviation, SimConfig};
use meanfield_core::systemic_risk::SrParams;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Lq {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        g: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
        d0: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        gamma: Vec<Vec<f64>>,
        eta: Vec<f64>,
        qf: Vec<Vec<f64>>,
        gamma_f: Vec<Vec<f64>>,
        eta_f: Vec<f64>,
        horizon: f64,
    },
    SystemicRisk {
        sigma: f64,
        rho: f64,
        q: f64,
        eps0: f64,
        c: f64,
        horizon: f64,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_agents: usize,
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub initial: InitialConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialConfig {
    PointMass {
        mean: Vec<f64>,
    },
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
    UniformBox {
        mean: Vec<f64>,
        half_widths: Vec<f64>,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub menu: Option<Vec<MenuEntry>>,
    pub n_list: Option<Vec<usize>>,
    #[serde(default)]
    pub convergence: bool,
    #[serde(default)]
    pub trace: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MenuEntry {
    ZeroControl,
    Scaled { factor: f64 },
    Constant { value: Vec<f64> },
    ExactOracle,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Validation(format!("{name}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Validation(format!("{name}: ragged or empty rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Lq { .. } => "lq",
            ModelConfig::SystemicRisk { .. } => "systemic-risk",
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            ModelConfig::Lq { horizon, .. } | ModelConfig::SystemicRisk { horizon, .. } => *horizon,
        }
    }

    pub fn to_lq(&self) -> Result<LqModel> {
        match self {
            ModelConfig::Lq {
                a,
                b,
                g,
                d,
                d0,
                q,
                r,
                gamma,
                eta,
                qf,
                gamma_f,
                eta_f,
                horizon,
            } => Ok(LqModel {
                a: matrix("a", a)?,
                b: matrix("b", b)?,
                g: matrix("g", g)?,
                d: matrix("d", d)?,
                d0: matrix("d0", d0)?,
                q: matrix("q", q)?,
                r: matrix("r", r)?,
                gamma: matrix("gamma", gamma)?,
                eta: DVector::from_vec(eta.clone()),
                qf: matrix("qf", qf)?,
                gamma_f: matrix("gamma_f", gamma_f)?,
                eta_f: DVector::from_vec(eta_f.clone()),
                horizon: *horizon,
            }),
            ModelConfig::SystemicRisk { .. } => Err(Error::Validation(
                "this command needs an LQ model; the configuration holds a systemic-risk model"
                    .into(),
            )),
        }
    }

    pub fn to_sr(&self) -> Result<SrParams> {
        match self {
            ModelConfig::SystemicRisk {
                sigma,
                rho,
                q,
                eps0,
                c,
                horizon,
            } => Ok(SrParams {
                sigma: *sigma,
                rho: *rho,
                q: *q,
                eps0: *eps0,
                c: *c,
                horizon: *horizon,
            }),
            ModelConfig::Lq { .. } => Err(Error::Validation(
                "this command needs a systemic-risk model; the configuration holds an LQ model"
                    .into(),
            )),
        }
    }
}

impl RunConfig {
    pub fn time_grid(&self) -> Result<TimeGrid> {
        match self.grid.steps {
            Some(steps) => TimeGrid::new(self.model.horizon(), steps),
            None => TimeGrid::with_default_steps(self.model.horizon()),
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let sim = self
            .simulation
            .as_ref()
            .ok_or_else(|| Error::Validation("configuration has no `simulation` section".into()))?;
        let initial = match &sim.initial {
            InitialConfig::PointMass { mean } => InitialDistribution::PointMass {
                mean: DVector::from_vec(mean.clone()),
            },
            InitialConfig::Gaussian { mean, covariance } => InitialDistribution::Gaussian {
                mean: DVector::from_vec(mean.clone()),
                covariance: matrix("initial.covariance", covariance)?,
            },
            InitialConfig::UniformBox { mean, half_widths } => InitialDistribution::UniformBox {
                mean: DVector::from_vec(mean.clone()),
                half_widths: DVector::from_vec(half_widths.clone()),
            },
        };
        Ok(SimConfig {
            n_agents: sim.n_agents,
            paths: sim.paths,
            dt: sim.dt,
            seed: sim.seed,
            initial,
        })
    }

    pub fn seed(&self) -> Option<u64> {
        self.simulation.as_ref().map(|s| s.seed)
    }

    /// Population sweep for scaling/convergence/pbp commands.
    pub fn n_list(&self, default: &[usize]) -> Vec<usize> {
        self.experiment
            .n_list
            .clone()
            .unwrap_or_else(|| default.to_vec())
    }

    /// The deviation menu, without the exact oracle (which needs a per-N
    /// solve and is attached by the caller when the model supports it).
    /// Returns `(deviations, wants_exact_oracle)`.
    pub fn menu(&self, dim_control: usize) -> (Vec<Deviation>, bool) {
        match &self.experiment.menu {
            None => (meanfield_core::pbp::default_menu(dim_control), false),
            Some(entries) => {
                let mut menu = Vec::new();
                let mut exact = false;
                for e in entries {
                    match e {
                        MenuEntry::ZeroControl => menu.push(Deviation::ZeroControl),
                        MenuEntry::Scaled { factor } => menu.push(Deviation::Scaled(*factor)),
                        MenuEntry::Constant { value } => {
                            menu.push(Deviation::Constant(DVector::from_vec(value.clone())))
                        }
                        MenuEntry::ExactOracle => exact = true,
                    }
                }
                (menu, exact)
            }
        }
    }
}

/// Apply one `--a.b.c=value` override to the raw document, creating
/// intermediate objects as needed. The value is parsed as JSON when
/// possible, otherwise taken as a string.
pub fn apply_override(doc: &mut serde_json::Value, path: &str, raw_value: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::Config(format!("override path `{path}` has an empty segment")));
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override path `{path}` descends into a non-object"))
        })?;
        if i + 1 == segments.len() {
            obj.insert(seg.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("override paths have at least one segment");
}
