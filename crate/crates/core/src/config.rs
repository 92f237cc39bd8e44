//! Run configuration: JSON document, validation with located messages, and
//! conversion into model objects.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::{
    build_topology, Cascade, ControlTrajectory, PlantParams, PriceSignal, TimeGrid,
};
use crate::error::{ConfigIssue, Error, Result};
use crate::ocp::SolverSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub id: usize,
    #[serde(rename = "A")]
    pub inflow: f64,
    #[serde(rename = "Vmin")]
    pub v_min: f64,
    #[serde(rename = "Vmax")]
    pub v_max: f64,
    pub umin: f64,
    pub umax: f64,
    /// Base elevation.
    pub h: f64,
    /// Base area.
    #[serde(rename = "S")]
    pub area: f64,
    pub downstream: Option<usize>,
}

/// Start of a piecewise-constant segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Breakpoint {
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "N")]
    pub cells: usize,
}

/// A fixed control for the simulation commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    #[serde(rename = "V0")]
    pub v0: Vec<f64>,
    /// One piecewise-constant flow profile per plant.
    pub u: Vec<Vec<Breakpoint>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub directory: Option<String>,
    pub formats: Vec<Format>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            directory: None,
            formats: vec![Format::Csv, Format::Json],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub horizon: f64,
    pub plants: Vec<PlantSpec>,
    pub price: Vec<Breakpoint>,
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn issue(path: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        path: path.into(),
        message: message.into(),
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(vec![issue(path, e.into_inner().to_string())])
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(vec![issue(path.display().to_string(), format!("cannot read: {e}"))])
    })?;
    parse_config_str(&text)
}

fn check_series(
    issues: &mut Vec<ConfigIssue>,
    path: &str,
    series: &[Breakpoint],
    horizon: f64,
) {
    match series.first() {
        None => issues.push(issue(path, "needs at least one breakpoint")),
        Some(b) if b.t != 0.0 => issues.push(issue(format!("{path}[0].t"), "must start at t = 0")),
        _ => {}
    }
    for (k, w) in series.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            issues.push(issue(format!("{path}[{}].t", k + 1), "times must be strictly increasing"));
        }
    }
    for (k, b) in series.iter().enumerate() {
        if !(b.t < horizon) && k > 0 {
            issues.push(issue(format!("{path}[{k}].t"), "must lie before the horizon"));
        }
        if !b.value.is_finite() {
            issues.push(issue(format!("{path}[{k}].value"), "must be finite"));
        }
    }
}

impl RunConfig {
    /// Collects every semantic problem, each with its JSON path.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let n = self.plants.len();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            issues.push(issue("horizon", "must be positive and finite"));
        }
        if n == 0 {
            issues.push(issue("plants", "needs at least one plant"));
        }
        for (k, p) in self.plants.iter().enumerate() {
            let at = |f: &str| format!("plants[{k}].{f}");
            if p.id != k + 1 {
                issues.push(issue(at("id"), format!("ids must be 1..{n} in order, expected {}", k + 1)));
            }
            if let Some(d) = p.downstream {
                if d <= p.id {
                    issues.push(issue(at("downstream"), "downstream must exceed id"));
                } else if d > n {
                    issues.push(issue(at("downstream"), format!("no plant with id {d}")));
                }
            }
            let fields = [
                ("A", p.inflow),
                ("Vmin", p.v_min),
                ("Vmax", p.v_max),
                ("umin", p.umin),
                ("umax", p.umax),
                ("h", p.h),
                ("S", p.area),
            ];
            for (name, v) in fields {
                if !v.is_finite() {
                    issues.push(issue(at(name), "must be finite"));
                }
            }
            if !(p.v_min < p.v_max) {
                issues.push(issue(at("Vmax"), "must exceed Vmin"));
            }
            if !(p.umin <= p.umax) {
                issues.push(issue(at("umax"), "must not be below umin"));
            }
            if !(p.area > 0.0) {
                issues.push(issue(at("S"), "must be positive"));
            }
            if !(p.inflow >= 0.0) {
                issues.push(issue(at("A"), "must be nonnegative"));
            }
        }
        check_series(&mut issues, "price", &self.price, self.horizon);
        if self.grid.cells == 0 {
            issues.push(issue("grid.N", "must be positive"));
        } else if issues.is_empty() {
            if let Err(e) = self.time_grid() {
                issues.push(issue("grid.N", e.to_string()));
            }
        }
        if let Some(c) = &self.control {
            if c.v0.len() != n {
                issues.push(issue("control.V0", format!("expected {n} values")));
            }
            for (i, (v, p)) in c.v0.iter().zip(&self.plants).enumerate() {
                if !(v.is_finite() && *v <= p.v_max) {
                    issues.push(issue(format!("control.V0[{i}]"), "must be finite and at most Vmax"));
                }
            }
            if c.u.len() != n {
                issues.push(issue("control.u", format!("expected {n} flow profiles")));
            }
            for (i, (series, p)) in c.u.iter().zip(&self.plants).enumerate() {
                let path = format!("control.u[{i}]");
                check_series(&mut issues, &path, series, self.horizon);
                for (k, b) in series.iter().enumerate() {
                    if b.value < p.umin || b.value > p.umax {
                        issues.push(issue(format!("{path}[{k}].value"), "outside [umin, umax]"));
                    }
                }
            }
        }
        if let Err(Error::Config(mut more)) = self.solver.validate() {
            issues.append(&mut more);
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn cascade(&self) -> Result<Cascade> {
        let edges: Vec<(usize, usize)> = self
            .plants
            .iter()
            .filter_map(|p| p.downstream.map(|d| (p.id, d)))
            .collect();
        let topology = build_topology(self.plants.len(), &edges)?;
        let params = self
            .plants
            .iter()
            .map(|p| PlantParams {
                inflow: p.inflow,
                v_min: p.v_min,
                v_max: p.v_max,
                u_min: p.umin,
                u_max: p.umax,
                elevation: p.h,
                area: p.area,
            })
            .collect();
        Cascade::new(topology, params)
    }

    pub fn price_signal(&self) -> Result<PriceSignal> {
        let starts: Vec<(f64, f64)> = self.price.iter().map(|b| (b.t, b.value)).collect();
        PriceSignal::new(&starts, self.horizon)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::for_price(self.grid.cells, &self.price_signal()?)
    }

    /// The configured control sampled as exact cell averages, with its
    /// initial volumes.
    pub fn fixed_control(&self) -> Result<Option<(Vec<f64>, ControlTrajectory)>> {
        let Some(c) = &self.control else {
            return Ok(None);
        };
        let grid = self.time_grid()?;
        let n = self.plants.len();
        let profiles: Vec<PriceSignal> = c
            .u
            .iter()
            .map(|s| {
                let starts: Vec<(f64, f64)> = s.iter().map(|b| (b.t, b.value)).collect();
                PriceSignal::new(&starts, self.horizon)
            })
            .collect::<Result<_>>()?;
        let cells = grid.cells();
        let mut values = Vec::with_capacity(cells * n);
        for k in 0..cells {
            let (a, b) = (grid.node(k), grid.node(k + 1));
            for (i, prof) in profiles.iter().enumerate() {
                let bp = prof.breakpoints();
                let mut acc = 0.0;
                for (j, v) in prof.values().iter().enumerate() {
                    acc += v * (b.min(bp[j + 1]) - a.max(bp[j])).max(0.0);
                }
                let p = &self.plants[i];
                values.push((acc / grid.dt()).clamp(p.umin, p.umax));
            }
        }
        Ok(Some((c.v0.clone(), ControlTrajectory::new(grid, n, values)?)))
    }
}

/// The two-plant benchmark configuration bundled with the crate.
pub const TWO_PLANT_JSON: &str = include_str!("../examples/two_plant.json");
