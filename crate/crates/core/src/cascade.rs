//! Cascade model: topology, plant constants, price signal, time grid,
//! trajectories and the profit functional.
//!
//! Plants are indexed from 0 internally. Configuration files and the
//! edge lists accepted by [`build_topology`] use 1-based ids. Water always
//! flows to a strictly higher index, so increasing index order is a
//! topological order of the cascade.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Routing structure of the cascade: each plant discharges into at most one
/// downstream plant with a larger index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CascadeTopology {
    downstream: Vec<Option<usize>>,
    upstream: Vec<Vec<usize>>,
}

/// Builds a topology over `n_plants` plants from 1-based `(from, to)` edges.
pub fn build_topology(n_plants: usize, edges: &[(usize, usize)]) -> Result<CascadeTopology> {
    if n_plants == 0 {
        return Err(Error::Topology("a cascade needs at least one plant".into()));
    }
    let mut downstream = vec![None; n_plants];
    for &(from, to) in edges {
        if from == 0 || from > n_plants || to == 0 || to > n_plants {
            return Err(Error::Topology(format!(
                "edge ({from}, {to}) references a plant outside 1..={n_plants}"
            )));
        }
        if to <= from {
            return Err(Error::Topology(format!(
                "edge ({from}, {to}): downstream plant must have a larger index"
            )));
        }
        if let Some(prev) = downstream[from - 1] {
            return Err(Error::Topology(format!(
                "plant {from} has two downstream plants ({} and {to})",
                prev + 1
            )));
        }
        downstream[from - 1] = Some(to - 1);
    }
    Ok(CascadeTopology::from_downstream(downstream))
}

impl CascadeTopology {
    fn from_downstream(downstream: Vec<Option<usize>>) -> Self {
        let mut upstream = vec![Vec::new(); downstream.len()];
        for (j, d) in downstream.iter().enumerate() {
            if let Some(i) = d {
                upstream[*i].push(j);
            }
        }
        Self {
            downstream,
            upstream,
        }
    }

    pub fn n_plants(&self) -> usize {
        self.downstream.len()
    }

    /// The plant receiving the discharge of `plant`, if any.
    pub fn downstream(&self, plant: usize) -> Option<usize> {
        self.downstream[plant]
    }

    /// Plants discharging directly into `plant`.
    pub fn inflows(&self, plant: usize) -> &[usize] {
        &self.upstream[plant]
    }

    /// 1-based edge list, the inverse of [`build_topology`].
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.downstream
            .iter()
            .enumerate()
            .filter_map(|(j, d)| d.map(|i| (j + 1, i + 1)))
            .collect()
    }
}

/// Routing matrix with `M[i][j] = 1` exactly when plant `j` discharges into plant `i`.
pub fn incidence_matrix(topology: &CascadeTopology) -> Vec<Vec<f64>> {
    let n = topology.n_plants();
    let mut m = vec![vec![0.0; n]; n];
    for j in 0..n {
        if let Some(i) = topology.downstream(j) {
            m[i][j] = 1.0;
        }
    }
    m
}

/// Physical constants of one reservoir and its turbine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Natural inflow rate.
    pub inflow: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Lower flow bound; negative values mean pumping.
    pub u_min: f64,
    pub u_max: f64,
    /// Elevation of the reservoir base.
    pub elevation: f64,
    /// Base area of the (cylindrical) reservoir.
    pub area: f64,
}

impl PlantParams {
    pub fn validate(&self, plant: usize) -> Result<()> {
        let err = |message: &str| {
            Err(Error::Params {
                plant: plant + 1,
                message: message.to_string(),
            })
        };
        let all = [
            self.inflow,
            self.v_min,
            self.v_max,
            self.u_min,
            self.u_max,
            self.elevation,
            self.area,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return err("all constants must be finite");
        }
        if self.v_min >= self.v_max {
            return err("V_min must be below V_max");
        }
        if self.u_min > self.u_max {
            return err("u_min must not exceed u_max");
        }
        if self.area <= 0.0 {
            return err("base area must be positive");
        }
        if self.inflow < 0.0 {
            return err("inflow must be nonnegative");
        }
        Ok(())
    }

    /// `max(|u_min|, |u_max|)`
    pub fn max_abs_flow(&self) -> f64 {
        self.u_min.abs().max(self.u_max.abs())
    }

    /// Water level (volume over area plus base elevation).
    pub fn level(&self, volume: f64) -> f64 {
        volume / self.area + self.elevation
    }
}

/// A validated cascade: topology plus one parameter set per plant.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub topology: CascadeTopology,
    pub plants: Vec<PlantParams>,
}

impl Cascade {
    pub fn new(topology: CascadeTopology, plants: Vec<PlantParams>) -> Result<Self> {
        if plants.len() != topology.n_plants() {
            return Err(Error::Shape(format!(
                "{} parameter sets for {} plants",
                plants.len(),
                topology.n_plants()
            )));
        }
        for (i, p) in plants.iter().enumerate() {
            p.validate(i)?;
        }
        Ok(Self { topology, plants })
    }

    pub fn n_plants(&self) -> usize {
        self.plants.len()
    }

    /// Net volume rate of `plant` given flows `u` and spills `s` of all plants.
    pub fn net_inflow(&self, plant: usize, u: &[f64], s: &[f64]) -> f64 {
        let routed: f64 = self
            .topology
            .inflows(plant)
            .iter()
            .map(|&j| u[j] + s[j])
            .sum();
        self.plants[plant].inflow - u[plant] - s[plant] + routed
    }

    /// Largest rate at which water can reach `plant` from outside and from
    /// upstream turbines, ignoring spills.
    pub fn inflow_cap(&self, plant: usize) -> f64 {
        let p = &self.plants[plant];
        let routed: f64 = self
            .topology
            .inflows(plant)
            .iter()
            .map(|&j| self.plants[j].max_abs_flow())
            .sum();
        p.inflow + p.max_abs_flow() + routed
    }
}

/// Effective head of plant `j`: its level minus the level of the plant it
/// discharges into. Terminal plants have no downstream term.
pub fn head(j: usize, volumes: &[f64], cascade: &Cascade) -> f64 {
    let own = cascade.plants[j].level(volumes[j]);
    match cascade.topology.downstream(j) {
        Some(d) => own - cascade.plants[d].level(volumes[d]),
        None => own,
    }
}

/// Piecewise-constant energy price on right-open intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSignal {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl PriceSignal {
    /// `starts` holds `(t_k, c_k)` with `t_0 = 0` and strictly increasing times below `horizon`.
    pub fn new(starts: &[(f64, f64)], horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Grid(format!("horizon must be positive, got {horizon}")));
        }
        let Some(&(t0, _)) = starts.first() else {
            return Err(Error::Grid("price signal needs at least one interval".into()));
        };
        if t0 != 0.0 {
            return Err(Error::Grid("price signal must start at t = 0".into()));
        }
        for w in starts.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Grid("price breakpoints must be strictly increasing".into()));
            }
        }
        if starts.last().unwrap().0 >= horizon {
            return Err(Error::Grid("price breakpoints must lie before the horizon".into()));
        }
        if starts.iter().any(|(_, c)| !c.is_finite()) {
            return Err(Error::Grid("price values must be finite".into()));
        }
        let mut breakpoints: Vec<f64> = starts.iter().map(|(t, _)| *t).collect();
        breakpoints.push(horizon);
        Ok(Self {
            breakpoints,
            values: starts.iter().map(|(_, c)| *c).collect(),
        })
    }

    pub fn constant(value: f64, horizon: f64) -> Result<Self> {
        Self::new(&[(0.0, value)], horizon)
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    /// Breakpoints `0 = t_0 < ... < t_K = T`.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Right-continuous price; at `T` the last interval's value.
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.breakpoints[1..self.breakpoints.len() - 1]
            .iter()
            .take_while(|&&b| b <= t)
            .count();
        self.values[k]
    }
}

/// Uniform grid of `cells` cells over `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    cells: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(Error::Grid("grid needs at least one cell".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Grid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { horizon, cells })
    }

    /// Grid refining `price`: fails if a price breakpoint is not a node.
    pub fn for_price(cells: usize, price: &PriceSignal) -> Result<Self> {
        let grid = Self::new(price.horizon(), cells)?;
        for &b in price.breakpoints() {
            if grid.node_index(b).is_none() {
                return Err(Error::Grid(format!(
                    "price breakpoint t = {b} is not a node of the {cells}-cell grid"
                )));
            }
        }
        Ok(grid)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.cells as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.cells as f64
    }

    /// Index of the node at time `t`, if `t` is a node up to rounding.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.horizon * self.cells as f64;
        let k = x.round();
        if k >= 0.0 && k <= self.cells as f64 && (x - k).abs() <= 1e-9 * (1.0 + x.abs()) {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Price on each cell (the grid must refine the signal).
    pub fn cell_prices(&self, price: &PriceSignal) -> Vec<f64> {
        (0..self.cells)
            .map(|k| price.value_at(self.node(k) + 0.5 * self.dt()))
            .collect()
    }
}

/// Piecewise-constant flows: one vector of plant flows per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    grid: TimeGrid,
    n_plants: usize,
    values: Vec<f64>,
}

impl ControlTrajectory {
    /// `values` is cell-major: entry `k * n_plants + i` is plant `i` on cell `k`.
    pub fn new(grid: TimeGrid, n_plants: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() * n_plants {
            return Err(Error::Shape(format!(
                "control has {} entries, expected {} cells x {} plants",
                values.len(),
                grid.cells(),
                n_plants
            )));
        }
        Ok(Self {
            grid,
            n_plants,
            values,
        })
    }

    pub fn from_fn(grid: TimeGrid, n_plants: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..grid.cells())
            .flat_map(|k| (0..n_plants).map(move |i| (k, i)))
            .map(|(k, i)| f(k, i))
            .collect();
        Self {
            grid,
            n_plants,
            values,
        }
    }

    pub fn constant(grid: TimeGrid, flows: &[f64]) -> Self {
        Self::from_fn(grid, flows.len(), |_, i| flows[i])
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_plants(&self) -> usize {
        self.n_plants
    }

    pub fn cell(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_plants..(k + 1) * self.n_plants]
    }

    pub fn at(&self, k: usize, plant: usize) -> f64 {
        self.values[k * self.n_plants + plant]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Time series of one plant's flow.
    pub fn plant_series(&self, plant: usize) -> Vec<f64> {
        (0..self.grid.cells()).map(|k| self.at(k, plant)).collect()
    }

    /// Checks the flow bounds of every plant on every cell.
    pub fn check_box(&self, cascade: &Cascade) -> Result<()> {
        if self.n_plants != cascade.n_plants() {
            return Err(Error::Shape("control and cascade disagree on plant count".into()));
        }
        for k in 0..self.grid.cells() {
            for (i, p) in cascade.plants.iter().enumerate() {
                let u = self.at(k, i);
                if !(u >= p.u_min && u <= p.u_max) {
                    return Err(Error::Infeasible(format!(
                        "flow {u} of plant {} on cell {k} outside [{}, {}]",
                        i + 1,
                        p.u_min,
                        p.u_max
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Simulated state: volumes at nodes plus per-cell summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub n_plants: usize,
    /// Node-major volumes, `(cells + 1) * n_plants`.
    pub volumes: Vec<f64>,
    /// Cell means `(1/dt) * integral of V` over each cell.
    pub mean_volumes: Vec<f64>,
    /// Cell-average spills.
    pub spills: Vec<f64>,
    /// Cell means of `s * (V_max - V)`; zero for exact complementarity.
    pub spill_slack: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory from node volumes and cell spills, taking cell
    /// means as trapezoid averages and the slack from those means.
    pub fn from_nodes(
        grid: TimeGrid,
        cascade: &Cascade,
        volumes: Vec<f64>,
        spills: Vec<f64>,
    ) -> Result<Self> {
        let n = cascade.n_plants();
        if volumes.len() != (grid.cells() + 1) * n || spills.len() != grid.cells() * n {
            return Err(Error::Shape("trajectory arrays do not match the grid".into()));
        }
        let mean_volumes: Vec<f64> = (0..grid.cells() * n)
            .map(|idx| 0.5 * (volumes[idx] + volumes[idx + n]))
            .collect();
        let spill_slack = (0..grid.cells() * n)
            .map(|idx| spills[idx] * (cascade.plants[idx % n].v_max - mean_volumes[idx]))
            .collect();
        Ok(Self {
            grid,
            n_plants: n,
            volumes,
            mean_volumes,
            spills,
            spill_slack,
        })
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.volumes[k * self.n_plants..(k + 1) * self.n_plants]
    }

    pub fn volume(&self, k: usize, plant: usize) -> f64 {
        self.volumes[k * self.n_plants + plant]
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.mean_volumes[k * self.n_plants..(k + 1) * self.n_plants]
    }

    pub fn spill(&self, k: usize) -> &[f64] {
        &self.spills[k * self.n_plants..(k + 1) * self.n_plants]
    }

    pub fn initial(&self) -> &[f64] {
        self.node(0)
    }

    pub fn terminal(&self) -> &[f64] {
        self.node(self.grid.cells())
    }

    /// Euclidean norm of `V(0) - V(T)`.
    pub fn periodicity_gap(&self) -> f64 {
        self.initial()
            .iter()
            .zip(self.terminal())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `max_{i,t} (V_i^min - V_i(t))^+` over nodes.
    pub fn lower_bound_penetration(&self, cascade: &Cascade) -> f64 {
        let n = self.n_plants;
        self.volumes
            .iter()
            .enumerate()
            .map(|(idx, v)| (cascade.plants[idx % n].v_min - v).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn plant_series(&self, plant: usize) -> Vec<f64> {
        (0..=self.grid.cells())
            .map(|k| self.volume(k, plant))
            .collect()
    }

    pub fn spill_series(&self, plant: usize) -> Vec<f64> {
        (0..self.grid.cells())
            .map(|k| self.spills[k * self.n_plants + plant])
            .collect()
    }
}

fn check_compatible(u: &ControlTrajectory, traj: &Trajectory, cascade: &Cascade) -> Result<()> {
    if u.grid() != &traj.grid {
        return Err(Error::Shape("control and trajectory grids differ".into()));
    }
    if u.n_plants() != cascade.n_plants() || traj.n_plants != cascade.n_plants() {
        return Err(Error::Shape("plant counts differ".into()));
    }
    Ok(())
}

/// Profit `sum_j integral c u_j head_j(V) dt`. Heads are affine in `V`, so
/// evaluating them at the cell-mean volumes integrates each cell exactly.
pub fn objective(
    u: &ControlTrajectory,
    traj: &Trajectory,
    price: &PriceSignal,
    cascade: &Cascade,
) -> Result<f64> {
    check_compatible(u, traj, cascade)?;
    let grid = traj.grid;
    if (grid.horizon() - price.horizon()).abs() > 1e-12 * grid.horizon() {
        return Err(Error::Shape("price horizon differs from grid horizon".into()));
    }
    let prices = grid.cell_prices(price);
    let dt = grid.dt();
    let mut total = 0.0;
    for (k, c) in prices.iter().enumerate() {
        let v = traj.mean(k);
        let cell: f64 = u
            .cell(k)
            .iter()
            .enumerate()
            .map(|(j, uj)| uj * head(j, v, cascade))
            .sum();
        total += c * cell * dt;
    }
    Ok(total)
}

/// Largest deviation of the node volumes from the integrated water balance
/// `V(t_k) - V(0) - integral (A - u - s + M(u + s)) dt`.
pub fn water_balance_residual(
    traj: &Trajectory,
    u: &ControlTrajectory,
    cascade: &Cascade,
) -> Result<f64> {
    check_compatible(u, traj, cascade)?;
    let n = cascade.n_plants();
    let dt = traj.grid.dt();
    let v0 = traj.initial().to_vec();
    let mut integral = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for k in 0..traj.grid.cells() {
        for (i, acc) in integral.iter_mut().enumerate() {
            *acc += dt * cascade.net_inflow(i, u.cell(k), traj.spill(k));
        }
        for i in 0..n {
            let r = traj.volume(k + 1, i) - v0[i] - integral[i];
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}
