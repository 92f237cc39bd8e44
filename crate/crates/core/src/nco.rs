//! Residual checks of the first-order necessary conditions for a candidate
//! process `(u, V, s)`, with bounded-variation multipliers stored as node
//! values (`p`) and per-cell increments (`mu`, `xi`).

use serde::Serialize;

use crate::cascade::{head, Cascade, ControlTrajectory, PriceSignal, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::example::{self, TwoPlantExample};

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointBundle {
    pub lambda: f64,
    pub grid: TimeGrid,
    pub n_plants: usize,
    /// Right-continuous node values, node-major: `p[k * n + i]`; the last
    /// node holds `p(T)`.
    pub p: Vec<f64>,
    /// Cell increments of `mu`, cell-major; `mu(0) = 0`.
    pub mu_inc: Vec<f64>,
    /// Cell increments of `xi`, cell-major.
    pub xi_inc: Vec<f64>,
}

impl AdjointBundle {
    /// Bundle with every multiplier zero.
    pub fn zero(grid: TimeGrid, n_plants: usize) -> Self {
        let cells = grid.cells();
        Self {
            lambda: 0.0,
            grid,
            n_plants,
            p: vec![0.0; (cells + 1) * n_plants],
            mu_inc: vec![0.0; cells * n_plants],
            xi_inc: vec![0.0; cells * n_plants],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, cells) = (self.n_plants, self.grid.cells());
        if self.p.len() != (cells + 1) * n
            || self.mu_inc.len() != cells * n
            || self.xi_inc.len() != cells * n
        {
            return Err(Error::Shape("multiplier arrays do not match the grid".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Infeasible(format!("lambda = {} < 0", self.lambda)));
        }
        Ok(())
    }

    pub fn p_at(&self, k: usize, plant: usize) -> f64 {
        self.p[k * self.n_plants + plant]
    }

    pub fn p_terminal(&self) -> &[f64] {
        &self.p[self.grid.cells() * self.n_plants..]
    }

    pub fn p_initial(&self) -> &[f64] {
        &self.p[..self.n_plants]
    }

    /// `mu_i(T)` for every plant.
    pub fn mu_terminal(&self) -> Vec<f64> {
        let n = self.n_plants;
        (0..n)
            .map(|i| self.mu_inc.iter().skip(i).step_by(n).sum())
            .collect()
    }

    /// Multiplies every multiplier by `kappa`.
    pub fn scaled(&self, kappa: f64) -> Self {
        let scale = |v: &[f64]| v.iter().map(|x| x * kappa).collect();
        Self {
            lambda: self.lambda * kappa,
            grid: self.grid,
            n_plants: self.n_plants,
            p: scale(&self.p),
            mu_inc: scale(&self.mu_inc),
            xi_inc: scale(&self.xi_inc),
        }
    }

    /// `lambda + |p(T)| + sum_i mu_i(T)`.
    pub fn norm(&self) -> f64 {
        let pt = self.p_terminal().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.lambda + pt + self.mu_terminal().iter().sum::<f64>()
    }

    /// Rescales so that [`nontriviality_gap`] vanishes.
    pub fn normalized(&self) -> Result<Self> {
        let k = self.norm();
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::Infeasible("cannot normalize a zero bundle".into()));
        }
        Ok(self.scaled(1.0 / k))
    }
}

fn check_compat(bundle: &AdjointBundle, traj: &Trajectory, cascade: &Cascade) -> Result<()> {
    bundle.validate()?;
    if bundle.grid != traj.grid {
        return Err(Error::Shape("multipliers and trajectory use different grids".into()));
    }
    if bundle.n_plants != cascade.n_plants() || traj.n_plants != cascade.n_plants() {
        return Err(Error::Shape("plant count mismatch".into()));
    }
    Ok(())
}

/// Max over cells and plants of
/// `dp - dxi + lambda * int c (u_i - sum_J u_j) / S_i dt + dmu`.
pub fn adjoint_residual(
    bundle: &AdjointBundle,
    traj: &Trajectory,
    u: &ControlTrajectory,
    price: &PriceSignal,
    cascade: &Cascade,
) -> Result<f64> {
    check_compat(bundle, traj, cascade)?;
    if *u.grid() != bundle.grid || u.n_plants() != bundle.n_plants {
        return Err(Error::Shape("control does not match the multipliers".into()));
    }
    let n = bundle.n_plants;
    let dt = bundle.grid.dt();
    let prices = bundle.grid.cell_prices(price);
    let mut worst: f64 = 0.0;
    for (k, c) in prices.iter().enumerate() {
        let flows = u.cell(k);
        for i in 0..n {
            let net = flows[i]
                - cascade.topology.inflows(i).iter().map(|j| flows[*j]).sum::<f64>();
            let dp = bundle.p_at(k + 1, i) - bundle.p_at(k, i);
            let r = dp - bundle.xi_inc[k * n + i]
                + bundle.lambda * c * dt * net / cascade.plants[i].area
                + bundle.mu_inc[k * n + i];
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// `(xi residual, mu residual)`: max of `|V - Vmax| |dxi|` and
/// `|V - Vmin| |dmu|` over cells, with cell-mean volumes.
pub fn complementarity_residual(
    bundle: &AdjointBundle,
    traj: &Trajectory,
    cascade: &Cascade,
) -> Result<(f64, f64)> {
    check_compat(bundle, traj, cascade)?;
    let n = bundle.n_plants;
    if let Some(idx) = bundle.mu_inc.iter().position(|m| *m < 0.0) {
        return Err(Error::Infeasible(format!(
            "negative mu increment {} on cell {} of plant {}",
            bundle.mu_inc[idx],
            idx / n,
            idx % n + 1
        )));
    }
    let mut xi: f64 = 0.0;
    let mut mu: f64 = 0.0;
    for k in 0..bundle.grid.cells() {
        let v = traj.mean(k);
        for (i, p) in cascade.plants.iter().enumerate() {
            xi = xi.max((v[i] - p.v_max).abs() * bundle.xi_inc[k * n + i].abs());
            mu = mu.max((v[i] - p.v_min).abs() * bundle.mu_inc[k * n + i].abs());
        }
    }
    Ok((xi, mu))
}

/// `|p(0) - p(T)|`.
pub fn periodicity_check(bundle: &AdjointBundle) -> f64 {
    bundle
        .p_initial()
        .iter()
        .zip(bundle.p_terminal())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn downstream_p(bundle: &AdjointBundle, cascade: &Cascade, k: usize, plant: usize) -> f64 {
    cascade
        .topology
        .downstream(plant)
        .map_or(0.0, |d| bundle.p_at(k, d))
}

/// Max over cells of `|s_i| |p_i - p_D(i)|`, with `p` averaged over the cell.
pub fn spill_orthogonality(
    bundle: &AdjointBundle,
    traj: &Trajectory,
    cascade: &Cascade,
) -> Result<f64> {
    check_compat(bundle, traj, cascade)?;
    let mut worst: f64 = 0.0;
    for k in 0..bundle.grid.cells() {
        let s = traj.spill(k);
        for i in 0..bundle.n_plants {
            let gap = |m: usize| bundle.p_at(m, i) - downstream_p(bundle, cascade, m, i);
            let mid = 0.5 * (gap(k) + gap(k + 1));
            worst = worst.max(s[i].abs() * mid.abs());
        }
    }
    Ok(worst)
}

/// `|lambda + |p(T)| + sum_i mu_i(T) - 1|`.
pub fn nontriviality_gap(bundle: &AdjointBundle) -> f64 {
    (bundle.norm() - 1.0).abs()
}

/// Coefficient of each flow in the Hamiltonian, per node.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingFunction {
    pub grid: TimeGrid,
    pub n_plants: usize,
    pub values: Vec<f64>,
}

impl SwitchingFunction {
    pub fn at(&self, k: usize, plant: usize) -> f64 {
        self.values[k * self.n_plants + plant]
    }

    /// Cell value: mean of the two nodes.
    pub fn cell(&self, k: usize, plant: usize) -> f64 {
        0.5 * (self.at(k, plant) + self.at(k + 1, plant))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `sigma_i = p_D(i) - p_i + lambda c head_i(V)` at every node.
pub fn switching_function(
    bundle: &AdjointBundle,
    traj: &Trajectory,
    price: &PriceSignal,
    cascade: &Cascade,
) -> Result<SwitchingFunction> {
    check_compat(bundle, traj, cascade)?;
    let n = bundle.n_plants;
    let mut values = Vec::with_capacity(bundle.p.len());
    for k in 0..=bundle.grid.cells() {
        let c = price.value_at(bundle.grid.node(k));
        let v = traj.node(k);
        for i in 0..n {
            values.push(
                downstream_p(bundle, cascade, k, i) - bundle.p_at(k, i)
                    + bundle.lambda * c * head(i, v, cascade),
            );
        }
    }
    Ok(SwitchingFunction {
        grid: bundle.grid,
        n_plants: n,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HamiltonianCheck {
    pub violation_fraction: f64,
    /// `(cell, plant)` pairs, 1-based plant ids.
    pub violations: Vec<(usize, usize)>,
    pub excluded: usize,
}

/// Flags cells where the flow is not at the bound selected by the sign of
/// `sigma`. Cells within one cell of a sign change are skipped.
pub fn hamiltonian_max_check(
    sigma: &SwitchingFunction,
    u: &ControlTrajectory,
    cascade: &Cascade,
    tol: Option<f64>,
) -> Result<HamiltonianCheck> {
    if *u.grid() != sigma.grid || u.n_plants() != sigma.n_plants {
        return Err(Error::Shape("control does not match the switching function".into()));
    }
    let tol = tol.unwrap_or(1e-6 * (1.0 + sigma.max_abs()));
    let cells = sigma.grid.cells();
    let class = |k: usize, i: usize| {
        let s = sigma.cell(k, i);
        if s > tol {
            1i8
        } else if s < -tol {
            -1
        } else {
            0
        }
    };
    let mut violations = Vec::new();
    let mut excluded = 0;
    let mut checked = 0;
    for (i, p) in cascade.plants.iter().enumerate() {
        let classes: Vec<i8> = (0..cells).map(|k| class(k, i)).collect();
        let near_switch = |k: usize| {
            let lo = k.saturating_sub(1);
            let hi = (k + 1).min(cells - 1);
            (lo..hi).any(|m| classes[m] != classes[m + 1])
        };
        let bound_tol = 1e-6 * (1.0 + p.u_max - p.u_min);
        for (k, cl) in classes.iter().enumerate() {
            if near_switch(k) {
                excluded += 1;
                continue;
            }
            checked += 1;
            let x = u.at(k, i);
            let bad = match cl {
                1 => x < p.u_max - bound_tol,
                -1 => x > p.u_min + bound_tol,
                _ => false,
            };
            if bad {
                violations.push((k, i + 1));
            }
        }
    }
    let violation_fraction = if checked == 0 {
        0.0
    } else {
        violations.len() as f64 / checked as f64
    };
    Ok(HamiltonianCheck {
        violation_fraction,
        violations,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NcoReport {
    pub adjoint_residual: f64,
    pub xi_complementarity: f64,
    pub mu_complementarity: f64,
    pub periodicity_gap: f64,
    pub spill_orthogonality: f64,
    pub nontriviality_gap: f64,
    pub hamiltonian_violation_fraction: f64,
    pub violating_cells: Vec<(usize, usize)>,
}

impl NcoReport {
    /// True when every residual is at most `tol` and no cell violates the
    /// maximum condition.
    pub fn passes(&self, tol: f64) -> bool {
        [
            self.adjoint_residual,
            self.xi_complementarity,
            self.mu_complementarity,
            self.periodicity_gap,
            self.spill_orthogonality,
            self.nontriviality_gap,
        ]
        .iter()
        .all(|r| *r <= tol)
            && self.hamiltonian_violation_fraction == 0.0
    }
}

pub fn check_nco(
    bundle: &AdjointBundle,
    traj: &Trajectory,
    u: &ControlTrajectory,
    price: &PriceSignal,
    cascade: &Cascade,
) -> Result<NcoReport> {
    let (xi, mu) = complementarity_residual(bundle, traj, cascade)?;
    let sigma = switching_function(bundle, traj, price, cascade)?;
    let ham = hamiltonian_max_check(&sigma, u, cascade, None)?;
    Ok(NcoReport {
        adjoint_residual: adjoint_residual(bundle, traj, u, price, cascade)?,
        xi_complementarity: xi,
        mu_complementarity: mu,
        periodicity_gap: periodicity_check(bundle),
        spill_orthogonality: spill_orthogonality(bundle, traj, cascade)?,
        nontriviality_gap: nontriviality_gap(bundle),
        hamiltonian_violation_fraction: ham.violation_fraction,
        violating_cells: ham.violations,
    })
}

/// Multipliers of the two-plant benchmark for initial volume `v0`, built
/// from the transformed variable `Q2` with `lambda = 1` and then normalized.
/// The switching times must be grid nodes.
pub fn synthesize_example_multipliers(v0: f64, grid: &TimeGrid) -> Result<AdjointBundle> {
    let sol = example::analytic_solution(v0, grid)?;
    let (tau1, tau2) = (sol.tau1, sol.tau2);
    for tau in [tau1, tau2] {
        if grid.node_index(tau).is_none() {
            return Err(Error::Grid(format!("switching time {tau} is not a grid node")));
        }
    }
    let price = TwoPlantExample::price();
    let cells = grid.cells();
    let dt = grid.dt();
    let traj = &sol.trajectory;

    let mut p = Vec::with_capacity((cells + 1) * 2);
    for k in 0..=cells {
        let t = grid.node(k);
        let q2 = if k == cells {
            example::q2_left_limit_at_horizon(v0)?
        } else {
            example::q2_profile(t, v0)?
        };
        let p2 = price.value_at(t) * traj.volume(k, 1) - q2;
        p.extend([p2, p2]);
    }

    // dxi_2 = c dt + V2 dc on the full arc [tau1, tau2], zero elsewhere
    let mut xi_inc = Vec::with_capacity(cells * 2);
    for k in 0..cells {
        let (a, b) = (grid.node(k), grid.node(k + 1));
        let on_arc = (b.min(tau2) - a.max(tau1)).max(0.0);
        let mut xi2 = price.value_at(a) * on_arc;
        for (t, jump) in price_jumps(&price) {
            if t > a && t <= b && t >= tau1 && t <= tau2 {
                let node = grid.node_index(t).ok_or_else(|| {
                    Error::Grid(format!("price breakpoint {t} is not a grid node"))
                })?;
                xi2 += traj.volume(node, 1) * jump;
            }
        }
        // V1 sits on its upper bound throughout, so xi_1 absorbs the rest
        // of its adjoint equation with dmu_1 = 0.
        let dp1 = p[2 * (k + 1)] - p[2 * k];
        let xi1 = dp1 + price.value_at(a) * dt * sol.control.at(k, 0);
        xi_inc.extend([xi1, xi2]);
    }

    let bundle = AdjointBundle {
        lambda: 1.0,
        grid: *grid,
        n_plants: 2,
        p,
        mu_inc: vec![0.0; cells * 2],
        xi_inc,
    };
    bundle.normalized()
}

/// Interior price jumps `(time, c(t) - c(t^-))`.
fn price_jumps(price: &PriceSignal) -> Vec<(f64, f64)> {
    let (bp, vals) = (price.breakpoints(), price.values());
    (1..vals.len()).map(|j| (bp[j], vals[j] - vals[j - 1])).collect()
}
