//! Direct transcription of the penalized periodic profit problem and its
//! continuation in `gamma` (up), `epsilon` (down) and `alpha` (down).
//!
//! The state is advanced by implicit Euler with a fixed number of substeps
//! per control cell, using the same per-plant closed-form step as the
//! adaptive penalty simulator; the gradient is the exact discrete adjoint of
//! that recursion. The profit and lower-bound penalty use the trapezoid rule
//! on the substep nodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    head, Cascade, ControlTrajectory, PriceSignal, TimeGrid, Trajectory,
};
use crate::error::{Error, Result};
use crate::spillway::{simulate_exact, PenaltyConfig, PenaltyLaw};

/// Free initial volumes and per-cell flows.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    pub v0: Vec<f64>,
    pub u: ControlTrajectory,
}

impl DecisionVector {
    pub fn new(v0: Vec<f64>, u: ControlTrajectory) -> Result<Self> {
        if v0.len() != u.n_plants() {
            return Err(Error::Shape("V0 and control disagree on plant count".into()));
        }
        Ok(Self { v0, u })
    }

    /// Flows at the middle of their box, volumes at the middle of their range.
    pub fn midpoint(cascade: &Cascade, grid: TimeGrid) -> Self {
        let flows: Vec<f64> = cascade
            .plants
            .iter()
            .map(|p| 0.5 * (p.u_min + p.u_max))
            .collect();
        Self {
            v0: cascade.plants.iter().map(|p| 0.5 * (p.v_min + p.v_max)).collect(),
            u: ControlTrajectory::constant(grid, &flows),
        }
    }

    pub fn check_admissible(&self, cascade: &Cascade) -> Result<()> {
        self.u.check_box(cascade)?;
        for (i, (v, p)) in self.v0.iter().zip(&cascade.plants).enumerate() {
            if !v.is_finite() || *v > p.v_max {
                return Err(Error::Infeasible(format!(
                    "initial volume {v} of plant {} above its maximum {}",
                    i + 1,
                    p.v_max
                )));
            }
        }
        Ok(())
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut x = self.v0.clone();
        x.extend_from_slice(self.u.values());
        x
    }

    fn from_flat(x: &[f64], grid: TimeGrid, n: usize) -> Result<Self> {
        Ok(Self {
            v0: x[..n].to_vec(),
            u: ControlTrajectory::new(grid, n, x[n..].to_vec())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    None,
    PreviousIterate,
    Fixed,
}

/// Target of the proximal term; `v0` is used only in fixed mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub u: Vec<f64>,
    pub v0: Option<Vec<f64>>,
}

impl Anchor {
    pub fn from_decision(dv: &DecisionVector, with_v0: bool) -> Self {
        Self {
            u: dv.u.values().to_vec(),
            v0: with_v0.then(|| dv.v0.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerOptions {
    pub max_iterations: usize,
    /// Sup norm of the projected gradient at which a solve stops.
    pub gradient_tolerance: f64,
    /// Relative objective change treated as stagnation.
    pub objective_tolerance: f64,
    pub memory: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            gradient_tolerance: 1e-7,
            objective_tolerance: 1e-13,
            memory: 12,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSchedule {
    pub gamma0: f64,
    pub gamma_growth: f64,
    pub gamma_max: f64,
    pub epsilon0: f64,
    pub epsilon_shrink: f64,
    pub epsilon_min: f64,
    pub alpha0: f64,
    pub alpha_shrink: f64,
    pub alpha_min: f64,
    pub anchor_mode: AnchorMode,
    pub rho0: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
    /// Multiplier updates per stage for the periodicity constraint.
    pub max_periodicity_rounds: usize,
    /// A stage ends once `|V(0) - V(T)|` is below this fraction of `sqrt(2 eps)`.
    pub periodicity_fraction: f64,
    /// Implicit Euler substeps per control cell.
    pub substeps: usize,
    pub per_plant_exponent: bool,
    pub multistart: usize,
    pub seed: u64,
    pub inner: InnerOptions,
}

impl Default for SolverSchedule {
    fn default() -> Self {
        Self {
            gamma0: 25.0,
            gamma_growth: 2.0,
            gamma_max: 6400.0,
            epsilon0: 1e-2,
            epsilon_shrink: 0.1,
            epsilon_min: 1e-6,
            alpha0: 1e-2,
            alpha_shrink: 0.1,
            alpha_min: 1e-6,
            anchor_mode: AnchorMode::PreviousIterate,
            rho0: 10.0,
            rho_growth: 10.0,
            rho_max: 1e12,
            max_periodicity_rounds: 8,
            periodicity_fraction: 0.1,
            substeps: 2,
            per_plant_exponent: true,
            multistart: 0,
            seed: 0,
            inner: InnerOptions::default(),
        }
    }
}

impl SolverSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !(self.gamma0 > 1.0 && self.gamma0.is_finite()) {
            bad.push("gamma0 must exceed 1");
        }
        if !(self.gamma_growth > 1.0) {
            bad.push("gamma_growth must exceed 1");
        }
        if !(self.gamma_max >= self.gamma0) {
            bad.push("gamma_max must be at least gamma0");
        }
        if !pos(self.epsilon0) || !pos(self.epsilon_min) || self.epsilon_min > self.epsilon0 {
            bad.push("need 0 < epsilon_min <= epsilon0");
        }
        if !(self.epsilon_shrink > 0.0 && self.epsilon_shrink < 1.0) {
            bad.push("epsilon_shrink must lie in (0, 1)");
        }
        if !(self.alpha0 >= 0.0) || !(self.alpha_min >= 0.0) || self.alpha_min > self.alpha0 {
            bad.push("need 0 <= alpha_min <= alpha0");
        }
        if !(self.alpha_shrink > 0.0 && self.alpha_shrink < 1.0) {
            bad.push("alpha_shrink must lie in (0, 1)");
        }
        if !pos(self.rho0) || !(self.rho_growth > 1.0) || !(self.rho_max >= self.rho0) {
            bad.push("need rho0 > 0, rho_growth > 1, rho_max >= rho0");
        }
        if !(self.periodicity_fraction > 0.0 && self.periodicity_fraction <= 1.0) {
            bad.push("periodicity_fraction must lie in (0, 1]");
        }
        if self.substeps == 0 {
            bad.push("substeps must be positive");
        }
        if self.inner.max_iterations == 0 || self.inner.memory == 0 {
            bad.push("inner iterations and memory must be positive");
        }
        if !(self.inner.armijo > 0.0 && self.inner.armijo < 1.0)
            || !(self.inner.backtrack > 0.0 && self.inner.backtrack < 1.0)
        {
            bad.push("armijo and backtrack factors must lie in (0, 1)");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(
                bad.into_iter()
                    .map(|m| crate::error::ConfigIssue {
                        path: "solver".into(),
                        message: m.into(),
                    })
                    .collect(),
            ))
        }
    }

    fn penalty(&self, gamma: f64) -> PenaltyConfig {
        let mut cfg = PenaltyConfig::new(gamma);
        cfg.per_plant_exponent = self.per_plant_exponent;
        cfg
    }

    /// `(gamma, epsilon, alpha)` for every stage, in solve order.
    pub fn stages(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        let mut g = self.gamma0;
        loop {
            out.push((g, self.epsilon0, self.alpha0));
            if g >= self.gamma_max * (1.0 - 1e-12) {
                break;
            }
            g = (g * self.gamma_growth).min(self.gamma_max);
        }
        let mut e = self.epsilon0;
        while e > self.epsilon_min * (1.0 + 1e-12) {
            e = (e * self.epsilon_shrink).max(self.epsilon_min);
            out.push((g, e, self.alpha0));
        }
        let mut a = self.alpha0;
        while a > self.alpha_min * (1.0 + 1e-12) {
            a = (a * self.alpha_shrink).max(self.alpha_min);
            out.push((g, e, a));
        }
        out
    }
}

/// Problem data shared by every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub cascade: Cascade,
    pub price: PriceSignal,
    pub grid: TimeGrid,
}

impl Problem {
    pub fn new(cascade: Cascade, price: PriceSignal, grid: TimeGrid) -> Result<Self> {
        if (price.horizon() - grid.horizon()).abs() > 1e-12 * grid.horizon() {
            return Err(Error::Grid("price and grid horizons differ".into()));
        }
        Ok(Self {
            cascade,
            price,
            grid,
        })
    }
}

/// Stage weights of the penalized objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Weights {
    pub gamma: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub rho: f64,
    /// Multiplier estimate for `V(0) - V(T) = 0`; empty means zero.
    pub multiplier: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ObjectiveTerms {
    pub anchor: f64,
    pub profit: f64,
    pub lower_penalty: f64,
    pub proximal: f64,
    pub periodicity: f64,
    pub total: f64,
    /// `|V(0) - V(T)|` of the transcribed trajectory.
    pub periodicity_gap: f64,
}

/// Quadratic penalty `rho max(0, g^2/2 - eps)^2` on the periodicity gap `g`.
pub fn periodicity_term(gap: f64, epsilon: f64, rho: f64) -> f64 {
    let m = (0.5 * gap * gap - epsilon).max(0.0);
    rho * m * m
}

/// Derivative of [`periodicity_term`] with respect to `g^2/2`.
fn periodicity_slope(gap: f64, epsilon: f64, rho: f64) -> f64 {
    2.0 * rho * (0.5 * gap * gap - epsilon).max(0.0)
}

/// The transcribed objective for one stage.
pub struct Transcription<'a> {
    problem: &'a Problem,
    law: PenaltyLaw,
    clamp: f64,
    prices: Vec<f64>,
    substeps: usize,
    weights: Weights,
    anchor: Option<&'a Anchor>,
}

struct Forward {
    volumes: Vec<f64>,
    w: Vec<f64>,
}

impl<'a> Transcription<'a> {
    pub fn new(
        problem: &'a Problem,
        penalty: &PenaltyConfig,
        substeps: usize,
        weights: Weights,
        anchor: Option<&'a Anchor>,
    ) -> Result<Self> {
        let n = problem.cascade.n_plants();
        penalty.validate(n)?;
        if substeps == 0 {
            return Err(Error::Grid("substeps must be positive".into()));
        }
        if let Some(a) = anchor {
            if a.u.len() != problem.grid.cells() * n || a.v0.as_ref().is_some_and(|v| v.len() != n)
            {
                return Err(Error::Shape("anchor does not match the decision".into()));
            }
        }
        Ok(Self {
            problem,
            law: penalty.law(&problem.cascade),
            clamp: penalty.max_exponent_clamp,
            prices: problem.grid.cell_prices(&problem.price),
            substeps,
            weights,
            anchor,
        })
    }

    fn n(&self) -> usize {
        self.problem.cascade.n_plants()
    }

    fn h(&self) -> f64 {
        self.problem.grid.dt() / self.substeps as f64
    }

    fn forward(&self, x: &[f64]) -> Result<Forward> {
        let n = self.n();
        let cascade = &self.problem.cascade;
        let steps = self.problem.grid.cells() * self.substeps;
        let h = self.h();
        let mut volumes = Vec::with_capacity((steps + 1) * n);
        let mut w = Vec::with_capacity(steps * n);
        volumes.extend_from_slice(&x[..n]);
        for q in 0..steps {
            let k = q / self.substeps;
            let flows = &x[n + k * n..n + (k + 1) * n];
            let step = self.law.step(cascade, &volumes[q * n..(q + 1) * n], flows, h);
            if let Some(i) = step.volumes.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    time: (q + 1) as f64 * h,
                    plant: i + 1,
                });
            }
            volumes.extend_from_slice(&step.volumes);
            w.extend_from_slice(&step.w);
        }
        Ok(Forward { volumes, w })
    }

    /// Lower-bound penalty `(exp(-gamma (V - Vmin + eps)) - 1) / sqrt(gamma)`
    /// and its derivative.
    fn lower(&self, plant: usize, v: f64) -> (f64, f64) {
        let g = self.weights.gamma;
        let p = &self.problem.cascade.plants[plant];
        let arg = -g * (v - p.v_min + self.weights.epsilon);
        let root = g.sqrt();
        if arg > self.clamp {
            ((self.clamp.exp() - 1.0) / root, 0.0)
        } else {
            let e = arg.exp();
            ((e - 1.0) / root, -root * e)
        }
    }

    pub fn terms(&self, x: &[f64]) -> Result<ObjectiveTerms> {
        Ok(self.evaluate(x, false)?.0)
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.terms(x)?.total)
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (t, g) = self.evaluate(x, true)?;
        Ok((t.total, g.expect("requested")))
    }

    /// Node volumes of the transcribed trajectory at the cell boundaries.
    pub fn node_volumes(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        let fw = self.forward(x)?;
        Ok((0..=self.problem.grid.cells())
            .flat_map(|k| {
                let q = k * self.substeps;
                fw.volumes[q * n..(q + 1) * n].to_vec()
            })
            .collect())
    }

    fn evaluate(&self, x: &[f64], want_grad: bool) -> Result<(ObjectiveTerms, Option<Vec<f64>>)> {
        let n = self.n();
        let cascade = &self.problem.cascade;
        let grid = &self.problem.grid;
        let cells = grid.cells();
        let m = self.substeps;
        let steps = cells * m;
        let h = self.h();
        let dt = grid.dt();
        if x.len() != n + cells * n {
            return Err(Error::Shape("decision vector has the wrong length".into()));
        }
        let fw = self.forward(x)?;
        let vol = |q: usize| &fw.volumes[q * n..(q + 1) * n];
        let flows = |k: usize| &x[n + k * n..n + (k + 1) * n];

        let mut terms = ObjectiveTerms::default();
        for q in 0..=steps {
            let weight = if q == 0 || q == steps { 0.5 * h } else { h };
            for i in 0..n {
                terms.lower_penalty += weight * self.lower(i, vol(q)[i]).0;
            }
        }
        for q in 0..steps {
            let k = q / m;
            let u = flows(k);
            let c = self.prices[k];
            for (j, uj) in u.iter().enumerate() {
                terms.profit +=
                    0.5 * h * c * uj * (head(j, vol(q), cascade) + head(j, vol(q + 1), cascade));
            }
        }
        if let Some(a) = self.anchor {
            let diff: f64 = x[n..].iter().zip(&a.u).map(|(u, b)| (u - b) * (u - b)).sum();
            terms.proximal = self.weights.alpha * dt * diff;
            if let Some(v) = &a.v0 {
                terms.anchor = 0.5 * x[..n].iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            }
        }
        let delta: Vec<f64> = vol(0).iter().zip(vol(steps)).map(|(a, b)| a - b).collect();
        let gap = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        terms.periodicity_gap = gap;
        let (epsilon, rho) = (self.weights.epsilon, self.weights.rho);
        let mult = |i: usize| self.weights.multiplier.get(i).copied().unwrap_or(0.0);
        // inequality penalty plus augmented Lagrangian of the equation V(0) = V(T)
        terms.periodicity = periodicity_term(gap, epsilon, rho)
            + delta
                .iter()
                .enumerate()
                .map(|(i, d)| mult(i) * d + 0.5 * rho * d * d)
                .sum::<f64>();
        terms.total =
            terms.anchor - terms.profit + terms.lower_penalty + terms.proximal + terms.periodicity;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite { time: 0.0, plant: 0 });
        }
        if !want_grad {
            return Ok((terms, None));
        }

        let mut grad = vec![0.0; x.len()];
        // theta_i = d(sum_j u_j head_j)/dV_i
        let theta = |k: usize, i: usize| {
            let u = flows(k);
            (u[i] - cascade.topology.inflows(i).iter().map(|j| u[*j]).sum::<f64>())
                / cascade.plants[i].area
        };
        let direct = |q: usize, out: &mut Vec<f64>| {
            out.iter_mut().for_each(|g| *g = 0.0);
            let weight = if q == 0 || q == steps { 0.5 * h } else { h };
            for i in 0..n {
                out[i] += weight * self.lower(i, vol(q)[i]).1;
                if q > 0 {
                    let k = (q - 1) / m;
                    out[i] -= 0.5 * h * self.prices[k] * theta(k, i);
                }
                if q < steps {
                    let k = q / m;
                    out[i] -= 0.5 * h * self.prices[k] * theta(k, i);
                }
            }
        };
        let slope = periodicity_slope(gap, epsilon, rho);
        let dpsi: Vec<f64> = (0..n).map(|i| (slope + rho) * delta[i] + mult(i)).collect();

        // direct flow derivatives: profit and proximal terms
        for q in 0..steps {
            let k = q / m;
            let c = self.prices[k];
            for j in 0..n {
                grad[n + k * n + j] -=
                    0.5 * h * c * (head(j, vol(q), cascade) + head(j, vol(q + 1), cascade));
            }
        }
        if let Some(a) = self.anchor {
            for (idx, b) in a.u.iter().enumerate() {
                grad[n + idx] += 2.0 * self.weights.alpha * dt * (x[n + idx] - b);
            }
        }

        let mut lam = vec![0.0; n];
        direct(steps, &mut lam);
        for i in 0..n {
            lam[i] -= dpsi[i];
        }
        let mut beta = vec![0.0; n];
        let mut local = vec![0.0; n];
        for q in (0..steps).rev() {
            let k = q / m;
            for i in (0..n).rev() {
                let w = fw.w[q * n + i];
                let bd = cascade.topology.downstream(i).map_or(0.0, |d| beta[d]);
                beta[i] = (lam[i] + bd * w) / (1.0 + w);
                grad[n + k * n + i] += h * (bd - beta[i]);
            }
            direct(q, &mut local);
            for i in 0..n {
                lam[i] = beta[i] + local[i];
            }
        }
        for i in 0..n {
            grad[i] = lam[i] + dpsi[i];
        }
        if let Some(v) = self.anchor.and_then(|a| a.v0.as_ref()) {
            for i in 0..n {
                grad[i] += x[i] - v[i];
            }
        }
        Ok((terms, Some(grad)))
    }
}

/// Penalized objective of `dv` at the given stage weights (no multiplier
/// shift), simulated with `substeps` implicit Euler steps per cell.
pub fn penalized_objective(
    problem: &Problem,
    dv: &DecisionVector,
    penalty: &PenaltyConfig,
    substeps: usize,
    weights: Weights,
    anchor: Option<&Anchor>,
) -> Result<f64> {
    dv.check_admissible(&problem.cascade)?;
    Transcription::new(problem, penalty, substeps, weights, anchor)?.value(&dv.to_flat())
}

/// Gradient of [`penalized_objective`] with respect to `(V0, u)`, returned
/// as `(dV0, du)` with `du` cell-major.
pub fn gradient(
    problem: &Problem,
    dv: &DecisionVector,
    penalty: &PenaltyConfig,
    substeps: usize,
    weights: Weights,
    anchor: Option<&Anchor>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    dv.check_admissible(&problem.cascade)?;
    let t = Transcription::new(problem, penalty, substeps, weights, anchor)?;
    let (_, mut g) = t.value_and_gradient(&dv.to_flat())?;
    let du = g.split_off(problem.cascade.n_plants());
    Ok((g, du))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnerResult {
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    pub projected_gradient: f64,
}

fn bounds(problem: &Problem) -> (Vec<f64>, Vec<f64>) {
    let plants = &problem.cascade.plants;
    let mut lo: Vec<f64> = plants.iter().map(|_| f64::NEG_INFINITY).collect();
    let mut hi: Vec<f64> = plants.iter().map(|p| p.v_max).collect();
    for _ in 0..problem.grid.cells() {
        lo.extend(plants.iter().map(|p| p.u_min));
        hi.extend(plants.iter().map(|p| p.u_max));
    }
    (lo, hi)
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((v, d), (l, h))| ((v - d).clamp(*l, *h) - v).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected L-BFGS with an active-set restriction of the two-loop recursion
/// and Armijo backtracking along the projection arc.
fn minimize_box(
    f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    opts: &InnerOptions,
) -> Result<(Vec<f64>, InnerResult)> {
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut stalls = 0;
    let mut result = InnerResult {
        value: fx,
        iterations: 0,
        evaluations,
        converged: false,
        line_search_failed: false,
        projected_gradient: projected_gradient_norm(&x, &g, lo, hi),
    };
    for iter in 0..opts.max_iterations {
        let pg = projected_gradient_norm(&x, &g, lo, hi);
        result.projected_gradient = pg;
        result.iterations = iter;
        if pg <= opts.gradient_tolerance {
            result.converged = true;
            break;
        }
        let free: Vec<bool> = x
            .iter()
            .zip(&g)
            .zip(lo.iter().zip(hi))
            .map(|((v, d), (l, h))| !((*v <= *l && *d > 0.0) || (*v >= *h && *d < 0.0)))
            .collect();
        let masked = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(&free).map(|(a, f)| if *f { *a } else { 0.0 }).collect()
        };

        let mut accepted = None;
        for use_memory in [true, false] {
            let dir = if use_memory && !history.is_empty() {
                let mut q = masked(&g);
                let mut alphas = Vec::with_capacity(history.len());
                for (s, y) in history.iter().rev() {
                    let (sm, ym) = (masked(s), masked(y));
                    let sy = dot(&sm, &ym);
                    if sy <= 0.0 {
                        alphas.push(0.0);
                        continue;
                    }
                    let a = dot(&sm, &q) / sy;
                    q.iter_mut().zip(&ym).for_each(|(qi, yi)| *qi -= a * yi);
                    alphas.push(a);
                }
                let (s, y) = history.last().unwrap();
                let (sm, ym) = (masked(s), masked(y));
                let yy = dot(&ym, &ym);
                let scale = if yy > 0.0 { dot(&sm, &ym) / yy } else { 1.0 };
                let scale = if scale > 0.0 { scale } else { 1.0 };
                q.iter_mut().for_each(|v| *v *= scale);
                for ((s, y), a) in history.iter().zip(alphas.iter().rev()) {
                    let (sm, ym) = (masked(s), masked(y));
                    let sy = dot(&sm, &ym);
                    if sy <= 0.0 {
                        continue;
                    }
                    let b = dot(&ym, &q) / sy;
                    q.iter_mut().zip(&sm).for_each(|(qi, si)| *qi += (a - b) * si);
                }
                q.iter().map(|v| -v).collect::<Vec<f64>>()
            } else if use_memory {
                continue;
            } else {
                let gn = g.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
                let first = if history.is_empty() { 1.0 / gn } else { 1.0 };
                masked(&g).iter().map(|v| -v * first).collect()
            };
            if dot(&dir, &g) >= 0.0 {
                continue;
            }
            let mut t = 1.0;
            for _ in 0..opts.max_backtracks {
                let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                project(&mut trial, lo, hi);
                let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                let decrease = dot(&g, &step);
                if decrease >= 0.0 {
                    t *= opts.backtrack;
                    continue;
                }
                evaluations += 1;
                match f(&trial) {
                    Ok((ft, gt)) if ft <= fx + opts.armijo * decrease => {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                    _ => t *= opts.backtrack,
                }
            }
            if accepted.is_some() {
                break;
            }
            history.clear();
        }
        let Some((xn, fnew, gn)) = accepted else {
            result.line_search_failed = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            history.push((s, y));
            if history.len() > opts.memory {
                history.remove(0);
            }
        }
        let rel = (fx - fnew).abs() / fx.abs().max(1.0);
        stalls = if rel <= opts.objective_tolerance { stalls + 1 } else { 0 };
        x = xn;
        fx = fnew;
        g = gn;
        result.iterations = iter + 1;
        if stalls >= 5 {
            result.converged = true;
            break;
        }
    }
    result.value = fx;
    result.evaluations = evaluations;
    result.projected_gradient = projected_gradient_norm(&x, &g, lo, hi);
    Ok((x, result))
}

/// Minimizes one stage from an admissible `init`.
pub fn solve_inner(
    problem: &Problem,
    init: &DecisionVector,
    penalty: &PenaltyConfig,
    substeps: usize,
    weights: Weights,
    anchor: Option<&Anchor>,
    opts: &InnerOptions,
) -> Result<(DecisionVector, InnerResult)> {
    init.check_admissible(&problem.cascade)?;
    let t = Transcription::new(problem, penalty, substeps, weights, anchor)?;
    let (lo, hi) = bounds(problem);
    let (x, res) = minimize_box(|x| t.value_and_gradient(x), init.to_flat(), &lo, &hi, opts)?;
    let n = problem.cascade.n_plants();
    Ok((DecisionVector::from_flat(&x, problem.grid, n)?, res))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub gamma: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub rho: f64,
    pub multiplier: Vec<f64>,
    /// Stage objective at the warm start and at exit.
    pub entry_objective: f64,
    pub objective: f64,
    pub penalty_profit: f64,
    /// Profit of the stage iterate re-simulated with exact spillways.
    pub exact_profit: f64,
    pub periodicity_gap: f64,
    pub lower_penetration: f64,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    pub kept_warm_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchTime {
    pub time: f64,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub stages: Vec<StageRecord>,
    pub decision: DecisionVector,
    /// Exact re-simulation of the final decision.
    pub trajectory: Trajectory,
    pub exact_profit: f64,
    pub exact_periodicity_gap: f64,
    pub seed: Option<u64>,
}

/// Distinct regime of a flow inside its box.
fn regime(x: f64, lo: f64, hi: f64) -> &'static str {
    let tol = 1e-3 * (hi - lo).max(1e-12);
    if x <= lo + tol {
        "lower"
    } else if x >= hi - tol {
        "upper"
    } else {
        "interior"
    }
}

/// Times (grid nodes) at which the flow of `plant` moves between its lower
/// bound, the interior and its upper bound.
pub fn switching_times(u: &ControlTrajectory, plant: usize, cascade: &Cascade) -> Vec<SwitchTime> {
    let p = &cascade.plants[plant];
    let series = u.plant_series(plant);
    let grid = u.grid();
    series
        .windows(2)
        .enumerate()
        .filter_map(|(k, w)| {
            let (a, b) = (regime(w[0], p.u_min, p.u_max), regime(w[1], p.u_min, p.u_max));
            (a != b).then(|| SwitchTime {
                time: grid.node(k + 1),
                from: a.into(),
                to: b.into(),
            })
        })
        .collect()
}

/// Moves each initial volume that lies inside the penalty boundary layer
/// below its maximum onto the maximum. The layer width is twice the
/// equilibrium offset `ln(g)/g` of the plant's stiffness.
pub fn project_to_limit(dv: &DecisionVector, cascade: &Cascade, penalty: &PenaltyConfig) -> DecisionVector {
    let mut out = dv.clone();
    for (i, (v, p)) in out.v0.iter_mut().zip(&cascade.plants).enumerate() {
        let g = penalty.stiffness(i);
        let layer = 2.0 * (g.ln().max(1.0)) / g;
        if p.v_max - *v <= layer {
            *v = p.v_max;
        }
    }
    out
}

/// Re-simulates `dv` with the exact complementarity system.
pub fn extract_spillway(dv: &DecisionVector, cascade: &Cascade) -> Result<Trajectory> {
    dv.check_admissible(cascade)?;
    simulate_exact(cascade, &dv.u, &dv.v0)
}

fn stage_penetration(t: &Transcription, x: &[f64], cascade: &Cascade) -> Result<f64> {
    let n = cascade.n_plants();
    let v = t.node_volumes(x)?;
    Ok(v.iter()
        .enumerate()
        .map(|(idx, x)| (cascade.plants[idx % n].v_min - x).max(0.0))
        .fold(0.0, f64::max))
}

/// Runs every continuation stage from `init` and reports the exact
/// re-simulation of the final iterate.
pub fn solve_continuation(
    problem: &Problem,
    schedule: &SolverSchedule,
    init: &DecisionVector,
) -> Result<SolveReport> {
    schedule.validate()?;
    init.check_admissible(&problem.cascade)?;
    let (lo, hi) = bounds(problem);
    let n = problem.cascade.n_plants();
    let mut current = init.clone();
    let mut stages = Vec::new();
    let mut multiplier = vec![0.0; n];
    let mut rho = schedule.rho0;
    let fixed_anchor = Anchor::from_decision(init, true);
    let mut last_penalty = schedule.penalty(schedule.gamma0);

    for (gamma, epsilon, alpha) in schedule.stages() {
        let penalty = schedule.penalty(gamma);
        let previous = Anchor::from_decision(&current, false);
        let anchor = match schedule.anchor_mode {
            AnchorMode::None => None,
            AnchorMode::PreviousIterate => Some(&previous),
            AnchorMode::Fixed => Some(&fixed_anchor),
        };
        let x0 = current.to_flat();
        let mut x = x0.clone();
        let mut total_iter = 0;
        let mut converged = true;
        let mut ls_failed = false;
        let mut last_gap = f64::INFINITY;
        let target = schedule.periodicity_fraction * (2.0 * epsilon).sqrt();
        for _round in 0..schedule.max_periodicity_rounds.max(1) {
            let weights = Weights {
                gamma,
                epsilon,
                alpha,
                rho,
                multiplier: multiplier.clone(),
            };
            let t = Transcription::new(problem, &penalty, schedule.substeps, weights, anchor)?;
            let start = t.value(&x)?;
            let (xn, res) =
                minimize_box(|v| t.value_and_gradient(v), x.clone(), &lo, &hi, &schedule.inner)?;
            total_iter += res.iterations;
            converged &= res.converged;
            ls_failed |= res.line_search_failed;
            if res.value <= start {
                x = xn;
            }
            let v = t.node_volumes(&x)?;
            let cells = problem.grid.cells();
            let delta: Vec<f64> = (0..n).map(|i| v[i] - v[cells * n + i]).collect();
            let gap = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            if gap <= target {
                break;
            }
            for (m, d) in multiplier.iter_mut().zip(&delta) {
                *m += rho * d;
            }
            if gap > 0.25 * last_gap && rho < schedule.rho_max {
                rho = (rho * schedule.rho_growth).min(schedule.rho_max);
            }
            last_gap = gap;
        }
        let weights = Weights {
            gamma,
            epsilon,
            alpha,
            rho,
            multiplier: multiplier.clone(),
        };
        let t = Transcription::new(problem, &penalty, schedule.substeps, weights, anchor)?;
        let entry_objective = t.value(&x0)?;
        let mut terms = t.terms(&x)?;
        let mut kept = false;
        if terms.total > entry_objective {
            x = x0.clone();
            terms = t.terms(&x)?;
            kept = true;
        }
        current = DecisionVector::from_flat(&x, problem.grid, n)?;
        let exact = extract_spillway(&current, &problem.cascade)?;
        let exact_profit =
            crate::cascade::objective(&current.u, &exact, &problem.price, &problem.cascade)?;
        stages.push(StageRecord {
            gamma,
            epsilon,
            alpha,
            rho,
            multiplier: multiplier.clone(),
            entry_objective,
            objective: terms.total,
            penalty_profit: terms.profit,
            exact_profit,
            periodicity_gap: terms.periodicity_gap,
            lower_penetration: stage_penetration(&t, &x, &problem.cascade)?,
            iterations: total_iter,
            converged,
            line_search_failed: ls_failed,
            kept_warm_start: kept,
        });
        last_penalty = penalty;
    }

    let decision = project_to_limit(&current, &problem.cascade, &last_penalty);
    let trajectory = extract_spillway(&decision, &problem.cascade)?;
    let exact_profit = crate::cascade::objective(
        &decision.u,
        &trajectory,
        &problem.price,
        &problem.cascade,
    )?;
    Ok(SolveReport {
        stages,
        exact_periodicity_gap: trajectory.periodicity_gap(),
        decision,
        trajectory,
        exact_profit,
        seed: None,
    })
}

/// Random admissible start: one uniform flow per plant and a uniform
/// initial volume, drawn from a stream keyed by `seed`.
pub fn random_start(cascade: &Cascade, grid: TimeGrid, seed: u64) -> DecisionVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v0 = Vec::with_capacity(cascade.n_plants());
    let mut flows = Vec::with_capacity(cascade.n_plants());
    for p in &cascade.plants {
        v0.push(rng.gen_range(p.v_min..=p.v_max));
        flows.push(rng.gen_range(p.u_min..=p.u_max));
    }
    DecisionVector {
        v0,
        u: ControlTrajectory::constant(grid, &flows),
    }
}

/// Runs the default start and `schedule.multistart` random starts in
/// parallel and returns the best exact profit among runs whose exact
/// periodicity gap is within `sqrt(2 epsilon_min)`; ties go to the lowest
/// seed, with the default start first.
pub fn multistart(problem: &Problem, schedule: &SolverSchedule) -> Result<SolveReport> {
    schedule.validate()?;
    let starts: Vec<(Option<u64>, DecisionVector)> = std::iter::once((
        None,
        DecisionVector::midpoint(&problem.cascade, problem.grid),
    ))
    .chain((0..schedule.multistart as u64).map(|k| {
        let seed = schedule.seed.wrapping_add(k);
        (Some(seed), random_start(&problem.cascade, problem.grid, seed))
    }))
    .collect();
    let runs: Vec<Result<SolveReport>> = starts
        .par_iter()
        .map(|(seed, init)| {
            solve_continuation(problem, schedule, init).map(|mut r| {
                r.seed = *seed;
                r
            })
        })
        .collect();
    let tol = (2.0 * schedule.epsilon_min).sqrt() + 1e-8;
    let mut best: Option<SolveReport> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(r) => {
                let feasible = r.exact_periodicity_gap <= tol;
                let better = match &best {
                    None => true,
                    Some(b) => {
                        let bf = b.exact_periodicity_gap <= tol;
                        (feasible && !bf) || (feasible == bf && r.exact_profit > b.exact_profit)
                    }
                };
                if better {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least the default start runs"),
    }
}
