//! Forward simulation of the water balance with uncontrolled spillways.
//!
//! Two simulators are provided:
//!
//! * [`simulate_penalty`] replaces the spill of plant `i` by the smooth law
//!   `s_i = g_i exp(g_i (V_i - V_i^max))` with stiffness `g_i = gamma^(i+1)`
//!   (or a user supplied increasing ladder) and integrates the resulting stiff
//!   system with adaptive implicit Euler.
//! * [`simulate_exact`] integrates the complementarity system
//!   `s >= 0, V <= V^max, s (V - V^max) = 0` directly. A reservoir that is
//!   full and receives a nonnegative net inflow spills exactly that inflow.
//!
//! Both process plants in increasing index order, which is a topological
//! order of the cascade. The implicit step for one plant,
//! `x + h s(x) = b`, is solved in closed form through the Wright omega
//! function, so no Newton iteration on the stiff exponential is needed.

use rayon::prelude::*;
use serde::Serialize;

use crate::cascade::{Cascade, ControlTrajectory, TimeGrid, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegratorTolerances {
    pub rtol: f64,
    pub atol: f64,
    pub h_min: f64,
    pub h_max: f64,
}

impl Default for IntegratorTolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            h_min: 1e-14,
            h_max: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyConfig {
    pub gamma: f64,
    /// Use `gamma^(i+1)` for plant `i`; otherwise every plant gets `gamma`.
    pub per_plant_exponent: bool,
    /// Explicit stiffness per plant, replacing the power ladder. Must be
    /// strictly increasing along the plant index.
    pub stiffness_override: Option<Vec<f64>>,
    /// Upper cap on the exponent before `exp` in [`penalty_spill`].
    pub max_exponent_clamp: f64,
    pub integrator: IntegratorTolerances,
}

impl PenaltyConfig {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            per_plant_exponent: true,
            stiffness_override: None,
            max_exponent_clamp: 700.0,
            integrator: IntegratorTolerances::default(),
        }
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self {
            gamma,
            ..self.clone()
        }
    }

    pub fn validate(&self, n_plants: usize) -> Result<()> {
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return Err(Error::Infeasible(format!(
                "penalty gamma must exceed 1, got {}",
                self.gamma
            )));
        }
        if !(self.max_exponent_clamp >= 0.0) {
            return Err(Error::Infeasible("exponent clamp must be nonnegative".into()));
        }
        let tol = &self.integrator;
        if !(tol.rtol > 0.0 && tol.atol > 0.0 && tol.h_min > 0.0 && tol.h_max > tol.h_min) {
            return Err(Error::Infeasible("integrator tolerances must be positive".into()));
        }
        if let Some(g) = &self.stiffness_override {
            if g.len() != n_plants {
                return Err(Error::Shape("stiffness override length differs from plant count".into()));
            }
            if g.iter().any(|x| !(*x > 1.0 && x.is_finite())) || g.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Infeasible(
                    "stiffness override must exceed 1 and increase with the plant index".into(),
                ));
            }
        }
        Ok(())
    }

    /// Stiffness `g_i` of plant `plant` (0-based).
    pub fn stiffness(&self, plant: usize) -> f64 {
        if let Some(g) = &self.stiffness_override {
            return g[plant];
        }
        if self.per_plant_exponent {
            self.gamma.powi(plant as i32 + 1)
        } else {
            self.gamma
        }
    }

    pub(crate) fn law(&self, cascade: &Cascade) -> PenaltyLaw {
        PenaltyLaw::new(
            (0..cascade.n_plants()).map(|i| self.stiffness(i)).collect(),
            cascade.plants.iter().map(|p| p.v_max).collect(),
        )
    }
}

/// Penalty spill rate `g exp(g (V - V^max))` of plant `plant` (0-based),
/// evaluated in log space with the exponent capped at the configured clamp.
pub fn penalty_spill(plant: usize, volume: f64, v_max: f64, cfg: &PenaltyConfig) -> f64 {
    let g = cfg.stiffness(plant);
    let exponent = (g.ln() + g * (volume - v_max)).min(cfg.max_exponent_clamp);
    exponent.exp()
}

/// Wright omega function: the solution `w > 0` of `w + ln w = z`.
pub(crate) fn wright_omega(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z < -40.0 {
        // w = e^(z - w) and w < 1e-17 here
        return z.exp();
    }
    let mut w = if z < -2.0 {
        z.exp()
    } else if z < 1.0 {
        // chord through (z, w) = (-2, ~0.12) and (1, 1)
        0.12 + (z + 2.0) * 0.88 / 3.0
    } else {
        z - z.ln()
    };
    for _ in 0..64 {
        let r = w + w.ln() - z;
        // Halley step for f(w) = w + ln w - z
        let f1 = 1.0 + 1.0 / w;
        let f2 = -1.0 / (w * w);
        let mut next = w - 2.0 * r * f1 / (2.0 * f1 * f1 - r * f2);
        if !(next > 0.0) {
            next = 0.5 * w;
        }
        let done = (next - w).abs() <= 4.0 * f64::EPSILON * next;
        w = next;
        if done {
            break;
        }
    }
    w
}

/// Stiffness ladder and upper bounds; the per-plant spill law is
/// `s(V) = g exp(g (V - V^max))`.
#[derive(Debug, Clone)]
pub(crate) struct PenaltyLaw {
    pub stiffness: Vec<f64>,
    log_stiffness: Vec<f64>,
    pub v_max: Vec<f64>,
}

/// Result of one implicit Euler step.
#[derive(Debug, Clone)]
pub(crate) struct ImplicitStep {
    pub volumes: Vec<f64>,
    /// Spilled volume over the step, `h * s(V_new)`.
    pub spilled: Vec<f64>,
    /// `h g s'`-type factor: `w = h * ds/dV` at the new state.
    pub w: Vec<f64>,
}

impl PenaltyLaw {
    pub fn new(stiffness: Vec<f64>, v_max: Vec<f64>) -> Self {
        let log_stiffness = stiffness.iter().map(|g| g.ln()).collect();
        Self {
            stiffness,
            log_stiffness,
            v_max,
        }
    }

    /// Solves `x + h g e^{g (x - V^max)} = b` for one plant, returning
    /// `(x, h s(x), w)` with `w = h g s(x)`.
    pub fn solve_plant(&self, plant: usize, b: f64, h: f64) -> (f64, f64, f64) {
        let g = self.stiffness[plant];
        let z = h.ln() + 2.0 * self.log_stiffness[plant] + g * (b - self.v_max[plant]);
        let w = wright_omega(z);
        let spilled = w / g;
        (b - spilled, spilled, w)
    }

    /// One implicit Euler step of length `h` under constant flows `u`.
    pub fn step(&self, cascade: &Cascade, volumes: &[f64], u: &[f64], h: f64) -> ImplicitStep {
        let n = cascade.n_plants();
        let mut out = ImplicitStep {
            volumes: vec![0.0; n],
            spilled: vec![0.0; n],
            w: vec![0.0; n],
        };
        for i in 0..n {
            let routed: f64 = cascade
                .topology
                .inflows(i)
                .iter()
                .map(|&j| h * u[j] + out.spilled[j])
                .sum();
            let b = volumes[i] + h * (cascade.plants[i].inflow - u[i]) + routed;
            let (x, spilled, w) = self.solve_plant(i, b, h);
            out.volumes[i] = x;
            out.spilled[i] = spilled;
            out.w[i] = w;
        }
        out
    }
}

fn check_initial(cascade: &Cascade, v0: &[f64]) -> Result<()> {
    if v0.len() != cascade.n_plants() {
        return Err(Error::Shape("initial volume vector has wrong length".into()));
    }
    for (i, (v, p)) in v0.iter().zip(&cascade.plants).enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                time: 0.0,
                plant: i + 1,
            });
        }
        if *v > p.v_max {
            return Err(Error::Infeasible(format!(
                "initial volume {v} of plant {} exceeds V_max = {}",
                i + 1,
                p.v_max
            )));
        }
    }
    Ok(())
}

/// Integrates the penalized water balance with adaptive implicit Euler
/// (step doubling error control), sub-stepping inside each control cell.
pub fn simulate_penalty(
    cascade: &Cascade,
    u: &ControlTrajectory,
    v0: &[f64],
    cfg: &PenaltyConfig,
) -> Result<Trajectory> {
    let n = cascade.n_plants();
    cfg.validate(n)?;
    check_initial(cascade, v0)?;
    if u.n_plants() != n {
        return Err(Error::Shape("control and cascade disagree on plant count".into()));
    }
    u.check_box(cascade)?;
    let law = cfg.law(cascade);
    let tol = &cfg.integrator;
    let grid = *u.grid();
    let cells = grid.cells();
    let dt = grid.dt();

    let mut volumes = Vec::with_capacity((cells + 1) * n);
    let mut mean_volumes = Vec::with_capacity(cells * n);
    let mut spills = Vec::with_capacity(cells * n);
    let mut spill_slack = Vec::with_capacity(cells * n);
    volumes.extend_from_slice(v0);

    let mut v = v0.to_vec();
    let mut h = dt.min(tol.h_max);
    for k in 0..cells {
        let flows = u.cell(k);
        let t_start = grid.node(k);
        let mut elapsed = 0.0;
        let mut int_v = vec![0.0; n];
        let mut int_s = vec![0.0; n];
        let mut int_slack = vec![0.0; n];
        while elapsed < dt {
            let remaining = dt - elapsed;
            let last = h >= remaining * (1.0 - 1e-12);
            let step = if last { remaining } else { h };
            let full = law.step(cascade, &v, flows, step);
            let half1 = law.step(cascade, &v, flows, 0.5 * step);
            let half2 = law.step(cascade, &half1.volumes, flows, 0.5 * step);

            let mut err: f64 = 0.0;
            let mut worst = 0;
            for i in 0..n {
                let x = half2.volumes[i];
                if !x.is_finite() {
                    return Err(Error::NonFinite {
                        time: t_start + elapsed,
                        plant: i + 1,
                    });
                }
                let scale = tol.atol + tol.rtol * v[i].abs().max(x.abs());
                let e = (x - full.volumes[i]).abs() / scale;
                if e > err {
                    err = e;
                    worst = i;
                }
            }
            let factor = (0.9 / err.max(1e-10).sqrt()).clamp(0.2, 5.0);
            if err <= 1.0 {
                for i in 0..n {
                    let (a, b, c) = (v[i], half1.volumes[i], half2.volumes[i]);
                    int_v[i] += 0.25 * step * (a + 2.0 * b + c);
                    int_s[i] += half1.spilled[i] + half2.spilled[i];
                    int_slack[i] += half1.spilled[i] * (law.v_max[i] - b)
                        + half2.spilled[i] * (law.v_max[i] - c);
                }
                v = half2.volumes;
                elapsed = if last { dt } else { elapsed + step };
                if !last {
                    h = (step * factor).min(tol.h_max);
                }
            } else {
                let next = step * factor;
                if next < tol.h_min {
                    return Err(Error::StepUnderflow {
                        time: t_start + elapsed,
                        plant: worst + 1,
                    });
                }
                h = next;
            }
        }
        volumes.extend_from_slice(&v);
        mean_volumes.extend(int_v.iter().map(|x| x / dt));
        spills.extend(int_s.iter().map(|x| x / dt));
        spill_slack.extend(int_slack.iter().map(|x| x / dt));
    }
    Ok(Trajectory {
        grid,
        n_plants: n,
        volumes,
        mean_volumes,
        spills,
        spill_slack,
    })
}

/// Finds a zero of `f` on `[a, b]` given a sign change, using regula falsi
/// with the Illinois modification and a bisection fallback.
pub(crate) fn locate_event(
    f: impl Fn(f64) -> f64,
    mut a: f64,
    mut b: f64,
    time_tol: f64,
) -> Result<f64> {
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() || !fa.is_finite() || !fb.is_finite() {
        return Err(Error::EventLocation(format!(
            "no sign change on [{a}, {b}] (f = {fa}, {fb})"
        )));
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let mut c = (a * fb - b * fa) / (fb - fa);
        if !(c > a && c < b) {
            c = 0.5 * (a + b);
        }
        let fc = f(c);
        if fc == 0.0 || (b - a) <= time_tol {
            return Ok(c);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
        // Exit once the secant estimate stops moving.
        if (b - a) <= time_tol || fc.abs() <= f64::EPSILON * (1.0 + c.abs()) {
            return Ok(c);
        }
    }
    Err(Error::EventLocation(format!("no convergence on [{a}, {b}]")))
}

/// Piecewise-constant spill of one plant inside one cell: `(start, rate)`
/// pieces relative to the cell start, sorted.
type SpillProfile = Vec<(f64, f64)>;

fn profile_value(profile: &SpillProfile, tau: f64) -> f64 {
    profile
        .iter()
        .take_while(|(start, _)| *start <= tau)
        .last()
        .map_or(0.0, |(_, s)| *s)
}

struct PlantCell {
    volume: f64,
    pinned: bool,
    profile: SpillProfile,
    int_v: f64,
    int_s: f64,
    int_slack: f64,
}

/// Integrates the complementarity system exactly for piecewise-constant
/// flows. Boundary arrivals are located by root finding on `V_i - V_i^max`.
pub fn simulate_exact(cascade: &Cascade, u: &ControlTrajectory, v0: &[f64]) -> Result<Trajectory> {
    let n = cascade.n_plants();
    check_initial(cascade, v0)?;
    if u.n_plants() != n {
        return Err(Error::Shape("control and cascade disagree on plant count".into()));
    }
    u.check_box(cascade)?;
    let grid: TimeGrid = *u.grid();
    let cells = grid.cells();
    let dt = grid.dt();
    let time_tol = grid.horizon() * 1e-10;

    let mut volumes = Vec::with_capacity((cells + 1) * n);
    let mut mean_volumes = Vec::with_capacity(cells * n);
    let mut spills = Vec::with_capacity(cells * n);
    let mut spill_slack = Vec::with_capacity(cells * n);
    volumes.extend_from_slice(v0);

    let mut v = v0.to_vec();
    let mut pinned: Vec<bool> = v0
        .iter()
        .zip(&cascade.plants)
        .map(|(x, p)| *x >= p.v_max)
        .collect();

    for k in 0..cells {
        let flows = u.cell(k);
        let t_start = grid.node(k);
        let mut states: Vec<PlantCell> = Vec::with_capacity(n);
        for i in 0..n {
            let p = &cascade.plants[i];
            let ups = cascade.topology.inflows(i);
            // Breakpoints where upstream spills change.
            let mut cuts: Vec<f64> = ups
                .iter()
                .flat_map(|&j| states[j].profile.iter().map(|(t, _)| *t))
                .filter(|t| *t > 0.0 && *t < dt)
                .collect();
            cuts.push(0.0);
            cuts.push(dt);
            cuts.sort_by(f64::total_cmp);
            cuts.dedup_by(|a, b| (*a - *b).abs() <= time_tol);

            let mut st = PlantCell {
                volume: v[i],
                pinned: pinned[i],
                profile: Vec::new(),
                int_v: 0.0,
                int_s: 0.0,
                int_slack: 0.0,
            };
            for w in cuts.windows(2) {
                let (a, b) = (w[0], w[1]);
                let mid = 0.5 * (a + b);
                let routed: f64 = ups
                    .iter()
                    .map(|&j| flows[j] + profile_value(&states[j].profile, mid))
                    .sum();
                let rate = p.inflow - flows[i] + routed;
                advance_plant(&mut st, rate, a, b, p.v_max, time_tol)
                    .map_err(|e| match e {
                        Error::EventLocation(m) => Error::EventLocation(format!(
                            "plant {} near t = {}: {m}",
                            i + 1,
                            t_start + a
                        )),
                        other => other,
                    })?;
                if !st.volume.is_finite() {
                    return Err(Error::NonFinite {
                        time: t_start + b,
                        plant: i + 1,
                    });
                }
            }
            states.push(st);
        }
        for (i, st) in states.iter().enumerate() {
            v[i] = st.volume;
            pinned[i] = st.pinned;
            mean_volumes.push(st.int_v / dt);
            spills.push(st.int_s / dt);
            spill_slack.push(st.int_slack / dt);
        }
        volumes.extend_from_slice(&v);
    }
    Ok(Trajectory {
        grid,
        n_plants: n,
        volumes,
        mean_volumes,
        spills,
        spill_slack,
    })
}

/// Advances one plant over `[a, b]` (cell-relative) under a constant net
/// rate, appending spill pieces and accumulating cell integrals.
fn advance_plant(
    st: &mut PlantCell,
    rate: f64,
    a: f64,
    b: f64,
    v_max: f64,
    time_tol: f64,
) -> Result<()> {
    let push = |st: &mut PlantCell, start: f64, end: f64, v_start: f64, v_end: f64, s: f64| {
        let len = end - start;
        st.int_v += 0.5 * (v_start + v_end) * len;
        st.int_s += s * len;
        st.int_slack += s * (v_max - 0.5 * (v_start + v_end)) * len;
        if st.profile.last().map_or(true, |(_, prev)| *prev != s) {
            st.profile.push((start, s));
        }
    };

    if st.pinned {
        if rate >= 0.0 {
            push(st, a, b, v_max, v_max, rate);
            st.volume = v_max;
        } else {
            st.pinned = false;
            let end = v_max + rate * (b - a);
            push(st, a, b, v_max, end, 0.0);
            st.volume = end;
        }
        return Ok(());
    }

    let start = st.volume;
    let end = start + rate * (b - a);
    if rate > 0.0 && end >= v_max {
        let hit = locate_event(|t| start + rate * (t - a) - v_max, a, b, time_tol)?;
        push(st, a, hit, start, v_max, 0.0);
        st.volume = v_max;
        st.pinned = true;
        if b > hit {
            push(st, hit, b, v_max, v_max, rate);
        }
    } else {
        push(st, a, b, start, end, 0.0);
        st.volume = end;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub gammas: Vec<f64>,
    /// `max_t |V^gamma - V^exact|` over nodes and plants.
    pub sup_errors: Vec<f64>,
    /// `L2` distance of cell-average spills.
    pub spill_l2_errors: Vec<f64>,
    /// `max_{i,t} (V_i^gamma - V_i^max)`.
    pub overshoot: Vec<f64>,
}

/// Runs the penalty simulator for each `gamma` and compares against the
/// exact complementarity trajectory.
pub fn gamma_sweep(
    cascade: &Cascade,
    u: &ControlTrajectory,
    v0: &[f64],
    gammas: &[f64],
    cfg: &PenaltyConfig,
) -> Result<SweepReport> {
    if gammas.is_empty() || gammas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Infeasible("gammas must be nonempty and strictly increasing".into()));
    }
    let exact = simulate_exact(cascade, u, v0)?;
    let runs: Vec<Result<Trajectory>> = gammas
        .par_iter()
        .map(|g| simulate_penalty(cascade, u, v0, &cfg.with_gamma(*g)))
        .collect();
    let dt = u.grid().dt();
    let n = cascade.n_plants();
    let mut report = SweepReport {
        gammas: gammas.to_vec(),
        sup_errors: Vec::new(),
        spill_l2_errors: Vec::new(),
        overshoot: Vec::new(),
    };
    for run in runs {
        let run = run?;
        let sup = run
            .volumes
            .iter()
            .zip(&exact.volumes)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let l2 = run
            .spills
            .iter()
            .zip(&exact.spills)
            .map(|(a, b)| (a - b).powi(2) * dt)
            .sum::<f64>()
            .sqrt();
        let over = run
            .volumes
            .iter()
            .enumerate()
            .map(|(idx, x)| x - cascade.plants[idx % n].v_max)
            .fold(f64::NEG_INFINITY, f64::max);
        report.sup_errors.push(sup);
        report.spill_l2_errors.push(l2);
        report.overshoot.push(over);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{build_topology, water_balance_residual, PlantParams, TimeGrid};

    fn single(inflow: f64, v_min: f64, v_max: f64, u_min: f64, u_max: f64) -> Cascade {
        Cascade::new(
            build_topology(1, &[]).unwrap(),
            vec![PlantParams {
                inflow,
                v_min,
                v_max,
                u_min,
                u_max,
                elevation: 0.0,
                area: 1.0,
            }],
        )
        .unwrap()
    }

    fn example() -> Cascade {
        crate::example::TwoPlantExample::cascade()
    }

    #[test]
    fn omega_solves_its_equation() {
        for z in [-700.0, -50.0, -10.0, -2.5, -1.0, 0.0, 0.5, 1.0, 3.0, 30.0, 1e6, 1e15] {
            let w: f64 = wright_omega(z);
            assert!(w > 0.0);
            if z > -700.0 {
                let r = w + w.ln() - z;
                assert!(r.abs() <= 1e-13 * (1.0 + z.abs()), "z = {z}: residual {r}");
            }
        }
    }

    #[test]
    fn spill_at_the_boundary_equals_gamma() {
        let cfg = PenaltyConfig::new(10.0);
        assert!((penalty_spill(0, 5.0, 5.0, &cfg) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn spill_second_plant() {
        let cfg = PenaltyConfig::new(10.0);
        let s = penalty_spill(1, 11.9, 12.0, &cfg);
        let expected = 100.0 * (-10.0f64).exp();
        assert!((s - expected).abs() <= 1e-12 * expected);
        assert!((s - 4.5400e-3).abs() < 1e-7);
    }

    #[test]
    fn spill_underflows_to_zero() {
        let cfg = PenaltyConfig::new(2.0);
        assert_eq!(penalty_spill(0, -1e6, 0.0, &cfg), 0.0);
    }

    #[test]
    fn clamp_caps_the_exponent() {
        let mut cfg = PenaltyConfig::new(10.0);
        cfg.max_exponent_clamp = 5.0;
        assert!((penalty_spill(0, 100.0, 0.0, &cfg) - 5f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(PenaltyConfig::new(1.0).validate(1).is_err());
        let mut cfg = PenaltyConfig::new(10.0);
        cfg.stiffness_override = Some(vec![5.0, 3.0]);
        assert!(cfg.validate(2).is_err());
        cfg.stiffness_override = Some(vec![5.0, 30.0]);
        assert!(cfg.validate(2).is_ok());
        assert_eq!(cfg.stiffness(1), 30.0);
    }

    #[test]
    fn event_location_linear_and_nonlinear() {
        let t = locate_event(|t| 2.0 * t - 1.0, 0.0, 1.0, 1e-12).unwrap();
        assert!((t - 0.5).abs() < 1e-14);
        let t = locate_event(|t: f64| t.exp() - 2.0, 0.0, 1.0, 1e-13).unwrap();
        assert!((t - 2f64.ln()).abs() < 1e-12);
        assert!(locate_event(|t| t + 1.0, 0.0, 1.0, 1e-12).is_err());
    }

    #[test]
    fn implicit_step_matches_its_equation() {
        let law = PenaltyLaw::new(vec![50.0], vec![5.0]);
        for b in [4.0, 4.99, 5.0, 5.2, 7.0] {
            let (x, hs, _) = law.solve_plant(0, b, 0.01);
            let direct = 0.01 * 50.0 * (50.0 * (x - 5.0)).exp();
            assert!((x + direct - b).abs() < 1e-12);
            assert!((hs - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn pinned_upstream_spills_its_surplus() {
        let c = example();
        let grid = TimeGrid::new(16.0, 32).unwrap();
        let u = ControlTrajectory::constant(grid, &[1.0, 2.0]);
        let traj = simulate_exact(&c, &u, &[5.0, 8.0]).unwrap();
        for k in 0..32 {
            assert_eq!(traj.volume(k + 1, 0), 5.0);
            assert!((traj.spill(k)[0] - 1.0).abs() < 1e-14);
            assert_eq!(traj.spill(k)[1], 0.0);
        }
        // downstream receives u1 + s1 = 2 and releases 2
        assert!((traj.volume(32, 1) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn interior_run_is_linear() {
        let c = single(1.0, 0.0, 10.0, 0.0, 3.0);
        let grid = TimeGrid::new(2.0, 8).unwrap();
        let u = ControlTrajectory::constant(grid, &[3.0]);
        let traj = simulate_exact(&c, &u, &[8.0]).unwrap();
        for k in 0..=8 {
            assert!((traj.volume(k, 0) - (8.0 - 2.0 * grid.node(k))).abs() < 1e-12);
        }
        assert!(traj.spills.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn arrival_mid_cell_splits_the_spill() {
        let c = single(1.0, 0.0, 10.0, 0.0, 3.0);
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let u = ControlTrajectory::constant(grid, &[0.0]);
        let traj = simulate_exact(&c, &u, &[9.75]).unwrap();
        assert_eq!(traj.volume(1, 0), 10.0);
        // reaches the top at t = 0.25, spills at rate 1 afterwards
        assert!((traj.spills[0] - 0.75).abs() < 1e-12);
        assert!(traj.spill_slack[0].abs() < 1e-15);
        assert!((traj.mean_volumes[0] - (0.25 * 9.875 + 0.75 * 10.0)).abs() < 1e-12);
    }

    #[test]
    fn leaving_the_boundary() {
        let c = single(1.0, 0.0, 10.0, 0.0, 3.0);
        let grid = TimeGrid::new(2.0, 2).unwrap();
        let u = ControlTrajectory::from_fn(grid, 1, |k, _| if k == 0 { 0.0 } else { 3.0 });
        let traj = simulate_exact(&c, &u, &[10.0]).unwrap();
        assert_eq!(traj.spills, vec![1.0, 0.0]);
        assert!((traj.volume(2, 0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_initial_state_above_the_top() {
        let c = single(1.0, 0.0, 10.0, 0.0, 3.0);
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let u = ControlTrajectory::constant(grid, &[0.0]);
        assert!(matches!(simulate_exact(&c, &u, &[10.5]), Err(Error::Infeasible(_))));
        assert!(simulate_penalty(&c, &u, &[10.5], &PenaltyConfig::new(10.0)).is_err());
    }

    #[test]
    fn penalty_far_from_the_top_is_plain_drain() {
        let c = single(1.0, 0.0, 10.0, 0.0, 3.0);
        let grid = TimeGrid::new(2.0, 4).unwrap();
        let u = ControlTrajectory::constant(grid, &[3.0]);
        let traj = simulate_penalty(&c, &u, &[0.0], &PenaltyConfig::new(50.0)).unwrap();
        for k in 0..=4 {
            assert!((traj.volume(k, 0) + 2.0 * grid.node(k)).abs() < 1e-9);
        }
        assert!(traj.spills.iter().all(|s| *s < 1e-100));
    }

    #[test]
    fn penalty_dip_below_a_full_reservoir() {
        // V' = -g e^{g (V - Vmax)} from V = Vmax gives
        // V(t) = Vmax - ln(1 + g^2 t) / g
        let c = single(1.0, 0.0, 10.0, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let u = ControlTrajectory::constant(grid, &[1.0]);
        let g: f64 = 100.0;
        let traj = simulate_penalty(&c, &u, &[10.0], &PenaltyConfig::new(g)).unwrap();
        for k in 0..=10 {
            let t = grid.node(k);
            let oracle = 10.0 - (1.0 + g * g * t).ln() / g;
            assert!((traj.volume(k, 0) - oracle).abs() < 1e-5, "t = {t}: {} vs {oracle}", traj.volume(k, 0));
            if k > 0 {
                assert!(traj.volume(k, 0) < traj.volume(k - 1, 0));
            }
        }
    }

    #[test]
    fn penalty_two_plant_saturated_upstream() {
        let c = example();
        let grid = TimeGrid::new(16.0, 64).unwrap();
        let u = ControlTrajectory::constant(grid, &[1.0, 2.0]);
        let g: f64 = 100.0;
        let traj = simulate_penalty(&c, &u, &[5.0, 12.0], &PenaltyConfig::new(g)).unwrap();
        let band = 2.0 * g.ln() / g;
        for k in 0..=64 {
            let v1 = traj.volume(k, 0);
            assert!(v1 <= 5.0 && v1 >= 5.0 - band);
        }
        for k in 4..64 {
            assert!((traj.spill(k)[0] - 1.0).abs() < 1e-3);
        }
        assert!(water_balance_residual(&traj, &u, &c).unwrap() < 1e-9);
    }

    #[test]
    fn sweep_with_single_gamma() {
        let c = example();
        let grid = TimeGrid::new(16.0, 16).unwrap();
        let u = ControlTrajectory::constant(grid, &[1.0, 2.0]);
        let r = gamma_sweep(&c, &u, &[5.0, 8.0], &[40.0], &PenaltyConfig::new(40.0)).unwrap();
        assert_eq!(r.sup_errors.len(), 1);
        assert!(gamma_sweep(&c, &u, &[5.0, 8.0], &[40.0, 20.0], &PenaltyConfig::new(40.0)).is_err());
    }

    #[test]
    fn sweep_with_inactive_penalty() {
        let c = single(0.0, 0.0, 10.0, 0.0, 1.0);
        let grid = TimeGrid::new(4.0, 8).unwrap();
        let u = ControlTrajectory::constant(grid, &[1.0]);
        let r = gamma_sweep(&c, &u, &[6.0], &[25.0, 50.0, 100.0], &PenaltyConfig::new(25.0)).unwrap();
        assert!(r.sup_errors.iter().all(|e| *e < 1e-9));
    }
}
