//! Closed-form solution of the two-plant benchmark: an upstream plant that
//! spills permanently and a reversible downstream plant whose optimal flow is
//! pump / hold-full / turbine, parametrised by the common initial and final
//! downstream volume `v0`.
//!
//! Data: horizon 16, price 3 on `[0, 6)` and 11 on `[6, 16)`; plant 1 has
//! inflow 2, `V in [1, 5]`, `u in [0, 1]`, base elevation 13; plant 2 has no
//! natural inflow, `V in [3, 12]`, `u in [-1, 3]`, elevation 0; both areas 1.

use crate::cascade::{
    build_topology, Cascade, ControlTrajectory, PlantParams, PriceSignal, TimeGrid, Trajectory,
};
use crate::error::{Error, Result};

pub const HORIZON: f64 = 16.0;
/// Time at which the price rises.
pub const PRICE_SWITCH: f64 = 6.0;
const LOW_PRICE: f64 = 3.0;
const HIGH_PRICE: f64 = 11.0;
const V2_MAX: f64 = 12.0;
const V2_MIN: f64 = 3.0;

/// The two-plant benchmark cascade and price.
pub struct TwoPlantExample;

impl TwoPlantExample {
    pub fn plants() -> Vec<PlantParams> {
        vec![
            PlantParams {
                inflow: 2.0,
                v_min: 1.0,
                v_max: 5.0,
                u_min: 0.0,
                u_max: 1.0,
                elevation: 13.0,
                area: 1.0,
            },
            PlantParams {
                inflow: 0.0,
                v_min: V2_MIN,
                v_max: V2_MAX,
                u_min: -1.0,
                u_max: 3.0,
                elevation: 0.0,
                area: 1.0,
            },
        ]
    }

    pub fn cascade() -> Cascade {
        let topology = build_topology(2, &[(1, 2)]).expect("static topology");
        Cascade::new(topology, Self::plants()).expect("static parameters")
    }

    pub fn price() -> PriceSignal {
        PriceSignal::new(&[(0.0, LOW_PRICE), (PRICE_SWITCH, HIGH_PRICE)], HORIZON)
            .expect("static price")
    }

    pub fn grid(cells: usize) -> Result<TimeGrid> {
        TimeGrid::for_price(cells, &Self::price())
    }

    /// True when `cascade` and `price` carry exactly the benchmark data.
    pub fn matches(cascade: &Cascade, price: &PriceSignal) -> bool {
        *cascade == Self::cascade() && *price == Self::price()
    }
}

fn check_regime(v0: f64) -> Result<()> {
    if !(V2_MIN..=V2_MAX).contains(&v0) {
        return Err(Error::Regime(format!(
            "initial downstream volume {v0} outside [{V2_MIN}, {V2_MAX}]"
        )));
    }
    Ok(())
}

/// Switching times `(tau1, tau2)`: the reservoir fills at rate 3 until
/// `tau1`, stays full until `tau2`, then drains at rate 1 back to `v0`.
pub fn switching_times(v0: f64) -> Result<(f64, f64)> {
    check_regime(v0)?;
    Ok(((V2_MAX - v0) / 3.0, v0 + 4.0))
}

// the draining piece is 12 - (t - tau2), written to hit v0 exactly at the horizon
fn downstream_volume(t: f64, v0: f64, tau1: f64, tau2: f64) -> f64 {
    if t <= tau1 {
        v0 + 3.0 * t
    } else if t <= tau2 {
        V2_MAX
    } else {
        v0 + (HORIZON - t)
    }
}

/// Exact integral of a function that is linear between the given knots.
fn integrate_piecewise_linear(f: impl Fn(f64) -> f64, a: f64, b: f64, knots: &[f64]) -> f64 {
    let mut pts = vec![a];
    pts.extend(knots.iter().copied().filter(|t| *t > a && *t < b));
    pts.push(b);
    pts.windows(2)
        .map(|w| 0.5 * (f(w[0]) + f(w[1])) * (w[1] - w[0]))
        .sum()
}

fn overlap(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    (b.min(hi) - a.max(lo)).max(0.0)
}

pub struct AnalyticSolution {
    pub control: ControlTrajectory,
    pub trajectory: Trajectory,
    pub tau1: f64,
    pub tau2: f64,
}

/// Optimal-form control and trajectory for a given `v0`, sampled on `grid`
/// with exact cell averages.
pub fn analytic_solution(v0: f64, grid: &TimeGrid) -> Result<AnalyticSolution> {
    let (tau1, tau2) = switching_times(v0)?;
    if (grid.horizon() - HORIZON).abs() > 1e-12 {
        return Err(Error::Grid("benchmark horizon is 16".into()));
    }
    let cascade = TwoPlantExample::cascade();
    let cells = grid.cells();
    let dt = grid.dt();
    let mut u = Vec::with_capacity(2 * cells);
    let mut spills = Vec::with_capacity(2 * cells);
    let mut means = Vec::with_capacity(2 * cells);
    for k in 0..cells {
        let (a, b) = (grid.node(k), grid.node(k + 1));
        let u2 = (-overlap(a, b, 0.0, tau1)
            + 2.0 * overlap(a, b, tau1, tau2)
            + 3.0 * overlap(a, b, tau2, HORIZON))
            / dt;
        u.extend([1.0, u2.clamp(-1.0, 3.0)]);
        spills.extend([1.0, 0.0]);
        let v2 = integrate_piecewise_linear(
            |t| downstream_volume(t, v0, tau1, tau2),
            a,
            b,
            &[tau1, tau2],
        );
        means.extend([5.0, v2 / dt]);
    }
    let volumes = (0..=cells)
        .flat_map(|k| [5.0, downstream_volume(grid.node(k), v0, tau1, tau2)])
        .collect();
    let control = ControlTrajectory::new(*grid, 2, u)?;
    let spill_slack = spills
        .iter()
        .zip(&means)
        .enumerate()
        .map(|(idx, (s, v))| s * (cascade.plants[idx % 2].v_max - v))
        .collect();
    let trajectory = Trajectory {
        grid: *grid,
        n_plants: 2,
        volumes,
        mean_volumes: means,
        spills,
        spill_slack,
    };
    Ok(AnalyticSolution {
        control,
        trajectory,
        tau1,
        tau2,
    })
}

/// Profit of the optimal-form process as a function of `v0`, integrated
/// piece by piece over `[0, tau1]`, `[tau1, 6]`, `[6, tau2]`, `[tau2, 16]`.
pub fn objective_closed_form(v0: f64) -> Result<f64> {
    let (tau1, tau2) = switching_times(v0)?;
    // integrand c (u1 (V1 + 13 - V2) + u2 V2) with u1 = 1, V1 = 5
    let filling = LOW_PRICE * ((18.0 - 2.0 * v0) * tau1 - 3.0 * tau1 * tau1);
    let full_cheap = LOW_PRICE * (6.0 + 2.0 * V2_MAX) * (PRICE_SWITCH - tau1);
    let full_dear = HIGH_PRICE * (6.0 + 2.0 * V2_MAX) * (tau2 - PRICE_SWITCH);
    let len = HORIZON - tau2;
    // V2 = 12 - x on x in [0, len]: 18 - V2 + 3 V2 = 42 - 2x
    let draining = HIGH_PRICE * (42.0 * len - len * len);
    Ok(filling + full_cheap + full_dear + draining)
}

/// Maximiser of [`objective_closed_form`], from the vertex of the quadratic.
pub fn optimal_v0() -> f64 {
    let (a, b, c) = (4.0, 7.0, 10.0);
    let fa = objective_closed_form(a).expect("in regime");
    let fb = objective_closed_form(b).expect("in regime");
    let fc = objective_closed_form(c).expect("in regime");
    // f(v) = q2 v^2 + q1 v + q0 through three points
    let q2 = ((fc - fb) / (c - b) - (fb - fa) / (b - a)) / (c - a);
    let q1 = (fb - fa) / (b - a) - q2 * (a + b);
    -q1 / (2.0 * q2)
}

/// Transformed multiplier `Q2 = -p2 + c V2` of the downstream plant.
/// At `t = 16` it returns the periodic value `Q2(0)`.
pub fn q2_profile(t: f64, v0: f64) -> Result<f64> {
    let (tau1, tau2) = switching_times(v0)?;
    if !(0.0..=HORIZON).contains(&t) {
        return Err(Error::Regime(format!("time {t} outside [0, 16]")));
    }
    Ok(if t >= HORIZON {
        -(V2_MAX - v0)
    } else if t <= tau1 {
        -(V2_MAX - v0) + 3.0 * t
    } else if t <= tau2 {
        0.0
    } else {
        HIGH_PRICE * (t - tau2)
    })
}

/// `Q2(16^-)`, the left limit at the horizon.
pub fn q2_left_limit_at_horizon(v0: f64) -> Result<f64> {
    let (_, tau2) = switching_times(v0)?;
    Ok(HIGH_PRICE * (HORIZON - tau2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::objective;

    /// Hand-derived expansion of the four-piece integral.
    fn profit_polynomial(v: f64) -> f64 {
        3552.0 + 144.0 * v - 10.0 * v * v
    }

    #[test]
    fn switching_times_at_the_optimum() {
        let (t1, t2) = switching_times(7.2).unwrap();
        assert!((t1 - 1.6).abs() < 1e-12);
        assert!((t2 - 11.2).abs() < 1e-12);
    }

    #[test]
    fn regime_limits() {
        assert_eq!(switching_times(12.0).unwrap().0, 0.0);
        let (t1, t2) = switching_times(3.0).unwrap();
        assert_eq!((t1, t2), (3.0, 7.0));
        assert!(matches!(switching_times(2.9), Err(Error::Regime(_))));
        assert!(switching_times(12.1).is_err());
    }

    #[test]
    fn closed_form_matches_hand_expansion() {
        for v in [3.0, 4.0, 5.5, 7.2, 9.0, 12.0] {
            let f = objective_closed_form(v).unwrap();
            assert!((f - profit_polynomial(v)).abs() < 1e-9, "v = {v}");
        }
        assert!((objective_closed_form(7.2).unwrap() - 4070.4).abs() < 1e-9);
    }

    #[test]
    fn closed_form_agrees_with_quadrature() {
        let grid = TwoPlantExample::grid(3200).unwrap();
        let c = TwoPlantExample::cascade();
        let price = TwoPlantExample::price();
        for v in [4.0, 6.0, 7.2, 9.0] {
            let sol = analytic_solution(v, &grid).unwrap();
            let q = objective(&sol.control, &sol.trajectory, &price, &c).unwrap();
            assert!((q - objective_closed_form(v).unwrap()).abs() <= 1e-3, "v = {v}");
        }
    }

    #[test]
    fn closed_form_is_quadratic() {
        let vs: Vec<f64> = (0..9).map(|k| 3.5 + k as f64).collect();
        let f: Vec<f64> = vs.iter().map(|v| objective_closed_form(*v).unwrap()).collect();
        let second: Vec<f64> = f.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
        for d in &second {
            assert!((d - second[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn optimum_is_thirty_six_fifths() {
        assert!((optimal_v0() - 7.2).abs() < 1e-9);
        let f = objective_closed_form(7.2).unwrap();
        assert!(f > objective_closed_form(6.7).unwrap());
        assert!(f > objective_closed_form(7.7).unwrap());
    }

    #[test]
    fn least_squares_vertex() {
        // quadratic fit over v0 in {4, ..., 10} through normal equations
        let pts: Vec<(f64, f64)> = (4..=10)
            .map(|v| (v as f64, objective_closed_form(v as f64).unwrap()))
            .collect();
        let m = |p: i32| pts.iter().map(|(x, _)| x.powi(p)).sum::<f64>();
        let r = |p: i32| pts.iter().map(|(x, y)| x.powi(p) * y).sum::<f64>();
        let a = [
            [m(4), m(3), m(2)],
            [m(3), m(2), m(1)],
            [m(2), m(1), m(0)],
        ];
        let rhs = [r(2), r(1), r(0)];
        let det3 = |a: [[f64; 3]; 3]| {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        };
        let d = det3(a);
        let mut a0 = a;
        let mut a1 = a;
        for i in 0..3 {
            a0[i][0] = rhs[i];
            a1[i][1] = rhs[i];
        }
        let (q2, q1) = (det3(a0) / d, det3(a1) / d);
        assert!((-q1 / (2.0 * q2) - 7.2).abs() < 1e-9);
    }

    #[test]
    fn q2_profile_values() {
        assert!((q2_profile(0.0, 7.2).unwrap() + 4.8).abs() < 1e-12);
        assert!(q2_profile(1.6, 7.2).unwrap().abs() < 1e-12);
        assert!((q2_left_limit_at_horizon(7.2).unwrap() - 52.8).abs() < 1e-12);
        assert!((q2_profile(15.999_999, 7.2).unwrap() - 52.8).abs() < 1e-4);
        assert!((q2_profile(16.0, 7.2).unwrap() + 4.8).abs() < 1e-12);
    }

    #[test]
    fn analytic_solution_is_admissible() {
        let grid = TwoPlantExample::grid(160).unwrap();
        let c = TwoPlantExample::cascade();
        for v in [3.0, 7.2, 10.0, 12.0] {
            let sol = analytic_solution(v, &grid).unwrap();
            sol.control.check_box(&c).unwrap();
            let t = &sol.trajectory;
            assert_eq!(t.initial(), t.terminal());
            for k in 0..=160 {
                for (i, p) in c.plants.iter().enumerate() {
                    let x = t.volume(k, i);
                    assert!(x >= p.v_min - 1e-12 && x <= p.v_max + 1e-12);
                }
            }
            assert!(t.spill_slack.iter().all(|x| x.abs() < 1e-12));
            let wb = crate::cascade::water_balance_residual(t, &sol.control, &c).unwrap();
            assert!(wb < 1e-10, "v = {v}: {wb}");
        }
    }

    #[test]
    fn exact_simulation_reproduces_the_oracle() {
        let grid = TwoPlantExample::grid(320).unwrap();
        let c = TwoPlantExample::cascade();
        let sol = analytic_solution(7.2, &grid).unwrap();
        let sim = crate::spillway::simulate_exact(&c, &sol.control, &[5.0, 7.2]).unwrap();
        for (a, b) in sim.volumes.iter().zip(&sol.trajectory.volumes) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in sim.spills.iter().zip(&sol.trajectory.spills) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
