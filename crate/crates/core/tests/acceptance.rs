//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Built with `harness = false` so the lines always reach stdout.

use std::process::Command;
use std::time::Instant;

use hydrocascade::cascade::{
    build_topology, incidence_matrix, water_balance_residual, Cascade, ControlTrajectory,
    PlantParams, PriceSignal, TimeGrid,
};
use hydrocascade::config::{parse_config_str, TWO_PLANT_JSON};
use hydrocascade::example::{analytic_solution, objective_closed_form, TwoPlantExample};
use hydrocascade::nco::{check_nco, synthesize_example_multipliers};
use hydrocascade::ocp::{self, Anchor, Problem, SolveReport, Transcription, Weights};
use hydrocascade::spillway::{gamma_sweep, simulate_exact, simulate_penalty, PenaltyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn failed(e: impl std::fmt::Display) -> Outcome {
    outcome(false, format!("error: {e}"))
}

fn max_abs(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sci(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn solve_benchmark() -> hydrocascade::Result<(SolveReport, f64)> {
    let cfg = parse_config_str(TWO_PLANT_JSON)?;
    let problem = Problem::new(cfg.cascade()?, cfg.price_signal()?, cfg.time_grid()?)?;
    let start = Instant::now();
    let report = ocp::multistart(&problem, &cfg.solver)?;
    Ok((report, start.elapsed().as_secs_f64()))
}

fn criterion_1(solved: &hydrocascade::Result<(SolveReport, f64)>) -> Outcome {
    let (r, secs) = match solved {
        Ok(x) => x,
        Err(e) => return failed(e),
    };
    let cascade = TwoPlantExample::cascade();
    let v2 = r.decision.v0[1];
    let dt = r.decision.u.grid().dt();
    let switches: Vec<f64> = ocp::switching_times(&r.decision.u, 1, &cascade)
        .iter()
        .map(|s| s.time)
        .collect();
    let switches_ok = switches.len() == 2
        && (switches[0] - 1.6).abs() <= 2.0 * dt + 1e-9
        && (switches[1] - 11.2).abs() <= 2.0 * dt + 1e-9;
    let target = match objective_closed_form(7.2) {
        Ok(x) => x,
        Err(e) => return failed(e),
    };
    let rel = (r.exact_profit - target).abs() / target;
    outcome(
        (v2 - 7.2).abs() <= 0.05 && switches_ok && rel <= 5e-3 && *secs <= 60.0,
        format!(
            "V2(0) {v2:.6}, switches {switches:?}, profit {:.4} vs {target:.4} (rel {rel:.2e}), {secs:.1} s",
            r.exact_profit
        ),
    )
}

fn criterion_2(solved: &hydrocascade::Result<(SolveReport, f64)>) -> Outcome {
    let r = match solved {
        Ok((r, _)) => r,
        Err(e) => return failed(e),
    };
    let u1 = max_abs(r.decision.u.plant_series(0).into_iter().map(|x| x - 1.0));
    let s1 = max_abs(r.trajectory.spill_series(0).into_iter().map(|x| x - 1.0));
    let v1 = max_abs(r.trajectory.plant_series(0).into_iter().map(|x| x - 5.0));
    let s2 = max_abs(r.trajectory.spill_series(1));
    outcome(
        u1 <= 1e-3 && s1 <= 2e-2 && v1 <= 1e-6 && s2 <= 2e-2,
        format!("|u1-1| {u1:.2e}, |s1-1| {s1:.2e}, |V1-5| {v1:.2e}, |s2| {s2:.2e}"),
    )
}

fn criterion_3() -> hydrocascade::Result<Outcome> {
    let grid = TwoPlantExample::grid(320)?;
    let sol = analytic_solution(7.2, &grid)?;
    let cascade = TwoPlantExample::cascade();
    let gammas = [25.0, 50.0, 100.0, 200.0];
    let sweep = gamma_sweep(&cascade, &sol.control, &[5.0, 7.2], &gammas, &PenaltyConfig::new(25.0))?;
    let e = &sweep.sup_errors;
    let monotone = e.windows(2).all(|w| w[1] <= 1.1 * w[0]);
    let shrinks = e[e.len() - 1] < 0.25 * e[0];

    // Single plant pushed against its crest: inflow 1, pumping at 1.
    let plant = PlantParams {
        inflow: 1.0,
        v_min: 0.0,
        v_max: 2.0,
        u_min: -1.0,
        u_max: 1.0,
        elevation: 0.0,
        area: 1.0,
    };
    let single = Cascade::new(build_topology(1, &[])?, vec![plant])?;
    let threshold = plant.inflow + plant.u_min.abs().max(plant.u_max.abs());
    let sgrid = TimeGrid::new(4.0, 40)?;
    let pumping = ControlTrajectory::constant(sgrid, &[-1.0]);
    let mut overshoot = f64::NEG_INFINITY;
    for gamma in [threshold + 0.5, 10.0, 100.0] {
        let traj = simulate_penalty(&single, &pumping, &[1.5], &PenaltyConfig::new(gamma))?;
        overshoot = overshoot.max(traj.volumes.iter().map(|v| v - plant.v_max).fold(f64::MIN, f64::max));
    }
    Ok(outcome(
        monotone && shrinks && overshoot <= 0.0,
        format!("sup errors {}, single-plant overshoot {overshoot:.3e} (threshold {threshold})", sci(e)),
    ))
}

fn random_cascade(rng: &mut ChaCha8Rng, edges: &[(usize, usize)], n: usize) -> hydrocascade::Result<Cascade> {
    let plants = (0..n)
        .map(|_| {
            let v_min = rng.gen_range(0.5..2.0);
            let u_max = rng.gen_range(1.0..3.0);
            PlantParams {
                inflow: rng.gen_range(0.0..2.0),
                v_min,
                v_max: v_min + rng.gen_range(2.0..6.0),
                u_min: if rng.gen_bool(0.5) { -rng.gen_range(0.2..1.0) } else { 0.0 },
                u_max,
                elevation: rng.gen_range(0.0..10.0),
                area: rng.gen_range(0.5..2.0),
            }
        })
        .collect();
    Cascade::new(build_topology(n, edges)?, plants)
}

fn random_control(rng: &mut ChaCha8Rng, cascade: &Cascade, grid: TimeGrid, margin: f64) -> ControlTrajectory {
    let bounds: Vec<(f64, f64)> = cascade.plants.iter().map(|p| (p.u_min, p.u_max)).collect();
    let values = (0..grid.cells() * cascade.n_plants())
        .map(|idx| {
            let (lo, hi) = bounds[idx % bounds.len()];
            rng.gen_range(lo + margin..hi - margin)
        })
        .collect();
    ControlTrajectory::new(grid, cascade.n_plants(), values).expect("shape")
}

fn random_v0(rng: &mut ChaCha8Rng, cascade: &Cascade, margin: f64) -> Vec<f64> {
    cascade
        .plants
        .iter()
        .map(|p| rng.gen_range(p.v_min + margin..p.v_max - margin))
        .collect()
}

fn topologies() -> [(&'static str, usize, Vec<(usize, usize)>); 3] {
    [
        ("isolated", 1, vec![]),
        ("chain", 2, vec![(1, 2)]),
        ("five-plant", 5, vec![(1, 3), (2, 5), (3, 5), (4, 5)]),
    ]
}

fn criterion_4() -> hydrocascade::Result<Outcome> {
    let mut cases = Vec::new();
    let grid = TwoPlantExample::grid(320)?;
    for v0 in [3.0, 5.0, 7.2, 10.0, 12.0] {
        let sol = analytic_solution(v0, &grid)?;
        cases.push((TwoPlantExample::cascade(), sol.control, vec![5.0, v0]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (_, n, edges) in topologies() {
        for _ in 0..10 {
            let cascade = random_cascade(&mut rng, &edges, n)?;
            let u = random_control(&mut rng, &cascade, TimeGrid::new(8.0, 64)?, 0.0);
            let v0 = random_v0(&mut rng, &cascade, 0.0);
            cases.push((cascade, u, v0));
        }
    }
    let (mut slack, mut over, mut neg, mut balance) = (0.0_f64, f64::NEG_INFINITY, 0.0_f64, 0.0_f64);
    let mut pass = true;
    for (cascade, u, v0) in &cases {
        let traj = simulate_exact(cascade, u, v0)?;
        let n = cascade.n_plants();
        let vmax: Vec<f64> = cascade.plants.iter().map(|p| p.v_max).collect();
        for (idx, s) in traj.spill_slack.iter().enumerate() {
            let scaled = s.abs() / (1.0 + vmax[idx % n].abs());
            slack = slack.max(scaled);
            pass &= s.abs() <= 1e-9 * (1.0 + vmax[idx % n].abs());
        }
        for (idx, v) in traj.volumes.iter().enumerate() {
            over = over.max(v - vmax[idx % n]);
        }
        neg = neg.max(-traj.spills.iter().copied().fold(0.0, f64::min));
        let r = water_balance_residual(&traj, u, cascade)?;
        let scale = 1.0 + max_abs(traj.volumes.iter().copied());
        balance = balance.max(r / scale);
        pass &= r <= 1e-8 * scale;
    }
    pass &= over <= 1e-9 && neg == 0.0;
    Ok(outcome(
        pass,
        format!(
            "{} runs: slack {slack:.2e}, overshoot {over:.2e}, min spill {:.2e}, balance {balance:.2e}",
            cases.len(),
            -neg
        ),
    ))
}

fn criterion_5() -> hydrocascade::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let step = 1e-5;
    let mut worst = 0.0_f64;
    let mut count = 0;
    for (_, n, edges) in topologies() {
        for _ in 0..10 {
            let cascade = random_cascade(&mut rng, &edges, n)?;
            let horizon = 4.0;
            let price = PriceSignal::new(
                &[(0.0, rng.gen_range(1.0..20.0)), (1.3, rng.gen_range(1.0..20.0)), (2.9, rng.gen_range(1.0..20.0))],
                horizon,
            )?;
            let grid = TimeGrid::new(horizon, 10)?;
            let problem = Problem::new(cascade, price, grid)?;
            let margin = 0.05;
            let u = random_control(&mut rng, &problem.cascade, grid, margin);
            let v0 = random_v0(&mut rng, &problem.cascade, margin);
            let anchor = Anchor {
                u: random_control(&mut rng, &problem.cascade, grid, 0.0).values().to_vec(),
                v0: Some(random_v0(&mut rng, &problem.cascade, 0.0)),
            };
            let weights = Weights {
                gamma: 4.0,
                epsilon: 1e-2,
                alpha: 1e-1,
                rho: 10.0,
                multiplier: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            };
            let t = Transcription::new(&problem, &PenaltyConfig::new(2.0), 2, weights, Some(&anchor))?;
            let x: Vec<f64> = v0.iter().chain(u.values()).copied().collect();
            let (_, g) = t.value_and_gradient(&x)?;
            let mut fd = vec![0.0; x.len()];
            for idx in 0..x.len() {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[idx] += step;
                b[idx] -= step;
                fd[idx] = (t.value(&a)? - t.value(&b)?) / (2.0 * step);
            }
            let err = max_abs(g.iter().zip(&fd).map(|(a, b)| a - b)) / max_abs(fd.iter().copied());
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok(outcome(worst <= 1e-5, format!("{count} points, worst relative error {worst:.2e}")))
}

fn criterion_6() -> hydrocascade::Result<Outcome> {
    let grid = TwoPlantExample::grid(320)?;
    let sol = analytic_solution(7.2, &grid)?;
    let bundle = synthesize_example_multipliers(7.2, &grid)?;
    let r = check_nco(&bundle, &sol.trajectory, &sol.control, &TwoPlantExample::price(), &TwoPlantExample::cascade())?;
    let residuals = [
        r.adjoint_residual,
        r.xi_complementarity,
        r.mu_complementarity,
        r.spill_orthogonality,
        r.periodicity_gap,
    ];
    Ok(outcome(
        residuals.iter().all(|x| *x <= 1e-6) && r.nontriviality_gap == 0.0 && r.hamiltonian_violation_fraction == 0.0,
        format!(
            "residuals {}, nontriviality gap {:e}, lambda {:.6}, hamiltonian violations {}",
            sci(&residuals),
            r.nontriviality_gap,
            bundle.lambda,
            r.hamiltonian_violation_fraction
        ),
    ))
}

fn criterion_7() -> hydrocascade::Result<Outcome> {
    let m = incidence_matrix(&build_topology(5, &[(1, 3), (2, 5), (3, 5), (4, 5)])?);
    let expected = vec![
        vec![0.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 1.0, 1.0, 0.0],
    ];
    Ok(outcome(m == expected, format!("{m:?}")))
}

fn criterion_8() -> hydrocascade::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut cfg: serde_json::Value = serde_json::from_str(TWO_PLANT_JSON)?;
    cfg["grid"]["N"] = 80.into();
    cfg["solver"]["multistart"] = 2.into();
    cfg["solver"]["seed"] = 11.into();
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_string(&cfg)?)?;
    let mut outputs = Vec::new();
    for cmd in ["optimize", "simulate-exact"] {
        for run in 0..2 {
            let out = dir.path().join(format!("{cmd}-{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_hydrocascade"))
                .arg(cmd)
                .arg("--config")
                .arg(&path)
                .arg("--out")
                .arg(&out)
                .output()?
                .status;
            if !status.success() {
                return Ok(outcome(false, format!("{cmd} exited with {status}")));
            }
            outputs.push(out);
        }
    }
    let mut same = true;
    for pair in outputs.chunks(2) {
        for file in ["report.json", "trajectory.csv"] {
            same &= std::fs::read(pair[0].join(file))? == std::fs::read(pair[1].join(file))?;
        }
    }
    Ok(outcome(same, "optimize and simulate-exact, two runs each, report.json and trajectory.csv compared".into()))
}

fn main() {
    let solved = solve_benchmark();
    let results = [
        criterion_1(&solved),
        criterion_2(&solved),
        criterion_3().unwrap_or_else(failed),
        criterion_4().unwrap_or_else(failed),
        criterion_5().unwrap_or_else(failed),
        criterion_6().unwrap_or_else(failed),
        criterion_7().unwrap_or_else(failed),
        criterion_8().unwrap_or_else(failed),
    ];
    let mut all = true;
    for (k, r) in results.iter().enumerate() {
        println!("criterion {}: {}: {}", k + 1, if r.pass { "PASS" } else { "FAIL" }, r.detail);
        all &= r.pass;
    }
    if !all {
        std::process::exit(1);
    }
}
