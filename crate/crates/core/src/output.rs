//! Deterministic result files: `trajectory.csv` and `report.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cascade::{ControlTrajectory, Trajectory};
use crate::config::Format;
use crate::error::{Error, Result};

/// CSV with header `t,V1..,u1..,s1..` and one row per grid node. Flows and
/// spills are cell values; the last node repeats the last cell.
pub fn trajectory_csv(traj: &Trajectory, u: &ControlTrajectory) -> Result<String> {
    if traj.grid != *u.grid() || traj.n_plants != u.n_plants() {
        return Err(Error::Shape("trajectory and control differ in shape".into()));
    }
    let n = traj.n_plants;
    let cells = traj.grid.cells();
    let mut out = String::from("t");
    for prefix in ["V", "u", "s"] {
        for i in 1..=n {
            write!(out, ",{prefix}{i}").unwrap();
        }
    }
    out.push('\n');
    for k in 0..=cells {
        let cell = k.min(cells - 1);
        write!(out, "{:.16e}", traj.grid.node(k)).unwrap();
        let row = traj
            .node(k)
            .iter()
            .chain(u.cell(cell))
            .chain(traj.spill(cell));
        for v in row {
            write!(out, ",{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn report_json(report: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Writes the requested files into `dir` and returns their paths.
pub fn emit_results(
    dir: &Path,
    report: &impl Serialize,
    trajectory: Option<(&Trajectory, &ControlTrajectory)>,
    formats: &[Format],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&Format::Json) {
        let path = dir.join("report.json");
        std::fs::write(&path, report_json(report)?)?;
        written.push(path);
    }
    if let (true, Some((traj, u))) = (formats.contains(&Format::Csv), trajectory) {
        let path = dir.join("trajectory.csv");
        std::fs::write(&path, trajectory_csv(traj, u)?)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::{analytic_solution, TwoPlantExample};

    #[test]
    fn csv_shape() {
        let grid = TwoPlantExample::grid(320).unwrap();
        let sol = analytic_solution(7.2, &grid).unwrap();
        let csv = trajectory_csv(&sol.trajectory, &sol.control).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,V1,V2,u1,u2,s1,s2");
        assert_eq!(lines.len(), 1 + 321);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
        let last: Vec<f64> = lines[321].split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(last[0], 16.0);
        assert_eq!(last[2], 7.2);
    }

    #[test]
    fn seventeen_significant_digits() {
        let grid = TwoPlantExample::grid(160).unwrap();
        let sol = analytic_solution(7.2, &grid).unwrap();
        let csv = trajectory_csv(&sol.trajectory, &sol.control).unwrap();
        let field = csv.lines().nth(2).unwrap().split(',').next().unwrap();
        assert_eq!(field, "1.0000000000000001e-1");
    }
}
