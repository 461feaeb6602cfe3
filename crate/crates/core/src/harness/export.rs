//! CSV and JSON writers. Floats use the shortest round-trip representation,
//! so files are byte-stable and re-parse to identical values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{reported_heading, AgentPath, HarnessError, Metrics, RunResult, SweepRow};

fn header(obstacles: usize, levels: usize) -> String {
    let mut h = String::from("t,agent,x,y,v,phi,u1,u2,u1_nominal,u2_nominal");
    for k in 0..obstacles {
        for l in 0..levels {
            let _ = write!(h, ",h{l}_obs{k}");
        }
    }
    h.push('\n');
    h
}

fn levels(result: &RunResult) -> usize {
    result.barrier_values.iter().flat_map(|a| a.first()).flat_map(|row| row.first()).map(|levels| levels.len()).next().unwrap_or(0)
}

/// One row per recorded agent state, time-major; the final state of each
/// agent has empty control columns.
pub fn trajectory_csv(result: &RunResult) -> String {
    let mut out = header(result.obstacles.len(), levels(result));
    let longest = result.trajectories.iter().map(|t| t.states.len()).max().unwrap_or(0);
    for k in 0..longest {
        for (i, traj) in result.trajectories.iter().enumerate() {
            let Some(s) = traj.states.get(k) else { continue };
            let _ = write!(out, "{},{},{},{},{},{}", traj.times[k], i, s[0], s[1], s[2], reported_heading(s[3]));
            match (traj.controls.get(k), result.nominal_controls[i].get(k)) {
                (Some(u), Some(n)) => {
                    let _ = write!(out, ",{},{},{},{}", u[0], u[1], n[0], n[1]);
                }
                _ => out.push_str(",,,,"),
            }
            for obstacle in &result.barrier_values[i][k] {
                for h in obstacle {
                    let _ = write!(out, ",{h}");
                }
            }
            out.push('\n');
        }
    }
    out
}

/// A parsed trajectory CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub t: f64,
    pub agent: usize,
    pub state: [f64; 4],
    pub applied: Option<[f64; 2]>,
    pub nominal: Option<[f64; 2]>,
    pub barriers: Vec<f64>,
}

pub fn parse_trajectory_csv(text: &str) -> Result<Vec<CsvRow>, HarnessError> {
    let bad = |line: usize, what: &str| HarnessError::Argument(format!("trajectory CSV line {line}: {what}"));
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 10 {
            return Err(bad(n + 1, "too few columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n + 1, "bad number"));
        let opt = |a: &str, b: &str| -> Result<Option<[f64; 2]>, HarnessError> {
            if a.is_empty() && b.is_empty() {
                Ok(None)
            } else {
                Ok(Some([num(a)?, num(b)?]))
            }
        };
        rows.push(CsvRow {
            t: num(cells[0])?,
            agent: cells[1].parse().map_err(|_| bad(n + 1, "bad agent"))?,
            state: [num(cells[2])?, num(cells[3])?, num(cells[4])?, num(cells[5])?],
            applied: opt(cells[6], cells[7])?,
            nominal: opt(cells[8], cells[9])?,
            barriers: cells[10..].iter().map(|c| num(c)).collect::<Result<_, _>>()?,
        });
    }
    Ok(rows)
}

/// Per-agent paths rebuilt from parsed CSV rows.
pub fn paths_from_rows(rows: &[CsvRow]) -> Vec<AgentPath> {
    let agents = rows.iter().map(|r| r.agent + 1).max().unwrap_or(0);
    let mut paths = vec![AgentPath::default(); agents];
    for r in rows {
        let p = &mut paths[r.agent];
        p.positions.push([r.state[0], r.state[1]]);
        if let (Some(a), Some(n)) = (r.applied, r.nominal) {
            p.applied.push(a);
            p.nominal.push(n);
        }
    }
    paths
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    scenario: &'a str,
    mode: &'a str,
    task: &'a str,
    seed: u64,
    attempt: usize,
    dt: f64,
    targets: &'a [[f64; 2]],
    exit_reasons: Vec<&'static str>,
    halted: Option<&'a str>,
    degenerate_steps: usize,
    metrics: &'a Metrics,
}

pub fn metrics_json(result: &RunResult) -> String {
    let doc = MetricsDoc {
        scenario: &result.scenario,
        mode: result.mode.as_str(),
        task: &result.task,
        seed: result.seed,
        attempt: result.attempt,
        dt: result.dt,
        targets: &result.targets,
        exit_reasons: result.trajectories.iter().map(|t| t.exit_reason.as_str()).collect(),
        halted: result.halted.as_deref(),
        degenerate_steps: result.degenerate_steps,
        metrics: &result.metrics,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("margin,mode,obstacle,threshold,min,mean,max,below_threshold,runs,halted\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.margin,
            r.mode.as_str(),
            r.obstacle,
            r.threshold,
            r.min,
            r.mean,
            r.max,
            r.below_threshold,
            r.runs,
            r.halted
        );
    }
    out
}

fn write(path: PathBuf, content: &str) -> Result<PathBuf, HarnessError> {
    std::fs::write(&path, content).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    Ok(path)
}

/// Writes `<stem>_trajectory.csv` and `<stem>_metrics.json` into `out_dir`.
pub fn export(result: &RunResult, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io { path: out_dir.display().to_string(), source })?;
    let stem = format!("{}_{}_{}_seed{}", result.scenario, result.task, result.mode.as_str(), result.seed);
    Ok(vec![
        write(out_dir.join(format!("{stem}_trajectory.csv")), &trajectory_csv(result))?,
        write(out_dir.join(format!("{stem}_metrics.json")), &metrics_json(result))?,
    ])
}

/// Writes the sweep table to `<out_dir>/<name>_margin_sweep.csv`.
pub fn export_sweep(rows: &[SweepRow], name: &str, out_dir: &Path) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io { path: out_dir.display().to_string(), source })?;
    write(out_dir.join(format!("{name}_margin_sweep.csv")), &sweep_csv(rows))
}
