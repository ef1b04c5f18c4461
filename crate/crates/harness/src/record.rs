//! Run records and the on-disk layout `runs/<run-id>/{config.txt,
//! trajectory.csv, record.json}`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kmevo::solver::TrajectoryRow;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Solver;
use crate::error::{HarnessError, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const RECORD_FILE: &str = "record.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub solver: Solver,
    /// Function descriptor of the evaluated instance.
    pub function: String,
    pub seed: u64,
    /// Canonical config text.
    pub config: String,
    /// SHA-256 of the encoded parameters, for learned runs.
    pub params_hash: Option<String>,
    pub trajectory_csv: String,
    pub budget: usize,
    pub evals: usize,
    pub f_opt: f64,
    pub final_best: f64,
    pub final_error: f64,
    pub wall_time: f64,
    /// `(evaluation, best-so-far fitness)` at every improvement.
    pub convergence: Vec<(usize, f64)>,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hash of everything that determines a run.
pub fn run_id(config: &str, solver: Solver, function: &str, seed: u64, params_hash: Option<&str>) -> String {
    let key = format!(
        "{config}\0{solver}\0{function}\0{seed}\0{}",
        params_hash.unwrap_or("-")
    );
    hex_digest(key.as_bytes())[..16].to_string()
}

impl RunRecord {
    pub fn expected_id(&self) -> String {
        run_id(
            &self.config,
            self.solver,
            &self.function,
            self.seed,
            self.params_hash.as_deref(),
        )
    }
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = TrajectoryRow::HEADER.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.best_fit, r.mean_fit, r.gate_mean, r.lambda_ssm, r.lambda_attn, r.residual_norm
        );
    }
    out
}

pub fn parse_trajectory_csv(text: &str, file: &str) -> Result<Vec<TrajectoryRow>> {
    let err = |line: usize, msg: String| HarnessError::Csv {
        file: file.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    if header != TrajectoryRow::HEADER.join(",") {
        return Err(err(1, format!("unexpected header `{header}`")));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let line = i + 2;
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != TrajectoryRow::HEADER.len() {
                return Err(err(line, format!("{} cells, expected {}", cells.len(), TrajectoryRow::HEADER.len())));
            }
            let num = |j: usize| {
                cells[j]
                    .parse::<f64>()
                    .map_err(|e| err(line, format!("{}: {e}", TrajectoryRow::HEADER[j])))
            };
            Ok(TrajectoryRow {
                step: cells[0].parse().map_err(|e| err(line, format!("step: {e}")))?,
                best_fit: num(1)?,
                mean_fit: num(2)?,
                gate_mean: num(3)?,
                lambda_ssm: num(4)?,
                lambda_attn: num(5)?,
                residual_norm: num(6)?,
            })
        })
        .collect()
}

/// Writes one run directory under `root` and returns its path.
pub fn write_run(root: &Path, record: &RunRecord, trajectory: &[TrajectoryRow]) -> Result<PathBuf> {
    let dir = root.join(&record.run_id);
    fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
    let put = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(HarnessError::io(p))
    };
    put(CONFIG_FILE, &record.config)?;
    put(TRAJECTORY_FILE, &trajectory_csv(trajectory))?;
    put(RECORD_FILE, &serde_json::to_string_pretty(record)?)?;
    Ok(dir)
}

pub fn read_record(dir: &Path) -> Result<RunRecord> {
    let p = dir.join(RECORD_FILE);
    let text = fs::read_to_string(&p).map_err(HarnessError::io(&p))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_trajectory(dir: &Path) -> Result<Vec<TrajectoryRow>> {
    let p = dir.join(TRAJECTORY_FILE);
    let text = fs::read_to_string(&p).map_err(HarnessError::io(&p))?;
    parse_trajectory_csv(&text, &p.display().to_string())
}

/// Every record in the run directories directly below `root`, by run id.
pub fn load_records(root: &Path) -> Result<Vec<RunRecord>> {
    let entries = fs::read_dir(root).map_err(HarnessError::io(root))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(HarnessError::io(root))?.path();
        if path.join(RECORD_FILE).is_file() {
            out.push(read_record(&path)?);
        }
    }
    out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(out)
}
