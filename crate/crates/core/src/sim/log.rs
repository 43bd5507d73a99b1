//! Step-log CSV export and re-import.
//!
//! Column names carry their unit in brackets, e.g. `cmd_vx [m/s]`. Floats are
//! written with the shortest representation that parses back bit-exactly.

use std::fs::File;
use std::path::Path;

use thiserror::Error;

use super::harness::StepRecord;
use super::rewards::TERM_NAMES;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: missing columns [{}]; unexpected columns [{}]", missing.join(", "), unexpected.join(", "))]
    Schema { path: String, missing: Vec<String>, unexpected: Vec<String> },
    #[error("{path}: row {row}, column '{column}': cannot parse '{value}'")]
    Value { path: String, row: usize, column: String, value: String },
}

const TWIST: [(&str, &str); 6] =
    [("vx", "m/s"), ("vy", "m/s"), ("vz", "m/s"), ("wx", "rad/s"), ("wy", "rad/s"), ("wz", "rad/s")];
const POSE: [(&str, &str); 4] = [("x", "m"), ("y", "m"), ("z", "m"), ("yaw", "rad")];
const WRENCH: [(&str, &str); 6] = [("fx", "N"), ("fy", "N"), ("fz", "N"), ("tx", "N*m"), ("ty", "N*m"), ("tz", "N*m")];
const AXIS_WRENCH: [(&str, &str); 4] = [("x", "N"), ("y", "N"), ("z", "N"), ("yaw", "N*m")];
const AXES: [&str; 4] = ["x", "y", "z", "yaw"];
const P_DIAG: [(&str, &str); 6] = [
    ("wx", "rad^2/s^2"),
    ("wy", "rad^2/s^2"),
    ("wz", "rad^2/s^2"),
    ("vx", "m^2/s^2"),
    ("vy", "m^2/s^2"),
    ("vz", "m^2/s^2"),
];

fn group(h: &mut Vec<String>, prefix: &str, cols: &[(&str, &str)]) {
    h.extend(cols.iter().map(|(c, u)| format!("{prefix}_{c} [{u}]")));
}

pub fn header() -> Vec<String> {
    let mut h = vec!["t [s]".to_string()];
    group(&mut h, "cmd", &TWIST);
    group(&mut h, "achieved", &TWIST);
    group(&mut h, "ee", &POSE);
    group(&mut h, "base", &POSE);
    group(&mut h, "base", &TWIST);
    group(&mut h, "est", &TWIST);
    group(&mut h, "p", &P_DIAG);
    h.push("p_min_eig [-]".into());
    group(&mut h, "sensed", &WRENCH);
    group(&mut h, "net", &WRENCH);
    group(&mut h, "ref", &POSE);
    group(&mut h, "ref_wrench", &AXIS_WRENCH);
    group(&mut h, "gov", &POSE);
    group(&mut h, "gov_wrench", &AXIS_WRENCH);
    h.extend(AXES.iter().map(|a| format!("verdict_{a} [-]")));
    h.extend(AXES.iter().map(|a| format!("violations_{a} [bitmask]")));
    h.extend(TERM_NAMES.iter().map(|n| format!("reward_{n} [-]")));
    h
}

fn fields(r: &StepRecord) -> Vec<String> {
    let mut out = vec![r.t.to_string()];
    for block in [&r.cmd[..], &r.achieved, &r.ee, &r.base, &r.base_twist, &r.base_estimate, &r.p_diag] {
        out.extend(block.iter().map(f64::to_string));
    }
    out.push(r.p_min_eig.to_string());
    for block in [&r.sensed[..], &r.net_wrench, &r.ref_raw, &r.ref_wrench_raw, &r.ref_gov, &r.ref_wrench_gov] {
        out.extend(block.iter().map(f64::to_string));
    }
    out.extend(r.verdict.iter().map(i8::to_string));
    out.extend(r.violations.iter().map(u8::to_string));
    out.extend(r.rewards.iter().map(f64::to_string));
    out
}

struct Cursor<'a> {
    vals: &'a [f64],
    at: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [f64; N] {
        let out = std::array::from_fn(|i| self.vals[self.at + i]);
        self.at += N;
        out
    }
}

fn record(vals: &[f64]) -> StepRecord {
    let mut c = Cursor { vals, at: 0 };
    StepRecord {
        t: c.take::<1>()[0],
        cmd: c.take(),
        achieved: c.take(),
        ee: c.take(),
        base: c.take(),
        base_twist: c.take(),
        base_estimate: c.take(),
        p_diag: c.take(),
        p_min_eig: c.take::<1>()[0],
        sensed: c.take(),
        net_wrench: c.take(),
        ref_raw: c.take(),
        ref_wrench_raw: c.take(),
        ref_gov: c.take(),
        ref_wrench_gov: c.take(),
        verdict: c.take::<4>().map(|v| v as i8),
        violations: c.take::<4>().map(|v| v as u8),
        rewards: c.take(),
    }
}

pub fn write_log(path: &Path, rows: &[StepRecord]) -> Result<(), LogError> {
    let err = |source| LogError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header()).map_err(err)?;
    for r in rows {
        w.write_record(fields(r)).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>, LogError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| LogError::Csv { path: p.clone(), source: e.into() })?;
    let mut rd = csv::Reader::from_reader(file);
    let found: Vec<String> =
        rd.headers().map_err(|source| LogError::Csv { path: p.clone(), source })?.iter().map(str::to_string).collect();
    let expected = header();
    if found != expected {
        let missing = expected.iter().filter(|c| !found.contains(c)).cloned().collect();
        let unexpected = found.iter().filter(|c| !expected.contains(c)).cloned().collect();
        return Err(LogError::Schema { path: p, missing, unexpected });
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|source| LogError::Csv { path: p.clone(), source })?;
        let mut vals = Vec::with_capacity(expected.len());
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| LogError::Value {
                path: p.clone(),
                row: i + 1,
                column: expected[j].clone(),
                value: field.to_string(),
            })?;
            vals.push(v);
        }
        rows.push(record(&vals));
    }
    Ok(rows)
}
