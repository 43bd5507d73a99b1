//! Gridded maximal output-admissible sets: construction, resumable builds and
//! the binary file format.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::grid::{GridDim, GridError, GridSpec};
use super::index::{KdTree, NeighborIndex};
use super::{check_point, Axis, AxisConstraints, AxisDynamics, ConstraintError, Interval, Margins, Point, Rejection, SimSettings, DIM};

const MAGIC: &[u8; 4] = b"MOAS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MoasError {
    #[error("no admissible points on axis {axis}: constraints infeasible for the gains ({report})")]
    Empty { axis: Axis, report: BuildReport },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint {path} belongs to a different build configuration")]
    CheckpointMismatch { path: String },
}

/// Everything needed to build one axis set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub axis: Axis,
    pub dynamics: AxisDynamics,
    /// Hard constraints; the set is built against these tightened by `margins`.
    pub constraints: AxisConstraints,
    #[serde(default)]
    pub margins: Margins,
    pub grid: GridSpec,
    #[serde(default)]
    pub sim: SimSettings,
}

impl BuildConfig {
    pub fn effective_constraints(&self) -> AxisConstraints {
        self.constraints.tightened(&self.margins)
    }

    pub fn validate(&self) -> Result<(), MoasError> {
        self.grid.validate()?;
        self.constraints.validate(self.axis)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub axis: Axis,
    pub total: usize,
    pub retained: usize,
    pub rejected: BTreeMap<Rejection, usize>,
}

impl std::fmt::Display for BuildReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "axis {}: {}/{} retained", self.axis, self.retained, self.total)?;
        for (r, n) in &self.rejected {
            write!(f, ", {n} {r:?}")?;
        }
        Ok(())
    }
}

/// The admissible grid points of one axis plus the data needed to recheck them.
pub struct AdmissibleSet {
    pub axis: Axis,
    pub grid: GridSpec,
    pub dynamics: AxisDynamics,
    /// Constraints the points were checked against (already tightened).
    pub constraints: AxisConstraints,
    pub margins: Margins,
    pub sim: SimSettings,
    points: Vec<Point>,
    index: Box<dyn NeighborIndex>,
}

impl std::fmt::Debug for AdmissibleSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdmissibleSet")
            .field("axis", &self.axis)
            .field("points", &self.points.len())
            .field("index", &self.index.name())
            .finish()
    }
}

impl PartialEq for AdmissibleSet {
    fn eq(&self, o: &Self) -> bool {
        self.axis == o.axis
            && self.grid == o.grid
            && self.dynamics == o.dynamics
            && self.constraints == o.constraints
            && self.margins == o.margins
            && self.sim == o.sim
            && self.points == o.points
    }
}

impl AdmissibleSet {
    fn assemble(
        axis: Axis,
        grid: GridSpec,
        dynamics: AxisDynamics,
        constraints: AxisConstraints,
        margins: Margins,
        sim: SimSettings,
        points: Vec<Point>,
    ) -> Self {
        let normalized = points.iter().map(|p| grid.normalize(p)).collect();
        Self { axis, grid, dynamics, constraints, margins, sim, points, index: Box::new(KdTree::new(normalized)) }
    }

    /// Replaces the neighbour index with another backend over the same points.
    pub fn with_index(mut self, make: impl FnOnce(Vec<Point>) -> Box<dyn NeighborIndex>) -> Self {
        let normalized = self.points.iter().map(|p| self.grid.normalize(p)).collect();
        self.index = make(normalized);
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn index(&self) -> &dyn NeighborIndex {
        self.index.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_admissible(&self, o: &Point) -> bool {
        check_point(o, &self.dynamics, &self.constraints, &self.sim).is_none()
    }
}

fn verdicts(cfg: &BuildConfig, range: std::ops::Range<usize>) -> Vec<Option<Rejection>> {
    let c = cfg.effective_constraints();
    range.into_par_iter().map(|i| check_point(&cfg.grid.point(i), &cfg.dynamics, &c, &cfg.sim)).collect()
}

fn tally(report: &mut BuildReport, retained: &mut Vec<u64>, start: usize, v: &[Option<Rejection>]) {
    report.total += v.len();
    for (k, r) in v.iter().enumerate() {
        match r {
            None => {
                report.retained += 1;
                retained.push((start + k) as u64);
            }
            Some(r) => *report.rejected.entry(*r).or_insert(0) += 1,
        }
    }
}

fn empty_report(axis: Axis) -> BuildReport {
    BuildReport { axis, total: 0, retained: 0, rejected: Rejection::ALL.iter().map(|&r| (r, 0)).collect() }
}

fn finish(cfg: &BuildConfig, retained: &[u64], report: BuildReport) -> Result<(AdmissibleSet, BuildReport), MoasError> {
    if retained.is_empty() {
        return Err(MoasError::Empty { axis: cfg.axis, report });
    }
    let points = retained.iter().map(|&i| cfg.grid.point(i as usize)).collect();
    let set = AdmissibleSet::assemble(cfg.axis, cfg.grid, cfg.dynamics, cfg.effective_constraints(), cfg.margins, cfg.sim, points);
    Ok((set, report))
}

/// Exhaustive scan of the grid; points are kept in grid-index order.
pub fn build_moas(cfg: &BuildConfig) -> Result<(AdmissibleSet, BuildReport), MoasError> {
    cfg.validate()?;
    let v = verdicts(cfg, 0..cfg.grid.len());
    let mut report = empty_report(cfg.axis);
    let mut retained = Vec::new();
    tally(&mut report, &mut retained, 0, &v);
    finish(cfg, &retained, report)
}

/// Per-axis sets built from one configuration.
#[derive(Debug, PartialEq)]
pub struct MoasBundle {
    pub sets: Vec<AdmissibleSet>,
}

impl MoasBundle {
    pub fn get(&self, axis: Axis) -> Option<&AdmissibleSet> {
        self.sets.iter().find(|s| s.axis == axis)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, FORMAT_VERSION);
        put_u32(&mut b, self.sets.len() as u32);
        for s in &self.sets {
            b.push(s.axis.code());
            for d in &s.grid.dims {
                put_f64(&mut b, d.min);
                put_f64(&mut b, d.max);
                put_u32(&mut b, d.count as u32);
            }
            for v in [s.dynamics.stiffness, s.dynamics.damping, s.dynamics.saturation] {
                put_f64(&mut b, v);
            }
            for (_, iv) in s.constraints.named() {
                put_f64(&mut b, iv.lo);
                put_f64(&mut b, iv.hi);
            }
            for v in [s.margins.position, s.margins.velocity, s.margins.wrench] {
                put_f64(&mut b, v);
            }
            put_u32(&mut b, s.sim.horizon as u32);
            put_f64(&mut b, s.sim.dt);
            put_f64(&mut b, s.sim.settle_velocity);
            put_u32(&mut b, s.sim.settle_steps as u32);
            b.extend_from_slice(&(s.points.len() as u64).to_le_bytes());
            for p in &s.points {
                p.iter().for_each(|&v| put_f64(&mut b, v));
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self, MoasError> {
        let bad = |reason: String| MoasError::Format { path: source.to_string(), reason };
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(bad("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let t = || bad("truncated".into());
        let version = r.u32().ok_or_else(t)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let n_sets = r.u32().ok_or_else(t)?;
        let mut sets = Vec::new();
        for _ in 0..n_sets {
            let axis = Axis::from_code(r.u8().ok_or_else(t)?).ok_or_else(|| bad("unknown axis".into()))?;
            let mut dims = [GridDim::new(0.0, 1.0, 2); DIM];
            for d in dims.iter_mut() {
                *d = GridDim::new(r.f64().ok_or_else(t)?, r.f64().ok_or_else(t)?, r.u32().ok_or_else(t)? as usize);
            }
            let grid = GridSpec::new(dims).map_err(|e| bad(e.to_string()))?;
            let dynamics = AxisDynamics {
                stiffness: r.f64().ok_or_else(t)?,
                damping: r.f64().ok_or_else(t)?,
                saturation: r.f64().ok_or_else(t)?,
            };
            let mut iv = [Interval::new(0.0, 0.0); 4];
            for i in iv.iter_mut() {
                *i = Interval::new(r.f64().ok_or_else(t)?, r.f64().ok_or_else(t)?);
            }
            let constraints = AxisConstraints { position: iv[0], velocity: iv[1], wrench: iv[2], kinematic: iv[3] };
            let margins = Margins {
                position: r.f64().ok_or_else(t)?,
                velocity: r.f64().ok_or_else(t)?,
                wrench: r.f64().ok_or_else(t)?,
            };
            let sim = SimSettings {
                horizon: r.u32().ok_or_else(t)? as usize,
                dt: r.f64().ok_or_else(t)?,
                settle_velocity: r.f64().ok_or_else(t)?,
                settle_steps: r.u32().ok_or_else(t)? as usize,
            };
            let n = r.u64().ok_or_else(t)? as usize;
            if n.checked_mul(DIM * 8).is_none_or(|len| len > body.len()) {
                return Err(t());
            }
            let mut points = Vec::with_capacity(n);
            for _ in 0..n {
                let mut p = [0.0; DIM];
                for v in p.iter_mut() {
                    *v = r.f64().ok_or_else(t)?;
                }
                points.push(p);
            }
            sets.push(AdmissibleSet::assemble(axis, grid, dynamics, constraints, margins, sim, points));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self { sets })
    }

    pub fn save(&self, path: &Path) -> Result<(), MoasError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, MoasError> {
        let bytes = std::fs::read(path).map_err(|source| MoasError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Builds every axis and returns the bundle with per-axis reports.
pub fn build_bundle(cfgs: &[BuildConfig]) -> Result<(MoasBundle, Vec<BuildReport>), MoasError> {
    let mut sets = Vec::new();
    let mut reports = Vec::new();
    for c in cfgs {
        let (s, r) = build_moas(c)?;
        sets.push(s);
        reports.push(r);
    }
    Ok((MoasBundle { sets }, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    fingerprint: String,
    axis: usize,
    next: usize,
    retained: Vec<Vec<u64>>,
    reports: Vec<BuildReport>,
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn fingerprint(cfgs: &[BuildConfig], chunk: usize) -> String {
    let json = serde_json::to_vec(&(cfgs, chunk)).expect("configs serialize");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

pub enum BuildOutcome {
    Complete(MoasBundle, Vec<BuildReport>),
    /// Stopped after the chunk budget; progress is in the checkpoint file.
    Interrupted { chunks_done: usize },
}

/// Chunked build that records progress next to `out` after every chunk and
/// resumes from it. The finished file is written to `out` and the checkpoint
/// removed. `max_chunks` bounds the work done in this call.
pub fn build_resumable(
    cfgs: &[BuildConfig],
    out: &Path,
    chunk: usize,
    max_chunks: Option<usize>,
    mut progress: impl FnMut(Axis, usize, usize),
) -> Result<BuildOutcome, MoasError> {
    for c in cfgs {
        c.validate()?;
    }
    let chunk = chunk.max(1);
    let ck_path = checkpoint_path(out);
    let fp = fingerprint(cfgs, chunk);
    let mut ck = match std::fs::read(&ck_path) {
        Ok(bytes) => {
            let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| MoasError::Format {
                path: ck_path.display().to_string(),
                reason: e.to_string(),
            })?;
            if ck.fingerprint != fp {
                return Err(MoasError::CheckpointMismatch { path: ck_path.display().to_string() });
            }
            ck
        }
        Err(_) => Checkpoint {
            fingerprint: fp,
            axis: 0,
            next: 0,
            retained: vec![Vec::new(); cfgs.len()],
            reports: cfgs.iter().map(|c| empty_report(c.axis)).collect(),
        },
    };
    let mut done = 0;
    while ck.axis < cfgs.len() {
        let cfg = &cfgs[ck.axis];
        let total = cfg.grid.len();
        if ck.next >= total {
            if ck.retained[ck.axis].is_empty() {
                let _ = std::fs::remove_file(&ck_path);
                return Err(MoasError::Empty { axis: cfg.axis, report: ck.reports[ck.axis].clone() });
            }
            ck.axis += 1;
            ck.next = 0;
            continue;
        }
        if max_chunks.is_some_and(|m| done >= m) {
            return Ok(BuildOutcome::Interrupted { chunks_done: done });
        }
        let end = (ck.next + chunk).min(total);
        let v = verdicts(cfg, ck.next..end);
        let (report, retained) = (&mut ck.reports[ck.axis], &mut ck.retained[ck.axis]);
        tally(report, retained, ck.next, &v);
        ck.next = end;
        done += 1;
        progress(cfg.axis, end, total);
        let json = serde_json::to_vec(&ck).expect("checkpoint serializes");
        write_atomic(&ck_path, &json)?;
    }
    let mut sets = Vec::new();
    for (i, cfg) in cfgs.iter().enumerate() {
        sets.push(finish(cfg, &ck.retained[i], ck.reports[i].clone())?.0);
    }
    let bundle = MoasBundle { sets };
    bundle.save(out)?;
    let _ = std::fs::remove_file(&ck_path);
    Ok(BuildOutcome::Complete(bundle, ck.reports))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), MoasError> {
    let io = |source| MoasError::Io { path: path.display().to_string(), source };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(b: &mut Vec<u8>, v: f64) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let s = self.buf.get(self.pos..self.pos + N)?;
        self.pos += N;
        s.try_into().ok()
    }
    fn u8(&mut self) -> Option<u8> {
        self.take::<1>().map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Option<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Option<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(count: usize) -> BuildConfig {
        BuildConfig {
            axis: Axis::X,
            dynamics: AxisDynamics { stiffness: 50.0, damping: 20.0, saturation: 1.0 },
            constraints: AxisConstraints {
                position: Interval::new(-0.2, 0.2),
                velocity: Interval::new(-0.5, 0.5),
                wrench: Interval::new(-20.0, 20.0),
                kinematic: Interval::new(-0.25, 0.25),
            },
            margins: Margins::default(),
            grid: GridSpec::new([
                GridDim::new(-0.25, 0.25, count),
                GridDim::new(-0.3, 0.3, count),
                GridDim::new(-0.6, 0.6, count),
                GridDim::new(-15.0, 15.0, count),
                GridDim::new(-15.0, 15.0, count),
            ])
            .unwrap(),
            sim: SimSettings::default(),
        }
    }

    #[test]
    fn wide_constraints_keep_everything() {
        let c = BuildConfig { constraints: AxisConstraints::unbounded(), ..cfg(4) };
        let (set, report) = build_moas(&c).unwrap();
        assert_eq!(set.len(), c.grid.len());
        assert_eq!(report.retained, report.total);
    }

    #[test]
    fn zero_velocity_bound_keeps_stationary_points() {
        let mut c = cfg(5);
        c.constraints.velocity = Interval::new(0.0, 0.0);
        let (set, _) = build_moas(&c).unwrap();
        for p in set.points() {
            assert_eq!(p[2], 0.0);
            assert_eq!(c.dynamics.velocity(p[0], p[1], p[3], p[4]), 0.0);
        }
        assert!(!set.is_empty());
    }

    #[test]
    fn infeasible_is_an_error() {
        let mut c = cfg(3);
        c.constraints.kinematic = Interval::new(5.0, 6.0);
        assert!(matches!(build_moas(&c), Err(MoasError::Empty { .. })));
    }

    #[test]
    fn round_trip_and_corruption() {
        let (set, _) = build_moas(&cfg(5)).unwrap();
        let bundle = MoasBundle { sets: vec![set] };
        let bytes = bundle.to_bytes();
        assert_eq!(MoasBundle::from_bytes(&bytes, "mem").unwrap(), bundle);
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(MoasBundle::from_bytes(&bytes[..cut], "mem").is_err());
        }
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(MoasBundle::from_bytes(&v, "mem").is_err());
    }

    #[test]
    fn resumed_build_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfgs = [cfg(5), BuildConfig { axis: Axis::Z, ..cfg(4) }];
        let a = dir.path().join("a.moas");
        let b = dir.path().join("b.moas");
        assert!(matches!(build_resumable(&cfgs, &a, 300, None, |_, _, _| {}).unwrap(), BuildOutcome::Complete(..)));
        let mut rounds = 0;
        loop {
            rounds += 1;
            match build_resumable(&cfgs, &b, 300, Some(2), |_, _, _| {}).unwrap() {
                BuildOutcome::Complete(..) => break,
                BuildOutcome::Interrupted { .. } => assert!(checkpoint_path(&b).exists()),
            }
        }
        assert!(rounds > 2);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert!(!checkpoint_path(&b).exists());
    }
}
