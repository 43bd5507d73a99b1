use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::moas::AdmissibleSet;
use super::{Point, DIM, V_EE, WRENCH, WRENCH_REF, X_EE, X_REF};

/// Weight on the held state coordinates during the fallback search.
const HOLD_WEIGHT: f64 = 1e6;
const CANDIDATES: usize = 32;
const BISECTIONS: usize = 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueryError {
    #[error("admissible set is empty")]
    EmptySet,
    #[error("query has non-finite entries")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GovernorQuery {
    pub x: f64,
    pub x_ref: f64,
    pub v: f64,
    pub wrench: f64,
    pub wrench_ref: f64,
}

impl GovernorQuery {
    pub fn point(&self) -> Point {
        [self.x, self.x_ref, self.v, self.wrench, self.wrench_ref]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// References pass unchanged.
    Admissible,
    /// References replaced by the closest admissible ones found.
    Governed,
    /// Even the stop references fail: the current state already violates.
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GovernorResult {
    pub x_ref: f64,
    pub wrench_ref: f64,
    pub verdict: Verdict,
    /// Normalized distance from the query to the nearest stored point.
    pub distance: f64,
    pub within_radius: bool,
}

/// Closest admissible references for the query.
///
/// Membership is decided by re-simulating the query itself, so a query next to
/// a stored point that sits just outside the set is still governed. Otherwise
/// the state `[x, v, W]` is held and the nearest stored references are tried
/// in order, each re-simulated from the actual state; the stop references
/// `x' = x, W' = W` come last. The first admissible candidate is pulled back
/// toward the requested references by bisection.
pub fn query_governor(set: &AdmissibleSet, q: &GovernorQuery) -> Result<GovernorResult, QueryError> {
    if set.is_empty() {
        return Err(QueryError::EmptySet);
    }
    let o = q.point();
    if o.iter().any(|v| !v.is_finite()) {
        return Err(QueryError::NonFinite);
    }
    let nq = set.grid.normalize(&o);
    let (_, d2) = set.index().nearest(&nq, &[1.0; DIM]).expect("non-empty");
    let distance = d2.sqrt();
    let within_radius = distance <= set.grid.admissibility_radius();
    let result = |x_ref, wrench_ref, verdict| GovernorResult { x_ref, wrench_ref, verdict, distance, within_radius };

    if set.is_admissible(&o) {
        return Ok(result(q.x_ref, q.wrench_ref, Verdict::Admissible));
    }

    let with_refs = |xr: f64, wr: f64| {
        let mut p = o;
        p[X_REF] = xr;
        p[WRENCH_REF] = wr;
        p
    };
    let mut weights = [1.0; DIM];
    for d in [X_EE, V_EE, WRENCH] {
        weights[d] = HOLD_WEIGHT;
    }
    let stop = (set.constraints.kinematic.clamp(q.x), q.wrench);
    let candidates = set
        .index()
        .k_nearest(&nq, &weights, CANDIDATES)
        .into_iter()
        .map(|(i, _)| (set.points()[i][X_REF], set.points()[i][WRENCH_REF]))
        .chain(std::iter::once(stop));

    for (xr, wr) in candidates {
        if !set.is_admissible(&with_refs(xr, wr)) {
            continue;
        }
        // t = 0 is the requested reference (inadmissible), t = 1 the candidate.
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..BISECTIONS {
            let mid = 0.5 * (lo + hi);
            let p = with_refs(q.x_ref + mid * (xr - q.x_ref), q.wrench_ref + mid * (wr - q.wrench_ref));
            if set.is_admissible(&p) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let (gx, gw) = if hi == 1.0 {
            (xr, wr)
        } else {
            (q.x_ref + hi * (xr - q.x_ref), q.wrench_ref + hi * (wr - q.wrench_ref))
        };
        return Ok(result(gx, gw, Verdict::Governed));
    }
    Ok(result(stop.0, stop.1, Verdict::Infeasible))
}
