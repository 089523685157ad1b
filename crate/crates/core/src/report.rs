//! CSV and JSON renderings of audit results.
//!
//! Every CSV row repeats its provenance columns so that files from several
//! runs can be concatenated.

use serde::Serialize;

use crate::audit::{RateSweep, RegretReport};
use crate::error::{Error, Result};
use crate::estimators::EstimatorSpec;

pub const REGRET_HEADER: [&str; 12] = [
    "scenario", "rule", "estimator", "m", "seed", "agent", "theta_idx", "s_idx", "best_dev_theta", "best_dev_s",
    "gain", "se",
];

pub const SWEEP_HEADER: [&str; 11] =
    ["scenario", "rule", "estimator", "seed", "m", "epsilon", "se", "bound", "bound_se", "r_m", "r_eps"];

/// Provenance columns shared by every row of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Labels {
    pub scenario: String,
    pub rule: String,
    pub seed: u64,
}

/// `m` as written in the CSV: the sample size, or `inf` for ex-post kinds.
pub fn m_label(est: &EstimatorSpec) -> String {
    est.m().map_or_else(|| "inf".into(), |m| m.to_string())
}

fn joined(idx: &[usize]) -> String {
    idx.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Numerical(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Numerical(format!("csv: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Numerical(format!("csv: {e}"))
}

/// Long-format regret table; one block of rows per `(estimator, report)`.
pub fn regret_csv(labels: &Labels, reports: &[(EstimatorSpec, &RegretReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REGRET_HEADER).map_err(csv_err)?;
    for (est, report) in reports {
        let (est_label, m) = (est.label(), m_label(est));
        for r in &report.rows {
            w.write_record([
                labels.scenario.clone(),
                labels.rule.clone(),
                est_label.clone(),
                m.clone(),
                labels.seed.to_string(),
                r.agent.to_string(),
                joined(&r.theta_idx),
                joined(&r.s_idx),
                r.best_dev_theta.to_string(),
                r.best_dev_s.to_string(),
                r.gain.to_string(),
                r.se.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(w)
}

/// Rate table with one row per sample size.
pub fn sweep_csv(labels: &Labels, family: &EstimatorSpec, sweep: &RateSweep) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for r in &sweep.rows {
        let est = family.with_m(r.m);
        w.write_record([
            labels.scenario.clone(),
            labels.rule.clone(),
            est.label(),
            labels.seed.to_string(),
            m_label(&est),
            r.epsilon.to_string(),
            r.se.to_string(),
            r.bound.to_string(),
            r.bound_se.to_string(),
            r.r_m.to_string(),
            r.r_eps.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}
