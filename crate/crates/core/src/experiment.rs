//! Runs a configured experiment entirely in memory, then writes its files.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::audit::{impossibility_certificate, posterior_regret, regret_upper_bound, sweep_with_reports, RateSweep, RegretReport, SweepRow};
use crate::config::{check_sweep, ExperimentConfig};
use crate::error::{Error, Result};
use crate::estimators::{rate, EstimatorSpec};
use crate::instance::Instance;
use crate::report::{m_label, regret_csv, sweep_csv, Labels};
use crate::scenarios::Scenario;

pub const REGRET_FILE: &str = "regret_report.csv";
pub const SWEEP_FILE: &str = "rate_sweep.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Sample sizes used when neither the command line nor the config gives any.
pub const DEFAULT_SWEEP: [u64; 6] = [4, 16, 64, 256, 1024, 4096];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verb {
    Run,
    /// Sweep over the given sizes, or the config's, or [`DEFAULT_SWEEP`].
    Sweep(Option<Vec<u64>>),
    CertifyImpossibility,
}

/// Caller-supplied provenance recorded in the summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub versions: BTreeMap<String, String>,
}

/// Files produced by one invocation, in write order.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub files: Vec<(String, String)>,
    pub summary: Value,
}

impl Outputs {
    /// Writes every file to a temporary name first, then renames them all, so
    /// an I/O failure never leaves a mix of old and new results.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, body) in &self.files {
            let tmp = dir.join(format!(".{name}.tmp"));
            if let Err(e) = fs::write(&tmp, body) {
                for (t, _) in &staged {
                    let _ = fs::remove_file(t);
                }
                return Err(e);
            }
            staged.push((tmp, dir.join(name)));
        }
        for (tmp, dest) in staged {
            fs::rename(tmp, dest)?;
        }
        Ok(())
    }

    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_str())
    }
}

fn labels(cfg: &ExperimentConfig, scenario: &Scenario) -> Labels {
    Labels { scenario: cfg.scenario_name().to_string(), rule: scenario.rule.label(), seed: cfg.seed }
}

fn regret_json(r: &RegretReport) -> Value {
    json!({
        "epsilon": r.epsilon,
        "epsilon_se": r.epsilon_se,
        "tolerance": r.tolerance(),
        "within_tolerance": r.within_tolerance(),
        "exact": r.exact,
        "discretization": r.discretization,
        "rows": r.rows.len(),
    })
}

fn sweep_json(s: &RateSweep) -> Value {
    json!({
        "kappa": s.kappa,
        "slope": s.slope,
        "exact": s.exact,
        "epsilon_nonincreasing": s.epsilon_nonincreasing(),
        "scaled_nonincreasing": s.scaled_nonincreasing(),
        "bounded": s.bounded(),
        "all_zero": s.all_zero(),
        "rows": s.rows,
    })
}

fn certificate_json(cfg: &ExperimentConfig, inst: &Instance) -> Result<Option<Value>> {
    let Some(spec) = &cfg.certificate else { return Ok(None) };
    let [s1, s1_alt, s2, ta, tb, t2] = spec.indices(inst)?;
    Ok(Some(match impossibility_certificate(inst, s1, s1_alt, s2, ta, tb, t2) {
        Ok(c) => {
            let mut v = serde_json::to_value(&c).map_err(|e| Error::Numerical(e.to_string()))?;
            v["issued"] = json!(true);
            v
        }
        Err(Error::ConditionStarFails { gap }) => json!({
            "issued": false,
            "reason": Error::ConditionStarFails { gap }.to_string(),
        }),
        Err(e) => return Err(e),
    }))
}

/// One sweep row for a single audited estimator; the bound is left out when
/// some Lipschitz constant is missing.
fn single_row(inst: &Instance, est: &EstimatorSpec, report: &RegretReport, cfg: &ExperimentConfig) -> Result<SweepRow> {
    let mut bound = Some((0.0_f64, 0.0_f64));
    for i in 0..inst.n() {
        match regret_upper_bound(inst, i, est, cfg.audit_config().sampling) {
            Ok(b) => bound = bound.map(|a| if b.0 > a.0 { b } else { a }),
            Err(Error::MissingLipschitzConstant(_)) => bound = None,
            Err(e) => return Err(e),
        }
    }
    let (bound, bound_se) = bound.unwrap_or((f64::NAN, f64::NAN));
    let m = est.m().unwrap_or(0);
    let r_m = if m == 0 { f64::INFINITY } else { rate(m, cfg.kappa) };
    Ok(SweepRow {
        m,
        epsilon: report.epsilon,
        se: report.epsilon_se,
        bound,
        bound_se,
        r_m,
        r_eps: if report.epsilon == 0.0 { 0.0 } else { r_m * report.epsilon },
    })
}

fn summary(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    prov: &Provenance,
    verb: &str,
    extra: Vec<(&str, Value)>,
) -> Value {
    let mut v = json!({
        "verb": verb,
        "scenario": cfg.scenario_name(),
        "rule": scenario.rule.label(),
        "estimator": scenario.estimator.label(),
        "m": m_label(&scenario.estimator),
        "seed": cfg.seed,
        "mc_samples": cfg.mc_samples,
        "mc_seed": cfg.mc_seed,
        "budget": cfg.budget,
        "provenance": {
            "config_sha256": prov.config_sha256,
            "seed": cfg.seed,
            "versions": prov.versions,
        },
    });
    for (k, x) in extra {
        v[k] = x;
    }
    v
}

fn render(summary: Value, mut files: Vec<(String, String)>) -> Result<Outputs> {
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Numerical(e.to_string()))?;
    files.push((SUMMARY_FILE.into(), text + "\n"));
    Ok(Outputs { files, summary })
}

/// Executes `verb` and returns the outputs without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig, verb: &Verb, prov: &Provenance) -> Result<Outputs> {
    let scenario = cfg.build()?;
    let inst = &scenario.instance;
    let audit_cfg = cfg.audit_config();
    let lab = labels(cfg, &scenario);
    match verb {
        Verb::Run => {
            let est = &scenario.estimator;
            let ms = match &cfg.sweep_m {
                Some(ms) if est.m().is_some() => ms.clone(),
                _ => vec![],
            };
            let (sweep, sweep_reports) = if ms.is_empty() {
                (None, vec![])
            } else {
                let (s, r) = sweep_with_reports(inst, &scenario.rule, est, &ms, cfg.kappa, &audit_cfg)?;
                (Some(s), r)
            };
            let own = ms.iter().position(|&m| Some(m) == est.m());
            let report = match own {
                Some(k) => sweep_reports[k].clone(),
                None => posterior_regret(inst, &scenario.rule, est, &audit_cfg)?,
            };
            let sweep = match sweep {
                Some(s) => s,
                None => {
                    let row = single_row(inst, est, &report, cfg)?;
                    RateSweep { rows: vec![row], kappa: cfg.kappa, slope: None, exact: report.exact }
                }
            };
            let mut blocks = Vec::new();
            if own.is_none() {
                blocks.push((est.clone(), &report));
            }
            blocks.extend(ms.iter().map(|&m| est.with_m(m)).zip(&sweep_reports));
            let mut extra = vec![("regret", regret_json(&report)), ("sweep", sweep_json(&sweep))];
            if let Some(c) = certificate_json(cfg, inst)? {
                extra.push(("certificate", c));
            }
            let files = vec![
                (REGRET_FILE.into(), regret_csv(&lab, &blocks)?),
                (SWEEP_FILE.into(), sweep_csv(&lab, &scenario.estimator, &sweep)?),
            ];
            render(summary(cfg, &scenario, prov, "run", extra), files)
        }
        Verb::Sweep(ms) => {
            let ms = ms.clone().or_else(|| cfg.sweep_m.clone()).unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
            check_sweep(&ms)?;
            if scenario.estimator.m().is_none() {
                return Err(Error::Config(format!(
                    "estimator `{}` has no sample size to sweep",
                    scenario.estimator.label()
                )));
            }
            let (sweep, reports) = sweep_with_reports(inst, &scenario.rule, &scenario.estimator, &ms, cfg.kappa, &audit_cfg)?;
            let blocks: Vec<_> = ms.iter().map(|&m| scenario.estimator.with_m(m)).zip(&reports).collect();
            let files = vec![
                (REGRET_FILE.into(), regret_csv(&lab, &blocks)?),
                (SWEEP_FILE.into(), sweep_csv(&lab, &scenario.estimator, &sweep)?),
            ];
            render(summary(cfg, &scenario, prov, "sweep", vec![("sweep", sweep_json(&sweep))]), files)
        }
        Verb::CertifyImpossibility => {
            let cert = certificate_json(cfg, inst)?
                .ok_or_else(|| Error::Config("certify-impossibility needs a `certificate` section".into()))?;
            render(summary(cfg, &scenario, prov, "certify-impossibility", vec![("certificate", cert)]), vec![])
        }
    }
}
