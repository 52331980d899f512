//! Datasets, evaluation against optimum sources, and gap reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{held_karp, nearest_neighbor_best, nn_two_opt_best, TwoOptConfig, HELD_KARP_MAX_NODES};
use crate::error::{Error, Result};
use crate::instance::{normalize_to_unit_square, optimality_gap, tour_length, Instance, Point, Tour};
use crate::neural::Real;
use crate::policy::Policy;
use crate::rollout::solve_greedy;

pub const REPORT_HEADER: &str = "dataset,method,mean_len,gap_pct,wallclock_s";

/// One instance per line as `{"name": ..., "coords": [[x, y], ...]}`.
pub fn write_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut text = String::new();
    for inst in instances {
        text.push_str(&serde_json::to_string(inst)?);
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Where optimal lengths come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OptSource {
    HeldKarp,
    /// One length per line, in dataset order; `#` starts a comment.
    File(PathBuf),
    None,
}

impl FromStr for OptSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hk" | "held_karp" => Ok(OptSource::HeldKarp),
            "none" => Ok(OptSource::None),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(OptSource::File(PathBuf::from(p))),
                _ => Err(Error::param(format!("unknown optimum source `{s}` (hk|file:<path>|none)"))),
            },
        }
    }
}

pub fn read_opt_file(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("expected a length, got `{line}`"),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Optimal lengths for every instance, or `None` when the source is `none`.
pub fn resolve_opt(source: &OptSource, instances: &[Instance]) -> Result<Option<Vec<f64>>> {
    match source {
        OptSource::None => Ok(None),
        OptSource::HeldKarp => {
            if let Some(big) = instances.iter().find(|i| i.len() > HELD_KARP_MAX_NODES) {
                return Err(Error::TooLarge {
                    n: big.len(),
                    max: HELD_KARP_MAX_NODES,
                });
            }
            let v = instances
                .par_iter()
                .map(|i| held_karp(i).map(|t| t.length()))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(v))
        }
        OptSource::File(path) => {
            let v = read_opt_file(path)?;
            if v.len() < instances.len() {
                return Err(Error::param(format!(
                    "{} holds {} optimum values for {} instances",
                    path.display(),
                    v.len(),
                    instances.len()
                )));
            }
            Ok(Some(v[..instances.len()].to_vec()))
        }
    }
}

/// Greedy best-of-starts tour of the model, scored on the original coordinates.
pub fn model_tour<T: Real>(policy: &Policy<T>, instance: &Instance) -> Result<Tour> {
    let tour = if instance.is_normalized() {
        solve_greedy(policy, instance)?
    } else {
        let (norm, _, _) = normalize_to_unit_square(instance)?;
        solve_greedy(policy, &norm)?
    };
    Tour::new(instance, tour.into_order())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Model,
    NearestNeighbor,
    NearestNeighborTwoOpt,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Model => "model",
            Method::NearestNeighbor => "nn",
            Method::NearestNeighborTwoOpt => "nn+2opt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dataset: String,
    pub method: String,
    pub mean_len: f64,
    /// Mean per-instance gap, when optimum values are known.
    pub gap_pct: Option<f64>,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let gap = r.gap_pct.map(|g| format!("{g:.4}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{:.6},{},{:.3}",
                r.dataset, r.method, r.mean_len, gap, r.wallclock_s
            );
        }
        s
    }
}

/// Per-instance results of one method.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub tours: Vec<Tour>,
    pub gaps: Option<Vec<f64>>,
    pub row: BenchRow,
}

pub fn run_method<T: Real>(
    dataset: &str,
    method: Method,
    policy: Option<&Policy<T>>,
    instances: &[Instance],
    opt: Option<&[f64]>,
) -> Result<MethodResult> {
    if instances.is_empty() {
        return Err(Error::param("dataset is empty"));
    }
    let started = Instant::now();
    let tours = instances
        .par_iter()
        .map(|inst| match method {
            Method::Model => model_tour(policy.ok_or_else(|| Error::param("model method needs a checkpoint"))?, inst),
            Method::NearestNeighbor => nearest_neighbor_best(inst),
            Method::NearestNeighborTwoOpt => nn_two_opt_best(inst, TwoOptConfig::default()),
        })
        .collect::<Result<Vec<_>>>()?;
    let wallclock_s = started.elapsed().as_secs_f64();
    for (t, inst) in tours.iter().zip(instances) {
        tour_length(inst, t.order())?;
    }
    let mean_len = tours.iter().map(Tour::length).sum::<f64>() / tours.len() as f64;
    let gaps = opt
        .map(|o| {
            tours
                .iter()
                .zip(o)
                .map(|(t, &v)| optimality_gap(t.length(), v))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let gap_pct = gaps.as_ref().map(|g| g.iter().sum::<f64>() / g.len() as f64);
    Ok(MethodResult {
        method,
        tours,
        gaps,
        row: BenchRow {
            dataset: dataset.to_string(),
            method: method.label().to_string(),
            mean_len,
            gap_pct,
            wallclock_s,
        },
    })
}

/// Evaluates the model (when given) and optionally the baselines on one dataset.
pub fn evaluate<T: Real>(
    dataset: &str,
    policy: Option<&Policy<T>>,
    instances: &[Instance],
    opt: &OptSource,
    baselines: bool,
) -> Result<(BenchReport, Vec<MethodResult>)> {
    let opt = resolve_opt(opt, instances)?;
    let mut methods = Vec::new();
    if policy.is_some() {
        methods.push(Method::Model);
    }
    if baselines {
        methods.extend([Method::NearestNeighbor, Method::NearestNeighborTwoOpt]);
    }
    if methods.is_empty() {
        return Err(Error::param("nothing to evaluate: give a checkpoint or enable baselines"));
    }
    let results = methods
        .into_iter()
        .map(|m| run_method(dataset, m, policy, instances, opt.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let report = BenchReport {
        rows: results.iter().map(|r| r.row.clone()).collect(),
    };
    Ok((report, results))
}

/// Size bucket used for TSPLIB summaries.
pub fn tsplib_group(n: usize) -> Option<&'static str> {
    match n {
        1..=100 => Some("TSPLIB1-100"),
        101..=500 => Some("TSPLIB101-500"),
        501..=1002 => Some("TSPLIB501-1002"),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsplibResult {
    pub name: String,
    pub n: usize,
    pub opt: f64,
    pub length: f64,
    pub wallclock_s: f64,
}

/// One row per non-empty size bucket, in bucket order.
pub fn tsplib_group_rows(method: &str, results: &[TsplibResult]) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for group in ["TSPLIB1-100", "TSPLIB101-500", "TSPLIB501-1002"] {
        let members: Vec<&TsplibResult> = results.iter().filter(|r| tsplib_group(r.n) == Some(group)).collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let mut gap = 0.0;
        for r in &members {
            gap += optimality_gap(r.length, r.opt)?;
        }
        rows.push(BenchRow {
            dataset: group.to_string(),
            method: method.to_string(),
            mean_len: members.iter().map(|r| r.length).sum::<f64>() / k,
            gap_pct: Some(gap / k),
            wallclock_s: members.iter().map(|r| r.wallclock_s).sum(),
        });
    }
    Ok(rows)
}

/// Tour coordinates in visiting order, for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TourExport {
    pub dataset: String,
    pub method: String,
    pub index: usize,
    pub length: f64,
    pub order: Vec<usize>,
    pub coords: Vec<Point>,
}

pub fn export_tours(dataset: &str, result: &MethodResult, instances: &[Instance]) -> Vec<TourExport> {
    result
        .tours
        .iter()
        .zip(instances)
        .enumerate()
        .map(|(index, (t, inst))| TourExport {
            dataset: dataset.to_string(),
            method: result.method.label().to_string(),
            index,
            length: t.length(),
            order: t.order().to_vec(),
            coords: t.order().iter().map(|&i| inst.coords()[i]).collect(),
        })
        .collect()
}

pub fn write_tours_json(path: &Path, tours: &[TourExport]) -> Result<()> {
    fs::write(path, serde_json::to_string(tours)?).map_err(|e| Error::io(path, e))
}
