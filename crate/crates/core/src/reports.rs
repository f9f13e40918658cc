//! Plot-ready CSV tables assembled from saved results. No rendering.
//!
//! Schemas:
//!
//! | file suffix               | columns                                              |
//! |---------------------------|------------------------------------------------------|
//! | `_curve.csv`              | as `RunResult::write_curves_csv`                     |
//! | `_accuracy_vs_gamma.csv`  | `series,gamma,mean_acc,sem,n`                        |
//! | `_heatmap.csv`            | `theta,gamma,mean_acc,sem`                           |
//! | `_gains.csv`              | `series,gamma,seed,accuracy,baseline_accuracy,gain` |
//! | `_loss_by_depth.csv`      | `k,baseline,momentum,delta`                          |
//! | `_bode.csv`               | `omega,measured,theory`                              |
//! | `_stability.csv`          | `metric,value`                                       |
//!
//! `series` is the compact JSON of the remaining grid coordinates; empty
//! fields mark absent statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{LabError, Result};
use crate::forensics::{BodeResult, StabilityReport};
use crate::sweeps::{summarize, CellRecord, SweepResult};
use crate::training::{EvalReport, RunResult};

/// A saved result recognized by its JSON shape.
#[derive(Clone, Debug)]
pub enum Artifact {
    Run(Box<RunResult>),
    Sweep(Box<SweepResult>),
    Bode(BodeResult),
    Stability(StabilityReport),
}

impl Artifact {
    pub fn parse(text: &str) -> Option<Self> {
        let v: Value = serde_json::from_str(text).ok()?;
        let has = |k: &str| v.get(k).is_some();
        if has("cells") && has("grid") {
            serde_json::from_value(v).ok().map(|s| Artifact::Sweep(Box::new(s)))
        } else if has("curves") {
            serde_json::from_value(v).ok().map(|r| Artifact::Run(Box::new(r)))
        } else if has("omegas") {
            serde_json::from_value(v).ok().map(Artifact::Bode)
        } else if has("energy_ratio") {
            serde_json::from_value(v).ok().map(Artifact::Stability)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatCell {
    pub theta: f64,
    pub gamma: f64,
    pub mean_acc: f64,
    pub sem: Option<f64>,
}

/// Mean accuracy per (θ, γ), pooled over seeds and any other axes.
pub fn heatmap(sweep: &SweepResult) -> Vec<HeatCell> {
    let mut acc: BTreeMap<(OrdF64, OrdF64), Vec<f64>> = BTreeMap::new();
    for c in &sweep.cells {
        let (Some(theta), Some(gamma), Some(a)) = (num(c, "theta"), num(c, "gamma"), c.accuracy()) else {
            continue;
        };
        acc.entry((OrdF64(theta), OrdF64(gamma))).or_default().push(a);
    }
    acc.into_iter()
        .filter_map(|((th, g), xs)| {
            let s = summarize(&xs)?;
            Some(HeatCell { theta: th.0, gamma: g.0, mean_acc: s.mean, sem: s.sem })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaPoint {
    pub series: String,
    pub gamma: f64,
    pub mean_acc: f64,
    pub sem: Option<f64>,
    pub n: usize,
}

/// Accuracy against γ, one series per combination of the other axes.
pub fn accuracy_vs_gamma(sweep: &SweepResult) -> Vec<GammaPoint> {
    sweep
        .groups
        .iter()
        .filter_map(|g| {
            let gamma = g.coords.get("gamma")?.as_f64()?;
            let s = g.accuracy.as_ref()?;
            Some(GammaPoint { series: series(&g.coords, &["gamma"]), gamma, mean_acc: s.mean, sem: s.sem, n: s.n })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRow {
    pub k: u32,
    pub baseline: Option<f64>,
    pub momentum: Option<f64>,
    pub delta: Option<f64>,
}

/// Mean loss at each repetition depth k; delta = momentum − baseline.
pub fn loss_by_depth(baseline: &BTreeMap<u32, f64>, momentum: &BTreeMap<u32, f64>) -> Vec<DepthRow> {
    let ks: std::collections::BTreeSet<u32> = baseline.keys().chain(momentum.keys()).copied().collect();
    ks.into_iter()
        .map(|k| {
            let (b, m) = (baseline.get(&k).copied(), momentum.get(&k).copied());
            DepthRow { k, baseline: b, momentum: m, delta: m.zip(b).map(|(m, b)| m - b) }
        })
        .collect()
}

/// Per-k loss averaged over the given evaluations (absent buckets skipped).
pub fn mean_loss_by_k<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> BTreeMap<u32, f64> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (&k, &l) in &r.loss_by_k {
            let e = acc.entry(k).or_default();
            e.0 += l;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Loss-by-depth tables of a sweep: every γ≠0 group against its matched
/// γ=0 group, keyed by the group's series label.
pub fn sweep_loss_by_depth(sweep: &SweepResult) -> Vec<(String, Vec<DepthRow>)> {
    let mut by_group: BTreeMap<String, (Option<f64>, Vec<&EvalReport>)> = BTreeMap::new();
    for c in &sweep.cells {
        let Some(m) = c.metrics.as_ref() else { continue };
        let Some(gamma) = num(c, "gamma") else { continue };
        let key = series(&c.coords, &["seed"]);
        by_group.entry(key).or_insert_with(|| (Some(gamma), Vec::new())).1.push(m);
    }
    let mut out = Vec::new();
    for (key, (gamma, evals)) in &by_group {
        if *gamma == Some(0.0) {
            continue;
        }
        let coords: BTreeMap<String, Value> = serde_json::from_str(key).expect("series is a JSON object");
        let mut base = coords.clone();
        base.insert("gamma".into(), Value::from(0.0));
        let Some((_, base_evals)) = by_group.get(&compact(&base)) else { continue };
        let rows = loss_by_depth(&mean_loss_by_k(base_evals.iter().copied()), &mean_loss_by_k(evals.iter().copied()));
        out.push((series(&coords, &[]), rows));
    }
    out
}

/// Scans `results_dir` recursively for saved results and writes the derived
/// tables into `out_dir`, returning the written paths in order.
pub fn report(results_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    collect_json(results_dir, out_dir, &mut files)?;
    let mut artifacts = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        if let Some(a) = Artifact::parse(&text) {
            artifacts.push((prefix(results_dir, &path), a));
        }
    }
    if artifacts.is_empty() {
        return Err(LabError::NoInput(format!("no results found under {}", results_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let mut written = Vec::new();
    let runs: Vec<(&String, &RunResult)> = artifacts
        .iter()
        .filter_map(|(p, a)| match a {
            Artifact::Run(r) => Some((p, r.as_ref())),
            _ => None,
        })
        .collect();
    for (name, a) in &artifacts {
        match a {
            Artifact::Run(r) => {
                let path = out_dir.join(format!("{name}_curve.csv"));
                r.write_curves_csv(&path)?;
                written.push(path);
                if r.model.momentum.gamma != 0.0 {
                    if let Some((_, base)) = runs.iter().find(|(_, b)| is_matched_baseline(b, r)) {
                        let rows = loss_by_depth(&base.final_metrics.loss_by_k, &r.final_metrics.loss_by_k);
                        written.push(write_depth(out_dir, name, &rows)?);
                    }
                }
            }
            Artifact::Sweep(s) => written.extend(write_sweep_tables(s, out_dir, name)?),
            Artifact::Bode(b) => {
                let path = out_dir.join(format!("{name}_bode.csv"));
                b.write_csv(&path)?;
                written.push(path);
            }
            Artifact::Stability(st) => {
                let path = out_dir.join(format!("{name}_stability.csv"));
                st.write_csv(&path)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn write_sweep_tables(s: &SweepResult, out_dir: &Path, name: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let curve = accuracy_vs_gamma(s);
    if !curve.is_empty() {
        let path = out_dir.join(format!("{name}_accuracy_vs_gamma.csv"));
        write_rows(
            &path,
            &["series", "gamma", "mean_acc", "sem", "n"],
            curve.iter().map(|p| vec![p.series.clone(), p.gamma.to_string(), p.mean_acc.to_string(), opt(p.sem), p.n.to_string()]),
        )?;
        written.push(path);
    }
    let heat = heatmap(s);
    if !heat.is_empty() {
        let path = out_dir.join(format!("{name}_heatmap.csv"));
        write_rows(
            &path,
            &["theta", "gamma", "mean_acc", "sem"],
            heat.iter().map(|h| vec![h.theta.to_string(), h.gamma.to_string(), h.mean_acc.to_string(), opt(h.sem)]),
        )?;
        written.push(path);
    }
    if !s.gains.is_empty() {
        let path = out_dir.join(format!("{name}_gains.csv"));
        write_rows(
            &path,
            &["series", "gamma", "seed", "accuracy", "baseline_accuracy", "gain"],
            s.gains.iter().map(|g| {
                vec![
                    series(&g.coords, &["gamma", "seed"]),
                    crate::sweeps::coord_text(g.coords.get("gamma")),
                    crate::sweeps::coord_text(g.coords.get("seed")),
                    opt(g.accuracy),
                    opt(g.baseline_accuracy),
                    opt(g.gain),
                ]
            }),
        )?;
        written.push(path);
    }
    for (i, (_, rows)) in sweep_loss_by_depth(s).iter().enumerate() {
        written.push(write_depth(out_dir, &format!("{name}_{i}"), rows)?);
    }
    Ok(written)
}

fn write_depth(out_dir: &Path, name: &str, rows: &[DepthRow]) -> Result<PathBuf> {
    let path = out_dir.join(format!("{name}_loss_by_depth.csv"));
    write_rows(
        &path,
        &["k", "baseline", "momentum", "delta"],
        rows.iter().map(|r| vec![r.k.to_string(), opt(r.baseline), opt(r.momentum), opt(r.delta)]),
    )?;
    Ok(path)
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let err = |e: csv::Error| LabError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Same task and model apart from γ = 0.
fn is_matched_baseline(base: &RunResult, run: &RunResult) -> bool {
    let mut m = run.model.clone();
    m.momentum.gamma = 0.0;
    base.model.momentum.gamma == 0.0 && base.task == run.task && base.model == m
}

fn collect_json(dir: &Path, skip: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| LabError::io(dir, e))?;
    let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p != skip {
                collect_json(&p, skip, out)?;
            }
        } else if p.extension().is_some_and(|e| e == "json") {
            out.push(p);
        }
    }
    Ok(())
}

/// File stem plus its parent directories below `root`, joined by `_`.
fn prefix(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path).with_extension("");
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("_")
}

fn num(c: &CellRecord, axis: &str) -> Option<f64> {
    c.coords.get(axis)?.as_f64()
}

fn series(coords: &BTreeMap<String, Value>, drop: &[&str]) -> String {
    let rest: BTreeMap<&String, &Value> = coords.iter().filter(|(k, _)| !drop.contains(&k.as_str())).collect();
    if rest.is_empty() {
        String::new()
    } else {
        serde_json::to_string(&rest).expect("json values serialize")
    }
}

fn compact(coords: &BTreeMap<String, Value>) -> String {
    series(coords, &["seed"])
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
