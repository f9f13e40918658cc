//! Declarative experiment grids run in parallel, persisted incrementally
//! and aggregated into per-group statistics.
//!
//! Grid file (TOML):
//!
//! ```toml
//! name = "beta-mini"
//! base_seed = 0
//!
//! [grid]            # any subset of the named axes
//! gamma = [0.0, 0.5]
//! beta = [0.0, 0.9]
//! seed = [0, 1, 2]
//!
//! [fixed]           # an experiment config, see `config`
//! [fixed.model]
//! ...
//! ```
//!
//! Axes: `gamma`, `theta` (monochromatic encoding), `beta`, `n_layers`,
//! `chain_len` (assoc-recall pairs or anchored-chain length), `task`
//! (task tables), `placement`, `encoding` (encoding tables), `seed`
//! (replicate index).

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::encoding::{EncodingSpec, Placement};
use crate::error::{LabError, Result};
use crate::seeds::derive_seed;
use crate::tasks::TaskSpec;
use crate::training::{detect_critical_gamma, train, EvalReport};

pub const CELLS_FILE: &str = "cells.jsonl";
pub const RESULT_FILE: &str = "sweep.json";
pub const CSV_FILE: &str = "sweep.csv";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axes {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gamma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n_layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chain_len: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub task: Vec<TaskSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub placement: Vec<Placement>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub encoding: Vec<EncodingSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed: Vec<u64>,
}

impl Axes {
    /// Non-empty axes in application order, values as JSON.
    fn named(&self) -> Result<Vec<(&'static str, Vec<Value>)>> {
        fn vals<T: Serialize>(xs: &[T]) -> Result<Vec<Value>> {
            xs.iter().map(|x| serde_json::to_value(x).map_err(LabError::from)).collect()
        }
        let all = [
            ("task", vals(&self.task)?),
            ("encoding", vals(&self.encoding)?),
            ("placement", vals(&self.placement)?),
            ("gamma", vals(&self.gamma)?),
            ("theta", vals(&self.theta)?),
            ("beta", vals(&self.beta)?),
            ("n_layers", vals(&self.n_layers)?),
            ("chain_len", vals(&self.chain_len)?),
            ("seed", vals(&self.seed)?),
        ];
        Ok(all.into_iter().filter(|(_, v)| !v.is_empty()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub name: String,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub grid: Axes,
    pub fixed: ExperimentConfig,
}

/// One fully resolved run of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub coords: BTreeMap<String, Value>,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl SweepGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(LabError::Config("sweep name is empty".into()));
        }
        if !self.grid.theta.is_empty() && !self.grid.encoding.is_empty() {
            return Err(LabError::Config("grid axes theta and encoding both set the encoding".into()));
        }
        for cell in self.cells()? {
            cell.config.validate().map_err(|e| LabError::Config(format!("cell {:?}: {e}", cell.coords)))?;
        }
        Ok(())
    }

    pub fn size(&self) -> Result<usize> {
        Ok(self.grid.named()?.iter().map(|(_, v)| v.len()).product())
    }

    /// Cartesian product in row-major axis order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let axes = self.grid.named()?;
        let total: usize = axes.iter().map(|(_, v)| v.len()).product();
        let mut out = Vec::with_capacity(total);
        for index in 0..total {
            let mut rem = index;
            let mut picks = vec![0; axes.len()];
            for (i, (_, vals)) in axes.iter().enumerate().rev() {
                picks[i] = rem % vals.len();
                rem /= vals.len();
            }
            let mut cfg = self.fixed.clone();
            let mut coords = BTreeMap::new();
            let mut replicate = 0u64;
            for ((name, vals), &k) in axes.iter().zip(&picks) {
                let v = &vals[k];
                apply_axis(&mut cfg, name, v, &mut replicate)?;
                coords.insert(name.to_string(), v.clone());
            }
            let seed = cell_seed(&self.name, self.base_seed, &cfg, replicate)?;
            out.push(Cell { index, coords, seed, config: cfg.with_seed(seed) });
        }
        Ok(out)
    }
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: &str, v: &Value, replicate: &mut u64) -> Result<()> {
    let num = || v.as_f64().ok_or_else(|| LabError::Config(format!("axis {axis} needs numbers")));
    let int = || v.as_u64().ok_or_else(|| LabError::Config(format!("axis {axis} needs integers")));
    match axis {
        "task" => cfg.task = serde_json::from_value(v.clone())?,
        "encoding" => cfg.model.encoding = serde_json::from_value(v.clone())?,
        "placement" => cfg.model.placement = serde_json::from_value(v.clone())?,
        "gamma" => cfg.model.momentum.gamma = num()?,
        "theta" => cfg.model.encoding = EncodingSpec::Monochromatic { theta: num()? },
        "beta" => cfg.model.momentum.beta = num()?,
        "n_layers" => cfg.model.n_layers = int()? as usize,
        "chain_len" => {
            let n = int()? as usize;
            match &mut cfg.task {
                TaskSpec::AssocRecall { n_pairs, .. } => *n_pairs = n,
                TaskSpec::AnchoredChains { chain_len, .. } => *chain_len = n,
                other => {
                    return Err(LabError::Config(format!("chain_len axis does not apply to {}", other.tag())));
                }
            }
        }
        "seed" => *replicate = int()?,
        _ => return Err(LabError::Config(format!("unknown axis {axis}"))),
    }
    Ok(())
}

/// Hash of the sweep name, base seed, resolved run config and replicate:
/// a cell keeps its seed when unrelated axes are added.
fn cell_seed(name: &str, base: u64, cfg: &ExperimentConfig, replicate: u64) -> Result<u64> {
    let canonical = serde_json::to_string(&cfg.clone().with_seed(0))?;
    Ok(derive_seed(base, &format!("{name}\n{canonical}\n{replicate}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub index: usize,
    pub coords: BTreeMap<String, Value>,
    pub seed: u64,
    pub status: CellStatus,
    pub error_class: Option<String>,
    pub error: Option<String>,
    pub metrics: Option<EvalReport>,
    pub final_train_loss: Option<f64>,
    pub param_count: Option<usize>,
}

impl CellRecord {
    pub fn accuracy(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.accuracy)
    }
}

pub fn run_cell(cell: &Cell) -> CellRecord {
    let c = &cell.config;
    let base = CellRecord {
        index: cell.index,
        coords: cell.coords.clone(),
        seed: cell.seed,
        status: CellStatus::Ok,
        error_class: None,
        error: None,
        metrics: None,
        final_train_loss: None,
        param_count: None,
    };
    match train(&c.model, &c.task, &c.train) {
        Ok(r) => CellRecord {
            final_train_loss: r.curves.last().map(|p| p.train_loss),
            param_count: Some(r.param_count),
            metrics: Some(r.final_metrics),
            ..base
        },
        Err(e) => CellRecord {
            status: CellStatus::Failed,
            error_class: Some(e.class().to_string()),
            error: Some(e.to_string()),
            ..base
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub std: Option<f64>,
    pub sem: Option<f64>,
}

pub fn summarize(xs: &[f64]) -> Option<Summary> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(Summary { n, mean, std, sem: std.map(|s| s / (n as f64).sqrt()) })
}

/// Cells sharing every coordinate except the replicate seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub coords: BTreeMap<String, Value>,
    pub n_failed: usize,
    pub accuracy: Option<Summary>,
    #[serde(rename = "L_rep")]
    pub l_rep: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub coords: BTreeMap<String, Value>,
    pub accuracy: Option<f64>,
    pub baseline_accuracy: Option<f64>,
    /// accuracy − matched baseline accuracy; absent without a baseline.
    pub gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalGamma {
    pub coords: BTreeMap<String, Value>,
    pub gamma_c: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    /// Group coordinates (without seed) of the momentum side.
    pub coords: BTreeMap<String, Value>,
    pub cohens_d: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub name: String,
    pub grid: SweepGrid,
    pub cells: Vec<CellRecord>,
    pub groups: Vec<GroupStats>,
    pub gains: Vec<GainRow>,
    pub critical_gamma: Vec<CriticalGamma>,
    pub effect_sizes: Vec<EffectSize>,
    pub n_failed: usize,
}

/// Runs every cell of `grid` on `parallelism` worker threads. With `out`
/// set, records stream to `cells.jsonl` as they finish and the final
/// aggregate is written atomically as `sweep.json` plus `sweep.csv`.
pub fn run_sweep(grid: &SweepGrid, parallelism: usize, out: Option<&Path>) -> Result<SweepResult> {
    if parallelism == 0 {
        return Err(LabError::Config("parallelism must be ≥ 1".into()));
    }
    grid.validate()?;
    let cells = grid.cells()?;
    let mut sink = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
            let path = dir.join(CELLS_FILE);
            let f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| LabError::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    let (tx, rx) = mpsc::channel::<CellRecord>();
    let mut records = Vec::with_capacity(cells.len());
    std::thread::scope(|s| -> Result<()> {
        let cells = &cells;
        let pool = &pool;
        s.spawn(move || {
            pool.install(|| {
                cells.par_iter().for_each_with(tx, |tx, cell| {
                    // the receiver only disappears if the aggregator failed
                    let _ = tx.send(run_cell(cell));
                })
            })
        });
        for rec in rx {
            if let Some((f, path)) = sink.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(|e| LabError::io(&*path, e))?;
                f.flush().map_err(|e| LabError::io(&*path, e))?;
            }
            records.push(rec);
        }
        Ok(())
    })?;
    let result = aggregate(grid, records)?;
    if let Some(dir) = out {
        write_result(&result, dir)?;
    }
    if result.n_failed * 2 > result.cells.len() {
        return Err(LabError::SweepFailed { failed: result.n_failed, total: result.cells.len() });
    }
    Ok(result)
}

/// Rebuilds the aggregate from an append-only cell log.
pub fn aggregate_from_log(grid: &SweepGrid, path: &Path) -> Result<SweepResult> {
    let f = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    aggregate(grid, records)
}

/// Orders records by cell index (keeping the latest record per index) and
/// derives group statistics, gains over γ=0, Cohen's d and γ_c.
pub fn aggregate(grid: &SweepGrid, records: Vec<CellRecord>) -> Result<SweepResult> {
    let mut by_index: BTreeMap<usize, CellRecord> = BTreeMap::new();
    for r in records {
        by_index.insert(r.index, r);
    }
    let cells: Vec<CellRecord> = by_index.into_values().collect();
    let n_failed = cells.iter().filter(|c| c.status == CellStatus::Failed).count();

    let mut groups: BTreeMap<String, (BTreeMap<String, Value>, Vec<&CellRecord>)> = BTreeMap::new();
    for c in &cells {
        let key_coords = without(&c.coords, &["seed"]);
        let key = serde_json::to_string(&key_coords)?;
        groups.entry(key).or_insert_with(|| (key_coords, Vec::new())).1.push(c);
    }
    let group_stats: Vec<GroupStats> = groups
        .values()
        .map(|(coords, members)| {
            let acc: Vec<f64> = members.iter().filter_map(|c| c.accuracy()).collect();
            let rep: Vec<f64> = members.iter().filter_map(|c| c.metrics.as_ref()?.l_rep).collect();
            GroupStats {
                coords: coords.clone(),
                n_failed: members.iter().filter(|c| c.status == CellStatus::Failed).count(),
                accuracy: summarize(&acc),
                l_rep: summarize(&rep),
            }
        })
        .collect();

    let has_gamma = !grid.grid.gamma.is_empty();
    let gains = if has_gamma { gain_table(&cells, "gamma", &Value::from(0.0)) } else { Vec::new() };
    let effect_sizes = if has_gamma { effect_sizes(&group_stats, &cells)? } else { Vec::new() };
    let critical_gamma = if grid.grid.gamma.len() >= 3 { critical_gammas(&group_stats)? } else { Vec::new() };
    Ok(SweepResult {
        name: grid.name.clone(),
        grid: grid.clone(),
        cells,
        groups: group_stats,
        gains,
        critical_gamma,
        effect_sizes,
        n_failed,
    })
}

fn without(coords: &BTreeMap<String, Value>, drop: &[&str]) -> BTreeMap<String, Value> {
    coords.iter().filter(|(k, _)| !drop.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Accuracy of each cell minus that of the cell matching it in every other
/// coordinate but with `axis` at `baseline`.
pub fn gain_table(cells: &[CellRecord], axis: &str, baseline: &Value) -> Vec<GainRow> {
    let lookup: BTreeMap<String, Option<f64>> = cells
        .iter()
        .filter(|c| c.coords.get(axis).is_some_and(|v| same_value(v, baseline)))
        .map(|c| (key_without(&c.coords, axis), c.accuracy()))
        .collect();
    cells
        .iter()
        .map(|c| {
            let base = lookup.get(&key_without(&c.coords, axis)).copied().flatten();
            let acc = c.accuracy();
            GainRow { coords: c.coords.clone(), accuracy: acc, baseline_accuracy: base, gain: acc.zip(base).map(|(a, b)| a - b) }
        })
        .collect()
}

fn key_without(coords: &BTreeMap<String, Value>, axis: &str) -> String {
    serde_json::to_string(&without(coords, &[axis])).expect("json values serialize")
}

fn same_value(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

fn effect_sizes(groups: &[GroupStats], cells: &[CellRecord]) -> Result<Vec<EffectSize>> {
    let accs = |coords: &BTreeMap<String, Value>| -> Vec<f64> {
        cells.iter().filter(|c| without(&c.coords, &["seed"]) == *coords).filter_map(|c| c.accuracy()).collect()
    };
    let mut out = Vec::new();
    for g in groups {
        let Some(gamma) = g.coords.get("gamma") else { continue };
        if same_value(gamma, &Value::from(0.0)) {
            continue;
        }
        let mut base_coords = g.coords.clone();
        base_coords.insert("gamma".into(), Value::from(0.0));
        let (a, b) = (accs(&g.coords), accs(&base_coords));
        out.push(EffectSize { coords: g.coords.clone(), cohens_d: cohens_d(&a, &b).ok() });
    }
    Ok(out)
}

fn critical_gammas(groups: &[GroupStats]) -> Result<Vec<CriticalGamma>> {
    let mut curves: BTreeMap<String, (BTreeMap<String, Value>, Vec<(f64, f64)>)> = BTreeMap::new();
    for g in groups {
        let (Some(gamma), Some(acc)) = (g.coords.get("gamma").and_then(Value::as_f64), g.accuracy.as_ref()) else {
            continue;
        };
        let rest = without(&g.coords, &["gamma"]);
        let key = serde_json::to_string(&rest)?;
        curves.entry(key).or_insert_with(|| (rest, Vec::new())).1.push((gamma, acc.mean));
    }
    Ok(curves
        .into_values()
        .map(|(coords, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            match detect_critical_gamma(&pts) {
                Ok(g) => CriticalGamma { coords, gamma_c: Some(g), note: None },
                Err(e) => CriticalGamma { coords, gamma_c: None, note: Some(e.to_string()) },
            }
        })
        .collect())
}

/// Cohen's d with the pooled standard deviation
/// √(((n_a−1)s_a² + (n_b−1)s_b²)/(n_a+n_b−2)).
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(LabError::Contract(format!("groups of {} and {}; need ≥ 2 each", a.len(), b.len())));
    }
    let (sa, sb) = (summarize(a).expect("non-empty"), summarize(b).expect("non-empty"));
    let (va, vb) = (sa.std.expect("n ≥ 2").powi(2), sb.std.expect("n ≥ 2").powi(2));
    let pooled = pooled_std(a.len(), va, b.len(), vb);
    // spread at rounding level of the means counts as none
    if pooled <= 1e-12 * (sa.mean.abs() + sb.mean.abs()) || pooled == 0.0 {
        if sa.mean == sb.mean {
            return Ok(0.0);
        }
        return Err(LabError::Degenerate("zero pooled standard deviation".into()));
    }
    Ok((sa.mean - sb.mean) / pooled)
}

pub fn pooled_std(na: usize, var_a: f64, nb: usize, var_b: f64) -> f64 {
    (((na - 1) as f64 * var_a + (nb - 1) as f64 * var_b) / (na + nb - 2) as f64).sqrt()
}

fn write_result(result: &SweepResult, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(result)?;
    atomic_write(&dir.join(RESULT_FILE), json.as_bytes())?;
    let csv_bytes = sweep_csv(result)?;
    atomic_write(&dir.join(CSV_FILE), &csv_bytes)
}

/// Writes via a sibling temp file and rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| LabError::io(&tmp, e))?;
        f.sync_all().map_err(|e| LabError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

/// One row per cell: coordinates, then status and final metrics.
pub fn sweep_csv(result: &SweepResult) -> Result<Vec<u8>> {
    let axes: Vec<String> = result.grid.grid.named()?.iter().map(|(n, _)| n.to_string()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = axes.clone();
    header.extend(
        ["cell", "cell_seed", "status", "error_class", "accuracy", "mean_loss", "L_new", "L_second", "L_rep", "gap"]
            .map(String::from),
    );
    w.write_record(&header).map_err(|e| LabError::Serde(e.to_string()))?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for c in &result.cells {
        let mut row: Vec<String> = axes.iter().map(|a| coord_text(c.coords.get(a))).collect();
        let m = c.metrics.as_ref();
        row.extend([
            c.index.to_string(),
            c.seed.to_string(),
            serde_json::to_value(c.status)?.as_str().unwrap_or_default().to_string(),
            c.error_class.clone().unwrap_or_default(),
            opt(m.map(|m| m.accuracy)),
            opt(m.map(|m| m.mean_loss)),
            opt(m.and_then(|m| m.l_new)),
            opt(m.and_then(|m| m.l_second)),
            opt(m.and_then(|m| m.l_rep)),
            opt(m.and_then(|m| m.gap)),
        ]);
        w.write_record(&row).map_err(|e| LabError::Serde(e.to_string()))?;
    }
    w.into_inner().map_err(|e| LabError::Serde(e.to_string()))
}

/// Scalars print bare; tables print as compact JSON.
pub fn coord_text(v: Option<&Value>) -> String {
    match v {
        None => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(other) => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = r#"
name = "tiny"
base_seed = 3

[grid]
gamma = [0.0, 0.5]
seed = [0, 1]

[fixed.model]
vocab = 8
d_model = 8
n_heads = 2
n_layers = 1
d_ff = 16
max_seq = 4

[fixed.task]
kind = "assoc_recall"
n_pairs = 1
key_lo = 0
key_hi = 4
val_lo = 4
val_hi = 8

[fixed.train]
duration = { mode = "steps", steps = 3 }
batch_size = 4
lr = 1e-2
eval_samples = 8
"#;

    fn record(index: usize, gamma: f64, seed: u64, acc: Option<f64>) -> CellRecord {
        let mut coords = BTreeMap::new();
        coords.insert("gamma".to_string(), Value::from(gamma));
        coords.insert("seed".to_string(), Value::from(seed));
        CellRecord {
            index,
            coords,
            seed: 0,
            status: if acc.is_some() { CellStatus::Ok } else { CellStatus::Failed },
            error_class: None,
            error: None,
            metrics: acc.map(|a| EvalReport { accuracy: a, ..EvalReport::default() }),
            final_train_loss: None,
            param_count: None,
        }
    }

    #[test]
    fn grid_cells_and_seeds() {
        let g = SweepGrid::from_toml_str(GRID).unwrap();
        assert_eq!(g.size().unwrap(), 4);
        let cells = g.cells().unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].coords["gamma"], Value::from(0.0));
        assert_eq!(cells[1].coords["seed"], Value::from(1));
        assert_eq!(cells[2].config.model.momentum.gamma, 0.5);
        let seeds: std::collections::BTreeSet<u64> = cells.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn adding_an_axis_keeps_existing_cell_seeds() {
        let g = SweepGrid::from_toml_str(GRID).unwrap();
        let wider = SweepGrid::from_toml_str(&GRID.replace("seed = [0, 1]", "seed = [0, 1]\nn_layers = [1, 2]")).unwrap();
        let before: Vec<u64> = g.cells().unwrap().iter().map(|c| c.seed).collect();
        let after: Vec<u64> = wider
            .cells()
            .unwrap()
            .iter()
            .filter(|c| c.coords["n_layers"] == Value::from(1))
            .map(|c| c.seed)
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn unknown_axis_rejected_by_name() {
        let bad = GRID.replace("gamma = [0.0, 0.5]", "gama = [0.0]");
        let err = SweepGrid::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("gama"), "{err}");
    }

    #[test]
    fn single_cell_equals_direct_train() {
        let text = GRID.replace("gamma = [0.0, 0.5]\nseed = [0, 1]", "gamma = [0.5]");
        let g = SweepGrid::from_toml_str(&text).unwrap();
        let cell = &g.cells().unwrap()[0];
        let r = run_sweep(&g, 1, None).unwrap();
        let c = &cell.config;
        let direct = train(&c.model, &c.task, &c.train).unwrap();
        assert_eq!(r.cells[0].metrics.as_ref(), Some(&direct.final_metrics));
    }

    #[test]
    fn parallelism_does_not_change_results() {
        let g = SweepGrid::from_toml_str(GRID).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d4 = tempfile::tempdir().unwrap();
        run_sweep(&g, 1, Some(d1.path())).unwrap();
        run_sweep(&g, 4, Some(d4.path())).unwrap();
        let a = std::fs::read(d1.path().join(RESULT_FILE)).unwrap();
        let b = std::fs::read(d4.path().join(RESULT_FILE)).unwrap();
        assert_eq!(String::from_utf8_lossy(&a), String::from_utf8_lossy(&b));
        let ca = std::fs::read(d1.path().join(CSV_FILE)).unwrap();
        assert_eq!(ca, std::fs::read(d4.path().join(CSV_FILE)).unwrap());
        // the append-only log rebuilds the same aggregate
        let rebuilt = aggregate_from_log(&g, &d4.path().join(CELLS_FILE)).unwrap();
        assert_eq!(serde_json::to_string_pretty(&rebuilt).unwrap(), String::from_utf8(b).unwrap());
    }

    #[test]
    fn failures_are_recorded_and_majority_failure_errors() {
        let text = GRID.replace("lr = 1e-2", "lr = 1e300\ngrad_clip = 0.0").replace("steps = 3", "steps = 30");
        let g = SweepGrid::from_toml_str(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        match run_sweep(&g, 2, Some(dir.path())) {
            Err(LabError::SweepFailed { failed, total }) => assert!(failed * 2 > total),
            other => panic!("expected sweep failure, got {other:?}"),
        }
        let saved: SweepResult =
            serde_json::from_slice(&std::fs::read(dir.path().join(RESULT_FILE)).unwrap()).unwrap();
        let classes: Vec<_> = saved.cells.iter().map(|c| c.error_class.clone()).collect();
        assert!(classes.iter().all(|c| c.as_deref() == Some("diverged")), "{classes:?}");
    }

    #[test]
    fn cohens_d_cases() {
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        // equal spread, means one pooled std apart
        let b = [0.0, 1.0, 2.0];
        let a: Vec<f64> = b.iter().map(|x| x + 1.0).collect();
        assert!((cohens_d(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cohens_d(&[1.0, 1.0], &[2.0, 2.0]), Err(LabError::Degenerate(_))));
        assert!(cohens_d(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn cohens_d_reported_example_within_rounding() {
        // two-point groups with means 0.291 / 0.098 and pooled std 0.183
        let s = 0.183 / 2f64.sqrt();
        let a = [0.291 - s, 0.291 + s];
        let b = [0.098 - s, 0.098 + s];
        let d = cohens_d(&a, &b).unwrap();
        assert!((d - 0.193 / 0.183).abs() < 1e-12);
        // the printed 1.053 lies inside the range the 3-decimal inputs allow
        let (lo, hi) = ((0.193 - 0.001) / 0.1835, (0.193 + 0.001) / 0.1825);
        assert!(lo <= 1.053 && 1.053 <= hi);
    }

    #[test]
    fn gains_subtract_matched_baseline() {
        let cells = vec![
            record(0, 0.0, 0, Some(0.1)),
            record(1, 0.0, 1, Some(0.2)),
            record(2, 0.5, 0, Some(0.6)),
            record(3, 0.5, 1, None),
        ];
        let rows = gain_table(&cells, "gamma", &Value::from(0.0));
        assert_eq!(rows[0].gain, Some(0.0));
        assert!((rows[2].gain.unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(rows[3].gain, None);
        // recount: gains sum to the sum of accuracy differences over matched pairs
        let total: f64 = rows.iter().filter_map(|r| r.gain).sum();
        assert!((total - (0.6 - 0.1)).abs() < 1e-15);
        let flat = vec![record(0, 0.0, 0, Some(0.3)), record(1, 0.5, 0, Some(0.3))];
        assert!(gain_table(&flat, "gamma", &Value::from(0.0)).iter().all(|r| r.gain == Some(0.0)));
    }

    #[test]
    fn summary_stats() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.sem.unwrap() - s.std.unwrap() / 2.0).abs() < 1e-15);
        assert!(summarize(&[]).is_none());
        assert!(summarize(&[1.0]).unwrap().std.is_none());
    }
}
