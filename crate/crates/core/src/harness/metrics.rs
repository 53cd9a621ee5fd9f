use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::Stats;
use crate::error::{Error, Result};

/// One evaluation point of one seed.
///
/// Wall-clock fields are kept out of the metrics file so that reruns are
/// byte-identical; they go to the companion timing file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub env_steps: u64,
    pub mean_return: f64,
    pub std_return: f64,
    /// Gradient updates since the previous record.
    pub updates: u64,
    /// Mean of each loss since the previous record.
    pub losses: BTreeMap<String, f64>,
    /// Mean and `_max` of each pre-clip gradient global norm since the
    /// previous record.
    pub grad_norms: BTreeMap<String, f64>,
    /// Everything else the learner reports (temperatures, entropies, ...).
    pub other: BTreeMap<String, f64>,
    #[serde(skip)]
    pub wall_ms: f64,
    /// Environment actions per second of collection time (policy inference
    /// plus environment stepping).
    #[serde(skip)]
    pub actions_per_sec: f64,
}

impl MetricRecord {
    /// Flat view of every scalar the record carries, keyed as in the
    /// summary CSV.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("mean_return".to_string(), self.mean_return);
        m.insert("updates".to_string(), self.updates as f64);
        for (k, v) in self.losses.iter().chain(&self.grad_norms).chain(&self.other) {
            m.insert(k.clone(), *v);
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub env_steps: u64,
    pub wall_ms: f64,
    pub actions_per_sec: f64,
}

/// Running sums of learner statistics between evaluations.
#[derive(Clone, Debug, Default)]
pub struct StatAccumulator {
    sums: BTreeMap<String, (f64, u64, f64)>,
    updates: u64,
}

impl StatAccumulator {
    pub fn add_update(&mut self, stats: &Stats) {
        self.updates += 1;
        self.add(stats);
    }

    /// Statistics not tied to a gradient update (e.g. a temperature step).
    pub fn add(&mut self, stats: &Stats) {
        for (k, &v) in stats {
            let e = self.sums.entry(k.clone()).or_insert((0.0, 0, f64::NEG_INFINITY));
            e.0 += v;
            e.1 += 1;
            // NaN propagates into the max so blow-ups stay visible
            e.2 = if v.is_nan() || e.2.is_nan() { f64::NAN } else { e.2.max(v) };
        }
    }

    /// Fills the learner fields of `rec` and resets.
    pub fn drain_into(&mut self, rec: &mut MetricRecord) {
        rec.updates = self.updates;
        for (k, (sum, n, max)) in std::mem::take(&mut self.sums) {
            let mean = sum / n as f64;
            if k.contains("grad_norm") {
                rec.grad_norms.insert(k.clone(), mean);
                if !k.ends_with("_max") {
                    rec.grad_norms.insert(format!("{}_max", k), max);
                }
            } else if k.contains("loss") {
                rec.losses.insert(k, mean);
            } else {
                rec.other.insert(k, mean);
            }
        }
        self.updates = 0;
    }
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub(crate) fn write_json_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    writeln!(w, "{}", line).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::InvalidArgument(format!("{}: bad metrics line: {}", path.display(), e)))?,
        );
    }
    Ok(out)
}

pub fn metrics_file_name(seed: u64) -> String {
    format!("seed_{}.jsonl", seed)
}

pub fn timing_file_name(seed: u64) -> String {
    format!("seed_{}.timing.jsonl", seed)
}

pub fn checkpoint_file_name(seed: u64) -> String {
    format!("seed_{}.ckpt", seed)
}

pub const SUMMARY_FILE: &str = "summary.csv";

/// Per-seed metrics files in `dir`, ordered by seed.
pub fn metrics_files(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(seed) = name
            .strip_prefix("seed_")
            .and_then(|r| r.strip_suffix(".jsonl"))
            .and_then(|r| r.parse::<u64>().ok())
        {
            out.push((seed, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Cross-seed table: one row per evaluation index with the mean and
/// population std of `mean_return` across seeds, then the cross-seed mean of
/// every other scalar.
pub fn write_summary(path: &Path, per_seed: &[Vec<MetricRecord>]) -> Result<()> {
    let rows = per_seed.iter().map(|r| r.len()).min().unwrap_or(0);
    if per_seed.iter().any(|r| r.len() != rows) {
        return Err(Error::InvalidArgument("seeds have different numbers of evaluation points".into()));
    }
    let mut keys = BTreeSet::new();
    for rec in per_seed.iter().flatten() {
        keys.extend(rec.scalars().into_keys());
    }
    keys.remove("mean_return");
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidArgument(format!("{}: {}", path.display(), e)))?;
    let mut header = vec!["env_steps".to_string(), "mean_return".into(), "std_return".into(), "n_seeds".into()];
    header.extend(keys.iter().cloned());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("{}: {}", path.display(), e));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..rows {
        let recs: Vec<&MetricRecord> = per_seed.iter().map(|r| &r[i]).collect();
        let returns: Vec<f64> = recs.iter().map(|r| r.mean_return).collect();
        let (m, s) = mean_std(&returns);
        let mut row = vec![recs[0].env_steps.to_string(), m.to_string(), s.to_string(), recs.len().to_string()];
        for k in &keys {
            let vals: Vec<f64> = recs.iter().filter_map(|r| r.scalars().get(k).copied()).collect();
            row.push(if vals.is_empty() { String::new() } else { mean_std(&vals).0.to_string() });
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Summary rows as `(header, rows)` with empty cells as `None`.
pub fn read_summary(path: &Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("{}: {}", path.display(), e));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(rec.iter().map(|c| c.parse::<f64>().ok()).collect());
    }
    Ok((header, rows))
}
