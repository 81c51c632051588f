use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub algorithm: String,
    pub fold: usize,
    pub accuracy: f64,
    pub runtime_seconds: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub mean_accuracy: f64,
    pub mean_rank: f64,
    pub wins: f64,
    pub z_mean: f64,
    pub z_std: f64,
    pub z_median: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    /// Filled by [`ExperimentReport::refresh`]; never persisted.
    pub cache: Option<BTreeMap<String, AlgorithmSummary>>,
}

impl ExperimentReport {
    pub fn new(rows: Vec<ResultRow>) -> Self {
        Self { rows, cache: None }
    }

    pub fn algorithms(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| r.algorithm.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn datasets(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| r.dataset.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn to_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn from_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("report line {}: {e}", i + 1)))?);
        }
        Ok(Self::new(rows))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.to_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Appends one row to a JSON-lines file.
    pub fn append(path: &Path, row: &ResultRow) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut line = serde_json::to_string(row)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
        Ok(())
    }

    /// Recomputes the aggregation cache from the rows.
    pub fn refresh(&mut self) -> Result<&BTreeMap<String, AlgorithmSummary>> {
        let ranks = super::stats::mean_rank_and_wins(self)?;
        let z = super::stats::zscore_table(self);
        let mut out = BTreeMap::new();
        for alg in self.algorithms() {
            let accs: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.algorithm == alg)
                .map(|r| r.accuracy)
                .collect();
            let (mean_rank, wins) = ranks[&alg];
            let zs = &z.summary[&alg];
            out.insert(
                alg,
                AlgorithmSummary {
                    mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                    mean_rank,
                    wins,
                    z_mean: zs.mean,
                    z_std: zs.std,
                    z_median: zs.median,
                },
            );
        }
        self.cache = Some(out);
        Ok(self.cache.as_ref().expect("just set"))
    }
}
