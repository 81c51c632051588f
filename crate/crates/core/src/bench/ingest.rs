use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::data::{stratified_split, ColumnKind, ColumnMeta, TabularDataset};
use crate::error::{Error, Result};

/// Default (train, val, test) split.
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.15, 0.15);

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "?" || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

/// Loads a headed CSV file. See [`read_csv`].
pub fn load_csv(path: &Path, label_column: &str, split: (f64, f64, f64), seed: u64) -> Result<TabularDataset> {
    let name = path
        .file_stem()
        .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    read_csv(std::fs::File::open(path)?, &name, label_column, split, seed)
}

/// Parses a headed CSV table into a preprocessed dataset.
///
/// A column is categorical when its first non-missing cell is not a number;
/// later non-numeric cells in a numeric column are parse errors. Categories
/// and labels are coded in order of first appearance (labels that all parse
/// as integers are ordered numerically). Every column is z-scored with
/// training-split statistics and missing cells become 0 afterwards.
pub fn read_csv<R: Read>(
    reader: R,
    name: &str,
    label_column: &str,
    split: (f64, f64, f64),
    seed: u64,
) -> Result<TabularDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Format(format!("label column {label_column:?} not in header {headers:?}")))?;
    let mut cells: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        cells.push(rec.iter().map(str::to_string).collect());
    }
    if cells.is_empty() {
        return Err(Error::Task(format!("{name}: no data rows")));
    }

    let raw_labels: Vec<&str> = cells.iter().map(|r| r[label_idx].as_str()).collect();
    if let Some(row) = raw_labels.iter().position(|l| is_missing(l)) {
        return Err(Error::Parse {
            row,
            column: label_column.to_string(),
            message: "missing label".into(),
        });
    }
    let mut classes: Vec<&str> = Vec::new();
    for &l in &raw_labels {
        if !classes.contains(&l) {
            classes.push(l);
        }
    }
    if classes.iter().all(|c| c.parse::<i64>().is_ok()) {
        classes.sort_by_key(|c| c.parse::<i64>().expect("checked integer"));
    }
    if classes.len() < 2 {
        return Err(Error::Task(format!(
            "{name}: label column {label_column:?} has a single class"
        )));
    }
    let code: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|l| code[l]).collect();

    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&j| j != label_idx).collect();
    let n = cells.len();
    let d = feature_cols.len();
    let mut x = vec![f64::NAN; n * d];
    let mut columns = Vec::with_capacity(d);
    for (fj, &j) in feature_cols.iter().enumerate() {
        let first = cells.iter().map(|r| r[j].as_str()).find(|c| !is_missing(c));
        let categorical = first.is_some_and(|c| c.parse::<f64>().is_err());
        let mut meta = ColumnMeta::numeric(headers[j].clone());
        if categorical {
            meta.kind = ColumnKind::Categorical;
        }
        for (r, row) in cells.iter().enumerate() {
            let cell = row[j].as_str();
            if is_missing(cell) {
                continue;
            }
            x[r * d + fj] = if categorical {
                match meta.categories.iter().position(|c| c == cell) {
                    Some(i) => i as f64,
                    None => {
                        meta.categories.push(cell.to_string());
                        (meta.categories.len() - 1) as f64
                    }
                }
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(Error::Parse {
                            row: r,
                            column: headers[j].clone(),
                            message: format!("{cell:?} is not a finite number"),
                        })
                    }
                }
            };
        }
        columns.push(meta);
    }

    let split = stratified_split(&labels, classes.len(), split, seed)?;
    let stat_rows = if split.train.is_empty() {
        (0..n).collect()
    } else {
        split.train.clone()
    };
    for (fj, meta) in columns.iter_mut().enumerate() {
        let vals: Vec<f64> = stat_rows
            .iter()
            .map(|&r| x[r * d + fj])
            .filter(|v| !v.is_nan())
            .collect();
        if !vals.is_empty() {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            meta.center = mean;
            meta.scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        for r in 0..n {
            let v = &mut x[r * d + fj];
            *v = if v.is_nan() { 0.0 } else { meta.encode(*v) };
        }
    }
    TabularDataset::new(name, x, d, labels, classes.len())?
        .with_columns(columns)?
        .with_split(split)
}

/// Writes `ds` back out as CSV in its preprocessed feature space, with the
/// label in a trailing `label` column.
pub fn write_csv<W: std::io::Write>(ds: &TabularDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ds.columns.iter().map(|c| c.name.clone()).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for r in 0..ds.n_rows() {
        let mut rec: Vec<String> = ds.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels()[r].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
