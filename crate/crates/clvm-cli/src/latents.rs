//! The latent CSV: one table feeding any plotting tool.
//!
//! Schema: `id,set,label,t1..tT,z1..zK`. Target rows carry both factor
//! blocks; background rows have no target-specific factors and leave the
//! `t` cells empty. Unknown labels are empty cells too.

use std::path::Path;

use clvm::error::{ClvmError, Result};
use nalgebra::DMatrix;

pub struct LatentTable {
    pub t: usize,
    pub k: usize,
    /// n×(t+k), target-specific block first.
    pub target: DMatrix<f64>,
    /// m×k.
    pub background: DMatrix<f64>,
    pub labels: Option<Vec<i64>>,
}

pub fn write_latents(path: &Path, table: &LatentTable) -> Result<()> {
    let (t, k) = (table.t, table.k);
    if table.target.ncols() != t + k || table.background.ncols() != k {
        return Err(ClvmError::Dimension(format!(
            "latent blocks {}×{} / {}×{} do not match t={t}, k={k}",
            table.target.nrows(),
            table.target.ncols(),
            table.background.nrows(),
            table.background.ncols()
        )));
    }
    if let Some(l) = &table.labels {
        if l.len() != table.target.nrows() {
            return Err(ClvmError::Dimension(format!(
                "{} labels for {} target rows",
                l.len(),
                table.target.nrows()
            )));
        }
    }
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "set".to_string(), "label".to_string()];
    header.extend((1..=t).map(|j| format!("t{j}")));
    header.extend((1..=k).map(|j| format!("z{j}")));
    writer
        .write_record(&header)
        .map_err(|e| ClvmError::Io(std::io::Error::other(e)))?;

    let fmt = |v: f64| format!("{v}");
    for i in 0..table.target.nrows() {
        let mut rec = vec![
            i.to_string(),
            "target".to_string(),
            table
                .labels
                .as_ref()
                .map(|l| l[i].to_string())
                .unwrap_or_default(),
        ];
        for j in 0..t + k {
            rec.push(fmt(table.target[(i, j)]));
        }
        writer
            .write_record(&rec)
            .map_err(|e| ClvmError::Io(std::io::Error::other(e)))?;
    }
    let n = table.target.nrows();
    for i in 0..table.background.nrows() {
        let mut rec = vec![(n + i).to_string(), "background".to_string(), String::new()];
        rec.extend(std::iter::repeat(String::new()).take(t));
        for j in 0..k {
            rec.push(fmt(table.background[(i, j)]));
        }
        writer
            .write_record(&rec)
            .map_err(|e| ClvmError::Io(std::io::Error::other(e)))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_latents(path: &Path) -> Result<LatentTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ClvmError::ParseRow {
            row: 0,
            msg: format!("bad header: {e}"),
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.len() < 3 || header[0] != "id" || header[1] != "set" || header[2] != "label" {
        return Err(ClvmError::ParseRow {
            row: 0,
            msg: "expected header starting id,set,label".into(),
        });
    }
    let t = header[3..]
        .iter()
        .take_while(|h| h.starts_with('t'))
        .count();
    let k = header.len() - 3 - t;
    for (j, h) in header[3..].iter().enumerate() {
        let expect = if j < t {
            format!("t{}", j + 1)
        } else {
            format!("z{}", j + 1 - t)
        };
        if **h != expect {
            return Err(ClvmError::ParseRow {
                row: 0,
                msg: format!("latent column {} named {h:?}, expected {expect:?}", j + 3),
            });
        }
    }

    let mut target_rows: Vec<Vec<f64>> = Vec::new();
    let mut background_rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<Option<i64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| ClvmError::ParseRow {
            row,
            msg: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(ClvmError::ParseRow {
                row,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let set = record.get(1).unwrap_or("");
        let parse_cell = |col: usize| -> Result<f64> {
            let s = record.get(col).unwrap_or("").trim();
            s.parse::<f64>().map_err(|_| ClvmError::ParseCell {
                row,
                col,
                msg: format!("not a number: {s:?}"),
            })
        };
        match set {
            "target" => {
                let mut vals = Vec::with_capacity(t + k);
                for col in 3..3 + t + k {
                    vals.push(parse_cell(col)?);
                }
                target_rows.push(vals);
                let label_field = record.get(2).unwrap_or("").trim();
                labels.push(if label_field.is_empty() {
                    None
                } else {
                    Some(label_field.parse::<i64>().map_err(|_| {
                        ClvmError::ParseCell {
                            row,
                            col: 2,
                            msg: format!("not an integer label: {label_field:?}"),
                        }
                    })?)
                });
            }
            "background" => {
                let mut vals = Vec::with_capacity(k);
                for col in 3 + t..3 + t + k {
                    vals.push(parse_cell(col)?);
                }
                background_rows.push(vals);
            }
            other => {
                return Err(ClvmError::ParseCell {
                    row,
                    col: 1,
                    msg: format!("set must be target or background, got {other:?}"),
                })
            }
        }
    }
    if target_rows.is_empty() {
        return Err(ClvmError::ParseRow {
            row: 1,
            msg: "latent file has no target rows".into(),
        });
    }
    let target = DMatrix::from_fn(target_rows.len(), t + k, |i, j| target_rows[i][j]);
    let background = DMatrix::from_fn(background_rows.len(), k, |i, j| background_rows[i][j]);
    let labels = if labels.iter().all(|l| l.is_some()) {
        Some(labels.into_iter().map(|l| l.unwrap()).collect())
    } else {
        None
    };
    Ok(LatentTable {
        t,
        k,
        target,
        background,
        labels,
    })
}
