use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Reads `label,feat_1,…,feat_d` rows. There is no header row.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            line: 0,
            reason: e.to_string(),
        })?;
    let mut data: Option<Dataset> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parse_err = |reason: String| Error::Parse { line, reason };
        let mut fields = record.iter();
        let label_text = fields.next().unwrap_or_default();
        let label: usize = label_text
            .parse()
            .map_err(|_| parse_err(format!("label `{label_text}` is not a nonnegative integer")))?;
        let x = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(format!("feature `{f}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if x.is_empty() {
            return Err(parse_err("row has no features".into()));
        }
        let ds = data.get_or_insert_with(|| Dataset::empty(x.len()));
        if x.len() != ds.dim() {
            return Err(parse_err(format!("expected {} features, found {}", ds.dim(), x.len())));
        }
        ds.push(label, &x)?;
    }
    data.ok_or_else(|| Error::Parse {
        line: 0,
        reason: "file holds no samples".into(),
    })
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_io)?;
    for i in 0..data.len() {
        let mut row = Vec::with_capacity(data.dim() + 1);
        row.push(data.labels()[i].to_string());
        row.extend(data.x(i).iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("{other:?}")),
    }
}
