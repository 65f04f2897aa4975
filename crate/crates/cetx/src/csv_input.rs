//! Comma-separated windows: one row per window holding the group id, the
//! label, then `C·L` samples in channel-major order. No header row.

use std::path::Path;

use cetx_core::data::{DatasetMeta, WindowedDataset};

use crate::error::{format_err, io_err, Error, Result};

pub fn load_csv(path: &Path, meta: &DatasetMeta) -> Result<WindowedDataset> {
    meta.validate().map_err(|e| format_err(path, e.to_string()))?;
    let width = meta.channels * meta.window_length;
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let row_err = |row: usize, detail: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        detail,
    };

    let mut windows = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| row_err(row, e.to_string()))?;
        if rec.len() != width + 2 {
            return Err(row_err(
                row,
                format!("{} sample values, expected {width} ({} x {})", rec.len().saturating_sub(2), meta.channels, meta.window_length),
            ));
        }
        let int = |col: usize, what: &str| -> Result<u16> {
            rec[col]
                .parse::<u16>()
                .map_err(|_| row_err(row, format!("{what} `{}` is not an integer in 0..=65535", &rec[col])))
        };
        let group = int(0, "group")?;
        let label = int(1, "label")?;
        if label as usize >= meta.num_classes {
            return Err(row_err(row, format!("label {label} out of range for {} classes", meta.num_classes)));
        }
        for (j, field) in rec.iter().enumerate().skip(2) {
            let v: f32 = field
                .parse()
                .map_err(|_| row_err(row, format!("column {}: `{field}` is not a number", j + 1)))?;
            windows.push(v);
        }
        groups.push(group);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(format_err(path, "no rows"));
    }
    WindowedDataset::new(windows, labels, groups, meta.clone()).map_err(|e| format_err(path, e.to_string()))
}
