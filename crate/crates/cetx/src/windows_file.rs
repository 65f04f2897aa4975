//! `CETD` windows files.
//!
//! Layout: magic, u32 version, u32 N, C, L, num_classes, num_groups, N·C·L
//! little-endian f32 samples, N u16 labels, N u16 groups, CRC32 of all
//! preceding bytes. Class names and sample rate are not stored.

use std::path::Path;

use cetx_core::data::{DatasetMeta, WindowedDataset};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{format_err, Result};

const MAGIC: &[u8; 4] = b"CETD";
const VERSION: u32 = 1;

pub fn save_windows_file(ds: &WindowedDataset, path: &Path) -> Result<()> {
    let mut w = Writer::new(MAGIC, VERSION);
    let num_groups = ds.groups().iter().max().map_or(0, |&g| g as u32 + 1);
    for v in [
        ds.len() as u32,
        ds.channels() as u32,
        ds.window_length() as u32,
        ds.num_classes() as u32,
        num_groups,
    ] {
        w.u32(v);
    }
    for &v in ds.windows() {
        w.f32(v);
    }
    for &y in ds.labels() {
        w.u16(y);
    }
    for &g in ds.groups() {
        w.u16(g);
    }
    w.finish(path)
}

pub fn load_windows_file(path: &Path) -> Result<WindowedDataset> {
    let buf = read_file(path)?;
    let mut r = Reader::open(path, &buf, MAGIC, VERSION)?;
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let l = r.u32()? as usize;
    let k = r.u32()? as usize;
    let num_groups = r.u32()? as usize;
    let total = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(l))
        .ok_or_else(|| format_err(path, "shape overflows"))?;
    let windows = r.f32s(total)?;
    let labels = r.u16s(n)?;
    let groups = r.u16s(n)?;
    r.finish()?;
    if let Some(i) = groups.iter().position(|&g| g as usize >= num_groups) {
        return Err(format_err(
            path,
            format!("window {i}: group {} out of range for {num_groups} groups", groups[i]),
        ));
    }
    WindowedDataset::new(windows, labels, groups, DatasetMeta::new(k, c, l))
        .map_err(|e| format_err(path, e.to_string()))
}
