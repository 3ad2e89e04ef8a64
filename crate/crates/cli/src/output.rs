//! Output directory: JSON documents, CSV grid exports and a hashed manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use curvedflat::grid::Grid;
use curvedflat::linalg::Mat;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn record(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.record(name, text.as_bytes())
    }

    /// One row per node (and time, when `times` is given), entries in row-major order.
    pub fn write_field_csv(&mut self, name: &str, grid: &Grid, slices: &[&[Mat]], times: Option<&[f64]>) -> Result<()> {
        let bytes = field_csv(grid, slices, times)?;
        self.record(name, &bytes)
    }

    pub fn write_rows_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.iter().map(|x| format_float(*x)))?;
        }
        let bytes = w.into_inner().context("flushing csv")?;
        self.record(name, &bytes)
    }

    /// Writes `manifest.json` listing every file written so far, sorted by name.
    pub fn finish(&mut self) -> Result<Vec<ManifestEntry>> {
        self.written.sort();
        let mut entries = Vec::new();
        for name in &self.written {
            let bytes = fs::read(self.root.join(name))?;
            entries.push(ManifestEntry {
                file: name.clone(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let mut text = serde_json::to_string_pretty(&entries)?;
        text.push('\n');
        fs::write(self.root.join("manifest.json"), text)?;
        Ok(entries)
    }
}

/// Shortest representation that parses back to the same `f64`.
fn format_float(x: f64) -> String {
    format!("{x:?}")
}

pub fn field_csv(grid: &Grid, slices: &[&[Mat]], times: Option<&[f64]>) -> Result<Vec<u8>> {
    anyhow::ensure!(!slices.is_empty(), "no field values to export");
    if let Some(t) = times {
        anyhow::ensure!(t.len() == slices.len(), "one time per slice is required");
    }
    let n = slices[0].first().map(|m| m.nrows()).unwrap_or(0);
    let mut header: Vec<String> = (1..=grid.r()).map(|k| format!("x{k}")).collect();
    if times.is_some() {
        header.push("t".into());
    }
    for i in 0..n {
        for j in 0..n {
            header.push(format!("re_{i}_{j}"));
            header.push(format!("im_{i}_{j}"));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for (s, values) in slices.iter().enumerate() {
        anyhow::ensure!(values.len() == grid.len(), "field has {} values for {} nodes", values.len(), grid.len());
        for (k, m) in values.iter().enumerate() {
            let mut row: Vec<String> = grid.point(k).into_iter().map(format_float).collect();
            if let Some(t) = times {
                row.push(format_float(t[s]));
            }
            for i in 0..n {
                for j in 0..n {
                    row.push(format_float(m[(i, j)].re));
                    row.push(format_float(m[(i, j)].im));
                }
            }
            w.write_record(&row)?;
        }
    }
    w.into_inner().context("flushing csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use curvedflat::linalg::{c, identity};

    #[test]
    fn csv_header_and_rows() {
        let g = Grid::square(1.0, 9, 2).unwrap();
        let vals = vec![identity(2) * c(0.5, -1.0); g.len()];
        let bytes = field_csv(&g, &[&vals], None).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x1,x2,re_0_0,im_0_0,re_0_1,im_0_1,re_1_0,im_1_0,re_1_1,im_1_1");
        assert_eq!(lines.next().unwrap(), "-1.0,-1.0,0.5,-1.0,0.0,0.0,0.0,0.0,0.5,-1.0");
        assert_eq!(text.lines().count(), 1 + 81);
    }

    #[test]
    fn time_column_follows_coordinates() {
        let g = Grid::square(1.0, 9, 2).unwrap();
        let vals = vec![identity(2); g.len()];
        let text = String::from_utf8(field_csv(&g, &[&vals, &vals], Some(&[0.0, 0.25])).unwrap()).unwrap();
        assert!(text.starts_with("x1,x2,t,re_0_0"));
        assert_eq!(text.lines().count(), 1 + 2 * 81);
        assert!(text.lines().last().unwrap().starts_with("1.0,1.0,0.25,"));
    }

    #[test]
    fn manifest_hashes_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write_json("b.json", &vec![1, 2]).unwrap();
        out.write_rows_csv("a.csv", &["t", "value"], &[vec![0.0, 1.5]]).unwrap();
        let entries = out.finish().unwrap();
        assert_eq!(entries.iter().map(|e| e.file.as_str()).collect::<Vec<_>>(), ["a.csv", "b.json"]);
        let bytes = fs::read(dir.path().join("a.csv")).unwrap();
        assert_eq!(entries[0].sha256, hex::encode(Sha256::digest(&bytes)));
        assert!(dir.path().join("manifest.json").exists());
    }
}
