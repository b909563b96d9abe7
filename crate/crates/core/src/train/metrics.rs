use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: &str =
    "step,loss_total,loss_contrast,loss_coord,loss_giou,matched_cosine,positives_per_proposal,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_total: f32,
    /// Unweighted contrastive loss.
    pub loss_contrast: f32,
    /// Weighted, normalized L1 box term.
    pub loss_coord: f32,
    /// Weighted, normalized GIoU box term.
    pub loss_giou: f32,
    pub matched_cosine: f64,
    pub positives_per_proposal: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.loss_contrast,
            self.loss_coord,
            self.loss_giou,
            self.matched_cosine,
            self.positives_per_proposal,
            self.wall_ms
        )
    }

    pub fn from_csv(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return Err(format!("expected 8 columns, found {}", f.len()));
        }
        fn num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
            s.parse().map_err(|_| format!("bad number {s:?}"))
        }
        Ok(MetricsRow {
            step: num(f[0])?,
            loss_total: num(f[1])?,
            loss_contrast: num(f[2])?,
            loss_coord: num(f[3])?,
            loss_giou: num(f[4])?,
            matched_cosine: num(f[5])?,
            positives_per_proposal: num(f[6])?,
            wall_ms: num(f[7])?,
        })
    }
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == HEADER => {}
        _ => return Err(Error::format(path, "missing or unexpected metrics header")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| MetricsRow::from_csv(l).map_err(|m| Error::format(path, format!("line {}: {m}", i + 2))))
        .collect()
}

/// Writes one `step,value` file per metric column into `out_dir`.
pub fn export_plots(metrics: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_csv(metrics)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let columns: Vec<&str> = HEADER.split(',').skip(1).collect();
    let mut written = Vec::with_capacity(columns.len());
    for (c, name) in columns.iter().enumerate() {
        let mut text = format!("step,{name}\n");
        for r in &rows {
            let line = r.to_csv();
            let value = line.split(',').nth(c + 1).expect("fixed column count");
            text.push_str(&format!("{},{value}\n", r.step));
        }
        let path = out_dir.join(format!("{name}.csv"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            loss_total: 1.25,
            loss_contrast: 0.1 + step as f32,
            loss_coord: 0.3,
            loss_giou: 0.4,
            matched_cosine: 0.123456789,
            positives_per_proposal: 1.5,
            wall_ms: 0,
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![row(1), row(2)];
        fs::write(&path, render_csv(&rows)).unwrap();
        assert_eq!(read_csv(&path).unwrap(), rows);
    }

    #[test]
    fn empty_run_has_header_only() {
        assert_eq!(render_csv(&[]), format!("{HEADER}\n"));
    }

    #[test]
    fn plots_one_file_per_metric() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, render_csv(&[row(1), row(2)])).unwrap();
        let files = export_plots(&path, &dir.path().join("plots")).unwrap();
        assert_eq!(files.len(), 7);
        let text = fs::read_to_string(dir.path().join("plots/loss_contrast.csv")).unwrap();
        assert_eq!(text, "step,loss_contrast\n1,1.1\n2,2.1\n");
    }

    #[test]
    fn bad_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "a,b\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Format { .. })));
    }
}
