use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::metrics::MetricsRecord;
use super::stats::SummaryRow;
use crate::error::{Error, Result};

pub const SUMMARY_HEADER: &str = "method,level,mean_error,std_error,mean_idem,overhead";

#[derive(Clone, Debug)]
pub struct ReportPaths {
    pub records: PathBuf,
    pub summary: PathBuf,
    pub error_vs_level: PathBuf,
    pub idem_vs_level: PathBuf,
}

impl ReportPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            records: dir.join("records.jsonl"),
            summary: dir.join("summary.csv"),
            error_vs_level: dir.join("plot_error_vs_level.csv"),
            idem_vs_level: dir.join("plot_idem_vs_level.csv"),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_jsonl(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Contract(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            row: i + 1,
            col: 0,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_summary_csv(summary: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{SUMMARY_HEADER}").map_err(io)?;
    for r in summary {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.method,
            r.level,
            r.mean_error,
            r.std_error,
            r.mean_idem,
            fmt_opt(r.overhead)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Wide table: one row per level, one column per method.
fn write_plot_csv(summary: &[SummaryRow], path: &Path, value: impl Fn(&SummaryRow) -> f64) -> Result<()> {
    let mut methods: Vec<&str> = Vec::new();
    for r in summary {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut levels: Vec<usize> = summary.iter().map(|r| r.level).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let mut header = String::from("level");
    for m in &methods {
        header.push(',');
        header.push_str(m);
    }
    writeln!(w, "{header}").map_err(io)?;
    for l in levels {
        let mut line = l.to_string();
        for m in &methods {
            line.push(',');
            let cell = summary.iter().find(|r| r.level == l && r.method == *m);
            line.push_str(&fmt_opt(cell.map(&value)));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `records.jsonl`, `summary.csv` and the plot-data CSVs into `dir`.
pub fn emit_report(summary: &[SummaryRow], records: &[MetricsRecord], dir: &Path) -> Result<ReportPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ReportPaths::in_dir(dir);
    write_jsonl(records, &paths.records)?;
    write_summary_csv(summary, &paths.summary)?;
    write_plot_csv(summary, &paths.error_vs_level, |r| r.mean_error)?;
    write_plot_csv(summary, &paths.idem_vs_level, |r| r.mean_idem)?;
    Ok(paths)
}
