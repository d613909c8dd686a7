//! Sweep reports as CSV and as gnuplot data.
//!
//! The CSV holds optional `# key=value` metadata lines, the header
//! `model,angle_deg,mean_psnr_db` with one row per model and angle, and, when
//! there are rows, a blank line followed by the `model,variance_db` summary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rotdiff_core::eval::SweepReport;

use crate::error::{CliError, CliResult};

pub const ROWS_HEADER: &str = "model,angle_deg,mean_psnr_db";
pub const SUMMARY_HEADER: &str = "model,variance_db";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFile {
    pub meta: Vec<(String, String)>,
    pub report: SweepReport,
}

impl ReportFile {
    pub fn new(report: SweepReport) -> Self {
        Self {
            meta: Vec::new(),
            report,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.push((key.into(), value.into()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_csv(&self) -> String {
        let mut report = self.report.clone();
        report.sort();
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "{ROWS_HEADER}");
        for r in &report.rows {
            let _ = writeln!(out, "{},{},{}", r.model, r.angle_deg, r.mean_psnr_db);
        }
        if !report.rows.is_empty() {
            let _ = writeln!(out, "\n{SUMMARY_HEADER}");
            for (model, var) in report.summary() {
                let _ = writeln!(out, "{model},{var}");
            }
        }
        out
    }

    /// Parses a CSV written by [`ReportFile::to_csv`]. The summary block is
    /// checked against the rows rather than stored.
    pub fn parse_csv(text: &str) -> Result<Self, String> {
        let mut file = Self::default();
        let mut section = 0;
        let mut stated = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |m: &str| format!("line {}: {m}", i + 1);
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest.trim().split_once('=').ok_or_else(|| err("bad metadata line"))?;
                file.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            if line == ROWS_HEADER {
                section = 1;
                continue;
            }
            if line == SUMMARY_HEADER {
                section = 2;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("bad number `{s}`")));
            match (section, f.len()) {
                (1, 3) => file.report.push(f[0], num(f[1])?, num(f[2])?),
                (2, 2) => stated.push((f[0].to_string(), num(f[1])?)),
                (0, _) => return Err(err("data before the header")),
                _ => return Err(err("wrong number of columns")),
            }
        }
        if section == 0 {
            return Err("missing header".into());
        }
        for (model, v) in stated {
            match file.report.variance(&model) {
                Some(expected) if (expected - v).abs() <= 1e-9 * expected.abs().max(1.0) => {}
                _ => return Err(format!("summary for `{model}` does not match the rows")),
            }
        }
        file.report.sort();
        Ok(file)
    }

    /// One block per model (`angle psnr`), separated by two blank lines so
    /// gnuplot can address them with `index`.
    pub fn to_gnuplot(&self) -> String {
        let mut out = String::from("# angle_deg mean_psnr_db\n");
        for (i, model) in self.report.models().iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            let _ = writeln!(out, "# {model}");
            for (a, p) in self.report.profile(model) {
                let _ = writeln!(out, "{a} {p}");
            }
        }
        out
    }

    /// Writes `path` and a gnuplot file next to it with the `.dat` extension.
    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_csv()).map_err(|e| CliError::io(path, e))?;
        let dat = path.with_extension("dat");
        fs::write(&dat, self.to_gnuplot()).map_err(|e| CliError::io(&dat, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_csv(&text).map_err(|m| CliError::format(path, m))
    }
}
