//! Output directory bookkeeping, tidy CSV tables and pass/fail checks.

use std::path::{Path, PathBuf};

use serde::Serialize;

use pipl_core::grid::Field;
use pipl_core::Result;

/// Collects every file written for one run so the manifest can list them.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record(&mut self, name: impl Into<String>) {
        let name = name.into();
        if !self.files.contains(&name) {
            self.files.push(name);
        }
    }

    pub fn text(&mut self, name: &str, content: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), content)?;
        self.record(name);
        Ok(())
    }

    pub fn field(&mut self, name: &str, f: &Field) -> Result<()> {
        self.text(name, &f.to_csv())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.text(name, &serde_json::to_string_pretty(value)?)
    }

    /// Writes one row per record under `header`; an empty table still gets
    /// its header line.
    pub fn table<T: Serialize>(&mut self, name: &str, header: &[&str], rows: &[T]) -> Result<()> {
        let content = tidy_csv(header, rows)?;
        self.text(name, &content)
    }

    /// Output names in sorted order.
    pub fn files(&self) -> Vec<String> {
        let mut f = self.files.clone();
        f.sort();
        f
    }
}

pub fn tidy_csv<T: Serialize>(header: &[&str], rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let io = |e: csv::Error| pipl_core::Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| pipl_core::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Check {
    pub fn within(name: &str, value: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let passed = lower.is_none_or(|l| value >= l) && upper.is_none_or(|u| value <= u);
        Self {
            name: name.into(),
            passed,
            value,
            lower,
            upper,
        }
    }

    pub fn at_most(name: &str, value: f64, upper: f64) -> Self {
        Self::within(name, value, None, Some(upper))
    }

    pub fn at_least(name: &str, value: f64, lower: f64) -> Self {
        Self::within(name, value, Some(lower), None)
    }

    /// A boolean condition recorded as 1 or 0.
    pub fn holds(name: &str, ok: bool) -> Self {
        Self::within(name, if ok { 1.0 } else { 0.0 }, Some(1.0), None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: usize,
        b: f64,
    }

    #[test]
    fn empty_table_is_header_only() {
        let s = tidy_csv::<Row>(&["a", "b"], &[]).unwrap();
        assert_eq!(s, "a,b\n");
    }

    #[test]
    fn rows_follow_the_header() {
        let s = tidy_csv(&["a", "b"], &[Row { a: 1, b: 0.5 }, Row { a: 2, b: 1e-3 }]).unwrap();
        assert_eq!(s, "a,b\n1,0.5\n2,0.001\n");
    }

    #[test]
    fn checks_compare_inclusively() {
        assert!(Check::at_most("x", 1.0, 1.0).passed);
        assert!(!Check::within("x", f64::NAN, Some(0.0), Some(1.0)).passed);
        assert!(!Check::at_least("x", 0.5, 1.0).passed);
        assert_eq!(Check::holds("x", false).value, 0.0);
    }
}
