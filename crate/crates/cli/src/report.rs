//! Tables, pass/fail checks and CSV emission.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Column by header name, parsed as numbers.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r[i].parse().ok()).collect()
    }
}

/// Full-precision float formatting for CSV cells.
pub fn num(v: f64) -> String {
    format!("{v:.17e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

/// Result of one subcommand: its tables and its assertions.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// `checks` table appended to the data tables.
    pub fn all_tables(&self) -> Vec<Table> {
        let mut out = self.tables.clone();
        let mut t = Table::new("checks", &["check", "passed", "detail"]);
        for c in &self.checks {
            t.push(vec![c.name.clone(), c.passed.to_string(), c.detail.clone()]);
        }
        out.push(t);
        out
    }

    /// Write `<dir>/<command>_<table>.csv`, each starting with a `# config_sha256=…` line.
    pub fn write(&self, dir: &Path, command: &str, config_hash: &str, seed: u64) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.display().to_string(), e))?;
        let mut written = Vec::new();
        for t in self.all_tables() {
            let path = dir.join(format!("{command}_{}.csv", t.name));
            let mut buf = format!("# config_sha256={config_hash}; seed={seed}; command={command}\n").into_bytes();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(&t.header)?;
                for r in &t.rows {
                    w.write_record(r)?;
                }
                w.flush().map_err(|e| CliError::Io(path.display().to_string(), e))?;
            }
            fs::write(&path, buf).map_err(|e| CliError::Io(path.display().to_string(), e))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_header_line_then_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = Outcome::default();
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec![num(0.5), "q,r".into()]);
        o.tables.push(t);
        o.checks.push(Check::new("c", true, ""));
        let files = o.write(dir.path(), "cmd", "abc", 9).unwrap();
        assert_eq!(files.len(), 2);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config_sha256=abc; seed=9; command=cmd");
        assert_eq!(lines.next().unwrap(), "a,b");
        assert!(lines.next().unwrap().ends_with(",\"q,r\""));
        assert!(o.passed());
        assert_eq!(o.tables[0].column("a").unwrap(), vec![0.5]);
    }
}
