use std::fmt::Write as _;

use recourse_core::io::{to_canonical_string, FORMAT_VERSION};
use serde::Serialize;
use serde_json::Value;

use crate::args::Format;

/// Machine-readable result of one command.
#[derive(Debug, Serialize)]
pub struct Report {
    pub command: &'static str,
    pub format_version: u32,
    pub seed: u64,
    pub threads: u32,
    pub pass: bool,
    pub details: Value,
    /// Headline numbers for the text format.
    #[serde(skip)]
    pub summary: Vec<(&'static str, String)>,
}

impl Report {
    pub fn new(command: &'static str, seed: u64, threads: u32) -> Self {
        Self {
            command,
            format_version: FORMAT_VERSION,
            seed,
            threads,
            pass: true,
            details: Value::Null,
            summary: Vec::new(),
        }
    }

    pub fn line(&mut self, key: &'static str, value: impl ToString) {
        self.summary.push((key, value.to_string()));
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => {
                let mut s = to_canonical_string(self).expect("reports are plain data");
                s.push('\n');
                s
            }
            Format::Text => {
                let mut s = format!(
                    "{}: {} (seed {}, format v{})\n",
                    self.command,
                    if self.pass { "PASS" } else { "FAIL" },
                    self.seed,
                    self.format_version
                );
                let width = self.summary.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                for (k, v) in &self.summary {
                    let _ = writeln!(s, "  {k:<width$}  {v}");
                }
                s
            }
        }
    }
}
