//! Reporting helper for the acceptance suite in `tests/acceptance.rs`.
//!
//! Each criterion collects notes and failed expectations, then prints one
//! `criterion N: PASS|FAIL` line followed by the details. Reports go straight
//! to the stdout handle so they stay visible when the harness captures
//! `println!` output of passing tests.

use std::io::Write;
use std::time::Duration;

#[derive(Debug, Default)]
pub struct Check {
    notes: Vec<String>,
    failures: Vec<String>,
}

impl Check {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn expect(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    /// Detail line printed under the verdict.
    pub fn note(&mut self, line: impl Into<String>) {
        self.notes.push(line.into());
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn report(&self, n: usize, summary: &str, elapsed: Duration) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let mut out = format!("criterion {n}: {status} {summary} [{:.2} s]\n", elapsed.as_secs_f64());
        for line in &self.notes {
            out.push_str(&format!("    {line}\n"));
        }
        for f in &self.failures {
            out.push_str(&format!("  - {f}\n"));
        }
        out
    }

    /// Prints the report and panics if any expectation failed.
    pub fn finish(self, n: usize, summary: &str, elapsed: Duration) {
        let text = self.report(n, summary, elapsed);
        let mut stdout = std::io::stdout().lock();
        let _ = stdout.write_all(text.as_bytes());
        let _ = stdout.flush();
        assert!(self.passed(), "criterion {n} failed: {:?}", self.failures);
    }
}
