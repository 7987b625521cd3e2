//! Structured pass/fail results shared by every verification check.

use serde::Serialize;

/// One compared item: a state pair, a heat value, a matrix power, ...
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub label: String,
    pub measured: f64,
    pub expected: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// An item that was not compared, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedItem {
    pub label: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub check: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub tolerance: f64,
    pub records: Vec<CheckRecord>,
    pub skipped: Vec<SkippedItem>,
    pub pass: bool,
}

impl VerificationReport {
    pub fn new(check: impl Into<String>, tau: Option<f64>, tolerance: f64) -> Self {
        VerificationReport {
            check: check.into(),
            tau,
            tolerance,
            records: Vec::new(),
            skipped: Vec::new(),
            pass: true,
        }
    }

    /// Adds a record that passes when `|residual| <= tolerance`.
    pub fn record(&mut self, label: impl Into<String>, measured: f64, expected: f64, residual: f64) {
        let tol = self.tolerance;
        self.record_with(label, measured, expected, residual, tol, residual.abs() <= tol);
    }

    /// Adds a record with an explicit verdict.
    pub fn record_with(
        &mut self,
        label: impl Into<String>,
        measured: f64,
        expected: f64,
        residual: f64,
        tolerance: f64,
        pass: bool,
    ) {
        self.pass &= pass;
        self.records.push(CheckRecord { label: label.into(), measured, expected, residual, tolerance, pass });
    }

    pub fn skip(&mut self, label: impl Into<String>, reason: impl Into<String>) {
        self.skipped.push(SkippedItem { label: label.into(), reason: reason.into() });
    }

    /// Largest `|residual|`, ignoring NaN.
    pub fn max_residual(&self) -> f64 {
        self.records.iter().map(|r| r.residual.abs()).filter(|r| !r.is_nan()).fold(0.0, f64::max)
    }

    /// The record with the largest residual relative to its tolerance.
    pub fn worst(&self) -> Option<&CheckRecord> {
        self.records.iter().max_by(|a, b| {
            let ka = if a.pass { a.residual.abs() / a.tolerance } else { f64::INFINITY };
            let kb = if b.pass { b.residual.abs() / b.tolerance } else { f64::INFINITY };
            ka.total_cmp(&kb)
        })
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.records.iter().filter(|r| !r.pass)
    }

    pub fn merge(&mut self, other: VerificationReport) {
        self.pass &= other.pass;
        self.records.extend(other.records);
        self.skipped.extend(other.skipped);
    }
}
