//! Machine-readable run reports. Timings are kept apart so that the report itself is a
//! pure function of the configuration.

use std::collections::BTreeMap;
use std::time::Instant;

use curvedflat::convergence::ConvergenceStudy;
use serde::Serialize;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The measured residual (the fine-grid value for convergence studies).
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceStudy>,
    /// Grid point where the residual peaks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Check {
    /// Passes when `value ≤ bound`; NaN fails.
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= bound,
            value,
            bound: Some(bound),
            convergence: None,
            location: None,
            detail: String::new(),
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { passed: value >= bound, ..Self::at_most(name, value, bound) }
    }

    pub fn flag(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            value: if passed { 0.0 } else { 1.0 },
            bound: None,
            convergence: None,
            location: None,
            detail: detail.into(),
        }
    }

    pub fn converges(name: impl Into<String>, study: ConvergenceStudy) -> Self {
        Self {
            name: name.into(),
            passed: study.passed,
            value: study.fine,
            bound: None,
            convergence: Some(study),
            location: None,
            detail: String::new(),
        }
    }

    pub fn at(mut self, location: Vec<f64>) -> Self {
        self.location = Some(location);
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunReport {
    pub command: String,
    pub pair: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl RunReport {
    pub fn new(command: &str, pair: &str, seed: u64) -> Self {
        Self { command: command.into(), pair: pair.into(), seed, passed: true, checks: Vec::new() }
    }

    /// Appends a check. Names are unique within a report.
    pub fn push(&mut self, check: Check) {
        assert!(
            self.checks.iter().all(|c| c.name != check.name),
            "check `{}` declared twice",
            check.name
        );
        self.passed &= check.passed;
        self.checks.push(check);
    }

    pub fn extend(&mut self, checks: impl IntoIterator<Item = Check>) {
        for c in checks {
            self.push(c);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One line per check, for the terminal.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let mut line = format!("{status} {:<44} {:.3e}", c.name, c.value);
            if let Some(b) = c.bound {
                line += &format!(" (bound {b:.1e})");
            }
            if let Some(r) = c.convergence.as_ref().and_then(|s| s.ratio) {
                line += &format!(" (ratio {r:.2})");
            }
            if let Some(loc) = &c.location {
                let pts: Vec<String> = loc.iter().map(|x| format!("{x:.4}")).collect();
                line += &format!(" at ({})", pts.join(", "));
            }
            out += &line;
            out.push('\n');
        }
        out += if self.passed { "overall: PASS\n" } else { "overall: FAIL\n" };
        out
    }
}

/// Wall-clock seconds per named phase, in the order the phases ran.
#[derive(Debug, Default, Serialize)]
pub struct Timings {
    pub phases: BTreeMap<String, f64>,
    #[serde(skip)]
    order: usize,
}

impl Timings {
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.order += 1;
        self.phases.insert(format!("{:02}_{phase}", self.order), start.elapsed().as_secs_f64());
        out
    }

    pub fn total(&self) -> f64 {
        self.phases.values().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_tracks_failures() {
        let mut r = RunReport::new("verify", "sun_son(3)", 0);
        r.push(Check::at_most("a", 1e-12, 1e-9));
        assert!(r.passed);
        r.push(Check::at_most("b", f64::NAN, 1e-9));
        assert!(!r.passed);
        assert_eq!(r.failures().count(), 1);
        assert!(r.summary().contains("FAIL b"));
    }

    #[test]
    #[should_panic(expected = "declared twice")]
    fn duplicate_names_are_rejected() {
        let mut r = RunReport::new("verify", "p", 0);
        r.push(Check::flag("x", true, ""));
        r.push(Check::flag("x", true, ""));
    }

    #[test]
    fn convergence_checks_report_the_fine_value() {
        let c = Check::converges("uu0", ConvergenceStudy::from_maxima(1.6e-5, 1e-6));
        assert!(c.passed);
        assert_eq!(c.value, 1e-6);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"ratio\""));
        assert!(!json.contains("location"));
    }
}
