//! Attack regression: malicious guests must be stopped at runtime with
//! typed errors, and discipline breaches must not compile.

pub mod corpus;
pub mod leak;
pub mod runtime;

use std::fmt::Write as _;
use std::time::Duration;

pub use corpus::{run_static_rejections, CorpusOptions};
pub use leak::{leak_targets, run_leak_sessions, scan_region, LeakReport};
pub use runtime::{run_freeze_race, run_runtime_attacks, AttackOptions, FreezeReport};

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub passed: bool,
    /// What actually happened, e.g. `validation-error` or `ok`.
    pub outcome: String,
    pub detail: String,
    pub duration: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub suite: String,
    pub cases: Vec<CaseResult>,
}

impl Report {
    pub fn new(suite: impl Into<String>) -> Self {
        Report {
            suite: suite.into(),
            cases: Vec::new(),
        }
    }

    pub fn passed(&self) -> usize {
        self.cases.iter().filter(|c| c.passed).count()
    }

    pub fn failed(&self) -> usize {
        self.cases.len() - self.passed()
    }

    pub fn all_passed(&self) -> bool {
        self.failed() == 0 && !self.cases.is_empty()
    }

    pub fn case(&self, name: &str) -> Option<&CaseResult> {
        self.cases.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}: {}/{} passed\n", self.suite, self.passed(), self.cases.len());
        for c in &self.cases {
            let _ = writeln!(
                s,
                "  [{}] {:<28} {:<20} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.outcome,
                c.detail
            );
        }
        s
    }

    pub fn to_junit_xml(&self) -> String {
        let total: f64 = self.cases.iter().map(|c| c.duration.as_secs_f64()).sum();
        let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        let _ = writeln!(
            s,
            "<testsuite name=\"{}\" tests=\"{}\" failures=\"{}\" time=\"{:.3}\">",
            xml_escape(&self.suite),
            self.cases.len(),
            self.failed(),
            total
        );
        for c in &self.cases {
            let _ = write!(
                s,
                "  <testcase classname=\"{}\" name=\"{}\" time=\"{:.3}\"",
                xml_escape(&self.suite),
                xml_escape(&c.name),
                c.duration.as_secs_f64()
            );
            if c.passed {
                let _ = writeln!(s, "><system-out>{}</system-out></testcase>", xml_escape(&c.outcome));
            } else {
                let _ = writeln!(
                    s,
                    ">\n    <failure message=\"{}\">{}</failure>\n  </testcase>",
                    xml_escape(&c.outcome),
                    xml_escape(&c.detail)
                );
            }
        }
        s.push_str("</testsuite>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if (c as u32) < 0x20 && c != '\n' && c != '\t' => {
                let _ = write!(out, "&#{};", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn junit_escapes_and_counts() {
        let mut r = Report::new("demo");
        r.cases.push(CaseResult {
            name: "a<b".into(),
            passed: true,
            outcome: "ok".into(),
            detail: String::new(),
            duration: Duration::from_millis(5),
        });
        r.cases.push(CaseResult {
            name: "c".into(),
            passed: false,
            outcome: "x&y".into(),
            detail: "\"bad\"".into(),
            duration: Duration::ZERO,
        });
        let xml = r.to_junit_xml();
        assert!(xml.contains("tests=\"2\" failures=\"1\""));
        assert!(xml.contains("name=\"a&lt;b\""));
        assert!(xml.contains("message=\"x&amp;y\">&quot;bad&quot;</failure>"));
        assert!(r.to_text().starts_with("demo: 1/2 passed"));
        assert!(!r.all_passed());
    }
}
