//! Cohort aggregation of per-case metrics and table rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{CaseMetrics, MetricConfig};

/// Which lesion-wise score a table reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "LD")]
    Ld,
    #[serde(rename = "LH95")]
    Lh95,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Ld => "LD",
            MetricKind::Lh95 => "LH95",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LD" => Ok(MetricKind::Ld),
            "LH95" => Ok(MetricKind::Lh95),
            other => Err(Error::invalid(format!(
                "unknown metric `{other}` (expected LD or LH95)"
            ))),
        }
    }
}

/// One table row: a method name and its per-region cohort means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub means: BTreeMap<String, f64>,
}

/// A cohort table plus the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub metric: MetricKind,
    pub case_count: usize,
    pub config: MetricConfig,
    pub rows: Vec<ReportRow>,
}

/// Output format of [`render`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::invalid(format!(
                "unknown format `{other}` (expected csv, markdown or json)"
            ))),
        }
    }
}

/// Per-region arithmetic mean of one metric over the cases. All cases must
/// carry the same region set.
pub fn aggregate(cases: &[CaseMetrics], metric: MetricKind) -> Result<BTreeMap<String, f64>> {
    let first = cases
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate zero cases"))?;
    let regions: Vec<&String> = first.regions.keys().collect();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for case in cases {
        let keys: Vec<&String> = case.regions.keys().collect();
        if keys != regions {
            return Err(Error::invalid(format!(
                "cases report different region sets: {regions:?} vs {keys:?}"
            )));
        }
        for (name, scores) in &case.regions {
            let value = match metric {
                MetricKind::Ld => scores.ld,
                MetricKind::Lh95 => scores.lh95,
            };
            *sums.entry(name.clone()).or_insert(0.0) += value;
        }
    }
    let n = cases.len() as f64;
    Ok(sums.into_iter().map(|(k, v)| (k, v / n)).collect())
}

fn column_names(report: &AggregateReport) -> Vec<&str> {
    report
        .rows
        .first()
        .map(|r| r.means.keys().map(String::as_str).collect())
        .unwrap_or_default()
}

fn format_cell(v: f64) -> String {
    format!("{v:.4}")
}

fn config_echo(report: &AggregateReport) -> Result<String> {
    serde_json::to_string(&report.config)
        .map_err(|e| Error::invalid(format!("config serialization failed: {e}")))
}

/// Render a report deterministically in the requested format. Every format
/// carries the metric name and the full metric config alongside the table.
pub fn render(report: &AggregateReport, format: ReportFormat) -> Result<String> {
    let columns = column_names(report);
    match format {
        ReportFormat::Csv => {
            let mut out = format!(
                "# metric: {} over {} cases\n# config: {}\n",
                report.metric.name(),
                report.case_count,
                config_echo(report)?
            );
            out.push_str("method");
            for c in &columns {
                out.push(',');
                out.push_str(c);
            }
            out.push('\n');
            for row in &report.rows {
                out.push_str(&row.method);
                for c in &columns {
                    out.push(',');
                    out.push_str(&format_cell(row.means[*c]));
                }
                out.push('\n');
            }
            Ok(out)
        }
        ReportFormat::Markdown => {
            let mut out = format!(
                "{} over {} cases\n\nconfig: `{}`\n\n",
                report.metric.name(),
                report.case_count,
                config_echo(report)?
            );
            out.push_str("| method |");
            for c in &columns {
                out.push_str(&format!(" {c} |"));
            }
            out.push_str("\n|---|");
            for _ in &columns {
                out.push_str("---|");
            }
            out.push('\n');
            for row in &report.rows {
                out.push_str(&format!("| {} |", row.method));
                for c in &columns {
                    out.push_str(&format!(" {} |", format_cell(row.means[*c])));
                }
                out.push('\n');
            }
            Ok(out)
        }
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(report)
                .map_err(|e| Error::invalid(format!("report serialization failed: {e}")))?;
            text.push('\n');
            Ok(text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RegionMetrics;
    use crate::regions::EVAL_REGIONS;

    fn case(ld_values: [f64; 6]) -> CaseMetrics {
        let regions = EVAL_REGIONS
            .iter()
            .zip(ld_values)
            .map(|(name, ld)| {
                (
                    name.to_string(),
                    RegionMetrics {
                        ld,
                        lh95: ld * 100.0,
                        lesions: Vec::new(),
                        fp_count: 0,
                    },
                )
            })
            .collect();
        CaseMetrics { regions }
    }

    fn sample_report() -> AggregateReport {
        let cases = [case([0.8; 6]), case([0.6; 6])];
        let means = aggregate(&cases, MetricKind::Ld).unwrap();
        AggregateReport {
            metric: MetricKind::Ld,
            case_count: 2,
            config: MetricConfig::default(),
            rows: vec![ReportRow {
                method: "staple".to_string(),
                means,
            }],
        }
    }

    #[test]
    fn single_case_row_equals_case_values() {
        let c = case([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let means = aggregate(&[c.clone()], MetricKind::Ld).unwrap();
        for (i, name) in EVAL_REGIONS.iter().enumerate() {
            assert_eq!(means[*name], c.regions[*name].ld, "{name} index {i}");
        }
    }

    #[test]
    fn two_cases_average() {
        let means = aggregate(&[case([0.8; 6]), case([0.6; 6])], MetricKind::Ld).unwrap();
        for name in EVAL_REGIONS {
            assert!((means[name] - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let a = case([0.1, 0.9, 0.4, 0.2, 0.8, 0.5]);
        let b = case([0.7, 0.3, 0.6, 0.1, 0.2, 0.9]);
        let c = case([0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let forward = aggregate(&[a.clone(), b.clone(), c.clone()], MetricKind::Lh95).unwrap();
        let backward = aggregate(&[c, b, a], MetricKind::Lh95).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn column_order_matches_reporting_convention() {
        let report = sample_report();
        assert_eq!(column_names(&report), EVAL_REGIONS);
    }

    #[test]
    fn csv_is_metadata_then_header_then_rows() {
        let text = render(&sample_report(), ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "# metric: LD over 2 cases");
        assert!(lines[1].starts_with("# config: {") && lines[1].contains("connectivity"));
        assert_eq!(lines[2], "method,ET,NETC,RC,SNFH,TC,WT");
        assert!(lines[3].starts_with("staple,0.7000,"));
    }

    #[test]
    fn markdown_has_seven_columns_and_config_echo() {
        let text = render(&sample_report(), ReportFormat::Markdown).unwrap();
        let header = text.lines().find(|l| l.starts_with("| method")).unwrap();
        let cells = header.split('|').filter(|s| !s.trim().is_empty()).count();
        assert_eq!(cells, 1 + 6);
        assert!(text.lines().any(|l| l.starts_with("config: `{")));
    }

    #[test]
    fn json_roundtrips() {
        let report = sample_report();
        let text = render(&report, ReportFormat::Json).unwrap();
        let back: AggregateReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn zero_cases_is_an_error() {
        assert!(aggregate(&[], MetricKind::Ld).is_err());
    }

    #[test]
    fn mismatched_region_sets_are_rejected() {
        let a = case([0.5; 6]);
        let mut b = case([0.5; 6]);
        b.regions.remove("WT");
        assert!(aggregate(&[a, b], MetricKind::Ld).is_err());
    }
}
