// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic CSV, JSON and SVG renderings of metric reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::metrics::{CorrelationMatrix, MetricReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    SvgBars,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::SvgBars => "svg",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" | "svg_bars" => Ok(ReportFormat::SvgBars),
            _ => Err(PlanError::Report(format!(
                "unknown report format `{s}` (csv, json, svg)"
            ))),
        }
    }
}

/// Stamped into every rendered file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON encoding.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(crate::runtime::container::hex_digest(&json)[..16].to_string())
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn sorted(reports: &[MetricReport]) -> Result<Vec<&MetricReport>> {
    if reports.is_empty() {
        return Err(PlanError::Report("no reports to emit".into()));
    }
    for r in reports {
        r.validate()?;
    }
    let mut rows: Vec<&MetricReport> = reports.iter().collect();
    rows.sort_by(|a, b| {
        (&a.model, &a.group, &a.metric, &a.experiment)
            .cmp(&(&b.model, &b.group, &b.metric, &b.experiment))
            .then(a.value.total_cmp(&b.value))
            .then(a.samples.cmp(&b.samples))
    });
    Ok(rows)
}

pub fn render_report(reports: &[MetricReport], format: ReportFormat, meta: &ReportMeta) -> Result<String> {
    let rows = sorted(reports)?;
    match format {
        ReportFormat::Csv => {
            let mut s = String::from("experiment,model,group,metric,value,samples,seed,config_hash\n");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    csv_field(&r.experiment),
                    csv_field(&r.model),
                    csv_field(&r.group),
                    csv_field(&r.metric),
                    r.value,
                    r.samples,
                    meta.seed,
                    csv_field(&meta.config_hash)
                );
            }
            Ok(s)
        }
        ReportFormat::Json => {
            #[derive(Serialize)]
            struct Doc<'a> {
                seed: u64,
                config_hash: &'a str,
                reports: Vec<&'a MetricReport>,
            }
            let mut s = serde_json::to_string_pretty(&Doc {
                seed: meta.seed,
                config_hash: &meta.config_hash,
                reports: rows,
            })?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::SvgBars => Ok(svg_bars(&rows, meta)),
    }
}

/// Writes `<dir>/<stem>.<ext>`.
pub fn emit_report(
    reports: &[MetricReport],
    format: ReportFormat,
    meta: &ReportMeta,
    dir: &Path,
    stem: &str,
) -> Result<PathBuf> {
    let body = render_report(reports, format, meta)?;
    let path = dir.join(format!("{stem}.{}", format.extension()));
    write_file(&path, &body)?;
    Ok(path)
}

pub(crate) fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| PlanError::Report(format!("cannot write {}: {e}", path.display())))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const BAR_W: f64 = 18.0;
const GAP: f64 = 14.0;
const PLOT_H: f64 = 160.0;
const TOP: f64 = 40.0;
const LEFT: f64 = 40.0;

/// One cluster per (model, group); steered metrics are hatched.
fn svg_bars(rows: &[&MetricReport], meta: &ReportMeta) -> String {
    let mut clusters: Vec<(String, Vec<&MetricReport>)> = Vec::new();
    for r in rows {
        let key = format!("{} {}", r.model, r.group);
        match clusters.last_mut() {
            Some((k, v)) if *k == key => v.push(r),
            _ => clusters.push((key, vec![r])),
        }
    }
    let scale = rows.iter().map(|r| r.value.abs()).fold(1.0, f64::max);
    let has_negative = rows.iter().any(|r| r.value < 0.0);
    let zero_y = if has_negative { TOP + PLOT_H / 2.0 } else { TOP + PLOT_H };
    let unit = if has_negative { PLOT_H / 2.0 } else { PLOT_H } / scale;
    let bars: usize = clusters.iter().map(|(_, v)| v.len()).sum();
    let width = LEFT + bars as f64 * BAR_W + clusters.len() as f64 * GAP + GAP;
    let height = TOP + PLOT_H + 90.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="9">"#
    );
    let _ = writeln!(
        s,
        "<desc>seed={} config_hash={}</desc>",
        meta.seed,
        xml_escape(&meta.config_hash)
    );
    s.push_str(concat!(
        r#"<defs><pattern id="hatch" width="4" height="4" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">"#,
        r#"<line x1="0" y1="0" x2="0" y2="4" stroke="black" stroke-width="1.5"/></pattern></defs>"#,
        "\n"
    ));
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{zero_y:.2}" x2="{width:.2}" y2="{zero_y:.2}" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="4" y="{:.2}">{scale}</text>"#, zero_y - scale * unit);
    let mut x = LEFT + GAP;
    for (label, members) in &clusters {
        let start = x;
        for r in members {
            let h = r.value.abs() * unit;
            let y = if r.value >= 0.0 { zero_y - h } else { zero_y };
            let fill = if r.metric.contains("steered") {
                "url(#hatch)"
            } else {
                "#4a6fa5"
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{fill}" stroke="black" stroke-width="0.5"><title>{} = {}</title></rect>"#,
                BAR_W - 2.0,
                xml_escape(&r.metric),
                r.value
            );
            let _ = writeln!(
                s,
                r#"<text transform="translate({:.2},{:.2}) rotate(60)">{}</text>"#,
                x + 4.0,
                TOP + PLOT_H + 6.0,
                xml_escape(&r.metric)
            );
            x += BAR_W;
        }
        let _ = writeln!(
            s,
            r#"<text x="{start:.2}" y="{:.2}">{}</text>"#,
            TOP - 8.0,
            xml_escape(label)
        );
        x += GAP;
    }
    s.push_str("</svg>\n");
    s
}

/// Square CSV; undefined cells are empty.
pub fn render_matrix_csv(m: &CorrelationMatrix, meta: &ReportMeta) -> String {
    let mut s = format!("# seed={} config_hash={}\nmetric", meta.seed, meta.config_hash);
    for name in &m.metrics {
        s.push(',');
        s.push_str(&csv_field(name));
    }
    s.push('\n');
    for (name, row) in m.metrics.iter().zip(&m.cells) {
        s.push_str(&csv_field(name));
        for c in row {
            s.push(',');
            if let Some(v) = c {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{correlation_report, Grouping};

    fn rep(model: &str, group: &str, metric: &str, value: f64) -> MetricReport {
        MetricReport {
            experiment: "rhyme".into(),
            model: model.into(),
            group: group.into(),
            metric: metric.into(),
            value,
            samples: 10,
            config_hash: "abc".into(),
        }
    }

    fn meta() -> ReportMeta {
        ReportMeta {
            seed: 7,
            config_hash: "0123456789abcdef".into(),
        }
    }

    #[test]
    fn sorted_and_stamped() {
        let rs = vec![
            rep("m2", "-ight", "baseline", 0.5),
            rep("m1", "-ight", "steered", 0.75),
            rep("m1", "-ight", "baseline", 0.25),
        ];
        let csv = render_report(&rs, ReportFormat::Csv, &meta()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "rhyme,m1,-ight,baseline,0.25,10,7,0123456789abcdef");
        assert_eq!(lines[2], "rhyme,m1,-ight,steered,0.75,10,7,0123456789abcdef");
        assert!(lines[3].starts_with("rhyme,m2"));
        let mut shuffled = rs.clone();
        shuffled.reverse();
        for f in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::SvgBars] {
            let a = render_report(&rs, f, &meta()).unwrap();
            assert_eq!(a, render_report(&shuffled, f, &meta()).unwrap());
            assert!(a.contains("0123456789abcdef"));
        }
        let svg = render_report(&rs, ReportFormat::SvgBars, &meta()).unwrap();
        assert_eq!(svg.matches("<rect").count(), 3);
        assert_eq!(svg.matches("url(#hatch)\"").count(), 1);
    }

    #[test]
    fn empty_and_invalid_are_errors() {
        assert!(render_report(&[], ReportFormat::Csv, &meta()).is_err());
        assert!(render_report(&[rep("m", "g", "fraction", 1.5)], ReportFormat::Json, &meta()).is_err());
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent");
        assert!(emit_report(&[rep("m", "g", "f", 0.5)], ReportFormat::Csv, &meta(), &missing, "r").is_err());
    }

    #[test]
    fn emit_twice_identical() {
        let dir = tempfile::tempdir().unwrap();
        let rs = vec![rep("m", "g,1", "f", 0.5)];
        let p = emit_report(&rs, ReportFormat::Json, &meta(), dir.path(), "r").unwrap();
        let first = std::fs::read(&p).unwrap();
        emit_report(&rs, ReportFormat::Json, &meta(), dir.path(), "r").unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
        let csv = render_report(&rs, ReportFormat::Csv, &meta()).unwrap();
        assert!(csv.contains("\"g,1\""));
    }

    #[test]
    fn matrix_csv_symmetric() {
        let mut rs = Vec::new();
        for (i, g) in ["a", "b", "c", "d"].iter().enumerate() {
            let x = i as f64 / 4.0;
            rs.push(rep("m", g, "baseline", x));
            rs.push(rep("m", g, "steered", 1.0 - x * x));
            rs.push(rep("m", g, "regen", 0.5));
        }
        let m = correlation_report(&rs, Grouping::PerPrompt).unwrap();
        let csv = render_matrix_csv(&m, &meta());
        let rows: Vec<Vec<&str>> = csv.lines().skip(2).map(|l| l.split(',').skip(1).collect()).collect();
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                assert_eq!(rows[i][j], rows[j][i]);
            }
        }
        assert!(rows.iter().any(|r| r.contains(&"")));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash(&(1, "x")).unwrap(), config_hash(&(1, "x")).unwrap());
        assert_ne!(config_hash(&(1, "x")).unwrap(), config_hash(&(2, "x")).unwrap());
        assert_eq!(config_hash(&0).unwrap().len(), 16);
    }
}
