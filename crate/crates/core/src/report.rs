//! Results table (CSV) and per-entity F1 chart (SVG).

use std::fmt::Write as _;

use thiserror::Error;

use crate::metrics::{MetricsTable, Prf};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReportError {
    #[error("no runs to report")]
    NoRuns,
    #[error("run {0:?} has a different category list from the first run")]
    CategoryMismatch(String),
}

/// Fixed six-decimal formatting, rounding half away from zero on the exact
/// binary value.
pub fn fixed6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let exact = format!("{:.40}", x.abs());
    let (int_part, frac) = exact.split_once('.').expect("fractional digits requested");
    let digits = format!("{int_part}{}", &frac[..6]);
    let mut n: u128 = digits.parse().expect("decimal digits");
    if frac.as_bytes()[6] >= b'5' {
        n += 1;
    }
    let sign = if x < 0.0 && n != 0 { "-" } else { "" };
    format!("{sign}{}.{:06}", n / 1_000_000, n % 1_000_000)
}

/// Quotes a CSV field when it contains a delimiter, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn check_runs(runs: &[(String, MetricsTable)]) -> Result<(), ReportError> {
    let (_, first) = runs.first().ok_or(ReportError::NoRuns)?;
    for (name, t) in runs {
        if t.categories != first.categories {
            return Err(ReportError::CategoryMismatch(name.clone()));
        }
    }
    Ok(())
}

/// One row per (run, category) in scheme order, then the run's average row.
pub fn emit_results_table(runs: &[(String, MetricsTable)]) -> Result<String, ReportError> {
    check_runs(runs)?;
    let mut out = String::from("run,category,precision,recall,f1\n");
    let mut row = |run: &str, cat: &str, p: &Prf| {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(run),
            csv_field(cat),
            fixed6(p.precision),
            fixed6(p.recall),
            fixed6(p.f1)
        );
    };
    for (name, table) in runs {
        for (cat, p) in table.categories.iter().zip(&table.rows) {
            row(name, cat, p);
        }
        row(name, "Average", &table.average);
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

/// Grouped bar chart: one group per category, one bar per run, y in [0, 1]
/// with gridlines every 0.1. Output depends only on the input.
pub fn emit_f1_chart(runs: &[(String, MetricsTable)]) -> Result<String, ReportError> {
    check_runs(runs)?;
    let categories = &runs[0].1.categories;
    let (bar_w, group_gap) = (18.0, 24.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 60.0);
    let plot_h = 300.0;
    let group_w = bar_w * runs.len() as f64;
    let plot_w = categories.len() as f64 * (group_w + group_gap) + group_gap;
    let legend_h = 18.0 * runs.len() as f64;
    let width = left + plot_w + right;
    let height = top + plot_h + bottom + legend_h;
    let y_of = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">F1 score per entity category</text>"#,
        left + plot_w / 2.0
    );
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#d0d0d0" stroke-width="1"/>"##,
            left + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
            left - 6.0,
            y + 4.0
        );
    }
    for (c, cat) in categories.iter().enumerate() {
        let gx = left + group_gap + c as f64 * (group_w + group_gap);
        for (r, (name, table)) in runs.iter().enumerate() {
            let f1 = table.rows[c].f1;
            let y = y_of(f1);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{y:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"><title>{} {}: {}</title></rect>"#,
                gx + r as f64 * bar_w,
                top + plot_h - y,
                PALETTE[r % PALETTE.len()],
                xml_escape(name),
                xml_escape(cat),
                fixed6(f1)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            gx + group_w / 2.0,
            top + plot_h + 18.0,
            xml_escape(cat)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left:.2}" y1="{top:.2}" x2="{left:.2}" y2="{:.2}" stroke="black"/>"#,
        top + plot_h
    );
    for (r, (name, _)) in runs.iter().enumerate() {
        let y = top + plot_h + bottom - 16.0 + 18.0 * r as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left:.2}" y="{y:.2}" width="12" height="12" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            PALETTE[r % PALETTE.len()],
            left + 18.0,
            y + 10.0,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DEFAULT_ENTITY_TYPES;

    fn table(f1s: [f64; 6]) -> MetricsTable {
        let rows = f1s
            .iter()
            .map(|&f| Prf {
                precision: f,
                recall: f,
                f1: f,
            })
            .collect();
        MetricsTable::from_rows(DEFAULT_ENTITY_TYPES.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    #[test]
    fn six_decimal_rounding() {
        assert_eq!(fixed6(0.933_499_999_9), "0.933500");
        assert_eq!(fixed6(0.5), "0.500000");
        assert_eq!(fixed6(1.0), "1.000000");
        assert_eq!(fixed6(0.0), "0.000000");
        assert_eq!(fixed6(0.999_999_7), "1.000000");
        assert_eq!(fixed6(-0.000_000_4), "0.000000");
        assert_eq!(fixed6(-0.25), "-0.250000");
        // decided on the exact binary value, on either side of the half
        assert_eq!(fixed6(0.000_000_5), "0.000000");
        assert_eq!(fixed6(0.000_001_5), "0.000002");
    }

    #[test]
    fn results_table_layout() {
        let one = [("a".to_string(), table([0.5; 6]))];
        let csv = emit_results_table(&one).unwrap();
        assert_eq!(csv.lines().count(), 1 + 7);
        assert!(csv.lines().last().unwrap().starts_with("a,Average,"));
        let two = [("x".to_string(), table([0.1; 6])), ("b".to_string(), table([0.2; 6]))];
        let csv = emit_results_table(&two).unwrap();
        let lines: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(lines.len(), 14);
        assert!(lines[0].starts_with("x,PER,"));
        assert!(lines[7].starts_with("b,PER,"));
        assert_eq!(emit_results_table(&[]), Err(ReportError::NoRuns));
    }

    #[test]
    fn chart_bars_and_determinism() {
        let runs = [("run".to_string(), table([0.9, 0.0, 0.5, 0.25, 1.0, 0.75]))];
        let a = emit_f1_chart(&runs).unwrap();
        assert_eq!(a, emit_f1_chart(&runs).unwrap());
        assert_eq!(a.matches("<title>").count(), 6);
        assert!(a.contains("<title>run RRE: 0.000000</title>"));
        assert!(a.contains(r#"height="0.00""#));
        assert!(a.contains(r#"height="300.00""#));
        assert!(a.contains(">RRE</text>"));
        assert_eq!(a.matches(r##"stroke="#d0d0d0""##).count(), 11);
        assert_eq!(emit_f1_chart(&[]), Err(ReportError::NoRuns));
    }
}
