//! Minimal SVG polyline charts, enough to eyeball a masking curve without an
//! external plotting stack. CSV remains the source of truth.

use std::io::Write;

pub struct Series<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub values: &'a [f64],
}

/// Renders one or more equally sampled series as polylines with a shared
/// y-range.
pub fn write_chart(
    mut out: impl Write,
    title: &str,
    series: &[Series],
) -> std::io::Result<()> {
    const W: f64 = 900.0;
    const H: f64 = 420.0;
    const PAD: f64 = 45.0;

    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    let mut len = 0usize;
    for s in series {
        len = len.max(s.values.len());
        for &v in s.values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !(lo < hi) {
        lo = 0.0;
        hi = 1.0;
    }
    let span = hi - lo;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (len.max(2) - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / span;

    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )?;
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(
        out,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14">{title}</text>"#,
        PAD
    )?;
    writeln!(
        out,
        r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        H - PAD,
        W - PAD
    )?;
    writeln!(
        out,
        r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
        H - PAD
    )?;
    writeln!(
        out,
        r#"<text x="6" y="{}" font-family="sans-serif" font-size="11">{lo:.1}</text>"#,
        H - PAD
    )?;
    writeln!(
        out,
        r#"<text x="6" y="{PAD}" font-family="sans-serif" font-size="11">{hi:.1}</text>"#
    )?;
    for (si, s) in series.iter().enumerate() {
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            s.color,
            points.join(" ")
        )?;
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * si as f64,
            s.color,
            s.name
        )?;
    }
    writeln!(out, "</svg>")
}
