//! Line charts written directly as SVG.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub name: String,
    /// Value at x = 1, 2, ...
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 10] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick step of the form 1, 2 or 5 times a power of ten.
fn nice_step(span: f64, target: f64) -> f64 {
    let raw = (span / target).max(f64::MIN_POSITIVE);
    let mag = 10f64.powf(raw.log10().floor());
    let frac = raw / mag;
    let f = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    f * mag
}

/// Mean curves with a one-standard-deviation band per series, legend in
/// input order. `meta` is embedded verbatim in a `<metadata>` element.
pub fn emit_plot(series: &[PlotSeries], title: &str, x_label: &str, y_label: &str, meta: &str) -> String {
    let len = series.iter().map(|s| s.mean.len()).max().unwrap_or(0).max(1);
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for s in series {
        for (m, d) in s.mean.iter().zip(&s.std) {
            lo = lo.min(m - d);
            hi = hi.max(m + d);
        }
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let step = nice_step(hi - lo, 6.0);
    lo = (lo / step).floor() * step;
    hi = (hi / step).ceil() * step;
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x = |t: usize| LEFT + if len == 1 { pw / 2.0 } else { (t as f64) * pw / (len - 1) as f64 };
    let y = |v: f64| TOP + (hi - v) / (hi - lo) * ph;

    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(o, "<metadata>{}</metadata>", escape(meta));
    let _ = writeln!(o, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(o, r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(title));

    let n_ticks = ((hi - lo) / step).round() as i64;
    for k in 0..=n_ticks {
        let v = lo + k as f64 * step;
        let yy = y(v);
        let _ = writeln!(o, r##"<line x1="{LEFT:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#e0e0e0"/>"##, LEFT + pw);
        let _ = writeln!(o, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, yy + 4.0, fmt_tick(v, step));
    }
    let x_step = nice_step(len as f64, 8.0).max(1.0) as usize;
    for t in (0..len).filter(|t| (t + 1) % x_step == 0 || *t == 0) {
        let xx = x(t);
        let _ = writeln!(o, r#"<text x="{xx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, t + 1);
    }
    let _ = writeln!(o, r##"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#333"/>"##);
    let _ = writeln!(o, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        o,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let upper: Vec<String> =
            s.mean.iter().zip(&s.std).enumerate().map(|(t, (m, d))| format!("{:.2},{:.2}", x(t), y(m + d))).collect();
        let lower: Vec<String> = s
            .mean
            .iter()
            .zip(&s.std)
            .enumerate()
            .rev()
            .map(|(t, (m, d))| format!("{:.2},{:.2}", x(t), y(m - d)))
            .collect();
        if !upper.is_empty() {
            let _ = writeln!(
                o,
                r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
        }
        let line: Vec<String> = s.mean.iter().enumerate().map(|(t, m)| format!("{:.2},{:.2}", x(t), y(*m))).collect();
        let _ = writeln!(
            o,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8" data-series="{}"/>"#,
            line.join(" "),
            escape(&s.name)
        );
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(o, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/>"#, lx + 22.0);
        let _ = writeln!(o, r#"<text class="legend" x="{:.2}" y="{:.2}">{}</text>"#, lx + 28.0, ly + 4.0, escape(&s.name));
    }
    o.push_str("</svg>\n");
    o
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s.trim_start_matches(['-', '0', '.']).is_empty() {
        s[1..].to_string()
    } else {
        s
    }
}
