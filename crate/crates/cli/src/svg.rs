//! Deterministic SVG panels: line charts with event markers, and bar charts.
//!
//! Output is a pure function of the inputs — no timestamps, no randomness,
//! fixed iteration orders, fixed number formatting — so replaying a run
//! produces byte-identical files. Everything is plain shapes and monospace
//! text; no external renderer is involved.

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
const ML: f64 = 76.0; // left margin
const MR: f64 = 24.0;
const MT: f64 = 44.0;
const MB: f64 = 58.0;
const TICKS: usize = 5;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// A vertical event marker.
pub struct VLine {
    pub x: f64,
    pub label: &'static str,
}

/// Compact deterministic number formatting: at most six decimals, trailing
/// zeros trimmed.
pub fn fmt(v: f64) -> String {
    if !v.is_finite() || v == 0.0 {
        return "0".to_string();
    }
    let s = format!("{v:.6}");
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t.is_empty() || t == "-" {
        "0".to_string()
    } else {
        t.to_string()
    }
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    if lo == hi {
        let pad = lo.abs().max(1.0) * 0.1;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        ML + (v - self.x_lo) / (self.x_hi - self.x_lo) * (WIDTH - ML - MR)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MB - (v - self.y_lo) / (self.y_hi - self.y_lo) * (HEIGHT - MT - MB)
    }
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, size: u32, extra: &str, content: &str) {
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\" font-family=\"monospace\" \
         font-size=\"{size}\"{extra}>{content}</text>\n",
        fmt(x),
        fmt(y),
    ));
}

fn open_svg(out: &mut String, title: &str) {
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" \
         width=\"{w}\" height=\"{h}\">\n",
        w = fmt(WIDTH),
        h = fmt(HEIGHT),
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");
    text(out, WIDTH / 2.0, 22.0, "middle", 14, "", &escape(title));
}

fn frame_with_ticks(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let xv = frame.x_lo + f * (frame.x_hi - frame.x_lo);
        let yv = frame.y_lo + f * (frame.y_hi - frame.y_lo);
        let xp = frame.x(xv);
        let yp = frame.y(yv);
        out.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{t}\" x2=\"{x}\" y2=\"{b}\" stroke=\"#e4e4e4\" stroke-width=\"1\"/>\n",
            x = fmt(xp),
            t = fmt(MT),
            b = fmt(HEIGHT - MB),
        ));
        out.push_str(&format!(
            "<line x1=\"{l}\" y1=\"{y}\" x2=\"{r}\" y2=\"{y}\" stroke=\"#e4e4e4\" stroke-width=\"1\"/>\n",
            l = fmt(ML),
            r = fmt(WIDTH - MR),
            y = fmt(yp),
        ));
        text(out, xp, HEIGHT - MB + 16.0, "middle", 10, "", &fmt(xv));
        text(out, ML - 8.0, yp + 3.5, "end", 10, "", &fmt(yv));
    }
    out.push_str(&format!(
        "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n",
        x = fmt(ML),
        y = fmt(MT),
        w = fmt(WIDTH - ML - MR),
        h = fmt(HEIGHT - MT - MB),
    ));
    text(out, ML + (WIDTH - ML - MR) / 2.0, HEIGHT - 14.0, "middle", 11, "", &escape(x_label));
    text(
        out,
        20.0,
        MT + (HEIGHT - MT - MB) / 2.0,
        "middle",
        11,
        &format!(
            " transform=\"rotate(-90 {} {})\"",
            fmt(20.0),
            fmt(MT + (HEIGHT - MT - MB) / 2.0)
        ),
        &escape(y_label),
    );
}

/// Render one or more line series over shared axes, with optional vertical
/// event markers.
pub fn line_panel(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    vlines: &[VLine],
) -> String {
    let (x_lo, x_hi) = span(
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .chain(vlines.iter().map(|v| v.x)),
    );
    let (y_lo, y_hi) = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let frame = Frame { x_lo, x_hi, y_lo, y_hi };

    let mut out = String::new();
    open_svg(&mut out, title);
    frame_with_ticks(&mut out, &frame, x_label, y_label);

    for v in vlines {
        let x = frame.x(v.x);
        out.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{t}\" x2=\"{x}\" y2=\"{b}\" stroke=\"#999999\" \
             stroke-width=\"1\" stroke-dasharray=\"4 3\"/>\n",
            x = fmt(x),
            t = fmt(MT),
            b = fmt(HEIGHT - MB),
        ));
        text(&mut out, x, MT - 5.0, "middle", 9, "", &escape(v.label));
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{},{}", fmt(frame.x(x)), fmt(frame.y(y))))
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                pts.join(" "),
            ));
        }
        if s.points.len() <= 80 {
            for &(x, y) in &s.points {
                out.push_str(&format!(
                    "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n",
                    fmt(frame.x(x)),
                    fmt(frame.y(y)),
                ));
            }
        }
    }

    if series.len() > 1 {
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let y = MT + 14.0 + i as f64 * 16.0;
            let x = WIDTH - MR - 150.0;
            out.push_str(&format!(
                "<line x1=\"{a}\" y1=\"{y}\" x2=\"{b}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                a = fmt(x),
                b = fmt(x + 18.0),
                y = fmt(y),
            ));
            text(&mut out, x + 24.0, y + 3.5, "start", 10, "", &escape(&s.label));
        }
    }

    out.push_str("</svg>\n");
    out
}

/// Render labeled bars from a zero baseline.
pub fn bar_panel(title: &str, x_label: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let hi = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let frame = Frame {
        x_lo: 0.0,
        x_hi: 1.0,
        y_lo: 0.0,
        y_hi: if hi > 0.0 { hi * 1.1 } else { 1.0 },
    };

    let mut out = String::new();
    open_svg(&mut out, title);
    // Y grid and ticks only; the x axis is categorical.
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let yv = frame.y_lo + f * (frame.y_hi - frame.y_lo);
        let yp = frame.y(yv);
        out.push_str(&format!(
            "<line x1=\"{l}\" y1=\"{y}\" x2=\"{r}\" y2=\"{y}\" stroke=\"#e4e4e4\" stroke-width=\"1\"/>\n",
            l = fmt(ML),
            r = fmt(WIDTH - MR),
            y = fmt(yp),
        ));
        text(&mut out, ML - 8.0, yp + 3.5, "end", 10, "", &fmt(yv));
    }
    out.push_str(&format!(
        "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n",
        x = fmt(ML),
        y = fmt(MT),
        w = fmt(WIDTH - ML - MR),
        h = fmt(HEIGHT - MT - MB),
    ));
    text(&mut out, ML + (WIDTH - ML - MR) / 2.0, HEIGHT - 14.0, "middle", 11, "", &escape(x_label));
    text(
        &mut out,
        20.0,
        MT + (HEIGHT - MT - MB) / 2.0,
        "middle",
        11,
        &format!(
            " transform=\"rotate(-90 {} {})\"",
            fmt(20.0),
            fmt(MT + (HEIGHT - MT - MB) / 2.0)
        ),
        &escape(y_label),
    );

    let n = bars.len();
    if n > 0 {
        let slot = (WIDTH - ML - MR) / n as f64;
        for (i, (label, value)) in bars.iter().enumerate() {
            let cx = ML + (i as f64 + 0.5) * slot;
            let bw = slot * 0.6;
            let top = frame.y(*value);
            out.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"{c}\"/>\n",
                x = fmt(cx - bw / 2.0),
                y = fmt(top),
                w = fmt(bw),
                h = fmt(HEIGHT - MB - top),
                c = PALETTE[0],
            ));
            text(&mut out, cx, top - 5.0, "middle", 10, "", &fmt(*value));
            text(&mut out, cx, HEIGHT - MB + 16.0, "middle", 10, "", &escape(label));
        }
    }

    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_formatting_is_compact() {
        assert_eq!(fmt(0.0), "0");
        assert_eq!(fmt(-0.0), "0");
        assert_eq!(fmt(1.0), "1");
        assert_eq!(fmt(0.5), "0.5");
        assert_eq!(fmt(1234567.0), "1234567");
        assert_eq!(fmt(0.000125), "0.000125");
        assert_eq!(fmt(1e-9), "0");
        assert_eq!(fmt(f64::NAN), "0");
    }

    #[test]
    fn line_panel_is_deterministic_and_wellformed() {
        let series = vec![
            Series { label: "a".into(), points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, 2.0)] },
            Series { label: "b".into(), points: vec![(0.0, 2.0), (1.0, 1.5), (2.0, 1.0)] },
        ];
        let vlines = vec![VLine { x: 1.0, label: "expand" }];
        let a = line_panel("title", "x", "y", &series, &vlines);
        let b = line_panel("title", "x", "y", &series, &vlines);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("stroke-dasharray"));
        // Two series get a legend.
        assert!(a.contains(">a</text>"));
    }

    #[test]
    fn degenerate_inputs_still_render() {
        // No points at all.
        let empty = line_panel("empty", "x", "y", &[Series { label: "s".into(), points: vec![] }], &[]);
        assert!(empty.contains("</svg>"));
        assert_eq!(empty.matches("<polyline").count(), 0);
        // A single flat point.
        let flat = line_panel(
            "flat",
            "x",
            "y",
            &[Series { label: "s".into(), points: vec![(0.0, 5.0)] }],
            &[],
        );
        assert!(flat.contains("<circle"));
        // Bars with no entries.
        let bars = bar_panel("none", "layer", "width", &[]);
        assert!(bars.contains("</svg>"));
    }

    #[test]
    fn bar_panel_draws_one_rect_per_bar() {
        let bars = vec![("g0".to_string(), 3.0), ("g1".to_string(), 5.0)];
        let svg = bar_panel("widths", "layer", "width", &bars);
        // One frame rect, one background rect, two bars.
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains(">g1</text>"));
        assert!(svg.contains(">5</text>"));
    }

    #[test]
    fn labels_are_escaped() {
        let svg = line_panel(
            "a<b",
            "x&y",
            "p\"q\"",
            &[Series { label: "s".into(), points: vec![(0.0, 0.0)] }],
            &[],
        );
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("x&amp;y"));
        assert!(svg.contains("p&quot;q&quot;"));
    }
}
