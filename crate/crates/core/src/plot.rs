//! Hand-rolled SVG line charts. Rendering is a pure function of the
//! numeric inputs — emitting a chart can never change what the numbers
//! are, and identical inputs produce identical bytes.

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt(x: f64) -> String {
    format!("{:.2}", x)
}

fn fmt_tick(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let magnitude = x.abs();
    if (1e-3..1e5).contains(&magnitude) {
        let s = format!("{:.4}", x);
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() { "0".to_string() } else { s }
    } else {
        format!("{:e}", x)
    }
}

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Option<Range> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > hi {
            return None;
        }
        if lo == hi {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
            lo -= pad;
            hi += pad;
        }
        Some(Range { lo, hi })
    }

    fn place(&self, v: f64, out_lo: f64, out_hi: f64) -> f64 {
        out_lo + (v - self.lo) / (self.hi - self.lo) * (out_hi - out_lo)
    }
}

/// Renders named series as one SVG line chart. Non-finite points are
/// dropped; an empty chart still renders its frame and labels.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite: Vec<(usize, Vec<(f64, f64)>)> = series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                i,
                s.points
                    .iter()
                    .copied()
                    .filter(|&(x, y)| x.is_finite() && y.is_finite())
                    .collect(),
            )
        })
        .collect();
    let xr = Range::of(finite.iter().flat_map(|(_, p)| p.iter().map(|&(x, _)| x)));
    let yr = Range::of(finite.iter().flat_map(|(_, p)| p.iter().map(|&(_, y)| y)));
    let plot_left = MARGIN_LEFT;
    let plot_right = WIDTH - MARGIN_RIGHT;
    let plot_top = MARGIN_TOP;
    let plot_bottom = HEIGHT - MARGIN_BOTTOM;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        (plot_left + plot_right) / 2.0,
        escape(title)
    ));
    svg.push_str(&format!(
        "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        fmt(plot_left),
        fmt(plot_top),
        fmt(plot_right - plot_left),
        fmt(plot_bottom - plot_top)
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (plot_left + plot_right) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        (plot_top + plot_bottom) / 2.0,
        (plot_top + plot_bottom) / 2.0,
        escape(y_label)
    ));

    if let (Some(xr), Some(yr)) = (&xr, &yr) {
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = xr.lo + f * (xr.hi - xr.lo);
            let yv = yr.lo + f * (yr.hi - yr.lo);
            let xp = xr.place(xv, plot_left, plot_right);
            let yp = yr.place(yv, plot_bottom, plot_top);
            svg.push_str(&format!(
                "  <line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#ccc\"/>\n",
                fmt(xp),
                fmt(plot_top),
                fmt(plot_bottom)
            ));
            svg.push_str(&format!(
                "  <line x1=\"{0}\" y1=\"{2}\" x2=\"{1}\" y2=\"{2}\" stroke=\"#ccc\"/>\n",
                fmt(plot_left),
                fmt(plot_right),
                fmt(yp)
            ));
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                fmt(xp),
                fmt(plot_bottom + 18.0),
                fmt_tick(xv)
            ));
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
                fmt(plot_left - 6.0),
                fmt(yp + 4.0),
                fmt_tick(yv)
            ));
        }
        for (i, points) in &finite {
            if points.is_empty() {
                continue;
            }
            let color = PALETTE[i % PALETTE.len()];
            let coords: Vec<String> = points
                .iter()
                .map(|&(x, y)| {
                    format!(
                        "{},{}",
                        fmt(xr.place(x, plot_left, plot_right)),
                        fmt(yr.place(y, plot_bottom, plot_top))
                    )
                })
                .collect();
            if points.len() == 1 {
                let (x, y) = points[0];
                svg.push_str(&format!(
                    "  <circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>\n",
                    fmt(xr.place(x, plot_left, plot_right)),
                    fmt(yr.place(y, plot_bottom, plot_top)),
                    color
                ));
            } else {
                svg.push_str(&format!(
                    "  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                    color,
                    coords.join(" ")
                ));
            }
        }
    }

    for (slot, (i, _)) in finite.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = plot_top + 14.0 * slot as f64;
        svg.push_str(&format!(
            "  <line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{3}\" stroke-width=\"2\"/>\n",
            fmt(plot_right + 10.0),
            fmt(y),
            fmt(plot_right + 28.0),
            color
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\">{}</text>\n",
            fmt(plot_right + 33.0),
            fmt(y + 4.0),
            escape(&series[*i].name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// A chart over labeled categories (x positions 0, 1, ...), e.g. one
/// exponent per method.
pub fn categorical_chart(title: &str, y_label: &str, labels: &[String], values: &[f64]) -> String {
    let series = vec![Series {
        name: y_label.to_string(),
        points: values
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as f64, v))
            .collect(),
    }];
    let mut svg = line_chart(title, "", y_label, &series);
    let plot_left = MARGIN_LEFT;
    let plot_right = WIDTH - MARGIN_RIGHT;
    let n = labels.len();
    if n > 0 {
        let mut names = String::new();
        for (i, label) in labels.iter().enumerate() {
            let x = if n == 1 {
                (plot_left + plot_right) / 2.0
            } else {
                plot_left + (plot_right - plot_left) * i as f64 / (n - 1) as f64
            };
            names.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
                fmt(x),
                fmt(HEIGHT - MARGIN_BOTTOM + 32.0),
                escape(label)
            ));
        }
        svg = svg.replace("</svg>\n", &format!("{names}</svg>\n"));
    }
    svg
}
