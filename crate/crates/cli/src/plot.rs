//! Hand-rolled SVG line and bar plots for PSNR-vs-SNR results. No plotting
//! dependency; the output is deterministic for identical inputs.

use std::fmt::Write as _;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 500.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Standard errors drawn as vertical bars when nonzero.
    pub err: Vec<f64>,
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-9);
    let raw_step = span / target as f64;
    let mag = 10f64.powf(raw_step.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64 + 0.5)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= hi + 1e-9 {
        ticks.push((t / step).round() * step);
        t += step;
    }
    ticks
}

fn fmt_num(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// PSNR-vs-SNR line plot with markers, optional error bars, and a legend.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for (&x, (&y, &e)) in s.xs.iter().zip(s.ys.iter().zip(&s.err)) {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y - e);
            y_hi = y_hi.max(y + e);
        }
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    let y_pad = ((y_hi - y_lo) * 0.08).max(0.5);
    y_lo -= y_pad;
    y_hi += y_pad;
    let x_pad = ((x_hi - x_lo) * 0.03).max(0.25);
    x_lo -= x_pad;
    x_hi += x_pad;

    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"Helvetica,Arial,sans-serif\" font-size=\"13\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    );
    // frame and grid
    let _ = write!(
        svg,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );
    for t in nice_ticks(x_lo, x_hi, 8) {
        let x = px(t);
        let _ = write!(
            svg,
            "<line x1=\"{x:.2}\" y1=\"{MARGIN_T}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#ddd\"/>\n\
             <text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 18.0,
            fmt_num(t)
        );
    }
    for t in nice_ticks(y_lo, y_hi, 8) {
        let y = py(t);
        let _ = write!(
            svg,
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            WIDTH - MARGIN_R,
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_num(t)
        );
    }
    // axis labels and title
    let _ = write!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );
    let _ = write!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"15\" \
         transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        escape(y_label)
    );
    let _ = write!(
        svg,
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    );

    // data
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> =
            s.xs.iter().zip(&s.ys).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            points.join(" ")
        );
        for ((&x, &y), &e) in s.xs.iter().zip(&s.ys).zip(&s.err) {
            if e > 0.0 {
                let _ = write!(
                    svg,
                    "<line x1=\"{0:.2}\" y1=\"{1:.2}\" x2=\"{0:.2}\" y2=\"{2:.2}\" stroke=\"{color}\"/>\n",
                    px(x),
                    py(y - e),
                    py(y + e)
                );
            }
            let _ = write!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            );
        }
    }

    // legend
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN_T + 16.0 + 18.0 * i as f64;
        let _ = write!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            MARGIN_L + 10.0,
            MARGIN_L + 34.0,
            MARGIN_L + 40.0,
            y + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub struct BarGroup {
    pub label: String,
    pub values: Vec<(String, f64)>,
}

/// Grouped bar chart (one group per model, one bar per layer).
pub fn bar_plot(title: &str, y_label: &str, groups: &[BarGroup]) -> String {
    let mut y_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    for g in groups {
        for &(_, v) in &g.values {
            y_hi = y_hi.max(v);
            y_lo = y_lo.min(v);
        }
    }
    if !y_hi.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    let span = (y_hi - y_lo).max(1.0);
    let y_min = (y_lo - 0.25 * span).max(0.0);
    let y_max = y_hi + 0.15 * span;
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_min) / (y_max - y_min) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"Helvetica,Arial,sans-serif\" font-size=\"13\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    );
    for t in nice_ticks(y_min, y_max, 8) {
        let y = py(t);
        let _ = write!(
            svg,
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            WIDTH - MARGIN_R,
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_num(t)
        );
    }
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let group_w = plot_w / groups.len().max(1) as f64;
    let mut bar_labels: Vec<String> = Vec::new();
    for g in groups {
        for (name, _) in &g.values {
            if !bar_labels.contains(name) {
                bar_labels.push(name.clone());
            }
        }
    }
    for (gi, g) in groups.iter().enumerate() {
        let x0 = MARGIN_L + gi as f64 * group_w;
        let bars = g.values.len().max(1) as f64;
        let bw = group_w * 0.7 / bars;
        for (bi, (name, v)) in g.values.iter().enumerate() {
            let color_idx = bar_labels.iter().position(|b| b == name).unwrap_or(bi);
            let color = PALETTE[color_idx % PALETTE.len()];
            let x = x0 + group_w * 0.15 + bi as f64 * bw;
            let y = py(*v);
            let _ = write!(
                svg,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n\
                 <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
                bw * 0.9,
                HEIGHT - MARGIN_B - y,
                x + bw * 0.45,
                y - 4.0,
                fmt_num(*v)
            );
        }
        let _ = write!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            x0 + group_w / 2.0,
            HEIGHT - MARGIN_B + 18.0,
            escape(&g.label)
        );
    }
    for (bi, name) in bar_labels.iter().enumerate() {
        let color = PALETTE[bi % PALETTE.len()];
        let y = MARGIN_T + 16.0 + 18.0 * bi as f64;
        let _ = write!(
            svg,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"14\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            MARGIN_L + 10.0,
            y - 8.0,
            MARGIN_L + 30.0,
            y + 1.0,
            escape(name)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"15\" \
         transform=\"rotate(-90 16 {:.2})\">{}</text>\n\
         <text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n\
         <rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#444\"/>\n",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        escape(y_label),
        WIDTH / 2.0,
        escape(title),
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_contains_series_and_axes() {
        let s = Series {
            label: "layer 1".into(),
            xs: vec![1.0, 4.0, 7.0],
            ys: vec![20.0, 22.0, 23.5],
            err: vec![0.1, 0.1, 0.1],
        };
        let svg = line_plot("demo", "test SNR (dB)", "PSNR (dB)", &[s]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("layer 1"));
        assert!(svg.contains("PSNR (dB)"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn identical_inputs_give_identical_svg() {
        let mk = || Series {
            label: "a".into(),
            xs: vec![1.0, 2.0],
            ys: vec![3.0, 4.0],
            err: vec![0.0, 0.0],
        };
        assert_eq!(line_plot("t", "x", "y", &[mk()]), line_plot("t", "x", "y", &[mk()]));
    }

    #[test]
    fn bar_plot_renders_groups() {
        let groups = vec![
            BarGroup {
                label: "L=2".into(),
                values: vec![("first".into(), 24.0), ("second".into(), 26.0)],
            },
            BarGroup {
                label: "L=3".into(),
                values: vec![("first".into(), 23.8), ("second".into(), 25.9)],
            },
        ];
        let svg = bar_plot("compare", "PSNR (dB)", &groups);
        assert!(svg.contains("L=2") && svg.contains("L=3"));
        assert!(svg.matches("<rect").count() >= 5);
    }
}
