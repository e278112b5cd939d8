//! Minimal SVG line charts: one polyline per series over a shaded min/max band.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bounds over finite values, padded when flat.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

impl Chart {
    pub fn render(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = range(pts().map(|p| p.x));
        let (y0, y1) = range(pts().flat_map(|p| [p.min, p.max, p.mean]));
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let mut w = |text: String| s.push_str(&text);
        w(format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        ));
        w(format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
        w(format!(
            "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            LEFT + pw / 2.0,
            escape(&self.title)
        ));
        w(format!(
            "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>\n"
        ));
        for i in 0..=4 {
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            w(format!(
                "<line x1=\"{LEFT}\" x2=\"{:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
                LEFT + pw,
                sy(fy),
                sy(fy)
            ));
            w(format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{fy:.3}</text>\n", LEFT - 6.0, sy(fy) + 4.0));
            w(format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{fx:.1}</text>\n", sx(fx), TOP + ph + 18.0));
        }
        w(format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            LEFT + pw / 2.0,
            H - 12.0,
            escape(&self.x_label)
        ));
        w(format!(
            "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        ));
        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let finite: Vec<&Point> =
                series.points.iter().filter(|p| p.mean.is_finite() && p.min.is_finite() && p.max.is_finite()).collect();
            if finite.len() > 1 {
                let mut band = String::new();
                for p in &finite {
                    write!(band, "{:.2},{:.2} ", sx(p.x), sy(p.max)).expect("string write");
                }
                for p in finite.iter().rev() {
                    write!(band, "{:.2},{:.2} ", sx(p.x), sy(p.min)).expect("string write");
                }
                w(format!("<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n", band.trim_end()));
            }
            let line: Vec<String> = finite.iter().map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean))).collect();
            w(format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                line.join(" ")
            ));
            for p in &finite {
                w(format!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n", sx(p.x), sy(p.mean)));
            }
            let ly = TOP + 10.0 + 18.0 * k as f64;
            w(format!(
                "<line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{ly:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                LEFT + pw + 12.0,
                LEFT + pw + 32.0
            ));
            w(format!(
                "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
                LEFT + pw + 38.0,
                ly + 4.0,
                escape(&series.label)
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_series_and_skips_non_finite_points() {
        let chart = Chart {
            title: "gap <vs> t".into(),
            x_label: "t".into(),
            y_label: "gap".into(),
            series: vec![Series {
                label: "none".into(),
                points: vec![
                    Point { x: 6.0, mean: 1.0, min: 0.9, max: 1.1 },
                    Point { x: 10.0, mean: f64::NAN, min: f64::NAN, max: f64::NAN },
                    Point { x: 30.0, mean: 0.5, min: 0.4, max: 0.7 },
                ],
            }],
        };
        let svg = chart.render();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("gap &lt;vs&gt; t"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn empty_chart_still_renders() {
        let chart = Chart { title: String::new(), x_label: String::new(), y_label: String::new(), series: vec![] };
        assert!(chart.render().contains("</svg>"));
    }
}
