//! Self-contained SVG line plots: direct text emission, linear axes
//! auto-scaled to the data with 5% margins, exactly one polyline per series.

/// One named data series.
pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [(f64, f64)],
    /// stroke color, e.g. "#1f77b4"
    pub color: &'a str,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

fn data_range(series: &[Series<'_>]) -> ((f64, f64), (f64, f64)) {
    let mut xr = (f64::INFINITY, f64::NEG_INFINITY);
    let mut yr = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in s.points {
            xr = (xr.0.min(x), xr.1.max(x));
            yr = (yr.0.min(y), yr.1.max(y));
        }
    }
    let widen = |r: (f64, f64)| -> (f64, f64) {
        if !r.0.is_finite() || !r.1.is_finite() {
            return (0.0, 1.0);
        }
        let span = (r.1 - r.0).abs();
        let pad = if span < 1e-12 { 0.5 } else { 0.05 * span };
        (r.0 - pad, r.1 + pad)
    };
    (widen(xr), widen(yr))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a complete standalone SVG document plotting the given series.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let ((x0, x1), (y0, y1)) = data_range(series);
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));

    // axes
    let (ax0, ax1) = (px(x0), px(x1));
    let (ay0, ay1) = (py(y0), py(y1));
    svg.push_str(&format!(
        "  <line x1=\"{ax0}\" y1=\"{ay0}\" x2=\"{ax1}\" y2=\"{ay0}\" stroke=\"black\" stroke-width=\"1\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{ax0}\" y1=\"{ay0}\" x2=\"{ax0}\" y2=\"{ay1}\" stroke=\"black\" stroke-width=\"1\"/>\n"
    ));

    // ticks: 5 per axis
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        svg.push_str(&format!(
            "  <line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n",
            px(fx),
            ay0,
            ay0 + 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{:.3}</text>\n",
            px(fx),
            ay0 + 18.0,
            fx
        ));
        svg.push_str(&format!(
            "  <line x1=\"{1}\" y1=\"{0}\" x2=\"{2}\" y2=\"{0}\" stroke=\"black\"/>\n",
            py(fy),
            ax0 - 5.0,
            ax0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n",
            ax0 - 8.0,
            py(fy) + 4.0,
            fy
        ));
    }

    // axis labels
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        (ax0 + ax1) / 2.0,
        HEIGHT - 12.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{1}</text>\n",
        (ay0 + ay1) / 2.0,
        xml_escape(y_label)
    ));

    // one polyline per series plus a legend entry
    for (idx, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            s.color,
            pts.join(" ")
        ));
        let ly = MARGIN_T + 16.0 * idx as f64;
        svg.push_str(&format!(
            "  <line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{2}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_R - 120.0,
            WIDTH - MARGIN_R - 96.0,
            s.color
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN_R - 90.0,
            ly + 4.0,
            xml_escape(s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
