//! Minimal static SVG plots: loss curves and comparison bars. Output is a
//! pure function of the inputs (no timestamps), so plot files are part of
//! the deterministic run artifacts.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 40.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn fnum(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"monospace\" font-size=\"11\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"16\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n"
        ),
        w = WIDTH,
        h = HEIGHT,
        tx = WIDTH / 2.0,
        title = title
    )
}

/// Multi-series line chart (training-loss curves).
pub fn loss_curve_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let mut svg = header(title);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;

    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, v) in series {
        for &x in v {
            y_min = y_min.min(x);
            y_max = y_max.max(x);
        }
    }
    if !y_min.is_finite() || max_len < 2 {
        svg.push_str("<text x=\"320\" y=\"180\" text-anchor=\"middle\">no data</text></svg>\n");
        return svg;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let sx = |i: usize| MARGIN_L + plot_w * i as f64 / (max_len - 1) as f64;
    let sy = |v: f64| MARGIN_T + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    for t in 0..=4 {
        let v = y_min + (y_max - y_min) * t as f64 / 4.0;
        let y = sy(v);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            WIDTH - MARGIN_R
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            y + 4.0,
            fnum(v)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">step</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 10.0
    ));

    for (si, (label, values)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", sx(i), sy(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{label}</text>\n",
            MARGIN_L + 8.0,
            MARGIN_T + 14.0 + 14.0 * si as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Labeled bar chart (metric comparisons across runs).
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let mut svg = header(title);
    if bars.is_empty() {
        svg.push_str("<text x=\"320\" y=\"180\" text-anchor=\"middle\">no data</text></svg>\n");
        return svg;
    }
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let y_max = bars.iter().map(|(_, v)| *v).fold(0.0_f64, f64::max).max(1e-12);
    let slot = plot_w / bars.len() as f64;
    let bar_w = (slot * 0.6).min(80.0);

    for t in 0..=4 {
        let v = y_max * t as f64 / 4.0;
        let y = MARGIN_T + plot_h * (1.0 - v / y_max);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            WIDTH - MARGIN_R
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            y + 4.0,
            fnum(v)
        ));
    }
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = MARGIN_L + slot * i as f64 + (slot - bar_w) / 2.0;
        let h = plot_h * value / y_max;
        let y = MARGIN_T + plot_h - h;
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"{color}\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            x + bar_w / 2.0,
            y - 4.0,
            fnum(*value)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>\n",
            x + bar_w / 2.0,
            HEIGHT - MARGIN_B + 16.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_output_is_deterministic_and_well_formed() {
        let series = vec![("xpt".to_string(), vec![5.0, 4.0, 3.2, 2.9])];
        let a = loss_curve_svg("loss", &series);
        let b = loss_curve_svg("loss", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        let bars = bar_chart_svg("f1", &[("a".into(), 0.8), ("b".into(), 0.5)]);
        assert!(bars.contains("<rect"));
    }
}
