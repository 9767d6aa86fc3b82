//! Hand-rolled SVG line chart of a metrics log: λ₁ and the threshold on
//! the left axis, loss on the right. No plotting dependency.

use crate::harness::RunRow;

const W: f64 = 900.0;
const H: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 80.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

struct Series<'a> {
    name: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
    right_axis: bool,
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let coords: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
        coords.join(" ")
    )
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() || lo == hi {
        return (lo.min(0.0), hi.max(1.0).max(lo + 1.0));
    }
    let pad = 0.05 * (hi - lo);
    ((lo - pad).min(0.0).max(lo - pad), hi + pad)
}

/// Renders one run's metrics as a two-axis line chart.
pub fn render_svg(rows: &[RunRow]) -> String {
    let lambda: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.lambda1.map(|l| (r.step as f64, l)))
        .collect();
    let threshold: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.threshold.map(|t| (r.step as f64, t)))
        .collect();
    let loss: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.loss.map(|l| (r.step as f64, l as f64)))
        .collect();
    let avg_ret: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.avg_return.map(|a| (r.step as f64, a as f64)))
        .collect();

    let x_min = rows.first().map(|r| r.step as f64).unwrap_or(0.0);
    let x_max = rows.last().map(|r| r.step as f64).unwrap_or(1.0).max(x_min + 1.0);

    let left_vals = lambda.iter().chain(&threshold).map(|&(_, v)| v);
    let (l_lo, l_hi) = nice_range(
        left_vals.clone().fold(f64::INFINITY, f64::min),
        left_vals.fold(f64::NEG_INFINITY, f64::max),
    );
    let right_vals = loss.iter().chain(&avg_ret).map(|&(_, v)| v);
    let (r_lo, r_hi) = nice_range(
        right_vals.clone().fold(f64::INFINITY, f64::min),
        right_vals.fold(f64::NEG_INFINITY, f64::max),
    );

    let plot_w = W - MARGIN_L - MARGIN_R;
    let plot_h = H - MARGIN_T - MARGIN_B;
    let sx = move |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let sy_left = move |y: f64| MARGIN_T + (1.0 - (y - l_lo) / (l_hi - l_lo)) * plot_h;
    let sy_right = move |y: f64| MARGIN_T + (1.0 - (y - r_lo) / (r_hi - r_lo)) * plot_h;

    let series = [
        Series { name: "lambda1", color: "#1f77b4", points: lambda, right_axis: false },
        Series { name: "threshold", color: "#7f7f7f", points: threshold, right_axis: false },
        Series { name: "loss", color: "#d62728", points: loss, right_axis: true },
        Series { name: "avg_return", color: "#2ca02c", points: avg_ret, right_axis: true },
    ];

    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#
    ));
    svg.push('\n');
    // Axes.
    svg.push_str(&format!(
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black"/>"#,
        H - MARGIN_B
    ));
    svg.push_str(&format!(
        r#"<line x1="{}" y1="{MARGIN_T}" x2="{}" y2="{}" stroke="black"/>"#,
        W - MARGIN_R,
        W - MARGIN_R,
        H - MARGIN_B
    ));
    svg.push_str(&format!(
        r#"<line x1="{MARGIN_L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - MARGIN_B,
        W - MARGIN_R,
        H - MARGIN_B
    ));
    svg.push('\n');
    // Axis labels.
    svg.push_str(&format!(
        r#"<text x="{MARGIN_L}" y="{}" font-size="12">step: {x_min:.0} to {x_max:.0}</text>"#,
        H - 12.0
    ));
    svg.push_str(&format!(
        r#"<text x="4" y="{MARGIN_T}" font-size="12">lambda1 / threshold: {l_lo:.1} to {l_hi:.1}</text>"#
    ));
    svg.push_str(&format!(
        r#"<text x="{}" y="{MARGIN_T}" font-size="12">loss / return: {r_lo:.3} to {r_hi:.3}</text>"#,
        W - MARGIN_R
    ));
    svg.push('\n');

    let mut legend_y = MARGIN_T + 14.0;
    for s in &series {
        if s.points.is_empty() {
            continue;
        }
        let mapped: Vec<(f64, f64)> = s
            .points
            .iter()
            .map(|&(x, y)| (sx(x), if s.right_axis { sy_right(y) } else { sy_left(y) }))
            .collect();
        svg.push_str(&polyline(&mapped, s.color));
        svg.push('\n');
        svg.push_str(&format!(
            r#"<text x="{}" y="{legend_y}" font-size="12" fill="{}">{}</text>"#,
            MARGIN_L + 8.0,
            s.color,
            s.name
        ));
        svg.push('\n');
        legend_y += 14.0;
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows_give_three_points_per_series() {
        let rows: Vec<RunRow> = (0..3)
            .map(|i| RunRow {
                step: i * 100,
                loss: Some(1.0 / (i + 1) as f32),
                lambda1: Some(50.0 * (i + 1) as f64),
                threshold: Some(360.0),
                avg_return: Some(i as f32),
                episodes: i,
            })
            .collect();
        let svg = render_svg(&rows);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("</svg>"));
        for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
            let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            assert_eq!(pts.split_whitespace().count(), 3, "series {line}");
        }
        assert_eq!(svg.matches("<polyline").count(), 4);
    }

    #[test]
    fn missing_series_are_omitted() {
        let rows = vec![RunRow {
            step: 0,
            loss: Some(0.5),
            lambda1: None,
            threshold: None,
            avg_return: None,
            episodes: 0,
        }];
        let svg = render_svg(&rows);
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
