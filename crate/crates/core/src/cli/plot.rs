//! Self-contained SVG violin plots.

use std::fmt::Write as _;

const WIDTH_PER_GROUP: f64 = 220.0;
const HEIGHT: f64 = 360.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 70.0;
const KDE_POINTS: usize = 64;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One violin: a label and its samples.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

/// Violins sharing an x-axis slot.
#[derive(Debug, Clone)]
pub struct Group {
    pub label: String,
    pub series: Vec<Series>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule of thumb, `0.9 min(σ, IQR/1.34) n^{-1/5}`, floored so
/// that constant samples still get a visible width.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.01;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let (_, sd) = mean_sd(&s);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    (0.9 * spread * (s.len() as f64).powf(-0.2)).max(0.005)
}

/// Gaussian kernel density estimate at `grid`.
pub fn kde(values: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&g| {
            values
                .iter()
                .map(|&v| (-0.5 * ((g - v) / bandwidth).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Violin plot with a fixed `[y_min, y_max]` axis. Output depends only on
/// the inputs.
pub fn violin_svg(title: &str, y_label: &str, groups: &[Group], y_range: (f64, f64)) -> String {
    let (y_min, y_max) = y_range;
    let width = MARGIN_L + MARGIN_R + WIDTH_PER_GROUP * groups.len().max(1) as f64;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let y_px = |v: f64| MARGIN_T + plot_h * (1.0 - (v.clamp(y_min, y_max) - y_min) / (y_max - y_min));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{HEIGHT:.0}" viewBox="0 0 {width:.0} {HEIGHT:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    // axis and grid
    for k in 0..=5 {
        let v = y_min + (y_max - y_min) * k as f64 / 5.0;
        let y = y_px(v);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_L:.1}" y1="{y:.2}" x2="{:.1}" y2="{y:.2}" stroke="#dddddd"/>"##,
            width - MARGIN_R
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            MARGIN_L - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    );

    let mut legend: Vec<String> = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let x0 = MARGIN_L + WIDTH_PER_GROUP * gi as f64;
        let slot = WIDTH_PER_GROUP / g.series.len().max(1) as f64;
        let half = slot * 0.42;
        for (si, series) in g.series.iter().enumerate() {
            if !legend.contains(&series.label) {
                legend.push(series.label.clone());
            }
            let color = PALETTE[legend.iter().position(|l| l == &series.label).unwrap_or(0) % PALETTE.len()];
            let cx = x0 + slot * (si as f64 + 0.5);
            let vals: Vec<f64> = series.values.iter().copied().filter(|v| v.is_finite()).collect();
            if vals.is_empty() {
                continue;
            }
            let h = silverman_bandwidth(&vals);
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min) - 2.0 * h;
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 2.0 * h;
            let (lo, hi) = (lo.max(y_min), hi.min(y_max));
            let grid: Vec<f64> = (0..KDE_POINTS)
                .map(|k| lo + (hi - lo) * k as f64 / (KDE_POINTS - 1) as f64)
                .collect();
            let dens = kde(&vals, h, &grid);
            let peak = dens.iter().copied().fold(0.0_f64, f64::max).max(1e-300);
            let mut pts: Vec<String> = grid
                .iter()
                .zip(&dens)
                .map(|(&g, &d)| format!("{:.2},{:.2}", cx + half * d / peak, y_px(g)))
                .collect();
            pts.extend(
                grid.iter()
                    .zip(&dens)
                    .rev()
                    .map(|(&g, &d)| format!("{:.2},{:.2}", cx - half * d / peak, y_px(g))),
            );
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.35" stroke="{color}"/>"#,
                pts.join(" ")
            );
            for &v in &vals {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{cx:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
                    y_px(v)
                );
            }
            let (m, _) = mean_sd(&vals);
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
                cx - half * 0.6,
                y_px(m),
                cx + half * 0.6,
                y_px(m)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + WIDTH_PER_GROUP / 2.0,
            HEIGHT - MARGIN_B + 20.0,
            escape(&g.label)
        );
    }
    for (k, l) in legend.iter().enumerate() {
        let x = MARGIN_L + 110.0 * k as f64;
        let y = HEIGHT - 20.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}" fill-opacity="0.6"/>"#,
            y - 10.0,
            PALETTE[k % PALETTE.len()]
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 16.0, escape(l));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silverman_matches_hand_computation() {
        // sd = 1.5811, IQR = 2 -> min(1.5811, 1.4925) = 1.4925; 0.9 * 1.4925 * 5^-0.2
        let h = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let expect = 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2);
        assert!((h - expect).abs() < 1e-12);
    }

    #[test]
    fn kde_integrates_to_one() {
        let vals = [0.2, 0.5, 0.55, 0.9];
        let h = silverman_bandwidth(&vals);
        let grid: Vec<f64> = (0..4001).map(|k| -3.0 + 7.0 * k as f64 / 4000.0).collect();
        let d = kde(&vals, h, &grid);
        let area: f64 = d.windows(2).map(|w| (w[0] + w[1]) / 2.0 * 7.0 / 4000.0).sum();
        assert!((area - 1.0).abs() < 1e-6);
    }

    #[test]
    fn svg_is_deterministic_and_escaped() {
        let groups = vec![Group {
            label: "n_A = 2".into(),
            series: vec![
                Series { label: "Ours".into(), values: vec![0.9, 0.95, 0.97] },
                Series { label: "Base <a>".into(), values: vec![0.7, 0.8] },
            ],
        }];
        let a = violin_svg("t", "MCC", &groups, (0.0, 1.0));
        assert_eq!(a, violin_svg("t", "MCC", &groups, (0.0, 1.0)));
        assert!(a.contains("Base &lt;a&gt;"));
        assert_eq!(a.matches("<polygon").count(), 2);
    }
}
