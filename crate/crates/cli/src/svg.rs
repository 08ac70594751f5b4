//! Log-log plot of per-depth optima with fitted power laws.

use std::fmt::Write;

use depthlaw_core::sweep::PowerLawFit;

const W: f64 = 640.0;
const H: f64 = 440.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn half_ci(var: f64, n: usize) -> f64 {
    1.96 * (var / n.max(1) as f64).sqrt()
}

/// Renders one series per `(label, fit)`. Axes are log10 L and log10 eta*.
pub fn emit_svg_plot(fits: &[(String, PowerLawFit)]) -> anyhow::Result<String> {
    if fits.is_empty() || fits.iter().any(|(_, f)| f.points.is_empty()) {
        anyhow::bail!("cannot plot an empty fit");
    }
    let pts = || fits.iter().flat_map(|(_, f)| f.points.iter());
    let xs: Vec<f64> = pts().map(|p| (p.depth as f64).log10()).collect();
    let lo_y = pts()
        .map(|p| p.mean_log_eta - half_ci(p.var, p.n))
        .fold(f64::INFINITY, f64::min);
    let hi_y = pts()
        .map(|p| p.mean_log_eta + half_ci(p.var, p.n))
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut x0, mut x1) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (mut y0, mut y1) = (lo_y, hi_y);
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let mx = 0.08 * (x1 - x0);
    let my = 0.08 * (y1 - y0);
    let fr = Frame {
        x0: x0 - mx,
        x1: x1 + mx,
        y0: y0 - my,
        y1: y1 + my,
    };

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )?;
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(
        s,
        r#"<path d="M{:.2} {:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        PAD,
        PAD,
        H - PAD,
        W - PAD
    )?;
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">log10 L</text>"#,
        W / 2.0,
        H - 15.0
    )?;
    writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" font-size="13" transform="rotate(-90 15 {:.2})">log10 eta*</text>"#,
        H / 2.0,
        H / 2.0
    )?;
    for (tick, x) in [(fr.x0 + mx, x0), (fr.x1 - mx, x1)] {
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{:.2}</text>"#,
            fr.px(tick),
            H - PAD + 16.0,
            x
        )?;
    }
    for y in [y0, y1] {
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">{:.2}</text>"#,
            PAD - 6.0,
            fr.py(y) + 4.0,
            y
        )?;
    }
    for (i, (label, fit)) in fits.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        writeln!(s, r#"<g stroke="{color}" fill="{color}">"#)?;
        for p in &fit.points {
            let (x, y, e) = (
                (p.depth as f64).log10(),
                p.mean_log_eta,
                half_ci(p.var, p.n),
            );
            writeln!(
                s,
                r#"<path d="M{0:.2} {1:.2} V{2:.2}" fill="none"/>"#,
                fr.px(x),
                fr.py(y - e),
                fr.py(y + e)
            )?;
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4"/>"#,
                fr.px(x),
                fr.py(y)
            )?;
        }
        let (a, b) = (fr.x0 + mx, fr.x1 - mx);
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke-width="2"/>"#,
            fr.px(a),
            fr.py(fit.beta0 + fit.alpha * a),
            fr.px(b),
            fr.py(fit.beta0 + fit.alpha * b)
        )?;
        writeln!(s, "</g>")?;
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" fill="{color}">{label}: slope {:.3}</text>"#,
            W - PAD - 150.0,
            PAD + 18.0 * (i as f64 + 1.0),
            fit.alpha
        )?;
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use depthlaw_core::sweep::{wls_fit, DepthPoint};

    fn fit() -> PowerLawFit {
        let pts = [4usize, 16]
            .iter()
            .map(|&l| DepthPoint {
                depth: l,
                mean_log_eta: 1.0 - 1.5 * (l as f64).log10(),
                var: 0.01,
                n: 3,
            })
            .collect::<Vec<_>>();
        wls_fit(&pts).unwrap()
    }

    #[test]
    fn one_fit_line() {
        let s = emit_svg_plot(&[("mlp".into(), fit())]).unwrap();
        assert_eq!(s.matches("<line").count(), 1);
        assert!(s.contains("slope -1.500"));
        assert_eq!(s, emit_svg_plot(&[("mlp".into(), fit())]).unwrap());
    }

    #[test]
    fn empty_is_error() {
        assert!(emit_svg_plot(&[]).is_err());
    }
}
