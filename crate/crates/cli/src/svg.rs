//! Minimal hand-rolled SVG charts: a grouped bar chart and log-log curves.
//! No styling dependencies; every number plotted also lands in a CSV next to
//! the image, so the charts are presentation only.

const W: f64 = 860.0;
const H: f64 = 420.0;
const ML: f64 = 64.0;
const MR: f64 = 20.0;
const MT: f64 = 46.0;
const MB: f64 = 74.0;

const PALETTE: [&str; 7] = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{t}</text>\n"
        ),
        w = W,
        h = H,
        cx = W / 2.0,
        t = esc(title)
    )
}

fn legend(out: &mut String, labels: &[&str]) {
    let mut x = ML;
    for (i, label) in labels.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        out.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            y = H - 22.0
        ));
        out.push_str(&format!(
            "<text x=\"{tx}\" y=\"{ty}\">{l}</text>\n",
            tx = x + 16.0,
            ty = H - 12.0,
            l = esc(label)
        ));
        x += 16.0 + 8.0 * label.len() as f64 + 24.0;
    }
}

/// Step size giving 4-9 horizontal gridlines over `span`.
fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if mag * m >= raw {
            return mag * m;
        }
    }
    mag * 10.0
}

/// Grouped bar chart. `series` holds one value per group, aligned with
/// `groups`; NaN values are skipped.
pub fn bar_chart(title: &str, groups: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut out = header(title);
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .copied()
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max)
        * 1.12;
    let step = nice_step(ymax);
    let mut tick = 0.0;
    while tick <= ymax {
        let y = MT + plot_h * (1.0 - tick / ymax);
        out.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#ddd\"/>\n",
            x2 = W - MR
        ));
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{ty}\" text-anchor=\"end\">{tick}</text>\n",
            x = ML - 6.0,
            ty = y + 4.0
        ));
        tick += step;
    }
    let n_groups = groups.len().max(1);
    let n_series = series.len().max(1);
    let group_w = plot_w / n_groups as f64;
    let bar_w = (group_w * 0.8) / n_series as f64;
    for (gi, group) in groups.iter().enumerate() {
        let gx = ML + group_w * gi as f64;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(gi).copied().unwrap_or(f64::NAN);
            if !v.is_finite() {
                continue;
            }
            let bh = plot_h * (v / ymax).clamp(0.0, 1.0);
            let x = gx + group_w * 0.1 + bar_w * si as f64;
            let y = MT + plot_h - bh;
            out.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{bh:.1}\" fill=\"{c}\"/>\n",
                bw = bar_w.max(1.0),
                c = PALETTE[si % PALETTE.len()]
            ));
        }
        out.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{y}\" text-anchor=\"middle\">{g}</text>\n",
            x = gx + group_w / 2.0,
            y = MT + plot_h + 16.0,
            g = esc(group)
        ));
    }
    out.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = MT + plot_h,
        x2 = W - MR
    ));
    let labels: Vec<&str> = series.iter().map(|(l, _)| l.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

/// Log-log polylines of (fppi, miss rate) points. Zeros are clamped to the
/// axis minimum so curve endpoints stay visible.
pub fn loglog_curves(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = header(title);
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;
    let min_pos = |sel: &dyn Fn(&(f64, f64)) -> f64| {
        series
            .iter()
            .flat_map(|(_, pts)| pts.iter())
            .map(sel)
            .filter(|v| *v > 0.0)
            .fold(f64::INFINITY, f64::min)
    };
    let x_lo = min_pos(&|p| p.0).min(1e-2).max(1e-4).log10().floor();
    let x_hi = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .fold(1.0f64, f64::max)
        .log10()
        .ceil()
        .max(0.0);
    let y_lo = min_pos(&|p| p.1).min(1e-1).max(1e-3).log10().floor();
    let y_hi = 0.0;
    let to_xy = |fppi: f64, miss: f64| -> (f64, f64) {
        let lx = fppi.max(10f64.powf(x_lo)).log10();
        let ly = miss.max(10f64.powf(y_lo)).log10();
        (
            ML + plot_w * (lx - x_lo) / (x_hi - x_lo),
            MT + plot_h * (1.0 - (ly - y_lo) / (y_hi - y_lo)),
        )
    };
    let mut dec = x_lo;
    while dec <= x_hi + 1e-9 {
        let (x, _) = to_xy(10f64.powf(dec), 1.0);
        out.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{MT}\" x2=\"{x:.1}\" y2=\"{y2}\" stroke=\"#ddd\"/>\n",
            y2 = MT + plot_h
        ));
        out.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{y}\" text-anchor=\"middle\">1e{dec:.0}</text>\n",
            y = MT + plot_h + 16.0
        ));
        dec += 1.0;
    }
    let mut dec = y_lo;
    while dec <= y_hi + 1e-9 {
        let (_, y) = to_xy(1.0, 10f64.powf(dec));
        out.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{y:.1}\" x2=\"{x2}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n",
            x2 = W - MR
        ));
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{ty:.1}\" text-anchor=\"end\">1e{dec:.0}</text>\n",
            x = ML - 6.0,
            ty = y + 4.0
        ));
        dec += 1.0;
    }
    for (si, (_, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = sorted
            .iter()
            .map(|&(f, m)| {
                let (x, y) = to_xy(f, m);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{p}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"2\"/>\n",
            p = path.join(" "),
            c = PALETTE[si % PALETTE.len()]
        ));
    }
    out.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\">false positives per image</text>\n",
        x = ML + plot_w / 2.0,
        y = MT + plot_h + 34.0
    ));
    let labels: Vec<&str> = series.iter().map(|(l, _)| l.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}
