//! Learning curves as SVG: mean across runs with a min/max band.

use std::fmt::Write as _;

use crate::log::LogRecord;

/// `(steps, value)` points of one run: evaluations on the first evaluated
/// variant when present, episode scores otherwise.
pub fn series(records: &[LogRecord]) -> Vec<(f64, f64)> {
    let first = records.iter().find_map(|r| match r {
        LogRecord::Eval(e) => Some((e.task.as_str(), e.variant.as_str())),
        _ => None,
    });
    let evals: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval(e) if Some((e.task.as_str(), e.variant.as_str())) == first => Some((e.steps as f64, e.mean)),
            _ => None,
        })
        .collect();
    if !evals.is_empty() {
        return evals;
    }
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Episode(e) => Some((e.steps as f64, e.score)),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Aligns runs on the union of their x values, holding each run's last
/// value; a run contributes from its first point on.
pub fn envelope(runs: &[Vec<(f64, f64)>]) -> Envelope {
    let mut xs: Vec<f64> = runs.iter().flatten().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut env = Envelope {
        x: Vec::new(),
        mean: Vec::new(),
        min: Vec::new(),
        max: Vec::new(),
    };
    let mut cursor = vec![0usize; runs.len()];
    for &x in &xs {
        let mut vals = Vec::new();
        for (r, run) in runs.iter().enumerate() {
            while cursor[r] < run.len() && run[cursor[r]].0 <= x {
                cursor[r] += 1;
            }
            if cursor[r] > 0 {
                vals.push(run[cursor[r] - 1].1);
            }
        }
        env.x.push(x);
        env.mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
        env.min.push(vals.iter().copied().fold(f64::INFINITY, f64::min));
        env.max.push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    env
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{:.0}", v)
    } else {
        format!("{:.2}", v)
    }
}

pub fn render_svg(env: &Envelope, title: &str) -> String {
    let (mut x0, mut x1) = (
        env.x.first().copied().unwrap_or(0.0),
        env.x.last().copied().unwrap_or(1.0),
    );
    let mut y0 = env.min.iter().copied().fold(f64::INFINITY, f64::min);
    let mut y1 = env.max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        (x0, x1) = (x0 - 1.0, x1 + 1.0);
    }
    if y1 <= y0 {
        (y0, y1) = (y0 - 1.0, y1 + 1.0);
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<polyline points="{m},{t} {m},{b} {r},{b}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for v in ticks(x0, x1) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(v),
            H - MARGIN + 16.0,
            fmt_tick(v)
        );
    }
    for v in ticks(y0, y1) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN - 6.0,
            py(v) + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(14,{}) rotate(-90)" text-anchor="middle">return</text>"#,
        H / 2.0
    );
    if env.x.len() == 1 {
        let _ = writeln!(
            s,
            r#"<circle class="marker" cx="{:.1}" cy="{:.1}" r="4" fill="steelblue"/>"#,
            px(env.x[0]),
            py(env.mean[0])
        );
    } else if !env.x.is_empty() {
        let upper = env.x.iter().zip(&env.max).map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y)));
        let lower = env.x.iter().zip(&env.min).rev().map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            s,
            r#"<polygon class="band" points="{}" fill="steelblue" fill-opacity="0.25" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = env
            .x
            .iter()
            .zip(&env.mean)
            .map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
            line.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
