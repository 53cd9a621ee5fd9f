use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{mean_std, metrics_files, read_metrics, MetricRecord};
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 80.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

/// Cross-seed curve of one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub metric: String,
    pub steps: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Curves for `mean_return` and every learner scalar found in the records.
pub fn curves(per_seed: &[Vec<MetricRecord>]) -> Vec<Curve> {
    let rows = per_seed.iter().map(|r| r.len()).min().unwrap_or(0);
    let mut keys = BTreeSet::new();
    for rec in per_seed.iter().flatten() {
        keys.extend(rec.scalars().into_keys());
    }
    keys.remove("updates");
    let mut out = Vec::new();
    for k in keys {
        let mut c = Curve {
            metric: k.clone(),
            steps: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        };
        for i in 0..rows {
            let vals: Vec<f64> = per_seed
                .iter()
                .filter_map(|r| r[i].scalars().get(&k).copied())
                .filter(|v| v.is_finite())
                .collect();
            if vals.is_empty() {
                continue;
            }
            let (m, s) = mean_std(&vals);
            c.steps.push(per_seed[0][i].env_steps as f64);
            c.mean.push(m);
            c.std.push(s);
        }
        out.push(c);
    }
    out
}

fn range(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo > 1e-12 {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

/// Line chart with a shaded ±1 std band.
pub fn render_svg(c: &Curve) -> String {
    let n = c.steps.len();
    let (x0, x1) = match n {
        0 => (0.0, 1.0),
        _ => range(c.steps[0], c.steps[n - 1]),
    };
    let lo = c.mean.iter().zip(&c.std).map(|(m, s)| m - s).fold(f64::INFINITY, f64::min);
    let hi = c.mean.iter().zip(&c.std).map(|(m, s)| m + s).fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = if n == 0 { (0.0, 1.0) } else { range(lo, hi) };
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = WIDTH,
        h = HEIGHT
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(&c.metric)
    );
    // axes
    let _ = writeln!(
        s,
        r#"<path d="M{l},{t} V{b} H{r}" stroke="black" fill="none"/>"#,
        l = MARGIN_L,
        t = MARGIN_T,
        b = MARGIN_T + ph,
        r = MARGIN_L + pw
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(fx),
            MARGIN_T + ph + 18.0,
            tick(fx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN_L - 6.0,
            py(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">env steps</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0,
        escape(&c.metric)
    );
    if n > 0 {
        let mut band = String::new();
        for i in 0..n {
            let _ = write!(band, "{:.2},{:.2} ", px(c.steps[i]), py(c.mean[i] + c.std[i]));
        }
        for i in (0..n).rev() {
            let _ = write!(band, "{:.2},{:.2} ", px(c.steps[i]), py(c.mean[i] - c.std[i]));
        }
        let _ = writeln!(
            s,
            r#"<polygon class="band" points="{}" fill="steelblue" fill-opacity="0.25" stroke="none"/>"#,
            band.trim_end()
        );
        let line: Vec<String> = (0..n)
            .map(|i| format!("{:.2},{:.2}", px(c.steps[i]), py(c.mean[i])))
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

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{:.1e}", v)
    } else {
        format!("{:.2}", v)
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<metric>.svg` into `dir` for every metric found in the
/// per-seed metrics files there.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let files = metrics_files(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no metrics files in {}", dir.display())));
    }
    let per_seed = files
        .iter()
        .map(|(_, p)| read_metrics(p))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for c in curves(&per_seed) {
        let path = dir.join(format!("{}.svg", c.metric));
        std::fs::write(&path, render_svg(&c)).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}
