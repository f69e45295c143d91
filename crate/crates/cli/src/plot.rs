//! Hand-rolled SVG charts: learning curves and cross-config bars.
//!
//! No plotting dependency; elements carry `class` attributes (`trace`,
//! `mean`, `budget-rule`, `bar`) so tests can parse the emitted geometry
//! and assert on it. Coordinates are formatted to fixed precision, which
//! keeps the files byte-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::report::CsvEpisodeRow;
use crate::{CliError, Result};

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 52.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 36.0;
const GAP: f64 = 24.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Maps data coordinates into one panel's pixel box.
struct Axes {
    x0: f64,
    y0: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Axes {
    fn new(panel: usize, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        Axes {
            x0: panel as f64 * (PANEL_W + GAP) + MARGIN_L,
            y0: MARGIN_T,
            x_min: x_range.0,
            x_max: x_range.1,
            y_min: y_range.0,
            y_max: y_range.1,
        }
    }

    fn w(&self) -> f64 {
        PANEL_W - MARGIN_L - MARGIN_R
    }

    fn h(&self) -> f64 {
        PANEL_H - MARGIN_T - MARGIN_B
    }

    fn px(&self, x: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-12);
        self.x0 + (x - self.x_min) / span * self.w()
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-12);
        self.y0 + self.h() - (y - self.y_min) / span * self.h()
    }

    /// Axis lines, extent labels, and a title.
    fn frame(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (l, r) = (self.x0, self.x0 + self.w());
        let (t, b) = (self.y0, self.y0 + self.h());
        let _ = writeln!(
            out,
            "  <line class=\"axis\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>",
            fmt2(l),
            fmt2(b),
            fmt2(r),
            fmt2(b)
        );
        let _ = writeln!(
            out,
            "  <line class=\"axis\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>",
            fmt2(l),
            fmt2(t),
            fmt2(l),
            fmt2(b)
        );
        let _ = writeln!(
            out,
            "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
            fmt2((l + r) / 2.0),
            fmt2(t - 10.0),
            title
        );
        let _ = writeln!(
            out,
            "  <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            fmt2((l + r) / 2.0),
            fmt2(b + 26.0),
            x_label
        );
        let _ = writeln!(
            out,
            "  <text x=\"{}\" y=\"{}\" font-size=\"10\" transform=\"rotate(-90 {} {})\" \
             text-anchor=\"middle\">{}</text>",
            fmt2(l - 38.0),
            fmt2((t + b) / 2.0),
            fmt2(l - 38.0),
            fmt2((t + b) / 2.0),
            y_label
        );
        for (v, x, y, anchor) in [
            (self.y_max, l - 6.0, t + 4.0, "end"),
            (self.y_min, l - 6.0, b, "end"),
        ] {
            let _ = writeln!(
                out,
                "  <text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"{anchor}\">{}</text>",
                fmt2(x),
                fmt2(y),
                trim_float(v)
            );
        }
        for (v, x) in [(self.x_min, l), (self.x_max, r)] {
            let _ = writeln!(
                out,
                "  <text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"middle\">{}</text>",
                fmt2(x),
                fmt2(b + 14.0),
                trim_float(v)
            );
        }
    }
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn svg_open(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\">",
        fmt2(width),
        fmt2(height),
        fmt2(width),
        fmt2(height)
    );
    let _ = writeln!(
        out,
        "  <rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>",
        fmt2(width),
        fmt2(height)
    );
}

fn polyline(out: &mut String, class: &str, extra: &str, color: &str, width: f64, pts: &[(f64, f64)]) {
    if pts.len() == 1 {
        let _ = writeln!(
            out,
            "  <circle class=\"{class}-point\"{extra} cx=\"{}\" cy=\"{}\" r=\"2.5\" \
             fill=\"{color}\"/>",
            fmt2(pts[0].0),
            fmt2(pts[0].1)
        );
        return;
    }
    let coords: Vec<String> = pts
        .iter()
        .map(|(x, y)| format!("{},{}", fmt2(*x), fmt2(*y)))
        .collect();
    let _ = writeln!(
        out,
        "  <polyline class=\"{class}\"{extra} fill=\"none\" stroke=\"{color}\" \
         stroke-width=\"{width}\" points=\"{}\"/>",
        coords.join(" ")
    );
}

/// Reward and cost learning curves: one panel each, per-seed traces, the
/// cross-seed mean, and the cost-budget rule on the cost panel.
pub fn curves_svg(rows: &[CsvEpisodeRow], cost_budget: f64) -> String {
    let mut out = String::new();
    let width = 2.0 * PANEL_W + GAP;
    svg_open(&mut out, width, PANEL_H);

    let max_episode = rows.iter().map(|r| r.episode).max().unwrap_or(1).max(1) as f64;
    let r_max = rows.iter().map(|r| r.j_r_true).fold(1e-9, f64::max) * 1.05;
    let c_max = rows
        .iter()
        .map(|r| r.j_c_true)
        .fold(cost_budget, f64::max)
        * 1.1;

    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();

    for (panel, (title, c_panel)) in [("reward return", false), ("cost return", true)]
        .into_iter()
        .enumerate()
    {
        let y_max = if c_panel { c_max } else { r_max };
        let ax = Axes::new(panel, (0.0, max_episode), (0.0, y_max));
        ax.frame(&mut out, title, "episode", if c_panel { "J_c" } else { "J_r" });

        for (si, &seed) in seeds.iter().enumerate() {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| {
                    let v = if c_panel { r.j_c_true } else { r.j_r_true };
                    (ax.px(r.episode as f64), ax.py(v))
                })
                .collect();
            if !pts.is_empty() {
                let extra = format!(" data-seed=\"{seed}\"");
                polyline(
                    &mut out,
                    "trace",
                    &extra,
                    PALETTE[si % PALETTE.len()],
                    1.0,
                    &pts,
                );
            }
        }

        // Mean over the seeds still running at each episode.
        let mut by_ep: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in rows {
            let v = if c_panel { r.j_c_true } else { r.j_r_true };
            let e = by_ep.entry(r.episode).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let mean_pts: Vec<(f64, f64)> = by_ep
            .iter()
            .map(|(&ep, &(sum, n))| (ax.px(ep as f64), ax.py(sum / n as f64)))
            .collect();
        if !mean_pts.is_empty() {
            polyline(&mut out, "mean", "", "#000000", 2.0, &mean_pts);
        }

        if c_panel {
            let y = ax.py(cost_budget);
            let _ = writeln!(
                out,
                "  <line class=\"budget-rule\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" \
                 stroke=\"#d62728\" stroke-dasharray=\"5,3\"/>",
                fmt2(ax.px(0.0)),
                fmt2(y),
                fmt2(ax.px(max_episode)),
                fmt2(y)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// One bar group per configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BarGroup {
    pub name: String,
    /// Total reward divided by the best group's total.
    pub norm_reward: f64,
    /// `max_episodes max(0, j_c_true - d)`.
    pub max_violation: f64,
}

/// Aggregates grouped rows into bar values. Ungrouped rows (empty labels)
/// fall into a single group named `fallback`.
pub fn bar_groups(
    labels: &[String],
    rows: &[CsvEpisodeRow],
    cost_budget: f64,
    fallback: &str,
) -> Vec<BarGroup> {
    let mut totals: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (label, row) in labels.iter().zip(rows) {
        let name = if label.is_empty() { fallback } else { label };
        if !totals.contains_key(name) {
            order.push(name.to_string());
        }
        let e = totals.entry(name.to_string()).or_insert((0.0, 0.0));
        e.0 += row.j_r_true;
        e.1 = e.1.max((row.j_c_true - cost_budget).max(0.0));
    }
    let best = totals.values().map(|v| v.0).fold(0.0f64, f64::max);
    order
        .into_iter()
        .map(|name| {
            let (total, viol) = totals[&name];
            BarGroup {
                name,
                norm_reward: if best > 0.0 { total / best } else { 0.0 },
                max_violation: viol,
            }
        })
        .collect()
}

/// Normalized cumulative reward and max-violation bars, one panel each.
pub fn bars_svg(groups: &[BarGroup]) -> String {
    let mut out = String::new();
    let width = 2.0 * PANEL_W + GAP;
    svg_open(&mut out, width, PANEL_H);

    let v_max = groups
        .iter()
        .map(|g| g.max_violation)
        .fold(1e-9, f64::max)
        .max(0.1)
        * 1.1;

    for (panel, (title, violation)) in
        [("normalized cumulative reward", false), ("max cost violation", true)]
            .into_iter()
            .enumerate()
    {
        let y_max = if violation { v_max } else { 1.05 };
        let ax = Axes::new(panel, (0.0, groups.len().max(1) as f64), (0.0, y_max));
        ax.frame(&mut out, title, "", if violation { "max (J_c - d)+" } else { "J_r / best" });

        let slot = ax.w() / groups.len().max(1) as f64;
        for (i, g) in groups.iter().enumerate() {
            let v = if violation { g.max_violation } else { g.norm_reward };
            let x = ax.px(i as f64) + 0.15 * slot;
            let y = ax.py(v);
            let h = ax.py(0.0) - y;
            let _ = writeln!(
                out,
                "  <rect class=\"bar\" data-config=\"{}\" x=\"{}\" y=\"{}\" width=\"{}\" \
                 height=\"{}\" fill=\"{}\"/>",
                g.name,
                fmt2(x),
                fmt2(y),
                fmt2(0.7 * slot),
                fmt2(h),
                PALETTE[i % PALETTE.len()]
            );
            let _ = writeln!(
                out,
                "  <text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"middle\">{}</text>",
                fmt2(x + 0.35 * slot),
                fmt2(ax.py(0.0) + 14.0),
                g.name
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Renders one chart kind from a CSV into `out_dir`, returning the paths
/// written. The cost budget comes from the caller (flag or summary.json).
pub fn render(
    csv: &Path,
    kind: &str,
    out_dir: &Path,
    cost_budget: f64,
) -> Result<Vec<std::path::PathBuf>> {
    let (labels, rows) = crate::report::read_episodes_csv(csv)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::file(out_dir, format!("cannot create out dir: {e}")))?;
    let stem = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "plot".to_string());
    match kind {
        "curves" => {
            let path = out_dir.join(format!("{stem}_curves.svg"));
            std::fs::write(&path, curves_svg(&rows, cost_budget))
                .map_err(|e| CliError::file(&path, format!("cannot write svg: {e}")))?;
            Ok(vec![path])
        }
        "bars" => {
            let groups = bar_groups(&labels, &rows, cost_budget, &stem);
            let path = out_dir.join(format!("{stem}_bars.svg"));
            std::fs::write(&path, bars_svg(&groups))
                .map_err(|e| CliError::file(&path, format!("cannot write svg: {e}")))?;
            Ok(vec![path])
        }
        other => Err(CliError::File {
            path: csv.display().to_string(),
            msg: format!("unknown plot kind `{other}` (expected curves or bars)"),
        }),
    }
}
