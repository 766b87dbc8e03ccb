//! Deterministic SVG line plots. Every figure is also written as CSV so the
//! plotted numbers can be reused and diffed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use soh_core::dataio::load_labels;

use crate::error::{invalid, io_err, Result};
use crate::pipeline::FeatureRow;
use crate::report::EvaluationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Prediction,
    Capacity,
    Features,
}

pub const PLOT_KINDS: [&str; 3] = ["prediction", "capacity", "features"];

impl FromStr for PlotKind {
    type Err = crate::error::CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prediction" => Ok(PlotKind::Prediction),
            "capacity" => Ok(PlotKind::Capacity),
            "features" => Ok(PlotKind::Features),
            other => Err(invalid(format!(
                "unknown plot kind {other:?}; supported kinds: {}",
                PLOT_KINDS.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub color: usize,
    pub dashed: bool,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];
const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn tick_format(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.decimals$}")
}

/// Ticks at multiples of 1, 2 or 5 × 10^k covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> (Vec<f64>, f64) {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    ((first..=last).map(|k| k as f64 * step).collect(), step)
}

pub fn render_svg(fig: &Figure) -> String {
    let (x0, x1) = range(fig.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(fig.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        o,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        o,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&fig.title)
    );
    let _ = writeln!(
        o,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let (xt, xs) = ticks(x0, x1);
    for t in xt {
        let x = sx(t);
        let _ = writeln!(
            o,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ccc"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP,
            TOP + ph,
            TOP + ph + 16.0,
            tick_format(t, xs)
        );
    }
    let (yt, ys) = ticks(y0, y1);
    for t in yt {
        let y = sy(t);
        let _ = writeln!(
            o,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ccc"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            tick_format(t, ys)
        );
    }
    let _ = writeln!(
        o,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&fig.x_label)
    );
    let _ = writeln!(
        o,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&fig.y_label)
    );
    for (i, s) in fig.series.iter().enumerate() {
        let color = PALETTE[s.color % PALETTE.len()];
        let dash = if s.dashed {
            r#" stroke-dasharray="6 3""#
        } else {
            ""
        };
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            o,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(
            o,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    o.push_str("</svg>\n");
    o
}

pub fn render_csv(fig: &Figure) -> String {
    let mut o = String::from("series,x,y\n");
    for s in &fig.series {
        for (x, y) in &s.points {
            let _ = writeln!(o, "{},{x},{y}", s.name.replace(',', ";"));
        }
    }
    o
}

/// Truth and prediction per stage for one battery of one seed run.
pub fn prediction_figure(
    report: &EvaluationReport,
    battery: Option<&str>,
    seed: Option<u64>,
) -> Result<Figure> {
    let run = match seed {
        Some(s) => report.runs.iter().find(|r| r.seed == s),
        None => report.runs.first(),
    }
    .ok_or_else(|| invalid("report has no run for the requested seed"))?;
    let b = match battery {
        Some(id) => run.batteries.iter().find(|b| b.battery_id == id),
        None => run.batteries.first(),
    }
    .ok_or_else(|| invalid("report has no such battery"))?;
    let mut series = Vec::new();
    for (i, s) in b.stages.iter().enumerate() {
        let pts = |f: fn(&crate::report::CyclePrediction) -> f64| {
            s.cycles
                .iter()
                .map(|c| (c.cycle_index as f64, f(c)))
                .collect::<Vec<_>>()
        };
        series.push(Series {
            name: format!("stage {} truth", s.stage_id),
            color: i,
            dashed: false,
            points: pts(|c| c.truth),
        });
        series.push(Series {
            name: format!("stage {} predicted", s.stage_id),
            color: i,
            dashed: true,
            points: pts(|c| c.predicted),
        });
    }
    Ok(Figure {
        title: format!("{} capacity, seed {}", b.battery_id, run.seed),
        x_label: "cycle".into(),
        y_label: "capacity (Ah)".into(),
        series,
    })
}

/// Capacity fade of every battery in a labels CSV.
pub fn capacity_figure(labels: &Path) -> Result<Figure> {
    let map = load_labels(labels)?;
    let mut by_battery: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for ((b, c), q) in map {
        by_battery.entry(b).or_default().push((c as f64, q));
    }
    Ok(Figure {
        title: "Discharge capacity".into(),
        x_label: "cycle".into(),
        y_label: "capacity (Ah)".into(),
        series: by_battery
            .into_iter()
            .enumerate()
            .map(|(i, (name, mut points))| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name,
                    color: i,
                    dashed: false,
                    points,
                }
            })
            .collect(),
    })
}

pub fn write_features_csv(path: &Path, rows: &[(u64, FeatureRow)]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| invalid(format!("{}: {e}", path.display()));
    w.write_record([
        "seed",
        "battery_id",
        "stage_id",
        "cycle_index",
        "block",
        "component",
        "value",
    ])
    .map_err(err)?;
    for (seed, r) in rows {
        w.write_record([
            seed.to_string(),
            r.battery_id.clone(),
            r.stage_id.to_string(),
            r.cycle_index.to_string(),
            r.block.to_string(),
            r.component.to_string(),
            r.value.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Trajectories of the time-averaged components of one stage, read from a
/// features CSV written by `fit-source`.
pub fn features_figure(path: &Path, stage: Option<u32>, seed: Option<u64>) -> Result<Figure> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut series: BTreeMap<(u8, usize), Vec<(f64, f64)>> = BTreeMap::new();
    let mut chosen: Option<(u64, u32)> = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_err =
            |name: &str| invalid(format!("{}:{}: bad {name}", path.display(), line + 2));
        let s: u64 = field(0).parse().map_err(|_| parse_err("seed"))?;
        let st: u32 = field(2).parse().map_err(|_| parse_err("stage_id"))?;
        if seed.is_some_and(|x| x != s) || stage.is_some_and(|x| x != st) {
            continue;
        }
        match chosen {
            None => chosen = Some((s, st)),
            Some(c) if c != (s, st) => continue,
            _ => {}
        }
        let cycle: f64 = field(3).parse().map_err(|_| parse_err("cycle_index"))?;
        let block = match field(4) {
            "consistency" => 0,
            "discrepancy" => 1,
            _ => return Err(parse_err("block")),
        };
        let comp: usize = field(5).parse().map_err(|_| parse_err("component"))?;
        let value: f64 = field(6).parse().map_err(|_| parse_err("value"))?;
        series
            .entry((block, comp))
            .or_default()
            .push((cycle, value));
    }
    let (s, st) =
        chosen.ok_or_else(|| invalid(format!("{}: no feature rows match", path.display())))?;
    Ok(Figure {
        title: format!("Stage {st} components, seed {s}"),
        x_label: "cycle".into(),
        y_label: "time-averaged component".into(),
        series: series
            .into_iter()
            .enumerate()
            .map(|(i, ((block, comp), points))| Series {
                name: format!(
                    "{}{comp}",
                    if block == 0 {
                        "consistency "
                    } else {
                        "discrepancy "
                    }
                ),
                color: i,
                dashed: block == 0,
                points,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig() -> Figure {
        Figure {
            title: "t <1>".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![
                Series {
                    name: "a".into(),
                    color: 0,
                    dashed: false,
                    points: vec![(1.0, 2.0), (2.0, 1.5), (3.0, 1.0)],
                },
                Series {
                    name: "b".into(),
                    color: 1,
                    dashed: true,
                    points: vec![(1.0, 2.1), (3.0, 0.9)],
                },
            ],
        }
    }

    #[test]
    fn svg_is_deterministic_and_escaped() {
        let a = render_svg(&fig());
        assert_eq!(a, render_svg(&fig()));
        assert!(a.contains("t &lt;1&gt;"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert_eq!(render_csv(&fig()).lines().count(), 6);
    }

    #[test]
    fn ticks_are_round_numbers() {
        let (t, step) = ticks(0.93, 2.07);
        assert_eq!(step, 0.5);
        assert_eq!(t, vec![1.0, 1.5, 2.0]);
        assert_eq!(tick_format(1.5, 0.5), "1.5");
    }

    #[test]
    fn unknown_kind_lists_supported() {
        let e = "bars".parse::<PlotKind>().unwrap_err().to_string();
        assert!(e.contains("prediction, capacity, features"));
    }
}
