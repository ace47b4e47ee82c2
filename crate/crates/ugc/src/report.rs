//! Trade-off plots from logged evaluations.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Result, UgcError};
use crate::metrics::{read_index, EvalReport};

/// Every evaluation found in `runs.jsonl` files below `dir`.
pub fn collect_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    if !dir.is_dir() {
        return Err(UgcError::Missing(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| UgcError::io(&d, e))? {
            let path = entry.map_err(|e| UgcError::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "runs.jsonl") {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_index(&f)?);
    }
    if out.is_empty() {
        return Err(UgcError::Empty(format!("no evaluation logs (runs.jsonl) under {}", dir.display())));
    }
    Ok(out)
}

struct Series<'a> {
    label: &'a str,
    color: RGBColor,
    points: Vec<(f64, f64)>,
}

fn bounds(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = v.clone().fold(f64::INFINITY, f64::min);
    let hi = v.fold(f64::NEG_INFINITY, f64::max);
    let pad = if hi > lo { 0.08 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

fn scatter(path: &Path, title: &str, (xl, yl): (&str, &str), series: &[Series<'_>]) -> Result<()> {
    let draw_err = |e: String| UgcError::format(path, e);
    let all = series.iter().flat_map(|s| s.points.iter().copied());
    let (x0, x1) = bounds(all.clone().map(|p| p.0));
    let (y0, y1) = bounds(all.map(|p| p.1));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(44)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| draw_err(e.to_string()))?;
    chart.configure_mesh().x_desc(xl).y_desc(yl).draw().map_err(|e| draw_err(e.to_string()))?;
    for s in series.iter().filter(|s| !s.points.is_empty()) {
        let color = s.color;
        chart
            .draw_series(s.points.iter().map(|&p| Circle::new(p, 5, color.filled())))
            .map_err(|e| draw_err(e.to_string()))?
            .label(s.label)
            .legend(move |(x, y)| Circle::new((x, y), 5, color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_err(e.to_string()))?;
    root.present().map_err(|e| draw_err(e.to_string()))
}

/// Writes MACs-vs-metric and label-fraction-vs-metric scatter plots to `out`.
pub fn write_plots(reports: &[EvalReport], out: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(UgcError::Empty("evaluation reports".into()));
    }
    fs::create_dir_all(out).map_err(|e| UgcError::io(out, e))?;
    let mut labels: Vec<&str> = reports.iter().map(|r| r.tags.label.as_str()).collect();
    labels.sort();
    labels.dedup();
    let palette = [RGBColor(200, 60, 50), RGBColor(50, 100, 200), RGBColor(60, 160, 80), RGBColor(150, 90, 170)];
    type Pick = fn(&EvalReport) -> Option<f64>;
    let metrics: [(&str, &str, Pick); 2] =
        [("l1", "held-out L1", |r| Some(r.l1)), ("fid", "proxy FID", |r| r.fid_proxy)];
    let axes: [(&str, &str, fn(&EvalReport) -> f64); 2] =
        [("macs", "MMACs", |r| r.macs as f64 / 1e6), ("fraction", "labeled fraction", |r| r.tags.fraction)];
    let mut written = Vec::new();
    for (mname, mdesc, pick) in metrics {
        if reports.iter().all(|r| pick(r).is_none()) {
            continue;
        }
        for (aname, adesc, axis) in axes {
            let series: Vec<Series<'_>> = labels
                .iter()
                .enumerate()
                .map(|(i, l)| Series {
                    label: l,
                    color: palette[i % palette.len()],
                    points: reports
                        .iter()
                        .filter(|r| r.tags.label == *l)
                        .filter_map(|r| pick(r).map(|m| (axis(r), m)))
                        .collect(),
                })
                .collect();
            let path = out.join(format!("{aname}_vs_{mname}.svg"));
            scatter(&path, &format!("{mdesc} vs {adesc}"), (adesc, mdesc), &series)?;
            written.push(path);
        }
    }
    Ok(written)
}
