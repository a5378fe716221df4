//! PNG rendering with a fixed style: white background, the bundled DejaVu
//! Sans face, titles carrying the run id.

use std::error::Error;
use std::path::Path;
use std::sync::Once;

use plotters::prelude::*;
use plotters::style::text_anchor::{HPos, Pos, VPos};
use retina_bench::train::{Phase, RunRecord};

use crate::error::{CliError, Result};

const FONT: &str = "sans-serif";
static FONT_BYTES: &[u8] = include_bytes!("../assets/DejaVuSans.ttf");
static REGISTER: Once = Once::new();

fn ensure_font() {
    REGISTER.call_once(|| {
        if plotters::style::register_font(FONT, FontStyle::Normal, FONT_BYTES).is_err() {
            log::warn!("bundled font rejected; plot text will be missing");
        }
    });
}

type DrawResult = std::result::Result<(), Box<dyn Error>>;

fn wrap(path: &Path, r: DrawResult) -> Result<()> {
    r.map_err(|e| CliError::Plot { path: path.to_path_buf(), reason: e.to_string() })
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = (hi - lo).abs().max(1e-3);
    (lo - 0.08 * span, hi + 0.08 * span)
}

/// One line chart with a series per (label, points).
pub fn line_chart(path: &Path, title: &str, y_desc: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    ensure_font();
    wrap(path, draw_lines(path, title, y_desc, series))
}

fn draw_lines(path: &Path, title: &str, y_desc: &str, series: &[(&str, Vec<(f64, f64)>)]) -> DrawResult {
    let root = BitMapBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(_, y)| y.is_finite()) {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (y0, y1) = padded(y0, y1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, (FONT, 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(x0 - 0.5..x1 + 0.5, y0..y1)?;
    chart.configure_mesh().x_desc("epoch").y_desc(y_desc).label_style((FONT, 14)).draw()?;
    for (i, (label, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?
            .label(*label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    chart
        .configure_series_labels()
        .label_font((FONT, 14))
        .background_style(WHITE.mix(0.9))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

/// `loss_curve.png` and `acc_curve.png`: train and validation on one axis.
pub fn training_curves(record: &RunRecord, title: &str, loss_path: &Path, acc_path: &Path) -> Result<()> {
    let series = |loss: bool| -> Vec<(&str, Vec<(f64, f64)>)> {
        [(Phase::Train, "train"), (Phase::Validation, "validation")]
            .into_iter()
            .map(|(phase, label)| {
                let pts = record.phase(phase).map(|r| (r.epoch as f64, if loss { r.loss } else { r.accuracy })).collect();
                (label, pts)
            })
            .collect()
    };
    line_chart(loss_path, &format!("loss: {title}"), "loss", &series(true))?;
    line_chart(acc_path, &format!("accuracy: {title}"), "accuracy", &series(false))
}

/// Cell annotations of a confusion heatmap as (truth, predicted, count).
pub fn heatmap_annotations(counts: &[Vec<u64>]) -> Vec<(usize, usize, u64)> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(t, row)| row.iter().enumerate().map(move |(p, &n)| (t, p, n)))
        .collect()
}

/// Confusion matrix with truth on the vertical axis, prediction on the
/// horizontal one, and the integer count written in every cell.
pub fn confusion_heatmap(counts: &[Vec<u64>], class_names: &[String], title: &str, path: &Path) -> Result<()> {
    ensure_font();
    wrap(path, draw_heatmap(counts, class_names, title, path))
}

fn draw_heatmap(counts: &[Vec<u64>], class_names: &[String], title: &str, path: &Path) -> DrawResult {
    let k = counts.len();
    let root = BitMapBackend::new(path, (640, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
    let ki = k as i32;
    // truth row t is drawn at y = k-1-t so the first class sits on top
    let mut chart = ChartBuilder::on(&root)
        .caption(title, (FONT, 18))
        .margin(12)
        .x_label_area_size(48)
        .y_label_area_size(90)
        .build_cartesian_2d((0..ki).into_segmented(), (0..ki).into_segmented())?;
    let x_fmt = |v: &SegmentValue<i32>| segment_label(v, k, name);
    let y_fmt = |v: &SegmentValue<i32>| segment_label(v, k, |i| name(k - 1 - i));
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("predicted")
        .y_desc("truth")
        .x_labels(k)
        .y_labels(k)
        .x_label_formatter(&x_fmt)
        .y_label_formatter(&y_fmt)
        .label_style((FONT, 13))
        .draw()?;
    let max = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (t, p, n) in heatmap_annotations(counts) {
        let shade = n as f64 / max;
        let level = |c: u8| (255.0 - shade * (255.0 - c as f64)).round() as u8;
        let fill = RGBColor(level(31), level(78), level(145));
        let (x, y) = (p as i32, (k - 1 - t) as i32);
        chart.draw_series(std::iter::once(Rectangle::new(
            [(SegmentValue::Exact(x), SegmentValue::Exact(y)), (SegmentValue::Exact(x + 1), SegmentValue::Exact(y + 1))],
            fill.filled(),
        )))?;
        let ink = if shade > 0.5 { WHITE } else { BLACK };
        let style = TextStyle::from((FONT, 16).into_font()).color(&ink).pos(Pos::new(HPos::Center, VPos::Center));
        chart.draw_series(std::iter::once(Text::new(
            n.to_string(),
            (SegmentValue::CenterOf(x), SegmentValue::CenterOf(y)),
            style,
        )))?;
    }
    root.present()?;
    Ok(())
}

fn segment_label(v: &SegmentValue<i32>, k: usize, name: impl Fn(usize) -> String) -> String {
    match v {
        SegmentValue::CenterOf(i) | SegmentValue::Exact(i) if (0..k as i32).contains(i) => name(*i as usize),
        _ => String::new(),
    }
}

/// One box per group, with the group size written above it.
pub fn boxplot(path: &Path, title: &str, y_desc: &str, groups: &[(String, Vec<f64>)]) -> Result<()> {
    ensure_font();
    wrap(path, draw_boxplot(path, title, y_desc, groups))
}

fn draw_boxplot(path: &Path, title: &str, y_desc: &str, groups: &[(String, Vec<f64>)]) -> DrawResult {
    let root = BitMapBackend::new(path, (900, 520)).into_drawing_area();
    root.fill(&WHITE)?;
    let all: Vec<f64> = groups.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { padded(lo, hi) } else { (0.0, 1.0) };
    // headroom for the n= labels
    let top = hi + 0.1 * (hi - lo);
    let n = groups.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, (FONT, 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d((0..n as i32).into_segmented(), lo as f32..top as f32)?;
    let x_fmt = |v: &SegmentValue<i32>| segment_label(v, groups.len(), |i| groups.get(i).map(|g| g.0.clone()).unwrap_or_default());
    chart.configure_mesh().y_desc(y_desc).x_labels(n).x_label_formatter(&x_fmt).label_style((FONT, 13)).draw()?;
    for (i, (_, values)) in groups.iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let q = Quartiles::new(values);
        let color = Palette99::pick(i).to_rgba();
        let x = SegmentValue::CenterOf(i as i32);
        chart.draw_series(std::iter::once(
            Boxplot::new_vertical(x.clone(), &q).width(28).style(color.stroke_width(2)),
        ))?;
        let style = TextStyle::from((FONT, 14).into_font()).pos(Pos::new(HPos::Center, VPos::Bottom));
        chart.draw_series(std::iter::once(Text::new(
            format!("n={}", values.len()),
            (x, (hi + 0.05 * (hi - lo)) as f32),
            style,
        )))?;
    }
    root.present()?;
    Ok(())
}

/// Mean train:validation loss ratio per network with +-1 std bars, one
/// color per group, and the ratio-1 reference line.
pub fn ratio_plot(path: &Path, title: &str, networks: &[String], series: &[(String, Vec<Option<(f64, f64)>>)]) -> Result<()> {
    ensure_font();
    wrap(path, draw_ratio(path, title, networks, series))
}

fn draw_ratio(path: &Path, title: &str, networks: &[String], series: &[(String, Vec<Option<(f64, f64)>>)]) -> DrawResult {
    let root = BitMapBackend::new(path, (1000, 560)).into_drawing_area();
    root.fill(&WHITE)?;
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    for (_, values) in series {
        for &(m, s) in values.iter().flatten() {
            lo = lo.min(m - s);
            hi = hi.max(m + s);
        }
    }
    let (lo, hi) = padded(lo, hi);
    let n = networks.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, (FONT, 20))
        .margin(12)
        .x_label_area_size(60)
        .y_label_area_size(64)
        .build_cartesian_2d(-0.5..n - 0.5, lo..hi)?;
    let label_of = |x: &f64| {
        let i = x.round();
        if (x - i).abs() < 1e-9 && i >= 0.0 {
            networks.get(i as usize).cloned().unwrap_or_default()
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .x_labels(networks.len().max(1))
        .x_label_formatter(&label_of)
        .y_desc("train:validation loss ratio")
        .label_style((FONT, 11))
        .draw()?;
    chart.draw_series(std::iter::once(PathElement::new(vec![(-0.5, 1.0), (n - 0.5, 1.0)], BLACK.mix(0.6))))?;
    let width = 0.6 / series.len().max(1) as f64;
    for (g, (label, values)) in series.iter().enumerate() {
        let color = Palette99::pick(g).to_rgba();
        let offset = (g as f64 - (series.len() as f64 - 1.0) / 2.0) * width;
        let pts: Vec<(f64, f64, f64)> = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|(m, s)| (i as f64 + offset, m, s)))
            .collect();
        chart
            .draw_series(pts.iter().map(|&(x, m, s)| ErrorBar::new_vertical(x, m - s, m, m + s, color.filled(), 8)))?
            .label(label.as_str())
            .legend(move |(x, y)| Circle::new((x + 10, y), 4, color.filled()));
    }
    chart
        .configure_series_labels()
        .label_font((FONT, 13))
        .background_style(WHITE.mix(0.9))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}
