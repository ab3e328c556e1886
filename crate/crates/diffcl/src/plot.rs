//! PNG charts rendered from a run's CSV files.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::error::{CliError, Result};
use crate::run::read_csv;

pub const FONT_ENV: &str = "DIFFCL_FONT";

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

const SIZE: (u32, u32) = (960, 600);
const LOSS_SERIES: [&str; 5] = ["cs_total", "ds_total", "cs_sup", "ds_sup", "contrastive"];

/// Registers a sans-serif font once. Charts are drawn without text when no
/// font is found.
fn text_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let candidates = std::env::var(FONT_ENV).into_iter().chain(FONT_CANDIDATES.iter().map(|s| s.to_string()));
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found (set {FONT_ENV}); charts will have no text");
        false
    })
}

fn draw_error(path: &Path) -> impl Fn(Box<dyn std::error::Error>) -> CliError + '_ {
    move |e| CliError::format(path, format!("cannot draw chart: {e}"))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::format(path, format!("missing column `{name}`")))
}

fn number(cell: &str, path: &Path) -> Result<f64> {
    cell.parse().map_err(|_| CliError::format(path, format!("`{cell}` is not a number")))
}

/// Loss curves against the step index.
pub fn plot_history(csv: &Path, out: &Path) -> Result<()> {
    let (header, rows) = read_csv(csv)?;
    if rows.is_empty() {
        return Err(CliError::NoData(format!("{} has no rows", csv.display())));
    }
    let step = column(&header, "step", csv)?;
    let mut series = Vec::new();
    for name in LOSS_SERIES {
        let c = column(&header, name, csv)?;
        let pts = rows
            .iter()
            .map(|r| Ok((number(&r[step], csv)?, number(&r[c], csv)?)))
            .collect::<Result<Vec<(f64, f64)>>>()?;
        series.push((name, pts));
    }
    let x_max = series[0].1.iter().map(|p| p.0).fold(1.0, f64::max);
    let finite = || series.iter().flat_map(|s| s.1.iter().map(|p| p.1)).filter(|v| v.is_finite());
    let y_max = finite().fold(0.0, f64::max).max(1e-6) * 1.05;
    let y_min = finite().fold(0.0, f64::min);

    let text = text_available();
    let err = draw_error(out);
    let root = BitMapBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(Box::new(e)))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder.caption("training losses", ("sans-serif", 24)).x_label_area_size(40).y_label_area_size(60);
    }
    let mut chart = builder.build_cartesian_2d(0.0..x_max, y_min..y_max).map_err(|e| err(Box::new(e)))?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("step").y_desc("loss");
    } else {
        mesh.disable_x_axis().disable_y_axis();
    }
    mesh.draw().map_err(|e| err(Box::new(e)))?;
    for (i, (name, pts)) in series.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let line = chart.draw_series(LineSeries::new(pts, color.stroke_width(2))).map_err(|e| err(Box::new(e)))?;
        if text {
            line.label(name).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(Box::new(e)))?;
    }
    root.present().map_err(|e| err(Box::new(e)))
}

/// One bar per row of `label_column`, heights from `value_column`.
pub fn plot_bars(csv: &Path, label_column: &str, value_column: &str, title: &str, out: &Path) -> Result<()> {
    let (header, rows) = read_csv(csv)?;
    let lc = column(&header, label_column, csv)?;
    let vc = column(&header, value_column, csv)?;
    let bars = rows
        .iter()
        .filter(|r| r[lc] != "mean")
        .map(|r| Ok((r[lc].clone(), number(&r[vc], csv)?)))
        .collect::<Result<Vec<(String, f64)>>>()?;
    if bars.is_empty() {
        return Err(CliError::NoData(format!("{} has no rows", csv.display())));
    }
    let y_max = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0, f64::max).max(1.0) * 1.1;
    let n = bars.len();

    let text = text_available();
    let err = draw_error(out);
    let root = BitMapBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(Box::new(e)))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder.caption(title, ("sans-serif", 24)).x_label_area_size(60).y_label_area_size(60);
    }
    let mut chart = builder.build_cartesian_2d((0..n).into_segmented(), 0.0..y_max).map_err(|e| err(Box::new(e)))?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let label_of = |v: &SegmentValue<usize>| match v {
        SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
        _ => String::new(),
    };
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.disable_x_mesh()
            .y_desc(value_column)
            .x_label_formatter(&label_of);
    } else {
        mesh.disable_x_axis().disable_y_axis();
    }
    mesh.draw().map_err(|e| err(Box::new(e)))?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            let color = Palette99::pick(i).to_rgba().filled();
            Rectangle::new([(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), *v)], color)
        }))
        .map_err(|e| err(Box::new(e)))?;
    root.present().map_err(|e| err(Box::new(e)))
}

/// Renders every chart whose CSV exists under `run`. Returns the images written.
pub fn plot_run(run: &Path) -> Result<Vec<PathBuf>> {
    use crate::run::{ABLATION, HISTORY, METRICS};
    let out_dir = run.join("plots");
    let mut jobs: Vec<(PathBuf, Box<dyn Fn(&Path, &Path) -> Result<()>>, &str)> = Vec::new();
    let history = run.join(HISTORY);
    if history.exists() {
        jobs.push((history, Box::new(plot_history), "loss_curves.png"));
    }
    // Training runs keep metrics under `eval/`, evaluation runs at the top.
    let metrics = [run.join("eval").join(METRICS), run.join(METRICS)].into_iter().find(|p| p.exists());
    if let Some(metrics) = metrics {
        jobs.push((metrics, Box::new(|c, o| plot_bars(c, "id", "Dice", "Dice per volume", o)), "dice_per_volume.png"));
    }
    let ablation = run.join(ABLATION);
    if ablation.exists() {
        jobs.push((ablation, Box::new(|c, o| plot_bars(c, "config", "Dice", "ablation", o)), "ablation_dice.png"));
    }
    if jobs.is_empty() {
        return Err(CliError::NoData(format!("{} holds no history, metrics or ablation CSV", run.display())));
    }
    std::fs::create_dir_all(&out_dir).map_err(CliError::io(&out_dir))?;
    let mut written = Vec::new();
    for (csv, draw, name) in jobs {
        let out = out_dir.join(name);
        draw(&csv, &out)?;
        written.push(out);
    }
    Ok(written)
}
