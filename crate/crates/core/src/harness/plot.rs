//! SVG plots rendered from the CSV outputs alone.

use std::path::Path;

use plotters::prelude::*;

use super::experiments::{read_csv, HistogramRow, RdRow, MEAN_ROW};
use crate::editing::JournalRow;
use crate::error::{Error, Result};

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot: {e}"))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn bounds(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = v.clone().fold(f64::INFINITY, f64::min);
    let hi = v.fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() {
        padded(lo, hi)
    } else {
        (0.0, 1.0)
    }
}

/// PSNR against bpp, one series per image plus the mean curve.
pub fn rd_curve(csv: &Path, svg: &Path) -> Result<()> {
    let rows: Vec<RdRow> = read_csv(csv)?;
    let mut names: Vec<&str> = Vec::new();
    for r in &rows {
        if !names.contains(&r.image.as_str()) {
            names.push(&r.image);
        }
    }
    let root = SVGBackend::new(svg, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (x0, x1) = bounds(rows.iter().map(|r| r.bpp));
    let (y0, y1) = bounds(rows.iter().map(|r| r.psnr));
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .caption("rate-distortion", ("sans-serif", 18))
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("bpp")
        .y_desc("PSNR (dB)")
        .draw()
        .map_err(plot_err)?;
    for (i, name) in names.iter().enumerate() {
        let mut pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.image == *name).map(|r| (r.bpp, r.psnr)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let style = if *name == MEAN_ROW {
            BLACK.stroke_width(3)
        } else {
            Palette99::pick(i).stroke_width(1)
        };
        chart
            .draw_series(LineSeries::new(pts.clone(), style))
            .map_err(plot_err)?
            .label(name.to_string())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], style));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, style.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Normalized-latent histograms (log counts) before and after editing.
pub fn histogram(csv: &Path, svg: &Path) -> Result<()> {
    let rows: Vec<HistogramRow> = read_csv(csv)?;
    let root = SVGBackend::new(svg, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let lo = rows.iter().map(|r| r.bin).min().unwrap_or(-1) as f64 - 0.5;
    let hi = rows.iter().map(|r| r.bin).max().unwrap_or(1) as f64 + 0.5;
    let top = rows
        .iter()
        .map(|r| r.pre_edit.max(r.naive).max(r.enhanced))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .caption("normalized latents", ("sans-serif", 18))
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(lo..hi, (0.5..top * 2.0).log_scale())
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("(y - mu) / sigma")
        .y_desc("count")
        .draw()
        .map_err(plot_err)?;
    let series: [(&str, fn(&HistogramRow) -> u64, RGBColor); 3] = [
        ("pre-edit", |r| r.pre_edit, BLACK),
        ("naive", |r| r.naive, BLUE),
        ("enhanced", |r| r.enhanced, RED),
    ];
    for (name, get, color) in series {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.bin as f64, (get(r) as f64).max(0.5))).collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Relaxed loss and temperature against iteration from an edit journal.
pub fn journal(csv: &Path, svg: &Path) -> Result<()> {
    let rows: Vec<JournalRow> = read_csv(csv)?;
    let root = SVGBackend::new(svg, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = rows.len().max(1) as f64;
    let (y0, y1) = bounds(rows.iter().map(|r| r.loss));
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .caption("edit trace", ("sans-serif", 18))
        .x_label_area_size(36)
        .y_label_area_size(56)
        .right_y_label_area_size(48)
        .build_cartesian_2d(0.0..n, y0..y1)
        .map_err(plot_err)?
        .set_secondary_coord(0.0..n, 0.0..0.55);
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("relaxed loss")
        .draw()
        .map_err(plot_err)?;
    chart
        .configure_secondary_axes()
        .y_desc("temperature")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(rows.iter().map(|r| (r.iteration as f64, r.loss)), BLUE))
        .map_err(plot_err)?;
    chart
        .draw_secondary_series(LineSeries::new(rows.iter().map(|r| (r.iteration as f64, r.temperature)), RED))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiments::write_csv;

    #[test]
    fn plots_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let rd = dir.path().join("rd.csv");
        let rows: Vec<RdRow> = [(0.2, 25.0), (0.5, 29.0)]
            .iter()
            .map(|&(bpp, psnr)| RdRow {
                image: "a".into(),
                lambda: bpp,
                bpp,
                psnr,
                mse: 1.0,
                rd_cost: 1.0,
                delta_y: 1.0,
                delta_z: 1.0,
            })
            .collect();
        write_csv(&rd, &rows).unwrap();
        rd_curve(&rd, &dir.path().join("rd.svg")).unwrap();
        let hist = dir.path().join("h.csv");
        let hrows: Vec<HistogramRow> = (-2..=2)
            .map(|b| HistogramRow {
                bin: b,
                pre_edit: 10 - 2 * b.unsigned_abs() as u64,
                naive: 3,
                enhanced: 0,
            })
            .collect();
        write_csv(&hist, &hrows).unwrap();
        histogram(&hist, &dir.path().join("h.svg")).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("h.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("enhanced"));
    }
}
