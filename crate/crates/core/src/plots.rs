//! Static SVG plots.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::trainer::LogRecord;

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Per-iteration loss terms.
pub fn loss_curve(records: &[LogRecord], title: &str, path: &Path) -> Result<()> {
    let n = records.len().max(1) as f64;
    let ymax = records
        .iter()
        .flat_map(|r| [r.l_cls, r.l_tri, r.l_consis, r.l_total])
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..n, 0f64..ymax)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("loss")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let series: [(&str, RGBColor, fn(&LogRecord) -> f64); 4] = [
        ("L_total", BLACK, |r| r.l_total),
        ("L_cls", BLUE, |r| r.l_cls),
        ("L_tri", RED, |r| r.l_tri),
        ("L_consis", GREEN, |r| r.l_consis),
    ];
    for (name, color, get) in series {
        chart
            .draw_series(LineSeries::new(
                records.iter().map(|r| (r.iteration as f64, get(r))),
                &color,
            ))
            .map_err(|e| plot_err(path, e))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Rank-k accuracy against k.
pub fn cmc_curve(curve: &[f64], title: &str, path: &Path) -> Result<()> {
    let kmax = curve.len().clamp(1, 50);
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(1f64..kmax as f64, 0f64..1f64)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("rank k")
        .y_desc("matching rate")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(LineSeries::new(
            curve.iter().take(kmax).enumerate().map(|(i, &v)| ((i + 1) as f64, v)),
            &BLUE,
        ))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_parseable_svg() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<LogRecord> = (1..=5)
            .map(|i| LogRecord {
                iteration: i,
                epoch: 1,
                lr: 0.01,
                l_cls: 1.0 / i as f64,
                l_tri: 0.5,
                l_consis: 0.1,
                l_total: 1.2,
            })
            .collect();
        let p = dir.path().join("loss.svg");
        loss_curve(&recs, "loss", &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
        let c = dir.path().join("cmc.svg");
        cmc_curve(&[0.2, 0.5, 1.0], "cmc", &c).unwrap();
        assert!(std::fs::read_to_string(&c).unwrap().contains("<polyline") || std::fs::read_to_string(&c).unwrap().contains("<path"));
    }
}
