use std::path::Path;

use anyhow::{anyhow, Result};
use mmfl_core::federation::RoundMetrics;
use plotters::prelude::*;

/// Mean validation Dice over clients for every validated round.
pub(crate) fn mean_dice_by_round(rows: &[RoundMetrics]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        let Some(d) = r.val_dice else { continue };
        match out.last_mut() {
            Some(last) if last.0 == r.round => {
                last.1 += d;
                last.2 += 1;
            }
            _ => out.push((r.round, d, 1)),
        }
    }
    out.into_iter().map(|(r, s, n)| (r, s / n as f64)).collect()
}

pub(crate) fn dice_vs_round(path: &Path, series: &[(String, Vec<(usize, f64)>)]) -> Result<()> {
    let max_round = series
        .iter()
        .flat_map(|(_, s)| s.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow!("plotting {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Mean validation Dice", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..max_round as f64, 0f64..1f64)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("round")
        .y_desc("Dice")
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (label, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                points.iter().map(|&(r, d)| (r as f64, d)),
                color.stroke_width(2),
            ))
            .map_err(|e| err(&e))?
            .label(label.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
