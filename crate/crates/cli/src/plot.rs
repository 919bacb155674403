//! Static SVG figures.

use std::path::Path;

use plotters::prelude::*;
use sarcscore::dataset::ScoreBin;
use sarcscore::metrics::SamplePrediction;
use sarcscore::trainer::{AblationRow, TrainHistory};

const SIZE: (u32, u32) = (640, 480);

fn plot_err(path: &Path, e: impl std::fmt::Display) -> anyhow::Error {
    sarcscore::Error::Input(format!("plotting {}: {e}", path.display())).into()
}

/// Predicted versus expert score with the identity line.
pub fn scatter(samples: &[SamplePrediction], path: &Path) -> anyhow::Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Predicted vs expert score", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.8f64..5.2, 0.8f64..5.2)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("expert score")
        .y_desc("predicted score")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(LineSeries::new([(1.0, 1.0), (5.0, 5.0)], BLACK.mix(0.4)))
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(samples.iter().map(|s| Circle::new((s.label, s.prediction), 3, BLUE.mix(0.5).filled())))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Counts per label bin.
pub fn label_histogram(samples: &[SamplePrediction], path: &Path) -> anyhow::Result<()> {
    let mut counts = std::collections::BTreeMap::<ScoreBin, usize>::new();
    for s in samples {
        *counts.entry(ScoreBin::of(s.label)).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(1) as f64 * 1.1;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Label histogram", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.75f64..5.25, 0.0..top)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("label").y_desc("cells").draw().map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(counts.iter().map(|(bin, &n)| {
            let x = bin.value();
            Rectangle::new([(x - 0.1, 0.0), (x + 0.1, n as f64)], GREEN.mix(0.7).filled())
        }))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Training loss and validation MSE per epoch.
pub fn training_curves(history: &TrainHistory, path: &Path) -> anyhow::Result<()> {
    let train: Vec<(f64, f64)> = history.epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect();
    let val: Vec<(f64, f64)> =
        history.epochs.iter().filter_map(|e| e.val.map(|v| (e.epoch as f64, v.mse))).collect();
    let last = history.epochs.last().map_or(1.0, |e| e.epoch as f64).max(1.0);
    let top = train.iter().chain(&val).map(|p| p.1).fold(0.0, f64::max).max(1e-3) * 1.1;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training curves", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..last, 0.0..top)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("epoch").y_desc("MSE").draw().map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(LineSeries::new(train, &RED))
        .map_err(|e| plot_err(path, e))?
        .label("train loss")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], RED));
    if !val.is_empty() {
        chart
            .draw_series(LineSeries::new(val, &BLUE))
            .map_err(|e| plot_err(path, e))?
            .label("val MSE")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], BLUE));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Spearman per ablation variant.
pub fn ablation_bars(rows: &[AblationRow], path: &Path) -> anyhow::Result<()> {
    let n = rows.len().max(1);
    let root = SVGBackend::new(path, (SIZE.0 + 160, SIZE.1)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let lo = rows.iter().filter_map(|r| r.spearman).fold(0.0, f64::min);
    let mut chart = ChartBuilder::on(&root)
        .caption("Ablation: Spearman per variant", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d((0..n).into_segmented(), lo..1.0)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => rows.get(*i).map(|r| r.variant.clone()).unwrap_or_default(),
            _ => String::new(),
        })
        .y_desc("Spearman")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(rows.iter().enumerate().map(|(i, r)| {
            Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), r.spearman.unwrap_or(0.0))],
                BLUE.mix(0.6).filled(),
            )
        }))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
