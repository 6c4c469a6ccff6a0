use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const HEADER: &str = "epoch,cycle_loss,val_acc,val_cer,val_wer";

/// One row of the learning curve. `cycle_loss` is NaN for modes without a
/// consistency loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cycle_loss: f64,
    pub val_acc: f64,
    pub val_cer: f64,
    pub val_wer: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn push(&mut self, row: EpochMetrics) {
        self.rows.push(row);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.cycle_loss, r.val_acc, r.val_cer, r.val_wer
            );
        }
        out
    }
}

pub fn parse_curves(text: &str) -> Result<MetricsLog> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Format {
            line: 1,
            msg: format!("expected header `{HEADER}`"),
        });
    }
    let mut log = MetricsLog::default();
    for (i, line) in lines.enumerate() {
        let fail = |msg: String| Error::Format { line: i + 2, msg };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(fail(format!("expected 5 columns, got {}", cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| fail(format!("{s:?}: {e}")));
        log.push(EpochMetrics {
            epoch: cells[0].parse().map_err(|e| fail(format!("epoch: {e}")))?,
            cycle_loss: num(cells[1])?,
            val_acc: num(cells[2])?,
            val_cer: num(cells[3])?,
            val_wer: num(cells[4])?,
        });
    }
    Ok(log)
}

/// Writes the CSV and, next to it, an SVG plot. Plot failures are only logged.
pub fn export_curves(log: &MetricsLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if log.is_empty() {
        return Err(Error::Input("cannot export an empty metrics log".into()));
    }
    std::fs::write(path, log.to_csv()).map_err(|e| Error::io(path, e))?;
    let svg = path.with_extension("svg");
    if let Err(e) = std::fs::write(&svg, render_svg(log)) {
        log::warn!("could not write plot {}: {e}", svg.display());
    }
    Ok(())
}

/// Line plot of each column against epoch, each series scaled to its own range.
pub fn render_svg(log: &MetricsLog) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let series: [(&str, &str, fn(&EpochMetrics) -> f64); 4] = [
        ("cycle_loss", "#c0392b", |r| r.cycle_loss),
        ("val_acc", "#2471a3", |r| r.val_acc),
        ("val_cer", "#229954", |r| r.val_cer),
        ("val_wer", "#7d3c98", |r| r.val_wer),
    ];
    let n = log.rows.len().max(2) - 1;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (k, (name, color, get)) in series.iter().enumerate() {
        let vals: Vec<f64> = log.rows.iter().map(get).collect();
        let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let points: Vec<String> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| {
                let x = pad + (w - 2.0 * pad) * i as f64 / n as f64;
                let y = h - pad - (h - 2.0 * pad) * (v - lo) / span;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name} [{lo:.3}, {hi:.3}]</text>",
            pad,
            16.0 + 14.0 * k as f64
        );
    }
    out.push_str("</svg>\n");
    out
}
