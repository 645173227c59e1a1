//! Self-contained SVG plots over run records. Every plotted number is also
//! embedded as visible text so the files diff cleanly.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::report::{fmt_value, mean_std, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Anomaly-index bars per stage (clean vs backdoored).
    AiBars,
    /// Max-REASR bars per poison-rate stage, with the decision threshold.
    ReasrBars,
    /// AUC versus swept hyperparameter value.
    AucCurve,
    /// Score strips per population and ground-truth class.
    ScoreDist,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ai_bars" => Ok(PlotKind::AiBars),
            "reasr_bars" => Ok(PlotKind::ReasrBars),
            "auc_curve" => Ok(PlotKind::AucCurve),
            "score_dist" => Ok(PlotKind::ScoreDist),
            other => Err(Error::Config(format!("unknown plot kind '{other}'"))),
        }
    }
}

impl PlotKind {
    pub fn file_name(&self) -> &'static str {
        match self {
            PlotKind::AiBars => "plot_ai_bars.svg",
            PlotKind::ReasrBars => "plot_reasr_bars.svg",
            PlotKind::AucCurve => "plot_auc_curve.svg",
            PlotKind::ScoreDist => "plot_score_dist.svg",
        }
    }
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut body = format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        body.push('\n');
        body.push_str(&format!(
            r#"<rect width="{W}" height="{H}" fill="white"/><text x="{}" y="24" font-size="16" text-anchor="middle" font-family="monospace">{title}</text>"#,
            W / 2.0
        ));
        body.push('\n');
        Svg { body }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        self.body.push_str(&format!(
            r#"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="{fill}"/>"#
        ));
        self.body.push('\n');
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        self.body.push_str(&format!(r#"<circle cx="{x:.1}" cy="{y:.1}" r="{r}" fill="{fill}"/>"#));
        self.body.push('\n');
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dash: bool) {
        let dash_attr = if dash { r#" stroke-dasharray="6 4""# } else { "" };
        self.body.push_str(&format!(
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{stroke}" stroke-width="1.5"{dash_attr}/>"#
        ));
        self.body.push('\n');
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        self.body.push_str(&format!(
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" text-anchor="{anchor}" font-family="monospace">{content}</text>"#
        ));
        self.body.push('\n');
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// Labeled values gathered from records: `(label, value)` in stable order.
fn mean_over_seeds(records: &[RunRecord], pick: impl Fn(&str, &str) -> bool) -> Vec<(String, f64)> {
    let mut order: Vec<(String, String)> = Vec::new();
    for rec in records.iter().filter(|r| r.seed != "aggregate") {
        for m in &rec.metrics {
            if pick(&m.stage, &m.metric) {
                let key = (m.stage.clone(), m.metric.clone());
                if !order.contains(&key) {
                    order.push(key);
                }
            }
        }
    }
    order
        .into_iter()
        .filter_map(|(stage, metric)| {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.seed != "aggregate")
                .filter_map(|r| r.get(&stage, &metric))
                .filter(|v| v.is_finite())
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some((format!("{stage}/{metric}"), mean_std(&vals).0))
            }
        })
        .collect()
}

fn bar_chart(title: &str, series: &[(String, f64)], threshold: Option<f64>) -> String {
    let max = series
        .iter()
        .map(|(_, v)| *v)
        .chain(threshold)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let slot = plot_w / series.len() as f64;
    let bar_w = (slot * 0.6).min(80.0);

    let mut svg = Svg::new(title);
    svg.line(MARGIN, H - MARGIN, W - MARGIN, H - MARGIN, "black", false);
    svg.line(MARGIN, MARGIN, MARGIN, H - MARGIN, "black", false);
    for (i, (label, value)) in series.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + (slot - bar_w) / 2.0;
        let h = plot_h * value / max;
        let y = H - MARGIN - h;
        svg.rect(x, y, bar_w, h, "#4878a8");
        svg.text(x + bar_w / 2.0, y - 6.0, 11.0, "middle", &fmt_value(*value));
        svg.text(x + bar_w / 2.0, H - MARGIN + 14.0, 9.0, "middle", label);
    }
    if let Some(t) = threshold {
        let y = H - MARGIN - plot_h * t / max;
        svg.line(MARGIN, y, W - MARGIN, y, "#c03030", true);
        svg.text(W - MARGIN + 4.0, y + 4.0, 11.0, "start", &fmt_value(t));
    }
    svg.finish()
}

fn emit(kind: PlotKind, records: &[RunRecord]) -> Result<String> {
    match kind {
        PlotKind::AiBars => {
            let series = mean_over_seeds(records, |_, metric| {
                metric == "anomaly_index" || metric == "ai_clean" || metric == "ai_backdoored"
            });
            if series.is_empty() {
                return Err(Error::Config("no anomaly-index metrics in records".into()));
            }
            Ok(bar_chart("anomaly index (mean over seeds)", &series, Some(2.0)))
        }
        PlotKind::ReasrBars => {
            let series = mean_over_seeds(records, |_, metric| {
                metric == "max_reasr" || metric == "asr"
            });
            if series.is_empty() {
                return Err(Error::Config("no REASR metrics in records".into()));
            }
            Ok(bar_chart("ASR and max REASR (mean over seeds)", &series, Some(0.88)))
        }
        PlotKind::AucCurve => {
            let series = mean_over_seeds(records, |_, metric| {
                metric.starts_with("auc_e") && metric[5..].chars().all(|c| c.is_ascii_digit())
            });
            if series.is_empty() {
                return Err(Error::Config("no swept AUC metrics in records".into()));
            }
            let points: Vec<(f64, f64)> = series
                .iter()
                .map(|(label, v)| {
                    let epoch: f64 = label
                        .rsplit("auc_e")
                        .next()
                        .and_then(|s| s.parse().ok())
                        .unwrap_or(0.0);
                    (epoch, *v)
                })
                .collect();
            let xmin = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let xmax = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let span = (xmax - xmin).max(1e-9);
            let plot_w = W - 2.0 * MARGIN;
            let plot_h = H - 2.0 * MARGIN;
            let mut svg = Svg::new("AUC vs test-benign epochs (mean over seeds)");
            svg.line(MARGIN, H - MARGIN, W - MARGIN, H - MARGIN, "black", false);
            svg.line(MARGIN, MARGIN, MARGIN, H - MARGIN, "black", false);
            let to_xy = |p: &(f64, f64)| {
                (
                    MARGIN + plot_w * (p.0 - xmin) / span,
                    H - MARGIN - plot_h * p.1.clamp(0.0, 1.0),
                )
            };
            for pair in points.windows(2) {
                let (x1, y1) = to_xy(&pair[0]);
                let (x2, y2) = to_xy(&pair[1]);
                svg.line(x1, y1, x2, y2, "#4878a8", false);
            }
            for p in &points {
                let (x, y) = to_xy(p);
                svg.circle(x, y, 4.0, "#4878a8");
                svg.text(x, y - 8.0, 11.0, "middle", &fmt_value(p.1));
                svg.text(x, H - MARGIN + 14.0, 10.0, "middle", &fmt_value(p.0));
            }
            svg.text(W / 2.0, H - 12.0, 11.0, "middle", "test-benign epochs");
            Ok(svg.finish())
        }
        PlotKind::ScoreDist => {
            // strips of per-model scores, one band per (population, class)
            let mut bands: Vec<(String, Vec<f64>)> = Vec::new();
            for rec in records.iter().filter(|r| r.seed != "aggregate") {
                for m in &rec.metrics {
                    if !m.stage.starts_with("scores_") {
                        continue;
                    }
                    let class = m.verdict.clone().unwrap_or_default();
                    let key = format!("{}/{}", m.stage, class);
                    match bands.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, v)) => v.push(m.value),
                        None => bands.push((key, vec![m.value])),
                    }
                }
            }
            if bands.is_empty() {
                return Err(Error::Config("no score rows in records".into()));
            }
            let all: Vec<f64> = bands.iter().flat_map(|(_, v)| v.iter().copied()).collect();
            let xmin = all.iter().cloned().fold(f64::INFINITY, f64::min);
            let xmax = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (xmax - xmin).max(1e-9);
            let plot_w = W - 2.0 * MARGIN;
            let band_h = (H - 2.0 * MARGIN) / bands.len() as f64;
            let mut svg = Svg::new("meta-classifier score distributions");
            for (i, (label, values)) in bands.iter().enumerate() {
                let y = MARGIN + band_h * (i as f64 + 0.5);
                svg.line(MARGIN, y, W - MARGIN, y, "#cccccc", false);
                svg.text(MARGIN - 6.0, y + 4.0, 10.0, "end", label);
                for &v in values {
                    let x = MARGIN + plot_w * (v - xmin) / span;
                    svg.circle(x, y, 3.0, "#4878a866");
                }
                let med = crate::neural_cleanse::median(values);
                let x = MARGIN + plot_w * (med - xmin) / span;
                svg.line(x, y - band_h * 0.3, x, y + band_h * 0.3, "#c03030", false);
                svg.text(x, y - band_h * 0.3 - 4.0, 10.0, "middle", &fmt_value(med));
            }
            svg.text(MARGIN, H - 12.0, 10.0, "start", &fmt_value(xmin));
            svg.text(W - MARGIN, H - 12.0, 10.0, "end", &fmt_value(xmax));
            Ok(svg.finish())
        }
    }
}

/// Render a plot into `dir`; fails without creating a file when the records
/// lack the metrics the kind requires.
pub fn emit_plot(records: &[RunRecord], kind: PlotKind, dir: &Path) -> Result<PathBuf> {
    let svg = emit(kind, records)?;
    std::fs::create_dir_all(dir)?;
    let path = dir.join(kind.file_name());
    std::fs::write(&path, svg)?;
    Ok(path)
}
