//! Report model and its text renderings.
//!
//! One table per repeat: a row per metric (AUROC, ECE, then MMC per images
//! per prediction) and a column per method. Cells read
//! `0.930 (95% CI: 0.909-0.951) (p=0.003)`; the p-value is that of the
//! comparison against the reference method and is absent in its own column.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::protocol::ExperimentConfig;
use crate::stats::{BootstrapResult, WilcoxonMethod};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl From<&BootstrapResult> for Summary {
    fn from(r: &BootstrapResult) -> Self {
        Self {
            point: r.point,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
        }
    }
}

impl Summary {
    pub fn render(&self) -> String {
        format!("{:.3} (95% CI: {:.3}-{:.3})", self.point, self.ci_low, self.ci_high)
    }
}

pub fn render_p(p: f64) -> String {
    if p < 1e-3 {
        "(p<0.001)".to_string()
    } else {
        format!("(p={p:.3})")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricKind {
    Auroc,
    Ece,
    /// Also written MMC.
    Mcc {
        series_length: usize,
        images_per_prediction: usize,
    },
}

impl MetricKind {
    pub fn higher_is_better(&self) -> bool {
        matches!(self, MetricKind::Auroc)
    }

    pub fn key(&self) -> String {
        match self {
            MetricKind::Auroc => "auroc".into(),
            MetricKind::Ece => "ece".into(),
            MetricKind::Mcc {
                images_per_prediction, ..
            } => format!("mcc_images_{images_per_prediction}"),
        }
    }

    pub fn label(&self) -> String {
        match self {
            MetricKind::Auroc => "AUROC ↑".into(),
            MetricKind::Ece => "ECE ↓".into(),
            MetricKind::Mcc {
                images_per_prediction, ..
            } => format!("MMC (# images: {images_per_prediction}) ↓"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellComparison {
    /// Reference method the cell was tested against.
    pub against: String,
    pub p_value: f64,
    pub adjusted_alpha: f64,
    pub significant: bool,
    pub test: WilcoxonMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    #[serde(flatten)]
    pub summary: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<CellComparison>,
}

impl Cell {
    pub fn render(&self) -> String {
        match &self.comparison {
            Some(c) => format!("{} {}", self.summary.render(), render_p(c.p_value)),
            None => self.summary.render(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub kind: MetricKind,
    pub label: String,
    pub cells: Vec<Cell>,
}

impl MetricRow {
    pub fn cell(&self, method: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatTable {
    /// 1-based.
    pub repeat: usize,
    pub plan_id: String,
    pub methods: Vec<String>,
    pub rows: Vec<MetricRow>,
}

impl RepeatTable {
    pub fn row(&self, kind: &MetricKind) -> Option<&MetricRow> {
        self.rows.iter().find(|r| &r.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetadata {
    pub n_lesions: usize,
    pub images_per_lesion: usize,
    pub scorer: String,
    pub stratified_bootstrap: bool,
    pub reference_method: Option<String>,
    pub comparisons: usize,
    pub adjusted_alpha: f64,
    pub robustness_reconstruction: String,
    pub robustness_series_methods: String,
    pub mv_real_subset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub metadata: ProtocolMetadata,
    pub repeats: Vec<RepeatTable>,
}

fn markdown_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ExperimentReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let m = &self.metadata;
        let _ = writeln!(out, "# Multiview evaluation report\n");
        let _ = writeln!(
            out,
            "{} lesions, {} images per lesion, scorer {}, seed {}, {} bootstrap iterations, {} repeats.",
            m.n_lesions, m.images_per_lesion, m.scorer, self.config.seed, self.config.n_bootstrap, self.config.n_repeats
        );
        if let Some(reference) = &m.reference_method {
            let _ = writeln!(
                out,
                "p-values: paired Wilcoxon signed-rank test against {reference}; significant below {} ({} comparisons).",
                m.adjusted_alpha, m.comparisons
            );
        }
        for table in &self.repeats {
            let _ = writeln!(out, "\n## Repeat {}\n", table.repeat);
            let mut header = vec!["Metric".to_string()];
            header.extend(table.methods.iter().cloned());
            let rows: Vec<Vec<String>> = table
                .rows
                .iter()
                .map(|row| {
                    std::iter::once(row.label.clone())
                        .chain(row.cells.iter().map(Cell::render))
                        .collect()
                })
                .collect();
            markdown_table(&mut out, &header, &rows);
        }
        out
    }

    /// Long format: one line per repeat, metric and method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repeat,metric,method,point,ci_low,ci_high,p_value,adjusted_alpha,significant,rendered\n");
        for table in &self.repeats {
            for row in &table.rows {
                for cell in &row.cells {
                    let (p, a, s) = match &cell.comparison {
                        Some(c) => (c.p_value.to_string(), c.adjusted_alpha.to_string(), c.significant.to_string()),
                        None => Default::default(),
                    };
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{}",
                        table.repeat,
                        row.kind.key(),
                        csv_field(&cell.method),
                        cell.summary.point,
                        cell.summary.ci_low,
                        cell.summary.ci_high,
                        p,
                        a,
                        s,
                        csv_field(&cell.render())
                    );
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_extra: usize,
    /// Images per prediction (`n_extra + 1`).
    pub images: usize,
    pub auroc: Summary,
    pub ece: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub metadata: ProtocolMetadata,
    pub plan_id: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# MV-Real image-count sweep\n\n");
        let header = ["Images", "AUROC ↑", "ECE ↓"].map(String::from);
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.images.to_string(), r.auroc.render(), r.ece.render()])
            .collect();
        markdown_table(&mut out, &header, &rows);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_extra,images,auroc,auroc_ci_low,auroc_ci_high,ece,ece_ci_low,ece_ci_high\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.n_extra, r.images, r.auroc.point, r.auroc.ci_low, r.auroc.ci_high, r.ece.point, r.ece.ci_low, r.ece.ci_high
            );
        }
        out
    }
}
