use std::fmt::Write as _;

use super::{CellStatus, ExperimentBundle};
use crate::error::Result;
use crate::evaluation::{Metric, VariantReport};

const GAP: &str = "gap";

fn cell(row: Option<&VariantReport>, m: Metric) -> String {
    match row {
        Some(r) if r.seeds.len() > 1 => format!("{:.1} ± {:.1}", r.metric(m).mean, r.metric(m).std),
        Some(r) => format!("{:.1}", r.metric(m).mean),
        None => GAP.into(),
    }
}

fn failed_seeds(bundle: &ExperimentBundle, label: &str) -> Vec<u64> {
    bundle
        .cells
        .iter()
        .filter(|c| c.label == label && c.status == CellStatus::Failed)
        .map(|c| c.seed)
        .collect()
}

/// Markdown table with one row per configured variant (plus the encoder
/// reference row) and the four segmentation metrics as columns.
pub fn render_markdown(bundle: &ExperimentBundle) -> String {
    let mut s = format!("### {}\n\n", bundle.name);
    s.push_str("| | mIoU | mIoU-FG | ARI | ARI-FG |\n|---|---|---|---|---|\n");
    for label in &bundle.row_order {
        let row = bundle.report.row(label);
        let _ = write!(s, "| {label} |");
        for m in Metric::ALL {
            let _ = write!(s, " {} |", cell(row, m));
        }
        s.push('\n');
    }
    let mut notes = Vec::new();
    for label in &bundle.row_order {
        let failed = failed_seeds(bundle, label);
        if !failed.is_empty() {
            notes.push(format!("{label}: seeds {failed:?} failed"));
        }
    }
    if !notes.is_empty() {
        s.push('\n');
        for n in notes {
            let _ = writeln!(s, "- {n}");
        }
    }
    let _ = writeln!(
        s,
        "\n{} test videos, {} predicted frames after {} context frames; values ×100, mean ± std over seeds.",
        bundle.report.num_samples, bundle.report.horizon, bundle.report.context_len
    );
    s
}

/// Machine-readable table: one line per row with mean and std per metric,
/// the contributing seeds and the failed ones. Missing rows have empty
/// metric fields.
pub fn render_csv(bundle: &ExperimentBundle) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row".to_string(), "variant".to_string()];
    for m in Metric::ALL {
        header.push(format!("{}_mean", m.label()));
        header.push(format!("{}_std", m.label()));
    }
    header.extend(["seeds".into(), "failed_seeds".into()]);
    w.write_record(&header)?;
    for label in &bundle.row_order {
        let row = bundle.report.row(label);
        let mut rec = vec![
            label.clone(),
            row.and_then(|r| r.variant).map_or("", |v| v.as_str()).to_string(),
        ];
        for m in Metric::ALL {
            match row {
                Some(r) => {
                    rec.push(format!("{:.6}", r.metric(m).mean));
                    rec.push(format!("{:.6}", r.metric(m).std));
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
        rec.push(row.map_or(String::new(), |r| join(&r.seeds)));
        rec.push(join(&failed_seeds(bundle, label)));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Side-by-side comparison of two bundles joined on row label.
pub fn merge_tables(a: &ExperimentBundle, b: &ExperimentBundle) -> String {
    let mut labels: Vec<&String> = a.row_order.iter().collect();
    for l in &b.row_order {
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    let (na, nb) = (&a.name, &b.name);
    let mut s = format!("### {na} vs {nb}\n\n|");
    for m in Metric::ALL {
        let _ = write!(s, " | {} ({na}) | {} ({nb})", m.label(), m.label());
    }
    s.push_str(" |\n|---");
    s.push_str(&"|---".repeat(2 * Metric::ALL.len()));
    s.push_str("|\n");
    for label in labels {
        let _ = write!(s, "| {label}");
        for m in Metric::ALL {
            let _ = write!(s, " | {} | {}", cell(a.report.row(label), m), cell(b.report.row(label), m));
        }
        s.push_str(" |\n");
    }
    s
}
