use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{CellReport, EvalReport, ReportError, Result};
use crate::feature_store::Representation;
use crate::metrics::ThresholdRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(ReportError::UnknownFormat(other.to_owned())),
        }
    }
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => Ok(render_markdown(report)),
    }
}

fn auroc_text(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"))
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Models in order of first appearance.
fn models(report: &EvalReport) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for c in &report.cells {
        if !out.contains(&c.model_id.as_str()) {
            out.push(&c.model_id);
        }
    }
    out
}

fn representations(report: &EvalReport) -> Vec<Representation> {
    let present: BTreeSet<Representation> = report.cells.iter().map(|c| c.representation).collect();
    present.into_iter().collect()
}

/// The cell summarizing a (model, representation): the deepest layer probed.
fn summary_cell<'a>(report: &'a EvalReport, model: &str, rep: Representation) -> Option<&'a CellReport> {
    report
        .cells
        .iter()
        .filter(|c| c.model_id == model && c.representation == rep)
        .max_by_key(|c| c.layer)
}

fn table_header(out: &mut String, first: &[&str], numeric: &[String]) {
    let cols: Vec<&str> = first
        .iter()
        .copied()
        .chain(numeric.iter().map(String::as_str))
        .collect();
    let _ = writeln!(out, "| {} |", cols.join(" | "));
    let rule: Vec<&str> = first
        .iter()
        .map(|_| "---")
        .chain(numeric.iter().map(|_| "---:"))
        .collect();
    let _ = writeln!(out, "| {} |", rule.join(" | "));
}

fn row(out: &mut String, cells: &[String]) {
    let _ = writeln!(out, "| {} |", cells.join(" | "));
}

fn render_markdown(report: &EvalReport) -> String {
    let mut out = String::from("# Hallucination probe report\n");
    for note in &report.notes {
        let _ = write!(out, "\n> {note}\n");
    }
    if report.cells.is_empty() {
        out.push_str("\nNo cells.\n");
        return out;
    }
    let models = models(report);
    let reps = representations(report);

    summary_table(&mut out, report, &models, &reps);
    for model in &models {
        layer_table(&mut out, report, model);
    }
    for model in &models {
        group_tables(&mut out, report, model, &reps);
    }
    for &rep in &reps {
        best_f1_table(&mut out, report, &models, rep);
    }
    for cell in &report.cells {
        sweep_table(&mut out, cell);
    }
    out
}

fn summary_table(out: &mut String, report: &EvalReport, models: &[&str], reps: &[Representation]) {
    out.push_str("\n## AUROC by representation\n\n");
    let mut numeric: Vec<String> = reps.iter().map(|r| r.to_string()).collect();
    numeric.push("Average".into());
    table_header(out, &["Model"], &numeric);

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); reps.len()];
    let mut all = Vec::new();
    for &model in models {
        let mut cells = vec![model.to_owned()];
        let mut values = Vec::new();
        for (k, &rep) in reps.iter().enumerate() {
            match summary_cell(report, model, rep) {
                Some(c) => {
                    cells.push(auroc_text(c.eval.auroc));
                    if let Some(v) = c.eval.auroc {
                        values.push(v);
                        columns[k].push(v);
                    }
                }
                None => cells.push("-".into()),
            }
        }
        all.extend_from_slice(&values);
        cells.push(auroc_text(mean(&values)));
        row(out, &cells);
    }
    let mut cells = vec!["**Average**".to_owned()];
    cells.extend(columns.iter().map(|c| auroc_text(mean(c))));
    cells.push(auroc_text(mean(&all)));
    row(out, &cells);
}

fn layer_table(out: &mut String, report: &EvalReport, model: &str) {
    let cells: Vec<&CellReport> = report.cells.iter().filter(|c| c.model_id == model).collect();
    let layers: BTreeSet<u32> = cells
        .iter()
        .filter(|c| c.representation != Representation::VF)
        .map(|c| c.layer)
        .collect();
    if layers.is_empty() {
        return;
    }
    let _ = write!(out, "\n## AUROC by layer: {model}\n\n");
    let mut numeric = vec!["Encoder".to_owned()];
    numeric.extend(layers.iter().map(|l| format!("Layer {l}")));
    table_header(out, &["Rep"], &numeric);
    let reps: BTreeSet<Representation> = cells.iter().map(|c| c.representation).collect();
    for rep in reps {
        let mut line = vec![rep.to_string()];
        let find = |layer: u32| {
            cells
                .iter()
                .find(|c| c.representation == rep && c.layer == layer)
                .map_or_else(|| "-".to_owned(), |c| auroc_text(c.eval.auroc))
        };
        if rep == Representation::VF {
            line.push(find(0));
            line.extend(layers.iter().map(|_| "-".to_owned()));
        } else {
            line.push("-".into());
            line.extend(layers.iter().map(|&l| find(l)));
        }
        row(out, &line);
    }
}

fn group_tables(out: &mut String, report: &EvalReport, model: &str, reps: &[Representation]) {
    let summaries: Vec<(Representation, &CellReport)> = reps
        .iter()
        .filter_map(|&r| summary_cell(report, model, r).map(|c| (r, c)))
        .collect();
    let keys: BTreeSet<&str> = summaries
        .iter()
        .flat_map(|(_, c)| c.eval.groups.keys().map(String::as_str))
        .collect();
    for key in keys {
        // Only representations that were broken down by this key.
        let summaries: Vec<(Representation, &CellReport)> = summaries
            .iter()
            .filter(|(_, c)| c.eval.groups.contains_key(key))
            .copied()
            .collect();
        let has = |r: Representation| summaries.iter().any(|(x, _)| *x == r);
        let with_delta = has(Representation::VF) && has(Representation::QT);
        let groups: BTreeSet<&str> = summaries
            .iter()
            .filter_map(|(_, c)| c.eval.groups.get(key))
            .flat_map(|g| g.keys().map(String::as_str))
            .collect();
        let _ = write!(out, "\n## AUROC by {key}: {model}\n\n");
        let mut numeric = vec!["Count".to_owned(), "Rate".to_owned()];
        numeric.extend(summaries.iter().map(|(r, _)| format!("{r} AUROC")));
        if with_delta {
            numeric.push("ΔAUROC (QT − VF)".into());
        }
        table_header(out, &["Group"], &numeric);
        for group in groups {
            let stats = |c: &CellReport| c.eval.groups.get(key).and_then(|g| g.get(group)).cloned();
            let first = summaries.iter().find_map(|(_, c)| stats(c));
            let mut line = vec![group.to_owned()];
            match &first {
                Some(s) => {
                    line.push(s.count.to_string());
                    line.push(pct(s.hallucination_rate));
                }
                None => line.extend(["-".to_owned(), "-".to_owned()]),
            }
            let mut by_rep = Vec::new();
            for (r, c) in &summaries {
                let a = stats(c).and_then(|s| s.auroc);
                by_rep.push((*r, a));
                line.push(auroc_text(a));
            }
            if with_delta {
                let get = |r| by_rep.iter().find(|(x, _)| *x == r).and_then(|(_, a)| *a);
                line.push(match (get(Representation::QT), get(Representation::VF)) {
                    (Some(q), Some(v)) => format!("{:.4}", q - v),
                    _ => "n/a".into(),
                });
            }
            row(out, &line);
        }
    }
}

fn best_f1_table(out: &mut String, report: &EvalReport, models: &[&str], rep: Representation) {
    let rows: Vec<(&str, &ThresholdRow)> = models
        .iter()
        .filter_map(|&m| {
            summary_cell(report, m, rep)
                .and_then(|c| c.eval.best_f1.as_ref())
                .map(|b| (m, b))
        })
        .collect();
    if rows.is_empty() {
        return;
    }
    let _ = write!(out, "\n## Early refusal at best-F1 threshold: {rep}\n\n");
    let numeric: Vec<String> = ["Best F1 Threshold", "Recall", "Precision", "F1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    table_header(out, &["Model"], &numeric);
    for (model, b) in rows {
        row(
            out,
            &[
                model.to_owned(),
                b.tau.to_string(),
                pct(b.recall),
                pct(b.precision),
                pct(b.f1),
            ],
        );
    }
}

fn sweep_table(out: &mut String, cell: &CellReport) {
    if cell.eval.threshold_table.is_empty() {
        return;
    }
    let _ = write!(
        out,
        "\n## Threshold sweep: {} {} layer {}\n\n",
        cell.model_id, cell.representation, cell.layer
    );
    let numeric: Vec<String> = ["TP", "FP", "FN", "TN", "Precision", "Recall", "F1", "Coverage"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    table_header(out, &["τ"], &numeric);
    for r in &cell.eval.threshold_table {
        row(
            out,
            &[
                r.tau.to_string(),
                r.tp.to_string(),
                r.fp.to_string(),
                r.fn_.to_string(),
                r.tn.to_string(),
                pct(r.precision),
                pct(r.recall),
                pct(r.f1),
                pct(r.coverage),
            ],
        );
    }
}

fn render_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| ReportError::Manifest(e.to_string());
    w.write_record([
        "model_id",
        "representation",
        "layer",
        "subset",
        "n",
        "positives",
        "auroc",
        "best_tau",
        "best_precision",
        "best_recall",
        "best_f1",
    ])
    .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &report.cells {
        let b = c.eval.best_f1.as_ref();
        w.write_record([
            c.model_id.clone(),
            c.representation.to_string(),
            c.layer.to_string(),
            c.subset.to_string(),
            c.eval.n.to_string(),
            c.eval.positives.to_string(),
            opt(c.eval.auroc),
            opt(b.map(|b| b.tau)),
            opt(b.map(|b| b.precision)),
            opt(b.map(|b| b.recall)),
            opt(b.map(|b| b.f1)),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Manifest(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::{CellEval, Subset};
    use std::collections::BTreeMap;

    fn cell(model: &str, rep: Representation, layer: u32, auroc: Option<f64>) -> CellReport {
        CellReport {
            model_id: model.into(),
            representation: rep,
            layer,
            num_layers: None,
            subset: Subset::Val,
            n_train: None,
            eval: CellEval {
                n: 10,
                positives: 3,
                auroc,
                threshold_table: vec![],
                best_f1: None,
                groups: BTreeMap::new(),
            },
        }
    }

    #[test]
    fn unknown_format_is_error() {
        assert!(matches!(
            "pdf".parse::<ReportFormat>(),
            Err(ReportError::UnknownFormat(_))
        ));
        assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
    }

    #[test]
    fn empty_groups_section_omitted() {
        let r = EvalReport {
            cells: vec![cell("m", Representation::QT, 4, Some(0.8))],
            notes: vec![],
        };
        let md = render_report(&r, ReportFormat::Markdown).unwrap();
        assert!(!md.contains("AUROC by hallucination_type"));
        assert!(md.contains("| m | 0.8000 | 0.8000 |"));
    }

    #[test]
    fn undefined_auroc_renders_na_and_is_skipped_in_averages() {
        let r = EvalReport {
            cells: vec![
                cell("m", Representation::VF, 0, None),
                cell("m", Representation::QT, 4, Some(0.9)),
            ],
            notes: vec![],
        };
        let md = render_report(&r, ReportFormat::Markdown).unwrap();
        assert!(md.contains("| m | n/a | 0.9000 | 0.9000 |"), "{md}");
    }

    #[test]
    fn summary_uses_deepest_layer() {
        let r = EvalReport {
            cells: vec![
                cell("m", Representation::QT, 1, Some(0.5)),
                cell("m", Representation::QT, 8, Some(0.7)),
            ],
            notes: vec![],
        };
        let md = render_report(&r, ReportFormat::Markdown).unwrap();
        assert!(md.contains("| m | 0.7000 | 0.7000 |"));
        assert!(md.contains("| QT | - | 0.5000 | 0.7000 |"));
    }

    #[test]
    fn csv_has_row_per_cell() {
        let r = EvalReport {
            cells: vec![
                cell("m", Representation::VF, 0, Some(0.6)),
                cell("m", Representation::QT, 4, None),
            ],
            notes: vec![],
        };
        let csv = render_report(&r, ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "m,VF,0,val,10,3,0.6,,,,");
    }

    #[test]
    fn empty_report_renders() {
        let md = render_report(&EvalReport::default(), ReportFormat::Markdown).unwrap();
        assert!(md.contains("No cells"));
    }
}
