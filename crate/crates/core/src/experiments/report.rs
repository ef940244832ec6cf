use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::{table_layout, ExperimentReport};
use super::ExperimentError;
use crate::corpus::ExperimentId;

/// Full report, from which every other file can be re-rendered.
pub const REPORT_FILE: &str = "report.json";

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, ExperimentError> {
    fs::write(&path, contents).map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
    Ok(path)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialise");
    s.push('\n');
    s
}

/// Writes `<plan>.json` per run plus `report.json`, `aggregate.csv`,
/// `report.md` and `figure_data.csv` into `dir`. Returns the written paths.
pub fn render_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    for run in &report.runs {
        written.push(write(dir.join(format!("{}.json", run.plan.name())), &json(run))?);
    }
    written.push(write(dir.join(REPORT_FILE), &json(report))?);
    written.push(write(dir.join("aggregate.csv"), &aggregate_csv(report))?);
    written.push(write(dir.join("report.md"), &markdown(report))?);
    let mut fig = String::from("x,y,series\n");
    for (x, y, s) in figure_rows(report) {
        let _ = writeln!(fig, "{x},{y},{s}");
    }
    written.push(write(dir.join("figure_data.csv"), &fig)?);
    Ok(written)
}

/// One row per (condition, run) followed by one aggregate row per
/// condition.
fn aggregate_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("kind,row,column,run,seed,value,mean,ci_halfwidth,n\n");
    for run in &report.runs {
        for c in &run.cells {
            let _ = writeln!(out, "run,{},{},{},{},{},,,", c.row, c.column, run.plan.name(), run.plan.seed, c.value);
        }
    }
    for a in &report.aggregates {
        let g = a.aggregate;
        let _ = writeln!(out, "aggregate,{},{},,,,{},{},{}", a.row, a.column, g.mean, g.ci_halfwidth, g.n);
    }
    out
}

/// Plot-ready `(x, y, series)` points. Exp4 yields one point per run;
/// the other experiments one point per table cell (the mean).
pub fn figure_rows(report: &ExperimentReport) -> Vec<(String, f64, String)> {
    match report.experiment {
        ExperimentId::Exp4 => report
            .runs
            .iter()
            .filter_map(|r| {
                r.bias.as_ref().map(|b| {
                    (format!("{}", b.feminine_proportion), b.degree_of_bias, format!("seed-{:02}", r.plan.index))
                })
            })
            .collect(),
        _ => report.aggregates.iter().map(|a| (a.row.clone(), a.aggregate.mean, a.column.clone())).collect(),
    }
}

fn cell_text(report: &ExperimentReport, row: &str, column: &str) -> String {
    match report.aggregate(row, column) {
        Some(a) if report.experiment == ExperimentId::Exp4 => {
            format!("{:.3} ±{:.3}", a.mean, a.ci_halfwidth)
        }
        Some(a) => format!("{:.2} ±{:.2}", a.mean, a.ci_halfwidth),
        None => "n/a".into(),
    }
}

/// Markdown summary: the result table with `mean ±ci` cells, run counts
/// and any failures.
pub fn markdown(report: &ExperimentReport) -> String {
    let layout = table_layout(report.experiment, &report.config);
    let mut md = String::new();
    let _ = writeln!(md, "# {}: {}\n", report.experiment, layout.title);
    let _ = writeln!(md, "| {} | {} |", layout.row_header, layout.columns.join(" | "));
    let _ = writeln!(md, "|---|{}", "---|".repeat(layout.columns.len()));
    for row in &layout.rows {
        let cells: Vec<String> = layout.columns.iter().map(|c| cell_text(report, row, c)).collect();
        let _ = writeln!(md, "| {row} | {} |", cells.join(" | "));
    }
    let n_runs = report.runs.len();
    let _ = writeln!(
        md,
        "\nCells are means over seeds with 95% normal-approximation half-widths ({} per cell expected, {n_runs} runs completed).",
        report.expected_n
    );
    if let Some(p) = report.lm_dev_perplexity {
        let _ = writeln!(md, "Language-model dev perplexity: {:.3} ±{:.3}.", p.mean, p.ci_halfwidth);
    }
    let t = &report.config.train;
    let m = &report.config.model;
    let _ = writeln!(
        md,
        "Model: d_model {}, {} layers, {} heads, d_ff {}, dropout {}; {} epochs, batch {}, learning rate {}.",
        m.d_model, m.layers, m.heads, m.d_ff, m.dropout, t.epochs, t.batch_size, t.learning_rate
    );
    if report.experiment == ExperimentId::Exp4 && report.config.proportions.contains(&0.5) {
        let _ = writeln!(md, "\nAt p = 0.50 masculine is treated as the majority class by convention.");
    }
    if report.shortfall {
        let _ = writeln!(md, "\n**Shortfall:** some cells aggregate fewer than {} runs.", report.expected_n);
    }
    if !report.failures.is_empty() {
        let _ = writeln!(md, "\n## Failed runs\n");
        for f in &report.failures {
            let _ = writeln!(md, "- {}: {}", f.plan.name(), f.error);
        }
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::run::{assemble, BiasRecord, Cell, RunResult, SeedPlan};
    use crate::experiments::ExperimentConfig;
    use crate::probe::Class;

    fn fake_run(
        id: ExperimentId,
        index: usize,
        cells: Vec<Cell>,
        bias: Option<BiasRecord>,
        p: Option<f64>,
    ) -> RunResult {
        RunResult {
            experiment: id,
            plan: SeedPlan { index, seed: 100 + index as u64, proportion: p },
            records: vec![],
            cells,
            lm_dev_perplexity: 5.0 + index as f64,
            lm_best_epoch: 3,
            probe_train_items: 10,
            probe_final_loss: 0.1,
            quartiles: vec![],
            bias,
            seconds: None,
        }
    }

    fn exp1_report() -> ExperimentReport {
        let runs = (0..3)
            .map(|i| {
                let mut cells = Vec::new();
                for row in ["ambiguous", "gendered"] {
                    for column in ["ambiguous", "gendered"] {
                        cells.push(Cell { row: row.into(), column: column.into(), value: 50.0 + i as f64 });
                    }
                }
                fake_run(ExperimentId::Exp1, i, cells, None, None)
            })
            .collect();
        assemble(ExperimentId::Exp1, ExperimentConfig::default(), 0, vec![100, 101, 102], runs, vec![])
    }

    #[test]
    fn exp1_markdown_is_two_by_two() {
        let md = markdown(&exp1_report());
        let rows: Vec<&str> =
            md.lines().filter(|l| l.starts_with("| ambiguous") || l.starts_with("| gendered")).collect();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!(r.matches('±').count(), 2, "{r}");
        }
        assert!(md.contains("51.00 ±1.13"), "{md}");
    }

    #[test]
    fn exp4_figure_has_one_point_per_run() {
        let cfg = ExperimentConfig::default();
        let mut runs = Vec::new();
        for &p in &cfg.proportions {
            for i in 0..5 {
                let b = BiasRecord {
                    feminine_proportion: p,
                    seed: i as u64,
                    degree_of_bias: 0.1 * i as f64 - 0.2,
                    majority_class: Class::Masculine,
                    majority_by_convention: p == 0.5,
                    majority_predictions: 1,
                    total: 2,
                };
                let cell = Cell {
                    row: crate::experiments::proportion_label(p),
                    column: "degree_of_bias".into(),
                    value: b.degree_of_bias,
                };
                runs.push(fake_run(ExperimentId::Exp4, i, vec![cell], Some(b), Some(p)));
            }
        }
        let report = assemble(ExperimentId::Exp4, cfg, 0, (0..5).collect(), runs, vec![]);
        assert_eq!(figure_rows(&report).len(), 25);
        let dir = tempfile::tempdir().unwrap();
        render_report(&report, dir.path()).unwrap();
        let fig = fs::read_to_string(dir.path().join("figure_data.csv")).unwrap();
        assert_eq!(fig.lines().count(), 26);
        let csv = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert_eq!(csv.lines().filter(|l| l.starts_with("run,")).count(), 25);
        assert_eq!(csv.lines().filter(|l| l.starts_with("aggregate,")).count(), 5);
    }

    #[test]
    fn rendering_is_byte_identical() {
        let report = exp1_report();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fa = render_report(&report, a.path()).unwrap();
        render_report(&report, b.path()).unwrap();
        for p in fa {
            let name = p.file_name().unwrap();
            assert_eq!(fs::read(&p).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let back: ExperimentReport =
            serde_json::from_str(&fs::read_to_string(a.path().join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
