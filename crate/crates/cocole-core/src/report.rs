//! Metrics-log summarization: final/best loss components, accuracy, and a
//! side-by-side table when several runs (e.g. ablations) are compared.

use crate::error::{Error, Result};
use crate::trainer::{harmonic_mean, EvalRecord, MetricsLine, RunSummary, StepMetrics};

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub label: String,
    pub steps: usize,
    pub final_step: StepMetrics,
    pub best_total: f64,
    pub summary: Option<RunSummary>,
    pub eval: Option<EvalRecord>,
}

/// Condense one metrics log. Errors on logs with no step lines and on an
/// eval line whose stored harmonic mean disagrees with its base/novel
/// columns.
pub fn summarize(label: &str, lines: &[MetricsLine]) -> Result<RunReport> {
    let steps: Vec<&StepMetrics> = lines
        .iter()
        .filter_map(|l| match l {
            MetricsLine::Step(s) => Some(s),
            _ => None,
        })
        .collect();
    let final_step = steps
        .last()
        .ok_or_else(|| Error::Contract(format!("metrics log {label} has no step lines")))?;
    let best_total = steps.iter().map(|s| s.total).fold(f64::INFINITY, f64::min);
    let summary = lines.iter().rev().find_map(|l| match l {
        MetricsLine::Summary(s) => Some(s.clone()),
        _ => None,
    });
    let eval = lines.iter().rev().find_map(|l| match l {
        MetricsLine::Eval(e) => Some(e.clone()),
        _ => None,
    });
    if let Some(e) = &eval {
        let recomputed = harmonic_mean(e.base_acc, e.novel_acc);
        if (recomputed - e.hm).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "stored HM {} disagrees with recomputed {} in {label}",
                e.hm, recomputed
            )));
        }
    }
    Ok(RunReport {
        label: label.to_string(),
        steps: steps.len(),
        final_step: (*final_step).clone(),
        best_total,
        summary,
        eval,
    })
}

/// Fixed-width comparison table, one row per run.
pub fn render(reports: &[RunReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>6} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>9} {:>7} {:>7} {:>7}\n",
        "run", "steps", "final", "best", "ce", "ma", "or", "cc", "train%", "base", "novel", "hm"
    ));
    for r in reports {
        let f = &r.final_step;
        let train = r
            .summary
            .as_ref()
            .map(|s| format!("{:.1}", s.train_accuracy))
            .unwrap_or_else(|| "-".into());
        let (base, novel, hm) = match &r.eval {
            Some(e) => (
                format!("{:.2}", e.base_acc),
                format!("{:.2}", e.novel_acc),
                format!("{:.2}", e.hm),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        out.push_str(&format!(
            "{:<16} {:>6} {:>10.4} {:>10.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9} {:>7} {:>7} {:>7}\n",
            r.label, r.steps, f.total, r.best_total, f.ce, f.ma, f.or_, f.cc, train, base, novel, hm
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(step: u64, total: f64) -> MetricsLine {
        MetricsLine::Step(StepMetrics { step, ce: 0.1, ma: 0.2, or_: 0.3, cc: 0.4, total })
    }

    #[test]
    fn single_step_log_summary_equals_that_step() {
        let lines = vec![step(0, 1.25)];
        let r = summarize("solo", &lines).unwrap();
        assert_eq!(r.steps, 1);
        assert_eq!(r.final_step.total, 1.25);
        assert_eq!(r.best_total, 1.25);
    }

    #[test]
    fn best_tracks_minimum_and_final_tracks_last() {
        let lines = vec![step(0, 3.0), step(1, 1.0), step(2, 2.0)];
        let r = summarize("run", &lines).unwrap();
        assert_eq!(r.best_total, 1.0);
        assert_eq!(r.final_step.total, 2.0);
    }

    #[test]
    fn empty_log_is_an_error() {
        assert!(summarize("none", &[]).is_err());
    }

    #[test]
    fn hm_mismatch_is_rejected() {
        let mut lines = vec![step(0, 1.0)];
        lines.push(MetricsLine::Eval(EvalRecord {
            label: "x".into(),
            base_acc: 80.0,
            novel_acc: 60.0,
            hm: 99.0, // wrong on purpose
        }));
        assert!(summarize("bad", &lines).is_err());

        let mut ok = vec![step(0, 1.0)];
        ok.push(MetricsLine::Eval(EvalRecord {
            label: "x".into(),
            base_acc: 82.69,
            novel_acc: 63.22,
            hm: harmonic_mean(82.69, 63.22),
        }));
        let r = summarize("good", &ok).unwrap();
        assert!((r.eval.unwrap().hm - 71.66).abs() < 0.01);
    }

    #[test]
    fn two_row_ablation_table_renders() {
        let full = summarize(
            "full",
            &[
                step(0, 2.0),
                MetricsLine::Summary(RunSummary { steps: 1, epochs: 1, train_accuracy: 97.5 }),
                MetricsLine::Eval(EvalRecord {
                    label: "full".into(),
                    base_acc: 90.0,
                    novel_acc: 50.0,
                    hm: harmonic_mean(90.0, 50.0),
                }),
            ],
        )
        .unwrap();
        let ablated = summarize("no-lcc", &[step(0, 2.5)]).unwrap();
        let table = render(&[full, ablated]);
        let rows: Vec<&str> = table.lines().collect();
        assert_eq!(rows.len(), 3); // header + 2 rows
        assert!(rows[1].starts_with("full"));
        assert!(rows[2].starts_with("no-lcc"));
        assert!(rows[1].contains("64.29")); // HM of 90/50
    }
}
