//! Evaluation reports and the cross-run comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use catext_core::eval::{ClassResult, EvalResult};
use catext_core::toydet::{Scenario, ScenarioEval};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
}

impl From<&ClassResult> for Metrics {
    fn from(c: &ClassResult) -> Self {
        Metrics { ap: c.ap, ap50: c.ap50, ap75: c.ap75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per class over all evaluation images, keyed by union class name.
    pub classes: BTreeMap<String, Metrics>,
    /// Mean over classes.
    pub mean: Metrics,
    /// Each class on the images of datasets that do not annotate it.
    pub cross_dataset: Metrics,
    /// Each class on the images of datasets that annotate it.
    pub own_dataset: Metrics,
}

fn pooled(results: &[EvalResult]) -> Metrics {
    let rows: Vec<&ClassResult> = results
        .iter()
        .flat_map(|r| r.classes.iter().filter(|c| c.num_truths > 0))
        .collect();
    if rows.is_empty() {
        return Metrics::default();
    }
    let n = rows.len() as f64;
    Metrics {
        ap: rows.iter().map(|c| c.ap).sum::<f64>() / n,
        ap50: rows.iter().map(|c| c.ap50).sum::<f64>() / n,
        ap75: rows.iter().map(|c| c.ap75).sum::<f64>() / n,
    }
}

impl EvalReport {
    pub fn new(scenario: &Scenario, eval: &ScenarioEval) -> Self {
        let classes = eval
            .overall
            .classes
            .iter()
            .map(|c| (scenario.union.names[c.class.0].clone(), Metrics::from(c)))
            .collect();
        EvalReport {
            classes,
            mean: Metrics {
                ap: eval.overall.ap,
                ap50: eval.overall.ap50,
                ap75: eval.overall.ap75,
            },
            cross_dataset: pooled(&eval.cross),
            own_dataset: pooled(&eval.own),
        }
    }
}

/// CSV and markdown comparison of labeled reports, one row per run.
pub fn comparison(runs: &[(String, EvalReport)]) -> (String, String) {
    let class_names: Vec<&String> = {
        let mut names: Vec<&String> = runs.iter().flat_map(|(_, r)| r.classes.keys()).collect();
        names.sort();
        names.dedup();
        names
    };
    let mut header = vec!["run", "AP", "AP50", "AP75", "cross_AP", "cross_AP50", "own_AP50"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(class_names.iter().map(|n| format!("{n} AP50")));

    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|(label, r)| {
            let mut row = vec![label.clone()];
            for v in [r.mean.ap, r.mean.ap50, r.mean.ap75, r.cross_dataset.ap, r.cross_dataset.ap50, r.own_dataset.ap50] {
                row.push(format!("{v:.4}"));
            }
            for n in &class_names {
                row.push(r.classes.get(*n).map_or(String::from("-"), |m| format!("{:.4}", m.ap50)));
            }
            row
        })
        .collect();

    let mut csv = header.join(",");
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }

    let mut md = String::new();
    let _ = writeln!(md, "| {} |", header.join(" | "));
    let _ = writeln!(md, "|{}", "---|".repeat(header.len()));
    for row in &rows {
        let _ = writeln!(md, "| {} |", row.join(" | "));
    }
    (csv, md)
}
