//! Writing results: report tables, OSCR curve data, histograms and grid
//! tables.
//!
//! ```text
//! <out>/results.json                 everything below, machine-readable
//! <out>/report.{csv,json,md}         one row per regime, method and category
//! <out>/oscr/<regime>_<category>.csv method,theta,fpr,ccr
//! <out>/cells/<regime>_<method>/     grid.csv, selected.json,
//!                                    oscr_negative.csv, oscr_unknown.csv,
//!                                    histogram.csv
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{Histogram, OscrCurve};
use crate::postproc::Method;
use crate::sample::Category;
use crate::training::Regime;

use super::{CellResult, ExperimentSummary, GridCell, GridEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub regime: Regime,
    pub method: Method,
    pub category: Category,
    pub auroc: Option<f64>,
    #[serde(rename = "ccr@1e-3")]
    pub ccr_1e3: Option<f64>,
    #[serde(rename = "ccr@1e-2")]
    pub ccr_1e2: Option<f64>,
    #[serde(rename = "ccr@1e-1")]
    pub ccr_1e1: Option<f64>,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

const CATEGORIES: [Category; 2] = [Category::Negative, Category::Unknown];

/// Negative block first, then the unknown block; cells in run order.
pub fn report_rows(summary: &ExperimentSummary) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for category in CATEGORIES {
        for cell in &summary.cells {
            let eval = cell.test.as_ref().map(|t| match category {
                Category::Negative => &t.negative,
                _ => &t.unknown,
            });
            let ccr = |i: usize| eval.and_then(|e| e.ccr.get(i).copied().flatten());
            rows.push(ReportRow {
                regime: cell.regime,
                method: cell.method,
                category,
                auroc: eval.map(|e| e.auroc),
                ccr_1e3: ccr(0),
                ccr_1e2: ccr(1),
                ccr_1e1: ccr(2),
                accuracy: eval.map(|e| e.accuracy),
                error: cell.error.clone(),
            });
        }
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("category,regime,method,auroc,ccr@1e-3,ccr@1e-2,ccr@1e-1,accuracy,status\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.category,
            r.regime,
            r.method,
            opt(r.auroc),
            opt(r.ccr_1e3),
            opt(r.ccr_1e2),
            opt(r.ccr_1e1),
            opt(r.accuracy),
            if r.error.is_some() { "failed" } else { "ok" }
        )
        .unwrap();
    }
    s
}

pub fn report_markdown(rows: &[ReportRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut s = String::new();
    for category in CATEGORIES {
        let title = match category {
            Category::Negative => "Negative",
            _ => "Unknown",
        };
        writeln!(s, "## {title}\n").unwrap();
        s.push_str("| Regime | Method | AUROC | CCR@1e-3 | CCR@1e-2 | CCR@1e-1 | Acc. |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in rows.iter().filter(|r| r.category == category) {
            writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.regime,
                r.method,
                cell(r.auroc),
                cell(r.ccr_1e3),
                cell(r.ccr_1e2),
                cell(r.ccr_1e1),
                cell(r.accuracy)
            )
            .unwrap();
        }
        s.push('\n');
    }
    s
}

/// `theta,fpr,ccr`, one line per curve point.
pub fn curve_csv(curve: &OscrCurve) -> String {
    let mut s = String::from("theta,fpr,ccr\n");
    for p in &curve.points {
        writeln!(s, "{},{},{}", p.theta, p.fpr, p.ccr).unwrap();
    }
    s
}

pub fn histogram_csv(h: &Histogram) -> String {
    let edges = h.edges();
    let mut s = String::from("low,high,known,negative,unknown\n");
    for b in 0..h.bins() {
        writeln!(
            s,
            "{},{},{},{},{}",
            edges[b],
            edges[b + 1],
            h.known[b],
            h.negative[b],
            h.unknown[b]
        )
        .unwrap();
    }
    s
}

/// Hyperparameter columns depend on the method; `sigma` is empty for failed
/// cells.
pub fn grid_csv(method: Method, entries: &[GridEntry<GridCell>]) -> String {
    let mut s = String::from(match method {
        Method::OpenMax => "index,tail_size,distance_multiplier,alpha,sigma,best,status\n",
        Method::Evm => "index,tail_size,distance_multiplier,sigma,best,status\n",
        Method::Proser => "index,dummy_count,sigma,best,status\n",
        Method::Mss | Method::Mls => "index,sigma,best,status\n",
    });
    for e in entries {
        let params = match &e.cell {
            GridCell::Mss | GridCell::Mls => String::new(),
            GridCell::OpenMax(p) => {
                format!("{},{},{},", p.tail_size, p.distance_multiplier, p.alpha)
            }
            GridCell::Evm(p) => format!("{},{},", p.tail_size, p.distance_multiplier),
            GridCell::Proser { dummy_count } => format!("{dummy_count},"),
        };
        writeln!(
            s,
            "{},{}{},{},{}",
            e.index,
            params,
            opt(e.sigma),
            e.best,
            if e.error.is_some() { "failed" } else { "ok" }
        )
        .unwrap();
    }
    s
}

fn grouped_curves(summary: &ExperimentSummary, regime: Regime, category: Category) -> String {
    let mut s = String::from("method,theta,fpr,ccr\n");
    for cell in summary.cells.iter().filter(|c| c.regime == regime) {
        let Some(t) = &cell.test else { continue };
        let curve = match category {
            Category::Negative => &t.negative_curve,
            _ => &t.unknown_curve,
        };
        for p in &curve.points {
            writeln!(s, "{},{},{},{}", cell.method, p.theta, p.fpr, p.ccr).unwrap();
        }
    }
    s
}

fn write_cell(cell: &CellResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("grid.csv"), grid_csv(cell.method, &cell.grid))?;
    let selected = serde_json::json!({
        "selected": cell.selected,
        "error": cell.error,
    });
    std::fs::write(
        dir.join("selected.json"),
        serde_json::to_string_pretty(&selected)? + "\n",
    )?;
    if let Some(t) = &cell.test {
        std::fs::write(dir.join("oscr_negative.csv"), curve_csv(&t.negative_curve))?;
        std::fs::write(dir.join("oscr_unknown.csv"), curve_csv(&t.unknown_curve))?;
        std::fs::write(dir.join("histogram.csv"), histogram_csv(&t.histogram))?;
    }
    Ok(())
}

/// Writes every artifact of `summary` below `out`.
pub fn export_report(summary: &ExperimentSummary, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out.join("oscr"))?;
    std::fs::write(
        out.join("results.json"),
        serde_json::to_string_pretty(summary)? + "\n",
    )?;
    let rows = report_rows(summary);
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    std::fs::write(out.join("report.csv"), report_csv(&rows))?;
    std::fs::write(out.join("report.md"), report_markdown(&rows))?;

    let mut regimes: Vec<Regime> = Vec::new();
    for c in &summary.cells {
        if !regimes.contains(&c.regime) {
            regimes.push(c.regime);
        }
        write_cell(c, &out.join("cells").join(c.name()))?;
    }
    for regime in regimes {
        for category in CATEGORIES {
            std::fs::write(
                out.join("oscr").join(format!("{regime}_{category}.csv")),
                grouped_curves(summary, regime, category),
            )?;
        }
    }
    Ok(())
}
