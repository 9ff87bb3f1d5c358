//! Hyperparameter grids and selection by the CCR@FPR sum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ccr_at_fpr, oscr_curve};
use crate::postproc::{EvmParams, Method, OpenMaxParams, ScoreMatrix};

use super::Grids;

/// One hyperparameter combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum GridCell {
    Mss,
    Mls,
    OpenMax(OpenMaxParams),
    Evm(EvmParams),
    Proser { dummy_count: usize },
}

impl GridCell {
    pub fn method(&self) -> Method {
        match self {
            GridCell::Mss => Method::Mss,
            GridCell::Mls => Method::Mls,
            GridCell::OpenMax(_) => Method::OpenMax,
            GridCell::Evm(_) => Method::Evm,
            GridCell::Proser { .. } => Method::Proser,
        }
    }
}

/// Cells of `method` in grid order: earlier lists vary slowest.
pub fn grid_cells(method: Method, grids: &Grids) -> Vec<GridCell> {
    match method {
        Method::Mss => vec![GridCell::Mss],
        Method::Mls => vec![GridCell::Mls],
        Method::OpenMax => {
            let g = &grids.openmax;
            let mut out = Vec::new();
            for &tail_size in &g.tail_sizes {
                for &distance_multiplier in &g.distance_multipliers {
                    for &alpha in &g.alphas {
                        out.push(GridCell::OpenMax(OpenMaxParams {
                            tail_size,
                            distance_multiplier,
                            alpha,
                        }));
                    }
                }
            }
            out
        }
        Method::Evm => {
            let g = &grids.evm;
            let mut out = Vec::new();
            for &tail_size in &g.tail_sizes {
                for &distance_multiplier in &g.distance_multipliers {
                    out.push(GridCell::Evm(EvmParams {
                        tail_size,
                        distance_multiplier,
                        cover_threshold: g.cover_threshold,
                    }));
                }
            }
            out
        }
        Method::Proser => grids
            .proser
            .dummy_counts
            .iter()
            .map(|&dummy_count| GridCell::Proser { dummy_count })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry<C> {
    pub index: usize,
    pub cell: C,
    /// Validation CCR@FPR sum; `None` if the cell failed.
    pub sigma: Option<f64>,
    #[serde(default)]
    pub error: Option<String>,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct GridOutcome<C, M> {
    pub entries: Vec<GridEntry<C>>,
    pub best: usize,
    pub model: M,
}

/// Evaluates every cell in parallel and keeps the one with the largest
/// CCR@FPR sum over `targets`. Ties go to the earliest cell. A failing cell
/// is recorded and skipped; only if every cell fails is an error returned.
pub fn grid_search_with<C, M, F>(cells: &[C], targets: &[f64], eval: F) -> Result<GridOutcome<C, M>>
where
    C: Clone + Sync,
    M: Send,
    F: Fn(usize, &C) -> Result<(M, ScoreMatrix)> + Sync,
{
    if cells.is_empty() {
        return Err(Error::Empty("grid"));
    }
    let results: Vec<Result<(M, f64)>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let (model, scores) = eval(i, c)?;
            let curve = oscr_curve(&scores)?;
            Ok((model, ccr_at_fpr(&curve, targets)?.sum))
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, r) in results.iter().enumerate() {
        if let Ok((_, s)) = r {
            if best.is_none_or(|(_, b)| *s > b) {
                best = Some((i, *s));
            }
        }
    }
    let Some((best_index, _)) = best else {
        let first = results
            .into_iter()
            .find_map(|r| r.err())
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(Error::AllCellsFailed {
            count: cells.len(),
            first,
        });
    };
    let mut entries = Vec::with_capacity(cells.len());
    let mut model = None;
    for (i, (r, c)) in results.into_iter().zip(cells).enumerate() {
        let (sigma, error) = match r {
            Ok((m, s)) => {
                if i == best_index {
                    model = Some(m);
                }
                (Some(s), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        entries.push(GridEntry {
            index: i,
            cell: c.clone(),
            sigma,
            error,
            best: i == best_index,
        });
    }
    Ok(GridOutcome {
        entries,
        best: best_index,
        model: model.expect("best cell succeeded"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat;
    use crate::sample::Category;

    fn toy(known: &[f64], negative: &[f64]) -> ScoreMatrix {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut cats = Vec::new();
        for &s in known {
            rows.push(vec![s, 0.0]);
            labels.push(1);
            cats.push(Category::Known);
        }
        for &s in negative {
            rows.push(vec![s, 0.0]);
            labels.push(3);
            cats.push(Category::Negative);
        }
        ScoreMatrix::new(Mat::from_rows(&rows).unwrap(), labels, cats).unwrap()
    }

    #[test]
    fn default_grid_sizes() {
        let g = Grids::default();
        assert_eq!(grid_cells(Method::OpenMax, &g).len(), 96);
        assert_eq!(grid_cells(Method::Evm, &g).len(), 80);
        assert_eq!(grid_cells(Method::Proser, &g).len(), 6);
        assert_eq!(grid_cells(Method::Mss, &g), vec![GridCell::Mss]);
        // first cell uses the first value of every list
        assert_eq!(
            grid_cells(Method::OpenMax, &g)[0],
            GridCell::OpenMax(OpenMaxParams {
                tail_size: 10,
                distance_multiplier: 1.5,
                alpha: 2
            })
        );
    }

    #[test]
    fn single_cell_is_best() {
        let out = grid_search_with(&[7], &[1.0], |_, _| Ok(((), toy(&[0.9], &[0.1])))).unwrap();
        assert_eq!(out.best, 0);
        assert!(out.entries[0].best);
    }

    #[test]
    fn dominant_cell_wins_and_ties_go_first() {
        let weak = toy(&[0.9, 0.05], &[0.5, 0.1]);
        let strong = toy(&[0.9, 0.8], &[0.5, 0.1]);
        let cells = [weak.clone(), strong.clone(), strong];
        let out = grid_search_with(&[0, 1, 2], &[0.5, 1.0], |i, _| Ok((i, cells[i].clone()))).unwrap();
        assert_eq!(out.best, 1);
        assert_eq!(out.model, 1);
        assert_eq!(out.entries[1].sigma, out.entries[2].sigma);
    }

    #[test]
    fn failed_cells_are_isolated() {
        let out = grid_search_with(&[0, 1, 2], &[1.0], |i, _| {
            if i == 1 {
                Ok(((), toy(&[0.9], &[0.1])))
            } else {
                Err(Error::InvalidParameter("boom".into()))
            }
        })
        .unwrap();
        assert_eq!(out.best, 1);
        assert!(out.entries[0].error.is_some());
        assert_eq!(out.entries[2].sigma, None);
        let all_bad: Result<GridOutcome<i32, ()>> =
            grid_search_with(&[0, 1], &[1.0], |_, _| Err(Error::NoConvergence));
        assert!(matches!(all_bad, Err(Error::AllCellsFailed { count: 2, .. })));
    }
}
