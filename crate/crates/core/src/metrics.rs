//! Open-set evaluation over a [`ScoreMatrix`].
//!
//! A known sample counts as correctly classified at threshold `theta` when
//! its arg-max class is its label and the score of that class is `>= theta`.
//! A negative or unknown sample is a false positive when its maximum score
//! is `>= theta`. Thresholds are the observed score values, so every point
//! of an OSCR curve is actually achievable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, max_value};
use crate::postproc::ScoreMatrix;
use crate::sample::Category;

/// FPR operating points of the CCR@FPR criterion.
pub const DEFAULT_FPR_TARGETS: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];

/// Operating points reported per Table row, closed-set accuracy aside.
pub const REPORT_FPR_TARGETS: [f64; 3] = [1e-3, 1e-2, 1e-1];

/// Sorted correct-class scores of correctly classified knowns and sorted
/// max scores of the open-set samples.
struct Populations {
    known_total: usize,
    open_total: usize,
    correct: Vec<f64>,
    open_max: Vec<f64>,
    known_correct_class: Vec<f64>,
}

fn populations(scores: &ScoreMatrix) -> Result<Populations> {
    let k = scores.known_classes();
    let mut known_total = 0;
    let mut correct = Vec::new();
    let mut open_max = Vec::new();
    let mut known_correct_class = Vec::new();
    for (i, row) in scores.scores.iter_rows().enumerate() {
        let label = scores.labels[i];
        if label >= 1 && label <= k {
            known_total += 1;
            known_correct_class.push(row[label - 1]);
            if argmax(row) == label - 1 {
                correct.push(row[label - 1]);
            }
        } else {
            open_max.push(max_value(row));
        }
    }
    if known_total == 0 {
        return Err(Error::Empty("known samples"));
    }
    if open_max.is_empty() {
        return Err(Error::Empty("negative/unknown samples"));
    }
    correct.sort_by(f64::total_cmp);
    open_max.sort_by(f64::total_cmp);
    Ok(Populations {
        known_total,
        open_total: open_max.len(),
        correct,
        open_max,
        known_correct_class,
    })
}

/// Number of entries `>= theta` in an ascending slice.
fn count_at_least(sorted: &[f64], theta: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v < theta)
}

/// `(CCR, FPR)` at one threshold.
pub fn ccr_fpr_at(scores: &ScoreMatrix, theta: f64) -> Result<(f64, f64)> {
    let p = populations(scores)?;
    Ok((
        count_at_least(&p.correct, theta) as f64 / p.known_total as f64,
        count_at_least(&p.open_max, theta) as f64 / p.open_total as f64,
    ))
}

/// Fraction of known samples whose arg-max class is their label.
pub fn closed_set_accuracy(scores: &ScoreMatrix) -> Result<f64> {
    let k = scores.known_classes();
    let mut total = 0usize;
    let mut hits = 0usize;
    for (i, row) in scores.scores.iter_rows().enumerate() {
        let label = scores.labels[i];
        if label >= 1 && label <= k {
            total += 1;
            if argmax(row) == label - 1 {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("known samples"));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscrPoint {
    /// `+inf` for the sentinel point, written as `"inf"` in JSON.
    #[serde(with = "extended_f64")]
    pub theta: f64,
    pub fpr: f64,
    pub ccr: f64,
    /// Correctly classified knowns at `theta`.
    pub correct: usize,
    /// Open-set samples accepted at `theta`.
    pub false_positives: usize,
}

/// JSON has no infinities; they travel as the strings `"inf"`/`"-inf"`.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad number '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub method: String,
    pub regime: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscrCurve {
    /// Sorted by FPR ascending, one point per distinct FPR (highest CCR).
    pub points: Vec<OscrPoint>,
    /// Smallest FPR reached by an observed score threshold, i.e. ignoring
    /// the `+inf` sentinel. FPR targets below it are unreachable.
    pub min_observed_fpr: f64,
    pub known_total: usize,
    pub open_total: usize,
    #[serde(default)]
    pub meta: Option<CurveMeta>,
}

/// Sweeps every observed score value (plus a `+inf` sentinel) as threshold.
pub fn oscr_curve(scores: &ScoreMatrix) -> Result<OscrCurve> {
    let p = populations(scores)?;
    let mut thresholds: Vec<f64> = p
        .known_correct_class
        .iter()
        .chain(&p.open_max)
        .copied()
        .collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let max_observed = *thresholds.last().expect("populations are non-empty");
    thresholds.push(f64::INFINITY);

    let mut points: Vec<OscrPoint> = thresholds
        .iter()
        .map(|&theta| {
            let correct = count_at_least(&p.correct, theta);
            let false_positives = count_at_least(&p.open_max, theta);
            OscrPoint {
                theta,
                fpr: false_positives as f64 / p.open_total as f64,
                ccr: correct as f64 / p.known_total as f64,
                correct,
                false_positives,
            }
        })
        .collect();
    points.sort_by(|a, b| {
        a.false_positives
            .cmp(&b.false_positives)
            .then(b.correct.cmp(&a.correct))
    });
    points.dedup_by_key(|pt| pt.false_positives);
    let min_observed_fpr = count_at_least(&p.open_max, max_observed) as f64 / p.open_total as f64;
    Ok(OscrCurve {
        points,
        min_observed_fpr,
        known_total: p.known_total,
        open_total: p.open_total,
        meta: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcrAtFpr {
    pub targets: Vec<f64>,
    /// CCR per target; `None` where the target FPR cannot be reached.
    pub values: Vec<Option<f64>>,
    /// Sum of the existing values; unreachable targets contribute 0.
    pub sum: f64,
}

/// CCR at the smallest achievable FPR that is `>= zeta`, for each target.
///
/// A target is reachable only when some observed threshold gets the FPR down
/// to `zeta` or below; otherwise the curve never extends that far left and
/// the target is reported missing. Among thresholds sharing the selected FPR
/// the highest CCR is used.
pub fn ccr_at_fpr(curve: &OscrCurve, targets: &[f64]) -> Result<CcrAtFpr> {
    let mut values = Vec::with_capacity(targets.len());
    for &zeta in targets {
        if !(zeta > 0.0 && zeta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "FPR target must lie in (0, 1], got {zeta}"
            )));
        }
        if curve.min_observed_fpr > zeta {
            values.push(None);
            continue;
        }
        values.push(curve.points.iter().find(|p| p.fpr >= zeta).map(|p| p.ccr));
    }
    let sum = values.iter().flatten().sum();
    Ok(CcrAtFpr {
        targets: targets.to_vec(),
        values,
        sum,
    })
}

/// Area under the ROC of known max-scores against open-set max-scores,
/// by the trapezoidal rule. Computed in integer counts so that it equals the
/// Mann-Whitney statistic with half credit for ties exactly.
pub fn auroc(scores: &ScoreMatrix) -> Result<f64> {
    let k = scores.known_classes();
    let mut known = Vec::new();
    let mut open = Vec::new();
    for (i, row) in scores.scores.iter_rows().enumerate() {
        let label = scores.labels[i];
        if label >= 1 && label <= k {
            known.push(max_value(row));
        } else {
            open.push(max_value(row));
        }
    }
    auroc_from_scores(&known, &open)
}

/// [`auroc`] on two plain score lists (positives, negatives).
pub fn auroc_from_scores(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Empty("known samples"));
    }
    if negatives.is_empty() {
        return Err(Error::Empty("negative/unknown samples"));
    }
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    pos.sort_by(|a, b| b.total_cmp(a));
    neg.sort_by(|a, b| b.total_cmp(a));
    // walk thresholds from high to low; doubled area stays integral
    let (mut i, mut j) = (0usize, 0usize);
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut area2 = 0u128;
    while i < pos.len() || j < neg.len() {
        let theta = match (pos.get(i), neg.get(j)) {
            (Some(&a), Some(&b)) => a.max(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        let (tp0, fp0) = (tp, fp);
        while i < pos.len() && pos[i] == theta {
            i += 1;
            tp += 1;
        }
        while j < neg.len() && neg[j] == theta {
            j += 1;
            fp += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
    }
    Ok(area2 as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub low: f64,
    pub high: f64,
    pub known: Vec<usize>,
    pub negative: Vec<usize>,
    pub unknown: Vec<usize>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.known.len()
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.bins();
        (0..=n)
            .map(|b| self.low + (self.high - self.low) * b as f64 / n as f64)
            .collect()
    }
}

/// Score distributions: correct-class score for knowns, max score for
/// negatives and unknowns. The range is `[0, 1]` when every value lies in
/// it, otherwise the observed min/max.
pub fn score_histogram(scores: &ScoreMatrix, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let k = scores.known_classes();
    let values: Vec<(Category, f64)> = scores
        .scores
        .iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let label = scores.labels[i];
            if label >= 1 && label <= k {
                (Category::Known, row[label - 1])
            } else {
                (scores.categories[i], max_value(row))
            }
        })
        .collect();
    let (mut low, mut high) = (0.0, 1.0);
    if values.iter().any(|(_, v)| !(0.0..=1.0).contains(v)) {
        low = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        high = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        if high == low {
            high = low + 1.0;
        }
    }
    let mut h = Histogram {
        low,
        high,
        known: vec![0; bins],
        negative: vec![0; bins],
        unknown: vec![0; bins],
    };
    for (cat, v) in values {
        let b = (((v - low) / (high - low)) * bins as f64).floor();
        let b = (b.max(0.0) as usize).min(bins - 1);
        match cat {
            Category::Known => h.known[b] += 1,
            Category::Negative => h.negative[b] += 1,
            Category::Unknown => h.unknown[b] += 1,
        }
    }
    Ok(h)
}

/// One line of the evaluation table: a method on one open-set category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub category: Category,
    pub auroc: f64,
    /// CCR at [`REPORT_FPR_TARGETS`]; `None` when unreachable.
    pub ccr: Vec<Option<f64>>,
    pub accuracy: f64,
    /// CCR@FPR sum over [`DEFAULT_FPR_TARGETS`].
    pub ccr_sum: f64,
}

/// Evaluates knowns against one open-set category only.
pub fn evaluate(scores: &ScoreMatrix, category: Category) -> Result<(EvalSummary, OscrCurve)> {
    let view = scores.restrict(category);
    let curve = oscr_curve(&view)?;
    let report = ccr_at_fpr(&curve, &REPORT_FPR_TARGETS)?;
    let sum = ccr_at_fpr(&curve, &DEFAULT_FPR_TARGETS)?.sum;
    Ok((
        EvalSummary {
            category,
            auroc: auroc(&view)?,
            ccr: report.values,
            accuracy: closed_set_accuracy(&view)?,
            ccr_sum: sum,
        },
        curve,
    ))
}
