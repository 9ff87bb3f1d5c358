//! OpenMax: per-class mean activation vectors with a Weibull model of the
//! largest scaled cosine distances, used to revise the top-`alpha` logits
//! and synthesize an unknown logit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_logit_width, feature_distance, row_sq_norms};
use crate::error::{Error, Result};
use crate::evt::{weibull_fit, Tail, WeibullModel};
use crate::numerics::{argmax, sq_norm, softmax_unchecked, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxParams {
    /// lambda: number of largest distances per class used for the fit.
    pub tail_size: usize,
    /// kappa: multiplier on the cosine distance.
    pub distance_multiplier: f64,
    /// alpha: number of top-ranked classes whose logits are revised.
    pub alpha: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxModel {
    pub params: OpenMaxParams,
    /// One mean activation vector per known class.
    pub mavs: Vec<Vec<f64>>,
    pub weibulls: Vec<WeibullModel>,
}

impl OpenMaxModel {
    pub fn known_classes(&self) -> usize {
        self.mavs.len()
    }

    /// Weibull weight of a feature vector for class `c` (0-based).
    pub fn class_weight(&self, feature: &[f64], c: usize) -> f64 {
        let mav = &self.mavs[c];
        let d = feature_distance(feature, sq_norm(feature), mav, sq_norm(mav));
        self.weibulls[c].cdf_unchecked(self.params.distance_multiplier * d)
    }
}

/// Scaled distances `kappa (1 - cos(phi, mu))` of each correctly classified
/// training sample of class `c` to its MAV, together with the MAVs.
pub fn class_distances(
    features: &Mat,
    logits: &Mat,
    labels: &[usize],
    known_classes: usize,
    distance_multiplier: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if features.rows() != logits.rows() || labels.len() != features.rows() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: logits.rows().min(labels.len()),
        });
    }
    check_logit_width(logits, known_classes)?;
    if !(distance_multiplier > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "distance multiplier must be positive, got {distance_multiplier}"
        )));
    }
    let k = known_classes;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &label) in labels.iter().enumerate() {
        if label >= 1 && label <= k && argmax(logits.row(i)) + 1 == label {
            members[label - 1].push(i);
        }
    }
    let d = features.cols();
    let norms = row_sq_norms(features);
    let mut mavs = Vec::with_capacity(k);
    let mut distances = Vec::with_capacity(k);
    for (c, idx) in members.iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::InsufficientSamples(format!(
                "class {} has {} correctly classified samples, need at least 2",
                c + 1,
                idx.len()
            )));
        }
        let mut mav = vec![0.0; d];
        for &i in idx {
            for (m, &x) in mav.iter_mut().zip(features.row(i)) {
                *m += x;
            }
        }
        for m in &mut mav {
            *m /= idx.len() as f64;
        }
        let mn = sq_norm(&mav);
        let dist: Vec<f64> = idx
            .iter()
            .map(|&i| distance_multiplier * feature_distance(features.row(i), norms[i], &mav, mn))
            .collect();
        mavs.push(mav);
        distances.push(dist);
    }
    Ok((mavs, distances))
}

/// Fits MAVs and per-class high-tail Weibull models. The tail size is
/// clipped to the number of available distances; the effective size is
/// recorded in each [`WeibullModel`].
pub fn openmax_fit(
    features: &Mat,
    logits: &Mat,
    labels: &[usize],
    known_classes: usize,
    params: OpenMaxParams,
) -> Result<OpenMaxModel> {
    if params.alpha == 0 || params.alpha > known_classes {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in 1..={known_classes}, got {}",
            params.alpha
        )));
    }
    let (mavs, distances) = class_distances(
        features,
        logits,
        labels,
        known_classes,
        params.distance_multiplier,
    )?;
    let weibulls = distances
        .par_iter()
        .map(|d| weibull_fit(d, params.tail_size, Tail::High))
        .collect::<Result<Vec<_>>>()?;
    Ok(OpenMaxModel {
        params,
        mavs,
        weibulls,
    })
}

/// Revised `K + 1` logits of one sample: the top-`alpha` classes are scaled
/// by `1 - w_i` with `w_i = CDF_c(i)(d) (alpha - i + 1) / alpha`, and the
/// removed mass forms the unknown logit.
///
/// When every weight is zero nothing was revised and the unknown logit is
/// `-inf`, so the scores reduce exactly to MSS.
pub fn revise_logits(model: &OpenMaxModel, feature: &[f64], logits: &[f64]) -> Vec<f64> {
    let k = model.known_classes();
    let alpha = model.params.alpha;
    let mut ranked: Vec<usize> = (0..k).collect();
    ranked.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut revised = Vec::with_capacity(k + 1);
    revised.extend_from_slice(&logits[..k]);
    let mut unknown = 0.0;
    let mut revised_any = false;
    for (rank, &c) in ranked.iter().take(alpha).enumerate() {
        let w = model.class_weight(feature, c) * (alpha - rank) as f64 / alpha as f64;
        if w > 0.0 {
            revised_any = true;
        }
        revised[c] = logits[c] * (1.0 - w);
        unknown += logits[c] * w;
    }
    revised.push(if revised_any { unknown } else { f64::NEG_INFINITY });
    revised
}

/// Known-class probabilities after OpenMax revision. `logits` must have
/// exactly `K` columns.
pub fn openmax_scores(model: &OpenMaxModel, features: &Mat, logits: &Mat) -> Result<Mat> {
    let k = model.known_classes();
    if model.params.alpha > k {
        return Err(Error::InvalidParameter(format!(
            "alpha {} exceeds {k} known classes",
            model.params.alpha
        )));
    }
    if logits.cols() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: logits.cols(),
        });
    }
    if features.rows() != logits.rows() {
        return Err(Error::DimensionMismatch {
            expected: logits.rows(),
            got: features.rows(),
        });
    }
    if let Some(m) = model.mavs.first() {
        if m.len() != features.cols() {
            return Err(Error::DimensionMismatch {
                expected: m.len(),
                got: features.cols(),
            });
        }
    }
    let mut out = Mat::zeros(logits.rows(), k);
    for i in 0..logits.rows() {
        let revised = revise_logits(model, features.row(i), logits.row(i));
        let y = softmax_unchecked(&revised);
        out.row_mut(i).copy_from_slice(&y[..k]);
    }
    Ok(out)
}
