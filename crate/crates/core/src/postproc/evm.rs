//! Extreme Value Machine.
//!
//! Every known training sample becomes an anchor. Its Weibull model is fit
//! on the `lambda` smallest scaled cosine distances to samples of *other*
//! classes; the survival function of that fit is the anchor's probability of
//! sample inclusion. A class score is the maximum inclusion probability over
//! the class's anchors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{feature_distance, row_sq_norms};
use crate::error::{Error, Result};
use crate::evt::{select_tail, weibull_fit, Tail, WeibullModel};
use crate::numerics::{sq_norm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvmParams {
    /// lambda: number of smallest between-class distances per anchor.
    pub tail_size: usize,
    /// kappa: multiplier on the cosine distance.
    pub distance_multiplier: f64,
    /// omega: when set, the fitted model is reduced with this cover threshold.
    #[serde(default)]
    pub cover_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub feature: Vec<f64>,
    /// 1-based class label.
    pub label: usize,
    pub weibull: WeibullModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvmModel {
    pub params: EvmParams,
    pub known_classes: usize,
    pub anchors: Vec<Anchor>,
}

impl EvmModel {
    /// Inclusion probability of `feature` under anchor `a`.
    pub fn inclusion(&self, a: usize, feature: &[f64], feature_norm: f64) -> f64 {
        let anchor = &self.anchors[a];
        let d = feature_distance(feature, feature_norm, &anchor.feature, sq_norm(&anchor.feature));
        anchor
            .weibull
            .survival_unchecked(self.params.distance_multiplier * d)
    }
}

/// Known-sample indices and their labels, ignoring negatives/unknowns.
fn known_indices(labels: &[usize], known_classes: usize) -> Vec<usize> {
    (0..labels.len())
        .filter(|&i| labels[i] >= 1 && labels[i] <= known_classes)
        .collect()
}

/// Scaled distances from sample `i` to every known sample of another class.
pub fn between_class_distances(
    features: &Mat,
    labels: &[usize],
    known_classes: usize,
    distance_multiplier: f64,
) -> Vec<(usize, Vec<f64>)> {
    let known = known_indices(labels, known_classes);
    let norms = row_sq_norms(features);
    known
        .par_iter()
        .map(|&i| {
            let d: Vec<f64> = known
                .iter()
                .filter(|&&j| labels[j] != labels[i])
                .map(|&j| {
                    distance_multiplier
                        * feature_distance(features.row(i), norms[i], features.row(j), norms[j])
                })
                .collect();
            (i, d)
        })
        .collect()
}

/// Fits one anchor per known training sample. Samples labelled above `K`
/// take no part. A cover threshold in `params` triggers [`evm_reduce`].
pub fn evm_fit(
    features: &Mat,
    labels: &[usize],
    known_classes: usize,
    params: EvmParams,
) -> Result<EvmModel> {
    if labels.len() != features.rows() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: labels.len(),
        });
    }
    if !(params.distance_multiplier > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "distance multiplier must be positive, got {}",
            params.distance_multiplier
        )));
    }
    let known = known_indices(labels, known_classes);
    let mut present = vec![false; known_classes];
    for &i in &known {
        present[labels[i] - 1] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InsufficientSamples(
            "EVM needs samples from at least two classes".into(),
        ));
    }
    let distances =
        between_class_distances(features, labels, known_classes, params.distance_multiplier);
    let anchors = distances
        .into_par_iter()
        .map(|(i, d)| {
            let weibull = weibull_fit(&d, params.tail_size, Tail::Low)?;
            Ok(Anchor {
                feature: features.row(i).to_vec(),
                label: labels[i],
                weibull,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = EvmModel {
        params,
        known_classes,
        anchors,
    };
    match params.cover_threshold {
        Some(omega) => evm_reduce(&model, omega),
        None => Ok(model),
    }
}

/// The lambda smallest between-class distances of every anchor, in anchor
/// order. Exposed for inspection of what each Weibull was fit on.
pub fn evm_tail_sets(
    features: &Mat,
    labels: &[usize],
    known_classes: usize,
    params: EvmParams,
) -> Vec<Vec<f64>> {
    between_class_distances(features, labels, known_classes, params.distance_multiplier)
        .into_iter()
        .map(|(_, d)| select_tail(&d, params.tail_size, Tail::Low))
        .collect()
}

/// Per-class maximum inclusion probability. Columns are not normalized.
pub fn evm_scores(model: &EvmModel, features: &Mat) -> Result<Mat> {
    if let Some(a) = model.anchors.first() {
        if a.feature.len() != features.cols() {
            return Err(Error::DimensionMismatch {
                expected: a.feature.len(),
                got: features.cols(),
            });
        }
    }
    let k = model.known_classes;
    let anchor_norms: Vec<f64> = model.anchors.iter().map(|a| sq_norm(&a.feature)).collect();
    let rows: Vec<Vec<f64>> = (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let phi = features.row(i);
            let n = sq_norm(phi);
            let mut p = vec![0.0; k];
            for (a, anchor) in model.anchors.iter().enumerate() {
                let d = feature_distance(phi, n, &anchor.feature, anchor_norms[a]);
                let psi = anchor
                    .weibull
                    .survival_unchecked(model.params.distance_multiplier * d);
                let slot = &mut p[anchor.label - 1];
                if psi > *slot {
                    *slot = psi;
                }
            }
            p
        })
        .collect();
    let mut out = Mat::zeros(features.rows(), k);
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(r);
    }
    Ok(out)
}

/// Greedy set-cover reduction. Within each class, anchor `n` covers sample
/// `m` when `Psi_n(phi_m) >= omega`; the anchor covering the most uncovered
/// samples is kept (lowest index on ties) until the class is covered.
pub fn evm_reduce(model: &EvmModel, omega: f64) -> Result<EvmModel> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "cover threshold must lie in (0, 1], got {omega}"
        )));
    }
    let mut keep = Vec::new();
    for class in 1..=model.known_classes {
        let members: Vec<usize> = (0..model.anchors.len())
            .filter(|&a| model.anchors[a].label == class)
            .collect();
        let cover: Vec<Vec<bool>> = members
            .iter()
            .map(|&a| {
                members
                    .iter()
                    .map(|&m| {
                        let f = &model.anchors[m].feature;
                        m == a || model.inclusion(a, f, sq_norm(f)) >= omega
                    })
                    .collect()
            })
            .collect();
        let mut covered = vec![false; members.len()];
        let mut remaining = members.len();
        while remaining > 0 {
            let (best, gain) = cover
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let g = row
                        .iter()
                        .zip(&covered)
                        .filter(|(&c, &done)| c && !done)
                        .count();
                    (i, g)
                })
                .fold((0, 0), |acc, x| if x.1 > acc.1 { x } else { acc });
            debug_assert!(gain > 0);
            for (done, &c) in covered.iter_mut().zip(&cover[best]) {
                if c && !*done {
                    *done = true;
                    remaining -= 1;
                }
            }
            keep.push(members[best]);
        }
    }
    keep.sort_unstable();
    Ok(EvmModel {
        params: EvmParams {
            cover_threshold: Some(omega),
            ..model.params
        },
        known_classes: model.known_classes,
        anchors: keep.into_iter().map(|a| model.anchors[a].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(tail: usize, kappa: f64) -> EvmParams {
        EvmParams {
            tail_size: tail,
            distance_multiplier: kappa,
            cover_threshold: None,
        }
    }

    fn toy() -> (Mat, Vec<usize>) {
        let f = Mat::from_rows(&[
            vec![1.0, 0.1, 0.0],
            vec![0.9, 0.3, 0.1],
            vec![0.1, 1.0, 0.2],
            vec![0.0, 0.8, 0.5],
            vec![0.3, 0.2, 1.0],
            vec![0.6, 0.1, 0.9],
        ])
        .unwrap();
        (f, vec![1, 1, 2, 2, 3, 3])
    }

    #[test]
    fn anchor_per_known_sample() {
        let (f, l) = toy();
        let m = evm_fit(&f, &l, 3, params(3, 1.0)).unwrap();
        assert_eq!(m.anchors.len(), 6);
        let mut with_neg = l.clone();
        with_neg[5] = 4;
        let m = evm_fit(&f, &with_neg, 3, params(3, 1.0)).unwrap();
        assert_eq!(m.anchors.len(), 5);
    }

    #[test]
    fn single_class_rejected() {
        let (f, _) = toy();
        assert!(matches!(
            evm_fit(&f, &[1; 6], 3, params(3, 1.0)),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn anchor_self_inclusion_is_one() {
        let (f, l) = toy();
        let m = evm_fit(&f, &l, 3, params(3, 1.0)).unwrap();
        let s = evm_scores(&m, &f).unwrap();
        for (i, &label) in l.iter().enumerate() {
            assert_eq!(s.get(i, label - 1), 1.0);
        }
        assert!(s.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn kappa_scales_tails() {
        let (f, l) = toy();
        let a = evm_tail_sets(&f, &l, 3, params(2, 1.0));
        let b = evm_tail_sets(&f, &l, 3, params(2, 0.5));
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((0.5 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn reduce_keeps_isolated_anchors() {
        let (f, l) = toy();
        let m = evm_fit(&f, &l, 3, params(3, 1.0)).unwrap();
        let r = evm_reduce(&m, 1.0).unwrap();
        assert_eq!(r.anchors.len(), m.anchors.len());
        assert!(evm_reduce(&m, 0.0).is_err());
        assert!(evm_reduce(&m, 1.5).is_err());
    }

    #[test]
    fn reduce_merges_duplicates() {
        let f = Mat::from_rows(&[
            vec![1.0, 0.2],
            vec![1.0, 0.2],
            vec![1.0, 0.2],
            vec![0.8, 0.5],
            vec![0.1, 1.0],
            vec![0.3, 1.0],
        ])
        .unwrap();
        let l = [1, 1, 1, 1, 2, 2];
        let m = evm_fit(&f, &l, 2, params(4, 1.0)).unwrap();
        let r = evm_reduce(&m, 1.0).unwrap();
        let class1: Vec<_> = r.anchors.iter().filter(|a| a.label == 1).collect();
        assert_eq!(class1.len(), 2);
        assert_eq!(
            class1.iter().filter(|a| a.feature == vec![1.0, 0.2]).count(),
            1
        );
        assert_eq!(r.anchors.iter().filter(|a| a.label == 2).count(), 2);
    }
}
