//! PROSER: fine-tuning with data placeholders (manifold mix-up of deep
//! features from two different classes) and classifier placeholders (`B`
//! dummy heads whose maximum is the unknown logit).
//!
//! Loss per batch, with `u = [z_1..z_K, max_b w_b . phi + c]`:
//!
//! * knowns: cross-entropy of `softmax(u)` against the true class, plus
//!   `masked_weight` times the cross-entropy of `softmax(u)` with the true
//!   logit removed, targeting the dummy (pushes the dummy to second place);
//! * placeholders `phi' = beta phi_a + (1 - beta) phi_b`, labels of `a` and
//!   `b` different: `placeholder_weight` times the cross-entropy against the
//!   dummy.
//!
//! Mixing happens at the deep-feature layer, so placeholder gradients flow
//! back into both source samples and through the whole backbone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, softmax_unchecked, Mat, SeededRng};
use crate::training::{
    accumulate_layer_grad, propagate, Adam, BackboneModel, Gradients, Layer, LOG_EPSILON,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProserParams {
    /// B: number of dummy classifiers.
    pub dummy_count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta_a: f64,
    pub beta_b: f64,
    pub placeholder_weight: f64,
    pub masked_weight: f64,
}

impl Default for ProserParams {
    fn default() -> Self {
        ProserParams {
            dummy_count: 1,
            epochs: 200,
            learning_rate: 3e-3,
            batch_size: 32,
            beta_a: 1.0,
            beta_b: 1.0,
            placeholder_weight: 1.0,
            masked_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProserModel {
    pub params: ProserParams,
    /// Fine-tuned network with `K` outputs.
    pub backbone: BackboneModel,
    /// `B x D` dummy weight vectors.
    pub dummy: Mat,
    pub dummy_bias: f64,
}

/// A mixed feature: `beta * phi[first] + (1 - beta) * phi[second]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixPair {
    pub first: usize,
    pub second: usize,
    pub beta: f64,
}

pub fn mix(a: &[f64], b: &[f64], beta: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| beta * x + (1.0 - beta) * y)
        .collect()
}

/// Draws a partner for `first` whose label differs, resampling until it
/// does. `None` when every sample shares the label of `first`.
pub fn sample_partner(rng: &mut SeededRng, labels: &[usize], first: usize) -> Option<usize> {
    if labels.iter().all(|&l| l == labels[first]) {
        return None;
    }
    loop {
        let j = rng.below(labels.len());
        if labels[j] != labels[first] {
            return Some(j);
        }
    }
}

impl ProserModel {
    pub fn known_classes(&self) -> usize {
        self.backbone.outputs()
    }

    pub fn dummy_count(&self) -> usize {
        self.dummy.rows()
    }

    /// Index of the winning dummy head and its logit.
    pub fn dummy_logit(&self, phi: &[f64]) -> (usize, f64) {
        let scores: Vec<f64> = self.dummy.iter_rows().map(|w| dot(w, phi)).collect();
        let b = argmax(&scores);
        (b, scores[b] + self.dummy_bias)
    }

    /// `K + 1` logits (class logits, then the dummy) for deep features.
    pub fn logits_from_features(&self, features: &Mat) -> Mat {
        let z = self.backbone.head.apply(features);
        let k = z.cols();
        let mut out = Mat::zeros(features.rows(), k + 1);
        for i in 0..features.rows() {
            let row = out.row_mut(i);
            row[..k].copy_from_slice(z.row(i));
            row[k] = self.dummy_logit(features.row(i)).1;
        }
        out
    }

    /// `K + 1` logits for raw inputs.
    pub fn logits(&self, inputs: &Mat) -> Result<Mat> {
        let (phi, _) = self.backbone.extract(inputs)?;
        Ok(self.logits_from_features(&phi))
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.backbone
            .params_mut()
            .chain(self.dummy.as_mut_slice().iter_mut())
            .chain(std::iter::once(&mut self.dummy_bias))
    }
}

/// Gradients of all fine-tuned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProserGradients {
    pub backbone: Gradients,
    pub dummy: Mat,
    pub dummy_bias: f64,
}

impl ProserGradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.backbone.flatten();
        v.extend_from_slice(self.dummy.as_slice());
        v.push(self.dummy_bias);
        v
    }
}

/// Cross-entropy of `softmax(u)` against `target` and its gradient in `u`,
/// skipping `masked` if given (that entry behaves as `-inf`).
fn ce_with_mask(u: &[f64], target: usize, masked: Option<usize>) -> (f64, Vec<f64>) {
    let mut v = u.to_vec();
    if let Some(m) = masked {
        v[m] = f64::NEG_INFINITY;
    }
    let y = softmax_unchecked(&v);
    let loss = -y[target].max(LOG_EPSILON).ln();
    let mut g = y;
    if g[target] >= LOG_EPSILON {
        g[target] -= 1.0;
    } else {
        g.iter_mut().for_each(|x| *x = 0.0);
    }
    if let Some(m) = masked {
        g[m] = 0.0;
    }
    (loss, g)
}

/// Loss and gradients for one batch of known samples with the given
/// placeholder pairs (indices into the batch).
pub fn proser_loss_gradient(
    model: &ProserModel,
    inputs: &Mat,
    labels: &[usize],
    pairs: &[MixPair],
) -> Result<(f64, ProserGradients)> {
    let k = model.known_classes();
    if labels.len() != inputs.rows() {
        return Err(Error::DimensionMismatch {
            expected: inputs.rows(),
            got: labels.len(),
        });
    }
    if inputs.rows() == 0 {
        return Err(Error::Empty("batch"));
    }
    let p = &model.params;
    let cache = model.backbone.forward(inputs)?;
    let phi = cache.features();
    let d = phi.cols();
    let n = inputs.rows() as f64;

    let mut grads = ProserGradients {
        backbone: Gradients::zeros_like(&model.backbone),
        dummy: Mat::zeros(model.dummy.rows(), d),
        dummy_bias: 0.0,
    };
    let mut dz = Mat::zeros(inputs.rows(), k);
    let mut dphi = Mat::zeros(inputs.rows(), d);
    let mut loss = 0.0;

    for i in 0..inputs.rows() {
        let label = labels[i];
        if label == 0 || label > k {
            return Err(Error::LabelOutOfRange { label, count: k });
        }
        let (b, s) = model.dummy_logit(phi.row(i));
        let mut u = cache.logits.row(i).to_vec();
        u.push(s);
        let (l1, g1) = ce_with_mask(&u, label - 1, None);
        let (l2, g2) = ce_with_mask(&u, k, Some(label - 1));
        loss += (l1 + p.masked_weight * l2) / n;
        let du: Vec<f64> = g1
            .iter()
            .zip(&g2)
            .map(|(a, b)| (a + p.masked_weight * b) / n)
            .collect();
        dz.row_mut(i).copy_from_slice(&du[..k]);
        let ds = du[k];
        for (g, &x) in grads.dummy.row_mut(b).iter_mut().zip(phi.row(i)) {
            *g += ds * x;
        }
        grads.dummy_bias += ds;
        for (g, &w) in dphi.row_mut(i).iter_mut().zip(model.dummy.row(b)) {
            *g += ds * w;
        }
    }

    if !pairs.is_empty() {
        let np = pairs.len() as f64;
        let head = &model.backbone.head;
        for pair in pairs {
            let mixed = mix(phi.row(pair.first), phi.row(pair.second), pair.beta);
            let (b, s) = model.dummy_logit(&mixed);
            let mut u: Vec<f64> = (0..k)
                .map(|c| head.bias[c] + dot(head.weights.row(c), &mixed))
                .collect();
            u.push(s);
            let (l, g) = ce_with_mask(&u, k, None);
            loss += p.placeholder_weight * l / np;
            let du: Vec<f64> = g.iter().map(|v| p.placeholder_weight * v / np).collect();
            let mut dmixed = vec![0.0; d];
            for c in 0..k {
                if du[c] == 0.0 {
                    continue;
                }
                grads.backbone.head.bias[c] += du[c];
                let gw = grads.backbone.head.weights.row_mut(c);
                for j in 0..d {
                    gw[j] += du[c] * mixed[j];
                    dmixed[j] += du[c] * head.weights.get(c, j);
                }
            }
            let ds = du[k];
            grads.dummy_bias += ds;
            for j in 0..d {
                grads.dummy.row_mut(b)[j] += ds * mixed[j];
                dmixed[j] += ds * model.dummy.get(b, j);
            }
            for j in 0..d {
                dphi.row_mut(pair.first)[j] += pair.beta * dmixed[j];
                dphi.row_mut(pair.second)[j] += (1.0 - pair.beta) * dmixed[j];
            }
        }
    }

    accumulate_layer_grad(&mut grads.backbone.head, &dz, phi);
    let back = propagate(&model.backbone.head, &dz);
    for (a, b) in dphi.as_mut_slice().iter_mut().zip(back.as_slice()) {
        *a += b;
    }
    model
        .backbone
        .backward_features(&cache, dphi, &mut grads.backbone);
    Ok((loss, grads))
}

/// Fine-tunes `base` on known samples (1-based labels `1..=K`). A base with
/// a garbage output keeps only its first `K` logit rows. Deterministic in
/// `seed`.
pub fn proser_finetune(
    base: &BackboneModel,
    inputs: &Mat,
    labels: &[usize],
    known_classes: usize,
    params: ProserParams,
    seed: u64,
) -> Result<ProserModel> {
    let k = known_classes;
    if params.dummy_count == 0 {
        return Err(Error::InvalidParameter("need at least one dummy classifier".into()));
    }
    if params.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    if base.outputs() != k && base.outputs() != k + 1 {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: base.outputs(),
        });
    }
    if labels.len() != inputs.rows() {
        return Err(Error::DimensionMismatch {
            expected: inputs.rows(),
            got: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l == 0 || l > k) {
        return Err(Error::LabelOutOfRange { label: l, count: k });
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InsufficientSamples(
            "PROSER mix-up needs samples from two different classes".into(),
        ));
    }

    let mut rng = SeededRng::new(seed);
    let mut backbone = base.clone();
    if backbone.outputs() == k + 1 {
        let d = backbone.feature_dim();
        let w = backbone.head.weights.as_slice()[..k * d].to_vec();
        backbone.head = Layer {
            weights: Mat::from_vec(k, d, w)?,
            bias: backbone.head.bias[..k].to_vec(),
        };
    }
    let d = backbone.feature_dim();
    let std = 1.0 / (d as f64).sqrt();
    let mut dummy = Mat::zeros(params.dummy_count, d);
    for w in dummy.as_mut_slice() {
        *w = std * rng.normal();
    }
    let mut model = ProserModel {
        params,
        backbone,
        dummy,
        dummy_bias: 0.0,
    };
    let param_count = model.backbone.param_count() + model.dummy.as_slice().len() + 1;
    let mut adam = Adam::new(param_count, params.learning_rate);
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    for _ in 0..params.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(params.batch_size) {
            let x = inputs.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut pairs = Vec::with_capacity(batch.len());
            for first in 0..batch.len() {
                if let Some(second) = sample_partner(&mut rng, &y, first) {
                    let beta = rng.beta(params.beta_a, params.beta_b)?;
                    pairs.push(MixPair {
                        first,
                        second,
                        beta,
                    });
                }
            }
            let (_, grads) = proser_loss_gradient(&model, &x, &y, &pairs)?;
            adam.update(model.params_mut(), &grads.flatten());
        }
    }
    Ok(model)
}

/// Known-class probabilities from the `K + 1` fine-tuned logits.
pub fn proser_scores(model: &ProserModel, inputs: &Mat) -> Result<Mat> {
    let logits = model.logits(inputs)?;
    let k = model.known_classes();
    let mut out = Mat::zeros(logits.rows(), k);
    for (i, u) in logits.iter_rows().enumerate() {
        let y = softmax_unchecked(u);
        out.row_mut(i).copy_from_slice(&y[..k]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_one_keeps_first_feature() {
        let a = [0.3, -1.2, 4.0];
        let b = [9.0, 9.0, 9.0];
        assert_eq!(mix(&a, &b, 1.0), a.to_vec());
        assert_eq!(mix(&a, &b, 0.0), b.to_vec());
    }

    #[test]
    fn partner_always_differs() {
        let mut rng = SeededRng::new(17);
        let labels = [1, 1, 2, 3, 3, 3, 1, 2];
        for _ in 0..100_000 {
            let first = rng.below(labels.len());
            let second = sample_partner(&mut rng, &labels, first).unwrap();
            assert_ne!(labels[first], labels[second]);
        }
        assert_eq!(sample_partner(&mut rng, &[2, 2, 2], 0), None);
    }

    fn tiny_model(b: usize) -> ProserModel {
        let mut rng = SeededRng::new(4);
        let backbone = BackboneModel::init(3, &[4], 2, &mut rng);
        let mut dummy = Mat::zeros(b, 4);
        for w in dummy.as_mut_slice() {
            *w = rng.normal();
        }
        ProserModel {
            params: ProserParams {
                dummy_count: b,
                ..ProserParams::default()
            },
            backbone,
            dummy,
            dummy_bias: 0.1,
        }
    }

    #[test]
    fn single_dummy_is_plain_dot() {
        let m = tiny_model(1);
        let phi = [0.5, 1.0, -0.25, 2.0];
        let (b, s) = m.dummy_logit(&phi);
        assert_eq!(b, 0);
        assert!((s - (dot(m.dummy.row(0), &phi) + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn very_negative_dummy_reduces_to_softmax() {
        let mut m = tiny_model(2);
        m.dummy_bias = -1e6;
        let x = Mat::from_rows(&[vec![0.2, -0.4, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let s = proser_scores(&m, &x).unwrap();
        let (_, z) = m.backbone.extract(&x).unwrap();
        for i in 0..2 {
            let y = softmax_unchecked(z.row(i));
            for c in 0..2 {
                assert!((s.get(i, c) - y[c]).abs() < 1e-12);
            }
        }
        m.dummy_bias = 0.0;
        let s = proser_scores(&m, &x).unwrap();
        assert!(s.iter_rows().all(|r| r.iter().sum::<f64>() < 1.0));
    }

    #[test]
    fn rejects_single_class() {
        let base = tiny_model(1).backbone;
        let x = Mat::zeros(3, 3);
        assert!(matches!(
            proser_finetune(&base, &x, &[1, 1, 1], 2, ProserParams::default(), 0),
            Err(Error::InsufficientSamples(_))
        ));
    }
}
