//! Reference implementations shared by the integration tests. Everything
//! here is written from the definitions, without calling into the code
//! under test except for fitting inputs.

#![allow(dead_code)]

use openset::evt::{weibull_fit, Tail};
use openset::numerics::{Mat, SeededRng};
use openset::postproc::evm::evm_tail_sets;
use openset::postproc::proser::{proser_loss_gradient, MixPair, ProserModel, ProserParams};
use openset::postproc::{evm_fit, evm_scores, EvmParams, ScoreMatrix};
use openset::training::{loss_gradient, prepare, BackboneModel, Regime};
use openset::{Category, LabeledSample, Split};

pub const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOL: f64 = 1e-4;

// ---------------------------------------------------------------- network

pub fn relu_forward(model: &BackboneModel, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = x.to_vec();
    for layer in &model.hidden {
        a = (0..layer.outputs())
            .map(|o| {
                let w = layer.weights.row(o);
                let s: f64 = w.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>() + layer.bias[o];
                s.max(0.0)
            })
            .collect();
    }
    let h = &model.head;
    let z = (0..h.outputs())
        .map(|o| h.weights.row(o).iter().zip(&a).map(|(p, q)| p * q).sum::<f64>() + h.bias[o])
        .collect();
    (a, z)
}

fn log_softmax_at(z: &[f64], j: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[j] - lse
}

pub fn ce(z: &[f64], j: usize) -> f64 {
    -log_softmax_at(z, j).max(1e-12f64.ln())
}

pub fn reference_loss(model: &BackboneModel, inputs: &Mat, targets: &Mat, w: &[f64]) -> f64 {
    let n = inputs.rows() as f64;
    let mut total = 0.0;
    for i in 0..inputs.rows() {
        let (_, z) = relu_forward(model, inputs.row(i));
        for c in 0..z.len() {
            let t = targets.get(i, c);
            if t != 0.0 {
                total += w[c] * t * ce(&z, c);
            }
        }
    }
    total / n
}

fn params(model: &mut BackboneModel) -> Vec<&mut f64> {
    let mut out = Vec::new();
    for l in model.hidden.iter_mut().chain(std::iter::once(&mut model.head)) {
        out.extend(l.weights.as_mut_slice().iter_mut());
        out.extend(l.bias.iter_mut());
    }
    out
}

/// He init leaves biases at 0, which puts a sample whose previous layer is
/// all-dead exactly on a ReLU kink. Random biases keep the check on
/// differentiable points.
pub fn random_model(dim: usize, outputs: usize, rng: &mut SeededRng) -> BackboneModel {
    let mut m = BackboneModel::init(dim, &[6, 5], outputs, rng);
    for l in m.hidden.iter_mut().chain(std::iter::once(&mut m.head)) {
        for b in l.bias.iter_mut() {
            *b = 0.3 * rng.normal();
        }
    }
    m
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-7))
        .fold(0.0, f64::max)
}

fn gradient_samples(rng: &mut SeededRng, k: usize, dim: usize) -> Vec<LabeledSample> {
    let mut out = Vec::new();
    for label in 1..=k + 1 {
        for _ in 0..3 {
            out.push(LabeledSample {
                x: (0..dim).map(|_| rng.normal() + label as f64 * 0.3).collect(),
                label,
                split: Split::Train,
                category: if label <= k {
                    Category::Known
                } else {
                    Category::Negative
                },
            });
        }
    }
    out
}

/// Largest relative difference between the analytic gradient of `regime`
/// and central differences of [`reference_loss`] on a random small model.
pub fn regime_gradient_error(regime: Regime, seed: u64) -> f64 {
    let (k, dim) = (3, 4);
    let mut rng = SeededRng::new(seed);
    let data = prepare(regime, &gradient_samples(&mut rng, k, dim), k).unwrap();
    let model = random_model(dim, regime.outputs(k), &mut rng);
    let (loss, grads) = loss_gradient(&model, &data.inputs, &data.targets, &data.weights).unwrap();
    let reference = reference_loss(&model, &data.inputs, &data.targets, &data.weights);
    assert!((loss - reference).abs() < 1e-12, "{loss} vs {reference}");

    let analytic = grads.flatten();
    let mut numeric = Vec::with_capacity(analytic.len());
    for p in 0..analytic.len() {
        let mut plus = model.clone();
        *params(&mut plus)[p] += FD_STEP;
        let mut minus = model.clone();
        *params(&mut minus)[p] -= FD_STEP;
        let lp = reference_loss(&plus, &data.inputs, &data.targets, &data.weights);
        let lm = reference_loss(&minus, &data.inputs, &data.targets, &data.weights);
        numeric.push((lp - lm) / (2.0 * FD_STEP));
    }
    max_rel_error(&analytic, &numeric)
}

pub fn proser_reference(model: &ProserModel, inputs: &Mat, labels: &[usize], pairs: &[MixPair]) -> f64 {
    let k = model.backbone.outputs();
    let p = &model.params;
    let dummy = |phi: &[f64]| {
        model
            .dummy
            .iter_rows()
            .map(|w| w.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
            + model.dummy_bias
    };
    let mut phis = Vec::new();
    let mut known = 0.0;
    for i in 0..inputs.rows() {
        let (phi, mut z) = relu_forward(&model.backbone, inputs.row(i));
        z.push(dummy(&phi));
        let y = labels[i] - 1;
        let mut masked = z.clone();
        masked.remove(y);
        known += ce(&z, y) + p.masked_weight * ce(&masked, k - 1);
        phis.push(phi);
    }
    let mut placeholder = 0.0;
    for pair in pairs {
        let m: Vec<f64> = phis[pair.first]
            .iter()
            .zip(&phis[pair.second])
            .map(|(a, b)| pair.beta * a + (1.0 - pair.beta) * b)
            .collect();
        let h = &model.backbone.head;
        let mut u: Vec<f64> = (0..k)
            .map(|c| h.weights.row(c).iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() + h.bias[c])
            .collect();
        u.push(dummy(&m));
        placeholder += ce(&u, k);
    }
    known / inputs.rows() as f64 + p.placeholder_weight * placeholder / pairs.len() as f64
}

fn proser_params(model: &mut ProserModel) -> Vec<&mut f64> {
    let mut out = params(&mut model.backbone);
    out.extend(model.dummy.as_mut_slice().iter_mut());
    out.push(&mut model.dummy_bias);
    out
}

/// Same check as [`regime_gradient_error`] for the PROSER fine-tuning loss
/// with fixed mix-up pairs.
pub fn proser_gradient_error(seed: u64) -> f64 {
    let (k, dim, n) = (3, 4, 8);
    let mut rng = SeededRng::new(100 + seed);
    let backbone = random_model(dim, k, &mut rng);
    let b = 3;
    let mut dummy = Mat::zeros(b, 5);
    for v in dummy.as_mut_slice() {
        *v = rng.normal();
    }
    let model = ProserModel {
        params: ProserParams {
            dummy_count: b,
            placeholder_weight: 0.7,
            masked_weight: 1.3,
            ..ProserParams::default()
        },
        backbone,
        dummy,
        dummy_bias: 0.2,
    };
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
    let inputs = Mat::from_rows(&rows).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| 1 + i % k).collect();
    let pairs: Vec<MixPair> = (0..n)
        .map(|i| MixPair {
            first: i,
            second: (i + 1) % n,
            beta: rng.uniform(),
        })
        .collect();

    let (loss, grads) = proser_loss_gradient(&model, &inputs, &labels, &pairs).unwrap();
    let reference = proser_reference(&model, &inputs, &labels, &pairs);
    assert!((loss - reference).abs() < 1e-12, "{loss} vs {reference}");
    let analytic = grads.flatten();
    let mut numeric = Vec::new();
    for p in 0..analytic.len() {
        let mut plus = model.clone();
        *proser_params(&mut plus)[p] += FD_STEP;
        let mut minus = model.clone();
        *proser_params(&mut minus)[p] -= FD_STEP;
        numeric.push(
            (proser_reference(&plus, &inputs, &labels, &pairs)
                - proser_reference(&minus, &inputs, &labels, &pairs))
                / (2.0 * FD_STEP),
        );
    }
    max_rel_error(&analytic, &numeric)
}

// ---------------------------------------------------------------- EVM

pub fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    // identical vectors are at distance 0 exactly; with a Weibull shape
    // below 1 even a 1e-16 rounding residue moves the survival visibly
    if a == b {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb)).max(0.0)
}

pub fn survival(shape: f64, scale: f64, d: f64) -> f64 {
    (-(d / scale).powf(shape)).exp()
}

/// lambda smallest scaled distances from every sample to all other-class
/// samples, by plain enumeration.
pub fn brute_tails(rows: &[Vec<f64>], labels: &[usize], kappa: f64, lambda: usize) -> Vec<Vec<f64>> {
    (0..rows.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..rows.len())
                .filter(|&j| labels[j] != labels[i])
                .map(|j| kappa * cos_dist(&rows[i], &rows[j]))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d.truncate(lambda);
            d
        })
        .collect()
}

fn evm_instance(rng: &mut SeededRng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = 9 + rng.below(22); // 9..=30
    let dim = 2 + rng.below(5);
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..dim).map(|_| 2.0 * rng.normal()).collect())
        .collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        // first nine cover every class three times
        let label = if i < 9 { 1 + i % 3 } else { 1 + rng.below(3) };
        rows.push(
            centers[label - 1]
                .iter()
                .map(|c| c + rng.normal())
                .collect(),
        );
        labels.push(label);
    }
    (rows, labels)
}

/// Draws one random 3-class instance and returns the largest deviation of
/// `evm_fit`/`evm_scores` from enumeration: tail distances and scores in
/// absolute terms, Weibull parameters relative to the oracle's fit.
pub fn evm_instance_error(rng: &mut SeededRng) -> f64 {
    let (rows, labels) = evm_instance(rng);
    let lambda = 2 + rng.below(12);
    let kappa = [0.1, 0.5, 1.0][rng.below(3)];
    let params = EvmParams {
        tail_size: lambda,
        distance_multiplier: kappa,
        cover_threshold: None,
    };
    let features = Mat::from_rows(&rows).unwrap();
    let mut worst: f64 = 0.0;

    let tails = evm_tail_sets(&features, &labels, 3, params);
    let expected = brute_tails(&rows, &labels, kappa, lambda);
    assert_eq!(tails.len(), expected.len());
    for (t, e) in tails.iter().zip(&expected) {
        if t.len() != e.len() {
            return f64::INFINITY;
        }
        for (a, b) in t.iter().zip(e) {
            worst = worst.max((a - b).abs());
        }
    }

    let model = evm_fit(&features, &labels, 3, params).unwrap();
    assert_eq!(model.anchors.len(), rows.len());
    for (a, e) in model.anchors.iter().zip(&expected) {
        let w = weibull_fit(e, lambda, Tail::Low).unwrap();
        worst = worst.max((a.weibull.shape - w.shape).abs() / w.shape);
        worst = worst.max((a.weibull.scale - w.scale).abs() / w.scale);
    }

    let queries: Vec<Vec<f64>> = (0..10)
        .map(|q| {
            if q < 3 {
                rows[q].clone()
            } else {
                (0..rows[0].len()).map(|_| 2.0 * rng.normal()).collect()
            }
        })
        .collect();
    let scores = evm_scores(&model, &Mat::from_rows(&queries).unwrap()).unwrap();
    for (qi, q) in queries.iter().enumerate() {
        for c in 1..=3 {
            let brute = model
                .anchors
                .iter()
                .filter(|a| a.label == c)
                .map(|a| survival(a.weibull.shape, a.weibull.scale, kappa * cos_dist(q, &a.feature)))
                .fold(0.0, f64::max);
            worst = worst.max((scores.get(qi, c - 1) - brute).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------- metrics

pub fn score_matrix(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> ScoreMatrix {
    let k = rows[0].len();
    let cats = labels
        .iter()
        .map(|&l| if l <= k { Category::Known } else { Category::Unknown })
        .collect();
    ScoreMatrix::new(Mat::from_rows(&rows).unwrap(), labels, cats).unwrap()
}

pub fn row_max(r: &[f64]) -> f64 {
    r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the first maximum.
pub fn first_argmax(r: &[f64]) -> usize {
    let m = row_max(r);
    r.iter().position(|&v| v == m).unwrap()
}

pub fn mann_whitney(pos: &[f64], neg: &[f64]) -> f64 {
    let mut twice = 0u64;
    for p in pos {
        for n in neg {
            if p > n {
                twice += 2;
            } else if p == n {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * pos.len() * neg.len()) as f64
}

/// Random 3-class score matrix with at most `max_n` rows; `quantize`
/// rounds scores to quarters to force ties.
pub fn random_scores(rng: &mut SeededRng, max_n: usize, quantize: bool) -> ScoreMatrix {
    let k = 3;
    let n_known = 1 + rng.below(max_n / 2);
    let n_open = 1 + rng.below(max_n / 2);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_known + n_open {
        let r: Vec<f64> = (0..k)
            .map(|_| {
                let v = rng.uniform();
                if quantize {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect();
        rows.push(r);
        labels.push(if i < n_known { 1 + rng.below(k) } else { k + 1 });
    }
    score_matrix(rows, labels)
}

/// Mann-Whitney statistic of max scores, knowns against the rest.
pub fn brute_auroc(s: &ScoreMatrix) -> f64 {
    let k = s.known_classes();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, r) in s.scores.iter_rows().enumerate() {
        if s.labels[i] <= k {
            pos.push(row_max(r));
        } else {
            neg.push(row_max(r));
        }
    }
    mann_whitney(&pos, &neg)
}

/// (correct, false positives) counted directly at one threshold.
pub fn direct_point(s: &ScoreMatrix, theta: f64) -> (usize, usize) {
    let k = s.known_classes();
    let mut correct = 0;
    let mut fp = 0;
    for (i, r) in s.scores.iter_rows().enumerate() {
        let l = s.labels[i];
        if l <= k {
            if first_argmax(r) == l - 1 && r[l - 1] >= theta {
                correct += 1;
            }
        } else if row_max(r) >= theta {
            fp += 1;
        }
    }
    (correct, fp)
}

/// CCR at the smallest FPR not below `zeta`, over every observed score and
/// `+inf` as thresholds; `None` if no observed score gets FPR down to
/// `zeta`.
pub fn brute_ccr_at(s: &ScoreMatrix, zeta: f64) -> Option<f64> {
    let k = s.known_classes();
    let nk = s.labels.iter().filter(|&&l| l <= k).count();
    let nu = s.len() - nk;
    // observed scores: knowns at their true class, open-set samples at their max
    let mut observed: Vec<f64> = s
        .scores
        .iter_rows()
        .enumerate()
        .map(|(i, r)| if s.labels[i] <= k { r[s.labels[i] - 1] } else { row_max(r) })
        .collect();
    observed.sort_by(f64::total_cmp);
    observed.dedup();
    let min_fpr = observed
        .iter()
        .map(|&t| direct_point(s, t).1)
        .min()
        .unwrap() as f64
        / nu as f64;
    if min_fpr > zeta {
        return None;
    }
    observed.push(f64::INFINITY);
    let pts: Vec<(f64, f64)> = observed
        .iter()
        .map(|&t| {
            let (c, f) = direct_point(s, t);
            (f as f64 / nu as f64, c as f64 / nk as f64)
        })
        .collect();
    let fpr = pts
        .iter()
        .filter(|p| p.0 >= zeta)
        .map(|p| p.0)
        .fold(f64::INFINITY, f64::min);
    pts.iter()
        .filter(|p| p.0 == fpr)
        .map(|p| p.1)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
}
