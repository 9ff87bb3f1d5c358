//! Fine-tuned PROSER behaviour and fit determinism of every post-processor.

use openset::harness::{fit_postprocessor, grid_cells, FitBundle, GridCell, Grids};
use openset::numerics::{argmax, Mat};
use openset::postproc::proser::{mix, ProserModel, ProserParams};
use openset::postproc::{proser_finetune, EvmParams, Method, OpenMaxParams};
use openset::protocol::{generate_protocol, ProtocolData, ProtocolSpec};
use openset::training::{train, OptimizerConfig, Regime};
use openset::{Category, Split};

fn small_spec() -> ProtocolSpec {
    ProtocolSpec {
        known_classes: 4,
        negative_classes: 2,
        unknown_classes: 2,
        dim: 10,
        train_per_class: 30,
        val_per_class: 10,
        test_per_class: 10,
        ..ProtocolSpec::default()
    }
}

fn optimizer() -> OptimizerConfig {
    OptimizerConfig {
        epochs: 30,
        hidden: vec![32],
        ..OptimizerConfig::default()
    }
}

/// Tight clusters and a well-trained base network.
fn finetuned(seed: u64) -> (ProserModel, Mat, Vec<usize>) {
    let params = ProserParams {
        dummy_count: 2,
        ..ProserParams::default()
    };
    let spec = ProtocolSpec {
        cluster_spread: 0.5,
        ..small_spec()
    };
    let data = generate_protocol(&spec, seed).unwrap();
    let train_set = data.view(Split::Train, &[Category::Known, Category::Negative]);
    let opt = OptimizerConfig {
        epochs: 100,
        ..optimizer()
    };
    let base = train(Regime::SoftMax, &train_set, 4, &opt, seed).unwrap();
    let knowns = data.view(Split::Train, &[Category::Known]);
    let rows: Vec<&[f64]> = knowns.iter().map(|s| s.x.as_slice()).collect();
    let inputs = Mat::from_rows(&rows).unwrap();
    let labels: Vec<usize> = knowns.iter().map(|s| s.label).collect();
    let model = proser_finetune(&base, &inputs, &labels, 4, params, seed).unwrap();
    (model, inputs, labels)
}

/// Fraction of different-class midpoints whose top logit is the dummy.
fn midpoint_dummy_rate(model: &ProserModel, inputs: &Mat, labels: &[usize]) -> f64 {
    let (phi, _) = model.backbone.extract(inputs).unwrap();
    let k = model.known_classes();
    let mut mixes = Vec::new();
    for i in 0..labels.len() {
        for j in (i + 1..labels.len()).step_by(7) {
            if labels[i] != labels[j] {
                mixes.push(mix(phi.row(i), phi.row(j), 0.5));
            }
        }
    }
    let logits = model.logits_from_features(&Mat::from_rows(&mixes).unwrap());
    let hits = logits.iter_rows().filter(|u| argmax(u) == k).count();
    hits as f64 / mixes.len() as f64
}

fn known_accuracy(model: &ProserModel, inputs: &Mat, labels: &[usize]) -> f64 {
    let logits = model.logits(inputs).unwrap();
    let hits = logits
        .iter_rows()
        .zip(labels)
        .filter(|(u, &l)| argmax(u) == l - 1)
        .count();
    hits as f64 / labels.len() as f64
}

#[test]
fn midpoints_are_claimed_by_the_dummy() {
    let rates: Vec<f64> = (0..5)
        .map(|seed| {
            let (m, x, y) = finetuned(seed);
            midpoint_dummy_rate(&m, &x, &y)
        })
        .collect();
    let passing = rates.iter().filter(|&&r| r >= 0.8).count();
    assert!(passing >= 3, "dummy rates {rates:?}");
}

#[test]
fn knowns_keep_their_class() {
    let accs: Vec<f64> = (0..5)
        .map(|seed| {
            let (m, x, y) = finetuned(seed);
            known_accuracy(&m, &x, &y)
        })
        .collect();
    let passing = accs.iter().filter(|&&a| a >= 0.9).count();
    assert!(passing >= 3, "known accuracies {accs:?}");
}

fn bundle(data: &ProtocolData, regime: Regime) -> FitBundle {
    let train_set = data.view(Split::Train, &[Category::Known, Category::Negative]);
    let backbone = train(regime, &train_set, 4, &optimizer(), 3).unwrap();
    FitBundle::from_protocol(data, backbone).unwrap()
}

#[test]
fn every_method_fits_deterministically() {
    let data = generate_protocol(&small_spec(), 11).unwrap();
    let cells = [
        GridCell::Mss,
        GridCell::Mls,
        GridCell::OpenMax(OpenMaxParams {
            tail_size: 10,
            distance_multiplier: 1.5,
            alpha: 2,
        }),
        GridCell::Evm(EvmParams {
            tail_size: 10,
            distance_multiplier: 0.5,
            cover_threshold: None,
        }),
        GridCell::Proser { dummy_count: 2 },
    ];
    for regime in Regime::ALL {
        let a = bundle(&data, regime);
        let b = bundle(&data, regime);
        assert_eq!(a.backbone, b.backbone);
        for cell in &cells {
            let p = ProserParams::default();
            let m1 = fit_postprocessor(cell, &a, &p, 5).unwrap();
            let m2 = fit_postprocessor(cell, &b, &p, 5).unwrap();
            assert_eq!(m1, m2, "{regime} {cell:?}");
        }
    }
}

#[test]
fn garbage_backbone_is_truncated_to_known_logits() {
    let data = generate_protocol(&small_spec(), 2).unwrap();
    let b = bundle(&data, Regime::Garbage);
    assert_eq!(b.backbone.outputs(), 5);
    let m = fit_postprocessor(&GridCell::Proser { dummy_count: 1 }, &b, &ProserParams::default(), 0).unwrap();
    match m {
        openset::postproc::PostProcessorModel::Proser(p) => assert_eq!(p.known_classes(), 4),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn proser_grid_covers_dummy_counts() {
    let cells = grid_cells(Method::Proser, &Grids::default());
    let counts: Vec<usize> = cells
        .iter()
        .map(|c| match c {
            GridCell::Proser { dummy_count } => *dummy_count,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(counts, vec![1, 2, 5, 10, 25, 100]);
}
