//! Post-processors turning network outputs into per-known-class scores.
//!
//! Every scorer returns a matrix with exactly `K` columns. Where a method
//! produces an extra "unknown" probability (OpenMax, PROSER) or the network
//! has a garbage output, that column is dropped after it has taken part in
//! the softmax.

pub mod evm;
pub mod openmax;
pub mod proser;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sq_norm, softmax_unchecked, Mat};
use crate::sample::Category;

pub use evm::{evm_fit, evm_reduce, evm_scores, Anchor, EvmModel, EvmParams};
pub use openmax::{openmax_fit, openmax_scores, OpenMaxModel, OpenMaxParams};
pub use proser::{proser_finetune, proser_scores, ProserModel, ProserParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mss,
    Mls,
    OpenMax,
    Evm,
    Proser,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Mss,
        Method::Mls,
        Method::OpenMax,
        Method::Evm,
        Method::Proser,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mss => "mss",
            Method::Mls => "mls",
            Method::OpenMax => "openmax",
            Method::Evm => "evm",
            Method::Proser => "proser",
        }
    }

    /// MSS and MLS have nothing to fit.
    pub fn is_parameter_free(self) -> bool {
        matches!(self, Method::Mss | Method::Mls)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mss" => Ok(Method::Mss),
            "mls" => Ok(Method::Mls),
            "openmax" => Ok(Method::OpenMax),
            "evm" => Ok(Method::Evm),
            "proser" => Ok(Method::Proser),
            _ => Err(Error::InvalidParameter(format!("unknown post-processor '{s}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A fitted post-processor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "model", rename_all = "lowercase")]
pub enum PostProcessorModel {
    Mss,
    Mls,
    OpenMax(OpenMaxModel),
    Evm(EvmModel),
    Proser(ProserModel),
}

impl PostProcessorModel {
    pub fn method(&self) -> Method {
        match self {
            PostProcessorModel::Mss => Method::Mss,
            PostProcessorModel::Mls => Method::Mls,
            PostProcessorModel::OpenMax(_) => Method::OpenMax,
            PostProcessorModel::Evm(_) => Method::Evm,
            PostProcessorModel::Proser(_) => Method::Proser,
        }
    }
}

/// Per-sample scores over the `K` known classes with parallel labels and
/// categories.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Mat,
    pub labels: Vec<usize>,
    pub categories: Vec<Category>,
}

impl ScoreMatrix {
    pub fn new(scores: Mat, labels: Vec<usize>, categories: Vec<Category>) -> Result<Self> {
        if labels.len() != scores.rows() || categories.len() != scores.rows() {
            return Err(Error::DimensionMismatch {
                expected: scores.rows(),
                got: labels.len().min(categories.len()),
            });
        }
        let k = scores.cols();
        for (&l, &c) in labels.iter().zip(&categories) {
            let known = l >= 1 && l <= k;
            if known != (c == Category::Known) {
                return Err(Error::InvalidParameter(format!(
                    "label {l} inconsistent with category {c} for K = {k}"
                )));
            }
        }
        Ok(ScoreMatrix {
            scores,
            labels,
            categories,
        })
    }

    pub fn known_classes(&self) -> usize {
        self.scores.cols()
    }

    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.rows() == 0
    }

    /// Known samples plus those of one open-set category; negatives and
    /// unknowns are never pooled.
    pub fn restrict(&self, category: Category) -> ScoreMatrix {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                self.categories[i] == Category::Known || self.categories[i] == category
            })
            .collect();
        ScoreMatrix {
            scores: self.scores.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            categories: idx.iter().map(|&i| self.categories[i]).collect(),
        }
    }
}

fn check_logit_width(logits: &Mat, known_classes: usize) -> Result<()> {
    let c = logits.cols();
    if c != known_classes && c != known_classes + 1 {
        return Err(Error::DimensionMismatch {
            expected: known_classes,
            got: c,
        });
    }
    Ok(())
}

/// Softmax probabilities of the known classes. A garbage column, if
/// present, takes part in the softmax and is then dropped.
pub fn mss_scores(logits: &Mat, known_classes: usize) -> Result<Mat> {
    check_logit_width(logits, known_classes)?;
    let mut out = Mat::zeros(logits.rows(), known_classes);
    for (i, z) in logits.iter_rows().enumerate() {
        if let Some(j) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(j));
        }
        let y = softmax_unchecked(z);
        out.row_mut(i).copy_from_slice(&y[..known_classes]);
    }
    Ok(out)
}

/// Raw known-class logits.
pub fn mls_scores(logits: &Mat, known_classes: usize) -> Result<Mat> {
    check_logit_width(logits, known_classes)?;
    Ok(logits.truncate_cols(known_classes))
}

/// Cosine distance that treats a zero feature vector as orthogonal to
/// everything (distance 1). ReLU features can be all-zero for far-away
/// inputs.
#[inline]
pub(crate) fn feature_distance(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    crate::numerics::cosine_distance_sq(a, na, b, nb)
}

pub(crate) fn row_sq_norms(m: &Mat) -> Vec<f64> {
    m.iter_rows().map(sq_norm).collect()
}
