//! Synthetic open-set protocols and the feature CSV format.
//!
//! Known class `i` is centred at `(spacing / sqrt 2) * e_i`, so adjacent known
//! centres are `spacing` apart. Negative and unknown classes each get a
//! private axis and sit at `offset * spacing` from one of the known centres,
//! which puts them between clusters for small offsets (hard) and far away
//! for large ones (easy).

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::sample::{Category, LabeledSample, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSpec {
    pub known_classes: usize,
    pub negative_classes: usize,
    pub unknown_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub neg_offset: f64,
    pub unk_offset: f64,
    pub cluster_spread: f64,
    /// Distance between adjacent known centres; `4 * cluster_spread` if unset.
    pub spacing: Option<f64>,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            known_classes: 10,
            negative_classes: 4,
            unknown_classes: 4,
            dim: 24,
            train_per_class: 40,
            val_per_class: 15,
            test_per_class: 30,
            neg_offset: 1.0,
            unk_offset: 3.0,
            cluster_spread: 1.0,
            spacing: None,
        }
    }
}

impl ProtocolSpec {
    /// Unknowns far from the knowns.
    pub fn easy() -> Self {
        ProtocolSpec::default()
    }

    /// Unknowns close to the known centres.
    pub fn hard() -> Self {
        ProtocolSpec {
            unk_offset: 0.25,
            ..ProtocolSpec::default()
        }
    }

    pub fn spacing(&self) -> f64 {
        self.spacing.unwrap_or(4.0 * self.cluster_spread)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("known_classes", self.known_classes),
            ("negative_classes", self.negative_classes),
            ("unknown_classes", self.unknown_classes),
            ("train_per_class", self.train_per_class),
            ("val_per_class", self.val_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("neg_offset", self.neg_offset),
            ("unk_offset", self.unk_offset),
            ("cluster_spread", self.cluster_spread),
            ("spacing", self.spacing()),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        let needed = self.known_classes + self.negative_classes + self.unknown_classes;
        if self.dim < needed {
            return Err(Error::InvalidParameter(format!(
                "dim {} too small to place {needed} class centres",
                self.dim
            )));
        }
        Ok(())
    }

    /// Class centres in order: knowns, negatives, unknowns.
    pub fn centers(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let k = self.known_classes;
        let spacing = self.spacing();
        let mut centers = Vec::new();
        for i in 0..k {
            let mut c = vec![0.0; self.dim];
            c[i] = spacing / std::f64::consts::SQRT_2;
            centers.push(c);
        }
        let mut axis = k;
        for (count, offset) in [
            (self.negative_classes, self.neg_offset),
            (self.unknown_classes, self.unk_offset),
        ] {
            for m in 0..count {
                let mut c = centers[m % k].clone();
                c[axis] = offset * spacing;
                axis += 1;
                centers.push(c);
            }
        }
        Ok(centers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ProtocolSpec,
    pub seed: u64,
}

/// Samples of a protocol plus an access counter for unknown samples.
#[derive(Debug)]
pub struct ProtocolData {
    samples: Vec<LabeledSample>,
    known_classes: usize,
    dim: usize,
    pub manifest: Option<Manifest>,
    unknown_reads: AtomicUsize,
}

impl Clone for ProtocolData {
    fn clone(&self) -> Self {
        ProtocolData {
            samples: self.samples.clone(),
            known_classes: self.known_classes,
            dim: self.dim,
            manifest: self.manifest.clone(),
            unknown_reads: AtomicUsize::new(self.unknown_reads()),
        }
    }
}

impl PartialEq for ProtocolData {
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples
            && self.known_classes == other.known_classes
            && self.dim == other.dim
    }
}

impl ProtocolData {
    pub fn new(samples: Vec<LabeledSample>, known_classes: usize) -> Result<Self> {
        let dim = samples.first().map_or(0, |s| s.x.len());
        for s in &samples {
            if s.x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.x.len(),
                });
            }
            let known = s.label >= 1 && s.label <= known_classes;
            if known != (s.category == Category::Known) || s.label > known_classes + 1 {
                return Err(Error::InvalidParameter(format!(
                    "label {} inconsistent with category {}",
                    s.label, s.category
                )));
            }
            if s.category == Category::Unknown && s.split != Split::Test {
                return Err(Error::InvalidParameter(format!(
                    "unknown sample in {} split",
                    s.split
                )));
            }
        }
        Ok(ProtocolData {
            samples,
            known_classes,
            dim,
            manifest: None,
            unknown_reads: AtomicUsize::new(0),
        })
    }

    pub fn known_classes(&self) -> usize {
        self.known_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples of one split restricted to the given categories. Every
    /// unknown sample handed out is counted.
    pub fn view(&self, split: Split, categories: &[Category]) -> Vec<LabeledSample> {
        let out: Vec<LabeledSample> = self
            .samples
            .iter()
            .filter(|s| s.split == split && categories.contains(&s.category))
            .cloned()
            .collect();
        let unknown = out.iter().filter(|s| s.category == Category::Unknown).count();
        self.unknown_reads.fetch_add(unknown, Ordering::Relaxed);
        out
    }

    /// All samples; counted like [`ProtocolData::view`].
    pub fn samples(&self) -> &[LabeledSample] {
        let unknown = self
            .samples
            .iter()
            .filter(|s| s.category == Category::Unknown)
            .count();
        self.unknown_reads.fetch_add(unknown, Ordering::Relaxed);
        &self.samples
    }

    /// Number of unknown samples read so far.
    pub fn unknown_reads(&self) -> usize {
        self.unknown_reads.load(Ordering::Relaxed)
    }

    pub fn count(&self, split: Split, category: Category) -> usize {
        self.samples
            .iter()
            .filter(|s| s.split == split && s.category == category)
            .count()
    }

    /// Canonical CSV text.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,category,label");
        for j in 0..self.dim {
            write!(out, ",f{j}").unwrap();
        }
        out.push('\n');
        for s in &self.samples {
            write!(out, "{},{},{}", s.split, s.category, s.label).unwrap();
            for v in &s.x {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Draws a protocol. Same spec and seed give the same samples.
pub fn generate_protocol(spec: &ProtocolSpec, seed: u64) -> Result<ProtocolData> {
    let centers = spec.centers()?;
    let k = spec.known_classes;
    let mut rng = SeededRng::new(seed);
    let mut samples = Vec::new();
    let mut draw = |rng: &mut SeededRng, center: &[f64], label, split, category, n| {
        for _ in 0..n {
            let x = center
                .iter()
                .map(|&c| c + spec.cluster_spread * rng.normal())
                .collect();
            samples.push(LabeledSample {
                x,
                label,
                split,
                category,
            });
        }
    };
    let splits = [
        (Split::Train, spec.train_per_class),
        (Split::Val, spec.val_per_class),
        (Split::Test, spec.test_per_class),
    ];
    for (split, n) in splits {
        for (i, c) in centers[..k].iter().enumerate() {
            draw(&mut rng, c, i + 1, split, Category::Known, n);
        }
        for c in &centers[k..k + spec.negative_classes] {
            draw(&mut rng, c, k + 1, split, Category::Negative, n);
        }
    }
    for c in &centers[k + spec.negative_classes..] {
        draw(&mut rng, c, k + 1, Split::Test, Category::Unknown, spec.test_per_class);
    }
    let mut data = ProtocolData::new(samples, k)?;
    data.manifest = Some(Manifest {
        spec: spec.clone(),
        seed,
    });
    Ok(data)
}

/// Parses feature CSV text. `K` is the largest known label; negative and
/// unknown rows must carry label `K + 1`.
pub fn parse_features_csv(text: &str) -> Result<ProtocolData> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.len() < 4 || cols[..3] != ["split", "category", "label"] {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with split,category,label and name at least one feature"
                .into(),
        });
    }
    for (j, c) in cols[3..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column f{j}, found '{c}'"),
            });
        }
    }
    let dim = cols.len() - 3;
    let mut samples = Vec::new();
    let mut line_of = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line, msg };
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(perr(format!(
                "expected {} features, found {}",
                dim,
                fields.len().saturating_sub(3)
            )));
        }
        let split: Split = fields[0].parse().map_err(|e: Error| perr(e.to_string()))?;
        let category: Category = fields[1].parse().map_err(|e: Error| perr(e.to_string()))?;
        let label: usize = fields[2]
            .parse()
            .ok()
            .filter(|&l| l >= 1)
            .ok_or_else(|| perr(format!("label '{}' is not a positive integer", fields[2])))?;
        let mut x = Vec::with_capacity(dim);
        for f in &fields[3..] {
            let v: f64 = f
                .parse()
                .map_err(|_| perr(format!("'{f}' is not a number")))?;
            if !v.is_finite() {
                return Err(perr(format!("non-finite feature '{f}'")));
            }
            x.push(v);
        }
        samples.push(LabeledSample {
            x,
            label,
            split,
            category,
        });
        line_of.push(line);
    }
    let k = samples
        .iter()
        .filter(|s| s.category == Category::Known)
        .map(|s| s.label)
        .max()
        .unwrap_or(0);
    for (s, &line) in samples.iter().zip(&line_of) {
        if s.category != Category::Known && s.label != k + 1 {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "{} sample must have label {} (largest known label + 1), found {}",
                    s.category,
                    k + 1,
                    s.label
                ),
            });
        }
        if s.category == Category::Unknown && s.split != Split::Test {
            return Err(Error::Parse {
                line,
                msg: format!("unknown sample in {} split", s.split),
            });
        }
    }
    let mut data = ProtocolData::new(samples, k)?;
    data.dim = dim;
    Ok(data)
}

pub fn load_features_csv(path: impl AsRef<Path>) -> Result<ProtocolData> {
    parse_features_csv(&std::fs::read_to_string(path)?)
}

pub fn write_features_csv(data: &ProtocolData, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, data.to_csv())?;
    Ok(())
}
