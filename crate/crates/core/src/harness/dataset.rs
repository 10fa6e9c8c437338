//! Labeled Gaussian-mixture data and the two tuning scenarios.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Scenario};
use crate::error::{Error, Result};
use crate::flow::{sample_normal, Point, TrainingPair};

/// One label relocated to a new center, learned from a few pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptShift {
    pub label: usize,
    pub new_center: Point,
    pub n_tune_pairs: usize,
}

/// Rotation and scaling about the origin applied to every label except
/// `holdout_label`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub rotation_deg: f64,
    pub scale: f64,
    pub holdout_label: usize,
    pub samples_per_class: usize,
}

impl DomainShift {
    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        [self.scale * (c * p[0] - s * p[1]), self.scale * (s * p[0] + c * p[1])]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub mode_centers: Vec<Point>,
    pub mode_std: f64,
    pub samples_per_class: usize,
    pub concept_shift: Option<ConceptShift>,
    pub domain_shift: Option<DomainShift>,
}

impl DatasetSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let d = &cfg.data;
        let (concept_shift, domain_shift) = match cfg.scenario {
            Scenario::Customize => (
                Some(ConceptShift {
                    label: d.shift_label,
                    new_center: d.shift_center,
                    n_tune_pairs: d.n_tune_pairs,
                }),
                None,
            ),
            Scenario::DomainShift => (
                None,
                Some(DomainShift {
                    rotation_deg: d.rotation_deg,
                    scale: d.scale,
                    holdout_label: d.holdout_label,
                    samples_per_class: d.tune_samples_per_class,
                }),
            ),
        };
        Self {
            n_classes: d.n_classes,
            mode_centers: d.centers.clone(),
            mode_std: d.mode_std,
            samples_per_class: d.samples_per_class,
            concept_shift,
            domain_shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.mode_centers.len() != self.n_classes {
            return Err(Error::InvalidSpec(format!(
                "{} centers for {} classes",
                self.mode_centers.len(),
                self.n_classes
            )));
        }
        if !(self.mode_std >= 0.0 && self.mode_std.is_finite()) {
            return Err(Error::InvalidSpec(format!("bad mode std {}", self.mode_std)));
        }
        if self.mode_centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite center".into()));
        }
        let min_sep = 6.0 * self.mode_std;
        for (i, a) in self.mode_centers.iter().enumerate() {
            for b in &self.mode_centers[i + 1..] {
                let d = (a[0] - b[0]).hypot(a[1] - b[1]);
                if d < min_sep {
                    return Err(Error::InvalidSpec(format!(
                        "centers {a:?} and {b:?} are {d} apart, need at least {min_sep}"
                    )));
                }
            }
        }
        if let Some(cs) = &self.concept_shift {
            if cs.label >= self.n_classes {
                return Err(Error::LabelOutOfRange {
                    label: cs.label,
                    classes: self.n_classes,
                });
            }
            if cs.n_tune_pairs == 0 {
                return Err(Error::InvalidSpec("n_tune_pairs must be at least 1".into()));
            }
            if !cs.new_center.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidSpec("non-finite shifted center".into()));
            }
        }
        if let Some(ds) = &self.domain_shift {
            if ds.holdout_label >= self.n_classes {
                return Err(Error::LabelOutOfRange {
                    label: ds.holdout_label,
                    classes: self.n_classes,
                });
            }
            if ds.samples_per_class == 0 || !(ds.scale > 0.0) {
                return Err(Error::InvalidSpec(
                    "domain shift needs samples and a positive scale".into(),
                ));
            }
        }
        if self.concept_shift.is_some() && self.domain_shift.is_some() {
            return Err(Error::InvalidSpec(
                "choose one of concept shift and domain shift".into(),
            ));
        }
        Ok(())
    }

    /// Labels whose distribution the tuning set changes.
    pub fn tuned_labels(&self) -> Vec<usize> {
        match (&self.concept_shift, &self.domain_shift) {
            (Some(cs), _) => vec![cs.label],
            (_, Some(ds)) => (0..self.n_classes).filter(|&l| l != ds.holdout_label).collect(),
            _ => Vec::new(),
        }
    }

    /// Labels whose distribution must survive tuning unchanged.
    pub fn retained_labels(&self) -> Vec<usize> {
        match (&self.concept_shift, &self.domain_shift) {
            (Some(cs), _) => (0..self.n_classes).filter(|&l| l != cs.label).collect(),
            (_, Some(ds)) => vec![ds.holdout_label],
            _ => (0..self.n_classes).collect(),
        }
    }

    /// `n` draws from the original mode of `label`.
    pub fn sample_mode<R: Rng + ?Sized>(&self, label: usize, n: usize, rng: &mut R) -> Result<Vec<Point>> {
        let c = *self.mode_centers.get(label).ok_or(Error::LabelOutOfRange {
            label,
            classes: self.n_classes,
        })?;
        Ok(gaussian(c, self.mode_std, n, rng))
    }

    /// `n` draws from the post-tuning target distribution of a tuned label.
    pub fn sample_target<R: Rng + ?Sized>(&self, label: usize, n: usize, rng: &mut R) -> Result<Vec<Point>> {
        match (&self.concept_shift, &self.domain_shift) {
            (Some(cs), _) if cs.label == label => Ok(gaussian(cs.new_center, self.mode_std, n, rng)),
            (_, Some(ds)) if ds.holdout_label != label => Ok(self
                .sample_mode(label, n, rng)?
                .into_iter()
                .map(|p| ds.apply(p))
                .collect()),
            _ => Err(Error::InvalidArgument(format!("label {label} is not tuned"))),
        }
    }
}

fn gaussian<R: Rng + ?Sized>(center: Point, std: f64, n: usize, rng: &mut R) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let z = sample_normal(rng);
            [center[0] + std * z[0], center[1] + std * z[1]]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub pretrain: Vec<TrainingPair>,
    pub tune: Vec<TrainingPair>,
}

/// Pretraining set over every mode plus the tuning set of the scenario. The
/// pretraining draws come first, so the pretraining set does not depend on
/// the scenario.
pub fn generate_dataset<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Result<Datasets> {
    spec.validate()?;
    let mut pretrain = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for label in 0..spec.n_classes {
        for target in spec.sample_mode(label, spec.samples_per_class, rng)? {
            pretrain.push(TrainingPair { target, label });
        }
    }
    let mut tune = Vec::new();
    if let Some(cs) = &spec.concept_shift {
        for target in spec.sample_target(cs.label, cs.n_tune_pairs, rng)? {
            tune.push(TrainingPair {
                target,
                label: cs.label,
            });
        }
    }
    if let Some(ds) = &spec.domain_shift {
        for label in spec.tuned_labels() {
            for target in spec.sample_target(label, ds.samples_per_class, rng)? {
                tune.push(TrainingPair { target, label });
            }
        }
    }
    Ok(Datasets { pretrain, tune })
}
