//! Distribution distances between empirical 2-D sample sets, and the two
//! model-level scores built on them.
//!
//! * [`quality_proxy`]: how far a model's few-step samples on retained labels
//!   are from the pretrained base's dense-solve samples. Lower is better.
//! * [`concept_score`]: how far few-step samples of the shifted label are from
//!   the new target distribution. Lower means the concept was learned.
//!
//! Pairwise sums are computed row by row (rows may run in parallel) and the
//! row results are then added serially in row order.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::flow::{sample_normal, Point, VelocityField};
use crate::par;
use crate::rng::{derive_seed, SeededRng};
use crate::sampler::{self, Schedule, DENSE_STEPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Data,
    DenseSolve,
    KstepSolve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub points: Vec<Point>,
    pub label: Option<usize>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(points: Vec<Point>, label: Option<usize>, provenance: Provenance) -> Self {
        Self {
            points,
            label,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Empty("sample set"));
        }
        for p in &self.points {
            ensure_finite("sample set", p)?;
        }
        Ok(())
    }

    pub fn mean(&self) -> Point {
        let n = self.points.len() as f64;
        let (sx, sy) = self.points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / n, sy / n]
    }
}

#[inline]
fn dist(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Unit directions at uniformly random angles, from a seeded stream.
pub fn projection_directions(n_proj: usize, seed: u64) -> Vec<Point> {
    let mut rng = SeededRng::seed_from_u64(seed);
    (0..n_proj)
        .map(|_| {
            let a = rng.random::<f64>() * std::f64::consts::TAU;
            [a.cos(), a.sin()]
        })
        .collect()
}

/// Exact 1-D p-Wasserstein distance between equal-size empirical samples.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64], p: u32) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    match p {
        1 => a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
        _ => {
            let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs().powi(p as i32)).sum();
            (s / n).powf(1.0 / p as f64)
        }
    }
}

/// Mean over `n_proj` seeded random directions of the 1-D p-Wasserstein
/// distance between the projected sets.
pub fn sliced_wasserstein(a: &SampleSet, b: &SampleSet, n_proj: usize, p: u32, seed: u64) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(a.len(), b.len()));
    }
    if n_proj == 0 {
        return Err(Error::InvalidArgument("n_proj must be at least 1".into()));
    }
    if p != 1 && p != 2 {
        return Err(Error::InvalidArgument(format!("order p must be 1 or 2, got {p}")));
    }
    let dirs = projection_directions(n_proj, seed);
    let per_dir = par::map_slice(&dirs, |d| {
        let mut pa: Vec<f64> = a.points.iter().map(|x| x[0] * d[0] + x[1] * d[1]).collect();
        let mut pb: Vec<f64> = b.points.iter().map(|x| x[0] * d[0] + x[1] * d[1]).collect();
        wasserstein_1d(&mut pa, &mut pb, p)
    });
    Ok(per_dir.iter().sum::<f64>() / n_proj as f64)
}

/// Mean pairwise distance over all `|a| * |b|` pairs.
fn mean_pairwise(a: &[Point], b: &[Point]) -> f64 {
    let rows = par::map_slice(a, |&x| b.iter().map(|&y| dist(x, y)).sum::<f64>());
    rows.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

/// Energy distance `2 E|a - b| - E|a - a'| - E|b - b'|` over all pairs
/// (V-statistic, so identical sets score exactly zero).
pub fn energy_distance(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let cross = mean_pairwise(&a.points, &b.points);
    let aa = mean_pairwise(&a.points, &a.points);
    let bb = mean_pairwise(&b.points, &b.points);
    // The V-statistic is nonnegative; clamp rounding noise on near-identical sets.
    Ok((2.0 * cross - aa - bb).max(0.0))
}

/// Noise draws for one evaluated label, independent of evaluation order.
pub fn label_noises(base_seed: u64, label: usize, n: usize) -> Vec<Point> {
    let mut rng = SeededRng::seed_from_u64(derive_seed(base_seed, &format!("label-{label}")));
    (0..n).map(|_| sample_normal(&mut rng)).collect()
}

/// Few-step samples of `field` under the student condition for `label`.
pub fn kstep_samples(field: &VelocityField, schedule: &Schedule, label: usize, noises: &[Point]) -> Result<SampleSet> {
    let c = field.encoder().encode_student(label)?;
    let pts = par::map_slice(noises, |z| sampler::sample(field, &c, schedule, *z))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleSet::new(pts, Some(label), Provenance::KstepSolve))
}

/// Dense (many-step) samples of `field` under the student condition for `label`.
pub fn dense_samples(field: &VelocityField, label: usize, noises: &[Point]) -> Result<SampleSet> {
    let c = field.encoder().encode_student(label)?;
    let schedule = Schedule::uniform(DENSE_STEPS)?;
    let pts = par::map_slice(noises, |z| sampler::sample(field, &c, &schedule, *z))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleSet::new(pts, Some(label), Provenance::DenseSolve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// `(label, energy distance)`, sorted by label.
    pub per_label: Vec<(usize, f64)>,
    pub aggregate: f64,
}

impl QualityReport {
    fn from_scores(mut per_label: Vec<(usize, f64)>) -> Self {
        per_label.sort_by_key(|(l, _)| *l);
        let aggregate = per_label.iter().map(|(_, s)| s).sum::<f64>() / per_label.len() as f64;
        Self { per_label, aggregate }
    }
}

/// Few-step quality of `field` relative to dense samples of `reference`, on
/// the given labels.
pub fn quality_proxy<R: Rng + ?Sized>(
    field: &VelocityField,
    schedule: &Schedule,
    reference: &VelocityField,
    labels: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<QualityReport> {
    if labels.is_empty() {
        return Err(Error::Empty("label list"));
    }
    let field_seed: u64 = rng.random();
    let ref_seed: u64 = rng.random();
    let refs = labels
        .iter()
        .map(|&l| dense_samples(reference, l, &label_noises(ref_seed, l, n)))
        .collect::<Result<Vec<_>>>()?;
    quality_against(field, schedule, &refs, field_seed)
}

/// [`quality_proxy`] against precomputed reference sets (one per label).
pub fn quality_against(
    field: &VelocityField,
    schedule: &Schedule,
    references: &[SampleSet],
    noise_seed: u64,
) -> Result<QualityReport> {
    if references.is_empty() {
        return Err(Error::Empty("reference list"));
    }
    let scores = references
        .iter()
        .map(|r| {
            let label = r
                .label
                .ok_or_else(|| Error::InvalidArgument("reference set without label".into()))?;
            let s = kstep_samples(field, schedule, label, &label_noises(noise_seed, label, r.len()))?;
            Ok((label, energy_distance(&s, r)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QualityReport::from_scores(scores))
}

/// Energy distance between few-step samples for `label` and the target set.
pub fn concept_score<R: Rng + ?Sized>(
    field: &VelocityField,
    schedule: &Schedule,
    target_set: &SampleSet,
    label: usize,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let noises: Vec<Point> = (0..n).map(|_| sample_normal(rng)).collect();
    let s = kstep_samples(field, schedule, label, &noises)?;
    energy_distance(&s, target_set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use proptest::prelude::*;

    fn set(points: Vec<Point>) -> SampleSet {
        SampleSet::new(points, None, Provenance::Data)
    }

    fn gaussian(n: usize, mean: Point, seed: u64) -> SampleSet {
        let mut rng = SeededRng::seed_from_u64(seed);
        set((0..n)
            .map(|_| {
                let z = sample_normal(&mut rng);
                [mean[0] + z[0], mean[1] + z[1]]
            })
            .collect())
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = gaussian(200, [1.0, -1.0], 1);
        assert_eq!(sliced_wasserstein(&a, &a, 32, 2, 7).unwrap(), 0.0);
        assert_eq!(sliced_wasserstein(&a, &a, 32, 1, 7).unwrap(), 0.0);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn permuted_multiset_has_zero_energy_distance() {
        let a = gaussian(100, [0.0, 0.0], 2);
        let mut rev = a.points.clone();
        rev.reverse();
        let b = set(rev);
        assert!(energy_distance(&a, &b).unwrap() < 1e-12);
    }

    #[test]
    fn two_point_masses() {
        let a = set(vec![[0.0, 0.0]]);
        let b = set(vec![[3.0, 4.0]]);
        assert_eq!(energy_distance(&a, &b).unwrap(), 10.0);
    }

    /// For a direction at uniform angle, E|<dir, d>| = |d| E|cos| = (2/pi)|d|.
    #[test]
    fn two_delta_sliced_w1_matches_expectation() {
        let a = set(vec![[0.0, 0.0]]);
        let b = set(vec![[3.0, 4.0]]);
        let sw = sliced_wasserstein(&a, &b, 10_000, 1, 3).unwrap();
        let want = 2.0 / std::f64::consts::PI * 5.0;
        assert!((sw - want).abs() / want < 0.05, "{sw} vs {want}");
    }

    #[test]
    fn energy_distance_between_shifted_gaussians() {
        // Reference by independent Monte Carlo over fresh pairs:
        // 2 E|X - Y| - E|X - X'| - E|Y - Y'| with X ~ N(0, I), Y ~ N((5,0), I).
        let mut rng = SeededRng::seed_from_u64(1234);
        let m = 400_000;
        let (mut xy, mut xx) = (0.0, 0.0);
        for _ in 0..m {
            let x = sample_normal(&mut rng);
            let y = sample_normal(&mut rng);
            let x2 = sample_normal(&mut rng);
            xy += dist(x, [y[0] + 5.0, y[1]]);
            xx += dist(x, x2);
        }
        let reference = 2.0 * xy / m as f64 - 2.0 * xx / m as f64;
        // Frozen value: the Rice-distribution mean gives 2 * 5.20470 - 2 * sqrt(pi) = 6.86449.
        assert!((reference - 6.8645).abs() < 0.05, "reference drifted: {reference}");
        let a = gaussian(1000, [0.0, 0.0], 10);
        let b = gaussian(1000, [5.0, 0.0], 11);
        let ed = energy_distance(&a, &b).unwrap();
        assert!((ed - reference).abs() / reference < 0.1, "{ed} vs {reference}");
    }

    #[test]
    fn metric_errors() {
        let a = set(vec![[0.0, 0.0], [1.0, 1.0]]);
        let b = set(vec![[0.0, 0.0]]);
        let e = set(vec![]);
        assert!(matches!(
            sliced_wasserstein(&a, &b, 4, 2, 0),
            Err(Error::SizeMismatch(2, 1))
        ));
        assert!(sliced_wasserstein(&a, &a, 0, 2, 0).is_err());
        assert!(sliced_wasserstein(&a, &a, 4, 3, 0).is_err());
        assert!(energy_distance(&e, &b).is_err());
        assert!(energy_distance(&set(vec![[f64::NAN, 0.0]]), &b).is_err());
    }

    #[test]
    fn blending_toward_target_lowers_energy_distance() {
        let src = gaussian(300, [0.0, 0.0], 5);
        let tgt = gaussian(300, [4.0, 2.0], 6);
        let mut last = f64::INFINITY;
        for w in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let blend = set(src
                .points
                .iter()
                .zip(&tgt.points)
                .map(|(a, b)| [(1.0 - w) * a[0] + w * b[0], (1.0 - w) * a[1] + w * b[1]])
                .collect());
            let s = energy_distance(&blend, &tgt).unwrap();
            assert!(s < last, "w={w}: {s} !< {last}");
            last = s;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn quality_proxy_label_order_invariance_and_determinism() {
        let mut rng = SeededRng::seed_from_u64(3);
        let f = VelocityField::init(3, &[8], Activation::Tanh, &mut rng).unwrap();
        let g = VelocityField::init(3, &[8], Activation::Tanh, &mut rng).unwrap();
        let s = Schedule::uniform(4).unwrap();
        let a = quality_proxy(&f, &s, &g, &[0, 1, 2], 64, &mut SeededRng::seed_from_u64(9)).unwrap();
        let b = quality_proxy(&f, &s, &g, &[2, 0, 1], 64, &mut SeededRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_label.len(), 3);
    }

    #[test]
    fn destroyed_field_has_poor_quality() {
        let mut rng = SeededRng::seed_from_u64(4);
        let g = VelocityField::init(2, &[8], Activation::Tanh, &mut rng).unwrap();
        let spec = g.spec().clone();
        let zero = VelocityField::new(spec.clone(), spec.zero_params(), 2).unwrap();
        // A reference whose samples sit far from noise.
        let mut p = spec.zero_params();
        let n = p.len();
        p[n - 2] = -5.0;
        let shifted = VelocityField::new(spec, p, 2).unwrap();
        let s = Schedule::uniform(4).unwrap();
        let q_self = quality_proxy(&shifted, &s, &shifted, &[0, 1], 128, &mut SeededRng::seed_from_u64(1)).unwrap();
        let q_zero = quality_proxy(&zero, &s, &shifted, &[0, 1], 128, &mut SeededRng::seed_from_u64(1)).unwrap();
        assert!(q_zero.aggregate > 20.0 * q_self.aggregate.max(1e-3));
    }

    #[test]
    fn concept_score_of_target_against_itself_is_zero() {
        let t = gaussian(50, [2.0, 2.0], 8);
        assert_eq!(energy_distance(&t, &t).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn distances_are_symmetric_and_nonnegative(seed in 0u64..500, n in 1usize..40) {
            let a = gaussian(n, [0.0, 0.0], seed);
            let b = gaussian(n, [1.0, 0.5], seed + 1000);
            let ab = sliced_wasserstein(&a, &b, 16, 2, seed).unwrap();
            let ba = sliced_wasserstein(&b, &a, 16, 2, seed).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            let e1 = energy_distance(&a, &b).unwrap();
            let e2 = energy_distance(&b, &a).unwrap();
            prop_assert!(e1 >= 0.0);
            prop_assert!((e1 - e2).abs() <= 1e-12 * e1.max(1.0));
        }
    }
}
