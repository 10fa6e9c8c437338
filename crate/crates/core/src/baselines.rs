//! Comparison trainers for continual tuning of a few-step model.
//!
//! * [`sft_train`]: flow-matching loss on the target pairs.
//! * [`sft_from_teacher_samples_train`]: flow-matching loss on samples the
//!   teacher generates under the target-aware condition.
//! * [`offpolicy_distill_train`]: the velocity-matching loss of
//!   [`crate::opsd`], evaluated on interpolant states built from the targets
//!   instead of the student's roll-outs.
//!
//! All trainers split `rng` into a mini-batch stream and a noise stream the
//! same way [`crate::opsd::opsd_train`] does, so identically seeded arms see
//! identical mini-batch sequences.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    draw_fm, fm_loss_and_grad_with_draws, interpolate, sample_normal, CondMode, Point, TrainingPair, VelocityField,
};
use crate::opsd::{alignment_loss, AlignmentSite, EmaPair, TeacherInput};
use crate::par;
use crate::rng::SeededRng;
use crate::sampler::{self, Schedule};
use crate::train::{sample_batch, Optimizer, TrainConfig, TrainLog, TrainObserver};

fn check_dataset(dataset: &[TrainingPair]) -> Result<()> {
    if dataset.is_empty() {
        Err(Error::Empty("dataset"))
    } else {
        Ok(())
    }
}

fn split_rng<R: Rng + ?Sized>(rng: &mut R) -> (SeededRng, SeededRng) {
    let batch = SeededRng::seed_from_u64(rng.random());
    let noise = SeededRng::seed_from_u64(rng.random());
    (batch, noise)
}

/// Generic flow-matching trainer; `sft_train` and pretraining both use it.
pub fn fm_train<R: Rng + ?Sized>(
    mut field: VelocityField,
    dataset: &[TrainingPair],
    mode: CondMode,
    config: &TrainConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<(VelocityField, TrainLog)> {
    check_dataset(dataset)?;
    config.validate()?;
    let (mut batch_rng, mut noise_rng) = split_rng(rng);
    let mut opt = Optimizer::new(&field, *config);
    let mut log = TrainLog::default();
    for iter in 0..config.iterations {
        let batch = sample_batch(dataset, config.batch_size, &mut batch_rng)?;
        let draws = draw_fm(batch.len(), mode, &mut noise_rng)?;
        let (loss, grad) = fm_loss_and_grad_with_draws(&field, &batch, &draws)?;
        opt.step(&mut field, &grad, iter)?;
        log.losses.push(loss);
        observer.on_step(iter + 1, loss, &field)?;
    }
    Ok((field, log))
}

/// Vanilla supervised fine-tuning with the flow-matching loss under the
/// label-only condition.
pub fn sft_train<R: Rng + ?Sized>(
    field: VelocityField,
    dataset: &[TrainingPair],
    config: &TrainConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<(VelocityField, TrainLog)> {
    fm_train(field, dataset, CondMode::Student, config, rng, observer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherSampleConfig {
    pub train: TrainConfig,
    /// Iterations a generated target stays valid before it is regenerated.
    pub refresh_period: usize,
}

impl TeacherSampleConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            refresh_period: 1,
        }
    }
}

/// Few-step teacher sample under the target-aware condition of `pair`.
pub fn teacher_sample(
    teacher: &VelocityField,
    pair: &TrainingPair,
    schedule: &Schedule,
    noise: Point,
) -> Result<Point> {
    let c_t = teacher.encoder().encode_teacher(pair.label, pair.target)?;
    sampler::sample(teacher, &c_t, schedule, noise)
}

/// SFT where each target is replaced by a teacher sample generated under the
/// target-aware condition. Generated targets are cached per dataset entry and
/// regenerated once they are `refresh_period` iterations old. The teacher is
/// updated after every step according to the pair's mode.
pub fn sft_from_teacher_samples_train<R: Rng + ?Sized>(
    mut pair: EmaPair,
    dataset: &[TrainingPair],
    schedule: &Schedule,
    config: &TeacherSampleConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<(EmaPair, TrainLog)> {
    check_dataset(dataset)?;
    config.train.validate()?;
    let refresh = config.refresh_period.max(1);
    let (mut batch_rng, mut noise_rng) = split_rng(rng);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut cache: Vec<Option<(usize, Point)>> = vec![None; dataset.len()];
    let mut opt = Optimizer::new(&pair.student, config.train);
    let mut log = TrainLog::default();
    for iter in 0..config.train.iterations {
        let picks = sample_batch(&indices, config.train.batch_size, &mut batch_rng)?;
        let mut batch = Vec::with_capacity(picks.len());
        for &i in &picks {
            let stale = match cache[i] {
                Some((born, _)) => iter - born >= refresh,
                None => true,
            };
            if stale {
                let z = sample_normal(&mut noise_rng);
                cache[i] = Some((iter, teacher_sample(&pair.teacher, &dataset[i], schedule, z)?));
            }
            let (_, target) = cache[i].unwrap();
            batch.push(TrainingPair {
                target,
                label: dataset[i].label,
            });
        }
        let draws = draw_fm(batch.len(), CondMode::Student, &mut noise_rng)?;
        let (loss, grad) = fm_loss_and_grad_with_draws(&pair.student, &batch, &draws)?;
        opt.step(&mut pair.student, &grad, iter)?;
        pair.ema_update();
        log.losses.push(loss);
        observer.on_step(iter + 1, loss, &pair.student)?;
    }
    Ok((pair, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffPolicyConfig {
    pub train: TrainConfig,
    pub teacher_input: TeacherInput,
    /// Draw `K` uniform times per pair instead of using the schedule's grid.
    pub random_t: bool,
}

impl OffPolicyConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            teacher_input: TeacherInput::default(),
            random_t: false,
        }
    }
}

/// Alignment sites on interpolant states `(1 - t_k) x0 + t_k eps` at the given
/// times (one list per pair).
pub fn off_policy_sites(batch: &[TrainingPair], times: &[Vec<f64>], noises: &[Point]) -> Result<Vec<AlignmentSite>> {
    if times.len() != batch.len() || noises.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            what: "off-policy draws",
            expected: batch.len(),
            got: noises.len().min(times.len()),
        });
    }
    Ok(batch
        .iter()
        .zip(times)
        .zip(noises)
        .map(|((p, ts), &eps)| AlignmentSite {
            pair: *p,
            states: ts.iter().map(|&t| (interpolate(p.target, eps, t), t)).collect(),
        })
        .collect())
}

/// Off-policy distillation: the student matches the teacher on states induced
/// by the targets, not on its own roll-outs.
pub fn offpolicy_distill_train<R: Rng + ?Sized>(
    mut pair: EmaPair,
    dataset: &[TrainingPair],
    schedule: &Schedule,
    config: &OffPolicyConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<(EmaPair, TrainLog)> {
    check_dataset(dataset)?;
    config.train.validate()?;
    let (mut batch_rng, mut noise_rng) = split_rng(rng);
    // t_K .. t_1; the data end t_0 = 0 is never evaluated.
    let grid: Vec<f64> = schedule.timesteps()[..schedule.steps()].to_vec();
    let mut opt = Optimizer::new(&pair.student, config.train);
    let mut log = TrainLog::default();
    for iter in 0..config.train.iterations {
        let batch = sample_batch(dataset, config.train.batch_size, &mut batch_rng)?;
        let noises: Vec<Point> = batch.iter().map(|_| sample_normal(&mut noise_rng)).collect();
        let times: Vec<Vec<f64>> = if config.random_t {
            batch
                .iter()
                .map(|_| (0..grid.len()).map(|_| noise_rng.random::<f64>()).collect())
                .collect()
        } else {
            vec![grid.clone(); batch.len()]
        };
        let sites = off_policy_sites(&batch, &times, &noises)?;
        let out = alignment_loss(&pair, &sites, config.teacher_input)?;
        opt.step(&mut pair.student, &out.grad, iter)?;
        pair.ema_update();
        log.losses.push(out.loss);
        observer.on_step(iter + 1, out.loss, &pair.student)?;
    }
    Ok((pair, log))
}

/// Teacher samples for a whole dataset (one per pair), e.g. for inspection.
pub fn teacher_samples(
    teacher: &VelocityField,
    dataset: &[TrainingPair],
    schedule: &Schedule,
    noises: &[Point],
) -> Result<Vec<Point>> {
    if noises.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            what: "teacher sample noises",
            expected: dataset.len(),
            got: noises.len(),
        });
    }
    par::map_range(dataset.len(), |i| {
        teacher_sample(teacher, &dataset[i], schedule, noises[i])
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::flow::fm_loss_and_grad;
    use crate::net::Activation;
    use crate::opsd::{on_policy_sites, TeacherMode};

    fn field(seed: u64) -> VelocityField {
        let mut rng = SeededRng::seed_from_u64(seed);
        VelocityField::init(2, &[16, 16], Activation::Silu, &mut rng).unwrap()
    }

    fn zero_field() -> VelocityField {
        let spec = VelocityField::net_spec(2, &[16, 16], Activation::Silu).unwrap();
        let p = spec.zero_params();
        VelocityField::new(spec, p, 2).unwrap()
    }

    fn data() -> Vec<TrainingPair> {
        vec![
            TrainingPair {
                target: [2.0, 1.0],
                label: 0,
            },
            TrainingPair {
                target: [2.5, 0.5],
                label: 0,
            },
            TrainingPair {
                target: [-1.0, -2.0],
                label: 1,
            },
        ]
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let f = field(1);
        let cfg = TrainConfig::new(0, 4, 1e-3);
        let (g, _) = sft_train(f.clone(), &data(), &cfg, &mut SeededRng::seed_from_u64(0), &mut ()).unwrap();
        assert_eq!(f, g);
        let pair = EmaPair::new(&f, TeacherMode::Ema, 0.9999).unwrap();
        let s = Schedule::uniform(4).unwrap();
        let (p, _) = sft_from_teacher_samples_train(
            pair.clone(),
            &data(),
            &s,
            &TeacherSampleConfig::new(cfg),
            &mut SeededRng::seed_from_u64(0),
            &mut (),
        )
        .unwrap();
        assert_eq!(p, pair);
        let (p, _) = offpolicy_distill_train(
            pair.clone(),
            &data(),
            &s,
            &OffPolicyConfig::new(cfg),
            &mut SeededRng::seed_from_u64(0),
            &mut (),
        )
        .unwrap();
        assert_eq!(p, pair);
    }

    #[test]
    fn sft_on_its_own_distribution_does_not_increase_loss() {
        let f = field(2);
        let mut rng = SeededRng::seed_from_u64(3);
        let pretrain: Vec<TrainingPair> = (0..200)
            .map(|i| {
                let z = sample_normal(&mut rng);
                let c = if i % 2 == 0 { [2.0, 0.0] } else { [-2.0, 0.0] };
                TrainingPair {
                    target: [c[0] + 0.3 * z[0], c[1] + 0.3 * z[1]],
                    label: i % 2,
                }
            })
            .collect();
        let cfg = TrainConfig::new(400, 32, 3e-3);
        let (_, log) = sft_train(f, &pretrain, &cfg, &mut SeededRng::seed_from_u64(4), &mut ()).unwrap();
        let ma = log.moving_average(100);
        assert!(ma.last().unwrap() <= &ma[99], "{} > {}", ma.last().unwrap(), ma[99]);
    }

    #[test]
    fn sft_is_deterministic_and_matches_manual_loop() {
        let f = field(5);
        let cfg = TrainConfig::new(3, 2, 1e-3);
        let (a, la) = sft_train(f.clone(), &data(), &cfg, &mut SeededRng::seed_from_u64(6), &mut ()).unwrap();
        let (b, lb) = sft_train(f.clone(), &data(), &cfg, &mut SeededRng::seed_from_u64(6), &mut ()).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        // First loss equals a standalone flow-matching evaluation on the same draws.
        let mut rng = SeededRng::seed_from_u64(6);
        let (mut brng, mut nrng) = split_rng(&mut rng);
        let batch = sample_batch(&data(), 2, &mut brng).unwrap();
        let (loss, _) = fm_loss_and_grad(&f, &batch, CondMode::Student, &mut nrng).unwrap();
        assert_eq!(loss, la.losses[0]);
    }

    #[test]
    fn zero_teacher_generates_the_noise_itself() {
        let zero = zero_field();
        let s = Schedule::uniform(4).unwrap();
        let z = [0.3, -0.8];
        assert_eq!(teacher_sample(&zero, &data()[0], &s, z).unwrap(), z);
        let pair = EmaPair::from_parts(field(7), zero, TeacherMode::FrozenBase, 1.0).unwrap();
        let cfg = TeacherSampleConfig::new(TrainConfig::new(10, 3, 1e-3));
        let (_, log) =
            sft_from_teacher_samples_train(pair, &data(), &s, &cfg, &mut SeededRng::seed_from_u64(8), &mut ()).unwrap();
        assert!(log.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn frozen_teachers_are_untouched_by_baselines() {
        let base = field(9);
        let s = Schedule::uniform(4).unwrap();
        let h = checkpoint::hash(base.spec(), base.params()).unwrap();
        let cfg = TrainConfig::new(5, 3, 1e-3);
        let pair = EmaPair::new(&base, TeacherMode::FrozenBase, 0.9999).unwrap();
        let (p, _) = sft_from_teacher_samples_train(
            pair.clone(),
            &data(),
            &s,
            &TeacherSampleConfig::new(cfg),
            &mut SeededRng::seed_from_u64(1),
            &mut (),
        )
        .unwrap();
        assert_eq!(checkpoint::hash(p.teacher.spec(), p.teacher.params()).unwrap(), h);
        let (p, _) = offpolicy_distill_train(
            pair,
            &data(),
            &s,
            &OffPolicyConfig::new(cfg),
            &mut SeededRng::seed_from_u64(1),
            &mut (),
        )
        .unwrap();
        assert_eq!(checkpoint::hash(p.teacher.spec(), p.teacher.params()).unwrap(), h);
        assert_ne!(p.student, base);
    }

    #[test]
    fn offpolicy_with_identical_branches_has_zero_loss() {
        let base = field(10);
        let pair = EmaPair::new(&base, TeacherMode::Ema, 0.9).unwrap();
        let s = Schedule::uniform(4).unwrap();
        let ts = vec![s.timesteps()[..4].to_vec(); 3];
        let sites = off_policy_sites(&data(), &ts, &[[0.1, 0.1], [0.2, 0.0], [0.0, -0.3]]).unwrap();
        let out = alignment_loss(&pair, &sites, TeacherInput::TeacherParamsStudentCond).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn offpolicy_states_differ_from_rollout_states() {
        let student = field(11);
        let s = Schedule::uniform(4).unwrap();
        let noises = [[0.4, -0.2], [1.0, 0.3], [-0.5, 0.5]];
        let on = on_policy_sites(&student, &data(), &s, &noises).unwrap();
        let ts = vec![s.timesteps()[..4].to_vec(); 3];
        let off = off_policy_sites(&data(), &ts, &noises).unwrap();
        // both start from the same noise at t = 1 ...
        for (a, b) in on.iter().zip(&off) {
            assert_eq!(a.states[0], b.states[0]);
        }
        // ... but diverge afterwards
        assert!(on.iter().zip(&off).any(|(a, b)| a.states[1..] != b.states[1..]));
    }

    #[test]
    fn perfect_teacher_reduces_to_sft_targets() {
        // A teacher whose few-step sample under c_t is exactly x0 yields the
        // original dataset as SFT targets. Constant v = -x0 and one Euler step
        // from z = 0 land on x0.
        let s = Schedule::uniform(1).unwrap();
        let spec = VelocityField::net_spec(1, &[2], Activation::Tanh).unwrap();
        let n = spec.param_count();
        let mut p = spec.zero_params();
        p[n - 2] = -2.0;
        p[n - 1] = -1.0;
        let teacher = VelocityField::new(spec, p, 1).unwrap();
        let pair = TrainingPair {
            target: [2.0, 1.0],
            label: 0,
        };
        assert_eq!(teacher_sample(&teacher, &pair, &s, [0.0, 0.0]).unwrap(), pair.target);
    }
}
