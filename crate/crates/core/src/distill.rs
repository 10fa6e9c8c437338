//! Step distillation by segment-wise chord regression.
//!
//! The many-step base field defines a deterministic ODE map. For each coarse
//! segment `[t_k, t_{k-1}]` of the target schedule we solve the base densely
//! to get the on-distribution state `x_{t_k}` and the segment endpoint `x*`,
//! then train a copy of the base so that a single Euler step from `x_{t_k}`
//! lands on `x*`. Only the student condition is used.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample_normal, Point, VelocityField};
use crate::net::GradVector;
use crate::par;
use crate::rng::SeededRng;
use crate::sampler::{dense_states_on_schedule, Schedule, DENSE_STEPS};
use crate::train::{sample_batch, Optimizer, TrainConfig, TrainLog, TrainObserver};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub train: TrainConfig,
    /// Dense trajectories precomputed per label.
    pub pool_per_label: usize,
    pub dense_steps: usize,
}

impl DistillConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            pool_per_label: 512,
            dense_steps: DENSE_STEPS,
        }
    }
}

/// One regression example: a state at `t_from` and the dense-solve state at `t_to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentTarget {
    pub label: usize,
    pub state: Point,
    pub t_from: f64,
    pub t_to: f64,
    pub endpoint: Point,
}

/// Dense-solves `per_label` noises for each label and cuts every trajectory
/// into the schedule's segments.
pub fn build_segment_pool<R: Rng + ?Sized>(
    base: &VelocityField,
    schedule: &Schedule,
    labels: &[usize],
    per_label: usize,
    dense_steps: usize,
    rng: &mut R,
) -> Result<Vec<SegmentTarget>> {
    let encoder = base.encoder();
    let mut jobs = Vec::with_capacity(labels.len() * per_label);
    for &label in labels {
        let c = encoder.encode_student(label)?;
        for _ in 0..per_label {
            jobs.push((label, c.clone(), sample_normal(rng)));
        }
    }
    let trajectories = par::map_slice(&jobs, |(_, c, z)| {
        dense_states_on_schedule(base, c, schedule, *z, dense_steps)
    });
    let ts = schedule.timesteps();
    let mut pool = Vec::with_capacity(jobs.len() * schedule.steps());
    for ((label, _, _), states) in jobs.iter().zip(trajectories) {
        let states = states?;
        for k in 0..schedule.steps() {
            pool.push(SegmentTarget {
                label: *label,
                state: states[k],
                t_from: ts[k],
                t_to: ts[k + 1],
                endpoint: states[k + 1],
            });
        }
    }
    Ok(pool)
}

/// Mean over the batch of `||x + (t_to - t_from) v(x, t_from, c_s) - x*||^2`.
pub fn segment_loss_and_grad(field: &VelocityField, batch: &[SegmentTarget]) -> Result<(f64, GradVector)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let enc = field.encoder();
    let (sum, grad) = par::accumulate(batch.len(), field.params().len(), |i, grad| {
        let s = &batch[i];
        let c = enc.encode_student(s.label)?;
        let (v, tape) = field.velocity_tape(s.state, s.t_from, &c)?;
        let dt = s.t_to - s.t_from;
        let r = [
            s.state[0] + dt * v[0] - s.endpoint[0],
            s.state[1] + dt * v[1] - s.endpoint[1],
        ];
        field.accumulate_grad(&tape, [2.0 * dt * r[0], 2.0 * dt * r[1]], grad)?;
        Ok::<f64, Error>(r[0] * r[0] + r[1] * r[1])
    })?;
    let n = batch.len() as f64;
    let loss = sum / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    Ok((loss, GradVector(grad.into_iter().map(|g| g / n).collect())))
}

/// Distills `base` into a field whose `schedule.steps()`-step Euler sampler
/// tracks the base's dense solves. `base` is never modified.
pub fn distill_few_step<R: Rng + ?Sized>(
    base: &VelocityField,
    schedule: &Schedule,
    config: &DistillConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<(VelocityField, TrainLog)> {
    config.train.validate()?;
    let labels: Vec<usize> = (0..base.n_classes()).collect();
    let mut pool_rng = SeededRng::seed_from_u64(rng.random());
    let mut batch_rng = SeededRng::seed_from_u64(rng.random());
    let pool = build_segment_pool(
        base,
        schedule,
        &labels,
        config.pool_per_label.max(1),
        config.dense_steps,
        &mut pool_rng,
    )?;
    let mut student = base.clone();
    let mut opt = Optimizer::new(&student, config.train);
    let mut log = TrainLog::default();
    for iter in 0..config.train.iterations {
        let batch = sample_batch(&pool, config.train.batch_size, &mut batch_rng)?;
        let (loss, grad) = segment_loss_and_grad(&student, &batch)?;
        opt.step(&mut student, &grad, iter)?;
        log.losses.push(loss);
        observer.on_step(iter + 1, loss, &student)?;
    }
    Ok((student, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;

    fn random_field(seed: u64) -> VelocityField {
        let mut rng = SeededRng::seed_from_u64(seed);
        VelocityField::init(2, &[12, 12], Activation::Silu, &mut rng).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let base = random_field(1);
        let cfg = DistillConfig {
            train: TrainConfig::new(1, 8, 0.0),
            pool_per_label: 4,
            dense_steps: 40,
        };
        let s = Schedule::uniform(4).unwrap();
        let (d, log) = distill_few_step(&base, &s, &cfg, &mut SeededRng::seed_from_u64(2), &mut ()).unwrap();
        assert_eq!(d, base);
        assert_eq!(log.losses.len(), 1);
    }

    #[test]
    fn segment_gradient_matches_finite_differences() {
        let base = random_field(3);
        let s = Schedule::uniform(4).unwrap();
        let pool = build_segment_pool(&base, &s, &[0, 1], 3, 40, &mut SeededRng::seed_from_u64(4)).unwrap();
        // Perturb the student so the residuals are not tiny.
        let mut student = random_field(5);
        student.params_mut()[0] += 0.1;
        let (_, grad) = segment_loss_and_grad(&student, &pool).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for j in (0..grad.len()).step_by(5) {
            let mut hi = student.clone();
            let mut lo = student.clone();
            hi.params_mut()[j] += h;
            lo.params_mut()[j] -= h;
            let fd = (segment_loss_and_grad(&hi, &pool).unwrap().0 - segment_loss_and_grad(&lo, &pool).unwrap().0)
                / (2.0 * h);
            let abs = (fd - grad[j]).abs();
            if abs > 1e-8 {
                worst = worst.max(abs / fd.abs().max(grad[j].abs()));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn pool_segments_chain_along_the_schedule() {
        let base = random_field(6);
        let s = Schedule::uniform(8).unwrap();
        let pool = build_segment_pool(&base, &s, &[1], 2, 200, &mut SeededRng::seed_from_u64(7)).unwrap();
        assert_eq!(pool.len(), 16);
        for traj in pool.chunks(8) {
            for w in traj.windows(2) {
                assert_eq!(w[0].endpoint, w[1].state);
                assert_eq!(w[0].t_to, w[1].t_from);
            }
            assert_eq!(traj[0].t_from, 1.0);
            assert_eq!(traj[7].t_to, 0.0);
        }
    }

    #[test]
    fn distillation_reduces_segment_loss_and_leaves_base_alone() {
        let base = random_field(8);
        let before = base.clone();
        let cfg = DistillConfig {
            train: TrainConfig::new(300, 32, 3e-3),
            pool_per_label: 64,
            dense_steps: 100,
        };
        let s = Schedule::uniform(2).unwrap();
        let (_, log) = distill_few_step(&base, &s, &cfg, &mut SeededRng::seed_from_u64(9), &mut ()).unwrap();
        assert_eq!(base, before);
        let ma = log.moving_average(50);
        assert!(ma.last().unwrap() < &ma[0], "{} !< {}", ma.last().unwrap(), ma[0]);
    }
}
