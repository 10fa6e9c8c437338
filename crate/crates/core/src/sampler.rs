//! Inference schedules, the explicit Euler solver and on-policy roll-outs.
//!
//! A [`Trajectory`] stores plain values. Nothing recorded here can carry
//! gradient information into a later step; trainers re-evaluate the network at
//! each stored state when they need derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::flow::{Condition, Point, VelocityField};
use crate::par;

/// Step count of the dense reference solver.
pub const DENSE_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Uniform,
}

/// Strictly decreasing time grid `[t_K = 1, ..., t_0 = 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    timesteps: Vec<f64>,
}

impl Schedule {
    pub fn new(timesteps: Vec<f64>) -> Result<Self> {
        if timesteps.len() < 2 {
            return Err(Error::InvalidSchedule("need at least two timesteps".into()));
        }
        if timesteps[0] != 1.0 || *timesteps.last().unwrap() != 0.0 {
            return Err(Error::InvalidSchedule(format!(
                "endpoints must be exactly 1 and 0, got {:?}",
                (timesteps[0], timesteps.last().unwrap())
            )));
        }
        if timesteps.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidSchedule("timesteps must strictly decrease".into()));
        }
        Ok(Self { timesteps })
    }

    pub fn uniform(steps: usize) -> Result<Self> {
        make_schedule(steps, ScheduleKind::Uniform)
    }

    /// Number of solver steps `K`.
    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    /// `(t_k, t_{k-1})` pairs in integration order.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.timesteps.windows(2).map(|w| (w[0], w[1]))
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("step count must be at least 1".into()));
    }
    match kind {
        ScheduleKind::Uniform => Schedule::new((0..=steps).rev().map(|k| k as f64 / steps as f64).collect()),
    }
}

/// One explicit Euler step from `t_from` down to `t_to`.
pub fn euler_step(x: Point, t_from: f64, t_to: f64, v: Point) -> Result<Point> {
    if !(t_to < t_from) {
        return Err(Error::InvalidSchedule(format!(
            "euler step must move backward in time, got {t_from} -> {t_to}"
        )));
    }
    let dt = t_to - t_from;
    Ok([x[0] + dt * v[0], x[1] + dt * v[1]])
}

/// States visited by a few-step sampler and the velocities that moved them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `x_{t_K}, ..., x_{t_0}`.
    pub states: Vec<Point>,
    /// Velocity used to leave `states[k]`, one per step.
    pub step_velocities: Vec<Point>,
    /// Always true: states are value snapshots.
    pub detached: bool,
}

impl Trajectory {
    pub fn final_state(&self) -> Point {
        *self.states.last().unwrap()
    }
}

pub fn rollout(field: &VelocityField, c: &Condition, schedule: &Schedule, noise: Point) -> Result<Trajectory> {
    ensure_finite("roll-out noise", &noise)?;
    let mut states = Vec::with_capacity(schedule.steps() + 1);
    let mut step_velocities = Vec::with_capacity(schedule.steps());
    let mut x = noise;
    states.push(x);
    for (t, t_next) in schedule.segments() {
        let v = field.velocity(x, t, c)?;
        x = euler_step(x, t, t_next, v)?;
        ensure_finite("roll-out state", &x)?;
        step_velocities.push(v);
        states.push(x);
    }
    Ok(Trajectory {
        states,
        step_velocities,
        detached: true,
    })
}

/// Final state of a few-step roll-out, without recording the path.
pub fn sample(field: &VelocityField, c: &Condition, schedule: &Schedule, noise: Point) -> Result<Point> {
    ensure_finite("sample noise", &noise)?;
    let mut x = noise;
    for (t, t_next) in schedule.segments() {
        let v = field.velocity(x, t, c)?;
        x = euler_step(x, t, t_next, v)?;
    }
    ensure_finite("sample", &x)?;
    Ok(x)
}

/// Many-step uniform Euler solve from `t = 1` to `t = 0`.
pub fn solve_dense(field: &VelocityField, c: &Condition, steps: usize, noise: Point) -> Result<Point> {
    sample(field, c, &Schedule::uniform(steps)?, noise)
}

/// Integrates from `t_from` to `t_to` with `steps` uniform Euler steps.
pub fn solve_between(
    field: &VelocityField,
    c: &Condition,
    x: Point,
    t_from: f64,
    t_to: f64,
    steps: usize,
) -> Result<Point> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("step count must be at least 1".into()));
    }
    let mut x = x;
    let span = t_to - t_from;
    let mut t = t_from;
    for j in 1..=steps {
        let t_next = if j == steps {
            t_to
        } else {
            t_from + span * j as f64 / steps as f64
        };
        let v = field.velocity(x, t, c)?;
        x = euler_step(x, t, t_next, v)?;
        t = t_next;
    }
    ensure_finite("dense segment", &x)?;
    Ok(x)
}

/// Dense solve that reports the state at every point of a coarse schedule.
///
/// Each coarse segment is integrated with a share of `dense_steps`
/// proportional to its length (at least one step).
pub fn dense_states_on_schedule(
    field: &VelocityField,
    c: &Condition,
    schedule: &Schedule,
    noise: Point,
    dense_steps: usize,
) -> Result<Vec<Point>> {
    ensure_finite("dense noise", &noise)?;
    let mut states = Vec::with_capacity(schedule.steps() + 1);
    let mut x = noise;
    states.push(x);
    for (t, t_next) in schedule.segments() {
        let n = ((dense_steps as f64 * (t - t_next)).round() as usize).max(1);
        x = solve_between(field, c, x, t, t_next, n)?;
        states.push(x);
    }
    Ok(states)
}

/// Few-step samples for a batch of `(condition, noise)` jobs.
pub fn sample_batch(field: &VelocityField, jobs: &[(Condition, Point)], schedule: &Schedule) -> Result<Vec<Point>> {
    par::map_slice(jobs, |(c, z)| sample(field, c, schedule, *z))
        .into_iter()
        .collect()
}

/// Dense solves for a batch of `(condition, noise)` jobs.
pub fn solve_dense_batch(field: &VelocityField, jobs: &[(Condition, Point)], steps: usize) -> Result<Vec<Point>> {
    let schedule = Schedule::uniform(steps)?;
    sample_batch(field, jobs, &schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{interpolate, sample_normal, target_velocity};
    use crate::net::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_field() -> VelocityField {
        let spec = VelocityField::net_spec(3, &[8], Activation::Silu).unwrap();
        let p = spec.zero_params();
        VelocityField::new(spec, p, 3).unwrap()
    }

    fn random_field(seed: u64) -> VelocityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VelocityField::init(3, &[16, 16], Activation::Tanh, &mut rng).unwrap()
    }

    #[test]
    fn uniform_schedules() {
        assert_eq!(Schedule::uniform(1).unwrap().timesteps(), &[1.0, 0.0]);
        assert_eq!(Schedule::uniform(4).unwrap().timesteps(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(
            Schedule::uniform(8).unwrap().timesteps(),
            &[1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25, 0.125, 0.0]
        );
        assert!(Schedule::uniform(0).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(Schedule::new(vec![0.9, 0.0]).is_err());
        assert!(Schedule::new(vec![1.0, 0.1]).is_err());
        assert!(Schedule::new(vec![1.0, 0.3, 0.0]).is_ok());
    }

    #[test]
    fn euler_arithmetic() {
        assert_eq!(euler_step([0.3, 0.4], 1.0, 0.5, [0.0, 0.0]).unwrap(), [0.3, 0.4]);
        assert_eq!(euler_step([0.0, 0.0], 1.0, 0.5, [2.0, -2.0]).unwrap(), [-1.0, 1.0]);
        assert!(euler_step([0.0, 0.0], 0.5, 0.5, [1.0, 1.0]).is_err());
        assert!(euler_step([0.0, 0.0], 0.2, 0.5, [1.0, 1.0]).is_err());
    }

    #[test]
    fn euler_is_exact_on_the_linear_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x0 = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let eps = sample_normal(&mut rng);
            let u = target_velocity(x0, eps);
            for k in [1, 2, 8] {
                let s = Schedule::uniform(k).unwrap();
                let mut x = eps;
                for (t, tn) in s.segments() {
                    // the interpolant passes through x at every grid time
                    let on_path = interpolate(x0, eps, t);
                    assert!((on_path[0] - x[0]).abs() < 1e-12);
                    x = euler_step(x, t, tn, u).unwrap();
                }
                assert!((x[0] - x0[0]).abs() < 1e-12 && (x[1] - x0[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_field_rollout_stays_at_noise() {
        let f = zero_field();
        let c = f.encoder().encode_student(1).unwrap();
        let tr = rollout(&f, &c, &Schedule::uniform(8).unwrap(), [0.7, -1.2]).unwrap();
        assert_eq!(tr.states.len(), 9);
        assert!(tr.states.iter().all(|s| *s == [0.7, -1.2]));
        assert!(tr.step_velocities.iter().all(|v| *v == [0.0, 0.0]));
        assert!(tr.detached);
        assert_eq!(solve_dense(&f, &c, 200, [0.7, -1.2]).unwrap(), [0.7, -1.2]);
    }

    #[test]
    fn rollout_records_its_own_updates() {
        let f = random_field(4);
        let c = f.encoder().encode_student(2).unwrap();
        let s = Schedule::uniform(4).unwrap();
        let tr = rollout(&f, &c, &s, [0.1, 0.9]).unwrap();
        for (k, (t, tn)) in s.segments().enumerate() {
            let next = euler_step(tr.states[k], t, tn, tr.step_velocities[k]).unwrap();
            assert_eq!(next, tr.states[k + 1]);
            assert_eq!(f.velocity(tr.states[k], t, &c).unwrap(), tr.step_velocities[k]);
        }
        assert_eq!(tr, rollout(&f, &c, &s, [0.1, 0.9]).unwrap());
    }

    #[test]
    fn step_count_changes_result_on_nonlinear_field() {
        let f = random_field(9);
        let c = f.encoder().encode_student(0).unwrap();
        let a = sample(&f, &c, &Schedule::uniform(1).unwrap(), [0.5, 0.5]).unwrap();
        let b = sample(&f, &c, &Schedule::uniform(2).unwrap(), [0.5, 0.5]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rollout_with_200_steps_is_the_dense_solve() {
        let f = random_field(10);
        let c = f.encoder().encode_teacher(1, [1.0, 2.0]).unwrap();
        let tr = rollout(&f, &c, &Schedule::uniform(200).unwrap(), [-0.3, 0.2]).unwrap();
        let d = solve_dense(&f, &c, DENSE_STEPS, [-0.3, 0.2]).unwrap();
        assert!((tr.final_state()[0] - d[0]).abs() <= 1e-12);
        assert!((tr.final_state()[1] - d[1]).abs() <= 1e-12);
    }

    #[test]
    fn dense_states_agree_with_direct_solves() {
        let f = random_field(12);
        let c = f.encoder().encode_student(2).unwrap();
        let s = Schedule::uniform(8).unwrap();
        let states = dense_states_on_schedule(&f, &c, &s, [0.4, -0.4], 200).unwrap();
        assert_eq!(states.len(), 9);
        let end = solve_dense(&f, &c, 200, [0.4, -0.4]).unwrap();
        let last = states[8];
        assert!((end[0] - last[0]).abs() < 1e-9 && (end[1] - last[1]).abs() < 1e-9);
    }

    #[test]
    fn divergent_field_is_reported() {
        let spec = VelocityField::net_spec(1, &[2], Activation::Tanh).unwrap();
        let mut p = spec.zero_params();
        let n = p.len();
        p[n - 2] = -1e308;
        let f = VelocityField::new(spec, p, 1).unwrap();
        let c = f.encoder().encode_student(0).unwrap();
        let err = rollout(&f, &c, &Schedule::uniform(4).unwrap(), [1e308, 0.0]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert!(rollout(&f, &c, &Schedule::uniform(4).unwrap(), [f64::NAN, 0.0]).is_err());
    }
}
