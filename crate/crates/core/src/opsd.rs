//! On-policy self-distillation for few-step flow models.
//!
//! One network plays both roles. For a training pair `(x0, y)`:
//!
//! 1. the student condition `c_s` encodes the label only and the teacher
//!    condition `c_t` additionally carries the target `x0`;
//! 2. the student rolls out its own few-step trajectory under `c_s` from fresh
//!    Gaussian noise, using the deployment solver and schedule;
//! 3. at every visited state `x_{t_k}` the student velocity
//!    `u_s = v_theta(x_{t_k}, t_k, c_s)` and the teacher velocity
//!    `u_t = v_teacher(x_{t_k}, t_k, c_t)` are compared;
//! 4. the loss `(1/K) sum_k ||u_s - u_t||^2` (squared Euclidean norm) is
//!    averaged over the batch and minimized with respect to the student only.
//!
//! The teacher output is a constant, and so is every trajectory state: states
//! come from [`sampler::rollout`], which records values only, so the gradient
//! never includes terms flowing through earlier steps. After each optimizer
//! step the teacher follows the student by an exponential moving average.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample_normal, Condition, Point, TrainingPair, VelocityField};
use crate::net::GradVector;
use crate::par;
use crate::rng::SeededRng;
use crate::sampler::{self, Schedule};
use crate::train::{sample_batch, Optimizer, TrainConfig, TrainLog, TrainObserver};

/// Default EMA momentum of the teacher.
pub const DEFAULT_MOMENTUM: f64 = 0.9999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// `teacher <- m * teacher + (1 - m) * student` after each step.
    Ema,
    /// Teacher stays at its initial parameters.
    FrozenBase,
    /// Teacher copies the student after each step.
    StudentCopy,
}

impl TeacherMode {
    pub fn name(self) -> &'static str {
        match self {
            TeacherMode::Ema => "ema",
            TeacherMode::FrozenBase => "frozen_base",
            TeacherMode::StudentCopy => "student_copy",
        }
    }
}

impl std::str::FromStr for TeacherMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ema" => Ok(TeacherMode::Ema),
            "frozen_base" | "frozen-base" => Ok(TeacherMode::FrozenBase),
            "student_copy" | "student-copy" => Ok(TeacherMode::StudentCopy),
            other => Err(Error::Config(format!("unknown teacher mode {other:?}"))),
        }
    }
}

/// Which parameters and which condition produce the teacher velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInput {
    /// Teacher parameters with the target-aware condition.
    #[default]
    TeacherParamsTeacherCond,
    /// Teacher parameters with the label-only condition.
    TeacherParamsStudentCond,
    /// Current student parameters with the target-aware condition.
    StudentParamsTeacherCond,
}

impl TeacherInput {
    pub fn name(self) -> &'static str {
        match self {
            TeacherInput::TeacherParamsTeacherCond => "teacher_params_teacher_cond",
            TeacherInput::TeacherParamsStudentCond => "teacher_params_student_cond",
            TeacherInput::StudentParamsTeacherCond => "student_params_teacher_cond",
        }
    }
}

impl std::str::FromStr for TeacherInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "teacher_params_teacher_cond" => Ok(TeacherInput::TeacherParamsTeacherCond),
            "teacher_params_student_cond" => Ok(TeacherInput::TeacherParamsStudentCond),
            "student_params_teacher_cond" => Ok(TeacherInput::StudentParamsTeacherCond),
            other => Err(Error::Config(format!("unknown teacher input {other:?}"))),
        }
    }
}

/// Student and teacher parameters sharing one network spec.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaPair {
    pub student: VelocityField,
    pub teacher: VelocityField,
    momentum: f64,
    mode: TeacherMode,
}

impl EmaPair {
    /// Student and teacher both start from `base`.
    pub fn new(base: &VelocityField, mode: TeacherMode, momentum: f64) -> Result<Self> {
        Self::from_parts(base.clone(), base.clone(), mode, momentum)
    }

    pub fn from_parts(
        student: VelocityField,
        teacher: VelocityField,
        mode: TeacherMode,
        momentum: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} not in [0, 1]")));
        }
        if student.spec() != teacher.spec() || student.n_classes() != teacher.n_classes() {
            return Err(Error::InvalidArgument("student and teacher specs differ".into()));
        }
        Ok(Self {
            student,
            teacher,
            momentum,
            mode,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn mode(&self) -> TeacherMode {
        self.mode
    }

    /// Teacher update after an optimizer step, according to the mode.
    pub fn ema_update(&mut self) {
        match self.mode {
            TeacherMode::FrozenBase => {}
            TeacherMode::StudentCopy => {
                self.teacher.params_mut().copy_from_slice(self.student.params());
            }
            TeacherMode::Ema => {
                let m = self.momentum;
                if m == 1.0 {
                    return;
                }
                let student = self.student.params();
                for (t, s) in self.teacher.params_mut().iter_mut().zip(student.iter()) {
                    *t = m * *t + (1.0 - m) * s;
                }
            }
        }
    }
}

/// Student and teacher velocities at one visited state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepAlignment {
    pub state: Point,
    pub t: f64,
    pub u_s: Point,
    pub u_t: Point,
}

/// States at which one batch element is aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSite {
    pub pair: TrainingPair,
    /// `(x_{t_k}, t_k)` for `k = K, ..., 1`.
    pub states: Vec<(Point, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentLoss {
    pub loss: f64,
    /// Gradient with respect to the student parameters only.
    pub grad: GradVector,
    /// One entry per batch element, one record per step.
    pub alignments: Vec<Vec<StepAlignment>>,
}

fn teacher_velocity(
    pair: &EmaPair,
    input: TeacherInput,
    x: Point,
    t: f64,
    c_s: &Condition,
    c_t: &Condition,
) -> Result<Point> {
    match input {
        TeacherInput::TeacherParamsTeacherCond => pair.teacher.velocity(x, t, c_t),
        TeacherInput::TeacherParamsStudentCond => pair.teacher.velocity(x, t, c_s),
        TeacherInput::StudentParamsTeacherCond => pair.student.velocity(x, t, c_t),
    }
}

/// Velocity-matching loss over caller-supplied states.
///
/// Each site contributes `(1/K) sum_k ||u_s - u_t||^2` with `K` its number of
/// states; the result is the batch mean. States and teacher outputs are
/// constants for differentiation.
pub fn alignment_loss(pair: &EmaPair, sites: &[AlignmentSite], input: TeacherInput) -> Result<AlignmentLoss> {
    if sites.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let enc = pair.student.encoder();
    let n = sites.len() as f64;
    let per_site = par::map_slice(sites, |site| -> Result<(f64, Vec<f64>, Vec<StepAlignment>)> {
        let c_s = enc.encode_student(site.pair.label)?;
        let c_t = enc.encode_teacher(site.pair.label, site.pair.target)?;
        let k = site.states.len() as f64;
        let mut grad = vec![0.0; pair.student.params().len()];
        let mut loss = 0.0;
        let mut records = Vec::with_capacity(site.states.len());
        for &(x, t) in &site.states {
            let (u_s, tape) = pair.student.velocity_tape(x, t, &c_s)?;
            let u_t = teacher_velocity(pair, input, x, t, &c_s, &c_t)?;
            let r = [u_s[0] - u_t[0], u_s[1] - u_t[1]];
            loss += (r[0] * r[0] + r[1] * r[1]) / k;
            let scale = 2.0 / (k * n);
            pair.student
                .accumulate_grad(&tape, [scale * r[0], scale * r[1]], &mut grad)?;
            records.push(StepAlignment { state: x, t, u_s, u_t });
        }
        Ok((loss, grad, records))
    });
    let mut total = 0.0;
    let mut grad = vec![0.0; pair.student.params().len()];
    let mut alignments = Vec::with_capacity(sites.len());
    for r in per_site {
        let (loss, g, records) = r?;
        total += loss;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        alignments.push(records);
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("alignment loss".into()));
    }
    Ok(AlignmentLoss {
        loss,
        grad: GradVector(grad),
        alignments,
    })
}

/// Alignment sites on the student's own few-step roll-outs from the given noises.
pub fn on_policy_sites(
    student: &VelocityField,
    batch: &[TrainingPair],
    schedule: &Schedule,
    noises: &[Point],
) -> Result<Vec<AlignmentSite>> {
    if noises.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            what: "roll-out noises",
            expected: batch.len(),
            got: noises.len(),
        });
    }
    let enc = student.encoder();
    let ts = schedule.timesteps();
    par::map_range(batch.len(), |i| {
        let c_s = enc.encode_student(batch[i].label)?;
        let traj = sampler::rollout(student, &c_s, schedule, noises[i])?;
        // x_{t_0} is never evaluated.
        let states = (0..schedule.steps()).map(|k| (traj.states[k], ts[k])).collect();
        Ok(AlignmentSite { pair: batch[i], states })
    })
    .into_iter()
    .collect()
}

/// On-policy self-distillation loss with explicit roll-out noises.
pub fn opsd_loss_with_noise(
    pair: &EmaPair,
    batch: &[TrainingPair],
    schedule: &Schedule,
    noises: &[Point],
    input: TeacherInput,
) -> Result<AlignmentLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let sites = on_policy_sites(&pair.student, batch, schedule, noises)?;
    alignment_loss(pair, &sites, input)
}

/// On-policy self-distillation loss with fresh roll-out noise per pair.
pub fn opsd_loss<R: Rng + ?Sized>(
    pair: &EmaPair,
    batch: &[TrainingPair],
    schedule: &Schedule,
    rng: &mut R,
) -> Result<AlignmentLoss> {
    let noises: Vec<Point> = batch.iter().map(|_| sample_normal(rng)).collect();
    opsd_loss_with_noise(pair, batch, schedule, &noises, TeacherInput::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpsdConfig {
    pub train: TrainConfig,
    pub teacher_input: TeacherInput,
}

impl OpsdConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            teacher_input: TeacherInput::default(),
        }
    }
}

/// Runs the full loop: mini-batch, roll-out, velocity matching, Adam step on
/// the student, teacher update. Mini-batches and roll-out noise come from two
/// streams seeded off `rng`, so other trainers seeded identically see the same
/// mini-batch sequence.
pub fn opsd_train<R: Rng + ?Sized>(
    mut pair: EmaPair,
    dataset: &[TrainingPair],
    schedule: &Schedule,
    config: &OpsdConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<(EmaPair, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    config.train.validate()?;
    let mut batch_rng = SeededRng::seed_from_u64(rng.random());
    let mut noise_rng = SeededRng::seed_from_u64(rng.random());
    let mut opt = Optimizer::new(&pair.student, config.train);
    let mut log = TrainLog::default();
    for iter in 0..config.train.iterations {
        let batch = sample_batch(dataset, config.train.batch_size, &mut batch_rng)?;
        let noises: Vec<Point> = batch.iter().map(|_| sample_normal(&mut noise_rng)).collect();
        let out = opsd_loss_with_noise(&pair, &batch, schedule, &noises, config.teacher_input)?;
        opt.step(&mut pair.student, &out.grad, iter)?;
        pair.ema_update();
        log.losses.push(out.loss);
        observer.on_step(iter + 1, out.loss, &pair.student)?;
    }
    Ok((pair, log))
}
