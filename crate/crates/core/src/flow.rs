//! Flow-matching path convention, conditions and the conditional velocity field.
//!
//! Time runs from data at `t = 0` to noise at `t = 1`. The interpolant is
//! `x_t = (1 - t) x0 + t eps`, whose time derivative is the constant
//! `eps - x0`. Sampling integrates `dx/dt = v(x, t, c)` from `t = 1` to `t = 0`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::net::{self, Activation, GradVector, NetSpec, ParamVector, Tape};
use crate::par;

/// A point in the 2-D sample space.
pub type Point = [f64; 2];

pub const SAMPLE_DIM: usize = 2;

/// Frequencies of the sinusoidal time features.
pub const TIME_FREQUENCIES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
pub const TIME_EMBED_DIM: usize = 2 * TIME_FREQUENCIES.len();

/// `(sin(pi k t), cos(pi k t))` for each frequency `k`. With `k = 1` the cosine
/// is strictly monotone on `[0, 1]`, so the embedding separates the two ends of
/// the path.
pub fn time_embed(t: f64) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    for (i, k) in TIME_FREQUENCIES.iter().enumerate() {
        let a = std::f64::consts::PI * k * t;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

pub fn interpolate(x0: Point, eps: Point, t: f64) -> Point {
    [(1.0 - t) * x0[0] + t * eps[0], (1.0 - t) * x0[1] + t * eps[1]]
}

pub fn target_velocity(x0: Point, eps: Point) -> Point {
    [eps[0] - x0[0], eps[1] - x0[1]]
}

pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Point {
    [StandardNormal.sample(rng), StandardNormal.sample(rng)]
}

/// The conditioning input: one-hot label plus an optional target-point slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub label_embed: Vec<f64>,
    pub context_slot: Point,
    pub context_flag: f64,
}

impl Condition {
    pub fn dim(&self) -> usize {
        self.label_embed.len() + SAMPLE_DIM + 1
    }

    pub fn has_context(&self) -> bool {
        self.context_flag != 0.0
    }

    pub fn write_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.label_embed);
        out.extend_from_slice(&self.context_slot);
        out.push(self.context_flag);
    }

    /// Copy with the context slot emptied.
    pub fn without_context(&self) -> Condition {
        Condition {
            label_embed: self.label_embed.clone(),
            context_slot: [0.0; 2],
            context_flag: 0.0,
        }
    }
}

/// Builds student (label only) and teacher (label + target) conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionEncoder {
    n_classes: usize,
}

impl ConditionEncoder {
    pub fn new(n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        Ok(Self { n_classes })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn cond_dim(&self) -> usize {
        self.n_classes + SAMPLE_DIM + 1
    }

    fn one_hot(&self, label: usize) -> Result<Vec<f64>> {
        if label >= self.n_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.n_classes,
            });
        }
        let mut v = vec![0.0; self.n_classes];
        v[label] = 1.0;
        Ok(v)
    }

    pub fn encode_student(&self, label: usize) -> Result<Condition> {
        Ok(Condition {
            label_embed: self.one_hot(label)?,
            context_slot: [0.0; 2],
            context_flag: 0.0,
        })
    }

    pub fn encode_teacher(&self, label: usize, target: Point) -> Result<Condition> {
        let label_embed = self.one_hot(label)?;
        ensure_finite("teacher target", &target)?;
        Ok(Condition {
            label_embed,
            context_slot: target,
            context_flag: 1.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub target: Point,
    pub label: usize,
}

/// Conditional velocity field `v(x, t, c)` backed by a dense network whose
/// input is `concat(x, time_embed(t), c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    spec: NetSpec,
    params: ParamVector,
    encoder: ConditionEncoder,
}

impl VelocityField {
    pub fn input_dim(n_classes: usize) -> usize {
        SAMPLE_DIM + TIME_EMBED_DIM + n_classes + SAMPLE_DIM + 1
    }

    pub fn net_spec(n_classes: usize, hidden: &[usize], activation: Activation) -> Result<NetSpec> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(Self::input_dim(n_classes));
        sizes.extend_from_slice(hidden);
        sizes.push(SAMPLE_DIM);
        NetSpec::new(sizes, activation)
    }

    pub fn new(spec: NetSpec, params: ParamVector, n_classes: usize) -> Result<Self> {
        let encoder = ConditionEncoder::new(n_classes)?;
        if spec.input_dim() != Self::input_dim(n_classes) {
            return Err(Error::DimensionMismatch {
                what: "velocity field input",
                expected: Self::input_dim(n_classes),
                got: spec.input_dim(),
            });
        }
        if spec.output_dim() != SAMPLE_DIM {
            return Err(Error::DimensionMismatch {
                what: "velocity field output",
                expected: SAMPLE_DIM,
                got: spec.output_dim(),
            });
        }
        if params.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                what: "velocity field parameters",
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        ensure_finite("velocity field parameters", &params)?;
        Ok(Self { spec, params, encoder })
    }

    /// Recovers the class count from a network spec (e.g. read from a checkpoint).
    pub fn from_spec(spec: NetSpec, params: ParamVector) -> Result<Self> {
        let fixed = SAMPLE_DIM + TIME_EMBED_DIM + SAMPLE_DIM + 1;
        if spec.input_dim() <= fixed {
            return Err(Error::InvalidSpec(format!(
                "input dim {} too small for a velocity field",
                spec.input_dim()
            )));
        }
        let n_classes = spec.input_dim() - fixed;
        Self::new(spec, params, n_classes)
    }

    pub fn init<R: Rng + ?Sized>(
        n_classes: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = Self::net_spec(n_classes, hidden, activation)?;
        let params = spec.init_params(rng);
        Self::new(spec, params, n_classes)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn n_classes(&self) -> usize {
        self.encoder.n_classes()
    }

    pub fn encoder(&self) -> ConditionEncoder {
        self.encoder
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.spec.clone(), params, self.n_classes())
    }

    pub fn input_vector(&self, x: Point, t: f64, c: &Condition) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        if c.label_embed.len() != self.n_classes() {
            return Err(Error::DimensionMismatch {
                what: "condition label embedding",
                expected: self.n_classes(),
                got: c.label_embed.len(),
            });
        }
        let mut input = Vec::with_capacity(self.spec.input_dim());
        input.extend_from_slice(&x);
        input.extend_from_slice(&time_embed(t));
        c.write_into(&mut input);
        Ok(input)
    }

    pub fn velocity(&self, x: Point, t: f64, c: &Condition) -> Result<Point> {
        let input = self.input_vector(x, t, c)?;
        let out = net::forward(&self.spec, &self.params, &input)?;
        Ok([out[0], out[1]])
    }

    pub(crate) fn velocity_tape(&self, x: Point, t: f64, c: &Condition) -> Result<(Point, Tape)> {
        let input = self.input_vector(x, t, c)?;
        let (out, tape) = net::forward_tape(&self.spec, &self.params, &input)?;
        Ok(([out[0], out[1]], tape))
    }

    /// Adds `d<upstream, v>/d params` for a recorded evaluation into `grad`.
    pub(crate) fn accumulate_grad(&self, tape: &Tape, upstream: Point, grad: &mut [f64]) -> Result<()> {
        net::backward_tape(&self.spec, &self.params, tape, &upstream, grad)?;
        Ok(())
    }
}

/// Which condition the flow-matching loss feeds the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CondMode {
    Student,
    Teacher,
    /// Each element independently uses the teacher condition with probability `p`.
    Dropout(f64),
}

/// The random quantities of one flow-matching element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmDraw {
    pub t: f64,
    pub eps: Point,
    pub teacher: bool,
}

pub fn draw_fm<R: Rng + ?Sized>(n: usize, mode: CondMode, rng: &mut R) -> Result<Vec<FmDraw>> {
    if let CondMode::Dropout(p) = mode {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1]")));
        }
    }
    Ok((0..n)
        .map(|_| {
            let t = rng.random::<f64>();
            let eps = sample_normal(rng);
            let teacher = match mode {
                CondMode::Student => false,
                CondMode::Teacher => true,
                CondMode::Dropout(p) => rng.random::<f64>() < p,
            };
            FmDraw { t, eps, teacher }
        })
        .collect())
}

/// Vanilla flow-matching loss on a mini-batch with freshly drawn `(t, eps)`.
///
/// Loss is the batch mean of `||v(x_t, t, c) - (eps - x0)||^2` (squared
/// Euclidean norm, summed over coordinates).
pub fn fm_loss_and_grad<R: Rng + ?Sized>(
    field: &VelocityField,
    batch: &[TrainingPair],
    mode: CondMode,
    rng: &mut R,
) -> Result<(f64, GradVector)> {
    let draws = draw_fm(batch.len(), mode, rng)?;
    fm_loss_and_grad_with_draws(field, batch, &draws)
}

/// Same as [`fm_loss_and_grad`] with the random draws supplied by the caller.
pub fn fm_loss_and_grad_with_draws(
    field: &VelocityField,
    batch: &[TrainingPair],
    draws: &[FmDraw],
) -> Result<(f64, GradVector)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if draws.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            what: "flow-matching draws",
            expected: batch.len(),
            got: draws.len(),
        });
    }
    let enc = field.encoder();
    let (sum, grad) = par::accumulate(batch.len(), field.params().len(), |i, grad| {
        let pair = &batch[i];
        let d = &draws[i];
        let c = if d.teacher {
            enc.encode_teacher(pair.label, pair.target)?
        } else {
            enc.encode_student(pair.label)?
        };
        let x_t = interpolate(pair.target, d.eps, d.t);
        let u = target_velocity(pair.target, d.eps);
        let (v, tape) = field.velocity_tape(x_t, d.t, &c)?;
        let r = [v[0] - u[0], v[1] - u[1]];
        field.accumulate_grad(&tape, [2.0 * r[0], 2.0 * r[1]], grad)?;
        Ok::<f64, Error>(r[0] * r[0] + r[1] * r[1])
    })?;
    let n = batch.len() as f64;
    let loss = sum / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("flow-matching loss".into()));
    }
    Ok((loss, GradVector(grad.into_iter().map(|g| g / n).collect())))
}
