//! Pipeline stages: pretrain, distill, tune, evaluate, and the multi-seed
//! ablation that compares the tuning methods on shared data and noise.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Scenario};
use super::dataset::{generate_dataset, DatasetSpec, Datasets};
use crate::baselines::{
    fm_train, offpolicy_distill_train, sft_from_teacher_samples_train, sft_train, OffPolicyConfig, TeacherSampleConfig,
};
use crate::distill::{distill_few_step, DistillConfig};
use crate::error::{Error, Result};
use crate::flow::{CondMode, VelocityField};
use crate::metrics::{
    dense_samples, energy_distance, kstep_samples, label_noises, sliced_wasserstein, Provenance, SampleSet,
};
use crate::opsd::{opsd_train, EmaPair, OpsdConfig, TeacherMode};
use crate::rng::{derive_seed, stream};
use crate::sampler::Schedule;
use crate::train::{TrainLog, TrainObserver};

/// Tuning methods compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Opsd,
    Sft,
    SftTeacher,
    Offpolicy,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Opsd, Method::SftTeacher, Method::Offpolicy, Method::Sft];

    pub fn name(self) -> &'static str {
        match self {
            Method::Opsd => "opsd",
            Method::Sft => "sft",
            Method::SftTeacher => "sft-teacher",
            Method::Offpolicy => "offpolicy",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown method {s:?} (expected opsd, sft, sft-teacher or offpolicy)"
            ))
        })
    }
}

/// One line of a curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iter: usize,
    pub method: String,
    pub seed: u64,
    /// Mean training loss since the previous row; NaN on the pre-tuning row.
    pub loss: f64,
    pub concept_score: f64,
    pub quality_proxy: f64,
    pub sw2_target: f64,
    pub energy_retained: f64,
}

/// Metrics of one model at one point in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub concept_score: f64,
    pub quality_proxy: f64,
    pub sw2_target: f64,
    pub energy_retained: f64,
}

/// Fixed evaluation protocol for one run: reference and target sets are drawn
/// once, and every evaluated model is sampled from the same noise.
#[derive(Debug, Clone)]
pub struct Evaluator {
    schedule: Schedule,
    /// `(label, target samples)` for every tuned label.
    targets: Vec<SampleSet>,
    /// Dense base samples per quality label, transformed for tuned labels in
    /// the domain-shift scenario.
    references: Vec<SampleSet>,
    /// Few-step samples of the untuned model per retained label.
    untuned: Vec<SampleSet>,
    noise_seed: u64,
    n_proj: usize,
    sw_seed: u64,
}

impl Evaluator {
    pub fn new(cfg: &RunConfig, spec: &DatasetSpec, base: &VelocityField, untuned: &VelocityField) -> Result<Self> {
        let schedule = Schedule::uniform(cfg.k)?;
        let n = cfg.eval.n;
        let eval_seed = derive_seed(cfg.eval.seed, &format!("run-{}", cfg.seed));
        let mut target_rng = stream(eval_seed, "targets");
        let targets = spec
            .tuned_labels()
            .into_iter()
            .map(|l| {
                Ok(SampleSet::new(
                    spec.sample_target(l, n, &mut target_rng)?,
                    Some(l),
                    Provenance::Data,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let ref_seed = derive_seed(eval_seed, "reference");
        let mut references = Vec::new();
        for l in spec.retained_labels() {
            references.push(dense_samples(base, l, &label_noises(ref_seed, l, n))?);
        }
        if let (Scenario::DomainShift, Some(ds)) = (cfg.scenario, &spec.domain_shift) {
            for l in spec.tuned_labels() {
                let mut s = dense_samples(base, l, &label_noises(ref_seed, l, n))?;
                s.points.iter_mut().for_each(|p| *p = ds.apply(*p));
                references.push(s);
            }
        }
        references.sort_by_key(|s| s.label);
        let noise_seed = derive_seed(eval_seed, "kstep");
        let untuned = spec
            .retained_labels()
            .into_iter()
            .map(|l| kstep_samples(untuned, &schedule, l, &label_noises(noise_seed, l, n)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schedule,
            targets,
            references,
            untuned,
            noise_seed,
            n_proj: cfg.eval.n_proj,
            sw_seed: derive_seed(eval_seed, "projections"),
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn samples(&self, field: &VelocityField, label: usize, n: usize) -> Result<SampleSet> {
        kstep_samples(field, &self.schedule, label, &label_noises(self.noise_seed, label, n))
    }

    pub fn evaluate(&self, field: &VelocityField) -> Result<EvalRow> {
        let mut concept = 0.0;
        let mut sw2 = 0.0;
        for t in &self.targets {
            let s = self.samples(field, t.label.unwrap_or(0), t.len())?;
            concept += energy_distance(&s, t)?;
            sw2 += sliced_wasserstein(&s, t, self.n_proj, 2, self.sw_seed)?;
        }
        let nt = self.targets.len().max(1) as f64;
        let mut quality = 0.0;
        for r in &self.references {
            let s = self.samples(field, r.label.unwrap_or(0), r.len())?;
            quality += energy_distance(&s, r)?;
        }
        let mut retained = 0.0;
        for u in &self.untuned {
            let s = self.samples(field, u.label.unwrap_or(0), u.len())?;
            retained += energy_distance(&s, u)?;
        }
        Ok(EvalRow {
            concept_score: concept / nt,
            quality_proxy: quality / self.references.len().max(1) as f64,
            sw2_target: sw2 / nt,
            energy_retained: retained / self.untuned.len().max(1) as f64,
        })
    }
}

/// Dataset spec and generated data of a run.
pub fn datasets(cfg: &RunConfig) -> Result<(DatasetSpec, Datasets)> {
    let spec = DatasetSpec::from_config(cfg);
    let data = generate_dataset(&spec, &mut stream(cfg.seed, "data"))?;
    Ok((spec, data))
}

/// Flow-matching pretraining with context dropout.
pub fn pretrain(
    cfg: &RunConfig,
    data: &Datasets,
    observer: &mut dyn TrainObserver,
) -> Result<(VelocityField, TrainLog)> {
    let field = VelocityField::init(
        cfg.data.n_classes,
        &cfg.net.hidden,
        cfg.net.activation,
        &mut stream(cfg.seed, "init"),
    )?;
    fm_train(
        field,
        &data.pretrain,
        CondMode::Dropout(cfg.pretrain_dropout),
        &cfg.pretrain.train_config(),
        &mut stream(cfg.seed, "pretrain"),
        observer,
    )
}

/// Step distillation of the base onto the configured few-step schedule.
pub fn distill(
    cfg: &RunConfig,
    base: &VelocityField,
    observer: &mut dyn TrainObserver,
) -> Result<(VelocityField, TrainLog)> {
    let schedule = Schedule::uniform(cfg.k)?;
    let mut dc = DistillConfig::new(cfg.distill.train_config());
    dc.pool_per_label = cfg.distill_pool;
    distill_few_step(base, &schedule, &dc, &mut stream(cfg.seed, "distill"), observer)
}

struct CurveObserver<'a> {
    evaluator: &'a Evaluator,
    every: usize,
    last: usize,
    method: String,
    seed: u64,
    pending: Vec<f64>,
    rows: Vec<CurveRow>,
}

impl CurveObserver<'_> {
    fn record(&mut self, iter: usize, field: &VelocityField) -> Result<()> {
        let e = self.evaluator.evaluate(field)?;
        let loss = if self.pending.is_empty() {
            f64::NAN
        } else {
            self.pending.iter().sum::<f64>() / self.pending.len() as f64
        };
        self.pending.clear();
        self.rows.push(CurveRow {
            iter,
            method: self.method.clone(),
            seed: self.seed,
            loss,
            concept_score: e.concept_score,
            quality_proxy: e.quality_proxy,
            sw2_target: e.sw2_target,
            energy_retained: e.energy_retained,
        });
        Ok(())
    }
}

impl TrainObserver for CurveObserver<'_> {
    fn on_step(&mut self, iter: usize, loss: f64, field: &VelocityField) -> Result<()> {
        self.pending.push(loss);
        if iter.is_multiple_of(self.every) || iter == self.last {
            self.record(iter, field)?;
        }
        Ok(())
    }
}

/// Result of one tuning run.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub field: VelocityField,
    pub teacher: Option<VelocityField>,
    pub rows: Vec<CurveRow>,
    pub log: TrainLog,
}

/// Tunes `model` on the run's tuning set with one method, evaluating every
/// `eval.every` iterations (and before the first update). All methods draw
/// mini-batches from the same stream, so identically configured runs see the
/// same data order.
pub fn tune(
    cfg: &RunConfig,
    method: Method,
    label: &str,
    model: &VelocityField,
    data: &Datasets,
    evaluator: &Evaluator,
) -> Result<TuneOutcome> {
    let schedule = evaluator.schedule().clone();
    let train = cfg.tune.stage.train_config();
    let mut obs = CurveObserver {
        evaluator,
        every: cfg.eval.every,
        last: train.iterations,
        method: label.to_string(),
        seed: cfg.seed,
        pending: Vec::new(),
        rows: Vec::new(),
    };
    obs.record(0, model)?;
    let mut rng = stream(cfg.seed, "tune");
    let pair = || EmaPair::new(model, cfg.tune.teacher_mode, cfg.tune.momentum);
    let (field, teacher, log) = match method {
        Method::Sft => {
            let (f, log) = sft_train(model.clone(), &data.tune, &train, &mut rng, &mut obs)?;
            (f, None, log)
        }
        Method::SftTeacher => {
            let mut c = TeacherSampleConfig::new(train);
            c.refresh_period = cfg.tune.refresh_period;
            let (p, log) = sft_from_teacher_samples_train(pair()?, &data.tune, &schedule, &c, &mut rng, &mut obs)?;
            (p.student, Some(p.teacher), log)
        }
        Method::Offpolicy => {
            let mut c = OffPolicyConfig::new(train);
            c.teacher_input = cfg.tune.teacher_input;
            c.random_t = cfg.tune.offpolicy_random_t;
            let (p, log) = offpolicy_distill_train(pair()?, &data.tune, &schedule, &c, &mut rng, &mut obs)?;
            (p.student, Some(p.teacher), log)
        }
        Method::Opsd => {
            let mut c = OpsdConfig::new(train);
            c.teacher_input = cfg.tune.teacher_input;
            let (p, log) = opsd_train(pair()?, &data.tune, &schedule, &c, &mut rng, &mut obs)?;
            (p.student, Some(p.teacher), log)
        }
    };
    Ok(TuneOutcome {
        field,
        teacher,
        rows: obs.rows,
        log,
    })
}

/// Curve label of a teacher-mode sweep entry.
pub fn sweep_label(mode: TeacherMode) -> String {
    format!("opsd/{}", mode.name())
}

/// Everything one seed of the ablation produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub config: RunConfig,
    pub spec: DatasetSpec,
    pub data: Datasets,
    pub base: VelocityField,
    pub distilled: VelocityField,
    pub tuned: Vec<(Method, VelocityField)>,
    /// One curve per method, in [`Method::ALL`] order.
    pub curves: Vec<CurveRow>,
    /// OPSD curves for every teacher mode.
    pub sweep: Vec<CurveRow>,
}

/// Full pipeline for one seed: data, pretraining, distillation, the four
/// tuning methods and the teacher-mode sweep.
pub fn run_seed(cfg: &RunConfig) -> Result<SeedRun> {
    let (spec, data) = datasets(cfg)?;
    let (base, _) = pretrain(cfg, &data, &mut ())?;
    let (distilled, _) = distill(cfg, &base, &mut ())?;
    let evaluator = Evaluator::new(cfg, &spec, &base, &distilled)?;
    let mut curves = Vec::new();
    let mut sweep = Vec::new();
    let mut tuned = Vec::new();
    for method in Method::ALL {
        let out = tune(cfg, method, method.name(), &distilled, &data, &evaluator)?;
        if method == Method::Opsd {
            sweep.extend(out.rows.iter().cloned().map(|mut r| {
                r.method = sweep_label(cfg.tune.teacher_mode);
                r
            }));
        }
        curves.extend(out.rows);
        tuned.push((method, out.field));
    }
    for mode in [TeacherMode::Ema, TeacherMode::FrozenBase, TeacherMode::StudentCopy] {
        if mode == cfg.tune.teacher_mode {
            continue;
        }
        let mut c = cfg.clone();
        c.tune.teacher_mode = mode;
        sweep.extend(tune(&c, Method::Opsd, &sweep_label(mode), &distilled, &data, &evaluator)?.rows);
    }
    sweep.sort_by(|a, b| a.method.cmp(&b.method).then(a.iter.cmp(&b.iter)));
    Ok(SeedRun {
        config: cfg.clone(),
        spec,
        data,
        base,
        distilled,
        tuned,
        curves,
        sweep,
    })
}

/// Rejects repeated seeds: comparative statistics need distinct runs.
pub fn check_seeds(seeds: &[u64]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for s in seeds {
        if !seen.insert(s) {
            return Err(Error::Config(format!("seed {s} appears twice in ablate.seeds")));
        }
    }
    Ok(())
}

/// Per-label fidelity of a model against a reference, with the resampling
/// floor of the same statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub label: usize,
    pub distance: f64,
    pub floor: f64,
}

impl Fidelity {
    pub fn ratio(&self) -> f64 {
        self.distance / self.floor
    }
}

/// Independent resamplings averaged into both the distance and its floor.
pub const FIDELITY_REPEATS: usize = 3;

/// Sliced 2-Wasserstein distance between dense base samples and fresh data,
/// per label, averaged over independent draws. The floor is the same average
/// between two independent data draws of the same size.
pub fn pretrain_fidelity(cfg: &RunConfig, spec: &DatasetSpec, base: &VelocityField) -> Result<Vec<Fidelity>> {
    let n = cfg.eval.n;
    let seed = derive_seed(cfg.eval.seed, &format!("pretrain-fidelity-{}", cfg.seed));
    let mut rng = stream(seed, "data");
    (0..spec.n_classes)
        .map(|l| {
            let mut distance = 0.0;
            let mut floor = 0.0;
            for j in 0..FIDELITY_REPEATS {
                let noise = label_noises(derive_seed(seed, &format!("model-{j}")), l, n);
                let model = dense_samples(base, l, &noise)?;
                let data = SampleSet::new(spec.sample_mode(l, n, &mut rng)?, Some(l), Provenance::Data);
                let other = SampleSet::new(spec.sample_mode(l, n, &mut rng)?, Some(l), Provenance::Data);
                distance += sliced_wasserstein(&model, &data, cfg.eval.n_proj, 2, seed)?;
                floor += sliced_wasserstein(&other, &data, cfg.eval.n_proj, 2, seed)?;
            }
            Ok(Fidelity {
                label: l,
                distance: distance / FIDELITY_REPEATS as f64,
                floor: floor / FIDELITY_REPEATS as f64,
            })
        })
        .collect()
}

/// Energy distance between few-step samples of `distilled` and dense samples
/// of `base`, per label, averaged over independent draws. The floor is the
/// same average between two independent dense sample sets of the base.
pub fn distill_fidelity(cfg: &RunConfig, base: &VelocityField, distilled: &VelocityField) -> Result<Vec<Fidelity>> {
    let n = cfg.eval.n;
    let schedule = Schedule::uniform(cfg.k)?;
    let seed = derive_seed(cfg.eval.seed, &format!("distill-fidelity-{}", cfg.seed));
    let noise = |name: String, l: usize| label_noises(derive_seed(seed, &name), l, n);
    (0..base.n_classes())
        .map(|l| {
            let mut distance = 0.0;
            let mut floor = 0.0;
            for j in 0..FIDELITY_REPEATS {
                let reference = dense_samples(base, l, &noise(format!("reference-{j}"), l))?;
                let other = dense_samples(base, l, &noise(format!("resample-{j}"), l))?;
                let model = kstep_samples(distilled, &schedule, l, &noise(format!("model-{j}"), l))?;
                distance += energy_distance(&model, &reference)?;
                floor += energy_distance(&other, &reference)?;
            }
            Ok(Fidelity {
                label: l,
                distance: distance / FIDELITY_REPEATS as f64,
                floor: floor / FIDELITY_REPEATS as f64,
            })
        })
        .collect()
}

pub const CSV_COLUMNS: [&str; 8] = [
    "iter",
    "method",
    "seed",
    "loss",
    "concept_score",
    "quality_proxy",
    "sw2_target",
    "energy_retained",
];

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Config(format!(
            "{}: unexpected CSV header {header:?}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}
