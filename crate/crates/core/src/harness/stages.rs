//! Stage execution with run manifests.
//!
//! Every stage writes its outputs into a run directory together with a JSON
//! manifest holding the canonical configuration, its hash, the seed, the
//! SHA-256 of each input checkpoint and of each output file. [`verify`]
//! re-executes a manifest into another directory and compares output hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::experiment::{
    check_seeds, csv_err, datasets, distill, distill_fidelity, pretrain, pretrain_fidelity, run_seed, tune,
    write_curves, CurveRow, EvalRow, Evaluator, Method,
};
use crate::checkpoint::{self, sha256_hex};
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::train::TrainLog;

/// Environment variable that overrides `output.dir`.
pub const RUNDIR_ENV: &str = "FLOPSD_RUNDIR";

pub const BASE_CKPT: &str = "base.ckpt";
pub const DISTILLED_CKPT: &str = "distilled.ckpt";

/// Output root of a run: `$FLOPSD_RUNDIR` if set, else `output.dir`.
pub fn output_root(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(RUNDIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output_dir.clone(),
    }
}

pub fn tuned_ckpt(method: Method) -> String {
    format!("tuned_{method}.ckpt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum StageRequest {
    Pretrain,
    Distill {
        base: PathBuf,
    },
    Tune {
        model: PathBuf,
        base: PathBuf,
        method: Method,
    },
    Eval {
        model: PathBuf,
        base: PathBuf,
        untuned: PathBuf,
    },
    Ablate,
}

impl StageRequest {
    pub fn name(&self) -> &'static str {
        match self {
            StageRequest::Pretrain => "pretrain",
            StageRequest::Distill { .. } => "distill",
            StageRequest::Tune { .. } => "tune",
            StageRequest::Eval { .. } => "eval",
            StageRequest::Ablate => "ablate",
        }
    }

    pub fn manifest_name(&self) -> String {
        match self {
            StageRequest::Tune { method, .. } => format!("manifest_tune_{method}.json"),
            other => format!("manifest_{}.json", other.name()),
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            StageRequest::Pretrain | StageRequest::Ablate => vec![],
            StageRequest::Distill { base } => vec![base],
            StageRequest::Tune { model, base, .. } => vec![model, base],
            StageRequest::Eval { model, base, untuned } => vec![model, base, untuned],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub request: StageRequest,
    pub config_hash: String,
    pub seed: u64,
    pub config: String,
    /// Input checkpoint path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory -> SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn config(&self) -> Result<RunConfig> {
        let cfg = RunConfig::parse(&self.config)?;
        if cfg.hash() != self.config_hash {
            return Err(Error::Config("manifest config does not match its hash".into()));
        }
        Ok(cfg)
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn load_field(path: &Path) -> Result<VelocityField> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    let (spec, params) = checkpoint::load(path)?;
    VelocityField::from_spec(spec, params)
}

fn save_field(dir: &Path, name: &str, field: &VelocityField, outputs: &mut Vec<PathBuf>) -> Result<()> {
    checkpoint::save(&dir.join(name), field.spec(), field.params())?;
    outputs.push(PathBuf::from(name));
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, outputs: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    outputs.push(PathBuf::from(name));
    Ok(())
}

fn write_loss(dir: &Path, name: &str, log: &TrainLog, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(name)).map_err(csv_err)?;
    w.write_record(["iter", "loss"]).map_err(csv_err)?;
    for (i, l) in log.losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    outputs.push(PathBuf::from(name));
    Ok(())
}

fn write_rows(dir: &Path, name: &str, rows: &[CurveRow], outputs: &mut Vec<PathBuf>) -> Result<()> {
    write_curves(&dir.join(name), rows)?;
    outputs.push(PathBuf::from(name));
    Ok(())
}

/// Runs one stage into `dir` and writes its manifest there.
pub fn run_stage(cfg: &RunConfig, request: &StageRequest, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut inputs = BTreeMap::new();
    for p in request.inputs() {
        if !p.exists() {
            return Err(Error::Checkpoint(format!("missing checkpoint {}", p.display())));
        }
        inputs.insert(p.display().to_string(), file_hash(p)?);
    }
    fs::create_dir_all(dir)?;
    let mut outputs = Vec::new();
    match request {
        StageRequest::Pretrain => {
            let (spec, data) = datasets(cfg)?;
            let (base, log) = pretrain(cfg, &data, &mut ())?;
            save_field(dir, BASE_CKPT, &base, &mut outputs)?;
            write_loss(dir, "pretrain_loss.csv", &log, &mut outputs)?;
            write_json(
                dir,
                "pretrain_fidelity.json",
                &pretrain_fidelity(cfg, &spec, &base)?,
                &mut outputs,
            )?;
        }
        StageRequest::Distill { base } => {
            let base = load_field(base)?;
            let (d, log) = distill(cfg, &base, &mut ())?;
            save_field(dir, DISTILLED_CKPT, &d, &mut outputs)?;
            write_loss(dir, "distill_loss.csv", &log, &mut outputs)?;
            write_json(
                dir,
                "distill_fidelity.json",
                &distill_fidelity(cfg, &base, &d)?,
                &mut outputs,
            )?;
        }
        StageRequest::Tune { model, base, method } => {
            let model = load_field(model)?;
            let base = load_field(base)?;
            let (spec, data) = datasets(cfg)?;
            let ev = Evaluator::new(cfg, &spec, &base, &model)?;
            let out = tune(cfg, *method, method.name(), &model, &data, &ev)?;
            save_field(dir, &tuned_ckpt(*method), &out.field, &mut outputs)?;
            write_rows(dir, &format!("curve_{method}.csv"), &out.rows, &mut outputs)?;
        }
        StageRequest::Eval { model, base, untuned } => {
            let field = load_field(model)?;
            let base = load_field(base)?;
            let untuned = load_field(untuned)?;
            let (spec, _) = datasets(cfg)?;
            let e: EvalRow = Evaluator::new(cfg, &spec, &base, &untuned)?.evaluate(&field)?;
            let row = CurveRow {
                iter: 0,
                method: "eval".into(),
                seed: cfg.seed,
                loss: f64::NAN,
                concept_score: e.concept_score,
                quality_proxy: e.quality_proxy,
                sw2_target: e.sw2_target,
                energy_retained: e.energy_retained,
            };
            write_rows(dir, "eval.csv", &[row], &mut outputs)?;
            write_json(dir, "eval.json", &e, &mut outputs)?;
        }
        StageRequest::Ablate => {
            check_seeds(&cfg.ablate_seeds)?;
            let mut curves = Vec::new();
            let mut sweep = Vec::new();
            for &seed in &cfg.ablate_seeds {
                let run = run_seed(&cfg.with_seed(seed))?;
                let sub = format!("seed_{seed}");
                fs::create_dir_all(dir.join(&sub))?;
                save_field(dir, &format!("{sub}/{BASE_CKPT}"), &run.base, &mut outputs)?;
                save_field(dir, &format!("{sub}/{DISTILLED_CKPT}"), &run.distilled, &mut outputs)?;
                for (m, f) in &run.tuned {
                    save_field(dir, &format!("{sub}/{}", tuned_ckpt(*m)), f, &mut outputs)?;
                }
                curves.extend(run.curves);
                sweep.extend(run.sweep);
            }
            write_rows(dir, "curves.csv", &curves, &mut outputs)?;
            write_rows(dir, "teacher_modes.csv", &sweep, &mut outputs)?;
        }
    }
    let outputs = outputs
        .into_iter()
        .map(|p| Ok((p.display().to_string(), file_hash(&dir.join(&p))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let manifest = Manifest {
        request: request.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.to_text(),
        inputs,
        outputs,
    };
    fs::write(
        dir.join(request.manifest_name()),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Outcome of re-running a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// Outputs whose bytes differ from the recorded hash.
    pub mismatched: Vec<String>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-executes the stage described by `manifest` into `dir` and compares
/// every output hash. Inputs must still hash to their recorded values.
pub fn verify(manifest: &Manifest, dir: &Path) -> Result<Verification> {
    let cfg = manifest.config()?;
    for (path, hash) in &manifest.inputs {
        let now = file_hash(Path::new(path))?;
        if &now != hash {
            return Err(Error::Checkpoint(format!(
                "input {path} changed since the manifest was written"
            )));
        }
    }
    let rerun = run_stage(&cfg, &manifest.request, dir)?;
    let mismatched = manifest
        .outputs
        .iter()
        .filter(|(name, hash)| rerun.outputs.get(*name) != Some(hash))
        .map(|(name, _)| name.clone())
        .collect();
    Ok(Verification { mismatched })
}
