//! Run configuration in a flat `key = value` text format.
//!
//! ```text
//! # comment
//! seed = 7
//! net.hidden = 64,64
//! data.centers = 4,0; 0,4; -4,0; 0,-4
//! ```
//!
//! Every key has a default; unknown or repeated keys are errors. The canonical
//! text ([`RunConfig::to_text`]) lists every key in a fixed order and is what
//! [`RunConfig::hash`] digests.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::flow::Point;
use crate::net::Activation;
use crate::opsd::{TeacherInput, TeacherMode, DEFAULT_MOMENTUM};
use crate::train::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// One label moves to a new center; a handful of tuning pairs.
    Customize,
    /// All labels but one are rotated and scaled about the origin.
    DomainShift,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Customize => "customize",
            Scenario::DomainShift => "domain-shift",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "customize" => Ok(Scenario::Customize),
            "domain-shift" => Ok(Scenario::DomainShift),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_classes: usize,
    pub centers: Vec<Point>,
    pub mode_std: f64,
    pub samples_per_class: usize,
    pub shift_label: usize,
    pub shift_center: Point,
    pub n_tune_pairs: usize,
    pub rotation_deg: f64,
    pub scale: f64,
    pub holdout_label: usize,
    pub tune_samples_per_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
}

impl StageConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig::new(self.iterations, self.batch_size, self.lr).with_schedule(self.lr_schedule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub stage: StageConfig,
    pub teacher_mode: TeacherMode,
    pub momentum: f64,
    pub teacher_input: TeacherInput,
    pub refresh_period: usize,
    pub offpolicy_random_t: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub every: usize,
    pub n: usize,
    pub n_proj: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub net: NetConfig,
    pub data: DataConfig,
    pub k: usize,
    pub pretrain: StageConfig,
    pub pretrain_dropout: f64,
    pub distill: StageConfig,
    pub distill_pool: usize,
    pub tune: TuneConfig,
    pub eval: EvalConfig,
    pub ablate_seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: Scenario::Customize,
            net: NetConfig {
                hidden: vec![64, 64],
                activation: Activation::Silu,
            },
            data: DataConfig {
                n_classes: 4,
                centers: vec![[4.0, 0.0], [0.0, 4.0], [-4.0, 0.0], [0.0, -4.0]],
                mode_std: 0.5,
                samples_per_class: 2000,
                shift_label: 0,
                shift_center: [2.0, -3.0],
                n_tune_pairs: 4,
                rotation_deg: 30.0,
                scale: 1.3,
                holdout_label: 3,
                tune_samples_per_class: 200,
            },
            k: 8,
            pretrain: StageConfig {
                iterations: 4000,
                batch_size: 256,
                lr: 1e-3,
                lr_schedule: LrSchedule::Cosine,
            },
            pretrain_dropout: 0.5,
            distill: StageConfig {
                iterations: 2000,
                batch_size: 64,
                lr: 1e-3,
                lr_schedule: LrSchedule::Cosine,
            },
            distill_pool: 512,
            tune: TuneConfig {
                stage: StageConfig {
                    iterations: 1000,
                    batch_size: 32,
                    lr: 3e-4,
                    lr_schedule: LrSchedule::Constant,
                },
                teacher_mode: TeacherMode::Ema,
                momentum: DEFAULT_MOMENTUM,
                teacher_input: TeacherInput::TeacherParamsTeacherCond,
                refresh_period: 1,
                offpolicy_random_t: false,
            },
            eval: EvalConfig {
                every: 50,
                n: 1000,
                n_proj: 64,
                seed: 20_240_601,
            },
            ablate_seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_point(key: &str, value: &str) -> Result<Point> {
    match parse_list::<f64>(key, value)?.as_slice() {
        &[x, y] => Ok([x, y]),
        _ => Err(Error::Config(format!("{key}: expected two coordinates, got {value:?}"))),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

fn point(p: Point) -> String {
    format!("{},{}", p[0], p[1])
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "seed" => self.seed = parse(k, v)?,
            "scenario" => self.scenario = v.parse()?,
            "net.hidden" => self.net.hidden = parse_list(k, v)?,
            "net.activation" => self.net.activation = v.parse()?,
            "data.n_classes" => self.data.n_classes = parse(k, v)?,
            "data.centers" => self.data.centers = v.split(';').map(|p| parse_point(k, p)).collect::<Result<_>>()?,
            "data.mode_std" => self.data.mode_std = parse(k, v)?,
            "data.samples_per_class" => self.data.samples_per_class = parse(k, v)?,
            "data.shift_label" => self.data.shift_label = parse(k, v)?,
            "data.shift_center" => self.data.shift_center = parse_point(k, v)?,
            "data.n_tune_pairs" => self.data.n_tune_pairs = parse(k, v)?,
            "data.rotation_deg" => self.data.rotation_deg = parse(k, v)?,
            "data.scale" => self.data.scale = parse(k, v)?,
            "data.holdout_label" => self.data.holdout_label = parse(k, v)?,
            "data.tune_samples_per_class" => self.data.tune_samples_per_class = parse(k, v)?,
            "schedule.k" => self.k = parse(k, v)?,
            "pretrain.iterations" => self.pretrain.iterations = parse(k, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(k, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(k, v)?,
            "pretrain.lr_schedule" => self.pretrain.lr_schedule = v.parse()?,
            "pretrain.dropout" => self.pretrain_dropout = parse(k, v)?,
            "distill.iterations" => self.distill.iterations = parse(k, v)?,
            "distill.batch_size" => self.distill.batch_size = parse(k, v)?,
            "distill.lr" => self.distill.lr = parse(k, v)?,
            "distill.lr_schedule" => self.distill.lr_schedule = v.parse()?,
            "distill.pool_per_label" => self.distill_pool = parse(k, v)?,
            "tune.iterations" => self.tune.stage.iterations = parse(k, v)?,
            "tune.batch_size" => self.tune.stage.batch_size = parse(k, v)?,
            "tune.lr" => self.tune.stage.lr = parse(k, v)?,
            "tune.lr_schedule" => self.tune.stage.lr_schedule = v.parse()?,
            "tune.teacher_mode" => self.tune.teacher_mode = v.parse()?,
            "tune.momentum" => self.tune.momentum = parse(k, v)?,
            "tune.teacher_input" => self.tune.teacher_input = v.parse()?,
            "tune.refresh_period" => self.tune.refresh_period = parse(k, v)?,
            "tune.offpolicy_random_t" => self.tune.offpolicy_random_t = parse_bool(k, v)?,
            "eval.every" => self.eval.every = parse(k, v)?,
            "eval.n" => self.eval.n = parse(k, v)?,
            "eval.n_proj" => self.eval.n_proj = parse(k, v)?,
            "eval.seed" => self.eval.seed = parse(k, v)?,
            "ablate.seeds" => self.ablate_seeds = parse_list(k, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its canonical value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        vec![
            ("seed", self.seed.to_string()),
            ("scenario", self.scenario.name().into()),
            ("net.hidden", join(&self.net.hidden, ",")),
            ("net.activation", self.net.activation.name().into()),
            ("data.n_classes", d.n_classes.to_string()),
            (
                "data.centers",
                d.centers.iter().map(|&p| point(p)).collect::<Vec<_>>().join("; "),
            ),
            ("data.mode_std", d.mode_std.to_string()),
            ("data.samples_per_class", d.samples_per_class.to_string()),
            ("data.shift_label", d.shift_label.to_string()),
            ("data.shift_center", point(d.shift_center)),
            ("data.n_tune_pairs", d.n_tune_pairs.to_string()),
            ("data.rotation_deg", d.rotation_deg.to_string()),
            ("data.scale", d.scale.to_string()),
            ("data.holdout_label", d.holdout_label.to_string()),
            ("data.tune_samples_per_class", d.tune_samples_per_class.to_string()),
            ("schedule.k", self.k.to_string()),
            ("pretrain.iterations", self.pretrain.iterations.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.lr_schedule", self.pretrain.lr_schedule.name().into()),
            ("pretrain.dropout", self.pretrain_dropout.to_string()),
            ("distill.iterations", self.distill.iterations.to_string()),
            ("distill.batch_size", self.distill.batch_size.to_string()),
            ("distill.lr", self.distill.lr.to_string()),
            ("distill.lr_schedule", self.distill.lr_schedule.name().into()),
            ("distill.pool_per_label", self.distill_pool.to_string()),
            ("tune.iterations", self.tune.stage.iterations.to_string()),
            ("tune.batch_size", self.tune.stage.batch_size.to_string()),
            ("tune.lr", self.tune.stage.lr.to_string()),
            ("tune.lr_schedule", self.tune.stage.lr_schedule.name().into()),
            ("tune.teacher_mode", self.tune.teacher_mode.name().into()),
            ("tune.momentum", self.tune.momentum.to_string()),
            ("tune.teacher_input", self.tune.teacher_input.name().into()),
            ("tune.refresh_period", self.tune.refresh_period.to_string()),
            ("tune.offpolicy_random_t", self.tune.offpolicy_random_t.to_string()),
            ("eval.every", self.eval.every.to_string()),
            ("eval.n", self.eval.n.to_string()),
            ("eval.n_proj", self.eval.n_proj.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("ablate.seeds", join(&self.ablate_seeds, ",")),
            ("output.dir", self.output_dir.display().to_string()),
        ]
    }

    /// Canonical serialization: one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Same configuration with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.data;
        if self.net.hidden.is_empty() || self.net.hidden.contains(&0) {
            return bad("net.hidden must list positive widths".into());
        }
        if d.n_classes == 0 || d.centers.len() != d.n_classes {
            return bad(format!(
                "data.centers has {} entries for {} classes",
                d.centers.len(),
                d.n_classes
            ));
        }
        if !(d.mode_std >= 0.0 && d.mode_std.is_finite()) {
            return bad("data.mode_std must be finite and nonnegative".into());
        }
        if d.samples_per_class == 0 || d.n_tune_pairs == 0 || d.tune_samples_per_class == 0 {
            return bad("sample counts must be positive".into());
        }
        if d.shift_label >= d.n_classes || d.holdout_label >= d.n_classes {
            return bad("data.shift_label and data.holdout_label must be valid labels".into());
        }
        if self.scenario == Scenario::Customize && d.n_classes < 2 {
            return bad("customize needs at least one retained label".into());
        }
        if !(d.scale > 0.0 && d.scale.is_finite() && d.rotation_deg.is_finite()) {
            return bad("data.scale must be positive and data.rotation_deg finite".into());
        }
        if self.k == 0 {
            return bad("schedule.k must be positive".into());
        }
        for (name, s) in [
            ("pretrain", &self.pretrain),
            ("distill", &self.distill),
            ("tune", &self.tune.stage),
        ] {
            if s.iterations == 0 || s.batch_size == 0 || !(s.lr > 0.0 && s.lr.is_finite()) {
                return bad(format!("{name}: iterations, batch_size and lr must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.pretrain_dropout) {
            return bad("pretrain.dropout must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.tune.momentum) {
            return bad("tune.momentum must lie in [0, 1]".into());
        }
        if self.distill_pool == 0 || self.tune.refresh_period == 0 {
            return bad("distill.pool_per_label and tune.refresh_period must be positive".into());
        }
        if self.eval.every == 0 || self.eval.n == 0 || self.eval.n_proj == 0 {
            return bad("eval.every, eval.n and eval.n_proj must be positive".into());
        }
        if self.ablate_seeds.is_empty() {
            return bad("ablate.seeds must not be empty".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("data.centers = 4,0; 0,4; -4,0; 0,-4\n"));
        assert!(text.contains("tune.teacher_mode = ema\n"));
    }

    #[test]
    fn shipped_configs_parse() {
        let default = RunConfig::parse(include_str!("../../../../configs/default.cfg")).unwrap();
        assert_eq!(default, RunConfig::default());
        let shift = RunConfig::parse(include_str!("../../../../configs/domain-shift.cfg")).unwrap();
        assert_eq!(shift.scenario, Scenario::DomainShift);
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let cfg =
            RunConfig::parse("# header\n\nseed = 9   # trailing\n tune.lr=0.001\nnet.hidden = 32, 32, 32\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.tune.stage.lr, 1e-3);
        assert_eq!(cfg.net.hidden, vec![32, 32, 32]);
    }

    #[test]
    fn malformed_configs_are_rejected() {
        for text in [
            "seed 3",
            "bogus = 1",
            "seed = -1",
            "seed = 1\nseed = 2",
            "data.shift_center = 1,2,3",
            "tune.momentum = 1.5",
            "schedule.k = 0",
            "data.n_classes = 3",
            "tune.teacher_mode = nope",
            "ablate.seeds = ",
            "tune.offpolicy_random_t = maybe",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text:?}");
        }
    }

    #[test]
    fn hash_tracks_every_key() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.eval.n_proj += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn every_entry_key_is_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
    }

    proptest! {
        #[test]
        fn random_configs_round_trip(
            seed in any::<u64>(),
            lr in 1e-6f64..1.0,
            std in 0.0f64..0.5,
            cx in -10.0f64..10.0,
            k in 1usize..16,
            mode in 0usize..3,
        ) {
            let mut cfg = RunConfig { seed, ..RunConfig::default() };
            cfg.tune.stage.lr = lr;
            cfg.data.mode_std = std;
            cfg.data.shift_center = [cx, -cx / 3.0];
            cfg.k = k;
            cfg.tune.teacher_mode = [TeacherMode::Ema, TeacherMode::FrozenBase, TeacherMode::StudentCopy][mode];
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(back.hash(), cfg.hash());
            prop_assert_eq!(back, cfg);
        }
    }
}
