use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to run in a second
net.hidden = 8
data.samples_per_class = 40
pretrain.iterations = 15
pretrain.batch_size = 16
distill.iterations = 5
distill.batch_size = 8
distill.pool_per_label = 4
tune.iterations = 4
tune.batch_size = 4
eval.every = 2
eval.n = 20
eval.n_proj = 4
schedule.k = 2
ablate.seeds = 3,7
";

fn flopsd(args: &[&str], rundir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flopsd"))
        .args(args)
        .env("FLOPSD_RUNDIR", rundir)
        .output()
        .expect("spawn flopsd")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.display().to_string()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_runs_end_to_end_and_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let run = tmp.path().join("run");
    let p = |name: &str| run.join(name).display().to_string();

    assert_ok(&flopsd(&["pretrain", "--config", &cfg], &run));
    assert!(run.join("base.ckpt").exists());
    assert_ok(&flopsd(&["distill", "--config", &cfg], &run));
    let distilled = p("distilled.ckpt");
    for method in ["opsd", "sft", "sft-teacher", "offpolicy"] {
        assert_ok(&flopsd(
            &["tune", "--config", &cfg, "--model", &distilled, "--method", method],
            &run,
        ));
        assert!(run.join(format!("curve_{method}.csv")).exists());
    }
    assert_ok(&flopsd(&["eval", "--config", &cfg, "--model", &distilled], &run));

    // the untuned evaluation reproduces the pre-tuning row of every curve
    let eval = fs::read_to_string(run.join("eval.csv")).unwrap();
    let eval_row: Vec<&str> = eval.lines().nth(1).unwrap().split(',').collect();
    let curve = fs::read_to_string(run.join("curve_opsd.csv")).unwrap();
    let first: Vec<&str> = curve.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(eval_row[4..6], first[4..6]);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert!(summary["quality_proxy"].as_f64().unwrap() >= 0.0);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest_tune_sft.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"].as_u64(), Some(1));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let out = flopsd(&["verify", "--manifest", &p("manifest_tune_sft.json")], &run);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("reproduced"));
}

#[test]
fn ablate_emits_four_curves_per_seed_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let run = tmp.path().join("ablate");
    assert_ok(&flopsd(&["ablate", "--config", &cfg], &run));

    let text = fs::read_to_string(run.join("curves.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iter,method,seed,loss,concept_score,quality_proxy,sw2_target,energy_retained"
    );
    let mut curves = BTreeSet::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 8);
        cells[0].parse::<usize>().unwrap();
        for c in &cells[3..] {
            c.parse::<f64>().unwrap();
        }
        curves.insert((cells[1].to_string(), cells[2].to_string()));
    }
    assert_eq!(curves.len(), 4 * 2);
    let methods: BTreeSet<_> = curves.iter().map(|(m, _)| m.as_str()).collect();
    assert_eq!(methods, BTreeSet::from(["offpolicy", "opsd", "sft", "sft-teacher"]));

    let modes = fs::read_to_string(run.join("teacher_modes.csv")).unwrap();
    for m in ["opsd/ema", "opsd/frozen_base", "opsd/student_copy"] {
        assert!(modes.contains(m));
    }

    let out = flopsd(&["report", "--rundir", &run.display().to_string()], &run);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("sft-teacher"));
    assert!(run.join("report.csv").exists());
    assert!(run.join("report_teacher_modes.csv").exists());
}

#[test]
fn usage_and_input_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(flopsd(&[], &run).status.code(), Some(1));
    assert_eq!(flopsd(&["frobnicate"], &run).status.code(), Some(1));
    assert_eq!(flopsd(&["--help"], &run).status.code(), Some(0));

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "seed = 1\nno_such_key = 2\n").unwrap();
    let out = flopsd(&["pretrain", "--config", &bad.display().to_string()], &run);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let cfg = write_config(tmp.path(), "");
    let out = flopsd(&["distill", "--config", &cfg, "--base", "/nonexistent/base.ckpt"], &run);
    assert_eq!(out.status.code(), Some(1));
    let out = flopsd(
        &["tune", "--config", &cfg, "--model", "m.ckpt", "--method", "dpo"],
        &run,
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn repeated_ablation_seeds_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("dup.cfg");
    fs::write(&cfg, TINY.replace("ablate.seeds = 3,7", "ablate.seeds = 3,3")).unwrap();
    let out = flopsd(
        &["ablate", "--config", &cfg.display().to_string()],
        &tmp.path().join("run"),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed 3"));
}

#[test]
fn divergent_training_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "pretrain.lr = 1e300\npretrain.lr_schedule = constant\n");
    let out = flopsd(&["pretrain", "--config", &cfg], &tmp.path().join("run"));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rundir_env_overrides_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("output.dir = {}\n", tmp.path().join("from_config").display()),
    );
    let env_dir = tmp.path().join("from_env");
    assert_ok(&flopsd(&["pretrain", "--config", &cfg], &env_dir));
    assert!(env_dir.join("base.ckpt").exists());
    assert!(!tmp.path().join("from_config").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_flopsd"))
        .args(["pretrain", "--config", &cfg])
        .env_remove("FLOPSD_RUNDIR")
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(tmp.path().join("from_config/base.ckpt").exists());
}
