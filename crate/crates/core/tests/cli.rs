use std::path::Path;
use std::process::Command;

use rankloss::bounds::{LossFamily, ReferenceLosses};
use rankloss::cli::{run_command, run_command_with, EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VIOLATED};
use rankloss::losses::{loss_value, LossInstance, LossKind, LossSpec};
use rankloss::Result;

fn argv(s: &str) -> Vec<String> {
    std::iter::once("rankloss").chain(s.split_whitespace()).map(String::from).collect()
}

fn gen(dir: &Path) -> String {
    let data = dir.join("data.json");
    let code = run_command(&argv(&format!(
        "gen-data --users 60 --items 40 --min-len 5 --max-len 10 --seed 3 --out {}",
        data.display()
    )));
    assert_eq!(code, EXIT_OK);
    data.display().to_string()
}

struct HalvedSce;

impl LossFamily for HalvedSce {
    fn evaluate(&self, spec: &LossSpec, instance: &LossInstance) -> Result<f64> {
        let v = loss_value(spec, instance)?;
        Ok(if matches!(spec.kind, LossKind::Sce { .. }) { 0.5 * v } else { v })
    }
}

#[test]
fn train_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let out = dir.path().join("run.csv");
    let code = run_command(&argv(&format!(
        "train --data {data} --loss SCE --alpha 10 --K 8 --epochs 3 --dim 8 --seed 1 --out {}",
        out.display()
    )));
    assert_eq!(code, EXIT_OK);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,ndcg@10,hr@10,mrr@10"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn missing_data_flag_is_usage_error() {
    assert_eq!(run_command(&argv("train --loss CE --epochs 1")), EXIT_USAGE);
    assert_eq!(run_command(&argv("train --data x.json --bogus")), EXIT_USAGE);
}

#[test]
fn missing_data_file_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("absent.json");
    assert_eq!(run_command(&argv(&format!("train --data {} --epochs 1", data.display()))), EXIT_DATA);
}

#[test]
fn broken_loss_family_exits_violated() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.jsonl");
    let a = argv(&format!("verify-bounds --suite lemmas --trials 100000 --seed 1 --out {}", out.display()));
    assert_eq!(run_command_with(&a, &HalvedSce), EXIT_VIOLATED);
    assert_eq!(run_command_with(&a, &ReferenceLosses), EXIT_OK);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let mut outputs = Vec::new();
    for (i, threads) in [1, 1, 2].into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}.csv"));
        let code = run_command(&argv(&format!(
            "train --data {data} --loss NEG --K 5 --epochs 2 --dim 8 --seed 9 --threads {threads} --out {}",
            out.display()
        )));
        assert_eq!(code, EXIT_OK);
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn seed_env_var_is_used_without_flag() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_rankloss");
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(bin);
        cmd.args(["gen-data", "--users", "20", "--items", "15", "--out"]).arg(&out);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        cmd.env_remove("RANKLOSS_SEED");
        if let Some(e) = env {
            cmd.env("RANKLOSS_SEED", e);
        }
        assert!(cmd.status().unwrap().success());
        std::fs::read(out).unwrap()
    };
    let from_env = run("a.json", Some("42"), None);
    let from_flag = run("b.json", None, Some("42"));
    let flag_wins = run("c.json", Some("7"), Some("42"));
    let default = run("d.json", None, None);
    assert_eq!(from_env, from_flag);
    assert_eq!(flag_wins, from_flag);
    assert_ne!(default, from_flag);

    let status = Command::new(bin)
        .args(["gen-data", "--out"])
        .arg(dir.path().join("e.json"))
        .env("RANKLOSS_SEED", "nope")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
}
