//! End-to-end smoke tests of the `ccq` binary.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ccq"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ccq-cli-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Shared fast overrides: tiny model, tiny budgets.
fn fast_args(out_dir: &PathBuf) -> Vec<String> {
    vec![
        "--set".into(),
        format!("output_dir=\"{}\"", out_dir.display()),
        "--set".into(),
        "seeds=[1]".into(),
        "--set".into(),
        "schedule.max_steps=1000".into(),
        "--set".into(),
        "family.k_total=4".into(),
        "--set".into(),
        "algorithm.k=2".into(),
        "--set".into(),
        "algorithm.compute_bounds=false".into(),
    ]
}

#[test]
fn build_model_writes_loadable_file() {
    let dir = temp_dir("build");
    let model = dir.join("model.mdp");
    let out = bin()
        .args(["build-model", "--out"])
        .arg(&model)
        .args(["--family-dir"])
        .arg(dir.join("family"))
        .args(["--set", "family.k_total=2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&model).unwrap();
    assert!(text.starts_with("ccq-mdp v1\n"));
    assert!(dir.join("family").join("family.txt").is_file());
    assert!(dir.join("family").join("member_2.mdp").is_file());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn order_prints_ranking_led_by_one() {
    let dir = temp_dir("order");
    let out = bin().arg("order").args(fast_args(&dir)).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ranking: 1"), "{stdout}");
    assert!(dir.join("ordering.csv").is_file());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_and_evaluate_run_clean() {
    let dir = temp_dir("train");
    let out = bin().arg("train").args(fast_args(&dir)).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("aggregate.csv").is_file());

    let dir2 = temp_dir("eval");
    let out = bin().arg("evaluate").args(fast_args(&dir2)).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mean APE"), "{stdout}");
    std::fs::remove_dir_all(&dir).ok();
    std::fs::remove_dir_all(&dir2).ok();
}

#[test]
fn coverage_reports_tracked_pairs() {
    let dir = temp_dir("coverage");
    let out = bin().arg("coverage").args(fast_args(&dir)).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cc_star:"), "{stdout}");
    assert!(stdout.contains("pair (6, 1):"), "{stdout}");
    assert!(dir.join("coverage.csv").is_file());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn reproduce_figure_rejects_unknown_name() {
    let dir = temp_dir("fig-bad");
    let out = bin()
        .args(["reproduce-figure", "--name", "nope"])
        .args(fast_args(&dir))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown figure"), "{stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn reproduce_figure_writes_csv() {
    let dir = temp_dir("fig");
    let out = bin()
        .args(["reproduce-figure", "--name", "cc_vs_order"])
        .args(fast_args(&dir))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("cc_vs_order.csv").is_file());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn seed_env_var_overrides_config_seeds() {
    let dir = temp_dir("env-seed");
    let out = bin()
        .arg("train")
        .args(fast_args(&dir))
        .env("CCQ_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("base").join("seed_99").is_dir());
    assert!(!dir.join("base").join("seed_1").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn acceptance_subcommand_runs_single_criterion() {
    let out = bin()
        .args(["acceptance", "--criterion", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("criterion  2 [PASS]"), "{stdout}");
}

#[test]
fn config_file_plus_overrides() {
    let dir = temp_dir("config-file");
    let config_path = dir.join("exp.toml");
    std::fs::write(
        &config_path,
        r#"
seeds = [3]
[model]
kind = "mimo"
[algorithm]
kind = "double-q"
[schedule]
max_steps = 800
[tracking]
pairs = [[4, 0]]
"#,
    )
    .unwrap();
    let out = bin()
        .arg("train")
        .args(["--config"])
        .arg(&config_path)
        .args([
            "--set",
            &format!("output_dir=\"{}\"", dir.join("out").display()),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let aggregate =
        std::fs::read_to_string(dir.join("out").join("aggregate.csv")).unwrap();
    assert!(aggregate.contains("double-q"), "{aggregate}");
    assert!(aggregate.contains(",3,"), "{aggregate}");
    std::fs::remove_dir_all(&dir).ok();
}
