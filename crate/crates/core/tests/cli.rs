use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_safe-lsoc"))
}

fn short_scenario(dir: &Path) -> std::path::PathBuf {
    let text = include_str!("../scenarios/team_of_three.json");
    let mut doc: serde_json::Value = serde_json::from_str(text).unwrap();
    doc["name"] = "short_team".into();
    doc["sim"]["max_time"] = 1.0.into();
    let path = dir.join("short_team.json");
    std::fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
    path
}

#[test]
fn list_names_bundled_scenarios() {
    let out = bin().arg("list").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "single_uav"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn exports_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = short_scenario(dir.path());
    let mut csvs = Vec::new();
    for threads in ["1", "3", "1"] {
        let out_dir = dir.path().join(format!("out{}", csvs.len()));
        let status = bin()
            .env("SAFE_LSOC_THREADS", threads)
            .args(["run", scenario.to_str().unwrap(), "--mode", "filtered", "--seeds", "5", "--out", out_dir.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        csvs.push(std::fs::read(out_dir.join("short_team_single_filtered_seed5_trajectory.csv")).unwrap());
    }
    assert!(csvs.iter().all(|c| c == &csvs[0]));
}

#[test]
fn unknown_scenario_fails_with_message() {
    let out = bin().args(["run", "/nonexistent/scenario.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}
