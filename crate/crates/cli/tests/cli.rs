use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bnrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnrank"))
        .args(args)
        .env_remove("BNRANK_SEED")
        .output()
        .expect("binary runs")
}

fn sorted_csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn same_seed_gives_identical_bytes() {
    for experiment in ["rank-vs-depth", "grad-align", "break-bn"] {
        let tmp = tempfile::tempdir().unwrap();
        let dirs = ["a", "b"].map(|s| tmp.path().join(s));
        for dir in &dirs {
            let out = bnrank(&[
                experiment,
                "--seed",
                "7",
                "--depth",
                "60",
                "--replicates",
                "2",
                "--d",
                "8",
                "--width",
                "8",
                "--net-depth",
                "6",
                "--samples",
                "16",
                "--out-dir",
                dir.to_str().unwrap(),
            ]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
        let a = sorted_csvs(&dirs[0]);
        assert!(!a.is_empty());
        assert_eq!(a, sorted_csvs(&dirs[1]), "{experiment}");
    }
}

#[test]
fn unknown_experiment_is_usage_error() {
    let out = bnrank(&["rank-vs-time"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_value_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bnrank(&["break-bn", "--replicates", "0", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = bnrank(&["break-bn", "--config", tmp.path().join("missing.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file_and_env_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# break-bn sweep\nd = 6\ndepth = 40\nreplicates = 3\n").unwrap();
    let out_dir = tmp.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_bnrank"))
        .args(["break-bn", "--config", cfg.to_str().unwrap(), "--replicates", "2"])
        .args(["--out-dir", out_dir.to_str().unwrap()])
        .env("BNRANK_SEED", "11")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(String::from_utf8_lossy(&status.stdout).contains("seed 11"));
    let aggregate = fs::read_to_string(out_dir.join("break-bn_aggregate.csv")).unwrap();
    let header = aggregate.lines().next().unwrap();
    assert!(header.ends_with("rep_0,rep_1"));
    let trajectory = fs::read_to_string(out_dir.join("break-bn_symmetric_rep0.csv")).unwrap();
    assert_eq!(trajectory.lines().count(), 1 + 41);
    assert!(!trajectory.contains('\r'));
}

#[test]
fn summarize_fits_synthetic_power_law() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("synthetic.csv");
    let mut text = String::from("experiment,variant,x,metric,mean,ci95_low,ci95_high,rep_0\n");
    for d in [8.0f64, 16.0, 32.0, 64.0] {
        let y = d.powf(1.5);
        text.push_str(&format!("synthetic,a,{d:e},y,{y:e},{y:e},{y:e},{y:e}\n"));
    }
    fs::write(&path, text).unwrap();
    let out = bnrank(&["summarize", path.to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1.5000"), "{stdout}");
}

#[test]
fn summarize_rejects_chain_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("chain.csv");
    fs::write(&path, "layer,replicate,hard_rank,soft_rank,r_lower,fro_m_sq,tr_m3,tr_diag_m2_sq\n").unwrap();
    let out = bnrank(&["summarize", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
}
