//! End-to-end checks of the command-line surface.

use std::path::PathBuf;
use std::process::Command;

const TOY_XYZ: &str = include_str!("data/toy.xyz");

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_molgen")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("molgen_cli_{tag}"));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const SMALL_MODEL: &[&str] =
    &["--features", "8", "--blocks", "2", "--bins", "48", "--filter-rbf", "16"];

#[test]
fn missing_data_file_exits_1_and_names_path() {
    let out = Command::new(bin())
        .args(["train", "--data", "/nonexistent/nowhere.xyz", "--iters", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/nowhere.xyz"), "stderr: {stderr}");
}

#[test]
fn batch_one_on_two_molecule_file_runs() {
    let dir = workdir("batch1");
    let data = dir.join("two.xyz");
    // the first two molecules of the toy set
    let two_blocks: String = TOY_XYZ.lines().take(12).map(|l| format!("{l}\n")).collect();
    std::fs::write(&data, two_blocks).unwrap();
    let metrics = dir.join("metrics.log");
    let out = Command::new(bin())
        .args(["train", "--data", data.to_str().unwrap(), "--iters", "4", "--batch", "1"])
        .args(SMALL_MODEL)
        .args(["--checkpoint", dir.join("m.ckpt").to_str().unwrap()])
        .args(["--metrics", metrics.to_str().unwrap()])
        .args(["--val-interval", "100"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(log.lines().count(), 4);
    // batch of one molecule: term count per iteration is one molecule's worth
    for line in log.lines() {
        let terms: usize = line.split('\t').nth(2).unwrap().parse().unwrap();
        assert!(terms == 10 || terms == 3, "unexpected term count {terms}");
    }
}

#[test]
fn generate_count_zero_writes_empty_file() {
    let dir = workdir("count0");
    let data = dir.join("toy.xyz");
    std::fs::write(&data, TOY_XYZ).unwrap();
    let ckpt = dir.join("m.ckpt");
    let ok = Command::new(bin())
        .args(["train", "--data", data.to_str().unwrap(), "--iters", "1", "--batch", "1"])
        .args(SMALL_MODEL)
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--metrics", dir.join("m.log").to_str().unwrap()])
        .status()
        .unwrap();
    assert!(ok.success());

    let out_path = dir.join("empty.xyz");
    let out = Command::new(bin())
        .args(["generate", "--checkpoint", ckpt.to_str().unwrap(), "--count", "0"])
        .args(SMALL_MODEL)
        .args(["--out", out_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(&out_path).unwrap(), b"");
}

#[test]
fn generate_rejects_malformed_checkpoint() {
    let dir = workdir("badckpt");
    let ckpt = dir.join("broken.ckpt");
    std::fs::write(&ckpt, "molgen-checkpoint v999\n").unwrap();
    let out = Command::new(bin())
        .args(["generate", "--checkpoint", ckpt.to_str().unwrap(), "--count", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_generated_equals_train_matches_everything() {
    let dir = workdir("eval_identity");
    let data = dir.join("toy.xyz");
    std::fs::write(&data, TOY_XYZ).unwrap();
    let report_path = dir.join("report.tsv");
    let out = Command::new(bin())
        .args([
            "evaluate",
            "--generated",
            data.to_str().unwrap(),
            "--train",
            data.to_str().unwrap(),
            "--report",
            report_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = std::fs::read_to_string(&report_path).unwrap();
    // CO2 and HCN carry multiple bonds, which degree-based valence
    // counting rejects; methane and water survive and must both match.
    assert!(report.contains("total\t4"), "report:\n{report}");
    assert!(report.contains("valid\t2"), "report:\n{report}");
    assert!(report.contains("unique\t2"), "report:\n{report}");
    assert!(report.contains("match_train\t2"), "report:\n{report}");
    assert!(report.contains("new\t0"), "report:\n{report}");
}

#[test]
fn evaluate_counts_invalid_fixture() {
    let dir = workdir("eval_invalid");
    let train = dir.join("train.xyz");
    std::fs::write(&train, TOY_XYZ).unwrap();
    // one valid water plus one bonded O2 pair (wrong valence)
    let generated = dir.join("gen.xyz");
    std::fs::write(
        &generated,
        "3\nwater\nO 0 0 0\nH 0.7572 0.5865 0\nH -0.7572 0.5865 0\n2\nbad\nO 0 0 0\nO 1.21 0 0\n",
    )
    .unwrap();
    let report_path = dir.join("report.tsv");
    let out = Command::new(bin())
        .args([
            "evaluate",
            "--generated",
            generated.to_str().unwrap(),
            "--train",
            train.to_str().unwrap(),
            "--report",
            report_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = std::fs::read_to_string(&report_path).unwrap();
    assert!(report.contains("invalid\t1"), "report:\n{report}");
    assert!(report.contains("match_train\t1"));
}

#[test]
fn rmsd_pairs_identical_files_are_zero() {
    let dir = workdir("rmsd_pairs");
    let data = dir.join("toy.xyz");
    std::fs::write(&data, TOY_XYZ).unwrap();
    let out = Command::new(bin())
        .args(["evaluate", "--rmsd-pairs", data.to_str().unwrap(), data.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut pairs = 0;
    for line in stdout.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let all: f64 = cols[1].parse().unwrap();
        let heavy: f64 = cols[2].parse().unwrap();
        assert!(all.abs() < 1e-6 && heavy.abs() < 1e-6, "line: {line}");
        pairs += 1;
    }
    assert_eq!(pairs, 4);
}

#[test]
fn config_file_composes_with_flag_overrides() {
    let dir = workdir("config_file");
    let data = dir.join("toy.xyz");
    std::fs::write(&data, TOY_XYZ).unwrap();
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# toy run\nseed = 3\nbatch = 2\nfeatures = 8\nblocks = 2\nbins = 48\nfilter_rbf = 16\ndata = {}\n",
            data.display()
        ),
    )
    .unwrap();
    let metrics = dir.join("metrics.log");
    let out = Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap(), "--iters", "2", "--batch", "1"])
        .args(["--checkpoint", dir.join("m.ckpt").to_str().unwrap()])
        .args(["--metrics", metrics.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // the echoed effective config must show the flag value, not the file value
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("batch = 1"), "stderr: {stderr}");
    assert!(stderr.contains("seed = 3"));
    assert!(stderr.contains("features = 8"));
}
