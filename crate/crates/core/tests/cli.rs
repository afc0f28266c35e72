use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acrslf::synthetic::{self, LowRankSpec};
use tempfile::TempDir;

fn acrslf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acrslf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_synthetic(dir: &Path, name: &str, spec: &LowRankSpec, sep: &str) -> PathBuf {
    let path = dir.join(name);
    let data = synthetic::low_rank(spec);
    synthetic::write_triples(fs::File::create(&path).unwrap(), &data.triples, sep, 1).unwrap();
    path
}

fn small_dataset(dir: &Path) -> PathBuf {
    write_synthetic(dir, "small.tsv", &LowRankSpec::star_ratings(60, 40, 700, 1), "\t")
}

/// Every row has the header's column count and every field but the
/// non-numeric ones parses as a number.
fn check_csv(path: &Path, text_columns: &[usize]) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let width = lines.next().unwrap().split(',').count();
    lines
        .map(|line| {
            let fields: Vec<String> = line.split(',').map(str::to_string).collect();
            assert_eq!(fields.len(), width, "{}: {line}", path.display());
            for (k, f) in fields.iter().enumerate() {
                if !text_columns.contains(&k) {
                    assert!(f.parse::<f64>().is_ok(), "{}: field {f:?} is not numeric", path.display());
                }
            }
            fields
        })
        .collect()
}

#[test]
fn stats_edge_cases() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("empty.csv"), "").unwrap();
    fs::write(dir.path().join("full.csv"), "1,1,5\n1,2,3\n2,1,4\n2,2,1\n").unwrap();
    let out = acrslf(&["stats", "empty.csv", "full.csv"], dir.path());
    assert!(out.status.success());
    assert_eq!(stdout(&out), "empty,0,0,0,0.00\nfull,2,2,4,100.00\n");
}

#[test]
fn stats_reproduces_table_shapes() {
    let dir = TempDir::new().unwrap();
    write_synthetic(dir.path(), "ml1m.dat", &LowRankSpec::star_ratings(6040, 3952, 1_000_209, 7), "::");
    write_synthetic(dir.path(), "yelp.tsv", &LowRankSpec::star_ratings(15_400, 1_000, 365_804, 8), "\t");
    let out = acrslf(&["stats", "ml1m.dat", "yelp.tsv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out), "ml1m,6040,3952,1000209,4.19\nyelp,15400,1000,365804,2.37\n");
}

#[test]
fn train_writes_run_directory() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let out = acrslf(
        &["train", "--dataset", "small.tsv", "--optimizer", "acrslf", "--f", "4", "--max-epochs", "1", "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let epochs = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert!(epochs.starts_with("epoch,rmse,objective,wall_seconds,cg_iters,grad_norm,damping\n"));
    assert_eq!(check_csv(&run.join("epochs.csv"), &[]).len(), 1);
    let summary = check_csv(&run.join("summary.csv"), &[0, 6]);
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0][0], "acrslf");
    assert_eq!(summary[0][3], "1");
    assert_eq!(summary[0][6], "completed");
    assert_eq!(check_csv(&run.join("user_ids.csv"), &[]).len(), 60);
    assert_eq!(check_csv(&run.join("item_ids.csv"), &[]).len(), 40);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"]["rank"], 4);
    assert_eq!(manifest["train"]["optimizer"]["kind"], "acrslf");
    assert_eq!(manifest["split"]["train_fraction"], 0.8);
}

#[test]
fn replay_is_byte_identical_when_deterministic() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    for opt in ["sgd_momentum", "slf_fixed"] {
        let first = format!("{opt}-1");
        let out = acrslf(
            &["train", "--dataset", "small.tsv", "--optimizer", opt, "--f", "4", "--max-epochs", "8", "--deterministic", "--out", &first],
            dir.path(),
        );
        assert!(out.status.success());
        let second = format!("{opt}-2");
        let manifest = format!("{first}/manifest.json");
        let out = acrslf(&["replay", &manifest, "--out", &second], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for file in ["epochs.csv", "summary.csv", "user_ids.csv", "item_ids.csv"] {
            let a = fs::read(dir.path().join(&first).join(file)).unwrap();
            let b = fs::read(dir.path().join(&second).join(file)).unwrap();
            assert_eq!(a, b, "{opt}: {file} differs");
        }
        assert!(dir.path().join(&first).join("timings.csv").exists());
    }
}

#[test]
fn rejects_flags_for_other_optimizer_before_work() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let out = acrslf(
        &["train", "--dataset", "small.tsv", "--optimizer", "sgd_momentum", "--cubic-m", "2", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--cubic-m"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    assert_eq!(acrslf(&["train", "--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(
        acrslf(&["train", "--dataset", "small.tsv", "--split", "1.5", "--out", "r"], dir.path()).status.code(),
        Some(1)
    );

    fs::write(dir.path().join("bad.csv"), "1,1,5\n1,x,3\n").unwrap();
    let out = acrslf(&["train", "--dataset", "bad.csv", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert_eq!(acrslf(&["stats", "missing.csv"], dir.path()).status.code(), Some(2));

    let out = acrslf(
        &["train", "--dataset", "small.tsv", "--optimizer", "sgd_momentum", "--lr", "50", "--init-hi", "1", "--out", "div"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = check_csv(&dir.path().join("div/summary.csv"), &[0, 6]);
    assert_eq!(summary[0][6], "aborted");
}

#[test]
fn compare_emits_one_row_per_optimizer() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let out = acrslf(&["compare", "--dataset", "small.tsv", "--f", "4", "--max-epochs", "5", "--out", "cmp"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = stdout(&out);
    assert_eq!(table, fs::read_to_string(dir.path().join("cmp/comparison.csv")).unwrap());
    let rows = check_csv(&dir.path().join("cmp/comparison.csv"), &[0, 1]);
    let models: Vec<_> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(models, ["sgd_momentum", "adam", "slf_fixed", "acrslf"]);
    assert!(rows.iter().all(|r| r[0] == "small"));
    for m in &models {
        assert!(dir.path().join("cmp").join(m).join("manifest.json").exists());
    }

    let out = acrslf(
        &["compare", "--manifest", "cmp/adam/manifest.json", "--manifest", "cmp/acrslf/manifest.json", "--out", "again"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().count(), 3);
}

#[test]
fn compare_rejects_mismatched_splits() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    for (seed, out) in [("1", "a"), ("2", "b")] {
        let status = acrslf(
            &["train", "--dataset", "small.tsv", "--optimizer", "adam", "--seed", seed, "--max-epochs", "1", "--f", "2", "--out", out],
            dir.path(),
        )
        .status;
        assert!(status.success());
    }
    let out = acrslf(
        &["compare", "--manifest", "a/manifest.json", "--manifest", "b/manifest.json", "--out", "c"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("c").exists());
}

#[test]
fn one_based_ids_keep_gaps() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("gaps.dat"), "1::1::5::978300760\n3::4::3::978300761\n").unwrap();
    let out = acrslf(&["stats", "--ids", "one-based", "gaps.dat"], dir.path());
    assert_eq!(stdout(&out), "gaps,3,4,2,16.66\n");
    let out = acrslf(&["stats", "gaps.dat"], dir.path());
    assert_eq!(stdout(&out), "gaps,2,2,2,50.00\n");
}
