use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cpie_core::fixtures::max_neighbor_count;
use cpie_core::image::BinaryMap;
use cpie_core::io::{load_mask, load_plane, load_rgb, save_mask};
use tempfile::TempDir;

const SMALL: &str = "seed = 3
[fixtures]
size = 48
raw_count = 4
distractor_count = 2
heldout_count = 2
[train]
epochs = 2
steps_per_epoch = 2
batch_size = 1
lr_decay_period = 1
";

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_cpie"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg("small.toml")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn with_fixtures(self) -> Self {
        self.ok(&["fixtures", "--out", "fx"]);
        self
    }
}

/// Every regular file under `dir` except the config echo, by relative path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.toml" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn fixtures_are_deterministic_with_one_pixel_masks() {
    let env = Env::new();
    env.ok(&["fixtures", "--out", "a"]);
    env.ok(&["fixtures", "--out", "b"]);
    let a = tree(&env.path("a"));
    assert_eq!(a, tree(&env.path("b")));
    let masks: Vec<_> = a.iter().filter(|(p, _)| p.to_string_lossy().ends_with("_mask.png")).collect();
    assert_eq!(masks.len(), 4 + 2 * 2);
    for (p, _) in masks {
        let m = load_mask(&env.path("a").join(p)).unwrap();
        assert!(!m.is_empty(), "{p:?}");
        assert!(max_neighbor_count(&m) <= 2, "{p:?}");
    }
    let echo = fs::read_to_string(env.path("a/config.toml")).unwrap();
    assert!(echo.contains("size = 48") && echo.contains("[paths]"));
}

#[test]
fn gen_pairs_counts_determinism_and_failures() {
    let env = Env::new().with_fixtures();
    env.ok(&["gen-pairs", "--raw", "fx/raw", "--distractors", "fx/distractors", "--out", "none", "--count", "0"]);
    assert_eq!(fs::read_to_string(env.path("none/manifest.tsv")).unwrap().lines().count(), 1);

    env.ok(&["gen-pairs", "--raw", "fx/raw", "--distractors", "fx/distractors", "--out", "p1", "--count", "2"]);
    env.ok(&["gen-pairs", "--raw", "fx/raw", "--distractors", "fx/distractors", "--out", "p2", "--count", "2"]);
    let p1 = tree(&env.path("p1"));
    assert_eq!(p1, tree(&env.path("p2")));
    assert_eq!(p1.len(), 4 * 2 * 4 + 1);
    let q = load_rgb(&env.path("p1/0000_000_query.png")).unwrap();
    assert_eq!(q.dims(), (48, 48));

    let bad = env.path("bad");
    fs::create_dir(&bad).unwrap();
    fs::copy(env.path("fx/raw/0000.png"), bad.join("a.png")).unwrap();
    fs::copy(env.path("fx/raw/0001.png"), bad.join("b.png")).unwrap();
    fs::copy(env.path("fx/raw/0001_mask.png"), bad.join("b_mask.png")).unwrap();
    fs::copy(env.path("fx/raw/0002.png"), bad.join("c.png")).unwrap();
    save_mask(&bad.join("c_mask.png"), &BinaryMap::new(48, 48)).unwrap();
    let out = env.run(&["gen-pairs", "--raw", "bad", "--distractors", "fx/distractors", "--out", "pb"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("a: missing mask"), "{err}");
    assert!(err.contains("c: mask 0 has no foreground pixels"), "{err}");
    let manifest = fs::read_to_string(env.path("pb/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    assert!(manifest.contains("b_000\tb\t"));
}

fn loss_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_zero_epochs_and_resume_schedule() {
    let env = Env::new().with_fixtures();
    let zero = fs::read_to_string(env.path("small.toml")).unwrap().replace("epochs = 2", "epochs = 0");
    fs::write(env.path("zero.toml"), zero).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cpie"))
        .current_dir(env.dir.path())
        .args(["--config", "zero.toml", "train", "--raw", "fx/raw", "--distractors", "fx/distractors", "--checkpoint", "z"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest = fs::read_to_string(env.path("z/manifest.toml")).unwrap();
    assert!(manifest.contains("step = 0"), "{manifest}");

    env.ok(&["train", "--raw", "fx/raw", "--distractors", "fx/distractors", "--checkpoint", "full"]);
    let rows = loss_rows(&env.path("full/loss.tsv"));
    let lrs: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(lrs, ["2e-3", "2e-3", "1e-3", "1e-3"]);

    // One epoch, then resume with the two-epoch schedule.
    let one = fs::read_to_string(env.path("small.toml")).unwrap().replace("epochs = 2", "epochs = 1");
    fs::write(env.path("one.toml"), one).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_cpie"))
        .current_dir(env.dir.path())
        .args(["--config", "one.toml", "train", "--raw", "fx/raw", "--distractors", "fx/distractors", "--checkpoint", "part"])
        .status()
        .unwrap();
    assert!(status.success());
    env.ok(&["train", "--raw", "fx/raw", "--distractors", "fx/distractors", "--checkpoint", "part", "--resume"]);
    assert_eq!(loss_rows(&env.path("part/loss.tsv")), rows);
    for f in ["weights.bin", "optimizer.bin"] {
        assert_eq!(fs::read(env.path("part").join(f)).unwrap(), fs::read(env.path("full").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn extract_single_batch_and_overlay() {
    let env = Env::new().with_fixtures();
    let zero = fs::read_to_string(env.path("small.toml")).unwrap().replace("epochs = 2", "epochs = 0");
    fs::write(env.path("small.toml"), zero).unwrap();
    env.ok(&["train", "--raw", "fx/raw", "--distractors", "fx/distractors", "--checkpoint", "ck"]);
    let base = [
        "extract",
        "--checkpoint",
        "ck",
        "--support",
        "fx/heldout/0000_support.png",
        "--query",
        "fx/heldout/0000_query.png",
    ];

    let mut args = base.to_vec();
    args.extend(["--mask", "fx/heldout/0000_support_mask.png", "--out", "one"]);
    env.ok(&args);
    let mut files: Vec<_> = tree(&env.path("one")).into_iter().map(|(p, _)| p).collect();
    files.sort();
    assert_eq!(files, [PathBuf::from("map_0.png")]);

    let masks: Vec<String> = ["0000_support", "0001_support", "0000_query", "0001_query"]
        .iter()
        .map(|m| format!("fx/heldout/{m}_mask.png"))
        .collect();
    let mut args = base.to_vec();
    for m in &masks {
        args.extend(["--mask", m.as_str()]);
    }
    args.extend(["--out", "four", "--thin", "--fit", "--overlay"]);
    let report = env.ok(&args);
    assert_eq!(report.lines().count(), 4);
    for k in 0..4 {
        assert!(env.path(&format!("four/thin_{k}.png")).exists());
    }
    let overlay = load_rgb(&env.path("four/overlay.png")).unwrap();
    assert_eq!(overlay.dims(), (48, 48));

    save_mask(&env.path("empty.png"), &BinaryMap::new(48, 48)).unwrap();
    let mut args = base.to_vec();
    args.extend(["--mask", "fx/heldout/0000_support_mask.png", "--mask", "empty.png", "--out", "bad", "--fit"]);
    let out = env.run(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask 1 (empty.png): mask 1 has no foreground pixels"));
    assert!(env.path("bad/map_0.png").exists() && !env.path("bad/map_1.png").exists());
}

#[test]
fn eval_identity_empty_and_mismatch() {
    let env = Env::new().with_fixtures();
    let (pred, gt) = (env.path("pred"), env.path("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    for (i, name) in ["0000_query_mask.png", "0001_query_mask.png"].iter().enumerate() {
        fs::copy(env.path("fx/heldout").join(name), pred.join(format!("{i}.png"))).unwrap();
        fs::copy(env.path("fx/heldout").join(name), gt.join(format!("{i}.png"))).unwrap();
    }
    let report = env.ok(&["eval", "--pred", "pred", "--gt", "gt", "--out", "r1.tsv"]);
    assert!(report.ends_with("mf_ods\t1.000000\n"), "{report}");
    env.ok(&["eval", "--pred", "pred", "--gt", "gt", "--out", "r2.tsv"]);
    assert_eq!(fs::read(env.path("r1.tsv")).unwrap(), fs::read(env.path("r2.tsv")).unwrap());

    for i in 0..2 {
        save_mask(&pred.join(format!("{i}.png")), &BinaryMap::new(48, 48)).unwrap();
    }
    let report = env.ok(&["eval", "--pred", "pred", "--gt", "gt"]);
    assert!(report.ends_with("mf_ods\t0.000000\n"), "{report}");

    fs::remove_file(pred.join("1.png")).unwrap();
    let out = env.run(&["eval", "--pred", "pred", "--gt", "gt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("only in ground truth [\"1\"]"));
}

#[test]
fn thin_and_fit_commands() {
    let env = Env::new().with_fixtures();
    let thick = load_mask(&env.path("fx/raw/0000_mask.png")).unwrap().dilate(1);
    save_mask(&env.path("thick.png"), &thick).unwrap();
    env.ok(&["thin", "--input", "thick.png", "--out", "th", "--bank-out", "bank.txt"]);
    let thin = load_plane(&env.path("th/thick.png")).unwrap();
    let kept = BinaryMap::threshold(&thin, 0.5);
    assert!(kept.count() < thick.count());
    assert!(kept.points().iter().all(|&(r, c)| thick.get(r, c)));
    let bank = fs::read_to_string(env.path("bank.txt")).unwrap();
    assert_eq!(bank.matches("# gabor").count(), 4);

    let out = env.run(&["fit", "--input", "fx/raw/0000_mask.png", "fx/raw/0001_mask.png", "missing.png"]);
    assert!(!out.status.success());
    let report = String::from_utf8(out.stdout).unwrap();
    let tags: Vec<&str> = report.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(tags, ["LS", "CA"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.png"));
}

#[test]
fn unknown_config_keys_exit_with_usage_error() {
    let env = Env::new();
    fs::write(env.path("small.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = env.run(&["fixtures", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field `epoch`"));
}
