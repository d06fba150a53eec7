//! Acceptance criterion 8: `gen-data`, `train`, `sample` and `score` are
//! bit-deterministic in their file outputs under fixed seeds across two
//! consecutive runs (including a multi-threaded training run).

use std::path::{Path, PathBuf};
use std::process::Command;

fn run_ok(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_layoutvae"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("lvae-acceptance")
        .join(format!("{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn file_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|_| panic!("missing {}", path.display()))
}

#[test]
fn acceptance_criterion_8_determinism() {
    let root = fresh_dir("determinism");
    let rules = root.join("rules.txt");
    std::fs::write(&rules, "train = 64\nval = 16\ntest = 16\n").unwrap();
    let cfg = root.join("train.cfg");
    std::fs::write(
        &cfg,
        "epochs = 2\nbatch_size = 16\nhidden = 24\nlatent_dim = 8\n",
    )
    .unwrap();

    let campaign = |tag: &str| -> Vec<(String, Vec<u8>)> {
        let base = root.join(tag);
        std::fs::create_dir_all(&base).unwrap();
        let data = base.join("data");
        run_ok(&[
            "gen-data",
            "--rules",
            rules.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            data.to_str().unwrap(),
        ]);
        let count_ckpt = base.join("count.lvae");
        let bbox_ckpt = base.join("bbox.lvae");
        for (model, ckpt) in [("count", &count_ckpt), ("bbox", &bbox_ckpt)] {
            run_ok(&[
                "train",
                "--model",
                model,
                "--data",
                data.to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                ckpt.to_str().unwrap(),
                "--threads",
                "2",
            ]);
        }
        let samples = base.join("samples");
        run_ok(&[
            "sample",
            "--count-ckpt",
            count_ckpt.to_str().unwrap(),
            "--bbox-ckpt",
            bbox_ckpt.to_str().unwrap(),
            "--labels",
            "1,2,4",
            "--n",
            "6",
            "--seed",
            "5",
            "--out",
            samples.to_str().unwrap(),
        ]);
        let scores = base.join("scores.csv");
        run_ok(&[
            "score",
            "--bbox-ckpt",
            bbox_ckpt.to_str().unwrap(),
            "--layouts",
            data.join("test.jsonl").to_str().unwrap(),
            "--mode",
            "importance",
            "--samples",
            "32",
            "--seed",
            "9",
            "--out",
            scores.to_str().unwrap(),
        ]);

        [
            ("gen-data train.jsonl", data.join("train.jsonl")),
            ("gen-data manifest.json", data.join("manifest.json")),
            ("train count.lvae", count_ckpt.clone()),
            ("train count.report.csv", base.join("count.report.csv")),
            ("train bbox.lvae", bbox_ckpt.clone()),
            ("sample samples.jsonl", samples.join("samples.jsonl")),
            ("score scores.csv", scores.clone()),
        ]
        .into_iter()
        .map(|(name, path)| (name.to_string(), file_bytes(&path)))
        .collect()
    };

    let first = campaign("run-a");
    let second = campaign("run-b");
    let mut mismatches: Vec<String> = Vec::new();
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        if a != b {
            mismatches.push(name.clone());
        }
    }

    let passed = mismatches.is_empty();
    println!(
        "[{}] criterion 8: command determinism: {} files compared across two runs{}",
        if passed { "PASS" } else { "FAIL" },
        first.len(),
        if passed {
            String::from(", all byte-identical")
        } else {
            format!(", mismatches: {mismatches:?}")
        }
    );
    assert!(passed, "non-deterministic outputs: {mismatches:?}");
}
