//! End-to-end runs of the `clp` binary on small fixtures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clp_transfer::tensor_io::write_checkpoint;
use clp_transfer::{open_checkpoint, transfer_checkpoint, Dtype, TensorSpec, TransferConfig, VocabFormat, Vocabulary};
use tempfile::TempDir;

fn clp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clp"))
        .args(args)
        .env_remove("CLP_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_lines(dir: &Path, name: &str, tokens: &[&str]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, tokens.join("\n") + "\n").unwrap();
    path
}

/// Deterministic pseudo-random values without pulling in an RNG.
fn values(seed: u32, n: usize) -> Vec<f32> {
    let mut x = seed.wrapping_mul(2_654_435_761).max(1);
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 17;
            x ^= x << 5;
            (x % 2001) as f32 / 1000.0 - 1.0
        })
        .collect()
}

fn write_model(path: &Path, rows: usize, hidden: usize, seed: u32) {
    write_checkpoint(
        &[
            TensorSpec::f32(
                "transformer.wte.weight",
                Dtype::F32,
                vec![rows, hidden],
                values(seed, rows * hidden),
            ),
            TensorSpec::f32(
                "transformer.h.0.mlp.weight",
                Dtype::F16,
                vec![hidden, 3],
                values(seed + 1, hidden * 3),
            ),
        ],
        &BTreeMap::new(),
        path,
    )
    .unwrap();
}

struct Desk {
    dir: TempDir,
    source_vocab: PathBuf,
    target_vocab: PathBuf,
    source: PathBuf,
    small: PathBuf,
}

/// 20-token source, 15-token target sharing 8 tokens, hidden sizes 4 and 6.
fn desk() -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let src: Vec<String> = (0..20)
        .map(|i| {
            if i % 2 == 0 {
                format!("w{}", i / 2)
            } else {
                format!("s{i}")
            }
        })
        .collect();
    let tgt: Vec<String> = (0..15)
        .map(|i| if i < 8 { format!("w{}", 7 - i) } else { format!("t{i}") })
        .collect();
    let src: Vec<&str> = src.iter().map(String::as_str).collect();
    let tgt: Vec<&str> = tgt.iter().map(String::as_str).collect();
    let source_vocab = write_lines(dir.path(), "source.txt", &src);
    let target_vocab = write_lines(dir.path(), "target.txt", &tgt);
    let source = dir.path().join("source.safetensors");
    let small = dir.path().join("small.safetensors");
    write_model(&source, 20, 6, 11);
    write_model(&small, 15, 4, 23);
    Desk {
        dir,
        source_vocab,
        target_vocab,
        source,
        small,
    }
}

fn transfer_args<'a>(d: &'a Desk, out: &'a Path) -> Vec<&'a str> {
    vec![
        "transfer",
        "--source-model",
        p(&d.source),
        "--small-target-model",
        p(&d.small),
        "--source-vocab",
        p(&d.source_vocab),
        "--target-vocab",
        p(&d.target_vocab),
        "--out",
        p(out),
    ]
}

#[test]
fn overlap_prints_two_decimals_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_lines(dir.path(), "s.txt", &["a", "b", "c"]);
    let t = write_lines(dir.path(), "t.txt", &["b", "c", "d"]);
    let out = dir.path().join("report");
    let o = clp(&[
        "overlap",
        "--source-vocab",
        p(&s),
        "--target-vocab",
        p(&t),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "66.67%");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("overlap.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["overlap"], 2);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "overlap");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let o = clp(&["overlap", "--source-vocab", p(&s), "--target-vocab", p(&s)]);
    assert_eq!(stdout(&o), "100.00%");
}

#[test]
fn overlap_reads_config_file_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_lines(dir.path(), "s.txt", &["a", "b", "c"]);
    let t = write_lines(dir.path(), "t.txt", &["b", "c", "d", "e"]);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "source_vocab = {}\ntarget-vocab = {}\ndenominator = target\n",
            p(&s),
            p(&t)
        ),
    )
    .unwrap();
    assert_eq!(stdout(&clp(&["overlap", "--config", p(&cfg)])), "50.00%");
    assert_eq!(
        stdout(&clp(&["overlap", "--config", p(&cfg), "--denominator", "union"])),
        "40.00%"
    );

    std::fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(code(&clp(&["overlap", "--config", p(&cfg)])), 2);
}

#[test]
fn overlap_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_lines(dir.path(), "s.txt", &["a", "a"]);
    let t = write_lines(dir.path(), "t.txt", &["a"]);
    let o = clp(&["overlap", "--source-vocab", p(&s), "--target-vocab", p(&t)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("s.txt"));
    assert_eq!(code(&clp(&["overlap", "--target-vocab", p(&t)])), 2);
}

#[test]
fn knn_audit_scores_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.safetensors");
    let b = dir.path().join("b.safetensors");
    let short = dir.path().join("short.safetensors");
    write_model(&a, 40, 6, 1);
    write_model(&b, 40, 3, 2);
    write_model(&short, 30, 3, 3);
    let out = dir.path().join("audit");

    let o = clp(&["knn-audit", "--a", p(&a), "--b", p(&a), "--k", "10"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "1.0000");

    let o = clp(&["knn-audit", "--a", p(&a), "--b", p(&b), "--k", "5", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let score: f64 = stdout(&o).parse().unwrap();
    assert!((0.0..=1.0).contains(&score));
    let csv = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let total: usize = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 40);
    assert!(out.join("manifest.json").exists());

    assert_eq!(code(&clp(&["knn-audit", "--a", p(&a), "--b", p(&a), "--k", "40"])), 2);
    assert_eq!(
        code(&clp(&["knn-audit", "--a", p(&a), "--b", p(&short), "--k", "3"])),
        4
    );
    let missing = dir.path().join("nope.safetensors");
    assert_eq!(
        code(&clp(&["knn-audit", "--a", p(&a), "--b", p(&missing), "--k", "3"])),
        3
    );
    assert_eq!(
        code(&clp(&[
            "knn-audit",
            "--a",
            p(&a),
            "--b",
            p(&b),
            "--k",
            "3",
            "--tensor",
            "lm_head"
        ])),
        3
    );
}

#[test]
fn transfer_matches_library_and_is_idempotent() {
    let d = desk();
    let out = d.dir.path().join("out/model.safetensors");
    let o = clp(&transfer_args(&d, &out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("copied 8, constructed 7"));
    let first = std::fs::read(&out).unwrap();

    let sv = Vocabulary::load(&d.source_vocab, VocabFormat::Lines).unwrap();
    let tv = Vocabulary::load(&d.target_vocab, VocabFormat::Lines).unwrap();
    let source = open_checkpoint(&d.source).unwrap();
    let small = open_checkpoint(&d.small).unwrap();
    let expected = transfer_checkpoint(&source, Some(&small), &sv, &tv, &TransferConfig::default()).unwrap();
    let written = open_checkpoint(&out).unwrap();
    let want = expected.to_bundle().unwrap();
    assert_eq!(written.payload_bytes().unwrap(), want.payload_bytes().unwrap());

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.dir.path().join("out/model.safetensors.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["transfer"]["constructed"], 7);
    let manifest_path = d.dir.path().join("out/model.safetensors.manifest.json");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
    assert_eq!(
        manifest["config"]["transfer"]["weight_mode"]["mode"],
        "clamped-normalized"
    );

    let first_manifest = std::fs::read(&manifest_path).unwrap();
    assert_eq!(code(&clp(&transfer_args(&d, &out))), 0);
    assert_eq!(std::fs::read(&out).unwrap(), first);
    assert_eq!(std::fs::read(&manifest_path).unwrap(), first_manifest);

    let mut seq = transfer_args(&d, &out);
    seq.extend(["--execution", "sequential"]);
    assert_eq!(code(&clp(&seq)), 0);
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn full_overlap_reproduces_source_bytes() {
    let d = desk();
    let out = d.dir.path().join("same.safetensors");
    let mut args = transfer_args(&d, &out);
    args[6] = p(&d.source_vocab);
    args[8] = p(&d.source_vocab);
    args[4] = p(&d.source);
    let o = clp(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&d.source).unwrap());
}

#[test]
fn random_baseline_is_seeded() {
    let d = desk();
    let run = |name: &str, seed: &str| {
        let out = d.dir.path().join(name);
        let o = clp(&[
            "transfer",
            "--source-model",
            p(&d.source),
            "--source-vocab",
            p(&d.source_vocab),
            "--target-vocab",
            p(&d.target_vocab),
            "--out",
            p(&out),
            "--baseline",
            "random",
            "--seed",
            seed,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let a = run("a.safetensors", "7");
    let b = run("b.safetensors", "7");
    let c = run("c.safetensors", "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn failures_leave_no_outputs() {
    let d = desk();
    // small model with the wrong number of rows for the target vocabulary
    write_model(&d.small, 14, 4, 23);
    let out = d.dir.path().join("bad.safetensors");
    let o = clp(&transfer_args(&d, &out));
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("rows"));
    let leftovers: Vec<_> = std::fs::read_dir(d.dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("bad"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");

    let mut args = transfer_args(&d, &out);
    args.extend(["--weight-mode", "softmax:-1"]);
    assert_eq!(code(&clp(&args)), 2);
    let mut args = transfer_args(&d, &out);
    args.extend(["--head", "untied"]);
    assert_eq!(code(&clp(&args)), 2);

    // disjoint vocabularies: nothing to copy from
    let other = write_lines(d.dir.path(), "other.txt", &["x", "y", "z"]);
    let mut args = transfer_args(&d, &out);
    args[8] = p(&other);
    assert_eq!(code(&clp(&args)), 4);
    assert!(!out.exists());
}
