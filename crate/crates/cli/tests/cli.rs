use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn saelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saelab"))
        .args(args)
        .env_remove("SAELAB_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = saelab(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = saelab(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn tsv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

fn metric(table: &str, name: &str) -> f64 {
    table
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name}\t")))
        .unwrap_or_else(|| panic!("no {name} in {table}"))
        .parse()
        .unwrap()
}

const SMALL_SCALE: &str = "architecture = scale\nd_model = 16\nn_experts = 4\nexpert_width = 8\ne_active = 2\nk = 4\n\
alpha = 0.01\nscaling_mode = mean\nlearn_rate = 0.005\nbatch_size = 64\nn_steps = 300\nlog_every = 50\nseed = 3\n";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        ok(&[
            "gen-data",
            "--d-model",
            "16",
            "--true-features",
            "48",
            "--tokens",
            "3000",
            "--seed",
            "1",
            "--concept-groups",
            "3",
            "--out",
            s(&f.path("data")),
        ]);
        fs::write(f.path("scale.cfg"), SMALL_SCALE).unwrap();
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn data(&self) -> PathBuf {
        self.path("data/activations.saea")
    }

    fn train_scale(&self, out: &str) -> PathBuf {
        let dir = self.path(out);
        ok(&[
            "train",
            "--config",
            s(&self.path("scale.cfg")),
            "--data",
            s(&self.data()),
            "--holdout",
            "500",
            "--out",
            s(&dir),
        ]);
        dir
    }
}

#[test]
fn gen_data_is_deterministic_and_prints_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let stdout = ok(&[
            "gen-data",
            "--d-model",
            "32",
            "--true-features",
            "128",
            "--tokens",
            "50000",
            "--seed",
            "7",
            "--out",
            s(&out),
        ]);
        (stdout, out)
    };
    let (a, da) = run("a");
    let (b, db) = run("b");
    assert_eq!(a, b);
    assert!(a.starts_with("tokens=50000 d_model=32 sha256="), "{a}");
    assert_eq!(a.trim().rsplit('=').next().unwrap(), sha(&da.join("activations.saea")));
    for f in ["activations.saea", "ground_truth.saeg"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_data_usage_errors_exit_2() {
    let err = fails(&["gen-data", "--d-model", "32", "--tokens", "10", "--seed", "1"], 2);
    assert!(err.contains("--true-features") && err.contains("Usage"), "{err}");
    fails(
        &[
            "gen-data",
            "--d-model",
            "32",
            "--true-features",
            "8",
            "--tokens",
            "10",
            "--seed",
            "1",
            "--values",
            "bogus",
        ],
        2,
    );
}

#[test]
fn train_writes_manifest_and_is_reproducible() {
    let f = Fixture::new();
    let a = f.train_scale("a");
    let b = f.train_scale("b");
    for file in ["checkpoint.saec", "init.saec", "steps.jsonl", "config.cfg"] {
        assert_eq!(sha(&a.join(file)), sha(&b.join(file)), "{file}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["train_tokens"], 2500);
    assert_eq!(manifest["holdout_tokens"], 500);
    assert_eq!(manifest["dataset_sha256"], sha(&f.data()));
    let checkpoints = manifest["checkpoints"].as_array().unwrap();
    assert_eq!(checkpoints[1]["path"], "checkpoint.saec");
    assert_eq!(checkpoints[1]["sha256"], sha(&a.join("checkpoint.saec")));
    assert_eq!(manifest["files"].as_array().unwrap().len(), 2);
    let steps = fs::read_to_string(a.join("steps.jsonl")).unwrap();
    let last: Value = serde_json::from_str(steps.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"], 299);
    assert_eq!(steps.lines().count(), 7);
}

#[test]
fn train_config_errors() {
    let f = Fixture::new();
    fs::write(f.path("no_alpha.cfg"), SMALL_SCALE.replace("alpha = 0.01\n", "")).unwrap();
    let err = fails(
        &["train", "--config", s(&f.path("no_alpha.cfg")), "--data", s(&f.data())],
        2,
    );
    assert!(err.contains("alpha required"), "{err}");
    let err = fails(&["train", "--preset", "no_such_preset", "--data", s(&f.data())], 2);
    assert!(err.contains("no_such_preset"), "{err}");
    fails(
        &["train", "--config", s(&f.path("missing.cfg")), "--data", s(&f.data())],
        3,
    );
    // Preset built for d_model 32 on 16-dimensional data.
    fails(
        &[
            "train",
            "--preset",
            "scale_e2",
            "--data",
            s(&f.data()),
            "--out",
            s(&f.path("x")),
        ],
        5,
    );
}

#[test]
fn divergence_exits_4_with_last_finite_report() {
    let f = Fixture::new();
    let err = fails(
        &[
            "train",
            "--config",
            s(&f.path("scale.cfg")),
            "--data",
            s(&f.data()),
            "--set",
            "learn_rate=1e300",
            "--out",
            s(&f.path("div")),
        ],
        4,
    );
    assert!(err.contains("diverged at step"), "{err}");
    assert!(err.contains("\"recon_loss\""), "{err}");
}

#[test]
fn eval_reports_and_error_codes() {
    let f = Fixture::new();
    let run = f.train_scale("run");
    let triples = f.path("losses.txt");
    fs::write(&triples, "l_zero=10 l_recon=4 l_orig=2\n").unwrap();
    let ck = run.join("checkpoint.saec");
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&f.data()),
        "--loss-triples",
        s(&triples),
        "--holdout",
        "500",
        "--out",
        s(&f.path("ev")),
    ]);
    assert_eq!(metric(&out, "loss_recovered"), 0.75);
    assert_eq!(metric(&out, "n_tokens"), 500.0);
    assert_eq!(fs::read_to_string(f.path("ev/eval.tsv")).unwrap(), out);
    let json: Value = serde_json::from_str(fs::read_to_string(f.path("ev/eval.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(json["loss_recovered"], 0.75);

    // Bare numbers in bridge order: l_orig, l_recon, l_zero.
    fs::write(&triples, "2 4 10\n").unwrap();
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&f.data()),
        "--loss-triples",
        s(&triples),
        "--out",
        s(&f.path("ev2")),
    ]);
    assert_eq!(metric(&out, "loss_recovered"), 0.75);
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&f.data()),
        "--out",
        s(&f.path("ev3")),
    ]);
    assert!(!out.contains("loss_recovered"));

    fails(
        &["eval", "--checkpoint", s(&f.path("nope.saec")), "--data", s(&f.data())],
        3,
    );
    ok(&[
        "gen-data",
        "--d-model",
        "8",
        "--true-features",
        "16",
        "--tokens",
        "100",
        "--seed",
        "1",
        "--out",
        s(&f.path("d8")),
    ]);
    let err = fails(
        &[
            "eval",
            "--checkpoint",
            s(&ck),
            "--data",
            s(&f.path("d8/activations.saea")),
            "--out",
            s(&f.path("ev4")),
        ],
        5,
    );
    assert!(err.contains("16") && err.contains('8'), "{err}");
}

#[test]
fn trained_checkpoint_beats_untrained_on_holdout() {
    let f = Fixture::new();
    let run = f.train_scale("run");
    let mse = |ck: &str| {
        let out = ok(&[
            "eval",
            "--checkpoint",
            s(&run.join(ck)),
            "--data",
            s(&f.data()),
            "--holdout",
            "500",
            "--out",
            s(&f.path(ck)),
        ]);
        metric(&out, "mse")
    };
    let (before, after) = (mse("init.saec"), mse("checkpoint.saec"));
    assert!(after < before, "trained {after} vs untrained {before}");
}

#[test]
fn analyze_tables() {
    let f = Fixture::new();
    let run = f.train_scale("run");
    let ck = run.join("checkpoint.saec");
    let out = f.path("an");
    ok(&[
        "analyze",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&f.data()),
        "--cdf",
        "--overlap",
        "--similarity",
        "--redundancy",
        "--intra-inter",
        "--max-tokens",
        "300",
        "--out",
        s(&out),
    ]);
    let cdf: Vec<f64> = tsv(&out.join("expert_cdf.tsv"))
        .iter()
        .map(|r| r[1].parse().unwrap())
        .collect();
    assert_eq!(cdf.len(), 4);
    assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*cdf.last().unwrap(), 1.0);
    let bins: u64 = tsv(&out.join("overlap_hist.tsv"))
        .iter()
        .map(|r| r[1].parse::<u64>().unwrap())
        .sum();
    assert_eq!(bins, 300 * 299 / 2);
    let sim = fs::read_to_string(out.join("similarity.tsv")).unwrap();
    assert!((0.0..=1.0).contains(&metric(&sim, "activation_similarity")));
    assert_eq!(tsv(&out.join("intra_per_expert.tsv")).len(), 4);
    for file in ["redundancy.tsv", "intra_inter.tsv"] {
        assert!(out.join(file).exists(), "{file}");
    }

    // Restricting to one concept group still yields a valid CDF.
    let g = f.path("g0");
    ok(&[
        "analyze",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&f.data()),
        "--cdf",
        "--label",
        "g0",
        "--out",
        s(&g),
    ]);
    assert!(g.join("expert_cdf.tsv").exists());
    fails(
        &[
            "analyze",
            "--checkpoint",
            s(&ck),
            "--data",
            s(&f.data()),
            "--cdf",
            "--label",
            "zzz",
            "--out",
            s(&g),
        ],
        2,
    );
}

#[test]
fn analyze_rejects_expert_analyses_on_dense() {
    let f = Fixture::new();
    let cfg = f.path("dense.cfg");
    fs::write(
        &cfg,
        "architecture = dense\nd_model = 16\nexpert_width = 32\nk = 4\nalpha = 0\nn_steps = 20\nbatch_size = 32\n",
    )
    .unwrap();
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data()),
        "--out",
        s(&f.path("dense")),
    ]);
    let ck = f.path("dense/checkpoint.saec");
    for flag in ["--cdf", "--intra-inter"] {
        let err = fails(
            &[
                "analyze",
                "--checkpoint",
                s(&ck),
                "--data",
                s(&f.data()),
                flag,
                "--out",
                s(&f.path("x")),
            ],
            6,
        );
        assert!(err.contains("architecture lacks experts"), "{err}");
    }
    ok(&[
        "analyze",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&f.data()),
        "--redundancy",
        "--overlap",
        "--out",
        s(&f.path("y")),
    ]);
}

#[test]
fn compare_produces_delta_table() {
    let f = Fixture::new();
    let run = f.train_scale("run");
    for ck in ["init.saec", "checkpoint.saec"] {
        ok(&[
            "eval",
            "--checkpoint",
            s(&run.join(ck)),
            "--data",
            s(&f.data()),
            "--out",
            s(&f.path(ck)),
        ]);
    }
    let a = f.path("init.saec/eval.jsonl");
    let b = f.path("checkpoint.saec/eval.jsonl");
    let out = ok(&["analyze", "--compare", s(&a), s(&b), "--out", s(&f.path("cmp"))]);
    assert!(out.starts_with("metric\ta\tb\tabs_delta\trel_delta\n"));
    let rows = tsv(&f.path("cmp/compare.tsv"));
    let mse = rows.iter().find(|r| r[0] == "mse").unwrap();
    let (va, vb): (f64, f64) = (mse[1].parse().unwrap(), mse[2].parse().unwrap());
    assert_eq!(mse[3].parse::<f64>().unwrap(), vb - va);
    assert_eq!(mse[4].parse::<f64>().unwrap(), (vb - va) / va.abs());
    fs::write(f.path("junk.jsonl"), "not json\n").unwrap();
    fails(
        &[
            "analyze",
            "--compare",
            s(&a),
            s(&f.path("junk.jsonl")),
            "--out",
            s(&f.path("cmp2")),
        ],
        3,
    );
}

#[test]
fn out_dir_defaults_from_environment() {
    let f = Fixture::new();
    let target = f.path("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_saelab"))
        .args([
            "gen-data",
            "--d-model",
            "4",
            "--true-features",
            "8",
            "--tokens",
            "50",
            "--seed",
            "2",
        ])
        .env("SAELAB_OUT_DIR", &target)
        .current_dir(f.dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("activations.saea").exists());
    assert!(!f.path("saelab-out").exists());
}

#[test]
fn commands_are_idempotent() {
    let f = Fixture::new();
    let run = f.train_scale("run");
    let ck = run.join("checkpoint.saec");
    let args = |out: &Path| {
        vec![
            "analyze".to_string(),
            "--checkpoint".into(),
            s(&ck).into(),
            "--data".into(),
            s(&f.data()).into(),
            "--intra-inter".into(),
            "--overlap".into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    let (a, b) = (f.path("a1"), f.path("a2"));
    for out in [&a, &b] {
        let v = args(out);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for file in ["intra_inter.tsv", "intra_per_expert.tsv", "overlap_hist.tsv"] {
        assert_eq!(sha(&a.join(file)), sha(&b.join(file)), "{file}");
    }
}

/// Pilot runs of this preset (pilots/results.tsv) ended between 0.0080 and
/// 0.0093; the bound leaves 25% over the worst seed.
const SCALE_E2_FINAL_RECON_BOUND: f64 = 0.0116;

#[test]
fn scale_e2_preset_trains_on_default_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-data",
        "--d-model",
        "32",
        "--true-features",
        "128",
        "--tokens",
        "50000",
        "--seed",
        "0",
        "--out",
        s(&data),
    ]);
    let out = ok(&[
        "train",
        "--preset",
        "scale_e2",
        "--data",
        s(&data.join("activations.saea")),
        "--holdout",
        "5000",
        "--out",
        s(&dir.path().join("run")),
    ]);
    let report: Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert_eq!(report["step"], 5999);
    let recon = report["recon_loss"].as_f64().unwrap();
    assert!(recon < SCALE_E2_FINAL_RECON_BOUND, "final recon_loss {recon}");
    assert!(out.lines().nth(1).unwrap().starts_with("checkpoint sha256="));
}
