use std::path::Path;
use std::process::{Command, Output};

fn medrec(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medrec"))
        .args(args)
        .env("MEDREC_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn verify_passes_and_mutation_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = medrec(
        tmp.path(),
        &["verify", "--instances", "30", "--cases", "200"],
    );
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(String::from_utf8_lossy(&ok.stdout)
        .lines()
        .all(|l| l.starts_with("PASS")));
    let bad = medrec(
        tmp.path(),
        &["verify", "--instances", "30", "--cases", "200", "--mutate"],
    );
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL invariance"));
}

#[test]
fn usage_and_io_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&medrec(tmp.path(), &["train", "--no-such-flag"])), 2);
    assert_eq!(code(&medrec(tmp.path(), &["train", "--algo", "ppo"])), 2);
    assert_eq!(
        code(&medrec(
            tmp.path(),
            &["train", "--preset", "smoke", "--group-size", "1"]
        )),
        2
    );
    let missing = tmp.path().join("missing");
    assert_eq!(
        code(&medrec(tmp.path(), &["eval", "--run", path(&missing)])),
        3
    );
    assert_eq!(code(&medrec(tmp.path(), &["--help"])), 0);
}

#[test]
fn gen_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let gen = medrec(
        tmp.path(),
        &[
            "gen-data",
            "--preset",
            "smoke",
            "--seed",
            "2",
            "--out",
            path(&data),
        ],
    );
    assert_eq!(code(&gen), 0);
    for f in [
        "cohort.jsonl",
        "ddi.json",
        "splits.json",
        "embeddings.bin",
        "config.json",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }

    let run = tmp.path().join("run");
    let train = medrec(
        tmp.path(),
        &[
            "train",
            "--preset",
            "smoke",
            "--seed",
            "2",
            "--data",
            path(&data),
            "--updates",
            "3",
            "--alpha",
            "10",
            "--out",
            path(&run),
        ],
    );
    assert_eq!(
        code(&train),
        0,
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    for f in [
        "cls.ckpt",
        "list_sft.ckpt",
        "list.ckpt",
        "training_curve.csv",
        "config.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("training_curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let eval = medrec(tmp.path(), &["eval", "--run", path(&run)]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let mut keys: Vec<&str> = metrics
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        ["ddi", "f1", "jaccard", "mean_med", "n_patients", "refusal"]
    );
    let n = metrics["n_patients"].as_u64().unwrap() as usize;
    assert_eq!(
        std::fs::read_to_string(run.join("recommendations.jsonl"))
            .unwrap()
            .lines()
            .count(),
        n
    );

    let teacher_dir = tmp.path().join("teacher");
    let teacher = medrec(
        tmp.path(),
        &[
            "eval",
            "--run",
            path(&run),
            "--teacher",
            "--out",
            path(&teacher_dir),
        ],
    );
    assert_eq!(code(&teacher), 0);
    let t: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(teacher_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(t["jaccard"].as_f64(), Some(1.0));
}

#[test]
fn lambda_zero_step_wise_reproduces_standard_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let common = ["--preset", "smoke", "--seed", "5", "--updates", "4"];
    let run = |algo: &str, out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--algo", algo, "--out", path(out)];
        args.extend(common);
        args.extend(extra);
        assert_eq!(code(&medrec(tmp.path(), &args)), 0);
        std::fs::read(out.join("training_curve.csv")).unwrap()
    };
    assert_eq!(
        run("grpo", &a, &[]),
        run("step-grpo", &b, &["--lambda", "0"])
    );
}

#[test]
fn sweep_writes_one_row_per_alpha_under_the_run_root() {
    let tmp = tempfile::tempdir().unwrap();
    let out = medrec(
        tmp.path(),
        &[
            "sweep-alpha",
            "--preset",
            "smoke",
            "--seed",
            "1",
            "--alphas",
            "0,10,50",
            "--updates",
            "2",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("sweep-seed1").join("tradeoff.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,jaccard,f1,ddi");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("50,"));
}

#[test]
fn tiny_cohorts_generate_quickly_and_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = |out: &Path| {
        let args = [
            "gen-data",
            "--preset",
            "smoke",
            "--n-drugs",
            "10",
            "--n-patients",
            "20",
            "--seed",
            "3",
            "--out",
            path(out),
        ];
        let started = std::time::Instant::now();
        assert_eq!(code(&medrec(tmp.path(), &args)), 0);
        assert!(started.elapsed().as_secs_f64() < 1.0);
        std::fs::read(out.join("cohort.jsonl")).unwrap()
    };
    assert_eq!(gen(&tmp.path().join("a")), gen(&tmp.path().join("b")));
}
