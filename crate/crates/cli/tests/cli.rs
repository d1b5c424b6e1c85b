use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ttpp::metrics::ReportTable;
use ttpp::training::History;
use ttpp_cli::outputs::{read_attention, read_param_counts, Manifest, CHECKPOINT_FILE, HISTORY_FILE, MANIFEST_FILE};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ttpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttpp"))
        .args(args)
        .current_dir(root())
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Smoke config redirected into `dir`.
fn smoke(dir: &Path, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = vec!["-c".into(), "configs/smoke.conf".into()];
    v.push("--set".into());
    v.push(format!("data.dir={}", dir.join("data").display()));
    v.push("--output-dir".into());
    v.push(dir.join("run").display().to_string());
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_with(cmd: &str, args: &[String]) -> Output {
    let mut all = vec![cmd];
    all.extend(args.iter().map(String::as_str));
    ttpp(&all)
}

#[test]
fn eval_without_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with("eval", &smoke(dir.path(), &["--set", "data.source=synthetic"]));
    assert!(!out.status.success());
    let expected = dir.path().join("run").join(CHECKPOINT_FILE);
    assert!(
        stderr(&out).contains(&expected.display().to_string()),
        "{}",
        stderr(&out)
    );
}

#[test]
fn smoke_pipeline_outputs_reparse() {
    let dir = tempfile::tempdir().unwrap();
    let args = smoke(dir.path(), &[]);
    ok(&run_with("gen", &args));
    assert_eq!(fs::read_dir(dir.path().join("data/train")).unwrap().count(), 8);
    ok(&run_with("train", &args));
    let run = dir.path().join("run");

    let history = History::read_csv(run.join(HISTORY_FILE)).unwrap();
    assert_eq!(history.len(), 5);
    assert_eq!(history.to_csv(), fs::read_to_string(run.join(HISTORY_FILE)).unwrap());
    let manifest = Manifest::read(&run.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.config["model.horizon"], "4");
    assert_eq!(manifest.train_sequences, 8);

    for metric in ["cap", "map", "acc"] {
        let stdout = ok(&run_with(
            "eval",
            &[args.clone(), vec!["--metric".into(), metric.into()]].concat(),
        ));
        let path = run.join(format!("report_{metric}.csv"));
        let table = ReportTable::read_csv(&path).unwrap();
        assert_eq!(table.horizon_labels, ["0.25s", "0.5s", "0.75s", "1.0s"]);
        assert_eq!(table.to_csv(), stdout);
        assert!(table.rows[0].values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    ok(&run_with(
        "dump-attention",
        &[args.clone(), vec!["--limit".into(), "1".into()]].concat(),
    ));
    let rows = read_attention(&run.join("attention.csv")).unwrap();
    // 48 chunks, T = 8: anchors 7..=47, 4 heads, 7 memory slots.
    assert_eq!(rows.len(), 41 * 4 * 7);
    for chunk in rows.chunks(7) {
        let s: f64 = chunk.iter().map(|r| r.weight).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn csv_feature_files_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let args = smoke(dir.path(), &["--set", "train.epochs=1"]);
    ok(&run_with("gen", &[args.clone(), vec!["--csv".into()]].concat()));
    assert!(dir.path().join("data/test/test0000.csv").is_file());
    ok(&run_with("train", &args));
}

#[test]
fn training_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = smoke(
        dir.path(),
        &["--set", "data.source=synthetic", "--set", "train.epochs=2"],
    );
    let read = || {
        ok(&run_with("train", &args));
        [HISTORY_FILE, CHECKPOINT_FILE, MANIFEST_FILE].map(|f| fs::read(dir.path().join("run").join(f)).unwrap())
    };
    assert_eq!(read(), read());
}

#[test]
fn grid_has_nine_pairs_and_the_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let args = smoke(
        dir.path(),
        &[
            "--set",
            "data.source=synthetic",
            "--set",
            "train.epochs=1",
            "--set",
            "data.n_train=2",
            "--set",
            "data.n_test=2",
            "--threads",
            "2",
        ],
    );
    let stdout = ok(&run_with("grid", &args));
    let table = ReportTable::read_csv(&dir.path().join("run/grid_acc.csv")).unwrap();
    assert_eq!(table.to_csv(), stdout);
    let names: Vec<&str> = table.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names.len(), 10);
    for agg in ["Conv1D", "LSTM", "TTM"] {
        for pred in ["LSTM", "SSP", "PPM"] {
            assert!(names.contains(&format!("{agg}-{pred}").as_str()), "{names:?}");
        }
    }
    assert_eq!(names[9], "TTM-PPM (w/o FP)");
}

#[test]
fn param_count_puts_ttpp_below_ed_lstm() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("counts.csv");
    ok(&ttpp(&[
        "param-count",
        "-c",
        "configs/desk.conf",
        "--out",
        path.to_str().unwrap(),
    ]));
    let rows = read_param_counts(&path).unwrap();
    let get = |m: &str| rows.iter().find(|r| r.method == m).unwrap().params;
    assert!(get("TTM-PPM") < get("LSTM-LSTM"));
}

#[test]
fn flags_override_file_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(
        &conf,
        "train.epochs = 1\nmodel.horizon = 3\ndata.source = synthetic\ndata.n_train = 2\n",
    )
    .unwrap();
    let run = dir.path().join("out");
    ok(&ttpp(&[
        "train",
        "-c",
        conf.to_str().unwrap(),
        "--set",
        "model.horizon=2",
        "--output-dir",
        run.to_str().unwrap(),
    ]));
    let m = Manifest::read(&run.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.model.horizon, 2);
    assert_eq!(m.train.epochs, 1);
    assert_eq!(m.model.d_model, 16);
}

#[test]
fn bad_input_exits_nonzero_with_a_message() {
    let unknown = ttpp(&["frobnicate"]);
    assert!(!unknown.status.success());

    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "seed = 1\nmodel.widht = 8\n").unwrap();
    let out = ttpp(&["train", "-c", conf.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bad.conf:2"), "{}", stderr(&out));

    let out = ttpp(&["param-count", "--set", "model.n_heads=3"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("n_heads"), "{}", stderr(&out));

    let missing = ttpp(&["train", "-c", "no/such/file.conf"]);
    assert!(stderr(&missing).contains("no/such/file.conf"));
}

#[test]
fn mismatched_feature_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let args = smoke(dir.path(), &[]);
    ok(&run_with("gen", &args));
    let out = run_with(
        "train",
        &[args, vec!["--set".into(), "model.d_model=8".into()]].concat(),
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("d_model 16"), "{}", stderr(&out));
}
