use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const TABLE: &str = include_str!("../../core/tests/data/bearing_capacity.tsv");

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scarcenet"));
    cmd.env_remove("SCARCENET_SEED").env("SOURCE_DATE_EPOCH", "1700000000");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn dataset_show_prints_the_table() {
    let out = ok(&["dataset", "show"]);
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "B_m\tD_m\tL_over_B\tgamma_kN_m3\tphi_deg\tqu_kPa");
    let rest: Vec<&str> = lines.collect();
    assert_eq!(rest, TABLE.lines().collect::<Vec<_>>());
}

#[test]
fn exported_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("nested/gandhi.csv");
    ok(&["dataset", "export", "--out", csv.to_str().unwrap()]);
    let again = ok(&["dataset", "show", "--data", csv.to_str().unwrap()]);
    assert_eq!(again, ok(&["dataset", "show"]));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    let m = model.to_str().unwrap();
    for args in [
        vec!["train", "--layout", "0x5", "--out", m],
        vec!["train", "--layout", "5", "--trainer", "sgd", "--out", m],
        vec!["train", "--layout", "5"],
        vec!["exp2", "--depths", "x"],
        vec!["bogus"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_model_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    std::fs::write(&input, "B_m,D_m,L_over_B,gamma_kN_m3,phi_deg\n1,0.5,2,16,35\n").unwrap();
    let out = run(&[
        "predict",
        "--model",
        dir.path().join("absent.json").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        dir.path().join("p.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn predict_reproduces_training_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let m = model.to_str().unwrap();
    ok(&["train", "--layout", "6x4", "--trainer", "lm", "--seed", "3", "--out", m]);
    let test_csv = std::fs::read_to_string(dir.path().join("model.json.test_predictions.csv")).unwrap();
    let rows: Vec<Vec<&str>> = test_csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 45);
    assert_eq!(rows[0][6], "prediction_kPa");

    let input: String = rows
        .iter()
        .map(|r| r[..6].join(",") + "\n")
        .collect();
    let input_path = dir.path().join("in.csv");
    std::fs::write(&input_path, input).unwrap();
    let out = dir.path().join("pred.csv");
    ok(&[
        "predict",
        "--model",
        m,
        "--input",
        input_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read_to_string(out).unwrap(), test_csv);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let common = ["train", "--layout", "4x3", "--trainer", "lm", "--max-epochs", "5", "--out"];
    let mut args = common.to_vec();
    args.extend([a.to_str().unwrap(), "--seed", "11"]);
    ok(&args);
    let out = bin()
        .args(common)
        .arg(&b)
        .env("SCARCENET_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn exp2_run_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let stdout = ok(&[
        "exp2",
        "--neurons",
        "120",
        "--depths",
        "5",
        "--replicates",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("n120/depth5"));
    let files = read_dir(&out);
    let names: Vec<&str> = files.keys().map(String::as_str).collect();
    assert_eq!(names, ["best_predictions.csv", "exp2_table.csv", "run_meta.json"]);
    let best = String::from_utf8(files["best_predictions.csv"].clone()).unwrap();
    assert_eq!(best.lines().next().unwrap(), "target,prediction,E_a");
    assert_eq!(best.lines().count(), 45);
}

#[test]
fn markdown_format_is_selectable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("md");
    ok(&[
        "exp2", "--neurons", "90", "--depths", "2", "--replicates", "1", "--format", "markdown", "--out",
        out.to_str().unwrap(),
    ]);
    let table = std::fs::read_to_string(out.join("exp2_table.md")).unwrap();
    assert!(table.starts_with('|'));
}

#[test]
fn repeated_and_parallel_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let out = dir.path().join(name);
        ok(&[
            "exp2", "--neurons", "90", "--depths", "1,3", "--replicates", "3", "--seed", "5", "--jobs", jobs,
            "--out", out.to_str().unwrap(),
        ]);
        outputs.push(read_dir(&out));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}
