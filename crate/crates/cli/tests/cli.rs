use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use whvi::bnn::{Model, Targets};
use whvi_cli::checkpoint::Checkpoint;
use whvi_cli::config::{read_json, RunConfig};
use whvi_cli::data::{load_csv, Task};
use whvi_cli::synth::teacher_classification;
use whvi_cli::CliError;

fn whvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_whvi")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 60 rows, 3 features, labels in {0, 1, 2}.
fn class_csv(dir: &Path) -> PathBuf {
    let data = teacher_classification(60, 3, 3, 4.0, 11);
    let Targets::Labels(labels) = &data.y else { unreachable!() };
    let mut text = String::from("a,b,c,label\n");
    for (i, l) in labels.iter().enumerate() {
        let row: Vec<String> = data.x[i * 3..(i + 1) * 3].iter().map(|v| format!("{v}")).collect();
        text += &format!("{},{l}\n", row.join(","));
    }
    write(dir, "class.csv", &text)
}

const CLASS_CONFIG: &str = r#"{
  "network": {
    "layers": [
      { "kind": "whvi", "in_dim": 3, "out_dim": 8, "activation": "tanh" },
      { "kind": "meanfield", "in_dim": 8, "out_dim": 3, "activation": "identity" }
    ],
    "likelihood": "categorical",
    "mc_test": 8
  },
  "schedule": { "total_steps": 30, "fixed_noise_steps": 0, "batch_size": 16, "eval_interval": 10 },
  "split": { "seed": 3, "test_fraction": 0.25 },
  "seed": 5
}"#;

fn train_class(dir: &Path, steps: &str) -> PathBuf {
    let cfg = write(dir, "cfg.json", CLASS_CONFIG);
    let data = class_csv(dir);
    let out = dir.join("run");
    let o = whvi(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--steps", steps]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_class(dir.path(), "30");
    let path = out.join("checkpoint.json");
    let ck = Checkpoint::load(&path).unwrap();
    let again = dir.path().join("again.json");
    ck.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(Checkpoint::load(&again).unwrap(), ck);
    assert_eq!(ck.step, 30);
}

#[test]
fn zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_class(dir.path(), "0");
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    let cfg: RunConfig = read_json(&dir.path().join("cfg.json")).unwrap();
    let init = Model::init(cfg.network, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(ck.params, init.params);
    assert_eq!(ck.step, 0);
    assert_eq!(std::fs::read_to_string(out.join("train_log.jsonl")).unwrap(), "");
}

#[test]
fn train_writes_outputs_and_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_class(dir.path(), "30");
    let log = whvi_cli::plot::read_log(&out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 10, 20, 29]);
    let metrics = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    let ck = out.join("checkpoint.json");
    let data = dir.path().join("class.csv");
    let eval = || whvi(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    let (a, b) = (eval(), eval());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8(a.stdout).unwrap(), metrics);
    let m: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert!(m["error_rate"].as_f64().unwrap() <= 1.0);
}

#[test]
fn plot_renders_logs_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_class(dir.path(), "30");
    let o = whvi(&["plot", "--input", s(&out.join("train_log.jsonl")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(out.join("train_log.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("-ELBO"));
    let table = write(dir.path(), "t.csv", "D,batch,mean_ms,std_ms\n1024,512,1.0,0.1\n2048,512,2.1,0.1\n");
    let target = dir.path().join("fig/bench.svg");
    let o = whvi(&["plot", "--input", s(&table), "--out", s(&target)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(target.exists());
}

#[test]
fn studies_write_csv_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.json", r#"{ "min_log2": 4, "max_log2": 6, "batch": 8, "reps": 2 }"#);
    let o = whvi(&["bench-fwht", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success());
    let (headers, rows) = whvi_cli::plot::read_table(&dir.path().join("bench_fwht.csv")).unwrap();
    assert_eq!(headers, ["D", "batch", "mean_ms", "std_ms"]);
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![16.0, 32.0, 64.0]);

    let cfg = write(
        dir.path(),
        "a.json",
        r#"{ "dims": [4, 8], "trials": 2, "options": { "restarts": 1, "iters": 50 } }"#,
    );
    let o = whvi(&["approx-study", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (headers, rows) = whvi_cli::plot::read_table(&dir.path().join("approx_study.csv")).unwrap();
    assert_eq!(headers, ["D", "trial", "best_rmse"]);
    assert_eq!(rows.len(), 4);
}

#[test]
fn bad_configs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = class_csv(dir.path());
    let out = dir.path().join("o");
    let malformed = write(dir.path(), "bad.json", "{ \"network\": ");
    let unknown = write(dir.path(), "unknown.json", &CLASS_CONFIG.replacen("\"seed\": 5", "\"seed\": 5, \"sede\": 1", 1));
    let missing = dir.path().join("nope.json");
    for cfg in [&malformed, &unknown, &missing] {
        let o = whvi(&["train", "--config", s(cfg), "--data", s(&data), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{}", cfg.display());
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
    assert!(matches!(read_json::<RunConfig>(&unknown), Err(CliError::Usage(m)) if m.contains("sede")));
    let o = whvi(&["train", "--config"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mismatched_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", CLASS_CONFIG);
    let data = write(dir.path(), "wide.csv", "a,b,c,d,label\n1,2,3,4,0\n2,3,4,5,1\n3,4,5,6,0\n");
    let o = whvi(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("3 inputs"));
}

#[test]
fn csv_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "r.csv", "x1, x2 ,y\n1.0,5,0.5\n2.0,5,1.5\n3.0,5,2.5\n");
    let ds = load_csv(&p, Task::Regression).unwrap();
    assert_eq!((ds.n, ds.d, ds.classes), (3, 2, None));
    assert_eq!(ds.y, Targets::Real(vec![0.5, 1.5, 2.5]));
    // The constant second column maps to zero instead of NaN.
    assert_eq!(ds.scaling.scales[1], 1.0);
    let train = ds.train().unwrap();
    assert!(train.x.iter().all(|v| v.is_finite()));
    assert!(train.x.iter().skip(1).step_by(2).all(|&v| v == 0.0));

    let p = write(dir.path(), "c.csv", "x,label\n0.1,0\n0.2,2\n0.3,1\n0.4,2\n");
    let ds = load_csv(&p, Task::Classification).unwrap();
    assert_eq!(ds.classes, Some(3));
    assert_eq!(ds.y, Targets::Labels(vec![0, 2, 1, 2]));
}

#[test]
fn csv_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let line_of = |text: &str, task: Task| {
        let p = write(dir.path(), "e.csv", text);
        match load_csv(&p, task) {
            Err(CliError::Parse { line, .. }) => line,
            other => panic!("expected a parse error, got {other:?}"),
        }
    };
    assert_eq!(line_of("a,y\n1,2\n3,oops\n", Task::Regression), 3);
    assert_eq!(line_of("a,y\n1,2\n3,4\n5\n", Task::Regression), 4);
    assert_eq!(line_of("a,y\n1,2\n3,nan\n", Task::Regression), 3);
    assert_eq!(line_of("a,y\n1,0\n3,1.5\n", Task::Classification), 3);
    assert_eq!(line_of("a,y\n1,-1\n", Task::Classification), 2);
    assert_eq!(line_of("a,y\n", Task::Regression), 2);
    assert_eq!(line_of("", Task::Regression), 1);
    let missing = load_csv(&dir.path().join("absent.csv"), Task::Regression).unwrap_err();
    assert_eq!(missing.exit_code(), 2);
}
