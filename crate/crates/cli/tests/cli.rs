use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn geoadapt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoadapt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn geoadapt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
seed = 3
threads = 1
[synth]
tile_size = 64
source_train = 3
source_test = 2
target_train = 3
target_test = 2
target_eval = 2
[pipeline.segmenter]
widths = [4, 8, 16]
[pipeline.generator]
widths = [4, 8, 16, 32]
[pipeline.discriminator]
widths = [4, 8, 16, 16, 16]
[pipeline.step1]
epochs = 1
[pipeline.step2]
max_epochs = 1
monitor_samples = 2
[pipeline.step4]
epochs = 1
"#;

fn tiny_benchmark(dir: &Path) {
    fs::write(dir.join("c.toml"), TINY).unwrap();
    let o = geoadapt(&["--config", "c.toml", "synth", "--out-dir", "d"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn every_command_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let expected: &[(&str, &[&str])] = &[
        ("synth", &["--tile-size", "--classes", "--noise-std", "--sensor-shift", "--resolution-shift", "--class-shift"]),
        ("tile", &["--image", "--mask", "--size", "--policy", "--channel-map", "--split"]),
        ("stats", &["--json"]),
        ("train-seg", &["--source", "--epochs", "--batch-size", "--lr"]),
        (
            "train-gan",
            &["--source", "--target", "--max-epochs", "--lambda-cycle", "--d-accuracy-min", "--g-loss-max", "--window", "--monitor"],
        ),
        ("translate", &["--generator", "--source"]),
        ("finetune", &["--checkpoint", "--translated", "--target-eval", "--epochs"]),
        ("eval", &["--checkpoint", "--dataset", "--json"]),
        ("report", &["--before", "--after", "--class-names"]),
    ];
    for (cmd, flags) in expected {
        let o = geoadapt(&[cmd, "--help"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        let text = stdout(&o);
        for f in flags.iter().chain(&["--seed", "--threads", "--out-dir", "--config", "--preset", "--error-json"]) {
            assert!(text.contains(f), "{cmd} --help lacks {f}:\n{text}");
        }
    }
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(geoadapt(&["--version"], p).status.code(), Some(0));
    // argument errors and missing --out-dir are usage errors
    assert_eq!(geoadapt(&["no-such-command"], p).status.code(), Some(1));
    assert_eq!(geoadapt(&["synth"], p).status.code(), Some(1));
    assert_eq!(geoadapt(&["synth", "--tile-size", "30", "--out-dir", "x"], p).status.code(), Some(1));
    // missing dataset is a data error
    assert_eq!(geoadapt(&["stats", "missing"], p).status.code(), Some(2));
    fs::write(p.join("bad.toml"), "[pipeline.step2]\nlamda_cycle = 5.0\n").unwrap();
    let o = geoadapt(&["--config", "bad.toml", "stats", "missing"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lamda_cycle"));
}

#[test]
fn error_json_carries_class_and_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = geoadapt(&["--error-json", "stats", "missing"], dir.path());
    let line = stderr(&o).lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["error"]["class"], "data");
    assert_eq!(v["error"]["code"], 2);
    assert!(v["error"]["message"].as_str().unwrap().contains("manifest"));
}

#[test]
fn stats_percentages_sum_to_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    tiny_benchmark(dir.path());
    let o = geoadapt(&["stats", "d/source", "--json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let pct = v["percent"].as_object().unwrap();
    assert_eq!(pct.len(), 6);
    let total: f64 = pct.values().map(|x| x.as_f64().unwrap()).sum();
    assert!((total - 100.0).abs() < 1e-9, "{total}");
    assert_eq!(v["patches"], 5);
}

#[test]
fn flags_override_the_config_file_in_the_frozen_copy() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.toml"), "seed = 5\n[synth]\ntile_size = 32\nsource_train = 1\nsource_test = 1\ntarget_train = 1\ntarget_test = 1\ntarget_eval = 1\n").unwrap();
    let o = geoadapt(&["--config", "c.toml", "--seed", "8", "synth", "--tile-size", "48", "--out-dir", "o"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let frozen: toml::Table = fs::read_to_string(p.join("o/config.toml")).unwrap().parse().unwrap();
    assert_eq!(frozen["seed"].as_integer(), Some(8));
    assert_eq!(frozen["synth"]["tile_size"].as_integer(), Some(48));
    assert_eq!(frozen["synth"]["source_train"].as_integer(), Some(1));
}

#[test]
fn identical_reports_compare_to_zero_delta() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    tiny_benchmark(p);
    let o = geoadapt(&["--config", "c.toml", "train-seg", "--source", "d/source", "--out-dir", "r"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = geoadapt(
        &["eval", "--checkpoint", "r/step1_segmenter/model_best.ckpt", "--dataset", "d/target_eval", "--out-dir", "e"],
        p,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = geoadapt(&["report", "--before", "e/eval.json", "--after", "e/eval.json"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 6 + 6 * 5);
    for r in rows {
        let delta = r.split_whitespace().last().unwrap();
        assert!(delta == "+0.0000" || delta == "undef", "{r}");
    }
}

#[test]
fn four_steps_run_end_to_end_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    tiny_benchmark(p);
    let steps: &[&[&str]] = &[
        &["train-seg", "--source", "d/source"],
        &["train-gan", "--source", "d/source", "--target", "d/target", "--sample-every", "1"],
        &["translate", "--generator", "r/step2_gan/g_st.ckpt", "--source", "d/source"],
        &[
            "finetune",
            "--checkpoint",
            "r/step1_segmenter/model_best.ckpt",
            "--translated",
            "r/step3_translate",
            "--target-eval",
            "d/target_eval",
        ],
    ];
    for s in steps {
        let mut args = vec!["--config", "c.toml", "--out-dir", "r"];
        args.extend_from_slice(s);
        let o = geoadapt(&args, p);
        assert!(o.status.success(), "{s:?}: {}", stderr(&o));
    }
    for f in [
        "step1_segmenter/model_best.ckpt",
        "step1_segmenter/config.toml",
        "step2_gan/g_st.ckpt",
        "step2_gan/history.csv",
        "step2_gan/samples/epoch_0001.png",
        "step3_translate/manifest.toml",
        "step4_finetune/report.txt",
        "step4_finetune/history.csv",
    ] {
        assert!(p.join("r").join(f).is_file(), "missing {f}");
    }
    // translation keeps the labels untouched
    let src = geoadapt(&["stats", "d/source", "--json"], p);
    let tr = geoadapt(&["stats", "r/step3_translate", "--json"], p);
    let a: serde_json::Value = serde_json::from_str(&stdout(&src)).unwrap();
    let b: serde_json::Value = serde_json::from_str(&stdout(&tr)).unwrap();
    assert_eq!(a["percent"], b["percent"]);
}
