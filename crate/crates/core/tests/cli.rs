use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "name": "tiny",
  "dataset": {"kind": "synthetic", "generator": "GaussianBlobs", "classes": 4, "samples": 120, "image_size": 6, "sigma": 0.3},
  "split": {"kind": "label_skew", "clients": 2, "classes_per_client": 2},
  "model": {"family": "MLP", "norm_kind": "LayerNorm", "depth": 1, "width": 8},
  "aggregator": {"kind": "FedAVG"},
  "rounds": 3,
  "seeds": [0, 1],
  "track_divergence": true
}
"#;

fn fedsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_results_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let mut outputs = Vec::new();
    for (name, extra) in [("a", None), ("b", Some("--parallel-seeds"))] {
        let out = tmp.path().join(name);
        let mut args = vec!["run", cfg.as_str(), "--out", out.to_str().unwrap()];
        args.extend(extra);
        let o = fedsim(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        for f in ["rounds.csv", "summary.json", "config.json", "partition.json", "divergence.json", "params_seed0.bin"] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        let csv = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
        let stripped: Vec<String> = csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect();
        outputs.push((stripped, std::fs::read(out.join("summary.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].0.len(), 1 + 2 * 3);
    assert!(outputs[0].0[0].starts_with("seed,round,aggregator,sampled_clients"));

    let a = tmp.path().join("a");
    let o = fedsim(&["plotdata", a.to_str().unwrap(), "accuracy_vs_round"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plot = std::fs::read_to_string(a.join("plot_accuracy_vs_round.csv")).unwrap();
    assert_eq!(plot.lines().count(), 1 + 2 * 3);

    let fed = a.join("params_seed0.bin");
    let o = fedsim(&["diverge", fed.to_str().unwrap(), fed.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["global"], 0.0);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let first = tmp.path().join("first");
    assert!(fedsim(&["run", &cfg, "--out", first.to_str().unwrap()]).status.success());
    let echoed = first.join("config.json");
    let second = tmp.path().join("second");
    let o = fedsim(&["run", echoed.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(first.join("summary.json")).unwrap(), std::fs::read(second.join("summary.json")).unwrap());
}

#[test]
fn partition_prints_manifest_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = fedsim(&["partition", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.to_string().contains("label_hist"));
    let o = fedsim(&["partition", &cfg, "--report", "--set", "seeds=[4]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("mean_pairwise_ks") && text.contains("1.0"), "{text}");
}

#[test]
fn config_errors_exit_2_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        TINY.replace("\"rounds\": 3", "\"rounds\": 0"),
        TINY.replace("\"rounds\": 3", "\"rounds\": 3, \"rounds\": 4"),
        TINY.replace("\"rounds\": 3", "\"roundz\": 3"),
        TINY.replace("{\"kind\": \"FedAVG\"}", "{\"kind\": \"FedAVG\", \"mu\": 0.1}"),
        TINY.replace("\"seeds\": [0, 1]", "\"seeds\": [0, 0]"),
        TINY.replace("}\n", ""),
    ];
    for text in &cases {
        let cfg = write_config(tmp.path(), text);
        let o = fedsim(&["run", &cfg, "--out", tmp.path().join("x").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
        let err = stderr(&o);
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with("error["), "{err}");
    }
    let cfg = write_config(tmp.path(), TINY);
    assert_eq!(fedsim(&["run", &cfg, "--set", "model.width"]).status.code(), Some(2));
    assert_eq!(fedsim(&["plotdata", tmp.path().to_str().unwrap(), "histogram"]).status.code(), Some(2));
    assert_eq!(fedsim(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_files_are_io_errors() {
    let o = fedsim(&["run", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[io]"), "{}", stderr(&o));
    let o = fedsim(&["diverge", "/nonexistent/a.bin", "/nonexistent/b.bin"]);
    assert_eq!(o.status.code(), Some(3));
}
