use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reduce_core::faultsim::{derive_maskset, FaultMap};
use reduce_core::numnet::{apply_mask, NetworkParams};

const CONFIG: &str = r#"{
  "seed": 11,
  "network": { "layer_dims": [8, 12, 3] },
  "train": { "learning_rate": 0.01, "momentum": 0.9, "batch_size": 16 },
  "pretrain_epochs": 30,
  "array": { "rows": 4, "cols": 4 },
  "dataset": {
    "synthetic": { "num_classes": 3, "features": 8, "samples_per_class": 60, "cluster_spread": 0.7 }
  },
  "accuracy_constraint": { "relative_to_baseline": 0.95 },
  "profile": { "fault_rates": [0.0, 0.125, 0.25], "repeats": 5, "max_epochs": 10 },
  "fleet": {
    "count": 100,
    "rates": { "uniform": { "lo": 0.0, "hi": 0.25 } },
    "policies": ["reduce:max", "fixed:0"]
  }
}
"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.json");
        fs::write(&config, CONFIG).unwrap();
        Run {
            out: root.join("results/nested"),
            _dir: dir,
            root,
            config,
        }
    }

    fn reduce(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_reduce"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.reduce(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn fault_map(&self, name: &str, rate: f64, seed: u64) -> PathBuf {
        let path = self.root.join(name);
        self.ok(&[
            "fault-map",
            "--rate",
            &rate.to_string(),
            "--map-seed",
            &seed.to_string(),
            "--output",
            path.to_str().unwrap(),
        ]);
        path
    }

    fn profiled() -> Self {
        let run = Run::new();
        run.ok(&["pretrain"]);
        run.ok(&["profile"]);
        run
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_owned)
        .collect()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_reduce"))
        .args(["--config", "/nonexistent/run.json", "pretrain"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let run = Run::new();
    fs::write(
        &run.config,
        CONFIG.replace("\"seed\": 11", "\"seed\": 11, \"sede\": 3"),
    )
    .unwrap();
    assert_eq!(run.reduce(&["pretrain"]).status.code(), Some(2));
}

#[test]
fn pretrain_creates_the_output_dir() {
    let run = Run::new();
    assert!(!run.out.exists());
    run.ok(&["pretrain"]);
    assert!(run.file("params.json").is_file());
    let metrics: serde_json::Value = read_json(&run.file("pretrain_metrics.json"));
    assert!(
        metrics["baseline_accuracy"].as_f64().unwrap()
            >= metrics["accuracy_constraint"].as_f64().unwrap()
    );
}

#[test]
fn profile_writes_every_repeat_and_is_reproducible() {
    let run = Run::profiled();
    let rows = csv_rows(&run.file("resilience.csv"));
    assert_eq!(rows.len(), 3 * 5);
    for rate in ["0", "0.125", "0.25"] {
        assert_eq!(
            rows.iter()
                .filter(|r| r.split(',').next() == Some(rate))
                .count(),
            5,
            "{rate}"
        );
    }
    let table: serde_json::Value = read_json(&run.file("resilience.json"));
    assert_eq!(table["entries"][0]["max"], 0);

    let first = fs::read(run.file("resilience.json")).unwrap();
    run.ok(&["--jobs", "1", "profile"]);
    assert_eq!(fs::read(run.file("resilience.json")).unwrap(), first);
}

#[test]
fn select_prints_budgets_and_maps_errors() {
    let run = Run::profiled();
    let table = run.file("resilience.json");
    let table = table.to_str().unwrap();
    let select = |map: &Path, stat: &str| {
        run.reduce(&[
            "select",
            "--table",
            table,
            "--fault-map",
            map.to_str().unwrap(),
            "--statistic",
            stat,
        ])
    };

    let clean = run.fault_map("clean.json", 0.0, 1);
    let out = select(&clean, "max");
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "0");

    let beyond = run.fault_map("beyond.json", 0.5, 2);
    assert_eq!(select(&beyond, "max").status.code(), Some(3));

    let mid = run.fault_map("mid.json", 0.1875, 3);
    let parse = |stat| -> Option<usize> {
        let out = select(&mid, stat);
        out.status.success().then(|| {
            String::from_utf8(out.stdout)
                .unwrap()
                .trim()
                .parse()
                .unwrap()
        })
    };
    if let (Some(max), Some(mean)) = (parse("max"), parse("mean")) {
        assert!(max >= mean);
    } else {
        assert_eq!(select(&mid, "max").status.code(), Some(4));
    }
}

#[test]
fn retrain_keeps_masked_weights_at_zero() {
    let run = Run::new();
    run.ok(&["pretrain"]);
    let map_path = run.fault_map("map.json", 0.375, 9);
    let map: FaultMap = read_json(&map_path);
    let params: NetworkParams = read_json(&run.file("params.json"));
    let masks = derive_maskset(params.spec(), &map);
    let map_arg = map_path.to_str().unwrap();

    run.ok(&["retrain", "--fault-map", map_arg, "--epochs", "0"]);
    let untouched: NetworkParams = read_json(&run.file("retrained_params.json"));
    assert_eq!(untouched, apply_mask(&params, &masks).unwrap());

    run.ok(&["retrain", "--fault-map", map_arg, "--epochs", "4"]);
    let bytes = fs::read(run.file("retrained_params.json")).unwrap();
    let tuned: NetworkParams = serde_json::from_slice(&bytes).unwrap();
    assert_ne!(tuned, untouched);
    for (w, m) in tuned.weights.iter().zip(&masks.layers) {
        for (v, &keep) in w.as_slice().iter().zip(m.as_slice()) {
            assert!(keep || *v == 0.0);
        }
    }
    run.ok(&["retrain", "--fault-map", map_arg, "--epochs", "4"]);
    assert_eq!(fs::read(run.file("retrained_params.json")).unwrap(), bytes);
}

#[test]
fn fleet_writes_one_report_per_policy() {
    let run = Run::profiled();
    run.ok(&["fleet", "--policies", "reduce:max,fixed:0"]);
    for slug in ["reduce-max", "fixed-0"] {
        assert!(run.file(&format!("fleet_{slug}.json")).is_file());
        assert_eq!(csv_rows(&run.file(&format!("fleet_{slug}.csv"))).len(), 100);
    }
    assert_eq!(csv_rows(&run.file("comparison.csv")).len(), 2);

    let snapshot = |names: &[&str]| {
        names
            .iter()
            .map(|n| fs::read(run.file(n)).unwrap())
            .collect::<Vec<_>>()
    };
    let names = [
        "fleet_chips.json",
        "fleet_reduce-max.json",
        "fleet_fixed-0.csv",
        "comparison.json",
    ];
    let first = snapshot(&names);
    run.ok(&["--jobs", "3", "fleet"]);
    assert_eq!(snapshot(&names), first);
}

#[test]
fn fixed_budget_above_profile_limit_is_rejected() {
    let run = Run::profiled();
    assert_eq!(
        run.reduce(&["fleet", "--policies", "fixed:11"])
            .status
            .code(),
        Some(2)
    );
}
