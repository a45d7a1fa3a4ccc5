use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agq_core::pruning::{drop_count, make_schedule, progressive_ratio, sparsity};
use agq_core::tensor::{load_store, save_store, NamedTensorStore, StoredTensor};
use agq_core::Tensor2D;
use serde_json::{json, Value};
use tempfile::TempDir;

fn agq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agq"))
        .args(args)
        .env_remove("AGQ_THREADS")
        .output()
        .expect("spawn agq")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema").join(name);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&v).unwrap()
}

fn assert_valid(schema_name: &str, doc: &Value) {
    let v = schema(schema_name);
    let errs: Vec<String> = v.iter_errors(doc).map(|e| format!("{} {e}", e.instance_path)).collect();
    assert!(errs.is_empty(), "{schema_name}: {errs:?}");
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn config(&self, name: &str, v: &Value) -> String {
        std::fs::write(self.path(name), serde_json::to_string_pretty(v).unwrap()).unwrap();
        self.p(name)
    }

    fn weights(&self, config: &str) -> String {
        let out = self.p("weights.agqt");
        let o = agq(&["init", "--config", config, "--out", &out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(name)).unwrap()).unwrap()
    }
}

fn base_config(layers: usize) -> Value {
    json!({
        "block": { "d_model": 32, "n_heads": 4, "d_ff": 64, "layers": layers },
        "seeds": { "weights": 3, "input": 11 },
        "tokens": 16
    })
}

#[test]
fn quantize_is_idempotent_and_covers_every_weight() {
    let f = Fixture::new();
    let cfg = f.config("c.json", &base_config(3));
    let w = f.weights(&cfg);
    let (a, b) = (f.p("a.agqt"), f.p("b.agqt"));
    for out in [&a, &b] {
        let o = agq(&["quantize", "--config", &cfg, "--in", &w, "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(format!("{a}.params.json")).unwrap(),
        std::fs::read(format!("{b}.params.json")).unwrap()
    );

    // four weight matrices per block
    let codes = load_store(&a).unwrap();
    assert_eq!(codes.len(), 3 * 4);
    assert!(codes
        .iter()
        .all(|(n, t)| n.ends_with(".codes") && matches!(t, StoredTensor::Codes(_))));
    let sidecar = f.json("a.agqt.params.json");
    assert_valid("params_sidecar.schema.json", &sidecar);
    let entries = sidecar["tensors"].as_array().unwrap();
    assert_eq!(entries.len(), 12);

    // codes and scales reconstruct each weight within half a step
    let weights = load_store(&w).unwrap();
    for e in entries {
        let name = e["name"].as_str().unwrap();
        let orig = weights.get_f32(name).unwrap();
        let Some(StoredTensor::Codes(c)) = codes.get(e["codes"].as_str().unwrap()) else {
            panic!("missing codes for {name}");
        };
        let scales: Vec<f64> = e["scales"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s.as_f64().unwrap())
            .collect();
        for r in 0..orig.rows() {
            for (col, &s) in scales.iter().enumerate() {
                let u = c.data()[r * orig.cols() + col];
                assert!((1..=15).contains(&u));
                let back = (u as f64 - 8.0) * s;
                assert!((back - orig.get(r, col) as f64).abs() <= s / 2.0 + 1e-6);
            }
        }
    }
}

#[test]
fn config_errors_exit_one() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.json"), "{\n  \"block\": {\n    \"d_model\": 8,,\n").unwrap();
    let o = agq(&["quantize", "--config", &f.p("bad.json"), "--in", "x", "--out", "y"]);
    assert_eq!(code(&o), 1);
    let msg = stderr(&o);
    assert!(msg.contains("line 3") && msg.contains("column"), "{msg}");

    let mut unknown = base_config(2);
    unknown["quant"] = json!({ "mode": "w4a8", "bits": 3 });
    let o = agq(&["eval", "--config", &f.config("u.json", &unknown), "--in", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bits"));

    let mut heads = base_config(2);
    heads["block"]["n_heads"] = json!(5);
    assert_eq!(
        code(&agq(&["eval", "--config", &f.config("h.json", &heads), "--in", "x"])),
        1
    );

    let mut sched = base_config(2);
    sched["prune"] = json!({ "beta": 0.3, "m": 4 });
    assert_eq!(
        code(&agq(&["eval", "--config", &f.config("s.json", &sched), "--in", "x"])),
        1
    );

    assert_eq!(code(&agq(&["frobnicate"])), 1);
    assert_eq!(code(&agq(&["--threads", "0", "schema"])), 1);
}

#[test]
fn io_and_numeric_errors() {
    let f = Fixture::new();
    let cfg = f.config("c.json", &base_config(2));
    let o = agq(&[
        "quantize",
        "--config",
        &cfg,
        "--in",
        &f.p("missing.agqt"),
        "--out",
        &f.p("o.agqt"),
    ]);
    assert_eq!(code(&o), 2);
    std::fs::write(f.path("junk.agqt"), b"not a store").unwrap();
    assert_eq!(code(&agq(&["eval", "--config", &cfg, "--in", &f.p("junk.agqt")])), 2);

    let mut empty = NamedTensorStore::new();
    empty.insert("w", Tensor2D::zeros(0, 3)).unwrap();
    save_store(&empty, f.path("empty.agqt")).unwrap();
    let o = agq(&[
        "quantize",
        "--config",
        &cfg,
        "--in",
        &f.p("empty.agqt"),
        "--out",
        &f.p("o.agqt"),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // weights for a different block shape
    let mut other = base_config(2);
    other["block"]["d_model"] = json!(16);
    let w16 = f.weights(&f.config("o.json", &other));
    assert_eq!(code(&agq(&["eval", "--config", &cfg, "--in", &w16])), 1);
}

#[test]
fn all_fp_eval_is_exact() {
    let f = Fixture::new();
    let mut c = base_config(2);
    c["quant"] = json!({ "mode": "fp" });
    c["thresholds"] = json!({ "min_cosine": 1.0 });
    let cfg = f.config("c.json", &c);
    let w = f.weights(&cfg);
    let o = agq(&["eval", "--config", &cfg, "--in", &w, "--out", &f.p("r.json")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = f.json("r.json");
    assert_valid("eval_report.schema.json", &r);
    let rec = &r["records"][0];
    assert_eq!(rec["cosine"].as_f64(), Some(1.0));
    assert_eq!(rec["locality_fp"], rec["locality_q"]);
    assert!(rec["sites"].as_array().unwrap().is_empty());
}

#[test]
fn pruned_eval_reports_both_records_and_schedule_sparsity() {
    let f = Fixture::new();
    let mut c = base_config(8);
    c["tokens"] = json!(40);
    c["prune"] = json!({ "beta": 0.3, "m": 4 });
    let cfg = f.config("c.json", &c);
    let w = f.weights(&cfg);
    let o = agq(&[
        "eval",
        "--config",
        &cfg,
        "--in",
        &w,
        "--seed",
        "5",
        "--out",
        &f.p("r.json"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = f.json("r.json");
    assert_valid("eval_report.schema.json", &r);
    assert_eq!(r["seed"], 5);
    let recs = r["records"].as_array().unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0]["pruned"], false);
    assert_eq!(recs[0]["sparsity"].as_f64(), Some(0.0));
    assert_eq!(recs[1]["pruned"], true);
    // 6 sites per layer
    assert_eq!(recs[1]["sites"].as_array().unwrap().len(), 8 * 6);

    // token counts replayed with the pruning module's formulas
    let s = make_schedule(8, 2, 0.3, 4).unwrap();
    let g = progressive_ratio(0.3, 4).unwrap();
    let mut t = 40usize;
    let mut fractions = Vec::new();
    for l in 0..8 {
        fractions.push(t as f64 / 40.0);
        if s.is_prune_layer(l) {
            t -= drop_count(t, g);
        }
    }
    let want = sparsity(&fractions).unwrap();
    assert!((recs[1]["sparsity"].as_f64().unwrap() - want).abs() < 1e-6);
    assert_eq!(recs[1]["output_tokens"].as_u64().unwrap() as usize, t);
    let ideal: f64 = 1.0
        - (0..8)
            .map(|l| (1.0 - g).powi(s.prune_layers.iter().filter(|&&p| p < l).count() as i32))
            .sum::<f64>()
            / 8.0;
    assert!((recs[1]["sparsity_ideal"].as_f64().unwrap() - ideal).abs() < 1e-12);
}

#[test]
fn threshold_failure_exits_four_and_names_metric() {
    let f = Fixture::new();
    let mut c = base_config(2);
    c["quant"] = json!({ "mode": "w4a4" });
    c["thresholds"] = json!({ "min_cosine": 0.999999 });
    let cfg = f.config("c.json", &c);
    let w = f.weights(&cfg);
    let o = agq(&["eval", "--config", &cfg, "--in", &w, "--out", &f.p("r.json")]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("min_cosine"));
    let r = f.json("r.json");
    assert_eq!(r["passed"], false);
    assert_valid("eval_report.schema.json", &r);

    c["thresholds"] = json!({ "max_site_mse": 0.0 });
    let o = agq(&[
        "eval",
        "--config",
        &f.config("m.json", &c),
        "--in",
        &w,
        "--out",
        &f.p("m.json.out"),
    ]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("max_site_mse"));
}

#[test]
fn thread_count_does_not_change_reports() {
    let f = Fixture::new();
    let mut c = base_config(4);
    c["prune"] = json!({ "beta": 0.5, "m": 2 });
    c["quant"] = json!({ "mode": "w4a8", "quantizer": "trip" });
    let cfg = f.config("c.json", &c);
    let w = f.weights(&cfg);
    let one = agq(&["--threads", "1", "eval", "--config", &cfg, "--in", &w]);
    let many = Command::new(env!("CARGO_BIN_EXE_agq"))
        .args(["eval", "--config", &cfg, "--in", &w])
        .env("AGQ_THREADS", "4")
        .output()
        .unwrap();
    assert_eq!(code(&one), 0);
    assert_eq!(code(&many), 0);
    assert_eq!(one.stdout, many.stdout);
}

#[test]
fn analyze_reports_outliers_and_locality() {
    let f = Fixture::new();
    let mut c = base_config(2);
    c["outputs"] = json!({ "csv": f.p("counts.csv") });
    let cfg = f.config("c.json", &c);
    let w = f.weights(&cfg);

    let mut constant = NamedTensorStore::new();
    constant.insert("x", Tensor2D::from_fn(16, 32, |_, _| 0.75)).unwrap();
    save_store(&constant, f.path("const.agqt")).unwrap();
    let o = agq(&[
        "analyze",
        "--config",
        &cfg,
        "--in",
        &w,
        "--input",
        &f.p("const.agqt"),
        "--out",
        &f.p("a.json"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = f.json("a.json");
    assert_valid("analyze_report.schema.json", &r);
    assert!(r["outliers"]["counts"].as_array().unwrap().iter().all(|v| v == 0));
    assert!(r.get("locality_fp").is_some() && r.get("locality_q").is_some());
    let csv = std::fs::read_to_string(f.path("counts.csv")).unwrap();
    assert_eq!(csv.lines().count(), 33);

    let mut inj = c.clone();
    inj["synthetic"] = json!({ "channels": [19], "tokens": [2, 5, 9, 13], "amplitude": 24.0 });
    let icfg = f.config("i.json", &inj);
    assert_eq!(code(&agq(&["synth", "--config", &icfg, "--out", &f.p("x.agqt")])), 0);
    let o = agq(&[
        "analyze",
        "--config",
        &icfg,
        "--in",
        &w,
        "--input",
        &f.p("x.agqt"),
        "--out",
        &f.p("b.json"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = f.json("b.json");
    assert_valid("analyze_report.schema.json", &r);
    assert_eq!(r["outliers"]["ranking"][0], 19);
    assert_eq!(r["outliers"]["counts"][19], 4);
    assert!(r["locality_q"].as_f64().is_some());
}

#[test]
fn bench_rows_and_validation() {
    let f = Fixture::new();
    let o = agq(&["bench", "--sizes", "8,12", "--repeats", "3", "--out", &f.p("b.jsonl")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(f.path("b.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    for size in [8, 12] {
        for kernel in ["f32", "int8", "int4"] {
            assert!(lines
                .iter()
                .any(|l| l["contract"]["kernel"] == kernel && l["contract"]["m"] == size));
        }
    }
    for l in &lines {
        assert_valid("bench_record.schema.json", l);
    }

    assert_eq!(code(&agq(&["bench", "--sizes", "8", "--repeats", "1"])), 1);
    assert_eq!(code(&agq(&["bench", "--sizes", "8", "--kernels", "int2"])), 1);
    assert_eq!(code(&agq(&["bench", "--sizes", "0"])), 1);
}

#[test]
fn synth_matches_eval_input() {
    let f = Fixture::new();
    let cfg = f.config("c.json", &base_config(2));
    assert_eq!(
        code(&agq(&[
            "synth",
            "--config",
            &cfg,
            "--seed",
            "4",
            "--out",
            &f.p("x.agqt")
        ])),
        0
    );
    let x = load_store(f.path("x.agqt")).unwrap();
    let got = x.get_f32("x").unwrap();
    assert_eq!(got, &agq_core::pipeline::synthetic::gaussian_tokens(16, 32, 4));
}

#[test]
fn schema_command_prints_bundled_schema() {
    let o = agq(&["schema"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["title"], "agq run configuration");
    assert_valid("run_config.schema.json", &base_config(2));
}
