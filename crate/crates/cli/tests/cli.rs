use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_csshap");

const SMALL: &str = r#"
seed = 3
[dataset]
samples_per_class = 10
[training]
epochs = 2
[attribution]
permutations = 8
background_size = 4
"#;

fn csshap(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = csshap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

struct Run {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let cfg = tmp.path().join("run.toml");
        fs::write(&cfg, config).unwrap();
        Self {
            _tmp: tmp,
            dir,
            config: cfg,
        }
    }

    fn args<'a>(&'a self, rest: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec!["--config", self.config.to_str().unwrap(), "--out", self.dir.to_str().unwrap()];
        v.extend_from_slice(rest);
        v
    }

    fn ok(&self, rest: &[&str]) -> String {
        ok(&self.args(rest))
    }

    fn run(&self, rest: &[&str]) -> Output {
        csshap(&self.args(rest))
    }

    fn trained(config: &str) -> Self {
        let r = Self::new(config);
        r.ok(&["simulate"]);
        r.ok(&["train"]);
        r
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("dataset/manifest.json")).unwrap()).unwrap()
}

fn split_count(m: &Value, split: &str) -> usize {
    m["samples"].as_array().unwrap().iter().filter(|s| s["split"] == split).count()
}

#[test]
fn simulate_writes_the_three_class_benchmark() {
    let r = Run::new(SMALL);
    r.ok(&["simulate"]);
    let m = manifest(&r.dir);
    assert_eq!(m["class_names"], serde_json::json!(["Health", "Fault1", "Fault2"]));
    assert_eq!(split_count(&m, "train"), 21);
    assert_eq!(split_count(&m, "test"), 9);
    let src = &m["source"]["classes"];
    let comp = |c: usize, k: usize| {
        let p = &src[c]["components"][k];
        (p["carrier_hz"].as_f64(), p["modulation_hz"].as_f64())
    };
    for c in 0..3 {
        assert_eq!(comp(c, 0), (Some(1500.0), Some(50.0)));
    }
    assert_eq!(comp(1, 1), (Some(2500.0), Some(100.0)));
    assert_eq!(comp(2, 1), (Some(3500.0), Some(125.0)));
    assert_eq!(src[0]["components"][1]["carrier_hz"], serde_json::json!([1000.0, 4000.0]));
    assert_eq!(fs::read_dir(r.dir.join("dataset/samples")).unwrap().count(), 30);
    assert!(r.dir.join("dataset/config.resolved.toml").is_file());
}

#[test]
fn simulate_is_deterministic_and_seed_sensitive() {
    let a = Run::new(SMALL);
    let b = Run::new(SMALL);
    a.ok(&["simulate"]);
    b.ok(&["simulate"]);
    let read = |r: &Run, f: &str| fs::read(r.dir.join("dataset").join(f)).unwrap();
    assert_eq!(read(&a, "manifest.json"), read(&b, "manifest.json"));
    assert_eq!(read(&a, "samples/000017.f32"), read(&b, "samples/000017.f32"));
    b.ok(&["--seed", "4", "simulate"]);
    assert_ne!(read(&a, "samples/000017.f32"), read(&b, "samples/000017.f32"));
}

#[test]
fn samples_per_class_flag_overrides_config() {
    let r = Run::new(SMALL);
    r.ok(&["simulate", "--samples-per-class", "20"]);
    let m = manifest(&r.dir);
    assert_eq!(split_count(&m, "train"), 42);
    let resolved = fs::read_to_string(r.dir.join("dataset/config.resolved.toml")).unwrap();
    assert!(resolved.contains("samples_per_class = 20"));
    assert!(resolved.contains("seed = 3"));
}

#[test]
fn ingest_segments_labelled_recordings() {
    let r = Run::new("");
    fs::create_dir_all(&r.dir).unwrap();
    let a = r.dir.join("a.csv");
    let mut text = String::from("time,accel\n");
    for i in 0..240_000 {
        text.push_str(&format!("{},{}\n", i, ((i % 37) as f64 * 0.1).sin()));
    }
    fs::write(&a, text).unwrap();
    let b = r.dir.join("b.f32");
    let raw: Vec<u8> = (0..24_100).flat_map(|i| ((i % 11) as f32).to_le_bytes()).collect();
    fs::write(&b, raw).unwrap();

    let a_arg = format!("inner={}", a.display());
    r.ok(&["ingest", "--input", &a_arg, "--column", "1", "--segment-length", "2000"]);
    let m = manifest(&r.dir);
    assert_eq!(m["samples"].as_array().unwrap().len(), 120);
    assert_eq!(m["sample_rate_hz"], 12000.0);

    let b_arg = format!("outer={}", b.display());
    // 24100 floats give 12 segments of 2000 and a dropped tail
    let out = r.run(&["ingest", "--input", &b_arg, "--format", "raw_f32"]);
    assert_eq!(code(&out), 0);
    let m = manifest(&r.dir);
    assert_eq!(m["samples"].as_array().unwrap().len(), 12);
    assert_eq!(m["samples"][1]["origin"], serde_json::json!({ "kind": "segment", "file": b.display().to_string(), "offset": 2000 }));
}

#[test]
fn ingest_reports_the_bad_csv_row() {
    let r = Run::new("");
    fs::create_dir_all(&r.dir).unwrap();
    let f = r.dir.join("bad.csv");
    fs::write(&f, "x\n1.0\n2.0\nabc\n4.0\n").unwrap();
    let out = r.run(&["ingest", "--input", &format!("h={}", f.display()), "--segment-length", "2"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 4"), "{err}");
}

#[test]
fn ingest_rejects_truncated_raw_floats() {
    let r = Run::new("");
    fs::create_dir_all(&r.dir).unwrap();
    let f = r.dir.join("odd.f32");
    fs::write(&f, [0u8; 4001]).unwrap();
    let out = r.run(&["ingest", "--input", &format!("h={}", f.display()), "--format", "raw_f32", "--segment-length", "100"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a multiple of 4"));
}

#[test]
fn ingest_rejects_short_recordings() {
    let r = Run::new("");
    fs::create_dir_all(&r.dir).unwrap();
    let f = r.dir.join("short.f32");
    fs::write(&f, [0u8; 400]).unwrap();
    let out = r.run(&["ingest", "--input", &format!("h={}", f.display()), "--format", "raw_f32"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn exit_codes() {
    let r = Run::new("[dataset]\nsamples = 3\n");
    assert_eq!(code(&r.run(&["simulate"])), 2, "unknown config key");
    let r = Run::new("[window]\nkind = \"hann\"\nlength = 80\nhop = 70\n");
    assert_eq!(code(&r.run(&["simulate"])), 2, "non-COLA window");
    let r = Run::new(SMALL);
    assert_eq!(code(&r.run(&["train"])), 4, "missing dataset");
    r.ok(&["simulate"]);
    assert_eq!(code(&r.run(&["attribute"])), 4, "missing model");
    assert_eq!(code(&r.run(&["--jobs", "0", "simulate"])), 2);
    assert_eq!(code(&csshap(&["--config", "/nonexistent/run.toml", "simulate"])), 4);
    assert_eq!(code(&r.run(&["train", "--epochs", "0"])), 2);
}

#[test]
fn train_writes_model_and_report() {
    let r = Run::trained(SMALL);
    let model = r.dir.join("model");
    assert!(model.join("model.bin").is_file());
    let rep: Value = serde_json::from_str(&fs::read_to_string(model.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(rep["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(rep["training"]["seed"], 3);
    assert_eq!(rep["model"]["seed"], 3);
    let history = fs::read_to_string(model.join("train_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    // same seed, same weights; job count does not matter
    let again = Run::new(SMALL);
    again.ok(&["--jobs", "1", "simulate"]);
    again.ok(&["--jobs", "1", "train"]);
    assert_eq!(fs::read(model.join("model.bin")).unwrap(), fs::read(again.dir.join("model/model.bin")).unwrap());
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn attribute_writes_all_outputs_and_is_deterministic() {
    let r = Run::trained(SMALL);
    let out = r.ok(&["attribute", "--domain", "cs", "--sample", "1"]);
    let dir = r.dir.join("attribution/cyclic_spectral/test-0001");
    assert_eq!(out.trim(), dir.display().to_string());
    for f in ["summary.json", "representation.png", "config.resolved.toml"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    for stem in ["class-0-Health", "class-1-Fault1", "class-2-Fault2"] {
        assert!(dir.join(format!("{stem}.png")).is_file());
        let rows = csv_rows(&dir.join(format!("{stem}.csv")));
        assert_eq!(rows.len(), 17);
        assert!(rows.iter().all(|r| r.len() == 17));
        // decimal values survive a parse and re-print unchanged
        for cell in rows.iter().skip(1).flatten() {
            let v: f64 = cell.parse().unwrap();
            assert_eq!(format!("{v:.16e}"), *cell);
        }
    }
    let s: Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["cells"], 256);
    assert_eq!(s["seed"], 3);
    assert_eq!(s["efficiency_residual"].as_array().unwrap().len(), 3);
    assert_eq!(s["efficiency_ok"], true);

    let first = fs::read(dir.join("class-1-Fault1.csv")).unwrap();
    r.ok(&["--jobs", "1", "attribute", "--domain", "cs", "--sample", "1"]);
    assert_eq!(fs::read(dir.join("class-1-Fault1.csv")).unwrap(), first);
}

#[test]
fn time_domain_report_is_a_vector_of_fifty_cells() {
    let r = Run::trained(SMALL);
    r.ok(&["attribute", "--domain", "time", "--sample", "0"]);
    let rows = csv_rows(&r.dir.join("attribution/time/test-0000/class-1-Fault1.csv"));
    assert_eq!(rows.len(), 51);
    assert_eq!(rows[0], vec!["time [s]", "value"]);
    assert!(rows[1..].iter().all(|r| r.len() == 2));
}

#[test]
fn out_of_range_sample_is_a_validation_error() {
    let r = Run::trained(SMALL);
    let out = r.run(&["attribute", "--sample", "9"]);
    assert_eq!(code(&out), 2);
}

fn schema() -> jsonschema::JSONSchema {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/schema/attribution_summary.schema.json")).unwrap();
    jsonschema::JSONSchema::compile(&serde_json::from_str(&text).unwrap()).unwrap()
}

#[test]
fn report_collates_every_domain() {
    let r = Run::trained(SMALL);
    r.ok(&["attribute", "--domain", "all"]);
    let path = r.ok(&["report"]);
    let doc = fs::read_to_string(path.trim()).unwrap();
    assert!(!doc.contains("not computed"));
    for class in ["Health", "Fault1", "Fault2"] {
        let panels = doc.matches(&format!("![{class}](attribution/")).count();
        assert_eq!(panels, 5, "{class}");
    }
    let schema = schema();
    for domain in ["time", "frequency", "envelope", "time_frequency", "cyclic_spectral"] {
        let p = r.dir.join("attribution").join(domain).join("test-0000/summary.json");
        let s: Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        if let Err(errors) = schema.validate(&s) {
            let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
            panic!("{domain}: {msgs:?}");
        };
    }
    assert_eq!(fs::read_to_string(r.dir.join("summary.schema.json")).unwrap(), fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/schema/attribution_summary.schema.json")).unwrap());
}

#[test]
fn report_marks_missing_outputs() {
    let r = Run::new(SMALL);
    r.ok(&["simulate"]);
    let path = r.ok(&["report"]);
    let doc = fs::read_to_string(path.trim()).unwrap();
    assert_eq!(doc.matches("_not computed_").count(), 6, "training plus five domains");
    assert!(doc.contains("| Fault1 | 7 | 3 |"));
}

#[test]
fn schema_rejects_a_broken_summary() {
    let schema = schema();
    let bad = serde_json::json!({ "domain": "wavelet" });
    assert!(!schema.is_valid(&bad));
}

/// Trains the default network on the full benchmark, then attributes one
/// Fault #1 test sample in the CS domain.
#[test]
#[ignore = "trains the default CNN at full scale (about a minute of CPU)"]
fn fault1_cell_is_most_positive_for_fault1() {
    let r = Run::new("seed = 0");
    r.ok(&["simulate"]);
    r.ok(&["train"]);
    let m = manifest(&r.dir);
    let test: Vec<&Value> = m["samples"].as_array().unwrap().iter().filter(|s| s["split"] == "test").collect();
    let pos = test.iter().position(|s| s["label"] == 1).unwrap().to_string();
    r.ok(&["attribute", "--domain", "cs", "--sample", &pos]);
    let dir = r.dir.join(format!("attribution/cyclic_spectral/test-{:04}", pos.parse::<usize>().unwrap()));
    let rows = csv_rows(&dir.join("class-1-Fault1.csv"));
    let cols: Vec<f64> = rows[0][1..].iter().map(|c| c.parse().unwrap()).collect();
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    let mut p1 = f64::NAN;
    let nearest = |xs: &[f64], x: f64| (0..xs.len()).min_by(|&a, &b| (xs[a] - x).abs().total_cmp(&(xs[b] - x).abs())).unwrap();
    let rows_c: Vec<f64> = rows[1..].iter().map(|r| r[0].parse().unwrap()).collect();
    let (pr, pc) = (nearest(&rows_c, 2500.0), nearest(&cols, 100.0));
    for (i, row) in rows[1..].iter().enumerate() {
        for (j, cell) in row[1..].iter().enumerate() {
            let v: f64 = cell.parse().unwrap();
            if (i, j) == (pr, pc) {
                p1 = v;
            }
            if v > best.0 {
                best = (v, rows_c[i], cols[j]);
            }
        }
    }
    assert_eq!((best.1, best.2), (rows_c[pr], cols[pc]), "P1 cell {p1}, most positive {best:?}");
}
