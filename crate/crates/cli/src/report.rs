//! Collates a run directory into one markdown document.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::commands::{class_file_stem, domain_names, ATTRIBUTION_DIR, DATASET_DIR, MODEL_DIR};
use crate::error::{CliError, CliResult};

pub const SUMMARY_SCHEMA: &str = include_str!("../schema/attribution_summary.schema.json");
pub const NOT_COMPUTED: &str = "_not computed_";

fn read_json(path: &Path) -> CliResult<Option<Value>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn num(v: &Value) -> String {
    match v.as_f64() {
        Some(x) => format!("{x:.4e}"),
        None => "-".into(),
    }
}

fn sorted_subdirs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        if p.join("summary.json").is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn dataset_section(doc: &mut String, run: &Path) -> CliResult<()> {
    let _ = writeln!(doc, "## Dataset\n");
    let Some(m) = read_json(&run.join(DATASET_DIR).join("manifest.json"))? else {
        let _ = writeln!(doc, "{NOT_COMPUTED}\n");
        return Ok(());
    };
    let classes: Vec<String> = m["class_names"]
        .as_array()
        .map(|a| a.iter().filter_map(|c| c.as_str().map(String::from)).collect())
        .unwrap_or_default();
    let samples = m["samples"].as_array().cloned().unwrap_or_default();
    let _ = writeln!(
        doc,
        "{} samples of length {} at {} Hz.\n",
        samples.len(),
        m["sample_length"],
        m["sample_rate_hz"]
    );
    let _ = writeln!(doc, "| class | train | test |\n|---|---|---|");
    for (k, c) in classes.iter().enumerate() {
        let count = |split: &str| {
            samples
                .iter()
                .filter(|s| s["label"].as_u64() == Some(k as u64) && s["split"] == split)
                .count()
        };
        let _ = writeln!(doc, "| {c} | {} | {} |", count("train"), count("test"));
    }
    let _ = writeln!(doc);
    Ok(())
}

fn training_section(doc: &mut String, run: &Path) -> CliResult<()> {
    let _ = writeln!(doc, "## Training\n");
    let Some(r) = read_json(&run.join(MODEL_DIR).join("train_report.json"))? else {
        let _ = writeln!(doc, "{NOT_COMPUTED}\n");
        return Ok(());
    };
    let pct = |v: &Value| v.as_f64().map_or("-".into(), |a| format!("{:.2}%", a * 100.0));
    let _ = writeln!(
        doc,
        "{} parameters, {} epochs, final train accuracy {}, test accuracy {}, {:.1} s.\n",
        r["parameter_count"],
        r["epochs"].as_array().map_or(0, Vec::len),
        pct(&r["final_train_accuracy"]),
        pct(&r["final_test_accuracy"]),
        r["wall_clock_s"].as_f64().unwrap_or(0.0)
    );
    if let (Some(conf), Some(names)) = (r["confusion"].as_array(), r["class_names"].as_array()) {
        let names: Vec<&str> = names.iter().filter_map(Value::as_str).collect();
        let _ = writeln!(doc, "Test confusion (rows true, columns predicted):\n");
        let _ = writeln!(doc, "| | {} |", names.join(" | "));
        let _ = writeln!(doc, "|---|{}", "---|".repeat(names.len()));
        for (row, name) in conf.iter().zip(&names) {
            let cells: Vec<String> = row.as_array().into_iter().flatten().map(|v| v.to_string()).collect();
            let _ = writeln!(doc, "| {name} | {} |", cells.join(" | "));
        }
        let _ = writeln!(doc);
    }
    Ok(())
}

fn sample_section(doc: &mut String, run: &Path, domain: &str, dir: &Path) -> CliResult<()> {
    let s = read_json(&dir.join("summary.json"))?.expect("listed directories have a summary");
    let rel = |f: &str| format!("{ATTRIBUTION_DIR}/{domain}/{}/{f}", dir.file_name().unwrap().to_string_lossy());
    let _ = writeln!(
        doc,
        "### {} ({})\n",
        dir.file_name().unwrap().to_string_lossy(),
        s["sample"]["class"].as_str().unwrap_or("?")
    );
    let _ = writeln!(
        doc,
        "{} cells, {} estimator, {} permutations, {} background signals, {} model evaluations, seed {}, {:.1} s. Efficiency within 3 standard errors: {}.\n",
        s["cells"],
        s["estimator"].as_str().unwrap_or("?"),
        s["num_permutations"],
        s["background_size"],
        s["num_evaluations"],
        s["seed"],
        s["runtime_s"].as_f64().unwrap_or(0.0),
        if s["efficiency_ok"].as_bool() == Some(true) { "yes" } else { "no" }
    );
    let _ = writeln!(doc, "![representation]({})\n", rel("representation.png"));
    let _ = writeln!(doc, "| class | attribution | top cell | top value | output | base rate | residual | stderr |");
    let _ = writeln!(doc, "|---|---|---|---|---|---|---|---|");
    let labels = s["class_labels"].as_array().cloned().unwrap_or_default();
    for (k, label) in labels.iter().enumerate() {
        let name = label.as_str().unwrap_or("?");
        let stem = class_file_stem(k, name);
        let png = rel(&format!("{stem}.png"));
        let panel = if run.join(&png).is_file() {
            format!("![{name}]({png})")
        } else {
            NOT_COMPUTED.to_string()
        };
        let top = &s["top_cells"][k];
        let at = match top["col_center"].as_f64() {
            Some(c) => format!("({:.0}, {:.0})", top["row_center"].as_f64().unwrap_or(f64::NAN), c),
            None => format!("{:.4}", top["row_center"].as_f64().unwrap_or(f64::NAN)),
        };
        let _ = writeln!(
            doc,
            "| {name} | {panel} | {} {at} | {} | {} | {} | {} | {} |",
            top["cell"],
            num(&top["value"]),
            num(&s["model_output"][k]),
            num(&s["base_rate"][k]),
            num(&s["efficiency_residual"][k]),
            num(&s["aggregate_stderr"][k]),
        );
    }
    let _ = writeln!(doc);
    Ok(())
}

pub fn render(run: &Path) -> CliResult<String> {
    let mut doc = String::new();
    let _ = writeln!(doc, "# Attribution study: {}\n", run.display());
    let _ = writeln!(
        doc,
        "Attribution panels: red cells raise the class score, blue cells lower it; the colour scale is symmetric about zero.\n"
    );
    dataset_section(&mut doc, run)?;
    training_section(&mut doc, run)?;
    for domain in domain_names() {
        let _ = writeln!(doc, "## Attribution: {domain}\n");
        let dir = run.join(ATTRIBUTION_DIR).join(domain);
        let samples = if dir.is_dir() { sorted_subdirs(&dir)? } else { Vec::new() };
        if samples.is_empty() {
            let _ = writeln!(doc, "{NOT_COMPUTED}\n");
            continue;
        }
        for s in samples {
            sample_section(&mut doc, run, domain, &s)?;
        }
    }
    Ok(doc)
}

pub fn report(run: &Path) -> CliResult<PathBuf> {
    if !run.is_dir() {
        return Err(CliError::io(run, "run directory not found"));
    }
    let doc = render(run)?;
    let path = run.join("report.md");
    fs::write(&path, doc).map_err(|e| CliError::io(&path, e))?;
    let schema = run.join("summary.schema.json");
    fs::write(&schema, SUMMARY_SCHEMA).map_err(|e| CliError::io(&schema, e))?;
    Ok(path)
}
