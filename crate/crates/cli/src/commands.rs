use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use csshap::dataset::{read_csv_column, read_f32_file, segment, Dataset, Sample, SampleOrigin, Split};
use csshap::domains::{BackgroundSet, Domain, DomainKind, DomainRepresentation};
use csshap::model::{train, TrainedModel};
use csshap::shapley::{attribute, AttributionMap};
use csshap::signal::normalize_meanstd;
use csshap::sim::{build_dataset, stratified_split};
use csshap::TimeSeries;
use log::{info, warn};

use crate::config::{IngestFormat, RunConfig};
use crate::error::{validation, CliError, CliResult};
use crate::plot::{self, Axes};

pub const DATASET_DIR: &str = "dataset";
pub const MODEL_DIR: &str = "model";
pub const MODEL_FILE: &str = "model.bin";
pub const ATTRIBUTION_DIR: &str = "attribution";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn with_path<T>(r: csshap::Result<T>, path: &Path) -> CliResult<T> {
    r.map_err(|e| CliError::from(e).context(path.display()))
}

pub fn simulate(cfg: &RunConfig) -> CliResult<PathBuf> {
    let spec = cfg.dataset.spec();
    let start = Instant::now();
    let ds = build_dataset(&spec)?;
    let dir = cfg.out.join(DATASET_DIR);
    create_dir(&dir)?;
    with_path(ds.save(&dir), &dir)?;
    cfg.write_resolved(&dir)?;
    info!(
        "simulated {} samples ({} train, {} test) in {:.1} s",
        ds.samples.len(),
        ds.count(Split::Train),
        ds.count(Split::Test),
        start.elapsed().as_secs_f64()
    );
    Ok(dir)
}

pub fn ingest(cfg: &RunConfig) -> CliResult<PathBuf> {
    let ing = &cfg.ingest;
    if ing.files.is_empty() {
        return validation("ingest needs at least one labelled input (--input LABEL=PATH)");
    }
    if !(ing.sample_rate_hz > 0.0) {
        return validation("ingest.sample_rate_hz must be positive");
    }
    let mut class_names: Vec<String> = Vec::new();
    let mut samples = Vec::new();
    for f in &ing.files {
        let values = match ing.format {
            IngestFormat::Csv => read_csv_column(&f.path, ing.column, ing.header),
            IngestFormat::RawF32 => read_f32_file(&f.path),
        };
        let values = with_path(values, &f.path)?;
        let label = match class_names.iter().position(|c| *c == f.label) {
            Some(i) => i,
            None => {
                class_names.push(f.label.clone());
                class_names.len() - 1
            }
        };
        let segments = with_path(segment(&values, ing.segment_length), &f.path)?;
        info!("{}: {} samples, {} segments", f.path.display(), values.len(), segments.len());
        for (i, seg) in segments.into_iter().enumerate() {
            let mut series = with_path(TimeSeries::new(seg.to_vec(), ing.sample_rate_hz), &f.path)?;
            if ing.normalize {
                series = with_path(normalize_meanstd(&series), &f.path)?;
            }
            samples.push(Sample {
                series,
                label,
                split: Split::Train,
                origin: SampleOrigin::Segment {
                    file: f.path.display().to_string(),
                    offset: i * ing.segment_length,
                },
            });
        }
    }
    if class_names.len() < 2 {
        warn!("only one class ingested; training needs at least two");
    }
    if !(ing.train_fraction > 0.0 && ing.train_fraction < 1.0) {
        return validation("ingest.train_fraction must lie in (0, 1)");
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let seed = ing.seed.unwrap_or(cfg.seed);
    for (s, split) in samples.iter_mut().zip(stratified_split(&labels, class_names.len(), ing.train_fraction, seed)) {
        s.split = split;
    }
    let ds = Dataset {
        class_names,
        sample_rate_hz: ing.sample_rate_hz,
        sample_length: ing.segment_length,
        samples,
        source: serde_json::to_value(ing).map_err(|e| CliError::Runtime(e.to_string()))?,
    };
    let dir = cfg.out.join(DATASET_DIR);
    create_dir(&dir)?;
    with_path(ds.save(&dir), &dir)?;
    cfg.write_resolved(&dir)?;
    info!("ingested {} segments into {}", ds.samples.len(), dir.display());
    Ok(dir)
}

pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::io(dir, "no manifest.json; run `simulate` or `ingest` first"));
    }
    with_path(Dataset::load(dir), dir)
}

pub fn train_model(cfg: &RunConfig, data: &Path) -> CliResult<PathBuf> {
    let ds = load_dataset(data)?;
    let model_cfg = cfg.model.build(ds.sample_length, ds.class_count())?;
    cfg.training.validate()?;
    let (model, report) = train(&ds, &model_cfg, &cfg.training, |e| {
        info!(
            "epoch {:>3}  loss {:.4}  train {:.2}%  test {}",
            e.epoch,
            e.loss,
            e.train_accuracy * 100.0,
            e.test_accuracy.map_or("-".into(), |a| format!("{:.2}%", a * 100.0))
        )
    })
    .map_err(|e| match e {
        csshap::Error::Training(_) => CliError::Runtime(e.to_string()),
        other => other.into(),
    })?;
    let dir = cfg.out.join(MODEL_DIR);
    create_dir(&dir)?;
    let path = dir.join(MODEL_FILE);
    with_path(model.save(&path), &path)?;
    let json = dir.join("train_report.json");
    with_path(report.write_json(&json), &json)?;
    let csv = dir.join("train_history.csv");
    with_path(report.write_csv(&csv), &csv)?;
    cfg.write_resolved(&dir)?;
    info!(
        "{} parameters, test accuracy {}, {:.1} s",
        report.parameter_count,
        report.final_test_accuracy.map_or("n/a".into(), |a| format!("{:.2}%", a * 100.0)),
        report.wall_clock_s
    );
    Ok(path)
}

pub fn sample_dir_name(split: Split, index: usize) -> String {
    let s = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    format!("{s}-{index:04}")
}

/// File-name-safe form of a class label.
pub fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

pub fn class_file_stem(k: usize, name: &str) -> String {
    format!("class-{k}-{}", slug(name))
}

pub fn attribute_samples(cfg: &RunConfig, model_path: &Path, data: &Path) -> CliResult<Vec<PathBuf>> {
    let ds = load_dataset(data)?;
    if !model_path.is_file() {
        return Err(CliError::io(model_path, "model file not found; run `train` first"));
    }
    let model = with_path(TrainedModel::load(model_path), model_path)?;
    if model.class_names != ds.class_names {
        return validation(format!(
            "model classes {:?} do not match dataset classes {:?}",
            model.class_names, ds.class_names
        ));
    }
    if model.network.config().input_length != ds.sample_length || model.sample_rate_hz != ds.sample_rate_hz {
        return validation("model input length or sample rate differs from the dataset");
    }
    cfg.attribution.validate()?;
    let ex = &cfg.explain;
    if ex.domains.is_empty() || ex.samples.is_empty() {
        return validation("explain.domains and explain.samples must not be empty");
    }
    let chosen: Vec<&Sample> = ds.split(ex.split).collect();
    for &i in &ex.samples {
        if i >= chosen.len() {
            return validation(format!("sample {i} is out of range; the split has {} samples", chosen.len()));
        }
    }
    let pool: Vec<&TimeSeries> = ds.split(ex.background_split).map(|s| &s.series).collect();
    let mut written = Vec::new();
    for &kind in &ex.domains {
        let window = kind.needs_window().then_some(cfg.window);
        let domain = Domain::new(kind, ds.sample_length, ds.sample_rate_hz, window)?;
        let background = BackgroundSet::build(
            &domain,
            cfg.attribution.background_mode,
            &pool,
            cfg.attribution.background_size,
            cfg.attribution.seed,
        )?;
        for &i in &ex.samples {
            let sample = chosen[i];
            let start = Instant::now();
            let map = attribute(&model, &ds.class_names, &sample.series, &domain, &background, &cfg.attribution)?;
            let runtime = start.elapsed().as_secs_f64();
            let dir = cfg.out.join(ATTRIBUTION_DIR).join(kind.name()).join(sample_dir_name(ex.split, i));
            create_dir(&dir)?;
            let rep = domain.forward(&sample.series)?;
            write_report(&dir, cfg, &map, &rep, sample, runtime)?;
            let residual = map.efficiency_residual();
            let se = map.aggregate_stderr();
            info!(
                "{kind} {} (label {}): {} evaluations, {:.1} s, max |residual|/se {:.2}",
                sample_dir_name(ex.split, i),
                ds.class_names[sample.label],
                map.num_evaluations,
                runtime,
                residual.iter().zip(&se).map(|(r, s)| r.abs() / s.max(1e-300)).fold(0.0, f64::max)
            );
            written.push(dir);
        }
    }
    Ok(written)
}

fn axis_label(name: &str, unit: &str) -> String {
    format!("{name} [{unit}]")
}

fn write_report(
    dir: &Path,
    cfg: &RunConfig,
    map: &AttributionMap,
    rep: &DomainRepresentation,
    sample: &Sample,
    runtime: f64,
) -> CliResult<()> {
    let p = &map.partition;
    let row_edges = plot::cell_edges(p.rows.coords(), &p.rows.edges);
    let row_label = axis_label(&p.rows.name, &p.rows.unit);
    for (k, name) in map.class_labels.iter().enumerate() {
        let stem = class_file_stem(k, name);
        let path = dir.join(format!("{stem}.csv"));
        let f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        with_path(map.write_csv(k, BufWriter::new(f)), &path)?;
        let canvas = match &p.cols {
            Some(cols) => plot::heatmap(
                &row_edges,
                &plot::cell_edges(cols.coords(), &cols.edges),
                &map.values[k],
                &Axes {
                    x_label: axis_label(&cols.name, &cols.unit),
                    y_label: row_label.clone(),
                },
                true,
            ),
            None => plot::bars(
                &row_edges,
                &map.values[k],
                &Axes {
                    x_label: row_label.clone(),
                    y_label: "value".into(),
                },
            ),
        };
        canvas.save(&dir.join(format!("{stem}.png")))?;
    }
    let mags = rep.magnitudes();
    let rows = p.rows.coords();
    let panel = match &p.cols {
        Some(cols) => plot::heatmap(
            &plot::coordinate_edges(rows),
            &plot::coordinate_edges(cols.coords()),
            &mags,
            &Axes {
                x_label: axis_label(&cols.name, &cols.unit),
                y_label: row_label.clone(),
            },
            false,
        ),
        None => plot::line_plot(
            rows,
            &mags,
            &Axes {
                x_label: row_label.clone(),
                y_label: "|X|".into(),
            },
        ),
    };
    panel.save(&dir.join("representation.png"))?;

    let mut summary = serde_json::to_value(map.summary(&cfg.attribution, runtime)).map_err(|e| CliError::Runtime(e.to_string()))?;
    let extra = serde_json::json!({
        "sample": {
            "split": cfg.explain.split,
            "label": sample.label,
            "class": map.class_labels[sample.label],
            "origin": sample.origin,
        },
        "window": cfg.window,
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (summary.as_object_mut(), extra) {
        obj.extend(more);
    }
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    cfg.write_resolved(dir)
}

/// Every domain directory name a report looks for.
pub fn domain_names() -> Vec<&'static str> {
    DomainKind::ALL.iter().map(|k| k.name()).collect()
}
