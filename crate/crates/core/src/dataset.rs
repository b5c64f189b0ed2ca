//! Labeled sample collections and their on-disk layout.
//!
//! A dataset directory holds `manifest.json` (source echo plus per-sample
//! metadata), one little-endian f32 file per sample under `samples/`, and a
//! flat `dataset.csv` with one row per sample, label first.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signal::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleOrigin {
    Simulated { seed: u64, stream: u64 },
    Segment { file: String, offset: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub series: TimeSeries,
    pub label: usize,
    pub split: Split,
    pub origin: SampleOrigin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub sample_rate_hz: f64,
    pub sample_length: usize,
    pub samples: Vec<Sample>,
    /// Echo of whatever produced the dataset.
    pub source: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    class_names: Vec<String>,
    sample_rate_hz: f64,
    sample_length: usize,
    source: serde_json::Value,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    label: usize,
    class: String,
    split: Split,
    file: String,
    origin: SampleOrigin,
}

const MANIFEST_VERSION: u32 = 1;

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn label_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let sample_dir = dir.join("samples");
        fs::create_dir_all(&sample_dir)?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (index, s) in self.samples.iter().enumerate() {
            let file = format!("samples/{index:06}.f32");
            write_f32_file(&dir.join(&file), s.series.samples())?;
            entries.push(ManifestEntry {
                index,
                label: s.label,
                class: self.class_names[s.label].clone(),
                split: s.split,
                file,
                origin: s.origin.clone(),
            });
        }
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            class_names: self.class_names.clone(),
            sample_rate_hz: self.sample_rate_hz,
            sample_length: self.sample_length,
            source: self.source.clone(),
            samples: entries,
        };
        let f = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(f, &manifest)?;
        self.write_csv(&dir.join("dataset.csv"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let values = read_f32_file(&dir.join(&e.file))?;
            if values.len() != manifest.sample_length {
                return Err(Error::Format(format!(
                    "{}: expected {} samples, found {}",
                    e.file,
                    manifest.sample_length,
                    values.len()
                )));
            }
            if e.label >= manifest.class_names.len() {
                return Err(Error::Format(format!("{}: label {} out of range", e.file, e.label)));
            }
            samples.push(Sample {
                series: TimeSeries::new(values, manifest.sample_rate_hz)?,
                label: e.label,
                split: e.split,
                origin: e.origin.clone(),
            });
        }
        Ok(Self {
            class_names: manifest.class_names,
            sample_rate_hz: manifest.sample_rate_hz,
            sample_length: manifest.sample_length,
            samples,
            source: manifest.source,
        })
    }

    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write!(w, "label")?;
        for i in 0..self.sample_length {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for s in &self.samples {
            write!(w, "{}", s.label)?;
            for v in s.series.samples() {
                // f32 is what the sample files hold
                write!(w, ",{}", *v as f32)?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_f32_file(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    parse_f32_le(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_f32_le(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "raw f32 data of {} bytes is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Read one numeric column from CSV text. A non-numeric first row is treated
/// as a header when `header` is true; any other bad cell is an error naming its
/// 1-based row.
pub fn parse_csv_column<R: BufRead>(input: R, column: usize, header: bool) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let row = i + 1;
        if header && i == 0 {
            continue;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let cell = trimmed
            .split(',')
            .nth(column)
            .ok_or_else(|| Error::Format(format!("row {row}: missing column {column}")))?
            .trim();
        let v: f64 = cell
            .parse()
            .map_err(|_| Error::Format(format!("row {row}: non-numeric cell {cell:?}")))?;
        if !v.is_finite() {
            return Err(Error::Format(format!("row {row}: non-finite value")));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn read_csv_column(path: &Path, column: usize, header: bool) -> Result<Vec<f64>> {
    let f = BufReader::new(fs::File::open(path)?);
    parse_csv_column(f, column, header).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Cut a recording into non-overlapping segments; a short tail is dropped.
pub fn segment(values: &[f64], segment_length: usize) -> Result<Vec<&[f64]>> {
    if segment_length == 0 {
        return invalid("segment length must be positive");
    }
    if values.len() < segment_length {
        return invalid(format!(
            "recording of {} samples is shorter than one {segment_length}-sample segment",
            values.len()
        ));
    }
    Ok(values.chunks_exact(segment_length).collect())
}
