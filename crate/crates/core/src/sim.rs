//! Synthetic periodic-impulse fault benchmark.
//!
//! Each class is a sum of damped periodic-impulse components plus white
//! Gaussian noise. A component rings at its carrier frequency after every
//! impact, impacts repeat at the modulation frequency, and each impulse decays
//! as `exp(-damping * n)` where `n` counts samples since its onset.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, SampleOrigin, Split};
use crate::error::{invalid, Result};
use crate::signal::{add_noise, normalize_meanstd, TimeSeries};

/// A fixed value or a uniform range drawn per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Fixed(f64),
    Uniform([f64; 2]),
}

impl Param {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Param::Fixed(v) => v,
            Param::Uniform([lo, hi]) => rng.random_range(lo..hi),
        }
    }

    pub fn max(&self) -> f64 {
        match *self {
            Param::Fixed(v) => v,
            Param::Uniform([_, hi]) => hi,
        }
    }

    pub fn min(&self) -> f64 {
        match *self {
            Param::Fixed(v) => v,
            Param::Uniform([lo, _]) => lo,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, Param::Fixed(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpulseComponentSpec {
    pub name: String,
    pub carrier_hz: Param,
    pub modulation_hz: Param,
    /// Per-sample decay rate of each impulse.
    #[serde(default = "default_damping")]
    pub damping: f64,
}

fn default_damping() -> f64 {
    0.04
}

impl ImpulseComponentSpec {
    pub fn fixed(name: &str, carrier_hz: f64, modulation_hz: f64) -> Self {
        Self {
            name: name.to_string(),
            carrier_hz: Param::Fixed(carrier_hz),
            modulation_hz: Param::Fixed(modulation_hz),
            damping: default_damping(),
        }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        if let Param::Uniform([lo, hi]) = self.carrier_hz {
            if !(lo < hi) {
                return invalid(format!("{}: empty carrier range", self.name));
            }
        }
        if let Param::Uniform([lo, hi]) = self.modulation_hz {
            if !(lo < hi) {
                return invalid(format!("{}: empty modulation range", self.name));
            }
        }
        if !(self.carrier_hz.max() < fs / 2.0) || !(self.carrier_hz.min() > 0.0) {
            return invalid(format!(
                "{}: carrier must lie in (0, {}) Hz",
                self.name,
                fs / 2.0
            ));
        }
        if !(self.modulation_hz.min() > 0.0) {
            return invalid(format!("{}: modulation frequency must be positive", self.name));
        }
        if !(self.damping > 0.0) {
            return invalid(format!("{}: damping must be positive", self.name));
        }
        Ok(())
    }
}

/// Parameters actually drawn for one component instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawnComponent {
    pub carrier_hz: f64,
    pub modulation_hz: f64,
    pub phase: f64,
    pub onset_s: f64,
}

/// Draw parameters and render one periodic-impulse component. With
/// `random_onset` the first impact lands uniformly within one period,
/// otherwise at t = 0.
pub fn periodic_impulse<R: Rng + ?Sized>(
    spec: &ImpulseComponentSpec,
    fs: f64,
    n_samples: usize,
    random_onset: bool,
    rng: &mut R,
) -> Result<(TimeSeries, DrawnComponent)> {
    spec.validate(fs)?;
    let carrier_hz = spec.carrier_hz.draw(rng);
    let modulation_hz = spec.modulation_hz.draw(rng);
    let phase = rng.random_range(0.0..2.0 * PI);
    let onset_s = if random_onset {
        rng.random_range(0.0..1.0 / modulation_hz)
    } else {
        0.0
    };
    let drawn = DrawnComponent {
        carrier_hz,
        modulation_hz,
        phase,
        onset_s,
    };
    Ok((render_impulses(&drawn, spec.damping, fs, n_samples)?, drawn))
}

/// Deterministic rendering of a drawn component.
pub fn render_impulses(c: &DrawnComponent, damping: f64, fs: f64, n_samples: usize) -> Result<TimeSeries> {
    if (n_samples as f64) < fs / c.modulation_hz {
        return invalid(format!(
            "{n_samples} samples do not span one {} Hz modulation period",
            c.modulation_hz
        ));
    }
    let mut out = vec![0.0; n_samples];
    // contributions below 1e-16 of the onset amplitude are dropped
    let tail = (37.0 / damping).ceil() as usize;
    for onset in onsets(c, fs, n_samples) {
        let first = onset.ceil() as usize;
        let last = (first + tail).min(n_samples);
        for (i, slot) in out.iter_mut().enumerate().take(last).skip(first) {
            let lag = i as f64 - onset;
            *slot += (-damping * lag).exp() * (2.0 * PI * c.carrier_hz * lag / fs + c.phase).sin();
        }
    }
    TimeSeries::new(out, fs)
}

/// Impact times, in (fractional) samples, that fall inside the record.
pub fn onsets(c: &DrawnComponent, fs: f64, n_samples: usize) -> Vec<f64> {
    let period = fs / c.modulation_hz;
    (0..)
        .map(|k| c.onset_s * fs + k as f64 * period)
        .take_while(|&t| t < n_samples as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub components: Vec<ImpulseComponentSpec>,
    #[serde(default = "default_amplitude")]
    pub amplitude_range: [f64; 2],
    /// `None` means noiseless.
    #[serde(default = "default_snr")]
    pub snr_db: Option<f64>,
}

fn default_amplitude() -> [f64; 2] {
    [0.8, 1.0]
}

fn default_snr() -> Option<f64> {
    Some(0.0)
}

impl ClassSpec {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if self.components.is_empty() {
            return invalid(format!("class {} has no components", self.name));
        }
        let [lo, hi] = self.amplitude_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return invalid(format!("class {}: invalid amplitude range", self.name));
        }
        self.components.iter().try_for_each(|c| c.validate(fs))
    }
}

/// One synthesized sample before normalization, with what was drawn.
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub series: TimeSeries,
    pub components: Vec<(f64, DrawnComponent)>,
}

/// Sum of amplitude-scaled components plus noise at the class SNR.
pub fn synthesize_sample<R: Rng + ?Sized>(
    cls: &ClassSpec,
    fs: f64,
    n: usize,
    random_onset: bool,
    rng: &mut R,
) -> Result<Synthesized> {
    cls.validate(fs)?;
    let mut acc = vec![0.0; n];
    let mut drawn = Vec::with_capacity(cls.components.len());
    for comp in &cls.components {
        let amp = if cls.amplitude_range[0] == cls.amplitude_range[1] {
            cls.amplitude_range[0]
        } else {
            rng.random_range(cls.amplitude_range[0]..cls.amplitude_range[1])
        };
        let (x, d) = periodic_impulse(comp, fs, n, random_onset, rng)?;
        for (a, v) in acc.iter_mut().zip(x.samples()) {
            *a += amp * v;
        }
        drawn.push((amp, d));
    }
    let clean = TimeSeries::new(acc, fs)?;
    let noise_seed = rng.next_u64();
    let series = match cls.snr_db {
        Some(snr) => add_noise(&clean, snr, noise_seed)?,
        None => clean,
    };
    Ok(Synthesized {
        series,
        components: drawn,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: Vec<ClassSpec>,
    pub samples_per_class: usize,
    pub sample_length: usize,
    pub sample_rate_hz: f64,
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub random_onset: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::simulation(300, 0)
    }
}

impl DatasetSpec {
    /// The three-class benchmark: a shared component in every class, a random
    /// one in the healthy class and one fixed fault component per fault class.
    pub fn simulation(samples_per_class: usize, seed: u64) -> Self {
        let p0 = ImpulseComponentSpec::fixed("P0", 1500.0, 50.0);
        let ph = ImpulseComponentSpec {
            name: "PH".into(),
            carrier_hz: Param::Uniform([1000.0, 4000.0]),
            modulation_hz: Param::Uniform([20.0, 200.0]),
            damping: default_damping(),
        };
        let p1 = ImpulseComponentSpec::fixed("P1", 2500.0, 100.0);
        let p2 = ImpulseComponentSpec::fixed("P2", 3500.0, 125.0);
        let class = |name: &str, comps: Vec<ImpulseComponentSpec>| ClassSpec {
            name: name.into(),
            components: comps,
            amplitude_range: default_amplitude(),
            snr_db: default_snr(),
        };
        Self {
            classes: vec![
                class("Health", vec![p0.clone(), ph]),
                class("Fault1", vec![p0.clone(), p1]),
                class("Fault2", vec![p0, p2]),
            ],
            samples_per_class,
            sample_length: 2000,
            sample_rate_hz: 10_000.0,
            train_fraction: 0.7,
            seed,
            random_onset: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return invalid("need at least two classes");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return invalid("train_fraction must lie in (0, 1)");
        }
        if self.samples_per_class == 0 || self.sample_length < 2 {
            return invalid("empty dataset");
        }
        if !(self.sample_rate_hz > 0.0) {
            return invalid("sample rate must be positive");
        }
        self.classes.iter().try_for_each(|c| c.validate(self.sample_rate_hz))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Per-sample RNG: stream `index` of the dataset seed, so samples can be
/// generated in any order.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Stratified train/test assignment: per class, `floor(n * fraction)` samples
/// chosen by a seeded shuffle go to training.
pub fn stratified_split(labels: &[usize], class_count: usize, train_fraction: f64, seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Test; labels.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for c in 0..class_count {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        // Fisher-Yates with the seeded stream
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n_train = (idx.len() as f64 * train_fraction + 1e-9).floor() as usize;
        for &i in &idx[..n_train] {
            splits[i] = Split::Train;
        }
    }
    splits
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let total = spec.classes.len() * spec.samples_per_class;
    let make = |index: usize| -> Result<Sample> {
        let label = index / spec.samples_per_class;
        let mut rng = sample_rng(spec.seed, index);
        let syn = synthesize_sample(
            &spec.classes[label],
            spec.sample_rate_hz,
            spec.sample_length,
            spec.random_onset,
            &mut rng,
        )?;
        Ok(Sample {
            series: normalize_meanstd(&syn.series)?,
            label,
            split: Split::Train,
            origin: SampleOrigin::Simulated {
                seed: spec.seed,
                stream: index as u64,
            },
        })
    };
    #[cfg(feature = "parallel")]
    let samples: Result<Vec<Sample>> = {
        use rayon::prelude::*;
        (0..total).into_par_iter().map(make).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let samples: Result<Vec<Sample>> = (0..total).map(make).collect();
    let mut samples = samples?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let splits = stratified_split(&labels, spec.classes.len(), spec.train_fraction, spec.seed);
    for (s, split) in samples.iter_mut().zip(splits) {
        s.split = split;
    }
    Ok(Dataset {
        class_names: spec.class_names(),
        sample_rate_hz: spec.sample_rate_hz,
        sample_length: spec.sample_length,
        samples,
        source: serde_json::to_value(spec)?,
    })
}
