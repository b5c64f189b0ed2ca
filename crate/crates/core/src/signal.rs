//! Spectral primitives shared by every other module: the sampled signal type,
//! FFT spectra, a periodic-boundary STFT with exact weighted overlap-add
//! inversion, Hilbert envelopes, noise injection and normalization.
//!
//! The STFT wraps around the end of the signal. A signal of `n` samples is
//! zero-padded to the next multiple of the hop, and frame `t` reads the
//! `length` samples starting at `t * hop` modulo the padded length. Every
//! sample is therefore covered by the same number of frames, and the inverse
//! is exact for any window whose squared overlap-add is constant.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::Grid;

/// Uniformly sampled real signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    samples: Vec<f64>,
    sample_rate_hz: f64,
}

impl TimeSeries {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return invalid("time series must contain at least one sample");
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return invalid(format!("sample rate must be positive, got {sample_rate_hz}"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite sample at index {i}"));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: f64) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate_hz)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    /// Mean squared sample.
    pub fn power(&self) -> f64 {
        self.energy() / self.samples.len() as f64
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * a).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Relative L2 distance `‖a − b‖ / ‖b‖` (absolute when `b` is zero).
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

/// Analysis/synthesis window and hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawWindow", into = "RawWindow")]
pub struct WindowSpec {
    kind: WindowKind,
    length: usize,
    hop: usize,
    cola: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWindow {
    kind: WindowKind,
    length: usize,
    hop: usize,
}

impl TryFrom<RawWindow> for WindowSpec {
    type Error = Error;

    fn try_from(raw: RawWindow) -> Result<Self> {
        WindowSpec::new(raw.kind, raw.length, raw.hop)
    }
}

impl From<WindowSpec> for RawWindow {
    fn from(w: WindowSpec) -> Self {
        RawWindow {
            kind: w.kind,
            length: w.length,
            hop: w.hop,
        }
    }
}

impl Default for WindowSpec {
    /// Hann, 80 samples, hop 20. At 10 kHz this gives 125 Hz bins and a
    /// cyclic-frequency range of 250 Hz.
    fn default() -> Self {
        Self::new(WindowKind::Hann, 80, 20).expect("default window is valid")
    }
}

impl WindowSpec {
    pub fn new(kind: WindowKind, length: usize, hop: usize) -> Result<Self> {
        if length < 2 {
            return Err(Error::Config(format!("window length must be >= 2, got {length}")));
        }
        if hop == 0 || hop > length {
            return Err(Error::Config(format!(
                "hop must be in 1..={length}, got {hop}"
            )));
        }
        let mut w = Self {
            kind,
            length,
            hop,
            cola: false,
        };
        w.cola = w.check_cola();
        Ok(w)
    }

    pub fn hann(length: usize, hop: usize) -> Result<Self> {
        Self::new(WindowKind::Hann, length, hop)
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Whether the squared window overlap-adds to a constant at this hop,
    /// which is the condition for exact (and well-conditioned) inversion.
    pub fn is_cola(&self) -> bool {
        self.cola
    }

    /// One-sided bin count.
    pub fn bins(&self) -> usize {
        self.length / 2 + 1
    }

    pub fn coefficients(&self) -> Vec<f64> {
        let n = self.length as f64;
        (0..self.length)
            .map(|i| match self.kind {
                // periodic Hann
                WindowKind::Hann => 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos(),
                WindowKind::Rectangular => 1.0,
            })
            .collect()
    }

    /// Overlap-added squared window per residue `n mod hop`.
    fn squared_overlap(&self) -> Vec<f64> {
        let w = self.coefficients();
        (0..self.hop)
            .map(|r| w.iter().skip(r).step_by(self.hop).map(|v| v * v).sum())
            .collect()
    }

    fn check_cola(&self) -> bool {
        let sums = self.squared_overlap();
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        min > 0.0 && (max - min) <= 1e-10 * max
    }

    /// Number of frames for a signal of `n` samples.
    pub fn frame_count(&self, n: usize) -> usize {
        n.div_ceil(self.hop)
    }

    pub fn require_cola(&self) -> Result<()> {
        if self.cola {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{:?} window of length {} with hop {} does not satisfy the overlap-add condition",
                self.kind, self.length, self.hop
            )))
        }
    }
}

/// One-sided STFT, rows are frequency bins and columns are frames.
#[derive(Debug, Clone, PartialEq)]
pub struct StftGrid {
    pub values: Grid<Complex64>,
    pub freq_axis_hz: Vec<f64>,
    pub frame_times_s: Vec<f64>,
    pub window: WindowSpec,
    pub source_length: usize,
    pub sample_rate_hz: f64,
}

impl StftGrid {
    pub fn bins(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }
}

/// One-sided spectrum with its frequency axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<Complex64>,
    pub freq_axis_hz: Vec<f64>,
    /// Length of the transformed signal (needed to undo the one-sided fold).
    pub source_length: usize,
}

impl Spectrum {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm()).collect()
    }

    /// Energy of the equivalent two-sided spectrum.
    pub fn two_sided_energy(&self) -> f64 {
        let n = self.source_length;
        self.values
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let mirrored = k != 0 && !(n % 2 == 0 && k == n / 2);
                c.norm_sqr() * if mirrored { 2.0 } else { 1.0 }
            })
            .sum()
    }

    pub fn bin_of(&self, freq_hz: f64) -> usize {
        let df = if self.freq_axis_hz.len() > 1 {
            self.freq_axis_hz[1] - self.freq_axis_hz[0]
        } else {
            1.0
        };
        ((freq_hz / df).round().max(0.0) as usize).min(self.values.len() - 1)
    }
}

/// Reusable STFT/iSTFT plan for one window.
#[derive(Clone)]
pub struct StftPlan {
    window: WindowSpec,
    coeffs: Vec<f64>,
    norm: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("window", &self.window).finish()
    }
}

impl StftPlan {
    pub fn new(window: WindowSpec) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window,
            coeffs: window.coefficients(),
            norm: window.squared_overlap(),
            fwd: planner.plan_fft_forward(window.length),
            inv: planner.plan_fft_inverse(window.length),
        }
    }

    pub fn window(&self) -> &WindowSpec {
        &self.window
    }

    pub fn forward(&self, x: &TimeSeries) -> Result<StftGrid> {
        let len = self.window.length;
        let hop = self.window.hop;
        let n = x.len();
        if n < len {
            return invalid(format!(
                "signal of {n} samples is shorter than the {len}-sample window"
            ));
        }
        let frames = self.window.frame_count(n);
        let padded = frames * hop;
        let bins = self.window.bins();
        let samples = x.samples();
        let mut values = Grid::filled(bins, frames, Complex64::new(0.0, 0.0));
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fwd.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * hop;
            for (m, slot) in buf.iter_mut().enumerate() {
                let idx = (start + m) % padded;
                let v = if idx < n { samples[idx] } else { 0.0 };
                *slot = Complex64::new(v * self.coeffs[m], 0.0);
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf.iter().take(bins).enumerate() {
                values[(k, t)] = *c;
            }
        }
        let fs = x.sample_rate();
        Ok(StftGrid {
            values,
            freq_axis_hz: (0..bins).map(|k| k as f64 * fs / len as f64).collect(),
            frame_times_s: (0..frames).map(|t| (t * hop) as f64 / fs).collect(),
            window: self.window,
            source_length: n,
            sample_rate_hz: fs,
        })
    }

    pub fn inverse(&self, g: &StftGrid) -> Result<TimeSeries> {
        self.window.require_cola()?;
        if g.window != self.window {
            return invalid("grid was produced with a different window");
        }
        let len = self.window.length;
        let hop = self.window.hop;
        let bins = self.window.bins();
        let frames = self.window.frame_count(g.source_length);
        if g.values.shape() != (bins, frames) {
            return invalid(format!(
                "grid shape {:?} does not match expected ({bins}, {frames})",
                g.values.shape()
            ));
        }
        let padded = frames * hop;
        let mut out = vec![0.0; padded];
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inv.get_inplace_scratch_len()];
        let scale = 1.0 / len as f64;
        for t in 0..frames {
            hermitian_fill(&mut buf, |k| g.values[(k, t)]);
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            let start = t * hop;
            // frames near the end wrap around to the start
            let split = len.min(padded - start);
            for (m, c) in buf[..split].iter().enumerate() {
                out[start + m] += c.re * scale * self.coeffs[m];
            }
            for (m, c) in buf.iter().enumerate().skip(split) {
                out[start + m - padded] += c.re * scale * self.coeffs[m];
            }
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v /= self.norm[i % hop];
        }
        out.truncate(g.source_length);
        TimeSeries::new(out, g.sample_rate_hz)
    }
}

/// Fill a full-length buffer from a one-sided spectrum accessor.
pub(crate) fn hermitian_fill(buf: &mut [Complex64], one_sided: impl Fn(usize) -> Complex64) {
    let n = buf.len();
    let bins = n / 2 + 1;
    for k in 0..bins {
        buf[k] = one_sided(k);
    }
    for k in bins..n {
        buf[k] = buf[n - k].conj();
    }
}

pub fn stft(x: &TimeSeries, w: &WindowSpec) -> Result<StftGrid> {
    StftPlan::new(*w).forward(x)
}

pub fn istft(g: &StftGrid, w: &WindowSpec) -> Result<TimeSeries> {
    StftPlan::new(*w).inverse(g)
}

/// One-sided DFT of the whole signal.
pub fn spectrum(x: &TimeSeries) -> Spectrum {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.samples().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let bins = n / 2 + 1;
    buf.truncate(bins);
    let fs = x.sample_rate();
    Spectrum {
        values: buf,
        freq_axis_hz: (0..bins).map(|k| k as f64 * fs / n as f64).collect(),
        source_length: n,
    }
}

/// Inverse of [`spectrum`]. Imaginary parts of the DC and Nyquist bins are
/// ignored.
pub fn inverse_spectrum(s: &Spectrum, sample_rate_hz: f64) -> Result<TimeSeries> {
    let n = s.source_length;
    if s.values.len() != n / 2 + 1 {
        return invalid(format!(
            "spectrum has {} bins, expected {} for length {n}",
            s.values.len(),
            n / 2 + 1
        ));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    hermitian_fill(&mut buf, |k| s.values[k]);
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    TimeSeries::new(buf.iter().map(|c| c.re / n as f64).collect(), sample_rate_hz)
}

/// Analytic signal by zeroing negative frequencies and doubling positive ones.
/// Odd-length input is padded with one zero, so the result may be one sample
/// longer than `x`.
pub fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    let mut n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if n % 2 == 1 {
        buf.push(Complex64::new(0.0, 0.0));
        n += 1;
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        if k == 0 || k == n / 2 {
            continue;
        }
        if k < n / 2 {
            *c *= 2.0;
        } else {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c / n as f64).collect()
}

/// `|analytic(x)|`, padded to even length.
pub fn envelope(x: &TimeSeries) -> Vec<f64> {
    analytic_signal(x.samples()).iter().map(|c| c.norm()).collect()
}

/// Spectrum of the Hilbert envelope. The DC bin is kept.
pub fn envelope_spectrum(x: &TimeSeries) -> Spectrum {
    let env = envelope(x);
    let ts = TimeSeries::new(env, x.sample_rate()).expect("envelope of a valid series is valid");
    spectrum(&ts)
}

/// Add white Gaussian noise scaled to hit `snr_db` exactly on this draw.
/// `f64::INFINITY` means no noise.
pub fn add_noise(x: &TimeSeries, snr_db: f64, seed: u64) -> Result<TimeSeries> {
    if snr_db.is_nan() {
        return invalid("SNR must not be NaN");
    }
    if snr_db == f64::INFINITY {
        return Ok(x.clone());
    }
    let p_signal = x.power();
    if p_signal == 0.0 {
        return invalid("cannot set an SNR relative to a zero-energy signal");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let p_noise: f64 = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let target = p_signal / 10f64.powf(snr_db / 10.0);
    let gain = (target / p_noise).sqrt();
    let samples = x
        .samples()
        .iter()
        .zip(&noise)
        .map(|(s, n)| s + gain * n)
        .collect();
    TimeSeries::new(samples, x.sample_rate())
}

/// Zero-mean, unit (population) standard deviation.
pub fn normalize_meanstd(x: &TimeSeries) -> Result<TimeSeries> {
    let n = x.len() as f64;
    let mean = x.samples().iter().sum::<f64>() / n;
    let var = x.samples().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-14 * (1.0 + mean.abs())) {
        return invalid("cannot normalize a constant signal");
    }
    let samples = x.samples().iter().map(|v| (v - mean) / std).collect();
    TimeSeries::new(samples, x.sample_rate())
}
