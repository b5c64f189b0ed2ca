//! Explainable domains: each turns a signal into a representation, splits its
//! coordinates into coalition cells, and rebuilds a signal from a mix of the
//! explained sample's cells and a background's cells.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::coalition::Coalition;
use crate::cs::{angle, phasors, CsRepresentation, CsTransform};
use crate::error::{invalid, Error, Result};
use crate::grid::Grid;
use crate::signal::{hermitian_fill, Spectrum, StftGrid, StftPlan, TimeSeries, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Time,
    Frequency,
    Envelope,
    TimeFrequency,
    CyclicSpectral,
}

impl DomainKind {
    pub const ALL: [DomainKind; 5] = [
        DomainKind::Time,
        DomainKind::Frequency,
        DomainKind::Envelope,
        DomainKind::TimeFrequency,
        DomainKind::CyclicSpectral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Time => "time",
            DomainKind::Frequency => "frequency",
            DomainKind::Envelope => "envelope",
            DomainKind::TimeFrequency => "time_frequency",
            DomainKind::CyclicSpectral => "cyclic_spectral",
        }
    }

    pub fn needs_window(self) -> bool {
        matches!(self, DomainKind::TimeFrequency | DomainKind::CyclicSpectral)
    }
}

impl std::fmt::Display for DomainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm || (norm == "cs" && *k == DomainKind::CyclicSpectral) || (norm == "tf" && *k == DomainKind::TimeFrequency))
            .ok_or_else(|| Error::Config(format!("unknown domain {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainRepresentation {
    Time(TimeSeries),
    Frequency(Spectrum),
    /// Envelope spectrum plus the carrier residual `x / |analytic(x)|`.
    Envelope { spectrum: Spectrum, carrier: Vec<f64> },
    TimeFrequency(StftGrid),
    CyclicSpectral(CsRepresentation),
}

impl DomainRepresentation {
    pub fn kind(&self) -> DomainKind {
        match self {
            DomainRepresentation::Time(_) => DomainKind::Time,
            DomainRepresentation::Frequency(_) => DomainKind::Frequency,
            DomainRepresentation::Envelope { .. } => DomainKind::Envelope,
            DomainRepresentation::TimeFrequency(_) => DomainKind::TimeFrequency,
            DomainRepresentation::CyclicSpectral(_) => DomainKind::CyclicSpectral,
        }
    }

    /// Shape of the coordinate grid that partitions refer to.
    pub fn coord_shape(&self) -> (usize, usize) {
        match self {
            DomainRepresentation::Time(x) => (x.len(), 1),
            DomainRepresentation::Frequency(s) => (s.values.len(), 1),
            DomainRepresentation::Envelope { spectrum, .. } => (spectrum.values.len(), 1),
            DomainRepresentation::TimeFrequency(g) => g.values.shape(),
            DomainRepresentation::CyclicSpectral(r) => r.cs.shape(),
        }
    }

    /// Magnitude of every coordinate, row-major over `coord_shape`.
    pub fn magnitudes(&self) -> Vec<f64> {
        match self {
            DomainRepresentation::Time(x) => x.samples().iter().map(|v| v.abs()).collect(),
            DomainRepresentation::Frequency(s) | DomainRepresentation::Envelope { spectrum: s, .. } => s.magnitudes(),
            DomainRepresentation::TimeFrequency(g) => g.values.as_slice().iter().map(|c| c.norm()).collect(),
            DomainRepresentation::CyclicSpectral(r) => r.cs.as_slice().iter().map(|c| c.norm()).collect(),
        }
    }
}

/// One axis of a partitioned coordinate grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Axis {
    pub name: String,
    pub unit: String,
    /// Cell boundaries as coordinate indices; cell `i` is `edges[i]..edges[i+1]`.
    pub edges: Vec<usize>,
    /// Mean physical coordinate of each cell.
    pub centers: Vec<f64>,
    #[serde(skip)]
    coords: Vec<f64>,
    #[serde(skip)]
    cell_of: Vec<u32>,
}

impl Axis {
    fn new(name: &str, unit: &str, coords: Vec<f64>, edges: Vec<usize>) -> Result<Self> {
        let n = coords.len();
        if edges.len() < 2 || edges[0] != 0 || *edges.last().unwrap() != n || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "{name}: cell edges {edges:?} do not split {n} coordinates into non-empty cells"
            )));
        }
        let mut cell_of = vec![0u32; n];
        let mut centers = Vec::with_capacity(edges.len() - 1);
        for (c, w) in edges.windows(2).enumerate() {
            cell_of[w[0]..w[1]].fill(c as u32);
            centers.push(coords[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64);
        }
        Ok(Self {
            name: name.into(),
            unit: unit.into(),
            edges,
            centers,
            coords,
            cell_of,
        })
    }

    fn uniform(name: &str, unit: &str, coords: Vec<f64>, cells: usize) -> Result<Self> {
        let n = coords.len();
        if cells == 0 || cells > n {
            return Err(Error::Config(format!("{name}: cannot split {n} coordinates into {cells} cells")));
        }
        Self::new(name, unit, coords, even_edges(n, cells))
    }

    pub fn cells(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Cell holding the coordinate nearest to `value`.
    pub fn cell_at(&self, value: f64) -> usize {
        let idx = self
            .coords
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - value).abs().total_cmp(&(b.1 - value).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.cell_of[idx] as usize
    }

    pub fn range(&self) -> (f64, f64) {
        (self.coords[0], *self.coords.last().unwrap())
    }
}

fn even_edges(n: usize, cells: usize) -> Vec<usize> {
    (0..=cells).map(|i| i * n / cells).collect()
}

/// Assignment of every representation coordinate to one of `d` cells. Grid
/// domains use axis-aligned rectangles; cell `r * col_cells + c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoalitionPartition {
    pub domain: DomainKind,
    pub rows: Axis,
    pub cols: Option<Axis>,
}

impl CoalitionPartition {
    pub fn cell_count(&self) -> usize {
        self.rows.cells() * self.col_cells()
    }

    pub fn col_cells(&self) -> usize {
        self.cols.as_ref().map_or(1, Axis::cells)
    }

    /// Cells per axis.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.cells(), self.col_cells())
    }

    /// Coordinates per axis.
    pub fn coord_shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.as_ref().map_or(1, Axis::len))
    }

    pub fn cell_of(&self, row: usize, col: usize) -> usize {
        let c = self.cols.as_ref().map_or(0, |a| a.cell_of[col] as usize);
        self.rows.cell_of[row] as usize * self.col_cells() + c
    }

    /// Cell containing the coordinate nearest to the given physical position.
    pub fn cell_at(&self, row_value: f64, col_value: Option<f64>) -> usize {
        let r = self.rows.cell_at(row_value);
        let c = match (&self.cols, col_value) {
            (Some(a), Some(v)) => a.cell_at(v),
            _ => 0,
        };
        r * self.col_cells() + c
    }

    pub fn cell_center(&self, cell: usize) -> (f64, Option<f64>) {
        let cc = self.col_cells();
        (self.rows.centers[cell / cc], self.cols.as_ref().map(|a| a.centers[cell % cc]))
    }

    /// Number of coordinates in every cell.
    pub fn cell_sizes(&self) -> Vec<usize> {
        let (rows, cols) = self.coord_shape();
        let mut sizes = vec![0; self.cell_count()];
        for r in 0..rows {
            for c in 0..cols {
                sizes[self.cell_of(r, c)] += 1;
            }
        }
        sizes
    }

    /// Small plain-text description for reports.
    pub fn layout_text(&self) -> String {
        let mut s = String::new();
        let (rc, cc) = self.shape();
        let (rn, cn) = self.coord_shape();
        let _ = writeln!(s, "domain: {}", self.domain);
        let _ = writeln!(s, "cells: {} ({rc} x {cc}) over {rn} x {cn} coordinates", self.cell_count());
        for axis in std::iter::once(&self.rows).chain(self.cols.as_ref()) {
            let (lo, hi) = axis.range();
            let _ = writeln!(
                s,
                "{}: {} cells over [{lo:.4}, {hi:.4}] {}, edges {:?}",
                axis.name,
                axis.cells(),
                axis.unit,
                axis.edges
            );
        }
        s
    }

    fn check(&self, rep: &DomainRepresentation) -> Result<()> {
        if rep.kind() != self.domain {
            return invalid(format!("partition is for the {} domain, representation is {}", self.domain, rep.kind()));
        }
        if rep.coord_shape() != self.coord_shape() {
            return invalid(format!(
                "representation shape {:?} does not match partition shape {:?}",
                rep.coord_shape(),
                self.coord_shape()
            ));
        }
        Ok(())
    }
}

/// Cell counts for a partition. `cols` is ignored by vector domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionShape {
    pub rows: usize,
    #[serde(default = "one")]
    pub cols: usize,
}

fn one() -> usize {
    1
}

impl PartitionShape {
    pub fn default_for(kind: DomainKind) -> Self {
        let (rows, cols) = match kind {
            DomainKind::Time => (50, 1),
            DomainKind::Frequency => (64, 1),
            DomainKind::Envelope => (64, 1),
            DomainKind::TimeFrequency => (16, 8),
            DomainKind::CyclicSpectral => (16, 16),
        };
        Self { rows, cols }
    }
}

/// A planned domain for signals of one length and sample rate.
#[derive(Clone)]
pub struct Domain {
    kind: DomainKind,
    length: usize,
    sample_rate_hz: f64,
    window: WindowSpec,
    fwd: Option<Arc<dyn Fft<f64>>>,
    inv: Option<Arc<dyn Fft<f64>>>,
    stft: Option<StftPlan>,
    cs: Option<CsTransform>,
}

impl std::fmt::Debug for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Domain")
            .field("kind", &self.kind)
            .field("length", &self.length)
            .field("sample_rate_hz", &self.sample_rate_hz)
            .field("window", &self.window)
            .finish()
    }
}

impl Domain {
    /// `window` is required for the time-frequency and cyclic-spectral
    /// domains; the envelope domain uses it only to bound its partition.
    pub fn new(kind: DomainKind, length: usize, sample_rate_hz: f64, window: Option<WindowSpec>) -> Result<Self> {
        if length < 2 {
            return invalid(format!("signal length {length} is too short"));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return invalid(format!("sample rate must be positive, got {sample_rate_hz}"));
        }
        if kind.needs_window() && window.is_none() {
            return Err(Error::Config(format!("the {kind} domain needs a window")));
        }
        let w = window.unwrap_or_default();
        let mut d = Self {
            kind,
            length,
            sample_rate_hz,
            window: w,
            fwd: None,
            inv: None,
            stft: None,
            cs: None,
        };
        let mut planner = FftPlanner::new();
        match kind {
            DomainKind::Time => {}
            DomainKind::Frequency => {
                d.fwd = Some(planner.plan_fft_forward(length));
                d.inv = Some(planner.plan_fft_inverse(length));
            }
            DomainKind::Envelope => {
                let m = length + length % 2;
                d.fwd = Some(planner.plan_fft_forward(m));
                d.inv = Some(planner.plan_fft_inverse(m));
            }
            DomainKind::TimeFrequency => {
                w.require_cola()?;
                if length < w.length() {
                    return invalid(format!("signal of {length} samples is shorter than the {}-sample window", w.length()));
                }
                d.stft = Some(StftPlan::new(w));
            }
            DomainKind::CyclicSpectral => d.cs = Some(CsTransform::new(w, length)?),
        }
        Ok(d)
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn window(&self) -> &WindowSpec {
        &self.window
    }

    fn padded_length(&self) -> usize {
        self.length + self.length % 2
    }

    fn check_series(&self, x: &TimeSeries) -> Result<()> {
        if x.len() != self.length {
            return invalid(format!("domain planned for {} samples, got {}", self.length, x.len()));
        }
        if x.sample_rate() != self.sample_rate_hz {
            return invalid(format!(
                "domain planned for {} Hz, signal is sampled at {} Hz",
                self.sample_rate_hz,
                x.sample_rate()
            ));
        }
        Ok(())
    }

    fn rfft(&self, x: &[f64]) -> Vec<Complex64> {
        let fft = self.fwd.as_ref().expect("planned");
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.process(&mut buf);
        buf.truncate(x.len() / 2 + 1);
        buf
    }

    fn irfft(&self, one_sided: &[Complex64], n: usize) -> Vec<f64> {
        let fft = self.inv.as_ref().expect("planned");
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        hermitian_fill(&mut buf, |k| one_sided[k]);
        fft.process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }

    fn spectrum_of(&self, values: Vec<Complex64>, n: usize) -> Spectrum {
        let fs = self.sample_rate_hz;
        Spectrum {
            freq_axis_hz: (0..values.len()).map(|k| k as f64 * fs / n as f64).collect(),
            values,
            source_length: n,
        }
    }

    pub fn forward(&self, x: &TimeSeries) -> Result<DomainRepresentation> {
        self.check_series(x)?;
        Ok(match self.kind {
            DomainKind::Time => DomainRepresentation::Time(x.clone()),
            DomainKind::Frequency => DomainRepresentation::Frequency(self.spectrum_of(self.rfft(x.samples()), self.length)),
            DomainKind::Envelope => {
                let m = self.padded_length();
                let mut padded = x.samples().to_vec();
                padded.resize(m, 0.0);
                let env = self.analytic_magnitude(&padded);
                let carrier = padded
                    .iter()
                    .zip(&env)
                    .map(|(v, e)| if *e > 0.0 { v / e } else { 0.0 })
                    .collect();
                DomainRepresentation::Envelope {
                    spectrum: self.spectrum_of(self.rfft(&env), m),
                    carrier,
                }
            }
            DomainKind::TimeFrequency => DomainRepresentation::TimeFrequency(self.stft.as_ref().unwrap().forward(x)?),
            DomainKind::CyclicSpectral => DomainRepresentation::CyclicSpectral(self.cs.as_ref().unwrap().forward(x)?),
        })
    }

    fn analytic_magnitude(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.as_ref().unwrap().process(&mut buf);
        for (k, c) in buf.iter_mut().enumerate() {
            if k == 0 || k == n / 2 {
                continue;
            }
            *c = if k < n / 2 { *c * 2.0 } else { Complex64::new(0.0, 0.0) };
        }
        self.inv.as_ref().unwrap().process(&mut buf);
        buf.iter().map(|c| c.norm() / n as f64).collect()
    }

    fn check_rep(&self, rep: &DomainRepresentation) -> Result<()> {
        if rep.kind() != self.kind {
            return invalid(format!("expected a {} representation, got {}", self.kind, rep.kind()));
        }
        let expected = match self.kind {
            DomainKind::Time => (self.length, 1),
            DomainKind::Frequency => (self.length / 2 + 1, 1),
            DomainKind::Envelope => (self.padded_length() / 2 + 1, 1),
            DomainKind::TimeFrequency => (self.window.bins(), self.window.frame_count(self.length)),
            DomainKind::CyclicSpectral => {
                let cs = self.cs.as_ref().unwrap();
                (self.window.bins(), cs.cyclic_bins())
            }
        };
        if rep.coord_shape() != expected {
            return invalid(format!("representation shape {:?}, expected {expected:?}", rep.coord_shape()));
        }
        match rep {
            DomainRepresentation::Envelope { carrier, .. } if carrier.len() != self.padded_length() => {
                invalid("carrier residual length does not match the domain")
            }
            DomainRepresentation::TimeFrequency(g) if g.window != self.window => invalid("grid window does not match the domain"),
            DomainRepresentation::CyclicSpectral(r)
                if r.window != self.window || r.phase.shape() != (self.window.bins(), self.window.frame_count(self.length)) =>
            {
                invalid("cs representation does not match the domain window")
            }
            _ => Ok(()),
        }
    }

    /// Signal rebuilt from a representation.
    pub fn inverse(&self, rep: &DomainRepresentation) -> Result<TimeSeries> {
        self.check_rep(rep)?;
        let fs = self.sample_rate_hz;
        match rep {
            DomainRepresentation::Time(x) => Ok(x.clone()),
            DomainRepresentation::Frequency(s) => TimeSeries::new(self.irfft(&s.values, self.length), fs),
            DomainRepresentation::Envelope { spectrum, carrier } => {
                let env = self.irfft(&spectrum.values, self.padded_length());
                let y = env
                    .iter()
                    .zip(carrier)
                    .take(self.length)
                    .map(|(e, c)| e.max(0.0) * c)
                    .collect();
                TimeSeries::new(y, fs)
            }
            DomainRepresentation::TimeFrequency(g) => self.stft.as_ref().unwrap().inverse(g),
            DomainRepresentation::CyclicSpectral(r) => Ok(self.cs.as_ref().unwrap().inverse(r)?.signal),
        }
    }

    pub fn partition(&self, shape: PartitionShape) -> Result<CoalitionPartition> {
        let fs = self.sample_rate_hz;
        let hz = |n: usize, len: usize| (0..n).map(|k| k as f64 * fs / len as f64).collect::<Vec<_>>();
        let (rows, cols) = match self.kind {
            DomainKind::Time => {
                let t = (0..self.length).map(|i| i as f64 / fs).collect();
                (Axis::uniform("time", "s", t, shape.rows)?, None)
            }
            DomainKind::Frequency => (Axis::uniform("frequency", "Hz", hz(self.length / 2 + 1, self.length), shape.rows)?, None),
            DomainKind::Envelope => {
                let m = self.padded_length();
                let coords = hz(m / 2 + 1, m);
                // bands cover [0, fs/(2·hop)]; anything above is one residual cell
                let alpha_max = fs / (2.0 * self.window.hop() as f64);
                let within = coords.iter().take_while(|&&f| f <= alpha_max + 1e-9).count().max(1);
                let bands = shape.rows.min(within);
                let mut edges = even_edges(within, bands);
                if within < coords.len() {
                    edges.push(coords.len());
                }
                (Axis::new("envelope frequency", "Hz", coords, edges)?, None)
            }
            DomainKind::TimeFrequency => {
                let bins = self.window.bins();
                let frames = self.window.frame_count(self.length);
                let hop = self.window.hop() as f64;
                let times = (0..frames).map(|t| t as f64 * hop / fs).collect();
                (
                    Axis::uniform("frequency", "Hz", hz(bins, self.window.length()), shape.rows)?,
                    Some(Axis::uniform("frame time", "s", times, shape.cols)?),
                )
            }
            DomainKind::CyclicSpectral => {
                let cs = self.cs.as_ref().unwrap();
                let bins = self.window.bins();
                let hop = self.window.hop() as f64;
                let alpha = (0..cs.cyclic_bins())
                    .map(|a| a as f64 * fs / (hop * cs.frames() as f64))
                    .collect();
                (
                    Axis::uniform("spectral frequency", "Hz", hz(bins, self.window.length()), shape.rows)?,
                    Some(Axis::uniform("cyclic frequency", "Hz", alpha, shape.cols)?),
                )
            }
        };
        let p = CoalitionPartition {
            domain: self.kind,
            rows,
            cols,
        };
        if p.cell_count() < 2 {
            return Err(Error::Config("a partition needs at least two cells".into()));
        }
        Ok(p)
    }

    pub fn default_partition(&self) -> Result<CoalitionPartition> {
        self.partition(PartitionShape::default_for(self.kind))
    }

    /// Representation with the cells in `keep` taken from `rep` and all other
    /// cells from `background`. Phase (time-frequency, cyclic-spectral) and
    /// the carrier residual (envelope) always come from `rep`.
    pub fn hybrid(
        &self,
        rep: &DomainRepresentation,
        keep: &Coalition,
        partition: &CoalitionPartition,
        background: &DomainRepresentation,
    ) -> Result<DomainRepresentation> {
        self.check_rep(rep)?;
        self.check_rep(background)?;
        partition.check(rep)?;
        if keep.player_count() != partition.cell_count() {
            return invalid(format!(
                "coalition over {} players, partition has {} cells",
                keep.player_count(),
                partition.cell_count()
            ));
        }
        let keep_cell: Vec<bool> = (0..partition.cell_count()).map(|c| keep.contains(c)).collect();
        let keep_vec = |i: usize| keep_cell[partition.cell_of(i, 0)];
        Ok(match (rep, background) {
            (DomainRepresentation::Time(x), DomainRepresentation::Time(b)) => {
                let v = x
                    .samples()
                    .iter()
                    .zip(b.samples())
                    .enumerate()
                    .map(|(i, (xv, bv))| if keep_vec(i) { *xv } else { *bv })
                    .collect();
                DomainRepresentation::Time(TimeSeries::new(v, self.sample_rate_hz)?)
            }
            (DomainRepresentation::Frequency(x), DomainRepresentation::Frequency(b)) => {
                DomainRepresentation::Frequency(mix_spectrum(x, b, keep_vec))
            }
            (DomainRepresentation::Envelope { spectrum, carrier }, DomainRepresentation::Envelope { spectrum: b, .. }) => {
                DomainRepresentation::Envelope {
                    spectrum: mix_spectrum(spectrum, b, keep_vec),
                    carrier: carrier.clone(),
                }
            }
            (DomainRepresentation::TimeFrequency(x), DomainRepresentation::TimeFrequency(b)) => {
                let mut g = x.clone();
                let (bins, frames) = g.values.shape();
                for f in 0..bins {
                    for t in 0..frames {
                        if !keep_cell[partition.cell_of(f, t)] {
                            let xv = x.values[(f, t)];
                            g.values[(f, t)] = Complex64::from_polar(b.values[(f, t)].norm(), angle(xv));
                        }
                    }
                }
                DomainRepresentation::TimeFrequency(g)
            }
            (DomainRepresentation::CyclicSpectral(x), DomainRepresentation::CyclicSpectral(b)) => {
                let mut r = x.clone();
                r.cs = mix_grid(&x.cs, &b.cs, partition, &keep_cell);
                DomainRepresentation::CyclicSpectral(r)
            }
            _ => unreachable!("kinds checked above"),
        })
    }

    /// Signal rebuilt from the hybrid of `rep` and `background` under `keep`.
    pub fn mask_and_invert(
        &self,
        rep: &DomainRepresentation,
        keep: &Coalition,
        partition: &CoalitionPartition,
        background: &DomainRepresentation,
    ) -> Result<TimeSeries> {
        match rep {
            DomainRepresentation::CyclicSpectral(_) | DomainRepresentation::TimeFrequency(_) => {
                self.mask_and_invert_prepared(&self.prepare(rep.clone())?, keep, partition, background)
            }
            _ => {
                let h = self.hybrid(rep, keep, partition, background)?;
                self.inverse(&h)
            }
        }
    }

    /// Attach the phase factors that every masked inversion of `rep` shares.
    pub fn prepare(&self, rep: DomainRepresentation) -> Result<Prepared> {
        self.check_rep(&rep)?;
        let phasors = match &rep {
            DomainRepresentation::CyclicSpectral(r) => Some(phasors(&r.phase)),
            DomainRepresentation::TimeFrequency(g) => Some(g.values.map(|c| {
                let th = angle(*c);
                Complex64::new(th.cos(), th.sin())
            })),
            _ => None,
        };
        Ok(Prepared { rep, phasors })
    }

    /// `mask_and_invert` for a prepared sample; bitwise equal results.
    pub fn mask_and_invert_prepared(
        &self,
        prepared: &Prepared,
        keep: &Coalition,
        partition: &CoalitionPartition,
        background: &DomainRepresentation,
    ) -> Result<TimeSeries> {
        let rep = &prepared.rep;
        self.check_rep(background)?;
        partition.check(rep)?;
        if rep.kind() != background.kind() {
            return invalid(format!("background is a {} representation, expected {}", background.kind(), rep.kind()));
        }
        if keep.player_count() != partition.cell_count() {
            return invalid(format!(
                "coalition over {} players, partition has {} cells",
                keep.player_count(),
                partition.cell_count()
            ));
        }
        let keep_cell: Vec<bool> = (0..partition.cell_count()).map(|c| keep.contains(c)).collect();
        match (rep, background, &prepared.phasors) {
            (DomainRepresentation::CyclicSpectral(x), DomainRepresentation::CyclicSpectral(b), Some(u)) => {
                let cs = mix_grid(&x.cs, &b.cs, partition, &keep_cell);
                let plan = self.cs.as_ref().unwrap();
                Ok(plan.invert_with_phasors(&cs, u, self.sample_rate_hz)?.signal)
            }
            (DomainRepresentation::TimeFrequency(x), DomainRepresentation::TimeFrequency(b), Some(u)) => {
                let mut g = x.clone();
                let (bins, frames) = g.values.shape();
                for f in 0..bins {
                    for t in 0..frames {
                        if !keep_cell[partition.cell_of(f, t)] {
                            g.values[(f, t)] = u[(f, t)] * b.values[(f, t)].norm();
                        }
                    }
                }
                self.stft.as_ref().unwrap().inverse(&g)
            }
            _ => {
                let h = self.hybrid(rep, keep, partition, background)?;
                self.inverse(&h)
            }
        }
    }
}

/// A checked representation plus its shared phase factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    rep: DomainRepresentation,
    phasors: Option<Grid<Complex64>>,
}

impl Prepared {
    pub fn representation(&self) -> &DomainRepresentation {
        &self.rep
    }
}

fn mix_spectrum(x: &Spectrum, b: &Spectrum, keep: impl Fn(usize) -> bool) -> Spectrum {
    let values = x
        .values
        .iter()
        .zip(&b.values)
        .enumerate()
        .map(|(i, (xv, bv))| if keep(i) { *xv } else { *bv })
        .collect();
    Spectrum { values, ..x.clone() }
}

fn mix_grid(x: &Grid<Complex64>, b: &Grid<Complex64>, partition: &CoalitionPartition, keep_cell: &[bool]) -> Grid<Complex64> {
    let (rows, cols) = x.shape();
    let mut out = x.clone();
    for r in 0..rows {
        for c in 0..cols {
            if !keep_cell[partition.cell_of(r, c)] {
                out[(r, c)] = b[(r, c)];
            }
        }
    }
    out
}

pub fn domain_forward(kind: DomainKind, x: &TimeSeries, w: Option<&WindowSpec>) -> Result<DomainRepresentation> {
    Domain::new(kind, x.len(), x.sample_rate(), w.copied())?.forward(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Representations of reference signals drawn without replacement.
    Draw,
    /// A single all-zero representation.
    Zero,
    /// A single coefficient-wise mean over the reference signals.
    Mean,
}

impl FromStr for BackgroundMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "draw" => Ok(Self::Draw),
            "zero" => Ok(Self::Zero),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::Config(format!("unknown background mode {s:?}"))),
        }
    }
}

/// Reference representations used to fill masked cells.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSet {
    pub mode: BackgroundMode,
    pub entries: Vec<DomainRepresentation>,
    /// Index into the reference pool of each drawn entry.
    pub source_indices: Vec<usize>,
}

impl BackgroundSet {
    pub fn build(domain: &Domain, mode: BackgroundMode, pool: &[&TimeSeries], size: usize, seed: u64) -> Result<Self> {
        match mode {
            BackgroundMode::Draw => Self::draw(domain, pool, size, seed),
            BackgroundMode::Zero => Self::zero(domain),
            BackgroundMode::Mean => Self::mean(domain, pool),
        }
    }

    pub fn draw(domain: &Domain, pool: &[&TimeSeries], size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("background size must be at least 1".into()));
        }
        if pool.is_empty() {
            return invalid("background pool is empty");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, pool.len(), size.min(pool.len())).into_vec();
        idx.sort_unstable();
        let entries = idx.iter().map(|&i| domain.forward(pool[i])).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode: BackgroundMode::Draw,
            entries,
            source_indices: idx,
        })
    }

    pub fn zero(domain: &Domain) -> Result<Self> {
        let z = TimeSeries::zeros(domain.length(), domain.sample_rate())?;
        Ok(Self {
            mode: BackgroundMode::Zero,
            entries: vec![domain.forward(&z)?],
            source_indices: vec![],
        })
    }

    pub fn mean(domain: &Domain, pool: &[&TimeSeries]) -> Result<Self> {
        if pool.is_empty() {
            return invalid("background pool is empty");
        }
        let reps = pool.iter().map(|x| domain.forward(x)).collect::<Result<Vec<_>>>()?;
        let n = reps.len() as f64;
        let mut acc = reps[0].clone();
        match &mut acc {
            DomainRepresentation::Time(x) => {
                let mut s = vec![0.0; x.len()];
                for r in &reps {
                    if let DomainRepresentation::Time(v) = r {
                        s.iter_mut().zip(v.samples()).for_each(|(a, b)| *a += b / n);
                    }
                }
                *x = TimeSeries::new(s, domain.sample_rate())?;
            }
            DomainRepresentation::Frequency(sp) | DomainRepresentation::Envelope { spectrum: sp, .. } => {
                sp.values.fill(Complex64::new(0.0, 0.0));
                for r in &reps {
                    if let DomainRepresentation::Frequency(v) | DomainRepresentation::Envelope { spectrum: v, .. } = r {
                        sp.values.iter_mut().zip(&v.values).for_each(|(a, b)| *a += b / n);
                    }
                }
            }
            DomainRepresentation::TimeFrequency(g) => {
                // masking only reads magnitudes, so average those
                g.values.as_mut_slice().fill(Complex64::new(0.0, 0.0));
                for r in &reps {
                    if let DomainRepresentation::TimeFrequency(v) = r {
                        for (a, b) in g.values.as_mut_slice().iter_mut().zip(v.values.as_slice()) {
                            a.re += b.norm() / n;
                        }
                    }
                }
            }
            DomainRepresentation::CyclicSpectral(c) => {
                c.cs.as_mut_slice().fill(Complex64::new(0.0, 0.0));
                for r in &reps {
                    if let DomainRepresentation::CyclicSpectral(v) = r {
                        c.cs.as_mut_slice().iter_mut().zip(v.cs.as_slice()).for_each(|(a, b)| *a += b / n);
                    }
                }
            }
        }
        if let DomainRepresentation::Envelope { carrier, .. } = &mut acc {
            carrier.fill(0.0);
        }
        Ok(Self {
            mode: BackgroundMode::Mean,
            entries: vec![acc],
            source_indices: (0..pool.len()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{envelope_spectrum, normalize_meanstd, relative_l2};
    use crate::sim::{render_impulses, sample_rng, synthesize_sample, DatasetSpec};
    use rand::Rng;

    const FS: f64 = 10_000.0;
    const N: usize = 2000;

    fn noise(seed: u64) -> TimeSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSeries::new((0..N).map(|_| rng.random_range(-1.0..1.0)).collect(), FS).unwrap()
    }

    fn domain(kind: DomainKind) -> Domain {
        Domain::new(kind, N, FS, Some(WindowSpec::default())).unwrap()
    }

    #[test]
    fn partitions_cover_every_coordinate_once() {
        let expected = [
            (DomainKind::Time, 50),
            (DomainKind::Frequency, 64),
            (DomainKind::Envelope, 52),
            (DomainKind::TimeFrequency, 128),
            (DomainKind::CyclicSpectral, 256),
        ];
        for (kind, d) in expected {
            let dom = domain(kind);
            let p = dom.default_partition().unwrap();
            assert_eq!(p.cell_count(), d, "{kind}");
            let rep = dom.forward(&noise(1)).unwrap();
            assert_eq!(p.coord_shape(), rep.coord_shape());
            let sizes = p.cell_sizes();
            assert!(sizes.iter().all(|&s| s > 0), "{kind}: empty cell");
            let (r, c) = rep.coord_shape();
            assert_eq!(sizes.iter().sum::<usize>(), r * c);
            assert!(p.layout_text().contains(kind.name()));
        }
    }

    #[test]
    fn cs_partition_geometry() {
        let p = domain(DomainKind::CyclicSpectral).default_partition().unwrap();
        assert_eq!(p.coord_shape(), (41, 51));
        let p1 = p.cell_at(2500.0, Some(100.0));
        let p2 = p.cell_at(3500.0, Some(125.0));
        let p0 = p.cell_at(1500.0, Some(50.0));
        assert!(p0 != p1 && p1 != p2 && p0 != p2);
        let (f, a) = p.cell_center(p1);
        assert!((f - 2625.0).abs() < 1e-9 && (a.unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn window_required_for_grid_domains() {
        for kind in [DomainKind::TimeFrequency, DomainKind::CyclicSpectral] {
            assert!(matches!(Domain::new(kind, N, FS, None), Err(Error::Config(_))));
        }
        assert!(Domain::new(DomainKind::Envelope, N, FS, None).is_ok());
        assert_eq!("cs".parse::<DomainKind>().unwrap(), DomainKind::CyclicSpectral);
        assert!("bogus".parse::<DomainKind>().is_err());
    }

    #[test]
    fn time_representation_is_the_sample() {
        let x = noise(2);
        assert_eq!(domain(DomainKind::Time).forward(&x).unwrap(), DomainRepresentation::Time(x));
    }

    #[test]
    fn cs_domain_peaks_at_sine_frequency() {
        let x = TimeSeries::new((0..N).map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / FS).sin()).collect(), FS).unwrap();
        let DomainRepresentation::CyclicSpectral(r) = domain_forward(DomainKind::CyclicSpectral, &x, Some(&WindowSpec::default())).unwrap() else {
            panic!()
        };
        let mag = r.magnitude();
        let (mut best, mut at) = (0.0, (0, 0));
        for f in 0..mag.rows() {
            for a in 0..mag.cols() {
                if mag[(f, a)] > best {
                    best = mag[(f, a)];
                    at = (f, a);
                }
            }
        }
        assert_eq!((r.freq_axis_hz[at.0], at.1), (1000.0, 0));
    }

    #[test]
    fn frequency_round_trip() {
        let x = noise(3);
        let dom = domain(DomainKind::Frequency);
        let y = dom.inverse(&dom.forward(&x).unwrap()).unwrap();
        assert!(relative_l2(y.samples(), x.samples()) < 1e-10);
    }

    #[test]
    fn full_coalition_reproduces_the_sample() {
        let x = noise(4);
        let bg = noise(5);
        for kind in DomainKind::ALL {
            let dom = domain(kind);
            let p = dom.default_partition().unwrap();
            let rep = dom.forward(&x).unwrap();
            let b = dom.forward(&bg).unwrap();
            let y = dom.mask_and_invert(&rep, &Coalition::full(p.cell_count()), &p, &b).unwrap();
            let err = relative_l2(y.samples(), x.samples());
            assert!(err < 1e-6, "{kind}: {err}");
        }
    }

    #[test]
    fn empty_coalition_takes_background_content() {
        let x = noise(6);
        let bg = noise(7);
        for kind in DomainKind::ALL {
            let dom = domain(kind);
            let p = dom.default_partition().unwrap();
            let rep = dom.forward(&x).unwrap();
            let b = dom.forward(&bg).unwrap();
            let h = dom.hybrid(&rep, &Coalition::empty(p.cell_count()), &p, &b).unwrap();
            let diff = relative_l2(&h.magnitudes(), &b.magnitudes());
            assert!(diff < 1e-12, "{kind}: {diff}");
            if matches!(kind, DomainKind::Time | DomainKind::Frequency) {
                let y = dom.mask_and_invert(&rep, &Coalition::empty(p.cell_count()), &p, &b).unwrap();
                assert!(relative_l2(y.samples(), bg.samples()) < 1e-6, "{kind}");
            }
        }
        // cyclic-spectral: background content under the sample's phase
        let dom = domain(DomainKind::CyclicSpectral);
        let p = dom.default_partition().unwrap();
        let (DomainRepresentation::CyclicSpectral(xr), DomainRepresentation::CyclicSpectral(br)) =
            (dom.forward(&x).unwrap(), dom.forward(&bg).unwrap())
        else {
            panic!()
        };
        let y = dom
            .mask_and_invert(
                &DomainRepresentation::CyclicSpectral(xr.clone()),
                &Coalition::empty(256),
                &p,
                &DomainRepresentation::CyclicSpectral(br.clone()),
            )
            .unwrap();
        let direct = CsTransform::new(WindowSpec::default(), N).unwrap().invert_parts(&br.cs, &xr.phase, FS).unwrap().signal;
        assert_eq!(y, direct);
    }

    #[test]
    fn masking_the_fault_cell_weakens_its_envelope_line() {
        let spec = DatasetSpec::simulation(1, 0);
        let mut rng = sample_rng(42, 1);
        let s = synthesize_sample(&spec.classes[1], FS, N, false, &mut rng).unwrap();
        let x = normalize_meanstd(&s.series).unwrap();
        let dom = domain(DomainKind::CyclicSpectral);
        let p = dom.default_partition().unwrap();
        let rep = dom.forward(&x).unwrap();
        let zero = BackgroundSet::zero(&dom).unwrap();
        let before = envelope_spectrum(&x);
        let k = before.bin_of(100.0);
        let db_of = |y: &TimeSeries| 20.0 * (before.values[k].norm() / envelope_spectrum(y).values[k].norm()).log10();
        let masked = |f: f64, a: f64| {
            let mut keep = Coalition::full(256);
            keep.remove(p.cell_at(f, Some(a)));
            db_of(&dom.mask_and_invert(&rep, &keep, &p, &zero.entries[0]).unwrap())
        };

        // Subtracting P1 exactly bounds what any masking can achieve: the
        // shared 50 Hz component keeps a strong 100 Hz envelope harmonic.
        let scale = {
            let v = s.series.samples();
            let m = v.iter().sum::<f64>() / N as f64;
            (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / N as f64).sqrt()
        };
        let (amp, drawn) = s.components[1];
        let p1 = render_impulses(&drawn, spec.classes[1].components[1].damping, FS, N).unwrap();
        let without: Vec<f64> = x.samples().iter().zip(p1.samples()).map(|(v, r)| v - amp * r / scale).collect();
        let ceiling = db_of(&TimeSeries::new(without, FS).unwrap());
        assert!(ceiling < 10.0, "{ceiling}");

        let fault = masked(2500.0, 100.0);
        let control = masked(3500.0, 100.0);
        assert!(fault >= 1.5, "100 Hz envelope line attenuated by only {fault:.2} dB");
        assert!(control.abs() < 0.5, "{control}");
    }

    #[test]
    fn masking_more_cells_never_retains_more_cs_energy() {
        let x = noise(8);
        let dom = domain(DomainKind::CyclicSpectral);
        let p = dom.default_partition().unwrap();
        let rep = dom.forward(&x).unwrap();
        let zero = BackgroundSet::zero(&dom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut keep = Coalition::full(256);
        let energy = |k: &Coalition| -> f64 {
            let h = dom.hybrid(&rep, k, &p, &zero.entries[0]).unwrap();
            h.magnitudes().iter().map(|m| m * m).sum()
        };
        let mut prev = energy(&keep);
        for _ in 0..64 {
            let cell = rng.random_range(0..256);
            keep.remove(cell);
            let e = energy(&keep);
            assert!(e <= prev + 1e-9, "{e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let dom = domain(DomainKind::CyclicSpectral);
        let p = dom.default_partition().unwrap();
        let rep = dom.forward(&noise(1)).unwrap();
        let other = Domain::new(DomainKind::CyclicSpectral, N, FS, Some(WindowSpec::hann(128, 32).unwrap())).unwrap();
        let wrong = other.forward(&noise(2)).unwrap();
        assert!(matches!(dom.mask_and_invert(&rep, &Coalition::full(256), &p, &wrong), Err(Error::InvalidInput(_))));
        assert!(matches!(dom.mask_and_invert(&rep, &Coalition::full(10), &p, &rep), Err(Error::InvalidInput(_))));
        let time_rep = domain(DomainKind::Time).forward(&noise(1)).unwrap();
        assert!(matches!(dom.mask_and_invert(&time_rep, &Coalition::full(256), &p, &rep), Err(Error::InvalidInput(_))));
        assert!(dom.forward(&TimeSeries::zeros(1000, FS).unwrap()).is_err());
    }

    #[test]
    fn background_modes() {
        let pool: Vec<TimeSeries> = (0..10).map(noise).collect();
        let refs: Vec<&TimeSeries> = pool.iter().collect();
        let dom = domain(DomainKind::Time);
        let b = BackgroundSet::draw(&dom, &refs, 4, 1).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b, BackgroundSet::draw(&dom, &refs, 4, 1).unwrap());
        assert_eq!(BackgroundSet::draw(&dom, &refs, 50, 1).unwrap().len(), 10);
        let m = BackgroundSet::mean(&dom, &refs).unwrap();
        let DomainRepresentation::Time(mx) = &m.entries[0] else { panic!() };
        let expect: f64 = pool.iter().map(|p| p.samples()[3]).sum::<f64>() / 10.0;
        assert!((mx.samples()[3] - expect).abs() < 1e-12);
        let z = BackgroundSet::zero(&domain(DomainKind::CyclicSpectral)).unwrap();
        assert!(z.entries[0].magnitudes().iter().all(|&v| v == 0.0));
        assert!(BackgroundSet::draw(&dom, &refs, 0, 1).is_err());
    }
}
