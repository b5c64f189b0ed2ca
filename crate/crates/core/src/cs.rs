//! Cyclic-spectral transform for deterministic signals.
//!
//! Forward: take the STFT, square its modulus, and Fourier-transform every
//! frequency row along the frame axis. The STFT phase is kept alongside so the
//! transform can be inverted: inverse-DFT each row back to framewise power,
//! clamp negative power to zero, take the square root, reattach the phase and
//! run the inverse STFT.
//!
//! The cyclic axis is one-sided (`frames / 2 + 1` bins up to `fs / (2 hop)`),
//! the row DFT is unnormalized, and the inverse carries the `1 / frames`
//! factor, so the `α = 0` column is the sum of framewise power.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Error, Result};
use crate::grid::Grid;
use crate::signal::{StftGrid, StftPlan, TimeSeries, WindowKind, WindowSpec};

/// Cyclic-spectral representation plus the STFT phase needed to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct CsRepresentation {
    /// Spectral bins × cyclic bins.
    pub cs: Grid<Complex64>,
    /// Spectral bins × frames, values in (−π, π].
    pub phase: Grid<f64>,
    pub freq_axis_hz: Vec<f64>,
    pub cyclic_axis_hz: Vec<f64>,
    pub window: WindowSpec,
    pub source_length: usize,
    pub sample_rate_hz: f64,
}

impl CsRepresentation {
    pub fn bins(&self) -> usize {
        self.cs.rows()
    }

    pub fn cyclic_bins(&self) -> usize {
        self.cs.cols()
    }

    pub fn frames(&self) -> usize {
        self.phase.cols()
    }

    pub fn magnitude(&self) -> Grid<f64> {
        cs_magnitude(self)
    }
}

/// Phase in (−π, π]; zero-magnitude cells get 0.
pub fn angle(c: Complex64) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        return 0.0;
    }
    let a = c.im.atan2(c.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Planned forward/inverse transform for a fixed window and signal length.
#[derive(Clone)]
pub struct CsTransform {
    stft: StftPlan,
    source_length: usize,
    frames: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CsTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CsTransform")
            .field("window", self.stft.window())
            .field("source_length", &self.source_length)
            .finish()
    }
}

/// Outcome of an inversion, with the number of cells whose reconstructed
/// power was negative and got clamped.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub signal: TimeSeries,
    pub clamped_cells: usize,
}

impl CsTransform {
    pub fn new(window: WindowSpec, source_length: usize) -> Result<Self> {
        window.require_cola()?;
        if source_length < window.length() {
            return invalid(format!(
                "signal of {source_length} samples is shorter than the {}-sample window",
                window.length()
            ));
        }
        let frames = window.frame_count(source_length);
        let mut planner = FftPlanner::new();
        Ok(Self {
            stft: StftPlan::new(window),
            source_length,
            frames,
            row_fwd: planner.plan_fft_forward(frames),
            row_inv: planner.plan_fft_inverse(frames),
        })
    }

    pub fn window(&self) -> &WindowSpec {
        self.stft.window()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn cyclic_bins(&self) -> usize {
        self.frames / 2 + 1
    }

    pub fn stft_plan(&self) -> &StftPlan {
        &self.stft
    }

    pub fn forward(&self, x: &TimeSeries) -> Result<CsRepresentation> {
        if x.len() != self.source_length {
            return invalid(format!(
                "transform planned for {} samples, got {}",
                self.source_length,
                x.len()
            ));
        }
        let grid = self.stft.forward(x)?;
        Ok(self.from_stft(&grid))
    }

    /// Build the representation from an existing STFT grid.
    pub fn from_stft(&self, grid: &StftGrid) -> CsRepresentation {
        let bins = grid.bins();
        let frames = self.frames;
        let cyc = self.cyclic_bins();
        let mut cs = Grid::filled(bins, cyc, Complex64::new(0.0, 0.0));
        let phase = grid.values.map(|&c| angle(c));
        let mut buf = vec![Complex64::new(0.0, 0.0); frames];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.row_fwd.get_inplace_scratch_len()];
        for f in 0..bins {
            for (t, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(grid.values[(f, t)].norm_sqr(), 0.0);
            }
            self.row_fwd.process_with_scratch(&mut buf, &mut scratch);
            cs.row_mut(f).copy_from_slice(&buf[..cyc]);
            // exact: the DC term of a real sequence
            cs[(f, 0)].im = 0.0;
        }
        let fs = grid.sample_rate_hz;
        let hop = self.window().hop() as f64;
        CsRepresentation {
            cs,
            phase,
            freq_axis_hz: grid.freq_axis_hz.clone(),
            cyclic_axis_hz: (0..cyc).map(|a| a as f64 * fs / (hop * frames as f64)).collect(),
            window: *self.window(),
            source_length: self.source_length,
            sample_rate_hz: fs,
        }
    }

    /// Framewise power recovered from a (possibly edited) cs grid, clamped to
    /// be nonnegative. Returns the number of clamped cells.
    pub fn power_from_cs(&self, cs: &Grid<Complex64>) -> Result<(Grid<f64>, usize)> {
        let bins = self.window().bins();
        if cs.shape() != (bins, self.cyclic_bins()) {
            return invalid(format!(
                "cs grid shape {:?} does not match expected ({bins}, {})",
                cs.shape(),
                self.cyclic_bins()
            ));
        }
        let frames = self.frames;
        let cyc = self.cyclic_bins();
        let mut power = Grid::filled(bins, frames, 0.0);
        let mut clamped = 0;
        let mut buf = vec![Complex64::new(0.0, 0.0); frames];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.row_inv.get_inplace_scratch_len()];
        let scale = 1.0 / frames as f64;
        for f in 0..bins {
            let row = cs.row(f);
            buf[..cyc].copy_from_slice(row);
            for a in cyc..frames {
                buf[a] = buf[frames - a].conj();
            }
            self.row_inv.process_with_scratch(&mut buf, &mut scratch);
            for (t, c) in buf.iter().enumerate() {
                let p = c.re * scale;
                power[(f, t)] = if p < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    p
                };
            }
        }
        Ok((power, clamped))
    }

    /// Invert an arbitrary (cs, phase) pair.
    pub fn invert_parts(
        &self,
        cs: &Grid<Complex64>,
        phase: &Grid<f64>,
        sample_rate_hz: f64,
    ) -> Result<Reconstruction> {
        self.invert_with_phasors(cs, &phasors(phase), sample_rate_hz)
    }

    /// Like `invert_parts` with the phase given as unit phasors `e^{iθ}`,
    /// which callers inverting many grids under one phase can reuse.
    pub fn invert_with_phasors(
        &self,
        cs: &Grid<Complex64>,
        phasors: &Grid<Complex64>,
        sample_rate_hz: f64,
    ) -> Result<Reconstruction> {
        let bins = self.window().bins();
        if phasors.shape() != (bins, self.frames) {
            return invalid(format!(
                "phase grid shape {:?} does not match expected ({bins}, {})",
                phasors.shape(),
                self.frames
            ));
        }
        let (power, clamped_cells) = self.power_from_cs(cs)?;
        let values = Grid::from_vec(
            bins,
            self.frames,
            power
                .as_slice()
                .iter()
                .zip(phasors.as_slice())
                .map(|(p, u)| u * p.sqrt())
                .collect(),
        );
        let grid = StftGrid {
            values,
            freq_axis_hz: Vec::new(),
            frame_times_s: Vec::new(),
            window: *self.window(),
            source_length: self.source_length,
            sample_rate_hz,
        };
        Ok(Reconstruction {
            signal: self.stft.inverse(&grid)?,
            clamped_cells,
        })
    }

    pub fn inverse(&self, rep: &CsRepresentation) -> Result<Reconstruction> {
        self.check_rep(rep)?;
        self.invert_parts(&rep.cs, &rep.phase, rep.sample_rate_hz)
    }

    fn check_rep(&self, rep: &CsRepresentation) -> Result<()> {
        if rep.window != *self.window() || rep.source_length != self.source_length {
            return invalid("representation does not match the planned window and length");
        }
        Ok(())
    }
}

/// Unit phasors `e^{iθ}` of a phase grid.
pub fn phasors(phase: &Grid<f64>) -> Grid<Complex64> {
    phase.map(|th| Complex64::new(th.cos(), th.sin()))
}

pub fn cs_forward(x: &TimeSeries, w: &WindowSpec) -> Result<CsRepresentation> {
    CsTransform::new(*w, x.len())?.forward(x)
}

pub fn cs_inverse(rep: &CsRepresentation, w: &WindowSpec) -> Result<TimeSeries> {
    if rep.window != *w {
        return invalid("representation was produced with a different window");
    }
    let plan = CsTransform::new(*w, rep.source_length)?;
    if rep.cs.shape() != (w.bins(), plan.cyclic_bins()) || rep.phase.shape() != (w.bins(), plan.frames()) {
        return invalid("cs/phase grid shapes are inconsistent with the window");
    }
    Ok(plan.inverse(rep)?.signal)
}

pub fn cs_magnitude(rep: &CsRepresentation) -> Grid<f64> {
    rep.cs.map(|c| c.norm())
}

/// Magnitude grid as CSV: header row holds cyclic frequencies, first column
/// spectral frequencies.
pub fn write_magnitude_csv<W: Write>(rep: &CsRepresentation, mut out: W) -> Result<()> {
    let mag = cs_magnitude(rep);
    write!(out, "freq_hz")?;
    for a in &rep.cyclic_axis_hz {
        write!(out, ",{a:.17e}")?;
    }
    writeln!(out)?;
    for (f, freq) in rep.freq_axis_hz.iter().enumerate() {
        write!(out, "{freq:.17e}")?;
        for v in mag.row(f) {
            write!(out, ",{v:.17e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

const CS_MAGIC: &[u8; 8] = b"CSSHAPCS";
const CS_VERSION: u32 = 1;

/// Binary container: magic, version, bins, cyclic bins, frames, source length,
/// sample rate (f64), window kind/length/hop, then f32 interleaved re/im of the
/// cs grid and f32 phase, all little-endian.
pub fn write_binary<W: Write>(rep: &CsRepresentation, mut out: W) -> Result<()> {
    out.write_all(CS_MAGIC)?;
    for v in [
        CS_VERSION,
        rep.bins() as u32,
        rep.cyclic_bins() as u32,
        rep.frames() as u32,
        rep.source_length as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&rep.sample_rate_hz.to_le_bytes())?;
    let kind = match rep.window.kind() {
        WindowKind::Hann => 0u32,
        WindowKind::Rectangular => 1u32,
    };
    for v in [kind, rep.window.length() as u32, rep.window.hop() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for c in rep.cs.as_slice() {
        out.write_all(&(c.re as f32).to_le_bytes())?;
        out.write_all(&(c.im as f32).to_le_bytes())?;
    }
    for p in rep.phase.as_slice() {
        out.write_all(&(*p as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<CsRepresentation> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CS_MAGIC {
        return Err(Error::Format("not a cyclic-spectral container".into()));
    }
    let mut u32s = [0u32; 5];
    for v in u32s.iter_mut() {
        *v = read_u32(&mut input)?;
    }
    let [version, bins, cyc, frames, source_length] = u32s.map(|v| v as usize);
    if version != CS_VERSION as usize {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let fs = f64::from_le_bytes(b8);
    let kind = match read_u32(&mut input)? {
        0 => WindowKind::Hann,
        1 => WindowKind::Rectangular,
        k => return Err(Error::Format(format!("unknown window kind {k}"))),
    };
    let length = read_u32(&mut input)? as usize;
    let hop = read_u32(&mut input)? as usize;
    let window = WindowSpec::new(kind, length, hop).map_err(|e| Error::Format(e.to_string()))?;
    if bins != window.bins() || frames != window.frame_count(source_length) || cyc != frames / 2 + 1 {
        return Err(Error::Format("header dimensions are inconsistent".into()));
    }
    let mut cs = Vec::with_capacity(bins * cyc);
    for _ in 0..bins * cyc {
        let re = read_f32(&mut input)? as f64;
        let im = read_f32(&mut input)? as f64;
        cs.push(Complex64::new(re, im));
    }
    let mut phase = Vec::with_capacity(bins * frames);
    for _ in 0..bins * frames {
        phase.push(read_f32(&mut input)? as f64);
    }
    Ok(CsRepresentation {
        cs: Grid::from_vec(bins, cyc, cs),
        phase: Grid::from_vec(bins, frames, phase),
        freq_axis_hz: (0..bins).map(|k| k as f64 * fs / length as f64).collect(),
        cyclic_axis_hz: (0..cyc).map(|a| a as f64 * fs / (hop * frames) as f64).collect(),
        window,
        source_length,
        sample_rate_hz: fs,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{relative_l2, spectrum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FS: f64 = 10_000.0;

    fn sine(f: f64, amp: f64, n: usize) -> TimeSeries {
        TimeSeries::new(
            (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / FS + 1.1).sin()).collect(),
            FS,
        )
        .unwrap()
    }

    fn noise(n: usize, seed: u64) -> TimeSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSeries::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), FS).unwrap()
    }

    fn energy_fraction_near(rep: &CsRepresentation, f_bin: usize, f_halfwidth: usize, a_max: usize) -> f64 {
        let mag = cs_magnitude(rep);
        let total: f64 = mag.as_slice().iter().map(|v| v * v).sum();
        let mut near = 0.0;
        for f in f_bin.saturating_sub(f_halfwidth)..=(f_bin + f_halfwidth).min(rep.bins() - 1) {
            for a in 0..=a_max {
                near += mag[(f, a)] * mag[(f, a)];
            }
        }
        near / total
    }

    #[test]
    fn angle_range() {
        assert_eq!(angle(Complex64::new(0.0, 0.0)), 0.0);
        assert_eq!(angle(Complex64::new(-1.0, -0.0)), PI);
        assert_eq!(angle(Complex64::new(-1.0, 0.0)), PI);
        assert!((angle(Complex64::new(0.0, -1.0)) + PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn sine_concentrates_at_zero_cyclic_frequency() {
        let w = WindowSpec::hann(80, 20).unwrap();
        let rep = cs_forward(&sine(1000.0, 1.0, 2000), &w).unwrap();
        let k = (1000.0 / (FS / 80.0)) as usize;
        assert!(energy_fraction_near(&rep, k, 1, 0) > 0.99);
        assert_eq!(rep.cyclic_axis_hz.len(), rep.frames() / 2 + 1);
        assert!((rep.cyclic_axis_hz.last().unwrap() - FS / 40.0).abs() < 1e-9);
    }

    #[test]
    fn zero_column_is_real_and_matches_frame_power_sum() {
        let w = WindowSpec::hann(128, 32).unwrap();
        let x = noise(2000, 5);
        let rep = cs_forward(&x, &w).unwrap();
        let grid = crate::signal::stft(&x, &w).unwrap();
        for f in 0..rep.bins() {
            assert_eq!(rep.cs[(f, 0)].im, 0.0);
            // Welch-style accumulation of framewise periodograms
            let welch: f64 = (0..grid.frames()).map(|t| grid.values[(f, t)].norm_sqr()).sum();
            assert!((rep.cs[(f, 0)].re - welch).abs() <= 1e-9 * welch.max(1.0));
        }
    }

    #[test]
    fn zero_signal() {
        let w = WindowSpec::hann(64, 16).unwrap();
        let rep = cs_forward(&TimeSeries::zeros(256, FS).unwrap(), &w).unwrap();
        assert!(rep.cs.as_slice().iter().all(|c| c.norm() == 0.0));
        assert!(rep.phase.as_slice().iter().all(|&p| p == 0.0));
        let back = cs_inverse(&rep, &w).unwrap();
        assert!(back.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_cs_with_any_phase_inverts_to_zero() {
        let w = WindowSpec::hann(64, 16).unwrap();
        let mut rep = cs_forward(&noise(512, 2), &w).unwrap();
        for c in rep.cs.as_mut_slice() {
            *c = Complex64::new(0.0, 0.0);
        }
        let back = cs_inverse(&rep, &w).unwrap();
        assert!(back.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_is_exact_without_clamping() {
        for (len, hop) in [(80, 20), (128, 32), (256, 64)] {
            let w = WindowSpec::hann(len, hop).unwrap();
            let x = noise(2000, len as u64);
            let plan = CsTransform::new(w, x.len()).unwrap();
            let rep = plan.forward(&x).unwrap();
            let rec = plan.inverse(&rep).unwrap();
            assert_eq!(rec.clamped_cells, 0);
            assert!(relative_l2(rec.signal.samples(), x.samples()) < 1e-6);
        }
    }

    #[test]
    fn masking_the_carrier_attenuates_it() {
        let w = WindowSpec::hann(80, 20).unwrap();
        let x = sine(1000.0, 1.0, 2000);
        let mut rep = cs_forward(&x, &w).unwrap();
        let k = 8; // 1000 Hz at 125 Hz bins
        for f in k - 2..=k + 2 {
            for a in 0..3 {
                rep.cs[(f, a)] = Complex64::new(0.0, 0.0);
            }
        }
        let y = cs_inverse(&rep, &w).unwrap();
        let before = spectrum(&x);
        let after = spectrum(&y);
        let bin = before.bin_of(1000.0);
        let db = 20.0 * (before.values[bin].norm() / after.values[bin].norm()).log10();
        assert!(db >= 20.0, "attenuation {db} dB");
    }

    #[test]
    fn magnitude_matches_elementwise_modulus() {
        let w = WindowSpec::hann(64, 16).unwrap();
        let rep = cs_forward(&noise(400, 3), &w).unwrap();
        let mag = cs_magnitude(&rep);
        for f in 0..rep.bins() {
            for a in 0..rep.cyclic_bins() {
                let c = rep.cs[(f, a)];
                let oracle = (c.re * c.re + c.im * c.im).sqrt();
                assert!((mag[(f, a)] - oracle).abs() <= 1e-14 * oracle.max(1.0));
            }
            // the α = 0 column is real and nonnegative
            assert_eq!(mag[(f, 0)], rep.cs[(f, 0)].re);
        }
    }

    #[test]
    fn inverse_rejects_mismatched_shapes() {
        let w = WindowSpec::hann(64, 16).unwrap();
        let mut rep = cs_forward(&noise(400, 3), &w).unwrap();
        rep.phase = Grid::filled(3, 3, 0.0);
        assert!(matches!(cs_inverse(&rep, &w), Err(Error::InvalidInput(_))));
        let other = WindowSpec::hann(128, 32).unwrap();
        let rep = cs_forward(&noise(400, 3), &w).unwrap();
        assert!(cs_inverse(&rep, &other).is_err());
    }

    #[test]
    fn binary_container_round_trip() {
        let w = WindowSpec::hann(64, 16).unwrap();
        let rep = cs_forward(&noise(300, 3), &w).unwrap();
        let mut buf = Vec::new();
        write_binary(&rep, &mut buf).unwrap();
        let header = 8 + 5 * 4 + 8 + 3 * 4;
        assert_eq!(buf.len(), header + rep.bins() * rep.cyclic_bins() * 8 + rep.bins() * rep.frames() * 4);
        let back = read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.cs.shape(), rep.cs.shape());
        assert_eq!(back.freq_axis_hz, rep.freq_axis_hz);
        for (a, b) in back.cs.as_slice().iter().zip(rep.cs.as_slice()) {
            assert!((a - b).norm() <= 1e-6 * b.norm().max(1.0));
        }
        buf[0] = b'X';
        assert!(matches!(read_binary(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn magnitude_csv_shape() {
        let w = WindowSpec::hann(64, 16).unwrap();
        let rep = cs_forward(&noise(300, 3), &w).unwrap();
        let mut buf = Vec::new();
        write_magnitude_csv(&rep, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), rep.bins() + 1);
        assert_eq!(lines[0].split(',').count(), rep.cyclic_bins() + 1);
        let v: f64 = lines[3].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(v, cs_magnitude(&rep)[(2, 1)]);
    }
}
