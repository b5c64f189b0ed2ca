//! Browser demo: synthesize a benchmark signal, look at its cyclic-spectral
//! magnitude, and mask cells of the 16×16 partition to hear (well, see) what
//! each one carries.

use csshap::coalition::Coalition;
use csshap::domains::{CoalitionPartition, Domain, DomainKind, DomainRepresentation, Prepared};
use csshap::signal::{envelope_spectrum, normalize_meanstd};
use csshap::sim::{sample_rng, synthesize_sample, DatasetSpec};
use csshap::{TimeSeries, WindowSpec};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    spec: DatasetSpec,
    domain: Domain,
    partition: CoalitionPartition,
    zero: DomainRepresentation,
    sample: TimeSeries,
    prepared: Prepared,
    keep: Coalition,
}

#[wasm_bindgen]
impl Demo {
    /// The three-class benchmark at 10 kHz, 2000 samples, Hann 80/20.
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        let spec = DatasetSpec::simulation(1, 0);
        let domain = Domain::new(DomainKind::CyclicSpectral, spec.sample_length, spec.sample_rate_hz, Some(WindowSpec::default()))
            .map_err(js_err)?;
        let partition = domain.default_partition().map_err(js_err)?;
        let silent = TimeSeries::zeros(spec.sample_length, spec.sample_rate_hz).map_err(js_err)?;
        let zero = domain.forward(&silent).map_err(js_err)?;
        let prepared = domain.prepare(zero.clone()).map_err(js_err)?;
        let keep = Coalition::full(partition.cell_count());
        Ok(Demo {
            spec,
            domain,
            partition,
            zero,
            sample: silent,
            prepared,
            keep,
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.spec.class_names()
    }

    /// Draw one normalized sample of `class` and make it current. All cells
    /// start kept.
    pub fn simulate(&mut self, class: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        let cls = self.spec.classes.get(class).ok_or_else(|| JsError::new("no such class"))?;
        let mut rng = sample_rng(seed, class);
        let syn = synthesize_sample(cls, self.spec.sample_rate_hz, self.spec.sample_length, false, &mut rng).map_err(js_err)?;
        self.sample = normalize_meanstd(&syn.series).map_err(js_err)?;
        let rep = self.domain.forward(&self.sample).map_err(js_err)?;
        self.prepared = self.domain.prepare(rep).map_err(js_err)?;
        self.keep = Coalition::full(self.partition.cell_count());
        Ok(self.sample.samples().to_vec())
    }

    /// |CS| of the current sample, row-major (spectral bin × cyclic bin).
    pub fn cs_magnitude(&self) -> Vec<f64> {
        self.prepared.representation().magnitudes()
    }

    pub fn spectral_bins(&self) -> usize {
        self.partition.coord_shape().0
    }

    pub fn cyclic_bins(&self) -> usize {
        self.partition.coord_shape().1
    }

    pub fn max_frequency_hz(&self) -> f64 {
        self.partition.rows.range().1
    }

    pub fn max_cyclic_hz(&self) -> f64 {
        self.partition.cols.as_ref().map_or(0.0, |a| a.range().1)
    }

    /// Cell edges as coordinate indices, rows then columns.
    pub fn row_edges(&self) -> Vec<usize> {
        self.partition.rows.edges.clone()
    }

    pub fn col_edges(&self) -> Vec<usize> {
        self.partition.cols.as_ref().map_or_else(Vec::new, |a| a.edges.clone())
    }

    /// Partition cell under a spectral/cyclic coordinate pair.
    pub fn cell_at(&self, frequency_hz: f64, cyclic_hz: f64) -> usize {
        self.partition.cell_at(frequency_hz, Some(cyclic_hz))
    }

    /// Flip a cell between kept and masked; returns whether it is now kept.
    pub fn toggle_cell(&mut self, cell: usize) -> bool {
        if cell >= self.partition.cell_count() {
            return false;
        }
        if self.keep.contains(cell) {
            self.keep.remove(cell);
            false
        } else {
            self.keep.insert(cell);
            true
        }
    }

    pub fn masked_cells(&self) -> Vec<usize> {
        (0..self.partition.cell_count()).filter(|&c| !self.keep.contains(c)).collect()
    }

    /// Zero the masked cells and invert to a time signal.
    pub fn reconstruct(&self) -> Result<Vec<f64>, JsError> {
        let y = self
            .domain
            .mask_and_invert_prepared(&self.prepared, &self.keep, &self.partition, &self.zero)
            .map_err(js_err)?;
        Ok(y.into_samples())
    }

    /// Envelope-spectrum magnitude of `x`, one-sided, bin spacing fs/len.
    pub fn envelope_spectrum(&self, x: Vec<f64>) -> Result<Vec<f64>, JsError> {
        let ts = TimeSeries::new(x, self.spec.sample_rate_hz).map_err(js_err)?;
        Ok(envelope_spectrum(&ts).magnitudes())
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.spec.sample_rate_hz
    }
}
