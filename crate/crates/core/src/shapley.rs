//! Shapley values: exact enumeration for small games, permutation sampling
//! for large ones, and the masking game that ties a classifier to a domain.

use std::collections::HashMap;
use std::io::Write;
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coalition::Coalition;
use crate::domains::{BackgroundMode, BackgroundSet, CoalitionPartition, Domain, DomainKind, DomainRepresentation, PartitionShape, Prepared};
use crate::error::{invalid, Error, Result};
use crate::grid::Grid;
use crate::model::Classifier;
use crate::signal::{TimeSeries, WindowSpec};

/// Largest game solved by full enumeration.
pub const EXACT_MAX_PLAYERS: usize = 20;

/// A cooperative game with vector-valued payoffs.
///
/// A game may be the average of several variants (for example one per
/// background draw); `value` of a coalition is the mean over variants.
/// Samplers may evaluate one variant per permutation instead.
pub trait Game: Sync {
    fn player_count(&self) -> usize;

    fn output_count(&self) -> usize {
        1
    }

    fn variant_count(&self) -> usize {
        1
    }

    /// Payoffs of `(coalition, variant)` pairs, in order.
    fn evaluate(&self, batch: &[(&Coalition, usize)]) -> Result<Vec<Vec<f64>>>;
}

/// Scalar game backed by a closure over the coalition.
pub struct FnGame<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&Coalition) -> f64 + Sync> FnGame<F> {
    pub fn new(player_count: usize, f: F) -> Self {
        Self { n: player_count, f }
    }
}

impl<F: Fn(&Coalition) -> f64 + Sync> Game for FnGame<F> {
    fn player_count(&self) -> usize {
        self.n
    }

    fn evaluate(&self, batch: &[(&Coalition, usize)]) -> Result<Vec<Vec<f64>>> {
        Ok(batch.iter().map(|(s, _)| vec![(self.f)(s)]).collect())
    }
}

/// One output of a vector-valued game.
pub struct OutputGame<'a, G: ?Sized> {
    inner: &'a G,
    output: usize,
}

impl<'a, G: Game + ?Sized> OutputGame<'a, G> {
    pub fn new(inner: &'a G, output: usize) -> Result<Self> {
        if output >= inner.output_count() {
            return invalid(format!("output {output} out of range for a game with {} outputs", inner.output_count()));
        }
        Ok(Self { inner, output })
    }
}

impl<G: Game + ?Sized> Game for OutputGame<'_, G> {
    fn player_count(&self) -> usize {
        self.inner.player_count()
    }

    fn variant_count(&self) -> usize {
        self.inner.variant_count()
    }

    fn evaluate(&self, batch: &[(&Coalition, usize)]) -> Result<Vec<Vec<f64>>> {
        Ok(self.inner.evaluate(batch)?.into_iter().map(|v| vec![v[self.output]]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapleyResult {
    pub estimator: Estimator,
    /// `values[k][i]`: output `k`, player `i`.
    pub values: Vec<Vec<f64>>,
    pub stderr: Option<Vec<Vec<f64>>>,
    /// `v(U) - v(∅)` per output, averaged over variants.
    pub total: Vec<f64>,
    /// Standard error of the sampled per-permutation totals.
    pub total_stderr: Option<Vec<f64>>,
    pub num_evaluations: usize,
    pub num_permutations: usize,
    pub seed: Option<u64>,
}

impl ShapleyResult {
    /// Values of a scalar game.
    pub fn scalar(&self) -> &[f64] {
        &self.values[0]
    }

    pub fn efficiency_residual(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.total)
            .map(|(v, t)| v.iter().sum::<f64>() - t)
            .collect()
    }
}

fn shapley_weights(n: usize) -> Vec<f64> {
    // s!(n-s-1)!/n! = 1 / (n * C(n-1, s))
    let mut w = Vec::with_capacity(n);
    let mut binom = 1.0f64;
    for s in 0..n {
        w.push(1.0 / (n as f64 * binom));
        binom = binom * (n - 1 - s) as f64 / (s + 1) as f64;
    }
    w
}

/// Exact values by enumerating all `2^n` coalitions.
pub fn exact_shapley<G: Game + ?Sized>(game: &G) -> Result<ShapleyResult> {
    let n = game.player_count();
    if n == 0 {
        return invalid("a game needs at least one player");
    }
    if n > EXACT_MAX_PLAYERS {
        return Err(Error::Capacity(format!(
            "exact enumeration handles at most {EXACT_MAX_PLAYERS} players, got {n}; use sampled_shapley"
        )));
    }
    let outputs = game.output_count();
    let variants = game.variant_count().max(1);
    let subsets = 1usize << n;
    // v[mask * outputs + k]
    let mut v = vec![0.0; subsets * outputs];
    const CHUNK: usize = 1024;
    let mut mask = 0usize;
    while mask < subsets {
        let end = (mask + CHUNK).min(subsets);
        let coalitions: Vec<Coalition> = (mask..end).map(|m| Coalition::from_mask(n, m as u64)).collect();
        let batch: Vec<(&Coalition, usize)> = coalitions.iter().flat_map(|c| (0..variants).map(move |b| (c, b))).collect();
        let out = game.evaluate(&batch)?;
        check_outputs(&out, batch.len(), outputs)?;
        for (j, chunk) in out.chunks(variants).enumerate() {
            let dst = &mut v[(mask + j) * outputs..(mask + j + 1) * outputs];
            for row in chunk {
                for (d, x) in dst.iter_mut().zip(row) {
                    *d += x;
                }
            }
            dst.iter_mut().for_each(|d| *d /= variants as f64);
        }
        mask = end;
    }
    let w = shapley_weights(n);
    let mut values = vec![vec![0.0; n]; outputs];
    for s in 0..subsets {
        let size = s.count_ones() as usize;
        if size == n {
            continue;
        }
        for i in (0..n).filter(|i| s & (1 << i) == 0) {
            let with = s | (1 << i);
            for (k, row) in values.iter_mut().enumerate() {
                row[i] += w[size] * (v[with * outputs + k] - v[s * outputs + k]);
            }
        }
    }
    let full = subsets - 1;
    Ok(ShapleyResult {
        estimator: Estimator::Exact,
        values,
        stderr: None,
        total: (0..outputs).map(|k| v[full * outputs + k] - v[k]).collect(),
        total_stderr: None,
        num_evaluations: subsets * variants,
        num_permutations: 0,
        seed: None,
    })
}

fn check_outputs(out: &[Vec<f64>], expected_rows: usize, outputs: usize) -> Result<()> {
    if out.len() != expected_rows || out.iter().any(|r| r.len() != outputs) {
        return invalid("game returned a payoff batch of the wrong shape");
    }
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("game returned a non-finite payoff");
    }
    Ok(())
}

/// Options for permutation sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingOptions {
    pub num_permutations: usize,
    pub seed: u64,
    /// Maximum number of cached coalition payoffs; 0 disables the cache.
    pub cache_capacity: usize,
}

impl SamplingOptions {
    pub fn new(num_permutations: usize, seed: u64) -> Self {
        Self {
            num_permutations,
            seed,
            cache_capacity: 1 << 16,
        }
    }
}

/// Payoff cache keyed by coalition and variant.
struct Cache {
    map: Mutex<HashMap<(Coalition, usize), Vec<f64>>>,
    capacity: usize,
}

impl Cache {
    fn get(&self, key: &(Coalition, usize)) -> Option<Vec<f64>> {
        if self.capacity == 0 {
            return None;
        }
        self.map.lock().unwrap().get(key).cloned()
    }

    fn put(&self, key: (Coalition, usize), value: Vec<f64>) {
        if self.capacity == 0 {
            return;
        }
        let mut m = self.map.lock().unwrap();
        if m.len() < self.capacity {
            m.insert(key, value);
        }
    }
}

/// Monte Carlo estimate from `num_permutations` random player orderings.
///
/// Permutation `p` is drawn from its own seeded stream and paired with one
/// game variant; variants are assigned in balanced rounds, shuffled. Values
/// are means of marginal contributions, stderr their standard error.
pub fn sampled_shapley<G: Game + ?Sized>(game: &G, num_permutations: usize, seed: u64) -> Result<ShapleyResult> {
    sampled_shapley_with(game, SamplingOptions::new(num_permutations, seed))
}

pub fn sampled_shapley_with<G: Game + ?Sized>(game: &G, opts: SamplingOptions) -> Result<ShapleyResult> {
    let n = game.player_count();
    let p_count = opts.num_permutations;
    if n == 0 {
        return invalid("a game needs at least one player");
    }
    if p_count < 2 {
        return Err(Error::Config(format!("need at least 2 permutations, got {p_count}")));
    }
    let outputs = game.output_count();
    let variants = game.variant_count().max(1);
    let assignment = variant_schedule(variants, p_count, opts.seed);
    let cache = Cache {
        map: Mutex::new(HashMap::new()),
        capacity: opts.cache_capacity,
    };
    let mut evaluations = 0usize;

    // per-output, per-player running sums of marginals and their squares
    let mut sum = vec![vec![0.0; n]; outputs];
    let mut sq = vec![vec![0.0; n]; outputs];
    let mut tot_sum = vec![0.0; outputs];
    let mut tot_sq = vec![0.0; outputs];

    if n == 1 {
        // one ordering only: the value is exact
        let (e, f) = (Coalition::empty(1), Coalition::full(1));
        let batch: Vec<(&Coalition, usize)> = (0..variants).flat_map(|b| [(&e, b), (&f, b)]).collect();
        let out = game.evaluate(&batch)?;
        check_outputs(&out, batch.len(), outputs)?;
        let total: Vec<f64> = (0..outputs)
            .map(|k| out.chunks(2).map(|c| c[1][k] - c[0][k]).sum::<f64>() / variants as f64)
            .collect();
        return Ok(ShapleyResult {
            estimator: Estimator::Sampled,
            values: total.iter().map(|t| vec![*t]).collect(),
            stderr: Some(vec![vec![0.0]; outputs]),
            total_stderr: Some(vec![0.0; outputs]),
            total,
            num_evaluations: batch.len(),
            num_permutations: p_count,
            seed: Some(opts.seed),
        });
    }

    for (p, &variant) in assignment.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(p as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut chain = Vec::with_capacity(n + 1);
        let mut s = Coalition::empty(n);
        chain.push(s.clone());
        for &i in &order {
            s.insert(i);
            chain.push(s.clone());
        }
        let mut payoffs: Vec<Option<Vec<f64>>> = chain.iter().map(|c| cache.get(&(c.clone(), variant))).collect();
        let missing: Vec<usize> = (0..chain.len()).filter(|&j| payoffs[j].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<(&Coalition, usize)> = missing.iter().map(|&j| (&chain[j], variant)).collect();
            let out = game.evaluate(&batch)?;
            check_outputs(&out, batch.len(), outputs)?;
            evaluations += batch.len();
            for (&j, v) in missing.iter().zip(out) {
                cache.put((chain[j].clone(), variant), v.clone());
                payoffs[j] = Some(v);
            }
        }
        let payoffs: Vec<Vec<f64>> = payoffs.into_iter().map(Option::unwrap).collect();
        for k in 0..outputs {
            for (j, &i) in order.iter().enumerate() {
                let m = payoffs[j + 1][k] - payoffs[j][k];
                sum[k][i] += m;
                sq[k][i] += m * m;
            }
            let t = payoffs[n][k] - payoffs[0][k];
            tot_sum[k] += t;
            tot_sq[k] += t * t;
        }
    }

    let pf = p_count as f64;
    let se = |s: f64, q: f64| {
        let mean = s / pf;
        let var = ((q - pf * mean * mean) / (pf - 1.0)).max(0.0);
        (var / pf).sqrt()
    };
    let values: Vec<Vec<f64>> = sum.iter().map(|row| row.iter().map(|s| s / pf).collect()).collect();
    let stderr: Vec<Vec<f64>> = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| s.iter().zip(q).map(|(a, b)| se(*a, *b)).collect())
        .collect();

    // v(U) - v(∅) averaged over every variant, not just the sampled ones
    let (e, f) = (Coalition::empty(n), Coalition::full(n));
    let mut total = vec![0.0; outputs];
    for b in 0..variants {
        for (c, sign) in [(&f, 1.0), (&e, -1.0)] {
            let v = match cache.get(&(c.clone(), b)) {
                Some(v) => v,
                None => {
                    evaluations += 1;
                    let out = game.evaluate(&[(c, b)])?;
                    check_outputs(&out, 1, outputs)?;
                    out.into_iter().next().unwrap()
                }
            };
            for k in 0..outputs {
                total[k] += sign * v[k] / variants as f64;
            }
        }
    }

    Ok(ShapleyResult {
        estimator: Estimator::Sampled,
        values,
        stderr: Some(stderr),
        total,
        total_stderr: Some(tot_sum.iter().zip(&tot_sq).map(|(s, q)| se(*s, *q)).collect()),
        num_evaluations: evaluations,
        num_permutations: p_count,
        seed: Some(opts.seed),
    })
}

/// Variant for each permutation: `0..variants` repeated in rounds, each
/// round shuffled, so counts differ by at most one.
fn variant_schedule(variants: usize, permutations: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(permutations + variants);
    while out.len() < permutations {
        let mut round: Vec<usize> = (0..variants).collect();
        round.shuffle(&mut rng);
        out.extend(round);
    }
    out.truncate(permutations);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Softmax class probability.
    #[default]
    Probability,
    /// Centred logit `ln p_k - mean_j ln p_j`, equal to the network's logit
    /// up to a per-input constant shared by all classes.
    Logit,
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "probability" => Ok(Target::Probability),
            "logit" => Ok(Target::Logit),
            _ => Err(Error::Config(format!("unknown attribution target {s:?}"))),
        }
    }
}

fn apply_target(target: Target, p: Vec<f64>) -> Vec<f64> {
    match target {
        Target::Probability => p,
        Target::Logit => {
            let logs: Vec<f64> = p.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
            let mean = logs.iter().sum::<f64>() / logs.len() as f64;
            logs.iter().map(|l| l - mean).collect()
        }
    }
}

/// How background draws enter the value function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundPairing {
    /// One background per sampled permutation (each draw is a game variant).
    #[default]
    Paired,
    /// Every coalition is evaluated against all backgrounds in one batch.
    Full,
}

/// `v_b(S) = f(M(mask_and_invert(x, S, b))) - base_rate`, with `base_rate`
/// the mean of `f(M(mask_and_invert(x, ∅, b)))` over backgrounds, so that
/// `v(∅) = 0`.
pub struct MaskingGame<'a, M: Classifier + ?Sized> {
    model: &'a M,
    domain: &'a Domain,
    partition: &'a CoalitionPartition,
    prepared: Prepared,
    background: &'a BackgroundSet,
    target: Target,
    pairing: BackgroundPairing,
    base_rate: Vec<f64>,
}

impl<'a, M: Classifier + ?Sized> MaskingGame<'a, M> {
    pub fn new(
        model: &'a M,
        x: &TimeSeries,
        domain: &'a Domain,
        partition: &'a CoalitionPartition,
        background: &'a BackgroundSet,
        target: Target,
        pairing: BackgroundPairing,
    ) -> Result<Self> {
        if partition.domain != domain.kind() {
            return invalid(format!("partition is for the {} domain, not {}", partition.domain, domain.kind()));
        }
        if model.input_length() != x.len() {
            return invalid(format!("model expects {} samples, got {}", model.input_length(), x.len()));
        }
        if background.is_empty() {
            return invalid("background set is empty");
        }
        let prepared = domain.prepare(domain.forward(x)?)?;
        let mut game = Self {
            model,
            domain,
            partition,
            prepared,
            background,
            target,
            pairing,
            base_rate: vec![0.0; model.class_count()],
        };
        let empty = Coalition::empty(partition.cell_count());
        let b = background.len();
        let outs = game.raw(&(0..b).map(|i| (&empty, i)).collect::<Vec<_>>())?;
        game.base_rate = mean_rows(&outs);
        Ok(game)
    }

    pub fn base_rate(&self) -> &[f64] {
        &self.base_rate
    }

    pub fn representation(&self) -> &DomainRepresentation {
        self.prepared.representation()
    }

    /// Target outputs for `(coalition, background index)` pairs.
    fn raw(&self, batch: &[(&Coalition, usize)]) -> Result<Vec<Vec<f64>>> {
        let signal = |&(s, b): &(&Coalition, usize)| -> Result<Vec<f64>> {
            let y = self
                .domain
                .mask_and_invert_prepared(&self.prepared, s, self.partition, &self.background.entries[b])?;
            Ok(y.samples().to_vec())
        };
        #[cfg(feature = "parallel")]
        let signals: Result<Vec<Vec<f64>>> = {
            use rayon::prelude::*;
            batch.par_iter().map(signal).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let signals: Result<Vec<Vec<f64>>> = batch.iter().map(signal).collect();
        let probs = predict_parallel(self.model, &signals?);
        Ok(probs.into_iter().map(|p| apply_target(self.target, p)).collect())
    }
}

fn predict_parallel<M: Classifier + ?Sized>(model: &M, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        xs.par_iter().map(|x| model.predict(x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        model.predict_batch(xs)
    }
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

impl<M: Classifier + ?Sized> Game for MaskingGame<'_, M> {
    fn player_count(&self) -> usize {
        self.partition.cell_count()
    }

    fn output_count(&self) -> usize {
        self.model.class_count()
    }

    fn variant_count(&self) -> usize {
        match self.pairing {
            BackgroundPairing::Paired => self.background.len(),
            BackgroundPairing::Full => 1,
        }
    }

    fn evaluate(&self, batch: &[(&Coalition, usize)]) -> Result<Vec<Vec<f64>>> {
        let rows = match self.pairing {
            BackgroundPairing::Paired => self.raw(batch)?,
            BackgroundPairing::Full => {
                let b = self.background.len();
                let expanded: Vec<(&Coalition, usize)> = batch.iter().flat_map(|(s, _)| (0..b).map(move |i| (*s, i))).collect();
                self.raw(&expanded)?.chunks(b).map(mean_rows).collect()
            }
        };
        Ok(rows
            .into_iter()
            .map(|r| r.iter().zip(&self.base_rate).map(|(v, b)| v - b).collect())
            .collect())
    }
}

/// Scalar masking game for one class.
pub fn build_masking_game<'a, M: Classifier + ?Sized>(
    game: &'a MaskingGame<'a, M>,
    class_index: usize,
) -> Result<OutputGame<'a, MaskingGame<'a, M>>> {
    OutputGame::new(game, class_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    /// Exact when enumeration is no more expensive than sampling.
    #[default]
    Auto,
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// Cells per axis; `None` uses the domain default.
    pub partition: Option<PartitionShape>,
    pub background_mode: BackgroundMode,
    pub background_size: usize,
    pub pairing: BackgroundPairing,
    pub permutations: usize,
    pub estimator: EstimatorChoice,
    pub target: Target,
    pub seed: u64,
    pub cache_capacity: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            partition: None,
            background_mode: BackgroundMode::Draw,
            background_size: 32,
            pairing: BackgroundPairing::Paired,
            permutations: 200,
            estimator: EstimatorChoice::Auto,
            target: Target::Probability,
            seed: 0,
            cache_capacity: 1 << 16,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.permutations < 2 {
            return Err(Error::Config("permutations must be at least 2".into()));
        }
        if self.background_size == 0 {
            return Err(Error::Config("background_size must be at least 1".into()));
        }
        if let Some(p) = self.partition {
            if p.rows == 0 || p.cols == 0 {
                return Err(Error::Config("partition cells must be positive".into()));
            }
        }
        Ok(())
    }

    fn use_exact(&self, d: usize) -> bool {
        match self.estimator {
            EstimatorChoice::Exact => true,
            EstimatorChoice::Sampled => false,
            EstimatorChoice::Auto => d <= EXACT_MAX_PLAYERS && (1usize << d) <= self.permutations * (d + 1),
        }
    }
}

/// Per-class attribution over one domain's partition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionMap {
    pub domain: DomainKind,
    #[serde(skip)]
    pub partition: CoalitionPartition,
    pub class_labels: Vec<String>,
    pub target: Target,
    /// `values[k][cell]`.
    pub values: Vec<Vec<f64>>,
    pub stderr: Option<Vec<Vec<f64>>>,
    pub base_rate: Vec<f64>,
    /// Mean target output with every cell kept.
    pub model_output: Vec<f64>,
    pub estimator: Estimator,
    pub num_evaluations: usize,
    pub num_permutations: usize,
    pub background_size: usize,
    pub seed: u64,
    /// Standard error of the summed values per class; 0 for exact results.
    pub total_stderr: Vec<f64>,
}

impl AttributionMap {
    pub fn class_count(&self) -> usize {
        self.values.len()
    }

    pub fn cell_count(&self) -> usize {
        self.partition.cell_count()
    }

    /// `Σ values[k] - (model_output[k] - base_rate[k])`.
    pub fn efficiency_residual(&self) -> Vec<f64> {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| v.iter().sum::<f64>() - (self.model_output[k] - self.base_rate[k]))
            .collect()
    }

    pub fn aggregate_stderr(&self) -> Vec<f64> {
        self.total_stderr.clone()
    }

    /// Values of class `k` laid out as the partition's cell grid.
    pub fn grid(&self, k: usize) -> Grid<f64> {
        let (r, c) = self.partition.shape();
        Grid::from_vec(r, c, self.values[k].clone())
    }

    pub fn value_at(&self, k: usize, row_value: f64, col_value: Option<f64>) -> f64 {
        self.values[k][self.partition.cell_at(row_value, col_value)]
    }

    /// Cell with the largest value for class `k`.
    pub fn top_cell(&self, k: usize) -> usize {
        self.values[k]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// CSV for class `k`: grid domains put row-axis centers in the first
    /// column and column-axis centers in the header; vector domains write
    /// one `center,value` row per cell.
    pub fn write_csv<W: Write>(&self, k: usize, mut out: W) -> Result<()> {
        let p = &self.partition;
        let num = |v: f64| format!("{v:.16e}");
        match &p.cols {
            Some(cols) => {
                write!(out, "{} [{}] \\ {} [{}]", p.rows.name, p.rows.unit, cols.name, cols.unit)?;
                for c in &cols.centers {
                    write!(out, ",{}", num(*c))?;
                }
                writeln!(out)?;
                let g = self.grid(k);
                for (r, center) in p.rows.centers.iter().enumerate() {
                    write!(out, "{}", num(*center))?;
                    for v in g.row(r) {
                        write!(out, ",{}", num(*v))?;
                    }
                    writeln!(out)?;
                }
            }
            None => {
                writeln!(out, "{} [{}],value", p.rows.name, p.rows.unit)?;
                for (center, v) in p.rows.centers.iter().zip(&self.values[k]) {
                    writeln!(out, "{},{}", num(*center), num(*v))?;
                }
            }
        }
        Ok(())
    }

    pub fn summary(&self, config: &AttributionConfig, runtime_s: f64) -> AttributionSummary {
        let residual = self.efficiency_residual();
        let se = self.aggregate_stderr();
        AttributionSummary {
            domain: self.domain,
            class_labels: self.class_labels.clone(),
            target: self.target,
            estimator: self.estimator,
            cells: self.cell_count(),
            partition_shape: self.partition.shape(),
            partition: self.partition.clone(),
            base_rate: self.base_rate.clone(),
            model_output: self.model_output.clone(),
            efficiency_residual: residual.clone(),
            aggregate_stderr: se.clone(),
            efficiency_ok: residual.iter().zip(&se).all(|(r, s)| efficiency_holds(*r, *s)),
            top_cells: (0..self.class_count())
                .map(|k| {
                    let c = self.top_cell(k);
                    let (row, col) = self.partition.cell_center(c);
                    TopCell {
                        cell: c,
                        row_center: row,
                        col_center: col,
                        value: self.values[k][c],
                    }
                })
                .collect(),
            num_evaluations: self.num_evaluations,
            num_permutations: self.num_permutations,
            background_size: self.background_size,
            seed: self.seed,
            runtime_s,
            config: config.clone(),
        }
    }
}

/// `|residual| ≤ 3·stderr`, with a rounding allowance for exact results and
/// zero-variance estimates.
pub fn efficiency_holds(residual: f64, stderr: f64) -> bool {
    residual.abs() <= 3.0 * stderr + 1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopCell {
    pub cell: usize,
    pub row_center: f64,
    pub col_center: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionSummary {
    pub domain: DomainKind,
    pub class_labels: Vec<String>,
    pub target: Target,
    pub estimator: Estimator,
    pub cells: usize,
    pub partition_shape: (usize, usize),
    pub partition: CoalitionPartition,
    pub base_rate: Vec<f64>,
    pub model_output: Vec<f64>,
    pub efficiency_residual: Vec<f64>,
    pub aggregate_stderr: Vec<f64>,
    pub efficiency_ok: bool,
    pub top_cells: Vec<TopCell>,
    pub num_evaluations: usize,
    pub num_permutations: usize,
    pub background_size: usize,
    pub seed: u64,
    pub runtime_s: f64,
    pub config: AttributionConfig,
}

/// Attribute every class of `model` on `x` over the given domain and
/// background set. All classes share each model evaluation.
pub fn attribute<M: Classifier + ?Sized>(
    model: &M,
    class_labels: &[String],
    x: &TimeSeries,
    domain: &Domain,
    background: &BackgroundSet,
    config: &AttributionConfig,
) -> Result<AttributionMap> {
    config.validate()?;
    if class_labels.len() != model.class_count() {
        return invalid(format!("{} class labels for a {}-class model", class_labels.len(), model.class_count()));
    }
    let partition = match config.partition {
        Some(shape) => domain.partition(shape)?,
        None => domain.default_partition()?,
    };
    let game = MaskingGame::new(model, x, domain, &partition, background, config.target, config.pairing)?;
    let d = partition.cell_count();
    let result = if config.use_exact(d) {
        exact_shapley(&game)?
    } else {
        sampled_shapley_with(
            &game,
            SamplingOptions {
                num_permutations: config.permutations,
                seed: config.seed,
                cache_capacity: config.cache_capacity,
            },
        )?
    };
    let model_output = result.total.iter().zip(game.base_rate()).map(|(t, b)| t + b).collect();
    Ok(AttributionMap {
        domain: domain.kind(),
        class_labels: class_labels.to_vec(),
        target: config.target,
        base_rate: game.base_rate().to_vec(),
        model_output,
        estimator: result.estimator,
        num_evaluations: result.num_evaluations + background.len(),
        num_permutations: result.num_permutations,
        background_size: background.len(),
        seed: config.seed,
        total_stderr: result.total_stderr.clone().unwrap_or_else(|| vec![0.0; result.values.len()]),
        values: result.values,
        stderr: result.stderr,
        partition,
    })
}

/// Convenience wrapper: plans the domain and draws the background from
/// `pool` before attributing.
pub fn explain<M: Classifier + ?Sized>(
    model: &M,
    class_labels: &[String],
    x: &TimeSeries,
    kind: DomainKind,
    window: Option<WindowSpec>,
    pool: &[&TimeSeries],
    config: &AttributionConfig,
) -> Result<AttributionMap> {
    let domain = Domain::new(kind, x.len(), x.sample_rate(), window)?;
    let background = BackgroundSet::build(&domain, config.background_mode, pool, config.background_size, config.seed)?;
    attribute(model, class_labels, x, &domain, &background, config)
}
