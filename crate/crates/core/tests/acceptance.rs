//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//!     cargo test --release -p csshap --test acceptance            # all
//!     cargo test --release -p csshap --test acceptance -- 1 2 8   # a subset

use std::time::{Duration, Instant};

use csshap::coalition::Coalition;
use csshap::cs::{cs_forward, cs_inverse};
use csshap::dataset::{Dataset, Split};
use csshap::domains::{BackgroundSet, Domain, DomainKind};
use csshap::model::{evaluate, gradient_check, train, ModelConfig, ModelKind, TrainConfig, TrainedModel};
use csshap::shapley::{
    attribute, efficiency_holds, exact_shapley, sampled_shapley, AttributionConfig, AttributionMap, FnGame,
};
use csshap::signal::{add_noise, normalize_meanstd, relative_l2};
use csshap::sim::{build_dataset, DatasetSpec};
use csshap::{TimeSeries, WindowSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FS: f64 = 10_000.0;
const N: usize = 2000;
const PER_CLASS: usize = 10;

struct Outcome {
    id: &'static str,
    pass: bool,
    elapsed: Duration,
    detail: String,
}

fn report(id: &'static str, start: Instant, budget_s: Option<f64>, ok: bool, detail: String) -> Outcome {
    let elapsed = start.elapsed();
    let in_time = budget_s.is_none_or(|b| elapsed.as_secs_f64() < b);
    let detail = match budget_s {
        Some(b) => format!("{detail}; {:.1} s (budget {b} s)", elapsed.as_secs_f64()),
        None => format!("{detail}; {:.1} s", elapsed.as_secs_f64()),
    };
    Outcome {
        id,
        pass: ok && in_time,
        elapsed,
        detail,
    }
}

fn sine(f: f64, a: f64, phase: f64) -> TimeSeries {
    let s = (0..N).map(|n| a * (2.0 * std::f64::consts::PI * f * n as f64 / FS + phase).sin()).collect();
    TimeSeries::new(s, FS).unwrap()
}

fn sine_localization() -> Outcome {
    let start = Instant::now();
    let w = WindowSpec::default();
    let df = FS / w.length() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 1.0;
    for _ in 0..20 {
        let k = rng.random_range(2..w.length() / 2 - 1);
        let a = rng.random_range(0.1..10.0);
        let rep = cs_forward(&sine(k as f64 * df, a, rng.random_range(0.0..6.28)), &w).unwrap();
        let mag = rep.magnitude();
        let total: f64 = mag.as_slice().iter().map(|v| v * v).sum();
        let mut near = 0.0;
        for f in k - 1..=k + 1 {
            for c in 0..=1 {
                near += mag[(f, c)] * mag[(f, c)];
            }
        }
        worst = worst.min(near / total);
    }
    report(
        "1 sine localization",
        start,
        Some(10.0),
        worst >= 0.99,
        format!("min energy fraction within one cell of (f1, 0) = {worst:.6}"),
    )
}

fn round_trip(sim: &Dataset) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut signals: Vec<TimeSeries> = (0..50)
        .map(|_| {
            let s = (0..N).map(|_| rng.random_range(-1.0..1.0)).collect();
            TimeSeries::new(s, FS).unwrap()
        })
        .collect();
    signals.extend(sim.samples.iter().step_by(sim.samples.len() / 10).take(10).map(|s| s.series.clone()));
    let mut worst: f64 = 0.0;
    for (len, hop) in [(128, 32), (256, 64), (512, 128)] {
        let w = WindowSpec::hann(len, hop).unwrap();
        for x in &signals {
            let y = cs_inverse(&cs_forward(x, &w).unwrap(), &w).unwrap();
            worst = worst.max(relative_l2(y.samples(), x.samples()));
        }
    }
    report(
        "2 transform round trip",
        start,
        Some(30.0),
        worst < 1e-6,
        format!("max relative L2 error {worst:.3e} over {} signals x 3 windows", signals.len()),
    )
}

fn shapley_exactness() -> Outcome {
    let start = Instant::now();
    let mut hand_err: f64 = 0.0;

    let majority = FnGame::new(3, |s: &Coalition| f64::from(u8::from(s.len() >= 2)));
    for v in &exact_shapley(&majority).unwrap().values[0] {
        hand_err = hand_err.max((v - 1.0 / 3.0).abs());
    }
    let w = [0.5, -1.25, 2.0, 0.0, 3.5];
    let additive = FnGame::new(w.len(), |s: &Coalition| s.members().map(|i| w[i]).sum());
    for (v, wi) in exact_shapley(&additive).unwrap().values[0].iter().zip(w) {
        hand_err = hand_err.max((v - wi).abs());
    }
    // player 3 never matters; the others split a unanimity bonus of 6
    let null = FnGame::new(4, |s: &Coalition| {
        if s.contains(0) && s.contains(1) && s.contains(2) {
            6.0
        } else {
            0.0
        }
    });
    let vals = &exact_shapley(&null).unwrap().values[0];
    for (i, want) in [2.0, 2.0, 2.0, 0.0].iter().enumerate() {
        hand_err = hand_err.max((vals[i] - want).abs());
    }

    let d = 10;
    let mut within = 0;
    let mut pairs = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let lin: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pair: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let quorum = rng.random_range(3..8);
        let game = FnGame::new(d, |s: &Coalition| {
            let m: Vec<usize> = s.members().collect();
            let mut v: f64 = m.iter().map(|&i| lin[i]).sum();
            for (a, &i) in m.iter().enumerate() {
                for &j in &m[a + 1..] {
                    v += pair[i * d + j];
                }
            }
            if m.len() >= quorum {
                v += 2.0;
            }
            v
        });
        let exact = exact_shapley(&game).unwrap();
        let est = sampled_shapley(&game, 5000, seed).unwrap();
        let se = est.stderr.as_ref().unwrap();
        for i in 0..d {
            pairs += 1;
            if (est.values[0][i] - exact.values[0][i]).abs() <= 3.0 * se[0][i] {
                within += 1;
            }
        }
    }
    let frac = within as f64 / pairs as f64;
    report(
        "3 shapley exactness",
        start,
        Some(60.0),
        hand_err < 1e-12 && frac >= 0.95,
        format!("hand-game max error {hand_err:.2e}; sampled within 3 se for {within}/{pairs} ({:.1}%)", frac * 100.0),
    )
}

fn train_default(ds: &Dataset) -> (TrainedModel, f64, f64) {
    let cfg = ModelConfig::cnn(ds.sample_length, ds.class_count(), 0);
    let start = Instant::now();
    let (model, rep) = train(ds, &cfg, &TrainConfig::default(), |_| {}).unwrap();
    (model, rep.final_test_accuracy.unwrap_or(0.0), start.elapsed().as_secs_f64())
}

fn simulation_study(ds: &Dataset) -> (Outcome, TrainedModel) {
    let start = Instant::now();
    let (model, acc, secs) = train_default(ds);
    let (again, _, _) = train_default(ds);
    let deterministic = model.to_bytes().unwrap() == again.to_bytes().unwrap();
    let (xs, ys): (Vec<&[f64]>, Vec<usize>) = ds.split(Split::Test).map(|s| (s.series.samples(), s.label)).unzip();
    let (reacc, _) = evaluate(&model, &xs, &ys);
    let ok = acc >= 0.95 && secs < 600.0 && deterministic && model.network.config().kind == ModelKind::Cnn1d;
    let out = report(
        "5 simulation study",
        start,
        None,
        ok,
        format!(
            "test accuracy {:.2}% (re-evaluated {:.2}%), one training run {secs:.1} s (budget 600 s), seed-deterministic: {deterministic}",
            acc * 100.0,
            reacc * 100.0
        ),
    );
    (out, model)
}

struct Cells {
    p0: usize,
    p1: usize,
    p2: usize,
}

fn cs_setup(ds: &Dataset) -> (Domain, BackgroundSet, Cells) {
    let dom = Domain::new(DomainKind::CyclicSpectral, ds.sample_length, ds.sample_rate_hz, Some(WindowSpec::default())).unwrap();
    let pool: Vec<&TimeSeries> = ds.split(Split::Train).map(|s| &s.series).collect();
    let bg = BackgroundSet::draw(&dom, &pool, 32, 0).unwrap();
    let part = dom.default_partition().unwrap();
    let cells = Cells {
        p0: part.cell_at(1500.0, Some(50.0)),
        p1: part.cell_at(2500.0, Some(100.0)),
        p2: part.cell_at(3500.0, Some(125.0)),
    };
    (dom, bg, cells)
}

fn test_samples(ds: &Dataset, label: usize) -> Vec<&TimeSeries> {
    ds.split(Split::Test).filter(|s| s.label == label).take(PER_CLASS).map(|s| &s.series).collect()
}

fn mean_map(maps: &[AttributionMap]) -> Vec<Vec<f64>> {
    let k = maps[0].values.len();
    let d = maps[0].values[0].len();
    let mut out = vec![vec![0.0; d]; k];
    for m in maps {
        for (o, v) in out.iter_mut().zip(&m.values) {
            for (a, b) in o.iter_mut().zip(v) {
                *a += b / maps.len() as f64;
            }
        }
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
}

fn ground_truth(ds: &Dataset, model: &TrainedModel, maps: &mut Vec<AttributionMap>) -> Outcome {
    let start = Instant::now();
    let (dom, bg, cells) = cs_setup(ds);
    let cfg = AttributionConfig::default();
    let mut per_group = Vec::new();
    for label in 0..ds.class_count() {
        let group: Vec<AttributionMap> = test_samples(ds, label)
            .into_iter()
            .map(|x| attribute(model, &ds.class_names, x, &dom, &bg, &cfg).unwrap())
            .collect();
        per_group.push(mean_map(&group));
        maps.extend(group);
    }
    let mut notes = Vec::new();
    let mut ok_a = true;
    for (g, avg) in per_group.iter().enumerate() {
        for (k, v) in avg.iter().enumerate() {
            let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let ratio = v[cells.p0].abs() / max;
            if ratio > 0.1 {
                ok_a = false;
                notes.push(format!("P0/max {ratio:.2} on {} samples for {}", ds.class_names[g], ds.class_names[k]));
            }
        }
    }
    let mut fault = |label: usize, cell: usize, name: &str| -> bool {
        let avg = &per_group[label];
        let top = argmax(&avg[label]);
        let mut ok = top == cell;
        if !ok {
            notes.push(format!(
                "{name} cell {:+.4} but top cell {top} {:+.4} for {}",
                avg[label][cell], avg[label][top], ds.class_names[label]
            ));
        }
        for (k, v) in avg.iter().enumerate().filter(|(k, _)| *k != label) {
            if v[cell] >= 0.0 {
                ok = false;
                notes.push(format!("{name} cell {:+.4} for {}", v[cell], ds.class_names[k]));
            }
        }
        ok
    };
    let ok_b = fault(1, cells.p1, "P1");
    let ok_c = fault(2, cells.p2, "P2");
    report(
        "6 attribution ground truth",
        start,
        Some(900.0),
        ok_a && ok_b && ok_c,
        format!("(a) {ok_a} (b) {ok_b} (c) {ok_c}; {}", notes.join("; ")),
    )
}

fn noise_robustness(ds: &Dataset, model: &TrainedModel, maps: &mut Vec<AttributionMap>) -> Outcome {
    let start = Instant::now();
    let (dom, bg, cells) = cs_setup(ds);
    let cfg = AttributionConfig::default();
    let mut correct = 0;
    let mut values = Vec::new();
    for (i, x) in test_samples(ds, 1).into_iter().enumerate() {
        let noisy = normalize_meanstd(&add_noise(x, 0.0, 7_000 + i as u64).unwrap()).unwrap();
        let map = attribute(model, &ds.class_names, &noisy, &dom, &bg, &cfg).unwrap();
        let v = map.values[1][cells.p1];
        values.push(format!("{v:+.3}"));
        if v > 0.0 {
            correct += 1;
        }
        maps.push(map);
    }
    report(
        "7 noise robustness",
        start,
        None,
        correct >= 8,
        format!("P1 cell positive for Fault1 in {correct}/{PER_CLASS} noisy samples [{}]", values.join(" ")),
    )
}

fn efficiency_audit(ds: &Dataset, model: &TrainedModel, maps: &mut Vec<AttributionMap>) -> Outcome {
    let start = Instant::now();
    let x = &ds.split(Split::Test).next().unwrap().series;
    let pool: Vec<&TimeSeries> = ds.split(Split::Train).map(|s| &s.series).collect();
    let cfg = AttributionConfig {
        background_size: 8,
        permutations: 50,
        ..Default::default()
    };
    for kind in DomainKind::ALL {
        let window = kind.needs_window().then(WindowSpec::default);
        let dom = Domain::new(kind, ds.sample_length, ds.sample_rate_hz, window).unwrap();
        let bg = BackgroundSet::draw(&dom, &pool, cfg.background_size, 1).unwrap();
        maps.push(attribute(model, &ds.class_names, x, &dom, &bg, &cfg).unwrap());
    }
    let mut checked = 0;
    let mut failed = 0;
    let mut reported = true;
    for m in maps.iter() {
        let res = m.efficiency_residual();
        let se = m.aggregate_stderr();
        for (r, s) in res.iter().zip(&se) {
            checked += 1;
            if !efficiency_holds(*r, *s) {
                failed += 1;
            }
        }
        let json = serde_json::to_value(m.summary(&cfg, 0.0)).unwrap();
        reported &= json["efficiency_residual"].as_array().is_some_and(|a| a.len() == res.len());
    }
    report(
        "4 efficiency audit",
        start,
        None,
        failed == 0 && reported && checked > 0,
        format!("{} maps, {checked} class residuals, {failed} outside 3 se, residual in JSON: {reported}", maps.len()),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cnn = ModelConfig {
        kind: ModelKind::Cnn1d,
        input_length: 32,
        class_count: 3,
        channels: vec![3, 4],
        kernels: vec![5, 3],
        pools: vec![2, 2],
        batch_norm: true,
        hidden: vec![6],
        seed: 3,
    };
    let mut mlp = ModelConfig::mlp(16, 3, 5);
    mlp.hidden = vec![8, 6];
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut total = 0;
    for cfg in [cnn, mlp] {
        let g = gradient_check(&cfg, 4, 1e-3, 11).unwrap();
        worst = worst.max(g.worst_relative_error);
        skipped += g.skipped;
        total += g.checked + g.skipped;
    }
    report(
        "8 gradient check",
        start,
        Some(10.0),
        worst < 1e-4 && skipped * 20 <= total,
        format!("max relative error {worst:.2e} over {total} parameters ({skipped} at a kink)"),
    )
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let mut outcomes = Vec::new();
    if want("1") {
        outcomes.push(sine_localization());
    }
    let ds = build_dataset(&DatasetSpec::simulation(300, 0)).unwrap();
    if want("2") {
        outcomes.push(round_trip(&ds));
    }
    if want("3") {
        outcomes.push(shapley_exactness());
    }
    if want("8") {
        outcomes.push(gradients());
    }
    if ["4", "5", "6", "7"].iter().any(|id| want(id)) {
        let (out, model) = simulation_study(&ds);
        if want("5") {
            outcomes.push(out);
        }
        let mut maps = Vec::new();
        if want("6") || want("4") {
            outcomes.push(ground_truth(&ds, &model, &mut maps));
        }
        if want("7") || want("4") {
            outcomes.push(noise_robustness(&ds, &model, &mut maps));
        }
        if want("4") {
            outcomes.push(efficiency_audit(&ds, &model, &mut maps));
        }
    }
    outcomes.sort_by_key(|o| o.id);
    println!();
    for o in &outcomes {
        println!("{} criterion {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
    }
    let total: Duration = outcomes.iter().map(|o| o.elapsed).sum();
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed in {:.0} s", outcomes.len() - failed, outcomes.len(), total.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
