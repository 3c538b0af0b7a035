//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use delayfeed::datagen::{
    gamma_poisson_tail_mean, generate, generate_with_population, CampaignProfile, DelayComponent, Population,
    PosteriorOracle, StreamConfig,
};
use delayfeed::ensemble::{estimate_mature_label, serving_features};
use delayfeed::experiment::{run_seed, ExperimentConfig};
use delayfeed::harness::{run, EventKind, RunOptions, RunResult, SliceKind, SliceSet};
use delayfeed::regressor::{FeatureVector, PoissonRegressor, RegressorConfig, Target};
use delayfeed::types::{DelayBucketing, LabelParts, DAY};
use delayfeed::variants::{MatrixDefaults, VariantSpec};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: u32, title: &str, started: Instant, o: Outcome| {
        let status = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failures += 1;
        }
        println!("{status} [{id:2}] {title}: {} ({:.1}s)", o.detail, started.elapsed().as_secs_f64());
    };

    let t = Instant::now();
    report(1, "posterior oracle completes labels without bias", t, oracle_unbiased());

    let t = Instant::now();
    let matrix = MatrixRuns::collect();
    let matrix_secs = t.elapsed().as_secs_f64();
    println!(
        "      full matrix over {} seeds: {matrix_secs:.1}s ({:.1}s per seed)",
        SEEDS.len(),
        matrix_secs / SEEDS.len() as f64
    );
    let per_seed_ok = matrix_secs / (SEEDS.len() as f64) < 300.0;
    report(2, "Proposed calibrated over the final quarter", t, matrix.calibration(per_seed_ok));
    report(3, "M1 underpredicts long-delay campaigns", t, matrix.m1_underprediction());
    report(4, "ranking on all data", t, matrix.ranking());
    report(5, "thermometer gain on new campaigns", t, matrix.cold_start());
    report(6, "gain over short-delay baselines on high-delay campaigns", t, matrix.high_delay());

    let t = Instant::now();
    let o = gradient_check();
    let secs = t.elapsed().as_secs_f64();
    report(7, "analytic gradients match finite differences", t, within_time(o, secs, 10.0));

    let t = Instant::now();
    report(8, "structural invariants", t, structural());

    let t = Instant::now();
    let o = gamma_poisson_posterior();
    let secs = t.elapsed().as_secs_f64();
    report(9, "Gamma-Poisson tail means", t, within_time(o, secs, 60.0));

    let t = Instant::now();
    report(10, "retractions with two-output heads", t, retractions());

    if failures == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

fn within_time(o: Outcome, secs: f64, limit: f64) -> Outcome {
    if secs < limit {
        o
    } else {
        outcome(false, format!("{}; took {secs:.1}s, limit {limit}s", o.detail))
    }
}

fn oracle_unbiased() -> Outcome {
    let t = Instant::now();
    let config = StreamConfig {
        total_clicks: 100_000,
        drift: false,
        retractions: false,
        ..StreamConfig::default()
    };
    let stream = generate(&config).expect("stream generates");
    let bucketing = DelayBucketing::default_days();
    let oracle = PosteriorOracle {
        population: &stream.population,
        bucketing: &bucketing,
    };
    let n = stream.examples.len() as f64;
    let truth: f64 = stream.examples.iter().map(|e| e.mature_label()).sum::<f64>() / n;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for m in 0..bucketing.sub_model_count() {
        let mut sum = 0.0;
        for e in &stream.examples {
            let now = e.click_time + bucketing.start(m);
            sum += estimate_mature_label(&oracle, &bucketing, e, now).expect("oracle valid on stationary stream");
        }
        let rel = (sum / n - truth) / truth;
        worst = worst.max(rel.abs());
        parts.push(format!("m{m} {:+.3}%", rel * 100.0));
    }
    let secs = t.elapsed().as_secs_f64();
    within_time(
        outcome(worst < 0.01, format!("mean label {truth:.4}; {}", parts.join(", "))),
        secs,
        30.0,
    )
}

struct SeedRun {
    seed: u64,
    runs: BTreeMap<String, RunResult>,
    long_delay: BTreeSet<u32>,
    campaigns: BTreeMap<u64, u32>,
}

impl SeedRun {
    fn pll(&self, variant: &str, slice: SliceKind) -> f64 {
        self.runs[variant].slices[&slice].finalize().pll.expect("slice is populated")
    }

    /// Relative PLL improvement of `better` over `base`, in percent.
    fn gain(&self, better: &str, base: &str, slice: SliceKind) -> f64 {
        let b = self.pll(base, slice);
        (b - self.pll(better, slice)) / b.abs() * 100.0
    }
}

struct MatrixRuns(Vec<SeedRun>);

impl MatrixRuns {
    fn collect() -> Self {
        let config = ExperimentConfig::default();
        let options = RunOptions {
            record_predictions: true,
            ..RunOptions::default()
        };
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let t = Instant::now();
                let (_, runs) = run_seed(&config, seed, 1, &options).expect("matrix runs");
                let stream = config.stream(seed).expect("stream regenerates");
                let long_delay = stream
                    .population
                    .campaigns
                    .iter()
                    .filter(|c| 1.0 - c.window_cdf(DAY) >= 0.2)
                    .map(|c| c.campaign_id)
                    .collect();
                println!("      seed {seed}: {:.1}s", t.elapsed().as_secs_f64());
                SeedRun {
                    seed,
                    runs: runs.into_iter().map(|r| (r.variant.clone(), r)).collect(),
                    long_delay,
                    campaigns: stream.examples.iter().map(|e| (e.example_id, e.campaign_id)).collect(),
                }
            })
            .collect();
        Self(runs)
    }

    fn tally(&self, detail: impl Fn(&SeedRun) -> (bool, String)) -> (usize, String) {
        let mut hits = 0;
        let mut parts = Vec::new();
        for s in &self.0 {
            let (ok, d) = detail(s);
            hits += ok as usize;
            parts.push(format!("s{} {d}{}", s.seed, if ok { "" } else { "*" }));
        }
        (hits, parts.join("; "))
    }

    fn calibration(&self, per_seed_ok: bool) -> Outcome {
        let (hits, detail) = self.tally(|s| {
            let p = &s.runs["Proposed"].predictions;
            let tail = &p[p.len() * 3 / 4..];
            let bias = tail.iter().map(|r| r.prediction).sum::<f64>() / tail.iter().map(|r| r.label).sum::<f64>();
            ((0.97..=1.03).contains(&bias), format!("{bias:.4}"))
        });
        let timing = if per_seed_ok { "" } else { "; over 5 min per seed" };
        outcome(hits >= 4 && per_seed_ok, format!("{hits}/5 in [0.97, 1.03]: {detail}{timing}"))
    }

    fn m1_underprediction(&self) -> Outcome {
        let (hits, detail) = self.tally(|s| {
            let bias = s.m1_long_delay_bias();
            (
                !s.long_delay.is_empty() && bias < 0.90,
                format!("{bias:.3} over {} campaigns", s.long_delay.len()),
            )
        });
        outcome(hits == 5, format!("{hits}/5 below 0.90: {detail}"))
    }

    fn ranking(&self) -> Outcome {
        let all = SliceKind::All;
        let (a, da) = self.tally(|s| {
            let ok = s.pll("Oracle", all) < s.pll("Proposed", all);
            (ok, format!("{:.5}<{:.5}", s.pll("Oracle", all), s.pll("Proposed", all)))
        });
        let (b, db) = self.tally(|s| {
            let best = s.pll("M4", all).min(s.pll("M5", all));
            let base = if s.pll("M4", all) < s.pll("M5", all) { "M4" } else { "M5" };
            (s.pll("Proposed", all) < best, format!("{:+.2}% vs {base}", s.gain("Proposed", base, all)))
        });
        let (c, dc) = self.tally(|s| {
            (s.pll("Proposed", all) < s.pll("M3", all), format!("{:+.2}%", s.gain("Proposed", "M3", all)))
        });
        for s in &self.0 {
            let cols: Vec<String> = s.runs.keys().map(|v| format!("{v} {:+.2}", s.gain(v, "M3", all))).collect();
            println!("      s{} gain over M3 (%): {}", s.seed, cols.join(" "));
        }
        outcome(
            a >= 4 && b >= 4 && c >= 4,
            format!("Oracle<Proposed {a}/5 [{da}]; Proposed<min(M4,M5) {b}/5 [{db}]; Proposed<M3 {c}/5 [{dc}]"),
        )
    }

    fn cold_start(&self) -> Outcome {
        let (a, da) = self.tally(|s| {
            let g = s.gain("Proposed", "M4", SliceKind::NewCampaign);
            (g > 0.0, format!("{g:+.2}%"))
        });
        let (b, db) = self.tally(|s| {
            let new = s.gain("Proposed", "M4", SliceKind::NewCampaign);
            let all = s.gain("Proposed", "M4", SliceKind::All);
            (new > all, format!("{new:+.2}% vs {all:+.2}%"))
        });
        outcome(
            a >= 4 && b >= 3,
            format!("Proposed<M4 on NEW {a}/5 [{da}]; NEW gap > ALL gap {b}/5 [{db}]"),
        )
    }

    fn high_delay(&self) -> Outcome {
        let mut details = Vec::new();
        let mut pass = true;
        for base in ["M1", "M2_7d"] {
            let (hits, d) = self.tally(|s| {
                let hi = s.gain("Proposed", base, SliceKind::HighDelay);
                let all = s.gain("Proposed", base, SliceKind::All);
                (hi > all, format!("{hi:+.1}% vs {all:+.1}%"))
            });
            pass &= hits >= 3;
            details.push(format!("over {base} {hits}/5 [{d}]"));
        }
        outcome(pass, details.join("; "))
    }
}

impl SeedRun {
    fn m1_long_delay_bias(&self) -> f64 {
        let (pred, label) = self.runs["M1"]
            .predictions
            .iter()
            .filter(|r| self.long_delay.contains(&self.campaigns[&r.example_id]))
            .fold((0.0, 0.0), |(p, l), r| (p + r.prediction, l + r.label));
        pred / label
    }
}

fn random_regressor(rng: &mut ChaCha8Rng) -> RegressorConfig {
    let fields = rng.random_range(1..=3);
    let numeric = rng.random_range(0..=2);
    let layers = rng.random_range(0..=2);
    RegressorConfig {
        categorical_fields: (0..fields).map(|i| format!("f{i}")).collect(),
        numeric_features: (0..numeric).map(|i| format!("n{i}")).collect(),
        embedding_dim: rng.random_range(1..=4),
        hash_buckets_per_field: rng.random_range(3..=11),
        hidden_layer_sizes: (0..layers).map(|_| rng.random_range(1..=6)).collect(),
        output_bias_init: rng.random_range(-1.0..1.0),
        two_output_mode: rng.random_bool(0.3),
        rng_seed: rng.random(),
        ..RegressorConfig::default()
    }
}

fn random_input(config: &RegressorConfig, rng: &mut ChaCha8Rng) -> (FeatureVector, Target) {
    let mut fv = FeatureVector::new();
    for f in &config.categorical_fields {
        fv = fv.with_token(f.clone(), format!("t{}", rng.random_range(0..20)));
    }
    for n in &config.numeric_features {
        fv = fv.with_numeric(n.clone(), rng.random_range(0.0..3.0));
    }
    let count = |rng: &mut ChaCha8Rng| rng.random_range(0..5) as f64;
    let target = if config.two_output_mode {
        Target::Split(LabelParts {
            positive: count(rng),
            negative: count(rng),
        })
    } else {
        Target::Count(count(rng))
    };
    (fv, target)
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter of one randomly initialized network.
#[allow(clippy::needless_range_loop)]
fn max_gradient_error(config: RegressorConfig, fv: &FeatureVector, target: Target, rng: &mut ChaCha8Rng) -> f64 {
    const H: f64 = 1e-6;
    let mut model = PoissonRegressor::new(config).expect("valid config");
    // Zero-initialized biases put dead units exactly on the ReLU kink, where
    // no derivative exists; move every parameter to a generic point first.
    for (_, block) in model.parameter_blocks_mut() {
        for w in block.iter_mut() {
            *w += rng.random_range(-0.1..0.1);
        }
    }
    let grads = model.gradients(fv, target).expect("finite inputs");
    let analytic = model.dense_gradient(&grads);
    let mut worst: f64 = 0.0;
    let blocks = model.parameter_blocks().len();
    for b in 0..blocks {
        let len = model.parameter_blocks()[b].1.len();
        for j in 0..len {
            // Untouched embedding rows have an exact zero on both sides.
            if analytic[b][j] == 0.0 && model.parameter_blocks()[b].0.starts_with("embedding/") {
                continue;
            }
            let original = model.parameter_blocks()[b].1[j];
            model.parameter_blocks_mut()[b].1[j] = original + H;
            let up = model.gradients(fv, target).expect("finite").loss;
            model.parameter_blocks_mut()[b].1[j] = original - H;
            let down = model.gradients(fv, target).expect("finite").loss;
            model.parameter_blocks_mut()[b].1[j] = original;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[b][j];
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
    }
    worst
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut failing = 0;
    for _ in 0..100 {
        let config = random_regressor(&mut rng);
        let (fv, target) = random_input(&config, &mut rng);
        let e = max_gradient_error(config, &fv, target, &mut rng);
        worst = worst.max(e);
        failing += (e > 1e-3) as usize;
    }
    outcome(failing == 0, format!("100 configs, worst relative error {worst:.2e}, {failing} above 1e-3"))
}

fn small_stream(clicks: usize, seed: u64) -> StreamConfig {
    StreamConfig {
        total_clicks: clicks,
        campaign_count: 12,
        duration: 60.0 * DAY,
        rng_seed: seed,
        ..StreamConfig::default()
    }
}

fn matrix_defaults() -> MatrixDefaults {
    MatrixDefaults {
        regressor: delayfeed::experiment::default_regressor(),
        ..MatrixDefaults::default()
    }
}

fn structural() -> Outcome {
    let mut failed = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };

    let stream = generate(&StreamConfig {
        retractions: true,
        ..small_stream(4_000, 11)
    })
    .expect("stream generates");
    let b = DelayBucketing::default_days();

    // Label identities.
    let identities = stream.examples.iter().all(|e| {
        let thermo = b.thermometer_labels(e);
        let bucket = b.bucket_labels(e);
        let n = b.n();
        thermo[0] == e.mature_label()
            && (0..n).all(|i| thermo[i] == bucket[i] + thermo[i + 1])
            && thermo[n] == bucket[n]
            && (bucket.iter().sum::<f64>() - e.mature_label()).abs() < 1e-9
    });
    check("thermometer/bucket identities", identities);

    // Maturity: every TRAIN fires no earlier than the sub-model's horizon.
    let d = matrix_defaults();
    let slices = SliceSet::for_population(&stream.population);
    let options = RunOptions {
        stream_end: Some(stream.duration()),
        record_events: true,
        record_predictions: true,
        ..RunOptions::default()
    };
    let proposed = VariantSpec::proposed(&d);
    let base = run(&proposed, &stream.examples, &slices, &options).expect("run");
    let matured = base.events.iter().all(|ev| match ev.kind {
        EventKind::Eval => true,
        EventKind::Train { sub_model } => {
            let e = &stream.examples[ev.sequence];
            ev.time - e.click_time >= base.model.required_age(sub_model) - 1e-6
        }
    });
    check("maturity", matured && base.dropped_train_events > 0);

    // Evaluate-then-train: withholding an example's own training leaves its
    // prediction bit-identical.
    for &id in &[500u64, 2_000, 3_500] {
        let skipped = RunOptions {
            skip_training: [id].into_iter().collect(),
            ..options.clone()
        };
        let other = run(&proposed, &stream.examples, &slices, &skipped).expect("run");
        let find = |r: &RunResult| r.predictions.iter().find(|p| p.example_id == id).map(|p| p.prediction.to_bits());
        check("evaluate-then-train", find(&base) == find(&other) && find(&base).is_some());
    }

    // Serving with thermometer encoding runs exactly one forward pass.
    let model = proposed.build().expect("builds");
    let before = model.forward_calls();
    model.serve(&stream.examples[0]).expect("serves");
    check("single forward", model.forward_calls() - before == 1);

    // Sparse locality: only the touched embedding rows move.
    let config = delayfeed::experiment::default_regressor();
    let mut reg = PoissonRegressor::new(config.clone()).expect("valid");
    let fv = serving_features(&stream.examples[0]);
    let before: Vec<Vec<f64>> = reg.parameter_blocks().into_iter().map(|(_, p)| p.to_vec()).collect();
    reg.train_step(&fv, Target::Count(3.0)).expect("trains");
    let dim = config.embedding_dim;
    let local = config.categorical_fields.iter().enumerate().all(|(f, field)| {
        let token = &fv.categorical.iter().find(|(n, _)| n == field).expect("field present").1;
        let row = reg.bucket_of(field, token);
        let after = reg.parameter_blocks()[f].1;
        (0..after.len() / dim).all(|r| {
            let same = after[r * dim..(r + 1) * dim] == before[f][r * dim..(r + 1) * dim];
            if r == row {
                !same
            } else {
                same
            }
        })
    });
    check("sparse-update locality", local);

    // Determinism of the full pipeline.
    let config = ExperimentConfig {
        stream: small_stream(3_000, 5),
        ..ExperimentConfig::default()
    };
    let first = run_seed(&config, 5, 1, &RunOptions::default()).expect("runs").0;
    let second = run_seed(&config, 5, 1, &RunOptions::default()).expect("runs").0;
    check(
        "byte-identical reports",
        first.to_json().expect("json") == second.to_json().expect("json") && first.to_csv() == second.to_csv(),
    );

    if failed.is_empty() {
        outcome(
            true,
            "identities, maturity, evaluate-then-train, single forward, sparse locality, determinism",
        )
    } else {
        outcome(false, format!("failed: {}", failed.join(", ")))
    }
}

fn gamma_poisson_posterior() -> Outcome {
    let (alpha, beta) = (2.0, 1.0);
    let horizon = DAY;
    let campaign = CampaignProfile::simple(0, alpha, beta, DelayComponent::Exponential { mean: DAY }, 30.0 * DAY);
    let population = Population {
        campaigns: vec![campaign.clone()],
        segment_multipliers: vec![1.0],
        context_multipliers: vec![1.0],
    };
    let config = StreamConfig {
        total_clicks: 200_000,
        rng_seed: 9,
        drift: false,
        ..StreamConfig::default()
    };
    let stream = generate_with_population(&config, population).expect("stream generates");
    let p = campaign.window_cdf(horizon);
    let mut groups: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for e in &stream.examples {
        let k = e.observed_prefix(horizon).expect("in range");
        let tail = e.mature_label() - k;
        let g = groups.entry(k as u32).or_default();
        g.0 += tail;
        g.1 += 1;
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for k in 0..=3u32 {
        let (sum, n) = groups.get(&k).copied().unwrap_or_default();
        let mc = sum / n as f64;
        let exact = gamma_poisson_tail_mean(alpha, beta, p, k as f64);
        let rel = (mc - exact) / exact;
        pass &= rel.abs() < 0.02;
        parts.push(format!("k={k} n={n} mc {mc:.4} exact {exact:.4} ({:+.2}%)", rel * 100.0));
    }
    outcome(pass, parts.join("; "))
}

fn retractions() -> Outcome {
    let config = ExperimentConfig {
        stream: StreamConfig {
            retractions: true,
            retraction_prob: 0.4,
            ..small_stream(40_000, 3)
        },
        variants: vec!["Proposed".into()],
        overrides: [("Proposed".into(), serde_json::json!({ "two_output_mode": true }))].into(),
        ..ExperimentConfig::default()
    };
    let stream = config.stream(3).expect("stream generates");
    let retracted = stream.examples.iter().flat_map(|e| &e.events).filter(|ev| ev.signed_value() < 0.0).count();
    let (report, runs) = run_seed(&config, 3, 1, &RunOptions::default()).expect("runs");
    let model = &runs[0].model;

    let b = DelayBucketing::default_days();
    let mut exact = model.two_output();
    for e in &stream.examples {
        let out = model.serve(e).expect("serves");
        let parts = out.parts();
        exact &= out.negative_rate.is_some() && out.signed() == parts.positive - parts.negative;
        for i in 0..b.sub_model_count() {
            let slice = e.window_parts(b.start(i), b.end(i));
            exact &= slice.signed() == e.window_sum(b.start(i), b.end(i));
        }
    }
    let bias = report.variants["Proposed"].slices["ALL"].bias.unwrap_or(f64::NAN);
    outcome(
        exact && (0.9..=1.1).contains(&bias) && retracted > 0,
        format!("{retracted} retractions; decomposition exact: {exact}; cumulative bias {bias:.4}"),
    )
}
