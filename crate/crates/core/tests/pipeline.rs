use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use delayfeed::datagen::{generate, StreamConfig};
use delayfeed::experiment::{default_regressor, run_seed, ExperimentConfig};
use delayfeed::harness::{run, timeline, EventKind, RunOptions, SliceSet};
use delayfeed::types::{ClickExample, ConversionEvent, DelayBucketing, DAY, HOUR};
use delayfeed::variants::{MatrixDefaults, VariantSpec};

const M: f64 = 30.0 * DAY;

fn example_with(delays: Vec<f64>, retract: Vec<bool>) -> ClickExample {
    let mut events = Vec::new();
    for (d, r) in delays.iter().zip(retract) {
        events.push(ConversionEvent::count(*d));
        let later = d + 0.5 * DAY;
        if r && later < M {
            events.push(ConversionEvent::retraction(later, 1.0));
        }
    }
    events.sort_by(|a, b| a.delay.total_cmp(&b.delay));
    ClickExample {
        example_id: 0,
        click_time: 0.0,
        campaign_id: 0,
        campaign_start_time: 0.0,
        features: BTreeMap::new(),
        attribution_window: M,
        events,
    }
}

fn examples() -> impl Strategy<Value = ClickExample> {
    prop::collection::vec((0.0..M, any::<bool>()), 0..12).prop_map(|v| {
        let (d, r): (Vec<f64>, Vec<bool>) = v.into_iter().unzip();
        example_with(d, r)
    })
}

fn bucketings() -> impl Strategy<Value = DelayBucketing> {
    prop::collection::btree_set(1u32..(30 * 24), 2..=9).prop_map(|hours| {
        DelayBucketing::new(hours.into_iter().map(|h| h as f64 * HOUR).collect(), M).unwrap()
    })
}

fn defaults() -> MatrixDefaults {
    MatrixDefaults {
        regressor: default_regressor(),
        ..MatrixDefaults::default()
    }
}

fn small(clicks: usize, seed: u64) -> StreamConfig {
    StreamConfig {
        total_clicks: clicks,
        campaign_count: 10,
        duration: 50.0 * DAY,
        rng_seed: seed,
        ..StreamConfig::default()
    }
}

proptest! {
    #[test]
    fn thermometer_and_bucket_labels_agree(e in examples(), b in bucketings()) {
        let thermo = b.thermometer_labels(&e);
        let bucket = b.bucket_labels(&e);
        prop_assert_eq!(thermo.len(), b.sub_model_count());
        prop_assert_eq!(thermo[0], e.mature_label());
        for i in 0..b.n() {
            prop_assert_eq!(thermo[i], bucket[i] + thermo[i + 1]);
        }
        prop_assert_eq!(thermo[b.n()], bucket[b.n()]);
        prop_assert!((bucket.iter().sum::<f64>() - e.mature_label()).abs() < 1e-9);
    }

    #[test]
    fn prefixes_grow_with_the_horizon_without_retractions(
        delays in prop::collection::vec(0.0..M, 0..12),
        cuts in prop::collection::vec(0.0..M, 2),
    ) {
        let n = delays.len();
        let e = example_with(delays, vec![false; n]);
        let (lo, hi) = (cuts[0].min(cuts[1]), cuts[0].max(cuts[1]));
        prop_assert!(e.observed_prefix(lo).unwrap() <= e.observed_prefix(hi).unwrap());
        prop_assert_eq!(e.observed_prefix(0.0).unwrap(), 0.0);
        prop_assert_eq!(e.observed_prefix(M).unwrap(), e.mature_label());
    }

    #[test]
    fn signed_parts_decompose_every_window(e in examples(), b in bucketings()) {
        for i in 0..b.sub_model_count() {
            let parts = e.window_parts(b.start(i), b.end(i));
            prop_assert_eq!(parts.positive - parts.negative, e.window_sum(b.start(i), b.end(i)));
        }
    }

    #[test]
    fn proposed_sub_models_train_only_after_their_horizon(e in examples()) {
        let model = VariantSpec::proposed(&defaults()).build().unwrap();
        let schedule = model.training_schedule(&e);
        prop_assert_eq!(schedule.len(), 5);
        for (time, i) in schedule {
            prop_assert!(time - e.click_time >= model.required_age(i));
        }
    }
}

#[test]
fn every_example_is_evaluated_before_it_trains() {
    let stream = generate(&small(3_000, 2)).unwrap();
    for spec in VariantSpec::standard_matrix(&defaults()) {
        let model = spec.build().unwrap();
        let mut evaluated = BTreeSet::new();
        let events = timeline(&model, &stream.examples);
        assert!(events.windows(2).all(|w| w[0].time <= w[1].time), "{}", spec.name);
        for ev in events {
            match ev.kind {
                EventKind::Eval => assert!(evaluated.insert(ev.sequence)),
                EventKind::Train { .. } => assert!(evaluated.contains(&ev.sequence), "{}", spec.name),
            }
        }
    }
}

#[test]
fn withholding_its_own_training_leaves_a_prediction_unchanged() {
    let stream = generate(&small(3_000, 3)).unwrap();
    let slices = SliceSet::for_population(&stream.population);
    let options = RunOptions {
        stream_end: Some(stream.duration()),
        record_predictions: true,
        ..RunOptions::default()
    };
    for spec in [VariantSpec::proposed(&defaults()), VariantSpec::m1(&defaults())] {
        let base = run(&spec, &stream.examples, &slices, &options).unwrap();
        for id in [100u64, 1_500, 2_900] {
            let skip = RunOptions {
                skip_training: [id].into(),
                ..options.clone()
            };
            let other = run(&spec, &stream.examples, &slices, &skip).unwrap();
            let pick = |r: &delayfeed::harness::RunResult| {
                r.predictions.iter().find(|p| p.example_id == id).unwrap().prediction.to_bits()
            };
            assert_eq!(pick(&base), pick(&other), "{} example {id}", spec.name);
            assert!(other.train_events < base.train_events);
        }
    }
}

#[test]
fn immature_training_is_dropped_at_the_stream_end() {
    let stream = generate(&small(2_000, 4)).unwrap();
    let spec = VariantSpec::proposed(&defaults());
    let model = spec.build().unwrap();
    let end = stream.duration();
    let late = stream
        .examples
        .iter()
        .flat_map(|e| model.training_schedule(e))
        .filter(|(t, _)| *t > end)
        .count() as u64;
    let slices = SliceSet::for_population(&stream.population);
    let result = run(
        &spec,
        &stream.examples,
        &slices,
        &RunOptions {
            stream_end: Some(end),
            record_events: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert!(late > 0);
    assert_eq!(result.dropped_train_events, late);
    assert_eq!(result.train_events + late, 5 * stream.examples.len() as u64);
    for ev in &result.events {
        if let EventKind::Train { sub_model } = ev.kind {
            let e = &stream.examples[ev.sequence];
            assert!(ev.time <= end);
            assert!(ev.time - e.click_time >= result.model.required_age(sub_model) - 1e-6);
        }
    }
}

#[test]
fn thermometer_serving_runs_one_forward_pass() {
    let stream = generate(&small(200, 5)).unwrap();
    let d = defaults();
    for (spec, passes) in [(VariantSpec::proposed(&d), 1), (VariantSpec::m5(&d), 1), (VariantSpec::m4(&d), 5)] {
        let model = spec.build().unwrap();
        for e in &stream.examples {
            let before = model.forward_calls();
            model.serve(e).unwrap();
            assert_eq!(model.forward_calls() - before, passes, "{}", spec.name);
        }
    }
}

#[test]
fn short_delays_make_every_label_policy_agree() {
    // With every conversion inside the first hour, the 6h prefix, the 7d
    // prefix and the mature label are the same number.
    let mut e = example_with(vec![0.1 * HOUR, 0.5 * HOUR, 0.9 * HOUR], vec![false; 3]);
    e.features = [("campaign", "c0"), ("segment", "s0"), ("context", "x0")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let d = defaults();
    for spec in VariantSpec::standard_matrix(&d) {
        let model = spec.build().unwrap();
        let label = model.training_label(&e, 0).unwrap();
        if model.as_ensemble().is_none() {
            assert_eq!(label.signed(), 3.0, "{}", spec.name);
        } else {
            // Bucket 0 holds every event; later sub-models see nothing.
            assert!(label.signed() >= 3.0, "{}", spec.name);
            let b = DelayBucketing::default_days();
            assert_eq!(b.bucket_labels(&e)[1..].iter().sum::<f64>(), 0.0);
        }
    }
}

#[test]
fn reruns_give_byte_identical_reports() {
    let config = ExperimentConfig {
        stream: small(2_000, 6),
        ..ExperimentConfig::default()
    };
    let (a, _) = run_seed(&config, 6, 1, &RunOptions::default()).unwrap();
    let (b, _) = run_seed(&config, 6, 2, &RunOptions::default()).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.variants.len(), 8);
    assert_eq!(a.variants["M3"].slices["ALL"].pll_vs_m3_pct, Some(0.0));
    assert_eq!(a.variants["Oracle"].note.as_deref(), Some("upper bound, impossible in practice"));
}

#[test]
fn two_output_proposed_handles_a_retraction_heavy_stream() {
    let config = ExperimentConfig {
        stream: StreamConfig {
            retractions: true,
            retraction_prob: 0.5,
            ..small(8_000, 7)
        },
        variants: vec!["Proposed".into()],
        overrides: [("Proposed".into(), serde_json::json!({"two_output_mode": true}))].into(),
        ..ExperimentConfig::default()
    };
    let (report, runs) = run_seed(&config, 7, 1, &RunOptions::default()).unwrap();
    assert!(runs[0].model.two_output());
    let stream = config.stream(7).unwrap();
    for e in stream.examples.iter().take(500) {
        let out = runs[0].model.serve(e).unwrap();
        let parts = out.parts();
        assert_eq!(out.signed(), parts.positive - parts.negative);
        assert!(parts.negative > 0.0);
    }
    let bias = report.variants["Proposed"].slices["ALL"].bias.unwrap();
    assert!(bias.is_finite() && bias > 0.0, "bias {bias}");
}
