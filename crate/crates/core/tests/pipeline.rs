//! Module-level pipeline behaviour on the toy backends.

use std::collections::BTreeMap;

use chrono::DateTime;
use image::{Rgb, RgbImage};
use shiftkit::backends::conformance::{check_embedding, check_generative};
use shiftkit::backends::toy::{ToyEmbedder, ToyGenerator, ToyWorld, DEFAULT_TEXT_DIM};
use shiftkit::backends::{EmbeddingBackend, GenerativeBackend};
use shiftkit::evaluation::{
    build_shift_report, evaluate_model, read_report_rows, EvaluationInput, ModelEvaluation, Prediction, PredictionSet,
    SampleIndex,
};
use shiftkit::filtering::{
    calibrate_class_threshold, calibrate_shift_threshold, filter_batch, nearest_rank_percentile, score_batch,
    ScriptedInspector,
};
use shiftkit::generation::{generate_batch, GenerationRequest, SampleStore};
use shiftkit::inversion::{learn_all_tokens, ClassImages, FailurePolicy, InversionConfig};
use shiftkit::library::{load_token_library, save_token_library};
use shiftkit::registry::ShiftRegistry;
use shiftkit::{ClassThreshold, ClassToken, CounterfactualSample, Error, Result};

fn pinned(steps: u64) -> InversionConfig {
    InversionConfig {
        steps,
        seed: 3,
        created_at: Some(DateTime::from_timestamp(1_700_000_000, 0).unwrap()),
        ..Default::default()
    }
}

fn class_images(world: &ToyWorld, ids: &[u32], per_class: u64) -> Vec<ClassImages> {
    ids.iter()
        .map(|&id| ClassImages {
            class_id: id,
            class_label: world.class(id).unwrap().label.clone(),
            images: (0..per_class).map(|s| world.dataset_image(id, s).unwrap()).collect(),
        })
        .collect()
}

fn toy_setup(steps: u64) -> (ToyGenerator, Vec<ClassToken>) {
    let world = ToyWorld::with_classes(8);
    let mut gen = ToyGenerator::new(world.clone(), DEFAULT_TEXT_DIM).unwrap();
    let classes = class_images(&world, &[0, 2], 3);
    let report = learn_all_tokens(&classes, &gen, &pinned(steps), 2, FailurePolicy::FailFast).unwrap();
    for t in &report.tokens {
        gen.register_token(&t.token_string, &t.embedding).unwrap();
    }
    (gen, report.tokens)
}

#[test]
fn parallelism_does_not_change_the_library() {
    let world = ToyWorld::with_classes(8);
    let gen = ToyGenerator::new(world.clone(), DEFAULT_TEXT_DIM).unwrap();
    let classes = class_images(&world, &[0, 1, 2], 3);
    let a = learn_all_tokens(&classes, &gen, &pinned(150), 1, FailurePolicy::FailFast).unwrap();
    let b = learn_all_tokens(&classes, &gen, &pinned(150), 3, FailurePolicy::FailFast).unwrap();
    assert_eq!(a.tokens, b.tokens);
    let bits: Vec<Vec<u32>> = a
        .tokens
        .iter()
        .map(|t| t.embedding.iter().map(|x| x.to_bits()).collect())
        .collect();
    let bits_b: Vec<Vec<u32>> = b
        .tokens
        .iter()
        .map(|t| t.embedding.iter().map(|x| x.to_bits()).collect())
        .collect();
    assert_eq!(bits, bits_b);
}

#[test]
fn empty_class_fails_alone_under_continue_policy() {
    let world = ToyWorld::with_classes(8);
    let gen = ToyGenerator::new(world.clone(), DEFAULT_TEXT_DIM).unwrap();
    let mut classes = class_images(&world, &[0, 1, 2], 2);
    classes[1].images.clear();
    let report = learn_all_tokens(&classes, &gen, &pinned(20), 2, FailurePolicy::ContinueAndReport).unwrap();
    assert_eq!(report.tokens.iter().map(|t| t.class_id).collect::<Vec<_>>(), vec![0, 2]);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].class_id, 1);
    assert!(learn_all_tokens(&classes, &gen, &pinned(20), 2, FailurePolicy::FailFast).is_err());
}

#[test]
fn eight_classes_round_trip_through_persistence() {
    let world = ToyWorld::with_classes(8);
    let gen = ToyGenerator::new(world.clone(), DEFAULT_TEXT_DIM).unwrap();
    let classes = class_images(&world, &(0..8).collect::<Vec<_>>(), 2);
    let report = learn_all_tokens(&classes, &gen, &pinned(200), 4, FailurePolicy::FailFast).unwrap();
    assert_eq!(report.tokens.len(), 8);
    let dir = tempfile::tempdir().unwrap();
    save_token_library(&report.tokens, dir.path()).unwrap();
    assert_eq!(load_token_library(dir.path()).unwrap(), report.tokens);
}

#[test]
fn steps_zero_returns_the_initialiser_exactly() {
    let world = ToyWorld::with_classes(8);
    let gen = ToyGenerator::new(world.clone(), DEFAULT_TEXT_DIM).unwrap();
    let classes = class_images(&world, &[4], 1);
    let report = learn_all_tokens(&classes, &gen, &pinned(0), 1, FailurePolicy::FailFast).unwrap();
    let init = gen.word_embedding("cyan").unwrap();
    assert_eq!(report.tokens[0].embedding, init);
}

#[test]
fn seed_schedule_and_determinism() {
    let (gen, tokens) = toy_setup(300);
    let registry = ShiftRegistry::default_registry();
    let req = GenerationRequest {
        class_id: 0,
        shift_name: "in_the_grass".into(),
        n: 25,
        base_seed: 100,
    };
    let a = generate_batch(&req, &registry, &tokens, &gen).unwrap();
    let seeds: Vec<u64> = a.iter().map(|s| s.sample.seed).collect();
    assert_eq!(seeds, (100..125).collect::<Vec<_>>());
    assert!(a
        .iter()
        .all(|s| s.sample.prompt == "A photo of a <class-0> in the grass"));
    assert!(a
        .iter()
        .all(|s| s.sample.sim_class.is_none() && s.sample.kept.is_none()));

    let one = GenerationRequest { n: 1, ..req };
    let x = generate_batch(&one, &registry, &tokens, &gen).unwrap();
    let y = generate_batch(&one, &registry, &tokens, &gen).unwrap();
    assert_eq!(x[0].sample, y[0].sample);
    assert_eq!(
        x[0].image.as_ref().unwrap().as_raw(),
        y[0].image.as_ref().unwrap().as_raw()
    );
}

#[test]
fn unregistered_token_and_unknown_shift_are_rejected() {
    let (_, tokens) = toy_setup(10);
    let fresh = ToyGenerator::new(ToyWorld::with_classes(8), DEFAULT_TEXT_DIM).unwrap();
    let registry = ShiftRegistry::default_registry();
    let req = GenerationRequest {
        class_id: 0,
        shift_name: "base".into(),
        n: 2,
        base_seed: 0,
    };
    assert!(matches!(
        generate_batch(&req, &registry, &tokens, &fresh),
        Err(Error::Backend(_))
    ));
    let bad = GenerationRequest {
        shift_name: "on_the_moon".into(),
        ..req
    };
    assert!(matches!(
        generate_batch(&bad, &registry, &tokens, &fresh),
        Err(Error::UnknownShift(_))
    ));
}

#[test]
fn snow_renders_red_centre_on_white_background() {
    let (gen, tokens) = toy_setup(3000);
    let registry = ShiftRegistry::default_registry();
    let req = GenerationRequest {
        class_id: 0,
        shift_name: "in_the_snow".into(),
        n: 3,
        base_seed: 0,
    };
    for s in generate_batch(&req, &registry, &tokens, &gen).unwrap() {
        let img = s.image.unwrap();
        let c = img.get_pixel(16, 16).0;
        assert!(c[0] > 200 && c[1] < 60 && c[2] < 60, "centre {c:?}");
        for (x, y) in [(0, 0), (31, 0), (0, 31), (31, 31), (2, 16)] {
            let p = img.get_pixel(x, y).0;
            assert!(p.iter().all(|&v| v >= 245), "corner {p:?}");
        }
    }
}

#[test]
fn scores_prefer_the_matching_colour_and_skip_base_shift_caption() {
    let world = ToyWorld::with_classes(8);
    let embedder = ToyEmbedder::new(&world);
    let registry = ShiftRegistry::default_registry();
    let mk = |class_id: u32, shift: &str| CounterfactualSample {
        sample_id: CounterfactualSample::sample_id_for(shift, class_id, 0),
        image_ref: String::new(),
        class_id,
        shift_name: shift.into(),
        seed: 0,
        prompt: String::new(),
        sim_class: None,
        sim_shift: None,
        kept: None,
        failure: None,
    };
    let samples = vec![mk(0, "base"), mk(2, "base")];
    let load = |s: &CounterfactualSample| world.dataset_image(s.class_id, 0);
    let base = registry.base().unwrap();
    let scored = score_batch(&samples, "red disk", base, &embedder, load).unwrap();
    assert!(scored[0].sim_class.unwrap() > scored[1].sim_class.unwrap());
    assert!(scored.iter().all(|s| s.sim_shift.is_none()));
    let again = score_batch(&samples, "red disk", base, &embedder, load).unwrap();
    assert_eq!(scored, again);

    let red = RgbImage::from_pixel(8, 8, Rgb([255, 0, 0]));
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let v = embedder.embed_image(&red).unwrap();
    assert!(cos(&v, &embedder.embed_text("red").unwrap()) > cos(&v, &embedder.embed_text("blue").unwrap()));

    let unreadable = score_batch(&samples[..1], "red disk", base, &embedder, |_| {
        Err(Error::invalid("image", "unreadable"))
    })
    .unwrap();
    assert!(unreadable[0].is_failed());
}

/// Encodes a score s in the red channel; text always embeds to e0, so cos = s.
struct ScoreEmbedder;

impl EmbeddingBackend for ScoreEmbedder {
    fn backend_id(&self) -> &str {
        "score-stub"
    }
    fn dim(&self) -> usize {
        2
    }
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let s = image.get_pixel(0, 0).0[0] as f64 / 100.0;
        Ok(vec![s, (1.0 - s * s).sqrt()])
    }
    fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
        Ok(vec![1.0, 0.0])
    }
}

#[test]
fn class_threshold_composes_score_and_percentile() {
    // scores 0.10, 0.15, ..., 0.55 presented out of order
    let refs: Vec<RgbImage> = [55u8, 10, 40, 25, 15, 50, 20, 35, 45, 30]
        .iter()
        .map(|&v| RgbImage::from_pixel(2, 2, Rgb([v, 0, 0])))
        .collect();
    let tau = calibrate_class_threshold(7, &refs, "thing", &ScoreEmbedder, 20.0).unwrap();
    assert!((tau.value - 0.15).abs() < 1e-12);
    assert_eq!((tau.class_id, tau.n_reference, tau.percentile), (7, 10, 20.0));

    let same = vec![RgbImage::from_pixel(2, 2, Rgb([33, 0, 0])); 4];
    assert_eq!(
        calibrate_class_threshold(0, &same, "x", &ScoreEmbedder, 20.0)
            .unwrap()
            .value,
        0.33
    );
    let four: Vec<RgbImage> = [40u8, 10, 30, 20]
        .iter()
        .map(|&v| RgbImage::from_pixel(1, 1, Rgb([v, 0, 0])))
        .collect();
    assert_eq!(
        calibrate_class_threshold(0, &four, "x", &ScoreEmbedder, 50.0)
            .unwrap()
            .value,
        0.2
    );
    assert!(calibrate_class_threshold(0, &[], "x", &ScoreEmbedder, 20.0).is_err());
}

fn scored_shift(sims: &[f64]) -> Vec<CounterfactualSample> {
    sims.iter()
        .enumerate()
        .map(|(i, &s)| CounterfactualSample {
            sample_id: CounterfactualSample::sample_id_for("in_the_grass", 0, i as u64),
            image_ref: String::new(),
            class_id: 0,
            shift_name: "in_the_grass".into(),
            seed: i as u64,
            prompt: String::new(),
            sim_class: Some(0.5),
            sim_shift: Some(s),
            kept: None,
            failure: None,
        })
        .collect()
}

#[test]
fn scripted_inspector_calibration() {
    let registry = ShiftRegistry::default_registry();
    let spec = registry.get("in_the_grass").unwrap();
    let sims: Vec<f64> = (0..40).map(|i| ((i * 37) % 40) as f64 / 100.0).collect();
    let samples = scored_shift(&sims);
    let grid = [20.0, 40.0, 60.0, 80.0];

    let mut from40 = ScriptedInspector::accepting_from(40.0);
    let cal = calibrate_shift_threshold(spec, &samples, &grid, 5, &mut from40).unwrap();
    assert_eq!(cal.percentile, 40.0);
    assert_eq!(cal.threshold, nearest_rank_percentile(&sims, 40.0).unwrap());
    assert_eq!(cal.verdicts.len(), 2);
    assert!(cal.verdicts.iter().all(|v| v.sample_ids.len() == 5));

    let mut always = ScriptedInspector::accepting_from(0.0);
    let cal = calibrate_shift_threshold(spec, &samples, &grid, 5, &mut always).unwrap();
    assert_eq!(cal.threshold, nearest_rank_percentile(&sims, 20.0).unwrap());

    let mut never = ScriptedInspector::accepting_from(f64::INFINITY);
    match calibrate_shift_threshold(spec, &samples, &grid, 5, &mut never) {
        Err(Error::Uncalibratable { verdicts, .. }) => assert_eq!(verdicts.len(), 4),
        other => panic!("expected uncalibratable, got {other:?}"),
    }
}

#[test]
fn filter_examples() {
    let registry = ShiftRegistry::default_registry();
    let spec = registry.get("in_the_grass").unwrap();
    let mut sims = vec![0.2; 10];
    sims[1] = 0.1;
    sims[4] = 0.126;
    sims[8] = 0.0;
    let samples = scored_shift(&sims);
    let tau = ClassThreshold {
        class_id: 0,
        value: 0.3,
        percentile: 20.0,
        n_reference: 10,
    };
    let out = filter_batch(&samples, &tau, spec).unwrap();
    assert_eq!(out.yield_stats.yield_fraction, Some(0.7));

    let mut vacuous = spec.clone();
    vacuous.shift_threshold = Some(-1.0);
    let mut with_failure = samples.clone();
    with_failure[0].failure = Some("backend".into());
    with_failure[0].sim_class = None;
    let all = filter_batch(
        &with_failure,
        &ClassThreshold {
            value: -1.0,
            ..tau.clone()
        },
        &vacuous,
    )
    .unwrap();
    assert_eq!((all.yield_stats.kept, all.yield_stats.total), (9, 10));

    vacuous.shift_threshold = Some(0.21);
    assert_eq!(filter_batch(&samples, &tau, &vacuous).unwrap().kept.len(), 0);
}

#[test]
fn toy_backends_pass_conformance() {
    let (gen, tokens) = toy_setup(50);
    let prompt = format!("A photo of a {} in the snow", tokens[0].token_string);
    let probes: Vec<Vec<f64>> = (0..5).map(|i| vec![0.1 * i as f64; DEFAULT_TEXT_DIM]).collect();
    let r = check_generative(
        &gen,
        &[prompt.as_str(), "a photo of a red disk"],
        "a photo of a {token} at night",
        &probes,
    );
    assert!(r.passed(), "{:?}", r.failures);
    let world = gen.world().clone();
    let images: Vec<RgbImage> = (0..4).map(|c| world.dataset_image(c, 0).unwrap()).collect();
    let r = check_embedding(
        &ToyEmbedder::new(&world),
        &images,
        &["a photo of a plate", "", "zzz qqq", "a photo in the grass"],
    );
    assert!(r.passed(), "{:?}", r.failures);
}

#[test]
fn sample_store_round_trip() {
    let (gen, tokens) = toy_setup(20);
    let registry = ShiftRegistry::default_registry();
    let req = GenerationRequest {
        class_id: 2,
        shift_name: "at_night".into(),
        n: 3,
        base_seed: 0,
    };
    let batch = generate_batch(&req, &registry, &tokens, &gen).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = SampleStore::new(dir.path());
    store.write(&batch).unwrap();
    store.write(&batch).unwrap();
    let listed = store.list().unwrap();
    assert_eq!(listed.len(), 3);
    for (s, g) in listed.iter().zip(&batch) {
        assert_eq!(s, &g.sample);
        assert_eq!(
            store.read_image(s).unwrap().as_raw(),
            g.image.as_ref().unwrap().as_raw()
        );
    }
}

fn eval(model: &str, shift: &str, base: f64, acc: f64) -> ModelEvaluation {
    ModelEvaluation {
        model_id: model.into(),
        shift_name: shift.into(),
        eligible_classes: [0u32, 1].into_iter().collect(),
        per_class_accuracy: BTreeMap::new(),
        shift_accuracy: acc,
        base_accuracy_same_classes: base,
        drop: base - acc,
    }
}

#[test]
fn collinear_and_single_model_reports() {
    let evals = vec![
        eval("a", "s", 0.25, 0.125),
        eval("b", "s", 0.5, 0.25),
        eval("c", "s", 0.75, 0.375),
    ];
    let r = build_shift_report("s", &evals).unwrap();
    assert_eq!(r.summary.id_ood_slope, Some(0.5));
    assert_eq!(r.summary.intercept, Some(0.0));
    let one = build_shift_report("s", &evals[..1]).unwrap();
    assert_eq!(one.summary.absolute_impact, 0.125);
    assert!(one.summary.id_ood_slope.is_none() && one.summary.slope_undefined_reason.is_some());
}

#[test]
fn six_model_fixture_matches_hand_computation() {
    // base x = 0.5..1.0 by 0.1, shift y = 0.4, 0.45, 0.65, 0.6, 0.8, 0.85
    let xs = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    let ys = [0.4, 0.45, 0.65, 0.6, 0.8, 0.85];
    let evals: Vec<_> = xs
        .iter()
        .zip(&ys)
        .enumerate()
        .map(|(i, (&x, &y))| eval(&format!("m{i}"), "s", x, y))
        .collect();
    let r = build_shift_report("s", &evals).unwrap();
    // mean x 0.75, mean y 0.625; Sxx 0.175, Sxy 0.1625 -> slope 13/14
    let slope = 13.0 / 14.0;
    assert!((r.summary.id_ood_slope.unwrap() - slope).abs() < 1e-12);
    assert!((r.summary.intercept.unwrap() - (0.625 - 0.75 * slope)).abs() < 1e-12);
    // drops 0.1, 0.15, 0.05, 0.2, 0.1, 0.15 -> mean 0.125
    assert!((r.summary.absolute_impact - 0.125).abs() < 1e-12);
    assert_eq!((r.summary.n_models, r.summary.n_eligible_classes), (6, 2));
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv.clone())
        .unwrap()
        .starts_with("model_id,base_acc,shift_acc,drop\n"));
    assert_eq!(read_report_rows(csv.as_slice()).unwrap(), r.rows);
}

#[test]
fn evaluation_examples() {
    let mut index = SampleIndex::default();
    let mut shift = vec![];
    let mut base = vec![];
    // class 0: shift 3/5, base 9/10; class 1: shift 4/5, base 9/10; class 2: 4 samples only
    for (class, n, correct) in [(0u32, 5, 3), (1, 5, 4), (2, 4, 4)] {
        for i in 0..n {
            let id = format!("shift-{class}-{i}");
            index.insert(id.clone(), class, true);
            shift.push(Prediction {
                sample_id: id,
                class_id: class,
                predicted_class_id: if i < correct { class } else { 99 },
            });
        }
    }
    for class in 0..3u32 {
        for i in 0..10 {
            let id = format!("base-{class}-{i}");
            index.insert(id.clone(), class, true);
            base.push(Prediction {
                sample_id: id,
                class_id: class,
                predicted_class_id: if i < 9 { class } else { 99 },
            });
        }
    }
    let s = PredictionSet {
        model_id: "m".into(),
        entries: shift,
    };
    let b = PredictionSet {
        model_id: "m".into(),
        entries: base,
    };
    let e = evaluate_model(
        "in_the_grass",
        EvaluationInput {
            predictions: &s,
            index: &index,
        },
        EvaluationInput {
            predictions: &b,
            index: &index,
        },
        5,
    )
    .unwrap();
    assert_eq!(e.eligible_classes.iter().copied().collect::<Vec<_>>(), vec![0, 1]);
    assert!((e.shift_accuracy - 0.7).abs() < 1e-12);
    assert!((e.base_accuracy_same_classes - 0.9).abs() < 1e-12);
    assert!((e.drop - 0.2).abs() < 1e-12);
}
