use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use proptest::prelude::*;
use shiftkit::evaluation::{evaluate_model, id_ood_slope, EvaluationInput, Prediction, PredictionSet, SampleIndex};
use shiftkit::filtering::{filter_batch, nearest_rank_percentile, similarity_cdf, FilterDecision};
use shiftkit::generation::render_prompt;
use shiftkit::library::{load_token_library, save_token_library};
use shiftkit::registry::ShiftRegistry;
use shiftkit::{ClassThreshold, ClassToken, CounterfactualSample, Provenance, TOKEN_PLACEHOLDER};

fn scored(i: usize, sim_class: f64, sim_shift: f64) -> CounterfactualSample {
    CounterfactualSample {
        sample_id: format!("in_the_grass__c0__s{i}"),
        image_ref: format!("{i}.png"),
        class_id: 0,
        shift_name: "in_the_grass".into(),
        seed: i as u64,
        prompt: "A photo of a <class-0> in the grass".into(),
        sim_class: Some(sim_class),
        sim_shift: Some(sim_shift),
        kept: None,
        failure: None,
    }
}

fn token_strategy(class_id: u32) -> impl Strategy<Value = ClassToken> {
    (
        prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 16),
        "[a-z ]{1,12}",
        0u64..10_000,
        1e-6f64..1.0,
        any::<u64>(),
        0i64..4_000_000_000,
        0u32..1_000_000_000,
    )
        .prop_map(move |(embedding, label, steps, lr, seed, secs, nanos)| ClassToken {
            class_id,
            class_label: label,
            token_string: ClassToken::token_string_for("prop", class_id),
            embedding,
            provenance: Provenance {
                steps,
                learning_rate: lr,
                seed,
                backend_id: "toy-generator-v1".into(),
                created_at: DateTime::<Utc>::from_timestamp(secs, nanos).unwrap(),
            },
        })
}

proptest! {
    #[test]
    fn percentile_returns_a_member(values in prop::collection::vec(-1.0f64..1.0, 1..200), p in 0.01f64..100.0) {
        let v = nearest_rank_percentile(&values, p).unwrap();
        prop_assert!(values.contains(&v));
    }

    #[test]
    fn cdf_is_monotone_and_reaches_one(scores in prop::collection::vec(-1.0f64..1.0, 1..100),
                                       mut grid in prop::collection::vec(-1.5f64..1.5, 1..30)) {
        grid.sort_by(f64::total_cmp);
        grid.push(1.0);
        let cdf = similarity_cdf(&scores, &grid).unwrap();
        prop_assert!(cdf.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert_eq!(cdf.last().unwrap().1, 1.0);
    }

    #[test]
    fn raising_thresholds_never_grows_kept_set(
        sims in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..60),
        tau_c in -1.0f64..1.0, tau_s in -1.0f64..1.0, dc in 0.0f64..0.5, ds in 0.0f64..0.5,
    ) {
        let samples: Vec<_> = sims.iter().enumerate().map(|(i, &(c, s))| scored(i, c, s)).collect();
        let mut spec = ShiftRegistry::default_registry().get("in_the_grass").unwrap().clone();
        let run = |tc: f64, ts: f64, spec: &mut shiftkit::ShiftSpec| {
            spec.shift_threshold = Some(ts.min(1.0));
            let tau = ClassThreshold { class_id: 0, value: tc, percentile: 20.0, n_reference: 1 };
            filter_batch(&samples, &tau, spec).unwrap()
        };
        let low = run(tau_c, tau_s, &mut spec);
        let high = run(tau_c + dc, tau_s + ds, &mut spec);
        let low_ids: std::collections::HashSet<_> = low.kept.iter().map(|s| &s.sample_id).collect();
        prop_assert!(high.kept.iter().all(|s| low_ids.contains(&s.sample_id)));
        // decisions are a pure function of scores and thresholds
        for d in &low.decisions {
            let again = FilterDecision::decide(&d.sample_id, d.sim_class, d.sim_shift, d.tau_class, d.tau_shift).unwrap();
            prop_assert_eq!(&again, d);
        }
    }

    #[test]
    fn slope_translation_and_scaling(
        pts in prop::collection::vec((0u32..64, 0u32..64), 2..20),
        shift in 0u32..32, scale_pow in 0i32..4,
    ) {
        // dyadic coordinates keep every operation exact
        let points: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x as f64 / 64.0, y as f64 / 64.0)).collect();
        prop_assume!(points.iter().any(|p| p.0 != points[0].0));
        let fit = id_ood_slope(&points).unwrap();
        let c = shift as f64 / 64.0;
        let moved: Vec<_> = points.iter().map(|&(x, y)| (x + c, y)).collect();
        prop_assert!((id_ood_slope(&moved).unwrap().slope - fit.slope).abs() <= 1e-12 * fit.slope.abs().max(1.0));
        let k = 2f64.powi(scale_pow);
        let scaled: Vec<_> = points.iter().map(|&(x, y)| (x * k, y)).collect();
        prop_assert_eq!(id_ood_slope(&scaled).unwrap().slope, fit.slope / k);
    }

    #[test]
    fn token_library_round_trip_is_bit_exact(tokens in (1usize..6).prop_flat_map(|n| {
        (0..n as u32).map(token_strategy).collect::<Vec<_>>()
    })) {
        let dir = tempfile::tempdir().unwrap();
        save_token_library(&tokens, dir.path()).unwrap();
        let loaded = load_token_library(dir.path()).unwrap();
        prop_assert_eq!(loaded.len(), tokens.len());
        for (a, b) in loaded.iter().zip(&tokens) {
            prop_assert_eq!(&a.class_label, &b.class_label);
            prop_assert_eq!(&a.provenance, &b.provenance);
            let bits = |t: &ClassToken| t.embedding.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn prompt_fidelity(class_id in 0u32..100_000) {
        let token = ClassToken {
            class_id,
            class_label: "x".into(),
            token_string: ClassToken::token_string_for("imagenet", class_id),
            embedding: vec![],
            provenance: Provenance {
                steps: 0, learning_rate: 1.0, seed: 0, backend_id: "b".into(),
                created_at: DateTime::<Utc>::from_timestamp(0, 0).unwrap(),
            },
        };
        for spec in ShiftRegistry::default_registry().specs() {
            let prompt = render_prompt(spec, &token).unwrap();
            prop_assert_eq!(prompt.replace(&token.token_string, TOKEN_PLACEHOLDER), spec.prompt_template.clone());
        }
    }

    #[test]
    fn evaluation_is_permutation_invariant(
        rows in prop::collection::vec((0u32..4, 0u32..4), 10..50),
        perm_seed in any::<u64>(),
    ) {
        let entries: Vec<Prediction> = rows.iter().enumerate().map(|(i, &(c, p))| Prediction {
            sample_id: format!("s{i}"), class_id: c, predicted_class_id: p,
        }).collect();
        let mut index = SampleIndex::default();
        for e in &entries {
            index.insert(e.sample_id.clone(), e.class_id, true);
        }
        let set = PredictionSet { model_id: "m".into(), entries: entries.clone() };
        let mut shuffled = entries;
        let mut state = perm_seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let shuffled = PredictionSet { model_id: "m".into(), entries: shuffled };
        let input = |p| EvaluationInput { predictions: p, index: &index };
        let a = evaluate_model("s", input(&set), input(&set), 1);
        let b = evaluate_model("s", input(&shuffled), input(&shuffled), 1);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a, &b);
                // identical shift and base predictions give zero drop
                prop_assert_eq!(a.drop, 0.0);
                prop_assert!(a.per_class_accuracy.values().all(|v| (0.0..=1.0).contains(v)));
            }
            (a, b) => prop_assert_eq!(format!("{a:?}"), format!("{b:?}")),
        }
    }
}

#[test]
fn registry_json_round_trip_preserves_every_entry() {
    let reg = ShiftRegistry::default_registry();
    let again = ShiftRegistry::from_json(&reg.to_json().unwrap()).unwrap();
    let names: BTreeMap<_, _> = again.specs().iter().map(|s| (s.name.clone(), s.clone())).collect();
    assert_eq!(names.len(), 24);
    assert_eq!(again, reg);
}
