use gatefuse::synth::{
    generate_dataset, load_dataset, oracle_answer, save_dataset, RelevanceMode, SplitName, TaskSpec, FEATURES_FILE,
    MANIFEST_FILE,
};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = TaskSpec> {
    (1usize..=4, 1usize..=3, 0usize..=3, 2usize..=5, any::<bool>(), 0.0f64..0.2).prop_map(
        |(n, tmin, textra, answers, joint, noise)| {
            let relevance = if joint && n > 1 { RelevanceMode::Joint } else { RelevanceMode::Single };
            let queried = if relevance == RelevanceMode::Joint { 2 } else { 1 };
            TaskSpec {
                n_modalities: n,
                tokens_min: tmin,
                tokens_max: tmin + textra,
                modality_dims: (0..n).map(|k| 4 + k).collect(),
                n_answers: answers,
                instruction_min: queried,
                instruction_max: queried + 2,
                filler_vocab: 5,
                noise_std: noise,
                relevance,
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn episodes_respect_the_spec(spec in spec_strategy(), seed in any::<u64>()) {
        let ds = generate_dataset(&spec, 40, seed).unwrap();
        prop_assert_eq!(ds.episodes.len(), 40);
        for ep in &ds.episodes {
            prop_assert!(ep.answer < spec.n_answers);
            let want = if spec.relevance == RelevanceMode::Joint { 2 } else { 1 };
            prop_assert_eq!(ep.informative.len(), want);
            let len = ep.instruction_ids.len();
            prop_assert!(len >= spec.instruction_min && len <= spec.instruction_max);
            prop_assert!(ep.instruction_ids.iter().all(|&t| t < spec.instruction_vocab()));
            for &m in &ep.informative {
                prop_assert!(ep.instruction_ids.contains(&(m - 1)));
            }
            prop_assert_eq!(ep.features.len(), spec.n_modalities);
            for (&m, f) in &ep.features {
                prop_assert_eq!(f.cols(), spec.modality_dims[m - 1]);
                prop_assert!(f.rows() >= spec.tokens_min && f.rows() <= spec.tokens_max);
                // Values are exactly representable in the f32 payload.
                prop_assert!(f.data().iter().all(|&v| v as f32 as f64 == v));
            }
        }
    }

    #[test]
    fn noiseless_answers_match_the_oracle(spec in spec_strategy(), seed in any::<u64>()) {
        let spec = TaskSpec { noise_std: 0.0, ..spec };
        let ds = generate_dataset(&spec, 30, seed).unwrap();
        for ep in &ds.episodes {
            prop_assert_eq!(oracle_answer(ep, &ds.directions, spec.n_answers), ep.answer);
        }
    }
}

#[test]
fn default_noise_keeps_the_oracle_near_perfect() {
    let spec = TaskSpec::default();
    let ds = generate_dataset(&spec, 2000, 11).unwrap();
    let hits = ds
        .episodes
        .iter()
        .filter(|e| oracle_answer(e, &ds.directions, spec.n_answers) == e.answer)
        .count();
    assert!(hits as f64 / 2000.0 > 0.99, "{hits}");
}

#[test]
fn save_is_byte_identical_and_round_trips() {
    let spec = TaskSpec {
        n_modalities: 3,
        modality_dims: vec![4, 6, 5],
        ..TaskSpec::default()
    };
    let ds = generate_dataset(&spec, 1000, 7).unwrap();
    assert_eq!(
        (ds.get(SplitName::Train).len(), ds.val().len(), ds.test().len()),
        (800, 100, 100)
    );
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&ds, a.path()).unwrap();
    save_dataset(&generate_dataset(&spec, 1000, 7).unwrap(), b.path()).unwrap();
    for f in [MANIFEST_FILE, FEATURES_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let back = load_dataset(a.path()).unwrap();
    assert_eq!(back.episodes, ds.episodes);
    assert_eq!(back.directions, ds.directions);
    assert_eq!(back.spec, ds.spec);
}

#[test]
fn different_seeds_differ() {
    let spec = TaskSpec::default();
    let a = generate_dataset(&spec, 20, 1).unwrap();
    let b = generate_dataset(&spec, 20, 2).unwrap();
    assert_ne!(a.episodes, b.episodes);
}
