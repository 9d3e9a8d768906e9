mod common;

use common::*;
use gatefuse::fusion::{ControlSharing, Variant};
use gatefuse::model::{HeadKind, Model};

fn check(variant: &str, head: HeadKind, seed: u64) {
    let task = small_task();
    let mut model = model_for(&task, 8, 2, variant.parse::<Variant>().unwrap(), head, seed);
    jitter(&mut model, &mut rng(seed + 50), 0.2);
    for ep in episodes(&task, 2, seed) {
        let r = gradcheck(&model, &ep);
        assert!(r.max_rel_err < 1e-5, "{variant} seed {seed}: {:.3e} at {}", r.max_rel_err, r.worst);
    }
}

#[test]
fn every_variant_matches_central_differences() {
    for name in Variant::LADDER.iter().chain(Variant::GATE_FORMS.iter()) {
        for seed in 1..=2 {
            check(name, HeadKind::Classification, seed);
        }
    }
}

#[test]
fn decoder_head_matches_central_differences() {
    check("full", HeadKind::Decoder, 3);
}

#[test]
fn per_modality_control_tokens_match_central_differences() {
    let task = small_task();
    let mut config = model_for(&task, 8, 2, "full".parse().unwrap(), HeadKind::Classification, 4).config;
    config.fusion.control_sharing = ControlSharing::PerModality;
    config.fusion.n_control_tokens = 2;
    let mut model = Model::new(config, 4).unwrap();
    jitter(&mut model, &mut rng(9), 0.2);
    let ep = &episodes(&task, 1, 4)[0];
    let r = gradcheck(&model, ep);
    assert!(r.max_rel_err < 1e-5, "{:.3e} at {}", r.max_rel_err, r.worst);
}
