#![allow(dead_code)]

use gatefuse::fusion::{FusionConfig, FusionParams, FusionSample, Variant};
use gatefuse::model::{loss, HeadKind, Model, ModelConfig};
use gatefuse::numerics::{ParamStore, Tensor};
use gatefuse::synth::{class_directions, generate_episode, Episode, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Fusion block with random weights for `dims.len()` streams.
pub fn fusion_block(
    rng: &mut ChaCha8Rng,
    d: usize,
    n_heads: usize,
    dims: Vec<usize>,
    variant: Variant,
) -> (ParamStore, FusionParams, FusionConfig) {
    let config = FusionConfig::new(d, n_heads, dims).with_variant(variant);
    let mut store = ParamStore::new();
    let params = FusionParams::register(&mut store, &config, "fusion.", rng).unwrap();
    // Move off the initialisation so no gate sits at a special value.
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    (store, params, config)
}

/// Random sample with `tokens[k]` rows for stream `k + 1`.
pub fn fusion_sample(rng: &mut ChaCha8Rng, config: &FusionConfig, instruction_len: usize, tokens: &[usize]) -> FusionSample {
    let features = tokens
        .iter()
        .enumerate()
        .map(|(k, &t)| (k + 1, random(rng, t, config.modality_dims[k], 1.0)))
        .collect();
    FusionSample::new(random(rng, instruction_len, config.d, 1.0), features)
}

pub fn small_task() -> TaskSpec {
    TaskSpec {
        modality_dims: vec![5, 3],
        tokens_min: 1,
        tokens_max: 3,
        ..TaskSpec::default()
    }
}

pub fn model_for(task: &TaskSpec, d: usize, n_heads: usize, variant: Variant, head: HeadKind, seed: u64) -> Model {
    let config = ModelConfig {
        fusion: FusionConfig::new(d, n_heads, task.modality_dims.clone()).with_variant(variant),
        instruction_vocab: task.instruction_vocab(),
        n_answers: task.n_answers,
        head,
    };
    Model::new(config, seed).unwrap()
}

pub fn episodes(task: &TaskSpec, n: usize, seed: u64) -> Vec<Episode> {
    let dirs = class_directions(task, seed);
    let mut r = rng(seed ^ 0xABCD);
    (0..n).map(|_| generate_episode(task, &dirs, &mut r)).collect()
}

/// Step of the fourth-order central difference.
pub const FD_STEP: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Compare `loss_and_gradients` against central differences on every
/// parameter element of `model`.
pub fn gradcheck(model: &Model, episode: &Episode) -> GradCheck {
    let (_, grads, _) = model.loss_and_gradients(episode).unwrap();
    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let ids: Vec<_> = model.store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..model.store.get(id).numel() {
            let base = model.store.get(id).data()[j];
            let mut at = |offset: f64| {
                probe.store.get_mut(id).data_mut()[j] = base + offset * FD_STEP;
                loss_of(&probe, episode)
            };
            let numeric = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * FD_STEP);
            probe.store.get_mut(id).data_mut()[j] = base;
            let analytic = grads[pi].data()[j];
            let e = rel_err(analytic, numeric);
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst = format!("{}[{j}] analytic {analytic:e} numeric {numeric:e}", model.store.name(id));
            }
            out.checked += 1;
        }
    }
    out
}

pub fn loss_of(model: &Model, episode: &Episode) -> f64 {
    let (logits, _) = model.forward(episode).unwrap();
    loss(&logits, &Model::targets(episode)).unwrap()
}

/// Shift every parameter by a small random amount.
pub fn jitter(model: &mut Model, rng: &mut ChaCha8Rng, scale: f64) {
    for t in model.store.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

mod oracles;
mod properties;

#[allow(unused_imports)]
pub use oracles::*;
#[allow(unused_imports)]
pub use properties::*;
