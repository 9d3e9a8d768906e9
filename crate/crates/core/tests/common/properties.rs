//! Property checks shared by the fusion tests and the acceptance suite.

use super::*;

use gatefuse::fusion::{fusion_forward, fusion_forward_batch};
use gatefuse::gating::{inner_modality_weights, modality_coefficients};
use std::collections::BTreeMap;

pub const GATED_FORMS: [&str; 5] = ["full", "no-residual", "flamingo-tanh", "mlp-score", "cross-attn-score"];

/// Random block and sample: d ∈ {8,16}, heads ∈ {1,2,4}, 1-4 streams of 1-8 tokens.
pub fn random_case(seed: u64, variant: &str) -> (ParamStore, FusionParams, FusionConfig, FusionSample) {
    let mut r = rng(seed);
    let d = [8, 16][r.random_range(0..2)];
    let heads = [1, 2, 4][r.random_range(0..3)];
    let n = r.random_range(1..=4);
    let dims: Vec<usize> = (0..n).map(|_| r.random_range(2..=6)).collect();
    let tokens: Vec<usize> = (0..n).map(|_| r.random_range(1..=8)).collect();
    let (store, params, config) = fusion_block(&mut r, d, heads, dims, variant.parse().unwrap());
    let instruction_len = r.random_range(1..=4);
    let sample = fusion_sample(&mut r, &config, instruction_len, &tokens);
    (store, params, config, sample)
}

pub fn check_normalization(seed: u64) -> Result<(), String> {
    let variant = GATED_FORMS[(seed % GATED_FORMS.len() as u64) as usize];
    let (store, params, config, sample) = random_case(seed, variant);
    let (_, report) = fusion_forward(&sample, &store, &params, &config).map_err(|e| e.to_string())?;
    let report = report.ok_or("no gate report")?;
    for (m, w) in &report.w {
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(format!("seed {seed} {variant}: sum w_{m} = {s}"));
        }
    }
    let s: f64 = report.beta.values().sum();
    if (s - 1.0).abs() > 1e-9 || report.beta.len() != sample.features.len() {
        return Err(format!("seed {seed} {variant}: sum beta = {s}"));
    }
    Ok(())
}

/// One-head `[1 × L × L]` map whose only instruction row (0) is `mass`.
pub fn attention_with_row(mass: &[f64]) -> Tensor {
    let l = mass.len();
    let mut data = vec![0.0; l * l];
    data[..l].copy_from_slice(mass);
    Tensor::new(vec![1, l, l], data).unwrap()
}

/// Both fallbacks switch exactly at their thresholds.
pub fn check_fallback_boundaries() -> Result<(), String> {
    let eps = 1e-6;
    let below = eps - f64::EPSILON * eps;
    // Inner level: one content token carrying the whole mass, then split over two.
    for (mass, expect) in [
        (vec![0.0, eps], false),
        (vec![0.0, below], true),
        (vec![0.0, eps / 2.0, eps / 2.0], false),
        (vec![0.0, below / 2.0, below / 2.0], true),
    ] {
        let content: Vec<usize> = (1..mass.len()).collect();
        let got = inner_modality_weights(&attention_with_row(&mass), &[0], &content, eps).map_err(|e| e.to_string())?;
        if got.fallback != expect {
            return Err(format!("inner fallback at mass {mass:?}: got {}", got.fallback));
        }
        let uniform = 1.0 / content.len() as f64;
        if expect && got.w.iter().any(|&w| w != uniform) {
            return Err("inner fallback is not uniform".into());
        }
    }
    for (mass, expect) in [(vec![1.0, eps / 2.0, eps / 2.0], false), (vec![1.0, below / 2.0, below / 2.0], true)] {
        let controls: BTreeMap<usize, std::ops::Range<usize>> = [(1, 1..2), (2, 2..3)].into();
        let got = modality_coefficients(&attention_with_row(&mass), &[0], &controls, eps).map_err(|e| e.to_string())?;
        if got.fallback != expect {
            return Err(format!("stream fallback at mass {mass:?}: got {}", got.fallback));
        }
        if expect && got.beta.values().any(|&b| b != 0.5) {
            return Err("stream fallback is not 1/N".into());
        }
    }
    Ok(())
}

/// Instruction, prompt and placeholder rows come back bit-identical.
pub fn check_restoration(seed: u64) -> Result<(), String> {
    let variant = GATED_FORMS[(seed % GATED_FORMS.len() as u64) as usize];
    let (store, params, config, mut sample) = random_case(seed, variant);
    let mut r = rng(seed ^ 0x5555);
    let prompt_len = r.random_range(0..=2);
    if prompt_len > 0 {
        sample.prompt = Some(random(&mut r, prompt_len, config.d, 1.0));
    }
    sample.placeholders = vec![(config.n_modalities() + 1, r.random_range(0..=3))];
    let (seq, _) = fusion_forward(&sample, &store, &params, &config).map_err(|e| e.to_string())?;
    let layout = &seq.layout;
    let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    for (k, i) in layout.instruction_span.clone().enumerate() {
        if !same(seq.embeddings.row(i), sample.instruction.row(k)) {
            return Err(format!("seed {seed}: instruction row {k} changed"));
        }
    }
    if let Some(p) = &sample.prompt {
        for i in layout.prompt_span.clone() {
            if !same(seq.embeddings.row(i), p.row(i)) {
                return Err(format!("seed {seed}: prompt row {i} changed"));
            }
        }
    }
    let tail_start = seq.len() - sample.placeholders[0].1;
    for i in tail_start..seq.len() {
        if seq.embeddings.row(i).iter().any(|v| v.to_bits() != 0) {
            return Err(format!("seed {seed}: padding row {i} changed"));
        }
    }
    Ok(())
}

/// Changing the masked rows' values, or the amount of batch padding, leaves
/// every other output row bit-identical.
pub fn check_padding_neutrality(seed: u64) -> Result<(), String> {
    let variant = GATED_FORMS[(seed % GATED_FORMS.len() as u64) as usize];
    let (store, params, config, mut sample) = random_case(seed, variant);
    let mut r = rng(seed ^ 0x7777);
    sample.prompt = Some(random(&mut r, 2, config.d, 1.0));
    let (a, _) = fusion_forward(&sample, &store, &params, &config).map_err(|e| e.to_string())?;
    let mut perturbed = sample.clone();
    perturbed.prompt = Some(random(&mut r, 2, config.d, 100.0));
    let (b, _) = fusion_forward(&perturbed, &store, &params, &config).map_err(|e| e.to_string())?;
    for i in 2..a.len() {
        if a.embeddings.row(i).iter().zip(b.embeddings.row(i)).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("seed {seed}: row {i} moved when masked rows changed"));
        }
    }
    // Padded in a batch next to a longer sample.
    let mut long = sample.clone();
    long.placeholders = vec![(config.n_modalities() + 1, 9)];
    let batch = fusion_forward_batch(&[sample.clone(), long], &store, &params, &config).map_err(|e| e.to_string())?;
    if batch[0].0.embeddings != a.embeddings {
        return Err(format!("seed {seed}: batch padding changed the output"));
    }
    Ok(())
}

/// Dropping stream `k` from a sample equals a block built without it.
pub fn check_missing_modality(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let n = r.random_range(2..=4);
    let dims: Vec<usize> = (0..n).map(|_| r.random_range(2..=6)).collect();
    let tokens: Vec<usize> = (0..n).map(|_| r.random_range(1..=8)).collect();
    let d = [8, 16][r.random_range(0..2)];
    let heads = [1, 2, 4][r.random_range(0..3)];
    let (store, params, config) = fusion_block(&mut r, d, heads, dims.clone(), "full".parse().unwrap());
    let instruction_len = r.random_range(1..=4);
    let sample = fusion_sample(&mut r, &config, instruction_len, &tokens);
    let drop = r.random_range(1..=n);

    let mut dropped = sample.clone();
    dropped.features.retain(|(id, _)| *id != drop);
    let (with_gap, report_gap) = fusion_forward(&dropped, &store, &params, &config).map_err(|e| e.to_string())?;

    // Same weights, stream `drop` removed from the configuration and ids shifted down.
    let mut small_dims = dims.clone();
    small_dims.remove(drop - 1);
    let small_config = FusionConfig {
        modality_dims: small_dims,
        ..config.clone()
    };
    let mut small_store = ParamStore::new();
    let small_params = FusionParams::register(&mut small_store, &small_config, "fusion.", &mut rng(0)).map_err(|e| e.to_string())?;
    let rename = |name: &str| -> String {
        for part in [".w", ".b"] {
            for k in 1..=n {
                if name == format!("fusion.projector.{k}{part}") {
                    let src = if k >= drop { k + 1 } else { k };
                    return format!("fusion.projector.{src}{part}");
                }
            }
        }
        name.to_string()
    };
    for id in small_store.ids().collect::<Vec<_>>() {
        let src = store.find(&rename(small_store.name(id))).ok_or("missing parameter")?;
        *small_store.get_mut(id) = store.get(src).clone();
    }
    let shift = |id: usize| if id > drop { id - 1 } else { id };
    let mut small_sample = dropped.clone();
    small_sample.features = dropped.features.iter().map(|(id, f)| (shift(*id), f.clone())).collect();
    let (built, report_built) =
        fusion_forward(&small_sample, &small_store, &small_params, &small_config).map_err(|e| e.to_string())?;

    if built.len() != with_gap.len() {
        return Err(format!("seed {seed}: lengths differ"));
    }
    for i in 0..built.len() {
        let diff = built.embeddings.row(i).iter().zip(with_gap.embeddings.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if diff > 1e-12 {
            return Err(format!("seed {seed}: row {i} differs by {diff:e}"));
        }
    }
    let (gap, built_r) = (report_gap.ok_or("no report")?, report_built.ok_or("no report")?);
    let total: f64 = gap.beta.values().sum();
    if gap.beta.contains_key(&drop) || (total - 1.0).abs() > 1e-9 {
        return Err(format!("seed {seed}: beta not renormalised over the available streams"));
    }
    for (&m, &b) in &gap.beta {
        if (built_r.beta[&shift(m)] - b).abs() > 1e-12 {
            return Err(format!("seed {seed}: beta_{m} differs"));
        }
    }
    Ok(())
}
