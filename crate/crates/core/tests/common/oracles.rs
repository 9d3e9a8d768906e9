//! Independent reference computations.

use gatefuse::attention::{self_attention, AttentionParams};
use gatefuse::numerics::Tensor;
use gatefuse::sequence::AttentionMask;
use gatefuse::trainer::{alpha_probabilities, alpha_sample};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{random, rng};

/// Rotate consecutive pairs as complex numbers: `(x0 + i x1) · e^{i p θ_k}`.
fn rotate(row: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = row.len();
    let mut out = vec![0.0; d];
    for k in 0..d / 2 {
        let theta = pos as f64 * base.powf(-2.0 * k as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        let (re, im) = (row[2 * k], row[2 * k + 1]);
        out[2 * k] = re * c - im * s;
        out[2 * k + 1] = re * s + im * c;
    }
    out
}

fn times(h: &Tensor, w: &Tensor, i: usize) -> Vec<f64> {
    (0..w.cols()).map(|j| (0..h.cols()).map(|k| h.at(i, k) * w.at(k, j)).sum()).collect()
}

/// Direct single-head evaluation: scores, softmax over visible keys, values.
pub fn attention_oracle(h: &Tensor, visible: &[bool], p: &AttentionParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let l = h.rows();
    let d = h.cols();
    let q: Vec<Vec<f64>> = (0..l).map(|i| rotate(&times(h, &p.w_q, i), i, p.rope_base)).collect();
    let k: Vec<Vec<f64>> = (0..l).map(|i| rotate(&times(h, &p.w_k, i), i, p.rope_base)).collect();
    let v: Vec<Vec<f64>> = (0..l).map(|i| times(h, &p.w_v, i)).collect();
    let mut attn = vec![vec![0.0; l]; l];
    let mut out = vec![vec![0.0; d]; l];
    for i in 0..l {
        let scores: Vec<f64> = (0..l)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = (0..l).filter(|&j| visible[j]).map(|j| scores[j]).fold(f64::MIN, f64::max);
        let z: f64 = (0..l).filter(|&j| visible[j]).map(|j| (scores[j] - max).exp()).sum();
        for j in 0..l {
            if visible[j] {
                attn[i][j] = (scores[j] - max).exp() / z;
            }
        }
        let mixed: Vec<f64> = (0..d).map(|c| (0..l).map(|j| attn[i][j] * v[j][c]).sum()).collect();
        for c in 0..d {
            out[i][c] = (0..d).map(|m| mixed[m] * p.w_o.at(m, c)).sum();
        }
    }
    (attn, out)
}

/// Empirical frequencies of `draws` samples and the chi-square p-value
/// against `N_i^alpha` normalisation.
pub fn alpha_goodness(sizes: &[usize], alpha: f64, draws: usize, seed: u64) -> (Vec<f64>, f64) {
    let mut r = rng(seed);
    let mut counts = vec![0usize; sizes.len()];
    for _ in 0..draws {
        counts[alpha_sample(sizes, alpha, &mut r).unwrap()] += 1;
    }
    let expected = alpha_probabilities(sizes, alpha).unwrap();
    let chi2: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(&c, &p)| {
            let e = p * draws as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new((sizes.len() - 1) as f64).unwrap().cdf(chi2);
    (counts.iter().map(|&c| c as f64 / draws as f64).collect(), p)
}


/// Largest deviation of single-head attention (`L ≤ 4`, `d ∈ {2, 4}`) from
/// [`attention_oracle`] over `cases` random draws.
pub fn attention_oracle_max_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let l = r.random_range(1..=4);
        let d = if case % 2 == 0 { 2 } else { 4 };
        let h = random(&mut r, l, d, 2.0);
        let p = AttentionParams {
            w_q: random(&mut r, d, d, 1.0),
            w_k: random(&mut r, d, d, 1.0),
            w_v: random(&mut r, d, d, 1.0),
            w_o: random(&mut r, d, d, 1.0),
            n_heads: 1,
            rope_base: [10_000.0, 100.0, 2.0][case % 3],
        };
        let mut visible: Vec<bool> = (0..l).map(|_| r.random_bool(0.7)).collect();
        visible[r.random_range(0..l)] = true;
        let got = self_attention(&h, &AttentionMask { visible: visible.clone() }, &p).unwrap();
        let (attn, out) = attention_oracle(&h, &visible, &p);
        for i in 0..l {
            for j in 0..l {
                worst = worst.max((got.attn.data()[i * l + j] - attn[i][j]).abs());
            }
            for c in 0..d {
                worst = worst.max((got.output.at(i, c) - out[i][c]).abs());
            }
        }
    }
    worst
}
