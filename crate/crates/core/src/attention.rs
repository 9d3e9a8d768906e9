//! Multi-head self-attention with rotary position embedding. The full
//! per-head attention map is kept because the gates read it.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::sequence::AttentionMask;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub n_heads: usize,
    pub rope_base: f64,
}

impl AttentionParams {
    pub fn identity(d: usize, n_heads: usize) -> Self {
        AttentionParams {
            w_q: Tensor::eye(d),
            w_k: Tensor::eye(d),
            w_v: Tensor::eye(d),
            w_o: Tensor::eye(d),
            n_heads,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `[L × d]`
    pub output: Tensor,
    /// `[n_heads × L × L]`, rows are queries and columns keys.
    pub attn: Tensor,
}

/// Projection weights already recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

pub struct TapeAttention {
    pub output: Var,
    /// One `[L × L]` map per head.
    pub heads: Vec<Var>,
}

pub fn check_heads(d: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "width {d} is not divisible by {n_heads} heads"
        )));
    }
    let d_head = d / n_heads;
    if d_head % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary embedding needs an even head width, got {d_head}"
        )));
    }
    Ok(d_head)
}

/// Rotate `x[L × n_heads × d_head]` pairwise by `position · base^(-2i/d_head)`.
pub fn apply_rope(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != positions.len() {
        return Err(Error::dim("apply_rope", shape, &[positions.len()]));
    }
    let (l, n_heads, d_head) = (shape[0], shape[1], shape[2]);
    let mut tape = Tape::new();
    let flat = tape.constant(x.clone().reshape(vec![l, n_heads * d_head])?);
    let rotated = tape.rope(flat, positions, base, n_heads)?;
    tape.value(rotated).clone().reshape(vec![l, n_heads, d_head])
}

/// Bidirectional (or causal) multi-head attention over `h` recorded on `tape`.
/// RoPE positions are the sequence indices `0..L`.
pub fn self_attention_on_tape(
    tape: &mut Tape,
    h: Var,
    visible: &[bool],
    w: &AttentionVars,
    n_heads: usize,
    rope_base: f64,
    causal: bool,
) -> Result<TapeAttention> {
    let (l, d) = (tape.value(h).rows(), tape.value(h).cols());
    let d_head = check_heads(d, n_heads)?;
    if visible.len() != l {
        return Err(Error::dim("self_attention", &[l, d], &[visible.len()]));
    }
    let positions: Vec<usize> = (0..l).collect();
    let q = tape.matmul(h, w.w_q)?;
    let q = tape.rope(q, &positions, rope_base, n_heads)?;
    let k = tape.matmul(h, w.w_k)?;
    let k = tape.rope(k, &positions, rope_base, n_heads)?;
    let v = tape.matmul(h, w.w_v)?;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    let mut head_out = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let cols = head * d_head..(head + 1) * d_head;
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, cols.clone())?,
                tape.slice_cols(k, cols.clone())?,
                tape.slice_cols(v, cols)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.masked_softmax(scores, visible, causal)?;
        head_out.push(tape.matmul(a, vh)?);
        heads.push(a);
    }
    let concat = if n_heads == 1 {
        head_out[0]
    } else {
        tape.concat_cols(&head_out)?
    };
    let output = tape.matmul(concat, w.w_o)?;
    Ok(TapeAttention { output, heads })
}

/// Stack per-head maps into `[n_heads × L × L]`.
pub fn stack_heads(tape: &Tape, heads: &[Var]) -> Tensor {
    let l = tape.value(heads[0]).rows();
    let data: Vec<f64> = heads
        .iter()
        .flat_map(|&a| tape.value(a).data().iter().copied())
        .collect();
    Tensor::new(vec![heads.len(), l, l], data).expect("square head maps")
}

pub fn self_attention(
    h: &Tensor,
    mask: &AttentionMask,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    if !h.is_matrix() {
        return Err(Error::dim("self_attention", h.shape(), &[]));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let w = AttentionVars {
        w_q: tape.constant(params.w_q.clone()),
        w_k: tape.constant(params.w_k.clone()),
        w_v: tape.constant(params.w_v.clone()),
        w_o: tape.constant(params.w_o.clone()),
    };
    let out = self_attention_on_tape(
        &mut tape,
        hv,
        &mask.visible,
        &w,
        params.n_heads,
        params.rope_base,
        false,
    )?;
    Ok(AttentionOutput {
        output: tape.value(out.output).clone(),
        attn: stack_heads(&tape, &out.heads),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rope_position_zero_is_identity_and_preserves_pair_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[5, 2, 4]);
        let y = apply_rope(&x, &[0, 1, 2, 3, 40], 10_000.0).unwrap();
        assert_eq!(&y.data()[..8], &x.data()[..8]);
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = a[0].hypot(a[1]);
            let nb = b[0].hypot(b[1]);
            assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_odd_head_width_is_config_error() {
        let x = Tensor::zeros(&[2, 1, 3]);
        assert!(matches!(apply_rope(&x, &[0, 1], 1e4), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attention_is_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[1, 4]);
        let mut p = AttentionParams::identity(4, 2);
        p.w_o = random(&mut rng, &[4, 4]);
        let out = self_attention(&x, &AttentionMask::all_visible(1), &p).unwrap();
        assert_eq!(out.attn.data(), &[1.0, 1.0]);
        let expect = x.matmul(&p.w_o).unwrap();
        assert!(out.output.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn hidden_key_column_is_zero_and_rows_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[5, 4]);
        let p = AttentionParams {
            w_q: random(&mut rng, &[4, 4]),
            w_k: random(&mut rng, &[4, 4]),
            w_v: random(&mut rng, &[4, 4]),
            w_o: random(&mut rng, &[4, 4]),
            n_heads: 2,
            rope_base: DEFAULT_ROPE_BASE,
        };
        let mask = AttentionMask {
            visible: vec![true, true, false, true, true],
        };
        let out = self_attention(&x, &mask, &p).unwrap();
        for row in out.attn.data().chunks(5) {
            assert_eq!(row[2], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_hidden_is_invalid_mask() {
        let p = AttentionParams::identity(2, 1);
        let r = self_attention(&Tensor::zeros(&[2, 2]), &AttentionMask { visible: vec![false; 2] }, &p);
        assert!(matches!(r, Err(Error::InvalidMask { .. })));
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(check_heads(10, 3).is_err());
        assert!(check_heads(6, 2).is_err());
        assert_eq!(check_heads(16, 2).unwrap(), 8);
    }
}
