//! Instruction-driven gates.
//!
//! Token weights `w` and stream coefficients `beta` are read off the same
//! attention map that produced the fused output: the attention mass that the
//! instruction rows put on each content token (inner level) and on each
//! stream's control token (stream level), averaged over heads and normalised
//! within the token set or across available streams.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::sequence::ModalityId;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_STREAM_THRESHOLD: f64 = 1e-6;
pub const REPORT_TOP_K: usize = 5;

/// How gate values are computed and injected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateVariant {
    /// Attention-derived `w` and `beta`, residual injection.
    #[default]
    Attention,
    /// `beta` from an MLP over the instruction mean and each stream summary.
    MlpScore,
    /// `w` from a dedicated single-head cross-attention against the instruction.
    CrossAttnScore,
    /// `O + tanh(g) O` with one zero-initialised scalar per stream.
    FlamingoTanh,
    /// `beta (w ⊙ O)` without the `O` term.
    NoResidual,
}

impl GateVariant {
    pub const ALL: [GateVariant; 5] = [
        GateVariant::Attention,
        GateVariant::MlpScore,
        GateVariant::CrossAttnScore,
        GateVariant::FlamingoTanh,
        GateVariant::NoResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateVariant::Attention => "attention",
            GateVariant::MlpScore => "mlp-score",
            GateVariant::CrossAttnScore => "cross-attn-score",
            GateVariant::FlamingoTanh => "flamingo-tanh",
            GateVariant::NoResidual => "no-residual",
        }
    }
}

impl fmt::Display for GateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GateVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gate variant `{s}`")))
    }
}

/// Per-sample gate values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub lambda: BTreeMap<ModalityId, Vec<f64>>,
    pub w: BTreeMap<ModalityId, Vec<f64>>,
    pub eta: BTreeMap<ModalityId, f64>,
    pub beta: BTreeMap<ModalityId, f64>,
    pub inner_fallback: BTreeMap<ModalityId, bool>,
    pub stream_fallback: bool,
    pub epsilon: f64,
}

impl GateReport {
    /// Stream with the largest `beta`; the lowest id wins ties.
    pub fn top_modality(&self) -> Option<ModalityId> {
        let mut best: Option<(ModalityId, f64)> = None;
        for (&m, &b) in &self.beta {
            match best {
                Some((_, bb)) if b <= bb => {}
                _ => best = Some((m, b)),
            }
        }
        best.map(|(m, _)| m)
    }

    pub fn any_fallback(&self) -> bool {
        self.stream_fallback || self.inner_fallback.values().any(|&f| f)
    }

    pub fn csv_header(modalities: &[ModalityId]) -> Vec<String> {
        let mut h = vec!["sample_id".to_string()];
        for m in modalities {
            h.push(format!("beta_{m}"));
        }
        for m in modalities {
            h.push(format!("inner_fallback_{m}"));
        }
        h.push("stream_fallback".into());
        for m in modalities {
            for k in 0..REPORT_TOP_K {
                h.push(format!("m{m}_top{}_token", k + 1));
                h.push(format!("m{m}_top{}_w", k + 1));
            }
        }
        h
    }

    /// One CSV row; cells for absent streams or missing ranks are empty.
    pub fn csv_row(&self, sample_id: usize, modalities: &[ModalityId]) -> Vec<String> {
        let mut r = vec![sample_id.to_string()];
        for m in modalities {
            r.push(self.beta.get(m).map(|b| b.to_string()).unwrap_or_default());
        }
        for m in modalities {
            r.push(
                self.inner_fallback
                    .get(m)
                    .map(|f| (*f as u8).to_string())
                    .unwrap_or_default(),
            );
        }
        r.push((self.stream_fallback as u8).to_string());
        for m in modalities {
            let mut ranked: Vec<(usize, f64)> = self
                .w
                .get(m)
                .map(|w| w.iter().copied().enumerate().collect())
                .unwrap_or_default();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for k in 0..REPORT_TOP_K {
                match ranked.get(k) {
                    Some((t, w)) => {
                        r.push(t.to_string());
                        r.push(w.to_string());
                    }
                    None => {
                        r.push(String::new());
                        r.push(String::new());
                    }
                }
            }
        }
        r
    }
}

/// Projections for the single-query control-token summary.
#[derive(Clone, Copy, Debug)]
pub struct ControlVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpScoreVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttnScoreVars {
    pub w_q: Var,
    pub w_k: Var,
}

/// How the gate is injected into one stream's attended tokens.
#[derive(Clone, Copy, Debug)]
pub enum Injection {
    Residual { w: Var, beta: Var },
    NoResidual { w: Var, beta: Var },
    Tanh { gate: Var },
}

fn check_spans(instruction: &[usize], content: &[usize]) -> Result<()> {
    if instruction.is_empty() {
        return Err(Error::Span("instruction span is empty".into()));
    }
    if content.is_empty() {
        return Err(Error::Span("content span is empty".into()));
    }
    if content.iter().any(|t| instruction.contains(t)) {
        return Err(Error::Span("instruction and content spans overlap".into()));
    }
    Ok(())
}

/// `(1/n_h) Σ_h Σ_{i∈I} A_h[i, ·]` as a `1×L` row: the instruction attention
/// mass received by every key position.
pub fn instruction_mass(tape: &mut Tape, heads: &[Var], instruction: &[usize]) -> Result<Var> {
    if instruction.is_empty() {
        return Err(Error::Span("instruction span is empty".into()));
    }
    let mut total: Option<Var> = None;
    for &a in heads {
        let rows = tape.gather_rows(a, instruction)?;
        let s = tape.sum_rows(rows)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Config("attention has no heads".into()))?;
    Ok(tape.scale(total, 1.0 / heads.len() as f64))
}

pub struct InnerVars {
    pub lambda: Var,
    pub w: Var,
    pub fallback: bool,
}

/// Token weights of one stream from the instruction mass row.
pub fn inner_weights_on_tape(
    tape: &mut Tape,
    mass: Var,
    content: &[usize],
    epsilon: f64,
) -> Result<InnerVars> {
    if content.is_empty() {
        return Err(Error::Span("content span is empty".into()));
    }
    let lambda = tape.gather_cols(mass, content)?;
    let (w, fallback) = tape.normalize_or_uniform(lambda, epsilon);
    Ok(InnerVars {
        lambda,
        w,
        fallback,
    })
}

pub struct StreamVars {
    /// `1×N` over the streams in the given order.
    pub eta: Var,
    pub beta: Var,
    pub fallback: bool,
}

/// Stream coefficients from the mass on each stream's control positions.
/// Only the listed (available) streams enter the normalisation.
pub fn stream_weights_on_tape(
    tape: &mut Tape,
    mass: Var,
    controls: &[Range<usize>],
    threshold: f64,
) -> Result<StreamVars> {
    if controls.is_empty() {
        return Err(Error::Config("no available modality to gate".into()));
    }
    let parts: Vec<Var> = controls
        .iter()
        .map(|c| {
            let cols: Vec<usize> = c.clone().collect();
            let picked = tape.gather_cols(mass, &cols)?;
            Ok(if cols.len() == 1 {
                picked
            } else {
                tape.sum_all(picked)
            })
        })
        .collect::<Result<_>>()?;
    let eta = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_cols(&parts)?
    };
    let (beta, fallback) = tape.normalize_or_uniform(eta, threshold);
    Ok(StreamVars {
        eta,
        beta,
        fallback,
    })
}

/// Single-query attention of the control rows `t_c[k×d]` over `x_m[T×d]`,
/// scaled by `1/sqrt(d)`. Cost is linear in `T`.
pub fn summarize_control_on_tape(
    tape: &mut Tape,
    t_c: Var,
    x_m: Var,
    proj: &ControlVars,
) -> Result<Var> {
    let (t, d) = (tape.value(x_m).rows(), tape.value(x_m).cols());
    if t == 0 {
        return Err(Error::EmptyModality(0));
    }
    let q = tape.matmul(t_c, proj.w_q)?;
    let k = tape.matmul(x_m, proj.w_k)?;
    let v = tape.matmul(x_m, proj.w_v)?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let a = tape.masked_softmax(s, &vec![true; t], false)?;
    tape.matmul(a, v)
}

/// Gated replacement for one stream's attended content rows.
pub fn apply_gating_on_tape(tape: &mut Tape, o_m: Var, injection: Injection) -> Result<Var> {
    match injection {
        Injection::Residual { w, beta } => {
            let reweighted = tape.row_scale(o_m, w)?;
            let scaled = tape.mul_scalar(reweighted, beta)?;
            tape.add(o_m, scaled)
        }
        Injection::NoResidual { w, beta } => {
            let reweighted = tape.row_scale(o_m, w)?;
            tape.mul_scalar(reweighted, beta)
        }
        Injection::Tanh { gate } => {
            let g = tape.tanh(gate);
            let scaled = tape.mul_scalar(o_m, g)?;
            tape.add(o_m, scaled)
        }
    }
}

/// MLP stream scores: `beta = softmax_m(MLP([mean(instruction); summary_m]))`
/// with one tanh hidden layer.
pub fn mlp_stream_weights_on_tape(
    tape: &mut Tape,
    instruction: Var,
    summaries: &[Var],
    mlp: &MlpScoreVars,
) -> Result<Var> {
    if summaries.is_empty() {
        return Err(Error::Config("no available modality to gate".into()));
    }
    let pooled = tape.mean_rows(instruction)?;
    let mut scores = Vec::with_capacity(summaries.len());
    for &s in summaries {
        let s = if tape.value(s).rows() > 1 {
            tape.mean_rows(s)?
        } else {
            s
        };
        let x = tape.concat_cols(&[pooled, s])?;
        let h = tape.matmul(x, mlp.w1)?;
        let h = tape.add_row(h, mlp.b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, mlp.w2)?;
        scores.push(tape.add_row(o, mlp.b2)?);
    }
    let row = if scores.len() == 1 {
        scores[0]
    } else {
        tape.concat_cols(&scores)?
    };
    let n = tape.value(row).cols();
    tape.masked_softmax(row, &vec![true; n], false)
}

/// Cross-attention token scores: content tokens query the instruction tokens;
/// each token's score is its mean scaled logit, softmax-normalised within the
/// stream.
pub fn cross_attn_token_weights_on_tape(
    tape: &mut Tape,
    instruction: Var,
    x_m: Var,
    proj: &CrossAttnScoreVars,
) -> Result<Var> {
    let d = tape.value(x_m).cols();
    let q = tape.matmul(x_m, proj.w_q)?;
    let k = tape.matmul(instruction, proj.w_k)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let n_instr = tape.value(instruction).rows();
    let logits = tape.scale(logits, 1.0 / ((d as f64).sqrt() * n_instr as f64));
    let per_token = tape.transpose(logits)?;
    let per_token = tape.sum_rows(per_token)?;
    let t = tape.value(per_token).cols();
    tape.masked_softmax(per_token, &vec![true; t], false)
}

// ---------------------------------------------------------------------------
// Value-level entry points.

#[derive(Clone, Debug, PartialEq)]
pub struct ControlProjections {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl ControlProjections {
    pub fn identity(d: usize) -> Self {
        ControlProjections {
            w_q: Tensor::eye(d),
            w_k: Tensor::eye(d),
            w_v: Tensor::eye(d),
        }
    }
}

pub fn summarize_control_token(
    t_c: &Tensor,
    x_m: &Tensor,
    proj: &ControlProjections,
) -> Result<Tensor> {
    if !x_m.is_matrix() || x_m.rows() == 0 {
        return Err(Error::EmptyModality(0));
    }
    let mut tape = Tape::new();
    let t = tape.constant(t_c.clone());
    let x = tape.constant(x_m.clone());
    let vars = ControlVars {
        w_q: tape.constant(proj.w_q.clone()),
        w_k: tape.constant(proj.w_k.clone()),
        w_v: tape.constant(proj.w_v.clone()),
    };
    let out = summarize_control_on_tape(&mut tape, t, x, &vars)?;
    Ok(tape.value(out).clone())
}

fn heads_from_tensor(tape: &mut Tape, attn: &Tensor) -> Result<Vec<Var>> {
    let s = attn.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::dim("attention tensor", s, &[]));
    }
    let l = s[1];
    Ok(attn
        .data()
        .chunks(l * l)
        .map(|c| tape.constant(Tensor::new(vec![l, l], c.to_vec()).unwrap()))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerWeights {
    pub lambda: Vec<f64>,
    pub w: Vec<f64>,
    pub fallback: bool,
}

/// Token weights of one stream from an `[n_heads × L × L]` attention tensor.
pub fn inner_modality_weights(
    attn: &Tensor,
    instruction: &[usize],
    content: &[usize],
    epsilon: f64,
) -> Result<InnerWeights> {
    check_spans(instruction, content)?;
    let mut tape = Tape::new();
    let heads = heads_from_tensor(&mut tape, attn)?;
    let mass = instruction_mass(&mut tape, &heads, instruction)?;
    let v = inner_weights_on_tape(&mut tape, mass, content, epsilon)?;
    Ok(InnerWeights {
        lambda: tape.value(v.lambda).data().to_vec(),
        w: tape.value(v.w).data().to_vec(),
        fallback: v.fallback,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamWeights {
    pub eta: BTreeMap<ModalityId, f64>,
    pub beta: BTreeMap<ModalityId, f64>,
    pub fallback: bool,
}

pub fn modality_coefficients(
    attn: &Tensor,
    instruction: &[usize],
    control_positions: &BTreeMap<ModalityId, Range<usize>>,
    threshold: f64,
) -> Result<StreamWeights> {
    if control_positions.is_empty() {
        return Err(Error::Config("no available modality to gate".into()));
    }
    let mut tape = Tape::new();
    let heads = heads_from_tensor(&mut tape, attn)?;
    let mass = instruction_mass(&mut tape, &heads, instruction)?;
    let controls: Vec<Range<usize>> = control_positions.values().cloned().collect();
    let v = stream_weights_on_tape(&mut tape, mass, &controls, threshold)?;
    let ids = control_positions.keys().copied();
    Ok(StreamWeights {
        eta: ids.clone().zip(tape.value(v.eta).data().iter().copied()).collect(),
        beta: ids.zip(tape.value(v.beta).data().iter().copied()).collect(),
        fallback: v.fallback,
    })
}

/// Value-level form of [`Injection`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateForm {
    Residual,
    NoResidual,
    Tanh(f64),
}

/// `O + beta (w ⊙ O)` (or the selected alternative form) for one stream.
pub fn apply_gating(o_m: &Tensor, w: &[f64], beta: f64, form: GateForm) -> Result<Tensor> {
    if !o_m.is_matrix() || o_m.rows() != w.len() {
        return Err(Error::dim("apply_gating", o_m.shape(), &[w.len()]));
    }
    let mut tape = Tape::new();
    let o = tape.constant(o_m.clone());
    let injection = match form {
        GateForm::Residual | GateForm::NoResidual => {
            let wv = tape.constant(Tensor::row_vector(w));
            let bv = tape.constant(Tensor::scalar(beta));
            if form == GateForm::Residual {
                Injection::Residual { w: wv, beta: bv }
            } else {
                Injection::NoResidual { w: wv, beta: bv }
            }
        }
        GateForm::Tanh(g) => Injection::Tanh {
            gate: tape.constant(Tensor::scalar(g)),
        },
    };
    let out = apply_gating_on_tape(&mut tape, o, injection)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpScoreParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnScoreParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
}

/// Parameters for a learned scorer.
#[derive(Clone, Debug, PartialEq)]
pub enum ScoreParams {
    Mlp(MlpScoreParams),
    CrossAttn(CrossAttnScoreParams),
}

/// Output of a learned scorer: the level it overrides.
#[derive(Clone, Debug, PartialEq)]
pub enum VariantScores {
    /// Stream coefficients in the order of the given summaries.
    Beta(Vec<f64>),
    /// Token weights per stream, in the order of the given token sets.
    W(Vec<Vec<f64>>),
}

/// Learned-scorer gates. `streams` holds `(control summary, content tokens)`
/// per available stream.
pub fn score_variant(
    variant: GateVariant,
    params: &ScoreParams,
    instruction: &Tensor,
    streams: &[(Tensor, Tensor)],
) -> Result<VariantScores> {
    let mut tape = Tape::new();
    let instr = tape.constant(instruction.clone());
    match (variant, params) {
        (GateVariant::MlpScore, ScoreParams::Mlp(p)) => {
            let vars = MlpScoreVars {
                w1: tape.constant(p.w1.clone()),
                b1: tape.constant(p.b1.clone()),
                w2: tape.constant(p.w2.clone()),
                b2: tape.constant(p.b2.clone()),
            };
            let summaries: Vec<Var> = streams
                .iter()
                .map(|(s, _)| tape.constant(s.clone()))
                .collect();
            let beta = mlp_stream_weights_on_tape(&mut tape, instr, &summaries, &vars)?;
            Ok(VariantScores::Beta(tape.value(beta).data().to_vec()))
        }
        (GateVariant::CrossAttnScore, ScoreParams::CrossAttn(p)) => {
            let vars = CrossAttnScoreVars {
                w_q: tape.constant(p.w_q.clone()),
                w_k: tape.constant(p.w_k.clone()),
            };
            let mut out = Vec::with_capacity(streams.len());
            for (_, x) in streams {
                let xv = tape.constant(x.clone());
                let w = cross_attn_token_weights_on_tape(&mut tape, instr, xv, &vars)?;
                out.push(tape.value(w).data().to_vec());
            }
            Ok(VariantScores::W(out))
        }
        (v, _) => Err(Error::Config(format!(
            "variant `{v}` has no learned scorer or the parameters do not match"
        ))),
    }
}
