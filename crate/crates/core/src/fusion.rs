//! The gated fusion block: projectors, control-token insertion, cross-modal
//! self-attention, two-level gating, post-norm residual FFN and restoration of
//! instruction / masked rows.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{check_heads, self_attention_on_tape, AttentionVars, DEFAULT_ROPE_BASE};
use crate::error::{Error, Result};
use crate::gating::{
    apply_gating_on_tape, cross_attn_token_weights_on_tape, inner_weights_on_tape,
    instruction_mass, mlp_stream_weights_on_tape, stream_weights_on_tape,
    summarize_control_on_tape, ControlVars, CrossAttnScoreVars, GateReport, GateVariant,
    Injection, MlpScoreVars, DEFAULT_EPSILON, DEFAULT_STREAM_THRESHOLD,
};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sequence::{assemble_on_tape, ModalityId, SequenceLayout, TokenSequence};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Rung of the component ladder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentLevel {
    /// Projected tokens pass straight through.
    ConcatOnly,
    /// Self-attention layer without gates or control tokens.
    AttentionOnly,
    /// Inner-modality gate with `beta = 1`, no control tokens.
    AttentionInner,
    /// Both gate levels.
    #[default]
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlSharing {
    /// One base control embedding reused by every stream.
    #[default]
    Unified,
    /// A separate base embedding per declared stream.
    PerModality,
}

/// A named configuration of the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub level: ComponentLevel,
    pub gate: GateVariant,
}

impl Variant {
    pub const LADDER: [&'static str; 4] = ["concat-only", "attention-only", "attention+inner", "full"];
    pub const GATE_FORMS: [&'static str; 4] = ["no-residual", "flamingo-tanh", "mlp-score", "cross-attn-score"];

    pub fn name(self) -> String {
        match (self.level, self.gate) {
            (ComponentLevel::ConcatOnly, _) => "concat-only".into(),
            (ComponentLevel::AttentionOnly, _) => "attention-only".into(),
            (ComponentLevel::AttentionInner, GateVariant::Attention) => "attention+inner".into(),
            (ComponentLevel::AttentionInner, g) => format!("attention+inner/{g}"),
            (ComponentLevel::Full, GateVariant::Attention) => "full".into(),
            (ComponentLevel::Full, g) => g.name().into(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let level = match s {
            "concat-only" => ComponentLevel::ConcatOnly,
            "attention-only" => ComponentLevel::AttentionOnly,
            "attention+inner" => ComponentLevel::AttentionInner,
            "full" => ComponentLevel::Full,
            other => {
                let gate = other
                    .parse::<GateVariant>()
                    .map_err(|_| Error::Config(format!("unknown variant `{other}`")))?;
                return Ok(Variant {
                    level: ComponentLevel::Full,
                    gate,
                });
            }
        };
        Ok(Variant {
            level,
            gate: GateVariant::Attention,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Feature width of each declared stream; stream `k + 1` has width `modality_dims[k]`.
    pub modality_dims: Vec<usize>,
    pub gate_variant: GateVariant,
    pub component_level: ComponentLevel,
    pub epsilon: f64,
    pub stream_threshold: f64,
    pub ffn_hidden: usize,
    pub rope_base: f64,
    pub n_control_tokens: usize,
    pub control_sharing: ControlSharing,
    pub allow_instruction_only: bool,
    /// Std of the projector bias at initialisation. A nonzero offset gives
    /// every stream a distinct signature before training.
    pub projector_bias_std: f64,
    /// Start the attention layers with `W_K = W_Q`, so initial scores favour
    /// similar (same-stream) tokens.
    pub tied_qk_init: bool,
}

impl FusionConfig {
    pub fn new(d: usize, n_heads: usize, modality_dims: Vec<usize>) -> Self {
        FusionConfig {
            d,
            n_heads,
            n_layers: 1,
            modality_dims,
            gate_variant: GateVariant::Attention,
            component_level: ComponentLevel::Full,
            epsilon: DEFAULT_EPSILON,
            stream_threshold: DEFAULT_STREAM_THRESHOLD,
            ffn_hidden: 4 * d,
            rope_base: DEFAULT_ROPE_BASE,
            n_control_tokens: 1,
            control_sharing: ControlSharing::Unified,
            allow_instruction_only: true,
            projector_bias_std: 2.0,
            tied_qk_init: true,
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.component_level = v.level;
        self.gate_variant = v.gate;
        self
    }

    pub fn variant(&self) -> Variant {
        Variant {
            level: self.component_level,
            gate: self.gate_variant,
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.modality_dims.len()
    }

    pub fn declared(&self) -> Vec<ModalityId> {
        (1..=self.modality_dims.len()).collect()
    }

    pub fn uses_control_tokens(&self) -> bool {
        self.component_level == ComponentLevel::Full
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_layers == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("d, n_layers and ffn_hidden must be positive".into()));
        }
        check_heads(self.d, self.n_heads)?;
        if self.modality_dims.contains(&0) {
            return Err(Error::Config("modality widths must be positive".into()));
        }
        if self.n_control_tokens == 0 {
            return Err(Error::Config("at least one control token per stream".into()));
        }
        if !(self.projector_bias_std >= 0.0 && self.projector_bias_std.is_finite()) {
            return Err(Error::Config("projector_bias_std must be finite and non-negative".into()));
        }
        if !(self.epsilon > 0.0 && self.stream_threshold > 0.0) {
            return Err(Error::Config("gate thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControlLayout {
    /// One `[n_control × d]` base per stream (per-modality) or a single shared one.
    pub base: Vec<ParamId>,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpLayout {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub norm1: (ParamId, ParamId),
    pub ffn_in: Affine,
    pub ffn_out: Affine,
    pub norm2: (ParamId, ParamId),
    pub mlp_score: Option<MlpLayout>,
    pub cross_score: Option<(ParamId, ParamId)>,
    /// `[1 × N_declared]` zero-initialised tanh gates.
    pub tanh_gates: Option<ParamId>,
}

/// Where every trainable tensor of the fusion block lives in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionParams {
    pub projectors: Vec<Affine>,
    pub control: Option<ControlLayout>,
    pub layers: Vec<LayerLayout>,
}

pub(crate) fn init_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive shape")
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    init_matrix(rng, rows, cols, (1.0 / rows as f64).sqrt())
}

impl FusionParams {
    /// Register every tensor under `prefix` and return the layout.
    pub fn register(
        store: &mut ParamStore,
        config: &FusionConfig,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let projectors = config
            .modality_dims
            .iter()
            .enumerate()
            .map(|(k, &dm)| Affine {
                w: store.add(format!("{prefix}projector.{}.w", k + 1), glorot(rng, dm, d)),
                b: store.add(
                    format!("{prefix}projector.{}.b", k + 1),
                    init_matrix(rng, 1, d, config.projector_bias_std),
                ),
            })
            .collect();
        if config.component_level == ComponentLevel::ConcatOnly {
            return Ok(FusionParams {
                projectors,
                control: None,
                layers: Vec::new(),
            });
        }

        let control = if config.uses_control_tokens() {
            let n_base = match config.control_sharing {
                ControlSharing::Unified => 1,
                ControlSharing::PerModality => config.n_modalities().max(1),
            };
            let base = (0..n_base)
                .map(|k| {
                    let name = match config.control_sharing {
                        ControlSharing::Unified => format!("{prefix}control.base"),
                        ControlSharing::PerModality => format!("{prefix}control.base.{}", k + 1),
                    };
                    store.add(name, init_matrix(rng, config.n_control_tokens, d, 1.0))
                })
                .collect();
            Some(ControlLayout {
                base,
                w_q: store.add(format!("{prefix}control.w_q"), glorot(rng, d, d)),
                w_k: store.add(format!("{prefix}control.w_k"), glorot(rng, d, d)),
                w_v: store.add(format!("{prefix}control.w_v"), glorot(rng, d, d)),
            })
        } else {
            None
        };

        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("{prefix}layer.{l}.");
            let h = config.ffn_hidden;
            let mut add = |name: &str, t: Tensor| store.add(format!("{p}{name}"), t);
            let q_init = glorot(rng, d, d);
            let k_init = glorot(rng, d, d);
            let k_init = if config.tied_qk_init { q_init.clone() } else { k_init };
            let w_q = add("attn.w_q", q_init);
            let w_k = add("attn.w_k", k_init);
            let w_v = add("attn.w_v", glorot(rng, d, d));
            let w_o = add("attn.w_o", glorot(rng, d, d));
            let norm1 = (add("norm1.gamma", Tensor::ones(&[1, d])), add("norm1.beta", Tensor::zeros(&[1, d])));
            let ffn_in = Affine {
                w: add("ffn.in.w", glorot(rng, d, h)),
                b: add("ffn.in.b", Tensor::zeros(&[1, h])),
            };
            let ffn_out = Affine {
                w: add("ffn.out.w", glorot(rng, h, d)),
                b: add("ffn.out.b", Tensor::zeros(&[1, d])),
            };
            let norm2 = (add("norm2.gamma", Tensor::ones(&[1, d])), add("norm2.beta", Tensor::zeros(&[1, d])));
            let mlp_score = (config.gate_variant == GateVariant::MlpScore).then(|| MlpLayout {
                w1: add("gate.mlp.w1", glorot(rng, 2 * d, 2 * d)),
                b1: add("gate.mlp.b1", Tensor::zeros(&[1, 2 * d])),
                w2: add("gate.mlp.w2", glorot(rng, 2 * d, 1)),
                b2: add("gate.mlp.b2", Tensor::zeros(&[1, 1])),
            });
            let cross_score = (config.gate_variant == GateVariant::CrossAttnScore)
                .then(|| (add("gate.cross.w_q", glorot(rng, d, d)), add("gate.cross.w_k", glorot(rng, d, d))));
            let tanh_gates = (config.gate_variant == GateVariant::FlamingoTanh)
                .then(|| add("gate.tanh", Tensor::zeros(&[1, config.n_modalities().max(1)])));
            layers.push(LayerLayout {
                w_q,
                w_k,
                w_v,
                w_o,
                norm1,
                ffn_in,
                ffn_out,
                norm2,
                mlp_score,
                cross_score,
                tanh_gates,
            });
        }
        Ok(FusionParams {
            projectors,
            control,
            layers,
        })
    }
}

/// One sample's fusion inputs, already recorded on a tape.
pub struct FusionInputVars<'a> {
    pub prompt: Option<Var>,
    pub instruction: Var,
    /// Present streams in increasing id order, raw encoder features.
    pub features: &'a [(ModalityId, Var)],
    /// Masked zero rows appended after the last stream (absent-stream
    /// placeholders and batch padding).
    pub masked_tail: usize,
}

pub struct FusionTape {
    pub layout: SequenceLayout,
    /// Block input `H` (after projection and control insertion).
    pub input: Var,
    pub output: Var,
    pub report: Option<GateReport>,
}

pub fn project_on_tape(tape: &mut Tape, bound: &Bound, proj: &Affine, f_m: Var) -> Result<Var> {
    let x = tape.matmul(f_m, bound.var(proj.w))?;
    tape.add_row(x, bound.var(proj.b))
}

fn check_features(config: &FusionConfig, tape: &Tape, features: &[(ModalityId, Var)]) -> Result<()> {
    let mut prev = 0;
    for &(id, f) in features {
        if id == 0 || id > config.n_modalities() {
            return Err(Error::Config(format!("unknown modality id {id}")));
        }
        if id <= prev {
            return Err(Error::Layout(format!("modality {id} repeated or out of order")));
        }
        prev = id;
        let dm = config.modality_dims[id - 1];
        let v = tape.value(f);
        if !v.is_matrix() || v.cols() != dm {
            return Err(Error::dim("project_modality", &[dm], v.shape()));
        }
    }
    if features.is_empty() && !config.allow_instruction_only {
        return Err(Error::Input("no modality present and instruction-only input is disabled".into()));
    }
    Ok(())
}

fn rows_of(tape: &mut Tape, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
    if range.start == 0 && range.end == tape.value(x).rows() {
        Ok(x)
    } else {
        tape.slice_rows(x, range)
    }
}

/// Full block on a tape.
pub fn fusion_forward_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    params: &FusionParams,
    config: &FusionConfig,
    input: &FusionInputVars<'_>,
) -> Result<FusionTape> {
    check_features(config, tape, input.features)?;
    let projected: Vec<(ModalityId, Var)> = input
        .features
        .iter()
        .map(|&(id, f)| Ok((id, project_on_tape(tape, bound, &params.projectors[id - 1], f)?)))
        .collect::<Result<_>>()?;

    let mut summaries: BTreeMap<ModalityId, Var> = BTreeMap::new();
    if let Some(ctrl) = &params.control {
        let vars = ControlVars {
            w_q: bound.var(ctrl.w_q),
            w_k: bound.var(ctrl.w_k),
            w_v: bound.var(ctrl.w_v),
        };
        for &(id, x) in &projected {
            let base = if ctrl.base.len() == 1 { ctrl.base[0] } else { ctrl.base[id - 1] };
            let s = summarize_control_on_tape(tape, bound.var(base), x, &vars)?;
            summaries.insert(id, s);
        }
    }
    let streams: Vec<(ModalityId, Option<Var>, Var)> = projected
        .iter()
        .map(|&(id, x)| (id, summaries.get(&id).copied(), x))
        .collect();
    let (layout, h0) = assemble_on_tape(tape, input.prompt, input.instruction, &streams, input.masked_tail)?;

    if config.component_level == ComponentLevel::ConcatOnly {
        return Ok(FusionTape {
            layout,
            input: h0,
            output: h0,
            report: None,
        });
    }

    let visible = layout.visible();
    let restored = layout.restored();
    let instruction = layout.instruction_positions();
    let mut h = h0;
    let mut report = None;
    for layer in &params.layers {
        let attn_vars = AttentionVars {
            w_q: bound.var(layer.w_q),
            w_k: bound.var(layer.w_k),
            w_v: bound.var(layer.w_v),
            w_o: bound.var(layer.w_o),
        };
        let attn = self_attention_on_tape(tape, h, &visible, &attn_vars, config.n_heads, config.rope_base, false)?;
        let (gated, layer_report) = gate_layer(tape, bound, layer, config, &layout, &instruction, &attn.heads, attn.output, h, &summaries)?;
        report = Some(layer_report);

        let r1 = tape.add(h, gated)?;
        let x1 = tape.layer_norm(r1, bound.var(layer.norm1.0), bound.var(layer.norm1.1), LAYER_NORM_EPS)?;
        let f = tape.matmul(x1, bound.var(layer.ffn_in.w))?;
        let f = tape.add_row(f, bound.var(layer.ffn_in.b))?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, bound.var(layer.ffn_out.w))?;
        let f = tape.add_row(f, bound.var(layer.ffn_out.b))?;
        let r2 = tape.add(x1, f)?;
        let x2 = tape.layer_norm(r2, bound.var(layer.norm2.0), bound.var(layer.norm2.1), LAYER_NORM_EPS)?;
        h = tape.merge_rows(h, x2, &restored)?;
    }
    Ok(FusionTape {
        layout,
        input: h0,
        output: h,
        report,
    })
}

/// Gate one layer's attention output. Returns the full `[L × d]` gated
/// matrix (non-content rows untouched) and the report.
#[allow(clippy::too_many_arguments)]
fn gate_layer(
    tape: &mut Tape,
    bound: &Bound,
    layer: &LayerLayout,
    config: &FusionConfig,
    layout: &SequenceLayout,
    instruction: &[usize],
    heads: &[Var],
    o: Var,
    h: Var,
    summaries: &BTreeMap<ModalityId, Var>,
) -> Result<(Var, GateReport)> {
    let mut report = GateReport {
        epsilon: config.epsilon,
        ..Default::default()
    };
    let ids: Vec<ModalityId> = layout.modalities().collect();
    if ids.is_empty() {
        return Ok((o, report));
    }
    let mass = instruction_mass(tape, heads, instruction)?;

    // Inner level.
    let mut w_vars: BTreeMap<ModalityId, Var> = BTreeMap::new();
    for &m in &ids {
        let span: Vec<usize> = layout.content_spans[&m].clone().collect();
        let inner = inner_weights_on_tape(tape, mass, &span, config.epsilon)?;
        report.lambda.insert(m, tape.value(inner.lambda).data().to_vec());
        let mut fallback = inner.fallback;
        let w = match (config.component_level, layer.cross_score) {
            (ComponentLevel::AttentionOnly, _) => {
                fallback = false;
                tape.constant(Tensor::row_vector(&vec![1.0 / span.len() as f64; span.len()]))
            }
            (_, Some((wq, wk))) => {
                fallback = false;
                let instr = rows_of(tape, h, layout.instruction_span.clone())?;
                let x_m = rows_of(tape, h, layout.content_spans[&m].clone())?;
                let proj = CrossAttnScoreVars {
                    w_q: bound.var(wq),
                    w_k: bound.var(wk),
                };
                cross_attn_token_weights_on_tape(tape, instr, x_m, &proj)?
            }
            _ => inner.w,
        };
        report.w.insert(m, tape.value(w).data().to_vec());
        report.inner_fallback.insert(m, fallback);
        w_vars.insert(m, w);
    }

    // Stream level.
    let mut beta_vars: BTreeMap<ModalityId, Var> = BTreeMap::new();
    if config.component_level == ComponentLevel::Full {
        let controls: Vec<_> = ids.iter().map(|m| layout.control_positions[m].clone()).collect();
        let stream = stream_weights_on_tape(tape, mass, &controls, config.stream_threshold)?;
        for (k, &m) in ids.iter().enumerate() {
            report.eta.insert(m, tape.value(stream.eta).data()[k]);
        }
        let (beta_row, fallback) = match &layer.mlp_score {
            Some(mlp) => {
                let instr = rows_of(tape, h, layout.instruction_span.clone())?;
                let vars = MlpScoreVars {
                    w1: bound.var(mlp.w1),
                    b1: bound.var(mlp.b1),
                    w2: bound.var(mlp.w2),
                    b2: bound.var(mlp.b2),
                };
                let s: Vec<Var> = ids.iter().map(|m| summaries[m]).collect();
                (mlp_stream_weights_on_tape(tape, instr, &s, &vars)?, false)
            }
            None => (stream.beta, stream.fallback),
        };
        report.stream_fallback = fallback;
        for (k, &m) in ids.iter().enumerate() {
            report.beta.insert(m, tape.value(beta_row).data()[k]);
            let b = if ids.len() == 1 {
                beta_row
            } else {
                tape.gather_cols(beta_row, &[k])?
            };
            beta_vars.insert(m, b);
        }
    } else {
        for &m in &ids {
            report.beta.insert(m, 1.0);
        }
    }

    if config.component_level == ComponentLevel::AttentionOnly {
        return Ok((o, report));
    }

    // Splice gated content rows back between the untouched rows.
    let l = layout.len();
    let mut parts = Vec::new();
    let mut cursor = 0;
    for &m in &ids {
        let span = layout.content_spans[&m].clone();
        if span.start > cursor {
            parts.push(rows_of(tape, o, cursor..span.start)?);
        }
        let o_m = rows_of(tape, o, span.clone())?;
        let w = w_vars[&m];
        let injection = match (config.gate_variant, layer.tanh_gates) {
            (GateVariant::FlamingoTanh, Some(g)) => Injection::Tanh {
                gate: tape.gather_cols(bound.var(g), &[m - 1])?,
            },
            (GateVariant::NoResidual, _) => Injection::NoResidual {
                w,
                beta: beta_or_one(tape, &beta_vars, m),
            },
            _ => Injection::Residual {
                w,
                beta: beta_or_one(tape, &beta_vars, m),
            },
        };
        parts.push(apply_gating_on_tape(tape, o_m, injection)?);
        cursor = span.end;
    }
    if cursor < l {
        parts.push(rows_of(tape, o, cursor..l)?);
    }
    Ok((tape.concat_rows(&parts)?, report))
}

fn beta_or_one(tape: &mut Tape, betas: &BTreeMap<ModalityId, Var>, m: ModalityId) -> Var {
    match betas.get(&m) {
        Some(&b) => b,
        None => tape.constant(Tensor::scalar(1.0)),
    }
}

// ---------------------------------------------------------------------------
// Value-level entry points.

/// Inputs of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSample {
    pub prompt: Option<Tensor>,
    pub instruction: Tensor,
    pub features: Vec<(ModalityId, Tensor)>,
    /// Absent streams represented by masked zero placeholders: `(id, tokens)`.
    pub placeholders: Vec<(ModalityId, usize)>,
}

impl FusionSample {
    pub fn new(instruction: Tensor, features: Vec<(ModalityId, Tensor)>) -> Self {
        FusionSample {
            prompt: None,
            instruction,
            features,
            placeholders: Vec::new(),
        }
    }

    fn placeholder_rows(&self) -> usize {
        self.placeholders.iter().map(|p| p.1).sum()
    }

    /// Unpadded sequence length for the given configuration.
    pub fn sequence_len(&self, config: &FusionConfig) -> usize {
        let ctrl = if config.uses_control_tokens() { config.n_control_tokens } else { 0 };
        self.prompt.as_ref().map_or(0, Tensor::rows)
            + self.instruction.rows()
            + self.features.iter().map(|(_, f)| f.rows() + ctrl).sum::<usize>()
            + self.placeholder_rows()
    }
}

/// The `[T × d_m] → [T × d]` projector of stream `id`.
pub fn project_modality(
    features: &Tensor,
    id: ModalityId,
    store: &ParamStore,
    params: &FusionParams,
) -> Result<Tensor> {
    let proj = params
        .projectors
        .get(id.wrapping_sub(1))
        .ok_or_else(|| Error::Config(format!("unknown modality id {id}")))?;
    let w = store.get(proj.w);
    if !features.is_matrix() || features.cols() != w.rows() {
        return Err(Error::dim("project_modality", w.shape(), features.shape()));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let f = tape.constant(features.clone());
    let x = project_on_tape(&mut tape, &bound, proj, f)?;
    Ok(tape.value(x).clone())
}

fn run_sample(
    sample: &FusionSample,
    extra_tail: usize,
    store: &ParamStore,
    params: &FusionParams,
    config: &FusionConfig,
) -> Result<(TokenSequence, Option<GateReport>)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let prompt = sample.prompt.as_ref().map(|p| tape.constant(p.clone()));
    let instruction = tape.constant(sample.instruction.clone());
    let features: Vec<(ModalityId, Var)> = sample
        .features
        .iter()
        .map(|(id, f)| (*id, tape.constant(f.clone())))
        .collect();
    let out = fusion_forward_on_tape(
        &mut tape,
        &bound,
        params,
        config,
        &FusionInputVars {
            prompt,
            instruction,
            features: &features,
            masked_tail: sample.placeholder_rows() + extra_tail,
        },
    )?;
    Ok((
        TokenSequence {
            embeddings: tape.value(out.output).clone(),
            layout: out.layout,
        },
        out.report,
    ))
}

/// Fused sequence and gate report of one sample. The report is `None` when the
/// block is disabled (`concat-only`).
pub fn fusion_forward(
    sample: &FusionSample,
    store: &ParamStore,
    params: &FusionParams,
    config: &FusionConfig,
) -> Result<(TokenSequence, Option<GateReport>)> {
    run_sample(sample, 0, store, params, config)
}

/// Run several samples right-padded to a common length. Each result is
/// trimmed back to its own length and matches [`fusion_forward`] bit for bit.
pub fn fusion_forward_batch(
    samples: &[FusionSample],
    store: &ParamStore,
    params: &FusionParams,
    config: &FusionConfig,
) -> Result<Vec<(TokenSequence, Option<GateReport>)>> {
    let max_len = samples.iter().map(|s| s.sequence_len(config)).max().unwrap_or(0);
    samples
        .iter()
        .map(|s| {
            let own = s.sequence_len(config);
            let (mut seq, report) = run_sample(s, max_len - own, store, params, config)?;
            seq.embeddings = seq.rows(0..own);
            seq.layout.modality_index.truncate(own);
            Ok((seq, report))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(variant: &str) -> (ParamStore, FusionParams, FusionConfig, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let config = FusionConfig::new(8, 2, vec![5, 3]).with_variant(variant.parse().unwrap());
        let mut store = ParamStore::new();
        let params = FusionParams::register(&mut store, &config, "fusion.", &mut rng).unwrap();
        (store, params, config, rng)
    }

    fn sample(rng: &mut ChaCha8Rng, t1: usize, t2: usize) -> FusionSample {
        FusionSample::new(
            init_matrix(rng, 3, 8, 1.0),
            vec![(1, init_matrix(rng, t1, 5, 1.0)), (2, init_matrix(rng, t2, 3, 1.0))],
        )
    }

    #[test]
    fn variant_names_parse() {
        for name in Variant::LADDER.iter().chain(Variant::GATE_FORMS.iter()) {
            let v: Variant = name.parse().unwrap();
            assert_eq!(&v.name(), name);
        }
        assert!("attention".parse::<Variant>().is_ok());
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn instruction_rows_restored_bit_exact() {
        let (store, params, config, mut rng) = setup("full");
        let s = sample(&mut rng, 4, 2);
        let (seq, report) = fusion_forward(&s, &store, &params, &config).unwrap();
        assert_eq!(seq.instruction(), s.instruction);
        let r = report.unwrap();
        assert!((r.beta.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_only_passes_projected_tokens_through() {
        let (store, params, config, mut rng) = setup("concat-only");
        let s = sample(&mut rng, 4, 2);
        let (seq, report) = fusion_forward(&s, &store, &params, &config).unwrap();
        assert!(report.is_none());
        let x1 = project_modality(&s.features[0].1, 1, &store, &params).unwrap();
        assert_eq!(seq.content(1).unwrap(), x1);
    }

    #[test]
    fn single_modality_beta_is_one() {
        let (store, params, config, mut rng) = setup("full");
        let s = FusionSample::new(init_matrix(&mut rng, 2, 8, 1.0), vec![(2, init_matrix(&mut rng, 3, 3, 1.0))]);
        let (_, report) = fusion_forward(&s, &store, &params, &config).unwrap();
        assert_eq!(report.unwrap().beta, [(2, 1.0)].into());
    }

    #[test]
    fn projector_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = FusionConfig::new(4, 2, vec![4]);
        let mut store = ParamStore::new();
        let params = FusionParams::register(&mut store, &config, "", &mut rng).unwrap();
        *store.get_mut(params.projectors[0].w) = Tensor::eye(4);
        *store.get_mut(params.projectors[0].b) = Tensor::zeros(&[1, 4]);
        let f = init_matrix(&mut rng, 3, 4, 1.0);
        assert_eq!(project_modality(&f, 1, &store, &params).unwrap(), f);
        assert_eq!(
            project_modality(&Tensor::zeros(&[2, 4]), 1, &store, &params).unwrap(),
            Tensor::zeros(&[2, 4])
        );
        assert!(matches!(
            project_modality(&Tensor::zeros(&[2, 3]), 1, &store, &params),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn unknown_modality_and_disallowed_empty_input() {
        let (store, params, mut config, mut rng) = setup("full");
        let s = FusionSample::new(init_matrix(&mut rng, 2, 8, 1.0), vec![(3, init_matrix(&mut rng, 2, 5, 1.0))]);
        assert!(matches!(fusion_forward(&s, &store, &params, &config), Err(Error::Config(_))));
        config.allow_instruction_only = false;
        let s = FusionSample::new(init_matrix(&mut rng, 2, 8, 1.0), vec![]);
        assert!(matches!(fusion_forward(&s, &store, &params, &config), Err(Error::Input(_))));
    }

    #[test]
    fn batch_matches_single_runs() {
        let (store, params, config, mut rng) = setup("full");
        let a = sample(&mut rng, 2, 1);
        let b = sample(&mut rng, 6, 4);
        let single_a = fusion_forward(&a, &store, &params, &config).unwrap();
        let single_b = fusion_forward(&b, &store, &params, &config).unwrap();
        let batch = fusion_forward_batch(&[a.clone(), b.clone()], &store, &params, &config).unwrap();
        assert_eq!(batch[0], single_a);
        assert_eq!(batch[1], single_b);
        let one = fusion_forward_batch(std::slice::from_ref(&a), &store, &params, &config).unwrap();
        assert_eq!(one[0], single_a);
        let swapped = fusion_forward_batch(&[b, a], &store, &params, &config).unwrap();
        assert_eq!(swapped[1], single_a);
    }

    #[test]
    fn attention_only_report_is_uniform_with_unit_beta() {
        let (store, params, config, mut rng) = setup("attention-only");
        let s = sample(&mut rng, 4, 2);
        let (_, report) = fusion_forward(&s, &store, &params, &config).unwrap();
        let r = report.unwrap();
        assert_eq!(r.w[&1], vec![0.25; 4]);
        assert_eq!(r.beta, [(1, 1.0), (2, 1.0)].into());
    }
}
