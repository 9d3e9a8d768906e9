//! Unified multimodal token layout.
//!
//! A sequence is laid out as
//! `[system prompt; instruction; ctrl_1; X_1; ...; ctrl_N; X_N; masked tail]`
//! where the system prompt and the masked tail (absent-modality placeholders
//! and batch padding) carry modality index `-1`.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Identifier of a non-text stream, starting at 1.
pub type ModalityId = usize;

pub const INSTRUCTION_INDEX: i32 = 0;
pub const MASKED_INDEX: i32 = -1;

/// Position bookkeeping for one assembled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub modality_index: Vec<i32>,
    pub prompt_span: Range<usize>,
    pub instruction_span: Range<usize>,
    pub control_positions: BTreeMap<ModalityId, Range<usize>>,
    pub content_spans: BTreeMap<ModalityId, Range<usize>>,
}

/// Lengths of one present stream: control tokens followed by content tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamShape {
    pub id: ModalityId,
    pub n_control: usize,
    pub n_content: usize,
}

impl SequenceLayout {
    pub fn build(
        prompt_len: usize,
        instruction_len: usize,
        streams: &[StreamShape],
        masked_tail: usize,
    ) -> Result<Self> {
        let mut prev: Option<ModalityId> = None;
        for s in streams {
            if s.id == 0 {
                return Err(Error::Layout("modality ids start at 1".into()));
            }
            if let Some(p) = prev {
                if s.id == p {
                    return Err(Error::Layout(format!("duplicate modality id {}", s.id)));
                }
                if s.id < p {
                    return Err(Error::Layout(format!(
                        "modality ids out of order: {} after {p}",
                        s.id
                    )));
                }
            }
            if s.n_content == 0 {
                return Err(Error::EmptyModality(s.id));
            }
            prev = Some(s.id);
        }

        let mut modality_index = vec![MASKED_INDEX; prompt_len];
        modality_index.extend(std::iter::repeat_n(INSTRUCTION_INDEX, instruction_len));
        let mut control_positions = BTreeMap::new();
        let mut content_spans = BTreeMap::new();
        let mut cursor = prompt_len + instruction_len;
        for s in streams {
            control_positions.insert(s.id, cursor..cursor + s.n_control);
            cursor += s.n_control;
            content_spans.insert(s.id, cursor..cursor + s.n_content);
            cursor += s.n_content;
            modality_index.extend(std::iter::repeat_n(s.id as i32, s.n_control + s.n_content));
        }
        modality_index.extend(std::iter::repeat_n(MASKED_INDEX, masked_tail));
        Ok(SequenceLayout {
            modality_index,
            prompt_span: 0..prompt_len,
            instruction_span: prompt_len..prompt_len + instruction_len,
            control_positions,
            content_spans,
        })
    }

    pub fn len(&self) -> usize {
        self.modality_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality_index.is_empty()
    }

    pub fn modalities(&self) -> impl Iterator<Item = ModalityId> + '_ {
        self.content_spans.keys().copied()
    }

    pub fn instruction_positions(&self) -> Vec<usize> {
        self.instruction_span.clone().collect()
    }

    /// Positions that participate as attention keys.
    pub fn visible(&self) -> Vec<bool> {
        self.modality_index.iter().map(|&m| m >= 0).collect()
    }

    /// Positions whose fused output is replaced by the input embedding.
    pub fn restored(&self) -> Vec<bool> {
        self.modality_index
            .iter()
            .map(|&m| m == INSTRUCTION_INDEX || m == MASKED_INDEX)
            .collect()
    }

    /// Same layout with `extra` masked rows appended.
    pub fn padded(&self, extra: usize) -> SequenceLayout {
        let mut out = self.clone();
        out.modality_index
            .extend(std::iter::repeat_n(MASKED_INDEX, extra));
        out
    }
}

/// Embeddings plus their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Tensor,
    pub layout: SequenceLayout,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn rows(&self, span: Range<usize>) -> Tensor {
        let d = self.embeddings.cols();
        let data = self.embeddings.data()[span.start * d..span.end * d].to_vec();
        Tensor::new(vec![span.len(), d], data).expect("span inside sequence")
    }

    pub fn content(&self, id: ModalityId) -> Option<Tensor> {
        self.layout.content_spans.get(&id).map(|s| self.rows(s.clone()))
    }

    pub fn instruction(&self) -> Tensor {
        self.rows(self.layout.instruction_span.clone())
    }
}

/// Which keys are visible to attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub visible: Vec<bool>,
}

impl AttentionMask {
    pub fn all_visible(len: usize) -> Self {
        AttentionMask {
            visible: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }
}

fn check_width(d: usize, t: &Tensor) -> Result<()> {
    if !t.is_matrix() || t.cols() != d {
        return Err(Error::dim("assemble_sequence", &[d], t.shape()));
    }
    Ok(())
}

/// Lay out `[instruction; ctrl_1; X_1; ...]`. `control_tokens[k]` belongs to
/// the `k`-th entry of `modality_tokens` and may hold one or more rows.
pub fn assemble_sequence(
    instruction: &Tensor,
    modality_tokens: &[(ModalityId, Tensor)],
    control_tokens: &[Tensor],
) -> Result<TokenSequence> {
    if control_tokens.len() != modality_tokens.len() {
        return Err(Error::Layout(format!(
            "{} control tokens for {} modalities",
            control_tokens.len(),
            modality_tokens.len()
        )));
    }
    let mut tape = Tape::new();
    let instr = tape.constant(instruction.clone());
    let streams: Vec<(ModalityId, Option<Var>, Var)> = modality_tokens
        .iter()
        .zip(control_tokens)
        .map(|((id, x), c)| (*id, Some(tape.constant(c.clone())), tape.constant(x.clone())))
        .collect();
    let (layout, h) = assemble_on_tape(&mut tape, None, instr, &streams, 0)?;
    Ok(TokenSequence {
        embeddings: tape.value(h).clone(),
        layout,
    })
}

/// Tape-level assembly shared by the fusion block. `streams` holds
/// `(id, control rows, content rows)`; `masked_tail` zero rows are appended.
/// Streams without control rows are laid out as bare content.
pub fn assemble_on_tape(
    tape: &mut Tape,
    prompt: Option<Var>,
    instruction: Var,
    streams: &[(ModalityId, Option<Var>, Var)],
    masked_tail: usize,
) -> Result<(SequenceLayout, Var)> {
    let d = tape.value(instruction).cols();
    check_width(d, tape.value(instruction))?;
    let mut parts = Vec::new();
    let prompt_len = match prompt {
        Some(p) => {
            check_width(d, tape.value(p))?;
            parts.push(p);
            tape.value(p).rows()
        }
        None => 0,
    };
    parts.push(instruction);
    let mut shapes = Vec::with_capacity(streams.len());
    for &(id, ctrl, content) in streams {
        check_width(d, tape.value(content))?;
        let n_control = match ctrl {
            Some(c) => {
                check_width(d, tape.value(c))?;
                parts.push(c);
                tape.value(c).rows()
            }
            None => 0,
        };
        shapes.push(StreamShape {
            id,
            n_control,
            n_content: tape.value(content).rows(),
        });
        parts.push(content);
    }
    let layout = SequenceLayout::build(
        prompt_len,
        tape.value(instruction).rows(),
        &shapes,
        masked_tail,
    )?;
    if masked_tail > 0 {
        parts.push(tape.constant(Tensor::zeros(&[masked_tail, d])));
    }
    let h = tape.concat_rows(&parts)?;
    Ok((layout, h))
}

/// Mask of length `padded_length`: positions past the sequence and positions
/// with modality index `-1` are hidden.
pub fn build_mask(layout: &SequenceLayout, padded_length: usize) -> Result<AttentionMask> {
    if padded_length < layout.len() {
        return Err(Error::Layout(format!(
            "padded length {padded_length} shorter than sequence {}",
            layout.len()
        )));
    }
    let mut visible = layout.visible();
    visible.resize(padded_length, false);
    Ok(AttentionMask { visible })
}
