//! Toy end-to-end model: instruction embeddings, the fusion block and an
//! answer head, plus a versioned checkpoint format.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self_attention_on_tape, AttentionVars};
use crate::error::{Error, Result};
use crate::fusion::{
    fusion_forward_on_tape, init_matrix, Affine, FusionConfig, FusionInputVars, FusionParams,
    LAYER_NORM_EPS,
};
use crate::gating::GateReport;
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sequence::ModalityId;
use crate::synth::Episode;

pub const CHECKPOINT_MAGIC: &str = "gatefuse-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Mean-pool fused rows, then one affine map to answer logits.
    #[default]
    Classification,
    /// One causal attention layer over `[fused; answer prefix]`.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub instruction_vocab: usize,
    pub n_answers: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.instruction_vocab == 0 || self.n_answers < 2 {
            return Err(Error::Config("model needs a vocabulary and at least two answers".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLayout {
    /// `[(n_answers + 1) × d]`; the last row is the start token.
    pub answer_embedding: ParamId,
    pub attn: [ParamId; 4],
    pub norm1: (ParamId, ParamId),
    pub ffn_in: Affine,
    pub ffn_out: Affine,
    pub norm2: (ParamId, ParamId),
    pub output: Affine,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeadLayout {
    Classification(Affine),
    Decoder(DecoderLayout),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelLayout {
    pub embedding: ParamId,
    pub fusion: FusionParams,
    pub head: HeadLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: ModelLayout,
}

/// Forward result recorded on a tape.
pub struct ModelTape {
    /// `[1 × V]` for classification, `[T_ans × V]` for the decoder.
    pub logits: Var,
    pub report: Option<GateReport>,
}

fn affine(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> Affine {
    Affine {
        w: store.add(format!("{name}.w"), init_matrix(rng, rows, cols, (1.0 / rows as f64).sqrt())),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[1, cols])),
    }
}

fn affine_on_tape(tape: &mut Tape, bound: &Bound, a: &Affine, x: Var) -> Result<Var> {
    let y = tape.matmul(x, bound.var(a.w))?;
    tape.add_row(y, bound.var(a.b))
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.fusion.d;
        let embedding = store.add(
            "embedding.instruction",
            init_matrix(&mut rng, config.instruction_vocab, d, 1.0),
        );
        let fusion = FusionParams::register(&mut store, &config.fusion, "fusion.", &mut rng)?;
        let v = config.n_answers;
        let head = match config.head {
            HeadKind::Classification => HeadLayout::Classification(affine(&mut store, &mut rng, "head.output", d, v)),
            HeadKind::Decoder => {
                let answer_embedding = store.add("head.answer_embedding", init_matrix(&mut rng, v + 1, d, 1.0));
                let std = (1.0 / d as f64).sqrt();
                let attn = ["w_q", "w_k", "w_v", "w_o"]
                    .map(|n| store.add(format!("head.attn.{n}"), init_matrix(&mut rng, d, d, std)));
                let norm1 = (
                    store.add("head.norm1.gamma", Tensor::ones(&[1, d])),
                    store.add("head.norm1.beta", Tensor::zeros(&[1, d])),
                );
                let ffn_in = affine(&mut store, &mut rng, "head.ffn.in", d, config.fusion.ffn_hidden);
                let ffn_out = affine(&mut store, &mut rng, "head.ffn.out", config.fusion.ffn_hidden, d);
                let norm2 = (
                    store.add("head.norm2.gamma", Tensor::ones(&[1, d])),
                    store.add("head.norm2.beta", Tensor::zeros(&[1, d])),
                );
                let output = affine(&mut store, &mut rng, "head.output", d, v);
                HeadLayout::Decoder(DecoderLayout {
                    answer_embedding,
                    attn,
                    norm1,
                    ffn_in,
                    ffn_out,
                    norm2,
                    output,
                })
            }
        };
        Ok(Model {
            config,
            store,
            layout: ModelLayout { embedding, fusion, head },
        })
    }

    pub fn head_layout(&self) -> &HeadLayout {
        &self.layout.head
    }

    /// Which parameters a list of name prefixes freezes.
    pub fn frozen_mask(&self, prefixes: &[String]) -> Vec<bool> {
        self.store
            .ids()
            .map(|id| {
                let name = self.store.name(id);
                prefixes.iter().any(|p| name.starts_with(p.as_str()))
            })
            .collect()
    }

    fn check_episode(&self, episode: &Episode) -> Result<()> {
        if let Some(&bad) = episode.instruction_ids.iter().find(|&&t| t >= self.config.instruction_vocab) {
            return Err(Error::Input(format!(
                "instruction id {bad} outside vocabulary of {}",
                self.config.instruction_vocab
            )));
        }
        if episode.instruction_ids.is_empty() {
            return Err(Error::Input("empty instruction".into()));
        }
        Ok(())
    }

    /// Record the model on `tape`. `prefix` is the teacher-forced answer
    /// (ignored by the classification head).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        episode: &Episode,
        prefix: &[usize],
    ) -> Result<ModelTape> {
        self.check_episode(episode)?;
        let table = bound.var(self.layout.embedding);
        let instruction = tape.gather_rows(table, &episode.instruction_ids)?;
        let features: Vec<(ModalityId, Var)> = episode
            .features
            .iter()
            .map(|(&id, f)| (id, tape.constant(f.clone())))
            .collect();
        let fused = fusion_forward_on_tape(
            tape,
            bound,
            &self.layout.fusion,
            &self.config.fusion,
            &FusionInputVars {
                prompt: None,
                instruction,
                features: &features,
                masked_tail: 0,
            },
        )?;
        let visible: Vec<usize> = fused
            .layout
            .visible()
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
            .collect();
        let rows = if visible.len() == fused.layout.len() {
            fused.output
        } else {
            tape.gather_rows(fused.output, &visible)?
        };
        let logits = match &self.layout.head {
            HeadLayout::Classification(out) => {
                let pooled = tape.mean_rows(rows)?;
                affine_on_tape(tape, bound, out, pooled)?
            }
            HeadLayout::Decoder(dec) => self.decode_on_tape(tape, bound, dec, rows, prefix)?,
        };
        Ok(ModelTape {
            logits,
            report: fused.report,
        })
    }

    fn decode_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        dec: &DecoderLayout,
        fused: Var,
        prefix: &[usize],
    ) -> Result<Var> {
        let v = self.config.n_answers;
        if prefix.is_empty() {
            return Err(Error::Input("decoder needs at least one answer position".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("answer id {bad} outside vocabulary of {v}")));
        }
        let mut ids = vec![v];
        ids.extend_from_slice(&prefix[..prefix.len() - 1]);
        let answer = tape.gather_rows(bound.var(dec.answer_embedding), &ids)?;
        let n_fused = tape.value(fused).rows();
        let x = tape.concat_rows(&[fused, answer])?;
        let total = n_fused + ids.len();
        let w = AttentionVars {
            w_q: bound.var(dec.attn[0]),
            w_k: bound.var(dec.attn[1]),
            w_v: bound.var(dec.attn[2]),
            w_o: bound.var(dec.attn[3]),
        };
        let f = &self.config.fusion;
        let attn = self_attention_on_tape(tape, x, &vec![true; total], &w, f.n_heads, f.rope_base, true)?;
        let r1 = tape.add(x, attn.output)?;
        let x1 = tape.layer_norm(r1, bound.var(dec.norm1.0), bound.var(dec.norm1.1), LAYER_NORM_EPS)?;
        let h = affine_on_tape(tape, bound, &dec.ffn_in, x1)?;
        let h = tape.gelu(h);
        let h = affine_on_tape(tape, bound, &dec.ffn_out, h)?;
        let r2 = tape.add(x1, h)?;
        let x2 = tape.layer_norm(r2, bound.var(dec.norm2.0), bound.var(dec.norm2.1), LAYER_NORM_EPS)?;
        let steps = tape.slice_rows(x2, n_fused..total)?;
        affine_on_tape(tape, bound, &dec.output, steps)
    }

    /// Target answer sequence of an episode.
    pub fn targets(episode: &Episode) -> Vec<usize> {
        vec![episode.answer]
    }

    /// Logits and gate report without gradient tracking.
    pub fn forward(&self, episode: &Episode) -> Result<(Tensor, Option<GateReport>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &bound, episode, &Self::targets(episode))?;
        Ok((tape.value(out.logits).clone(), out.report))
    }

    /// Loss and per-parameter gradients (store order) for one episode.
    pub fn loss_and_gradients(&self, episode: &Episode) -> Result<(f64, Vec<Tensor>, Option<GateReport>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, true);
        let targets = Self::targets(episode);
        let out = self.forward_on_tape(&mut tape, &bound, episode, &targets)?;
        let loss = tape.cross_entropy(out.logits, &targets)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        Ok((value, bound.gradients(&grads), out.report))
    }

    /// Greedy argmax answer and gate report.
    pub fn predict(&self, episode: &Episode) -> Result<(Vec<usize>, Option<GateReport>)> {
        match self.layout.head {
            HeadLayout::Classification(_) => {
                let (logits, report) = self.forward(episode)?;
                Ok((vec![argmax(logits.row(0))], report))
            }
            HeadLayout::Decoder(_) => {
                let n = Self::targets(episode).len();
                let mut answer: Vec<usize> = Vec::with_capacity(n);
                let mut report = None;
                for step in 0..n {
                    let mut prefix = answer.clone();
                    prefix.push(0);
                    let mut tape = Tape::new();
                    let bound = self.store.bind(&mut tape, false);
                    let out = self.forward_on_tape(&mut tape, &bound, episode, &prefix)?;
                    answer.push(argmax(tape.value(out.logits).row(step)));
                    report = out.report;
                }
                Ok((answer, report))
            }
        }
    }

    /// Copy with every parameter rounded through 32-bit precision.
    pub fn rounded(&self) -> Model {
        Model {
            config: self.config.clone(),
            store: self.store.rounded_to_f32(),
            layout: self.layout.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .store
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Artifact(e.to_string()))?;
        let mut bytes = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{json}\n").into_bytes();
        for t in self.store.tensors() {
            for &x in t.data() {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let bad = |m: String| Error::Artifact(format!("{}: {m}", path.display()));
        let mut magic = String::new();
        reader.read_line(&mut magic).map_err(|e| Error::io(path, e))?;
        let mut parts = magic.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("not a checkpoint file".into()));
        }
        let version: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("format_version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let mut json = String::new();
        reader.read_line(&mut json).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&json).map_err(|e| bad(format!("header: {e}")))?;
        let mut model = Model::new(header.config, 0).map_err(|e| bad(format!("config: {e}")))?;
        if header.params.len() != model.store.len() {
            return Err(bad(format!(
                "{} parameters in header, configuration defines {}",
                header.params.len(),
                model.store.len()
            )));
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let mut offset = 0;
        for (entry, id) in header.params.iter().zip(model.store.ids().collect::<Vec<_>>()) {
            let t = model.store.get_mut(id);
            if entry.shape != t.shape() {
                return Err(bad(format!(
                    "parameter `{}` has shape {:?}, configuration expects {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let n = t.numel() * 4;
            let chunk = payload
                .get(offset..offset + n)
                .ok_or_else(|| bad(format!("payload truncated inside `{}`", entry.name)))?;
            offset += n;
            for (x, b) in t.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
                *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            }
        }
        for (entry, id) in header.params.iter().zip(model.store.ids()) {
            if entry.name != model.store.name(id) {
                return Err(bad(format!("parameter `{}` not defined by configuration", entry.name)));
            }
        }
        if offset != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - offset)));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of `logits[T × V]` against `targets`.
pub fn loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = tape.cross_entropy(l, targets)?;
    Ok(tape.value(out).data()[0])
}
