//! AdamW with a warmup + cosine schedule, size-damped multi-dataset sampling
//! and early stopping on mean validation accuracy.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalreport::evaluate;
use crate::model::Model;
use crate::numerics::Tensor;
use crate::sequence::ModalityId;
use crate::synth::{Dataset, Episode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub alpha: f64,
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    /// Parameter-name prefixes excluded from updates.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            warmup_ratio: 0.03,
            total_steps: 2000,
            batch_size: 16,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 0.5,
            eval_interval: 100,
            early_stop_patience: 0,
            clip_norm: 1.0,
            seed: 0,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("train.warmup_ratio must lie in [0, 1)".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("train.alpha must be non-negative".into()));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("train.batch_size and train.eval_interval must be positive".into()));
        }
        if !(self.peak_lr >= 0.0 && self.clip_norm >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("train.peak_lr, clip_norm and weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }
}

pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let w = config.warmup_steps();
    let total = config.total_steps;
    if step < w {
        config.peak_lr * step as f64 / w as f64
    } else if total <= w {
        config.peak_lr
    } else {
        let progress = (step.min(total) - w) as f64 / (total - w) as f64;
        config.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// `P(i) = N_i^alpha / Σ_j N_j^alpha`.
pub fn alpha_probabilities(sizes: &[usize], alpha: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Config("no datasets to sample from".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Config("every dataset needs at least one training episode".into()));
    }
    let weights: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(alpha)).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

pub fn alpha_sample(sizes: &[usize], alpha: f64, rng: &mut impl Rng) -> Result<usize> {
    let probs = alpha_probabilities(sizes, alpha)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update with decoupled decay. `frozen[i]` leaves parameter `i`
/// and its moments untouched.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
    frozen: &[bool],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != frozen.len() {
        return Err(Error::dim("adamw_step", &[params.len()], &[grads.len()]));
    }
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        if frozen[i] {
            continue;
        }
        if params[i].shape() != grads[i].shape() {
            return Err(Error::dim("adamw_step", params[i].shape(), grads[i].shape()));
        }
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(grads[i].data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * config.weight_decay * *p;
            *p -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Scale `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

/// Mean loss and mean gradients over a batch. Per-sample work runs in
/// parallel; the reduction order is fixed.
pub fn batch_gradients(model: &Model, batch: &[&Episode]) -> Result<(f64, Vec<Tensor>)> {
    let results: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|e| model.loss_and_gradients(e).map(|(l, g, _)| (l, g)))
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Input("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, x) in grads.iter_mut().zip(&g) {
            acc.add_assign(x);
        }
    }
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok((loss / n, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub lr: f64,
    pub val_accuracy: Vec<f64>,
    /// Mean `beta` per modality on the validation splits; empty without gates.
    pub mean_beta: BTreeMap<ModalityId, f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub dataset_names: Vec<String>,
    pub modalities: Vec<ModalityId>,
    pub has_gates: bool,
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["step".to_string(), "loss".into(), "lr".into()];
        header.extend(self.dataset_names.iter().map(|n| format!("val_acc_{n}")));
        if self.has_gates {
            header.extend(self.modalities.iter().map(|m| format!("mean_beta_{m}")));
        }
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), r.loss.to_string(), r.lr.to_string()];
            rec.extend(r.val_accuracy.iter().map(f64::to_string));
            if self.has_gates {
                rec.extend(
                    self.modalities
                        .iter()
                        .map(|m| r.mean_beta.get(m).map_or(String::new(), f64::to_string)),
                );
            }
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Artifact(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters (rounded to 32-bit) that scored the best mean validation accuracy.
    pub best: Model,
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub history: History,
    pub steps_run: usize,
}

/// Named dataset fed to [`train`].
pub struct TrainSet<'a> {
    pub name: String,
    pub data: &'a Dataset,
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn validation(model: &Model, sets: &[TrainSet<'_>], history: &History) -> Result<(Vec<f64>, BTreeMap<ModalityId, f64>)> {
    let mut accs = Vec::with_capacity(sets.len());
    let mut betas: BTreeMap<ModalityId, Vec<f64>> = BTreeMap::new();
    for s in sets {
        let (result, samples) = evaluate(model, s.data.val())?;
        accs.push(result.accuracy);
        for sample in samples {
            if let Some(r) = sample.report {
                for (&m, &b) in &r.beta {
                    betas.entry(m).or_default().push(b);
                }
            }
        }
    }
    let mean_beta = if history.has_gates {
        betas
            .into_iter()
            .map(|(m, v)| (m, v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    } else {
        BTreeMap::new()
    };
    Ok((accs, mean_beta))
}

/// Train `model` in place and return the best snapshot.
pub fn train(model: &mut Model, sets: &[TrainSet<'_>], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if sets.is_empty() {
        return Err(Error::Config("no datasets to train on".into()));
    }
    for s in sets {
        if s.data.val().is_empty() {
            return Err(Error::Input(format!("dataset `{}` has an empty validation split", s.name)));
        }
    }
    let sizes: Vec<usize> = sets.iter().map(|s| s.data.train().len()).collect();
    alpha_probabilities(&sizes, config.alpha)?;
    let frozen = model.frozen_mask(&config.freeze);
    let has_gates = model.config.fusion.component_level != crate::fusion::ComponentLevel::ConcatOnly;
    let mut history = History {
        dataset_names: sets.iter().map(|s| s.name.clone()).collect(),
        modalities: model.config.fusion.declared(),
        has_gates,
        rows: Vec::new(),
    };

    let mut best = model.rounded();
    let mut best_step = 0;
    let mut best_val = f64::NEG_INFINITY;
    if config.total_steps == 0 {
        return Ok(TrainOutcome {
            best,
            best_step,
            best_val_accuracy: best_val,
            history,
            steps_run: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cursors: Vec<Cursor> = sizes
        .iter()
        .map(|&n| Cursor {
            order: (0..n).collect(),
            pos: n,
        })
        .collect();
    let mut adam = AdamState::new(model.store.tensors());
    let mut stale = 0;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut step = 0;
    while step < config.total_steps {
        step += 1;
        let k = alpha_sample(&sizes, config.alpha, &mut rng)?;
        let train = sets[k].data.train();
        let batch: Vec<&Episode> = (0..config.batch_size)
            .map(|_| &train[cursors[k].next(&mut rng)])
            .collect();
        let (loss, mut grads) = batch_gradients(model, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        clip_global_norm(&mut grads, config.clip_norm);
        let lr = lr_at(step, config);
        adamw_step(model.store.tensors_mut(), &grads, &mut adam, lr, config, &frozen)?;
        loss_sum += loss;
        loss_count += 1;

        if step % config.eval_interval == 0 || step == config.total_steps {
            let snapshot = model.rounded();
            let (val_accuracy, mean_beta) = validation(&snapshot, sets, &history)?;
            let mean = val_accuracy.iter().sum::<f64>() / val_accuracy.len() as f64;
            history.rows.push(HistoryRow {
                step,
                loss: loss_sum / loss_count as f64,
                lr,
                val_accuracy,
                mean_beta,
            });
            loss_sum = 0.0;
            loss_count = 0;
            if mean > best_val {
                best_val = mean;
                best_step = step;
                best = snapshot;
                stale = 0;
            } else {
                stale += 1;
                if config.early_stop_patience > 0 && stale >= config.early_stop_patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_step,
        best_val_accuracy: best_val,
        history,
        steps_run: step,
    })
}

/// Append-only helper used by the command line for human-readable progress.
pub fn log_row(out: &mut impl Write, row: &HistoryRow) {
    let accs: Vec<String> = row.val_accuracy.iter().map(|a| format!("{a:.4}")).collect();
    let _ = writeln!(out, "step {:>6}  loss {:.5}  lr {:.2e}  val_acc [{}]", row.step, row.loss, row.lr, accs.join(", "));
}
