//! Accuracy, gate alignment and the variant comparison harness.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::Variant;
use crate::gating::GateReport;
use crate::model::{Model, ModelConfig};
use crate::sequence::ModalityId;
use crate::synth::{Dataset, Episode};
use crate::trainer::{csv_error, train, TrainConfig, TrainSet};

/// Anything that answers an episode and may expose its gates.
pub trait Predictor: Sync {
    fn predict(&self, episode: &Episode) -> Result<(Vec<usize>, Option<GateReport>)>;
}

impl Predictor for Model {
    fn predict(&self, episode: &Episode) -> Result<(Vec<usize>, Option<GateReport>)> {
        Model::predict(self, episode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `None` when the model has no gates.
    pub gate_top1_alignment: Option<f64>,
    /// `mean_beta[queried][m]`: mean `beta_m` over episodes querying `queried`.
    pub mean_beta: BTreeMap<ModalityId, BTreeMap<ModalityId, f64>>,
    pub fallback_rate: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub prediction: Vec<usize>,
    pub correct: bool,
    pub report: Option<GateReport>,
}

/// Sum after sorting so the result does not depend on sample order.
fn ordered_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn evaluate(predictor: &impl Predictor, episodes: &[Episode]) -> Result<(EvalResult, Vec<SampleOutcome>)> {
    if episodes.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let samples: Vec<SampleOutcome> = episodes
        .par_iter()
        .map(|e| {
            let (prediction, report) = predictor.predict(e)?;
            let correct = prediction == [e.answer];
            Ok(SampleOutcome {
                prediction,
                correct,
                report,
            })
        })
        .collect::<Result<_>>()?;
    let n = samples.len();
    let correct = samples.iter().filter(|s| s.correct).count();
    let mut aligned = 0;
    let mut gated = 0;
    let mut fallbacks = 0;
    let mut betas: BTreeMap<ModalityId, BTreeMap<ModalityId, Vec<f64>>> = BTreeMap::new();
    for (s, e) in samples.iter().zip(episodes) {
        let Some(r) = &s.report else { continue };
        gated += 1;
        if r.top_modality().is_some_and(|m| e.informative.contains(&m)) {
            aligned += 1;
        }
        if r.any_fallback() {
            fallbacks += 1;
        }
        let per = betas.entry(e.queried()).or_default();
        for (&m, &b) in &r.beta {
            per.entry(m).or_default().push(b);
        }
    }
    let result = EvalResult {
        accuracy: correct as f64 / n as f64,
        gate_top1_alignment: (gated > 0).then(|| aligned as f64 / gated as f64),
        mean_beta: betas
            .into_iter()
            .map(|(q, per)| (q, per.into_iter().map(|(m, v)| (m, ordered_mean(v))).collect()))
            .collect(),
        fallback_rate: if gated > 0 { fallbacks as f64 / gated as f64 } else { 0.0 },
        n,
    };
    Ok((result, samples))
}

pub fn write_summary_csv(result: &EvalResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["n".to_string(), "accuracy".into(), "gate_top1_alignment".into(), "fallback_rate".into()];
    let mut row = vec![
        result.n.to_string(),
        result.accuracy.to_string(),
        result.gate_top1_alignment.map_or(String::new(), |a| a.to_string()),
        result.fallback_rate.to_string(),
    ];
    for (q, per) in &result.mean_beta {
        for (m, b) in per {
            header.push(format!("mean_beta_q{q}_m{m}"));
            row.push(b.to_string());
        }
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    w.write_record(&row).map_err(|e| csv_error(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per sample: id, prediction, answer, then the gate report columns.
pub fn write_gate_csv(
    samples: &[SampleOutcome],
    episodes: &[Episode],
    modalities: &[ModalityId],
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["prediction".to_string(), "answer".into(), "queried".into()];
    let gate_header = GateReport::csv_header(modalities);
    header.splice(0..0, gate_header.iter().take(1).cloned());
    header.extend(gate_header.into_iter().skip(1));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, (s, e)) in samples.iter().zip(episodes).enumerate() {
        let pred: Vec<String> = s.prediction.iter().map(usize::to_string).collect();
        let mut rec = vec![i.to_string(), pred.join(" "), e.answer.to_string(), e.queried().to_string()];
        match &s.report {
            Some(r) => rec.extend(r.csv_row(i, modalities).into_iter().skip(1)),
            None => rec.extend(std::iter::repeat_n(String::new(), header.len() - 4)),
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Text histogram of `beta_m` over the samples, `bins` buckets on [0, 1].
pub fn beta_histogram(samples: &[SampleOutcome], modality: ModalityId, bins: usize) -> String {
    let mut counts = vec![0usize; bins.max(1)];
    for s in samples {
        if let Some(b) = s.report.as_ref().and_then(|r| r.beta.get(&modality)) {
            let i = ((b * counts.len() as f64) as usize).min(counts.len() - 1);
            counts[i] += 1;
        }
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    let mut out = format!("beta_{modality}\n");
    for (i, &c) in counts.iter().enumerate() {
        let lo = i as f64 / counts.len() as f64;
        let hi = (i + 1) as f64 / counts.len() as f64;
        let bar = "#".repeat(c * 40 / peak);
        out += &format!("[{lo:.2}, {hi:.2}) {c:>6} {bar}\n");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantRun {
    pub seed: u64,
    pub accuracy: f64,
    pub alignment: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantRow {
    pub variant: Variant,
    pub runs: Vec<VariantRun>,
}

/// Mean and sample standard deviation; `None` std for a single value.
pub fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

impl VariantRow {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }

    pub fn alignments(&self) -> Option<Vec<f64>> {
        self.runs.iter().map(|r| r.alignment).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<VariantRow>,
}

impl ComparisonTable {
    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record([
            "variant",
            "n_seeds",
            "accuracy_mean",
            "accuracy_std",
            "alignment_mean",
            "alignment_std",
        ])
        .map_err(|e| csv_error(path, e))?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            let (am, asd) = mean_std(&r.accuracies());
            let (gm, gsd) = match r.alignments() {
                Some(a) => {
                    let (m, s) = mean_std(&a);
                    (Some(m), s)
                }
                None => (None, None),
            };
            w.write_record([
                r.variant.name(),
                r.runs.len().to_string(),
                am.to_string(),
                opt(asd),
                opt(gm),
                opt(gsd),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Train every variant on every seed under identical data and budget and
/// score the best checkpoint on the test split.
pub fn compare_variants(
    variants: &[Variant],
    base: &ModelConfig,
    train_config: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
) -> Result<ComparisonTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one variant and one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = run_variant(variant, base, train_config, data, seed)?;
            runs.push(run);
        }
        rows.push(VariantRow { variant, runs });
    }
    Ok(ComparisonTable { rows })
}

/// One training run of `variant` seeded by `seed`, scored on the test split.
pub fn run_variant(
    variant: Variant,
    base: &ModelConfig,
    train_config: &TrainConfig,
    data: &Dataset,
    seed: u64,
) -> Result<VariantRun> {
    let mut config = base.clone();
    config.fusion = config.fusion.with_variant(variant);
    let mut model = Model::new(config, seed)?;
    let tc = TrainConfig {
        seed,
        ..train_config.clone()
    };
    let outcome = train(
        &mut model,
        &[TrainSet {
            name: "data".into(),
            data,
        }],
        &tc,
    )?;
    let (result, _) = evaluate(&outcome.best, data.test())?;
    Ok(VariantRun {
        seed,
        accuracy: result.accuracy,
        alignment: result.gate_top1_alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, TaskSpec};

    struct Oracle;

    impl Predictor for Oracle {
        fn predict(&self, e: &Episode) -> Result<(Vec<usize>, Option<GateReport>)> {
            let mut r = GateReport::default();
            for &m in e.features.keys() {
                r.beta.insert(m, if e.informative.contains(&m) { 1.0 } else { 0.0 });
            }
            Ok((vec![e.answer], Some(r)))
        }
    }

    #[test]
    fn oracle_scores_perfectly() {
        let ds = generate_dataset(&TaskSpec::default(), 50, 1).unwrap();
        let (r, samples) = evaluate(&Oracle, &ds.episodes).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.gate_top1_alignment, Some(1.0));
        assert_eq!(r.fallback_rate, 0.0);
        assert_eq!(samples.len(), 50);
        assert_eq!(r.mean_beta[&1][&1], 1.0);
    }

    #[test]
    fn shuffled_split_gives_identical_result() {
        let ds = generate_dataset(&TaskSpec::default(), 40, 2).unwrap();
        let config = ModelConfig {
            fusion: crate::fusion::FusionConfig::new(8, 2, vec![8, 8]),
            instruction_vocab: 10,
            n_answers: 4,
            head: Default::default(),
        };
        let m = Model::new(config, 3).unwrap();
        let (a, _) = evaluate(&m, &ds.episodes).unwrap();
        let mut rev = ds.episodes.clone();
        rev.reverse();
        let (b, _) = evaluate(&m, &rev).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_split_rejected() {
        assert!(matches!(evaluate(&Oracle, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn mean_std_single_value_has_no_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, None));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }
}
