//! Command-line front end: `gen`, `train`, `eval`, `gate-report`, `ablate`.
//!
//! Configuration comes from a TOML file with flat dotted keys
//! (`train.peak_lr = 1e-3`), then `--set key=value`, then dedicated flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalreport::{beta_histogram, compare_variants, evaluate, write_gate_csv, write_summary_csv};
use crate::fusion::{ControlSharing, FusionConfig, Variant};
use crate::gating::{DEFAULT_EPSILON, DEFAULT_STREAM_THRESHOLD};
use crate::attention::DEFAULT_ROPE_BASE;
use crate::model::{HeadKind, Model, ModelConfig};
use crate::synth::{describe, generate_dataset, load_dataset, save_dataset, Dataset, Episode, SplitName, TaskSpec};
use crate::trainer::{log_row, train, TrainConfig, TrainSet};

pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const THREADS_ENV: &str = "GATEFUSE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub n_episodes: usize,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection { n_episodes: 5000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub variant: String,
    pub head: HeadKind,
    pub n_control_tokens: usize,
    pub control_sharing: ControlSharing,
    pub epsilon: f64,
    pub stream_threshold: f64,
    /// 0 selects `4 d`.
    pub ffn_hidden: usize,
    pub rope_base: f64,
    pub projector_bias_std: f64,
    pub tied_qk_init: bool,
    pub allow_instruction_only: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 16,
            n_heads: 2,
            n_layers: 1,
            variant: "full".into(),
            head: HeadKind::Classification,
            n_control_tokens: 1,
            control_sharing: ControlSharing::Unified,
            epsilon: DEFAULT_EPSILON,
            stream_threshold: DEFAULT_STREAM_THRESHOLD,
            ffn_hidden: 0,
            rope_base: DEFAULT_ROPE_BASE,
            projector_bias_std: 2.0,
            tied_qk_init: true,
            allow_instruction_only: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: String,
    /// Empty, or `modality=<id>`.
    pub subset: String,
    pub hist_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: "test".into(),
            subset: String::new(),
            hist_bins: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            variants: Variant::LADDER.iter().map(|s| s.to_string()).collect(),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub gen: GenSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub paths: PathsSection,
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set a dotted `key` inside `table`, creating intermediate tables.
fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn toml_error(source: &str, e: toml::de::Error) -> Error {
    Error::Config(format!("{source}: {}", e.message()))
}

impl RunConfig {
    /// Load `path` (if any) and apply `key=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| toml_error(&p.display().to_string(), e))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let source = path.map_or("overrides".to_string(), |p| p.display().to_string());
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| toml_error(&source, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn variant(&self) -> Result<Variant> {
        self.model.variant.parse()
    }

    pub fn fusion_config(&self, modality_dims: Vec<usize>) -> Result<FusionConfig> {
        let m = &self.model;
        let mut f = FusionConfig::new(m.d, m.n_heads, modality_dims).with_variant(self.variant()?);
        f.n_layers = m.n_layers;
        f.epsilon = m.epsilon;
        f.stream_threshold = m.stream_threshold;
        if m.ffn_hidden > 0 {
            f.ffn_hidden = m.ffn_hidden;
        }
        f.rope_base = m.rope_base;
        f.n_control_tokens = m.n_control_tokens;
        f.control_sharing = m.control_sharing;
        f.allow_instruction_only = m.allow_instruction_only;
        f.projector_bias_std = m.projector_bias_std;
        f.tied_qk_init = m.tied_qk_init;
        f.validate()?;
        Ok(f)
    }

    /// Model configuration matching a dataset's task.
    pub fn model_config(&self, task: &TaskSpec) -> Result<ModelConfig> {
        let config = ModelConfig {
            fusion: self.fusion_config(task.modality_dims.clone())?,
            instruction_vocab: task.instruction_vocab(),
            n_answers: task.n_answers,
            head: self.model.head,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gatefuse", version, about = "Instruction-gated multimodal fusion: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML configuration with flat dotted keys.
    #[arg(long, visible_alias = "spec")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.total_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model variant and write the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a checkpoint and write summary and per-sample gate CSVs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: EvalTarget,
    },
    /// Per-sample gate CSV only, with optional text histograms.
    GateReport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: EvalTarget,
        /// Print a text histogram of beta per modality.
        #[arg(long)]
        hist: bool,
    },
    /// Train every listed variant over every seed and write a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Repeatable; replaces `ablate.variants`.
        #[arg(long)]
        variant: Vec<String>,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalTarget {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `modality=<id>` keeps episodes whose queried modalities include `<id>`.
    #[arg(long)]
    pub subset: Option<String>,
    /// `train`, `val` or `test`.
    #[arg(long)]
    pub split: Option<String>,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))
}

fn write_echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

/// Parse `modality=<id>`.
pub fn parse_subset(s: &str) -> Result<Option<usize>> {
    if s.is_empty() {
        return Ok(None);
    }
    let id = s
        .strip_prefix("modality=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config(format!("subset `{s}` is not modality=<id>")))?;
    Ok(Some(id))
}

pub fn subset_episodes(episodes: &[Episode], modality: Option<usize>) -> Vec<Episode> {
    episodes
        .iter()
        .filter(|e| modality.is_none_or(|m| e.informative.contains(&m)))
        .cloned()
        .collect()
}

/// Refuse a checkpoint whose configuration does not fit the dataset.
pub fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let c = &model.config;
    let t = &data.spec;
    let mismatch = |field: &str, a: String, b: String| {
        Err(Error::Artifact(format!("checkpoint field `{field}` is {a} but the dataset has {b}")))
    };
    if c.fusion.modality_dims != t.modality_dims {
        return mismatch("fusion.modality_dims", format!("{:?}", c.fusion.modality_dims), format!("{:?}", t.modality_dims));
    }
    if c.instruction_vocab != t.instruction_vocab() {
        return mismatch("instruction_vocab", c.instruction_vocab.to_string(), t.instruction_vocab().to_string());
    }
    if c.n_answers != t.n_answers {
        return mismatch("n_answers", c.n_answers.to_string(), t.n_answers.to_string());
    }
    Ok(())
}

fn cmd_gen(common: &Common, force: bool) -> Result<()> {
    let cfg = resolve(common)?;
    let out = require_out(common)?;
    if out.exists() {
        let nonempty = fs::read_dir(&out).map_err(|e| Error::io(&out, e))?.next().is_some();
        if nonempty && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    let ds = generate_dataset(&cfg.task, cfg.gen.n_episodes, cfg.seed)?;
    save_dataset(&ds, &out)?;
    write_echo(&cfg, &out)?;
    println!("{}: {}", out.display(), describe(&ds));
    Ok(())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    if paths.is_empty() {
        return Err(Error::Config("at least one --data directory is required".into()));
    }
    paths.iter().map(|p| load_dataset(p)).collect()
}

fn cmd_train(common: &Common, data: &[PathBuf], variant: Option<&str>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if !data.is_empty() {
        cfg.paths.data = data.to_vec();
    }
    if let Some(v) = variant {
        cfg.model.variant = v.to_string();
    }
    let out = require_out(common)?;
    let sets = load_all(&cfg.paths.data)?;
    let task = &sets[0].spec;
    for (p, s) in cfg.paths.data.iter().zip(&sets).skip(1) {
        if s.spec.modality_dims != task.modality_dims
            || s.spec.n_answers != task.n_answers
            || s.spec.instruction_vocab() != task.instruction_vocab()
        {
            return Err(Error::Config(format!("{} does not share the first dataset's shapes", p.display())));
        }
    }
    let mut model = Model::new(cfg.model_config(task)?, cfg.seed)?;
    write_echo(&cfg, &out)?;
    let named: Vec<TrainSet<'_>> = cfg
        .paths
        .data
        .iter()
        .zip(&sets)
        .enumerate()
        .map(|(i, (p, d))| TrainSet {
            name: p
                .file_name()
                .map_or_else(|| format!("data{i}"), |n| n.to_string_lossy().into_owned()),
            data: d,
        })
        .collect();
    let outcome = train(&mut model, &named, &cfg.train_config())?;
    let mut stderr = std::io::stderr();
    for row in &outcome.history.rows {
        log_row(&mut stderr, row);
    }
    outcome.best.save(&out.join(CHECKPOINT_FILE))?;
    outcome.history.write_csv(&out.join(HISTORY_FILE))?;
    println!(
        "{}: best mean val accuracy {:.4} at step {} ({} steps run)",
        out.display(),
        outcome.best_val_accuracy,
        outcome.best_step,
        outcome.steps_run
    );
    Ok(())
}

fn cmd_eval(common: &Common, target: &EvalTarget, summary: bool, hist: bool) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(c) = &target.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if let Some(d) = &target.data {
        cfg.paths.data = vec![d.clone()];
    }
    if let Some(s) = &target.subset {
        cfg.eval.subset = s.clone();
    }
    if let Some(s) = &target.split {
        cfg.eval.split = s.clone();
    }
    let checkpoint = cfg
        .paths
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let data_path = cfg
        .paths
        .data
        .first()
        .cloned()
        .ok_or_else(|| Error::Config("--data is required".into()))?;
    let split: SplitName = cfg.eval.split.parse()?;
    let subset = parse_subset(&cfg.eval.subset)?;
    let model = Model::load(&checkpoint)?;
    let data = load_dataset(&data_path)?;
    check_compatible(&model, &data)?;
    let episodes = subset_episodes(data.get(split), subset);
    let (result, samples) = evaluate(&model, &episodes)?;
    let modalities = model.config.fusion.declared();
    if let Some(out) = &common.out {
        write_echo(&cfg, out)?;
        write_gate_csv(&samples, &episodes, &modalities, &out.join("gates.csv"))?;
        if summary {
            write_summary_csv(&result, &out.join("eval_summary.csv"))?;
        }
    }
    if summary {
        let align = result
            .gate_top1_alignment
            .map_or("n/a".to_string(), |a| format!("{a:.4}"));
        println!(
            "n {}  accuracy {:.4}  gate_top1_alignment {}  fallback_rate {:.4}",
            result.n, result.accuracy, align, result.fallback_rate
        );
    }
    if hist {
        for m in modalities {
            print!("{}", beta_histogram(&samples, m, cfg.eval.hist_bins));
        }
    }
    Ok(())
}

fn cmd_ablate(common: &Common, data: Option<&Path>, variants: &[String]) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(d) = data {
        cfg.paths.data = vec![d.to_path_buf()];
    }
    if !variants.is_empty() {
        cfg.ablate.variants = variants
            .iter()
            .flat_map(|v| v.split(',').map(str::to_string))
            .collect();
    }
    if let Some(s) = common.seed {
        cfg.ablate.seeds = vec![s];
    }
    let out = require_out(common)?;
    let variants: Vec<Variant> = cfg
        .ablate
        .variants
        .iter()
        .map(|v| v.parse())
        .collect::<Result<_>>()?;
    if variants.is_empty() {
        return Err(Error::Config("ablate.variants is empty".into()));
    }
    if cfg.ablate.seeds.len() < 2 {
        eprintln!("warning: a single seed gives no standard deviation");
    }
    let path = cfg
        .paths
        .data
        .first()
        .cloned()
        .ok_or_else(|| Error::Config("--data is required".into()))?;
    let data = load_dataset(&path)?;
    let base = cfg.model_config(&data.spec)?;
    write_echo(&cfg, &out)?;
    let table = compare_variants(&variants, &base, &cfg.train, &data, &cfg.ablate.seeds)?;
    table.write_csv(&out.join("comparison.csv"))?;
    println!("{}: {} variants x {} seeds", out.display(), variants.len(), cfg.ablate.seeds.len());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count")))?;
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Gen { common, force } => cmd_gen(common, *force),
        Command::Train { common, data, variant } => cmd_train(common, data, variant.as_deref()),
        Command::Eval { common, target } => cmd_eval(common, target, true, false),
        Command::GateReport { common, target, hist } => cmd_eval(common, target, false, *hist),
        Command::Ablate { common, data, variant } => cmd_ablate(common, data.as_deref(), variant),
    }
}

/// Parse `args` (including the program name) and run. Usage errors map to
/// [`Error::Config`].
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}
