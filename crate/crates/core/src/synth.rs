//! Synthetic multimodal QA episodes with a known informative modality.
//!
//! Each (modality, class) pair owns a fixed unit direction. The queried
//! modality carries the answer's direction in one random row; other
//! modalities carry a distractor direction drawn independently of the answer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sequence::ModalityId;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceMode {
    /// One queried modality carries the answer.
    #[default]
    Single,
    /// The answer is `(c1 + c2) mod V` of two queried modalities.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub n_modalities: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    /// Feature width per modality, `modality_dims[k]` for modality `k + 1`.
    pub modality_dims: Vec<usize>,
    pub n_answers: usize,
    pub instruction_min: usize,
    pub instruction_max: usize,
    /// Filler ids follow the `n_modalities` query ids in the instruction vocabulary.
    pub filler_vocab: usize,
    pub noise_std: f64,
    pub relevance: RelevanceMode,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            n_modalities: 2,
            tokens_min: 2,
            tokens_max: 6,
            modality_dims: vec![8, 8],
            n_answers: 4,
            instruction_min: 2,
            instruction_max: 4,
            filler_vocab: 8,
            noise_std: 0.05,
            relevance: RelevanceMode::Single,
        }
    }
}

impl TaskSpec {
    pub fn instruction_vocab(&self) -> usize {
        self.n_modalities + self.filler_vocab
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("task: {m}")));
        if self.n_modalities == 0 {
            return bad("n_modalities must be at least 1");
        }
        if self.modality_dims.len() != self.n_modalities {
            return bad("modality_dims needs one width per modality");
        }
        if self.modality_dims.contains(&0) {
            return bad("modality widths must be positive");
        }
        if self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return bad("token range must satisfy 1 <= tokens_min <= tokens_max");
        }
        if self.n_answers < 2 {
            return bad("n_answers must be at least 2");
        }
        let queried = match self.relevance {
            RelevanceMode::Single => 1,
            RelevanceMode::Joint => 2,
        };
        if self.n_modalities < queried {
            return bad("joint relevance needs two modalities");
        }
        if self.instruction_min < queried || self.instruction_min > self.instruction_max {
            return bad("instruction range too short for the queried modalities");
        }
        if self.instruction_max > queried && self.filler_vocab == 0 {
            return bad("filler_vocab must be positive when instructions carry filler");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub instruction_ids: Vec<usize>,
    pub features: BTreeMap<ModalityId, Tensor>,
    pub answer: usize,
    pub informative: BTreeSet<ModalityId>,
}

impl Episode {
    /// Lowest informative modality: the one named first by the instruction.
    pub fn queried(&self) -> ModalityId {
        *self.informative.iter().next().expect("nonempty informative set")
    }
}

/// `directions[m][c]` is the unit pattern of class `c` in modality `m + 1`.
pub type Directions = Vec<Vec<Vec<f64>>>;

/// Deterministic per-(seed, index) seed; splitmix64 finaliser.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Random unit class directions, orthonormal within a modality when
/// `n_answers <= d_m`.
pub fn class_directions(spec: &TaskSpec, seed: u64) -> Directions {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    spec.modality_dims
        .iter()
        .map(|&dm| {
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.n_answers);
            for _ in 0..spec.n_answers {
                let mut v: Vec<f64> = (0..dm).map(|_| gaussian(&mut rng)).collect();
                if basis.len() < dm {
                    for b in &basis {
                        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                        v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
            basis.into_iter().map(|v| v.into_iter().map(f32_round).collect()).collect()
        })
        .collect()
}

fn noise_block(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| std * gaussian(rng)).collect()
}

fn plant(data: &mut [f64], cols: usize, row: usize, pattern: &[f64]) {
    data[row * cols..(row + 1) * cols]
        .iter_mut()
        .zip(pattern)
        .for_each(|(x, p)| *x += p);
}

pub fn generate_episode(spec: &TaskSpec, directions: &Directions, rng: &mut impl Rng) -> Episode {
    let n = spec.n_modalities;
    let v = spec.n_answers;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (queried, answer, planted): (Vec<usize>, usize, Vec<(usize, usize)>) = match spec.relevance {
        RelevanceMode::Single => {
            let k = order[0];
            let c = rng.random_range(0..v);
            (vec![k], c, vec![(k, c)])
        }
        RelevanceMode::Joint => {
            let (mut k1, mut k2) = (order[0], order[1]);
            if k2 < k1 {
                std::mem::swap(&mut k1, &mut k2);
            }
            let c1 = rng.random_range(0..v);
            let c2 = rng.random_range(0..v);
            (vec![k1, k2], (c1 + c2) % v, vec![(k1, c1), (k2, c2)])
        }
    };

    let len = rng.random_range(spec.instruction_min..=spec.instruction_max);
    let mut instruction_ids = queried.clone();
    while instruction_ids.len() < len {
        instruction_ids.push(n + rng.random_range(0..spec.filler_vocab));
    }

    let mut features = BTreeMap::new();
    for (m, &dm) in spec.modality_dims.iter().enumerate() {
        let t = rng.random_range(spec.tokens_min..=spec.tokens_max);
        let mut data = noise_block(rng, t, dm, spec.noise_std);
        let class = match planted.iter().find(|p| p.0 == m) {
            Some(&(_, c)) => c,
            None => rng.random_range(0..v),
        };
        let row = rng.random_range(0..t);
        plant(&mut data, dm, row, &directions[m][class]);
        let data = data.into_iter().map(f32_round).collect();
        features.insert(m + 1, Tensor::new(vec![t, dm], data).expect("shape"));
    }
    Episode {
        instruction_ids,
        features,
        answer,
        informative: queried.iter().map(|k| k + 1).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Split {
    /// 80/10/10 by index.
    pub fn of(n: usize) -> Split {
        let train = n * 8 / 10;
        let val = n / 10;
        Split {
            train,
            val,
            test: n - train - val,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub seed: u64,
    pub directions: Directions,
    pub episodes: Vec<Episode>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl Dataset {
    pub fn train(&self) -> &[Episode] {
        &self.episodes[..self.split.train]
    }

    pub fn val(&self) -> &[Episode] {
        &self.episodes[self.split.train..self.split.train + self.split.val]
    }

    pub fn test(&self) -> &[Episode] {
        &self.episodes[self.split.train + self.split.val..]
    }

    pub fn get(&self, split: SplitName) -> &[Episode] {
        match split {
            SplitName::Train => self.train(),
            SplitName::Val => self.val(),
            SplitName::Test => self.test(),
        }
    }
}

pub fn generate_dataset(spec: &TaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset needs at least one episode".into()));
    }
    let directions = class_directions(spec, seed);
    let episodes = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            generate_episode(spec, &directions, &mut rng)
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        directions,
        episodes,
        split: Split::of(n),
    })
}

/// Nearest class pattern over all rows of one modality: the class whose
/// direction has the largest dot product with any row.
pub fn pattern_oracle(features: &Tensor, directions: &[Vec<f64>]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for row in 0..features.rows() {
        let r = features.row(row);
        for (c, dir) in directions.iter().enumerate() {
            let score: f64 = r.iter().zip(dir).map(|(a, b)| a * b).sum();
            if score > best.0 {
                best = (score, c);
            }
        }
    }
    best.1
}

/// Answer predicted by the pattern oracle on the informative modalities.
pub fn oracle_answer(episode: &Episode, directions: &Directions, n_answers: usize) -> usize {
    episode
        .informative
        .iter()
        .map(|&m| pattern_oracle(&episode.features[&m], &directions[m - 1]))
        .sum::<usize>()
        % n_answers
}

// ---------------------------------------------------------------------------
// Persistence.

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    instruction_ids: Vec<usize>,
    answer: usize,
    informative: Vec<ModalityId>,
    /// `(modality, rows, cols)` in payload order.
    shapes: Vec<(ModalityId, usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: TaskSpec,
    seed: u64,
    n_episodes: usize,
    split: Split,
    directions: Directions,
    episodes: Vec<EpisodeRecord>,
}

/// Summary line for the command line.
pub fn describe(ds: &Dataset) -> String {
    let mut per_modality: BTreeMap<ModalityId, usize> = BTreeMap::new();
    for e in &ds.episodes {
        for &m in &e.informative {
            *per_modality.entry(m).or_default() += 1;
        }
    }
    format!(
        "{} episodes (train {}, val {}, test {}), {} modalities, {} answers, informative counts {:?}",
        ds.episodes.len(),
        ds.split.train,
        ds.split.val,
        ds.split.test,
        ds.spec.n_modalities,
        ds.spec.n_answers,
        per_modality
    )
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(ds.episodes.len());
    for e in &ds.episodes {
        let mut shapes = Vec::new();
        for (&m, f) in &e.features {
            shapes.push((m, f.rows(), f.cols()));
            for &x in f.data() {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        records.push(EpisodeRecord {
            instruction_ids: e.instruction_ids.clone(),
            answer: e.answer,
            informative: e.informative.iter().copied().collect(),
            shapes,
        });
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: ds.spec.clone(),
        seed: ds.seed,
        n_episodes: ds.episodes.len(),
        split: ds.split,
        directions: ds.directions.clone(),
        episodes: records,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Artifact(e.to_string()))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    let fpath = dir.join(FEATURES_FILE);
    let mut f = fs::File::create(&fpath).map_err(|e| Error::io(&fpath, e))?;
    f.write_all(&payload).map_err(|e| Error::io(&fpath, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Artifact(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Artifact(format!(
            "dataset format_version {} (expected {DATASET_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let fpath = dir.join(FEATURES_FILE);
    let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    let mut offset = 0;
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for (i, rec) in manifest.episodes.into_iter().enumerate() {
        let mut features = BTreeMap::new();
        for (m, rows, cols) in rec.shapes {
            let n = rows * cols * 4;
            let chunk = bytes.get(offset..offset + n).ok_or_else(|| {
                Error::Artifact(format!("{}: payload ends inside episode {i}", fpath.display()))
            })?;
            offset += n;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            features.insert(m, Tensor::new(vec![rows, cols], data)?);
        }
        episodes.push(Episode {
            instruction_ids: rec.instruction_ids,
            features,
            answer: rec.answer,
            informative: rec.informative.into_iter().collect(),
        });
    }
    if offset != bytes.len() || episodes.len() != manifest.n_episodes {
        return Err(Error::Artifact(format!(
            "{}: payload length does not match the manifest",
            fpath.display()
        )));
    }
    Ok(Dataset {
        spec: manifest.spec,
        seed: manifest.seed,
        directions: manifest.directions,
        episodes,
        split: manifest.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> TaskSpec {
        TaskSpec {
            noise_std: 0.0,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(Split::of(10), Split { train: 8, val: 1, test: 1 });
        assert_eq!(Split::of(1000), Split { train: 800, val: 100, test: 100 });
        assert_eq!(Split::of(1), Split { train: 0, val: 0, test: 1 });
    }

    #[test]
    fn directions_are_unit_and_orthogonal() {
        let spec = TaskSpec::default();
        let dirs = class_directions(&spec, 3);
        for m in &dirs {
            for (i, a) in m.iter().enumerate() {
                for (j, b) in m.iter().enumerate() {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-6, "{i},{j}: {dot}");
                }
            }
        }
    }

    #[test]
    fn noiseless_oracle_is_exact_single_and_joint() {
        for relevance in [RelevanceMode::Single, RelevanceMode::Joint] {
            let spec = TaskSpec {
                relevance,
                ..noiseless()
            };
            let ds = generate_dataset(&spec, 300, 5).unwrap();
            for e in &ds.episodes {
                assert_eq!(oracle_answer(e, &ds.directions, spec.n_answers), e.answer);
                for &m in &e.informative {
                    assert_eq!(e.instruction_ids[e.informative.iter().position(|&x| x == m).unwrap()], m - 1);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TaskSpec::default();
        assert_eq!(generate_dataset(&spec, 50, 7).unwrap(), generate_dataset(&spec, 50, 7).unwrap());
        assert_ne!(generate_dataset(&spec, 50, 7).unwrap(), generate_dataset(&spec, 50, 8).unwrap());
    }

    #[test]
    fn ten_episodes_split_between_two_modalities() {
        let ds = generate_dataset(&TaskSpec::default(), 10, 11).unwrap();
        let first = ds.episodes.iter().filter(|e| e.queried() == 1).count();
        // Binomial(10, 0.5): outside [1, 9] has probability ~0.002.
        assert!((1..=9).contains(&first), "{first}");
        assert_eq!((ds.train().len(), ds.val().len(), ds.test().len()), (8, 1, 1));
    }

    #[test]
    fn save_load_round_trip_and_truncation() {
        let ds = generate_dataset(&TaskSpec::default(), 20, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let fpath = dir.path().join(FEATURES_FILE);
        let bytes = fs::read(&fpath).unwrap();
        fs::write(&fpath, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Artifact(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = TaskSpec::default();
        spec.modality_dims = vec![8];
        assert!(spec.validate().is_err());
        let spec = TaskSpec {
            n_modalities: 1,
            modality_dims: vec![4],
            relevance: RelevanceMode::Joint,
            ..TaskSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
