//! Dataset generation, train/test splitting and the on-disk container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic         4 bytes  "CGDS"
//! version       u32
//! config_hash   32 bytes SHA-256 of the generation config
//! meta_len      u64
//! pixel_len     u64
//! meta          meta_len bytes of JSON (everything except pixels)
//! pixels        pixel_len bytes, packed RGB of every scene in order
//! crc32         u32 over meta ‖ pixels
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{
    base_templates, build_samples, expand_templates, CommandError, CommandTemplate, ParaphraseGrammar, Sample,
    SampleOptions, SampleStats, Vocabulary,
};
use crate::manifest::{config_hash, derive_seed, RunManifest};
use crate::scene::{generate_scene, Scene, SceneConfig, SceneError};

pub const MAGIC: &[u8; 4] = b"CGDS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 32 + 8 + 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt dataset file: {0}")]
    Corrupt(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scenes: usize,
    pub train_fraction: f64,
    pub no_target_ratio: f64,
    pub template_rounds: usize,
    pub n_orient: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scenes: 600,
            train_fraction: 4233.0 / 4683.0,
            no_target_ratio: 0.254,
            template_rounds: 10,
            n_orient: 19,
            scene: SceneConfig::default(),
        }
    }
}

impl DatasetConfig {
    /// Parse the human-readable (TOML) form. Unknown keys are errors that
    /// name the key.
    pub fn from_toml(text: &str) -> Result<Self, DatasetError> {
        toml::from_str(text).map_err(|e| DatasetError::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.scenes < 2 {
            return Err(DatasetError::Config("scenes must be at least 2".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DatasetError::Config("train_fraction must be in (0, 1)".into()));
        }
        if self.n_orient == 0 {
            return Err(DatasetError::Config("n_orient must be positive".into()));
        }
        self.scene.validate()?;
        Ok(())
    }
}

/// Deterministic split of `n` items into sorted, disjoint train/test index
/// lists. The train part holds `round(n · train_fraction)` items, clamped so
/// both parts are non-empty.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    if n < 2 {
        return Err(DatasetError::Split(format!("need at least 2 items, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Split(format!("train_fraction {train_fraction} outside (0, 1)")));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    let (tr, te) = split_indices(items.len(), train_fraction, seed)?;
    Ok((
        tr.into_iter().map(|i| items[i].clone()).collect(),
        te.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub manifest: RunManifest,
    pub templates: Vec<CommandTemplate>,
    pub vocab: Vocabulary,
    pub scenes: Vec<Scene>,
    pub samples: Vec<Sample>,
    pub train_scenes: Vec<usize>,
    pub test_scenes: Vec<usize>,
}

impl Dataset {
    /// A bare container around a list of scenes, with no commands.
    pub fn from_scenes(scenes: Vec<Scene>) -> Self {
        let n = scenes.len();
        Self {
            config: DatasetConfig::default(),
            manifest: RunManifest::new(),
            templates: Vec::new(),
            vocab: Vocabulary::from_words(Vec::<String>::new()),
            scenes,
            samples: Vec::new(),
            train_scenes: (0..n).collect(),
            test_scenes: Vec::new(),
        }
    }

    pub fn scene_split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_scenes,
            Split::Test => &self.test_scenes,
        }
    }

    /// Indices into `samples` whose scene belongs to `split`.
    pub fn sample_indices(&self, split: Split) -> Vec<usize> {
        let mut member = vec![false; self.scenes.len()];
        for &s in self.scene_split(split) {
            member[s] = true;
        }
        (0..self.samples.len()).filter(|&i| member[self.samples[i].scene]).collect()
    }

    pub fn stats(&self) -> SampleStats {
        let no_target = self.samples.iter().filter(|s| !s.has_target()).count();
        SampleStats {
            have_target: self.samples.len() - no_target,
            no_target,
            skipped: 0,
        }
    }
}

/// Scenes, templates, vocabulary, samples and split from one config.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(Dataset, SampleStats), DatasetError> {
    cfg.validate()?;
    let scenes = (0..cfg.scenes)
        .map(|i| generate_scene(&cfg.scene, derive_seed(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let templates = expand_templates(&base_templates(), &ParaphraseGrammar::shipped(), cfg.template_rounds).templates;
    let vocab = Vocabulary::build(&templates);
    let opts = SampleOptions {
        no_target_ratio: cfg.no_target_ratio,
        n_orient: cfg.n_orient,
        categories: cfg.scene.categories,
        seed: derive_seed(cfg.seed, u64::MAX),
    };
    let (samples, stats) = build_samples(&scenes, &templates, &vocab, &opts)?;
    let (train_scenes, test_scenes) = split_indices(scenes.len(), cfg.train_fraction, derive_seed(cfg.seed, u64::MAX - 1))?;
    let manifest = RunManifest::new().with_config("dataset", cfg).with_seed("dataset", cfg.seed);
    Ok((
        Dataset {
            config: cfg.clone(),
            manifest,
            templates,
            vocab,
            scenes,
            samples,
            train_scenes,
            test_scenes,
        },
        stats,
    ))
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let meta = serde_json::to_vec(ds).expect("dataset serializes");
    let pixels: Vec<u8> = ds.scenes.iter().flat_map(|s| s.image.pixels.iter().copied()).collect();
    let hash = config_hash(&ds.config);
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + pixels.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&hex::decode(hash).expect("hex digest"));
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&(pixels.len() as u64).to_le_bytes());
    let body_start = out.len();
    out.extend_from_slice(&meta);
    out.extend_from_slice(&pixels);
    let crc = crc32fast::hash(&out[body_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn read_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    let corrupt = |m: &str| DatasetError::Corrupt(m.to_string());
    if bytes.len() < HEADER_LEN + 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(DatasetError::Version { found: version, expected: VERSION });
    }
    let stored_hash = hex::encode(&bytes[8..40]);
    let meta_len = read_u64(&bytes[40..48]) as usize;
    let pixel_len = read_u64(&bytes[48..56]) as usize;
    let body_end = HEADER_LEN
        .checked_add(meta_len)
        .and_then(|v| v.checked_add(pixel_len))
        .ok_or_else(|| corrupt("length overflow"))?;
    if bytes.len() != body_end + 4 {
        return Err(corrupt("length fields do not match file size"));
    }
    let crc = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[HEADER_LEN..body_end]) != crc {
        return Err(corrupt("checksum mismatch"));
    }
    let mut ds: Dataset = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + meta_len])
        .map_err(|e| DatasetError::Corrupt(format!("metadata: {e}")))?;
    if config_hash(&ds.config) != stored_hash {
        return Err(corrupt("config hash does not match header"));
    }
    let mut pixels = &bytes[HEADER_LEN + meta_len..body_end];
    for s in &mut ds.scenes {
        let n = s.image.width * s.image.height * 3;
        if pixels.len() < n {
            return Err(corrupt("pixel block too short"));
        }
        s.image.pixels = pixels[..n].to_vec();
        pixels = &pixels[n..];
    }
    if !pixels.is_empty() {
        return Err(corrupt("trailing pixel data"));
    }
    ds.vocab.reindex();
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DatasetConfig {
        DatasetConfig { scenes: 6, ..Default::default() }
    }

    #[test]
    fn split_examples() {
        let (tr, te) = split_indices(10, 0.9, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (9, 1));
        assert_eq!(split_indices(10, 0.9, 1).unwrap(), (tr.clone(), te.clone()));
        let mut all: Vec<usize> = tr.into_iter().chain(te).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let (tr, te) = split_indices(4683, 4233.0 / 4683.0, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (4233, 450));

        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
        assert!(split_indices(10, 0.0, 0).is_err());

        let (a, b) = split_dataset(&["a", "b", "c"], 0.5, 9).unwrap();
        assert_eq!(a.len() + b.len(), 3);
    }

    #[test]
    fn empty_container_round_trips() {
        let ds = Dataset::from_scenes(Vec::new());
        let back = decode_dataset(&encode_dataset(&ds)).unwrap();
        assert!(back.scenes.is_empty());
        assert_eq!(back, ds);
    }

    #[test]
    fn generated_dataset_round_trips_bit_exact() {
        let (ds, _) = generate_dataset(&small_config()).unwrap();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (ds, _) = generate_dataset(&DatasetConfig { scenes: 2, ..Default::default() }).unwrap();
        let bytes = encode_dataset(&ds);

        let mut flipped = bytes.clone();
        let mid = HEADER_LEN + 100;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode_dataset(&flipped), Err(DatasetError::Corrupt(_))));

        let mut versioned = bytes.clone();
        versioned[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode_dataset(&versioned), Err(DatasetError::Version { found: 99, .. })));

        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 10]), Err(DatasetError::Corrupt(_))));
        assert!(matches!(decode_dataset(b"nope"), Err(DatasetError::Corrupt(_))));
    }

    #[test]
    fn config_parsing_names_unknown_keys() {
        let err = DatasetConfig::from_toml("scenes = 10\nbogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let cfg = DatasetConfig::from_toml("scenes = 10\n[scene]\nwidth = 96\n").unwrap();
        assert_eq!(cfg.scenes, 10);
        assert_eq!(cfg.scene.width, 96);
        assert_eq!(DatasetConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = encode_dataset(&generate_dataset(&small_config()).unwrap().0);
        let b = encode_dataset(&generate_dataset(&small_config()).unwrap().0);
        assert_eq!(a, b);
    }
}
