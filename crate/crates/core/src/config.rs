//! TOML run configuration.
//!
//! ```toml
//! version = 1
//! seed = 13
//! output_dir = "runs/hme"
//!
//! [data]
//! train = "train.conll"
//! dev = "dev.conll"
//!
//! [[embeddings]]
//! level = "word"
//! language = "en"
//! path = "cc.en.300.vec"
//! format = "vec_with_header"
//! dim = 300
//! limit = 100000
//!
//! [[embeddings]]
//! level = "subword"
//! language = "en"
//! path = "en.wiki.bpe.vs1000.d100.w2v.txt"
//! merges = "en.wiki.bpe.vs1000.model.merges"
//! format = "glove_no_header"
//!
//! [model]
//! variant = "hme"
//!
//! [train]
//! learning_rate = 0.1
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{load_text_embeddings, Level, TextFormat};
use crate::error::{HmeError, Result};
use crate::iob::{LabelSet, DEFAULT_ENTITY_TYPES};
use crate::model::{EmbeddingSet, ModelConfig, Variant};
use crate::tokenize::{BpeModel, Preprocessor};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Entity types; the IOB label set is derived from them.
    #[serde(default = "default_entity_types")]
    pub entity_types: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            dev: None,
            test: None,
            entity_types: default_entity_types(),
        }
    }
}

fn default_entity_types() -> Vec<String> {
    DEFAULT_ENTITY_TYPES.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub level: Level,
    pub language: String,
    pub path: PathBuf,
    pub format: TextFormat,
    /// Expected vector width; checked at load time when given.
    pub dim: Option<usize>,
    /// Keep only the first `limit` rows.
    pub limit: Option<usize>,
    /// BPE merges for subword tables.
    pub merges: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Inclusive codepoint ranges counted as emoji.
    pub emoji_ranges: Option<Vec<(u32, u32)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub embeddings: Vec<EmbeddingSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

impl RunConfig {
    /// Parses TOML text; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| HmeError::Config(e.to_string()))?;
        if config.version != CONFIG_VERSION {
            return Err(HmeError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HmeError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            HmeError::Config(m) => HmeError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [&mut self.data.train, &mut self.data.dev, &mut self.data.test]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for e in &mut self.embeddings {
            fix(&mut e.path);
            if let Some(m) = e.merges.as_mut() {
                fix(m);
            }
        }
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HmeError::Config(m));
        self.train.validate()?;
        if self.data.entity_types.is_empty() {
            return bad("data.entity_types must not be empty".into());
        }
        let variant = self.model.variant;
        let subword = self.embeddings.iter().filter(|e| e.level == Level::Subword).count();
        for e in &self.embeddings {
            match e.level {
                Level::Char => return bad("the character table is built internally; remove level = \"char\"".into()),
                Level::Subword if e.merges.is_none() => {
                    return bad(format!("subword table {} needs a merges file", e.language))
                }
                Level::Word if e.merges.is_some() => {
                    return bad(format!("word table {} cannot have a merges file", e.language))
                }
                _ => {}
            }
            if e.dim == Some(0) {
                return bad(format!("embedding {} has dim 0", e.language));
            }
        }
        if variant != Variant::Hme && subword > 0 {
            return bad(format!("variant {variant:?} forbids subword embeddings"));
        }
        if variant == Variant::Hme && self.model.use_subword && subword == 0 {
            return bad("variant hme with use_subword needs at least one subword table".into());
        }
        if variant == Variant::Hme && !self.model.use_subword && subword > 0 {
            return bad("subword tables given but use_subword is false".into());
        }
        if variant != Variant::Random && !self.embeddings.iter().any(|e| e.level == Level::Word) {
            return bad(format!("variant {variant:?} needs at least one word table"));
        }
        Ok(())
    }

    /// Checks that every input file referenced by the config exists.
    pub fn check_paths(&self, need_training_data: bool) -> Result<()> {
        let mut paths: Vec<&Path> = Vec::new();
        for e in &self.embeddings {
            paths.push(&e.path);
            paths.extend(e.merges.as_deref());
        }
        if need_training_data {
            for (name, p) in [("data.train", &self.data.train), ("data.dev", &self.data.dev)] {
                match p {
                    Some(p) => paths.push(p),
                    None => return Err(HmeError::Config(format!("{name} is required"))),
                }
            }
        }
        for p in paths {
            if !p.is_file() {
                return Err(HmeError::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> LabelSet {
        LabelSet::from_entity_types(&self.data.entity_types)
    }

    pub fn preprocessor(&self) -> Preprocessor {
        match &self.preprocess.emoji_ranges {
            Some(r) => Preprocessor {
                emoji_ranges: r.clone(),
            },
            None => Preprocessor::default(),
        }
    }

    /// Loads every table of the manifest, in manifest order per level.
    pub fn load_embeddings(&self) -> Result<EmbeddingSet> {
        let mut set = EmbeddingSet::default();
        for e in &self.embeddings {
            let table = load_text_embeddings(&e.path, e.format, e.limit, e.dim)?.with_language(&e.language, e.level);
            match e.level {
                Level::Word => set.word.push(table),
                Level::Subword => {
                    let merges = e.merges.as_ref().expect("validated");
                    set.bpe.push(BpeModel::load_merges(merges, &e.language)?);
                    set.subword.push(table);
                }
                Level::Char => unreachable!("validated"),
            }
        }
        Ok(set)
    }
}
