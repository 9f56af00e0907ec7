//! JSON checkpoints: vocabulary, model layout, parameters, trainer state and
//! the generator state, written atomically.

use std::collections::BTreeMap;
use std::path::Path;

use nsrl::numerics::{Adam, ParamSet};
use nsrl::policy::{NsrlModel, PolicyConfig, PpoTrainer};
use nsrl::symbolic::Vocabulary;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint format version {found}, expected {FORMAT_VERSION}")]
    Version { found: u32 },
    #[error("checkpoint is incompatible: {0}")]
    Incompatible(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqnState {
    pub steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub epsilon: f64,
    pub optimizer: Adam,
    pub target: ParamSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerState {
    Ppo(PpoTrainer),
    Dqn(DqnState),
}

impl TrainerState {
    pub fn episodes(&self) -> u64 {
        match self {
            Self::Ppo(t) => t.episodes,
            Self::Dqn(t) => t.episodes,
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            Self::Ppo(t) => t.steps,
            Self::Dqn(t) => t.steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocabulary: Vocabulary,
    pub model: PolicyConfig,
    pub params: ParamSet,
    pub trainer: TrainerState,
    /// Resolved `section.key` entries the run was started with.
    pub config: BTreeMap<String, String>,
    pub rng: ChaCha8Rng,
}

#[derive(Deserialize)]
struct Header {
    version: u32,
}

fn io_error(path: &Path, e: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes through a sibling temporary file and a rename, so a crash leaves
/// either the old or the new contents.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let header: Header = serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: header.version });
        }
        let ck: Self = serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<(), CheckpointError> {
        let sets = match &self.trainer {
            TrainerState::Ppo(_) => vec![&self.params],
            TrainerState::Dqn(d) => vec![&self.params, &d.target],
        };
        for set in sets {
            for (_, name, t) in set.iter() {
                if t.shape().iter().product::<usize>() != t.len() || t.shape().len() > 2 {
                    return Err(CheckpointError::Format(format!("tensor `{name}` has inconsistent shape")));
                }
                if !t.all_finite() {
                    return Err(CheckpointError::Format(format!("tensor `{name}` is not finite")));
                }
            }
        }
        let a = &self.model.attention;
        if a.entities != self.vocabulary.entity_count() || a.predicates != self.vocabulary.predicate_count() {
            return Err(CheckpointError::Format("model sizes disagree with the vocabulary".into()));
        }
        if a.validate().is_err() || a.steps > 16 || a.layers > 16 || a.hidden > 4096 || self.model.head_hidden > 4096 {
            return Err(CheckpointError::Format("model configuration out of range".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::from_text(&text)
    }

    /// Rebuilds the model and checks that the stored parameters fit it.
    pub fn model(&self) -> Result<NsrlModel, CheckpointError> {
        let mut layout = ParamSet::new();
        let mut rng = nsrl::numerics::init_rng(0);
        let model = NsrlModel::register(&mut layout, &self.vocabulary, self.model.clone(), &mut rng)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        if !layout.same_layout(&self.params) {
            return Err(CheckpointError::Format("parameters do not match the model layout".into()));
        }
        Ok(model)
    }

    /// Fails unless `vocab` is the vocabulary the checkpoint was trained on.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<(), CheckpointError> {
        if *vocab == self.vocabulary {
            Ok(())
        } else {
            Err(CheckpointError::Incompatible(format!(
                "trained on entities [{}], environment has [{}]",
                self.vocabulary.entities().join(","),
                vocab.entities().join(",")
            )))
        }
    }
}
