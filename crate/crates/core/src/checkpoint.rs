//! Stage checkpoints: parameters plus the tags that enforce stage freezing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Pretrain,
    Stage1,
    Stage2,
    Stage3,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Pretrain => "pretrain",
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::Stage3 => "stage3",
        }
    }

    /// The stage whose checkpoints this one consumes.
    pub fn previous(self) -> Option<StageTag> {
        match self {
            StageTag::Pretrain => None,
            StageTag::Stage1 => Some(StageTag::Pretrain),
            StageTag::Stage2 => Some(StageTag::Stage1),
            StageTag::Stage3 => Some(StageTag::Stage2),
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pretrain" | "0" => Ok(StageTag::Pretrain),
            "stage1" | "1" | "i" => Ok(StageTag::Stage1),
            "stage2" | "2" | "ii" => Ok(StageTag::Stage2),
            "stage3" | "3" | "iii" => Ok(StageTag::Stage3),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Which stream a checkpoint belongs to. `Fused` is the Stage III model;
/// `Merged` the jointly trained Stage II + III ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityTag {
    Text,
    Speech,
    Fused,
    Merged,
}

impl ModalityTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityTag::Text => "text",
            ModalityTag::Speech => "speech",
            ModalityTag::Fused => "fused",
            ModalityTag::Merged => "merged",
        }
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub stage: StageTag,
    pub modality: ModalityTag,
    pub config_hash: String,
    /// Architecture description needed to rebuild the model around `params`.
    pub meta: serde_json::Value,
    pub params: Vec<ParamStore>,
    pub content_hash: String,
}

/// SHA-256 over every store's names, shapes and exact parameter bits.
pub fn params_hash(params: &[ParamStore]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.content_hash().as_bytes());
    }
    hex::encode(h.finalize())
}

impl StageCheckpoint {
    pub fn new(
        stage: StageTag,
        modality: ModalityTag,
        config_hash: impl Into<String>,
        meta: serde_json::Value,
        params: Vec<ParamStore>,
    ) -> Self {
        let content_hash = params_hash(&params);
        Self { stage, modality, config_hash: config_hash.into(), meta, params, content_hash }
    }

    /// `{dir}/{stage}_{modality}.ckpt`
    pub fn path_in(dir: &Path, stage: StageTag, modality: ModalityTag) -> PathBuf {
        dir.join(format!("{stage}_{modality}.ckpt"))
    }

    pub fn recomputed_hash(&self) -> String {
        params_hash(&self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Writes to a temporary sibling first and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks that the stored hash still matches the parameters.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: StageCheckpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.recomputed_hash() != ckpt.content_hash {
            return Err(Error::Checkpoint(format!("{}: content hash does not match parameters", path.display())));
        }
        Ok(ckpt)
    }

    /// Loads `{dir}/{stage}_{modality}.ckpt`, reporting a missing file as a
    /// dependency error.
    pub fn load_required(dir: &Path, stage: StageTag, modality: ModalityTag) -> Result<Self> {
        let path = Self::path_in(dir, stage, modality);
        if !path.exists() {
            return Err(Error::Dependency(format!(
                "{stage} {modality} checkpoint not found at {}; run that stage first",
                path.display()
            )));
        }
        let ckpt = Self::load(&path)?;
        if ckpt.stage != stage || ckpt.modality != modality {
            return Err(Error::TagMismatch(format!(
                "{} holds {} {}, expected {stage} {modality}",
                path.display(),
                ckpt.stage,
                ckpt.modality
            )));
        }
        Ok(ckpt)
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("{} {} metadata: {e}", self.stage, self.modality)))
    }

    pub fn expect_tags(&self, stage: StageTag, modality: ModalityTag) -> Result<()> {
        if self.stage != stage || self.modality != modality {
            return Err(Error::TagMismatch(format!(
                "expected a {stage} {modality} checkpoint, got {} {}",
                self.stage, self.modality
            )));
        }
        Ok(())
    }
}

/// True iff both checkpoints hold bit-identical parameters.
pub fn verify_frozen(before: &StageCheckpoint, after: &StageCheckpoint) -> Result<bool> {
    if before.stage != after.stage || before.modality != after.modality {
        return Err(Error::TagMismatch(format!(
            "{} {} vs {} {}",
            before.stage, before.modality, after.stage, after.modality
        )));
    }
    Ok(before.recomputed_hash() == after.recomputed_hash())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal_init, seeded_rng};

    fn sample() -> StageCheckpoint {
        let mut rng = seeded_rng(0, "ckpt");
        let mut store = ParamStore::new();
        store.add("w", normal_init(&mut rng, 3, 4, 1.0));
        store.add("b", normal_init(&mut rng, 1, 4, 1e-3));
        StageCheckpoint::new(StageTag::Stage1, ModalityTag::Text, "cfg", serde_json::json!({"d": 4}), vec![store])
    }

    #[test]
    fn untouched_is_frozen() {
        let c = sample();
        assert!(verify_frozen(&c, &c.clone()).unwrap());
    }

    #[test]
    fn tiny_perturbation_is_detected() {
        let c = sample();
        let mut params = c.params.clone();
        let v = params[0].values()[0].get(1, 1);
        params[0].values_mut()[0].set(1, 1, v + 1e-12);
        let d = StageCheckpoint::new(c.stage, c.modality, "cfg", c.meta.clone(), params);
        assert!(!verify_frozen(&c, &d).unwrap());
    }

    #[test]
    fn mismatched_tags_error() {
        let c = sample();
        let mut d = c.clone();
        d.stage = StageTag::Stage2;
        assert!(matches!(verify_frozen(&c, &d), Err(Error::TagMismatch(_))));
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        let path = StageCheckpoint::path_in(dir.path(), c.stage, c.modality);
        c.save(&path).unwrap();
        assert!(path.ends_with("stage1_text.ckpt"));
        let back = StageCheckpoint::load(&path).unwrap();
        assert_eq!(back, c);
        back.save(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), c.to_json().unwrap());
    }

    #[test]
    fn missing_dependency_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = StageCheckpoint::load_required(dir.path(), StageTag::Stage2, ModalityTag::Text).unwrap_err();
        assert!(matches!(err, Error::Dependency(_)));
    }
}
