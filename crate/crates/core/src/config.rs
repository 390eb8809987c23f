//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! Every field has a default, so an empty file is valid. Unknown keys are
//! rejected. [`RunConfig::hash`] fingerprints the fully resolved config and
//! is embedded in every report and artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::MelConfig;
use crate::classifier::ClassifierConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::index::IvfPqConfig;
use crate::pairgen::AugRanges;
use crate::retrieval::RetrievalConfig;
use crate::training::{ClassifierTrainConfig, EncoderTrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory of training tracks, one sub-directory of stem WAVs each.
    pub stems: Option<PathBuf>,
    /// Directory holding `<id>.wav` for evaluation queries.
    pub audio_root: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core and 1 forces the sequential path.
    pub threads: usize,
    pub audio: MelConfig,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub augment: AugRanges,
    pub train_encoder: EncoderTrainConfig,
    pub train_classifier: ClassifierTrainConfig,
    pub index: IvfPqConfig,
    pub retrieval: RetrievalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.encoder.validate()?;
        if self.encoder.n_mels != self.audio.n_mels || self.encoder.n_frames != self.audio.n_frames {
            return Err(Error::Config(format!(
                "encoder expects {}x{} inputs but features are {}x{}",
                self.encoder.n_mels, self.encoder.n_frames, self.audio.n_mels, self.audio.n_frames
            )));
        }
        self.classifier.validate(self.encoder.node_dim())?;
        self.augment.validate()?;
        self.train_encoder.validate()?;
        self.train_classifier.validate()?;
        self.index.validate(self.encoder.fp_dim)?;
        self.retrieval.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (keys sorted, no whitespace).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let digest = Sha256::digest(value.to_string().as_bytes());
        crate::weights::hex(&digest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.encoder.fp_dim, 128);
        assert_eq!(cfg.retrieval.topk_per_segment, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sede = 3"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[index]\nnprobes = 4"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[index]\nm = 5").is_err());
        assert!(RunConfig::from_toml("[retrieval]\nthreshold = 1.5").is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut cfg = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        cfg.index.nlist = Some(32);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn sections_override_independently() {
        let cfg = RunConfig::from_toml("seed = 4\n[retrieval]\nscope = { near = 1 }\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.retrieval.scope, crate::retrieval::QueryScope::Near(1));
        assert_eq!(cfg.index, IvfPqConfig::default());
    }
}
