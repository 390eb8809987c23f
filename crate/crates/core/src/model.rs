//! Trained weights bundle: the encoder plus, after the second stage, the
//! classifier, stored in one tensor container.
//!
//! Tensors are written in double precision so that a reloaded model hashes
//! the same as the one that was trained, which keeps the hashes embedded in
//! databases and indexes valid.

use std::path::Path;

use serde_json::json;

use crate::classifier::{Classifier, ClassifierConfig, MhcaParams, PARAM_NAMES};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::weights::{Container, Dtype};

pub const MODEL_KIND: &str = "asid-model";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub classifier: Option<Classifier>,
}

impl Model {
    pub fn new(encoder: Encoder) -> Self {
        Self {
            encoder,
            classifier: None,
        }
    }

    pub fn classifier(&self) -> Result<&Classifier> {
        self.classifier.as_ref().ok_or_else(|| {
            Error::Config("weights hold no classifier; run train-classifier first".into())
        })
    }

    /// `config_hash` and `seed` record the run that produced the weights.
    pub fn to_container(&self, config_hash: &str, seed: u64) -> Container {
        let mut c = Container::new(
            MODEL_KIND,
            json!({
                "encoder_config": self.encoder.config,
                "encoder_hash": self.encoder.param_hash(),
                "classifier_config": self.classifier.as_ref().map(|c| &c.config),
                "classifier_hash": self.classifier.as_ref().map(|c| c.param_hash()),
                "config_hash": config_hash,
                "seed": seed,
            }),
        );
        let names = self.encoder.params.names();
        for (name, t) in names.into_iter().zip(self.encoder.params.iter()) {
            c.push(name, t.clone());
        }
        if let Some(clf) = &self.classifier {
            for (name, t) in PARAM_NAMES.iter().zip(clf.params.iter()) {
                c.push(*name, t.clone());
            }
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(MODEL_KIND)?;
        let field = |key: &str| c.metadata.get(key).cloned().unwrap_or(serde_json::Value::Null);
        let enc_cfg: EncoderConfig = serde_json::from_value(field("encoder_config"))?;
        let clf_cfg: Option<ClassifierConfig> = serde_json::from_value(field("classifier_config"))?;
        let (enc_hash, clf_hash) = (field("encoder_hash"), field("classifier_hash"));

        let names = EncoderParams::shapes(&enc_cfg).names();
        let tensors = names
            .iter()
            .map(|n| c.take(n))
            .collect::<Result<Vec<_>>>()?;
        let encoder = Encoder::new(enc_cfg.clone(), EncoderParams::from_tensors(&enc_cfg, tensors)?)?;
        if enc_hash.as_str() != Some(encoder.param_hash().as_str()) {
            return Err(Error::Format("encoder weights do not match their recorded hash".into()));
        }
        let classifier = match clf_cfg {
            None => None,
            Some(cfg) => {
                let params = MhcaParams {
                    wq: c.take(PARAM_NAMES[0])?,
                    wk: c.take(PARAM_NAMES[1])?,
                    wv: c.take(PARAM_NAMES[2])?,
                    wo: c.take(PARAM_NAMES[3])?,
                    w: c.take(PARAM_NAMES[4])?,
                    b: c.take(PARAM_NAMES[5])?,
                };
                let clf = Classifier::new(cfg, params)?;
                if clf_hash.as_str() != Some(clf.param_hash().as_str()) {
                    return Err(Error::Format(
                        "classifier weights do not match their recorded hash".into(),
                    ));
                }
                if clf.node_dim() != encoder.config.node_dim() {
                    return Err(Error::Shape("classifier width differs from encoder nodes".into()));
                }
                Some(clf)
            }
        };
        if let Some((name, _)) = c.tensors.first() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            encoder,
            classifier,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str, seed: u64) -> Result<()> {
        self.to_container(config_hash, seed).write(path, Dtype::F64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trips_with_and_without_classifier() {
        let enc = Encoder::init(EncoderConfig::tiny(), 4).unwrap();
        let mut model = Model::new(enc);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        model.save(&path, "cfg", 1).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, model);
        assert!(back.classifier().is_err());

        model.classifier = Some(Classifier::init(ClassifierConfig::default(), 16, 5).unwrap());
        model.save(&path, "cfg", 1).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.encoder.param_hash(), model.encoder.param_hash());
        assert_eq!(back, model);
    }

    #[test]
    fn tampered_metadata_is_caught() {
        let model = Model::new(Encoder::init(EncoderConfig::tiny(), 4).unwrap());
        let mut c = model.to_container("cfg", 0);
        c.metadata["encoder_hash"] = json!("0000");
        assert!(matches!(Model::from_container(c), Err(Error::Format(_))));
    }
}
