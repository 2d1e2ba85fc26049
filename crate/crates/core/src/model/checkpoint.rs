//! JSON checkpoints: the model config plus a manifest of named tensors.
//!
//! ```json
//! {
//!   "format": "clbp-checkpoint",
//!   "version": 1,
//!   "config": { "input_dim": 64, ... },
//!   "params": [ { "name": "visual.w_input", "shape": [64, 64], "values": [...] }, ... ]
//! }
//! ```
//!
//! Floats are written with shortest round-trip formatting, so loading gives
//! back bit-identical weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClbpModel, ModelConfig};
use crate::error::{Error, Result};
use crate::persist;
use crate::tensor::Tensor;

pub const FORMAT: &str = "clbp-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn entries(model: &ClbpModel) -> Vec<(&'static str, &Tensor)> {
    let mut all = model.frozen();
    all.push(("anchor.template", &model.anchor.template));
    all.push(("anchor.class_tokens", &model.anchor.class_tokens));
    all.extend(model.trainable());
    all
}

impl Checkpoint {
    pub fn from_model(model: &ClbpModel) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config.clone(),
            params: entries(model)
                .into_iter()
                .map(|(name, t)| ParamEntry {
                    name: name.into(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model, checking every expected tensor is present with the
    /// shape the config implies.
    pub fn into_model(self) -> Result<ClbpModel> {
        let mut model = ClbpModel::new(self.config)?;
        let mut by_name: std::collections::HashMap<String, ParamEntry> = self
            .params
            .into_iter()
            .map(|p| (p.name.clone(), p))
            .collect();
        let names: Vec<(&'static str, Vec<usize>)> = entries(&model)
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut loaded = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            let entry = by_name
                .remove(*name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if &entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    entry.shape
                )));
            }
            loaded.push(Tensor::new(entry.shape, entry.values)?);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let mut it = loaded.into_iter();
        let mut next = || it.next().expect("one tensor per name");
        model.visual.w_input = next();
        model.visual.w_prompt = next();
        model.visual.bias = next();
        model.visual.w_out = next();
        model.text.embed = next();
        model.text.positions = next();
        model.text.proj = next();
        model.vocab.template = next();
        model.vocab.class_tokens = next();
        model.anchor.prototypes = next();
        model.anchor.template = next();
        model.anchor.class_tokens = next();
        for slot in model.trainable_mut() {
            *slot = next();
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint: format {:?}", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| Error::from_json(e, text))
    }
}

pub fn save(model: &ClbpModel, path: &Path) -> Result<()> {
    persist::write_atomic(path, Checkpoint::from_model(model).to_json().as_bytes())
}

pub fn load(path: &Path) -> Result<ClbpModel> {
    let text = persist::read_to_string(path)?;
    Checkpoint::from_json(&text)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = ClbpModel::new(ModelConfig::default()).unwrap();
        m.t2v.out.weight.data_mut()[3] = 0.1 + 0.2;
        m.compose.out.bias.data_mut()[0] = -1.0e-310;
        let text = Checkpoint::from_model(&m).to_json();
        let back = Checkpoint::from_json(&text).unwrap().into_model().unwrap();
        for ((n, a), (_, b)) in entries(&m).into_iter().zip(entries(&back)) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{n}");
        }
        assert_eq!(back, m);
    }

    #[test]
    fn version_and_format_are_checked() {
        let m = ClbpModel::new(ModelConfig::default()).unwrap();
        let mut ck = Checkpoint::from_model(&m);
        ck.version = 9;
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json()),
            Err(Error::Version { found: 9, .. })
        ));
        ck.version = VERSION;
        ck.format = "other".into();
        assert!(matches!(Checkpoint::from_json(&ck.to_json()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_tensor_is_reported() {
        let m = ClbpModel::new(ModelConfig::default()).unwrap();
        let mut ck = Checkpoint::from_model(&m);
        ck.params.retain(|p| p.name != "v2t.out.bias");
        assert!(matches!(ck.into_model(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_text_gives_offset() {
        let m = ClbpModel::new(ModelConfig::default()).unwrap();
        let text = Checkpoint::from_model(&m).to_json();
        let cut = &text[..text.len() / 2];
        match Checkpoint::from_json(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
