//! Versioned JSON weight documents.

use serde::{Deserialize, Serialize};

use super::{MixerConfig, MixerModel, ParamLayout};
use crate::error::{Error, Result};

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDocument {
    pub format_version: u32,
    pub config: MixerConfig,
    pub parameters: Vec<NamedTensor>,
}

impl From<&MixerModel> for WeightDocument {
    fn from(model: &MixerModel) -> Self {
        let parameters = model
            .layout()
            .tensors()
            .iter()
            .map(|t| NamedTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                values: model.params()[t.range()].to_vec(),
            })
            .collect();
        Self {
            format_version: WEIGHT_FORMAT_VERSION,
            config: *model.config(),
            parameters,
        }
    }
}

impl TryFrom<WeightDocument> for MixerModel {
    type Error = Error;

    fn try_from(doc: WeightDocument) -> Result<Self> {
        if doc.format_version != WEIGHT_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                expected: WEIGHT_FORMAT_VERSION,
                found: doc.format_version,
            });
        }
        doc.config.validate()?;
        let layout = ParamLayout::new(&doc.config);
        if doc.parameters.len() != layout.tensors().len() {
            return Err(Error::Shape {
                name: "parameter list".into(),
                expected: layout.tensors().len(),
                found: doc.parameters.len(),
            });
        }
        let mut params = vec![0.0; layout.len()];
        for spec in layout.tensors() {
            let tensor = doc
                .parameters
                .iter()
                .find(|t| t.name == spec.name)
                .ok_or_else(|| Error::Shape {
                    name: spec.name.clone(),
                    expected: spec.len(),
                    found: 0,
                })?;
            if tensor.shape != spec.shape || tensor.values.len() != spec.len() {
                return Err(Error::Shape {
                    name: spec.name.clone(),
                    expected: spec.len(),
                    found: tensor.values.len(),
                });
            }
            params[spec.range()].copy_from_slice(&tensor.values);
        }
        MixerModel::from_params(doc.config, params)
    }
}

impl MixerModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&WeightDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: WeightDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_exact() {
        let model = MixerModel::init(MixerConfig::with_head(2), 3).unwrap();
        let back = MixerModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn rejects_wrong_shape_and_version() {
        let model = MixerModel::init(MixerConfig::with_head(1), 3).unwrap();
        let mut doc = WeightDocument::from(&model);
        doc.parameters[3].values.pop();
        assert!(matches!(
            MixerModel::try_from(doc),
            Err(Error::Shape { .. })
        ));

        let mut doc = WeightDocument::from(&model);
        doc.config.embed_dim = 16;
        assert!(matches!(
            MixerModel::try_from(doc),
            Err(Error::Shape { .. })
        ));

        let mut doc = WeightDocument::from(&model);
        doc.format_version = 99;
        assert!(matches!(
            MixerModel::try_from(doc),
            Err(Error::FormatVersion { found: 99, .. })
        ));
    }
}
