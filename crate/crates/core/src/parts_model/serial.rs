//! Versioned TOML documents for models and feature-map fixtures.
//!
//! ```toml
//! format = "parts-model"
//! version = 1
//! cell_size = 8
//! bias = -2.0
//! threshold = 1.0
//!
//! [root]
//! width = 2
//! height = 2
//! dim = 1
//! weights = [1.0, 1.0, 1.0, 1.0]   # row-major, feature index fastest
//!
//! [[parts]]
//! anchor = [0, 0]
//! deform = [0.0, 0.0, 0.5, 0.5]
//! [parts.filter]
//! width = 1
//! height = 1
//! dim = 1
//! weights = [0.5]
//! ```
//!
//! A feature map uses `format = "feature-map"` with `width`, `height`,
//! `dim` and a flat `data` array in the same layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureMap, Filter, ModelError, PartSpec, PartsModel};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum ModelDocument {
    PartsModel {
        version: u32,
        cell_size: u32,
        bias: f64,
        threshold: f64,
        root: Filter,
        #[serde(default)]
        parts: Vec<PartSpec>,
    },
    FeatureMap {
        version: u32,
        width: usize,
        height: usize,
        dim: usize,
        data: Vec<f64>,
    },
}

fn check_version(v: u32) -> Result<(), ModelError> {
    if v == MODEL_FORMAT_VERSION {
        Ok(())
    } else {
        Err(ModelError::Format(format!(
            "unsupported document version {v} (expected {MODEL_FORMAT_VERSION})"
        )))
    }
}

impl PartsModel {
    pub fn to_toml(&self) -> String {
        let doc = ModelDocument::PartsModel {
            version: MODEL_FORMAT_VERSION,
            cell_size: self.cell_size,
            bias: self.bias,
            threshold: self.threshold,
            root: self.root.clone(),
            parts: self.parts.clone(),
        };
        toml::to_string(&doc).expect("model serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        match toml::from_str::<ModelDocument>(text).map_err(|e| ModelError::Format(e.to_string()))? {
            ModelDocument::PartsModel {
                version,
                cell_size,
                bias,
                threshold,
                root,
                parts,
            } => {
                check_version(version)?;
                let m = PartsModel {
                    root,
                    parts,
                    bias,
                    threshold,
                    cell_size,
                };
                m.validate()?;
                Ok(m)
            }
            ModelDocument::FeatureMap { .. } => Err(ModelError::Format("expected a parts-model document".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Format(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

impl FeatureMap {
    pub fn to_toml(&self) -> String {
        let doc = ModelDocument::FeatureMap {
            version: MODEL_FORMAT_VERSION,
            width: self.width,
            height: self.height,
            dim: self.dim,
            data: self.data.clone(),
        };
        toml::to_string(&doc).expect("feature map serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        match toml::from_str::<ModelDocument>(text).map_err(|e| ModelError::Format(e.to_string()))? {
            ModelDocument::FeatureMap {
                version,
                width,
                height,
                dim,
                data,
            } => {
                check_version(version)?;
                FeatureMap::new(width, height, dim, data)
            }
            ModelDocument::PartsModel { .. } => Err(ModelError::Format("expected a feature-map document".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_roundtrip() {
        let m = PartsModel::toy(8, 1.25);
        let text = m.to_toml();
        assert!(text.contains("format = \"parts-model\""));
        assert_eq!(PartsModel::from_toml(&text).unwrap(), m);
    }

    #[test]
    fn feature_map_roundtrip() {
        let f = FeatureMap::new(2, 1, 2, vec![0.1, -3.0, 2.5, 0.0]).unwrap();
        assert_eq!(FeatureMap::from_toml(&f.to_toml()).unwrap(), f);
    }

    #[test]
    fn rejects_wrong_version_and_kind() {
        let text = PartsModel::toy(8, 0.0).to_toml().replace("version = 1", "version = 7");
        assert!(PartsModel::from_toml(&text).is_err());
        let fm = FeatureMap::zeros(1, 1, 1).to_toml();
        assert!(PartsModel::from_toml(&fm).is_err());
    }

    #[test]
    fn rejects_invalid_parameters() {
        let mut m = PartsModel::toy(8, 0.0);
        m.parts[0].deform[3] = -1.0;
        assert!(matches!(
            PartsModel::from_toml(&m.to_toml()),
            Err(ModelError::NegativeQuadratic { .. })
        ));
        let mut m = PartsModel::toy(8, 0.0);
        m.root.weights.pop();
        assert!(matches!(PartsModel::from_toml(&m.to_toml()), Err(ModelError::Shape { .. })));
    }
}
