use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StoreError, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// TOML sidecar written next to each store file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub store: String,
    pub split: Split,
    /// Backbone name, or `"synthetic"` when `synth` is present.
    pub provenance: String,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

impl StoreManifest {
    pub fn synthetic(store: &str, split: Split, spec: &SynthSpec) -> Self {
        Self {
            store: store.to_string(),
            split,
            provenance: "synthetic".into(),
            class_names: (0..spec.classes).map(|c| format!("class_{c:02}")).collect(),
            synth: Some(spec.clone()),
        }
    }

    /// Sidecar path for a store: `train.pemb` -> `train.pemb.toml`.
    pub fn sidecar_path(store: &Path) -> std::path::PathBuf {
        let mut name = store.as_os_str().to_owned();
        name.push(".toml");
        name.into()
    }

    pub fn to_toml(&self) -> Result<String, StoreError> {
        toml::to_string(self).map_err(|e| StoreError::Manifest(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, StoreError> {
        toml::from_str(text).map_err(|e| StoreError::Manifest(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.to_toml()?).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_through_toml() {
        let spec = SynthSpec::default();
        let m = StoreManifest::synthetic("train.pemb", Split::Train, &spec);
        let text = m.to_toml().unwrap();
        assert!(text.contains("split = \"train\""));
        assert_eq!(StoreManifest::from_toml(&text).unwrap(), m);
    }
}
