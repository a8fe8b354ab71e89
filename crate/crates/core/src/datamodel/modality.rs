use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modality names of the eleven-modality challenge corpus.
pub const DEFAULT_MODALITIES: [&str; 11] = [
    "CT",
    "MR",
    "PET",
    "US",
    "XRay",
    "Mammography",
    "OCT",
    "Endoscopy",
    "Fundus",
    "Dermoscopy",
    "Microscopy",
];

/// A registered modality: its position in the registry and its name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityId {
    pub index: usize,
    pub name: String,
}

impl ModalityId {
    /// Text fed to the frozen text embedder, e.g. `"CT Image"`.
    pub fn prompt_text(&self) -> String {
        format!("{} Image", self.name)
    }
}

/// Ordered, duplicate-free list of modality names fixing the index<->name
/// bijection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ModalityRegistry {
    names: Vec<String>,
}

impl ModalityRegistry {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Dataset("modality registry must not be empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::Dataset("modality names must be non-empty".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::Dataset(format!("duplicate modality `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn challenge() -> Self {
        Self::new(DEFAULT_MODALITIES).expect("static registry is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<ModalityId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|index| ModalityId {
                index,
                name: name.to_string(),
            })
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    pub fn by_index(&self, index: usize) -> Result<ModalityId> {
        self.names
            .get(index)
            .map(|name| ModalityId {
                index,
                name: name.clone(),
            })
            .ok_or_else(|| Error::UnknownModality(format!("#{index}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = ModalityId> + '_ {
        self.names.iter().enumerate().map(|(index, name)| ModalityId {
            index,
            name: name.clone(),
        })
    }
}

impl TryFrom<Vec<String>> for ModalityRegistry {
    type Error = Error;

    fn try_from(value: Vec<String>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ModalityRegistry> for Vec<String> {
    fn from(r: ModalityRegistry) -> Self {
        r.names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn challenge_registry_has_eleven() {
        let r = ModalityRegistry::challenge();
        assert_eq!(r.len(), 11);
        assert_eq!(r.get("MR").unwrap().index, 1);
        assert_eq!(r.by_index(10).unwrap().name, "Microscopy");
    }

    #[test]
    fn bijection() {
        let r = ModalityRegistry::challenge();
        for m in r.iter() {
            assert_eq!(r.get(&m.name).unwrap(), m);
            assert_eq!(r.by_index(m.index).unwrap(), m);
        }
    }

    #[test]
    fn rejects_empty_and_duplicates() {
        assert!(ModalityRegistry::new(Vec::<String>::new()).is_err());
        assert!(ModalityRegistry::new(["CT", "CT"]).is_err());
        assert!(matches!(
            ModalityRegistry::challenge().get("Sonar"),
            Err(Error::UnknownModality(_))
        ));
    }

    #[test]
    fn prompt_text() {
        let m = ModalityRegistry::challenge().get("CT").unwrap();
        assert_eq!(m.prompt_text(), "CT Image");
    }
}
