use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::case::{load_case, CaseRecord};
use super::modality::{ModalityId, ModalityRegistry};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CASE_EXTENSION: &str = "npz";

/// `manifest.json` at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub modalities: Vec<String>,
    pub counts: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Option<Self>> {
        let p = root.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let p = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Everything the samplers need to know about a case without loading pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseDescriptor {
    pub case_id: String,
    pub modality: ModalityId,
    /// Container path; `None` for in-memory indices.
    pub path: Option<PathBuf>,
    /// 2 or 3.
    pub dims: usize,
    /// Labels present on each slice (length `Z`, 1 for planar cases).
    pub slice_labels: Vec<Vec<u16>>,
}

impl CaseDescriptor {
    pub fn from_case(case: &CaseRecord, path: Option<PathBuf>) -> Self {
        Self {
            case_id: case.case_id.clone(),
            modality: case.modality.clone(),
            path,
            dims: case.dims(),
            slice_labels: case.slice_labels(),
        }
    }

    pub fn depth(&self) -> usize {
        self.slice_labels.len()
    }

    pub fn load(&self) -> Result<CaseRecord> {
        let path = self.path.as_ref().ok_or_else(|| {
            Error::Dataset(format!("case {} has no backing container", self.case_id))
        })?;
        load_case(path, &self.case_id, self.modality.clone())
    }
}

/// Per-modality case lists.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    registry: ModalityRegistry,
    by_modality: Vec<Vec<CaseDescriptor>>,
    root: Option<PathBuf>,
}

impl DatasetIndex {
    /// Builds an index from descriptors; each descriptor's modality must be
    /// registered and case ids must be unique.
    pub fn from_descriptors(
        registry: ModalityRegistry,
        cases: impl IntoIterator<Item = CaseDescriptor>,
    ) -> Result<Self> {
        let mut by_modality = vec![Vec::new(); registry.len()];
        let mut ids = HashSet::new();
        for c in cases {
            let m = registry.get(&c.modality.name)?;
            if m.index != c.modality.index {
                return Err(Error::Dataset(format!(
                    "case {} carries modality index {} but registry has {}",
                    c.case_id, c.modality.index, m.index
                )));
            }
            if !ids.insert(c.case_id.clone()) {
                return Err(Error::Dataset(format!("duplicate case id `{}`", c.case_id)));
            }
            if c.slice_labels.is_empty() {
                return Err(Error::Dataset(format!("case {} has no slices", c.case_id)));
            }
            by_modality[m.index].push(c);
        }
        Ok(Self {
            registry,
            by_modality,
            root: None,
        })
    }

    pub fn registry(&self) -> &ModalityRegistry {
        &self.registry
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn num_modalities(&self) -> usize {
        self.registry.len()
    }

    /// `C_j` for each registered modality.
    pub fn counts(&self) -> Vec<usize> {
        self.by_modality.iter().map(Vec::len).collect()
    }

    pub fn cases_of(&self, modality: usize) -> &[CaseDescriptor] {
        &self.by_modality[modality]
    }

    pub fn cases(&self) -> impl Iterator<Item = &CaseDescriptor> {
        self.by_modality.iter().flatten()
    }

    pub fn total_cases(&self) -> usize {
        self.by_modality.iter().map(Vec::len).sum()
    }

    pub fn total_slices(&self) -> usize {
        self.cases().map(CaseDescriptor::depth).sum()
    }

    /// Slices per modality.
    pub fn slice_counts(&self) -> Vec<usize> {
        self.by_modality
            .iter()
            .map(|cs| cs.iter().map(CaseDescriptor::depth).sum())
            .collect()
    }

    pub fn find(&self, case_id: &str) -> Option<&CaseDescriptor> {
        self.cases().find(|c| c.case_id == case_id)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            modalities: self.registry.names().to_vec(),
            counts: self
                .registry
                .names()
                .iter()
                .cloned()
                .zip(self.counts())
                .collect(),
        }
    }
}

/// Scans `root/<Modality>/<case>.npz`.
///
/// The registry comes from `root/manifest.json` when present; otherwise the
/// subdirectories present are taken in the default registry order, and a
/// directory whose name is not a known modality is rejected.
pub fn build_index(root: &Path) -> Result<DatasetIndex> {
    build_index_with(root, Execution::default())
}

pub fn build_index_with(root: &Path, exec: Execution) -> Result<DatasetIndex> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "no modalities found under {}",
            root.display()
        )));
    }
    dirs.sort();

    let manifest = Manifest::read(root)?;
    let registry = match &manifest {
        Some(m) => ModalityRegistry::new(m.modalities.clone())?,
        None => {
            let known = ModalityRegistry::challenge();
            let mut present: Vec<ModalityId> = Vec::new();
            for d in &dirs {
                present.push(known.get(d).map_err(|_| {
                    Error::Dataset(format!(
                        "unknown modality directory `{d}` under {} (expected one of {:?} or a manifest.json)",
                        root.display(),
                        known.names()
                    ))
                })?);
            }
            present.sort_by_key(|m| m.index);
            ModalityRegistry::new(present.into_iter().map(|m| m.name))?
        }
    };
    for d in &dirs {
        if registry.get(d).is_err() {
            return Err(Error::Dataset(format!(
                "unknown modality directory `{d}` (not in manifest registry {:?})",
                registry.names()
            )));
        }
    }

    let mut jobs: Vec<(PathBuf, String, ModalityId)> = Vec::new();
    for m in registry.iter() {
        let dir = root.join(&m.name);
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == CASE_EXTENSION))
            .collect();
        files.sort();
        for f in files {
            let id = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            jobs.push((f, id, m.clone()));
        }
    }
    let descriptors = exec::try_map(exec, &jobs, |(path, id, m)| {
        let case = load_case(path, id, m.clone())?;
        Ok::<_, Error>(CaseDescriptor::from_case(&case, Some(path.clone())))
    })?;
    let mut index = DatasetIndex::from_descriptors(registry, descriptors)?;
    if let Some(m) = manifest {
        for (name, &count) in &m.counts {
            let idx = index.registry.get(name)?.index;
            if index.by_modality[idx].len() != count {
                log::warn!(
                    "manifest lists {count} {name} cases but {} were found",
                    index.by_modality[idx].len()
                );
            }
        }
    }
    index.root = Some(root.to_path_buf());
    Ok(index)
}
