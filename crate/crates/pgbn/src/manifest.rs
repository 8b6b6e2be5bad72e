//! Dataset manifests: CSV with header `path,label,subject,task,fold`.
//! Paths are stored relative to the manifest's directory when possible.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pgbn_core::synth::normalize_volume;
use pgbn_core::train::{FoldPlan, Sample};
use pgbn_core::Real;

use crate::error::{invalid, io_err, Result};
use crate::volume::read_volume;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
    pub subject: u64,
    pub task: String,
    pub fold: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn fold_plan(&self) -> Result<FoldPlan> {
        Ok(FoldPlan::from_groups(self.entries.iter().map(|e| e.fold).collect())?)
    }

    /// Entries with the given task tag.
    pub fn task(&self, task: &str) -> Manifest {
        Manifest {
            entries: self.entries.iter().filter(|e| e.task == task).cloned().collect(),
        }
    }

    fn check(&self) -> Result<()> {
        for e in &self.entries {
            if e.label > 1 {
                return Err(invalid("manifest label", format!("{} for {}", e.label, e.path.display())));
            }
            if !(1..=5).contains(&e.fold) {
                return Err(invalid("manifest fold", format!("{} for {}", e.fold, e.path.display())));
            }
        }
        Ok(())
    }
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut entries = Vec::new();
    for row in reader.deserialize() {
        let mut e: ManifestEntry = row?;
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
        entries.push(e);
    }
    let m = Manifest { entries };
    m.check()?;
    Ok(m)
}

/// Writes a manifest, storing paths relative to its directory when they
/// lie below it.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    manifest.check()?;
    let base = path.parent().unwrap_or(Path::new(""));
    if !base.as_os_str().is_empty() {
        std::fs::create_dir_all(base).map_err(io_err(base))?;
    }
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut writer = csv::Writer::from_writer(file);
    for e in &manifest.entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        writer.serialize(ManifestEntry {
            path: rel.to_path_buf(),
            ..e.clone()
        })?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

/// Loads and standardizes every volume. Sample ids are the subject ids.
pub fn load_samples<T: Real>(manifest: &Manifest) -> Result<Vec<Sample<T>>> {
    let mut dims = None;
    manifest
        .entries
        .iter()
        .map(|e| {
            let raw = read_volume::<T>(&e.path)?;
            if raw.shape().first() != Some(&1) {
                return Err(invalid("volume", format!("{} is not single-channel", e.path.display())));
            }
            let d = raw.spatial()?;
            if *dims.get_or_insert(d) != d {
                return Err(invalid("volume", format!("{} has extents {d:?}, expected {:?}", e.path.display(), dims.unwrap())));
            }
            Ok(Sample {
                id: e.subject as usize,
                volume: normalize_volume(&raw)?,
                label: e.label,
            })
        })
        .collect()
}
