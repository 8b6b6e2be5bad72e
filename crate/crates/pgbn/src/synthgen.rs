//! Writes a synthetic planted-lesion dataset to disk.
//!
//! Layout under the output directory: `<task>/sub-NNNN.vol` volumes, one
//! manifest per task (`<task>.csv`), a combined `manifest.csv`, the
//! ground-truth `lesion_mask.vol` at canonical size and the effective
//! `spec.toml`.

use std::path::{Path, PathBuf};

use pgbn_core::synth::{generate_subject, lesion_mask, subjects, SynthSpec, Task};

use crate::config::SynthFile;
use crate::error::{io_err, Result};
use crate::manifest::{write_manifest, Manifest, ManifestEntry};
use crate::volume::write_volume;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub tasks: Vec<(Task, PathBuf)>,
    pub combined: PathBuf,
    pub mask: PathBuf,
    pub subjects: usize,
}

pub fn generate_dataset(spec: &SynthSpec, out: &Path) -> Result<GeneratedDataset> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let spec_path = out.join("spec.toml");
    std::fs::write(&spec_path, SynthFile::from(spec).to_toml()?).map_err(io_err(&spec_path))?;

    let mut combined = Manifest::default();
    let mut tasks = Vec::new();
    for &task in &spec.tasks {
        let mut m = Manifest::default();
        for rec in subjects(spec, task) {
            let volume = generate_subject::<f32>(spec, &rec, rec.label == 1)?;
            let path = out.join(task.name()).join(format!("sub-{:04}.vol", rec.subject));
            write_volume(&path, &volume)?;
            m.entries.push(ManifestEntry {
                path,
                label: rec.label,
                subject: rec.subject as u64,
                task: task.name().to_string(),
                fold: rec.fold,
            });
        }
        let path = out.join(format!("{}.csv", task.name()));
        write_manifest(&path, &m)?;
        combined.entries.extend(m.entries);
        tasks.push((task, path));
    }
    let combined_path = out.join("manifest.csv");
    write_manifest(&combined_path, &combined)?;
    let mask = out.join("lesion_mask.vol");
    write_volume(&mask, &lesion_mask::<f32>(spec))?;
    Ok(GeneratedDataset {
        tasks,
        combined: combined_path,
        mask,
        subjects: combined.entries.len(),
    })
}
