//! TOML configuration files for training runs and synthetic datasets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pgbn_core::model::{ModelConfig, Variant, Widths};
use pgbn_core::synth::{Sphere, SynthSpec, Task};
use pgbn_core::train::TrainConfig;

use crate::error::{invalid, io_err, FormatError, Result};

/// Channel widths: a named preset or an explicit table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WidthsSpec {
    Preset(String),
    Table { encoder: [usize; 5], gate: [usize; 4] },
}

impl WidthsSpec {
    pub fn resolve(&self) -> Result<Widths> {
        match self {
            WidthsSpec::Preset(name) => match name.as_str() {
                "desk" => Ok(Widths::DESK),
                "full" => Ok(Widths::FULL),
                other => Err(invalid("widths", format!("unknown preset {other:?} (desk or full)"))),
            },
            WidthsSpec::Table { encoder, gate } => Ok(Widths {
                encoder: *encoder,
                gate: *gate,
            }),
        }
    }
}

/// A cube edge or three extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Extent {
    Cube(usize),
    Box([usize; 3]),
}

impl Extent {
    pub fn dims(self) -> [usize; 3] {
        match self {
            Extent::Cube(n) => [n; 3],
            Extent::Box(d) => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Training run description; every key is required and no others are
/// accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub variant: String,
    pub patch_size: usize,
    pub widths: WidthsSpec,
    pub lambda: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub crop: Extent,
    pub seed: u64,
    pub precision: Precision,
    pub dataset_manifest: PathBuf,
    pub out_dir: PathBuf,
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self> {
        let f: TrainFile = toml::from_str(text)?;
        f.model()?;
        f.train_config().validate()?;
        if !(f.lambda >= 0.0) {
            return Err(invalid("lambda", format!("{} is negative", f.lambda)));
        }
        Ok(f)
    }

    /// Reads a config; relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut f = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut f.dataset_manifest, &mut f.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(f)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid("config", e.to_string()))
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let variant: Variant = self.variant.parse()?;
        Ok(ModelConfig::new(variant, self.patch_size, self.widths.resolve()?)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            batch: self.batch,
            peak_lr: self.peak_lr,
            warmup_epochs: self.warmup_epochs,
            crop: self.crop.dims(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereSpec {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Synthetic dataset description. Missing keys take the generator defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthFile {
    pub canonical: Extent,
    pub crop: Extent,
    pub n_per_class: usize,
    pub spheres: Vec<SphereSpec>,
    pub delta_easy: f64,
    pub delta_hard: f64,
    pub q: f64,
    pub jitter: f64,
    pub noise: f64,
    pub blobs: usize,
    pub texture_blobs: usize,
    pub texture_jitter: f64,
    pub texture_sigma: [f64; 2],
    pub tasks: Vec<String>,
    pub seed: u64,
}

impl From<&SynthSpec> for SynthFile {
    fn from(s: &SynthSpec) -> Self {
        Self {
            canonical: Extent::Box(s.canonical),
            crop: Extent::Box(s.crop),
            n_per_class: s.n_per_class,
            spheres: s
                .spheres
                .iter()
                .map(|sp| SphereSpec {
                    center: sp.center,
                    radius: sp.radius,
                })
                .collect(),
            delta_easy: s.delta_easy,
            delta_hard: s.delta_hard,
            q: s.q,
            jitter: s.jitter,
            noise: s.noise,
            blobs: s.blobs,
            texture_blobs: s.texture_blobs,
            texture_jitter: s.texture_jitter,
            texture_sigma: s.texture_sigma,
            tasks: s.tasks.iter().map(|t| t.name().to_string()).collect(),
            seed: s.seed,
        }
    }
}

impl Default for SynthFile {
    fn default() -> Self {
        Self::from(&SynthSpec::default())
    }
}

impl SynthFile {
    pub fn spec(&self) -> Result<SynthSpec> {
        let tasks = self
            .tasks
            .iter()
            .map(|t| t.parse::<Task>())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let spec = SynthSpec {
            canonical: self.canonical.dims(),
            crop: self.crop.dims(),
            n_per_class: self.n_per_class,
            spheres: self
                .spheres
                .iter()
                .map(|s| Sphere {
                    center: s.center,
                    radius: s.radius,
                })
                .collect(),
            delta_easy: self.delta_easy,
            delta_hard: self.delta_hard,
            q: self.q,
            jitter: self.jitter,
            noise: self.noise,
            blobs: self.blobs,
            texture_blobs: self.texture_blobs,
            texture_jitter: self.texture_jitter,
            texture_sigma: self.texture_sigma,
            tasks,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid("synth spec", e.to_string()))
    }
}

pub fn read_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let file: SynthFile = toml::from_str(&text).map_err(FormatError::from)?;
    file.spec()
}
