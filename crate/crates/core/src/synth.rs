//! Planted-lesion benchmark: smooth anatomy, per-subject jitter, white noise
//! and a multiplicative intensity drop inside fixed spheres for positives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    /// Centre in canonical voxel coordinates (depth, height, width).
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    pub fn contains(&self, v: [usize; 3]) -> bool {
        let mut d2 = 0.0;
        for a in 0..3 {
            let d = v[a] as f64 - self.center[a];
            d2 += d * d;
        }
        d2 <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Easy,
    Hard,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Easy => "easy",
            Task::Hard => "hard",
        }
    }

    fn index(self) -> u64 {
        match self {
            Task::Easy => 0,
            Task::Hard => 1,
        }
    }
}

impl core::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Task::Easy),
            "hard" => Ok(Task::Hard),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub canonical: [usize; 3],
    pub crop: [usize; 3],
    pub n_per_class: usize,
    pub spheres: Vec<Sphere>,
    pub delta_easy: f64,
    pub delta_hard: f64,
    /// Probability that a positive subject carries each sphere.
    pub q: f64,
    /// Relative standard deviation of the per-subject blob amplitudes.
    pub jitter: f64,
    pub noise: f64,
    /// Number of Gaussian blobs in the anatomy template.
    pub blobs: usize,
    /// Small blobs at fixed template positions whose amplitudes are drawn
    /// per subject (zero mean, this standard deviation).
    pub texture_blobs: usize,
    pub texture_jitter: f64,
    /// Range of the texture blob widths.
    pub texture_sigma: [f64; 2],
    pub tasks: Vec<Task>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            canonical: [72; 3],
            crop: [64; 3],
            n_per_class: 150,
            spheres: vec![
                Sphere {
                    center: [28.0, 20.0, 36.0],
                    radius: 5.0,
                },
                Sphere {
                    center: [44.0, 44.0, 20.0],
                    radius: 7.0,
                },
            ],
            delta_easy: 0.35,
            delta_hard: 0.15,
            q: 0.7,
            jitter: 0.3,
            noise: 0.1,
            blobs: 12,
            texture_blobs: 0,
            texture_jitter: 0.0,
            texture_sigma: [2.0, 4.0],
            tasks: vec![Task::Easy, Task::Hard],
            seed: 2024,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidArgument(msg));
        for (name, d) in [("delta_easy", self.delta_easy), ("delta_hard", self.delta_hard)] {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("{name} must lie in [0, 1), got {d}"));
            }
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return bad(format!("q must lie in (0, 1], got {}", self.q));
        }
        if self.noise < 0.0 || self.jitter < 0.0 || self.texture_jitter < 0.0 {
            return bad("noise and jitter must be non-negative".into());
        }
        if !(self.texture_sigma[0] > 0.0 && self.texture_sigma[1] >= self.texture_sigma[0]) {
            return bad(format!("bad texture width range {:?}", self.texture_sigma));
        }
        if self.n_per_class == 0 || self.tasks.is_empty() {
            return bad("need at least one subject per class and one task".into());
        }
        if self.spheres.is_empty() {
            return bad("need at least one lesion sphere".into());
        }
        for a in 0..3 {
            if self.crop[a] == 0 || self.crop[a] > self.canonical[a] {
                return bad(format!("crop {:?} does not fit canonical {:?}", self.crop, self.canonical));
            }
        }
        // Every legal crop window covers [margin, crop - 1] on each axis.
        for s in &self.spheres {
            for a in 0..3 {
                let lo = (self.canonical[a] - self.crop[a]) as f64;
                let hi = (self.crop[a] - 1) as f64;
                if s.radius <= 0.0 || s.center[a] - s.radius < lo || s.center[a] + s.radius > hi {
                    return bad(format!(
                        "sphere {:?} r={} leaves the region [{lo}, {hi}] shared by all crops",
                        s.center, s.radius
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn delta(&self, task: Task) -> f64 {
        match task {
            Task::Easy => self.delta_easy,
            Task::Hard => self.delta_hard,
        }
    }

    /// Offset of the centred crop (margin / 2 rounded down).
    pub fn center_offset(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| (self.canonical[a] - self.crop[a]) / 2)
    }
}

/// One row of the dataset manifest, without the file path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubjectRecord {
    pub subject: usize,
    pub label: u8,
    pub task: Task,
    /// Fold group 1..=5.
    pub fold: u8,
}

/// Subjects of one task: labels alternate, and each class is spread over
/// the five fold groups round-robin.
pub fn subjects(spec: &SynthSpec, task: Task) -> Vec<SubjectRecord> {
    let n = 2 * spec.n_per_class;
    let first = task.index() as usize * n;
    (0..n)
        .map(|i| SubjectRecord {
            subject: first + i,
            label: (i % 2) as u8,
            task,
            fold: ((i / 2) % 5 + 1) as u8,
        })
        .collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream per (seed, subject, purpose).
pub fn derive_seed(seed: u64, subject: u64, stream: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ subject) ^ stream)
}

const TEMPLATE_STREAM: u64 = u64::MAX;
const ANATOMY_STREAM: u64 = 0;
const LESION_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

fn template(spec: &SynthSpec) -> (Vec<Blob>, Vec<Blob>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, TEMPLATE_STREAM, 0));
    let blob = |sigma: [f64; 2], amplitude: f64, rng: &mut ChaCha8Rng| Blob {
        center: [0, 1, 2].map(|a| rng.random_range(0.0..spec.canonical[a] as f64)),
        sigma: if sigma[1] > sigma[0] { rng.random_range(sigma[0]..sigma[1]) } else { sigma[0] },
        amplitude,
    };
    let coarse = (0..spec.blobs)
        .map(|_| {
            let a = rng.random_range(-0.5..0.7);
            blob([6.0, 14.0], a, &mut rng)
        })
        .collect();
    let fine = (0..spec.texture_blobs).map(|_| blob(spec.texture_sigma, 0.0, &mut rng)).collect();
    (coarse, fine)
}

/// Adds a Gaussian blob, truncated at four widths.
fn add_blob(data: &mut [f64], dims: [usize; 3], b: &Blob) {
    let reach = libm::ceil(4.0 * b.sigma);
    let range = |a: usize| {
        let lo = (b.center[a] - reach).max(0.0) as usize;
        let hi = ((b.center[a] + reach).max(0.0) as usize).min(dims[a] - 1);
        let prof: Vec<f64> = (lo..=hi)
            .map(|i| {
                let t = (i as f64 - b.center[a]) / b.sigma;
                libm::exp(-0.5 * t * t)
            })
            .collect();
        (lo, prof)
    };
    let (z0, pz) = range(0);
    let (y0, py) = range(1);
    let (x0, px) = range(2);
    for (dz, wz) in pz.iter().enumerate() {
        for (dy, wy) in py.iter().enumerate() {
            let row = ((z0 + dz) * dims[1] + y0 + dy) * dims[2] + x0;
            let s = b.amplitude * wz * wy;
            for (v, wx) in data[row..row + px.len()].iter_mut().zip(&px) {
                *v += s * wx;
            }
        }
    }
}

/// Sphere subset carried by a positive subject (never empty).
pub fn lesion_subset(spec: &SynthSpec, record: &SubjectRecord) -> Vec<usize> {
    if record.label == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, record.subject as u64, LESION_STREAM));
    loop {
        let chosen: Vec<usize> = (0..spec.spheres.len()).filter(|_| rng.random_bool(spec.q)).collect();
        if !chosen.is_empty() {
            return chosen;
        }
    }
}

/// Raw canonical volume `[1, D, H, W]` of one subject. With `with_lesion`
/// false a positive subject yields its lesion-free counterfactual.
pub fn generate_subject<T: Real>(spec: &SynthSpec, record: &SubjectRecord, with_lesion: bool) -> Result<Tensor<T>> {
    spec.validate()?;
    let [d, h, w] = spec.canonical;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, record.subject as u64, ANATOMY_STREAM));
    let (coarse, fine) = template(spec);
    let blobs: Vec<Blob> = coarse
        .into_iter()
        .map(|b| {
            let z: f64 = StandardNormal.sample(&mut rng);
            Blob {
                amplitude: b.amplitude * (1.0 + spec.jitter * z),
                ..b
            }
        })
        .collect();
    let texture: Vec<Blob> = fine
        .into_iter()
        .map(|b| {
            let z: f64 = StandardNormal.sample(&mut rng);
            Blob {
                amplitude: spec.texture_jitter * z,
                ..b
            }
        })
        .collect();
    // Separable Gaussian profiles per blob and axis.
    let profiles: Vec<[Vec<f64>; 3]> = blobs
        .iter()
        .map(|b| {
            [0, 1, 2].map(|a| {
                (0..spec.canonical[a])
                    .map(|i| {
                        let t = (i as f64 - b.center[a]) / b.sigma;
                        libm::exp(-0.5 * t * t)
                    })
                    .collect()
            })
        })
        .collect();
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut v = 1.0;
                for (b, p) in blobs.iter().zip(&profiles) {
                    v += b.amplitude * p[0][z] * p[1][y] * p[2][x];
                }
                let n: f64 = StandardNormal.sample(&mut rng);
                data.push(v + spec.noise * n);
            }
        }
    }
    for b in &texture {
        add_blob(&mut data, spec.canonical, b);
    }
    if with_lesion {
        let factor = 1.0 - spec.delta(record.task);
        for s in lesion_subset(spec, record) {
            apply_sphere(&mut data, spec.canonical, &spec.spheres[s], factor);
        }
    }
    Tensor::new(vec![1, d, h, w], data.into_iter().map(T::of).collect())
}

fn sphere_bounds(s: &Sphere, n: usize, a: usize) -> core::ops::RangeInclusive<usize> {
    let lo = libm::floor(s.center[a] - s.radius).max(0.0) as usize;
    let hi = (libm::ceil(s.center[a] + s.radius) as usize).min(n - 1);
    lo..=hi
}

fn apply_sphere(data: &mut [f64], dims: [usize; 3], s: &Sphere, factor: f64) {
    for z in sphere_bounds(s, dims[0], 0) {
        for y in sphere_bounds(s, dims[1], 1) {
            for x in sphere_bounds(s, dims[2], 2) {
                if s.contains([z, y, x]) {
                    data[(z * dims[1] + y) * dims[2] + x] *= factor;
                }
            }
        }
    }
}

/// Binary mask `[1, D, H, W]` of the union of all spheres at canonical size.
pub fn lesion_mask<T: Real>(spec: &SynthSpec) -> Tensor<T> {
    let [d, h, w] = spec.canonical;
    let mut data = vec![1.0; d * h * w];
    for s in &spec.spheres {
        apply_sphere(&mut data, spec.canonical, s, 0.0);
    }
    Tensor::from_fn(&[1, d, h, w], |i| if data[i] == 0.0 { T::one() } else { T::zero() })
}

/// Per-image standardization to zero mean and unit (population) variance.
pub fn normalize_volume<T: Real>(volume: &Tensor<T>) -> Result<Tensor<T>> {
    if volume.is_empty() {
        return Err(Error::EmptyOutput("empty volume".into()));
    }
    let n = volume.len() as f64;
    let mean = volume.data().iter().map(|v| v.to_f64_lossless()).sum::<f64>() / n;
    let var = volume
        .data()
        .iter()
        .map(|v| {
            let d = v.to_f64_lossless() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if !(var > 0.0) {
        return Err(Error::InvalidArgument("cannot normalize a constant volume".into()));
    }
    let inv = 1.0 / libm::sqrt(var);
    Ok(volume.map(|v| T::of((v.to_f64_lossless() - mean) * inv)))
}
