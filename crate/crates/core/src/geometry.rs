//! Canonical coordinate space, crop-consistent transforms, position
//! indicators and receptive-field arithmetic for the encoder family.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{encode_responses, ModelState};
use crate::ops::{self, NormMode};
use crate::tensor::{Real, Tensor};

/// Names of the three coordinate channels, one per spatial axis.
pub const AXIS_NAMES: [&str; 3] = ["coronal", "sagittal", "axial"];

/// Normalized coordinate of 0-based plane `i` on an axis with `n` planes:
/// the first plane maps to -1 and the last to +1.
pub fn normalized_coordinate(i: usize, n: usize) -> f64 {
    2.0 * i as f64 / (n - 1) as f64 - 1.0
}

/// A single-channel (or multi-channel) volume with its offset into the
/// canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub tensor: Tensor<T>,
    pub origin: [usize; 3],
}

impl<T: Real> Volume<T> {
    pub fn new(tensor: Tensor<T>) -> Self {
        Self {
            tensor,
            origin: [0; 3],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.tensor.spatial().expect("volumes are 4-D")
    }
}

/// Three-channel map of canonical space; channel `a` varies only along
/// spatial axis `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateTensor<T> {
    tensor: Tensor<T>,
    /// Extents of the canonical space the values were normalized against.
    canonical: [usize; 3],
}

impl<T: Real> CoordinateTensor<T> {
    pub fn build(dims: [usize; 3]) -> Result<Self> {
        if let Some(&n) = dims.iter().find(|&&n| n < 2) {
            return Err(Error::InvalidArgument(format!(
                "coordinate extents must be at least 2, got {n}"
            )));
        }
        let [d, h, w] = dims;
        let mut data = Vec::with_capacity(3 * d * h * w);
        for axis in 0..3 {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let i = [z, y, x][axis];
                        data.push(T::of(normalized_coordinate(i, dims[axis])));
                    }
                }
            }
        }
        Ok(Self {
            tensor: Tensor::new(vec![3, d, h, w], data)?,
            canonical: dims,
        })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn dims(&self) -> [usize; 3] {
        self.tensor.spatial().expect("coordinate tensors are 4-D")
    }

    pub fn canonical_dims(&self) -> [usize; 3] {
        self.canonical
    }
}

/// Copies the `size` window starting at `offset` out of a `[C, D, H, W]` tensor.
pub fn crop_tensor<T: Real>(t: &Tensor<T>, offset: [usize; 3], size: [usize; 3]) -> Result<Tensor<T>> {
    let c = t.channels()?;
    let dims = t.spatial()?;
    for a in 0..3 {
        if size[a] == 0 || offset[a] + size[a] > dims[a] {
            return Err(Error::OutOfBounds(format!(
                "window offset {:?} size {:?} exceeds extents {:?}",
                offset, size, dims
            )));
        }
    }
    let mut out = Vec::with_capacity(c * size.iter().product::<usize>());
    for ch in 0..c {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = t.index4(ch, offset[0] + z, offset[1] + y, offset[2]);
                out.extend_from_slice(&t.data()[start..start + size[2]]);
            }
        }
    }
    Tensor::new(vec![c, size[0], size[1], size[2]], out)
}

/// Crops a volume and the coordinate tensor with the same window. Coordinate
/// values are kept, so each cropped voxel still names its canonical position.
pub fn crop_transform<T: Real>(
    volume: &Volume<T>,
    coord: &CoordinateTensor<T>,
    offset: [usize; 3],
    size: [usize; 3],
) -> Result<(Volume<T>, CoordinateTensor<T>)> {
    if volume.dims() != coord.dims() {
        return Err(Error::Shape(format!(
            "volume extents {:?} differ from coordinate extents {:?}",
            volume.dims(),
            coord.dims()
        )));
    }
    let v = crop_tensor(&volume.tensor, offset, size)?;
    let c = crop_tensor(&coord.tensor, offset, size)?;
    let mut origin = volume.origin;
    for a in 0..3 {
        origin[a] += offset[a];
    }
    Ok((
        Volume { tensor: v, origin },
        CoordinateTensor {
            tensor: c,
            canonical: coord.canonical,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Conv,
    Pool,
    Residual,
}

/// One spatial stage of the encoder. `k` is the kernel of the stage's first
/// (and only receptive-field-growing) operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub kind: StageKind,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Stage {
    fn new(kind: StageKind, k: usize, stride: usize) -> Self {
        Self {
            kind,
            k,
            stride,
            pad: k / 2,
        }
    }
}

/// Supported patch sizes, smallest first.
pub const PATCH_SIZES: [usize; 5] = [9, 17, 25, 41, 57];

/// Stride of each residual block.
pub const RESIDUAL_STRIDES: [usize; 4] = [1, 2, 1, 2];

/// Residual-block kernel arguments that realise a patch size.
pub fn kernel_args_for(patch_size: usize) -> Result<[usize; 4]> {
    Ok(match patch_size {
        9 => [1, 1, 1, 1],
        17 => [3, 1, 1, 1],
        25 => [3, 3, 1, 1],
        41 => [3, 3, 3, 1],
        57 => [3, 3, 3, 3],
        s => {
            return Err(Error::InvalidArgument(format!(
                "patch size {s} is not one of {:?}",
                PATCH_SIZES
            )))
        }
    })
}

/// Stage chain and receptive-field geometry of one encoder variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub kernel_args: [usize; 4],
    pub stages: Vec<Stage>,
    pub rf: usize,
    pub total_stride: usize,
}

/// Evaluates `rf_out = rf_in + (k - 1) * J_in`, `J_out = J_in * s` over
/// conv(5, s2) -> maxpool(3, s2) -> four residual blocks.
pub fn rf_spec(kernel_args: &[usize]) -> Result<EncoderSpec> {
    if kernel_args.len() != 4 || kernel_args.iter().any(|&k| k != 1 && k != 3) {
        return Err(Error::InvalidArgument(format!(
            "residual kernel arguments must be four values from {{1, 3}}, got {:?}",
            kernel_args
        )));
    }
    let mut stages = vec![
        Stage::new(StageKind::Conv, 5, 2),
        Stage::new(StageKind::Pool, 3, 2),
    ];
    for (&k, &s) in kernel_args.iter().zip(&RESIDUAL_STRIDES) {
        stages.push(Stage::new(StageKind::Residual, k, s));
    }
    let (mut rf, mut jump) = (1, 1);
    for st in &stages {
        rf += (st.k - 1) * jump;
        jump *= st.stride;
    }
    let mut args = [0; 4];
    args.copy_from_slice(kernel_args);
    Ok(EncoderSpec {
        kernel_args: args,
        stages,
        rf,
        total_stride: jump,
    })
}

impl EncoderSpec {
    pub fn for_patch_size(patch_size: usize) -> Result<Self> {
        rf_spec(&kernel_args_for(patch_size)?)
    }

    /// Patch grid produced for an input of the given extents.
    pub fn grid_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut dims = input;
        for st in &self.stages {
            for n in &mut dims {
                *n = ops::out_extent(*n, st.k, st.stride, st.pad)
                    .filter(|&v| v > 0)
                    .ok_or_else(|| {
                        Error::EmptyOutput(format!("input {:?} too small for the encoder", input))
                    })?;
            }
        }
        Ok(dims)
    }

    /// Input voxel at the centre of patch `index`.
    pub fn patch_center(&self, index: [usize; 3]) -> [usize; 3] {
        index.map(|o| o * self.total_stride)
    }

    /// Inclusive per-axis bounds of the nominal receptive-field cube of a
    /// patch, unclipped (may extend past the input).
    pub fn nominal_cube(&self, index: [usize; 3]) -> [[isize; 2]; 3] {
        let half = (self.rf / 2) as isize;
        self.patch_center(index).map(|c| [c as isize - half, c as isize + half])
    }
}

/// Per-patch canonical centre coordinates, `[3, d, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionIndicator<T> {
    pub tensor: Tensor<T>,
}

/// Replays the encoder's spatial stages as depthwise convolutions whose
/// kernels are zero except for a 1 at the centre.
pub fn extract_position_indicator<T: Real>(
    coord: &CoordinateTensor<T>,
    spec: &EncoderSpec,
) -> Result<PositionIndicator<T>> {
    let mut current = coord.tensor.clone();
    for st in &spec.stages {
        let k = st.k;
        let mut kernel = Tensor::zeros(&[1, 1, k, k, k]);
        let centre = ((k / 2) * k + k / 2) * k + k / 2;
        kernel.data_mut()[centre] = T::one();
        let [d, h, w] = current.spatial()?;
        let plane = d * h * w;
        let mut out_data = Vec::new();
        let mut out_dims = [0; 3];
        for ch in 0..current.channels()? {
            let single = Tensor::new(
                vec![1, d, h, w],
                current.data()[ch * plane..(ch + 1) * plane].to_vec(),
            )?;
            let (o, _) = ops::conv3d_forward(&single, &kernel, None, st.stride, st.pad)?;
            out_dims = o.spatial()?;
            out_data.extend_from_slice(o.data());
        }
        current = Tensor::new(vec![3, out_dims[0], out_dims[1], out_dims[2]], out_data)?;
    }
    Ok(PositionIndicator { tensor: current })
}

/// Closed form of [`extract_position_indicator`]: samples the coordinate
/// tensor at input voxel `J * o` for every patch `o`.
pub fn closed_form_indicator<T: Real>(coord: &CoordinateTensor<T>, spec: &EncoderSpec) -> Result<PositionIndicator<T>> {
    let grid = spec.grid_shape(coord.dims())?;
    let j = spec.total_stride;
    let mut data = Vec::with_capacity(3 * grid.iter().product::<usize>());
    for ch in 0..3 {
        for z in 0..grid[0] {
            for y in 0..grid[1] {
                for x in 0..grid[2] {
                    data.push(coord.tensor.at4(ch, z * j, y * j, x * j));
                }
            }
        }
    }
    Ok(PositionIndicator {
        tensor: Tensor::new(vec![3, grid[0], grid[1], grid[2]], data)?,
    })
}

/// Outcome of perturbing one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHit {
    pub voxel: [usize; 3],
    /// Largest absolute change of the probed patch response over `+delta` and `-delta`.
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub patch: [usize; 3],
    pub cube: [[isize; 2]; 3],
    pub inside: Vec<ProbeHit>,
    pub outside: Vec<ProbeHit>,
    /// Voxels whose perturbation moved the response by more than the threshold.
    pub influence: Vec<[usize; 3]>,
}

/// Response changes at or below this are treated as no influence.
pub const PROBE_THRESHOLD: f64 = 1e-6;

impl ProbeReport {
    /// Every influencing voxel lies inside the nominal cube.
    pub fn contained(&self) -> bool {
        self.influence.iter().all(|v| in_cube(&self.cube, *v))
    }

    pub fn outside_changes(&self) -> usize {
        self.outside.iter().filter(|h| h.change > PROBE_THRESHOLD).count()
    }
}

fn in_cube(cube: &[[isize; 2]; 3], v: [usize; 3]) -> bool {
    (0..3).all(|a| cube[a][0] <= v[a] as isize && v[a] as isize <= cube[a][1])
}

/// Empirical receptive field of one patch response. Runs the encoder with
/// fixed-affine normalization, perturbs `trials` random voxels inside the
/// nominal cube and `trials` outside it by `+-delta`, and records which
/// perturbations move the response.
pub fn locality_probe<T: Real, R: Rng>(
    state: &ModelState<T>,
    input: &Tensor<T>,
    patch: [usize; 3],
    trials: usize,
    delta: T,
    rng: &mut R,
) -> Result<ProbeReport> {
    let dims = input.spatial()?;
    let spec = state.encoder_spec();
    let grid = spec.grid_shape(dims)?;
    if (0..3).any(|a| patch[a] >= grid[a]) {
        return Err(Error::OutOfBounds(format!("patch {:?} outside grid {:?}", patch, grid)));
    }
    let cube = spec.nominal_cube(patch);
    if (0..3).any(|a| cube[a][0] < 0 || cube[a][1] >= dims[a] as isize) {
        return Err(Error::InvalidArgument(format!(
            "patch {:?} is not interior: its cube {:?} is clipped by extents {:?}",
            patch, cube, dims
        )));
    }
    let idx = (patch[0] * grid[1] + patch[1]) * grid[2] + patch[2];
    let response = |x: &Tensor<T>| -> Result<f64> {
        let r = encode_responses(state, x, NormMode::FixedAffine)?;
        Ok(r.data()[idx].to_f64_lossless())
    };
    let base = response(input)?;
    let mut probe = input.clone();
    let mut measure = |v: [usize; 3]| -> Result<ProbeHit> {
        let i = probe.index4(0, v[0], v[1], v[2]);
        let orig = probe.data()[i];
        let mut change: f64 = 0.0;
        for sign in [T::one(), -T::one()] {
            probe.data_mut()[i] = orig + sign * delta;
            change = change.max((response(&probe)? - base).abs());
        }
        probe.data_mut()[i] = orig;
        Ok(ProbeHit { voxel: v, change })
    };

    let mut inside = Vec::with_capacity(trials);
    for _ in 0..trials {
        let v = [0, 1, 2].map(|a| rng.random_range(cube[a][0] as i64..=cube[a][1] as i64) as usize);
        inside.push(measure(v)?);
    }
    let mut outside = Vec::with_capacity(trials);
    while outside.len() < trials {
        // Alternate between voxels just past a face of the cube and voxels
        // anywhere outside it.
        let v = if outside.len() % 2 == 0 {
            let axis = rng.random_range(0..3);
            let mut v = [0, 1, 2].map(|a| rng.random_range(cube[a][0] as i64..=cube[a][1] as i64) as isize);
            v[axis] = if rng.random_bool(0.5) {
                cube[axis][0] - 1
            } else {
                cube[axis][1] + 1
            };
            v
        } else {
            [0, 1, 2].map(|a| rng.random_range(0..dims[a]) as isize)
        };
        if (0..3).any(|a| v[a] < 0 || v[a] >= dims[a] as isize) {
            continue;
        }
        let v = v.map(|x| x as usize);
        if in_cube(&cube, v) {
            continue;
        }
        outside.push(measure(v)?);
    }
    let influence = inside
        .iter()
        .chain(&outside)
        .filter(|h| h.change > PROBE_THRESHOLD)
        .map(|h| h.voxel)
        .collect();
    Ok(ProbeReport {
        patch,
        cube,
        inside,
        outside,
        influence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_endpoints() {
        assert_eq!(normalized_coordinate(0, 193), -1.0);
        assert_eq!(normalized_coordinate(192, 193), 1.0);
        assert_eq!(normalized_coordinate(96, 193), 0.0);
        let c = CoordinateTensor::<f64>::build([3, 2, 2]).unwrap();
        let t = c.tensor();
        assert_eq!([t.at4(0, 0, 0, 0), t.at4(0, 1, 0, 0), t.at4(0, 2, 1, 1)], [-1.0, 0.0, 1.0]);
    }

    #[test]
    fn coordinate_rejects_small_extent() {
        assert!(CoordinateTensor::<f32>::build([1, 4, 4]).is_err());
    }

    #[test]
    fn coordinate_channels_are_affine_and_rank_one() {
        let c = CoordinateTensor::<f64>::build([5, 6, 7]).unwrap();
        let t = c.tensor();
        for z in 0..5 {
            for y in 0..6 {
                for x in 0..7 {
                    assert_eq!(t.at4(0, z, y, x), t.at4(0, z, 0, 0));
                    assert_eq!(t.at4(1, z, y, x), t.at4(1, 0, y, 0));
                    assert_eq!(t.at4(2, z, y, x), t.at4(2, 0, 0, x));
                }
            }
        }
        // Exact second differences in the plane index.
        for z in 1..4 {
            let (a, b, c2) = (t.at4(0, z - 1, 0, 0), t.at4(0, z, 0, 0), t.at4(0, z + 1, 0, 0));
            assert!(((c2 - b) - (b - a)).abs() < 1e-15);
        }
    }

    #[test]
    fn crop_keeps_canonical_values() {
        let coord = CoordinateTensor::<f64>::build([193, 20, 20]).unwrap();
        let vol = Volume::new(Tensor::<f64>::zeros(&[1, 193, 20, 20]));
        let (v, c) = crop_transform(&vol, &coord, [16, 0, 0], [177, 20, 20]).unwrap();
        assert_eq!(c.tensor().at4(0, 0, 0, 0), 2.0 * 16.0 / 192.0 - 1.0);
        assert_eq!(v.origin, [16, 0, 0]);
        let (v2, c2) = crop_transform(&vol, &coord, [0, 0, 0], [193, 20, 20]).unwrap();
        assert_eq!(v2.tensor, vol.tensor);
        assert_eq!(c2, coord);
    }

    #[test]
    fn crop_out_of_bounds() {
        let coord = CoordinateTensor::<f32>::build([8, 8, 8]).unwrap();
        let vol = Volume::new(Tensor::<f32>::zeros(&[1, 8, 8, 8]));
        assert!(matches!(
            crop_transform(&vol, &coord, [1, 0, 0], [8, 8, 8]),
            Err(Error::OutOfBounds(_))
        ));
    }

    #[test]
    fn rf_series() {
        let cases = [
            ([1, 1, 1, 1], 9),
            ([3, 1, 1, 1], 17),
            ([3, 3, 1, 1], 25),
            ([3, 3, 3, 1], 41),
            ([3, 3, 3, 3], 57),
        ];
        for (args, rf) in cases {
            let spec = rf_spec(&args).unwrap();
            assert_eq!(spec.rf, rf);
            assert_eq!(spec.total_stride, 16);
            assert_eq!(spec.grid_shape([64, 64, 64]).unwrap(), [4, 4, 4]);
            assert_eq!(spec.grid_shape([177, 213, 177]).unwrap(), [12, 14, 12]);
        }
        assert!(rf_spec(&[1, 2, 1, 1]).is_err());
        assert!(rf_spec(&[1, 1, 1]).is_err());
    }

    #[test]
    fn indicator_hierarchical_matches_closed_form() {
        let coord = CoordinateTensor::<f64>::build([72, 72, 72]).unwrap();
        let vol = Volume::new(Tensor::<f64>::zeros(&[1, 72, 72, 72]));
        let spec = EncoderSpec::for_patch_size(41).unwrap();
        let (_, c) = crop_transform(&vol, &coord, [3, 8, 0], [64, 64, 64]).unwrap();
        let h = extract_position_indicator(&c, &spec).unwrap();
        let f = closed_form_indicator(&c, &spec).unwrap();
        assert_eq!(h, f);
        assert_eq!(h.tensor.at4(0, 0, 0, 0), c.tensor().at4(0, 0, 0, 0));
        assert_eq!(h.tensor.at4(0, 1, 0, 0), c.tensor().at4(0, 16, 0, 0));
    }
}
