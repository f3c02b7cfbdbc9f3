//! Sliding-window patch planning, probability accumulation, voting, and the
//! end-to-end segmentation of a conformed volume.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::labels::{LabelError, LabelTable};
use crate::tensor::FeatureMap;
use crate::volume::{crop_to_content, restore_to_full, ConformedVolume, CropFrame, VolumeError};

/// Default patch side in voxels.
pub const PATCH_SIZE: usize = 96;
/// Default step between neighbouring patch corners.
pub const PATCH_STRIDE: usize = 16;

/// Tolerance on per-voxel probability sums accepted by [`ProbAccumulator::accumulate`].
pub const SIMPLEX_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("crop dims {dims:?} incompatible with patch size {size} and stride {stride}")]
    IncompatibleDims { dims: [usize; 3], size: usize, stride: usize },
    #[error("invalid patch grid: size {size}, stride {stride}")]
    InvalidGrid { size: usize, stride: usize },
    #[error("offset {0:?} is not in the patch plan")]
    OffsetOutOfPlan([usize; 3]),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("probabilities at voxel {voxel} sum to {sum}")]
    NonNormalizedProbabilities { voxel: usize, sum: f32 },
    #[error("voxel {0:?} is not covered by any patch")]
    UncoveredVoxel([usize; 3]),
    #[error("model failed: {0}")]
    Model(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Label(#[from] LabelError),
}

pub type Result<T> = std::result::Result<T, PatchError>;

/// Patch side and stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub size: usize,
    pub stride: usize,
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self { size: PATCH_SIZE, stride: PATCH_STRIDE }
    }
}

impl PatchGrid {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 || stride > size {
            return Err(PatchError::InvalidGrid { size, stride });
        }
        Ok(Self { size, stride })
    }

    pub fn with_stride(stride: usize) -> Result<Self> {
        Self::new(PATCH_SIZE, stride)
    }

    pub fn accepts(&self, d: usize) -> bool {
        d >= self.size && (d - self.size).is_multiple_of(self.stride)
    }

    pub fn patch_dims(&self) -> [usize; 3] {
        [self.size; 3]
    }
}

/// Lexicographically ordered patch corners tiling a crop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub grid: PatchGrid,
    pub crop_dims: [usize; 3],
    pub offsets: Vec<[usize; 3]>,
}

pub fn plan_patches(crop_dims: [usize; 3], grid: PatchGrid) -> Result<PatchPlan> {
    if grid.size == 0 || grid.stride == 0 {
        return Err(PatchError::InvalidGrid { size: grid.size, stride: grid.stride });
    }
    if !crop_dims.iter().all(|&d| grid.accepts(d)) {
        return Err(PatchError::IncompatibleDims { dims: crop_dims, size: grid.size, stride: grid.stride });
    }
    let axis = |d: usize| (0..=(d - grid.size)).step_by(grid.stride).collect::<Vec<_>>();
    let (xs, ys, zs) = (axis(crop_dims[0]), axis(crop_dims[1]), axis(crop_dims[2]));
    let mut offsets = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                offsets.push([x, y, z]);
            }
        }
    }
    Ok(PatchPlan { grid, crop_dims, offsets })
}

impl PatchPlan {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn contains(&self, offset: [usize; 3]) -> bool {
        (0..3).all(|a| offset[a].is_multiple_of(self.grid.stride) && offset[a] + self.grid.size <= self.crop_dims[a])
    }

    /// Number of planned patches covering each crop voxel.
    pub fn coverage(&self) -> Grid<u16> {
        let mut counts = Grid::<u16>::zeros(self.crop_dims);
        let s = self.grid.size;
        for o in &self.offsets {
            for i in 0..s {
                for j in 0..s {
                    let start = counts.index([o[0] + i, o[1] + j, o[2]]);
                    for c in &mut counts.as_mut_slice()[start..start + s] {
                        *c += 1;
                    }
                }
            }
        }
        counts
    }
}

/// Copies the patch window at `offset`.
pub fn extract_patch(vol: &Grid<f32>, plan: &PatchPlan, offset: [usize; 3]) -> Result<Grid<f32>> {
    if vol.dims() != plan.crop_dims {
        return Err(PatchError::ShapeMismatch {
            expected: format!("{:?}", plan.crop_dims),
            got: format!("{:?}", vol.dims()),
        });
    }
    if !plan.contains(offset) {
        return Err(PatchError::OffsetOutOfPlan(offset));
    }
    Ok(vol.window(offset, plan.grid.patch_dims()))
}

/// Per-class probability sums and per-voxel coverage counts over a crop.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbAccumulator {
    plan: PatchPlan,
    sums: FeatureMap,
    counts: Grid<u16>,
}

impl ProbAccumulator {
    pub fn new(plan: PatchPlan, classes: usize) -> Self {
        let dims = plan.crop_dims;
        Self { plan, sums: FeatureMap::zeros(classes, dims), counts: Grid::zeros(dims) }
    }

    pub fn plan(&self) -> &PatchPlan {
        &self.plan
    }

    pub fn sums(&self) -> &FeatureMap {
        &self.sums
    }

    pub fn counts(&self) -> &Grid<u16> {
        &self.counts
    }

    /// Adds one patch's probabilities onto its window.
    pub fn accumulate(&mut self, offset: [usize; 3], probs: &FeatureMap) -> Result<()> {
        let size = self.plan.grid.size;
        if probs.channels() != self.sums.channels() || probs.dims() != [size; 3] {
            return Err(PatchError::ShapeMismatch {
                expected: format!("{}x{:?}", self.sums.channels(), [size; 3]),
                got: format!("{}x{:?}", probs.channels(), probs.dims()),
            });
        }
        if !self.plan.contains(offset) {
            return Err(PatchError::OffsetOutOfPlan(offset));
        }
        check_simplex(probs)?;

        let crop = self.plan.crop_dims;
        let voxels = crop.iter().product::<usize>();
        let sums = self.sums.as_mut_slice();
        for c in 0..probs.channels() {
            let src = probs.channel(c);
            let dst = &mut sums[c * voxels..(c + 1) * voxels];
            for i in 0..size {
                for j in 0..size {
                    let d = ((offset[0] + i) * crop[1] + offset[1] + j) * crop[2] + offset[2];
                    let s = (i * size + j) * size;
                    for (a, b) in dst[d..d + size].iter_mut().zip(&src[s..s + size]) {
                        *a += *b;
                    }
                }
            }
        }
        for i in 0..size {
            for j in 0..size {
                let d = self.counts.index([offset[0] + i, offset[1] + j, offset[2]]);
                for n in &mut self.counts.as_mut_slice()[d..d + size] {
                    *n += 1;
                }
            }
        }
        Ok(())
    }

    /// Adds another accumulator over the same plan (partial sums from another worker).
    pub fn merge(&mut self, other: &ProbAccumulator) -> Result<()> {
        if other.plan != self.plan || other.sums.channels() != self.sums.channels() {
            return Err(PatchError::ShapeMismatch {
                expected: format!("{:?}", self.plan.crop_dims),
                got: format!("{:?}", other.plan.crop_dims),
            });
        }
        self.sums.add_assign(&other.sums);
        for (a, b) in self.counts.as_mut_slice().iter_mut().zip(other.counts.as_slice()) {
            *a += b;
        }
        Ok(())
    }

    /// Per-voxel argmax of the summed class masses; ties go to the lowest class index.
    pub fn vote(&self) -> Result<Grid<u8>> {
        if let Some(idx) = self.counts.as_slice().iter().position(|&n| n == 0) {
            return Err(PatchError::UncoveredVoxel(self.counts.coords(idx)));
        }
        let classes = self.sums.channels();
        let voxels = self.counts.len();
        let sums = self.sums.as_slice();
        let mut best = vec![0u8; voxels];
        let mut best_mass = sums[..voxels].to_vec();
        for c in 1..classes {
            let channel = &sums[c * voxels..(c + 1) * voxels];
            for ((b, m), &x) in best.iter_mut().zip(best_mass.iter_mut()).zip(channel) {
                if x > *m {
                    *m = x;
                    *b = c as u8;
                }
            }
        }
        Ok(Grid::from_vec(self.plan.crop_dims, best).expect("crop-sized"))
    }
}

fn check_simplex(probs: &FeatureMap) -> Result<()> {
    let n = probs.spatial_len();
    let mut totals = vec![0.0f32; n];
    for c in 0..probs.channels() {
        for (t, &p) in totals.iter_mut().zip(probs.channel(c)) {
            *t += p;
        }
    }
    match totals.iter().position(|t| !((t - 1.0).abs() <= SIMPLEX_TOLERANCE)) {
        Some(voxel) => Err(PatchError::NonNormalizedProbabilities { voxel, sum: totals[voxel] }),
        None => Ok(()),
    }
}

/// Anything that turns an intensity patch into per-voxel class probabilities.
pub trait PatchModel {
    fn num_classes(&self) -> usize;

    /// Predicts `num_classes × patch` probabilities. `origin` is the patch corner in
    /// full-volume voxel coordinates.
    fn predict(&self, patch: &Grid<f32>, origin: [usize; 3]) -> Result<FeatureMap>;
}

/// Output of [`segment_grid`].
#[derive(Clone, Debug)]
pub struct Segmentation {
    /// FreeSurfer IDs over the full input grid.
    pub labels: Grid<u16>,
    pub frame: CropFrame,
    pub patch_count: usize,
    pub elapsed: Duration,
}

/// crop → plan → predict each patch → accumulate → vote → FreeSurfer IDs → restore.
pub fn segment_grid<M: PatchModel + ?Sized>(
    intensity: &Grid<f32>,
    model: &M,
    table: &LabelTable,
    grid: PatchGrid,
) -> Result<Segmentation> {
    let start = Instant::now();
    if model.num_classes() != table.len() {
        return Err(PatchError::ShapeMismatch {
            expected: format!("{} classes", table.len()),
            got: format!("{} classes", model.num_classes()),
        });
    }
    let (crop, frame) = crop_to_content(intensity, grid)?;
    let plan = plan_patches(frame.dims, grid)?;
    let patch_count = plan.len();
    let mut acc = ProbAccumulator::new(plan.clone(), model.num_classes());
    for (n, &offset) in plan.offsets.iter().enumerate() {
        let patch = extract_patch(&crop, &plan, offset)?;
        let origin = [0, 1, 2].map(|a| frame.offset[a] + offset[a]);
        let probs = model.predict(&patch, origin)?;
        acc.accumulate(offset, &probs)?;
        log::debug!("patch {}/{} at {:?}", n + 1, patch_count, origin);
    }
    let classes = acc.vote()?;
    drop(acc);
    let ids = table.map_to_freesurfer(&classes)?;
    let labels = restore_to_full(&ids, &frame)?;
    Ok(Segmentation { labels, frame, patch_count, elapsed: start.elapsed() })
}

/// Segments a conformed 256³ volume with the default 96³ / 16 patch grid unless overridden.
pub fn segment_volume<M: PatchModel + ?Sized>(
    v: &ConformedVolume,
    model: &M,
    table: &LabelTable,
    grid: PatchGrid,
) -> Result<Segmentation> {
    segment_grid(v.grid(), model, table, grid)
}
