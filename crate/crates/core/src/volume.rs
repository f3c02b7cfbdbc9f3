//! Volumes with world geometry, conforming to the canonical RAS grid, intensity
//! rescaling, and crop/restore between the conformed frame and the patch frame.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::patch::PatchGrid;

/// Side length of the conformed grid.
pub const CONFORMED_SIDE: usize = 256;
pub const CONFORMED_DIMS: [usize; 3] = [CONFORMED_SIDE; 3];

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("invalid orientation code {0:?}")]
    InvalidOrientationCode(String),
    #[error("voxel spacing must be positive, got {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("nonzero voxels have constant intensity")]
    ConstantIntensity,
    #[error("volume has no nonzero voxels")]
    EmptyVolume,
    #[error("dims {dims:?} incompatible with patch size {patch} and stride {stride}")]
    IncompatibleDims { dims: [usize; 3], patch: usize, stride: usize },
    #[error("crop frame {offset:?}+{dims:?} exceeds volume dims {full:?}")]
    FrameOutOfBounds { offset: [usize; 3], dims: [usize; 3], full: [usize; 3] },
    #[error("label grid dims {got:?} do not match crop frame dims {expected:?}")]
    FrameShapeMismatch { expected: [usize; 3], got: [usize; 3] },
    #[error("volume is not conformed: {0}")]
    NotConformed(String),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// One voxel axis expressed as a signed world axis (0 = x/R, 1 = y/A, 2 = z/S).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisDirection {
    pub world_axis: usize,
    pub positive: bool,
}

impl AxisDirection {
    fn letter(self) -> char {
        match (self.world_axis, self.positive) {
            (0, true) => 'R',
            (0, false) => 'L',
            (1, true) => 'A',
            (1, false) => 'P',
            (2, true) => 'S',
            _ => 'I',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        let (world_axis, positive) = match c.to_ascii_uppercase() {
            'R' => (0, true),
            'L' => (0, false),
            'A' => (1, true),
            'P' => (1, false),
            'S' => (2, true),
            'I' => (2, false),
            _ => return None,
        };
        Some(Self { world_axis, positive })
    }

    #[inline]
    pub fn sign(self) -> f64 {
        if self.positive {
            1.0
        } else {
            -1.0
        }
    }
}

/// Three-letter axis code such as `RAS` or `LIA`: the direction each voxel axis increases toward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Orientation([AxisDirection; 3]);

impl Orientation {
    pub const RAS: Orientation = Orientation([
        AxisDirection { world_axis: 0, positive: true },
        AxisDirection { world_axis: 1, positive: true },
        AxisDirection { world_axis: 2, positive: true },
    ]);

    pub fn new(axes: [AxisDirection; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for a in axes {
            if a.world_axis > 2 || seen[a.world_axis] {
                let code: String = axes.iter().map(|a| a.letter()).collect();
                return Err(VolumeError::InvalidOrientationCode(code));
            }
            seen[a.world_axis] = true;
        }
        Ok(Self(axes))
    }

    pub fn axes(&self) -> [AxisDirection; 3] {
        self.0
    }

    pub fn axis(&self, voxel_axis: usize) -> AxisDirection {
        self.0[voxel_axis]
    }
}

impl FromStr for Orientation {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self> {
        let letters: Vec<char> = s.chars().collect();
        if letters.len() != 3 {
            return Err(VolumeError::InvalidOrientationCode(s.to_string()));
        }
        let mut axes = [AxisDirection { world_axis: 0, positive: true }; 3];
        for (slot, c) in axes.iter_mut().zip(letters) {
            *slot = AxisDirection::from_letter(c)
                .ok_or_else(|| VolumeError::InvalidOrientationCode(s.to_string()))?;
        }
        Orientation::new(axes).map_err(|_| VolumeError::InvalidOrientationCode(s.to_string()))
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in self.0 {
            write!(f, "{}", a.letter())?;
        }
        Ok(())
    }
}

impl Serialize for Orientation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Orientation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned voxel-to-world mapping: `world = origin + Σ_a dir_a · spacing_a · index_a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Voxel size in mm along each voxel axis.
    pub spacing: [f64; 3],
    pub orientation: Orientation,
    /// World position (mm) of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(spacing: [f64; 3], orientation: Orientation, origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::NonPositiveSpacing(spacing));
        }
        Ok(Self { spacing, orientation, origin })
    }

    /// 1 mm RAS geometry with the given origin.
    pub fn ras_1mm(origin: [f64; 3]) -> Self {
        Self { spacing: [1.0; 3], orientation: Orientation::RAS, origin }
    }

    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.spacing, self.orientation, self.origin).map(|_| ())
    }

    pub fn voxel_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        let mut w = self.origin;
        for (a, &i) in idx.iter().enumerate() {
            let dir = self.orientation.axis(a);
            w[dir.world_axis] += dir.sign() * self.spacing[a] * i;
        }
        w
    }

    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        let mut idx = [0.0; 3];
        for (a, slot) in idx.iter_mut().enumerate() {
            let dir = self.orientation.axis(a);
            *slot = (w[dir.world_axis] - self.origin[dir.world_axis]) * dir.sign() / self.spacing[a];
        }
        idx
    }

    /// Row-major 4x4 voxel-to-world affine.
    pub fn affine(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for a in 0..3 {
            let dir = self.orientation.axis(a);
            m[dir.world_axis][a] = dir.sign() * self.spacing[a];
        }
        for (r, row) in m.iter_mut().take(3).enumerate() {
            row[3] = self.origin[r];
        }
        m[3][3] = 1.0;
        m
    }

    /// Builds an axis-aligned geometry from a voxel-to-world affine, snapping each voxel
    /// axis to its dominant world direction. Returns the geometry and the largest
    /// off-axis component (0 for a non-oblique affine).
    pub fn from_affine(m: &[[f64; 4]; 4]) -> Result<(Self, f64)> {
        let mut axes = [AxisDirection { world_axis: 0, positive: true }; 3];
        let mut spacing = [0.0; 3];
        let mut obliquity: f64 = 0.0;
        for a in 0..3 {
            let col = [m[0][a], m[1][a], m[2][a]];
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (dominant, _) = col
                .iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best });
            axes[a] = AxisDirection { world_axis: dominant, positive: col[dominant] >= 0.0 };
            spacing[a] = norm;
            if norm > 0.0 {
                obliquity = obliquity.max(1.0 - col[dominant].abs() / norm);
            }
        }
        let orientation = Orientation::new(axes)?;
        let geometry = Geometry::new(spacing, orientation, [m[0][3], m[1][3], m[2][3]])?;
        Ok((geometry, obliquity))
    }
}

/// A scalar grid with world geometry. Intensities use `f32`, label grids `u16`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub data: Grid<T>,
    pub geometry: Geometry,
}

pub type IntensityVolume = Volume<f32>;
pub type LabelVolume = Volume<u16>;

impl<T> Volume<T> {
    pub fn new(data: Grid<T>, geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        if data.dims().contains(&0) {
            return Err(VolumeError::EmptyVolume);
        }
        Ok(Self { data, geometry })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.dims()
    }

    /// True when the geometry already matches the 256³ 1 mm RAS target grid.
    pub fn has_conformed_geometry(&self) -> bool {
        self.dims() == CONFORMED_DIMS
            && self.geometry.orientation == Orientation::RAS
            && self.geometry.spacing.iter().all(|s| (s - 1.0).abs() < 1e-6)
    }
}

/// Record of the resampling applied by [`conform`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleReport {
    pub source_dims: [usize; 3],
    pub source_geometry: Geometry,
    pub target_geometry: Geometry,
    /// Intensity-weighted centroid of the source, in world mm.
    pub centroid_world: [f64; 3],
    /// Row-major 3x4 map from target voxel index to source continuous voxel index.
    pub target_to_source: [[f64; 4]; 3],
    /// True when the input was already on the conformed grid and was passed through.
    pub identity: bool,
}

impl ResampleReport {
    pub fn source_index(&self, t: [usize; 3]) -> [f64; 3] {
        let mut s = [0.0; 3];
        for (r, slot) in s.iter_mut().enumerate() {
            let row = &self.target_to_source[r];
            *slot = row[0] * t[0] as f64 + row[1] * t[1] as f64 + row[2] * t[2] as f64 + row[3];
        }
        s
    }
}

fn target_to_source_affine(source: &Geometry, target: &Geometry) -> [[f64; 4]; 3] {
    let base = source.world_to_voxel(target.voxel_to_world([0.0; 3]));
    let mut m = [[0.0; 4]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        row[3] = base[r];
    }
    for c in 0..3 {
        let mut unit = [0.0; 3];
        unit[c] = 1.0;
        let p = source.world_to_voxel(target.voxel_to_world(unit));
        for r in 0..3 {
            m[r][c] = p[r] - base[r];
        }
    }
    m
}

fn intensity_centroid(v: &IntensityVolume) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    let mut mass = 0.0f64;
    for (idx, &x) in v.data.as_slice().iter().enumerate() {
        if x > 0.0 {
            let c = v.data.coords(idx);
            let w = x as f64;
            for a in 0..3 {
                acc[a] += w * c[a] as f64;
            }
            mass += w;
        }
    }
    let center_idx = if mass > 0.0 {
        acc.map(|s| s / mass)
    } else {
        v.dims().map(|d| (d as f64 - 1.0) / 2.0)
    };
    v.geometry.voxel_to_world(center_idx)
}

/// Resamples an intensity volume onto the 256³ 1 mm RAS grid, centred on its intensity centroid.
///
/// Inputs already on the conformed grid are returned unchanged. The target origin is
/// snapped to a whole-millimetre offset from the source origin so that pure axis
/// permutations and flips of 1 mm data land exactly on source voxel centres.
pub fn conform(v: &IntensityVolume) -> Result<(IntensityVolume, ResampleReport)> {
    v.geometry.validate()?;
    let centroid = intensity_centroid(v);
    if v.has_conformed_geometry() {
        let report = ResampleReport {
            source_dims: v.dims(),
            source_geometry: v.geometry,
            target_geometry: v.geometry,
            centroid_world: centroid,
            target_to_source: target_to_source_affine(&v.geometry, &v.geometry),
            identity: true,
        };
        return Ok((v.clone(), report));
    }

    let half = (CONFORMED_SIDE / 2) as f64;
    let mut origin = [0.0; 3];
    for a in 0..3 {
        let src = v.geometry.origin[a];
        origin[a] = src + (centroid[a] - half - src).round();
    }
    let target = Geometry::ras_1mm(origin);
    let map = target_to_source_affine(&v.geometry, &target);
    let report = ResampleReport {
        source_dims: v.dims(),
        source_geometry: v.geometry,
        target_geometry: target,
        centroid_world: centroid,
        target_to_source: map,
        identity: false,
    };
    let data = Grid::from_fn(CONFORMED_DIMS, |t| trilinear(&v.data, report.source_index(t)));
    Ok((Volume { data, geometry: target }, report))
}

/// Resamples a label volume with nearest-neighbour lookup through a report produced by [`conform`].
pub fn conform_labels(v: &LabelVolume, report: &ResampleReport) -> Result<LabelVolume> {
    v.geometry.validate()?;
    if report.identity && v.has_conformed_geometry() {
        return Ok(v.clone());
    }
    let dims = v.dims();
    let data = Grid::from_fn(CONFORMED_DIMS, |t| {
        let s = report.source_index(t);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = s[a].round();
            if r < 0.0 || r >= dims[a] as f64 {
                return 0;
            }
            idx[a] = r as usize;
        }
        *v.data.get(idx)
    });
    Ok(Volume { data, geometry: report.target_geometry })
}

/// Trilinear sample with zero padding outside the grid.
pub(crate) fn trilinear(g: &Grid<f32>, p: [f64; 3]) -> f32 {
    let dims = g.dims();
    let base = p.map(|x| x.floor());
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let fetch = |di: i64, dj: i64, dk: i64| -> f64 {
        let i = base[0] as i64 + di;
        let j = base[1] as i64 + dj;
        let k = base[2] as i64 + dk;
        if i < 0 || j < 0 || k < 0 || i >= dims[0] as i64 || j >= dims[1] as i64 || k >= dims[2] as i64 {
            0.0
        } else {
            *g.get([i as usize, j as usize, k as usize]) as f64
        }
    };
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a * (1.0 - t) + b * t };
    let mut plane = [0.0; 2];
    for (di, slot) in plane.iter_mut().enumerate() {
        let di = di as i64;
        let r0 = lerp(fetch(di, 0, 0), fetch(di, 0, 1), frac[2]);
        let r1 = lerp(fetch(di, 1, 0), fetch(di, 1, 1), frac[2]);
        *slot = lerp(r0, r1, frac[1]);
    }
    lerp(plane[0], plane[1], frac[0]) as f32
}

/// Min-max rescale over nonzero voxels, clipped to `[0, 1]`; zero voxels stay zero.
pub fn rescale_intensity(g: &Grid<f32>) -> Result<Grid<f32>> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &x in g.as_slice() {
        if x != 0.0 {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    if !lo.is_finite() {
        return Err(VolumeError::EmptyVolume);
    }
    if hi <= lo {
        return Err(VolumeError::ConstantIntensity);
    }
    let (lo, range) = (lo as f64, (hi - lo) as f64);
    Ok(g.map(|&x| {
        if x == 0.0 {
            0.0
        } else {
            (((x as f64 - lo) / range).clamp(0.0, 1.0)) as f32
        }
    }))
}

/// A conformed intensity volume: 256³, 1 mm, RAS, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConformedVolume(IntensityVolume);

impl ConformedVolume {
    pub fn new(v: IntensityVolume) -> Result<Self> {
        if !v.has_conformed_geometry() {
            return Err(VolumeError::NotConformed(format!(
                "dims {:?}, spacing {:?}, orientation {}",
                v.dims(),
                v.geometry.spacing,
                v.geometry.orientation
            )));
        }
        if let Some(bad) = v.data.as_slice().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(VolumeError::NotConformed(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self(v))
    }

    pub fn volume(&self) -> &IntensityVolume {
        &self.0
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.0.data
    }

    pub fn into_inner(self) -> IntensityVolume {
        self.0
    }
}

/// Conforms and rescales `v`, unless it already satisfies the conformed-volume contract.
pub fn prepare(v: &IntensityVolume) -> Result<(ConformedVolume, Option<ResampleReport>)> {
    if v.has_conformed_geometry() {
        if let Ok(c) = ConformedVolume::new(v.clone()) {
            return Ok((c, None));
        }
    }
    let (conformed, report) = conform(v)?;
    let data = rescale_intensity(&conformed.data)?;
    let c = ConformedVolume::new(Volume { data, geometry: conformed.geometry })?;
    Ok((c, Some(report)))
}

/// Placement of a crop window inside the full (conformed) grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropFrame {
    pub offset: [usize; 3],
    pub dims: [usize; 3],
    pub full_dims: [usize; 3],
}

/// Smallest window length `>= extent` of the form `patch + k * stride`.
pub fn padded_extent(extent: usize, grid: PatchGrid) -> usize {
    if extent <= grid.size {
        grid.size
    } else {
        grid.size + (extent - grid.size).div_ceil(grid.stride) * grid.stride
    }
}

/// Crops to the nonzero bounding box, widened symmetrically (extra voxel on the high
/// side) to a patch-tileable size. The window is shifted inward if it would leave the grid.
pub fn crop_to_content(g: &Grid<f32>, grid: PatchGrid) -> Result<(Grid<f32>, CropFrame)> {
    let full = g.dims();
    let (lo, hi) = g.nonzero_bbox().ok_or(VolumeError::EmptyVolume)?;
    let mut offset = [0usize; 3];
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let extent = hi[a] - lo[a];
        let d = padded_extent(extent, grid);
        if d > full[a] {
            return Err(VolumeError::IncompatibleDims { dims: full, patch: grid.size, stride: grid.stride });
        }
        let before = (d - extent) / 2;
        offset[a] = lo[a].saturating_sub(before).min(full[a] - d);
        dims[a] = d;
    }
    let frame = CropFrame { offset, dims, full_dims: full };
    Ok((g.window(offset, dims), frame))
}

/// Places a cropped label grid back into a zero-filled grid of the frame's full dims.
pub fn restore_to_full<T: Copy + Default>(labels: &Grid<T>, frame: &CropFrame) -> Result<Grid<T>> {
    if (0..3).any(|a| frame.offset[a] + frame.dims[a] > frame.full_dims[a]) {
        return Err(VolumeError::FrameOutOfBounds {
            offset: frame.offset,
            dims: frame.dims,
            full: frame.full_dims,
        });
    }
    if labels.dims() != frame.dims {
        return Err(VolumeError::FrameShapeMismatch { expected: frame.dims, got: labels.dims() });
    }
    let mut out = Grid::zeros(frame.full_dims);
    out.paste(labels, frame.offset);
    Ok(out)
}
