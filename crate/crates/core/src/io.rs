//! NIfTI-1 reading and writing (`.nii` / `.nii.gz`).

use std::path::Path;

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use thiserror::Error;

use crate::grid::Grid;
use crate::volume::{Geometry, IntensityVolume, LabelVolume, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Nifti { path: String, source: nifti::NiftiError },
    #[error("{path}: expected a 3D volume, got dims {dims:?}")]
    NotThreeDimensional { path: String, dims: Vec<usize> },
    #[error("{path}: label value {value} is not a non-negative integer")]
    InvalidLabelValue { path: String, value: f64 },
    #[error("{path}: {source}")]
    Geometry { path: String, source: VolumeError },
}

fn nifti_err(path: &Path) -> impl FnOnce(nifti::NiftiError) -> IoError + '_ {
    move |source| IoError::Nifti { path: path.display().to_string(), source }
}

/// Voxel-to-world affine from a header: sform when set, else qform, else pixdim scaling.
pub fn header_affine(h: &NiftiHeader) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    m[3][3] = 1.0;
    if h.sform_code > 0 {
        for (r, row) in [h.srow_x, h.srow_y, h.srow_z].iter().enumerate() {
            for c in 0..4 {
                m[r][c] = row[c] as f64;
            }
        }
    } else if h.qform_code > 0 {
        let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ];
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64 * qfac];
        for row in 0..3 {
            for col in 0..3 {
                m[row][col] = r[row][col] * scale[col];
            }
        }
        m[0][3] = h.quatern_x as f64;
        m[1][3] = h.quatern_y as f64;
        m[2][3] = h.quatern_z as f64;
    } else {
        for a in 0..3 {
            m[a][a] = h.pixdim[a + 1] as f64;
        }
    }
    m
}

/// Header carrying `geometry` in both sform and qform.
pub fn header_for(geometry: &Geometry) -> NiftiHeader {
    let m = geometry.affine();
    let mut h = NiftiHeader::default();
    h.sform_code = 1;
    h.qform_code = 1;
    h.srow_x = [m[0][0] as f32, m[0][1] as f32, m[0][2] as f32, m[0][3] as f32];
    h.srow_y = [m[1][0] as f32, m[1][1] as f32, m[1][2] as f32, m[1][3] as f32];
    h.srow_z = [m[2][0] as f32, m[2][1] as f32, m[2][2] as f32, m[2][3] as f32];
    h.pixdim = [1.0, geometry.spacing[0] as f32, geometry.spacing[1] as f32, geometry.spacing[2] as f32, 1.0, 0.0, 0.0, 0.0];

    // Rotation part of an axis-aligned affine is a signed permutation.
    let mut r = [[0.0f64; 3]; 3];
    for row in 0..3 {
        for col in 0..3 {
            r[row][col] = m[row][col] / geometry.spacing[col];
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if det < 0.0 {
        h.pixdim[0] = -1.0;
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
    }
    let [b, c, d] = rotation_to_quaternion(&r);
    h.quatern_b = b as f32;
    h.quatern_c = c as f32;
    h.quatern_d = d as f32;
    h.quatern_x = m[0][3] as f32;
    h.quatern_y = m[1][3] as f32;
    h.quatern_z = m[2][3] as f32;
    h.xyzt_units = 2;
    h
}

fn rotation_to_quaternion(r: &[[f64; 3]; 3]) -> [f64; 3] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let (a, b, c, d) = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        (0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s)
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        ((r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s)
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        ((r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s)
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        ((r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s)
    };
    // NIfTI stores the quaternion with a >= 0
    if a < 0.0 {
        [-b, -c, -d]
    } else {
        [b, c, d]
    }
}

fn read_raw(path: &Path) -> Result<(Grid<f64>, Geometry), IoError> {
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err(path))?;
    let header = obj.header().clone();
    let arr = obj.into_volume().into_ndarray::<f64>().map_err(nifti_err(path))?;
    let shape = arr.shape().to_vec();
    let dims3 = match shape.as_slice() {
        [x, y, z] => [*x, *y, *z],
        [x, y, z, rest @ ..] if rest.iter().all(|&d| d == 1) => [*x, *y, *z],
        _ => return Err(IoError::NotThreeDimensional { path: path.display().to_string(), dims: shape }),
    };
    let arr = arr.into_shape(dims3).map_err(|_| IoError::NotThreeDimensional {
        path: path.display().to_string(),
        dims: dims3.to_vec(),
    })?;
    let data = Grid::from_fn(dims3, |[i, j, k]| arr[[i, j, k]]);
    let geom_err = |source| IoError::Geometry { path: path.display().to_string(), source };
    let (geometry, obliquity) = Geometry::from_affine(&header_affine(&header)).map_err(geom_err)?;
    if obliquity > 1e-3 {
        log::warn!("{}: oblique affine (max off-axis fraction {obliquity:.4}) snapped to nearest axes", path.display());
    }
    Ok((data, geometry))
}

pub fn read_intensity(path: &Path) -> Result<IntensityVolume, IoError> {
    let (data, geometry) = read_raw(path)?;
    Volume::new(data.map(|&x| x as f32), geometry)
        .map_err(|source| IoError::Geometry { path: path.display().to_string(), source })
}

pub fn read_labels(path: &Path) -> Result<LabelVolume, IoError> {
    let (data, geometry) = read_raw(path)?;
    if let Some(&bad) = data
        .as_slice()
        .iter()
        .find(|&&x| x < 0.0 || x.fract() != 0.0 || x > u16::MAX as f64)
    {
        return Err(IoError::InvalidLabelValue { path: path.display().to_string(), value: bad });
    }
    Volume::new(data.map(|&x| x as u16), geometry)
        .map_err(|source| IoError::Geometry { path: path.display().to_string(), source })
}

fn to_array<T: Copy>(g: &Grid<T>) -> Array3<T> {
    let [x, y, z] = g.dims();
    Array3::from_shape_vec((x, y, z).strides((y * z, z, 1)), g.as_slice().to_vec()).expect("grid shape")
}

pub fn write_intensity(path: &Path, v: &IntensityVolume) -> Result<(), IoError> {
    let header = header_for(&v.geometry);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&to_array(&v.data))
        .map_err(nifti_err(path))
}

/// Writes labels as 16-bit signed integers.
pub fn write_labels(path: &Path, v: &LabelVolume) -> Result<(), IoError> {
    let header = header_for(&v.geometry);
    let data = v.data.map(|&l| l as i16);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&to_array(&data))
        .map_err(nifti_err(path))
}
