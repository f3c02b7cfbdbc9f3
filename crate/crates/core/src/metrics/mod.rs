//! Region overlap and surface-distance metrics, per-case reports and dataset tables.

mod report;
mod surface;

use thiserror::Error;

use crate::grid::Grid;

pub use report::{aggregate_reports, evaluate_segmentation, CaseReport, RegionMetrics, ReportRow, ReportTable, WEIGHTING_NOTE};
pub use surface::{assd, distance_to_set, surface_voxels};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("spacing must be positive and finite, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("no reports to aggregate")]
    EmptyInput,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub(crate) fn check_shapes<A, B>(a: &Grid<A>, b: &Grid<B>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricsError::ShapeMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`, 1.0 when both masks are empty.
pub fn dsc(a: &Grid<bool>, b: &Grid<bool>) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        na += u64::from(x);
        nb += u64::from(y);
        both += u64::from(x && y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Grid<bool> {
        let mut g = Grid::filled(dims, false);
        for &c in on {
            *g.get_mut(c) = true;
        }
        g
    }

    #[test]
    fn dsc_analytic_cases() {
        let a = mask([4, 4, 4], &[[0, 0, 0], [1, 2, 3]]);
        let b = mask([4, 4, 4], &[[1, 2, 3]]);
        let c = mask([4, 4, 4], &[[3, 3, 3]]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&b, &c).unwrap(), 0.0);
        assert!((dsc(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        let empty = mask([4, 4, 4], &[]);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert!(matches!(dsc(&a, &mask([4, 4, 5], &[])), Err(MetricsError::ShapeMismatch(..))));
    }
}
