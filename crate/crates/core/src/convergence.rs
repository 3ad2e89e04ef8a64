//! Observed convergence order from a residual measured on a grid and on its refinement.

use serde::Serialize;

use crate::grid::{Grid, GridError};

/// Halving `h` should divide a 4th-order residual by 16; this band is 16 ± 20%.
pub const RATIO_BAND: (f64, f64) = (12.8, 19.2);
/// Residuals below this on both grids count as exact, with no order to measure.
pub const RESIDUAL_FLOOR: f64 = 1e-11;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ConvergenceStudy {
    pub coarse: f64,
    pub fine: f64,
    /// `coarse / fine`; `None` when both sit below the floor.
    pub ratio: Option<f64>,
    /// `log₂` of the ratio.
    pub order: Option<f64>,
    pub passed: bool,
}

impl ConvergenceStudy {
    /// Compares two maxima with the default band and floor.
    pub fn from_maxima(coarse: f64, fine: f64) -> Self {
        Self::with_band(coarse, fine, RATIO_BAND, RESIDUAL_FLOOR)
    }

    pub fn with_band(coarse: f64, fine: f64, band: (f64, f64), floor: f64) -> Self {
        if coarse <= floor && fine <= floor {
            return Self { coarse, fine, ratio: None, order: None, passed: true };
        }
        let ratio = coarse / fine;
        let passed = ratio.is_finite() && ratio >= band.0 && ratio <= band.1;
        Self { coarse, fine, ratio: Some(ratio), order: Some(ratio.log2()), passed }
    }

    /// Compares per-node residuals on the coarse nodes only, optionally restricted by
    /// `keep` (a predicate on coarse node indices).
    pub fn from_fields(
        coarse_grid: &Grid,
        coarse: &[f64],
        fine_grid: &Grid,
        fine: &[f64],
        keep: impl Fn(usize) -> bool,
    ) -> Result<Self, GridError> {
        if coarse.len() != coarse_grid.len() || fine.len() != fine_grid.len() {
            return Err(GridError::GridMismatch);
        }
        let map = fine_grid.coarse_nodes_in_fine(coarse_grid)?;
        let mut c = 0.0f64;
        let mut f = 0.0f64;
        for (k, &fk) in map.iter().enumerate() {
            if keep(k) {
                c = c.max(coarse[k]);
                f = f.max(fine[fk]);
            }
        }
        Ok(Self::from_maxima(c, f))
    }
}

/// Predicate keeping coarse nodes at least `band` nodes away from both ends of `axis`.
pub fn away_from_edges(grid: &Grid, axis: usize, band: usize) -> impl Fn(usize) -> bool + '_ {
    let n = grid.axis(axis).points;
    move |k| {
        let i = grid.axis_index(k, axis);
        i >= band && i + band < n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_classification() {
        assert!(ConvergenceStudy::from_maxima(1.6e-3, 1e-4).passed);
        assert!(!ConvergenceStudy::from_maxima(8e-4, 1e-4).passed);
        assert!(!ConvergenceStudy::from_maxima(1e-3, 0.0).passed);
        let exact = ConvergenceStudy::from_maxima(1e-13, 2e-13);
        assert!(exact.passed && exact.ratio.is_none());
        let s = ConvergenceStudy::from_maxima(16.0, 1.0);
        assert!((s.order.unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn field_comparison_uses_coarse_nodes() {
        let coarse = Grid::square(1.0, 9, 2).unwrap();
        let fine = coarse.refined();
        let cvals: Vec<f64> = (0..coarse.len()).map(|k| coarse.point(k)[0].abs() * 16.0).collect();
        let fvals: Vec<f64> = (0..fine.len()).map(|k| fine.point(k)[0].abs()).collect();
        let s = ConvergenceStudy::from_fields(&coarse, &cvals, &fine, &fvals, |_| true).unwrap();
        assert_eq!(s.ratio, Some(16.0));
        let keep = away_from_edges(&coarse, 0, 1);
        let inner = ConvergenceStudy::from_fields(&coarse, &cvals, &fine, &fvals, keep).unwrap();
        assert_eq!(inner.coarse, 12.0);
    }
}
