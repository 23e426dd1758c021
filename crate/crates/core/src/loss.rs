//! Segmentation loss and BEV metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::BevGrid;
use crate::math;
use crate::tensor::{Tape, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// Mean focal loss over every logit.
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &[f64], cfg: &LossConfig) -> Result<Var> {
    tape.focal_loss(logits, targets.to_vec(), cfg.alpha, cfg.gamma)
}

/// Intersection and union cell counts; these sum across samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: usize,
    pub union: usize,
}

impl IouCounts {
    pub fn of(pred: &[bool], target: &[bool]) -> Self {
        let mut c = Self::default();
        for (p, t) in pred.iter().zip(target) {
            c.intersection += (*p && *t) as usize;
            c.union += (*p || *t) as usize;
        }
        c
    }

    pub fn add(&mut self, other: Self) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// `|P∩G| / |P∪G|`; an empty union counts as a perfect score.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &[bool], target: &[bool]) -> f64 {
    IouCounts::of(pred, target).iou()
}

pub const BAND_WIDTH: f64 = 10.0;

/// IoU counts per 10 m band of cell-center distance from the ego origin.
pub fn distance_banded_counts(grid: &BevGrid, pred: &[bool], target: &[bool]) -> Vec<IouCounts> {
    let b = grid.bounds();
    let far = [b[0].abs().max(b[1].abs()), b[2].abs().max(b[3].abs())];
    let max_d = math::sqrt(far[0] * far[0] + far[1] * far[1]);
    let bands = (max_d / BAND_WIDTH) as usize + 1;
    let mut out = vec![IouCounts::default(); bands];
    for q in 0..grid.num_cells() {
        let (i, j) = grid.cell_of_query(q);
        let c = grid.cell_center(i, j);
        let band = ((math::sqrt(c[0] * c[0] + c[1] * c[1]) / BAND_WIDTH) as usize).min(bands - 1);
        out[band].add(IouCounts::of(&pred[q..q + 1], &target[q..q + 1]));
    }
    out
}

pub fn distance_banded_iou(grid: &BevGrid, pred: &[bool], target: &[bool]) -> Vec<f64> {
    distance_banded_counts(grid, pred, target).iter().map(IouCounts::iou).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&[true, true, false, false], &[true, false, true, false]), 1.0 / 3.0);
        assert_eq!(iou(&[false; 4], &[false; 4]), 1.0);
        assert_eq!(iou(&[true, false], &[true, false]), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]), 0.0);
    }

    #[test]
    fn bands_partition_the_cells() {
        let grid = BevGrid::centered(20, 20, 2.0).unwrap();
        let pred: Vec<bool> = (0..400).map(|q| q % 3 == 0).collect();
        let target: Vec<bool> = (0..400).map(|q| q % 2 == 0).collect();
        let counts = distance_banded_counts(&grid, &pred, &target);
        let mut total = IouCounts::default();
        counts.iter().for_each(|c| total.add(*c));
        assert_eq!(total, IouCounts::of(&pred, &target));
        assert_eq!(counts.len(), 3);
    }

    #[test]
    fn focal_wrapper_uses_config() {
        let mut tape = Tape::new();
        let z = tape.constant(&[1], vec![0.0]).unwrap();
        let l = focal_loss(&mut tape, z, &[1.0], &LossConfig::default()).unwrap();
        let expected = 0.25 * 0.25 * math::ln(2.0);
        assert!((tape.scalar_value(l) - expected).abs() < 1e-15);
    }
}
