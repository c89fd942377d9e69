//! Fore-background imbalance of a target assignment, overall and per z slice.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::targets::{AnchorLabel, TargetAssignment};
use crate::voxel::VoxelGridSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ZSlice {
    pub z_lo: f64,
    pub z_hi: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImbalanceReport {
    pub anchors: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_ignore: usize,
    /// `n_neg / max(n_pos, 1)`.
    pub ratio: f64,
    pub slices: Vec<ZSlice>,
}

/// Counts per z slice of `grid`, whose dims must match the assignment's map.
pub fn imbalance_report(targets: &TargetAssignment, grid: &VoxelGridSpec) -> Result<ImbalanceReport> {
    let layout = targets.layout;
    if grid.dims != layout.cell_dims {
        return Err(Error::Structural(format!(
            "grid dims {:?} do not match map dims {:?}",
            grid.dims, layout.cell_dims
        )));
    }
    let depth = layout.cell_dims[0];
    let plane = layout.cell_dims[1] * layout.cell_dims[2];
    let cells = layout.cells();
    let mut slices: Vec<ZSlice> = (0..depth)
        .map(|z| ZSlice {
            z_lo: grid.origin[2] + z as f64 * grid.voxel_size[0],
            z_hi: grid.origin[2] + (z + 1) as f64 * grid.voxel_size[0],
            positives: 0,
            negatives: 0,
        })
        .collect();
    for (a, l) in targets.labels.iter().enumerate() {
        let s = &mut slices[(a % cells) / plane];
        match l {
            AnchorLabel::Positive => s.positives += 1,
            AnchorLabel::Negative => s.negatives += 1,
            AnchorLabel::Ignore => {}
        }
    }
    Ok(ImbalanceReport {
        anchors: targets.total(),
        n_pos: targets.n_pos,
        n_neg: targets.n_neg,
        n_ignore: targets.n_ignore,
        ratio: targets.n_neg as f64 / targets.n_pos.max(1) as f64,
        slices,
    })
}
