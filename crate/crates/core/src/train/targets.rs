//! Per-anchor classification labels and regression targets for both detectors.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, decode7, encode7, Box3D};
use crate::voxel::VoxelGridSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// How anchors map onto prediction-map channels.
///
/// Anchor `a * cells + cell` reads its logit from channel `a` and its residual
/// component `j` from channel `a * residual_len + j` of the regression map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapLayout {
    pub anchors_per_cell: usize,
    pub residual_len: usize,
    /// Spatial extent of the maps, `(z, x, y)`; BEV maps use depth 1.
    pub cell_dims: [usize; 3],
}

impl MapLayout {
    pub fn cells(&self) -> usize {
        self.cell_dims.iter().product()
    }

    pub fn anchors(&self) -> usize {
        self.anchors_per_cell * self.cells()
    }

    /// Flat regression-map index of component `j` of `anchor`.
    pub fn rmap_index(&self, anchor: usize, j: usize) -> usize {
        let cells = self.cells();
        (anchor / cells * self.residual_len + j) * cells + anchor % cells
    }
}

/// Labels and residual targets for every anchor of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub layout: MapLayout,
    pub labels: Vec<AnchorLabel>,
    /// `(anchor, residual)` for each positive anchor, in anchor order.
    pub positives: Vec<(usize, Vec<f64>)>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_ignore: usize,
    /// Objects that lost their anchor to a competing object.
    pub collisions: usize,
}

impl TargetAssignment {
    pub fn new(
        layout: MapLayout,
        labels: Vec<AnchorLabel>,
        positives: Vec<(usize, Vec<f64>)>,
    ) -> Result<Self> {
        if labels.len() != layout.anchors() {
            return Err(Error::Structural(format!(
                "{} anchor labels for layout with {} anchors",
                labels.len(),
                layout.anchors()
            )));
        }
        let count = |k: AnchorLabel| labels.iter().filter(|&&l| l == k).count();
        let (n_pos, n_neg, n_ignore) = (
            count(AnchorLabel::Positive),
            count(AnchorLabel::Negative),
            count(AnchorLabel::Ignore),
        );
        let ordered = positives.windows(2).all(|w| w[0].0 < w[1].0);
        let consistent = positives.len() == n_pos
            && positives.iter().all(|(a, r)| {
                labels.get(*a) == Some(&AnchorLabel::Positive) && r.len() == layout.residual_len
            });
        if !ordered || !consistent {
            return Err(Error::Structural(
                "every positive anchor needs exactly one residual, in anchor order".into(),
            ));
        }
        Ok(TargetAssignment {
            layout,
            labels,
            positives,
            n_pos,
            n_neg,
            n_ignore,
            collisions: 0,
        })
    }

    /// Assignment with every anchor negative.
    pub fn all_negative(layout: MapLayout) -> Self {
        TargetAssignment {
            layout,
            labels: vec![AnchorLabel::Negative; layout.anchors()],
            positives: Vec::new(),
            n_pos: 0,
            n_neg: layout.anchors(),
            n_ignore: 0,
            collisions: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.labels.len()
    }
}

/// Residual of a box relative to a voxel: corner offsets from the voxel center,
/// divided by the anchor footprint diagonal.
pub fn encode_corners(b: &Box3D, voxel_center: [f64; 3], diag: f64) -> [f64; 24] {
    let mut r = b.corners24();
    for (k, v) in r.iter_mut().enumerate() {
        *v = (*v - voxel_center[k % 3]) / diag;
    }
    r
}

pub fn decode_corners(r: &[f64], voxel_center: [f64; 3], diag: f64) -> Result<Box3D> {
    if r.len() != 24 {
        return Err(Error::Structural(format!("corner residual of length {}", r.len())));
    }
    let mut c = [0.0; 24];
    for (k, v) in c.iter_mut().enumerate() {
        *v = voxel_center[k % 3] + r[k] * diag;
    }
    Box3D::from_corners(&c)
}

pub(crate) fn footprint_diagonal(size: [f64; 3]) -> Result<f64> {
    let d = (size[0] * size[0] + size[1] * size[1]).sqrt();
    if d.is_normal() {
        Ok(d)
    } else {
        Err(Error::Domain(format!("anchor size {size:?} has no footprint")))
    }
}

/// Dense-detector targets on the head grid: the voxel containing an object
/// center is positive, every other voxel negative.
///
/// When two centers share a voxel the object with more support keeps it (the
/// earlier label on ties) and the event is counted in `collisions`. Objects whose
/// center lies outside the grid get no anchor.
pub fn assign_targets_3dfcn(
    head: &VoxelGridSpec,
    labels: &[Label],
    anchor_size: [f64; 3],
) -> Result<TargetAssignment> {
    let diag = footprint_diagonal(anchor_size)?;
    let layout = MapLayout {
        anchors_per_cell: 1,
        residual_len: 24,
        cell_dims: head.dims,
    };
    let mut owner: Vec<Option<usize>> = vec![None; layout.cells()];
    let mut collisions = 0;
    for (k, l) in labels.iter().enumerate() {
        let Some(idx) = head.index_of(l.bbox.center()) else {
            continue;
        };
        let cell = head.linear(idx);
        match owner[cell] {
            None => owner[cell] = Some(k),
            Some(prev) => {
                collisions += 1;
                log::warn!("object centers {prev} and {k} share head voxel {idx:?}");
                if l.support > labels[prev].support {
                    owner[cell] = Some(k);
                }
            }
        }
    }
    let mut out = TargetAssignment::all_negative(layout);
    for (cell, o) in owner.iter().enumerate() {
        if let Some(k) = o {
            let center = head.voxel_center(head.unlinear(cell));
            out.labels[cell] = AnchorLabel::Positive;
            out.positives
                .push((cell, encode_corners(&labels[*k].bbox, center, diag).to_vec()));
        }
    }
    out.n_pos = out.positives.len();
    out.n_neg -= out.n_pos;
    out.collisions = collisions;
    Ok(out)
}

/// Anchors of the BEV detector: one box per yaw at every cell center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorGrid {
    /// Lower corner `(x, y)` of the map.
    pub origin: [f64; 2],
    /// Cell extent `(dx, dy)`.
    pub cell: [f64; 2],
    /// Cells along `(x, y)`.
    pub dims: [usize; 2],
    /// Anchor `(l, w, h)`.
    pub size: [f64; 3],
    /// Anchor center height.
    pub z: f64,
    pub yaws: Vec<f64>,
}

impl AnchorGrid {
    pub fn layout(&self) -> MapLayout {
        MapLayout {
            anchors_per_cell: self.yaws.len(),
            residual_len: 7,
            cell_dims: [1, self.dims[0], self.dims[1]],
        }
    }

    pub fn len(&self) -> usize {
        self.yaws.len() * self.dims[0] * self.dims[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anchor(&self, index: usize) -> Result<Box3D> {
        let cells = self.dims[0] * self.dims[1];
        let (a, cell) = (index / cells, index % cells);
        let (ix, iy) = (cell / self.dims[1], cell % self.dims[1]);
        Box3D::new(
            [
                self.origin[0] + (ix as f64 + 0.5) * self.cell[0],
                self.origin[1] + (iy as f64 + 0.5) * self.cell[1],
                self.z,
            ],
            self.size,
            self.yaws[a],
        )
    }

    pub fn anchors(&self) -> Result<Vec<Box3D>> {
        (0..self.len()).map(|i| self.anchor(i)).collect()
    }

    /// Anchor indices whose footprint could touch `b`.
    fn candidates(&self, b: &Box3D) -> Vec<usize> {
        let reach = 0.5 * (b.bev_diagonal() + footprint_diagonal(self.size).unwrap_or(0.0));
        let c = b.center();
        let range = |lo: f64, cell: f64, center: f64, n: usize| {
            let a = ((center - reach - lo) / cell - 0.5).floor().max(0.0) as usize;
            let z = ((center + reach - lo) / cell - 0.5).ceil();
            let z = if z < 0.0 { return None } else { (z as usize).min(n - 1) };
            if a > z { None } else { Some((a, z)) }
        };
        let (Some((x0, x1)), Some((y0, y1))) = (
            range(self.origin[0], self.cell[0], c[0], self.dims[0]),
            range(self.origin[1], self.cell[1], c[1], self.dims[1]),
        ) else {
            return Vec::new();
        };
        let cells = self.dims[0] * self.dims[1];
        let mut out = Vec::new();
        for a in 0..self.yaws.len() {
            for ix in x0..=x1 {
                for iy in y0..=y1 {
                    out.push(a * cells + ix * self.dims[1] + iy);
                }
            }
        }
        out
    }
}

/// BEV-detector targets: positive when BEV IoU with some object reaches
/// `pos_iou` or the anchor is an object's best match, negative below `neg_iou`,
/// ignored in between. Positives regress to their best-matching object.
pub fn assign_targets_voxelnet(
    grid: &AnchorGrid,
    labels: &[Label],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<TargetAssignment> {
    if !(0.0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1.0) {
        return Err(Error::Domain(format!(
            "matching thresholds need 0 <= neg ({neg_iou}) <= pos ({pos_iou}) <= 1"
        )));
    }
    if grid.yaws.is_empty() || grid.dims.contains(&0) {
        return Err(Error::Structural("anchor grid has no anchors".into()));
    }
    footprint_diagonal(grid.size)?;
    let n = grid.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_obj: Vec<Option<usize>> = vec![None; n];
    let mut forced: Vec<Option<usize>> = vec![None; n];
    for (k, l) in labels.iter().enumerate() {
        let mut arg: Option<(usize, f64)> = None;
        for i in grid.candidates(&l.bbox) {
            let iou = bev_iou(&grid.anchor(i)?, &l.bbox);
            if iou > best_iou[i] {
                best_iou[i] = iou;
                best_obj[i] = Some(k);
            }
            if iou > 0.0 && arg.is_none_or(|(_, v)| iou > v) {
                arg = Some((i, iou));
            }
        }
        if let Some((i, _)) = arg {
            forced[i] = Some(k);
        }
    }
    let mut out_labels = Vec::with_capacity(n);
    let mut positives = Vec::new();
    for i in 0..n {
        let obj = if best_iou[i] >= pos_iou && best_obj[i].is_some() {
            best_obj[i]
        } else {
            forced[i]
        };
        if let Some(k) = obj {
            out_labels.push(AnchorLabel::Positive);
            positives.push((i, encode7(&labels[k].bbox, &grid.anchor(i)?)?.to_vec()));
        } else if best_iou[i] < neg_iou {
            out_labels.push(AnchorLabel::Negative);
        } else {
            out_labels.push(AnchorLabel::Ignore);
        }
    }
    TargetAssignment::new(grid.layout(), out_labels, positives)
}

/// Box regressed at an anchor of the BEV detector.
pub fn decode_anchor(grid: &AnchorGrid, index: usize, residual: &[f64]) -> Result<Box3D> {
    let r: [f64; 7] = residual
        .try_into()
        .map_err(|_| Error::Structural(format!("anchor residual of length {}", residual.len())))?;
    decode7(&r, &grid.anchor(index)?)
}
