//! Oriented 3D boxes: corners, residual encodings, rotated IoU and greedy NMS.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Concatenated `(x, y, z)` of the eight box corners.
pub type CornerResidual24 = [f64; 24];

/// `(dx, dy, dz, dl, dw, dh, dyaw)` relative to an anchor.
pub type AnchorResidual7 = [f64; 7];

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r >= PI {
        -PI
    } else {
        r
    }
}

/// Oriented box: `center = (x, y, z)`, `size = (l, w, h)`, yaw about the z axis.
///
/// `l` runs along the heading direction, `w` across it, `h` vertically.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct Box3D {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

#[derive(Deserialize)]
struct RawBox {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

impl TryFrom<RawBox> for Box3D {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        Box3D::new(r.center, r.size, r.yaw)
    }
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::Domain(format!(
                "box center {center:?} / yaw {yaw} must be finite"
            )));
        }
        if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Domain(format!("box size {size:?} must be positive")));
        }
        Ok(Box3D {
            center,
            size,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Diagonal of the footprint, `sqrt(l^2 + w^2)`.
    pub fn bev_diagonal(&self) -> f64 {
        (self.size[0] * self.size[0] + self.size[1] * self.size[1]).sqrt()
    }

    /// Vertical extent `(z_min, z_max)`.
    pub fn z_range(&self) -> (f64, f64) {
        let half = 0.5 * self.size[2];
        (self.center[2] - half, self.center[2] + half)
    }

    /// Footprint corners, counterclockwise from `(+l/2, +w/2)` in the box frame.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.size[0], 0.5 * self.size[1]);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    /// Whether a point lies inside the box (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (z0, z1) = self.z_range();
        if p[2] < z0 || p[2] > z1 {
            return false;
        }
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= 0.5 * self.size[0] && v.abs() <= 0.5 * self.size[1]
    }

    /// The eight corners: bottom face counterclockwise from `(+l/2, +w/2)`, then the
    /// top face in the same order.
    pub fn corners24(&self) -> CornerResidual24 {
        let fp = self.footprint();
        let (z0, z1) = self.z_range();
        let mut out = [0.0; 24];
        for (k, z) in [z0, z1].into_iter().enumerate() {
            for (i, [x, y]) in fp.iter().enumerate() {
                let base = (k * 4 + i) * 3;
                out[base] = *x;
                out[base + 1] = *y;
                out[base + 2] = z;
            }
        }
        out
    }

    /// Least-squares box through eight corners in [`Box3D::corners24`] order.
    ///
    /// Exact for corners of a box; for noisy corners the face centers define
    /// heading, length, width and height.
    pub fn from_corners(c: &CornerResidual24) -> Result<Self> {
        let pt = |i: usize| [c[3 * i], c[3 * i + 1], c[3 * i + 2]];
        let mean = |ids: &[usize]| {
            let mut m = [0.0; 3];
            for &i in ids {
                let p = pt(i);
                for a in 0..3 {
                    m[a] += p[a];
                }
            }
            m.map(|v| v / ids.len() as f64)
        };
        let center = mean(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let front = mean(&[0, 3, 4, 7]);
        let back = mean(&[1, 2, 5, 6]);
        let left = mean(&[0, 1, 4, 5]);
        let right = mean(&[2, 3, 6, 7]);
        let bottom = mean(&[0, 1, 2, 3]);
        let top = mean(&[4, 5, 6, 7]);
        let (lx, ly) = (front[0] - back[0], front[1] - back[1]);
        let l = lx.hypot(ly);
        let yaw = ly.atan2(lx);
        let w = (left[0] - right[0]).hypot(left[1] - right[1]);
        let h = top[2] - bottom[2];
        Box3D::new(center, [l, w, h], yaw)
    }

    /// Same box with its center shifted.
    pub fn translated(&self, d: [f64; 3]) -> Self {
        Box3D {
            center: [
                self.center[0] + d[0],
                self.center[1] + d[1],
                self.center[2] + d[2],
            ],
            ..*self
        }
    }

    /// Same box rotated about the vertical axis through `pivot`.
    pub fn rotated_about(&self, pivot: [f64; 2], angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let (dx, dy) = (self.center[0] - pivot[0], self.center[1] - pivot[1]);
        Box3D {
            center: [
                pivot[0] + c * dx - s * dy,
                pivot[1] + s * dx + c * dy,
                self.center[2],
            ],
            size: self.size,
            yaw: normalize_angle(self.yaw + angle),
        }
    }
}

fn anchor_scales(anchor: &Box3D) -> Result<(f64, f64)> {
    let [l, w, h] = anchor.size;
    let d = (l * l + w * w).sqrt();
    if !(d.is_normal() && h.is_normal()) {
        return Err(Error::Domain(format!(
            "degenerate anchor with size {:?}",
            anchor.size
        )));
    }
    Ok((d, h))
}

/// Residual of `b` relative to `anchor`: center offsets scaled by the anchor BEV
/// diagonal (vertical by anchor height), log size ratios, and the yaw difference.
pub fn encode7(b: &Box3D, anchor: &Box3D) -> Result<AnchorResidual7> {
    let (d, h) = anchor_scales(anchor)?;
    Ok([
        (b.center[0] - anchor.center[0]) / d,
        (b.center[1] - anchor.center[1]) / d,
        (b.center[2] - anchor.center[2]) / h,
        (b.size[0] / anchor.size[0]).ln(),
        (b.size[1] / anchor.size[1]).ln(),
        (b.size[2] / anchor.size[2]).ln(),
        b.yaw - anchor.yaw,
    ])
}

/// Inverse of [`encode7`].
pub fn decode7(r: &AnchorResidual7, anchor: &Box3D) -> Result<Box3D> {
    let (d, h) = anchor_scales(anchor)?;
    Box3D::new(
        [
            anchor.center[0] + r[0] * d,
            anchor.center[1] + r[1] * d,
            anchor.center[2] + r[2] * h,
        ],
        [
            anchor.size[0] * r[3].exp(),
            anchor.size[1] * r[4].exp(),
            anchor.size[2] * r[5].exp(),
        ],
        anchor.yaw + r[6],
    )
}

/// Signed area of a polygon (positive when counterclockwise).
fn shoelace(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}

/// Sutherland–Hodgman clip of `subject` by the convex counterclockwise polygon `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Overlap slivers below this area (m^2) count as no overlap.
const MIN_AREA: f64 = 1e-10;

/// Area of the intersection of two footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let (ca, cb) = (a.center, b.center);
    let reach = 0.5 * (a.bev_diagonal() + b.bev_diagonal());
    if (ca[0] - cb[0]).hypot(ca[1] - cb[1]) > reach {
        return 0.0;
    }
    let poly = clip_polygon(&a.footprint(), &b.footprint());
    if poly.len() < 3 {
        return 0.0;
    }
    let area = shoelace(&poly).abs();
    if area < MIN_AREA {
        0.0
    } else {
        area
    }
}

fn same_box(a: &Box3D, b: &Box3D) -> bool {
    a == b
}

/// Intersection over union of the two footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    if same_box(a, b) {
        return 1.0;
    }
    let inter = bev_intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over union of the two volumes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    if same_box(a, b) {
        return 1.0;
    }
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMetric {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouMetric {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouMetric::Bev => bev_iou(a, b),
            IouMetric::ThreeD => iou3d(a, b),
        }
    }
}

/// A scored box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: Box3D, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Domain(format!("score {score} outside [0, 1]")));
        }
        Ok(Detection { bbox, score })
    }
}

/// Indices of `dets` by descending score; ties keep the lower index first.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order
}

/// Greedy non-maximum suppression; returns kept indices in descending score order.
pub fn nms(dets: &[Detection], iou_threshold: f64, metric: IouMetric) -> Result<Vec<usize>> {
    nms_with_score_cut(dets, iou_threshold, metric, None)
}

/// [`nms`] that first discards detections whose score is not above `min_score`.
pub fn nms_with_score_cut(
    dets: &[Detection],
    iou_threshold: f64,
    metric: IouMetric,
    min_score: Option<f64>,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::Domain(format!(
            "nms threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        if min_score.is_some_and(|m| dets[i].score <= m) {
            continue;
        }
        let suppressed = kept
            .iter()
            .any(|&k| metric.iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}
