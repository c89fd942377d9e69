//! KITTI file formats: Velodyne scans, label / result text files and calibration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use super::{Difficulty, Label};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D, Detection};
use crate::voxel::{Point, PointCloud};

/// Rigid map between the LiDAR frame and the rectified camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    velo_to_rect: Matrix4<f64>,
    rect_to_velo: Matrix4<f64>,
}

impl Calibration {
    /// Camera axes aligned with the LiDAR axes and no offset:
    /// `x_cam = -y_velo`, `y_cam = -z_velo`, `z_cam = x_velo`.
    pub fn identity() -> Self {
        #[rustfmt::skip]
        let m = Matrix4::new(
            0.0, -1.0, 0.0, 0.0,
            0.0, 0.0, -1.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        Calibration {
            velo_to_rect: m,
            rect_to_velo: m.transpose(),
        }
    }

    /// From the `R0_rect` (3x3) and `Tr_velo_to_cam` (3x4) matrices, row-major.
    pub fn from_matrices(r0_rect: &[f64; 9], tr_velo_to_cam: &[f64; 12]) -> Result<Self> {
        let r0 = Matrix3::from_row_slice(r0_rect);
        let mut r = Matrix4::identity();
        r.fixed_view_mut::<3, 3>(0, 0).copy_from(&r0);
        let mut tr = Matrix4::identity();
        for i in 0..3 {
            for j in 0..4 {
                tr[(i, j)] = tr_velo_to_cam[i * 4 + j];
            }
        }
        let velo_to_rect = r * tr;
        let rect_to_velo = velo_to_rect
            .try_inverse()
            .ok_or_else(|| Error::Domain("calibration matrix is singular".into()))?;
        Ok(Calibration {
            velo_to_rect,
            rect_to_velo,
        })
    }

    /// Parses a KITTI `calib/<id>.txt` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut r0 = None;
        let mut tr = None;
        for (n, line) in text.lines().enumerate() {
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            let vals: std::result::Result<Vec<f64>, _> =
                rest.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
            match key.trim() {
                "R0_rect" => {
                    r0 = Some(<[f64; 9]>::try_from(vals.as_slice()).map_err(|_| {
                        Error::parse(path, format!("line {}: R0_rect needs 9 values", n + 1))
                    })?)
                }
                "Tr_velo_to_cam" => {
                    tr = Some(<[f64; 12]>::try_from(vals.as_slice()).map_err(|_| {
                        Error::parse(path, format!("line {}: Tr_velo_to_cam needs 12 values", n + 1))
                    })?)
                }
                _ => {}
            }
        }
        match (r0, tr) {
            (Some(r0), Some(tr)) => Self::from_matrices(&r0, &tr),
            _ => Err(Error::parse(path, "missing R0_rect or Tr_velo_to_cam")),
        }
    }

    fn apply(m: &Matrix4<f64>, p: [f64; 3]) -> [f64; 3] {
        let v = m * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    fn rotate(m: &Matrix4<f64>, d: [f64; 3]) -> [f64; 3] {
        let v = m.fixed_view::<3, 3>(0, 0) * Vector3::new(d[0], d[1], d[2]);
        [v[0], v[1], v[2]]
    }

    /// Box from camera-frame label fields: dimensions `(h, w, l)`, bottom-center
    /// location and rotation about the camera y axis.
    pub fn box_from_camera(&self, hwl: [f64; 3], loc: [f64; 3], ry: f64) -> Result<Box3D> {
        let [h, w, l] = hwl;
        let center = Self::apply(&self.rect_to_velo, [loc[0], loc[1] - 0.5 * h, loc[2]]);
        let heading = Self::rotate(&self.rect_to_velo, [ry.cos(), 0.0, -ry.sin()]);
        Box3D::new(center, [l, w, h], heading[1].atan2(heading[0]))
    }

    /// Inverse of [`Calibration::box_from_camera`]: `((h, w, l), location, ry)`.
    pub fn box_to_camera(&self, b: &Box3D) -> ([f64; 3], [f64; 3], f64) {
        let [l, w, h] = b.size();
        let c = Self::apply(&self.velo_to_rect, b.center());
        let d = Self::rotate(&self.velo_to_rect, [b.yaw().cos(), b.yaw().sin(), 0.0]);
        (
            [h, w, l],
            [c[0], c[1] + 0.5 * h, c[2]],
            normalize_angle((-d[2]).atan2(d[0])),
        )
    }
}

/// Reads packed little-endian `f32` quadruples `(x, y, z, r)`.
pub fn load_velodyne(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_velodyne(&bytes).map_err(|msg| Error::parse(path, msg))
}

fn parse_velodyne(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    let rem = bytes.len() % 16;
    if rem != 0 {
        return Err(format!(
            "truncated point record at byte offset {} ({} trailing bytes)",
            bytes.len() - rem,
            rem
        ));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    let points: Vec<Point> = bytes
        .chunks_exact(16)
        .map(|c| Point::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]), f(&c[12..16])))
        .collect();
    if let Some(i) = points
        .iter()
        .position(|p| ![p.x, p.y, p.z, p.r].iter().all(|v| v.is_finite()))
    {
        return Err(format!("non-finite point at byte offset {}", i * 16));
    }
    PointCloud::new(points).map_err(|e| e.to_string())
}

pub fn write_velodyne(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in [p.x, p.y, p.z, p.r] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One parsed row of a label or result file.
struct Row {
    class: String,
    truncated: f64,
    occluded: i32,
    alpha: f64,
    bbox2d: [f64; 4],
    hwl: [f64; 3],
    loc: [f64; 3],
    ry: f64,
    score: Option<f64>,
}

fn parse_row(line: &str, with_score: bool) -> std::result::Result<Row, String> {
    let cols: Vec<&str> = line.split_whitespace().collect();
    let want = if with_score { 16 } else { 15 };
    if cols.len() != want {
        return Err(format!("expected {want} columns, found {}", cols.len()));
    }
    let num = |i: usize| -> std::result::Result<f64, String> {
        cols[i]
            .parse::<f64>()
            .map_err(|_| format!("column {} is not a number: {:?}", i + 1, cols[i]))
    };
    let occluded = cols[2]
        .parse::<i32>()
        .map_err(|_| format!("column 3 is not an integer: {:?}", cols[2]))?;
    Ok(Row {
        class: cols[0].to_string(),
        truncated: num(1)?,
        occluded,
        alpha: num(3)?,
        bbox2d: [num(4)?, num(5)?, num(6)?, num(7)?],
        hwl: [num(8)?, num(9)?, num(10)?],
        loc: [num(11)?, num(12)?, num(13)?],
        ry: num(14)?,
        score: if with_score { Some(num(15)?) } else { None },
    })
}

fn read_rows(path: &Path, with_score: bool) -> Result<Vec<(usize, Row)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(line, with_score)
            .map_err(|msg| Error::parse(path, format!("line {}: {msg}", n + 1)))?;
        rows.push((n + 1, row));
    }
    Ok(rows)
}

/// Parses a 15-column label file; `DontCare` rows are skipped.
///
/// Support is left at zero and difficulty follows the KITTI rule;
/// [`super::Frame::new`] recomputes both.
pub fn parse_labels(path: &Path, calib: &Calibration) -> Result<Vec<Label>> {
    let mut labels = Vec::new();
    for (line, r) in read_rows(path, false)? {
        if r.class == "DontCare" {
            continue;
        }
        let bbox = calib
            .box_from_camera(r.hwl, r.loc, r.ry)
            .map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
        labels.push(Label {
            difficulty: Difficulty::from_kitti(r.bbox2d[3] - r.bbox2d[1], r.occluded, r.truncated),
            class: r.class,
            bbox,
            truncated: r.truncated,
            occluded: r.occluded,
            alpha: r.alpha,
            bbox2d: r.bbox2d,
            support: 0,
        });
    }
    Ok(labels)
}

fn push_row(out: &mut String, class: &str, label: &Label, calib: &Calibration) {
    let (hwl, loc, ry) = calib.box_to_camera(&label.bbox);
    let b = label.bbox2d;
    let _ = write!(
        out,
        "{class} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
        label.truncated,
        label.occluded,
        label.alpha,
        b[0],
        b[1],
        b[2],
        b[3],
        hwl[0],
        hwl[1],
        hwl[2],
        loc[0],
        loc[1],
        loc[2],
        ry
    );
}

pub fn format_labels(labels: &[Label], calib: &Calibration) -> String {
    let mut out = String::new();
    for l in labels {
        push_row(&mut out, &l.class, l, calib);
        out.push('\n');
    }
    out
}

pub fn write_labels(path: &Path, labels: &[Label], calib: &Calibration) -> Result<()> {
    fs::write(path, format_labels(labels, calib)).map_err(|e| Error::io(path, e))
}

/// Writes detections as a result file: label columns plus a trailing score.
pub fn write_results(
    path: &Path,
    class: &str,
    dets: &[Detection],
    calib: &Calibration,
) -> Result<()> {
    let mut out = String::new();
    for d in dets {
        push_row(&mut out, class, &Label::synthetic(class, d.bbox), calib);
        let _ = writeln!(out, " {}", d.score);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a result file; returns `(class, detection)` per row.
pub fn parse_results(path: &Path, calib: &Calibration) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (line, r) in read_rows(path, true)? {
        let err = |e: Error| Error::parse(path, format!("line {line}: {e}"));
        let bbox = calib.box_from_camera(r.hwl, r.loc, r.ry).map_err(err)?;
        let det = Detection::new(bbox, r.score.unwrap_or(0.0)).map_err(err)?;
        out.push((r.class, det));
    }
    Ok(out)
}
