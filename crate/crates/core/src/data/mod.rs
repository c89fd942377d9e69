//! Frames, KITTI-format ingestion, filtering, splitting and synthetic scenes.

pub mod kitti;
pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::voxel::PointCloud;

pub use kitti::Calibration;
pub use synth::{generate_scene, SceneRecipe};

/// Evaluation difficulty bucket. Buckets are cumulative at evaluation time:
/// easy labels also count under moderate and hard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    /// Synthetic rule: by the number of points inside the box.
    pub fn from_support(support: usize) -> Self {
        if support >= 120 {
            Difficulty::Easy
        } else if support >= 40 {
            Difficulty::Moderate
        } else {
            Difficulty::Hard
        }
    }

    /// KITTI rule from 2D box height (pixels), occlusion level and truncation.
    /// `None` when the object is too small, occluded or truncated for any bucket.
    pub fn from_kitti(height_px: f64, occluded: i32, truncated: f64) -> Option<Self> {
        if height_px >= 40.0 && occluded <= 0 && truncated <= 0.15 {
            Some(Difficulty::Easy)
        } else if height_px >= 25.0 && occluded <= 1 && truncated <= 0.30 {
            Some(Difficulty::Moderate)
        } else if height_px >= 25.0 && occluded <= 2 && truncated <= 0.50 {
            Some(Difficulty::Hard)
        } else {
            None
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

/// One annotated object.
#[derive(Clone, Debug, PartialEq)]
pub struct Label {
    pub class: String,
    pub bbox: Box3D,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    /// Image-plane box `(left, top, right, bottom)`.
    pub bbox2d: [f64; 4],
    pub difficulty: Option<Difficulty>,
    /// Cloud points inside the box.
    pub support: usize,
}

impl Label {
    /// Label with neutral image-plane fields, as used for synthetic scenes.
    pub fn synthetic(class: &str, bbox: Box3D) -> Self {
        Label {
            class: class.to_string(),
            bbox,
            truncated: 0.0,
            occluded: 0,
            alpha: -10.0,
            bbox2d: [0.0; 4],
            difficulty: None,
            support: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: Vec<Label>,
}

/// How difficulty tags are derived when a frame is loaded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyRule {
    Support,
    Kitti,
}

/// Number of cloud points inside `b`.
pub fn count_support(cloud: &PointCloud, b: &Box3D) -> usize {
    cloud
        .points()
        .iter()
        .filter(|p| b.contains(p.xyz()))
        .count()
}

impl Frame {
    /// Builds a frame, recomputing every label's support from the cloud and
    /// assigning difficulty by `rule`.
    pub fn new(id: &str, cloud: PointCloud, mut labels: Vec<Label>, rule: DifficultyRule) -> Self {
        for l in &mut labels {
            l.support = count_support(&cloud, &l.bbox);
            l.difficulty = match rule {
                DifficultyRule::Support => Some(Difficulty::from_support(l.support)),
                DifficultyRule::Kitti => Difficulty::from_kitti(
                    l.bbox2d[3] - l.bbox2d[1],
                    l.occluded,
                    l.truncated,
                ),
            };
        }
        Frame {
            id: id.to_string(),
            cloud,
            labels,
        }
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.labels.iter().map(|l| l.bbox).collect()
    }
}

/// Drops labels supported by fewer than `min_points` points; returns the filtered
/// frame and how many labels were removed.
pub fn filter_sparse_boxes(frame: &Frame, min_points: usize) -> (Frame, usize) {
    let labels: Vec<Label> = frame
        .labels
        .iter()
        .filter(|l| l.support >= min_points)
        .cloned()
        .collect();
    let removed = frame.labels.len() - labels.len();
    (
        Frame {
            id: frame.id.clone(),
            cloud: frame.cloud.clone(),
            labels,
        },
        removed,
    )
}

/// Default minimum support for a label to be kept.
pub const MIN_BOX_POINTS: usize = 10;

/// Seeded shuffle into two disjoint halves; the first half gets the extra id.
pub fn split_train_val(ids: &[String], seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(Error::Domain("cannot split an empty id list".into()));
    }
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Structural("duplicate frame ids in split input".into()));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = order.len().div_ceil(2);
    let val = order.split_off(n_train);
    Ok((order, val))
}

pub fn write_split(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    if !ids.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Calibration source declared by a dataset directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Per-frame `calib/<id>.txt` files.
    Kitti,
    /// Fixed axis permutation between camera and LiDAR frames.
    Identity,
}

/// Contents of `dataset.json` at a dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub calibration: CalibrationMode,
    pub difficulty: DifficultyRule,
    #[serde(default)]
    pub classes: Vec<String>,
}

/// KITTI-style directory: `velodyne/<id>.bin`, `label_2/<id>.txt`, optional
/// `calib/<id>.txt`, and `dataset.json`.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    meta: DatasetMeta,
    ids: Vec<String>,
}

pub const DATASET_META: &str = "dataset.json";

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let meta_path = root.join(DATASET_META);
        let meta: DatasetMeta = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.to_string()))?
        } else {
            DatasetMeta {
                calibration: CalibrationMode::Kitti,
                difficulty: DifficultyRule::Kitti,
                classes: vec![],
            }
        };
        let velo = root.join("velodyne");
        let mut ids = Vec::new();
        let entries = fs::read_dir(&velo).map_err(|e| Error::io(&velo, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&velo, e))?;
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "bin") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(Dataset {
            root: root.to_path_buf(),
            meta,
            ids,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn calibration(&self, id: &str) -> Result<Calibration> {
        match self.meta.calibration {
            CalibrationMode::Identity => Ok(Calibration::identity()),
            CalibrationMode::Kitti => {
                Calibration::load(&self.root.join("calib").join(format!("{id}.txt")))
            }
        }
    }

    /// Loads a frame; labels of classes outside `meta.classes` (when set) are dropped.
    pub fn load_frame(&self, id: &str) -> Result<Frame> {
        let cloud = kitti::load_velodyne(&self.root.join("velodyne").join(format!("{id}.bin")))?;
        let label_path = self.root.join("label_2").join(format!("{id}.txt"));
        let labels = if label_path.exists() {
            let calib = self.calibration(id)?;
            kitti::parse_labels(&label_path, &calib)?
        } else {
            Vec::new()
        };
        let labels = labels
            .into_iter()
            .filter(|l| self.meta.classes.is_empty() || self.meta.classes.contains(&l.class))
            .collect();
        Ok(Frame::new(id, cloud, labels, self.meta.difficulty))
    }

    /// Writes a frame in the directory layout understood by [`Dataset::open`].
    pub fn write_frame(root: &Path, frame: &Frame, calib: &Calibration) -> Result<()> {
        for sub in ["velodyne", "label_2"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        kitti::write_velodyne(
            &root.join("velodyne").join(format!("{}.bin", frame.id)),
            &frame.cloud,
        )?;
        kitti::write_labels(
            &root.join("label_2").join(format!("{}.txt", frame.id)),
            &frame.labels,
            calib,
        )
    }
}
