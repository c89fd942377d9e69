//! Per-frame plumbing shared by training, prediction and analysis: network
//! input encoding and target assignment for either detector family.

use serde::{Deserialize, Serialize};

use super::targets::{assign_targets_3dfcn, assign_targets_voxelnet, TargetAssignment};
use crate::data::{Frame, Label};
use crate::error::{Error, Result};
use crate::network::{Family, NetInput, NetworkConfig};
use crate::voxel::{voxelize_occupancy, voxelize_sparse, DenseOccupancy, PointCloud, SparseVoxelSet};

/// BEV IoU thresholds for anchor matching in the voxel-feature detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Matching {
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for Matching {
    fn default() -> Self {
        Matching {
            pos_iou: 0.6,
            neg_iou: 0.45,
        }
    }
}

/// A point cloud in the representation its network consumes.
#[derive(Clone, Debug)]
pub enum Encoded {
    Dense(DenseOccupancy),
    Sparse(SparseVoxelSet),
}

impl Encoded {
    pub fn as_input(&self) -> NetInput<'_> {
        match self {
            Encoded::Dense(o) => NetInput::Dense(o),
            Encoded::Sparse(s) => NetInput::Sparse(s),
        }
    }
}

/// Stable per-frame seed for point subsampling, independent of frame order.
pub fn frame_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a over the id, mixed with the run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Voxelizes `cloud` for `cfg`; `seed` drives the sparse path's subsampling.
pub fn encode_cloud(cfg: &NetworkConfig, cloud: &PointCloud, seed: u64) -> Result<Encoded> {
    Ok(match cfg.family() {
        Family::Fcn3d => Encoded::Dense(voxelize_occupancy(cloud, &cfg.grid)),
        Family::Voxelnet => {
            Encoded::Sparse(voxelize_sparse(cloud, &cfg.grid, cfg.max_points, seed)?)
        }
    })
}

/// Assigns anchor targets for `labels` on the prediction maps of `cfg`.
pub fn assign(cfg: &NetworkConfig, labels: &[Label], matching: &Matching) -> Result<TargetAssignment> {
    match cfg.family() {
        Family::Fcn3d => assign_targets_3dfcn(&cfg.head_grid()?, labels, cfg.anchor.size),
        Family::Voxelnet => {
            assign_targets_voxelnet(&cfg.anchor_grid()?, labels, matching.pos_iou, matching.neg_iou)
        }
    }
}

/// A frame made ready for the network: kept labels, encoded input, targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub labels: Vec<Label>,
    pub input: Encoded,
    pub targets: TargetAssignment,
}

/// Keeps labels of `class` supported by at least `min_points` points, encodes
/// the cloud and assigns targets.
pub fn prepare_frame(
    cfg: &NetworkConfig,
    frame: &Frame,
    class: &str,
    min_points: usize,
    matching: &Matching,
    seed: u64,
) -> Result<Prepared> {
    let labels: Vec<Label> = frame
        .labels
        .iter()
        .filter(|l| l.class == class && l.support >= min_points)
        .cloned()
        .collect();
    let input = encode_cloud(cfg, &frame.cloud, frame_seed(seed, &frame.id))?;
    let targets = assign(cfg, &labels, matching)?;
    Ok(Prepared {
        id: frame.id.clone(),
        labels,
        input,
        targets,
    })
}

impl Matching {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::Config {
                msg: format!(
                    "matching needs 0 <= neg_iou ({}) <= pos_iou ({}) <= 1",
                    self.neg_iou, self.pos_iou
                ),
                keys: vec!["matching.pos_iou".into(), "matching.neg_iou".into()],
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_scene, SceneRecipe};

    #[test]
    fn frame_seed_depends_on_id_and_seed() {
        assert_eq!(frame_seed(1, "000001"), frame_seed(1, "000001"));
        assert_ne!(frame_seed(1, "000001"), frame_seed(1, "000002"));
        assert_ne!(frame_seed(1, "000001"), frame_seed(2, "000001"));
    }

    #[test]
    fn preparation_is_deterministic_and_filters_labels() {
        let cfg = NetworkConfig::voxelnet_mini();
        let frame = generate_scene(&SceneRecipe::default()).unwrap();
        let a = prepare_frame(&cfg, &frame, "Car", 10, &Matching::default(), 3).unwrap();
        let b = prepare_frame(&cfg, &frame, "Car", 10, &Matching::default(), 3).unwrap();
        assert_eq!(a.targets, b.targets);
        assert!(a.labels.iter().all(|l| l.support >= 10));
        let none = prepare_frame(&cfg, &frame, "Pedestrian", 0, &Matching::default(), 3).unwrap();
        assert_eq!(none.targets.n_pos, 0);
        assert_eq!(none.targets.n_neg, cfg.anchor_count().unwrap());
    }
}
