//! Inference: scores, residual decoding at confident anchors, and NMS.

use serde::{Deserialize, Serialize};

use super::pipeline::{encode_cloud, Encoded};
use super::targets::{decode_anchor, decode_corners, footprint_diagonal, AnchorLabel, TargetAssignment};
use crate::analysis::PredictionDump;
use crate::error::{Error, Result};
use crate::geometry::{nms_with_score_cut, Detection, IouMetric};
use crate::losses::Class;
use crate::network::autodiff::sigmoid;
use crate::network::{forward, Family, NetworkConfig, ParamStore, Tensor};
use crate::voxel::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    /// Anchors must score strictly above this to be decoded.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub nms_metric: IouMetric,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            score_threshold: 0.5,
            nms_iou: 0.8,
            nms_metric: IouMetric::Bev,
        }
    }
}

impl PredictConfig {
    pub fn validate(&self) -> Result<()> {
        let mut keys = Vec::new();
        if !(0.0..=1.0).contains(&self.score_threshold) {
            keys.push("predict.score_threshold".to_string());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            keys.push("predict.nms_iou".to_string());
        }
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                msg: "thresholds must lie in [0, 1]".into(),
                keys,
            })
        }
    }
}

/// Decodes every anchor scoring above the threshold into a detection, before NMS.
/// Anchors whose residual does not decode to a valid box are skipped.
pub fn decode_maps(
    cfg: &NetworkConfig,
    pmap: &Tensor,
    rmap: &Tensor,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let layout = cfg.layout()?;
    if pmap.len() != layout.anchors() || rmap.len() != layout.anchors() * layout.residual_len {
        return Err(Error::Structural(format!(
            "maps {:?} / {:?} do not match layout {layout:?}",
            pmap.shape(),
            rmap.shape()
        )));
    }
    let l = layout.residual_len;
    let cells = layout.cells();
    let head = cfg.head_grid()?;
    let anchors = match cfg.family() {
        Family::Voxelnet => Some(cfg.anchor_grid()?),
        Family::Fcn3d => None,
    };
    let diag = footprint_diagonal(cfg.anchor.size)?;
    let mut out = Vec::new();
    let mut residual = vec![0.0; l];
    for (a, &logit) in pmap.data().iter().enumerate() {
        let score = sigmoid(logit);
        if score <= score_threshold {
            continue;
        }
        for (j, r) in residual.iter_mut().enumerate() {
            *r = rmap.data()[layout.rmap_index(a, j)];
        }
        let decoded = match &anchors {
            Some(grid) => decode_anchor(grid, a, &residual),
            None => decode_corners(&residual, head.voxel_center(head.unlinear(a % cells)), diag),
        };
        match decoded {
            Ok(bbox) => out.push(Detection::new(bbox, score)?),
            Err(Error::Domain(msg)) => log::debug!("anchor {a} skipped: {msg}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Detections of an encoded frame, after NMS, by descending score.
pub fn predict_encoded(
    cfg: &NetworkConfig,
    params: &ParamStore,
    input: &Encoded,
    pc: &PredictConfig,
) -> Result<Vec<Detection>> {
    let (pmap, rmap) = forward(cfg, params, input.as_input())?;
    let dets = decode_maps(cfg, &pmap, &rmap, pc.score_threshold)?;
    let kept = nms_with_score_cut(&dets, pc.nms_iou, pc.nms_metric, Some(pc.score_threshold))?;
    Ok(kept.into_iter().map(|i| dets[i]).collect())
}

/// Detections for a raw point cloud; `seed` drives voxel subsampling.
pub fn predict(
    cfg: &NetworkConfig,
    params: &ParamStore,
    cloud: &PointCloud,
    pc: &PredictConfig,
    seed: u64,
) -> Result<Vec<Detection>> {
    predict_encoded(cfg, params, &encode_cloud(cfg, cloud, seed)?, pc)
}

/// Appends the posterior of the true class at every labeled anchor to `dump`.
pub fn dump_posteriors(
    pmap: &Tensor,
    targets: &TargetAssignment,
    dump: &mut PredictionDump,
) -> Result<()> {
    if pmap.len() != targets.labels.len() {
        return Err(Error::Structural(format!(
            "{} logits for {} anchors",
            pmap.len(),
            targets.labels.len()
        )));
    }
    for (&x, l) in pmap.data().iter().zip(&targets.labels) {
        let p = sigmoid(x);
        match l {
            AnchorLabel::Positive => dump.push(Class::Positive, p)?,
            AnchorLabel::Negative => dump.push(Class::Negative, 1.0 - p)?,
            AnchorLabel::Ignore => {}
        }
    }
    Ok(())
}
