//! KITTI-style average precision with cumulative difficulty buckets.

use serde::{Deserialize, Serialize};

use crate::data::{Difficulty, Label};
use crate::error::{Error, Result};
use crate::geometry::{Detection, IouMetric};

/// Recall sampling of the interpolated precision curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApPoints {
    /// Recall 0, 0.1, ..., 1.
    #[default]
    Eleven,
    /// Recall 1/40, 2/40, ..., 1.
    Forty,
}

impl ApPoints {
    fn recalls(self) -> Vec<f64> {
        match self {
            ApPoints::Eleven => (0..=10).map(|i| i as f64 / 10.0).collect(),
            ApPoints::Forty => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub overlap_bev: f64,
    pub overlap_3d: f64,
    pub points: ApPoints,
    /// Only labels of this class are evaluated.
    pub class: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            overlap_bev: 0.5,
            overlap_3d: 0.5,
            points: ApPoints::Eleven,
            class: "Car".into(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("overlap_bev", self.overlap_bev), ("overlap_3d", self.overlap_3d)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config {
                    msg: format!("overlap {v} outside (0, 1]"),
                    keys: vec![format!("eval.{k}")],
                });
            }
        }
        Ok(())
    }
}

/// One point of the precision/recall curve, after each counted detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Whether `label` belongs to the cumulative bucket `d`.
fn in_bucket(label: &Label, d: Difficulty) -> bool {
    label.difficulty.is_some_and(|l| l <= d)
}

/// Precision/recall curve of `dets` against `labels` (both per frame), with the
/// number of labels in the bucket. Detections matched to labels outside the
/// bucket are neither true nor false positives.
pub fn pr_curve(
    dets: &[Vec<Detection>],
    labels: &[Vec<Label>],
    metric: IouMetric,
    overlap: f64,
    difficulty: Difficulty,
) -> Result<(Vec<PrPoint>, usize)> {
    if dets.len() != labels.len() {
        return Err(Error::Structural(format!(
            "{} detection frames for {} label frames",
            dets.len(),
            labels.len()
        )));
    }
    if !(overlap > 0.0 && overlap <= 1.0) {
        return Err(Error::Domain(format!("overlap {overlap} outside (0, 1]")));
    }
    let n_gt: usize = labels
        .iter()
        .flatten()
        .filter(|l| in_bucket(l, difficulty))
        .count();
    // (score, frame, index) in descending score; ties by frame then index
    let mut order: Vec<(f64, usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, ds)| ds.iter().enumerate().map(move |(i, d)| (d.score, f, i)))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken: Vec<Vec<bool>> = labels.iter().map(|ls| vec![false; ls.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    for (score, f, i) in order {
        let det = &dets[f][i].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (j, l) in labels[f].iter().enumerate() {
            if taken[f][j] {
                continue;
            }
            let iou = metric.iou(det, &l.bbox);
            if iou >= overlap && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                taken[f][j] = true;
                if in_bucket(&labels[f][j], difficulty) {
                    tp += 1;
                } else {
                    continue;
                }
            }
            None => fp += 1,
        }
        curve.push(PrPoint {
            score,
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok((curve, n_gt))
}

/// Interpolated AP in percent: the mean over sampled recalls `r` of the best
/// precision reached at recall `>= r`. `None` when the bucket has no labels.
pub fn interpolated_ap(curve: &[PrPoint], n_gt: usize, points: ApPoints) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let recalls = points.recalls();
    let sum: f64 = recalls
        .iter()
        .map(|&r| {
            curve
                .iter()
                .filter(|p| p.recall >= r - 1e-12)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(100.0 * sum / recalls.len() as f64)
}

pub fn average_precision(
    dets: &[Vec<Detection>],
    labels: &[Vec<Label>],
    metric: IouMetric,
    overlap: f64,
    difficulty: Difficulty,
    points: ApPoints,
) -> Result<Option<f64>> {
    let (curve, n_gt) = pr_curve(dets, labels, metric, overlap, difficulty)?;
    Ok(interpolated_ap(&curve, n_gt, points))
}

/// AP (%) per difficulty; `null` marks a bucket without labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApByDifficulty {
    pub easy: Option<f64>,
    pub moderate: Option<f64>,
    pub hard: Option<f64>,
}

impl ApByDifficulty {
    pub fn values(&self) -> [Option<f64>; 3] {
        [self.easy, self.moderate, self.hard]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub bev: ApByDifficulty,
    #[serde(rename = "3d")]
    pub three_d: ApByDifficulty,
    /// Mean of the defined 3D APs.
    pub map_3d: Option<f64>,
}

fn by_difficulty(
    dets: &[Vec<Detection>],
    labels: &[Vec<Label>],
    metric: IouMetric,
    overlap: f64,
    points: ApPoints,
) -> Result<ApByDifficulty> {
    let ap = |d| average_precision(dets, labels, metric, overlap, d, points);
    Ok(ApByDifficulty {
        easy: ap(Difficulty::Easy)?,
        moderate: ap(Difficulty::Moderate)?,
        hard: ap(Difficulty::Hard)?,
    })
}

/// BEV and 3D AP for every difficulty. Labels of other classes are dropped.
pub fn evaluate(dets: &[Vec<Detection>], labels: &[Vec<Label>], cfg: &EvalConfig) -> Result<ApReport> {
    cfg.validate()?;
    let labels: Vec<Vec<Label>> = labels
        .iter()
        .map(|ls| ls.iter().filter(|l| l.class == cfg.class).cloned().collect())
        .collect();
    let bev = by_difficulty(dets, &labels, IouMetric::Bev, cfg.overlap_bev, cfg.points)?;
    let three_d = by_difficulty(dets, &labels, IouMetric::ThreeD, cfg.overlap_3d, cfg.points)?;
    let defined: Vec<f64> = three_d.values().into_iter().flatten().collect();
    let map_3d = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(ApReport {
        bev,
        three_d,
        map_3d,
    })
}
