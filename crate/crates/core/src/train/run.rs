//! The two-phase schedule: a BCE phase at the base learning rate followed by a
//! focal phase at a discounted rate, with metrics, validation and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{GradAccumulator, OptimizerConfig, Sgd};
use super::pipeline::{prepare_frame, Matching, Prepared};
use super::predict::{predict_encoded, PredictConfig};
use crate::analysis::{evaluate, ApReport, EvalConfig};
use crate::data::{Frame, MIN_BOX_POINTS};
use crate::error::{Error, Result};
use crate::losses::{composite_loss_graph, ClsKind, LossBreakdown, LossConfig};
use crate::network::params::BN_MOMENTUM;
use crate::network::{build_forward, Graph, Mode, NetworkConfig, ParamStore};

/// Header of `metrics.csv`.
pub const METRICS_HEADER: [&str; 7] = ["step", "epoch", "loss", "cls_pos", "cls_neg", "reg", "val_map"];

fn default_epochs() -> [usize; 2] {
    [30, 30]
}
fn default_lr() -> f64 {
    0.001
}
fn default_phase2_factor() -> f64 {
    0.1
}
fn default_batch() -> usize {
    2
}
fn default_every() -> usize {
    1
}
fn default_min_points() -> usize {
    MIN_BOX_POINTS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    /// Loss of the second phase; the first phase uses its BCE counterpart.
    pub loss: LossConfig,
    #[serde(default = "default_epochs")]
    pub epochs: [usize; 2],
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_phase2_factor")]
    pub phase2_lr_factor: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint every this many epochs; the final epoch is always saved.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Validate every this many epochs; the final epoch is always validated.
    #[serde(default = "default_every")]
    pub validate_every: usize,
    /// Labels with fewer supporting points are dropped.
    #[serde(default = "default_min_points")]
    pub min_points: usize,
    #[serde(default)]
    pub matching: Matching,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl TrainConfig {
    /// Defaults around a network and second-phase loss.
    pub fn new(network: NetworkConfig, loss: LossConfig) -> Self {
        TrainConfig {
            network,
            loss,
            epochs: default_epochs(),
            lr: default_lr(),
            phase2_lr_factor: default_phase2_factor(),
            batch_size: default_batch(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            validate_every: default_every(),
            min_points: default_min_points(),
            matching: Matching::default(),
            predict: PredictConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate().map_err(|e| Error::Config {
            msg: e.to_string(),
            keys: vec!["loss".into()],
        })?;
        let mut keys = Vec::new();
        if self.loss.cls_kind == ClsKind::Focal && self.loss.gamma <= 0.0 {
            keys.push("loss.gamma".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            keys.push("lr".to_string());
        }
        if !(self.phase2_lr_factor.is_finite() && self.phase2_lr_factor > 0.0) {
            keys.push("phase2_lr_factor".to_string());
        }
        if self.batch_size == 0 {
            keys.push("batch_size".to_string());
        }
        if self.epochs.iter().sum::<usize>() == 0 {
            keys.push("epochs".to_string());
        }
        if !keys.is_empty() {
            return Err(Error::Config {
                msg: "invalid training schedule".into(),
                keys,
            });
        }
        self.optimizer.validate()?;
        self.matching.validate()?;
        self.predict.validate()?;
        self.eval.validate()
    }

    /// Both phases in order.
    pub fn phases(&self) -> [Phase; 2] {
        let bce = LossConfig {
            gamma: 0.0,
            cls_kind: ClsKind::Bce,
            ..self.loss.clone()
        };
        [
            Phase {
                index: 1,
                epochs: self.epochs[0],
                lr: self.lr,
                loss: bce,
            },
            Phase {
                index: 2,
                epochs: self.epochs[1],
                lr: self.lr * self.phase2_lr_factor,
                loss: self.loss.clone(),
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Phase {
    pub index: usize,
    pub epochs: usize,
    pub lr: f64,
    pub loss: LossConfig,
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub reg: f64,
    pub val_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub phases: Vec<PhaseSummary>,
    pub steps: usize,
    pub train_frames: usize,
    pub val_frames: usize,
    pub final_loss: f64,
    pub final_map: Option<f64>,
    pub best_epoch: usize,
    pub best_map: Option<f64>,
    /// Best checkpoint, relative to the run directory.
    pub best_checkpoint: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<StepRecord>,
    pub summary: TrainSummary,
}

/// Loss and gradients of one frame on a training-mode graph.
struct FrameStep {
    breakdown: LossBreakdown,
    graph: Graph,
    grads: crate::network::Gradients,
}

fn frame_step(
    network: &NetworkConfig,
    params: &ParamStore,
    frame: &Prepared,
    loss: &LossConfig,
) -> Result<FrameStep> {
    let mut g = Graph::new();
    let heads = build_forward(&mut g, network, params, frame.input.as_input(), Mode::Train)?;
    let nodes = composite_loss_graph(&mut g, heads.pmap, heads.rmap, &frame.targets, loss)?;
    let breakdown = nodes.breakdown(&g);
    let grads = g.backward(nodes.total, 1.0)?;
    Ok(FrameStep {
        breakdown,
        graph: g,
        grads,
    })
}

/// Mean composite loss over `frames` in training mode, without updating anything.
pub fn batch_loss(
    network: &NetworkConfig,
    params: &ParamStore,
    frames: &[Prepared],
    loss: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for f in frames {
        let mut g = Graph::new();
        let heads = build_forward(&mut g, network, params, f.input.as_input(), Mode::Train)?;
        let nodes = composite_loss_graph(&mut g, heads.pmap, heads.rmap, &f.targets, loss)?;
        total += g.value(nodes.total).data()[0];
    }
    Ok(total / frames.len().max(1) as f64)
}

/// One optimizer step on `batch`: mean gradients, running-statistic update and
/// the parameter update. `step` identifies the batch in numeric errors.
pub fn train_step(
    network: &NetworkConfig,
    params: &mut ParamStore,
    opt: &mut Sgd,
    batch: &[&Prepared],
    loss: &LossConfig,
    lr: f64,
    step: usize,
) -> Result<LossBreakdown> {
    let mut acc = GradAccumulator::new();
    let mut mean = LossBreakdown::default();
    let k = batch.len() as f64;
    let mut stats = Vec::new();
    for f in batch {
        let fs = frame_step(network, params, f, loss)?;
        let b = fs.breakdown;
        if !b.total.is_finite() {
            return Err(Error::Numeric {
                batch: step,
                msg: format!("loss {} on frame {}", b.total, f.id),
            });
        }
        mean.total += b.total / k;
        mean.cls += b.cls / k;
        mean.reg += b.reg / k;
        mean.cls_pos += b.cls_pos / k;
        mean.cls_neg += b.cls_neg / k;
        mean.n_pos += b.n_pos;
        mean.n_neg += b.n_neg;
        acc.add(&fs.grads)?;
        stats.extend_from_slice(fs.graph.batch_stats());
    }
    let norm = opt.step(params, &acc.mean(), lr)?;
    if !norm.is_finite() {
        return Err(Error::Numeric {
            batch: step,
            msg: format!("gradient norm {norm}"),
        });
    }
    params.update_running_stats(&stats, BN_MOMENTUM)?;
    Ok(mean)
}

/// Evaluates `params` on prepared validation frames.
pub fn validate(
    network: &NetworkConfig,
    params: &ParamStore,
    frames: &[Prepared],
    predict: &PredictConfig,
    eval: &EvalConfig,
) -> Result<ApReport> {
    let mut dets = Vec::with_capacity(frames.len());
    let mut labels = Vec::with_capacity(frames.len());
    for f in frames {
        dets.push(predict_encoded(network, params, &f.input, predict)?);
        labels.push(f.labels.clone());
    }
    evaluate(&dets, &labels, eval)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:03}.bin")
}

/// Runs both phases on `train_frames`, validating on `val_frames`, and writes
/// `config.json`, `metrics.csv`, `checkpoints/`, `best.txt` and `summary.json`
/// into `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    train_frames: &[Frame],
    val_frames: &[Frame],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_frames.is_empty() {
        return Err(Error::Domain("training needs at least one frame".into()));
    }
    let net = &cfg.network;
    let prep = |frames: &[Frame]| -> Result<Vec<Prepared>> {
        frames
            .iter()
            .map(|f| prepare_frame(net, f, &cfg.eval.class, cfg.min_points, &cfg.matching, cfg.seed))
            .collect()
    };
    let train_set = prep(train_frames)?;
    let val_set = prep(val_frames)?;

    create_dir(&out_dir.join("checkpoints"))?;
    write_file(&out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    let metrics_path = out_dir.join("metrics.csv");
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    metrics.write_record(METRICS_HEADER)?;

    let mut params = ParamStore::init(net, cfg.seed)?;
    let mut opt = Sgd::new(&cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let total_epochs: usize = cfg.epochs.iter().sum();
    let mut history = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    let mut best: Option<(usize, Option<f64>)> = None;
    let mut final_map = None;
    for phase in cfg.phases() {
        for _ in 0..phase.epochs {
            epoch += 1;
            order.shuffle(&mut rng);
            let first_row = history.len();
            for chunk in order.chunks(cfg.batch_size) {
                step += 1;
                let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
                let b = train_step(net, &mut params, &mut opt, &batch, &phase.loss, phase.lr, step)?;
                history.push(StepRecord {
                    step,
                    epoch,
                    loss: b.total,
                    cls_pos: b.cls_pos,
                    cls_neg: b.cls_neg,
                    reg: b.reg,
                    val_map: None,
                });
            }
            let last = epoch == total_epochs;
            let due = |every: usize| last || (every > 0 && epoch % every == 0);
            let mut improved = false;
            if !val_set.is_empty() && due(cfg.validate_every) {
                let report = validate(net, &params, &val_set, &cfg.predict, &cfg.eval)?;
                let map = report.map_3d;
                if let Some(row) = history.last_mut() {
                    row.val_map = map;
                }
                final_map = map;
                let better = match best {
                    None => true,
                    Some((_, prev)) => map.unwrap_or(f64::NEG_INFINITY) > prev.unwrap_or(f64::NEG_INFINITY),
                };
                if better {
                    best = Some((epoch, map));
                    improved = true;
                }
                log::info!("epoch {epoch}: val 3D mAP {map:?}");
            }
            if val_set.is_empty() && last {
                best = Some((epoch, None));
                improved = true;
            }
            for row in &history[first_row..] {
                metrics.serialize(row)?;
            }
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            if improved || due(cfg.checkpoint_every) {
                params.save(&out_dir.join(checkpoint_name(epoch)), net)?;
            }
            if improved {
                write_file(&out_dir.join("best.txt"), format!("{}\n", checkpoint_name(epoch)).as_bytes())?;
            }
            log::info!(
                "epoch {epoch}/{total_epochs} (phase {}): loss {:.6}",
                phase.index,
                history.last().map_or(f64::NAN, |r| r.loss)
            );
        }
    }
    let (best_epoch, best_map) = best.unwrap_or((epoch, None));
    let summary = TrainSummary {
        phases: cfg
            .phases()
            .iter()
            .map(|p| PhaseSummary {
                phase: p.index,
                epochs: p.epochs,
                lr: p.lr,
                gamma: p.loss.effective_gamma(),
            })
            .collect(),
        steps: step,
        train_frames: train_set.len(),
        val_frames: val_set.len(),
        final_loss: history.last().map_or(f64::NAN, |r| r.loss),
        final_map,
        best_epoch,
        best_map,
        best_checkpoint: checkpoint_name(best_epoch),
    };
    write_file(
        &out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(TrainOutcome {
        params,
        history,
        summary,
    })
}

/// Reads `metrics.csv` back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::parse(path, format!("unexpected header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Path of the best checkpoint recorded in a run directory.
pub fn best_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let marker = run_dir.join("best.txt");
    let text = fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(run_dir.join(text.trim()))
}

#[cfg(test)]
#[path = "run_tests.rs"]
mod tests;
