//! The single JSON run configuration: a detector preset, loss overrides resolved
//! against the family defaults, schedule, data, scene recipe and analysis
//! settings. The schema is closed; unknown keys are reported together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::analysis::{EvalConfig, SWEEP_FRACTIONS};
use crate::data::{SceneRecipe, MIN_BOX_POINTS};
use crate::error::{Error, Result};
use crate::losses::{ClsKind, LossConfig, LossMode, RegKind};
use crate::network::{Family, NetworkConfig};
use crate::train::{Matching, OptimizerConfig, PredictConfig, TrainConfig};

/// Loss keys; everything except `gamma` defaults from the detector family.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossOverrides {
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub mode: Option<LossMode>,
    pub cls_kind: Option<ClsKind>,
    pub reg_kind: Option<RegKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: [usize; 2],
    pub lr: f64,
    pub phase2_lr_factor: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub checkpoint_every: usize,
    pub validate_every: usize,
    pub min_points: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        let t = TrainConfig::new(NetworkConfig::fcn3d_mini(), LossConfig::fcn3d(0.0));
        Schedule {
            epochs: t.epochs,
            lr: t.lr,
            phase2_lr_factor: t.phase2_lr_factor,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            checkpoint_every: t.checkpoint_every,
            validate_every: t.validate_every,
            min_points: MIN_BOX_POINTS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root for train, predict and eval.
    pub root: Option<PathBuf>,
    /// Seed of the train/validation split; the run seed when absent.
    pub split_seed: Option<u64>,
    /// Use at most this many frames of each split.
    pub max_frames: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub gammas: Vec<f64>,
    pub ks: Vec<f64>,
    pub bins: usize,
    /// Sizes and negative-posterior shape of synthetic dumps.
    pub negatives: usize,
    pub positives: usize,
    pub negative_shape: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            gammas: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            ks: SWEEP_FRACTIONS.to_vec(),
            bins: 20,
            negatives: 100_000,
            positives: 1_000,
            negative_shape: 8.0,
        }
    }
}

fn default_detector() -> String {
    "voxelnet-mini".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name, see [`NetworkConfig::PRESETS`].
    #[serde(default = "default_detector")]
    pub detector: String,
    /// Full network description replacing the preset.
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub loss: LossOverrides,
    #[serde(default)]
    pub train: Schedule,
    #[serde(default)]
    pub matching: Matching,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub scene: SceneRecipe,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// Subtrees checked by their own deserializers rather than the key walk.
const OPAQUE: [&str; 2] = ["network", "train.optimizer"];

fn template() -> Value {
    serde_json::to_value(RunConfig::from_value(serde_json::json!({})).expect("defaults"))
        .expect("serializable")
}

fn unknown_keys(value: &Value, template: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(v), Value::Object(t)) = (value, template) else {
        return;
    };
    for (k, child) in v {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match t.get(k) {
            None => out.push(path),
            Some(tc) if !OPAQUE.contains(&path.as_str()) => unknown_keys(child, tc, &path, out),
            Some(_) => {}
        }
    }
}

/// Parses a `--set` value: JSON when it parses, a string otherwise.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `key.path=value` overrides to a JSON document.
pub fn apply_overrides(doc: &mut Value, sets: &[String]) -> Result<()> {
    for s in sets {
        let Some((key, raw)) = s.split_once('=') else {
            return Err(Error::Config {
                msg: format!("override {s:?} is not key=value"),
                keys: vec![s.clone()],
            });
        };
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config {
                msg: format!("override key {key:?} has an empty segment"),
                keys: vec![key.to_string()],
            });
        }
        let mut node = &mut *doc;
        for (i, p) in parts.iter().enumerate() {
            if !node.is_object() {
                if node.is_null() {
                    *node = Value::Object(Map::new());
                } else {
                    return Err(Error::Config {
                        msg: format!("override {key:?} descends into a non-table value"),
                        keys: vec![parts[..i].join(".")],
                    });
                }
            }
            let map = node.as_object_mut().expect("object");
            if i + 1 == parts.len() {
                map.insert(p.to_string(), parse_scalar(raw));
                break;
            }
            node = map.entry(p.to_string()).or_insert(Value::Null);
        }
    }
    Ok(())
}

impl RunConfig {
    /// Validates the key set, then deserializes.
    pub fn from_value(value: Value) -> Result<Self> {
        if !value.is_object() {
            return Err(Error::Config {
                msg: "a run configuration is a JSON object".into(),
                keys: vec![],
            });
        }
        // the template is built from an empty object, which needs no key check
        if value.as_object().is_some_and(|m| !m.is_empty()) {
            let mut unknown = Vec::new();
            unknown_keys(&value, &template(), "", &mut unknown);
            if !unknown.is_empty() {
                return Err(Error::Config {
                    msg: "unknown configuration keys".into(),
                    keys: unknown,
                });
            }
        }
        serde_json::from_value(value).map_err(|e| Error::Config {
            msg: e.to_string(),
            keys: vec![],
        })
    }

    /// Reads `path` (when given), applies overrides and validates.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config {
                    msg: format!("{}: {e}", p.display()),
                    keys: vec![],
                })?
            }
            None => Value::Object(Map::new()),
        };
        apply_overrides(&mut doc, sets)?;
        Self::from_value(doc)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let net = match &self.network {
            Some(n) => n.clone(),
            None => NetworkConfig::preset(&self.detector).map_err(|e| match e {
                Error::Config { msg, .. } => Error::Config {
                    msg,
                    keys: vec!["detector".into()],
                },
                other => other,
            })?,
        };
        net.validate()?;
        Ok(net)
    }

    /// Loss with family defaults filled in; `loss.gamma` is mandatory.
    pub fn loss(&self, family: Family) -> Result<LossConfig> {
        let Some(gamma) = self.loss.gamma else {
            return Err(Error::Config {
                msg: "the focal exponent must be given".into(),
                keys: vec!["loss.gamma".into()],
            });
        };
        let mut l = match family {
            Family::Fcn3d => LossConfig::fcn3d(gamma),
            Family::Voxelnet => LossConfig::voxelnet(gamma),
        };
        let o = &self.loss;
        l.alpha = o.alpha.unwrap_or(l.alpha);
        l.beta = o.beta.unwrap_or(l.beta);
        l.eta = o.eta.unwrap_or(l.eta);
        l.lambda = o.lambda.unwrap_or(l.lambda);
        l.mode = o.mode.unwrap_or(l.mode);
        l.cls_kind = o.cls_kind.unwrap_or(l.cls_kind);
        l.reg_kind = o.reg_kind.unwrap_or(l.reg_kind);
        let mut bad = Vec::new();
        if !(gamma.is_finite() && gamma >= 0.0) {
            bad.push("loss.gamma");
        }
        for (key, v) in [
            ("loss.alpha", l.alpha),
            ("loss.beta", l.beta),
            ("loss.eta", l.eta),
            ("loss.lambda", l.lambda),
        ] {
            if !(v.is_finite() && v > 0.0) {
                bad.push(key);
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config {
                msg: "loss weights must be positive and gamma nonnegative".into(),
                keys: bad.into_iter().map(str::to_string).collect(),
            });
        }
        Ok(l)
    }

    /// The fully resolved training configuration.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let network = self.network()?;
        let loss = self.loss(network.family())?;
        let s = &self.train;
        let cfg = TrainConfig {
            network,
            loss,
            epochs: s.epochs,
            lr: s.lr,
            phase2_lr_factor: s.phase2_lr_factor,
            batch_size: s.batch_size,
            optimizer: s.optimizer.clone(),
            seed: self.seed,
            checkpoint_every: s.checkpoint_every,
            validate_every: s.validate_every,
            min_points: s.min_points,
            matching: self.matching,
            predict: self.predict,
            eval: self.eval.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data.root.as_deref().ok_or_else(|| Error::Config {
            msg: "no dataset root given".into(),
            keys: vec!["data.root".into()],
        })
    }
}
