//! Named parameter storage, seeded initialization and binary checkpoints.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::BatchStat;
use super::config::{NetworkConfig, ParamRole};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Checkpoint container format understood by this build.
pub const CHECKPOINT_FORMAT: u32 = 1;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    role: ParamRole,
    value: Tensor,
}

/// All tensors of one network: trainable weights plus batch-norm running
/// statistics, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the `.bin` file.
    pub offset: usize,
    pub trainable: bool,
}

/// JSON side-car of a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: u32,
    pub toolkit_version: String,
    pub network: NetworkConfig,
    pub tensors: Vec<TensorRecord>,
}

/// Manifest path belonging to a checkpoint `.bin` file.
pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

impl ParamStore {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, unit BN scale,
    /// drawn in declaration order from a generator seeded with `seed`.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for d in config.param_decls()? {
            let n: usize = d.shape.iter().product();
            let data = match d.role {
                ParamRole::Weight { fan_in } => {
                    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => vec![0.0; n],
                ParamRole::Gamma | ParamRole::RunningVar => vec![1.0; n],
            };
            entries.push(Entry {
                name: d.name,
                role: d.role,
                value: Tensor::new(d.shape, data)?,
            });
        }
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: Vec<Entry>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        ParamStore { entries, index }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    /// Lookup that reports the missing name as a structural error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Structural(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Trainable tensors in declaration order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|e| e.role.trainable())
            .map(|e| (e.name.as_str(), &e.value))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Sets every tensor of the named layer's weight and bias to zero.
    pub fn zero_layer(&mut self, layer: &str) -> Result<()> {
        let mut found = false;
        for suffix in ["weight", "bias"] {
            if let Some(t) = self.get_mut(&format!("{layer}.{suffix}")) {
                t.data_mut().fill(0.0);
                found = true;
            }
        }
        if found {
            Ok(())
        } else {
            Err(Error::Structural(format!("no parameters for layer {layer}")))
        }
    }

    /// Folds training-mode batch statistics into the running estimates:
    /// `running = momentum * running + (1 - momentum) * batch`. A layer seen
    /// several times in one pass contributes its count-weighted mean statistics.
    pub fn update_running_stats(&mut self, stats: &[BatchStat], momentum: f64) -> Result<()> {
        let mut merged: Vec<(&str, Vec<f64>, Vec<f64>, usize)> = Vec::new();
        for s in stats {
            match merged.iter_mut().find(|m| m.0 == s.name) {
                Some(m) => {
                    for c in 0..m.1.len() {
                        m.1[c] += s.mean[c] * s.count as f64;
                        m.2[c] += s.var[c] * s.count as f64;
                    }
                    m.3 += s.count;
                }
                None => merged.push((
                    &s.name,
                    s.mean.iter().map(|v| v * s.count as f64).collect(),
                    s.var.iter().map(|v| v * s.count as f64).collect(),
                    s.count,
                )),
            }
        }
        for (name, mean, var, count) in merged {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let key = format!("{name}.{suffix}");
                let t = self
                    .get_mut(&key)
                    .ok_or_else(|| Error::Structural(format!("missing buffer {key}")))?;
                if t.len() != batch.len() {
                    return Err(Error::Structural(format!(
                        "buffer {key} has {} channels, batch statistics {}",
                        t.len(),
                        batch.len()
                    )));
                }
                for (r, b) in t.data_mut().iter_mut().zip(&batch) {
                    *r = momentum * *r + (1.0 - momentum) * b / count as f64;
                }
            }
        }
        Ok(())
    }

    /// Writes `bin` (little-endian `f64` arrays back to back) and its manifest.
    pub fn save(&self, bin: &Path, network: &NetworkConfig) -> Result<()> {
        let mut bytes = Vec::new();
        let mut tensors = Vec::new();
        for e in &self.entries {
            tensors.push(TensorRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                offset: bytes.len(),
                trainable: e.role.trainable(),
            });
            for v in e.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT,
            toolkit_version: crate::VERSION.to_string(),
            network: network.clone(),
            tensors,
        };
        fs::write(bin, &bytes).map_err(|e| Error::io(bin, e))?;
        let mpath = manifest_path(bin);
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&mpath, e))
    }

    /// Reads a checkpoint, refusing other container formats and tensors that do
    /// not match the recorded network.
    pub fn load(bin: &Path) -> Result<(NetworkConfig, ParamStore)> {
        let mpath = manifest_path(bin);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, e.to_string()))?;
        let found = raw.get("format").and_then(|v| v.as_u64());
        if found != Some(CHECKPOINT_FORMAT as u64) {
            return Err(Error::Version {
                expected: format!("checkpoint format {CHECKPOINT_FORMAT}"),
                found: match found {
                    Some(f) => format!("checkpoint format {f}"),
                    None => "no checkpoint format field".into(),
                },
            });
        }
        let manifest: CheckpointManifest =
            serde_json::from_value(raw).map_err(|e| Error::parse(&mpath, e.to_string()))?;
        let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
        let decls = manifest.network.param_decls()?;
        if decls.len() != manifest.tensors.len() {
            return Err(Error::parse(
                &mpath,
                format!(
                    "{} tensors recorded, network declares {}",
                    manifest.tensors.len(),
                    decls.len()
                ),
            ));
        }
        let mut entries = Vec::new();
        for (d, rec) in decls.into_iter().zip(&manifest.tensors) {
            if d.name != rec.name || d.shape != rec.shape {
                return Err(Error::parse(
                    &mpath,
                    format!(
                        "tensor {} {:?} does not match declared {} {:?}",
                        rec.name, rec.shape, d.name, d.shape
                    ),
                ));
            }
            let n: usize = rec.shape.iter().product();
            let end = rec.offset + 8 * n;
            let slice = bytes.get(rec.offset..end).ok_or_else(|| {
                Error::parse(
                    bin,
                    format!("tensor {} needs bytes {}..{end}, file has {}", rec.name, rec.offset, bytes.len()),
                )
            })?;
            let data = slice
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of eight bytes")))
                .collect();
            entries.push(Entry {
                name: d.name,
                role: d.role,
                value: Tensor::new(rec.shape.clone(), data)?,
            });
        }
        Ok((manifest.network, Self::from_entries(entries)))
    }
}
