//! Forward graphs of both detector families.

use super::autodiff::{Graph, NodeId};
use super::config::{Architecture, LayerSpec, NetworkConfig};
use super::params::{ParamStore, BN_EPS};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::voxel::{DenseOccupancy, SparseVoxelSet, POINT_FEATURES};

/// Network input; the variant must match the detector family.
#[derive(Clone, Copy, Debug)]
pub enum NetInput<'a> {
    Dense(&'a DenseOccupancy),
    Sparse(&'a SparseVoxelSet),
}

/// Batch norm behaviour: batch statistics while training, running estimates
/// otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output nodes: objectness logits `[A, D, H, W]` and regression `[A * L, D, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub pmap: NodeId,
    pub rmap: NodeId,
}

/// Point-to-voxel membership used by VFE layers.
#[derive(Clone, Copy, Debug)]
pub struct Segments<'a> {
    pub ids: &'a [usize],
    pub count: usize,
}

fn name_layer(layer: &LayerSpec) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Structural(msg) if !msg.starts_with("layer ") => {
            Error::Structural(format!("layer {}: {msg}", layer.name()))
        }
        other => other,
    }
}

fn param(g: &mut Graph, params: &ParamStore, name: &str) -> Result<NodeId> {
    Ok(g.param(name, params.require(name)?))
}

/// Fetches a weight whose output-channel extent (at `axis`) must equal `filters`.
fn weight(
    g: &mut Graph,
    params: &ParamStore,
    name: &str,
    axis: usize,
    filters: usize,
) -> Result<NodeId> {
    let t = params.require(name)?;
    if t.shape().get(axis) != Some(&filters) {
        return Err(Error::Structural(format!(
            "weight {name} {:?} does not provide {filters} filters",
            t.shape()
        )));
    }
    Ok(g.param(name, t))
}

fn batch_norm(
    g: &mut Graph,
    params: &ParamStore,
    name: &str,
    x: NodeId,
    mode: Mode,
) -> Result<NodeId> {
    let gamma = param(g, params, &format!("{name}.gamma"))?;
    let beta = param(g, params, &format!("{name}.beta"))?;
    // channels lead volumes and trail point rows
    let axis = if g.shape(x).len() == 2 { 1 } else { 0 };
    match mode {
        Mode::Train => g.batch_norm(x, gamma, beta, axis, BN_EPS, None, name),
        Mode::Eval => {
            let rm = params.require(&format!("{name}.running_mean"))?.data();
            let rv = params.require(&format!("{name}.running_var"))?.data();
            g.batch_norm(x, gamma, beta, axis, BN_EPS, Some((rm, rv)), name)
        }
    }
}

/// Applies one layer. VFE layers need the point-to-voxel `segments`.
pub fn apply_layer(
    g: &mut Graph,
    params: &ParamStore,
    layer: &LayerSpec,
    x: NodeId,
    mode: Mode,
    segments: Option<Segments>,
) -> Result<NodeId> {
    layer_op(g, params, layer, x, mode, segments).map_err(name_layer(layer))
}

fn layer_op(
    g: &mut Graph,
    params: &ParamStore,
    layer: &LayerSpec,
    x: NodeId,
    mode: Mode,
    segments: Option<Segments>,
) -> Result<NodeId> {
    let n = layer.name();
    match layer {
        LayerSpec::Conv3d { filters, .. } | LayerSpec::Conv2d { filters, .. } => {
            let w = weight(g, params, &format!("{n}.weight"), 0, *filters)?;
            let b = param(g, params, &format!("{n}.bias"))?;
            let geom = layer.geom().expect("conv layers have a geometry");
            g.conv(x, w, Some(b), geom)
        }
        LayerSpec::Deconv2d { stride, filters, .. } => {
            let w = weight(g, params, &format!("{n}.weight"), 1, *filters)?;
            let b = param(g, params, &format!("{n}.bias"))?;
            let geom = layer.geom().expect("deconv has a geometry");
            let s = g.shape(x).to_vec();
            if s.len() != 4 {
                return Err(Error::Structural(format!(
                    "layer {n}: expects a [C, 1, H, W] map, got {s:?}"
                )));
            }
            g.deconv(x, w, Some(b), geom, [s[1], s[2] * stride[0], s[3] * stride[1]])
        }
        LayerSpec::Fc { filters, .. } => {
            let w = weight(g, params, &format!("{n}.weight"), 0, *filters)?;
            let b = param(g, params, &format!("{n}.bias"))?;
            g.linear(x, w, Some(b))
        }
        LayerSpec::Relu => g.relu(x),
        LayerSpec::Sigmoid => g.sigmoid(x),
        LayerSpec::BatchNorm { name } => batch_norm(g, params, name, x, mode),
        LayerSpec::Vfe { filters, .. } => {
            let seg = segments.ok_or_else(|| {
                Error::Structural(format!("layer {n}: vfe outside the feature net"))
            })?;
            let w = weight(g, params, &format!("{n}.fc.weight"), 0, filters / 2)?;
            let b = param(g, params, &format!("{n}.fc.bias"))?;
            let h = g.linear(x, w, Some(b))?;
            let h = batch_norm(g, params, &format!("{n}.bn"), h, mode)?;
            let h = g.relu(h)?;
            let agg = g.segment_max(h, seg.ids, seg.count)?;
            let back = g.gather_rows(agg, seg.ids)?;
            g.concat(&[h, back], 1)
        }
    }
}

/// Applies `layers` in order.
pub fn apply_chain(
    g: &mut Graph,
    params: &ParamStore,
    layers: &[LayerSpec],
    mut x: NodeId,
    mode: Mode,
    segments: Option<Segments>,
) -> Result<NodeId> {
    for l in layers {
        x = apply_layer(g, params, l, x, mode, segments)?;
    }
    Ok(x)
}

/// Records the forward pass of `config` on `input` into `g`.
pub fn build_forward(
    g: &mut Graph,
    config: &NetworkConfig,
    params: &ParamStore,
    input: NetInput,
    mode: Mode,
) -> Result<Heads> {
    match (&config.arch, input) {
        (
            Architecture::Fcn3d {
                body,
                p_head,
                r_head,
            },
            NetInput::Dense(occ),
        ) => {
            check_grid(config, occ.spec())?;
            let x = g.input(occ.to_tensor());
            let f = apply_chain(g, params, body, x, mode, None)?;
            let pmap = apply_layer(g, params, p_head, f, mode, None)?;
            let rmap = apply_layer(g, params, r_head, f, mode, None)?;
            Ok(Heads { pmap, rmap })
        }
        (
            Architecture::Voxelnet {
                feature_net,
                middle,
                rpn,
                prob_head,
                reg_head,
            },
            NetInput::Sparse(set),
        ) => {
            check_grid(config, set.spec())?;
            let dims = config.grid.dims;
            let channels = feature_net
                .iter()
                .rev()
                .find_map(|l| l.filters())
                .unwrap_or(POINT_FEATURES);
            let x = if set.is_empty() {
                let mut shape = vec![channels];
                shape.extend(dims);
                g.input(Tensor::zeros(shape))
            } else {
                let mut rows = Vec::new();
                let mut ids = Vec::new();
                let mut cells = Vec::with_capacity(set.len());
                for (v, vox) in set.voxels().iter().enumerate() {
                    for r in &vox.rows {
                        rows.extend_from_slice(r);
                        ids.push(v);
                    }
                    cells.push(set.spec().linear(vox.index));
                }
                let points = g.input(Tensor::new(vec![ids.len(), POINT_FEATURES], rows)?);
                let seg = Segments {
                    ids: &ids,
                    count: set.len(),
                };
                let f = apply_chain(g, params, feature_net, points, mode, Some(seg))?;
                let pooled = g.segment_max(f, &ids, set.len())?;
                g.scatter_rows(pooled, &cells, &dims)?
            };
            let m = apply_chain(g, params, middle, x, mode, None)?;
            let s = g.shape(m).to_vec();
            let mut x = g.reshape(m, vec![s[0] * s[1], 1, s[2], s[3]])?;
            let mut branches = Vec::with_capacity(rpn.len());
            for block in rpn {
                x = apply_chain(g, params, &block.layers, x, mode, None)?;
                branches.push(apply_chain(g, params, &block.upsample, x, mode, None)?);
            }
            let joined = g.concat(&branches, 0).map_err(|e| match e {
                Error::Structural(msg) => {
                    Error::Structural(format!("layer rpn concat: {msg}"))
                }
                other => other,
            })?;
            let pmap = apply_layer(g, params, prob_head, joined, mode, None)?;
            let rmap = apply_layer(g, params, reg_head, joined, mode, None)?;
            Ok(Heads { pmap, rmap })
        }
        (Architecture::Fcn3d { .. }, NetInput::Sparse(_)) => Err(Error::Structural(
            "the dense detector expects a dense occupancy grid".into(),
        )),
        (Architecture::Voxelnet { .. }, NetInput::Dense(_)) => Err(Error::Structural(
            "the voxel-feature detector expects a sparse voxel set".into(),
        )),
    }
}

fn check_grid(config: &NetworkConfig, grid: &crate::voxel::VoxelGridSpec) -> Result<()> {
    if *grid != config.grid {
        return Err(Error::Structural(format!(
            "input grid {grid:?} does not match network grid {:?}",
            config.grid
        )));
    }
    Ok(())
}

/// Evaluation-mode forward pass returning `(pmap_logits, rmap)`.
pub fn forward(
    config: &NetworkConfig,
    params: &ParamStore,
    input: NetInput,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::inference();
    let h = build_forward(&mut g, config, params, input, Mode::Eval)?;
    Ok((g.value(h.pmap).clone(), g.value(h.rmap).clone()))
}

/// One VFE layer on a single voxel in evaluation mode, max-pooled over its
/// rows: the voxel feature vector of length `filters`.
pub fn vfe_layer<R: AsRef<[f64]>>(
    rows: &[R],
    layer: &LayerSpec,
    params: &ParamStore,
) -> Result<Vec<f64>> {
    if !matches!(layer, LayerSpec::Vfe { .. }) {
        return Err(Error::Structural(format!(
            "layer {}: expected a vfe layer, got {}",
            layer.name(),
            layer.kind()
        )));
    }
    let Some(first) = rows.first() else {
        return Err(Error::Domain(format!(
            "layer {}: empty voxel has no features",
            layer.name()
        )));
    };
    let width = first.as_ref().len();
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        let r = r.as_ref();
        if r.len() != width {
            return Err(Error::Structural(format!(
                "layer {}: ragged rows of width {width} and {}",
                layer.name(),
                r.len()
            )));
        }
        data.extend_from_slice(r);
    }
    let ids = vec![0; rows.len()];
    let seg = Segments { ids: &ids, count: 1 };
    let mut g = Graph::inference();
    let x = g.input(Tensor::new(vec![rows.len(), width], data)?);
    let y = apply_layer(&mut g, params, layer, x, Mode::Eval, Some(seg))?;
    let pooled = g.segment_max(y, &ids, 1)?;
    Ok(g.value(pooled).data().to_vec())
}
