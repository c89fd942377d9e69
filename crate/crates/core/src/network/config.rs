//! Layer lists for the dense 3D-FCN and the VoxelNet detector, presets at desk
//! and full scale, and static shape propagation with FLOP counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::targets::{AnchorGrid, MapLayout};
use crate::voxel::{VoxelGridSpec, DEFAULT_MAX_POINTS, POINT_FEATURES};

use super::kernels::ConvGeom;

/// Point count assumed when costing the per-point FeatureNet layers.
pub const NOMINAL_POINTS: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv3d {
        name: String,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        filters: usize,
    },
    /// Planar convolution over `[C, 1, H, W]` maps.
    Conv2d {
        name: String,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        filters: usize,
    },
    /// Transposed planar convolution; the output is the input scaled by `stride`.
    Deconv2d {
        name: String,
        kernel: [usize; 2],
        stride: [usize; 2],
        filters: usize,
    },
    /// Row-wise affine map on `[N, C]` point features.
    Fc { name: String, filters: usize },
    Relu,
    #[serde(rename = "batchnorm")]
    BatchNorm { name: String },
    Sigmoid,
    /// Voxel feature encoding: point-wise fc, BN and ReLU to `filters / 2`
    /// channels, concatenated with the voxel-wise max of the same.
    Vfe { name: String, filters: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Deconv2d { .. } => "deconv2d",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Vfe { .. } => "vfe",
        }
    }

    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv3d { name, .. }
            | LayerSpec::Conv2d { name, .. }
            | LayerSpec::Deconv2d { name, .. }
            | LayerSpec::Fc { name, .. }
            | LayerSpec::BatchNorm { name }
            | LayerSpec::Vfe { name, .. } => name,
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }

    pub fn filters(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv3d { filters, .. }
            | LayerSpec::Conv2d { filters, .. }
            | LayerSpec::Deconv2d { filters, .. }
            | LayerSpec::Fc { filters, .. }
            | LayerSpec::Vfe { filters, .. } => Some(*filters),
            _ => None,
        }
    }

    /// Convolution geometry on `[D, H, W]` volumes, for the three conv kinds.
    pub fn geom(&self) -> Option<ConvGeom> {
        match self {
            LayerSpec::Conv3d {
                kernel,
                stride,
                padding,
                ..
            } => Some(ConvGeom {
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            }),
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => Some(ConvGeom {
                kernel: [1, kernel[0], kernel[1]],
                stride: [1, stride[0], stride[1]],
                padding: [0, padding[0], padding[1]],
            }),
            LayerSpec::Deconv2d { kernel, stride, .. } => Some(ConvGeom {
                kernel: [1, kernel[0], kernel[1]],
                stride: [1, stride[0], stride[1]],
                padding: [
                    0,
                    kernel[0].saturating_sub(stride[0]) / 2,
                    kernel[1].saturating_sub(stride[1]) / 2,
                ],
            }),
            _ => None,
        }
    }

    fn check(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Structural(format!("layer {}: {msg}", self.name())));
        if let Some(f) = self.filters() {
            if f == 0 {
                return err("filters must be at least 1".into());
            }
        }
        if let Some(g) = self.geom() {
            if g.kernel.contains(&0) || g.stride.contains(&0) {
                return err(format!("kernel {:?} and stride {:?} need entries >= 1", g.kernel, g.stride));
            }
        }
        if let LayerSpec::Deconv2d { kernel, stride, .. } = self {
            for a in 0..2 {
                if kernel[a] < stride[a] || (kernel[a] - stride[a]) % 2 != 0 {
                    return err(format!(
                        "deconv kernel {kernel:?} cannot upsample exactly by stride {stride:?}"
                    ));
                }
            }
        }
        if let LayerSpec::Vfe { filters, .. } = self {
            if filters % 2 != 0 {
                return err(format!("vfe filters must be even, got {filters}"));
            }
        }
        Ok(())
    }
}

/// One RPN stage: a conv stack followed by an upsampling branch whose output
/// joins the other stages' branches by channel concatenation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpnBlock {
    pub layers: Vec<LayerSpec>,
    pub upsample: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Dense 3D convolutions over a binary occupancy grid.
    Fcn3d {
        body: Vec<LayerSpec>,
        p_head: LayerSpec,
        r_head: LayerSpec,
    },
    /// FeatureNet on sparse voxels, 3D middle layers, then a BEV region
    /// proposal network.
    Voxelnet {
        feature_net: Vec<LayerSpec>,
        middle: Vec<LayerSpec>,
        rpn: Vec<RpnBlock>,
        prob_head: LayerSpec,
        reg_head: LayerSpec,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    /// Anchor `(l, w, h)`.
    pub size: [f64; 3],
    /// Anchor center height (BEV detector only).
    #[serde(default)]
    pub z: f64,
    /// One anchor per yaw at every BEV cell (BEV detector only).
    #[serde(default = "default_yaws")]
    pub yaws: Vec<f64>,
}

fn default_yaws() -> Vec<f64> {
    vec![0.0, std::f64::consts::FRAC_PI_2]
}

fn default_max_points() -> usize {
    DEFAULT_MAX_POINTS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub name: String,
    pub grid: VoxelGridSpec,
    pub anchor: AnchorSpec,
    /// Per-voxel point cap of the sparse encoding.
    #[serde(default = "default_max_points")]
    pub max_points: usize,
    pub arch: Architecture,
}

/// Output of one layer after static shape propagation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub block: String,
    pub name: String,
    pub kind: String,
    pub output: Vec<usize>,
    pub flops: u64,
}

/// Role of a stored tensor; decides its initial value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

fn conv3d(name: &str, k: [usize; 3], s: [usize; 3], p: [usize; 3], f: usize) -> LayerSpec {
    LayerSpec::Conv3d {
        name: name.into(),
        kernel: k,
        stride: s,
        padding: p,
        filters: f,
    }
}

fn conv2d(name: &str, k: usize, s: usize, f: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        name: name.into(),
        kernel: [k, k],
        stride: [s, s],
        padding: [k / 2, k / 2],
        filters: f,
    }
}

fn bn(name: &str) -> LayerSpec {
    LayerSpec::BatchNorm {
        name: format!("{name}.bn"),
    }
}

/// `conv → ReLU → BN` as listed for the dense body.
fn fcn_body_layer(name: &str, k: usize, s: usize, f: usize) -> Vec<LayerSpec> {
    vec![conv3d(name, [k; 3], [s; 3], [k / 2; 3], f), LayerSpec::Relu, bn(name)]
}

/// `conv → BN → ReLU`.
fn conv_bn_relu(layer: LayerSpec) -> Vec<LayerSpec> {
    let name = layer.name().to_string();
    vec![layer, bn(&name), LayerSpec::Relu]
}

fn fcn3d_arch(channels: [usize; 4]) -> Architecture {
    let mut body = Vec::new();
    body.extend(fcn_body_layer("conv3d_1", 5, 2, channels[0]));
    body.extend(fcn_body_layer("conv3d_2", 5, 2, channels[1]));
    body.extend(fcn_body_layer("conv3d_3", 3, 2, channels[2]));
    body.extend(fcn_body_layer("conv3d_4", 3, 1, channels[3]));
    Architecture::Fcn3d {
        body,
        p_head: conv3d("conv3d_obj", [3; 3], [1; 3], [1; 3], 1),
        r_head: conv3d("conv3d_cor", [3; 3], [1; 3], [1; 3], 24),
    }
}

struct VoxelNetWidths {
    vfe: [usize; 2],
    fc: usize,
    middle: usize,
    middle_kernel_xy: usize,
    rpn: [usize; 3],
    up: usize,
    repeats: [usize; 3],
}

fn voxelnet_arch(w: &VoxelNetWidths, yaws: usize) -> Architecture {
    let mut feature_net = vec![
        LayerSpec::Vfe {
            name: "vfe_1".into(),
            filters: w.vfe[0],
        },
        LayerSpec::Vfe {
            name: "vfe_2".into(),
            filters: w.vfe[1],
        },
    ];
    feature_net.extend(conv_bn_relu(LayerSpec::Fc {
        name: "fc".into(),
        filters: w.fc,
    }));
    let k = w.middle_kernel_xy;
    let p = k / 2;
    let mut middle = Vec::new();
    for (i, (s, pd)) in [(2, 1), (1, 0), (2, 1)].into_iter().enumerate() {
        middle.extend(conv_bn_relu(conv3d(
            &format!("middle_{}", i + 1),
            [3, k, k],
            [s, 1, 1],
            [pd, p, p],
            w.middle,
        )));
    }
    let mut rpn = Vec::new();
    for (b, (up_kernel, up_stride)) in [(3, 1), (2, 2), (4, 4)].into_iter().enumerate() {
        let mut layers = conv_bn_relu(conv2d(&format!("rpn{}_conv1", b + 1), 3, 2, w.rpn[b]));
        for r in 0..w.repeats[b] {
            layers.extend(conv_bn_relu(conv2d(
                &format!("rpn{}_conv{}", b + 1, r + 2),
                3,
                1,
                w.rpn[b],
            )));
        }
        let upsample = conv_bn_relu(LayerSpec::Deconv2d {
            name: format!("rpn{}_deconv", b + 1),
            kernel: [up_kernel; 2],
            stride: [up_stride; 2],
            filters: w.up,
        });
        rpn.push(RpnBlock { layers, upsample });
    }
    let head = |name: &str, f| LayerSpec::Conv2d {
        name: name.into(),
        kernel: [1, 1],
        stride: [1, 1],
        padding: [0, 0],
        filters: f,
    };
    Architecture::Voxelnet {
        feature_net,
        middle,
        rpn,
        prob_head: head("prob_map", yaws),
        reg_head: head("reg_map", 7 * yaws),
    }
}

/// Which detector a configuration describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Fcn3d,
    Voxelnet,
}

impl NetworkConfig {
    pub const PRESETS: [&'static str; 4] = ["3dfcn-mini", "3dfcn-full", "voxelnet-mini", "voxelnet-full"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "3dfcn-mini" => Ok(Self::fcn3d_mini()),
            "3dfcn-full" => Ok(Self::fcn3d_full()),
            "voxelnet-mini" => Ok(Self::voxelnet_mini()),
            "voxelnet-full" => Ok(Self::voxelnet_full()),
            other => Err(Error::Config {
                msg: format!(
                    "unknown network preset {other:?}; expected one of {:?}",
                    Self::PRESETS
                ),
                keys: vec!["network".into()],
            }),
        }
    }

    /// Desk-scale dense detector: a `(16, 32, 32)` grid, channels 8/16/24/24.
    pub fn fcn3d_mini() -> Self {
        NetworkConfig {
            name: "3dfcn-mini".into(),
            grid: VoxelGridSpec {
                origin: [0.0, -6.4, -2.4],
                voxel_size: [0.25, 0.4, 0.4],
                dims: [16, 32, 32],
            },
            anchor: AnchorSpec {
                size: [3.9, 1.6, 1.56],
                z: 0.0,
                yaws: vec![0.0],
            },
            max_points: DEFAULT_MAX_POINTS,
            arch: fcn3d_arch([8, 16, 24, 24]),
        }
    }

    pub fn fcn3d_full() -> Self {
        NetworkConfig {
            name: "3dfcn-full".into(),
            grid: VoxelGridSpec::car_3dfcn(),
            anchor: AnchorSpec {
                size: [3.9, 1.6, 1.56],
                z: 0.0,
                yaws: vec![0.0],
            },
            max_points: DEFAULT_MAX_POINTS,
            arch: fcn3d_arch([32, 64, 96, 96]),
        }
    }

    /// Desk-scale voxel detector on a `10 x 32 x 32` grid with `[3, 1, 1]`
    /// middle kernels and one repeat per RPN stage.
    pub fn voxelnet_mini() -> Self {
        NetworkConfig {
            name: "voxelnet-mini".into(),
            grid: VoxelGridSpec {
                origin: [0.0, -12.8, -3.0],
                voxel_size: [0.4, 0.8, 0.8],
                dims: [10, 32, 32],
            },
            anchor: AnchorSpec {
                size: [3.9, 1.6, 1.56],
                z: -1.0,
                yaws: default_yaws(),
            },
            max_points: DEFAULT_MAX_POINTS,
            arch: voxelnet_arch(
                &VoxelNetWidths {
                    vfe: [8, 32],
                    fc: 32,
                    middle: 16,
                    middle_kernel_xy: 1,
                    rpn: [32, 32, 64],
                    up: 64,
                    repeats: [1, 1, 1],
                },
                2,
            ),
        }
    }

    pub fn voxelnet_full() -> Self {
        NetworkConfig {
            name: "voxelnet-full".into(),
            grid: VoxelGridSpec::car_voxelnet(),
            anchor: AnchorSpec {
                size: [3.9, 1.6, 1.56],
                z: -1.0,
                yaws: default_yaws(),
            },
            max_points: DEFAULT_MAX_POINTS,
            arch: voxelnet_arch(
                &VoxelNetWidths {
                    vfe: [32, 128],
                    fc: 128,
                    middle: 64,
                    middle_kernel_xy: 3,
                    rpn: [128, 128, 256],
                    up: 256,
                    repeats: [3, 5, 5],
                },
                2,
            ),
        }
    }

    pub fn family(&self) -> Family {
        match self.arch {
            Architecture::Fcn3d { .. } => Family::Fcn3d,
            Architecture::Voxelnet { .. } => Family::Voxelnet,
        }
    }

    /// Every layer in forward order, tagged with its block name.
    pub fn layers(&self) -> Vec<(&'static str, &LayerSpec)> {
        let mut out = Vec::new();
        match &self.arch {
            Architecture::Fcn3d {
                body,
                p_head,
                r_head,
            } => {
                out.extend(body.iter().map(|l| ("body", l)));
                out.push(("p_head", p_head));
                out.push(("r_head", r_head));
            }
            Architecture::Voxelnet {
                feature_net,
                middle,
                rpn,
                prob_head,
                reg_head,
            } => {
                out.extend(feature_net.iter().map(|l| ("feature_net", l)));
                out.extend(middle.iter().map(|l| ("middle", l)));
                for b in rpn {
                    out.extend(b.layers.iter().map(|l| ("rpn", l)));
                    out.extend(b.upsample.iter().map(|l| ("rpn", l)));
                }
                out.push(("prob_head", prob_head));
                out.push(("reg_head", reg_head));
            }
        }
        out
    }

    /// Propagates shapes through the whole network, checking that they compose
    /// and that the heads match the target layout.
    pub fn shape_plan(&self) -> Result<Vec<LayerCost>> {
        self.grid.validate()?;
        for (_, l) in self.layers() {
            l.check()?;
        }
        let mut names = std::collections::BTreeSet::new();
        for (_, l) in self.layers() {
            if (l.filters().is_some() || matches!(l, LayerSpec::BatchNorm { .. }))
                && !names.insert(l.name())
            {
                return Err(Error::Structural(format!("duplicate layer name {}", l.name())));
            }
        }
        if self.anchor.yaws.is_empty() {
            return Err(Error::Structural("anchor spec needs at least one yaw".into()));
        }
        let mut plan = Vec::new();
        let dims = self.grid.dims;
        match &self.arch {
            Architecture::Fcn3d {
                body,
                p_head,
                r_head,
            } => {
                let mut shape = vec![1, dims[0], dims[1], dims[2]];
                for l in body {
                    shape = propagate("body", l, shape, &mut plan)?;
                }
                expect_filters(p_head, 1)?;
                expect_filters(r_head, 24)?;
                let p = propagate("p_head", p_head, shape.clone(), &mut plan)?;
                let r = propagate("r_head", r_head, shape, &mut plan)?;
                if p[1..] != r[1..] {
                    return Err(Error::Structural(format!(
                        "layer {}: P-Map {p:?} and R-Map {r:?} disagree spatially",
                        r_head.name()
                    )));
                }
            }
            Architecture::Voxelnet {
                feature_net,
                middle,
                rpn,
                prob_head,
                reg_head,
            } => {
                let mut shape = vec![NOMINAL_POINTS, POINT_FEATURES];
                for l in feature_net {
                    shape = propagate("feature_net", l, shape, &mut plan)?;
                }
                let mut shape = vec![shape[1], dims[0], dims[1], dims[2]];
                for l in middle {
                    shape = propagate("middle", l, shape, &mut plan)?;
                }
                let mut shape = vec![shape[0] * shape[1], 1, shape[2], shape[3]];
                let mut branches: Vec<Vec<usize>> = Vec::new();
                for b in rpn {
                    for l in &b.layers {
                        shape = propagate("rpn", l, shape, &mut plan)?;
                    }
                    let mut up = shape.clone();
                    for l in &b.upsample {
                        up = propagate("rpn", l, up, &mut plan)?;
                    }
                    if let Some(first) = branches.first() {
                        if first[1..] != up[1..] {
                            let name = b.upsample.first().map_or("rpn", |l| l.name());
                            return Err(Error::Structural(format!(
                                "layer {name}: branch output {up:?} does not align with {first:?}"
                            )));
                        }
                    }
                    branches.push(up);
                }
                let Some(first) = branches.first() else {
                    return Err(Error::Structural("RPN needs at least one block".into()));
                };
                let mut joined = first.clone();
                joined[0] = branches.iter().map(|b| b[0]).sum();
                let a = self.anchor.yaws.len();
                expect_filters(prob_head, a)?;
                expect_filters(reg_head, 7 * a)?;
                propagate("prob_head", prob_head, joined.clone(), &mut plan)?;
                propagate("reg_head", reg_head, joined, &mut plan)?;
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape_plan().map(|_| ())
    }

    /// Spatial extent `[D, H, W]` of the output maps.
    pub fn head_dims(&self) -> Result<[usize; 3]> {
        let plan = self.shape_plan()?;
        let out = &plan.last().expect("heads are always planned").output;
        Ok([out[1], out[2], out[3]])
    }

    /// Anchor and residual layout of the output maps.
    pub fn layout(&self) -> Result<MapLayout> {
        let dims = self.head_dims()?;
        Ok(match self.family() {
            Family::Fcn3d => MapLayout {
                anchors_per_cell: 1,
                residual_len: 24,
                cell_dims: dims,
            },
            Family::Voxelnet => MapLayout {
                anchors_per_cell: self.anchor.yaws.len(),
                residual_len: 7,
                cell_dims: dims,
            },
        })
    }

    /// Grid of the dense detector's output cells (one anchor per cell).
    pub fn head_grid(&self) -> Result<VoxelGridSpec> {
        self.grid.resampled(self.head_dims()?)
    }

    /// BEV anchors covering the grid's `(x, y)` extent.
    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        let [_, nx, ny] = self.head_dims()?;
        let ext = self.grid.extent();
        Ok(AnchorGrid {
            origin: [self.grid.origin[0], self.grid.origin[1]],
            cell: [ext[1] / nx as f64, ext[2] / ny as f64],
            dims: [nx, ny],
            size: self.anchor.size,
            z: self.anchor.z,
            yaws: self.anchor.yaws.clone(),
        })
    }

    /// Total anchors, i.e. classification samples per frame.
    pub fn anchor_count(&self) -> Result<usize> {
        Ok(self.layout()?.anchors())
    }

    /// Stored tensors in a fixed order, with their shapes and roles.
    pub fn param_decls(&self) -> Result<Vec<ParamDecl>> {
        let plan = self.shape_plan()?;
        let mut decls = Vec::new();
        match &self.arch {
            Architecture::Fcn3d {
                body,
                p_head,
                r_head,
            } => {
                let c = declare_chain(body, 1, &mut decls);
                declare(p_head, c, &mut decls);
                declare(r_head, c, &mut decls);
            }
            Architecture::Voxelnet {
                feature_net,
                middle,
                rpn,
                prob_head,
                reg_head,
            } => {
                let c = declare_chain(feature_net, POINT_FEATURES, &mut decls);
                let c = declare_chain(middle, c, &mut decls);
                let depth = plan
                    .iter()
                    .rev()
                    .find(|l| l.block == "middle")
                    .map_or(self.grid.dims[0], |l| l.output[1]);
                let mut c = c * depth;
                let mut joined = 0;
                for b in rpn {
                    c = declare_chain(&b.layers, c, &mut decls);
                    joined += declare_chain(&b.upsample, c, &mut decls);
                }
                declare(prob_head, joined, &mut decls);
                declare(reg_head, joined, &mut decls);
            }
        }
        Ok(decls)
    }
}

/// Declares a sequential chain starting at `cin` channels; returns the output channels.
fn declare_chain(layers: &[LayerSpec], mut cin: usize, decls: &mut Vec<ParamDecl>) -> usize {
    for l in layers {
        declare(l, cin, decls);
        if let Some(f) = l.filters() {
            cin = f;
        }
    }
    cin
}

fn expect_filters(l: &LayerSpec, want: usize) -> Result<()> {
    match l.filters() {
        Some(f) if f == want => Ok(()),
        got => Err(Error::Structural(format!(
            "layer {}: head needs {want} output channels, got {got:?}",
            l.name()
        ))),
    }
}

fn declare(layer: &LayerSpec, cin: usize, decls: &mut Vec<ParamDecl>) {
    let n = layer.name();
    let mut push = |name: String, shape: Vec<usize>, role: ParamRole| {
        decls.push(ParamDecl { name, shape, role });
    };
    match layer {
        LayerSpec::Conv3d { kernel, filters, .. } => {
            let k: usize = kernel.iter().product();
            push(
                format!("{n}.weight"),
                vec![*filters, cin, kernel[0], kernel[1], kernel[2]],
                ParamRole::Weight { fan_in: cin * k },
            );
            push(format!("{n}.bias"), vec![*filters], ParamRole::Bias);
        }
        LayerSpec::Conv2d { kernel, filters, .. } => {
            push(
                format!("{n}.weight"),
                vec![*filters, cin, 1, kernel[0], kernel[1]],
                ParamRole::Weight {
                    fan_in: cin * kernel[0] * kernel[1],
                },
            );
            push(format!("{n}.bias"), vec![*filters], ParamRole::Bias);
        }
        LayerSpec::Deconv2d { kernel, stride, filters, .. } => {
            // each output cell receives kernel / stride^2 taps per input channel
            let taps = (kernel[0] * kernel[1]) / (stride[0] * stride[1]).max(1);
            push(
                format!("{n}.weight"),
                vec![cin, *filters, 1, kernel[0], kernel[1]],
                ParamRole::Weight {
                    fan_in: cin * taps.max(1),
                },
            );
            push(format!("{n}.bias"), vec![*filters], ParamRole::Bias);
        }
        LayerSpec::Fc { filters, .. } => {
            push(format!("{n}.weight"), vec![*filters, cin], ParamRole::Weight { fan_in: cin });
            push(format!("{n}.bias"), vec![*filters], ParamRole::Bias);
        }
        LayerSpec::Vfe { filters, .. } => {
            let h = filters / 2;
            push(format!("{n}.fc.weight"), vec![h, cin], ParamRole::Weight { fan_in: cin });
            push(format!("{n}.fc.bias"), vec![h], ParamRole::Bias);
            push(format!("{n}.bn.gamma"), vec![h], ParamRole::Gamma);
            push(format!("{n}.bn.beta"), vec![h], ParamRole::Beta);
            push(format!("{n}.bn.running_mean"), vec![h], ParamRole::RunningMean);
            push(format!("{n}.bn.running_var"), vec![h], ParamRole::RunningVar);
        }
        LayerSpec::BatchNorm { .. } => {
            push(format!("{n}.gamma"), vec![cin], ParamRole::Gamma);
            push(format!("{n}.beta"), vec![cin], ParamRole::Beta);
            push(format!("{n}.running_mean"), vec![cin], ParamRole::RunningMean);
            push(format!("{n}.running_var"), vec![cin], ParamRole::RunningVar);
        }
        LayerSpec::Relu | LayerSpec::Sigmoid => {}
    }
}

/// Output shape and cost of one layer; tensors are `[C, D, H, W]` or `[N, C]`.
fn propagate(
    block: &str,
    layer: &LayerSpec,
    input: Vec<usize>,
    plan: &mut Vec<LayerCost>,
) -> Result<Vec<usize>> {
    let err = |msg: String| Error::Structural(format!("layer {} ({block}): {msg}", layer.name()));
    let (output, flops) = match layer {
        LayerSpec::Conv3d { filters, .. } | LayerSpec::Conv2d { filters, .. } => {
            if input.len() != 4 {
                return Err(err(format!("expects a [C, D, H, W] volume, got {input:?}")));
            }
            let geom = layer.geom().expect("conv layers have a geometry");
            if matches!(layer, LayerSpec::Conv2d { .. }) && input[1] != 1 {
                return Err(err(format!("planar conv on a volume of depth {}", input[1])));
            }
            let out = geom
                .conv_out([input[1], input[2], input[3]])
                .ok_or_else(|| err(format!("kernel {:?} does not fit {input:?}", geom.kernel)))?;
            let spatial: usize = out.iter().product();
            let flops = 2 * geom.kernel_volume() * input[0] * filters * spatial;
            (vec![*filters, out[0], out[1], out[2]], flops)
        }
        LayerSpec::Deconv2d { filters, stride, .. } => {
            if input.len() != 4 || input[1] != 1 {
                return Err(err(format!("expects a [C, 1, H, W] map, got {input:?}")));
            }
            let geom = layer.geom().expect("deconv has a geometry");
            let spatial = input[2] * input[3];
            // every input cell scatters one kernel footprint
            let flops = 2 * geom.kernel_volume() * input[0] * filters * spatial;
            (
                vec![*filters, 1, input[2] * stride[0], input[3] * stride[1]],
                flops,
            )
        }
        LayerSpec::Fc { filters, .. } => {
            if input.len() != 2 {
                return Err(err(format!("expects [N, C] rows, got {input:?}")));
            }
            (vec![input[0], *filters], 2 * input[0] * input[1] * filters)
        }
        LayerSpec::Vfe { filters, .. } => {
            if input.len() != 2 {
                return Err(err(format!("expects [N, C] rows, got {input:?}")));
            }
            (vec![input[0], *filters], input[0] * input[1] * filters)
        }
        LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::BatchNorm { .. } => {
            if input.is_empty() {
                return Err(err("empty input shape".into()));
            }
            (input, 0)
        }
    };
    plan.push(LayerCost {
        block: block.to_string(),
        name: layer.name().to_string(),
        kind: layer.kind().to_string(),
        output: output.clone(),
        flops: flops as u64,
    });
    Ok(output)
}

/// Per-layer FLOP counts (two per multiply-add), in forward order. Point-wise
/// FeatureNet layers are costed at [`NOMINAL_POINTS`] points.
pub fn flops_estimate(config: &NetworkConfig) -> Result<Vec<LayerCost>> {
    Ok(config
        .shape_plan()?
        .into_iter()
        .filter(|c| c.flops > 0)
        .collect())
}
